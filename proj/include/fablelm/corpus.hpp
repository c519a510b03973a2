#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "fablelm/error.hpp"

namespace fablelm {

/// One story (or one sentence, for line-granular corpora). `text` is
/// normalized: non-empty, no CR, no trailing whitespace.
struct Document {
  std::string id;
  std::string text;

  friend bool operator==(const Document&, const Document&) = default;
};

struct CorpusStats {
  std::size_t doc_count = 0;
  std::size_t char_count = 0;  // code points
  double mean_chars_per_doc = 0.0;
};

enum class CorpusFormat { kPlainLines, kJsonl };

/// Parses "lines" / "jsonl" (the CLI spelling).
CorpusFormat parse_corpus_format(std::string_view name);

/// Largest accepted document, in bytes.
inline constexpr std::size_t kMaxDocumentBytes = 10u * 1024u * 1024u;

/// Light cleanup: CRLF/CR become LF, trailing spaces/tabs are removed from
/// every line and trailing blank lines from the end. Bytes are otherwise left
/// alone (no NFC/NFD, diacritics intact). Throws FormatError on invalid UTF-8.
std::string normalize(std::string_view raw);

/// Reads a corpus. Plain-lines yields one document per non-empty line; JSONL
/// yields one per record's "text" field. Empty documents are dropped, ids are
/// assigned 0, 1, 2, ... in file order.
std::vector<Document> load_corpus(const std::filesystem::path& path, CorpusFormat format);

/// Builds documents from in-memory texts with the same normalization and
/// filtering as load_corpus, without the empty-corpus error.
std::vector<Document> make_documents(const std::vector<std::string>& texts);

CorpusStats corpus_stats(const std::vector<Document>& docs);

}  // namespace fablelm
