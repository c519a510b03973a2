#include "fablelm/corpus.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "fablelm/utf8.hpp"

namespace fablelm {
namespace {

bool is_trailing_space(char c) { return c == ' ' || c == '\t' || c == '\v' || c == '\f'; }

void check_size(std::size_t bytes, std::size_t line_no) {
  if (bytes > kMaxDocumentBytes) {
    throw FormatError("document on line " + std::to_string(line_no) + " exceeds " +
                      std::to_string(kMaxDocumentBytes) + " bytes");
  }
}

}  // namespace

CorpusFormat parse_corpus_format(std::string_view name) {
  if (name == "lines" || name == "plain-lines") return CorpusFormat::kPlainLines;
  if (name == "jsonl") return CorpusFormat::kJsonl;
  throw InvalidArgument("unknown corpus format '" + std::string(name) +
                        "' (expected lines or jsonl)");
}

std::string normalize(std::string_view raw) {
  if (const auto bad = utf8::find_invalid(raw)) {
    throw FormatError("invalid UTF-8 at byte " + std::to_string(*bad));
  }
  std::string out;
  out.reserve(raw.size());
  std::size_t line_start = 0;
  auto end_line = [&] {
    while (out.size() > line_start && is_trailing_space(out.back())) out.pop_back();
  };
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const char c = raw[i];
    if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < raw.size() && raw[i + 1] == '\n') ++i;
      end_line();
      out.push_back('\n');
      line_start = out.size();
    } else {
      out.push_back(c);
    }
  }
  end_line();
  while (!out.empty() && (out.back() == '\n' || is_trailing_space(out.back()))) out.pop_back();
  // Whitespace-only input collapses to "" only if nothing visible remains.
  if (out.find_first_not_of(" \t\v\f\n") == std::string::npos) out.clear();
  return out;
}

std::vector<Document> make_documents(const std::vector<std::string>& texts) {
  std::vector<Document> docs;
  for (const auto& t : texts) {
    std::string norm = normalize(t);
    if (norm.empty()) continue;
    docs.push_back({std::to_string(docs.size()), std::move(norm)});
  }
  return docs;
}

std::vector<Document> load_corpus(const std::filesystem::path& path, CorpusFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file " + path.string());

  std::vector<Document> docs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string text;
    if (format == CorpusFormat::kPlainLines) {
      check_size(line.size(), line_no);
      text = normalize(line);
    } else {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      nlohmann::json record;
      try {
        record = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) +
                          ": malformed JSON record: " + e.what());
      }
      if (!record.is_object() || !record.contains("text") || !record["text"].is_string()) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) +
                          ": record has no string field \"text\"");
      }
      const auto& raw = record["text"].get_ref<const std::string&>();
      check_size(raw.size(), line_no);
      text = normalize(raw);
    }
    if (text.empty()) continue;
    docs.push_back({std::to_string(docs.size()), std::move(text)});
  }
  if (in.bad()) throw IoError("read error on " + path.string());
  if (docs.empty()) throw FormatError("corpus " + path.string() + " is empty after filtering");
  return docs;
}

CorpusStats corpus_stats(const std::vector<Document>& docs) {
  CorpusStats stats;
  stats.doc_count = docs.size();
  for (const auto& d : docs) stats.char_count += utf8::length(d.text);
  stats.mean_chars_per_doc =
      docs.empty() ? 0.0 : static_cast<double>(stats.char_count) / static_cast<double>(docs.size());
  return stats;
}

}  // namespace fablelm
