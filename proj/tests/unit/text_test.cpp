#include <gtest/gtest.h>

#include "fablelm/corpus.hpp"
#include "fablelm/utf8.hpp"
#include "test_util.hpp"

namespace fablelm {
namespace {

using testing::TempDir;
using testing::write_file;

TEST(Utf8, AcceptsRomanianAndRejectsMalformed) {
  EXPECT_TRUE(utf8::is_valid("Vulpea șireată și ţânţarul „mic”"));
  EXPECT_TRUE(utf8::is_valid("\xF0\x9F\x98\x80"));  // 4-byte sequence
  EXPECT_EQ(utf8::find_invalid("ab\xC3"), 2u);       // truncated
  EXPECT_EQ(utf8::find_invalid("a\xC0\xAF"), 1u);    // overlong '/'
  EXPECT_EQ(utf8::find_invalid("\xED\xA0\x80"), 0u); // surrogate
  EXPECT_EQ(utf8::find_invalid("\xF4\x90\x80\x80"), 0u);  // past U+10FFFF
  EXPECT_EQ(utf8::find_invalid("x\x80"), 1u);        // stray continuation
}

TEST(Utf8, SplitLengthLower) {
  const std::string s = "ăȘb";
  EXPECT_EQ(utf8::length(s), 3u);
  EXPECT_EQ(utf8::split_chars(s), (std::vector<std::string>{"ă", "Ș", "b"}));
  EXPECT_EQ(utf8::to_lower("ĂÂÎȘȚŞŢ Lup"), "ăâîșțşţ lup");
  EXPECT_EQ(utf8::to_lower("Ö×"), "ö×");
  EXPECT_EQ(utf8::to_lower("Ω"), "Ω");  // outside the handled set
}

TEST(Normalize, LineEndingsAndTrailingSpace) {
  EXPECT_EQ(normalize("a  \r\nb\t\rc\n\n  \n"), "a\nb\nc");
  EXPECT_EQ(normalize("  \n\t"), "");
  EXPECT_EQ(normalize("  leading kept"), "  leading kept");
  EXPECT_THROW(normalize("bad\xFF"), FormatError);
}

TEST(Normalize, LeavesDiacriticsAlone) {
  // Decomposed "ă" (a + combining breve) must not be composed.
  const std::string decomposed = "a\xCC\x86";
  EXPECT_EQ(normalize(decomposed), decomposed);
}

TEST(Corpus, PlainLinesDropsEmpty) {
  TempDir dir;
  write_file(dir / "c.txt", "Prima poveste.\r\n\n   \nA doua poveste.  \n");
  const auto docs = load_corpus(dir / "c.txt", CorpusFormat::kPlainLines);
  ASSERT_EQ(docs.size(), 2u);
  EXPECT_EQ(docs[0], (Document{"0", "Prima poveste."}));
  EXPECT_EQ(docs[1], (Document{"1", "A doua poveste."}));
}

TEST(Corpus, JsonlKeepsMultilineStories) {
  TempDir dir;
  write_file(dir / "c.jsonl",
             "{\"text\": \"Rândul unu.\\nRândul doi.\", \"extra\": 1}\n\n{\"text\": \"  \"}\n"
             "{\"text\": \"Alta.\"}\n");
  const auto docs = load_corpus(dir / "c.jsonl", CorpusFormat::kJsonl);
  ASSERT_EQ(docs.size(), 2u);
  EXPECT_EQ(docs[0].text, "Rândul unu.\nRândul doi.");
  EXPECT_EQ(docs[1].id, "1");
}

TEST(Corpus, Errors) {
  TempDir dir;
  write_file(dir / "bad.jsonl", "{\"txt\": \"x\"}\n");
  EXPECT_THROW(load_corpus(dir / "bad.jsonl", CorpusFormat::kJsonl), FormatError);
  write_file(dir / "torn.jsonl", "{\"text\": \"x\"\n");
  EXPECT_THROW(load_corpus(dir / "torn.jsonl", CorpusFormat::kJsonl), FormatError);
  write_file(dir / "empty.txt", "\n \n");
  EXPECT_THROW(load_corpus(dir / "empty.txt", CorpusFormat::kPlainLines), FormatError);
  write_file(dir / "utf.txt", "ok\n\xC3\x28\n");
  EXPECT_THROW(load_corpus(dir / "utf.txt", CorpusFormat::kPlainLines), FormatError);
  EXPECT_THROW(load_corpus(dir / "missing.txt", CorpusFormat::kPlainLines), IoError);
  EXPECT_THROW(parse_corpus_format("csv"), InvalidArgument);
}

TEST(Corpus, RejectsOversizedDocument) {
  TempDir dir;
  write_file(dir / "big.txt", std::string(kMaxDocumentBytes + 1, 'a') + "\n");
  EXPECT_THROW(load_corpus(dir / "big.txt", CorpusFormat::kPlainLines), FormatError);
}

TEST(Corpus, StatsCountCodePoints) {
  const auto docs = make_documents({"ăăă", "", "ab"});
  const auto s = corpus_stats(docs);
  EXPECT_EQ(s.doc_count, 2u);
  EXPECT_EQ(s.char_count, 5u);
  EXPECT_DOUBLE_EQ(s.mean_chars_per_doc, 2.5);
  EXPECT_EQ(corpus_stats({}).mean_chars_per_doc, 0.0);
}

}  // namespace
}  // namespace fablelm
