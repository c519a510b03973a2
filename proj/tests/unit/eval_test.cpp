#include <gtest/gtest.h>

#include <cmath>

#include <nlohmann/json.hpp>

#include "fablelm/eval.hpp"
#include "oracles.hpp"
#include "synthetic_corpus.hpp"
#include "test_util.hpp"

namespace fablelm {
namespace {

using testing::random_batch;
using testing::random_checkpoint;
using testing::TempDir;
using testing::tiny_config;
using testing::write_file;

double naive_ce(const Checkpoint& ck, const std::vector<TokenId>& ids) {
  const TokenBatch b{1, ids.size(), ids};
  const auto logits = forward(ck, b);
  const std::size_t V = ck.config.vocab_size;
  double sum = 0;
  for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
    double z = 0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(double(logits.data[t * V + v]));
    sum -= double(logits.data[t * V + ids[t + 1]]) - std::log(z);
  }
  return sum;
}

TEST(Intrinsic, AveragesOverEveryPositionRegardlessOfBatching) {
  const auto ck = random_checkpoint(tiny_config(11, true), 1, 0.2);
  const auto tb = random_batch(11, 7, 10, 2);
  const auto data = pack_stream(tb.ids, 10, 11);
  double sum = 0;
  for (std::size_t b = 0; b < 7; ++b) {
    const auto blk = data.block(b);
    sum += naive_ce(ck, {blk.begin(), blk.end()});
  }
  for (const std::size_t batch : {1u, 3u, 8u}) {
    const auto r = intrinsic(ck, data, nullptr, batch);
    EXPECT_EQ(r.positions, 7u * 9);
    EXPECT_NEAR(r.ce, sum / 63.0, 1e-5);
    EXPECT_NEAR(r.ppl, std::exp(r.ce), 1e-9 * r.ppl);
  }
  EXPECT_EQ(intrinsic(ck, data, nullptr, 8, 2).positions, 18u);
  EXPECT_THROW(intrinsic(ck, data.slice(0, 0)), InvalidArgument);
}

struct TinyLm {
  TokenizerModel tok;
  Checkpoint ckpt;
};

TinyLm tiny_lm() {
  auto tok = train_bpe(make_documents(testing::synthetic_fables(30, 1)), 60);
  auto cfg = tiny_config(static_cast<std::uint32_t>(tok.vocab_size()), true, 48);
  return {std::move(tok), random_checkpoint(cfg, 3, 0.3)};
}

TEST(Probes, ContinuationLogprobIsTheChainRule) {
  const auto lm = tiny_lm();
  const std::string prefix = "Vulpea a";
  const std::string cont = "fugit repede";
  std::vector<TokenId> ids{lm.tok.special().bos};
  const auto p = lm.tok.encode(prefix);
  ids.insert(ids.end(), p.begin(), p.end());
  const auto full_prefix = ids;
  const auto c = lm.tok.encode(cont);
  ids.insert(ids.end(), c.begin(), c.end());
  // log p(cont | prefix) = log p(prefix + cont) - log p(prefix), both from position 1.
  const double expect = -naive_ce(lm.ckpt, ids) + naive_ce(lm.ckpt, full_prefix);
  EXPECT_NEAR(continuation_logprob(lm.ckpt, lm.tok, prefix, cont), expect, 1e-4);
  EXPECT_LT(continuation_logprob(lm.ckpt, lm.tok, prefix, cont), 0.0);
  EXPECT_THROW(continuation_logprob(lm.ckpt, lm.tok, prefix, "   "), InvalidArgument);
}

TEST(Probes, LongPrefixKeepsTheTail) {
  const auto lm = tiny_lm();
  std::string prefix;
  for (int i = 0; i < 40; ++i) prefix += "Vulpea a fugit. ";
  const double lp = continuation_logprob(lm.ckpt, lm.tok, prefix, "Lupul");
  EXPECT_TRUE(std::isfinite(lp));
}

TEST(Probes, AgreementCountsTiesAsWrong) {
  EXPECT_TRUE(pair_correct(-1.0, -2.0));
  EXPECT_FALSE(pair_correct(-2.0, -2.0));
  const auto lm = tiny_lm();
  std::vector<MinimalPair> pairs{{"Vulpea", "a fugit", "au fugit", "number"},
                                 {"Lupul", "a venit", "a venit", "same"},
                                 {"Ursul", "este", "sunt", "number"}};
  const auto r = agreement(lm.ckpt, lm.tok, pairs);
  ASSERT_EQ(r.correct.size(), 3u);
  EXPECT_FALSE(r.correct[1]);  // identical continuations tie
  EXPECT_EQ(r.by_phenomenon.at("number").second, 2u);
  std::size_t right = 0;
  for (const bool b : r.correct) right += b ? 1 : 0;
  EXPECT_DOUBLE_EQ(r.accuracy, right / 3.0);
  EXPECT_THROW(agreement(lm.ckpt, lm.tok, {}), InvalidArgument);
}

TEST(Probes, LoadValidates) {
  TempDir dir;
  write_file(dir / "p.jsonl",
             "{\"prefix\":\"Fata\",\"grammatical\":\"este\",\"ungrammatical\":\"sunt\"}\n\n");
  const auto ps = load_probes(dir / "p.jsonl");
  ASSERT_EQ(ps.size(), 1u);
  EXPECT_EQ(ps[0].phenomenon, "unspecified");
  write_file(dir / "same.jsonl", "{\"prefix\":\"x\",\"grammatical\":\"a\",\"ungrammatical\":\"a\"}\n");
  EXPECT_THROW(load_probes(dir / "same.jsonl"), FormatError);
  write_file(dir / "bad.jsonl", "{\"prefix\":\"x\"}\n");
  EXPECT_THROW(load_probes(dir / "bad.jsonl"), FormatError);
}

TEST(Gazetteer, LoadRulesAndLongestSuffixFirst) {
  TempDir dir;
  write_file(dir / "g.jsonl",
             "{\"surface\":\"Vulpea\",\"lemma\":\"vulpe\"}\n"
             "{\"surface\":\"Moș  Martin\",\"lemma\":\"urs\"}\n"
             "{\"surface\":\"lup\",\"lemma\":\"lup\"}\n");
  write_file(dir / "r.jsonl",
             "{\"suffix\":\"ul\",\"replacement\":\"\"}\n{\"suffix\":\"ului\",\"replacement\":\"\"}\n");
  const auto g = Gazetteer::load(dir / "g.jsonl", dir / "r.jsonl");
  EXPECT_EQ(g.max_entry_words(), 2u);
  EXPECT_EQ(g.suffix_rules[0].first, "ului");
  EXPECT_EQ(g.lemmatize("VULPEA"), "vulpe");
  EXPECT_EQ(g.lemmatize("lupului"), "lup");
  EXPECT_EQ(g.lemmatize("lupul"), "lup");
  EXPECT_EQ(g.lemmatize("ul"), std::nullopt);  // the rule needs a non-empty stem
  EXPECT_EQ(g.lemmatize("copacul"), std::nullopt);
  EXPECT_EQ(entity_mentions("„Moș Martin” și lupul, apoi VULPEA!", g),
            (std::vector<std::string>{"urs", "lup", "vulpe"}));
  write_file(dir / "bad.jsonl", "{\"surface\":\"x\"}\n");
  EXPECT_THROW(Gazetteer::load(dir / "bad.jsonl"), FormatError);
}

TEST(Entropy, MatchesNaiveOracle) {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    std::vector<std::string> labels(1 + uniform_below(rng, 20));
    for (auto& l : labels) l = std::string(1, char('a' + uniform_below(rng, 5)));
    EXPECT_NEAR(normalized_entropy(labels), testing::naive_normalized_entropy(labels), 1e-12);
  }
  EXPECT_EQ(normalized_entropy({}), 0.0);
}

TEST(Grammar, IndividualChecks) {
  EXPECT_EQ(BuiltinGrammarChecker::doubled_words("el el a venit. Da, da"), 1u);
  EXPECT_EQ(BuiltinGrammarChecker::doubled_words("„Vino” vino"), 1u);
  EXPECT_EQ(BuiltinGrammarChecker::lowercase_sentence_starts("ana. ion! Maria? ștefan"), 3u);
  EXPECT_EQ(BuiltinGrammarChecker::lowercase_sentence_starts("„Bine”, a zis. „da”"), 1u);
  EXPECT_EQ(BuiltinGrammarChecker::lowercase_sentence_starts("Da. 2 lupi au venit."), 0u);  // a digit opens the sentence
  EXPECT_EQ(BuiltinGrammarChecker::unbalanced_quotes("„a” \"b\" «c»"), 0u);
  EXPECT_EQ(BuiltinGrammarChecker::unbalanced_quotes("„a \"b «c"), 3u);
}

TEST(Grammar, ScoreClamps) {
  EXPECT_EQ(grammar_score(10, "două cuvinte"), 0.0);
  EXPECT_EQ(grammar_score(0, ""), 0.0);
  EXPECT_DOUBLE_EQ(grammar_score(1, "a b c d"), 0.75);
}

TEST(Diversity, DistinctAndBleuMatchNaiveOracles) {
  Rng rng(9);
  const std::vector<std::string> lex{"a", "b", "c", "d", "vulpea", "lupul"};
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::string> texts(2 + uniform_below(rng, 3));
    for (auto& t : texts) {
      const auto n = uniform_below(rng, 9);
      for (std::uint64_t k = 0; k < n; ++k) t += (k ? " " : "") + lex[uniform_below(rng, lex.size())];
    }
    for (std::size_t n = 1; n <= 3; ++n) {
      EXPECT_NEAR(distinct_n(texts, n), testing::naive_distinct_n(texts, n), 1e-12);
    }
    EXPECT_NEAR(self_bleu(texts), testing::naive_self_bleu(texts, 4), 1e-12);
  }
}

TEST(Diversity, HandComputedBleu) {
  // Identical hypothesis and reference: every precision is 1.
  const std::vector<std::string> h{"a", "b", "c", "d"};
  EXPECT_NEAR(sentence_bleu(h, {h}, 4), 1.0, 1e-15);
  // Unigrams 2/2, bigrams 1/1, trigram and 4-gram orders have no n-grams: 1/(0+1).
  // Reference length 3 > 2 gives a brevity penalty of exp(1 - 3/2).
  const std::vector<std::string> h2{"a", "b"};
  EXPECT_NEAR(sentence_bleu(h2, {{"a", "b", "c"}}, 4), std::exp(1.0 - 1.5), 1e-12);
  EXPECT_EQ(sentence_bleu({}, {h}, 4), 0.0);
  EXPECT_THROW(sentence_bleu(h, {}, 4), InvalidArgument);
  EXPECT_THROW(self_bleu({"x"}), InvalidArgument);
  EXPECT_THROW(distinct_n({"x"}, 0), InvalidArgument);
}

TEST(Readability, SyllablesAndSentences) {
  EXPECT_EQ(count_syllables("vulpea"), 2u);
  EXPECT_EQ(count_syllables("pădure"), 3u);
  EXPECT_EQ(count_syllables("IARNA"), 2u);
  EXPECT_EQ(count_syllables("țară"), 2u);
  EXPECT_EQ(count_syllables("și"), 1u);
  EXPECT_EQ(count_syllables("pst"), 0u);
  EXPECT_EQ(count_sentences("Unu. Doi! Trei"), 3u);
  EXPECT_EQ(count_sentences("..."), 1u);
  EXPECT_EQ(readability(""), 0.0);
  // "Ursul doarme." : urs-ul 2, doar-me 2; 2 words, 1 sentence.
  EXPECT_NEAR(readability("Ursul doarme."), testing::naive_flesch(2, 1, 4), 1e-12);
}

TEST(Throughput, CountsGeneratedTokens) {
  const auto ck = random_checkpoint(tiny_config(11, true, 16), 1);
  const auto r = throughput(ck, 4, 8, 3, 3, 1);
  EXPECT_EQ(r.tokens_per_run, 24u);
  EXPECT_EQ(r.samples.size(), 3u);
  EXPECT_EQ(r.tokens_per_sec, median(r.samples));
  EXPECT_GT(r.tokens_per_sec, 0.0);
  EXPECT_THROW(throughput(ck, 10, 8, 1, 1), InvalidArgument);
  EXPECT_THROW(throughput(ck, 1, 1, 1, 0), InvalidArgument);
}

TEST(Median, OddEvenEmpty) {
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_THROW(median({}), InvalidArgument);
}

TEST(EvalReport, OmitsAbsentMetrics) {
  EvalReport r;
  r.ce = 1.5;
  r.ppl = std::exp(1.5);
  r.distinct_n[2] = 0.75;
  const auto j = nlohmann::json::parse(r.to_json());
  EXPECT_EQ(j.size(), 3u);
  EXPECT_EQ(j["distinct_n"]["2"], 0.75);
  EXPECT_FALSE(j.contains("self_bleu"));
  EXPECT_EQ(nlohmann::json::parse(EvalReport{}.to_json()).size(), 0u);
}

}  // namespace
}  // namespace fablelm
