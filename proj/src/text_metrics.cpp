#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "fablelm/eval.hpp"
#include "fablelm/utf8.hpp"

namespace fablelm {
namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

// Punctuation stripped from word edges: ASCII punctuation plus the
// typographic quotes and dashes common in Romanian text.
bool is_edge_punct(const std::string& ch) {
  if (ch.size() == 1) {
    const auto c = static_cast<unsigned char>(ch[0]);
    return c < 0x80 && std::ispunct(c);
  }
  static const char* const kMarks[] = {"„", "”", "“", "«", "»", "—", "–", "…", "’", "‘"};
  for (const char* m : kMarks) {
    if (ch == m) return true;
  }
  return false;
}

std::string strip_edges(const std::string& token) {
  auto chars = utf8::split_chars(token);
  std::size_t b = 0, e = chars.size();
  while (b < e && is_edge_punct(chars[b])) ++b;
  while (e > b && is_edge_punct(chars[e - 1])) --e;
  std::string out;
  for (std::size_t i = b; i < e; ++i) out += chars[i];
  return out;
}

// Lowercased words with edge punctuation removed; empty results dropped.
std::vector<std::string> normalized_words(const std::string& text) {
  std::vector<std::string> out;
  for (const auto& w : split_words(text)) {
    auto s = utf8::to_lower(strip_edges(w));
    if (!s.empty()) out.push_back(std::move(s));
  }
  return out;
}

bool is_lower_letter(const std::string& ch) {
  if (ch.size() == 1) return ch[0] >= 'a' && ch[0] <= 'z';
  static const char* const kLower[] = {"ă", "â", "î", "ș", "ț", "ş", "ţ"};
  for (const char* m : kLower) {
    if (ch == m) return true;
  }
  return false;
}

bool is_letter_or_digit(const std::string& ch) {
  if (ch.size() == 1) return std::isalnum(static_cast<unsigned char>(ch[0])) != 0;
  return !is_edge_punct(ch);
}

std::string join(const std::vector<std::string>& words, std::size_t from, std::size_t n,
                 char sep) {
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out += sep;
    out += words[from + i];
  }
  return out;
}

std::string collapse_lower(const std::string& s) {
  std::string out;
  for (const auto& w : split_words(s)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return utf8::to_lower(out);
}

}  // namespace

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t b = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > b) out.push_back(text.substr(b, i - b));
  }
  return out;
}

// ---- Gazetteer ----------------------------------------------------------------

void Gazetteer::add(const std::string& surface, const std::string& lemma) {
  const std::string key = collapse_lower(surface);
  const std::string lem = collapse_lower(lemma);
  if (key.empty() || lem.empty()) throw InvalidArgument("gazetteer entries need a surface and a lemma");
  entries[key] = lem;
  lemmas_.insert(lem);
  max_words_ = std::max(max_words_, split_words(key).size());
}

void Gazetteer::add_rule(const std::string& suffix, const std::string& replacement) {
  if (suffix.empty()) throw InvalidArgument("suffix rules need a non-empty suffix");
  const auto pos = std::find_if(suffix_rules.begin(), suffix_rules.end(),
                                [&](const auto& r) { return r.first.size() < suffix.size(); });
  suffix_rules.insert(pos, {utf8::to_lower(suffix), utf8::to_lower(replacement)});
}

std::optional<std::string> Gazetteer::lemmatize(const std::string& word) const {
  const std::string w = utf8::to_lower(word);
  if (const auto it = entries.find(w); it != entries.end()) return it->second;
  for (const auto& [suffix, repl] : suffix_rules) {
    if (w.size() <= suffix.size() || !w.ends_with(suffix)) continue;
    const std::string cand = w.substr(0, w.size() - suffix.size()) + repl;
    if (const auto it = entries.find(cand); it != entries.end()) return it->second;
    if (lemmas_.count(cand)) return cand;
  }
  return std::nullopt;
}

Gazetteer Gazetteer::load(const std::filesystem::path& entries_path,
                          const std::optional<std::filesystem::path>& rules_path) {
  Gazetteer g;
  auto each_record = [](const std::filesystem::path& p, auto&& fn) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open " + p.string());
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        fn(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(p.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  };
  each_record(entries_path, [&](const nlohmann::json& j) {
    g.add(j.at("surface").get<std::string>(), j.at("lemma").get<std::string>());
  });
  if (rules_path) {
    each_record(*rules_path, [&](const nlohmann::json& j) {
      g.add_rule(j.at("suffix").get<std::string>(), j.at("replacement").get<std::string>());
    });
  }
  return g;
}

std::vector<std::string> entity_mentions(const std::string& text, const Gazetteer& gaz) {
  const auto words = normalized_words(text);
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < words.size()) {
    bool found = false;
    for (std::size_t k = std::min(gaz.max_entry_words(), words.size() - i); k >= 1; --k) {
      const auto it = gaz.entries.find(join(words, i, k, ' '));
      if (it != gaz.entries.end()) {
        out.push_back(it->second);
        i += k;
        found = true;
        break;
      }
    }
    if (found) continue;
    if (auto lemma = gaz.lemmatize(words[i])) out.push_back(std::move(*lemma));
    ++i;
  }
  return out;
}

double normalized_entropy(const std::vector<std::string>& labels) {
  std::map<std::string, std::size_t> counts;
  for (const auto& l : labels) ++counts[l];
  if (counts.size() <= 1) return 0.0;
  const auto n = static_cast<double>(labels.size());
  double h = 0.0;
  for (const auto& [_, c] : counts) {
    const double p = static_cast<double>(c) / n;
    h -= p * std::log2(p);
  }
  return std::clamp(h / std::log2(static_cast<double>(counts.size())), 0.0, 1.0);
}

double entity_coherence(const std::string& text, const Gazetteer& gaz) {
  return normalized_entropy(entity_mentions(text, gaz));
}

// ---- Grammar ------------------------------------------------------------------

std::size_t BuiltinGrammarChecker::doubled_words(const std::string& text) {
  const auto raw = split_words(text);
  std::size_t errors = 0;
  std::string prev;
  for (const auto& token : raw) {
    const std::string w = utf8::to_lower(strip_edges(token));
    if (!w.empty() && w == prev) ++errors;
    // A clause break between two equal words ("Da, da") is not a doubling.
    const char last = token.back();
    const bool breaks = last == '.' || last == ',' || last == '!' || last == '?' || last == ';' ||
                        last == ':';
    prev = breaks ? std::string() : w;
  }
  return errors;
}

std::size_t BuiltinGrammarChecker::lowercase_sentence_starts(const std::string& text) {
  std::size_t errors = 0;
  bool at_start = true;
  for (const auto& ch : utf8::split_chars(text)) {
    if (ch == "." || ch == "!" || ch == "?") {
      at_start = true;
      continue;
    }
    if (!at_start) continue;
    if (ch.size() == 1 && is_space(ch[0])) continue;
    if (is_edge_punct(ch)) continue;
    if (is_lower_letter(ch)) ++errors;
    if (is_letter_or_digit(ch)) at_start = false;
  }
  return errors;
}

std::size_t BuiltinGrammarChecker::unbalanced_quotes(const std::string& text) {
  std::size_t ascii = 0, open = 0, close = 0, gopen = 0, gclose = 0;
  for (const auto& ch : utf8::split_chars(text)) {
    if (ch == "\"") ++ascii;
    else if (ch == "„") ++open;
    else if (ch == "”" || ch == "“") ++close;
    else if (ch == "«") ++gopen;
    else if (ch == "»") ++gclose;
  }
  return (ascii % 2) + (open != close ? 1 : 0) + (gopen != gclose ? 1 : 0);
}

std::size_t BuiltinGrammarChecker::count_errors(const std::string& text) const {
  return doubled_words(text) + lowercase_sentence_starts(text) + unbalanced_quotes(text);
}

double grammar_score(std::size_t error_count, const std::string& text) {
  const auto words = split_words(text).size();
  if (words == 0) return 0.0;
  const double s = 1.0 - static_cast<double>(error_count) / static_cast<double>(words);
  return std::clamp(s, 0.0, 1.0);
}

double grammar_score(const GrammarChecker& checker, const std::string& text) {
  return grammar_score(checker.count_errors(text), text);
}

// ---- Diversity ----------------------------------------------------------------

double distinct_n(const std::vector<std::string>& texts, std::size_t n) {
  if (n == 0) throw InvalidArgument("distinct_n needs n >= 1");
  std::unordered_map<std::string, std::size_t> seen;
  std::size_t total = 0;
  for (const auto& t : texts) {
    const auto words = split_words(t);
    for (std::size_t i = 0; i + n <= words.size(); ++i) {
      ++seen[join(words, i, n, '\x1f')];
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(seen.size()) / static_cast<double>(total);
}

double sentence_bleu(const std::vector<std::string>& hyp,
                     const std::vector<std::vector<std::string>>& refs, std::size_t max_n) {
  if (max_n == 0) throw InvalidArgument("BLEU needs max_n >= 1");
  if (refs.empty()) throw InvalidArgument("BLEU needs at least one reference");
  if (hyp.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    std::map<std::string, std::size_t> hyp_counts;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[join(hyp, i, n, '\x1f')];
    std::map<std::string, std::size_t> max_ref;
    for (const auto& ref : refs) {
      std::map<std::string, std::size_t> c;
      for (std::size_t i = 0; i + n <= ref.size(); ++i) ++c[join(ref, i, n, '\x1f')];
      for (const auto& [g, k] : c) max_ref[g] = std::max(max_ref[g], k);
    }
    std::size_t matches = 0, total = 0;
    for (const auto& [g, k] : hyp_counts) {
      total += k;
      const auto it = max_ref.find(g);
      if (it != max_ref.end()) matches += std::min(k, it->second);
    }
    const double p = matches > 0 ? static_cast<double>(matches) / static_cast<double>(total)
                                 : 1.0 / static_cast<double>(total + 1);
    log_sum += std::log(p);
  }
  const auto c = static_cast<double>(hyp.size());
  std::size_t best = refs[0].size();
  for (const auto& ref : refs) {
    const auto d = [&](std::size_t len) {
      return len > hyp.size() ? len - hyp.size() : hyp.size() - len;
    };
    if (d(ref.size()) < d(best) || (d(ref.size()) == d(best) && ref.size() < best)) {
      best = ref.size();
    }
  }
  const auto r = static_cast<double>(best);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

double self_bleu(const std::vector<std::string>& texts, std::size_t max_n) {
  if (texts.size() < 2) throw InvalidArgument("self-BLEU needs at least 2 texts");
  std::vector<std::vector<std::string>> tokens;
  tokens.reserve(texts.size());
  for (const auto& t : texts) tokens.push_back(split_words(t));
  double sum = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::vector<std::vector<std::string>> refs;
    for (std::size_t j = 0; j < tokens.size(); ++j) {
      if (j != i) refs.push_back(tokens[j]);
    }
    sum += sentence_bleu(tokens[i], refs, max_n);
  }
  return sum / static_cast<double>(texts.size());
}

// ---- Readability --------------------------------------------------------------

std::size_t count_syllables(const std::string& word) {
  static const std::vector<std::string> kVowels = {"a", "ă", "â", "e", "i", "î", "o", "u"};
  static const std::vector<std::string> kDiphthongs = {"ea", "ia", "ie", "io",
                                                        "iu", "oa", "ua", "uă"};
  const auto chars = utf8::split_chars(utf8::to_lower(word));
  auto vowel = [&](const std::string& c) {
    return std::find(kVowels.begin(), kVowels.end(), c) != kVowels.end();
  };
  std::size_t count = 0;
  std::size_t i = 0;
  while (i < chars.size()) {
    if (!vowel(chars[i])) {
      ++i;
      continue;
    }
    ++count;
    if (i + 1 < chars.size() && vowel(chars[i + 1]) &&
        std::find(kDiphthongs.begin(), kDiphthongs.end(), chars[i] + chars[i + 1]) !=
            kDiphthongs.end()) {
      i += 2;
    } else {
      i += 1;
    }
  }
  return count;
}

std::size_t count_sentences(const std::string& text) {
  std::size_t sentences = 0;
  bool has_word = false;
  for (const char c : text) {
    if (c == '.' || c == '!' || c == '?') {
      if (has_word) ++sentences;
      has_word = false;
    } else if (!is_space(c)) {
      has_word = true;
    }
  }
  if (has_word) ++sentences;
  return std::max<std::size_t>(1, sentences);
}

double readability(const std::string& text) {
  const auto words = split_words(text);
  if (words.empty()) return 0.0;
  std::size_t syllables = 0;
  for (const auto& w : words) syllables += count_syllables(w);
  const auto W = static_cast<double>(words.size());
  const auto S = static_cast<double>(count_sentences(text));
  return 206.835 - 1.015 * (W / S) - 84.6 * (static_cast<double>(syllables) / W);
}

}  // namespace fablelm
