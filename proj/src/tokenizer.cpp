#include "fablelm/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "fablelm/utf8.hpp"

namespace fablelm {
namespace {

constexpr double kUnkPenalty = 10.0;

std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(a) << 32) | b;
}

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

}  // namespace

std::string_view to_string(TokenizerKind kind) {
  return kind == TokenizerKind::kBpe ? "bpe" : "unigram";
}

TokenizerKind parse_tokenizer_kind(std::string_view name) {
  if (name == "bpe") return TokenizerKind::kBpe;
  if (name == "unigram") return TokenizerKind::kUnigram;
  throw InvalidArgument("unknown tokenizer kind '" + std::string(name) +
                        "' (expected bpe or unigram)");
}

std::vector<std::string> pre_tokenize(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) {
      std::string w(kWordBoundary);
      w.append(text.substr(start, i - start));
      words.push_back(std::move(w));
    }
  }
  return words;
}

TokenizerModel TokenizerModel::bpe(std::vector<Piece> pieces, std::vector<MergeRule> merges) {
  TokenizerModel m;
  m.kind_ = TokenizerKind::kBpe;
  for (const auto s : kSpecialPieces) m.pieces_.push_back({std::string(s), 0.0});
  for (auto& p : pieces) m.pieces_.push_back(std::move(p));
  m.merges_ = std::move(merges);
  m.build_indexes();
  return m;
}

TokenizerModel TokenizerModel::unigram(std::vector<Piece> pieces) {
  TokenizerModel m;
  m.kind_ = TokenizerKind::kUnigram;
  for (const auto s : kSpecialPieces) m.pieces_.push_back({std::string(s), 0.0});
  for (auto& p : pieces) m.pieces_.push_back(std::move(p));
  m.build_indexes();
  return m;
}

void TokenizerModel::build_indexes() {
  index_.clear();
  merge_rank_.clear();
  max_piece_chars_ = 1;
  double min_score = 0.0;
  for (std::size_t id = 0; id < pieces_.size(); ++id) {
    const auto& p = pieces_[id];
    if (id < kNumSpecial) {
      if (p.text != kSpecialPieces[id]) {
        throw FormatError("special token " + std::to_string(id) + " must be " +
                          std::string(kSpecialPieces[id]));
      }
      continue;
    }
    if (p.text.empty()) throw FormatError("empty piece at id " + std::to_string(id));
    if (!utf8::is_valid(p.text)) throw FormatError("piece " + std::to_string(id) + " is not UTF-8");
    if (!std::isfinite(p.score)) throw FormatError("non-finite score for piece " + p.text);
    if (std::find(std::begin(kSpecialPieces), std::end(kSpecialPieces), p.text) !=
        std::end(kSpecialPieces)) {
      throw FormatError("piece " + p.text + " duplicates a special token");
    }
    if (!index_.emplace(p.text, static_cast<TokenId>(id)).second) {
      throw FormatError("duplicate piece " + p.text);
    }
    max_piece_chars_ = std::max(max_piece_chars_, utf8::length(p.text));
    min_score = std::min(min_score, p.score);
  }
  unk_score_ = min_score - kUnkPenalty;

  if (kind_ == TokenizerKind::kBpe) {
    for (std::size_t rank = 0; rank < merges_.size(); ++rank) {
      const auto& [l, r] = merges_[rank];
      const auto li = piece_id(l), ri = piece_id(r), mi = piece_id(l + r);
      if (!li || !ri || !mi) {
        throw FormatError("merge " + std::to_string(rank) + " (" + l + ", " + r +
                          ") refers to pieces outside the vocabulary");
      }
      merge_rank_[pair_key(*li, *ri)].emplace_back(rank, *mi);
    }
  } else if (!merges_.empty()) {
    throw FormatError("unigram model cannot carry merges");
  }
}

std::optional<TokenId> TokenizerModel::piece_id(std::string_view piece) const {
  const auto it = index_.find(std::string(piece));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenizerModel::Path TokenizerModel::viterbi(std::string_view word) const {
  const auto chars = utf8::split_chars(word);
  const std::size_t n = chars.size();
  struct Cell {
    double score = 0.0;
    std::size_t tokens = 0;
    std::size_t len = 0;
    TokenId id = 0;
  };
  // best[i] is the best segmentation of the suffix starting at char i.
  std::vector<Cell> best(n + 1);
  for (std::size_t i = n; i-- > 0;) {
    bool found = false;
    Cell cell;
    std::string sub;
    const std::size_t max_len = std::min(max_piece_chars_, n - i);
    for (std::size_t len = 1; len <= max_len; ++len) {
      sub += chars[i + len - 1];
      const auto it = index_.find(sub);
      double piece_score;
      TokenId id;
      if (it != index_.end()) {
        id = it->second;
        piece_score = pieces_[id].score;
      } else if (len == 1) {
        id = SpecialIds{}.unk;
        piece_score = unk_score_;
      } else {
        continue;
      }
      const Cell& rest = best[i + len];
      const double score = piece_score + rest.score;
      const std::size_t tokens = rest.tokens + 1;
      // Lengths are visited in increasing order, so >= on a full tie keeps
      // the longest leading piece.
      const bool better =
          !found || score > cell.score || (score == cell.score && tokens <= cell.tokens);
      if (better) {
        cell = {score, tokens, len, id};
        found = true;
      }
    }
    best[i] = cell;
  }
  Path path;
  path.score = best[0].score;
  for (std::size_t i = 0; i < n; i += best[i].len) path.ids.push_back(best[i].id);
  return path;
}

std::vector<TokenId> TokenizerModel::bpe_word(std::string_view word) const {
  std::vector<TokenId> ids;
  for (const auto& c : utf8::split_chars(word)) {
    const auto it = index_.find(c);
    ids.push_back(it == index_.end() ? SpecialIds{}.unk : it->second);
  }
  // Replay merges in rank order: at each round take the lowest-ranked merge
  // that applies and has not been passed yet, exactly as training did.
  std::size_t next_rank = 0;
  while (ids.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    TokenId left = 0, right = 0, merged = 0;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      const auto it = merge_rank_.find(pair_key(ids[i], ids[i + 1]));
      if (it == merge_rank_.end()) continue;
      for (const auto& [rank, mid] : it->second) {
        if (rank < next_rank) continue;
        if (rank < best_rank) {
          best_rank = rank;
          left = ids[i];
          right = ids[i + 1];
          merged = mid;
        }
        break;
      }
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    std::vector<TokenId> out;
    out.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i + 1 < ids.size() && ids[i] == left && ids[i + 1] == right) {
        out.push_back(merged);
        ++i;
      } else {
        out.push_back(ids[i]);
      }
    }
    ids = std::move(out);
    next_rank = best_rank + 1;
  }
  return ids;
}

std::vector<TokenId> TokenizerModel::encode_word(std::string_view word) const {
  if (kind_ == TokenizerKind::kBpe) return bpe_word(word);
  return viterbi(word).ids;
}

std::vector<TokenId> TokenizerModel::encode(std::string_view text, bool add_bos_eos) const {
  std::vector<TokenId> ids;
  if (add_bos_eos) ids.push_back(special().bos);
  for (const auto& w : pre_tokenize(text)) {
    const auto word_ids = encode_word(w);
    ids.insert(ids.end(), word_ids.begin(), word_ids.end());
  }
  if (add_bos_eos) ids.push_back(special().eos);
  return ids;
}

std::string TokenizerModel::decode(std::span<const TokenId> ids) const {
  std::string joined;
  for (const TokenId id : ids) {
    if (id >= pieces_.size()) {
      throw InvalidArgument("token id " + std::to_string(id) + " is out of range (vocab size " +
                            std::to_string(pieces_.size()) + ")");
    }
    if (id < kNumSpecial) continue;
    joined += pieces_[id].text;
  }
  std::string out;
  out.reserve(joined.size());
  std::size_t pos = 0;
  while (pos < joined.size()) {
    if (joined.compare(pos, kWordBoundary.size(), kWordBoundary) == 0) {
      out.push_back(' ');
      pos += kWordBoundary.size();
    } else {
      out.push_back(joined[pos++]);
    }
  }
  if (!out.empty() && out.front() == ' ') out.erase(out.begin());
  return out;
}

std::string TokenizerModel::to_json() const {
  nlohmann::json j;
  j["version"] = kFormatVersion;
  j["kind"] = std::string(to_string(kind_));
  auto& pieces = j["pieces"] = nlohmann::json::array();
  for (std::size_t id = kNumSpecial; id < pieces_.size(); ++id) {
    pieces.push_back({{"piece", pieces_[id].text}, {"score", pieces_[id].score}});
  }
  auto& merges = j["merges"] = nlohmann::json::array();
  for (const auto& [l, r] : merges_) merges.push_back({l, r});
  const SpecialIds sp;
  j["special"] = {{"pad_id", sp.pad}, {"unk_id", sp.unk}, {"bos_id", sp.bos}, {"eos_id", sp.eos}};
  return j.dump();
}

TokenizerModel TokenizerModel::from_json(std::string_view json) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("tokenizer model is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("version").get<int>() != kFormatVersion) {
      throw FormatError("unsupported tokenizer model version " + j.at("version").dump());
    }
    const SpecialIds sp;
    const auto& s = j.at("special");
    if (s.at("pad_id").get<TokenId>() != sp.pad || s.at("unk_id").get<TokenId>() != sp.unk ||
        s.at("bos_id").get<TokenId>() != sp.bos || s.at("eos_id").get<TokenId>() != sp.eos) {
      throw FormatError("special ids must be pad=0 unk=1 bos=2 eos=3");
    }
    std::vector<Piece> pieces;
    for (const auto& p : j.at("pieces")) {
      pieces.push_back({p.at("piece").get<std::string>(), p.at("score").get<double>()});
    }
    const auto kind = parse_tokenizer_kind(j.at("kind").get<std::string>());
    if (kind == TokenizerKind::kUnigram) return unigram(std::move(pieces));
    std::vector<MergeRule> merges;
    for (const auto& m : j.at("merges")) {
      merges.emplace_back(m.at(0).get<std::string>(), m.at(1).get<std::string>());
    }
    return bpe(std::move(pieces), std::move(merges));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed tokenizer model: ") + e.what());
  }
}

void TokenizerModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write tokenizer model " + path.string());
  out << to_json() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

TokenizerModel TokenizerModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tokenizer model " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

SegmentationStats summarize_counts(std::vector<std::size_t> counts) {
  if (counts.empty()) throw InvalidArgument("cannot summarize an empty corpus");
  std::sort(counts.begin(), counts.end());
  SegmentationStats s;
  s.min_tokens = counts.front();
  s.max_tokens = counts.back();
  double total = 0.0;
  for (const auto c : counts) total += static_cast<double>(c);
  s.avg_tokens = total / static_cast<double>(counts.size());
  const std::size_t mid = counts.size() / 2;
  s.median_tokens = counts.size() % 2 == 1
                        ? static_cast<double>(counts[mid])
                        : 0.5 * static_cast<double>(counts[mid - 1] + counts[mid]);
  return s;
}

SegmentationStats segmentation_stats(const TokenizerModel& model,
                                     const std::vector<Document>& corpus) {
  if (corpus.empty()) throw InvalidArgument("segmentation_stats needs a non-empty corpus");
  std::vector<std::size_t> counts;
  counts.reserve(corpus.size());
  for (const auto& doc : corpus) counts.push_back(model.encode(doc.text).size());
  return summarize_counts(std::move(counts));
}

void UnigramOptions::validate() const {
  if (target_vocab <= kNumSpecial) throw InvalidArgument("target vocabulary must exceed 4");
  if (!(seed_multiplier > 1.0)) throw InvalidArgument("seed_multiplier must be > 1");
  if (!(prune_fraction > 0.0 && prune_fraction < 1.0)) {
    throw InvalidArgument("prune_fraction must lie in (0, 1)");
  }
  if (em_iters < 1) throw InvalidArgument("em_iters must be >= 1");
  if (max_piece_chars < 1) throw InvalidArgument("max_piece_chars must be >= 1");
}

}  // namespace fablelm
