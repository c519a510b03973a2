#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "fablelm/fablegen.hpp"

namespace fablelm {

namespace {

const char* const kSlotKeys[5] = {"characters", "settings", "challenges", "resolutions", "morals"};

std::array<const std::vector<std::string>*, 5> slot_lists(const SlotInventory& inv) {
  return {&inv.characters, &inv.settings, &inv.challenges, &inv.resolutions, &inv.morals};
}

Combo decode_index(const SlotInventory& inv, std::uint64_t index) {
  const auto lists = slot_lists(inv);
  Combo c{};
  for (int s = 4; s >= 0; --s) {
    const auto size = lists[s]->size();
    c[s] = static_cast<std::size_t>(index % size);
    index /= size;
  }
  return c;
}

}  // namespace

void SlotInventory::validate() const {
  const auto lists = slot_lists(*this);
  for (int s = 0; s < 5; ++s) {
    if (lists[s]->empty()) throw InvalidArgument(std::string("slot '") + kSlotKeys[s] + "' is empty");
    std::set<std::string> seen;
    for (const auto& e : *lists[s]) {
      if (e.empty()) throw InvalidArgument(std::string("slot '") + kSlotKeys[s] + "' has an empty entry");
      if (!seen.insert(e).second) {
        throw InvalidArgument(std::string("slot '") + kSlotKeys[s] + "' lists '" + e + "' twice");
      }
    }
  }
}

std::uint64_t SlotInventory::combinations() const {
  std::uint64_t p = 1;
  for (const auto* l : slot_lists(*this)) {
    if (l->empty()) return 0;
    if (p > (std::uint64_t{1} << 63) / l->size()) throw InvalidArgument("slot product overflows");
    p *= l->size();
  }
  return p;
}

SlotInventory SlotInventory::from_json(const std::string& text) {
  SlotInventory inv;
  try {
    const auto j = nlohmann::json::parse(text);
    auto lists = std::array<std::vector<std::string>*, 5>{&inv.characters, &inv.settings,
                                                           &inv.challenges, &inv.resolutions,
                                                           &inv.morals};
    for (int s = 0; s < 5; ++s) *lists[s] = j.at(kSlotKeys[s]).get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed slot inventory: ") + e.what());
  }
  inv.validate();
  return inv;
}

SlotInventory SlotInventory::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open inventory " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

FableSlots slots_for(const SlotInventory& inv, const Combo& combo) {
  const auto lists = slot_lists(inv);
  for (int s = 0; s < 5; ++s) {
    if (combo[s] >= lists[s]->size()) throw InvalidArgument("combo index out of range");
  }
  return {inv.characters[combo[0]], inv.settings[combo[1]], inv.challenges[combo[2]],
          inv.resolutions[combo[3]], inv.morals[combo[4]]};
}

std::vector<Combo> enumerate_combos(const SlotInventory& inv, std::uint64_t count,
                                    std::uint64_t seed) {
  inv.validate();
  const std::uint64_t total = inv.combinations();
  if (count > total) {
    throw InvalidArgument("asked for " + std::to_string(count) + " combinations but the slots only give " +
                          std::to_string(total));
  }
  std::vector<Combo> out;
  out.reserve(count);
  if (count == total) {
    for (std::uint64_t i = 0; i < total; ++i) out.push_back(decode_index(inv, i));
    return out;
  }
  Rng rng(seed);
  if (count * 2 <= total) {
    std::unordered_set<std::uint64_t> taken;
    while (out.size() < count) {
      const std::uint64_t i = uniform_below(rng, total);
      if (taken.insert(i).second) out.push_back(decode_index(inv, i));
    }
  } else {
    // Dense case: partial Fisher-Yates over every index.
    if (total > (std::uint64_t{1} << 27)) {
      throw InvalidArgument("sampling more than half of " + std::to_string(total) +
                            " combinations is not supported; ask for fewer");
    }
    std::vector<std::uint64_t> idx(total);
    std::iota(idx.begin(), idx.end(), std::uint64_t{0});
    for (std::uint64_t i = 0; i < count; ++i) {
      std::swap(idx[i], idx[i + uniform_below(rng, total - i)]);
      out.push_back(decode_index(inv, idx[i]));
    }
  }
  return out;
}

std::string render_prompt(const FableSlots& s) {
  return "Scrie o fabulă despre " + s.character + " în " + s.setting + ", care înfruntă " +
         s.challenge + ", se rezolvă prin " + s.resolution + ". Morala: " + s.moral + ".\n";
}

std::uint64_t record_seed(std::uint64_t base_seed, std::uint64_t id, std::size_t attempt) {
  return base_seed + id + (static_cast<std::uint64_t>(attempt) << 32);
}

std::string generate_story(const Checkpoint& ckpt, const TokenizerModel& tok,
                           const std::string& prompt, const FableGenParams& params,
                           std::uint64_t seed) {
  std::vector<TokenId> ids{tok.special().bos};
  const auto p = tok.encode(prompt);
  ids.insert(ids.end(), p.begin(), p.end());
  if (ids.size() >= ckpt.config.max_seq) {
    throw InvalidArgument("prompt of " + std::to_string(ids.size()) +
                          " tokens leaves no room under max_seq " +
                          std::to_string(ckpt.config.max_seq));
  }
  GenerateOptions opt;
  opt.max_new = params.max_new;
  opt.temperature = params.temperature;
  opt.top_k = params.top_k;
  opt.seed = seed;
  opt.eos_id = tok.special().eos;
  return tok.decode(generate(ckpt, ids, opt));
}

std::string FableRecord::to_json() const {
  nlohmann::ordered_json j;
  j["id"] = id;
  j["slots"] = {{"character", slots.character},
                {"setting", slots.setting},
                {"challenge", slots.challenge},
                {"resolution", slots.resolution},
                {"moral", slots.moral}};
  j["prompt"] = prompt;
  j["text"] = text;
  j["gen_params"] = {{"temperature", temperature}, {"top_k", top_k}, {"seed", seed}};
  j["duplicate"] = duplicate;
  return j.dump();
}

FableRecord FableRecord::from_json(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    FableRecord r;
    r.id = j.at("id").get<std::uint64_t>();
    const auto& s = j.at("slots");
    r.slots = {s.at("character").get<std::string>(), s.at("setting").get<std::string>(),
               s.at("challenge").get<std::string>(), s.at("resolution").get<std::string>(),
               s.at("moral").get<std::string>()};
    r.prompt = j.at("prompt").get<std::string>();
    r.text = j.at("text").get<std::string>();
    const auto& g = j.at("gen_params");
    r.temperature = g.at("temperature").get<double>();
    r.top_k = g.at("top_k").get<std::size_t>();
    r.seed = g.at("seed").get<std::uint64_t>();
    r.duplicate = j.value("duplicate", false);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed fable record: ") + e.what());
  }
}

namespace {

// Complete, in-sequence records already on disk, and the byte length they
// occupy. Anything after the first bad line is a torn write.
std::vector<FableRecord> read_complete(const std::filesystem::path& path, std::uint64_t& bytes) {
  std::vector<FableRecord> records;
  bytes = 0;
  std::ifstream in(path, std::ios::binary);
  if (!in) return records;
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string data = ss.str();
  std::size_t pos = 0;
  while (pos < data.size()) {
    const auto nl = data.find('\n', pos);
    if (nl == std::string::npos) break;
    try {
      auto r = FableRecord::from_json(data.substr(pos, nl - pos));
      if (r.id != records.size()) break;
      records.push_back(std::move(r));
    } catch (const FormatError&) {
      break;
    }
    pos = nl + 1;
    bytes = pos;
  }
  return records;
}

}  // namespace

std::uint64_t generate_dataset(const Checkpoint& ckpt, const TokenizerModel& tok,
                               const SlotInventory& inv, std::uint64_t n,
                               const FableGenParams& params, const std::filesystem::path& out,
                               const FableGenOptions& options) {
  if (n == 0) throw InvalidArgument("n must be >= 1");
  if (options.max_attempts == 0) throw InvalidArgument("max_attempts must be >= 1");
  if (tok.vocab_size() != ckpt.config.vocab_size) {
    throw InvalidArgument("tokenizer vocab " + std::to_string(tok.vocab_size()) +
                          " does not match the checkpoint's " +
                          std::to_string(ckpt.config.vocab_size));
  }
  const auto combos = enumerate_combos(inv, n, params.base_seed);

  std::unordered_set<std::string> seen;
  std::uint64_t done = 0;
  if (options.resume) {
    std::uint64_t keep_bytes = 0;
    const auto existing = read_complete(out, keep_bytes);
    if (existing.size() > n) {
      throw InvalidArgument(out.string() + " already holds " + std::to_string(existing.size()) +
                            " records, more than the " + std::to_string(n) + " requested");
    }
    for (const auto& r : existing) {
      if (r.prompt != render_prompt(slots_for(inv, combos[r.id]))) {
        throw FormatError(out.string() + ": record " + std::to_string(r.id) +
                          " was made with a different inventory or seed");
      }
      seen.insert(r.text);
    }
    done = existing.size();
    if (std::filesystem::exists(out)) std::filesystem::resize_file(out, keep_bytes);
  }

  std::ofstream file(out, std::ios::binary | (options.resume ? std::ios::app : std::ios::trunc));
  if (!file) throw IoError("cannot write " + out.string());
  for (std::uint64_t id = done; id < n; ++id) {
    if (options.cancel != nullptr && options.cancel->load()) break;
    FableRecord r;
    r.id = id;
    r.slots = slots_for(inv, combos[id]);
    r.prompt = render_prompt(r.slots);
    r.temperature = params.temperature;
    r.top_k = params.top_k;
    for (std::size_t attempt = 0; attempt < options.max_attempts; ++attempt) {
      r.seed = record_seed(params.base_seed, id, attempt);
      r.text = generate_story(ckpt, tok, r.prompt, params, r.seed);
      r.duplicate = seen.count(r.text) != 0;
      if (!r.duplicate) break;
    }
    seen.insert(r.text);
    file << r.to_json() << '\n';
    file.flush();
    if (!file) throw IoError("write failed for " + out.string());
    ++done;
    if (options.on_record) options.on_record(r);
  }
  return done;
}

}  // namespace fablelm
