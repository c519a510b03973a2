#include <algorithm>
#include <csignal>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fablelm/cli.hpp"
#include "fablelm/compress.hpp"
#include "fablelm/corpus.hpp"
#include "fablelm/eval.hpp"
#include "fablelm/fablegen.hpp"
#include "fablelm/judge.hpp"
#include "fablelm/manifest.hpp"
#include "fablelm/packing.hpp"
#include "fablelm/tokenizer.hpp"
#include "fablelm/train.hpp"

namespace fablelm::cli {

namespace fs = std::filesystem;

std::atomic<bool>& cancel_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

namespace {

void on_signal(int) { cancel_flag().store(true); }

}  // namespace

void install_signal_handlers() {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
}

namespace {

// Where a run's manifest goes: inside an output directory, or next to an
// output file.
fs::path manifest_for_dir(const fs::path& dir) { return dir / "manifest.json"; }
fs::path manifest_for_file(const fs::path& file) {
  return file.parent_path() / (file.filename().string() + ".manifest.json");
}

struct Run {
  std::ostream& out;
  std::ostream& err;
  RunManifest manifest;
  fs::path manifest_path;
  bool cancelled = false;
};

using Handler = std::function<void(Run&)>;

struct Command {
  CLI::App* app = nullptr;
  Handler handler;
  std::vector<const std::string*> inputs;  // digested into the manifest when set
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

KvConfig with_overrides(const std::string& file, const std::vector<std::string>& sets) {
  KvConfig kv = file.empty() ? KvConfig{} : KvConfig::load(file);
  for (const auto& s : sets) kv.set_assignment(s);
  return kv;
}

void snapshot_kv(RunManifest& m, const std::string& prefix, const KvConfig& kv) {
  for (const auto& [k, v] : kv.values()) m.config[prefix + k] = v;
}

// Every option of the parsed subcommand, as given or defaulted.
void snapshot_options(RunManifest& m, const CLI::App& app) {
  for (const CLI::Option* opt : app.get_options()) {
    if (opt->get_lnames().empty() && opt->get_snames().empty()) continue;
    const std::string name =
        opt->get_lnames().empty() ? opt->get_snames().front() : opt->get_lnames().front();
    if (name == "help") continue;
    std::string value;
    if (opt->get_expected_min() == 0) {
      value = opt->count() > 0 ? "true" : "false";
    } else if (opt->count() > 0) {
      for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
    } else {
      value = opt->get_default_str();
    }
    m.config[name] = value;
  }
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

TrainHooks progress_hooks(Run& run, std::size_t every) {
  TrainHooks hooks;
  hooks.cancel = &cancel_flag();
  hooks.on_step = [&run, every](const StepRecord& r) {
    if (r.eval_ce || (every > 0 && r.step % every == 0)) {
      run.err << "step " << r.step << " loss " << fmt(r.loss) << " lr " << fmt(r.lr)
              << " grad_norm " << fmt(r.grad_norm);
      if (r.eval_ce) run.err << " eval_ce " << fmt(*r.eval_ce) << " eval_ppl " << fmt(*r.eval_ppl);
      run.err << "\n";
    }
  };
  return hooks;
}

void save_training(Run& run, const fs::path& dir, const TrainResult& res, const ModelConfig& mc,
                   const KvConfig& train_kv) {
  save_checkpoint(res.ckpt, dir / "model.tf3c");
  res.log.save(dir / "runlog.jsonl");
  write_text(dir / "model_config.txt", model_config_to_kv(mc).to_string());
  write_text(dir / "train_config.txt", train_kv.to_string());
  if (const auto last = res.log.last_eval_ce()) {
    run.out << "held-out ce " << fmt(*last) << " after " << res.log.records.size() << " steps";
    if (res.stopped_early) run.out << " (stopped early)";
    run.out << "\n";
  }
  run.cancelled = res.cancelled;
}

PackedDataset pick_split(const PackedDataset& data, const std::string& split) {
  if (split == "all") return data;
  return split_holdout(data).second;
}

// ---- Subcommands ------------------------------------------------------------

Command add_train_tokenizer(CLI::App& root) {
  struct Opts {
    std::string kind, input, out, format = "lines";
    std::size_t vocab = 32000;
    UnigramOptions uni;
  };
  auto o = std::make_shared<Opts>();
  auto* app = root.add_subcommand("train-tokenizer", "Train a BPE or Unigram tokenizer");
  app->add_option("--kind", o->kind, "bpe or unigram")->required()->check(CLI::IsMember({"bpe", "unigram"}));
  app->add_option("--vocab-size", o->vocab, "Target vocabulary size, specials included")->required();
  app->add_option("--input", o->input, "Training corpus")->required()->check(CLI::ExistingFile);
  app->add_option("--format", o->format, "Corpus format")->check(CLI::IsMember({"lines", "jsonl"}))->capture_default_str();
  app->add_option("--out", o->out, "Tokenizer JSON to write")->required();
  app->add_option("--seed-multiplier", o->uni.seed_multiplier, "Unigram seed vocabulary multiple")->capture_default_str();
  app->add_option("--em-iters", o->uni.em_iters, "Unigram EM iterations per pruning round")->capture_default_str();
  app->add_option("--prune-fraction", o->uni.prune_fraction, "Unigram pruning share per round")->capture_default_str();
  app->add_option("--max-piece-chars", o->uni.max_piece_chars, "Longest Unigram piece")->capture_default_str();
  Command c{app, nullptr, {&o->input}};
  c.handler = [o](Run& run) {
    const auto docs = load_corpus(o->input, parse_corpus_format(o->format));
    TokenizerModel model = [&] {
      if (o->kind == "bpe") return train_bpe(docs, o->vocab);
      UnigramOptions u = o->uni;
      u.target_vocab = o->vocab;
      return train_unigram(docs, u);
    }();
    ensure_parent(o->out);
    model.save(o->out);
    run.manifest_path = manifest_for_file(o->out);
    run.out << "trained " << o->kind << " tokenizer with " << model.vocab_size() << " pieces\n";
  };
  return c;
}

Command add_stats(CLI::App& root) {
  struct Opts {
    std::string model, input, out, format = "lines";
  };
  auto o = std::make_shared<Opts>();
  auto* app = root.add_subcommand("stats", "Corpus and segmentation statistics");
  app->add_option("--model", o->model, "Tokenizer JSON")->required()->check(CLI::ExistingFile);
  app->add_option("--input", o->input, "Corpus")->required()->check(CLI::ExistingFile);
  app->add_option("--format", o->format, "Corpus format")->check(CLI::IsMember({"lines", "jsonl"}))->capture_default_str();
  app->add_option("--out", o->out, "Also write the JSON here");
  Command c{app, nullptr, {&o->model, &o->input}};
  c.handler = [o](Run& run) {
    const auto tok = TokenizerModel::load(o->model);
    const auto docs = load_corpus(o->input, parse_corpus_format(o->format));
    const auto cs = corpus_stats(docs);
    const auto ss = segmentation_stats(tok, docs);
    nlohmann::ordered_json j;
    j["documents"] = cs.doc_count;
    j["chars"] = cs.char_count;
    j["mean_chars_per_doc"] = cs.mean_chars_per_doc;
    j["avg_tokens"] = ss.avg_tokens;
    j["median_tokens"] = ss.median_tokens;
    j["min_tokens"] = ss.min_tokens;
    j["max_tokens"] = ss.max_tokens;
    const std::string text = j.dump(2) + "\n";
    run.out << text;
    if (!o->out.empty()) {
      ensure_parent(o->out);
      write_text(o->out, text);
      run.manifest_path = manifest_for_file(o->out);
    } else {
      run.manifest_path = "stats.manifest.json";
    }
  };
  return c;
}

Command add_pack(CLI::App& root) {
  struct Opts {
    std::string tokenizer, input, out, format = "lines";
    std::uint32_t block_len = 2048;
  };
  auto o = std::make_shared<Opts>();
  auto* app = root.add_subcommand("pack", "Tokenize a corpus into fixed-length blocks");
  app->add_option("--tokenizer", o->tokenizer, "Tokenizer JSON")->required()->check(CLI::ExistingFile);
  app->add_option("--input", o->input, "Corpus")->required()->check(CLI::ExistingFile);
  app->add_option("--format", o->format, "Corpus format")->check(CLI::IsMember({"lines", "jsonl"}))->capture_default_str();
  app->add_option("--block-len", o->block_len, "Tokens per block")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_option("--out", o->out, "Packed dataset to write")->required();
  Command c{app, nullptr, {&o->tokenizer, &o->input}};
  c.handler = [o](Run& run) {
    const auto tok = TokenizerModel::load(o->tokenizer);
    const auto docs = load_corpus(o->input, parse_corpus_format(o->format));
    const auto data = pack(tok, docs, o->block_len);
    ensure_parent(o->out);
    data.save(o->out);
    run.manifest_path = manifest_for_file(o->out);
    run.out << "packed " << data.block_count() << " blocks of " << data.block_len() << " tokens\n";
  };
  return c;
}

Command add_pretrain(CLI::App& root) {
  struct Opts {
    std::string data, model_config, train_config, out;
    std::vector<std::string> sets, model_sets;
    std::size_t log_every = 10;
  };
  auto o = std::make_shared<Opts>();
  auto* app = root.add_subcommand("pretrain", "Train a model from scratch on a packed dataset");
  app->add_option("--data", o->data, "Packed dataset")->required()->check(CLI::ExistingFile);
  app->add_option("--model-config", o->model_config, "Model key=value file")->required()->check(CLI::ExistingFile);
  app->add_option("--train-config", o->train_config, "Training key=value file")->check(CLI::ExistingFile);
  app->add_option("--set", o->sets, "Training override key=value (repeatable)");
  app->add_option("--model-set", o->model_sets, "Model override key=value (repeatable)");
  app->add_option("--log-every", o->log_every, "Progress line every N steps")->capture_default_str();
  app->add_option("--out", o->out, "Run directory")->required();
  Command c{app, nullptr, {&o->data, &o->model_config, &o->train_config}};
  c.handler = [o](Run& run) {
    const auto mkv = with_overrides(o->model_config, o->model_sets);
    const auto mc = model_config_from_kv(mkv);
    const auto tc = TrainConfig::from_kv(with_overrides(o->train_config, o->sets)).resolved();
    tc.validate();
    const auto data = PackedDataset::load(o->data);
    fs::create_directories(o->out);
    run.manifest_path = manifest_for_dir(o->out);
    run.manifest.seed = tc.seed;
    snapshot_kv(run.manifest, "model.", model_config_to_kv(mc));
    snapshot_kv(run.manifest, "train.", tc.to_kv());
    run.err << "model: " << param_count(mc) << " parameters\n";
    const auto res = pretrain(data, mc, tc, progress_hooks(run, o->log_every));
    save_training(run, o->out, res, mc, tc.to_kv());
  };
  return c;
}

Command add_distill(CLI::App& root) {
  struct Opts {
    std::string teacher, student_config, config, data, out;
    std::vector<std::string> sets, model_sets;
    std::size_t log_every = 10;
  };
  auto o = std::make_shared<Opts>();
  auto* app = root.add_subcommand("distill", "Train a student against a frozen teacher");
  app->add_option("--teacher", o->teacher, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
  app->add_option("--student-config", o->student_config, "Student model key=value file")->required()->check(CLI::ExistingFile);
  app->add_option("--config", o->config, "Distillation key=value file (alpha, beta, temperature and training keys)")->check(CLI::ExistingFile);
  app->add_option("--set", o->sets, "Distillation override key=value (repeatable)");
  app->add_option("--model-set", o->model_sets, "Student override key=value (repeatable)");
  app->add_option("--data", o->data, "Packed dataset")->required()->check(CLI::ExistingFile);
  app->add_option("--log-every", o->log_every, "Progress line every N steps")->capture_default_str();
  app->add_option("--out", o->out, "Run directory")->required();
  Command c{app, nullptr, {&o->teacher, &o->student_config, &o->config, &o->data}};
  c.handler = [o](Run& run) {
    const auto teacher = load_checkpoint(o->teacher);
    const auto mc = model_config_from_kv(with_overrides(o->student_config, o->model_sets));
    auto dc = DistillConfig::from_kv(with_overrides(o->config, o->sets));
    dc.train = dc.train.resolved();
    dc.validate();
    const auto data = PackedDataset::load(o->data);
    fs::create_directories(o->out);
    run.manifest_path = manifest_for_dir(o->out);
    run.manifest.seed = dc.train.seed;
    snapshot_kv(run.manifest, "model.", model_config_to_kv(mc));
    KvConfig dkv = dc.train.to_kv();
    dkv.set("alpha", fmt(dc.alpha, 17));
    dkv.set("beta", fmt(dc.beta, 17));
    dkv.set("temperature", fmt(dc.temperature, 17));
    snapshot_kv(run.manifest, "distill.", dkv);
    run.err << "student: " << param_count(mc) << " parameters, teacher: "
            << param_count(teacher.config) << "\n";
    const auto res = distill(teacher, mc, data, dc, progress_hooks(run, o->log_every));
    save_training(run, o->out, res, mc, dkv);
  };
  return c;
}

Command add_prune_sweep(CLI::App& root) {
  struct Opts {
    std::string ckpt, data, out, selection = "magnitude", split = "holdout";
    std::vector<double> mlp_rates{0, 0.3, 0.5, 0.7}, head_rates{0, 0.3, 0.5};
    std::uint64_t seed = 0;
    std::size_t batch = 8, max_blocks = 0;
    double budget = -1.0;
  };
  auto o = std::make_shared<Opts>();
  auto* app = root.add_subcommand("prune-sweep", "Held-out loss over a grid of pruning rates");
  app->add_option("--ckpt", o->ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  app->add_option("--data", o->data, "Packed dataset")->required()->check(CLI::ExistingFile);
  app->add_option("--split", o->split, "Evaluate on the held-out tail or on every block")->check(CLI::IsMember({"holdout", "all"}))->capture_default_str();
  app->add_option("--mlp-rates", o->mlp_rates, "Comma-separated MLP rates")->delimiter(',')->capture_default_str();
  app->add_option("--head-rates", o->head_rates, "Comma-separated head rates")->delimiter(',')->capture_default_str();
  app->add_option("--selection", o->selection, "Which units to mask")->check(CLI::IsMember({"magnitude", "random"}))->capture_default_str();
  app->add_option("--seed", o->seed, "Seed for random selection")->capture_default_str();
  app->add_option("--batch", o->batch, "Evaluation batch")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_option("--max-blocks", o->max_blocks, "Evaluate at most N blocks (0 = all)")->capture_default_str();
  app->add_option("--budget", o->budget, "Report the largest pruning within this % loss increase");
  app->add_option("--out", o->out, "Sweep JSON to write")->required();
  Command c{app, nullptr, {&o->ckpt, &o->data}};
  c.handler = [o](Run& run) {
    const auto ckpt = load_checkpoint(o->ckpt);
    const auto blocks = pick_split(PackedDataset::load(o->data), o->split);
    SweepOptions so;
    so.selection = o->selection == "random" ? Selection::kRandom : Selection::kMagnitude;
    so.seed = o->seed;
    so.batch = o->batch;
    so.max_blocks = o->max_blocks;
    run.manifest.seed = o->seed;
    const auto sweep = prune_sweep(ckpt, blocks, o->mlp_rates, o->head_rates, so);
    ensure_parent(o->out);
    write_text(o->out, sweep.to_json());
    run.manifest_path = manifest_for_file(o->out);
    for (const auto& p : sweep.points) {
      run.out << "mlp " << p.mlp_rate << " heads " << p.head_rate << " ce " << fmt(p.ce)
              << " delta " << fmt(p.delta_ce_pct, 4) << "%\n";
    }
    if (o->budget >= 0.0) {
      const auto pick = select_config(sweep, o->budget);
      run.out << "within " << o->budget << "%: mlp " << pick.mlp_rate << " heads " << pick.head_rate << "\n";
    }
  };
  return c;
}

Command add_quantize(CLI::App& root) {
  struct Opts {
    std::string ckpt, out;
    int bits = 8;
  };
  auto o = std::make_shared<Opts>();
  auto* app = root.add_subcommand("quantize", "Post-training weight quantization");
  app->add_option("--ckpt", o->ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  app->add_option("--bits", o->bits, "8 or 6")->required()->check(CLI::IsMember({8, 6}));
  app->add_option("--out", o->out, "Quantized checkpoint to write")->required();
  Command c{app, nullptr, {&o->ckpt}};
  c.handler = [o](Run& run) {
    const auto ckpt = load_checkpoint(o->ckpt);
    const auto q = quantize(ckpt, o->bits);
    ensure_parent(o->out);
    save_quantized(q, o->out);
    run.manifest_path = manifest_for_file(o->out);
    const double ratio = static_cast<double>(quantized_file_size(q)) /
                         static_cast<double>(checkpoint_file_size(ckpt));
    run.out << "wrote " << quantized_file_size(q) << " bytes (" << fmt(100.0 * ratio, 4)
            << "% of f32)\n";
  };
  return c;
}

Command add_eval(CLI::App& root) {
  struct Opts {
    std::string ckpt, tokenizer, data, probes, gazetteer, rules, gen_file, gen_format, out;
    std::string split = "holdout";
    std::size_t batch = 8, max_blocks = 0;
    bool throughput = false;
    std::size_t prompt_len = 16, gen_len = 64, tp_batch = 1, repeats = 5;
  };
  auto o = std::make_shared<Opts>();
  auto* app = root.add_subcommand("eval", "Intrinsic, probe and generation metrics");
  app->add_option("--ckpt", o->ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  app->add_option("--tokenizer", o->tokenizer, "Tokenizer JSON (needed for --probes)")->check(CLI::ExistingFile);
  app->add_option("--data", o->data, "Packed dataset for cross-entropy")->check(CLI::ExistingFile);
  app->add_option("--split", o->split, "Held-out tail or every block")->check(CLI::IsMember({"holdout", "all"}))->capture_default_str();
  app->add_option("--batch", o->batch, "Evaluation batch")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_option("--max-blocks", o->max_blocks, "Evaluate at most N blocks (0 = all)")->capture_default_str();
  app->add_option("--probes", o->probes, "Minimal-pair JSONL")->check(CLI::ExistingFile);
  app->add_option("--gazetteer", o->gazetteer, "Entity JSONL {surface, lemma}")->check(CLI::ExistingFile);
  app->add_option("--rules", o->rules, "Suffix rule JSONL {suffix, replacement}")->check(CLI::ExistingFile);
  app->add_option("--gen-file", o->gen_file, "Generated texts")->check(CLI::ExistingFile);
  app->add_option("--gen-format", o->gen_format, "lines or jsonl (default: by extension)")->check(CLI::IsMember({"lines", "jsonl"}));
  app->add_flag("--throughput", o->throughput, "Measure greedy decoding speed");
  app->add_option("--prompt-len", o->prompt_len, "Throughput prompt tokens")->capture_default_str();
  app->add_option("--gen-len", o->gen_len, "Throughput generated tokens")->capture_default_str();
  app->add_option("--tp-batch", o->tp_batch, "Throughput sequences per run")->capture_default_str();
  app->add_option("--repeats", o->repeats, "Timed throughput runs")->capture_default_str();
  app->add_option("--out", o->out, "Report JSON to write")->required();
  Command c{app, nullptr, {&o->ckpt, &o->tokenizer, &o->data, &o->probes, &o->gazetteer, &o->rules, &o->gen_file}};
  c.handler = [o](Run& run) {
    const auto ckpt = load_checkpoint(o->ckpt);
    EvalReport report;
    if (!o->data.empty()) {
      const auto blocks = pick_split(PackedDataset::load(o->data), o->split);
      const auto r = intrinsic(ckpt, blocks, nullptr, o->batch, o->max_blocks);
      report.ce = r.ce;
      report.ppl = r.ppl;
    }
    if (!o->probes.empty()) {
      if (o->tokenizer.empty()) throw InvalidArgument("--probes needs --tokenizer");
      const auto tok = TokenizerModel::load(o->tokenizer);
      report.agreement_acc = agreement(ckpt, tok, load_probes(o->probes)).accuracy;
    }
    if (!o->gen_file.empty()) {
      std::string format = o->gen_format;
      if (format.empty()) format = fs::path(o->gen_file).extension() == ".jsonl" ? "jsonl" : "lines";
      std::vector<std::string> texts;
      for (auto& d : load_corpus(o->gen_file, parse_corpus_format(format))) texts.push_back(std::move(d.text));
      const BuiltinGrammarChecker checker;
      double g = 0.0, rd = 0.0;
      for (const auto& t : texts) {
        g += grammar_score(checker, t);
        rd += readability(t);
      }
      const double n = static_cast<double>(texts.size());
      report.grammar_score = g / n;
      report.readability = rd / n;
      for (std::size_t k = 1; k <= 3; ++k) report.distinct_n[k] = distinct_n(texts, k);
      if (texts.size() >= 2) report.self_bleu = self_bleu(texts);
      if (!o->gazetteer.empty()) {
        const auto gaz = Gazetteer::load(o->gazetteer, o->rules.empty()
                                                           ? std::nullopt
                                                           : std::optional<fs::path>(o->rules));
        double coh = 0.0;
        for (const auto& t : texts) coh += entity_coherence(t, gaz);
        report.coherence = coh / n;
      }
    }
    if (o->throughput) {
      report.tokens_per_sec =
          throughput(ckpt, o->prompt_len, o->gen_len, o->tp_batch, o->repeats).tokens_per_sec;
    }
    ensure_parent(o->out);
    const std::string text = report.to_json();
    write_text(o->out, text);
    run.manifest_path = manifest_for_file(o->out);
    run.out << text;
  };
  return c;
}

Command add_judge(CLI::App& root) {
  struct Opts {
    std::string input, out;
    JudgeConfig config;
    long timeout_ms = 60000;
    bool dry_run = false;
  };
  auto o = std::make_shared<Opts>();
  auto* app = root.add_subcommand("judge", "Score generated lines with an external judge model");
  app->add_option("--input", o->input, "One line of text per request")->required()->check(CLI::ExistingFile);
  app->add_option("--endpoint", o->config.endpoint_url, "Chat-completions URL")->required();
  app->add_option("--model", o->config.model_name, "Judge model name")->required();
  app->add_option("--parallel", o->config.max_parallel, "Requests in flight")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_option("--temperature", o->config.temperature, "Sampling temperature")->check(CLI::NonNegativeNumber)->capture_default_str();
  app->add_option("--retries", o->config.retries, "Extra attempts per line")->capture_default_str();
  app->add_option("--timeout-ms", o->timeout_ms, "Per-request timeout")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_flag("--dry-run", o->dry_run, "Write the request bodies instead of sending them");
  app->add_option("--out", o->out, "Verdict JSONL to write")->required();
  Command c{app, nullptr, {&o->input}};
  c.handler = [o](Run& run) {
    o->config.timeout = std::chrono::milliseconds(o->timeout_ms);
    std::vector<std::string> lines;
    {
      std::istringstream in(read_text(o->input));
      for (std::string l; std::getline(in, l);) {
        if (!l.empty() && l.back() == '\r') l.pop_back();
        if (l.find_first_not_of(" \t") != std::string::npos) lines.push_back(l);
      }
    }
    if (lines.empty()) throw InvalidArgument(o->input + " has no lines to judge");
    ensure_parent(o->out);
    run.manifest_path = manifest_for_file(o->out);
    if (o->dry_run) {
      o->config.validate();
      std::string body;
      for (const auto& b : dry_run_bodies(lines, o->config)) body += b + "\n";
      write_text(o->out, body);
      run.out << "wrote " << lines.size() << " request bodies\n";
      return;
    }
    const auto transport = http_transport(o->config, judge_api_key_from_env());
    const auto report = judge_batch(lines, o->config, transport, &cancel_flag());
    write_text(o->out, report.to_jsonl(lines));
    const fs::path agg = fs::path(o->out).parent_path() / (fs::path(o->out).stem().string() + ".aggregate.json");
    write_text(agg, report.aggregate_json());
    for (std::size_t i = 0; i < report.lines.size(); ++i) {
      if (!report.lines[i].verdict) run.err << "line " << i << " failed: " << report.lines[i].error << "\n";
    }
    run.out << report.aggregate_json();
    run.cancelled = cancel_flag().load();
  };
  return c;
}

Command add_generate(CLI::App& root) {
  struct Opts {
    std::string ckpt, tokenizer, inventory, out;
    std::uint64_t n = 0;
    FableGenParams params;
    bool resume = false;
  };
  auto o = std::make_shared<Opts>();
  auto* app = root.add_subcommand("generate", "Write a synthetic fable dataset");
  app->add_option("--ckpt", o->ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  app->add_option("--tokenizer", o->tokenizer, "Tokenizer JSON")->required()->check(CLI::ExistingFile);
  app->add_option("--inventory", o->inventory, "Slot inventory JSON")->required()->check(CLI::ExistingFile);
  app->add_option("-n", o->n, "Records to write")->required()->check(CLI::PositiveNumber);
  app->add_option("--seed", o->params.base_seed, "Base seed; record i uses seed + i")->capture_default_str();
  app->add_option("--temperature", o->params.temperature, "Sampling temperature (0 = greedy)")->check(CLI::NonNegativeNumber)->capture_default_str();
  app->add_option("--top-k", o->params.top_k, "Sample among the k most likely tokens")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_option("--max-new", o->params.max_new, "Tokens per story")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_flag("--resume", o->resume, "Continue after the last complete record");
  app->add_option("--out", o->out, "JSONL to write")->required();
  Command c{app, nullptr, {&o->ckpt, &o->tokenizer, &o->inventory}};
  c.handler = [o](Run& run) {
    const auto ckpt = load_checkpoint(o->ckpt);
    const auto tok = TokenizerModel::load(o->tokenizer);
    const auto inv = SlotInventory::load(o->inventory);
    ensure_parent(o->out);
    run.manifest_path = manifest_for_file(o->out);
    run.manifest.seed = o->params.base_seed;
    FableGenOptions opt;
    opt.resume = o->resume;
    opt.cancel = &cancel_flag();
    const auto written = generate_dataset(ckpt, tok, inv, o->n, o->params, o->out, opt);
    run.out << written << " of " << o->n << " records in " << o->out << "\n";
    run.cancelled = written < o->n;
  };
  return c;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Compact language-model pipeline: tokenizers, training, compression, evaluation",
               "fablelm"};
  app.set_version_flag("--version", kVersionString);
  app.require_subcommand(1);
  std::vector<Command> commands{add_train_tokenizer(app), add_stats(app),    add_pack(app),
                                add_pretrain(app),        add_prune_sweep(app), add_distill(app),
                                add_quantize(app),        add_eval(app),     add_judge(app),
                                add_generate(app)};
  if (args.empty()) {
    out << app.help();
    return kExitUsage;
  }
  if (args.front().rfind("-", 0) != 0 &&
      std::none_of(commands.begin(), commands.end(),
                   [&](const Command& c) { return c.app->get_name() == args.front(); })) {
    err << "error: unknown subcommand '" << args.front() << "'\n" << app.help();
    return kExitUsage;
  }
  try {
    app.parse(std::vector<std::string>(args.rbegin(), args.rend()));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion&) {
    out << kVersionString << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  const auto* parsed = app.get_subcommands().front();
  const auto it = std::find_if(commands.begin(), commands.end(),
                               [&](const Command& c) { return c.app == parsed; });
  Run run{out, err, {}, {}, false};
  run.manifest.subcommand = parsed->get_name();
  run.manifest.started = iso8601_utc(std::chrono::system_clock::now());
  snapshot_options(run.manifest, *parsed);
  try {
    for (const auto* in : it->inputs) {
      if (!in->empty()) run.manifest.add_input(*in);
    }
    it->handler(run);
    run.manifest.exit_code = run.cancelled ? kExitCancelled : kExitOk;
    run.manifest.finished = iso8601_utc(std::chrono::system_clock::now());
    if (!run.manifest_path.empty()) run.manifest.write(run.manifest_path);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  if (run.cancelled) {
    err << "interrupted; partial outputs were flushed\n";
    return kExitCancelled;
  }
  return kExitOk;
}

}  // namespace fablelm::cli
