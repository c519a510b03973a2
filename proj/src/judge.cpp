#include <algorithm>
#include <cstdlib>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "fablelm/judge.hpp"

namespace fablelm {

const std::string kJudgeSystemPrompt =
    "You are an expert in Romanian language. You evaluate texts for fluency, coherence, and "
    "grammatical accuracy with precision. Always respond in valid JSON format only, no "
    "additional text.";

namespace {

// The user template around the substituted text.
constexpr const char* kUserHead =
    "Evaluate the following Romanian text line for fluency, coherence, and grammatical "
    "mistakes.\n"
    "\n"
    "Text:\n";

constexpr const char* kUserTail = R"(

Analyze the text and:
1. **Fluency** (0-100): How natural and fluent the text sounds in Romanian. Consider:
   - Natural word order and phrasing
   - Appropriate use of Romanian expressions
   - Smooth flow and readability
   - 100 = perfectly fluent, natural Romanian
   - 80-99 = very fluent with minor awkwardness
   - 60-79 = mostly fluent but some awkward phrasing
   - 40-59 = somewhat fluent but noticeable issues
   - 0-39 = not fluent, very awkward

2. **Coherence** (0-100): How well the text makes sense and maintains logical flow. Consider:
   - Logical structure and meaning
   - Clear connections between ideas
   - Consistency in narrative/argument
   - 100 = perfectly coherent and clear
   - 80-99 = very coherent with minor issues
   - 60-79 = mostly coherent but some confusion
   - 40-59 = somewhat coherent but unclear parts
   - 0-39 = incoherent, confusing

3. **Mistakes**: Count and identify all grammatical mistakes (agreement, conjugation, declension, word choice, etc.)

Respond in JSON format with the following structure:
{
  "fluency": <score 0-100>,
  "coherence": <score 0-100>,
  "total_mistakes": <exact count of mistakes>,
  "mistakes": [
    {
      "position": "<position in text>",
      "type": "<type of mistake>",
      "original": "<incorrect text>",
      "correction": "<suggested correction>",
      "explanation": "<short explanation>"
    }
  ]
})";

std::string strip_fence(const std::string& raw) {
  const auto first = raw.find_first_not_of(" \t\r\n");
  if (first == std::string::npos || raw.compare(first, 3, "```") != 0) return raw;
  const auto body_start = raw.find('\n', first);
  const auto close = raw.rfind("```");
  if (body_start == std::string::npos || close <= body_start) return raw;
  return raw.substr(body_start + 1, close - body_start - 1);
}

int score_field(const nlohmann::json& j, const char* key, LineVerdict& v, const std::string& raw) {
  if (!j.contains(key)) throw VerdictParseError(std::string("verdict has no \"") + key + "\"", raw);
  const auto& f = j.at(key);
  if (!f.is_number()) throw VerdictParseError(std::string("\"") + key + "\" is not a number", raw);
  const double x = f.get<double>();
  const double c = std::clamp(x, 0.0, 100.0);
  if (c != x) v.warnings.push_back(std::string(key) + " " + f.dump() + " clamped to 0..100");
  return static_cast<int>(std::lround(c));
}

std::string str_or_empty(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return {};
  const auto& f = j.at(key);
  return f.is_string() ? f.get<std::string>() : f.dump();
}

}  // namespace

void JudgeConfig::validate() const {
  if (endpoint_url.empty()) throw InvalidArgument("judge endpoint URL is empty");
  if (model_name.empty()) throw InvalidArgument("judge model name is empty");
  if (!(temperature >= 0.0)) throw InvalidArgument("judge temperature must be >= 0");
  if (max_parallel == 0) throw InvalidArgument("max_parallel must be >= 1");
  if (timeout.count() <= 0) throw InvalidArgument("judge timeout must be positive");
}

JudgePrompt build_prompt(const std::string& text) {
  if (text.empty()) throw InvalidArgument("cannot judge an empty line");
  return {kJudgeSystemPrompt, std::string(kUserHead) + text + kUserTail};
}

std::string request_body(const JudgeConfig& config, const JudgePrompt& prompt) {
  nlohmann::json j;
  j["model"] = config.model_name;
  j["messages"] = nlohmann::json::array({{{"role", "system"}, {"content", prompt.system}},
                                         {{"role", "user"}, {"content", prompt.user}}});
  j["temperature"] = config.temperature;
  return j.dump();
}

std::string extract_content(const std::string& response_body) {
  try {
    const auto j = nlohmann::json::parse(response_body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw VerdictParseError(std::string("malformed chat-completions response: ") + e.what(),
                            response_body);
  }
}

LineVerdict parse_verdict(const std::string& raw) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(strip_fence(raw));
  } catch (const nlohmann::json::exception& e) {
    throw VerdictParseError(std::string("verdict is not JSON: ") + e.what(), raw);
  }
  if (!j.is_object()) throw VerdictParseError("verdict is not a JSON object", raw);
  LineVerdict v;
  v.fluency = score_field(j, "fluency", v, raw);
  v.coherence = score_field(j, "coherence", v, raw);
  const bool has_list = j.contains("mistakes") && j.at("mistakes").is_array();
  if (has_list) {
    for (const auto& m : j.at("mistakes")) {
      if (!m.is_object()) throw VerdictParseError("mistake entry is not an object", raw);
      v.mistakes.push_back({str_or_empty(m, "position"), str_or_empty(m, "type"),
                            str_or_empty(m, "original"), str_or_empty(m, "correction"),
                            str_or_empty(m, "explanation")});
    }
  }
  std::optional<std::size_t> count;
  if (j.contains("total_mistakes") && j.at("total_mistakes").is_number()) {
    const double c = j.at("total_mistakes").get<double>();
    count = c < 0 ? 0 : static_cast<std::size_t>(std::llround(c));
  }
  if (has_list) {
    v.total_mistakes = v.mistakes.size();
    if (count && *count != v.total_mistakes) {
      v.warnings.push_back("total_mistakes " + std::to_string(*count) + " disagrees with " +
                           std::to_string(v.total_mistakes) + " listed mistakes");
    }
  } else {
    v.total_mistakes = count.value_or(0);
  }
  return v;
}

std::string judge_api_key_from_env() {
  const char* key = std::getenv("JUDGE_API_KEY");
  if (key == nullptr || *key == '\0') {
    throw InvalidArgument("JUDGE_API_KEY is not set; the judge endpoint needs a credential");
  }
  return key;
}

JudgeTransport http_transport(const JudgeConfig& config, const std::string& api_key) {
  config.validate();
  const auto scheme_end = config.endpoint_url.find("://");
  if (scheme_end == std::string::npos) {
    throw InvalidArgument("endpoint must look like http(s)://host[:port]/path, got " +
                          config.endpoint_url);
  }
  const auto path_start = config.endpoint_url.find('/', scheme_end + 3);
  const std::string base = config.endpoint_url.substr(0, path_start);
  const std::string path =
      path_start == std::string::npos ? "/" : config.endpoint_url.substr(path_start);
  const auto timeout = config.timeout;
  return [base, path, api_key, timeout](const std::string& body) {
    // One client per call keeps the transport thread-safe.
    httplib::Client client(base);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout).count();
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout).count() % 1000000;
    client.set_connection_timeout(static_cast<time_t>(secs), static_cast<time_t>(usecs));
    client.set_read_timeout(static_cast<time_t>(secs), static_cast<time_t>(usecs));
    client.set_write_timeout(static_cast<time_t>(secs), static_cast<time_t>(usecs));
    httplib::Headers headers{{"Authorization", "Bearer " + api_key}};
    auto res = client.Post(path, headers, body, "application/json");
    if (!res) throw IoError("judge request to " + base + path + " failed: " + httplib::to_string(res.error()));
    return HttpResponse{res->status, res->body};
  };
}

JudgeAggregate aggregate_verdicts(const std::vector<LineVerdict>& verdicts) {
  if (verdicts.empty()) throw InvalidArgument("no verdicts to aggregate");
  JudgeAggregate a;
  double f = 0.0, c = 0.0;
  for (const auto& v : verdicts) {
    f += v.fluency;
    c += v.coherence;
    a.total_mistakes += v.total_mistakes;
  }
  a.mean_fluency = f / static_cast<double>(verdicts.size());
  a.mean_coherence = c / static_cast<double>(verdicts.size());
  a.succeeded = verdicts.size();
  return a;
}

namespace {

LineResult judge_line(const std::string& line, const JudgeConfig& config,
                      const JudgeTransport& transport, const std::atomic<bool>* cancel) {
  LineResult r;
  std::string body;
  try {
    body = request_body(config, build_prompt(line));
  } catch (const Error& e) {
    r.error = e.what();
    return r;
  }
  auto wait = config.backoff;
  for (std::size_t attempt = 0; attempt <= config.retries; ++attempt) {
    if (cancel != nullptr && cancel->load()) {
      r.error = "cancelled";
      return r;
    }
    if (attempt > 0) {
      std::this_thread::sleep_for(wait);
      wait *= 2;
    }
    ++r.attempts;
    try {
      const HttpResponse res = transport(body);
      if (res.status == 401 || res.status == 403) {
        r.error = "judge endpoint rejected the credential (HTTP " + std::to_string(res.status) + ")";
        return r;
      }
      if (res.status < 200 || res.status >= 300) {
        r.error = "HTTP " + std::to_string(res.status) + ": " + res.body.substr(0, 200);
        continue;
      }
      r.verdict = parse_verdict(extract_content(res.body));
      r.error.clear();
      return r;
    } catch (const VerdictParseError& e) {
      r.error = std::string(e.what()) + "; raw: " + e.raw().substr(0, 500);
    } catch (const Error& e) {
      r.error = e.what();
    }
  }
  return r;
}

}  // namespace

JudgeReport judge_batch(const std::vector<std::string>& lines, const JudgeConfig& config,
                        const JudgeTransport& transport, const std::atomic<bool>* cancel) {
  config.validate();
  if (lines.empty()) throw InvalidArgument("no lines to judge");
  JudgeReport report;
  report.lines.resize(lines.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < lines.size(); i = next++) {
      report.lines[i] = judge_line(lines[i], config, transport, cancel);
    }
  };
  const std::size_t n_workers = std::min(config.max_parallel, lines.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::vector<LineVerdict> ok;
  for (const auto& r : report.lines) {
    if (r.verdict) ok.push_back(*r.verdict);
  }
  if (ok.empty()) {
    throw Error("every judge request failed; first error: " + report.lines.front().error);
  }
  report.aggregate = aggregate_verdicts(ok);
  report.aggregate.failed = lines.size() - ok.size();
  return report;
}

std::vector<std::string> dry_run_bodies(const std::vector<std::string>& lines,
                                        const JudgeConfig& config) {
  std::vector<std::string> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(request_body(config, build_prompt(l)));
  return out;
}

std::string JudgeReport::to_jsonl(const std::vector<std::string>& inputs) const {
  if (inputs.size() != lines.size()) throw InvalidArgument("input count differs from results");
  std::string out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    nlohmann::json j;
    j["line"] = i;
    j["text"] = inputs[i];
    j["attempts"] = lines[i].attempts;
    if (const auto& v = lines[i].verdict) {
      j["fluency"] = v->fluency;
      j["coherence"] = v->coherence;
      j["total_mistakes"] = v->total_mistakes;
      j["mistakes"] = nlohmann::json::array();
      for (const auto& m : v->mistakes) {
        j["mistakes"].push_back({{"position", m.position},
                                 {"type", m.type},
                                 {"original", m.original},
                                 {"correction", m.correction},
                                 {"explanation", m.explanation}});
      }
      if (!v->warnings.empty()) j["warnings"] = v->warnings;
    } else {
      j["error"] = lines[i].error;
    }
    out += j.dump() + "\n";
  }
  return out;
}

std::string JudgeReport::aggregate_json() const {
  nlohmann::json j{{"mean_fluency", aggregate.mean_fluency},
                   {"mean_coherence", aggregate.mean_coherence},
                   {"total_mistakes", aggregate.total_mistakes},
                   {"succeeded", aggregate.succeeded},
                   {"failed", aggregate.failed}};
  return j.dump(2) + "\n";
}

}  // namespace fablelm
