#pragma once

// Client for an OpenAI-style chat-completions endpoint used as a fluency and
// coherence judge. One generated line per request.

#include <atomic>
#include <chrono>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fablelm/error.hpp"

namespace fablelm {

struct JudgeConfig {
  std::string endpoint_url;  // full URL of the chat-completions route
  std::string model_name;
  double temperature = 0.1;
  std::size_t max_parallel = 4;
  std::chrono::milliseconds timeout{60000};
  std::size_t retries = 3;  // extra attempts after the first
  std::chrono::milliseconds backoff{500};  // doubled after every failed attempt

  void validate() const;
};

/// Fixed system instruction sent with every request.
extern const std::string kJudgeSystemPrompt;

struct JudgePrompt {
  std::string system;
  std::string user;
};

/// Throws InvalidArgument on empty text.
JudgePrompt build_prompt(const std::string& text);

/// {"model", "messages": [system, user], "temperature"} as compact JSON.
std::string request_body(const JudgeConfig& config, const JudgePrompt& prompt);

/// choices[0].message.content of a chat-completions response.
std::string extract_content(const std::string& response_body);

struct Mistake {
  std::string position;
  std::string type;
  std::string original;
  std::string correction;
  std::string explanation;
};

struct LineVerdict {
  int fluency = 0;    // 0..100
  int coherence = 0;  // 0..100
  std::size_t total_mistakes = 0;
  std::vector<Mistake> mistakes;
  std::vector<std::string> warnings;  // clamped scores, count mismatches
};

/// Unparseable judge output. Carries the raw body for the error log.
class VerdictParseError : public FormatError {
 public:
  VerdictParseError(const std::string& what, std::string raw)
      : FormatError(what), raw_(std::move(raw)) {}
  const std::string& raw() const { return raw_; }

 private:
  std::string raw_;
};

/// Strict JSON, optionally wrapped in a ``` fence. Scores outside 0..100 are
/// clamped and noted in `warnings`. When both total_mistakes and the list are
/// present and disagree, the list length wins.
LineVerdict parse_verdict(const std::string& raw);

struct HttpResponse {
  int status = 0;
  std::string body;
};

/// Sends one request body and returns the response. Throws IoError on a
/// transport failure. Must be safe to call from several threads at once.
using JudgeTransport = std::function<HttpResponse(const std::string& body)>;

/// Real HTTP(S) transport. The key goes out as a Bearer token and is never
/// included in error messages.
JudgeTransport http_transport(const JudgeConfig& config, const std::string& api_key);

/// Reads JUDGE_API_KEY. Throws InvalidArgument if it is unset or empty.
std::string judge_api_key_from_env();

struct LineResult {
  std::optional<LineVerdict> verdict;
  std::string error;  // set when every attempt failed
  std::size_t attempts = 0;
};

struct JudgeAggregate {
  double mean_fluency = 0.0;
  double mean_coherence = 0.0;
  std::size_t total_mistakes = 0;
  std::size_t succeeded = 0;
  std::size_t failed = 0;
};

/// Means over the given verdicts. Throws InvalidArgument on an empty list.
JudgeAggregate aggregate_verdicts(const std::vector<LineVerdict>& verdicts);

struct JudgeReport {
  std::vector<LineResult> lines;  // input order
  JudgeAggregate aggregate;

  /// One JSON object per input line, in order.
  std::string to_jsonl(const std::vector<std::string>& inputs) const;
  std::string aggregate_json() const;
};

/// At most max_parallel requests in flight. Failed attempts (transport
/// error, non-2xx, unparseable verdict) are retried with exponential backoff;
/// 401/403 are not retried. Throws Error if every line failed.
JudgeReport judge_batch(const std::vector<std::string>& lines, const JudgeConfig& config,
                        const JudgeTransport& transport,
                        const std::atomic<bool>* cancel = nullptr);

/// Request bodies that judge_batch would send, one per line.
std::vector<std::string> dry_run_bodies(const std::vector<std::string>& lines,
                                        const JudgeConfig& config);

}  // namespace fablelm
