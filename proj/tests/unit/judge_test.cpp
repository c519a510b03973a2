#include <gtest/gtest.h>

#include <cstdlib>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "fablelm/judge.hpp"
#include "test_util.hpp"

namespace fablelm {
namespace {

using testing::read_file;

std::string fixture(const std::string& name) {
  return read_file(std::string(FABLELM_FIXTURE_DIR) + "/" + name);
}

std::string chat_reply(const nlohmann::json& verdict) {
  const nlohmann::json reply{
      {"choices", {{{"message", {{"role", "assistant"}, {"content", verdict.dump()}}}}}}};
  return reply.dump();
}

JudgeConfig fast_config() {
  JudgeConfig c;
  c.endpoint_url = "http://127.0.0.1:9/v1/chat/completions";
  c.model_name = "judge";
  c.backoff = std::chrono::milliseconds(1);
  return c;
}

TEST(JudgePrompt, MatchesReferenceText) {
  const std::string text = "Vulpea a găsit „brânza”.";
  const auto p = build_prompt(text);
  EXPECT_EQ(p.system, fixture("judge_system.txt"));
  std::string expect = fixture("judge_user_template.txt");
  expect.replace(expect.find("{text}"), 6, text);
  EXPECT_EQ(p.user, expect);
  EXPECT_THROW(build_prompt(""), InvalidArgument);
}

TEST(JudgePrompt, RequestBodyShape) {
  auto c = fast_config();
  const auto j = nlohmann::json::parse(request_body(c, build_prompt("x")));
  EXPECT_EQ(j["model"], "judge");
  EXPECT_EQ(j["temperature"].get<double>(), 0.1);
  ASSERT_EQ(j["messages"].size(), 2u);
  EXPECT_EQ(j["messages"][0]["role"], "system");
  EXPECT_EQ(j["messages"][1]["role"], "user");
  EXPECT_EQ(dry_run_bodies({"x", "y"}, c).size(), 2u);
  EXPECT_EQ(dry_run_bodies({"x"}, c)[0], request_body(c, build_prompt("x")));
}

TEST(JudgeConfig, Validate) {
  auto c = fast_config();
  EXPECT_NO_THROW(c.validate());
  c.max_parallel = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = fast_config();
  c.model_name.clear();
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(ParseVerdict, PlainAndFenced) {
  const std::string body =
      R"({"fluency": 85, "coherence": 70, "total_mistakes": 1, "mistakes": [{"position": "3",
          "type": "acord", "original": "au", "correction": "a", "explanation": "singular"}]})";
  const auto v = parse_verdict(body);
  EXPECT_EQ(v.fluency, 85);
  EXPECT_EQ(v.coherence, 70);
  EXPECT_EQ(v.total_mistakes, 1u);
  ASSERT_EQ(v.mistakes.size(), 1u);
  EXPECT_EQ(v.mistakes[0].correction, "a");
  EXPECT_TRUE(v.warnings.empty());
  const auto fenced = parse_verdict("```json\n" + body + "\n```\n");
  EXPECT_EQ(fenced.fluency, 85);
}

TEST(ParseVerdict, ClampsAndReconciles) {
  const auto v = parse_verdict(R"({"fluency": 120, "coherence": -3, "total_mistakes": 5, "mistakes": []})");
  EXPECT_EQ(v.fluency, 100);
  EXPECT_EQ(v.coherence, 0);
  EXPECT_EQ(v.total_mistakes, 0u);  // the list wins
  EXPECT_EQ(v.warnings.size(), 3u);
  EXPECT_EQ(parse_verdict(R"({"fluency": 50, "coherence": 50, "total_mistakes": 2})").total_mistakes, 2u);
  EXPECT_EQ(parse_verdict(R"({"fluency": 50, "coherence": 50})").total_mistakes, 0u);
}

TEST(ParseVerdict, ErrorsCarryRawBody) {
  for (const std::string bad : {"not json", "[1, 2]", R"({"fluency": 50})",
                                R"({"fluency": "high", "coherence": 2})",
                                R"({"fluency": 1, "coherence": 2, "mistakes": [3]})"}) {
    try {
      parse_verdict(bad);
      ADD_FAILURE() << "accepted " << bad;
    } catch (const VerdictParseError& e) {
      EXPECT_EQ(e.raw(), bad);
    }
  }
  EXPECT_THROW(extract_content("{\"choices\": []}"), VerdictParseError);
}

TEST(Aggregate, MeansAndTotals) {
  std::vector<LineVerdict> vs(3);
  vs[0].fluency = 80;
  vs[1].fluency = 90;
  vs[2].fluency = 100;
  vs[0].coherence = 60;
  vs[2].total_mistakes = 4;
  const auto a = aggregate_verdicts(vs);
  EXPECT_DOUBLE_EQ(a.mean_fluency, 90.0);
  EXPECT_DOUBLE_EQ(a.mean_coherence, 20.0);
  EXPECT_EQ(a.total_mistakes, 4u);
  EXPECT_THROW(aggregate_verdicts({}), InvalidArgument);
}

// Scores each request by the digit in its text so results can be traced to lines.
int score_of(const std::string& body) {
  const auto user = nlohmann::json::parse(body)["messages"][1]["content"].get<std::string>();
  const auto pos = user.find("linia ");
  return 10 * (user[pos + 6] - '0');
}

TEST(JudgeBatch, KeepsInputOrderUnderConcurrency) {
  auto c = fast_config();
  c.max_parallel = 3;
  std::atomic<int> in_flight{0}, peak{0};
  const JudgeTransport t = [&](const std::string& body) {
    const int now = ++in_flight;
    int p = peak.load();
    while (now > p && !peak.compare_exchange_weak(p, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    --in_flight;
    const int s = score_of(body);
    return HttpResponse{200, chat_reply({{"fluency", s}, {"coherence", s}, {"total_mistakes", 0}})};
  };
  std::vector<std::string> lines;
  for (int i = 0; i < 10; ++i) lines.push_back("linia " + std::to_string(i));
  const auto r = judge_batch(lines, c, t);
  ASSERT_EQ(r.lines.size(), 10u);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(r.lines[i].verdict->fluency, 10 * i);
  EXPECT_LE(peak.load(), 3);
  EXPECT_GE(peak.load(), 2);
  EXPECT_DOUBLE_EQ(r.aggregate.mean_fluency, 45.0);
  const auto jsonl = r.to_jsonl(lines);
  EXPECT_EQ(std::count(jsonl.begin(), jsonl.end(), '\n'), 10);
  EXPECT_EQ(nlohmann::json::parse(jsonl.substr(0, jsonl.find('\n')))["text"], "linia 0");
  EXPECT_EQ(nlohmann::json::parse(r.aggregate_json())["succeeded"], 10);
}

TEST(JudgeBatch, RetriesTransientFailures) {
  auto c = fast_config();
  c.retries = 3;
  std::mutex mu;
  std::map<std::string, int> calls;
  const JudgeTransport t = [&](const std::string& body) {
    int n;
    {
      std::lock_guard<std::mutex> lock(mu);
      n = ++calls[body];
    }
    if (n == 1) throw IoError("connection reset");
    if (n == 2) return HttpResponse{503, "busy"};
    if (n == 3) return HttpResponse{200, chat_reply({{"fluency", "x"}})};
    return HttpResponse{200, chat_reply({{"fluency", 70}, {"coherence", 80}})};
  };
  const auto r = judge_batch({"linia 1"}, c, t);
  EXPECT_EQ(r.lines[0].attempts, 4u);
  EXPECT_EQ(r.lines[0].verdict->coherence, 80);
  EXPECT_TRUE(r.lines[0].error.empty());
}

TEST(JudgeBatch, PartialFailureAndNoRetryOnAuth) {
  auto c = fast_config();
  c.retries = 2;
  std::atomic<int> auth_calls{0};
  const JudgeTransport t = [&](const std::string& body) {
    if (score_of(body) == 10) {
      ++auth_calls;
      return HttpResponse{401, "unauthorized"};
    }
    return HttpResponse{200, chat_reply({{"fluency", 60}, {"coherence", 60}})};
  };
  const auto r = judge_batch({"linia 0", "linia 1"}, c, t);
  EXPECT_EQ(auth_calls.load(), 1);
  EXPECT_FALSE(r.lines[1].verdict.has_value());
  EXPECT_NE(r.lines[1].error.find("401"), std::string::npos);
  EXPECT_EQ(r.aggregate.succeeded, 1u);
  EXPECT_EQ(r.aggregate.failed, 1u);
  const auto jsonl = r.to_jsonl({"linia 0", "linia 1"});
  EXPECT_NE(jsonl.find("\"error\""), std::string::npos);
}

TEST(JudgeBatch, AllFailedThrows) {
  auto c = fast_config();
  c.retries = 1;
  std::atomic<int> calls{0};
  const JudgeTransport t = [&](const std::string&) {
    ++calls;
    return HttpResponse{500, "down"};
  };
  EXPECT_THROW(judge_batch({"a", "b"}, c, t), Error);
  EXPECT_EQ(calls.load(), 4);
}

TEST(JudgeBatch, CancelStopsBeforeSending) {
  std::atomic<bool> cancel{true};
  std::atomic<int> calls{0};
  const JudgeTransport t = [&](const std::string&) {
    ++calls;
    return HttpResponse{200, ""};
  };
  EXPECT_THROW(judge_batch({"a"}, fast_config(), t, &cancel), Error);
  EXPECT_EQ(calls.load(), 0);
}

TEST(HttpTransport, TalksToLoopbackStubWithBearerKey) {
  httplib::Server server;
  std::string auth, content_type;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    auth = req.get_header_value("Authorization");
    content_type = req.get_header_value("Content-Type");
    res.status = 200;
    res.set_content(chat_reply({{"fluency", 77}, {"coherence", 66}}), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  auto c = fast_config();
  c.endpoint_url = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  const auto r = judge_batch({"Un rând."}, c, http_transport(c, "secret-123"));
  server.stop();
  th.join();
  EXPECT_EQ(auth, "Bearer secret-123");
  EXPECT_EQ(content_type, "application/json");
  EXPECT_EQ(r.lines[0].verdict->fluency, 77);
}

TEST(HttpTransport, ErrorsDoNotLeakTheKey) {
  auto c = fast_config();
  c.endpoint_url = "http://127.0.0.1:1/v1/chat/completions";  // nothing listens on port 1
  c.timeout = std::chrono::milliseconds(500);
  const auto t = http_transport(c, "very-secret-key");
  try {
    t("{}");
    ADD_FAILURE() << "expected a transport error";
  } catch (const IoError& e) {
    EXPECT_EQ(std::string(e.what()).find("very-secret-key"), std::string::npos);
  }
  c.endpoint_url = "no-scheme";
  EXPECT_THROW(http_transport(c, "k"), InvalidArgument);
}

TEST(ApiKey, ReadFromEnvironment) {
  ::setenv("JUDGE_API_KEY", "abc", 1);
  EXPECT_EQ(judge_api_key_from_env(), "abc");
  ::setenv("JUDGE_API_KEY", "", 1);
  EXPECT_THROW(judge_api_key_from_env(), InvalidArgument);
  ::unsetenv("JUDGE_API_KEY");
  EXPECT_THROW(judge_api_key_from_env(), InvalidArgument);
}

}  // namespace
}  // namespace fablelm
