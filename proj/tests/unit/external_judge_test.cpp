#include <gtest/gtest.h>
#include <httplib.h>

#include <atomic>
#include <cstdlib>
#include <mutex>
#include <nlohmann/json.hpp>
#include <thread>

#include "support.hpp"
#include "vstory/error.hpp"
#include "vstory/external_judge.hpp"

using namespace vstory;
using json = nlohmann::json;

namespace {

// Local stand-in for the hosted judge. Replies with coherence = k for a
// generated text "gen<k>", after `fail_first` HTTP 500 replies.
class MockJudgeServer {
 public:
  MockJudgeServer() {
    server_.Post("/v1/judge", [this](const httplib::Request& req, httplib::Response& res) {
      const int now = ++in_flight_;
      int seen = max_in_flight_.load();
      while (now > seen && !max_in_flight_.compare_exchange_weak(seen, now)) {
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
      {
        std::lock_guard lock(mutex_);
        bodies_.push_back(req.body);
        auth_ = req.get_header_value("Authorization");
      }
      ++requests_;
      --in_flight_;
      if (fail_first > 0) {
        --fail_first;
        res.status = 500;
        return;
      }
      const auto body = json::parse(req.body);
      const auto prompt = body.at("prompt").get<std::string>();
      const auto pos = prompt.find("gen");
      const double k = pos == std::string::npos ? 5.0 : static_cast<double>(prompt[pos + 3] - '0');
      json reply = {{"coherence", k}, {"relevance", 4.0}, {"emotional_depth", 6.0}, {"consistency", 8.0}};
      if (malformed) reply.erase("relevance");
      res.set_content(reply.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockJudgeServer() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/judge"; }
  int requests() const { return requests_.load(); }
  int max_in_flight() const { return max_in_flight_.load(); }
  std::vector<std::string> bodies() {
    std::lock_guard lock(mutex_);
    return bodies_;
  }
  std::string auth() {
    std::lock_guard lock(mutex_);
    return auth_;
  }

  std::atomic<int> fail_first{0};
  std::atomic<bool> malformed{false};
  int delay_ms = 0;

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> requests_{0};
  std::atomic<int> in_flight_{0};
  std::atomic<int> max_in_flight_{0};
  std::mutex mutex_;
  std::vector<std::string> bodies_;
  std::string auth_;
};

class ExternalJudgeTest : public ::testing::Test {
 protected:
  void SetUp() override {
    cache_ = vstory::testing::scratch_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
    config_.url = server_.url();
    config_.api_key = "secret";
    config_.model = "judge-model";
    config_.cache_dir = cache_;
    config_.initial_backoff_ms = 1;
    config_.timeout_ms = 5000;
  }
  void TearDown() override { std::filesystem::remove_all(cache_); }

  MockJudgeServer server_;
  ExternalJudgeConfig config_;
  std::filesystem::path cache_;
  Corpus corpus_ = generate_synthetic_corpus(4, 10, {});
};

}  // namespace

TEST_F(ExternalJudgeTest, RequestShapeAndScores) {
  ExternalJudge judge(config_);
  const auto s = judge.score_story("gen3", corpus_.stories[0]);
  EXPECT_EQ(s.coherence, 3.0);
  EXPECT_EQ(s.relevance, 4.0);
  EXPECT_DOUBLE_EQ(s.overall, (3.0 + 4 + 6 + 8) / 4);
  EXPECT_EQ(s.character_development, 8.0);
  EXPECT_EQ(s.plot_progression, 3.0);
  EXPECT_EQ(s.emotional_engagement, 6.0);
  ASSERT_EQ(server_.requests(), 1);
  const auto body = json::parse(server_.bodies()[0]);
  EXPECT_EQ(body.at("model"), "judge-model");
  EXPECT_EQ(body.at("response_format").at("type"), "structured-scores");
  const auto prompt = body.at("prompt").get<std::string>();
  EXPECT_NE(prompt.find(corpus_.stories[0].narrative), std::string::npos);
  EXPECT_NE(prompt.find("gen3"), std::string::npos);
  EXPECT_EQ(server_.auth(), "Bearer secret");
  EXPECT_EQ(judge.kind(), "external");
}

TEST_F(ExternalJudgeTest, CacheMakesRepeatsIdempotent) {
  {
    ExternalJudge judge(config_);
    const auto a = judge.score_story("gen2", corpus_.stories[1]);
    const auto b = judge.score_story("gen2", corpus_.stories[1]);
    EXPECT_EQ(a, b);
    EXPECT_EQ(judge.network_calls(), 1u);
    EXPECT_EQ(judge.cache_hits(), 1u);
  }
  ExternalJudge fresh(config_);
  fresh.score_story("gen2", corpus_.stories[1]);
  EXPECT_EQ(fresh.network_calls(), 0u);
  EXPECT_EQ(server_.requests(), 1);

  // A different model name is a different cache key.
  auto other = config_;
  other.model = "other-model";
  ExternalJudge(other).score_story("gen2", corpus_.stories[1]);
  EXPECT_EQ(server_.requests(), 2);
}

TEST_F(ExternalJudgeTest, RetriesWithBackoff) {
  server_.fail_first = 2;
  ExternalJudge judge(config_);
  EXPECT_EQ(judge.score_story("gen7", corpus_.stories[0]).coherence, 7.0);
  EXPECT_EQ(judge.network_calls(), 3u);
}

TEST_F(ExternalJudgeTest, GivesUpAfterMaxAttempts) {
  server_.fail_first = 10;
  config_.max_attempts = 2;
  ExternalJudge judge(config_);
  EXPECT_THROW(judge.score_story("gen1", corpus_.stories[0]), JudgeError);
  EXPECT_EQ(server_.requests(), 2);
}

TEST_F(ExternalJudgeTest, MalformedReplyIsAJudgeError) {
  server_.malformed = true;
  config_.max_attempts = 1;
  ExternalJudge judge(config_);
  EXPECT_THROW(judge.score_story("gen1", corpus_.stories[0]), JudgeError);
}

TEST_F(ExternalJudgeTest, UnreachableEndpoint) {
  config_.url = "http://127.0.0.1:1/judge";
  config_.max_attempts = 1;
  config_.timeout_ms = 500;
  ExternalJudge judge(config_);
  EXPECT_THROW(judge.score_story("gen1", corpus_.stories[0]), JudgeError);
}

TEST_F(ExternalJudgeTest, BatchIsBoundedAndOrdered) {
  server_.delay_ms = 40;
  config_.max_in_flight = 3;
  ExternalJudge judge(config_);
  std::vector<std::string> texts;
  std::vector<const VisualStory*> refs;
  for (int i = 0; i < 10; ++i) {
    texts.push_back("gen" + std::to_string(i));
    refs.push_back(&corpus_.stories[static_cast<std::size_t>(i)]);
  }
  const auto scores = judge.score_batch(texts, refs);
  ASSERT_EQ(scores.size(), 10u);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(scores[static_cast<std::size_t>(i)].coherence, i);
  EXPECT_LE(server_.max_in_flight(), 3);
  EXPECT_GE(server_.max_in_flight(), 2);
}

TEST(ExternalJudgeConfigTest, EnvironmentAndValidation) {
  ::unsetenv("STORY_JUDGE_URL");
  EXPECT_THROW(ExternalJudgeConfig::from_env(), ConfigError);
  ::setenv("STORY_JUDGE_URL", "http://localhost:9/j", 1);
  ::setenv("STORY_JUDGE_API_KEY", "k", 1);
  const auto c = ExternalJudgeConfig::from_env();
  EXPECT_EQ(c.url, "http://localhost:9/j");
  EXPECT_EQ(c.api_key, "k");
  ::unsetenv("STORY_JUDGE_URL");
  ::unsetenv("STORY_JUDGE_API_KEY");

  ExternalJudgeConfig bad;
  bad.url = "ftp://x";
  EXPECT_THROW(bad.validate(), ConfigError);
  bad.url = "http://x";
  bad.max_in_flight = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(JudgePrompt, TemplateIsVersionedAndFilled) {
  EXPECT_EQ(judge_prompt_version(), "v1");
  const auto tmpl = judge_prompt_template();
  for (const char* slot : {"{{reference}}", "{{generated}}", "{{entities}}", "{{emotions}}"}) {
    EXPECT_NE(tmpl.find(slot), std::string_view::npos) << slot;
  }
  const auto story = generate_synthetic_corpus(1, 1, {}).stories[0];
  const auto prompt = render_judge_prompt(tmpl, "owl sang.", story);
  EXPECT_EQ(prompt.find("{{"), std::string::npos);
  EXPECT_NE(prompt.find(story.narrative), std::string::npos);
  EXPECT_NE(prompt.find("owl sang."), std::string::npos);
}

TEST(JudgeReply, AcceptedShapes) {
  const std::string scores = R"({"coherence":9,"relevance":8,"emotional_depth":7,"consistency":6})";
  const auto direct = parse_judge_reply(scores);
  EXPECT_DOUBLE_EQ(direct.overall, 7.5);
  EXPECT_EQ(parse_judge_reply(R"({"scores":)" + scores + "}"), direct);
  const json chat = {{"choices", json::array({{{"message", {{"content", scores}}}}})}};
  EXPECT_EQ(parse_judge_reply(chat.dump()), direct);
  EXPECT_THROW(parse_judge_reply("not json"), JudgeError);
  EXPECT_THROW(parse_judge_reply(R"({"coherence":11,"relevance":8,"emotional_depth":7,"consistency":6})"),
               JudgeError);
  EXPECT_THROW(parse_judge_reply(R"({"coherence":"high","relevance":8,"emotional_depth":7,"consistency":6})"),
               JudgeError);
}
