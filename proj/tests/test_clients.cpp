#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <thread>

#include "revbrowse/httplib_compat.hpp"
#include <nlohmann/json.hpp>

#include "revbrowse/clients.hpp"
#include "revbrowse/errors.hpp"
#include "revbrowse/util.hpp"

using namespace revbrowse;
using namespace revbrowse::clients;
using nlohmann::json;

namespace {

// In-process OpenAI-style server for exercising the HTTP clients.
class TestServer {
  public:
    TestServer() {
        server_.Post("/v1/chat/completions", [this](const httplib::Request& req,
                                                    httplib::Response& res) {
            ++chat_requests;
            last_auth = req.get_header_value("Authorization");
            last_body = req.body;
            if (fail_next > 0) {
                --fail_next;
                res.status = fail_status;
                res.set_content("simulated failure", "text/plain");
                return;
            }
            json body = json::parse(req.body);
            json reply = {
                {"choices",
                 {{{"message", {{"role", "assistant"}, {"content", chat_reply}}},
                   {"logprobs",
                    {{"content",
                      {{{"token", "B"},
                        {"logprob", -0.2},
                        {"top_logprobs",
                         {{{"token", "B"}, {"logprob", -0.2}},
                          {{"token", "A"}, {"logprob", -1.7}}}}}}}}}}}}};
            (void)body;
            res.set_content(reply.dump(), "application/json");
        });
        server_.Post("/v1/embeddings", [this](const httplib::Request& req,
                                              httplib::Response& res) {
            ++embedding_requests;
            json body = json::parse(req.body);
            json data = json::array();
            int index = 0;
            for (const auto& text : body.at("input")) {
                double seedling = static_cast<double>(text.get<std::string>().size());
                data.push_back({{"object", "embedding"},
                                {"index", index++},
                                {"embedding", {seedling, 0.5, -0.25}}});
            }
            res.set_content(json{{"data", data}}.dump(), "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    ~TestServer() {
        server_.stop();
        thread_.join();
    }

    std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

    std::atomic<int> chat_requests{0};
    std::atomic<int> embedding_requests{0};
    std::atomic<int> fail_next{0};
    int fail_status = 500;
    std::string chat_reply = "hello";
    std::string last_auth;
    std::string last_body;

  private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

HttpClientConfig make_config(const TestServer& server) {
    HttpClientConfig config;
    config.base_url = server.base_url();
    config.api_key = "test-key";
    config.model = "test-model";
    config.max_retries = 2;
    config.timeout_seconds = 5;
    return config;
}

}  // namespace

TEST_CASE("HttpChatClient: success path parses content and logprobs") {
    TestServer server;
    server.chat_reply = "the answer";
    HttpChatClient client(make_config(server));

    ChatOptions options;
    options.want_logprobs = true;
    options.top_logprobs = 26;
    ChatResult result = client.complete({{"user", "ping"}}, options);

    CHECK(result.text == "the answer");
    REQUIRE(result.has_logprobs);
    REQUIRE(result.first_token_top_logprobs.size() == 2);
    CHECK(result.first_token_top_logprobs[0].token == "B");
    CHECK(result.first_token_top_logprobs[0].logprob == doctest::Approx(-0.2));

    CHECK(server.last_auth == "Bearer test-key");
    json body = json::parse(server.last_body);
    CHECK(body.at("model") == "test-model");
    CHECK(body.at("temperature") == doctest::Approx(0.0));
    CHECK(body.at("logprobs") == true);
    CHECK(body.at("top_logprobs") == 26);
    CHECK(body.at("messages")[0].at("content") == "ping");
}

TEST_CASE("HttpChatClient: api key falls back to environment") {
    TestServer server;
    HttpClientConfig config = make_config(server);
    config.api_key = "";
    setenv("REVBROWSE_API_KEY", "env-key", 1);
    HttpChatClient client(config);
    client.complete({{"user", "x"}}, {});
    CHECK(server.last_auth == "Bearer env-key");
    unsetenv("REVBROWSE_API_KEY");
}

TEST_CASE("HttpChatClient: retries transient 500 then succeeds") {
    TestServer server;
    server.fail_next = 2;
    HttpChatClient client(make_config(server));
    ChatResult result = client.complete({{"user", "x"}}, {});
    CHECK(result.text == "hello");
    CHECK(server.chat_requests == 3);
}

TEST_CASE("HttpChatClient: non-retryable 400 fails once") {
    TestServer server;
    server.fail_next = 10;
    server.fail_status = 400;
    HttpChatClient client(make_config(server));
    try {
        client.complete({{"user", "x"}}, {});
        FAIL("expected TransportError");
    } catch (const TransportError& e) {
        CHECK(e.attempts == 1);
        CHECK(e.exit_code() == kExitRemoteFailure);
    }
    CHECK(server.chat_requests == 1);
}

TEST_CASE("HttpChatClient: retries exhausted carries attempt count") {
    TestServer server;
    server.fail_next = 10;
    server.fail_status = 503;
    HttpChatClient client(make_config(server));
    try {
        client.complete({{"user", "x"}}, {});
        FAIL("expected TransportError");
    } catch (const TransportError& e) {
        CHECK(e.attempts == 3);  // max_retries 2 -> 3 attempts
        CHECK(e.last_delay_ms > 0);
    }
    CHECK(server.chat_requests == 3);
}

TEST_CASE("HttpEmbeddingClient: batches requests and parses vectors") {
    TestServer server;
    HttpEmbeddingClient client(make_config(server), 3, 2);
    std::vector<std::string> texts = {"a", "bb", "ccc", "dddd", "eeeee"};
    auto vectors = client.embed(texts);
    REQUIRE(vectors.size() == 5);
    CHECK(server.embedding_requests == 3);  // ceil(5 / 2)
    CHECK(vectors[2][0] == doctest::Approx(3.0));  // length of "ccc"
    CHECK(vectors[2][1] == doctest::Approx(0.5));
    CHECK(vectors[2][2] == doctest::Approx(-0.25));
}

TEST_CASE("HttpEmbeddingClient: dimension mismatch is a transport error") {
    TestServer server;
    HttpEmbeddingClient client(make_config(server), 7);
    CHECK_THROWS_AS(client.embed({"x"}), TransportError);
}

TEST_CASE("MockEmbedder: deterministic, unit-norm, documented hash scheme") {
    MockEmbedder embedder(384);
    Eigen::VectorXd a = embedder.embed_one("crunchy snacks");
    Eigen::VectorXd b = embedder.embed_one("crunchy snacks");
    CHECK((a - b).norm() == 0.0);
    CHECK(a.norm() == doctest::Approx(1.0));

    // Oracle for a single-token text: exactly one slot holds +-1.
    std::uint64_t h = util::fnv1a64("crunchy");
    auto bucket = static_cast<Eigen::Index>((h >> 1) % 384);
    double sign = (h & 1u) ? 1.0 : -1.0;
    Eigen::VectorXd single = embedder.embed_one("Crunchy!");  // case and punctuation ignored
    CHECK(single[bucket] == doctest::Approx(sign));
    CHECK(single.norm() == doctest::Approx(1.0));
}

TEST_CASE("MockEmbedder: empty text embeds to the zero vector") {
    MockEmbedder embedder(16);
    CHECK(embedder.embed_one("").norm() == 0.0);
}

TEST_CASE("MockEmbedder: batch embed matches embed_one") {
    MockEmbedder embedder(64);
    auto batch = embedder.embed({"deep bass", "keen edge"});
    REQUIRE(batch.size() == 2);
    CHECK((batch[0] - embedder.embed_one("deep bass")).norm() == 0.0);
    CHECK((batch[1] - embedder.embed_one("keen edge")).norm() == 0.0);
}

TEST_CASE("RecordedChatClient: replays by prompt hash") {
    std::string path = "test_transcript.jsonl";
    {
        std::ofstream out(path);
        json line1 = {{"prompt_hash", RecordedChatClient::prompt_hash("known prompt")},
                      {"text", "recorded reply"},
                      {"logprobs", {{"A", -0.1}, {"B", -2.3}}}};
        json line2 = {{"prompt_hash", RecordedChatClient::prompt_hash("plain prompt")},
                      {"text", "no logprobs here"}};
        out << line1.dump() << "\n" << line2.dump() << "\n";
    }
    RecordedChatClient client(path);
    CHECK(client.supports_logprobs());

    ChatResult result = client.complete({{"user", "known prompt"}}, {});
    CHECK(result.text == "recorded reply");
    REQUIRE(result.has_logprobs);
    CHECK(result.first_token_top_logprobs.size() == 2);

    ChatResult plain = client.complete({{"user", "plain prompt"}}, {});
    CHECK(plain.text == "no logprobs here");
    CHECK_FALSE(plain.has_logprobs);

    CHECK_THROWS_AS(client.complete({{"user", "never recorded"}}, {}), TransportError);
    std::remove(path.c_str());
}

TEST_CASE("RecordedChatClient: missing transcript file") {
    CHECK_THROWS_AS(RecordedChatClient("does_not_exist.jsonl"), MissingArtifactError);
}

TEST_CASE("TokenBucket: enforces the configured rate") {
    TokenBucket bucket(50.0, 1.0);
    auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < 5; ++i) bucket.acquire();
    double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    // First acquire is free (burst 1); four more at 50/s need >= 80ms.
    CHECK(elapsed >= 0.06);
}

TEST_CASE("parallel_map: preserves order and propagates the first exception") {
    std::vector<int> inputs;
    for (int i = 0; i < 100; ++i) inputs.push_back(i);
    auto doubled = parallel_map<int>(inputs, [](int x) { return 2 * x; }, 8);
    REQUIRE(doubled.size() == 100);
    for (int i = 0; i < 100; ++i) CHECK(doubled[i] == 2 * i);

    CHECK_THROWS_AS(parallel_map<int>(
                        inputs,
                        [](int x) -> int {
                            if (x == 42) throw ValidationError("boom at 42");
                            return x;
                        },
                        8),
                    ValidationError);
}
