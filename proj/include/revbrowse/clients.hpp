#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>

namespace revbrowse::clients {

struct ChatMessage {
    std::string role;
    std::string content;
};

struct TokenLogprob {
    std::string token;
    double logprob = 0.0;
};

struct ChatResult {
    std::string text;
    bool has_logprobs = false;
    // Top alternatives for the first generated token, as returned by the server.
    std::vector<TokenLogprob> first_token_top_logprobs;
};

struct ChatOptions {
    double temperature = 0.0;
    int max_tokens = 512;
    bool want_logprobs = false;
    int top_logprobs = 26;
};

class ChatClient {
  public:
    virtual ~ChatClient() = default;
    virtual ChatResult complete(const std::vector<ChatMessage>& messages,
                                const ChatOptions& options) = 0;
    virtual bool supports_logprobs() const = 0;
    virtual std::string model_id() const = 0;
};

struct HttpClientConfig {
    std::string base_url;  // e.g. "http://localhost:8080/v1"
    std::string api_key;   // empty means: read REVBROWSE_API_KEY
    std::string model;
    int max_retries = 3;
    int timeout_seconds = 60;
};

// OpenAI-compatible /chat/completions client. Retries transport failures and
// retryable statuses (429, 5xx) with exponential backoff; failures surface as
// TransportError carrying the attempt count and last delay.
class HttpChatClient : public ChatClient {
  public:
    explicit HttpChatClient(HttpClientConfig config);
    ChatResult complete(const std::vector<ChatMessage>& messages,
                        const ChatOptions& options) override;
    bool supports_logprobs() const override { return true; }
    std::string model_id() const override { return config_.model; }

  private:
    HttpClientConfig config_;
};

// Replays recorded responses from a line-delimited file of
// {"prompt_hash": <hex fnv1a64 of the last user message>, "logprobs": {...}, "text": ...}.
// Unknown prompts raise TransportError.
class RecordedChatClient : public ChatClient {
  public:
    explicit RecordedChatClient(const std::string& transcript_path);
    ChatResult complete(const std::vector<ChatMessage>& messages,
                        const ChatOptions& options) override;
    bool supports_logprobs() const override { return has_logprobs_; }
    std::string model_id() const override { return "recorded"; }

    static std::string prompt_hash(const std::string& prompt);

  private:
    struct Entry {
        std::string text;
        bool has_logprobs = false;
        std::vector<TokenLogprob> logprobs;
    };
    std::map<std::string, Entry> entries_;
    bool has_logprobs_ = false;
};

class EmbeddingClient {
  public:
    virtual ~EmbeddingClient() = default;
    virtual std::vector<Eigen::VectorXd> embed(const std::vector<std::string>& texts) = 0;
    virtual int dimension() const = 0;
    virtual std::string model_id() const = 0;
};

// Deterministic bag-of-words embedder: each lowercase alphanumeric token t is
// hashed with FNV-1a 64; bit 0 of the hash gives the sign and the remaining
// bits select a bucket (hash >> 1) % d. Token contributions accumulate and
// the vector is L2-normalized. Identical text yields identical vectors on any
// platform with IEEE doubles.
class MockEmbedder : public EmbeddingClient {
  public:
    explicit MockEmbedder(int dimension = 384);
    std::vector<Eigen::VectorXd> embed(const std::vector<std::string>& texts) override;
    int dimension() const override { return dimension_; }
    std::string model_id() const override { return "mock-hash-" + std::to_string(dimension_); }

    Eigen::VectorXd embed_one(const std::string& text) const;

  private:
    int dimension_;
};

// OpenAI-compatible /embeddings client.
class HttpEmbeddingClient : public EmbeddingClient {
  public:
    HttpEmbeddingClient(HttpClientConfig config, int dimension, int batch_size = 64);
    std::vector<Eigen::VectorXd> embed(const std::vector<std::string>& texts) override;
    int dimension() const override { return dimension_; }
    std::string model_id() const override { return config_.model; }

  private:
    HttpClientConfig config_;
    int dimension_;
    int batch_size_;
};

// Blocking token-bucket rate limiter. rate_per_second <= 0 disables limiting.
class TokenBucket {
  public:
    TokenBucket(double rate_per_second, double burst);
    void acquire();

  private:
    double rate_;
    double burst_;
    double tokens_;
    std::chrono::steady_clock::time_point last_;
    std::mutex mutex_;
};

// Order-preserving parallel map with a bounded worker count. The first
// exception thrown by any task is rethrown after all workers finish.
template <typename Out, typename In, typename Fn>
std::vector<Out> parallel_map(const std::vector<In>& inputs, Fn fn, int workers) {
    std::vector<Out> results(inputs.size());
    if (inputs.empty()) return results;
    if (workers < 1) workers = 1;
    if (static_cast<std::size_t>(workers) > inputs.size()) {
        workers = static_cast<int>(inputs.size());
    }
    if (workers == 1) {
        for (std::size_t i = 0; i < inputs.size(); ++i) results[i] = fn(inputs[i]);
        return results;
    }
    std::mutex mutex;
    std::size_t next = 0;
    std::exception_ptr first_error;
    auto worker = [&]() {
        while (true) {
            std::size_t i;
            {
                std::lock_guard<std::mutex> lock(mutex);
                if (next >= inputs.size() || first_error) return;
                i = next++;
            }
            try {
                results[i] = fn(inputs[i]);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mutex);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(workers));
    for (int t = 0; t < workers; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
    return results;
}

std::string api_key_from_env();

}  // namespace revbrowse::clients
