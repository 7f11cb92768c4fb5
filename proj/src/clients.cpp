#include "revbrowse/clients.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>

#include "revbrowse/httplib_compat.hpp"
#include <nlohmann/json.hpp>

#include "revbrowse/errors.hpp"
#include "revbrowse/util.hpp"

namespace revbrowse::clients {

namespace {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

struct UrlParts {
    std::string origin;  // scheme://host[:port]
    std::string prefix;  // path prefix, e.g. "/v1"
};

UrlParts split_base_url(const std::string& base_url) {
    auto scheme_end = base_url.find("://");
    std::size_t path_start = base_url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    UrlParts parts;
    if (path_start == std::string::npos) {
        parts.origin = base_url;
    } else {
        parts.origin = base_url.substr(0, path_start);
        parts.prefix = base_url.substr(path_start);
    }
    while (!parts.prefix.empty() && parts.prefix.back() == '/') parts.prefix.pop_back();
    return parts;
}

bool retryable_status(int status) {
    return status == 408 || status == 429 || status >= 500;
}

// POSTs with exponential backoff. Returns the response body on success.
std::string post_json_with_retries(const HttpClientConfig& config, const std::string& path,
                                   const std::string& body) {
    UrlParts parts = split_base_url(config.base_url);
    std::string api_key = config.api_key.empty() ? api_key_from_env() : config.api_key;

    long delay_ms = 250;
    int attempts = 0;
    std::string last_error;
    const int max_attempts = std::max(1, config.max_retries + 1);
    while (attempts < max_attempts) {
        if (attempts > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
            delay_ms = std::min<long>(delay_ms * 2, 4000);
        }
        ++attempts;

        httplib::Client cli(parts.origin);
        cli.set_connection_timeout(config.timeout_seconds, 0);
        cli.set_read_timeout(config.timeout_seconds, 0);
        httplib::Headers headers;
        if (!api_key.empty()) {
            headers.emplace("Authorization", "Bearer " + api_key);
        }
        auto res = cli.Post(parts.prefix + path, headers, body, "application/json");
        if (!res) {
            last_error = "connection failed: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 200) {
            return res->body;
        }
        last_error = "HTTP " + std::to_string(res->status) + ": " + res->body;
        if (!retryable_status(res->status)) break;
    }
    throw TransportError("request to " + path + " failed after " + std::to_string(attempts) +
                             " attempt(s): " + last_error,
                         attempts, delay_ms);
}

}  // namespace

std::string api_key_from_env() {
    const char* key = std::getenv("REVBROWSE_API_KEY");
    return key ? key : "";
}

HttpChatClient::HttpChatClient(HttpClientConfig config) : config_(std::move(config)) {}

ChatResult HttpChatClient::complete(const std::vector<ChatMessage>& messages,
                                    const ChatOptions& options) {
    ordered_json body;
    body["model"] = config_.model;
    body["messages"] = json::array();
    for (const auto& m : messages) {
        body["messages"].push_back({{"role", m.role}, {"content", m.content}});
    }
    body["temperature"] = options.temperature;
    body["max_tokens"] = options.max_tokens;
    if (options.want_logprobs) {
        body["logprobs"] = true;
        body["top_logprobs"] = options.top_logprobs;
    }

    std::string response = post_json_with_retries(config_, "/chat/completions", body.dump());
    json j = json::parse(response, nullptr, false);
    if (j.is_discarded() || !j.contains("choices") || j["choices"].empty()) {
        throw TransportError("malformed chat completion response: " + response.substr(0, 200));
    }
    const json& choice = j["choices"][0];
    ChatResult result;
    if (choice.contains("message") && choice["message"].contains("content") &&
        choice["message"]["content"].is_string()) {
        result.text = choice["message"]["content"].get<std::string>();
    }
    if (choice.contains("logprobs") && choice["logprobs"].is_object() &&
        choice["logprobs"].contains("content") && choice["logprobs"]["content"].is_array() &&
        !choice["logprobs"]["content"].empty()) {
        const json& first = choice["logprobs"]["content"][0];
        if (first.contains("top_logprobs") && first["top_logprobs"].is_array()) {
            result.has_logprobs = true;
            for (const auto& entry : first["top_logprobs"]) {
                if (entry.contains("token") && entry.contains("logprob")) {
                    result.first_token_top_logprobs.push_back(
                        {entry["token"].get<std::string>(), entry["logprob"].get<double>()});
                }
            }
        }
    }
    return result;
}

RecordedChatClient::RecordedChatClient(const std::string& transcript_path) {
    std::ifstream in(transcript_path);
    if (!in) {
        throw MissingArtifactError("cannot open transcript file: " + transcript_path);
    }
    std::string line;
    while (std::getline(in, line)) {
        if (util::trim(line).empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("prompt_hash")) {
            throw ValidationError("malformed transcript line: " + line.substr(0, 120));
        }
        Entry entry;
        entry.text = j.value("text", "");
        if (j.contains("logprobs") && j["logprobs"].is_object()) {
            entry.has_logprobs = true;
            has_logprobs_ = true;
            for (const auto& [token, lp] : j["logprobs"].items()) {
                entry.logprobs.push_back({token, lp.get<double>()});
            }
        }
        entries_[j["prompt_hash"].get<std::string>()] = std::move(entry);
    }
}

std::string RecordedChatClient::prompt_hash(const std::string& prompt) {
    return util::to_hex(util::fnv1a64(prompt));
}

ChatResult RecordedChatClient::complete(const std::vector<ChatMessage>& messages,
                                        const ChatOptions& options) {
    (void)options;
    std::string prompt;
    for (auto it = messages.rbegin(); it != messages.rend(); ++it) {
        if (it->role == "user") {
            prompt = it->content;
            break;
        }
    }
    auto it = entries_.find(prompt_hash(prompt));
    if (it == entries_.end()) {
        throw TransportError("no recorded response for prompt hash " + prompt_hash(prompt));
    }
    ChatResult result;
    result.text = it->second.text;
    result.has_logprobs = it->second.has_logprobs;
    result.first_token_top_logprobs = it->second.logprobs;
    return result;
}

MockEmbedder::MockEmbedder(int dimension) : dimension_(dimension) {
    if (dimension < 1) {
        throw ValidationError("embedding dimension must be positive");
    }
}

Eigen::VectorXd MockEmbedder::embed_one(const std::string& text) const {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(dimension_);
    for (const auto& token : util::tokenize_words(text)) {
        std::uint64_t h = util::fnv1a64(token);
        double sign = (h & 1u) ? 1.0 : -1.0;
        auto bucket = static_cast<Eigen::Index>((h >> 1) % static_cast<std::uint64_t>(dimension_));
        v[bucket] += sign;
    }
    double norm = v.norm();
    if (norm > 0.0) v /= norm;
    return v;
}

std::vector<Eigen::VectorXd> MockEmbedder::embed(const std::vector<std::string>& texts) {
    std::vector<Eigen::VectorXd> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed_one(t));
    return out;
}

HttpEmbeddingClient::HttpEmbeddingClient(HttpClientConfig config, int dimension, int batch_size)
    : config_(std::move(config)), dimension_(dimension), batch_size_(std::max(1, batch_size)) {}

std::vector<Eigen::VectorXd> HttpEmbeddingClient::embed(const std::vector<std::string>& texts) {
    std::vector<Eigen::VectorXd> out;
    out.reserve(texts.size());
    for (std::size_t start = 0; start < texts.size(); start += static_cast<std::size_t>(batch_size_)) {
        std::size_t end = std::min(texts.size(), start + static_cast<std::size_t>(batch_size_));
        ordered_json body;
        body["model"] = config_.model;
        body["input"] = json::array();
        for (std::size_t i = start; i < end; ++i) body["input"].push_back(texts[i]);

        std::string response = post_json_with_retries(config_, "/embeddings", body.dump());
        json j = json::parse(response, nullptr, false);
        if (j.is_discarded() || !j.contains("data") || !j["data"].is_array() ||
            j["data"].size() != end - start) {
            throw TransportError("malformed embedding response: " + response.substr(0, 200));
        }
        for (const auto& item : j["data"]) {
            if (!item.contains("embedding") || !item["embedding"].is_array()) {
                throw TransportError("embedding entry missing vector data");
            }
            Eigen::VectorXd v(static_cast<Eigen::Index>(item["embedding"].size()));
            Eigen::Index idx = 0;
            for (const auto& x : item["embedding"]) v[idx++] = x.get<double>();
            if (v.size() != dimension_) {
                throw TransportError("embedding dimension mismatch: got " +
                                     std::to_string(v.size()) + ", expected " +
                                     std::to_string(dimension_));
            }
            out.push_back(std::move(v));
        }
    }
    return out;
}

TokenBucket::TokenBucket(double rate_per_second, double burst)
    : rate_(rate_per_second), burst_(burst), tokens_(burst), last_(std::chrono::steady_clock::now()) {}

void TokenBucket::acquire() {
    if (rate_ <= 0.0) return;
    std::unique_lock<std::mutex> lock(mutex_);
    while (true) {
        auto now = std::chrono::steady_clock::now();
        double elapsed = std::chrono::duration<double>(now - last_).count();
        last_ = now;
        tokens_ = std::min(burst_, tokens_ + elapsed * rate_);
        if (tokens_ >= 1.0) {
            tokens_ -= 1.0;
            return;
        }
        double wait_s = (1.0 - tokens_) / rate_;
        lock.unlock();
        std::this_thread::sleep_for(std::chrono::duration<double>(wait_s));
        lock.lock();
    }
}

}  // namespace revbrowse::clients
