#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "revbrowse/clients.hpp"
#include "revbrowse/corpus.hpp"

namespace revbrowse::extraction {

// Structured user preference record: up to 5 short phrases per side.
struct UserPreferences {
    std::string user_id;
    std::vector<std::string> like;
    std::vector<std::string> dislike;
    std::vector<std::string> source_review_ids;

    bool empty() const { return like.empty() && dislike.empty(); }
};

// Structured per-review item feature record: up to 5 phrases per side.
struct ItemFeatures {
    std::string item_id;
    std::string review_id;
    std::vector<std::string> pros;
    std::vector<std::string> cons;

    bool empty() const { return pros.empty() && cons.empty(); }
};

struct ReviewForPrompt {
    std::string item_id;
    std::string title;  // blank title renders as item_id
    std::string text;
    int rating = 0;
};

inline constexpr const char* kTemplateVersion = "v1";

// Prompt renderers produce byte-exact template instantiations; the review
// payload is serialized as a JSON array/object with fields title, review,
// score in that order.
std::string render_user_pref_prompt(const std::vector<ReviewForPrompt>& reviews);
std::string render_item_feature_prompt(const ReviewForPrompt& review);

// Locates the first balanced JSON object in raw model output (tolerating code
// fences and surrounding prose) and validates the expected keys. Missing
// object -> ResponseParseError (retryable); wrong key shapes -> SchemaError.
// Lists are truncated to 5, entries trimmed, empties dropped.
UserPreferences parse_preference_response(const std::string& raw);
ItemFeatures parse_feature_response(const std::string& raw);

// ---------------------------------------------------------------------------
// Rule-based mock extraction. A fixed aspect lexicon maps trigger words found
// in review text to one canonical user-side phrase and one item-side phrase.
// The user-side and item-side vocabularies share no tokens, so mock user
// preferences and mock item features only relate through aspect identity,
// never through surface overlap.

struct Aspect {
    std::string name;
    std::vector<std::string> triggers;  // lowercase single words
    std::string user_phrase;            // emitted into Like / Dislike
    std::string item_phrase;            // emitted into Pros / Cons
    bool defect = false;
};

const std::vector<Aspect>& mock_lexicon();

// Pure function of (rating, text): rating >= 4 routes matched aspects to
// pros, rating <= 2 to cons, rating 3 follows the dominant sentiment word
// count (tie: no output). Aspects are ordered by first trigger occurrence.
ItemFeatures mock_extract(const corpus::Review& review);

// Windowed variant: aggregates per-review routing over the window; phrases
// ordered by frequency then first occurrence, capped at 5 per side.
UserPreferences mock_extract_user(const std::vector<corpus::Review>& window);

// ChatClient that answers the extraction prompts by running the mock rules
// on the review payload embedded in the prompt, so the render -> call ->
// parse path is exercised identically in offline mode.
class MockExtractionChatClient : public clients::ChatClient {
  public:
    clients::ChatResult complete(const std::vector<clients::ChatMessage>& messages,
                                 const clients::ChatOptions& options) override;
    bool supports_logprobs() const override { return false; }
    std::string model_id() const override { return "mock-extract"; }
};

// ---------------------------------------------------------------------------

// Append-only line-delimited cache keyed by a hash of (template version,
// prompt, model id). Reads are lock-free after load; writes are serialized.
class ExtractionCache {
  public:
    // In-memory only when path is empty.
    explicit ExtractionCache(std::string path);

    std::optional<UserPreferences> get_user(const std::string& key) const;
    std::optional<ItemFeatures> get_item(const std::string& key) const;
    void put_user(const std::string& key, const UserPreferences& value);
    void put_item(const std::string& key, const ItemFeatures& value);
    std::size_t size() const;

    static std::string make_key(const std::string& template_version, const std::string& prompt,
                                const std::string& model_id);

  private:
    void append(const std::string& line);

    std::string path_;
    std::map<std::string, UserPreferences> users_;
    std::map<std::string, ItemFeatures> items_;
    mutable std::mutex mutex_;
};

struct ExtractorConfig {
    int max_retries = 3;
    int concurrency = 4;
    double rate_per_second = 0.0;  // <= 0: unlimited
};

// Render -> call -> parse with retry-on-repairable-parse and write-through
// caching. Batch extraction fans out with bounded concurrency.
class Extractor {
  public:
    Extractor(std::shared_ptr<clients::ChatClient> client, std::shared_ptr<ExtractionCache> cache,
              ExtractorConfig config = {});

    UserPreferences extract_user_preferences(const std::vector<ReviewForPrompt>& reviews,
                                             const std::string& user_id,
                                             const std::vector<std::string>& source_review_ids);

    // Returns nullopt (and counts a drop) when both sides come back empty.
    std::optional<ItemFeatures> extract_item_features(const ReviewForPrompt& review,
                                                      const std::string& item_id,
                                                      const std::string& review_id);

    // Bounded-concurrency extraction over many reviews; result order matches
    // input order.
    std::vector<std::optional<ItemFeatures>> extract_many(
        const std::vector<corpus::Review>& reviews,
        const std::unordered_map<std::string, std::string>& titles);

    std::size_t dropped_empty() const { return dropped_empty_; }

  private:
    std::string call_once(const std::string& prompt);

    std::shared_ptr<clients::ChatClient> client_;
    std::shared_ptr<ExtractionCache> cache_;
    ExtractorConfig config_;
    clients::TokenBucket bucket_;
    std::size_t dropped_empty_ = 0;
    std::mutex stats_mutex_;
};

// Lookup helper: title for an item, falling back to the item id.
std::unordered_map<std::string, std::string> make_title_map(
    const std::vector<corpus::ItemMeta>& items);
std::string title_for(const std::unordered_map<std::string, std::string>& titles,
                      const std::string& item_id);

// In-memory feature store with per-item review lists, plus the JSONL
// serialization used for the features artifact.
class FeatureStore {
  public:
    void add(ItemFeatures features, const std::string& user_id);

    const ItemFeatures* find(const std::string& review_id) const;
    const std::vector<std::string>* reviews_for_item(const std::string& item_id) const;
    const std::string* user_of(const std::string& review_id) const;
    std::size_t size() const { return by_review_.size(); }

    // Items in sorted order; reviews per item in insertion order.
    const std::map<std::string, std::vector<std::string>>& items() const {
        return reviews_by_item_;
    }

    void save(const std::string& path) const;
    static FeatureStore load(const std::string& path);

  private:
    std::unordered_map<std::string, ItemFeatures> by_review_;
    std::unordered_map<std::string, std::string> review_user_;
    std::map<std::string, std::vector<std::string>> reviews_by_item_;
};

}  // namespace revbrowse::extraction
