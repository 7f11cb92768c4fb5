#include "revbrowse/extraction.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "revbrowse/errors.hpp"
#include "revbrowse/util.hpp"

namespace revbrowse::extraction {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr const char* kUserTemplateHead =
    "Instruction:\n"
    "Given a list of items a user bought along with their title, reviews, and score in JSON "
    "format, generate user preferences.\n"
    "\n"
    "Input:\n"
    "User reviews: ";

constexpr const char* kUserTemplateTail =
    "\n"
    "\n"
    "Response:\n"
    "A JSON object with two keys: Like and Dislike, each containing up to 5 high-level user "
    "preferences based on the comments.\n"
    "Preferences must:\n"
    "1. Reflect general likes and dislikes, not specific brands or items.\n"
    "2. Be derived from the content of the reviews.\n"
    "3. Exclude mentions of delivery time or pricing.\n"
    "4. Be concise and simple.\n"
    "\n"
    "Output format:\n"
    "{\n"
    "  \"Like\": [\"...\"],\n"
    "  \"Dislike\": [\"...\"]\n"
    "}";

constexpr const char* kItemTemplateHead =
    "Instruction:\n"
    "Given user reviews of purchased items in JSON format, extract high-level item properties "
    "from the comments.\n"
    "\n"
    "Input:\n"
    "Item review: ";

constexpr const char* kItemTemplateTail =
    "\n"
    "\n"
    "Response:\n"
    "A JSON object with two keys: Pros and Cons, each containing up to 5 high-level item "
    "properties.\n"
    "Properties must:\n"
    "1. Summarize general strengths and weaknesses of the items.\n"
    "2. Be derived from the content of the reviews.\n"
    "3. Avoid mentioning specific brands or item names.\n"
    "4. Exclude any comments related to delivery time or pricing.\n"
    "5. Be simple, short, and concise.\n"
    "\n"
    "Output format:\n"
    "{\n"
    "  \"Pros\": [\"...\"],\n"
    "  \"Cons\": [\"...\"]\n"
    "}";

ordered_json review_payload(const ReviewForPrompt& review) {
    ordered_json entry;
    entry["title"] = review.title.empty() ? review.item_id : review.title;
    entry["review"] = review.text;
    entry["score"] = review.rating;
    return entry;
}

// Scans for the first balanced brace span that parses as a JSON object.
std::optional<ordered_json> first_json_object(const std::string& raw) {
    for (std::size_t start = 0; start < raw.size(); ++start) {
        if (raw[start] != '{') continue;
        int depth = 0;
        bool in_string = false;
        bool escaped = false;
        for (std::size_t i = start; i < raw.size(); ++i) {
            char c = raw[i];
            if (in_string) {
                if (escaped) {
                    escaped = false;
                } else if (c == '\\') {
                    escaped = true;
                } else if (c == '"') {
                    in_string = false;
                }
                continue;
            }
            if (c == '"') {
                in_string = true;
            } else if (c == '{') {
                ++depth;
            } else if (c == '}') {
                --depth;
                if (depth == 0) {
                    ordered_json parsed = ordered_json::parse(
                        raw.substr(start, i - start + 1), nullptr, false);
                    if (!parsed.is_discarded() && parsed.is_object()) return parsed;
                    break;  // balanced but unparseable: try the next '{'
                }
            }
        }
    }
    return std::nullopt;
}

std::vector<std::string> string_list(const ordered_json& object, const std::string& key) {
    if (!object.contains(key)) {
        throw SchemaError("response object missing key '" + key + "'");
    }
    const auto& value = object.at(key);
    if (!value.is_array()) {
        throw SchemaError("response key '" + key + "' is not a list");
    }
    std::vector<std::string> out;
    for (const auto& entry : value) {
        if (!entry.is_string()) {
            throw SchemaError("response key '" + key + "' holds a non-string entry");
        }
        out.push_back(entry.get<std::string>());
        if (out.size() == 5) break;  // truncate before cleanup
    }
    std::vector<std::string> cleaned;
    for (auto& phrase : out) {
        std::string trimmed = util::trim(phrase);
        if (!trimmed.empty()) cleaned.push_back(std::move(trimmed));
    }
    return cleaned;
}

const std::unordered_set<std::string>& positive_words() {
    static const std::unordered_set<std::string> words = {
        "love", "loved", "great", "excellent", "amazing", "perfect", "wonderful"};
    return words;
}

const std::unordered_set<std::string>& negative_words() {
    static const std::unordered_set<std::string> words = {
        "hate", "hated", "terrible", "awful", "disappointing", "poor", "broken"};
    return words;
}

enum class Side { kPositive, kNegative, kNone };

Side route_side(int rating, const std::vector<std::string>& tokens) {
    if (rating >= 4) return Side::kPositive;
    if (rating <= 2) return Side::kNegative;
    int pos = 0;
    int neg = 0;
    for (const auto& token : tokens) {
        if (positive_words().count(token)) ++pos;
        if (negative_words().count(token)) ++neg;
    }
    if (pos > neg) return Side::kPositive;
    if (neg > pos) return Side::kNegative;
    return Side::kNone;
}

const std::unordered_map<std::string, std::size_t>& trigger_index() {
    static const std::unordered_map<std::string, std::size_t> index = [] {
        std::unordered_map<std::string, std::size_t> map;
        const auto& lexicon = mock_lexicon();
        for (std::size_t i = 0; i < lexicon.size(); ++i) {
            for (const auto& trigger : lexicon[i].triggers) map.emplace(trigger, i);
        }
        return map;
    }();
    return index;
}

// Aspect indices in order of first trigger occurrence in the text.
std::vector<std::size_t> matched_aspects(const std::vector<std::string>& tokens) {
    std::vector<std::size_t> matches;
    std::unordered_set<std::size_t> seen;
    for (const auto& token : tokens) {
        auto it = trigger_index().find(token);
        if (it == trigger_index().end()) continue;
        if (seen.insert(it->second).second) matches.push_back(it->second);
    }
    return matches;
}

void cap_five(std::vector<std::string>& phrases) {
    if (phrases.size() > 5) phrases.resize(5);
}

}  // namespace

std::string render_user_pref_prompt(const std::vector<ReviewForPrompt>& reviews) {
    ordered_json payload = ordered_json::array();
    for (const auto& review : reviews) payload.push_back(review_payload(review));
    return std::string(kUserTemplateHead) + payload.dump() + kUserTemplateTail;
}

std::string render_item_feature_prompt(const ReviewForPrompt& review) {
    return std::string(kItemTemplateHead) + review_payload(review).dump() + kItemTemplateTail;
}

UserPreferences parse_preference_response(const std::string& raw) {
    auto object = first_json_object(raw);
    if (!object) {
        throw ResponseParseError("no JSON object found in extraction response");
    }
    UserPreferences prefs;
    prefs.like = string_list(*object, "Like");
    prefs.dislike = string_list(*object, "Dislike");
    return prefs;
}

ItemFeatures parse_feature_response(const std::string& raw) {
    auto object = first_json_object(raw);
    if (!object) {
        throw ResponseParseError("no JSON object found in extraction response");
    }
    ItemFeatures features;
    features.pros = string_list(*object, "Pros");
    features.cons = string_list(*object, "Cons");
    return features;
}

const std::vector<Aspect>& mock_lexicon() {
    static const std::vector<Aspect> lexicon = {
        {"crunch", {"crunchy", "crispy"}, "crunchy snacks", "crisp texture", false},
        {"flavor", {"tasty", "delicious"}, "tasty flavors", "delicious taste", false},
        {"fresh", {"fresh"}, "freshness", "just baked quality", false},
        {"aroma", {"aromatic", "fragrant"}, "rich aroma", "fragrant smell", false},
        {"roast", {"roasted", "dark"}, "dark roast", "bold roasted body", false},
        {"smooth", {"smooth"}, "smooth blends", "mellow finish", false},
        {"story", {"story", "plot"}, "engaging storylines", "gripping narrative", false},
        {"graphics", {"graphics", "visuals"}, "stunning graphics", "beautiful artwork", false},
        {"multiplayer", {"multiplayer", "cooperative"}, "multiplayer modes", "fun with friends",
         false},
        {"bass", {"bass"}, "deep bass", "powerful low end", false},
        {"comfort", {"comfortable", "comfy"}, "comfortable wear", "cozy padding", false},
        {"battery", {"battery"}, "long battery", "lasting charge", false},
        {"durable", {"durable", "sturdy"}, "durable gear", "solid build", false},
        {"light", {"lightweight", "light"}, "lightweight equipment", "easy to carry", false},
        {"grip", {"grip"}, "secure grip", "firm handle", false},
        {"bloom", {"blooms", "flowering"}, "vibrant blooms", "colorful petals", false},
        {"hardy", {"hardy"}, "hardy plants", "weather resistant", false},
        {"yield", {"yield", "harvest"}, "generous yield", "abundant crop", false},
        {"sharp", {"sharp"}, "sharp blades", "keen edge", false},
        {"nonstick", {"nonstick"}, "nonstick surfaces", "clean release", false},
        {"capacity", {"spacious", "capacity"}, "spacious capacity", "roomy interior", false},
        {"prose", {"prose", "writing"}, "elegant prose", "graceful style", false},
        {"pacing", {"pacing", "fast"}, "brisk pacing", "swift momentum", false},
        {"depth", {"insightful", "depth"}, "insightful depth", "thought provoking", false},
        {"flimsy", {"flimsy", "fragile"}, "flimsy construction", "breaks easily", true},
        {"noisy", {"noisy", "loud"}, "noisy operation", "constant rattle", true},
        {"stale", {"stale"}, "stale batches", "went flat quickly", true},
        {"buggy", {"buggy", "glitchy"}, "buggy software", "frequent glitches", true},
        {"cramped", {"cramped", "tight"}, "cramped design", "restrictive sizing", true},
        {"leaky", {"leaky", "leaks"}, "leaky seals", "drips constantly", true},
        {"faded", {"faded", "dull"}, "faded colors", "washed out appearance", true},
        {"wobbly", {"wobbly", "unstable"}, "wobbly base", "shaky footing", true},
    };
    return lexicon;
}

ItemFeatures mock_extract(const corpus::Review& review) {
    ItemFeatures features;
    features.item_id = review.item_id;
    features.review_id = review.review_id;
    std::vector<std::string> tokens = util::tokenize_words(review.text);
    Side side = route_side(review.rating, tokens);
    if (side == Side::kNone) return features;
    for (std::size_t aspect : matched_aspects(tokens)) {
        const std::string& phrase = mock_lexicon()[aspect].item_phrase;
        (side == Side::kPositive ? features.pros : features.cons).push_back(phrase);
    }
    cap_five(features.pros);
    cap_five(features.cons);
    return features;
}

UserPreferences mock_extract_user(const std::vector<corpus::Review>& window) {
    struct Tally {
        int count = 0;
        std::size_t first_seen = 0;
    };
    std::map<std::pair<std::size_t, bool>, Tally> tallies;  // (aspect, is_like)
    std::size_t sequence = 0;
    for (const auto& review : window) {
        std::vector<std::string> tokens = util::tokenize_words(review.text);
        Side side = route_side(review.rating, tokens);
        if (side == Side::kNone) continue;
        for (std::size_t aspect : matched_aspects(tokens)) {
            auto key = std::make_pair(aspect, side == Side::kPositive);
            auto [it, inserted] = tallies.emplace(key, Tally{0, sequence});
            it->second.count += 1;
            ++sequence;
        }
    }
    auto collect = [&](bool is_like) {
        std::vector<std::pair<std::size_t, Tally>> entries;
        for (const auto& [key, tally] : tallies) {
            if (key.second == is_like) entries.emplace_back(key.first, tally);
        }
        std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
            if (a.second.count != b.second.count) return a.second.count > b.second.count;
            return a.second.first_seen < b.second.first_seen;
        });
        std::vector<std::string> phrases;
        for (const auto& [aspect, tally] : entries) {
            phrases.push_back(mock_lexicon()[aspect].user_phrase);
            if (phrases.size() == 5) break;
        }
        return phrases;
    };
    UserPreferences prefs;
    prefs.like = collect(true);
    prefs.dislike = collect(false);
    for (const auto& review : window) prefs.source_review_ids.push_back(review.review_id);
    return prefs;
}

clients::ChatResult MockExtractionChatClient::complete(
    const std::vector<clients::ChatMessage>& messages, const clients::ChatOptions& options) {
    (void)options;
    if (messages.empty()) {
        throw ValidationError("mock extraction client called with no messages");
    }
    const std::string& prompt = messages.back().content;
    auto slice_payload = [&](const std::string& marker) {
        std::size_t begin = prompt.find(marker);
        std::size_t end = prompt.find("\n\nResponse:");
        if (begin == std::string::npos || end == std::string::npos || end < begin) {
            throw ValidationError("mock extraction client got an unrecognized prompt");
        }
        begin += marker.size();
        return prompt.substr(begin, end - begin);
    };

    clients::ChatResult result;
    if (prompt.find("generate user preferences") != std::string::npos) {
        ordered_json payload = ordered_json::parse(slice_payload("User reviews: "));
        std::vector<corpus::Review> window;
        for (const auto& entry : payload) {
            corpus::Review review;
            review.rating = entry.at("score").get<int>();
            review.text = entry.at("review").get<std::string>();
            window.push_back(std::move(review));
        }
        UserPreferences prefs = mock_extract_user(window);
        ordered_json response;
        response["Like"] = prefs.like;
        response["Dislike"] = prefs.dislike;
        result.text = response.dump();
    } else if (prompt.find("extract high-level item properties") != std::string::npos) {
        ordered_json payload = ordered_json::parse(slice_payload("Item review: "));
        corpus::Review review;
        review.rating = payload.at("score").get<int>();
        review.text = payload.at("review").get<std::string>();
        ItemFeatures features = mock_extract(review);
        ordered_json response;
        response["Pros"] = features.pros;
        response["Cons"] = features.cons;
        result.text = response.dump();
    } else {
        throw ValidationError("mock extraction client got an unrecognized prompt");
    }
    return result;
}

ExtractionCache::ExtractionCache(std::string path) : path_(std::move(path)) {
    if (path_.empty()) return;
    std::ifstream in(path_);
    if (!in) return;  // first run: file created on first put
    std::string line;
    while (std::getline(in, line)) {
        if (util::trim(line).empty()) continue;
        ordered_json entry = ordered_json::parse(line, nullptr, false);
        if (entry.is_discarded() || !entry.is_object()) {
            throw ValidationError("corrupt extraction cache line in " + path_);
        }
        std::string key = entry.at("key").get<std::string>();
        std::string kind = entry.at("kind").get<std::string>();
        if (kind == "user") {
            UserPreferences prefs;
            prefs.like = entry.at("like").get<std::vector<std::string>>();
            prefs.dislike = entry.at("dislike").get<std::vector<std::string>>();
            users_[key] = std::move(prefs);
        } else if (kind == "item") {
            ItemFeatures features;
            features.pros = entry.at("pros").get<std::vector<std::string>>();
            features.cons = entry.at("cons").get<std::vector<std::string>>();
            items_[key] = std::move(features);
        } else {
            throw ValidationError("unknown extraction cache kind '" + kind + "'");
        }
    }
}

std::optional<UserPreferences> ExtractionCache::get_user(const std::string& key) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = users_.find(key);
    if (it == users_.end()) return std::nullopt;
    return it->second;
}

std::optional<ItemFeatures> ExtractionCache::get_item(const std::string& key) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = items_.find(key);
    if (it == items_.end()) return std::nullopt;
    return it->second;
}

void ExtractionCache::put_user(const std::string& key, const UserPreferences& value) {
    std::lock_guard<std::mutex> lock(mutex_);
    if (users_.count(key)) return;
    users_[key] = value;
    ordered_json entry;
    entry["key"] = key;
    entry["kind"] = "user";
    entry["like"] = value.like;
    entry["dislike"] = value.dislike;
    append(entry.dump());
}

void ExtractionCache::put_item(const std::string& key, const ItemFeatures& value) {
    std::lock_guard<std::mutex> lock(mutex_);
    if (items_.count(key)) return;
    items_[key] = value;
    ordered_json entry;
    entry["key"] = key;
    entry["kind"] = "item";
    entry["pros"] = value.pros;
    entry["cons"] = value.cons;
    append(entry.dump());
}

std::size_t ExtractionCache::size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return users_.size() + items_.size();
}

std::string ExtractionCache::make_key(const std::string& template_version,
                                      const std::string& prompt, const std::string& model_id) {
    std::string blob = template_version;
    blob.push_back('\x1f');
    blob += prompt;
    blob.push_back('\x1f');
    blob += model_id;
    return util::to_hex(util::fnv1a64(blob));
}

void ExtractionCache::append(const std::string& line) {
    if (path_.empty()) return;
    std::ofstream out(path_, std::ios::app);
    if (!out) throw ValidationError("cannot append to extraction cache " + path_);
    out << line << "\n";
}

Extractor::Extractor(std::shared_ptr<clients::ChatClient> client,
                     std::shared_ptr<ExtractionCache> cache, ExtractorConfig config)
    : client_(std::move(client)),
      cache_(std::move(cache)),
      config_(config),
      bucket_(config.rate_per_second > 0 ? config.rate_per_second : 1.0, 1.0) {}

std::string Extractor::call_once(const std::string& prompt) {
    clients::ChatOptions options;
    options.temperature = 0.0;
    options.max_tokens = 512;
    if (config_.rate_per_second > 0) bucket_.acquire();
    clients::ChatResult result = client_->complete({{"user", prompt}}, options);
    return result.text;
}

UserPreferences Extractor::extract_user_preferences(
    const std::vector<ReviewForPrompt>& reviews, const std::string& user_id,
    const std::vector<std::string>& source_review_ids) {
    std::string prompt = render_user_pref_prompt(reviews);
    std::string key = ExtractionCache::make_key(kTemplateVersion, prompt, client_->model_id());
    if (auto hit = cache_->get_user(key)) {
        hit->user_id = user_id;
        hit->source_review_ids = source_review_ids;
        return *hit;
    }
    std::string last_raw;
    std::string last_error;
    for (int attempt = 1; attempt <= config_.max_retries; ++attempt) {
        last_raw = call_once(prompt);
        try {
            UserPreferences prefs = parse_preference_response(last_raw);
            prefs.user_id = user_id;
            prefs.source_review_ids = source_review_ids;
            cache_->put_user(key, prefs);
            return prefs;
        } catch (const ResponseParseError& e) {
            last_error = e.what();
        }
    }
    throw ExtractionFailedError(
        "user preference extraction failed after " + std::to_string(config_.max_retries) +
            " attempts: " + last_error,
        last_raw);
}

std::optional<ItemFeatures> Extractor::extract_item_features(const ReviewForPrompt& review,
                                                             const std::string& item_id,
                                                             const std::string& review_id) {
    std::string prompt = render_item_feature_prompt(review);
    std::string key = ExtractionCache::make_key(kTemplateVersion, prompt, client_->model_id());
    std::optional<ItemFeatures> features = cache_->get_item(key);
    if (!features) {
        std::string last_raw;
        std::string last_error;
        for (int attempt = 1; attempt <= config_.max_retries; ++attempt) {
            last_raw = call_once(prompt);
            try {
                ItemFeatures parsed = parse_feature_response(last_raw);
                cache_->put_item(key, parsed);
                features = std::move(parsed);
                break;
            } catch (const ResponseParseError& e) {
                last_error = e.what();
            }
        }
        if (!features) {
            throw ExtractionFailedError(
                "item feature extraction failed after " + std::to_string(config_.max_retries) +
                    " attempts: " + last_error,
                last_raw);
        }
    }
    features->item_id = item_id;
    features->review_id = review_id;
    if (features->empty()) {
        std::lock_guard<std::mutex> lock(stats_mutex_);
        ++dropped_empty_;
        return std::nullopt;
    }
    return features;
}

std::vector<std::optional<ItemFeatures>> Extractor::extract_many(
    const std::vector<corpus::Review>& reviews,
    const std::unordered_map<std::string, std::string>& titles) {
    return clients::parallel_map<std::optional<ItemFeatures>>(
        reviews,
        [&](const corpus::Review& review) {
            ReviewForPrompt payload{review.item_id, title_for(titles, review.item_id),
                                    review.text, review.rating};
            return extract_item_features(payload, review.item_id, review.review_id);
        },
        config_.concurrency);
}

std::unordered_map<std::string, std::string> make_title_map(
    const std::vector<corpus::ItemMeta>& items) {
    std::unordered_map<std::string, std::string> titles;
    for (const auto& item : items) titles.emplace(item.item_id, item.title);
    return titles;
}

std::string title_for(const std::unordered_map<std::string, std::string>& titles,
                      const std::string& item_id) {
    auto it = titles.find(item_id);
    if (it == titles.end() || util::trim(it->second).empty()) return item_id;
    return it->second;
}

void FeatureStore::add(ItemFeatures features, const std::string& user_id) {
    const std::string review_id = features.review_id;
    const std::string item_id = features.item_id;
    if (by_review_.count(review_id)) return;
    by_review_.emplace(review_id, std::move(features));
    review_user_.emplace(review_id, user_id);
    reviews_by_item_[item_id].push_back(review_id);
}

const ItemFeatures* FeatureStore::find(const std::string& review_id) const {
    auto it = by_review_.find(review_id);
    return it == by_review_.end() ? nullptr : &it->second;
}

const std::vector<std::string>* FeatureStore::reviews_for_item(const std::string& item_id) const {
    auto it = reviews_by_item_.find(item_id);
    return it == reviews_by_item_.end() ? nullptr : &it->second;
}

const std::string* FeatureStore::user_of(const std::string& review_id) const {
    auto it = review_user_.find(review_id);
    return it == review_user_.end() ? nullptr : &it->second;
}

void FeatureStore::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ValidationError("cannot write features file " + path);
    for (const auto& [item_id, review_ids] : reviews_by_item_) {
        for (const auto& review_id : review_ids) {
            const ItemFeatures& features = by_review_.at(review_id);
            ordered_json entry;
            entry["item_id"] = features.item_id;
            entry["review_id"] = features.review_id;
            entry["user_id"] = review_user_.at(review_id);
            entry["pros"] = features.pros;
            entry["cons"] = features.cons;
            out << entry.dump() << "\n";
        }
    }
    if (!out) throw ValidationError("failed writing features file " + path);
}

FeatureStore FeatureStore::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("features file not found: " + path);
    FeatureStore store;
    std::string line;
    std::size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (util::trim(line).empty()) continue;
        ordered_json entry = ordered_json::parse(line, nullptr, false);
        if (entry.is_discarded() || !entry.is_object()) {
            throw ValidationError("corrupt features file " + path + " at line " +
                                          std::to_string(line_number));
        }
        ItemFeatures features;
        features.item_id = entry.at("item_id").get<std::string>();
        features.review_id = entry.at("review_id").get<std::string>();
        features.pros = entry.at("pros").get<std::vector<std::string>>();
        features.cons = entry.at("cons").get<std::vector<std::string>>();
        store.add(std::move(features), entry.at("user_id").get<std::string>());
    }
    return store;
}

}  // namespace revbrowse::extraction
