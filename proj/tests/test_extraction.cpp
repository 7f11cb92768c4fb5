#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "revbrowse/corpus.hpp"
#include "revbrowse/errors.hpp"
#include "revbrowse/extraction.hpp"
#include "revbrowse/util.hpp"

using namespace revbrowse;
using namespace revbrowse::extraction;
using nlohmann::json;

namespace {

std::string fixture(const std::string& name) { return std::string(FIXTURES_DIR) + "/" + name; }

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

std::string replace_all(std::string text, const std::string& from, const std::string& to) {
    std::size_t pos = 0;
    while ((pos = text.find(from, pos)) != std::string::npos) {
        text.replace(pos, from.size(), to);
        pos += to.size();
    }
    return text;
}

corpus::Review make_review(int rating, const std::string& text) {
    corpus::Review r;
    r.review_id = "t";
    r.user_id = "u";
    r.item_id = "i";
    r.rating = rating;
    r.text = text;
    return r;
}

// Client that always answers with unparseable text.
class GarbageChatClient : public clients::ChatClient {
  public:
    clients::ChatResult complete(const std::vector<clients::ChatMessage>&,
                                 const clients::ChatOptions&) override {
        ++calls;
        clients::ChatResult r;
        r.text = "no braces to be found here, attempt " + std::to_string(calls.load());
        return r;
    }
    bool supports_logprobs() const override { return false; }
    std::string model_id() const override { return "garbage"; }
    std::atomic<int> calls{0};
};

// Counts calls through to the mock extraction client.
class CountingChatClient : public clients::ChatClient {
  public:
    clients::ChatResult complete(const std::vector<clients::ChatMessage>& messages,
                                 const clients::ChatOptions& options) override {
        ++calls;
        return inner_.complete(messages, options);
    }
    bool supports_logprobs() const override { return false; }
    std::string model_id() const override { return inner_.model_id(); }
    std::atomic<int> calls{0};

  private:
    MockExtractionChatClient inner_;
};

}  // namespace

TEST_CASE("render_user_pref_prompt matches the frozen golden") {
    ReviewForPrompt review{"i1", "Crunchy Oat Bites", "Crunchy and fresh, exactly what I wanted.",
                           5};
    CHECK(render_user_pref_prompt({review}) == slurp(fixture("prompts/user_prompt_1.txt")));
}

TEST_CASE("render_user_pref_prompt falls back to item_id for empty titles") {
    ReviewForPrompt review{"B0001", "", "Fine.", 4};
    std::string prompt = render_user_pref_prompt({review});
    CHECK(prompt.find("\"title\":\"B0001\"") != std::string::npos);
}

TEST_CASE("render_user_pref_prompt preserves review order") {
    std::vector<ReviewForPrompt> reviews = {
        {"a", "First", "one", 5}, {"b", "Second", "two", 4}, {"c", "Third", "three", 3}};
    std::string prompt = render_user_pref_prompt(reviews);
    std::size_t p1 = prompt.find("First");
    std::size_t p2 = prompt.find("Second");
    std::size_t p3 = prompt.find("Third");
    REQUIRE(p1 != std::string::npos);
    REQUIRE(p2 != std::string::npos);
    REQUIRE(p3 != std::string::npos);
    CHECK(p1 < p2);
    CHECK(p2 < p3);
}

TEST_CASE("render_item_feature_prompt matches the frozen golden") {
    ReviewForPrompt review{"i2", "Dark Roast Beans", "Dark roasted, smooth finish.", 4};
    CHECK(render_item_feature_prompt(review) == slurp(fixture("prompts/item_prompt_1.txt")));
}

TEST_CASE("render_item_feature_prompt escapes quotes and round-trips") {
    ReviewForPrompt review{"i9", "The \"Best\" Pan", "She said \"wow\" twice.", 5};
    std::string prompt = render_item_feature_prompt(review);
    std::size_t begin = prompt.find("Item review: ");
    std::size_t end = prompt.find("\n\nResponse:");
    REQUIRE(begin != std::string::npos);
    REQUIRE(end != std::string::npos);
    begin += std::string("Item review: ").size();
    json payload = json::parse(prompt.substr(begin, end - begin));
    CHECK(payload.at("title") == "The \"Best\" Pan");
    CHECK(payload.at("review") == "She said \"wow\" twice.");
    CHECK(payload.at("score") == 5);
}

TEST_CASE("render_item_feature_prompt renders empty text") {
    ReviewForPrompt review{"i3", "Quiet Fan", "", 3};
    std::string prompt = render_item_feature_prompt(review);
    CHECK(prompt.find("\"review\":\"\"") != std::string::npos);
}

TEST_CASE("parse_preference_response: identity case") {
    UserPreferences prefs =
        parse_preference_response(R"({"Like":["crunchy snacks"],"Dislike":["artificial flavor"]})");
    CHECK(prefs.like == std::vector<std::string>{"crunchy snacks"});
    CHECK(prefs.dislike == std::vector<std::string>{"artificial flavor"});
}

TEST_CASE("parse_preference_response: wrapper fixture set") {
    json cases = json::parse(slurp(fixture("wrapped_responses.json")));
    REQUIRE(cases.size() == 10);
    for (const auto& c : cases) {
        INFO("case ", c.at("name").get<std::string>());
        UserPreferences prefs = parse_preference_response(c.at("raw").get<std::string>());
        CHECK(prefs.like == c.at("like").get<std::vector<std::string>>());
        CHECK(prefs.dislike == c.at("dislike").get<std::vector<std::string>>());
    }
}

TEST_CASE("parse_preference_response: errors") {
    CHECK_THROWS_AS(parse_preference_response("nothing json-like here"), ResponseParseError);
    CHECK_THROWS_AS(parse_preference_response(""), ResponseParseError);
    CHECK_THROWS_AS(parse_preference_response(R"({"Like":"not a list","Dislike":[]})"),
                    SchemaError);
    CHECK_THROWS_AS(parse_preference_response(R"({"Like":[1,2],"Dislike":[]})"), SchemaError);
    CHECK_THROWS_AS(parse_preference_response(R"({"Dislike":[]})"), SchemaError);
}

TEST_CASE("parse_feature_response: trivial and empty-signal cases") {
    ItemFeatures features = parse_feature_response(R"({"Pros":["nutritious"],"Cons":[]})");
    CHECK(features.pros == std::vector<std::string>{"nutritious"});
    CHECK(features.cons.empty());
    CHECK_FALSE(features.empty());

    ItemFeatures both_empty = parse_feature_response(R"({"Pros":[],"Cons":[]})");
    CHECK(both_empty.empty());
}

TEST_CASE("parse_feature_response: wrapper fixture set transposed to Pros/Cons") {
    json cases = json::parse(slurp(fixture("wrapped_responses.json")));
    for (const auto& c : cases) {
        INFO("case ", c.at("name").get<std::string>());
        std::string raw = replace_all(c.at("raw").get<std::string>(), "Dislike", "Cons");
        raw = replace_all(raw, "Like", "Pros");
        ItemFeatures features = parse_feature_response(raw);
        CHECK(features.pros == c.at("like").get<std::vector<std::string>>());
        CHECK(features.cons == c.at("dislike").get<std::vector<std::string>>());
    }
}

TEST_CASE("mock lexicon: user-side and item-side vocabularies are token-disjoint") {
    std::set<std::string> user_tokens;
    std::set<std::string> item_tokens;
    for (const auto& aspect : mock_lexicon()) {
        for (const auto& t : util::tokenize_words(aspect.user_phrase)) user_tokens.insert(t);
        for (const auto& t : util::tokenize_words(aspect.item_phrase)) item_tokens.insert(t);
    }
    for (const auto& token : user_tokens) {
        INFO("shared token: ", token);
        CHECK(item_tokens.count(token) == 0);
    }
}

TEST_CASE("mock lexicon: triggers are unique across aspects") {
    std::set<std::string> seen;
    for (const auto& aspect : mock_lexicon()) {
        for (const auto& trigger : aspect.triggers) {
            INFO("duplicate trigger: ", trigger);
            CHECK(seen.insert(trigger).second);
        }
    }
}

TEST_CASE("mock_extract: rating routes matched aspects") {
    ItemFeatures high = mock_extract(make_review(5, "crunchy and fresh"));
    CHECK(high.pros == std::vector<std::string>{"crisp texture", "just baked quality"});
    CHECK(high.cons.empty());

    ItemFeatures low = mock_extract(make_review(1, "crunchy and fresh"));
    CHECK(low.cons == std::vector<std::string>{"crisp texture", "just baked quality"});
    CHECK(low.pros.empty());
}

TEST_CASE("mock_extract: pure function of rating and text") {
    corpus::Review a = make_review(4, "sharp and lightweight");
    corpus::Review b = make_review(4, "sharp and lightweight");
    b.review_id = "other";
    b.user_id = "someone-else";
    ItemFeatures fa = mock_extract(a);
    ItemFeatures fb = mock_extract(b);
    CHECK(fa.pros == fb.pros);
    CHECK(fa.cons == fb.cons);
}

TEST_CASE("mock_extract: 40-review fixture matches the hand-enumerated table") {
    corpus::ParseResult parsed = corpus::parse_reviews_file(fixture("mock_reviews_40.jsonl"));
    REQUIRE(parsed.reviews.size() == 40);
    json expected = json::parse(slurp(fixture("mock_features_40.json")));
    REQUIRE(expected.size() == 40);
    for (std::size_t i = 0; i < parsed.reviews.size(); ++i) {
        const auto& want = expected[i];
        INFO("review ", parsed.reviews[i].review_id);
        REQUIRE(want.at("review_id") == parsed.reviews[i].review_id);
        ItemFeatures got = mock_extract(parsed.reviews[i]);
        CHECK(got.pros == want.at("pros").get<std::vector<std::string>>());
        CHECK(got.cons == want.at("cons").get<std::vector<std::string>>());
    }
}

TEST_CASE("mock_extract_user: frequency then first-occurrence ordering") {
    std::vector<corpus::Review> window = {
        make_review(5, "crunchy bites"),
        make_review(5, "crunchy and tasty"),
        make_review(1, "stale mess"),
        make_review(4, "tasty again"),
        make_review(3, "smooth, and I love it"),
    };
    UserPreferences prefs = mock_extract_user(window);
    // crunch and flavor tie at 2, crunch seen first; smooth trails with 1.
    CHECK(prefs.like ==
          std::vector<std::string>{"crunchy snacks", "tasty flavors", "smooth blends"});
    CHECK(prefs.dislike == std::vector<std::string>{"stale batches"});
}

TEST_CASE("mock_extract_user: caps each side at 5") {
    std::vector<corpus::Review> window = {
        make_review(5, "crunchy tasty fresh aromatic smooth bass"),
        make_review(5, "sharp nonstick spacious hardy grip battery"),
    };
    UserPreferences prefs = mock_extract_user(window);
    CHECK(prefs.like.size() == 5);
}

TEST_CASE("MockExtractionChatClient round-trips through render and parse") {
    MockExtractionChatClient client;
    corpus::Review review = make_review(5, "Deep bass and comfortable for long sessions.");

    ReviewForPrompt payload{"i1", "Studio Cans", review.text, review.rating};
    clients::ChatResult result =
        client.complete({{"user", render_item_feature_prompt(payload)}}, {});
    ItemFeatures via_client = parse_feature_response(result.text);
    ItemFeatures direct = mock_extract(review);
    CHECK(via_client.pros == direct.pros);
    CHECK(via_client.cons == direct.cons);

    clients::ChatResult pref_result =
        client.complete({{"user", render_user_pref_prompt({payload})}}, {});
    UserPreferences via_prefs = parse_preference_response(pref_result.text);
    UserPreferences direct_prefs = mock_extract_user({review});
    CHECK(via_prefs.like == direct_prefs.like);
    CHECK(via_prefs.dislike == direct_prefs.dislike);
}

TEST_CASE("ExtractionCache: round-trip and persistence") {
    std::string path = "test_extraction_cache.jsonl";
    std::remove(path.c_str());
    {
        ExtractionCache cache(path);
        UserPreferences prefs;
        prefs.like = {"deep bass"};
        prefs.dislike = {"noisy operation"};
        cache.put_user("k1", prefs);
        ItemFeatures features;
        features.pros = {"keen edge"};
        cache.put_item("k2", features);

        auto got = cache.get_user("k1");
        REQUIRE(got.has_value());
        CHECK(got->like == prefs.like);
        CHECK(got->dislike == prefs.dislike);
        CHECK_FALSE(cache.get_user("missing").has_value());
    }
    {
        ExtractionCache reopened(path);
        CHECK(reopened.size() == 2);
        auto features = reopened.get_item("k2");
        REQUIRE(features.has_value());
        CHECK(features->pros == std::vector<std::string>{"keen edge"});
    }
    std::remove(path.c_str());
}

TEST_CASE("ExtractionCache: key depends on version, prompt and model") {
    std::string base = ExtractionCache::make_key("v1", "prompt", "model");
    CHECK(base == ExtractionCache::make_key("v1", "prompt", "model"));
    CHECK(base != ExtractionCache::make_key("v2", "prompt", "model"));
    CHECK(base != ExtractionCache::make_key("v1", "other", "model"));
    CHECK(base != ExtractionCache::make_key("v1", "prompt", "other"));
}

TEST_CASE("Extractor: cache hit skips the client") {
    auto client = std::make_shared<CountingChatClient>();
    auto cache = std::make_shared<ExtractionCache>("");
    Extractor extractor(client, cache);
    ReviewForPrompt review{"i1", "Title", "sharp and durable", 5};

    auto first = extractor.extract_item_features(review, "i1", "r1");
    REQUIRE(first.has_value());
    CHECK(client->calls == 1);
    auto second = extractor.extract_item_features(review, "i1", "r1");
    REQUIRE(second.has_value());
    CHECK(client->calls == 1);  // served from cache
    CHECK(second->pros == first->pros);
}

TEST_CASE("Extractor: garbage responses exhaust retries") {
    auto client = std::make_shared<GarbageChatClient>();
    auto cache = std::make_shared<ExtractionCache>("");
    Extractor extractor(client, cache);
    ReviewForPrompt review{"i1", "Title", "text", 5};
    try {
        extractor.extract_item_features(review, "i1", "r1");
        FAIL("expected ExtractionFailedError");
    } catch (const ExtractionFailedError& e) {
        CHECK(client->calls == 3);
        CHECK(e.last_raw_response.find("no braces") != std::string::npos);
    }
}

TEST_CASE("Extractor: both-empty extraction is dropped and counted") {
    auto client = std::make_shared<MockExtractionChatClient>();
    auto cache = std::make_shared<ExtractionCache>("");
    Extractor extractor(std::make_shared<CountingChatClient>(), cache);
    ReviewForPrompt review{"i1", "Title", "no trigger words at all", 5};
    auto result = extractor.extract_item_features(review, "i1", "r1");
    CHECK_FALSE(result.has_value());
    CHECK(extractor.dropped_empty() == 1);
}

TEST_CASE("Extractor: extract_many preserves order under concurrency") {
    corpus::ParseResult parsed = corpus::parse_reviews_file(fixture("mock_reviews_40.jsonl"));
    auto cache = std::make_shared<ExtractionCache>("");
    ExtractorConfig config;
    config.concurrency = 4;
    Extractor extractor(std::make_shared<MockExtractionChatClient>(), cache, config);
    auto results = extractor.extract_many(parsed.reviews, {});
    REQUIRE(results.size() == parsed.reviews.size());
    for (std::size_t i = 0; i < results.size(); ++i) {
        if (!results[i]) continue;
        CHECK(results[i]->review_id == parsed.reviews[i].review_id);
        ItemFeatures direct = mock_extract(parsed.reviews[i]);
        CHECK(results[i]->pros == direct.pros);
    }
    // r05 and r26 are the two rule-empty reviews in the fixture.
    CHECK(extractor.dropped_empty() == 2);
}

TEST_CASE("FeatureStore: add, lookup and JSONL round-trip") {
    FeatureStore store;
    ItemFeatures f1;
    f1.item_id = "i1";
    f1.review_id = "r1";
    f1.pros = {"keen edge"};
    store.add(f1, "u1");
    ItemFeatures f2;
    f2.item_id = "i1";
    f2.review_id = "r2";
    f2.cons = {"shaky footing"};
    store.add(f2, "u2");

    REQUIRE(store.find("r1") != nullptr);
    CHECK(store.find("r1")->pros == std::vector<std::string>{"keen edge"});
    REQUIRE(store.reviews_for_item("i1") != nullptr);
    CHECK(store.reviews_for_item("i1")->size() == 2);
    REQUIRE(store.user_of("r2") != nullptr);
    CHECK(*store.user_of("r2") == "u2");

    std::string path = "test_feature_store.jsonl";
    store.save(path);
    FeatureStore loaded = FeatureStore::load(path);
    CHECK(loaded.size() == 2);
    REQUIRE(loaded.find("r2") != nullptr);
    CHECK(loaded.find("r2")->cons == std::vector<std::string>{"shaky footing"});
    CHECK(*loaded.user_of("r1") == "u1");
    std::remove(path.c_str());
}
