#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "revbrowse/corpus.hpp"
#include "revbrowse/errors.hpp"

using namespace revbrowse;
using namespace revbrowse::corpus;

namespace {

std::string fixture(const std::string& name) { return std::string(FIXTURES_DIR) + "/" + name; }

Review make_review(const std::string& user, const std::string& item, std::int64_t ts,
                   int rating = 5) {
    Review r;
    r.review_id = user + ":" + item + ":" + std::to_string(ts);
    r.user_id = user;
    r.item_id = item;
    r.rating = rating;
    r.timestamp = ts;
    return r;
}

// Independent k-core oracle: removes the reviews of one under-threshold
// entity at a time (never a whole pass), until no entity is below k.
std::vector<Review> brute_force_kcore(std::vector<Review> reviews, int k) {
    while (true) {
        std::map<std::string, int> users;
        std::map<std::string, int> items;
        for (const auto& r : reviews) {
            ++users[r.user_id];
            ++items[r.item_id];
        }
        std::string drop_user;
        std::string drop_item;
        for (const auto& [u, n] : users) {
            if (n < k) {
                drop_user = u;
                break;
            }
        }
        if (drop_user.empty()) {
            for (const auto& [i, n] : items) {
                if (n < k) {
                    drop_item = i;
                    break;
                }
            }
        }
        if (drop_user.empty() && drop_item.empty()) return reviews;
        std::vector<Review> kept;
        for (auto& r : reviews) {
            if (!drop_user.empty() && r.user_id == drop_user) continue;
            if (!drop_item.empty() && r.item_id == drop_item) continue;
            kept.push_back(std::move(r));
        }
        reviews = std::move(kept);
    }
}

// The 30-review cascade fixture: a self-sustaining 5x5 complete block plus
// one extra user whose only private item cannot survive.
std::vector<Review> cascade_corpus() {
    std::vector<Review> reviews;
    for (int u = 1; u <= 5; ++u) {
        for (int i = 1; i <= 5; ++i) {
            reviews.push_back(make_review("U" + std::to_string(u), "I" + std::to_string(i),
                                          1000 + u * 10 + i));
        }
    }
    reviews.push_back(make_review("U6", "I1", 2001));
    reviews.push_back(make_review("U6", "I2", 2002));
    reviews.push_back(make_review("U6", "I3", 2003));
    reviews.push_back(make_review("U6", "I6", 2004));
    reviews.push_back(make_review("U6", "I6", 2005));
    return reviews;
}

}  // namespace

TEST_CASE("parse_reviews: empty stream") {
    std::istringstream in("");
    ParseResult result = parse_reviews(in);
    CHECK(result.reviews.empty());
    CHECK(result.items.empty());
    CHECK(result.malformed == 0);
}

TEST_CASE("parse_reviews: one valid raw line copies fields verbatim") {
    std::istringstream in(
        R"({"reviewerID": "uX", "asin": "iY", "helpful": [2, 3], "reviewText": "Nice.", "overall": 4.0, "summary": "ok", "unixReviewTime": 123456})"
        "\n");
    ParseResult result = parse_reviews(in);
    REQUIRE(result.reviews.size() == 1);
    const Review& r = result.reviews[0];
    CHECK(r.user_id == "uX");
    CHECK(r.item_id == "iY");
    CHECK(r.rating == 4);
    CHECK(r.text == "Nice.");
    CHECK(r.summary == "ok");
    CHECK(r.timestamp == 123456);
    CHECK(r.helpful_votes == 2);
    CHECK(r.review_id == "uX:iY:123456");
}

TEST_CASE("parse_reviews: bundled 10-line fixture has 8 reviews and 2 malformed") {
    ParseResult result = parse_reviews_file(fixture("reviews_small.jsonl"));
    CHECK(result.total_lines == 10);
    CHECK(result.reviews.size() == 8);
    CHECK(result.malformed == 2);
    CHECK(result.empty_text == 1);  // u2's empty-text review is retained

    // The review carrying its own id keeps it verbatim.
    auto it = std::find_if(result.reviews.begin(), result.reviews.end(),
                           [](const Review& r) { return r.review_id == "custom-1"; });
    REQUIRE(it != result.reviews.end());
    CHECK(it->user_id == "u4");

    // Rating supplied as the string "5.0" still parses.
    auto u3 = std::find_if(result.reviews.begin(), result.reviews.end(), [](const Review& r) {
        return r.user_id == "u3" && r.item_id == "i1";
    });
    REQUIRE(u3 != result.reviews.end());
    CHECK(u3->rating == 5);
}

TEST_CASE("parse_reviews: metadata lines with dedup and blank-title fallback") {
    ParseResult result = parse_reviews_file(fixture("meta_small.jsonl"));
    CHECK(result.reviews.empty());
    REQUIRE(result.items.size() == 3);
    CHECK(result.items[0].item_id == "i1");
    CHECK(result.items[0].title == "Crunchy Oat Bites");  // first occurrence wins
    CHECK(result.items[1].title == "Dark Roast Beans");
    CHECK(result.items[2].item_id == "i4");
    CHECK(result.items[2].title == "i4");  // blank title falls back to the id
}

TEST_CASE("parse_reviews: duplicate same-second reviews get distinct derived ids") {
    std::string line =
        R"({"reviewerID": "u", "asin": "i", "overall": 5.0, "unixReviewTime": 7, "reviewText": "x"})";
    std::istringstream in(line + "\n" + line + "\n");
    ParseResult result = parse_reviews(in);
    REQUIRE(result.reviews.size() == 2);
    CHECK(result.reviews[0].review_id == "u:i:7");
    CHECK(result.reviews[1].review_id == "u:i:7#2");
}

TEST_CASE("parse_reviews: majority-malformed input is a corpus format error") {
    std::istringstream in("not json\nalso not json\n{\"asin\": \"i\", \"title\": \"t\"}\n");
    CHECK_THROWS_AS(parse_reviews(in), CorpusFormatError);
}

TEST_CASE("kcore_filter: fixpoint input is unchanged") {
    std::vector<Review> reviews;
    for (int u = 1; u <= 5; ++u) {
        for (int i = 1; i <= 5; ++i) {
            reviews.push_back(make_review("u" + std::to_string(u), "i" + std::to_string(i),
                                          u * 100 + i));
        }
    }
    auto filtered = kcore_filter(reviews, 5);
    REQUIRE(filtered.size() == reviews.size());
    for (std::size_t i = 0; i < reviews.size(); ++i) {
        CHECK(filtered[i].review_id == reviews[i].review_id);
    }
}

TEST_CASE("kcore_filter: k=1 keeps everything") {
    auto reviews = cascade_corpus();
    CHECK(kcore_filter(reviews, 1).size() == reviews.size());
}

TEST_CASE("kcore_filter: 30-review cascade matches brute-force oracle") {
    auto reviews = cascade_corpus();
    REQUIRE(reviews.size() == 30);
    auto filtered = kcore_filter(reviews, 5);
    auto expected = brute_force_kcore(reviews, 5);
    REQUIRE(filtered.size() == expected.size());
    for (std::size_t i = 0; i < filtered.size(); ++i) {
        CHECK(filtered[i].review_id == expected[i].review_id);
    }
    // The cascade removes U6 and I6 entirely, leaving the 5x5 block.
    CHECK(filtered.size() == 25);
    for (const auto& r : filtered) {
        CHECK(r.user_id != "U6");
        CHECK(r.item_id != "I6");
    }
}

TEST_CASE("kcore_filter: idempotent") {
    auto once = kcore_filter(cascade_corpus(), 5);
    auto twice = kcore_filter(once, 5);
    REQUIRE(once.size() == twice.size());
    for (std::size_t i = 0; i < once.size(); ++i) {
        CHECK(once[i].review_id == twice[i].review_id);
    }
}

TEST_CASE("kcore_filter: post-condition counts directly assertable") {
    auto filtered = kcore_filter(cascade_corpus(), 5);
    std::map<std::string, int> users;
    std::map<std::string, int> items;
    for (const auto& r : filtered) {
        ++users[r.user_id];
        ++items[r.item_id];
    }
    for (const auto& [u, n] : users) CHECK(n >= 5);
    for (const auto& [i, n] : items) CHECK(n >= 5);
}

TEST_CASE("kcore_filter: k < 1 rejected") {
    CHECK_THROWS_AS(kcore_filter({}, 0), ValidationError);
}

TEST_CASE("build_sequences: reverse input comes out sorted ascending") {
    std::vector<Review> reviews = {make_review("u", "c", 300), make_review("u", "b", 200),
                                   make_review("u", "a", 100)};
    auto sequences = build_sequences(reviews);
    REQUIRE(sequences.size() == 1);
    REQUIRE(sequences[0].events.size() == 3);
    CHECK(sequences[0].events[0].item_id == "a");
    CHECK(sequences[0].events[1].item_id == "b");
    CHECK(sequences[0].events[2].item_id == "c");
}

TEST_CASE("build_sequences: equal timestamps ordered by review_id") {
    Review a = make_review("u", "x", 100);
    a.review_id = "r-b";
    Review b = make_review("u", "y", 100);
    b.review_id = "r-a";
    auto sequences = build_sequences({a, b});
    REQUIRE(sequences.size() == 1);
    CHECK(sequences[0].events[0].review_id == "r-a");
    CHECK(sequences[0].events[1].review_id == "r-b");
}

TEST_CASE("build_sequences: fixture per-user lengths match hand count") {
    ParseResult result = parse_reviews_file(fixture("reviews_small.jsonl"));
    auto sequences = build_sequences(result.reviews);
    std::map<std::string, std::size_t> lengths;
    for (const auto& s : sequences) lengths[s.user_id] = s.events.size();
    // Hand count over the fixture: u1, u2, u3, u4 have two valid reviews each.
    CHECK(lengths == std::map<std::string, std::size_t>{
                         {"u1", 2}, {"u2", 2}, {"u3", 2}, {"u4", 2}});
}

TEST_CASE("build_sequences: invariant under input permutation") {
    auto reviews = cascade_corpus();
    auto base = build_sequences(reviews);
    std::reverse(reviews.begin(), reviews.end());
    auto permuted = build_sequences(reviews);
    REQUIRE(base.size() == permuted.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        CHECK(base[i].user_id == permuted[i].user_id);
        CHECK(base[i].events == permuted[i].events);
    }
}

TEST_CASE("leave_one_out_split: lengths 5 and 3") {
    InteractionSequence seq;
    seq.user_id = "u";
    for (int i = 0; i < 5; ++i) seq.events.push_back({"i" + std::to_string(i), "r", 100 + i});
    SplitSpec split = leave_one_out_split(seq);
    CHECK(split.train.size() == 3);
    CHECK(split.validation.item_id == "i3");
    CHECK(split.test.item_id == "i4");

    seq.events.resize(3);
    split = leave_one_out_split(seq);
    CHECK(split.train.size() == 1);
    CHECK(split.validation.item_id == "i1");
    CHECK(split.test.item_id == "i2");
}

TEST_CASE("leave_one_out_split: partition is exact") {
    InteractionSequence seq;
    seq.user_id = "u";
    for (int i = 0; i < 7; ++i) seq.events.push_back({"i" + std::to_string(i), "r" + std::to_string(i), 100 + i});
    SplitSpec split = leave_one_out_split(seq);
    std::vector<Event> rebuilt = split.train;
    rebuilt.push_back(split.validation);
    rebuilt.push_back(split.test);
    CHECK(rebuilt == seq.events);
}

TEST_CASE("leave_one_out_split: 12-event user's test equals the chronological max") {
    std::vector<Review> reviews;
    std::vector<std::int64_t> stamps = {507, 12, 988, 403, 77, 641, 310, 859, 224, 156, 730, 95};
    for (std::size_t i = 0; i < stamps.size(); ++i) {
        reviews.push_back(make_review("u12", "item" + std::to_string(i), stamps[i]));
    }
    auto sequences = build_sequences(reviews);
    REQUIRE(sequences.size() == 1);
    SplitSpec split = leave_one_out_split(sequences[0]);
    // Oracle: maximum timestamp over the raw reviews (unique in this fixture).
    auto max_it = std::max_element(reviews.begin(), reviews.end(),
                                   [](const Review& a, const Review& b) {
                                       return a.timestamp < b.timestamp;
                                   });
    CHECK(split.test.timestamp == max_it->timestamp);
    CHECK(split.test.item_id == max_it->item_id);
}

TEST_CASE("leave_one_out_split: short sequence names the user") {
    InteractionSequence seq;
    seq.user_id = "shorty";
    seq.events.push_back({"i", "r", 1});
    seq.events.push_back({"j", "s", 2});
    try {
        leave_one_out_split(seq);
        FAIL("expected SplitError");
    } catch (const SplitError& e) {
        CHECK(std::string(e.what()).find("shorty") != std::string::npos);
    }
}

TEST_CASE("compute_stats: counts and density") {
    auto reviews = cascade_corpus();
    CorpusStats stats = compute_stats(reviews);
    CHECK(stats.users == 6);
    CHECK(stats.items == 6);
    CHECK(stats.interactions == 30);
    CHECK(stats.mean_length == doctest::Approx(5.0));
    CHECK(stats.density == doctest::Approx(30.0 / 36.0));
}

TEST_CASE("canonical round-trip preserves records") {
    ParseResult first = parse_reviews_file(fixture("reviews_small.jsonl"));
    std::ostringstream out;
    write_canonical_reviews(out, first.reviews);
    std::istringstream in(out.str());
    ParseResult second = parse_reviews(in);
    REQUIRE(second.reviews.size() == first.reviews.size());
    CHECK(second.malformed == 0);
    for (std::size_t i = 0; i < first.reviews.size(); ++i) {
        CHECK(second.reviews[i].review_id == first.reviews[i].review_id);
        CHECK(second.reviews[i].user_id == first.reviews[i].user_id);
        CHECK(second.reviews[i].item_id == first.reviews[i].item_id);
        CHECK(second.reviews[i].rating == first.reviews[i].rating);
        CHECK(second.reviews[i].text == first.reviews[i].text);
        CHECK(second.reviews[i].timestamp == first.reviews[i].timestamp);
        CHECK(second.reviews[i].helpful_votes == first.reviews[i].helpful_votes);
    }
}
