#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace revbrowse::corpus {

struct Review {
    std::string review_id;
    std::string user_id;
    std::string item_id;
    int rating = 0;  // 1..5
    std::string text;
    std::string summary;
    std::int64_t timestamp = 0;
    int helpful_votes = 0;
};

struct ItemMeta {
    std::string item_id;
    std::string title;  // falls back to item_id when blank
};

struct Event {
    std::string item_id;
    std::string review_id;
    std::int64_t timestamp = 0;

    bool operator==(const Event&) const = default;
};

// One user's chronological interaction history. Events are sorted by
// timestamp ascending, ties broken by review_id.
struct InteractionSequence {
    std::string user_id;
    std::vector<Event> events;
};

// Leave-one-out split: last event held out for test, second-to-last for
// validation, the rest for training.
struct SplitSpec {
    std::vector<Event> train;
    Event validation;
    Event test;
};

struct ParseResult {
    std::vector<Review> reviews;
    std::vector<ItemMeta> items;
    std::size_t malformed = 0;
    std::size_t total_lines = 0;     // non-blank lines seen
    std::size_t empty_text = 0;      // retained reviews with empty text
};

// Parses line-delimited records. Accepts both the raw review schema
// (reviewerID/asin/overall/unixReviewTime/helpful) and the canonical schema
// this module writes back out; metadata lines (asin+title) are collected
// separately. Malformed lines are skipped and counted; more than half
// malformed raises CorpusFormatError.
ParseResult parse_reviews(std::istream& stream);
ParseResult parse_reviews_file(const std::string& path);

// Iterative k-core: repeatedly drop reviews of users or items with fewer
// than k interactions until a fixpoint. Input order preserved.
std::vector<Review> kcore_filter(std::vector<Review> reviews, int k = 5);

// One sequence per user, canonically ordered (users by id, events by
// timestamp then review_id). Invariant under permutation of the input.
std::vector<InteractionSequence> build_sequences(const std::vector<Review>& reviews);

// Requires at least 3 events; throws SplitError naming the user otherwise.
SplitSpec leave_one_out_split(const InteractionSequence& seq);

struct CorpusStats {
    std::size_t users = 0;
    std::size_t items = 0;
    std::size_t interactions = 0;
    double mean_length = 0.0;  // mean events per user
    double density = 0.0;      // interactions / (users * items)
};

CorpusStats compute_stats(const std::vector<Review>& reviews);

// Canonical line-delimited form with normalized field names.
void write_canonical_reviews(std::ostream& out, const std::vector<Review>& reviews);
void write_canonical_meta(std::ostream& out, const std::vector<ItemMeta>& items);

}  // namespace revbrowse::corpus
