#include "revbrowse/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "revbrowse/errors.hpp"
#include "revbrowse/util.hpp"

namespace revbrowse::corpus {

namespace {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

bool parse_rating(const json& v, int& out) {
    double r = 0.0;
    if (v.is_number()) {
        r = v.get<double>();
    } else if (v.is_string()) {
        try {
            r = std::stod(v.get<std::string>());
        } catch (...) {
            return false;
        }
    } else {
        return false;
    }
    int ri = static_cast<int>(r);
    if (static_cast<double>(ri) != r || ri < 1 || ri > 5) return false;
    out = ri;
    return true;
}

bool parse_raw_review(const json& j, Review& out) {
    if (!j.contains("reviewerID") || !j.contains("asin") || !j.contains("overall") ||
        !j.contains("unixReviewTime")) {
        return false;
    }
    if (!j["reviewerID"].is_string() || !j["asin"].is_string() ||
        !j["unixReviewTime"].is_number_integer()) {
        return false;
    }
    if (!parse_rating(j["overall"], out.rating)) return false;
    out.user_id = j["reviewerID"].get<std::string>();
    out.item_id = j["asin"].get<std::string>();
    out.timestamp = j["unixReviewTime"].get<std::int64_t>();
    out.text = j.value("reviewText", "");
    out.summary = j.value("summary", "");
    out.helpful_votes = 0;
    if (j.contains("helpful") && j["helpful"].is_array() && !j["helpful"].empty() &&
        j["helpful"][0].is_number_integer()) {
        int votes = j["helpful"][0].get<int>();
        out.helpful_votes = votes < 0 ? 0 : votes;
    }
    if (j.contains("reviewID") && j["reviewID"].is_string()) {
        out.review_id = j["reviewID"].get<std::string>();
    }
    return !out.user_id.empty() && !out.item_id.empty();
}

bool parse_canonical_review(const json& j, Review& out) {
    if (!j.contains("user_id") || !j.contains("item_id") || !j.contains("rating") ||
        !j.contains("timestamp")) {
        return false;
    }
    if (!j["user_id"].is_string() || !j["item_id"].is_string() ||
        !j["timestamp"].is_number_integer()) {
        return false;
    }
    if (!parse_rating(j["rating"], out.rating)) return false;
    out.review_id = j.value("review_id", "");
    out.user_id = j["user_id"].get<std::string>();
    out.item_id = j["item_id"].get<std::string>();
    out.timestamp = j["timestamp"].get<std::int64_t>();
    out.text = j.value("text", "");
    out.summary = j.value("summary", "");
    out.helpful_votes = j.value("helpful_votes", 0);
    return !out.user_id.empty() && !out.item_id.empty();
}

bool parse_meta(const json& j, ItemMeta& out) {
    const char* id_key = j.contains("asin") ? "asin" : "item_id";
    if (!j.contains(id_key) || !j[id_key].is_string() || !j.contains("title") ||
        !j["title"].is_string()) {
        return false;
    }
    out.item_id = j[id_key].get<std::string>();
    out.title = util::trim(j["title"].get<std::string>());
    if (out.title.empty()) out.title = out.item_id;
    return !out.item_id.empty();
}

}  // namespace

ParseResult parse_reviews(std::istream& stream) {
    if (!stream) {
        throw CorpusFormatError("review stream is not readable");
    }
    ParseResult result;
    std::set<std::string> seen_meta;
    // review_id is derived for raw lines that carry none; a per-(user,item,time)
    // counter keeps derived ids unique when a user reviewed an item twice in
    // the same second.
    std::unordered_map<std::string, int> id_counts;

    std::string line;
    while (std::getline(stream, line)) {
        if (util::trim(line).empty()) continue;
        ++result.total_lines;

        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            ++result.malformed;
            continue;
        }

        Review review;
        ItemMeta meta;
        bool is_review = j.contains("reviewerID") ? parse_raw_review(j, review)
                                                  : parse_canonical_review(j, review);
        if (is_review) {
            if (review.review_id.empty()) {
                std::string base = review.user_id + ":" + review.item_id + ":" +
                                   std::to_string(review.timestamp);
                int n = ++id_counts[base];
                review.review_id = n == 1 ? base : base + "#" + std::to_string(n);
            }
            if (review.text.empty()) ++result.empty_text;
            result.reviews.push_back(std::move(review));
        } else if (parse_meta(j, meta)) {
            if (seen_meta.insert(meta.item_id).second) {
                result.items.push_back(std::move(meta));
            }
        } else {
            ++result.malformed;
        }
    }
    if (stream.bad()) {
        throw CorpusFormatError("I/O error while reading review stream");
    }
    if (result.total_lines > 0 && result.malformed * 2 > result.total_lines) {
        throw CorpusFormatError("more than half of the input lines are malformed (" +
                                std::to_string(result.malformed) + " of " +
                                std::to_string(result.total_lines) + ")");
    }
    return result;
}

ParseResult parse_reviews_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw CorpusFormatError("cannot open review file: " + path);
    }
    return parse_reviews(in);
}

std::vector<Review> kcore_filter(std::vector<Review> reviews, int k) {
    if (k < 1) {
        throw ValidationError("kcore_filter requires k >= 1");
    }
    bool changed = true;
    while (changed) {
        changed = false;
        std::unordered_map<std::string, int> user_counts;
        std::unordered_map<std::string, int> item_counts;
        for (const auto& r : reviews) {
            ++user_counts[r.user_id];
            ++item_counts[r.item_id];
        }
        std::vector<Review> kept;
        kept.reserve(reviews.size());
        for (auto& r : reviews) {
            if (user_counts[r.user_id] >= k && item_counts[r.item_id] >= k) {
                kept.push_back(std::move(r));
            } else {
                changed = true;
            }
        }
        reviews = std::move(kept);
    }
    return reviews;
}

std::vector<InteractionSequence> build_sequences(const std::vector<Review>& reviews) {
    std::map<std::string, std::vector<Event>> by_user;
    for (const auto& r : reviews) {
        by_user[r.user_id].push_back(Event{r.item_id, r.review_id, r.timestamp});
    }
    std::vector<InteractionSequence> sequences;
    sequences.reserve(by_user.size());
    for (auto& [user, events] : by_user) {
        std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
            if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
            return a.review_id < b.review_id;
        });
        sequences.push_back(InteractionSequence{user, std::move(events)});
    }
    return sequences;
}

SplitSpec leave_one_out_split(const InteractionSequence& seq) {
    if (seq.events.size() < 3) {
        throw SplitError("sequence for user " + seq.user_id +
                         " has fewer than 3 events; cannot split");
    }
    SplitSpec split;
    split.train.assign(seq.events.begin(), seq.events.end() - 2);
    split.validation = seq.events[seq.events.size() - 2];
    split.test = seq.events.back();
    return split;
}

CorpusStats compute_stats(const std::vector<Review>& reviews) {
    std::set<std::string> users;
    std::set<std::string> items;
    for (const auto& r : reviews) {
        users.insert(r.user_id);
        items.insert(r.item_id);
    }
    CorpusStats stats;
    stats.users = users.size();
    stats.items = items.size();
    stats.interactions = reviews.size();
    if (stats.users > 0) {
        stats.mean_length = static_cast<double>(stats.interactions) / static_cast<double>(stats.users);
    }
    if (stats.users > 0 && stats.items > 0) {
        stats.density = static_cast<double>(stats.interactions) /
                        (static_cast<double>(stats.users) * static_cast<double>(stats.items));
    }
    return stats;
}

void write_canonical_reviews(std::ostream& out, const std::vector<Review>& reviews) {
    for (const auto& r : reviews) {
        ordered_json j;
        j["review_id"] = r.review_id;
        j["user_id"] = r.user_id;
        j["item_id"] = r.item_id;
        j["rating"] = r.rating;
        j["text"] = r.text;
        j["summary"] = r.summary;
        j["timestamp"] = r.timestamp;
        j["helpful_votes"] = r.helpful_votes;
        out << j.dump() << "\n";
    }
}

void write_canonical_meta(std::ostream& out, const std::vector<ItemMeta>& items) {
    for (const auto& m : items) {
        ordered_json j;
        j["item_id"] = m.item_id;
        j["title"] = m.title;
        out << j.dump() << "\n";
    }
}

}  // namespace revbrowse::corpus
