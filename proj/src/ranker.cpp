#include "revbrowse/ranker.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "revbrowse/errors.hpp"
#include "revbrowse/util.hpp"

namespace revbrowse::ranker {

using ordered_json = nlohmann::ordered_json;

char letter_for(std::size_t position) {
    if (position >= static_cast<std::size_t>(kMaxSlateSize)) {
        throw ValidationError("slate position " + std::to_string(position) +
                              " has no letter (max 26 candidates)");
    }
    return static_cast<char>('A' + position);
}

CandidateStrategy parse_strategy(const std::string& name) {
    std::string u = util::lower(name);
    if (u == "popularity") return CandidateStrategy::kPopularity;
    if (u == "recency") return CandidateStrategy::kRecency;
    if (u == "file") return CandidateStrategy::kFile;
    throw ValidationError("unknown candidate strategy '" + name +
                          "' (expected POPULARITY, RECENCY or FILE)");
}

const char* strategy_name(CandidateStrategy strategy) {
    switch (strategy) {
        case CandidateStrategy::kPopularity: return "POPULARITY";
        case CandidateStrategy::kRecency: return "RECENCY";
        case CandidateStrategy::kFile: return "FILE";
    }
    return "?";
}

CandidatePool::CandidatePool(const std::vector<corpus::Review>& train_reviews) {
    for (const auto& r : train_reviews) {
        ++count_by_item_[r.item_id];
        auto [it, inserted] = last_ts_by_item_.try_emplace(r.item_id, r.timestamp);
        if (!inserted) it->second = std::max(it->second, r.timestamp);
    }
}

std::size_t CandidatePool::interactions_of(const std::string& item_id) const {
    auto it = count_by_item_.find(item_id);
    return it == count_by_item_.end() ? 0 : it->second;
}

namespace {

template <typename Key>
std::vector<std::string> ranked_items(const std::map<std::string, Key>& by_item,
                                      const std::set<std::string>& exclude, std::size_t n) {
    std::vector<std::pair<Key, std::string>> order;
    order.reserve(by_item.size());
    for (const auto& [item, key] : by_item) {
        if (exclude.count(item) > 0) continue;
        order.emplace_back(key, item);
    }
    // Highest key first; equal keys fall back to item id ascending for a
    // total, deterministic order.
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < order.size() && i < n; ++i) out.push_back(order[i].second);
    return out;
}

}  // namespace

std::vector<std::string> CandidatePool::popularity(const std::set<std::string>& exclude,
                                                   std::size_t n) const {
    return ranked_items(count_by_item_, exclude, n);
}

std::vector<std::string> CandidatePool::recency(const std::set<std::string>& exclude,
                                                std::size_t n) const {
    return ranked_items(last_ts_by_item_, exclude, n);
}

FileSlates FileSlates::load(const std::string& path) {
    if (!std::filesystem::exists(path)) {
        throw MissingArtifactError("candidate slate file not found: " + path);
    }
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open candidate slate file: " + path);
    FileSlates out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (util::trim(line).empty()) continue;
        ordered_json j = ordered_json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("user_id") ||
            !j.contains("items") || !j["items"].is_array()) {
            throw ValidationError("malformed slate record at " + path + ":" +
                                  std::to_string(lineno));
        }
        std::vector<std::string> items;
        for (const auto& v : j["items"]) {
            if (!v.is_string()) {
                throw ValidationError("non-string item id at " + path + ":" +
                                      std::to_string(lineno));
            }
            items.push_back(v.get<std::string>());
        }
        out.slates_[j["user_id"].get<std::string>()] = std::move(items);
    }
    return out;
}

const std::vector<std::string>* FileSlates::for_user(const std::string& user_id) const {
    auto it = slates_.find(user_id);
    return it == slates_.end() ? nullptr : &it->second;
}

ProvideResult provide_candidates(const CandidatePool& pool, const FileSlates* file_slates,
                                 const std::string& user_id,
                                 const std::set<std::string>& user_train_items,
                                 const std::optional<std::string>& ground_truth,
                                 const ProvideConfig& config) {
    if (config.slate_size < 2 || config.slate_size > kMaxSlateSize) {
        throw ValidationError("slate size must lie in [2, 26], got " +
                              std::to_string(config.slate_size));
    }
    ProvideResult result;
    std::size_t n = static_cast<std::size_t>(config.slate_size);
    switch (config.strategy) {
        case CandidateStrategy::kPopularity:
            result.item_ids = pool.popularity(user_train_items, n);
            break;
        case CandidateStrategy::kRecency:
            result.item_ids = pool.recency({}, n);
            break;
        case CandidateStrategy::kFile: {
            if (file_slates == nullptr) {
                throw MissingArtifactError(
                    "FILE candidate strategy requires a slate file (--slates)");
            }
            const std::vector<std::string>* items = file_slates->for_user(user_id);
            if (items == nullptr) {
                throw MissingArtifactError("slate file has no entry for user " + user_id);
            }
            result.item_ids = *items;
            if (result.item_ids.size() > n) result.item_ids.resize(n);
            break;
        }
    }

    if (ground_truth.has_value()) {
        auto it = std::find(result.item_ids.begin(), result.item_ids.end(), *ground_truth);
        if (it != result.item_ids.end()) {
            result.ground_truth_position =
                static_cast<std::size_t>(it - result.item_ids.begin());
        } else if (config.inject_ground_truth) {
            // Seeded per-user position so evaluation runs are reproducible
            // yet the injected slot is not systematically biased.
            util::Rng rng(util::fnv1a64(user_id, config.seed));
            if (result.item_ids.size() < n) {
                std::size_t pos = static_cast<std::size_t>(
                    rng.uniform_int(result.item_ids.size() + 1));
                result.item_ids.insert(result.item_ids.begin() +
                                           static_cast<std::ptrdiff_t>(pos),
                                       *ground_truth);
                result.ground_truth_position = pos;
            } else {
                std::size_t pos =
                    static_cast<std::size_t>(rng.uniform_int(result.item_ids.size()));
                result.item_ids[pos] = *ground_truth;
                result.ground_truth_position = pos;
            }
            result.injected = true;
        }
    }

    if (result.item_ids.size() < 2) {
        throw ValidationError("candidate provider produced fewer than 2 items for user " +
                              user_id);
    }
    return result;
}

CandidateSlate assemble_slate(const std::vector<std::string>& item_ids,
                              const prefrag::FeatureIndex& index,
                              const std::unordered_map<std::string, std::string>& titles,
                              const prefrag::UserEncoding& encoding, int k) {
    if (item_ids.size() < 2 || item_ids.size() > static_cast<std::size_t>(kMaxSlateSize)) {
        throw ValidationError("slate must hold between 2 and 26 candidates, got " +
                              std::to_string(item_ids.size()));
    }
    CandidateSlate slate;
    for (const std::string& id : item_ids) {
        Candidate c;
        c.item_id = id;
        c.title = extraction::title_for(titles, id);
        if (encoding.like.has_value()) {
            if (const prefrag::IndexGroup* g = index.pros(id)) {
                for (const auto& hit : prefrag::retrieve_topk(*encoding.like, *g, k)) {
                    c.retrieved_pros.push_back(hit.text);
                    c.pros_scores.push_back(hit.score);
                }
            }
        }
        if (encoding.dislike.has_value()) {
            if (const prefrag::IndexGroup* g = index.cons(id)) {
                for (const auto& hit : prefrag::retrieve_topk(*encoding.dislike, *g, k)) {
                    c.retrieved_cons.push_back(hit.text);
                    c.cons_scores.push_back(hit.score);
                }
            }
        }
        slate.candidates.push_back(std::move(c));
    }
    return slate;
}

PromptVariant parse_variant(const std::string& name) {
    std::string u = util::lower(name);
    if (u == "full") return PromptVariant::kFull;
    if (u == "no_pref") return PromptVariant::kNoPref;
    if (u == "no_reviews") return PromptVariant::kNoReviews;
    if (u == "no_pref_no_reviews") return PromptVariant::kNoPrefNoReviews;
    throw ValidationError("unknown ablation variant '" + name +
                          "' (expected FULL, NO_PREF, NO_REVIEWS or NO_PREF_NO_REVIEWS)");
}

const char* variant_name(PromptVariant variant) {
    switch (variant) {
        case PromptVariant::kFull: return "FULL";
        case PromptVariant::kNoPref: return "NO_PREF";
        case PromptVariant::kNoReviews: return "NO_REVIEWS";
        case PromptVariant::kNoPrefNoReviews: return "NO_PREF_NO_REVIEWS";
    }
    return "?";
}

bool variant_uses_preferences(PromptVariant variant) {
    return variant == PromptVariant::kFull || variant == PromptVariant::kNoReviews;
}

bool variant_uses_reviews(PromptVariant variant) {
    return variant == PromptVariant::kFull || variant == PromptVariant::kNoPref;
}

namespace {

std::string bracket_list(const std::vector<std::string>& phrases) {
    return "[" + util::join(phrases, ", ") + "]";
}

std::string feature_clause(const std::vector<std::string>& phrases) {
    return phrases.empty() ? "none noted" : util::join(phrases, ", ");
}

}  // namespace

std::string render_recommendation_prompt(const std::vector<std::string>& history_titles,
                                         const extraction::UserPreferences& prefs,
                                         const CandidateSlate& slate, PromptVariant variant) {
    if (history_titles.empty()) {
        throw ValidationError("cannot render a recommendation prompt with empty history");
    }
    if (slate.candidates.size() < 2) {
        throw ValidationError("recommendation prompt needs at least 2 candidates");
    }

    // Most recent 20 titles, chronological order preserved.
    std::size_t start = history_titles.size() > 20 ? history_titles.size() - 20 : 0;
    std::vector<std::string> history(history_titles.begin() +
                                         static_cast<std::ptrdiff_t>(start),
                                     history_titles.end());

    std::ostringstream candidates;
    for (std::size_t i = 0; i < slate.candidates.size(); ++i) {
        const Candidate& c = slate.candidates[i];
        if (i > 0) candidates << "; ";
        candidates << "(" << letter_for(i) << ") title: " << c.title;
        if (variant_uses_reviews(variant)) {
            candidates << ", pros: " << feature_clause(c.retrieved_pros)
                       << ", cons: " << feature_clause(c.retrieved_cons);
        }
    }

    std::ostringstream out;
    out << "Instruction:\n"
        << "Given user history in chronological order, recommend an item from the candidate "
           "pool with its index letter.\n"
        << "\n"
        << "Input:\n"
        << "User history: " << util::join(history, ", ") << ";\n";
    if (variant_uses_preferences(variant)) {
        out << "User preference: Like: " << bracket_list(prefs.like)
            << "; Dislike: " << bracket_list(prefs.dislike) << ";\n";
    }
    out << "Candidate pool: " << candidates.str() << "\n"
        << "\n"
        << "Response:\n";
    return out.str();
}

RankedResult rank_scores(std::vector<double> scores, const CandidateSlate& slate) {
    if (scores.size() != slate.candidates.size()) {
        throw ValidationError("score vector does not match slate size");
    }
    RankedResult result;
    result.scores = std::move(scores);
    result.permutation.resize(result.scores.size());
    std::iota(result.permutation.begin(), result.permutation.end(), std::size_t{0});
    std::stable_sort(result.permutation.begin(), result.permutation.end(),
                     [&](std::size_t a, std::size_t b) {
                         return result.scores[a] > result.scores[b];
                     });
    if (slate.ground_truth_position.has_value()) {
        for (std::size_t i = 0; i < result.permutation.size(); ++i) {
            if (result.permutation[i] == *slate.ground_truth_position) {
                result.rank_of_ground_truth = static_cast<int>(i) + 1;
                break;
            }
        }
    }
    return result;
}

namespace {

// Degraded fallback: the first generated letter (skipping whitespace and an
// optional opening parenthesis) gets rank 1; everything else keeps slate
// order.
RankedResult degraded_from_text(const std::string& text, const CandidateSlate& slate) {
    std::size_t n = slate.candidates.size();
    std::vector<double> scores(n, 0.0);
    for (char ch : text) {
        if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '(') continue;
        if (ch >= 'A' && ch < static_cast<char>('A' + n)) {
            scores[static_cast<std::size_t>(ch - 'A')] = 1.0;
        }
        break;
    }
    RankedResult result = rank_scores(std::move(scores), slate);
    result.degraded = true;
    return result;
}

}  // namespace

RankedResult score_with_verbalizer(clients::ChatClient& client, const std::string& prompt,
                                   const CandidateSlate& slate, bool allow_degraded) {
    std::size_t n = slate.candidates.size();
    if (n < 2) throw ValidationError("slate must hold at least 2 candidates");

    clients::ChatOptions options;
    options.temperature = 0.0;
    options.max_tokens = 8;
    options.want_logprobs = true;
    options.top_logprobs = std::max(kMaxSlateSize, static_cast<int>(n));

    if (!client.supports_logprobs()) {
        if (!allow_degraded) {
            throw CapabilityError(
                "chat client '" + client.model_id() +
                "' does not expose next-token log-probabilities; use mock scoring "
                "(--mock-scoring) or enable the degraded generation-parse fallback "
                "(--allow-degraded)");
        }
        clients::ChatResult res = client.complete({{"user", prompt}}, options);
        return degraded_from_text(res.text, slate);
    }

    clients::ChatResult res = client.complete({{"user", prompt}}, options);
    if (!res.has_logprobs) {
        if (allow_degraded) return degraded_from_text(res.text, slate);
        throw ResponseParseError(
            "scoring response carried no log-probabilities despite client support");
    }

    // Letters absent from the top set keep -inf and therefore sort after all
    // present letters in original slate order.
    std::vector<double> scores(n, -std::numeric_limits<double>::infinity());
    for (const clients::TokenLogprob& tl : res.first_token_top_logprobs) {
        std::string token = util::trim(tl.token);
        if (token.size() == 1 && token[0] >= 'A' &&
            token[0] < static_cast<char>('A' + n)) {
            std::size_t idx = static_cast<std::size_t>(token[0] - 'A');
            scores[idx] = std::max(scores[idx], tl.logprob);
        }
    }
    return rank_scores(std::move(scores), slate);
}

RankedResult mock_score(const CandidateSlate& slate) {
    if (slate.candidates.size() < 2) {
        throw ValidationError("slate must hold at least 2 candidates");
    }
    auto mean = [](const std::vector<double>& xs) {
        if (xs.empty()) return 0.0;
        double sum = 0.0;
        for (double x : xs) sum += x;
        return sum / static_cast<double>(xs.size());
    };
    std::vector<double> scores;
    scores.reserve(slate.candidates.size());
    for (const Candidate& c : slate.candidates) {
        scores.push_back(mean(c.pros_scores) - mean(c.cons_scores));
    }
    return rank_scores(std::move(scores), slate);
}

void write_training_pair(std::ostream& out, const std::string& prompt, char label) {
    ordered_json j;
    j["prompt"] = prompt;
    j["label"] = std::string(1, label);
    out << j.dump() << "\n";
}

}  // namespace revbrowse::ranker
