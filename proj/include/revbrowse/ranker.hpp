#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "revbrowse/clients.hpp"
#include "revbrowse/corpus.hpp"
#include "revbrowse/extraction.hpp"
#include "revbrowse/prefrag.hpp"

namespace revbrowse::ranker {

inline constexpr int kMaxSlateSize = 26;

// One slate entry: the item plus the features retrieved for it. Retrieval
// scores are kept row-parallel so the mock scorer can reuse the cosines.
struct Candidate {
    std::string item_id;
    std::string title;
    std::vector<std::string> retrieved_pros;   // <= K
    std::vector<std::string> retrieved_cons;   // <= K
    std::vector<double> pros_scores;
    std::vector<double> cons_scores;
};

// Ordered candidate list; the letter of a candidate is its position
// ('A' + index), so letter assignment depends only on slate order.
struct CandidateSlate {
    std::vector<Candidate> candidates;
    std::optional<std::size_t> ground_truth_position;
    bool injected = false;  // ground truth was inserted by the provider
};

char letter_for(std::size_t position);

struct RankedResult {
    std::vector<double> scores;               // per slate position
    std::vector<std::size_t> permutation;     // positions by score desc, ties by position
    std::optional<int> rank_of_ground_truth;  // 1-based
    bool degraded = false;                    // generation-parse fallback used
};

enum class CandidateStrategy { kPopularity, kRecency, kFile };

CandidateStrategy parse_strategy(const std::string& name);
const char* strategy_name(CandidateStrategy strategy);

// Corpus-wide interaction statistics for the POPULARITY and RECENCY
// strategies. Build from train-split reviews only so held-out events never
// influence candidate generation.
class CandidatePool {
  public:
    explicit CandidatePool(const std::vector<corpus::Review>& train_reviews);

    // Most-interacted items first; ties by item id ascending. Items in
    // `exclude` are skipped.
    std::vector<std::string> popularity(const std::set<std::string>& exclude,
                                        std::size_t n) const;
    // Most recently interacted first; ties by item id ascending.
    std::vector<std::string> recency(const std::set<std::string>& exclude,
                                     std::size_t n) const;

    std::size_t item_count() const { return count_by_item_.size(); }
    std::size_t interactions_of(const std::string& item_id) const;

  private:
    std::map<std::string, std::size_t> count_by_item_;
    std::map<std::string, std::int64_t> last_ts_by_item_;
};

// Externally supplied per-user slates (FILE strategy), line-delimited JSON
// records {"user_id": ..., "items": [...]}.
class FileSlates {
  public:
    static FileSlates load(const std::string& path);

    const std::vector<std::string>* for_user(const std::string& user_id) const;
    std::size_t size() const { return slates_.size(); }

  private:
    std::map<std::string, std::vector<std::string>> slates_;
};

struct ProvideConfig {
    CandidateStrategy strategy = CandidateStrategy::kPopularity;
    int slate_size = 20;
    bool inject_ground_truth = true;
    std::uint64_t seed = 42;
};

struct ProvideResult {
    std::vector<std::string> item_ids;
    std::optional<std::size_t> ground_truth_position;
    bool injected = false;
};

// Stage-1 stand-in: candidate ids by strategy, with the held-out item
// injected at a seeded per-user position when absent. FILE strategy with an
// unknown user throws MissingArtifactError (callers count it per user).
ProvideResult provide_candidates(const CandidatePool& pool, const FileSlates* file_slates,
                                 const std::string& user_id,
                                 const std::set<std::string>& user_train_items,
                                 const std::optional<std::string>& ground_truth,
                                 const ProvideConfig& config);

// Attaches titles and top-K retrieved features to each candidate id. An
// absent preference vector or unindexed side yields an empty list.
CandidateSlate assemble_slate(const std::vector<std::string>& item_ids,
                              const prefrag::FeatureIndex& index,
                              const std::unordered_map<std::string, std::string>& titles,
                              const prefrag::UserEncoding& encoding, int k = 2);

enum class PromptVariant { kFull, kNoPref, kNoReviews, kNoPrefNoReviews };

PromptVariant parse_variant(const std::string& name);
const char* variant_name(PromptVariant variant);
bool variant_uses_preferences(PromptVariant variant);
bool variant_uses_reviews(PromptVariant variant);

// Byte-exact instantiation of the recommendation input template. History is
// truncated to the most recent 20 titles; ablation variants omit whole
// fields.
std::string render_recommendation_prompt(const std::vector<std::string>& history_titles,
                                         const extraction::UserPreferences& prefs,
                                         const CandidateSlate& slate,
                                         PromptVariant variant = PromptVariant::kFull);

// Letter-token verbalizer scoring over first-token log-probabilities.
// Letters absent from the returned top set score -inf and keep slate order
// behind all present letters. Clients without logprob support throw
// CapabilityError unless allow_degraded, which falls back to parsing the
// first generated letter (flagged degraded).
RankedResult score_with_verbalizer(clients::ChatClient& client, const std::string& prompt,
                                   const CandidateSlate& slate, bool allow_degraded = false);

// Deterministic offline scorer: mean retrieved-pros cosine minus mean
// retrieved-cons cosine; a missing side contributes zero.
RankedResult mock_score(const CandidateSlate& slate);

// Ranks an explicit score vector: descending, ties by position, ground truth
// located through the slate.
RankedResult rank_scores(std::vector<double> scores, const CandidateSlate& slate);

// Fine-tuning export record: {"prompt": ..., "label": "A"} per line.
void write_training_pair(std::ostream& out, const std::string& prompt, char label);

}  // namespace revbrowse::ranker
