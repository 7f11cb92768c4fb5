#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "revbrowse/clients.hpp"
#include "revbrowse/corpus.hpp"
#include "revbrowse/extraction.hpp"
#include "revbrowse/prefrag.hpp"
#include "revbrowse/ranker.hpp"

namespace revbrowse::eval {

// Single-relevant-item metrics over a 1-based rank. An absent rank (the held-
// out item never made it into the slate) scores 0 for all three.
double recall_at_k(std::optional<int> rank, int k);
double ndcg_at_k(std::optional<int> rank, int k);
double mrr_at_k(std::optional<int> rank, int k);

// Everything a leave-one-out evaluation run reads. All pointers are borrowed
// and must outlive the run; scorer may be null to use the deterministic mock
// scorer, file_slates may be null unless the FILE strategy is selected.
struct EvalPipeline {
    const std::vector<corpus::InteractionSequence>* sequences = nullptr;
    const std::map<std::string, corpus::Review>* reviews_by_id = nullptr;
    const extraction::FeatureStore* features = nullptr;
    const std::unordered_map<std::string, std::string>* titles = nullptr;
    clients::EmbeddingClient* embedder = nullptr;
    const prefrag::ProjectionAdapter* adapter = nullptr;
    const prefrag::FeatureIndex* index = nullptr;
    const ranker::CandidatePool* pool = nullptr;
    const ranker::FileSlates* file_slates = nullptr;
    clients::ChatClient* scorer = nullptr;
    prefrag::PreferenceFn extract_prefs;
};

struct EvalConfig {
    std::vector<int> ks{5, 10};
    int retrieval_k = 2;
    int slate_size = 20;
    ranker::CandidateStrategy strategy = ranker::CandidateStrategy::kPopularity;
    ranker::PromptVariant variant = ranker::PromptVariant::kFull;
    bool inject_ground_truth = true;
    std::uint64_t seed = 42;
    // How many of the most recent train reviews feed preference extraction.
    std::size_t history_window = 20;
    bool allow_degraded = false;
    // Extra fingerprint material (e.g. the pipeline config hash) appended to
    // the run signature.
    std::string extra_fingerprint;
};

// One line of the per-user rank dump. rank is 1-based; absent when the ground
// truth could not be slated (the user still contributes 0 to every mean).
struct UserOutcome {
    std::string user_id;
    std::optional<int> rank;
    std::size_t slate_size = 0;
    bool injected = false;
    bool skipped = false;
    bool degraded = false;
};

struct MetricRow {
    int k = 0;
    double recall = 0.0;
    double ndcg = 0.0;
    double mrr = 0.0;
};

struct MetricsReport {
    std::vector<MetricRow> rows;     // one row per requested k, in request order
    std::size_t user_count = 0;      // denominator of every mean
    std::size_t skipped_count = 0;   // users that contributed 0 (no rank)
    bool degraded = false;           // any user scored through the fallback
    std::string fingerprint;         // human-readable run signature
    std::vector<UserOutcome> outcomes;  // sorted by user_id
};

// The canonical run signature embedded in reports and artifact manifests.
std::string config_signature(const EvalConfig& config);

// Evaluates every sequence in the pipeline: split leave-one-out, extract
// preferences from the train tail, retrieve features, build and score a slate,
// and locate the held-out item. Deterministic given seeds; invariant under
// permutation of the sequence order.
MetricsReport evaluate(const EvalPipeline& pipeline, const EvalConfig& config);

// evaluate() with the prompt-rendering flags forced to the given variant.
MetricsReport run_ablation(const EvalPipeline& pipeline, EvalConfig config,
                           ranker::PromptVariant variant);

// One evaluate() per retrieval depth, identical seeds across runs.
std::vector<MetricsReport> run_topk_sweep(const EvalPipeline& pipeline, EvalConfig config,
                                          const std::vector<int>& depths = {1, 2, 3});

// Human-readable table.
std::string format_report(const MetricsReport& report);

// One machine-readable record for the whole run.
void write_report_jsonl(std::ostream& out, const MetricsReport& report);

// One record per user, in the report's canonical order; the means in the
// report are recomputable from this dump alone.
void write_rank_dump(std::ostream& out, const MetricsReport& report);

}  // namespace revbrowse::eval
