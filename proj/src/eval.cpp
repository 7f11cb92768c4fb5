#include "revbrowse/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "revbrowse/errors.hpp"
#include "revbrowse/util.hpp"

namespace revbrowse::eval {

using ordered_json = nlohmann::ordered_json;

namespace {

void check_rank_and_k(const std::optional<int>& rank, int k) {
    if (k < 1) throw ValidationError("metric cutoff k must be >= 1, got " + std::to_string(k));
    if (rank.has_value() && *rank < 1) {
        throw ValidationError("ranks are 1-based; got " + std::to_string(*rank));
    }
}

}  // namespace

double recall_at_k(std::optional<int> rank, int k) {
    check_rank_and_k(rank, k);
    return rank.has_value() && *rank <= k ? 1.0 : 0.0;
}

double ndcg_at_k(std::optional<int> rank, int k) {
    check_rank_and_k(rank, k);
    if (!rank.has_value() || *rank > k) return 0.0;
    // Single relevant item: DCG = 1/log2(rank+1), IDCG = 1.
    return 1.0 / std::log2(static_cast<double>(*rank) + 1.0);
}

double mrr_at_k(std::optional<int> rank, int k) {
    check_rank_and_k(rank, k);
    if (!rank.has_value() || *rank > k) return 0.0;
    return 1.0 / static_cast<double>(*rank);
}

std::string config_signature(const EvalConfig& config) {
    std::ostringstream sig;
    sig << "strategy=" << ranker::strategy_name(config.strategy)
        << ";retrieval_k=" << config.retrieval_k << ";slate=" << config.slate_size
        << ";variant=" << ranker::variant_name(config.variant)
        << ";inject=" << (config.inject_ground_truth ? 1 : 0) << ";seed=" << config.seed
        << ";window=" << config.history_window << ";ks=";
    for (std::size_t i = 0; i < config.ks.size(); ++i) {
        if (i > 0) sig << ",";
        sig << config.ks[i];
    }
    if (!config.extra_fingerprint.empty()) sig << ";config=" << config.extra_fingerprint;
    return sig.str();
}

namespace {

void validate_pipeline(const EvalPipeline& pipe, const EvalConfig& config) {
    if (pipe.sequences == nullptr || pipe.reviews_by_id == nullptr ||
        pipe.features == nullptr || pipe.titles == nullptr || pipe.embedder == nullptr ||
        pipe.adapter == nullptr || pipe.index == nullptr || pipe.pool == nullptr ||
        !pipe.extract_prefs) {
        throw ValidationError("evaluation pipeline is missing a component");
    }
    if (pipe.sequences->empty()) {
        throw ValidationError("evaluation requires at least one test user");
    }
    if (config.strategy == ranker::CandidateStrategy::kFile && pipe.file_slates == nullptr) {
        throw MissingArtifactError(
            "FILE candidate strategy requires a loaded slate file (--slates)");
    }
    if (config.ks.empty()) throw ValidationError("at least one metric cutoff is required");
    for (int k : config.ks) {
        if (k < 1) throw ValidationError("metric cutoffs must be >= 1");
    }
    if (config.retrieval_k < 0) throw ValidationError("retrieval depth must be >= 0");
    if (config.history_window < 1) {
        throw ValidationError("preference history window must be >= 1");
    }
}

UserOutcome evaluate_user(const EvalPipeline& pipe, const EvalConfig& config,
                          const corpus::InteractionSequence& seq) {
    UserOutcome outcome;
    outcome.user_id = seq.user_id;

    corpus::SplitSpec split = corpus::leave_one_out_split(seq);

    // Train-tail reviews drive preference extraction; train titles become the
    // prompt history (the renderer keeps the most recent 20).
    std::set<std::string> train_items;
    std::vector<std::string> history_titles;
    for (const corpus::Event& ev : split.train) {
        train_items.insert(ev.item_id);
        history_titles.push_back(extraction::title_for(*pipe.titles, ev.item_id));
    }
    std::size_t window = std::min(config.history_window, split.train.size());
    std::vector<corpus::Review> window_reviews;
    for (std::size_t i = split.train.size() - window; i < split.train.size(); ++i) {
        auto it = pipe.reviews_by_id->find(split.train[i].review_id);
        if (it == pipe.reviews_by_id->end()) {
            throw ValidationError("review " + split.train[i].review_id +
                                  " referenced by user " + seq.user_id +
                                  " is absent from the corpus");
        }
        window_reviews.push_back(it->second);
    }

    extraction::UserPreferences prefs = pipe.extract_prefs(window_reviews);
    prefrag::UserEncoding encoding;
    if (!prefs.like.empty() || !prefs.dislike.empty()) {
        encoding = prefrag::encode_user(prefs, *pipe.embedder, *pipe.adapter);
    }

    ranker::ProvideConfig provide_cfg;
    provide_cfg.strategy = config.strategy;
    provide_cfg.slate_size = config.slate_size;
    provide_cfg.inject_ground_truth = config.inject_ground_truth;
    provide_cfg.seed = config.seed;
    ranker::ProvideResult provided;
    try {
        provided = ranker::provide_candidates(*pipe.pool, pipe.file_slates, seq.user_id,
                                              train_items, split.test.item_id, provide_cfg);
    } catch (const MissingArtifactError&) {
        if (config.strategy != ranker::CandidateStrategy::kFile) throw;
        // A user absent from the slate file cannot be slated at all; count it
        // like a ground-truth miss instead of aborting the whole run.
        outcome.skipped = true;
        return outcome;
    }

    if (!provided.ground_truth_position.has_value()) {
        // Injection disabled and the provider never surfaced the held-out
        // item: the user scores 0 everywhere, no point ranking the slate.
        outcome.slate_size = provided.item_ids.size();
        outcome.injected = provided.injected;
        outcome.skipped = true;
        return outcome;
    }

    ranker::CandidateSlate slate = ranker::assemble_slate(
        provided.item_ids, *pipe.index, *pipe.titles, encoding, config.retrieval_k);
    slate.ground_truth_position = provided.ground_truth_position;
    slate.injected = provided.injected;

    // Ablations that drop review evidence hide it from the scorer too, not
    // just from the rendered prompt.
    if (!ranker::variant_uses_reviews(config.variant)) {
        for (ranker::Candidate& c : slate.candidates) {
            c.retrieved_pros.clear();
            c.retrieved_cons.clear();
            c.pros_scores.clear();
            c.cons_scores.clear();
        }
    }

    ranker::RankedResult ranked;
    if (pipe.scorer != nullptr) {
        std::string prompt = ranker::render_recommendation_prompt(history_titles, prefs,
                                                                  slate, config.variant);
        ranked = ranker::score_with_verbalizer(*pipe.scorer, prompt, slate,
                                               config.allow_degraded);
    } else {
        ranked = ranker::mock_score(slate);
    }

    outcome.rank = ranked.rank_of_ground_truth;
    outcome.slate_size = slate.candidates.size();
    outcome.injected = provided.injected;
    outcome.skipped = !outcome.rank.has_value();
    outcome.degraded = ranked.degraded;
    return outcome;
}

}  // namespace

MetricsReport evaluate(const EvalPipeline& pipeline, const EvalConfig& config) {
    validate_pipeline(pipeline, config);

    std::vector<UserOutcome> outcomes;
    outcomes.reserve(pipeline.sequences->size());
    for (const corpus::InteractionSequence& seq : *pipeline.sequences) {
        outcomes.push_back(evaluate_user(pipeline, config, seq));
    }
    // Canonical reduction order: sorting by user id makes the report invariant
    // under permutation of the input sequences, including the floating-point
    // accumulation.
    std::sort(outcomes.begin(), outcomes.end(),
              [](const UserOutcome& a, const UserOutcome& b) { return a.user_id < b.user_id; });

    MetricsReport report;
    report.user_count = outcomes.size();
    for (const UserOutcome& o : outcomes) {
        if (o.skipped) ++report.skipped_count;
        if (o.degraded) report.degraded = true;
    }
    double denom = static_cast<double>(report.user_count);
    for (int k : config.ks) {
        MetricRow row;
        row.k = k;
        double recall_sum = 0.0;
        double ndcg_sum = 0.0;
        double mrr_sum = 0.0;
        for (const UserOutcome& o : outcomes) {
            recall_sum += recall_at_k(o.rank, k);
            ndcg_sum += ndcg_at_k(o.rank, k);
            mrr_sum += mrr_at_k(o.rank, k);
        }
        row.recall = recall_sum / denom;
        row.ndcg = ndcg_sum / denom;
        row.mrr = mrr_sum / denom;
        report.rows.push_back(row);
    }
    report.fingerprint = config_signature(config);
    report.outcomes = std::move(outcomes);
    return report;
}

MetricsReport run_ablation(const EvalPipeline& pipeline, EvalConfig config,
                           ranker::PromptVariant variant) {
    config.variant = variant;
    return evaluate(pipeline, config);
}

std::vector<MetricsReport> run_topk_sweep(const EvalPipeline& pipeline, EvalConfig config,
                                          const std::vector<int>& depths) {
    if (depths.empty()) throw ValidationError("top-K sweep needs at least one depth");
    std::vector<MetricsReport> reports;
    reports.reserve(depths.size());
    for (int depth : depths) {
        config.retrieval_k = depth;
        reports.push_back(evaluate(pipeline, config));
    }
    return reports;
}

std::string format_report(const MetricsReport& report) {
    std::ostringstream out;
    out << "users: " << report.user_count << "  skipped: " << report.skipped_count
        << "  degraded: " << (report.degraded ? "yes" : "no") << "\n";
    out << "run: " << report.fingerprint << "\n";
    out << std::setw(4) << "k" << std::setw(10) << "recall" << std::setw(10) << "ndcg"
        << std::setw(10) << "mrr" << "\n";
    out << std::fixed << std::setprecision(4);
    for (const MetricRow& row : report.rows) {
        out << std::setw(4) << row.k << std::setw(10) << row.recall << std::setw(10)
            << row.ndcg << std::setw(10) << row.mrr << "\n";
    }
    return out.str();
}

void write_report_jsonl(std::ostream& out, const MetricsReport& report) {
    ordered_json j;
    j["fingerprint"] = report.fingerprint;
    j["user_count"] = report.user_count;
    j["skipped_count"] = report.skipped_count;
    j["degraded"] = report.degraded;
    j["metrics"] = ordered_json::array();
    for (const MetricRow& row : report.rows) {
        ordered_json m;
        m["k"] = row.k;
        m["recall"] = row.recall;
        m["ndcg"] = row.ndcg;
        m["mrr"] = row.mrr;
        j["metrics"].push_back(m);
    }
    out << j.dump() << "\n";
}

void write_rank_dump(std::ostream& out, const MetricsReport& report) {
    for (const UserOutcome& o : report.outcomes) {
        ordered_json j;
        j["user_id"] = o.user_id;
        if (o.rank.has_value()) {
            j["rank"] = *o.rank;
        } else {
            j["rank"] = nullptr;
        }
        j["slate_size"] = o.slate_size;
        j["injected"] = o.injected;
        j["skipped"] = o.skipped;
        j["degraded"] = o.degraded;
        out << j.dump() << "\n";
    }
}

}  // namespace revbrowse::eval
