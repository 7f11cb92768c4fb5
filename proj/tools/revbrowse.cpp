#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "revbrowse/cli.hpp"
#include "revbrowse/config.hpp"
#include "revbrowse/errors.hpp"

namespace {

// The config file must be loaded before the flag layer is wired so that file
// values become the defaults flags override (and the defaults --help prints).
std::string find_config_arg(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg == "--config" || arg == "-c") {
            if (i + 1 < argc) return argv[i + 1];
        } else if (arg.rfind("--config=", 0) == 0) {
            return arg.substr(9);
        } else if (arg.rfind("-c=", 0) == 0) {
            return arg.substr(3);
        }
    }
    return "";
}

void add_config_flags(CLI::App& app, revbrowse::config::PipelineConfig& cfg) {
    app.add_option("--corpus", cfg.corpus, "input reviews, line-delimited JSON")
        ->capture_default_str();
    app.add_option("--meta", cfg.meta, "input item metadata, line-delimited JSON")
        ->capture_default_str();
    app.add_option("--workdir", cfg.workdir, "directory for all derived artifacts")
        ->capture_default_str();
    app.add_option("--slates", cfg.slates, "per-user candidate slates for --strategy FILE")
        ->capture_default_str();

    app.add_option("--api-base", cfg.api_base, "OpenAI-compatible API base URL")
        ->capture_default_str();
    app.add_option("--chat-model", cfg.chat_model, "chat model for extraction and reranking")
        ->capture_default_str();
    app.add_option("--embed-model", cfg.embed_model, "embedding model")
        ->capture_default_str();
    app.add_option("--transcript", cfg.transcript,
                   "recorded-response transcript for offline scoring")
        ->capture_default_str();
    app.add_option("--concurrency", cfg.concurrency, "parallel extraction requests")
        ->capture_default_str();
    app.add_option("--retries", cfg.retries, "HTTP retry budget")->capture_default_str();
    app.add_option("--timeout-seconds", cfg.timeout_seconds, "HTTP request timeout")
        ->capture_default_str();

    app.add_option("--window", cfg.window, "sliding window length for contrastive samples")
        ->capture_default_str();
    app.add_option("--negatives", cfg.negatives, "negatives per contrastive positive")
        ->capture_default_str();
    app.add_option("--retrieval-k", cfg.retrieval_k,
                   "features retrieved per side per candidate")
        ->capture_default_str();
    app.add_option("--slate-size", cfg.slate_size, "candidates per recommendation slate")
        ->capture_default_str();
    app.add_option("--temperature", cfg.temperature, "InfoNCE temperature")
        ->capture_default_str();
    app.add_option("--epochs", cfg.epochs, "adapter training epochs (max 5)")
        ->capture_default_str();
    app.add_option("--batch-size", cfg.batch_size, "adapter training batch size")
        ->capture_default_str();
    app.add_option("--step-size", cfg.step_size, "adapter gradient step size")
        ->capture_default_str();
    app.add_option("--seed", cfg.seed, "seed for training and candidate injection")
        ->capture_default_str();
    app.add_option("--kcore", cfg.kcore, "minimum interactions per user and item")
        ->capture_default_str();
    app.add_option("--embed-dim", cfg.embed_dim, "mock embedder dimension")
        ->capture_default_str();
    app.add_option("--init-noise", cfg.init_noise, "adapter initialization noise scale")
        ->capture_default_str();
    app.add_option("--validation-fraction", cfg.validation_fraction,
                   "trainset fraction held out for adapter validation")
        ->capture_default_str();
    app.add_option("--history-window", cfg.history_window,
                   "train reviews feeding preference extraction")
        ->capture_default_str();
    app.add_option("--max-skipped-fraction", cfg.max_skipped_fraction,
                   "evaluate fails when more users than this are skipped")
        ->capture_default_str();

    app.add_flag("--mock-extraction,!--no-mock-extraction", cfg.mock_extraction,
                 "use the rule-based extractor instead of the chat model")
        ->capture_default_str();
    app.add_flag("--mock-embedding,!--no-mock-embedding", cfg.mock_embedding,
                 "use the hash embedder instead of the embeddings API")
        ->capture_default_str();
    app.add_flag("--mock-scoring,!--no-mock-scoring", cfg.mock_scoring,
                 "use the retrieval-score reranker instead of the chat model")
        ->capture_default_str();
    app.add_option("--variant", cfg.variant,
                   "prompt variant: FULL, NO_PREF, NO_REVIEWS, NO_PREF_NO_REVIEWS")
        ->capture_default_str();
    app.add_option("--strategy", cfg.strategy,
                   "candidate strategy: POPULARITY, RECENCY, FILE")
        ->capture_default_str();
    app.add_flag("--inject-ground-truth,!--no-inject-ground-truth", cfg.inject_ground_truth,
                 "insert the held-out item into evaluation slates")
        ->capture_default_str();
    app.add_flag("--allow-degraded,!--no-allow-degraded", cfg.allow_degraded,
                 "fall back to text parsing when logprobs are unavailable")
        ->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
    revbrowse::config::PipelineConfig cfg;
    try {
        cfg = revbrowse::config::load_config(find_config_arg(argc, argv));
    } catch (const revbrowse::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    }

    CLI::App app{"review-driven retrieval-augmented recommendation pipeline"};
    app.require_subcommand(1);
    std::string config_path;  // already applied by the pre-scan above
    app.add_option("-c,--config", config_path, "pipeline config file (INI)");
    add_config_flags(app, cfg);

    revbrowse::cli::CommandOptions options;

    CLI::App* ingest =
        app.add_subcommand("ingest", "parse, k-core filter and canonicalize the corpus");
    CLI::App* extract =
        app.add_subcommand("extract", "extract user preferences and item features");
    CLI::App* trainset =
        app.add_subcommand("build-trainset", "build the contrastive training set");
    CLI::App* train = app.add_subcommand("train", "train the projection adapter");
    CLI::App* index = app.add_subcommand("index", "build the item feature index");
    CLI::App* recommend =
        app.add_subcommand("recommend", "rank a candidate slate for one user");
    CLI::App* evaluate =
        app.add_subcommand("evaluate", "leave-one-out evaluation over all users");

    for (CLI::App* sub : {ingest, extract, trainset, train, index, recommend, evaluate}) {
        sub->fallthrough();
        sub->add_flag("--force", options.force, "ignore artifact staleness mismatches");
    }
    trainset->add_flag("--ranker-pairs", options.ranker_pairs,
                       "also export prompt/label fine-tuning pairs");
    recommend->add_option("user", options.user_id, "user id to recommend for")->required();
    CLI::Option* ablation = evaluate->add_flag("--ablation", options.ablation,
                                               "evaluate all four prompt variants");
    CLI::Option* sweep = evaluate->add_flag("--sweep", options.sweep,
                                            "evaluate retrieval depths 1 through 3");
    ablation->excludes(sweep);
    sweep->excludes(ablation);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        return revbrowse::cli::run_command(command, cfg, options, std::cout);
    } catch (const revbrowse::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    }
}
