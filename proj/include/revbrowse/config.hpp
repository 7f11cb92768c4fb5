#pragma once

#include <cstdint>
#include <string>

namespace revbrowse::config {

// Every knob of the pipeline, with defaults chosen so a checkout runs fully
// offline (mock extraction, embedding and scoring) on the bundled fixtures.
// Values come from, in increasing precedence: these defaults, a sectioned
// key-value config file, then command-line flags.
struct PipelineConfig {
    // [paths]
    std::string corpus;                    // input reviews (JSONL)
    std::string meta;                      // input item metadata (JSONL)
    std::string workdir = "work";          // all derived artifacts live here
    std::string slates;                    // candidate slates for STRATEGY=FILE

    // [clients]
    std::string api_base = "http://localhost:8080/v1";
    std::string chat_model = "qwen2-72b-instruct";
    std::string embed_model = "text-embedding-v1";
    std::string transcript;  // recorded-response file for offline scoring
    int concurrency = 4;
    int retries = 3;
    int timeout_seconds = 60;

    // [hyperparameters]
    int window = 20;              // sliding window for contrastive samples
    int negatives = 40;           // negatives per positive (1:40)
    int retrieval_k = 2;          // features retrieved per side per candidate
    int slate_size = 20;          // candidates per recommendation slate
    double temperature = 1.0;     // InfoNCE temperature
    int epochs = 5;               // adapter training epochs (hard cap 5)
    int batch_size = 8;
    double step_size = 0.05;
    std::uint64_t seed = 42;
    int kcore = 5;                // minimum interactions per user and item
    int embed_dim = 384;          // mock embedder dimension
    double init_noise = 0.01;
    double validation_fraction = 0.1;
    int history_window = 20;      // train reviews feeding preference extraction
    double max_skipped_fraction = 0.5;  // evaluate fails above this

    // [modes]
    bool mock_extraction = true;
    bool mock_embedding = true;
    bool mock_scoring = true;
    std::string variant = "FULL";         // FULL | NO_PREF | NO_REVIEWS | NO_PREF_NO_REVIEWS
    std::string strategy = "POPULARITY";  // POPULARITY | RECENCY | FILE
    bool inject_ground_truth = true;
    bool allow_degraded = false;

    // Derived artifact locations under workdir.
    std::string canonical_corpus_path() const { return workdir + "/corpus.jsonl"; }
    std::string canonical_meta_path() const { return workdir + "/meta.jsonl"; }
    std::string extraction_cache_path() const { return workdir + "/extraction_cache.jsonl"; }
    std::string features_path() const { return workdir + "/features.jsonl"; }
    std::string trainset_path() const { return workdir + "/trainset.jsonl"; }
    std::string ranker_pairs_path() const { return workdir + "/ranker_pairs.jsonl"; }
    std::string adapter_path() const { return workdir + "/adapter.bin"; }
    std::string index_path() const { return workdir + "/index.bin"; }
    std::string report_path() const { return workdir + "/report.jsonl"; }
    std::string rank_dump_path() const { return workdir + "/ranks.jsonl"; }
    std::string manifest_path() const { return workdir + "/manifest.json"; }

    // Range-checks every field; throws ValidationError naming the offender.
    void validate() const;

    // Stable hex hash over the canonical serialization of every field.
    std::string fingerprint() const;
};

// Canonical sectioned key-value rendering (also the config-file format).
std::string serialize_config(const PipelineConfig& config);

// Applies `[section] key = value` lines onto an existing config. Unknown
// sections or keys and malformed values are rejected with ValidationError.
void apply_config_text(PipelineConfig& config, const std::string& text,
                       const std::string& origin = "<config>");
void apply_config_file(PipelineConfig& config, const std::string& path);

// Defaults, then REVBROWSE_CONFIG (if set) or the explicit path (if given).
PipelineConfig load_config(const std::string& explicit_path = "");

}  // namespace revbrowse::config
