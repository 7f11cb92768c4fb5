#pragma once

#include <iosfwd>
#include <map>
#include <string>

#include "revbrowse/config.hpp"

namespace revbrowse::cli {

// One pipeline stage as recorded in the workdir manifest: which command
// produced it and under which stage fingerprint.
struct StageRecord {
    std::string fingerprint;
    std::string command;

    bool operator==(const StageRecord&) const = default;
};

using Manifest = std::map<std::string, StageRecord>;

// A missing manifest file reads as empty; a malformed one raises
// ValidationError.
Manifest read_manifest(const std::string& path);
void write_manifest(const std::string& path, const Manifest& manifest);

// Stage fingerprints hash only the config fields a stage depends on, chained
// through the upstream stage, so unrelated knob changes (say the ablation
// variant) do not invalidate built artifacts. Stages: ingest, extract,
// trainset, train, index.
std::string stage_fingerprint(const config::PipelineConfig& config, const std::string& stage);

// Checks that `stage` was built and matches the current config; a missing
// stage raises MissingArtifactError and a fingerprint mismatch raises
// StalenessError (suppressed by force), both naming the producing command.
void require_stage(const Manifest& manifest, const std::string& stage,
                   const config::PipelineConfig& config, bool force,
                   const std::string& needed_by);

struct CommandOptions {
    bool force = false;         // ignore staleness mismatches
    bool ranker_pairs = false;  // build-trainset: also emit prompt/label pairs
    bool ablation = false;      // evaluate: all four prompt variants
    bool sweep = false;         // evaluate: retrieval depths 1..3
    std::string user_id;        // recommend
};

// Runs one subcommand (ingest, extract, build-trainset, train, index,
// recommend, evaluate); returns 0 on success, throws revbrowse errors
// otherwise. Human-readable progress goes to `out`.
int run_command(const std::string& command, const config::PipelineConfig& config,
                const CommandOptions& options, std::ostream& out);

}  // namespace revbrowse::cli
