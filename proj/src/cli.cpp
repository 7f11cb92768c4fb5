#include "revbrowse/cli.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "revbrowse/clients.hpp"
#include "revbrowse/corpus.hpp"
#include "revbrowse/errors.hpp"
#include "revbrowse/eval.hpp"
#include "revbrowse/extraction.hpp"
#include "revbrowse/prefrag.hpp"
#include "revbrowse/ranker.hpp"
#include "revbrowse/util.hpp"

namespace revbrowse::cli {

using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Manifest

Manifest read_manifest(const std::string& path) {
    Manifest manifest;
    if (!fs::exists(path)) return manifest;
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open manifest: " + path);
    ordered_json j = ordered_json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("stages") ||
        !j["stages"].is_object()) {
        throw ValidationError("malformed manifest: " + path);
    }
    for (const auto& [stage, rec] : j["stages"].items()) {
        if (!rec.is_object() || !rec.contains("fingerprint") || !rec.contains("command")) {
            throw ValidationError("malformed manifest stage '" + stage + "' in " + path);
        }
        manifest[stage] = StageRecord{rec["fingerprint"].get<std::string>(),
                                      rec["command"].get<std::string>()};
    }
    return manifest;
}

void write_manifest(const std::string& path, const Manifest& manifest) {
    ordered_json stages = ordered_json::object();
    for (const auto& [stage, rec] : manifest) {
        stages[stage] = {{"fingerprint", rec.fingerprint}, {"command", rec.command}};
    }
    ordered_json j;
    j["stages"] = stages;
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Stage fingerprints

namespace {

std::string hash_hex(const std::string& material) {
    return util::to_hex(util::fnv1a64(material));
}

const std::map<std::string, std::string>& producing_command() {
    static const std::map<std::string, std::string> table = {
        {"ingest", "ingest"},   {"extract", "extract"}, {"trainset", "build-trainset"},
        {"train", "train"},     {"index", "index"},
    };
    return table;
}

}  // namespace

std::string stage_fingerprint(const config::PipelineConfig& c, const std::string& stage) {
    std::ostringstream m;
    if (stage == "ingest") {
        m << "corpus=" << c.corpus << ";meta=" << c.meta << ";kcore=" << c.kcore;
    } else if (stage == "extract") {
        m << "parent=" << stage_fingerprint(c, "ingest")
          << ";mock_extraction=" << c.mock_extraction << ";chat_model=" << c.chat_model
          << ";api_base=" << c.api_base;
    } else if (stage == "trainset") {
        m << "parent=" << stage_fingerprint(c, "extract") << ";window=" << c.window
          << ";negatives=" << c.negatives << ";history_window=" << c.history_window;
    } else if (stage == "train") {
        m << "parent=" << stage_fingerprint(c, "trainset")
          << ";mock_embedding=" << c.mock_embedding << ";embed_model=" << c.embed_model
          << ";embed_dim=" << c.embed_dim << ";temperature=" << c.temperature
          << ";epochs=" << c.epochs << ";batch_size=" << c.batch_size
          << ";step_size=" << c.step_size << ";seed=" << c.seed
          << ";init_noise=" << c.init_noise
          << ";validation_fraction=" << c.validation_fraction;
    } else if (stage == "index") {
        m << "parent=" << stage_fingerprint(c, "train");
    } else {
        throw ValidationError("unknown pipeline stage '" + stage + "'");
    }
    return hash_hex(m.str());
}

void require_stage(const Manifest& manifest, const std::string& stage,
                   const config::PipelineConfig& config, bool force,
                   const std::string& needed_by) {
    const std::string& producer = producing_command().at(stage);
    auto it = manifest.find(stage);
    if (it == manifest.end()) {
        throw MissingArtifactError(needed_by + " needs the " + stage +
                                   " artifacts; run `revbrowse " + producer + "` first");
    }
    if (!force && it->second.fingerprint != stage_fingerprint(config, stage)) {
        throw StalenessError("the " + stage +
                             " artifacts were produced under a different configuration; "
                             "rerun `revbrowse " +
                             producer + "` or pass --force");
    }
}

// ---------------------------------------------------------------------------
// Shared loading helpers

namespace {

struct LoadedCorpus {
    std::vector<corpus::Review> reviews;  // canonical, already k-core filtered
    std::vector<corpus::ItemMeta> items;
    std::vector<corpus::InteractionSequence> sequences;  // full histories
    std::vector<corpus::InteractionSequence> trainval;   // minus the held-out event
    std::vector<corpus::Review> trainval_reviews;
    std::map<std::string, corpus::Review> by_id;
    std::unordered_map<std::string, std::string> titles;
};

LoadedCorpus load_canonical(const config::PipelineConfig& cfg) {
    LoadedCorpus loaded;
    corpus::ParseResult reviews = corpus::parse_reviews_file(cfg.canonical_corpus_path());
    loaded.reviews = std::move(reviews.reviews);
    if (fs::exists(cfg.canonical_meta_path())) {
        corpus::ParseResult meta = corpus::parse_reviews_file(cfg.canonical_meta_path());
        loaded.items = std::move(meta.items);
    }
    loaded.titles = extraction::make_title_map(loaded.items);
    loaded.sequences = corpus::build_sequences(loaded.reviews);
    for (const corpus::Review& r : loaded.reviews) loaded.by_id[r.review_id] = r;

    // Everything before each user's final (test) event; the trainset, the
    // feature index and the popularity pool all stop here so the held-out
    // items stay unseen.
    loaded.trainval = loaded.sequences;
    std::set<std::string> trainval_ids;
    for (corpus::InteractionSequence& seq : loaded.trainval) {
        if (!seq.events.empty()) seq.events.pop_back();
        for (const corpus::Event& e : seq.events) trainval_ids.insert(e.review_id);
    }
    for (const corpus::Review& r : loaded.reviews) {
        if (trainval_ids.count(r.review_id) > 0) loaded.trainval_reviews.push_back(r);
    }
    return loaded;
}

std::shared_ptr<clients::ChatClient> make_extraction_client(const config::PipelineConfig& cfg) {
    if (cfg.mock_extraction) return std::make_shared<extraction::MockExtractionChatClient>();
    clients::HttpClientConfig http;
    http.base_url = cfg.api_base;
    http.model = cfg.chat_model;
    http.max_retries = cfg.retries;
    http.timeout_seconds = cfg.timeout_seconds;
    return std::make_shared<clients::HttpChatClient>(http);
}

std::unique_ptr<clients::EmbeddingClient> make_embedder(const config::PipelineConfig& cfg) {
    if (cfg.mock_embedding) return std::make_unique<clients::MockEmbedder>(cfg.embed_dim);
    clients::HttpClientConfig http;
    http.base_url = cfg.api_base;
    http.model = cfg.embed_model;
    http.max_retries = cfg.retries;
    http.timeout_seconds = cfg.timeout_seconds;
    return std::make_unique<clients::HttpEmbeddingClient>(http, cfg.embed_dim);
}

// Null when mock scoring is selected; the callers fall back to mock_score.
std::unique_ptr<clients::ChatClient> make_scorer(const config::PipelineConfig& cfg) {
    if (cfg.mock_scoring) return nullptr;
    if (!cfg.transcript.empty()) {
        return std::make_unique<clients::RecordedChatClient>(cfg.transcript);
    }
    clients::HttpClientConfig http;
    http.base_url = cfg.api_base;
    http.model = cfg.chat_model;
    http.max_retries = cfg.retries;
    http.timeout_seconds = cfg.timeout_seconds;
    return std::make_unique<clients::HttpChatClient>(http);
}

std::shared_ptr<extraction::Extractor> make_extractor(
    const config::PipelineConfig& cfg, std::shared_ptr<extraction::ExtractionCache> cache) {
    extraction::ExtractorConfig ecfg;
    ecfg.max_retries = cfg.retries;
    ecfg.concurrency = cfg.concurrency;
    return std::make_shared<extraction::Extractor>(make_extraction_client(cfg),
                                                   std::move(cache), ecfg);
}

prefrag::PreferenceFn make_prefs_fn(std::shared_ptr<extraction::Extractor> extractor,
                                    const std::unordered_map<std::string, std::string>& titles) {
    return [extractor, &titles](const std::vector<corpus::Review>& window) {
        if (window.empty()) return extraction::UserPreferences{};
        std::vector<extraction::ReviewForPrompt> prompt_reviews;
        std::vector<std::string> source_ids;
        for (const corpus::Review& r : window) {
            prompt_reviews.push_back({r.item_id, extraction::title_for(titles, r.item_id),
                                      r.text, r.rating});
            source_ids.push_back(r.review_id);
        }
        return extractor->extract_user_preferences(prompt_reviews, window.front().user_id,
                                                   source_ids);
    };
}

prefrag::ProjectionAdapter load_adapter_checked(const config::PipelineConfig& cfg,
                                                bool force) {
    prefrag::ProjectionAdapter adapter = prefrag::ProjectionAdapter::load(cfg.adapter_path());
    if (!force && adapter.fingerprint != stage_fingerprint(cfg, "train")) {
        throw StalenessError(
            "adapter " + cfg.adapter_path() +
            " was produced under a different configuration; rerun `revbrowse train` or "
            "pass --force");
    }
    return adapter;
}

prefrag::FeatureIndex load_index_checked(const config::PipelineConfig& cfg, bool force) {
    prefrag::FeatureIndex index = prefrag::FeatureIndex::load(cfg.index_path());
    if (!force && index.fingerprint() != stage_fingerprint(cfg, "index")) {
        throw StalenessError(
            "index " + cfg.index_path() +
            " was produced under a different configuration; rerun `revbrowse index` or "
            "pass --force");
    }
    return index;
}

// Serializes concurrent manifest updates with an advisory file lock so two
// pipeline commands writing different stages cannot interleave the
// read-modify-write.  Lock failures are non-fatal: single-process use (the
// common case) never contends.
class ManifestLock {
public:
    explicit ManifestLock(const std::filesystem::path& manifest_path) {
        const std::string lock_path = manifest_path.string() + ".lock";
        fd_ = ::open(lock_path.c_str(), O_CREAT | O_RDWR, 0644);
        if (fd_ >= 0) ::flock(fd_, LOCK_EX);
    }
    ~ManifestLock() {
        if (fd_ >= 0) {
            ::flock(fd_, LOCK_UN);
            ::close(fd_);
        }
    }
    ManifestLock(const ManifestLock&) = delete;
    ManifestLock& operator=(const ManifestLock&) = delete;

private:
    int fd_ = -1;
};

void update_manifest_stage(const config::PipelineConfig& cfg, const std::string& stage) {
    ManifestLock lock(cfg.manifest_path());
    Manifest manifest = read_manifest(cfg.manifest_path());
    manifest[stage] =
        StageRecord{stage_fingerprint(cfg, stage), producing_command().at(stage)};
    write_manifest(cfg.manifest_path(), manifest);
}

// ---------------------------------------------------------------------------
// Commands

void cmd_ingest(const config::PipelineConfig& cfg, const CommandOptions&, std::ostream& out) {
    if (cfg.corpus.empty()) {
        throw ValidationError("ingest requires an input corpus (--corpus <reviews.jsonl>)");
    }
    if (!fs::exists(cfg.corpus)) {
        throw MissingArtifactError("input corpus not found: " + cfg.corpus);
    }
    corpus::ParseResult parsed = corpus::parse_reviews_file(cfg.corpus);
    std::vector<corpus::ItemMeta> items = std::move(parsed.items);
    if (!cfg.meta.empty()) {
        if (!fs::exists(cfg.meta)) {
            throw MissingArtifactError("item metadata not found: " + cfg.meta);
        }
        corpus::ParseResult meta = corpus::parse_reviews_file(cfg.meta);
        for (corpus::ItemMeta& m : meta.items) items.push_back(std::move(m));
    }
    std::vector<corpus::Review> kept = corpus::kcore_filter(parsed.reviews, cfg.kcore);
    if (kept.empty()) {
        throw ValidationError("no reviews survive " + std::to_string(cfg.kcore) +
                              "-core filtering");
    }

    fs::create_directories(cfg.workdir);
    {
        std::ofstream corpus_out(cfg.canonical_corpus_path());
        if (!corpus_out) {
            throw ValidationError("cannot write " + cfg.canonical_corpus_path());
        }
        corpus::write_canonical_reviews(corpus_out, kept);
    }
    {
        std::ofstream meta_out(cfg.canonical_meta_path());
        if (!meta_out) throw ValidationError("cannot write " + cfg.canonical_meta_path());
        corpus::write_canonical_meta(meta_out, items);
    }
    update_manifest_stage(cfg, "ingest");

    corpus::CorpusStats stats = corpus::compute_stats(kept);
    out << "ingest: kept " << kept.size() << " of " << parsed.reviews.size() << " reviews ("
        << parsed.malformed << " malformed lines skipped)\n";
    out << "ingest: " << stats.users << " users, " << stats.items << " items, mean history "
        << std::fixed << std::setprecision(2) << stats.mean_length << ", density "
        << std::setprecision(6) << stats.density << "\n";
}

void cmd_extract(const config::PipelineConfig& cfg, const CommandOptions& options,
                 std::ostream& out) {
    Manifest manifest = read_manifest(cfg.manifest_path());
    require_stage(manifest, "ingest", cfg, options.force, "extract");
    LoadedCorpus loaded = load_canonical(cfg);

    auto cache = std::make_shared<extraction::ExtractionCache>(cfg.extraction_cache_path());
    auto extractor = make_extractor(cfg, cache);
    std::vector<std::optional<extraction::ItemFeatures>> results =
        extractor->extract_many(loaded.trainval_reviews, loaded.titles);

    extraction::FeatureStore store;
    for (std::size_t i = 0; i < results.size(); ++i) {
        if (results[i].has_value()) {
            store.add(*results[i], loaded.trainval_reviews[i].user_id);
        }
    }
    store.save(cfg.features_path());
    update_manifest_stage(cfg, "extract");

    out << "extract: " << loaded.trainval_reviews.size() << " reviews -> " << store.size()
        << " feature records (" << extractor->dropped_empty()
        << " empty extractions dropped), cache entries " << cache->size() << "\n";
}

std::vector<prefrag::ContrastiveSample> read_trainset(const std::string& path) {
    if (!fs::exists(path)) {
        throw MissingArtifactError("trainset not found: " + path +
                                   "; run `revbrowse build-trainset` first");
    }
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open trainset: " + path);
    std::vector<prefrag::ContrastiveSample> samples;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (util::trim(line).empty()) continue;
        ordered_json j = ordered_json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            throw ValidationError("malformed trainset record at " + path + ":" +
                                  std::to_string(lineno));
        }
        try {
            prefrag::ContrastiveSample s;
            std::string branch = j.at("branch").get<std::string>();
            if (branch == "LIKE_PROS") {
                s.branch = prefrag::Branch::kLikePros;
            } else if (branch == "DISLIKE_CONS") {
                s.branch = prefrag::Branch::kDislikeCons;
            } else {
                throw ValidationError("unknown branch '" + branch + "'");
            }
            s.user_id = j.at("user_id").get<std::string>();
            s.positive_review_id = j.at("positive_review_id").get<std::string>();
            s.positive_item_id = j.at("positive_item_id").get<std::string>();
            s.query_text = j.at("query").get<std::string>();
            s.positive_text = j.at("positive").get<std::string>();
            for (const auto& n : j.at("negatives")) {
                s.negative_texts.push_back(n.get<std::string>());
            }
            samples.push_back(std::move(s));
        } catch (const ordered_json::exception&) {
            throw ValidationError("malformed trainset record at " + path + ":" +
                                  std::to_string(lineno));
        }
    }
    return samples;
}

void write_ranker_pairs(const config::PipelineConfig& cfg, const CommandOptions& options,
                        const LoadedCorpus& loaded, std::ostream& out) {
    Manifest manifest = read_manifest(cfg.manifest_path());
    require_stage(manifest, "train", cfg, options.force, "build-trainset --ranker-pairs");
    require_stage(manifest, "index", cfg, options.force, "build-trainset --ranker-pairs");

    prefrag::ProjectionAdapter adapter = load_adapter_checked(cfg, options.force);
    prefrag::FeatureIndex index = load_index_checked(cfg, options.force);
    std::unique_ptr<clients::EmbeddingClient> embedder = make_embedder(cfg);
    auto cache = std::make_shared<extraction::ExtractionCache>(cfg.extraction_cache_path());
    auto extractor = make_extractor(cfg, cache);
    prefrag::PreferenceFn prefs_fn = make_prefs_fn(extractor, loaded.titles);
    ranker::CandidatePool pool(loaded.trainval_reviews);
    ranker::PromptVariant variant = ranker::parse_variant(cfg.variant);
    ranker::CandidateStrategy strategy = ranker::parse_strategy(cfg.strategy);

    std::ofstream pairs(cfg.ranker_pairs_path());
    if (!pairs) throw ValidationError("cannot write " + cfg.ranker_pairs_path());
    std::size_t written = 0;
    std::size_t skipped = 0;
    for (const corpus::InteractionSequence& seq : loaded.sequences) {
        corpus::SplitSpec split = corpus::leave_one_out_split(seq);
        std::set<std::string> train_items;
        std::vector<std::string> history;
        for (const corpus::Event& e : split.train) {
            train_items.insert(e.item_id);
            history.push_back(extraction::title_for(loaded.titles, e.item_id));
        }
        std::size_t window =
            std::min<std::size_t>(static_cast<std::size_t>(cfg.history_window),
                                  split.train.size());
        std::vector<corpus::Review> window_reviews;
        for (std::size_t i = split.train.size() - window; i < split.train.size(); ++i) {
            window_reviews.push_back(loaded.by_id.at(split.train[i].review_id));
        }
        extraction::UserPreferences prefs = prefs_fn(window_reviews);
        prefrag::UserEncoding encoding;
        if (!prefs.empty()) {
            encoding = prefrag::encode_user(prefs, *embedder, adapter);
        }
        // The label comes from the validation event, never the test event.
        ranker::ProvideConfig pcfg;
        pcfg.strategy = strategy;
        pcfg.slate_size = cfg.slate_size;
        pcfg.inject_ground_truth = cfg.inject_ground_truth;
        pcfg.seed = cfg.seed;
        ranker::ProvideResult provided = ranker::provide_candidates(
            pool, nullptr, seq.user_id, train_items, split.validation.item_id, pcfg);
        if (!provided.ground_truth_position.has_value()) {
            ++skipped;
            continue;
        }
        ranker::CandidateSlate slate = ranker::assemble_slate(
            provided.item_ids, index, loaded.titles, encoding, cfg.retrieval_k);
        std::string prompt =
            ranker::render_recommendation_prompt(history, prefs, slate, variant);
        ranker::write_training_pair(pairs, prompt,
                                    ranker::letter_for(*provided.ground_truth_position));
        ++written;
    }
    out << "build-trainset: wrote " << written << " ranker pairs to "
        << cfg.ranker_pairs_path() << " (" << skipped << " users without a slated label)\n";
}

void cmd_build_trainset(const config::PipelineConfig& cfg, const CommandOptions& options,
                        std::ostream& out) {
    Manifest manifest = read_manifest(cfg.manifest_path());
    require_stage(manifest, "extract", cfg, options.force, "build-trainset");
    LoadedCorpus loaded = load_canonical(cfg);
    extraction::FeatureStore store = extraction::FeatureStore::load(cfg.features_path());
    auto cache = std::make_shared<extraction::ExtractionCache>(cfg.extraction_cache_path());
    auto extractor = make_extractor(cfg, cache);
    prefrag::PreferenceFn prefs_fn = make_prefs_fn(extractor, loaded.titles);

    prefrag::ContrastiveBuildStats stats;
    std::vector<prefrag::ContrastiveSample> samples = prefrag::build_contrastive_set(
        loaded.trainval, loaded.by_id, store, prefs_fn, cfg.window, cfg.negatives, &stats);

    std::ofstream trainset(cfg.trainset_path());
    if (!trainset) throw ValidationError("cannot write " + cfg.trainset_path());
    for (const prefrag::ContrastiveSample& s : samples) {
        ordered_json j;
        j["branch"] = prefrag::branch_name(s.branch);
        j["user_id"] = s.user_id;
        j["positive_review_id"] = s.positive_review_id;
        j["positive_item_id"] = s.positive_item_id;
        j["query"] = s.query_text;
        j["positive"] = s.positive_text;
        j["negatives"] = s.negative_texts;
        trainset << j.dump() << "\n";
    }
    update_manifest_stage(cfg, "trainset");
    out << "build-trainset: " << stats.windows << " windows -> " << samples.size()
        << " contrastive samples (" << stats.skipped_short_sequences << " short sequences, "
        << stats.skipped_missing_positive << " missing positives, "
        << stats.skipped_no_negatives << " without negatives)\n";

    if (options.ranker_pairs) write_ranker_pairs(cfg, options, loaded, out);
}

void cmd_train(const config::PipelineConfig& cfg, const CommandOptions& options,
               std::ostream& out) {
    Manifest manifest = read_manifest(cfg.manifest_path());
    require_stage(manifest, "trainset", cfg, options.force, "train");
    std::vector<prefrag::ContrastiveSample> samples = read_trainset(cfg.trainset_path());
    if (samples.empty()) {
        throw ValidationError("trainset is empty; nothing to train on");
    }
    std::unique_ptr<clients::EmbeddingClient> embedder = make_embedder(cfg);
    prefrag::EmbedStats estats;
    std::vector<prefrag::EmbeddedSample> embedded =
        prefrag::embed_samples(samples, *embedder, &estats);

    prefrag::TrainConfig tcfg;
    tcfg.epochs = cfg.epochs;
    tcfg.batch_size = cfg.batch_size;
    tcfg.step_size = cfg.step_size;
    tcfg.temperature = cfg.temperature;
    tcfg.seed = cfg.seed;
    tcfg.init_noise = cfg.init_noise;
    tcfg.validation_fraction = cfg.validation_fraction;
    prefrag::TrainResult result = prefrag::train_adapter(embedded, tcfg);
    result.adapter.fingerprint = stage_fingerprint(cfg, "train");
    result.adapter.save(cfg.adapter_path());
    update_manifest_stage(cfg, "train");

    out << "train: " << embedded.size() << " samples (" << estats.dropped_samples
        << " dropped), adapter " << result.adapter.W.rows() << "x" << result.adapter.W.cols()
        << "\n";
    out << std::fixed << std::setprecision(6);
    out << "train: initial validation loss " << result.initial_validation_loss << "\n";
    for (std::size_t e = 0; e < result.trace.size(); ++e) {
        out << "train: epoch " << e + 1 << " train loss " << result.trace[e].train_loss
            << ", validation loss " << result.trace[e].validation_loss << "\n";
    }
    out << "train: best epoch "
        << (result.best_epoch < 0 ? std::string("initializer")
                                  : std::to_string(result.best_epoch + 1))
        << ", saved " << cfg.adapter_path() << "\n";
}

void cmd_index(const config::PipelineConfig& cfg, const CommandOptions& options,
               std::ostream& out) {
    Manifest manifest = read_manifest(cfg.manifest_path());
    require_stage(manifest, "extract", cfg, options.force, "index");
    require_stage(manifest, "train", cfg, options.force, "index");
    extraction::FeatureStore store = extraction::FeatureStore::load(cfg.features_path());
    prefrag::ProjectionAdapter adapter = load_adapter_checked(cfg, options.force);
    std::unique_ptr<clients::EmbeddingClient> embedder = make_embedder(cfg);
    if (embedder->dimension() != adapter.W.cols()) {
        throw ValidationError("embedder dimension " + std::to_string(embedder->dimension()) +
                              " does not match adapter input " +
                              std::to_string(adapter.W.cols()));
    }
    prefrag::IndexBuildStats stats;
    prefrag::FeatureIndex index = prefrag::build_feature_index(store, *embedder, adapter,
                                                               &stats);
    index.set_fingerprint(stage_fingerprint(cfg, "index"));
    index.save(cfg.index_path());
    update_manifest_stage(cfg, "index");
    out << "index: " << stats.rows << " feature rows (" << stats.skipped_phrases
        << " unembeddable phrases skipped), dimension " << index.dimension() << ", saved "
        << cfg.index_path() << "\n";
}

void cmd_recommend(const config::PipelineConfig& cfg, const CommandOptions& options,
                   std::ostream& out) {
    if (options.user_id.empty()) {
        throw ValidationError("recommend requires a user id (revbrowse recommend <user>)");
    }
    Manifest manifest = read_manifest(cfg.manifest_path());
    require_stage(manifest, "index", cfg, options.force, "recommend");
    LoadedCorpus loaded = load_canonical(cfg);
    prefrag::ProjectionAdapter adapter = load_adapter_checked(cfg, options.force);
    prefrag::FeatureIndex index = load_index_checked(cfg, options.force);
    std::unique_ptr<clients::EmbeddingClient> embedder = make_embedder(cfg);
    auto cache = std::make_shared<extraction::ExtractionCache>(cfg.extraction_cache_path());
    auto extractor = make_extractor(cfg, cache);
    prefrag::PreferenceFn prefs_fn = make_prefs_fn(extractor, loaded.titles);
    ranker::CandidatePool pool(loaded.trainval_reviews);

    const corpus::InteractionSequence* seq = nullptr;
    for (const corpus::InteractionSequence& s : loaded.sequences) {
        if (s.user_id == options.user_id) {
            seq = &s;
            break;
        }
    }
    if (seq == nullptr) {
        throw ValidationError("unknown user '" + options.user_id + "'");
    }

    // Recommendation time: the whole history is usable context.
    std::set<std::string> seen_items;
    std::vector<std::string> history;
    std::vector<corpus::Review> window_reviews;
    for (const corpus::Event& e : seq->events) {
        seen_items.insert(e.item_id);
        history.push_back(extraction::title_for(loaded.titles, e.item_id));
    }
    std::size_t window = std::min<std::size_t>(static_cast<std::size_t>(cfg.history_window),
                                               seq->events.size());
    for (std::size_t i = seq->events.size() - window; i < seq->events.size(); ++i) {
        window_reviews.push_back(loaded.by_id.at(seq->events[i].review_id));
    }
    extraction::UserPreferences prefs = prefs_fn(window_reviews);
    prefrag::UserEncoding encoding;
    if (!prefs.empty()) encoding = prefrag::encode_user(prefs, *embedder, adapter);

    ranker::CandidateStrategy strategy = ranker::parse_strategy(cfg.strategy);
    std::unique_ptr<ranker::FileSlates> file_slates;
    if (strategy == ranker::CandidateStrategy::kFile) {
        if (cfg.slates.empty()) {
            throw MissingArtifactError("FILE candidate strategy needs --slates <file>");
        }
        file_slates =
            std::make_unique<ranker::FileSlates>(ranker::FileSlates::load(cfg.slates));
    }
    ranker::ProvideConfig pcfg;
    pcfg.strategy = strategy;
    pcfg.slate_size = cfg.slate_size;
    pcfg.inject_ground_truth = false;
    pcfg.seed = cfg.seed;
    ranker::ProvideResult provided = ranker::provide_candidates(
        pool, file_slates.get(), options.user_id, seen_items, std::nullopt, pcfg);
    ranker::CandidateSlate slate = ranker::assemble_slate(
        provided.item_ids, index, loaded.titles, encoding, cfg.retrieval_k);

    ranker::PromptVariant variant = ranker::parse_variant(cfg.variant);
    std::unique_ptr<clients::ChatClient> scorer = make_scorer(cfg);
    ranker::RankedResult ranked;
    if (scorer != nullptr) {
        std::string prompt =
            ranker::render_recommendation_prompt(history, prefs, slate, variant);
        ranked = ranker::score_with_verbalizer(*scorer, prompt, slate, cfg.allow_degraded);
    } else {
        ranked = ranker::mock_score(slate);
    }

    out << "recommendations for " << options.user_id << " (" << cfg.strategy << " slate of "
        << slate.candidates.size() << ", history " << seq->events.size() << " events";
    if (!prefs.like.empty()) out << ", likes: " << util::join(prefs.like, ", ");
    if (!prefs.dislike.empty()) out << ", dislikes: " << util::join(prefs.dislike, ", ");
    out << ")\n";
    if (ranked.degraded) out << "note: scored through the degraded text-parse fallback\n";
    out << std::fixed << std::setprecision(4);
    for (std::size_t r = 0; r < ranked.permutation.size(); ++r) {
        std::size_t pos = ranked.permutation[r];
        const ranker::Candidate& c = slate.candidates[pos];
        out << std::setw(2) << r + 1 << ". (" << ranker::letter_for(pos) << ") " << c.title
            << "  [" << c.item_id << "]  score " << ranked.scores[pos] << "\n";
        out << "      pros: "
            << (c.retrieved_pros.empty() ? "none" : util::join(c.retrieved_pros, ", "))
            << "\n";
        out << "      cons: "
            << (c.retrieved_cons.empty() ? "none" : util::join(c.retrieved_cons, ", "))
            << "\n";
    }
}

void cmd_evaluate(const config::PipelineConfig& cfg, const CommandOptions& options,
                  std::ostream& out) {
    Manifest manifest = read_manifest(cfg.manifest_path());
    require_stage(manifest, "index", cfg, options.force, "evaluate");
    LoadedCorpus loaded = load_canonical(cfg);
    extraction::FeatureStore store = extraction::FeatureStore::load(cfg.features_path());
    prefrag::ProjectionAdapter adapter = load_adapter_checked(cfg, options.force);
    prefrag::FeatureIndex index = load_index_checked(cfg, options.force);
    std::unique_ptr<clients::EmbeddingClient> embedder = make_embedder(cfg);
    auto cache = std::make_shared<extraction::ExtractionCache>(cfg.extraction_cache_path());
    auto extractor = make_extractor(cfg, cache);
    prefrag::PreferenceFn prefs_fn = make_prefs_fn(extractor, loaded.titles);
    ranker::CandidatePool pool(loaded.trainval_reviews);
    ranker::CandidateStrategy strategy = ranker::parse_strategy(cfg.strategy);
    std::unique_ptr<ranker::FileSlates> file_slates;
    if (strategy == ranker::CandidateStrategy::kFile) {
        if (cfg.slates.empty()) {
            throw MissingArtifactError("FILE candidate strategy needs --slates <file>");
        }
        file_slates =
            std::make_unique<ranker::FileSlates>(ranker::FileSlates::load(cfg.slates));
    }
    std::unique_ptr<clients::ChatClient> scorer = make_scorer(cfg);

    eval::EvalPipeline pipe;
    pipe.sequences = &loaded.sequences;
    pipe.reviews_by_id = &loaded.by_id;
    pipe.features = &store;
    pipe.titles = &loaded.titles;
    pipe.embedder = embedder.get();
    pipe.adapter = &adapter;
    pipe.index = &index;
    pipe.pool = &pool;
    pipe.file_slates = file_slates.get();
    pipe.scorer = scorer.get();
    pipe.extract_prefs = prefs_fn;

    eval::EvalConfig ecfg;
    ecfg.retrieval_k = cfg.retrieval_k;
    ecfg.slate_size = cfg.slate_size;
    ecfg.strategy = strategy;
    ecfg.variant = ranker::parse_variant(cfg.variant);
    ecfg.inject_ground_truth = cfg.inject_ground_truth;
    ecfg.seed = cfg.seed;
    ecfg.history_window = static_cast<std::size_t>(cfg.history_window);
    ecfg.allow_degraded = cfg.allow_degraded;
    ecfg.extra_fingerprint = stage_fingerprint(cfg, "index");

    std::vector<eval::MetricsReport> reports;
    if (options.ablation) {
        for (ranker::PromptVariant variant :
             {ranker::PromptVariant::kFull, ranker::PromptVariant::kNoPref,
              ranker::PromptVariant::kNoReviews, ranker::PromptVariant::kNoPrefNoReviews}) {
            reports.push_back(eval::run_ablation(pipe, ecfg, variant));
        }
    } else if (options.sweep) {
        reports = eval::run_topk_sweep(pipe, ecfg, {1, 2, 3});
    } else {
        reports.push_back(eval::evaluate(pipe, ecfg));
    }

    std::ofstream report_out(cfg.report_path());
    if (!report_out) throw ValidationError("cannot write " + cfg.report_path());
    for (const eval::MetricsReport& report : reports) {
        out << eval::format_report(report) << "\n";
        eval::write_report_jsonl(report_out, report);
    }
    if (reports.size() == 1) {
        std::ofstream dump(cfg.rank_dump_path());
        if (!dump) throw ValidationError("cannot write " + cfg.rank_dump_path());
        eval::write_rank_dump(dump, reports.front());
        out << "evaluate: wrote " << cfg.report_path() << " and " << cfg.rank_dump_path()
            << "\n";
    } else {
        out << "evaluate: wrote " << reports.size() << " reports to " << cfg.report_path()
            << "\n";
    }

    for (const eval::MetricsReport& report : reports) {
        double fraction = report.user_count == 0
                              ? 0.0
                              : static_cast<double>(report.skipped_count) /
                                    static_cast<double>(report.user_count);
        if (fraction > cfg.max_skipped_fraction) {
            std::ostringstream msg;
            msg << "evaluate: skipped fraction " << std::fixed << std::setprecision(3)
                << fraction << " exceeds the configured limit " << cfg.max_skipped_fraction;
            throw ValidationError(msg.str());
        }
    }
}

}  // namespace

int run_command(const std::string& command, const config::PipelineConfig& config,
                const CommandOptions& options, std::ostream& out) {
    config.validate();
    if (command == "ingest") {
        cmd_ingest(config, options, out);
    } else if (command == "extract") {
        cmd_extract(config, options, out);
    } else if (command == "build-trainset") {
        cmd_build_trainset(config, options, out);
    } else if (command == "train") {
        cmd_train(config, options, out);
    } else if (command == "index") {
        cmd_index(config, options, out);
    } else if (command == "recommend") {
        cmd_recommend(config, options, out);
    } else if (command == "evaluate") {
        cmd_evaluate(config, options, out);
    } else {
        throw ValidationError("unknown command '" + command + "'");
    }
    return 0;
}

}  // namespace revbrowse::cli
