#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "revbrowse/clients.hpp"
#include "revbrowse/corpus.hpp"
#include "revbrowse/extraction.hpp"

namespace revbrowse::prefrag {

// Cosine similarity of two non-zero vectors; zero operands are a domain error.
double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

enum class Branch { kLikePros, kDislikeCons };

const char* branch_name(Branch branch);

// One query with one positive and up to m negatives, all as raw text.
// The answer unit is a review's feature side joined into one string.
struct ContrastiveSample {
    Branch branch = Branch::kLikePros;
    std::string query_text;
    std::string positive_text;
    std::vector<std::string> negative_texts;
    std::string user_id;
    std::string positive_review_id;
    std::string positive_item_id;
};

struct ContrastiveBuildStats {
    std::size_t windows = 0;
    std::size_t samples = 0;
    std::size_t skipped_short_sequences = 0;   // fewer than 3 reviews
    std::size_t skipped_missing_positive = 0;  // feature store lacks the last review
    std::size_t skipped_no_negatives = 0;      // all negatives were duplicates / absent
};

// Extracts window-prefix preferences; wired either to the mock rules or to a
// chat-backed Extractor by the caller.
using PreferenceFn =
    std::function<extraction::UserPreferences(const std::vector<corpus::Review>&)>;

// Slides a window of w reviews over each sequence (stride 1). The query comes
// from preferences over the first w-1 reviews, the positive from the last
// review's features, and negatives from other users' reviews of the same
// item, minus normalized duplicates of the positive, capped at m. Sequences
// shorter than w yield one whole-sequence window when they have >= 3 reviews.
std::vector<ContrastiveSample> build_contrastive_set(
    const std::vector<corpus::InteractionSequence>& sequences,
    const std::map<std::string, corpus::Review>& reviews_by_id,
    const extraction::FeatureStore& features, const PreferenceFn& extract_prefs, int w = 20,
    int m = 40, ContrastiveBuildStats* stats = nullptr);

// A sample with its texts replaced by frozen embeddings.
struct EmbeddedSample {
    Eigen::VectorXd query;
    Eigen::VectorXd positive;
    std::vector<Eigen::VectorXd> negatives;
};

struct EmbedStats {
    std::size_t dropped_samples = 0;          // zero query/positive, or no negatives left
    std::size_t dropped_zero_negatives = 0;   // individual zero-embedding negatives
};

std::vector<EmbeddedSample> embed_samples(const std::vector<ContrastiveSample>& samples,
                                          clients::EmbeddingClient& embedder,
                                          EmbedStats* stats = nullptr);

// InfoNCE over adapter-projected cosine scores:
//   L = -(1/B) sum_i log( exp(s_i0/tau) / sum_j exp(s_ij/tau) )
// where s_i0 is the positive score. Exposed separately from the embedding
// plumbing so the log-softmax identities are directly testable.
double infonce_loss_from_scores(const std::vector<std::vector<double>>& group_scores,
                                double tau = 1.0);

double infonce_loss(const std::vector<EmbeddedSample>& batch, const Eigen::MatrixXd& W,
                    double tau = 1.0);

// Exact analytic gradient dL/dW through projection, L2 normalization and the
// log-softmax.
Eigen::MatrixXd infonce_grad(const std::vector<EmbeddedSample>& batch, const Eigen::MatrixXd& W,
                             double tau = 1.0);

// Trainable shared projection applied to both towers.
struct ProjectionAdapter {
    Eigen::MatrixXd W;
    std::uint64_t seed = 0;
    int epochs = 0;
    int batch_size = 0;
    double step_size = 0.0;
    double temperature = 1.0;
    std::string fingerprint;  // config fingerprint of the producing run

    Eigen::VectorXd project(const Eigen::VectorXd& v) const { return W * v; }

    // Identity plus small seeded Gaussian noise.
    static ProjectionAdapter initialize(int rows, int cols, std::uint64_t seed,
                                        double noise_scale);

    void save(const std::string& path) const;
    static ProjectionAdapter load(const std::string& path);
};

struct TrainConfig {
    int epochs = 5;  // hard maximum 5
    int batch_size = 8;
    double step_size = 0.05;
    double temperature = 1.0;
    std::uint64_t seed = 42;
    double init_noise = 0.01;
    double validation_fraction = 0.1;
    int output_dim = 0;  // 0: square (d' = d)
};

struct EpochTrace {
    double train_loss = 0.0;
    double validation_loss = 0.0;
};

struct TrainResult {
    ProjectionAdapter adapter;  // best-validation weights
    std::vector<EpochTrace> trace;
    int best_epoch = -1;  // -1 means the initialization was never beaten
    double initial_validation_loss = 0.0;
};

// Deterministic mini-batch gradient descent; keeps the weights of the epoch
// with the lowest validation loss (the untouched initialization counts as the
// baseline). Non-finite losses abort with diagnostics.
TrainResult train_adapter(const std::vector<EmbeddedSample>& samples, const TrainConfig& config);

// Rows are projected, L2-normalized feature embeddings for one (item,
// polarity) group; texts are the source phrases, row-parallel.
struct IndexGroup {
    Eigen::MatrixXd rows;  // n x d'
    std::vector<std::string> texts;
};

class FeatureIndex {
  public:
    explicit FeatureIndex(int dimension = 0) : dimension_(dimension) {}

    int dimension() const { return dimension_; }
    std::size_t total_rows() const;
    const IndexGroup* pros(const std::string& item_id) const;
    const IndexGroup* cons(const std::string& item_id) const;
    const std::map<std::string, IndexGroup>& all_pros() const { return pros_; }
    const std::map<std::string, IndexGroup>& all_cons() const { return cons_; }
    const std::string& fingerprint() const { return fingerprint_; }
    void set_fingerprint(std::string fp) { fingerprint_ = std::move(fp); }

    void add_row(const std::string& item_id, bool is_pro, const Eigen::VectorXd& row,
                 const std::string& text);

    // Binary little-endian format; see kIndexMagic.
    void save(const std::string& path) const;
    static FeatureIndex load(const std::string& path);

  private:
    int dimension_;
    std::map<std::string, IndexGroup> pros_;
    std::map<std::string, IndexGroup> cons_;
    std::string fingerprint_;
};

inline constexpr char kIndexMagic[4] = {'P', 'R', 'A', 'G'};
inline constexpr std::uint32_t kIndexFormatVersion = 1;
inline constexpr std::uint32_t kAdapterFormatVersion = 1;

struct IndexBuildStats {
    std::size_t rows = 0;
    std::size_t skipped_phrases = 0;  // zero embedding or degenerate projection
};

// Embeds, projects and normalizes every stored phrase, grouped by item and
// polarity. The adapter is treated as frozen.
FeatureIndex build_feature_index(const extraction::FeatureStore& features,
                                 clients::EmbeddingClient& embedder,
                                 const ProjectionAdapter& adapter,
                                 IndexBuildStats* stats = nullptr);

// Preference-side encodings; a side with no phrases yields no vector.
struct UserEncoding {
    std::optional<Eigen::VectorXd> like;
    std::optional<Eigen::VectorXd> dislike;
};

UserEncoding encode_user(const extraction::UserPreferences& prefs,
                         clients::EmbeddingClient& embedder, const ProjectionAdapter& adapter);

struct ScoredPhrase {
    std::string text;
    double score = 0.0;
};

// Top-K rows by cosine against a unit query, ties broken by insertion order.
std::vector<ScoredPhrase> retrieve_topk(const Eigen::VectorXd& query, const IndexGroup& group,
                                        int k = 2);

}  // namespace revbrowse::prefrag
