#include "revbrowse/prefrag.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "revbrowse/errors.hpp"
#include "revbrowse/util.hpp"

namespace revbrowse::prefrag {

namespace {

// --------------------------------------------------------------------------
// Little-endian binary IO. Explicit byte shifts keep the on-disk format
// independent of host endianness.

void write_bytes(std::ostream& out, const void* data, std::size_t n) {
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    write_bytes(out, b, 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    write_bytes(out, b, 8);
}

void write_f32(std::ostream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(out, bits);
}

void write_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(out, bits);
}

void read_bytes(std::istream& in, void* data, std::size_t n, const std::string& what) {
    in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
        throw ValidationError("truncated binary file while reading " + what);
    }
}

std::uint32_t read_u32(std::istream& in, const std::string& what) {
    unsigned char b[4];
    read_bytes(in, b, 4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64(std::istream& in, const std::string& what) {
    unsigned char b[8];
    read_bytes(in, b, 8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

float read_f32(std::istream& in, const std::string& what) {
    std::uint32_t bits = read_u32(in, what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

double read_f64(std::istream& in, const std::string& what) {
    std::uint64_t bits = read_u64(in, what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void write_magic(std::ostream& out) { write_bytes(out, kIndexMagic, 4); }

void check_magic_and_version(std::istream& in, std::uint32_t expected_version,
                             const std::string& what) {
    char magic[4];
    read_bytes(in, magic, 4, what + " magic");
    if (std::memcmp(magic, kIndexMagic, 4) != 0) {
        throw ValidationError("bad magic in " + what + " (not a PRAG artifact)");
    }
    std::uint32_t version = read_u32(in, what + " version");
    if (version != expected_version) {
        throw ValidationError(what + " has unsupported format version " +
                              std::to_string(version));
    }
}

std::ifstream open_binary_for_read(const std::string& path, const std::string& what) {
    if (!std::filesystem::exists(path)) {
        throw MissingArtifactError(what + " not found: " + path);
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + what + ": " + path);
    return in;
}

std::ofstream open_binary_for_write(const std::string& path, const std::string& what) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + what + ": " + path);
    return out;
}

// Fingerprint trailer appended after the documented layout: u32 length plus
// UTF-8 bytes. Absent in files from older writers, hence the EOF probe.
void write_fingerprint(std::ostream& out, const std::string& fp) {
    write_u32(out, static_cast<std::uint32_t>(fp.size()));
    write_bytes(out, fp.data(), fp.size());
}

std::string read_fingerprint(std::istream& in, const std::string& what) {
    if (in.peek() == std::char_traits<char>::eof()) return {};
    std::uint32_t len = read_u32(in, what + " fingerprint length");
    if (len > 4096) throw ValidationError(what + " fingerprint is implausibly long");
    std::string fp(len, '\0');
    if (len > 0) read_bytes(in, fp.data(), len, what + " fingerprint");
    return fp;
}

// --------------------------------------------------------------------------

std::string join_side(const std::vector<std::string>& phrases) {
    return util::join(phrases, ", ");
}

constexpr double kZeroNormEps = 0.0;  // exact-zero check; embeddings are unit or zero

bool is_zero(const Eigen::VectorXd& v) { return v.norm() <= kZeroNormEps; }

// Shared scaffolding for loss and gradient over an index subset.
struct SampleScores {
    Eigen::VectorXd uh;                 // normalized projected query
    double un = 0.0;                    // norm of projected query
    std::vector<Eigen::VectorXd> vh;    // normalized projected answers (pos first)
    std::vector<double> vn;             // their norms
    std::vector<double> s;              // cosine scores (pos first)
};

SampleScores score_sample(const EmbeddedSample& sample, const Eigen::MatrixXd& W) {
    SampleScores out;
    Eigen::VectorXd u = W * sample.query;
    out.un = u.norm();
    if (out.un == 0.0) {
        throw ValidationError("cosine undefined: projected query has zero norm");
    }
    out.uh = u / out.un;
    std::size_t count = 1 + sample.negatives.size();
    out.vh.reserve(count);
    out.vn.reserve(count);
    out.s.reserve(count);
    auto push_answer = [&](const Eigen::VectorXd& a) {
        Eigen::VectorXd v = W * a;
        double nv = v.norm();
        if (nv == 0.0) {
            throw ValidationError("cosine undefined: projected answer has zero norm");
        }
        out.vh.push_back(v / nv);
        out.vn.push_back(nv);
        out.s.push_back(out.uh.dot(out.vh.back()));
    };
    push_answer(sample.positive);
    for (const auto& neg : sample.negatives) push_answer(neg);
    return out;
}

double group_loss(const std::vector<double>& scores, double tau) {
    double zmax = -std::numeric_limits<double>::infinity();
    for (double s : scores) zmax = std::max(zmax, s / tau);
    double sum = 0.0;
    for (double s : scores) sum += std::exp(s / tau - zmax);
    double lse = zmax + std::log(sum);
    return lse - scores[0] / tau;
}

double loss_over(const std::vector<EmbeddedSample>& samples,
                 const std::vector<std::size_t>& idx, const Eigen::MatrixXd& W, double tau) {
    if (idx.empty()) throw ValidationError("InfoNCE loss needs at least one sample");
    double total = 0.0;
    for (std::size_t i : idx) {
        if (samples[i].negatives.empty()) {
            throw ValidationError("InfoNCE sample has no negatives");
        }
        SampleScores sc = score_sample(samples[i], W);
        total += group_loss(sc.s, tau);
    }
    return total / static_cast<double>(idx.size());
}

Eigen::MatrixXd grad_over(const std::vector<EmbeddedSample>& samples,
                          const std::vector<std::size_t>& idx, const Eigen::MatrixXd& W,
                          double tau) {
    if (idx.empty()) throw ValidationError("InfoNCE gradient needs at least one sample");
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(W.rows(), W.cols());
    double inv_b = 1.0 / static_cast<double>(idx.size());
    for (std::size_t i : idx) {
        const EmbeddedSample& sample = samples[i];
        if (sample.negatives.empty()) {
            throw ValidationError("InfoNCE sample has no negatives");
        }
        SampleScores sc = score_sample(sample, W);
        // Softmax over s/tau, numerically stabilized.
        double zmax = -std::numeric_limits<double>::infinity();
        for (double s : sc.s) zmax = std::max(zmax, s / tau);
        std::vector<double> p(sc.s.size());
        double sum = 0.0;
        for (std::size_t j = 0; j < sc.s.size(); ++j) {
            p[j] = std::exp(sc.s[j] / tau - zmax);
            sum += p[j];
        }
        for (double& v : p) v /= sum;
        for (std::size_t j = 0; j < sc.s.size(); ++j) {
            double coeff = (p[j] - (j == 0 ? 1.0 : 0.0)) / tau * inv_b;
            if (coeff == 0.0) continue;
            const Eigen::VectorXd& a =
                j == 0 ? sample.positive : sample.negatives[j - 1];
            // d cos(Wq, Wa)/dW for unit vectors uh = Wq/|Wq|, vh = Wa/|Wa|:
            //   ((vh - s*uh)/|Wq|) q^T + ((uh - s*vh)/|Wa|) a^T
            G.noalias() += coeff * ((sc.vh[j] - sc.s[j] * sc.uh) / sc.un) *
                           sample.query.transpose();
            G.noalias() +=
                coeff * ((sc.uh - sc.s[j] * sc.vh[j]) / sc.vn[j]) * a.transpose();
        }
    }
    return G;
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
}

}  // namespace

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    if (a.size() != b.size()) {
        throw ValidationError("cosine undefined: dimension mismatch " +
                              std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    }
    double na = a.norm();
    double nb = b.norm();
    if (na == 0.0 || nb == 0.0) {
        throw ValidationError("cosine undefined for a zero vector");
    }
    return a.dot(b) / (na * nb);
}

const char* branch_name(Branch branch) {
    return branch == Branch::kLikePros ? "LIKE_PROS" : "DISLIKE_CONS";
}

std::vector<ContrastiveSample> build_contrastive_set(
    const std::vector<corpus::InteractionSequence>& sequences,
    const std::map<std::string, corpus::Review>& reviews_by_id,
    const extraction::FeatureStore& features, const PreferenceFn& extract_prefs, int w, int m,
    ContrastiveBuildStats* stats) {
    if (w < 3) throw ValidationError("contrastive window must cover at least 3 reviews");
    if (m < 1) throw ValidationError("contrastive negative cap must be positive");
    ContrastiveBuildStats local;
    ContrastiveBuildStats& st = stats ? *stats : local;
    std::vector<ContrastiveSample> out;

    for (const auto& seq : sequences) {
        std::size_t n = seq.events.size();
        std::size_t window_len = std::min<std::size_t>(n, static_cast<std::size_t>(w));
        if (n < 3) {
            ++st.skipped_short_sequences;
            continue;
        }
        std::size_t window_count = n >= static_cast<std::size_t>(w)
                                       ? n - static_cast<std::size_t>(w) + 1
                                       : 1;
        for (std::size_t start = 0; start < window_count; ++start) {
            ++st.windows;
            std::size_t last = start + window_len - 1;
            const corpus::Event& pos_event = seq.events[last];
            const extraction::ItemFeatures* pos_feat = features.find(pos_event.review_id);
            if (pos_feat == nullptr || pos_feat->empty()) {
                ++st.skipped_missing_positive;
                continue;
            }
            std::vector<corpus::Review> prefix;
            prefix.reserve(window_len - 1);
            for (std::size_t i = start; i < last; ++i) {
                auto it = reviews_by_id.find(seq.events[i].review_id);
                if (it == reviews_by_id.end()) {
                    throw ValidationError("review " + seq.events[i].review_id +
                                          " referenced by a sequence is missing from the corpus");
                }
                prefix.push_back(it->second);
            }
            extraction::UserPreferences prefs = extract_prefs(prefix);

            for (Branch branch : {Branch::kLikePros, Branch::kDislikeCons}) {
                const auto& query_side =
                    branch == Branch::kLikePros ? prefs.like : prefs.dislike;
                const auto& pos_side =
                    branch == Branch::kLikePros ? pos_feat->pros : pos_feat->cons;
                if (query_side.empty() || pos_side.empty()) continue;

                ContrastiveSample sample;
                sample.branch = branch;
                sample.query_text = join_side(query_side);
                sample.positive_text = join_side(pos_side);
                sample.user_id = seq.user_id;
                sample.positive_review_id = pos_event.review_id;
                sample.positive_item_id = pos_event.item_id;

                std::string pos_norm = util::normalize_phrase(sample.positive_text);
                const std::vector<std::string>* peers =
                    features.reviews_for_item(pos_event.item_id);
                if (peers != nullptr) {
                    for (const std::string& rid : *peers) {
                        if (static_cast<int>(sample.negative_texts.size()) >= m) break;
                        if (rid == pos_event.review_id) continue;
                        const std::string* owner = features.user_of(rid);
                        if (owner != nullptr && *owner == seq.user_id) continue;
                        const extraction::ItemFeatures* nf = features.find(rid);
                        if (nf == nullptr) continue;
                        const auto& neg_side =
                            branch == Branch::kLikePros ? nf->pros : nf->cons;
                        if (neg_side.empty()) continue;
                        std::string text = join_side(neg_side);
                        if (util::normalize_phrase(text) == pos_norm) continue;
                        sample.negative_texts.push_back(std::move(text));
                    }
                }
                if (sample.negative_texts.empty()) {
                    ++st.skipped_no_negatives;
                    continue;
                }
                out.push_back(std::move(sample));
                ++st.samples;
            }
        }
    }
    return out;
}

std::vector<EmbeddedSample> embed_samples(const std::vector<ContrastiveSample>& samples,
                                          clients::EmbeddingClient& embedder,
                                          EmbedStats* stats) {
    EmbedStats local;
    EmbedStats& st = stats ? *stats : local;

    std::vector<std::string> texts;
    for (const auto& s : samples) {
        texts.push_back(s.query_text);
        texts.push_back(s.positive_text);
        texts.insert(texts.end(), s.negative_texts.begin(), s.negative_texts.end());
    }
    std::vector<Eigen::VectorXd> vectors = embedder.embed(texts);

    std::vector<EmbeddedSample> out;
    std::size_t cursor = 0;
    for (const auto& s : samples) {
        EmbeddedSample es;
        es.query = vectors[cursor++];
        es.positive = vectors[cursor++];
        std::vector<Eigen::VectorXd> negs;
        for (std::size_t j = 0; j < s.negative_texts.size(); ++j) {
            Eigen::VectorXd v = vectors[cursor++];
            if (is_zero(v)) {
                ++st.dropped_zero_negatives;
                continue;
            }
            negs.push_back(std::move(v));
        }
        if (is_zero(es.query) || is_zero(es.positive) || negs.empty()) {
            ++st.dropped_samples;
            continue;
        }
        es.negatives = std::move(negs);
        out.push_back(std::move(es));
    }
    return out;
}

double infonce_loss_from_scores(const std::vector<std::vector<double>>& group_scores,
                                double tau) {
    if (tau <= 0.0) throw ValidationError("InfoNCE temperature must be positive");
    if (group_scores.empty()) throw ValidationError("InfoNCE loss needs at least one group");
    double total = 0.0;
    for (const auto& scores : group_scores) {
        if (scores.size() < 2) {
            throw ValidationError("InfoNCE score group needs a positive and >= 1 negative");
        }
        total += group_loss(scores, tau);
    }
    return total / static_cast<double>(group_scores.size());
}

double infonce_loss(const std::vector<EmbeddedSample>& batch, const Eigen::MatrixXd& W,
                    double tau) {
    if (tau <= 0.0) throw ValidationError("InfoNCE temperature must be positive");
    return loss_over(batch, all_indices(batch.size()), W, tau);
}

Eigen::MatrixXd infonce_grad(const std::vector<EmbeddedSample>& batch, const Eigen::MatrixXd& W,
                             double tau) {
    if (tau <= 0.0) throw ValidationError("InfoNCE temperature must be positive");
    return grad_over(batch, all_indices(batch.size()), W, tau);
}

ProjectionAdapter ProjectionAdapter::initialize(int rows, int cols, std::uint64_t seed,
                                                double noise_scale) {
    if (rows <= 0 || cols <= 0) {
        throw ValidationError("adapter dimensions must be positive");
    }
    ProjectionAdapter adapter;
    adapter.seed = seed;
    adapter.W = Eigen::MatrixXd::Zero(rows, cols);
    for (int i = 0; i < std::min(rows, cols); ++i) adapter.W(i, i) = 1.0;
    if (noise_scale != 0.0) {
        util::Rng rng(seed);
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < cols; ++j) {
                adapter.W(i, j) += noise_scale * rng.normal();
            }
        }
    }
    return adapter;
}

void ProjectionAdapter::save(const std::string& path) const {
    std::ofstream out = open_binary_for_write(path, "adapter file");
    write_magic(out);
    write_u32(out, kAdapterFormatVersion);
    write_u32(out, static_cast<std::uint32_t>(W.rows()));
    write_u32(out, static_cast<std::uint32_t>(W.cols()));
    write_u64(out, seed);
    write_u32(out, static_cast<std::uint32_t>(epochs));
    write_u32(out, static_cast<std::uint32_t>(batch_size));
    write_f64(out, step_size);
    write_f64(out, temperature);
    for (Eigen::Index i = 0; i < W.rows(); ++i) {
        for (Eigen::Index j = 0; j < W.cols(); ++j) {
            write_f32(out, static_cast<float>(W(i, j)));
        }
    }
    write_fingerprint(out, fingerprint);
    if (!out) throw ValidationError("failed writing adapter file: " + path);
}

ProjectionAdapter ProjectionAdapter::load(const std::string& path) {
    std::ifstream in = open_binary_for_read(path, "adapter file");
    check_magic_and_version(in, kAdapterFormatVersion, "adapter file");
    std::uint32_t rows = read_u32(in, "adapter rows");
    std::uint32_t cols = read_u32(in, "adapter cols");
    if (rows == 0 || cols == 0 || rows > 65536 || cols > 65536) {
        throw ValidationError("adapter file has implausible dimensions");
    }
    ProjectionAdapter adapter;
    adapter.seed = read_u64(in, "adapter seed");
    adapter.epochs = static_cast<int>(read_u32(in, "adapter epochs"));
    adapter.batch_size = static_cast<int>(read_u32(in, "adapter batch size"));
    adapter.step_size = read_f64(in, "adapter step size");
    adapter.temperature = read_f64(in, "adapter temperature");
    adapter.W = Eigen::MatrixXd(rows, cols);
    for (std::uint32_t i = 0; i < rows; ++i) {
        for (std::uint32_t j = 0; j < cols; ++j) {
            adapter.W(i, j) = static_cast<double>(read_f32(in, "adapter weights"));
        }
    }
    adapter.fingerprint = read_fingerprint(in, "adapter file");
    return adapter;
}

TrainResult train_adapter(const std::vector<EmbeddedSample>& samples, const TrainConfig& config) {
    if (samples.empty()) throw ValidationError("cannot train adapter on an empty sample set");
    if (config.epochs < 0 || config.epochs > 5) {
        throw ValidationError("adapter training is capped at 5 epochs (got " +
                              std::to_string(config.epochs) + ")");
    }
    if (config.batch_size < 1) throw ValidationError("batch size must be positive");
    if (config.step_size <= 0.0) throw ValidationError("step size must be positive");
    if (config.temperature <= 0.0) throw ValidationError("temperature must be positive");
    if (config.validation_fraction < 0.0 || config.validation_fraction > 0.5) {
        throw ValidationError("validation fraction must lie in [0, 0.5]");
    }

    Eigen::Index d = samples[0].query.size();
    for (const auto& s : samples) {
        if (s.query.size() != d || s.positive.size() != d) {
            throw ValidationError("inconsistent embedding dimensions in training set");
        }
        for (const auto& n : s.negatives) {
            if (n.size() != d) {
                throw ValidationError("inconsistent embedding dimensions in training set");
            }
        }
        if (s.negatives.empty()) {
            throw ValidationError("training sample has no negatives");
        }
    }

    int rows = config.output_dim > 0 ? config.output_dim : static_cast<int>(d);
    ProjectionAdapter adapter = ProjectionAdapter::initialize(
        rows, static_cast<int>(d), config.seed, config.init_noise);
    adapter.epochs = config.epochs;
    adapter.batch_size = config.batch_size;
    adapter.step_size = config.step_size;
    adapter.temperature = config.temperature;

    util::Rng rng(config.seed);
    std::vector<std::size_t> order = all_indices(samples.size());
    rng.shuffle(order);
    std::size_t val_count = static_cast<std::size_t>(
        std::llround(config.validation_fraction * static_cast<double>(samples.size())));
    val_count = std::min(val_count, samples.size() - 1);
    std::vector<std::size_t> train_idx(order.begin(), order.end() - val_count);
    std::vector<std::size_t> val_idx(order.end() - val_count, order.end());

    auto validation_loss = [&](const Eigen::MatrixXd& W) {
        return loss_over(samples, val_idx.empty() ? train_idx : val_idx, W,
                         config.temperature);
    };

    TrainResult result;
    result.initial_validation_loss = validation_loss(adapter.W);
    Eigen::MatrixXd best_w = adapter.W;
    double best_val = result.initial_validation_loss;
    result.best_epoch = -1;

    Eigen::MatrixXd w = adapter.W;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(train_idx);
        std::size_t batches =
            (train_idx.size() + config.batch_size - 1) / config.batch_size;
        for (std::size_t b = 0; b < batches; ++b) {
            std::size_t lo = b * static_cast<std::size_t>(config.batch_size);
            std::size_t hi =
                std::min(lo + static_cast<std::size_t>(config.batch_size), train_idx.size());
            std::vector<std::size_t> batch(train_idx.begin() + lo, train_idx.begin() + hi);
            Eigen::MatrixXd g = grad_over(samples, batch, w, config.temperature);
            w.noalias() -= config.step_size * g;
            if (!w.allFinite()) {
                throw ValidationError(
                    "adapter training aborted: non-finite weights after epoch " +
                    std::to_string(epoch) + ", batch " + std::to_string(b) +
                    " (step size " + std::to_string(config.step_size) + ")");
            }
        }
        EpochTrace trace;
        trace.train_loss = loss_over(samples, train_idx, w, config.temperature);
        trace.validation_loss =
            val_idx.empty() ? trace.train_loss
                            : loss_over(samples, val_idx, w, config.temperature);
        if (!std::isfinite(trace.train_loss) || !std::isfinite(trace.validation_loss)) {
            throw ValidationError("adapter training aborted: non-finite loss after epoch " +
                                  std::to_string(epoch));
        }
        result.trace.push_back(trace);
        if (trace.validation_loss < best_val) {
            best_val = trace.validation_loss;
            best_w = w;
            result.best_epoch = epoch;
        }
    }

    adapter.W = best_w;
    result.adapter = std::move(adapter);
    return result;
}

std::size_t FeatureIndex::total_rows() const {
    std::size_t total = 0;
    for (const auto& [item, group] : pros_) total += group.texts.size();
    for (const auto& [item, group] : cons_) total += group.texts.size();
    return total;
}

const IndexGroup* FeatureIndex::pros(const std::string& item_id) const {
    auto it = pros_.find(item_id);
    return it == pros_.end() ? nullptr : &it->second;
}

const IndexGroup* FeatureIndex::cons(const std::string& item_id) const {
    auto it = cons_.find(item_id);
    return it == cons_.end() ? nullptr : &it->second;
}

void FeatureIndex::add_row(const std::string& item_id, bool is_pro, const Eigen::VectorXd& row,
                           const std::string& text) {
    if (dimension_ == 0) {
        dimension_ = static_cast<int>(row.size());
    } else if (row.size() != dimension_) {
        throw ValidationError("index row dimension mismatch");
    }
    IndexGroup& group = is_pro ? pros_[item_id] : cons_[item_id];
    Eigen::Index n = group.rows.rows();
    group.rows.conservativeResize(n + 1, dimension_);
    group.rows.row(n) = row.transpose();
    group.texts.push_back(text);
}

void FeatureIndex::save(const std::string& path) const {
    std::ofstream out = open_binary_for_write(path, "feature index");
    write_magic(out);
    write_u32(out, kIndexFormatVersion);
    write_u32(out, static_cast<std::uint32_t>(dimension_));
    write_u64(out, total_rows());

    // Rows first, in a fixed traversal order: pros groups by item id, then
    // cons groups, rows in insertion order.
    auto for_each_row = [&](auto&& fn) {
        for (const auto& [item, group] : pros_) {
            for (std::size_t r = 0; r < group.texts.size(); ++r) fn(item, true, group, r);
        }
        for (const auto& [item, group] : cons_) {
            for (std::size_t r = 0; r < group.texts.size(); ++r) fn(item, false, group, r);
        }
    };

    for_each_row([&](const std::string&, bool, const IndexGroup& group, std::size_t r) {
        for (int j = 0; j < dimension_; ++j) {
            write_f32(out, static_cast<float>(group.rows(static_cast<Eigen::Index>(r), j)));
        }
    });

    // Offset-indexed UTF-8 text table: one shared blob, then per-row records
    // pointing into it. Item ids are deduplicated within the blob.
    std::string blob;
    std::map<std::string, std::pair<std::uint64_t, std::uint32_t>> interned;
    auto intern = [&](const std::string& s) {
        auto it = interned.find(s);
        if (it != interned.end()) return it->second;
        std::pair<std::uint64_t, std::uint32_t> span{blob.size(),
                                                     static_cast<std::uint32_t>(s.size())};
        blob += s;
        interned.emplace(s, span);
        return span;
    };

    struct Record {
        std::uint8_t polarity;
        std::pair<std::uint64_t, std::uint32_t> item;
        std::pair<std::uint64_t, std::uint32_t> text;
    };
    std::vector<Record> records;
    for_each_row([&](const std::string& item, bool is_pro, const IndexGroup& group,
                     std::size_t r) {
        records.push_back({static_cast<std::uint8_t>(is_pro ? 0 : 1), intern(item),
                           intern(group.texts[r])});
    });

    write_u64(out, blob.size());
    write_bytes(out, blob.data(), blob.size());
    for (const Record& rec : records) {
        write_bytes(out, &rec.polarity, 1);
        write_u64(out, rec.item.first);
        write_u32(out, rec.item.second);
        write_u64(out, rec.text.first);
        write_u32(out, rec.text.second);
    }
    write_fingerprint(out, fingerprint_);
    if (!out) throw ValidationError("failed writing feature index: " + path);
}

FeatureIndex FeatureIndex::load(const std::string& path) {
    std::ifstream in = open_binary_for_read(path, "feature index");
    check_magic_and_version(in, kIndexFormatVersion, "feature index");
    std::uint32_t dim = read_u32(in, "index dimension");
    std::uint64_t row_count = read_u64(in, "index row count");
    if (dim == 0 || dim > 65536) {
        throw ValidationError("feature index has implausible dimension");
    }

    Eigen::MatrixXd rows(static_cast<Eigen::Index>(row_count), dim);
    for (std::uint64_t r = 0; r < row_count; ++r) {
        for (std::uint32_t j = 0; j < dim; ++j) {
            rows(static_cast<Eigen::Index>(r), j) =
                static_cast<double>(read_f32(in, "index rows"));
        }
    }

    std::uint64_t blob_len = read_u64(in, "index text blob length");
    std::string blob(blob_len, '\0');
    if (blob_len > 0) read_bytes(in, blob.data(), blob_len, "index text blob");

    FeatureIndex index(static_cast<int>(dim));
    auto slice = [&](std::uint64_t off, std::uint32_t len, const char* what) {
        if (off + len > blob.size()) {
            throw ValidationError(std::string("feature index ") + what +
                                  " offset out of range");
        }
        return blob.substr(off, len);
    };
    for (std::uint64_t r = 0; r < row_count; ++r) {
        std::uint8_t polarity;
        read_bytes(in, &polarity, 1, "index record polarity");
        std::uint64_t item_off = read_u64(in, "index record item offset");
        std::uint32_t item_len = read_u32(in, "index record item length");
        std::uint64_t text_off = read_u64(in, "index record text offset");
        std::uint32_t text_len = read_u32(in, "index record text length");
        if (polarity > 1) throw ValidationError("feature index polarity byte out of range");
        std::string item = slice(item_off, item_len, "item id");
        std::string text = slice(text_off, text_len, "phrase");
        // Re-normalize to absorb float32 quantization; rows are unit by
        // construction so this is a tiny correction.
        Eigen::VectorXd row = rows.row(static_cast<Eigen::Index>(r)).transpose();
        double n = row.norm();
        if (n == 0.0) throw ValidationError("feature index contains a zero row");
        index.add_row(item, polarity == 0, row / n, text);
    }
    index.set_fingerprint(read_fingerprint(in, "feature index"));
    return index;
}

FeatureIndex build_feature_index(const extraction::FeatureStore& features,
                                 clients::EmbeddingClient& embedder,
                                 const ProjectionAdapter& adapter, IndexBuildStats* stats) {
    IndexBuildStats local;
    IndexBuildStats& st = stats ? *stats : local;

    struct Job {
        std::string item_id;
        bool is_pro;
        std::string phrase;
    };
    std::vector<Job> jobs;
    for (const auto& [item_id, review_ids] : features.items()) {
        for (const std::string& rid : review_ids) {
            const extraction::ItemFeatures* f = features.find(rid);
            if (f == nullptr) continue;
            for (const std::string& p : f->pros) jobs.push_back({item_id, true, p});
            for (const std::string& p : f->cons) jobs.push_back({item_id, false, p});
        }
    }

    std::vector<std::string> texts;
    texts.reserve(jobs.size());
    for (const Job& j : jobs) texts.push_back(j.phrase);
    std::vector<Eigen::VectorXd> embedded = embedder.embed(texts);

    FeatureIndex index(static_cast<int>(adapter.W.rows()));
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (is_zero(embedded[i])) {
            ++st.skipped_phrases;
            continue;
        }
        Eigen::VectorXd projected = adapter.project(embedded[i]);
        double n = projected.norm();
        if (n == 0.0) {
            ++st.skipped_phrases;
            continue;
        }
        index.add_row(jobs[i].item_id, jobs[i].is_pro, projected / n, jobs[i].phrase);
        ++st.rows;
    }
    return index;
}

UserEncoding encode_user(const extraction::UserPreferences& prefs,
                         clients::EmbeddingClient& embedder, const ProjectionAdapter& adapter) {
    if (prefs.empty()) {
        throw ValidationError("cannot encode user " + prefs.user_id +
                              ": no preference phrases on either side");
    }
    auto encode_side = [&](const std::vector<std::string>& side)
        -> std::optional<Eigen::VectorXd> {
        if (side.empty()) return std::nullopt;
        Eigen::VectorXd e = embedder.embed({join_side(side)}).front();
        if (is_zero(e)) return std::nullopt;
        Eigen::VectorXd projected = adapter.project(e);
        double n = projected.norm();
        if (n == 0.0) return std::nullopt;
        return projected / n;
    };
    UserEncoding enc;
    enc.like = encode_side(prefs.like);
    enc.dislike = encode_side(prefs.dislike);
    if (!enc.like && !enc.dislike) {
        throw ValidationError("cannot encode user " + prefs.user_id +
                              ": all preference sides embedded to zero");
    }
    return enc;
}

std::vector<ScoredPhrase> retrieve_topk(const Eigen::VectorXd& query, const IndexGroup& group,
                                        int k) {
    if (k < 0) throw ValidationError("retrieval k must be non-negative");
    if (k == 0 || group.texts.empty()) return {};
    double qn = query.norm();
    if (qn == 0.0) throw ValidationError("cannot retrieve with a zero query vector");
    if (group.rows.cols() != query.size()) {
        throw ValidationError("retrieval query dimension mismatch");
    }
    Eigen::VectorXd qh = query / qn;
    Eigen::VectorXd scores = group.rows * qh;  // rows are unit-norm

    std::vector<std::size_t> order = all_indices(group.texts.size());
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores(static_cast<Eigen::Index>(a)) > scores(static_cast<Eigen::Index>(b));
    });
    std::size_t take = std::min<std::size_t>(order.size(), static_cast<std::size_t>(k));
    std::vector<ScoredPhrase> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        out.push_back({group.texts[order[i]], scores(static_cast<Eigen::Index>(order[i]))});
    }
    return out;
}

}  // namespace revbrowse::prefrag
