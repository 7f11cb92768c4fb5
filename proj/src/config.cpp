#include "revbrowse/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

#include "revbrowse/errors.hpp"
#include "revbrowse/util.hpp"

namespace revbrowse::config {

namespace {

struct Field {
    std::string section;
    std::string key;
    std::function<std::string(const PipelineConfig&)> get;
    std::function<void(PipelineConfig&, const std::string&)> set;
};

std::string bool_to_string(bool v) { return v ? "true" : "false"; }

bool parse_bool(const std::string& raw, const std::string& key) {
    std::string v = util::lower(util::trim(raw));
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ValidationError("config key '" + key + "' expects a boolean, got '" + raw + "'");
}

int parse_int(const std::string& raw, const std::string& key) {
    try {
        std::size_t used = 0;
        int v = std::stoi(util::trim(raw), &used);
        if (used != util::trim(raw).size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ValidationError("config key '" + key + "' expects an integer, got '" + raw + "'");
    }
}

std::uint64_t parse_u64(const std::string& raw, const std::string& key) {
    try {
        std::size_t used = 0;
        unsigned long long v = std::stoull(util::trim(raw), &used);
        if (used != util::trim(raw).size()) throw std::invalid_argument("trailing");
        return static_cast<std::uint64_t>(v);
    } catch (const std::exception&) {
        throw ValidationError("config key '" + key + "' expects an unsigned integer, got '" +
                              raw + "'");
    }
}

double parse_double(const std::string& raw, const std::string& key) {
    try {
        std::size_t used = 0;
        double v = std::stod(util::trim(raw), &used);
        if (used != util::trim(raw).size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ValidationError("config key '" + key + "' expects a number, got '" + raw + "'");
    }
}

std::string format_double(double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}

#define REV_STRING_FIELD(section, name, member)                               \
    Field {                                                                   \
        section, name, [](const PipelineConfig& c) { return c.member; },      \
            [](PipelineConfig& c, const std::string& v) { c.member = util::trim(v); } \
    }
#define REV_INT_FIELD(section, name, member)                                  \
    Field {                                                                   \
        section, name,                                                        \
            [](const PipelineConfig& c) { return std::to_string(c.member); }, \
            [](PipelineConfig& c, const std::string& v) { c.member = parse_int(v, name); } \
    }
#define REV_U64_FIELD(section, name, member)                                  \
    Field {                                                                   \
        section, name,                                                        \
            [](const PipelineConfig& c) { return std::to_string(c.member); }, \
            [](PipelineConfig& c, const std::string& v) { c.member = parse_u64(v, name); } \
    }
#define REV_DOUBLE_FIELD(section, name, member)                               \
    Field {                                                                   \
        section, name,                                                        \
            [](const PipelineConfig& c) { return format_double(c.member); },  \
            [](PipelineConfig& c, const std::string& v) { c.member = parse_double(v, name); } \
    }
#define REV_BOOL_FIELD(section, name, member)                                 \
    Field {                                                                   \
        section, name,                                                        \
            [](const PipelineConfig& c) { return bool_to_string(c.member); }, \
            [](PipelineConfig& c, const std::string& v) { c.member = parse_bool(v, name); } \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        REV_STRING_FIELD("paths", "corpus", corpus),
        REV_STRING_FIELD("paths", "meta", meta),
        REV_STRING_FIELD("paths", "workdir", workdir),
        REV_STRING_FIELD("paths", "slates", slates),
        REV_STRING_FIELD("clients", "api_base", api_base),
        REV_STRING_FIELD("clients", "chat_model", chat_model),
        REV_STRING_FIELD("clients", "embed_model", embed_model),
        REV_STRING_FIELD("clients", "transcript", transcript),
        REV_INT_FIELD("clients", "concurrency", concurrency),
        REV_INT_FIELD("clients", "retries", retries),
        REV_INT_FIELD("clients", "timeout_seconds", timeout_seconds),
        REV_INT_FIELD("hyperparameters", "window", window),
        REV_INT_FIELD("hyperparameters", "negatives", negatives),
        REV_INT_FIELD("hyperparameters", "retrieval_k", retrieval_k),
        REV_INT_FIELD("hyperparameters", "slate_size", slate_size),
        REV_DOUBLE_FIELD("hyperparameters", "temperature", temperature),
        REV_INT_FIELD("hyperparameters", "epochs", epochs),
        REV_INT_FIELD("hyperparameters", "batch_size", batch_size),
        REV_DOUBLE_FIELD("hyperparameters", "step_size", step_size),
        REV_U64_FIELD("hyperparameters", "seed", seed),
        REV_INT_FIELD("hyperparameters", "kcore", kcore),
        REV_INT_FIELD("hyperparameters", "embed_dim", embed_dim),
        REV_DOUBLE_FIELD("hyperparameters", "init_noise", init_noise),
        REV_DOUBLE_FIELD("hyperparameters", "validation_fraction", validation_fraction),
        REV_INT_FIELD("hyperparameters", "history_window", history_window),
        REV_DOUBLE_FIELD("hyperparameters", "max_skipped_fraction", max_skipped_fraction),
        REV_BOOL_FIELD("modes", "mock_extraction", mock_extraction),
        REV_BOOL_FIELD("modes", "mock_embedding", mock_embedding),
        REV_BOOL_FIELD("modes", "mock_scoring", mock_scoring),
        REV_STRING_FIELD("modes", "variant", variant),
        REV_STRING_FIELD("modes", "strategy", strategy),
        REV_BOOL_FIELD("modes", "inject_ground_truth", inject_ground_truth),
        REV_BOOL_FIELD("modes", "allow_degraded", allow_degraded),
    };
    return table;
}

#undef REV_STRING_FIELD
#undef REV_INT_FIELD
#undef REV_U64_FIELD
#undef REV_DOUBLE_FIELD
#undef REV_BOOL_FIELD

void check_range(bool ok, const std::string& what) {
    if (!ok) throw ValidationError("config: " + what);
}

}  // namespace

void PipelineConfig::validate() const {
    check_range(!workdir.empty(), "workdir must not be empty");
    check_range(window >= 3, "window must be >= 3");
    check_range(negatives >= 1, "negatives must be >= 1");
    check_range(retrieval_k >= 0, "retrieval_k must be >= 0");
    check_range(slate_size >= 2 && slate_size <= 26, "slate_size must lie in [2, 26]");
    check_range(temperature > 0.0, "temperature must be positive");
    check_range(epochs >= 0 && epochs <= 5, "epochs must lie in [0, 5]");
    check_range(batch_size >= 1, "batch_size must be >= 1");
    check_range(step_size > 0.0, "step_size must be positive");
    check_range(kcore >= 1, "kcore must be >= 1");
    check_range(embed_dim >= 1, "embed_dim must be >= 1");
    check_range(init_noise >= 0.0, "init_noise must be >= 0");
    check_range(validation_fraction >= 0.0 && validation_fraction <= 0.5,
                "validation_fraction must lie in [0, 0.5]");
    check_range(history_window >= 1, "history_window must be >= 1");
    check_range(max_skipped_fraction >= 0.0 && max_skipped_fraction <= 1.0,
                "max_skipped_fraction must lie in [0, 1]");
    check_range(concurrency >= 1, "concurrency must be >= 1");
    check_range(retries >= 0, "retries must be >= 0");
    check_range(timeout_seconds >= 1, "timeout_seconds must be >= 1");
    // Enum-like strings fail fast here rather than mid-pipeline.
    std::string v = util::lower(variant);
    check_range(v == "full" || v == "no_pref" || v == "no_reviews" ||
                    v == "no_pref_no_reviews",
                "variant must be FULL, NO_PREF, NO_REVIEWS or NO_PREF_NO_REVIEWS");
    std::string s = util::lower(strategy);
    check_range(s == "popularity" || s == "recency" || s == "file",
                "strategy must be POPULARITY, RECENCY or FILE");
}

std::string serialize_config(const PipelineConfig& config) {
    std::ostringstream out;
    std::string current_section;
    for (const Field& field : fields()) {
        if (field.section != current_section) {
            if (!current_section.empty()) out << "\n";
            out << "[" << field.section << "]\n";
            current_section = field.section;
        }
        out << field.key << " = " << field.get(config) << "\n";
    }
    return out.str();
}

std::string PipelineConfig::fingerprint() const {
    return util::to_hex(util::fnv1a64(serialize_config(*this)));
}

void apply_config_text(PipelineConfig& config, const std::string& text,
                       const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    std::string section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string trimmed = util::trim(line);
        if (trimmed.empty() || trimmed[0] == '#' || trimmed[0] == ';') continue;
        std::string where = origin + ":" + std::to_string(lineno);
        if (trimmed.front() == '[') {
            if (trimmed.back() != ']') {
                throw ValidationError("unterminated section header at " + where);
            }
            section = util::trim(trimmed.substr(1, trimmed.size() - 2));
            bool known = false;
            for (const Field& field : fields()) {
                if (field.section == section) {
                    known = true;
                    break;
                }
            }
            if (!known) {
                throw ValidationError("unknown config section '" + section + "' at " + where);
            }
            continue;
        }
        std::size_t eq = trimmed.find('=');
        if (eq == std::string::npos) {
            throw ValidationError("expected 'key = value' at " + where);
        }
        std::string key = util::trim(trimmed.substr(0, eq));
        std::string value = util::trim(trimmed.substr(eq + 1));
        if (section.empty()) {
            throw ValidationError("key '" + key + "' appears before any section at " + where);
        }
        bool applied = false;
        for (const Field& field : fields()) {
            if (field.section == section && field.key == key) {
                field.set(config, value);
                applied = true;
                break;
            }
        }
        if (!applied) {
            throw ValidationError("unknown config key '" + section + "." + key + "' at " +
                                  where);
        }
    }
}

void apply_config_file(PipelineConfig& config, const std::string& path) {
    if (!std::filesystem::exists(path)) {
        throw MissingArtifactError("config file not found: " + path);
    }
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    apply_config_text(config, ss.str(), path);
}

PipelineConfig load_config(const std::string& explicit_path) {
    PipelineConfig config;
    std::string path = explicit_path;
    if (path.empty()) {
        if (const char* env = std::getenv("REVBROWSE_CONFIG")) path = env;
    }
    if (!path.empty()) apply_config_file(config, path);
    return config;
}

}  // namespace revbrowse::config
