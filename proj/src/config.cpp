#include "fedbsd/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <sstream>

#include "fedbsd/errors.hpp"

namespace fedbsd {
namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::size_t parse_count(const std::string& key, const std::string& v, std::size_t line) {
    std::size_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
        throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'", line);
    }
    return out;
}

double parse_real(const std::string& key, const std::string& v, std::size_t line) {
    double out = 0.0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty() || !std::isfinite(out)) {
        throw ConfigError("key '" + key + "': expected a number, got '" + v + "'", line);
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v, std::size_t line) {
    if (v == "true" || v == "1") {
        return true;
    }
    if (v == "false" || v == "0") {
        return false;
    }
    throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'", line);
}

template <typename E>
E parse_choice(const std::string& key, const std::string& v, std::size_t line,
               std::initializer_list<std::pair<const char*, E>> choices) {
    std::string valid;
    for (const auto& [name, value] : choices) {
        if (v == name) {
            return value;
        }
        valid += valid.empty() ? name : std::string("|") + name;
    }
    throw ConfigError("key '" + key + "': expected one of " + valid + ", got '" + v + "'", line);
}

template <typename E>
std::string choice_name(E value, std::initializer_list<std::pair<const char*, E>> choices) {
    for (const auto& [name, v] : choices) {
        if (v == value) {
            return name;
        }
    }
    return "?";
}

std::string format_list(const std::vector<std::size_t>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        out += (i ? "," : "") + std::to_string(xs[i]);
    }
    return out;
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v, std::size_t line) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const std::size_t width = parse_count(key, trim(item), line);
        if (width == 0) {
            throw ConfigError("key '" + key + "': layer widths must be positive", line);
        }
        out.push_back(width);
    }
    if (out.empty()) {
        throw ConfigError("key '" + key + "': needs at least one width", line);
    }
    return out;
}

const std::initializer_list<std::pair<const char*, Strategy>> kStrategies = {
    {"fedbsd", Strategy::fedbsd},
    {"fedrep", Strategy::fedrep},
    {"fedavg", Strategy::fedavg},
    {"local", Strategy::local},
};
const std::initializer_list<std::pair<const char*, KlDirection>> kKlDirections = {
    {"forward", KlDirection::forward},
    {"reverse", KlDirection::reverse},
};
const std::initializer_list<std::pair<const char*, FeatureDistill>> kDistillModes = {
    {"softmax_kl", FeatureDistill::softmax_kl},
    {"mse", FeatureDistill::mse},
};
const std::initializer_list<std::pair<const char*, BackboneInit>> kBackboneInits = {
    {"local", BackboneInit::local},
    {"global", BackboneInit::global},
};
const std::initializer_list<std::pair<const char*, HeadFeatures>> kHeadFeatures = {
    {"global", HeadFeatures::global},
    {"local", HeadFeatures::local},
};
const std::initializer_list<std::pair<const char*, Aggregation>> kAggregations = {
    {"uniform", Aggregation::uniform},
    {"weighted", Aggregation::weighted},
};
const std::initializer_list<std::pair<const char*, Allocation>> kAllocations = {
    {"uniform", Allocation::uniform},
    {"lognormal", Allocation::lognormal},
};
const std::initializer_list<std::pair<const char*, DataSource::Kind>> kDataKinds = {
    {"synthetic", DataSource::Kind::synthetic},
    {"idx", DataSource::Kind::idx},
};

struct KeyHandler {
    const char* key;
    std::function<void(ExperimentConfig&, const std::string&, std::size_t)> set;
    std::function<std::string(const ExperimentConfig&)> get;
    bool execution_only = false;
};

#define FEDBSD_COUNT(name, field)                                                          \
    KeyHandler{name,                                                                       \
               [](ExperimentConfig& c, const std::string& v, std::size_t l) {              \
                   c.field = parse_count(name, v, l);                                      \
               },                                                                          \
               [](const ExperimentConfig& c) { return std::to_string(c.field); }}
#define FEDBSD_REAL(name, field)                                                           \
    KeyHandler{name,                                                                       \
               [](ExperimentConfig& c, const std::string& v, std::size_t l) {              \
                   c.field = parse_real(name, v, l);                                       \
               },                                                                          \
               [](const ExperimentConfig& c) { return format_double(c.field); }}
#define FEDBSD_CHOICE(name, field, table)                                                  \
    KeyHandler{name,                                                                       \
               [](ExperimentConfig& c, const std::string& v, std::size_t l) {              \
                   c.field = parse_choice(name, v, l, table);                              \
               },                                                                          \
               [](const ExperimentConfig& c) { return choice_name(c.field, table); }}

const std::vector<KeyHandler>& handlers() {
    static const std::vector<KeyHandler> table = {
        FEDBSD_CHOICE("strategy", train.strategy, kStrategies),
        FEDBSD_COUNT("rounds", train.rounds),
        FEDBSD_REAL("participation", train.participation),
        FEDBSD_COUNT("head_epochs", train.head_epochs),
        FEDBSD_COUNT("backbone_epochs", train.backbone_epochs),
        FEDBSD_COUNT("local_epochs", train.local_epochs),
        FEDBSD_REAL("lr", train.lr),
        FEDBSD_REAL("momentum", train.momentum),
        FEDBSD_REAL("tau", train.tau),
        FEDBSD_REAL("lambda", train.lambda),
        FEDBSD_COUNT("batch_size", train.batch_size),
        KeyHandler{"seed",
                   [](ExperimentConfig& c, const std::string& v, std::size_t l) {
                       c.train.seed = parse_count("seed", v, l);
                       c.partition.seed = c.train.seed;
                   },
                   [](const ExperimentConfig& c) { return std::to_string(c.train.seed); }},
        KeyHandler{"hidden",
                   [](ExperimentConfig& c, const std::string& v, std::size_t l) {
                       c.train.hidden = parse_list("hidden", v, l);
                   },
                   [](const ExperimentConfig& c) { return format_list(c.train.hidden); }},
        FEDBSD_CHOICE("kl_direction", train.distill.direction, kKlDirections),
        KeyHandler{"tau2_rescale",
                   [](ExperimentConfig& c, const std::string& v, std::size_t l) {
                       c.train.distill.tau2_rescale = parse_bool("tau2_rescale", v, l);
                   },
                   [](const ExperimentConfig& c) {
                       return std::string(c.train.distill.tau2_rescale ? "true" : "false");
                   }},
        FEDBSD_CHOICE("feature_distill", train.distill.mode, kDistillModes),
        FEDBSD_CHOICE("backbone_init", train.backbone_init, kBackboneInits),
        FEDBSD_CHOICE("head_features", train.head_features, kHeadFeatures),
        FEDBSD_CHOICE("aggregation", train.aggregation, kAggregations),
        FEDBSD_COUNT("finetune_epochs", train.finetune_epochs),
        FEDBSD_COUNT("eval_last_k", train.eval_last_k),
        FEDBSD_COUNT("clients", partition.num_clients),
        FEDBSD_COUNT("classes_per_client", partition.classes_per_client),
        FEDBSD_CHOICE("allocation", partition.allocation, kAllocations),
        FEDBSD_REAL("lognormal_sigma", partition.lognormal_sigma),
        FEDBSD_CHOICE("data", data.kind, kDataKinds),
        FEDBSD_COUNT("classes", data.classes),
        FEDBSD_COUNT("dim", data.dim),
        FEDBSD_COUNT("samples_per_class", data.samples_per_class),
        FEDBSD_REAL("spread", data.spread),
        KeyHandler{"idx_images",
                   [](ExperimentConfig& c, const std::string& v, std::size_t) { c.data.idx_images = v; },
                   [](const ExperimentConfig& c) { return c.data.idx_images.string(); }},
        KeyHandler{"idx_labels",
                   [](ExperimentConfig& c, const std::string& v, std::size_t) { c.data.idx_labels = v; },
                   [](const ExperimentConfig& c) { return c.data.idx_labels.string(); }},
        KeyHandler{"threads",
                   [](ExperimentConfig& c, const std::string& v, std::size_t l) {
                       c.train.threads = parse_count("threads", v, l);
                   },
                   [](const ExperimentConfig& c) { return std::to_string(c.train.threads); }, true},
    };
    return table;
}

#undef FEDBSD_COUNT
#undef FEDBSD_REAL
#undef FEDBSD_CHOICE

}  // namespace

void TrainConfig::validate() const {
    if (rounds < 1) {
        throw ConfigError("rounds must be >= 1");
    }
    if (!(participation > 0.0 && participation <= 1.0)) {
        throw ConfigError("participation must be in (0, 1]");
    }
    if (!(lr > 0.0)) {
        throw ConfigError("lr must be > 0");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw ConfigError("momentum must be in [0, 1)");
    }
    if (!(tau > 0.0)) {
        throw ConfigError("tau must be > 0");
    }
    if (!(lambda >= 0.0)) {
        throw ConfigError("lambda must be >= 0");
    }
    if (batch_size < 1) {
        throw ConfigError("batch_size must be >= 1");
    }
    if (hidden.empty()) {
        throw ConfigError("hidden needs at least one layer");
    }
    if (eval_last_k < 1) {
        throw ConfigError("eval_last_k must be >= 1");
    }
    if (threads < 1) {
        throw ConfigError("threads must be >= 1");
    }
}

std::string to_string(Strategy s) { return choice_name(s, kStrategies); }

Strategy parse_strategy(const std::string& s) { return parse_choice("strategy", s, 0, kStrategies); }

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& h : handlers()) {
            k.emplace_back(h.key);
        }
        return k;
    }();
    return keys;
}

void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value,
                   std::size_t line) {
    for (const auto& h : handlers()) {
        if (key == h.key) {
            h.set(cfg, value, line);
            return;
        }
    }
    std::string valid;
    for (const auto& k : config_keys()) {
        valid += (valid.empty() ? "" : ", ") + k;
    }
    throw ConfigError("unknown key '" + key + "'; valid keys: " + valid, line);
}

ExperimentConfig parse_config(std::istream& in) {
    ExperimentConfig cfg;
    cfg.partition.seed = cfg.train.seed;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("expected key=value, got '" + line + "'", line_no);
        }
        apply_setting(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), line_no);
    }
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file " + path.string());
    }
    return parse_config(in);
}

std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& cfg,
                                                                bool include_execution) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& h : handlers()) {
        if (h.execution_only && !include_execution) {
            continue;
        }
        out.emplace_back(h.key, h.get(cfg));
    }
    return out;
}

void write_config(const ExperimentConfig& cfg, std::ostream& out) {
    for (const auto& [key, value] : config_entries(cfg)) {
        out << key << '=' << value << '\n';
    }
}

std::string format_double(double v) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

}  // namespace fedbsd
