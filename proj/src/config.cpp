#include "fpvt/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace fpvt {

namespace {

struct Entry {
    std::string value;
    int line = 0;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void fail(const std::string& source, int line, const std::string& msg) {
    throw ConfigError(source + ":" + std::to_string(line) + ": " + msg);
}

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
    T out{};
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError(key + ": '" + v + "' is not an integer");
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError(key + ": '" + v + "' is not a number");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": '" + v + "' is not a boolean (true/false)");
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

template <typename T>
Setter int_field(T RunConfig::*part, int T::*field) {
    return [=](RunConfig& c, const std::string& k, const std::string& v) { (c.*part).*field = parse_int<int>(k, v); };
}

std::map<std::string, Setter> scalar_setters() {
    std::map<std::string, Setter> s;
    s["run.seed"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_int<std::uint64_t>(k, v); };

    s["model.input_size"] = [](RunConfig& c, const std::string& k, const std::string& v) {
        c.model.input_h = c.model.input_w = parse_int<int>(k, v);
    };
    s["model.embed_dim"] = int_field(&RunConfig::model, &ModelConfig::embed_dim);
    s["model.pool_out"] = int_field(&RunConfig::model, &ModelConfig::pool_out);
    s["model.precision"] = [](RunConfig& c, const std::string& k, const std::string& v) {
        if (v == "f32") c.model.precision = Precision::f32;
        else if (v == "f64") c.model.precision = Precision::f64;
        else throw ConfigError(k + ": '" + v + "' must be f32 or f64");
    };

    s["data.identities"] = int_field(&RunConfig::data, &SyntheticFaceSpec::identities);
    s["data.samples"] = int_field(&RunConfig::data, &SyntheticFaceSpec::samples_per_identity);
    s["data.channels"] = int_field(&RunConfig::data, &SyntheticFaceSpec::channels);
    s["data.noise_std"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.data.noise_std = parse_double(k, v); };
    s["data.pose_jitter"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.data.pose_jitter = parse_double(k, v); };

    s["fdr.groups"] = int_field(&RunConfig::fdr, &FdrConfig::groups);
    s["fdr.margin"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.fdr.margin = parse_double(k, v); };
    s["fdr.scale"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.fdr.scale = parse_double(k, v); };
    s["fdr.writeback"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.fdr.writeback = parse_double(k, v); };

    s["optim.kind"] = [](RunConfig& c, const std::string& k, const std::string& v) {
        if (v == "adamw") c.optim.kind = OptimizerKind::adamw;
        else if (v == "sgd") c.optim.kind = OptimizerKind::sgd;
        else throw ConfigError(k + ": '" + v + "' must be adamw or sgd");
    };
    auto dbl = [](double OptimizerConfig::*f) {
        return [f](RunConfig& c, const std::string& k, const std::string& v) { c.optim.*f = parse_double(k, v); };
    };
    s["optim.lr"] = dbl(&OptimizerConfig::lr);
    s["optim.beta1"] = dbl(&OptimizerConfig::beta1);
    s["optim.beta2"] = dbl(&OptimizerConfig::beta2);
    s["optim.eps"] = dbl(&OptimizerConfig::eps);
    s["optim.weight_decay"] = dbl(&OptimizerConfig::weight_decay);
    s["optim.momentum"] = dbl(&OptimizerConfig::momentum);

    s["train.steps"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.train.steps = parse_int<std::int64_t>(k, v); };
    s["train.batch"] = int_field(&RunConfig::train, &TrainConfig::batch);
    s["train.augment"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.train.augment = parse_bool(k, v); };
    s["train.augment_pad"] = [](RunConfig& c, const std::string& k, const std::string& v) {
        c.train.augment_cfg.pad = parse_int<int>(k, v);
    };
    s["train.flip_prob"] = [](RunConfig& c, const std::string& k, const std::string& v) {
        c.train.augment_cfg.flip_prob = parse_double(k, v);
    };
    s["train.checkpoint_every"] = [](RunConfig& c, const std::string& k, const std::string& v) {
        c.train.checkpoint_every = parse_int<std::int64_t>(k, v);
    };
    return s;
}

const char* kStageKeys[] = {"stride", "pad", "channels", "layers", "reduction", "heads", "expand"};

int StageConfig::*stage_field(const std::string& key) {
    static const std::map<std::string, int StageConfig::*> fields{
        {"stride", &StageConfig::stride},   {"pad", &StageConfig::pad},         {"channels", &StageConfig::channels},
        {"layers", &StageConfig::layers},   {"reduction", &StageConfig::reduction}, {"heads", &StageConfig::heads},
        {"expand", &StageConfig::expand},
    };
    auto it = fields.find(key);
    return it == fields.end() ? nullptr : it->second;
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

RunConfig RunConfig::resolved() const {
    RunConfig r = *this;
    r.model.seed = Rng::mix(seed, 1);
    r.fdr.seed = Rng::mix(seed, 2);
    r.data.seed = Rng::mix(seed, 3);
    r.train.seed = Rng::mix(seed, 4);
    r.fdr.identities = data.identities;
    r.fdr.dim = model.embed_dim;
    r.data.image_size = model.input_h;
    r.model.in_channels = data.channels;
    return r;
}

RunConfig parse_config(const std::string& text, const std::string& source) {
    std::map<std::string, Entry> entries;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail(source, line_no, "expected 'section.key = value', got '" + line + "'");
        const auto key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (key.find('.') == std::string::npos) fail(source, line_no, "key '" + key + "' has no section");
        if (value.empty()) fail(source, line_no, "key '" + key + "' has no value");
        if (entries.count(key)) {
            fail(source, line_no, "key '" + key + "' repeats line " + std::to_string(entries[key].line));
        }
        entries[key] = {value, line_no};
    }

    RunConfig cfg;
    auto apply = [&](const std::string& key, const std::function<void(const std::string&)>& fn) {
        auto it = entries.find(key);
        if (it == entries.end()) return;
        try {
            fn(it->second.value);
        } catch (const ConfigError& e) {
            fail(source, it->second.line, e.what());
        }
        entries.erase(it);
    };

    apply("model.preset", [&](const std::string& v) {
        if (v == "toy") cfg.model = ModelConfig::toy();
        else if (v == "fpvt") cfg.model = ModelConfig::fpvt_default();
        else throw ConfigError("model.preset: '" + v + "' must be toy or fpvt");
    });
    apply("model.stages", [&](const std::string& v) {
        const int n = parse_int<int>("model.stages", v);
        if (n < 1 || n > 8) throw ConfigError("model.stages: must be in [1, 8]");
        cfg.model.stages.resize(static_cast<std::size_t>(n), cfg.model.stages.empty() ? StageConfig{} : cfg.model.stages.back());
    });

    const auto setters = scalar_setters();
    for (const auto& [key, e] : entries) {
        try {
            if (auto it = setters.find(key); it != setters.end()) {
                it->second(cfg, key, e.value);
                continue;
            }
            if (key.rfind("stage", 0) == 0) {
                const auto dot = key.find('.');
                const auto idx_text = key.substr(5, dot - 5);
                int idx = 0;
                auto [ptr, ec] = std::from_chars(idx_text.data(), idx_text.data() + idx_text.size(), idx);
                int StageConfig::*field = stage_field(key.substr(dot + 1));
                if (ec == std::errc() && ptr == idx_text.data() + idx_text.size() && field) {
                    if (idx < 1 || idx > static_cast<int>(cfg.model.stages.size())) {
                        throw ConfigError(key + ": stage " + std::to_string(idx) + " does not exist (model has " +
                                          std::to_string(cfg.model.stages.size()) + " stages; set model.stages)");
                    }
                    cfg.model.stages[static_cast<std::size_t>(idx - 1)].*field = parse_int<int>(key, e.value);
                    continue;
                }
            }
            throw ConfigError("unknown key '" + key + "'");
        } catch (const ConfigError& err) {
            fail(source, e.line, err.what());
        }
    }
    try {
        auto r = cfg.resolved();
        r.model.validate();
        r.data.validate();
        if (r.fdr.groups < 1 || r.fdr.groups >= r.fdr.identities) {
            throw ConfigError("fdr.groups=" + std::to_string(r.fdr.groups) + " must satisfy 1 <= groups < data.identities=" +
                              std::to_string(r.fdr.identities));
        }
        if (r.train.batch < 1 || r.train.steps < 0) throw ConfigError("train.batch must be >= 1 and train.steps >= 0");
    } catch (const ConfigError& e) {
        throw ConfigError(source + ": " + e.what());
    }
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file '" + path.string() + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str(), path.string());
}

std::string to_text(const RunConfig& c) {
    std::ostringstream os;
    os << "run.seed = " << c.seed << '\n';
    os << "model.stages = " << c.model.stages.size() << '\n';
    os << "model.input_size = " << c.model.input_h << '\n';
    os << "model.embed_dim = " << c.model.embed_dim << '\n';
    os << "model.pool_out = " << c.model.pool_out << '\n';
    os << "model.precision = " << (c.model.precision == Precision::f64 ? "f64" : "f32") << '\n';
    for (std::size_t i = 0; i < c.model.stages.size(); ++i) {
        for (const char* k : kStageKeys) {
            os << "stage" << i + 1 << '.' << k << " = " << c.model.stages[i].*stage_field(k) << '\n';
        }
    }
    os << "data.identities = " << c.data.identities << '\n';
    os << "data.samples = " << c.data.samples_per_identity << '\n';
    os << "data.channels = " << c.data.channels << '\n';
    os << "data.noise_std = " << fmt_double(c.data.noise_std) << '\n';
    os << "data.pose_jitter = " << fmt_double(c.data.pose_jitter) << '\n';
    os << "fdr.groups = " << c.fdr.groups << '\n';
    os << "fdr.margin = " << fmt_double(c.fdr.margin) << '\n';
    os << "fdr.scale = " << fmt_double(c.fdr.scale) << '\n';
    os << "fdr.writeback = " << fmt_double(c.fdr.writeback) << '\n';
    os << "optim.kind = " << (c.optim.kind == OptimizerKind::adamw ? "adamw" : "sgd") << '\n';
    os << "optim.lr = " << fmt_double(c.optim.lr) << '\n';
    os << "optim.beta1 = " << fmt_double(c.optim.beta1) << '\n';
    os << "optim.beta2 = " << fmt_double(c.optim.beta2) << '\n';
    os << "optim.eps = " << fmt_double(c.optim.eps) << '\n';
    os << "optim.weight_decay = " << fmt_double(c.optim.weight_decay) << '\n';
    os << "optim.momentum = " << fmt_double(c.optim.momentum) << '\n';
    os << "train.steps = " << c.train.steps << '\n';
    os << "train.batch = " << c.train.batch << '\n';
    os << "train.augment = " << (c.train.augment ? "true" : "false") << '\n';
    os << "train.augment_pad = " << c.train.augment_cfg.pad << '\n';
    os << "train.flip_prob = " << fmt_double(c.train.augment_cfg.flip_prob) << '\n';
    os << "train.checkpoint_every = " << c.train.checkpoint_every << '\n';
    return os.str();
}

}  // namespace fpvt
