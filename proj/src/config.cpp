#include "cdrec/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <fmt/format.h>

namespace cdrec {

namespace {

template <typename T>
struct Codec;

template <>
struct Codec<double> {
    static double parse(const std::string& s) {
        double v = 0.0;
        const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || end != s.data() + s.size()) {
            throw ConfigError(fmt::format("'{}' is not a number", s));
        }
        return v;
    }
    static double from(const nlohmann::json& j) {
        if (!j.is_number()) {
            throw ConfigError("expected a number");
        }
        return j.get<double>();
    }
    static nlohmann::json to(double v) { return v; }
};

template <typename Int>
struct IntCodec {
    static Int parse(const std::string& s) {
        Int v = 0;
        const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || end != s.data() + s.size()) {
            throw ConfigError(fmt::format("'{}' is not an integer", s));
        }
        return v;
    }
    static Int from(const nlohmann::json& j) {
        if (!j.is_number_integer()) {
            throw ConfigError("expected an integer");
        }
        return j.get<Int>();
    }
    static nlohmann::json to(Int v) { return v; }
};

template <>
struct Codec<int> : IntCodec<int> {};
template <>
struct Codec<std::uint64_t> : IntCodec<std::uint64_t> {};

template <>
struct Codec<bool> {
    static bool parse(const std::string& s) {
        if (s == "true" || s == "1") {
            return true;
        }
        if (s == "false" || s == "0") {
            return false;
        }
        throw ConfigError(fmt::format("'{}' is not a boolean", s));
    }
    static bool from(const nlohmann::json& j) {
        if (!j.is_boolean()) {
            throw ConfigError("expected a boolean");
        }
        return j.get<bool>();
    }
    static nlohmann::json to(bool v) { return v; }
};

template <>
struct Codec<std::string> {
    static std::string parse(const std::string& s) { return s; }
    static std::string from(const nlohmann::json& j) {
        if (!j.is_string()) {
            throw ConfigError("expected a string");
        }
        return j.get<std::string>();
    }
    static nlohmann::json to(const std::string& v) { return v; }
};

template <>
struct Codec<std::vector<int>> {
    static std::vector<int> parse(const std::string& s) {
        std::vector<int> out;
        std::stringstream in(s);
        std::string part;
        while (std::getline(in, part, ',')) {
            out.push_back(Codec<int>::parse(part));
        }
        if (out.empty()) {
            throw ConfigError("expected a comma-separated list of integers");
        }
        return out;
    }
    static std::vector<int> from(const nlohmann::json& j) {
        if (j.is_string()) {
            return parse(j.get<std::string>());
        }
        if (!j.is_array()) {
            throw ConfigError("expected a list of integers");
        }
        std::vector<int> out;
        for (const auto& e : j) {
            out.push_back(Codec<int>::from(e));
        }
        return out;
    }
    static nlohmann::json to(const std::vector<int>& v) { return v; }
};

template <typename E, E (*FromString)(const std::string&), std::string (*ToString)(E)>
struct EnumCodec {
    static E parse(const std::string& s) {
        try {
            return FromString(s);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    static E from(const nlohmann::json& j) { return parse(Codec<std::string>::from(j)); }
    static nlohmann::json to(E v) { return ToString(v); }
};

std::string score_to_string(ScoreFunction s) { return s == ScoreFunction::Cosine ? "cosine" : "dot"; }
ScoreFunction score_from_string(const std::string& s) {
    if (s == "cosine") {
        return ScoreFunction::Cosine;
    }
    if (s == "dot") {
        return ScoreFunction::Dot;
    }
    throw std::invalid_argument("unknown score function '" + s + "' (expected cosine or dot)");
}
std::string kernel_to_string(KernelMode m) { return to_string(m); }
std::string pair_to_string(PairMethod m) { return to_string(m); }

template <>
struct Codec<KernelMode> : EnumCodec<KernelMode, kernel_mode_from_string, kernel_to_string> {};
template <>
struct Codec<PairMethod> : EnumCodec<PairMethod, pair_method_from_string, pair_to_string> {};
template <>
struct Codec<ScoreFunction> : EnumCodec<ScoreFunction, score_from_string, score_to_string> {};

struct Entry {
    std::function<void(RunConfig&, const std::string&)> parse;
    std::function<void(RunConfig&, const nlohmann::json&)> from;
    std::function<nlohmann::json(const RunConfig&)> to;
};

template <typename T>
Entry entry(T& (*ref)(RunConfig&)) {
    return Entry{[ref](RunConfig& c, const std::string& s) { ref(c) = Codec<T>::parse(s); },
                 [ref](RunConfig& c, const nlohmann::json& j) { ref(c) = Codec<T>::from(j); },
                 [ref](const RunConfig& c) { return Codec<T>::to(ref(const_cast<RunConfig&>(c))); }};
}

#define CDREC_KEY(name, type, member) \
    {name, entry<type>([](RunConfig& c) -> type& { return c.member; })}

const std::map<std::string, Entry>& registry() {
    static const std::map<std::string, Entry> table{
        CDREC_KEY("data.root", std::string, data_root),
        CDREC_KEY("data.input", std::string, data_input),
        CDREC_KEY("data.threshold", double, data_threshold),
        CDREC_KEY("data.split_dir", std::string, split_dir),
        CDREC_KEY("embed.path", std::string, embed_path),
        CDREC_KEY("embed.dim", int, mf.dim),
        CDREC_KEY("embed.epochs", int, mf.epochs),
        CDREC_KEY("embed.lr", double, mf.learning_rate),
        CDREC_KEY("embed.reg", double, mf.regularization),
        CDREC_KEY("embed.init_scale", double, mf.init_scale),
        CDREC_KEY("embed.seed", std::uint64_t, embed_seed),
        CDREC_KEY("schedule.horizon", double, schedule.horizon),
        CDREC_KEY("schedule.omega", double, schedule.omega),
        CDREC_KEY("schedule.sigma", double, sigma),
        CDREC_KEY("schedule.mode", KernelMode, schedule.mode),
        CDREC_KEY("schedule.epsilon", double, schedule.epsilon),
        CDREC_KEY("denoiser.layers", int, layers),
        CDREC_KEY("denoiser.heads", int, heads),
        CDREC_KEY("denoiser.seq_len", int, seq_len),
        CDREC_KEY("denoiser.ff_mult", int, ff_mult),
        CDREC_KEY("denoiser.proj_temperature", double, proj_temperature),
        CDREC_KEY("denoiser.init_scale", double, init_scale),
        CDREC_KEY("train.lambda1", double, train.lambda1),
        CDREC_KEY("train.lambda2", double, train.lambda2),
        CDREC_KEY("train.mu_ema", double, train.mu_ema),
        CDREC_KEY("train.tau_cl", double, train.tau_cl),
        CDREC_KEY("train.neg_count", int, train.neg_count),
        CDREC_KEY("train.pair_method", PairMethod, train.pair_method),
        CDREC_KEY("train.dt", double, train.dt),
        CDREC_KEY("train.gamma", double, train.gamma),
        CDREC_KEY("train.lr", double, train.learning_rate),
        CDREC_KEY("train.adam_beta1", double, train.adam_beta1),
        CDREC_KEY("train.adam_beta2", double, train.adam_beta2),
        CDREC_KEY("train.adam_eps", double, train.adam_eps),
        CDREC_KEY("train.batch_size", int, train.batch_size),
        CDREC_KEY("train.epochs", int, train.epochs),
        CDREC_KEY("train.patience", int, train.patience),
        CDREC_KEY("train.eval_every", int, train.eval_every),
        CDREC_KEY("train.seed", std::uint64_t, train.seed),
        CDREC_KEY("train.checkpoint_every", int, checkpoint_every),
        CDREC_KEY("train.val_steps", int, val_steps),
        CDREC_KEY("sample.steps", int, sample_steps),
        CDREC_KEY("sample.seed", std::uint64_t, sample_seed),
        CDREC_KEY("sample.score", ScoreFunction, score),
        CDREC_KEY("eval.ks", std::vector<int>, eval.ks),
        CDREC_KEY("eval.runs", int, eval.runs),
        CDREC_KEY("eval.exclude_validation", bool, eval.exclude_validation),
        CDREC_KEY("eval.seed", std::uint64_t, eval.seed),
        CDREC_KEY("eval.split", std::string, eval_split),
        CDREC_KEY("out.dir", std::string, out_dir),
    };
    return table;
}

#undef CDREC_KEY

const Entry& lookup(const std::string& key) {
    const auto& table = registry();
    const auto it = table.find(key);
    if (it == table.end()) {
        throw ConfigError(fmt::format("unknown configuration key '{}'", key));
    }
    return it->second;
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const auto& [k, _] : registry()) {
            out.push_back(k);
        }
        return out;
    }();
    return names;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    try {
        lookup(key).parse(*this, value);
    } catch (const ConfigError& e) {
        throw ConfigError(fmt::format("{}: {}", key, e.what()));
    }
}

void RunConfig::set_json(const std::string& key, const nlohmann::json& value) {
    try {
        lookup(key).from(*this, value);
    } catch (const ConfigError& e) {
        throw ConfigError(fmt::format("{}: {}", key, e.what()));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("{}: {}", key, e.what()));
    }
}

nlohmann::json RunConfig::get(const std::string& key) const { return lookup(key).to(*this); }

nlohmann::json RunConfig::to_json() const {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [k, e] : registry()) {
        out[k] = e.to(*this);
    }
    return out;
}

RunConfig RunConfig::from_json(const nlohmann::json& flat) {
    if (!flat.is_object()) {
        throw ConfigError("configuration must be a JSON object");
    }
    RunConfig c;
    for (const auto& [k, v] : flat.items()) {
        c.set_json(k, v);
    }
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError(fmt::format("cannot open configuration file {}", path.string()));
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
    }
    return from_json(j);
}

NoiseSchedule RunConfig::noise_schedule() const {
    NoiseSchedule s = schedule;
    s.sigma = sigma > 0.0 ? sigma : s.horizon / 10.0;
    s.validate();
    return s;
}

DenoiserConfig RunConfig::denoiser_config(int n_users, int n_items, int dim) const {
    DenoiserConfig c;
    c.n_users = n_users;
    c.n_items = n_items;
    c.dim = dim;
    c.layers = layers;
    c.heads = heads;
    c.seq_len = seq_len;
    c.ff_mult = ff_mult;
    c.horizon = schedule.horizon;
    c.epsilon = schedule.epsilon;
    c.proj_temperature = proj_temperature;
    c.init_scale = init_scale;
    c.validate();
    return c;
}

SamplingPlan RunConfig::sampling_plan(int steps) const {
    SamplingPlan p{steps > 0 ? steps : sample_steps, schedule.horizon, sample_seed};
    p.validate();
    return p;
}

std::filesystem::path RunConfig::input_path() const {
    std::filesystem::path p(data_input);
    if (p.is_relative() && !data_root.empty()) {
        return std::filesystem::path(data_root) / p;
    }
    return p;
}

}  // namespace cdrec
