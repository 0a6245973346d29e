#pragma once

// Experiment configuration and its strict JSON form.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "fedalign/blocknet.hpp"
#include "fedalign/data.hpp"
#include "fedalign/method.hpp"

namespace fedalign {

using json = nlohmann::json;

class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct DatasetConfig {
    SyntheticSpec synthetic{};
    double test_fraction = 0.2;
    std::optional<std::uint64_t> seed;  // defaults to the experiment seed
};

struct ModelConfig {
    std::vector<std::size_t> widths{16, 16, 32};
    std::vector<std::size_t> strides{};
    std::size_t kernel = 1;
    std::size_t norm_groups = 1;
    bool normalize = true;
    std::size_t head_dim = 0;  // MOON falls back to 64 when left at 0
};

struct ExperimentConfig {
    int rounds = 20;
    std::size_t num_clients = 8;
    double sample_fraction = 1.0;
    int local_epochs = 2;
    std::size_t batch_size = 32;
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::optional<double> clip_norm = 5.0;
    double alpha = 0.5;  // 0 means a homogeneous split
    std::uint64_t seed = 0;
    MethodConfig method = MethodConfig::defaults(Method::fedavg);
    DatasetConfig dataset{};
    ModelConfig model{};
    int eval_every = 1;
    std::string output_dir = "out";
    int threads = 1;  // client workers per round; results do not depend on it

    std::size_t clients_per_round() const {
        return static_cast<std::size_t>(std::ceil(sample_fraction * static_cast<double>(num_clients) - 1e-12));
    }

    void validate() const {
        auto check = [](bool ok, const std::string& msg) {
            if (!ok) throw ConfigError(msg);
        };
        check(rounds >= 1, "rounds must be at least 1");
        check(num_clients >= 1, "num_clients must be at least 1");
        check(sample_fraction > 0.0 && sample_fraction <= 1.0, "sample_fraction must lie in (0, 1]");
        check(clients_per_round() >= 1, "sample_fraction * num_clients must round up to at least 1");
        check(local_epochs >= 0, "local_epochs must be non-negative");
        check(batch_size >= 1, "batch_size must be positive");
        check(learning_rate > 0.0, "learning_rate must be positive");
        check(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
        check(!clip_norm || *clip_norm > 0.0, "clip_norm must be positive or null");
        check(alpha >= 0.0, "alpha must be positive, or \"homogeneous\"");
        check(eval_every >= 1, "eval_every must be at least 1");
        check(threads >= 1, "threads must be at least 1");
        check(dataset.test_fraction > 0.0 && dataset.test_fraction < 1.0, "dataset.test_fraction must lie in (0, 1)");
        try {
            method.validate();
            model_spec().validate();
        } catch (const ContractViolation& e) {
            throw ConfigError(e.what());
        }
    }

    BlockNetSpec model_spec() const {
        BlockNetSpec s;
        const auto& d = dataset.synthetic;
        s.input_shape = d.image_side > 0 ? Shape{1, d.image_side, d.image_side} : Shape{d.dims, 1, 1};
        s.widths = model.widths;
        s.strides = model.strides;
        s.num_classes = d.num_classes;
        s.kernel = model.kernel;
        s.norm_groups = model.norm_groups;
        s.normalize = model.normalize;
        s.head_dim = model.head_dim;
        if (method.method == Method::moon && s.head_dim == 0) s.head_dim = 64;
        return s;
    }
};

namespace detail {

class KeyReader {
  public:
    KeyReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    template <class T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(where_ + "." + key + ": " + e.what());
        }
    }

    const json* sub(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (const auto& [k, _] : j_.items()) {
            if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
        }
    }

  private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

} // namespace detail

inline MethodConfig method_from_json(const json& j) {
    detail::KeyReader r(j, "method");
    std::string name = "fedavg";
    r.read("name", name);
    MethodConfig m;
    try {
        m = MethodConfig::defaults(parse_method(name));
    } catch (const ContractViolation& e) {
        throw ConfigError(e.what());
    }
    r.read("mu", m.mu);
    r.read("gamma", m.gamma);
    r.read("gamma_L", m.gamma_L);
    r.read("omega_b", m.omega_b);
    r.read("n_subnets", m.n_subnets);
    r.read("omega_S", m.omega_S);
    r.read("tau", m.tau);
    r.read("power_iters", m.power_iters);
    r.read("lip_epsilon", m.lip_epsilon);
    r.finish();
    return m;
}

inline json method_to_json(const MethodConfig& m) {
    return {{"name", std::string(method_name(m.method))},
            {"mu", m.mu},
            {"gamma", m.gamma},
            {"gamma_L", m.gamma_L},
            {"omega_b", m.omega_b},
            {"n_subnets", m.n_subnets},
            {"omega_S", m.omega_S},
            {"tau", m.tau},
            {"power_iters", m.power_iters},
            {"lip_epsilon", m.lip_epsilon}};
}

inline ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    detail::KeyReader r(j, "config");
    r.read("rounds", c.rounds);
    r.read("num_clients", c.num_clients);
    r.read("sample_fraction", c.sample_fraction);
    r.read("local_epochs", c.local_epochs);
    r.read("batch_size", c.batch_size);
    r.read("learning_rate", c.learning_rate);
    r.read("momentum", c.momentum);
    if (const auto* clip = r.sub("clip_norm")) {
        if (clip->is_null()) {
            c.clip_norm.reset();
        } else if (clip->is_number()) {
            c.clip_norm = clip->get<double>();
        } else {
            throw ConfigError("config.clip_norm: expected a number or null");
        }
    }
    if (const auto* a = r.sub("alpha")) {
        if (a->is_string() && a->get<std::string>() == "homogeneous") {
            c.alpha = 0.0;
        } else if (a->is_number()) {
            c.alpha = a->get<double>();
            if (!(c.alpha > 0.0)) throw ConfigError("config.alpha: must be positive, or \"homogeneous\"");
        } else {
            throw ConfigError("config.alpha: expected a positive number or \"homogeneous\"");
        }
    }
    r.read("seed", c.seed);
    if (const auto* m = r.sub("method")) c.method = method_from_json(*m);
    if (const auto* d = r.sub("dataset")) {
        detail::KeyReader dr(*d, "dataset");
        dr.read("num_classes", c.dataset.synthetic.num_classes);
        dr.read("dims", c.dataset.synthetic.dims);
        dr.read("samples_per_class", c.dataset.synthetic.samples_per_class);
        dr.read("separation", c.dataset.synthetic.separation);
        dr.read("image_side", c.dataset.synthetic.image_side);
        dr.read("test_fraction", c.dataset.test_fraction);
        if (const auto* s = dr.sub("seed"); s && !s->is_null()) {
            if (!s->is_number_unsigned()) throw ConfigError("dataset.seed: expected a non-negative integer");
            c.dataset.seed = s->get<std::uint64_t>();
        }
        dr.finish();
    }
    if (const auto* m = r.sub("model")) {
        detail::KeyReader mr(*m, "model");
        mr.read("widths", c.model.widths);
        mr.read("strides", c.model.strides);
        mr.read("kernel", c.model.kernel);
        mr.read("norm_groups", c.model.norm_groups);
        mr.read("normalize", c.model.normalize);
        mr.read("head_dim", c.model.head_dim);
        mr.finish();
    }
    r.read("eval_every", c.eval_every);
    r.read("output_dir", c.output_dir);
    r.read("threads", c.threads);
    r.finish();
    c.validate();
    return c;
}

inline json config_to_json(const ExperimentConfig& c) {
    json j;
    j["rounds"] = c.rounds;
    j["num_clients"] = c.num_clients;
    j["sample_fraction"] = c.sample_fraction;
    j["local_epochs"] = c.local_epochs;
    j["batch_size"] = c.batch_size;
    j["learning_rate"] = c.learning_rate;
    j["momentum"] = c.momentum;
    j["clip_norm"] = c.clip_norm ? json(*c.clip_norm) : json(nullptr);
    j["alpha"] = c.alpha > 0.0 ? json(c.alpha) : json("homogeneous");
    j["seed"] = c.seed;
    j["method"] = method_to_json(c.method);
    const auto& s = c.dataset.synthetic;
    j["dataset"] = {{"num_classes", s.num_classes},
                    {"dims", s.dims},
                    {"samples_per_class", s.samples_per_class},
                    {"separation", s.separation},
                    {"image_side", s.image_side},
                    {"test_fraction", c.dataset.test_fraction},
                    {"seed", c.dataset.seed ? json(*c.dataset.seed) : json(nullptr)}};
    j["model"] = {{"widths", c.model.widths},         {"strides", c.model.strides},
                  {"kernel", c.model.kernel},         {"norm_groups", c.model.norm_groups},
                  {"normalize", c.model.normalize},   {"head_dim", c.model.head_dim}};
    j["eval_every"] = c.eval_every;
    j["output_dir"] = c.output_dir;
    j["threads"] = c.threads;
    return j;
}

/// Sets a dotted key such as "method.mu" from its textual value. Values are
/// parsed as JSON when possible and taken as strings otherwise.
inline void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "' is not of the form key=value");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json* node = &j;
    std::size_t start = 0;
    for (;;) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        if (!node->contains(part)) (*node)[part] = json::object();
        node = &(*node)[part];
        start = dot + 1;
    }
}

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError(path + ": malformed JSON");
    return j;
}

inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
    json j = read_json_file(path);
    for (const auto& o : overrides) apply_override(j, o);
    return config_from_json(j);
}

inline std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Identity of the training trajectory: ignores the round budget, output
/// location and worker count, which do not change any completed round.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
    json j = config_to_json(c);
    j.erase("rounds");
    j.erase("output_dir");
    j.erase("threads");
    j.erase("eval_every");
    return fnv1a(j.dump());
}

} // namespace fedalign
