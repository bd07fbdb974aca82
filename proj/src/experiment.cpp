#include "ssip/experiment.hpp"

#include "ssip/drift.hpp"
#include "ssip/rng.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <atomic>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>
#include <tuple>

namespace ssip {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Methods

std::string to_string(Method m) {
    switch (m) {
        case Method::unguided: return "unguided";
        case Method::repulsion: return "repulsion";
        case Method::steg: return "steg";
        case Method::ccg_p: return "ccg_p";
        case Method::ccg_d: return "ccg_d";
        case Method::chunked: return "chunked";
        case Method::chunked_lookahead: return "chunked_lookahead";
    }
    return "unknown";
}

const std::vector<Method>& all_methods() {
    static const std::vector<Method> methods = {Method::unguided, Method::repulsion, Method::steg,
                                                Method::ccg_p, Method::ccg_d, Method::chunked,
                                                Method::chunked_lookahead};
    return methods;
}

std::optional<Method> parse_method(const std::string& name) {
    for (Method m : all_methods()) {
        if (to_string(m) == name) return m;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Config text format

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    if (trim(s).empty()) return out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(trim(item));
    return out;
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

template <class T>
T parse_number(const std::string& raw, const std::string& where) {
    const std::string s = trim(raw);
    T value{};
    const auto res = std::from_chars(s.data(), s.data() + s.size(), value);
    if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw ConfigError(where + ": cannot parse '" + raw + "'");
    }
    return value;
}

// Value codecs for every field type used in the schema.
template <class T>
struct Codec;

template <>
struct Codec<double> {
    static std::string put(double v) { return format_double(v); }
    static double get(const std::string& s, const std::string& w) { return parse_number<double>(s, w); }
};
static_assert(std::is_same_v<std::size_t, std::uint64_t>, "seed fields share the size_t codec");

template <>
struct Codec<std::size_t> {
    static std::string put(std::size_t v) { return std::to_string(v); }
    static std::size_t get(const std::string& s, const std::string& w) { return parse_number<std::size_t>(s, w); }
};
template <>
struct Codec<int> {
    static std::string put(int v) { return std::to_string(v); }
    static int get(const std::string& s, const std::string& w) { return parse_number<int>(s, w); }
};
template <>
struct Codec<bool> {
    static std::string put(bool v) { return v ? "true" : "false"; }
    static bool get(const std::string& raw, const std::string& w) {
        const std::string s = trim(raw);
        if (s == "true" || s == "1") return true;
        if (s == "false" || s == "0") return false;
        throw ConfigError(w + ": expected true/false, got '" + raw + "'");
    }
};
template <>
struct Codec<std::string> {
    static std::string put(const std::string& v) { return v; }
    static std::string get(const std::string& s, const std::string&) { return trim(s); }
};
template <>
struct Codec<std::vector<std::size_t>> {
    static std::string put(const std::vector<std::size_t>& v) {
        std::string out;
        for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
        return out;
    }
    static std::vector<std::size_t> get(const std::string& s, const std::string& w) {
        std::vector<std::size_t> out;
        for (const std::string& item : split_list(s)) out.push_back(parse_number<std::size_t>(item, w));
        return out;
    }
};
template <>
struct Codec<std::vector<double>> {
    static std::string put(const std::vector<double>& v) {
        std::string out;
        for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
        return out;
    }
    static std::vector<double> get(const std::string& s, const std::string& w) {
        std::vector<double> out;
        for (const std::string& item : split_list(s)) out.push_back(parse_number<double>(item, w));
        return out;
    }
};
template <>
struct Codec<std::vector<Method>> {
    static std::string put(const std::vector<Method>& v) {
        std::string out;
        for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + to_string(v[i]);
        return out;
    }
    static std::vector<Method> get(const std::string& s, const std::string& w) {
        std::vector<Method> out;
        for (const std::string& item : split_list(s)) {
            const auto m = parse_method(item);
            if (!m) throw ConfigError(w + ": unknown method '" + item + "'");
            out.push_back(*m);
        }
        return out;
    }
};
template <>
struct Codec<EpsilonKind> {
    static std::string put(EpsilonKind k) {
        switch (k) {
            case EpsilonKind::zero: return "zero";
            case EpsilonKind::constant: return "constant";
            case EpsilonKind::gamma_squared: return "gamma_squared";
        }
        return "zero";
    }
    static EpsilonKind get(const std::string& raw, const std::string& w) {
        const std::string s = trim(raw);
        for (EpsilonKind k : {EpsilonKind::zero, EpsilonKind::constant, EpsilonKind::gamma_squared}) {
            if (put(k) == s) return k;
        }
        throw ConfigError(w + ": unknown epsilon kind '" + raw + "'");
    }
};
template <>
struct Codec<SamplerMode> {
    static std::string put(SamplerMode m) { return to_string(m); }
    static SamplerMode get(const std::string& raw, const std::string& w) {
        const std::string s = trim(raw);
        if (s == "ode") return SamplerMode::ode;
        if (s == "sde") return SamplerMode::sde;
        throw ConfigError(w + ": expected ode or sde, got '" + raw + "'");
    }
};
template <>
struct Codec<ScriptKind> {
    static std::string put(ScriptKind k) { return to_string(k); }
    static ScriptKind get(const std::string& raw, const std::string& w) {
        const auto k = parse_script_kind(trim(raw));
        if (!k) throw ConfigError(w + ": unknown script '" + raw + "'");
        return *k;
    }
};

struct Field {
    std::string section;
    std::string key;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <class Access>
Field field(std::string section, std::string key, Access access) {
    Field f;
    f.section = section;
    f.key = key;
    f.get = [access](const ExperimentConfig& c) {
        auto& ref = access(const_cast<ExperimentConfig&>(c));
        return Codec<std::decay_t<decltype(ref)>>::put(ref);
    };
    const std::string where = section + "." + key;
    f.set = [access, where](ExperimentConfig& c, const std::string& v) {
        auto& ref = access(c);
        ref = Codec<std::decay_t<decltype(ref)>>::get(v, where);
    };
    return f;
}

#define SSIP_FIELD(sec, key, expr) field(sec, key, [](ExperimentConfig& c) -> auto& { return expr; })

const std::vector<Field>& schema() {
    static const std::vector<Field> fields = {
        SSIP_FIELD("schedules", "gamma_scale", c.schedules.gamma_scale),
        SSIP_FIELD("schedules", "sigma0", c.schedules.sigma0),
        SSIP_FIELD("schedules", "k_gain", c.schedules.k_gain),
        SSIP_FIELD("schedules", "epsilon_kind", c.schedules.epsilon_kind),
        SSIP_FIELD("schedules", "epsilon_value", c.schedules.epsilon_value),
        SSIP_FIELD("schedules", "gamma_floor", c.schedules.gamma_floor),

        SSIP_FIELD("train", "learning_rate", c.train.learning_rate),
        SSIP_FIELD("train", "batch_size", c.train.batch_size),
        SSIP_FIELD("train", "epochs", c.train.epochs),
        SSIP_FIELD("train", "beta1", c.train.beta1),
        SSIP_FIELD("train", "beta2", c.train.beta2),
        SSIP_FIELD("train", "adam_eps", c.train.adam_eps),
        SSIP_FIELD("train", "init_scale", c.train.init_scale),
        SSIP_FIELD("train", "seed", c.train.seed),
        SSIP_FIELD("train", "hidden", c.train.hidden),

        SSIP_FIELD("sampler", "mode", c.sampler.mode),
        SSIP_FIELD("sampler", "horizon", c.sampler.horizon),
        SSIP_FIELD("sampler", "exec_horizon", c.sampler.exec_horizon),

        SSIP_FIELD("guidance", "lambda", c.guidance.lambda),
        SSIP_FIELD("guidance", "d_act", c.guidance.d_act),
        SSIP_FIELD("guidance", "k_power", c.guidance.k_power),
        SSIP_FIELD("guidance", "grad_clip", c.guidance.grad_clip),

        SSIP_FIELD("ensemble", "members", c.ensemble.members),
        SSIP_FIELD("ensemble", "steps", c.ensemble.steps),
        SSIP_FIELD("ensemble", "dt_sim", c.ensemble.dt_sim),
        SSIP_FIELD("ensemble", "sigma_rollout", c.ensemble.sigma_rollout),

        SSIP_FIELD("world", "size", c.world.size),
        SSIP_FIELD("world", "goal_x", c.world.goal[0]),
        SSIP_FIELD("world", "goal_y", c.world.goal[1]),
        SSIP_FIELD("world", "goal_tolerance", c.world.goal_tolerance),
        SSIP_FIELD("world", "max_steps", c.world.max_steps),
        SSIP_FIELD("world", "collision_margin", c.world.collision_margin),
        SSIP_FIELD("world", "max_agent_step", c.world.max_agent_step),
        SSIP_FIELD("world", "sigma_cost", c.world.sigma_cost),

        SSIP_FIELD("script", "kind", c.script.kind),
        SSIP_FIELD("script", "static_count", c.script.static_count),
        SSIP_FIELD("script", "on_path_count", c.script.on_path_count),
        SSIP_FIELD("script", "obstacle_radius", c.script.obstacle_radius),
        SSIP_FIELD("script", "lateral_jitter", c.script.lateral_jitter),
        SSIP_FIELD("script", "intercept_deadline", c.script.intercept_deadline),
        SSIP_FIELD("script", "oscillate_amplitude", c.script.oscillate_amplitude),
        SSIP_FIELD("script", "oscillate_frequency", c.script.oscillate_frequency),
        SSIP_FIELD("script", "chase_turn_rate", c.script.chase_turn_rate),
        SSIP_FIELD("script", "chase_max_speed", c.script.chase_max_speed),

        SSIP_FIELD("demos", "count", c.demos.count),
        SSIP_FIELD("demos", "steps", c.demos.steps),
        SSIP_FIELD("demos", "seed", c.demos.seed),

        SSIP_FIELD("ccg", "train_probability", c.ccg.train_probability),
        SSIP_FIELD("ccg", "train_distance", c.ccg.train_distance),
        SSIP_FIELD("ccg", "episodes", c.ccg.episodes),
        SSIP_FIELD("ccg", "samples_per_state", c.ccg.samples_per_state),
        SSIP_FIELD("ccg", "placement_radius", c.ccg.placement_radius),
        SSIP_FIELD("ccg", "rollouts", c.ccg.rollouts),
        SSIP_FIELD("ccg", "rollout_steps", c.ccg.rollout_steps),
        SSIP_FIELD("ccg", "seed", c.ccg.seed),
        SSIP_FIELD("ccg", "hidden", c.critic.hidden),
        SSIP_FIELD("ccg", "learning_rate", c.critic.learning_rate),
        SSIP_FIELD("ccg", "batch_size", c.critic.batch_size),
        SSIP_FIELD("ccg", "epochs", c.critic.epochs),

        SSIP_FIELD("eval", "seeds", c.eval.seeds),
        SSIP_FIELD("eval", "seed_offset", c.eval.seed_offset),
        SSIP_FIELD("eval", "methods", c.eval.methods),
        SSIP_FIELD("eval", "lambda_grid", c.eval.lambda_grid),
        SSIP_FIELD("eval", "workers", c.eval.workers),

        SSIP_FIELD("output", "dir", c.out_dir),
    };
    return fields;
}

#undef SSIP_FIELD

}  // namespace

void ExperimentConfig::validate() const {
    try {
        schedules.validate();
        train.validate();
        sampler.validate();
        guidance.validate();
        ensemble.validate();
        world.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    if (demos.count == 0 || demos.steps < 2) throw ConfigError("demos: need count >= 1 and steps >= 2");
    if (ccg.rollouts == 0 || ccg.rollout_steps == 0) throw ConfigError("ccg: rollouts and rollout_steps >= 1");
    if (!(ccg.placement_radius > 0.0)) throw ConfigError("ccg: placement_radius must be > 0");
    if (critic.batch_size == 0) throw ConfigError("ccg: batch_size must be >= 1");
    if (eval.seeds == 0) throw ConfigError("eval: seeds must be >= 1");
    if (out_dir.empty()) throw ConfigError("output: dir must be non-empty");
}

ExperimentConfig parse_config(const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    ExperimentConfig cfg;
    for (const auto& [section, body] : tree) {
        if (body.empty()) throw ConfigError("config: key '" + section + "' must live inside a [section]");
        for (const auto& [key, node] : body) {
            const auto& fields = schema();
            const auto it = std::find_if(fields.begin(), fields.end(), [&](const Field& f) {
                return f.section == section && f.key == key;
            });
            if (it == fields.end()) throw ConfigError("config: unknown key '" + section + "." + key + "'");
            it->set(cfg, node.get_value<std::string>());
        }
    }
    cfg.train.horizon = static_cast<std::size_t>(cfg.sampler.horizon);
    cfg.critic.seed = cfg.ccg.seed;
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string dump_config(const ExperimentConfig& config) {
    std::ostringstream os;
    std::string section;
    for (const Field& f : schema()) {
        if (f.section != section) {
            os << (section.empty() ? "" : "\n") << '[' << f.section << "]\n";
            section = f.section;
        }
        os << f.key << " = " << f.get(config) << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'S', 'I', 'P', 'C', 'K', 'P', 'T'};

class Writer {
public:
    void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void raw(const char* p, std::size_t n) { bytes_.append(p, n); }
    std::string take() { return std::move(bytes_); }

private:
    std::string bytes_;
};

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string raw(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw CheckpointError("checkpoint: truncated");
    }
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

void write_mlp(Writer& w, const tape::MlpParams& p) {
    w.u32(static_cast<std::uint32_t>(p.layers.size()));
    for (const tape::Layer& l : p.layers) {
        w.u32(static_cast<std::uint32_t>(l.weight.cols()));
        w.u32(static_cast<std::uint32_t>(l.weight.rows()));
        w.u8(static_cast<std::uint8_t>(l.activation));
    }
    const Vec flat = p.flatten();
    w.u64(flat.size());
    for (double v : flat) w.f64(v);
}

tape::MlpParams read_mlp(Reader& r) {
    tape::MlpParams p;
    const std::uint32_t n = r.u32();
    if (n == 0 || n > 64) throw CheckpointError("checkpoint: bad layer count");
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint32_t in = r.u32();
        const std::uint32_t out = r.u32();
        const std::uint8_t act = r.u8();
        if (act > 1) throw CheckpointError("checkpoint: bad activation tag");
        tape::Layer l;
        l.weight = tape::Tensor(out, in);
        l.bias = tape::Tensor(1, out);
        l.activation = static_cast<tape::Activation>(act);
        p.layers.push_back(std::move(l));
    }
    const std::uint64_t count = r.u64();
    if (count != p.parameter_count()) throw CheckpointError("checkpoint: parameter count does not match architecture");
    Vec flat(count);
    for (double& v : flat) v = r.f64();
    p.assign(flat);
    try {
        p.validate();
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
    return p;
}

}  // namespace

const Critic* Checkpoint::critic(CcgVariant variant) const {
    for (const Critic& c : critics) {
        if (c.variant == variant) return &c;
    }
    return nullptr;
}

void Checkpoint::validate() const {
    try {
        nets.validate();
        for (const Critic& c : critics) c.net.validate();
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
    if (normalizer.lo.size() != nets.action_dim() || normalizer.hi.size() != nets.action_dim()) {
        throw CheckpointError("checkpoint: normalizer dims do not match the policy");
    }
    for (const Critic& c : critics) {
        if (c.net.output_dim() != 1) throw CheckpointError("checkpoint: critic must be scalar");
    }
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    ckpt.validate();
    Writer w;
    w.raw(kMagic, sizeof(kMagic));
    w.u32(Checkpoint::kVersion);
    w.u64(ckpt.seed);
    w.u64(ckpt.epoch);
    w.u32(static_cast<std::uint32_t>(ckpt.normalizer.lo.size()));
    for (double v : ckpt.normalizer.lo) w.f64(v);
    for (double v : ckpt.normalizer.hi) w.f64(v);
    write_mlp(w, ckpt.nets.v_net);
    write_mlp(w, ckpt.nets.eta_net);
    w.u32(static_cast<std::uint32_t>(ckpt.critics.size()));
    for (const Critic& c : ckpt.critics) {
        w.u8(static_cast<std::uint8_t>(c.variant));
        write_mlp(w, c.net);
    }
    return w.take();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    if (r.raw(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) throw CheckpointError("checkpoint: bad magic");
    const std::uint32_t version = r.u32();
    if (version != Checkpoint::kVersion) {
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    }
    Checkpoint c;
    c.seed = r.u64();
    c.epoch = r.u64();
    const std::uint32_t dim = r.u32();
    if (dim == 0 || dim > 1024) throw CheckpointError("checkpoint: bad normalizer dim");
    c.normalizer.lo.resize(dim);
    c.normalizer.hi.resize(dim);
    for (double& v : c.normalizer.lo) v = r.f64();
    for (double& v : c.normalizer.hi) v = r.f64();
    c.nets.v_net = read_mlp(r);
    c.nets.eta_net = read_mlp(r);
    const std::uint32_t n_critics = r.u32();
    if (n_critics > 2) throw CheckpointError("checkpoint: too many critics");
    for (std::uint32_t i = 0; i < n_critics; ++i) {
        Critic critic;
        const std::uint8_t variant = r.u8();
        if (variant > 1) throw CheckpointError("checkpoint: bad critic variant");
        critic.variant = static_cast<CcgVariant>(variant);
        critic.net = read_mlp(r);
        c.critics.push_back(std::move(critic));
    }
    if (!r.done()) throw CheckpointError("checkpoint: trailing bytes");
    c.validate();
    return c;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
    const std::string bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

void check_compatible(const Checkpoint& ckpt, const ExperimentConfig& config) {
    ckpt.validate();
    if (ckpt.nets.action_dim() != 2) throw CheckpointError("checkpoint: policy must emit 2D actions");
    if (ckpt.nets.context_dim() != 2) throw CheckpointError("checkpoint: policy context must be 2D");
    for (Method m : config.eval.methods) {
        if (m == Method::ccg_p && !ckpt.critic(CcgVariant::probability)) {
            throw CheckpointError("checkpoint: ccg_p needs a probability critic");
        }
        if (m == Method::ccg_d && !ckpt.critic(CcgVariant::distance)) {
            throw CheckpointError("checkpoint: ccg_d needs a distance critic");
        }
    }
}

// ---------------------------------------------------------------------------
// Training

std::vector<Demonstration> make_demos(const ExperimentConfig& config) {
    return generate_demos(config.demos.count, config.demos.seed, config.world, config.demos.steps);
}

std::vector<CriticSample> collect_critic_data(const ExperimentConfig& config, const PolicyNets& nets,
                                              const Normalizer& normalizer, CcgVariant variant) {
    const SamplerConfig& sc = config.sampler;
    const PolicyDrift model(nets, sc.schedules);
    const double dt = sc.dt();
    const double kick = config.ensemble.sigma_rollout * std::sqrt(dt);
    const double radius = config.script.obstacle_radius + config.world.collision_margin;
    const double two_pi = 2.0 * std::acos(-1.0);
    std::vector<CriticSample> data;

    for (std::size_t e = 0; e < config.ccg.episodes; ++e) {
        World2D world = make_world(WorldScript{}, config.world, derive_seed(config.ccg.seed, {kTagCritic, e}));
        std::mt19937_64 rng = make_stream(config.ccg.seed, {kTagCritic, 1, e});
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        std::normal_distribution<double> normal(0.0, 1.0);
        StreamState s;
        for (int i = 0; i < config.world.max_steps; ++i) {
            const auto step = static_cast<std::size_t>(i);
            if (i % sc.exec_horizon == 0) {
                s.a = normalizer.normalize(world.agent);
                s.h = s.a;
            }
            s.t = aligned_flow_time(step, sc);
            s.step_index = step;

            for (std::size_t k = 0; k < config.ccg.samples_per_state; ++k) {
                const double r = config.ccg.placement_radius * std::sqrt(unif(rng));
                const double th = two_pi * unif(rng);
                const Vec2 center = world.agent + Vec2{r * std::cos(th), r * std::sin(th)};
                const std::vector<Obstacle> obstacle = {Obstacle{center, config.script.obstacle_radius}};
                std::vector<double> costs(config.ccg.rollouts, 0.0);
                std::vector<double> dists(config.ccg.rollouts, distance(world.agent, center));
                for (std::size_t m = 0; m < config.ccg.rollouts; ++m) {
                    Vec x = s.a;
                    for (std::size_t j = 0; j < config.ccg.rollout_steps; ++j) {
                        const double tj = std::min(s.t + static_cast<double>(j) * dt, 1.0);
                        const Vec b = model.drift(x, tj, s.h, DriftForm::sde);
                        for (std::size_t d = 0; d < x.size(); ++d) x[d] += b[d] * dt + kick * normal(rng);
                        const Vec p = normalizer.denormalize(x);
                        const Vec2 pw{p[0], p[1]};
                        dists[m] = std::min(dists[m], distance(pw, center));
                        costs[m] += running_cost(pw, obstacle, config.world.sigma_cost) * dt;
                    }
                }
                const CcgTargets y = ccg_targets(costs, dists, radius);
                data.push_back(CriticSample{s.a, s.t, s.h, normalizer.normalize(center),
                                            variant == CcgVariant::probability ? y.y_probability : y.y_distance});
            }

            const Vec zero(s.a.size(), 0.0);
            StreamState next;
            if (sc.mode == SamplerMode::sde) {
                std::mt19937_64 noise = make_stream(config.ccg.seed, {kTagSampler, e, step});
                next = sde_step(s, model, zero, dt, noise);
            } else {
                next = ode_step(s, model, zero, dt);
            }
            const Vec act = normalizer.denormalize(next.a);
            world.step({act[0], act[1]});
            if (world.goal_distance() < world.params.goal_tolerance) break;
            s = next;
        }
    }
    return data;
}

TrainOutcome train_experiment(const ExperimentConfig& config) {
    config.validate();
    const std::vector<Demonstration> demos = make_demos(config);
    TrainConfig tc = config.train;
    tc.horizon = static_cast<std::size_t>(config.sampler.horizon);
    TrainedPolicy policy = train(demos, config.schedules, tc);

    TrainOutcome out;
    out.checkpoint.nets = std::move(policy.nets);
    out.checkpoint.normalizer = policy.normalizer;
    out.checkpoint.seed = tc.seed;
    out.checkpoint.epoch = tc.epochs;
    out.curve = std::move(policy.curve);

    for (CcgVariant v : {CcgVariant::probability, CcgVariant::distance}) {
        const bool wanted = v == CcgVariant::probability ? config.ccg.train_probability : config.ccg.train_distance;
        if (!wanted) continue;
        const auto data = collect_critic_data(config, out.checkpoint.nets, out.checkpoint.normalizer, v);
        CriticTrainConfig cc = config.critic;
        cc.variant = v;
        cc.seed = config.ccg.seed;
        out.checkpoint.critics.push_back(ccg_train(data, cc));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

PolicyRuntime method_runtime(Method method, double lambda, const ExperimentConfig& config, const Checkpoint& ckpt) {
    PolicyRuntime rt;
    rt.nets = &ckpt.nets;
    rt.normalizer = &ckpt.normalizer;
    rt.sampler = config.sampler;
    rt.sampler.schedules = config.schedules;
    rt.sampler.execution = Execution::streaming;
    rt.guidance = config.guidance;
    rt.guidance.lambda = lambda;
    rt.ensemble = config.ensemble;
    switch (method) {
        case Method::unguided:
            rt.guidance.mechanism = Mechanism::none;
            break;
        case Method::repulsion:
            rt.guidance.mechanism = Mechanism::repulsion;
            break;
        case Method::steg:
            rt.guidance.mechanism = Mechanism::steg;
            break;
        case Method::ccg_p:
        case Method::ccg_d: {
            const CcgVariant v = method == Method::ccg_p ? CcgVariant::probability : CcgVariant::distance;
            rt.critic = ckpt.critic(v);
            if (rt.critic == nullptr) throw CheckpointError("checkpoint has no critic for " + to_string(method));
            rt.guidance.mechanism = Mechanism::ccg;
            rt.guidance.ccg_variant = v;
            break;
        }
        case Method::chunked:
            rt.sampler.execution = Execution::chunked;
            rt.guidance.mechanism = Mechanism::none;
            break;
        case Method::chunked_lookahead:
            rt.sampler.execution = Execution::chunked;
            rt.guidance.mechanism = Mechanism::lookahead;
            break;
    }
    return rt;
}

namespace {

template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = next++; i < n; i = next++) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (std::thread& t : pool) t.join();
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

bool is_guided(Method m) { return m != Method::unguided && m != Method::chunked; }

}  // namespace

std::vector<EvalRow> evaluate(Method method, double lambda, const ExperimentConfig& config, const Checkpoint& ckpt,
                              const WorldScript& script) {
    const double lam = is_guided(method) ? lambda : 0.0;
    const PolicyRuntime rt = method_runtime(method, lam, config, ckpt);
    std::vector<EvalRow> rows(config.eval.seeds);
    parallel_for(rows.size(), config.eval.workers, [&](std::size_t i) {
        const std::uint64_t seed = config.eval.seed_offset + i;
        const World2D world = make_world(script, config.world, seed);
        const EpisodeResult r = run_episode(world, rt, seed);
        EvalRow& row = rows[i];
        row.method = method;
        row.lambda = lam;
        row.seed = seed;
        row.success = r.success;
        row.collided = r.collided;
        row.reward = r.reward;
        row.min_dist = r.min_obstacle_distance;
        row.latency_ms = r.mean_latency_ms();
    });
    return rows;
}

Aggregate aggregate(std::span<const EvalRow> rows) {
    Aggregate a;
    if (rows.empty()) return a;
    a.method = rows.front().method;
    a.lambda = rows.front().lambda;
    a.episodes = rows.size();
    const double n = static_cast<double>(rows.size());
    std::size_t successes = 0;
    std::size_t collisions = 0;
    for (const EvalRow& r : rows) {
        successes += r.success ? 1 : 0;
        collisions += r.collided ? 1 : 0;
        a.mean_reward += r.reward;
        a.mean_latency_ms += r.latency_ms;
    }
    a.success_rate_pct = 100.0 * static_cast<double>(successes) / n;
    a.collision_rate = static_cast<double>(collisions) / n;
    a.mean_reward /= n;
    a.mean_latency_ms /= n;

    // Percentile bootstrap of the success rate.
    constexpr std::size_t kResamples = 2000;
    std::mt19937_64 rng = make_stream(rows.front().seed, {static_cast<std::uint64_t>(a.method), rows.size()});
    std::uniform_int_distribution<std::size_t> pick(0, rows.size() - 1);
    std::vector<double> rates(kResamples);
    for (double& rate : rates) {
        std::size_t s = 0;
        for (std::size_t i = 0; i < rows.size(); ++i) s += rows[pick(rng)].success ? 1 : 0;
        rate = 100.0 * static_cast<double>(s) / n;
    }
    std::sort(rates.begin(), rates.end());
    a.sr_ci_lo = rates[static_cast<std::size_t>(0.025 * kResamples)];
    a.sr_ci_hi = rates[static_cast<std::size_t>(0.975 * kResamples) - 1];
    return a;
}

void mark_dominated(std::vector<Aggregate>& rows) {
    for (Aggregate& r : rows) {
        r.dominated = std::any_of(rows.begin(), rows.end(), [&](const Aggregate& o) {
            return o.mean_reward > r.mean_reward && o.safety_rate() > r.safety_rate();
        });
    }
}

namespace {

std::ofstream open_csv(const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(17);
    return out;
}

}  // namespace

void write_eval_csv(const fs::path& path, std::span<const EvalRow> rows) {
    std::ofstream out = open_csv(path);
    out << "method,lambda,seed,success,collided,reward,min_dist\n";
    for (const EvalRow& r : rows) {
        out << to_string(r.method) << ',' << r.lambda << ',' << r.seed << ',' << (r.success ? 1 : 0) << ','
            << (r.collided ? 1 : 0) << ',' << r.reward << ',' << r.min_dist << '\n';
    }
}

void write_latency_csv(const fs::path& path, std::span<const EvalRow> rows) {
    std::ofstream out = open_csv(path);
    out << "method,lambda,seed,latency_ms_per_step\n";
    for (const EvalRow& r : rows) {
        out << to_string(r.method) << ',' << r.lambda << ',' << r.seed << ',' << r.latency_ms << '\n';
    }
}

void write_aggregate_csv(const fs::path& path, std::span<const Aggregate> rows) {
    std::ofstream out = open_csv(path);
    out << "method,lambda,episodes,success_rate_pct,sr_ci_lo,sr_ci_hi,collision_rate,mean_reward,mean_latency_ms\n";
    for (const Aggregate& a : rows) {
        out << to_string(a.method) << ',' << a.lambda << ',' << a.episodes << ',' << a.success_rate_pct << ','
            << a.sr_ci_lo << ',' << a.sr_ci_hi << ',' << a.collision_rate << ',' << a.mean_reward << ','
            << a.mean_latency_ms << '\n';
    }
}

void write_sweep_csv(const fs::path& path, std::span<const Aggregate> rows) {
    std::ofstream out = open_csv(path);
    out << "method,lambda,episodes,mean_reward,safety_rate,collision_rate,success_rate_pct,dominated\n";
    for (const Aggregate& a : rows) {
        out << to_string(a.method) << ',' << a.lambda << ',' << a.episodes << ',' << a.mean_reward << ','
            << a.safety_rate() << ',' << a.collision_rate << ',' << a.success_rate_pct << ','
            << (a.dominated ? 1 : 0) << '\n';
    }
}

void write_curve_csv(const fs::path& path, std::span<const EpochLoss> curve) {
    std::ofstream out = open_csv(path);
    out << "epoch,velocity_loss,score_loss\n";
    for (const EpochLoss& e : curve) out << e.epoch << ',' << e.velocity_loss << ',' << e.score_loss << '\n';
}

// ---------------------------------------------------------------------------
// Closed-loop checks

namespace {

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string pct(double v) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(1);
    os << v;
    return os.str();
}

std::string with_ci(const Aggregate& a) {
    return pct(a.success_rate_pct) + "% [" + pct(a.sr_ci_lo) + ", " + pct(a.sr_ci_hi) + "]";
}

class CellCache {
public:
    CellCache(const ExperimentConfig& config, const Checkpoint& ckpt) : config_(config), ckpt_(ckpt) {}

    const std::vector<EvalRow>& rows(Method m, double lambda, const WorldScript& script) {
        const auto key = std::make_tuple(static_cast<int>(m), is_guided(m) ? lambda : 0.0,
                                         static_cast<int>(script.kind));
        auto it = cache_.find(key);
        if (it == cache_.end()) it = cache_.emplace(key, evaluate(m, lambda, config_, ckpt_, script)).first;
        return it->second;
    }
    Aggregate agg(Method m, double lambda, const WorldScript& script) { return aggregate(rows(m, lambda, script)); }

private:
    const ExperimentConfig& config_;
    const Checkpoint& ckpt_;
    std::map<std::tuple<int, double, int>, std::vector<EvalRow>> cache_;
};

template <class Body>
CheckResult run_check(int id, std::string name, Body&& body) {
    CheckResult r;
    r.id = id;
    r.name = std::move(name);
    const auto start = std::chrono::steady_clock::now();
    try {
        body(r);
    } catch (const std::exception& e) {
        r.passed = false;
        r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

}  // namespace

std::vector<CheckResult> closed_loop_checks(const ExperimentConfig& config, const Checkpoint& ckpt,
                                            const fs::path& out_dir) {
    fs::create_directories(out_dir);
    CellCache cells(config, ckpt);
    WorldScript empty = config.script;
    empty.kind = ScriptKind::empty;
    WorldScript field = config.script;
    field.kind = ScriptKind::static_field;
    WorldScript chase = config.script;
    chase.kind = ScriptKind::chase;
    const double lambda = config.guidance.lambda;
    std::vector<CheckResult> out;

    out.push_back(run_check(9, "base_policy", [&](CheckResult& r) {
        const auto& rows = cells.rows(Method::unguided, 0.0, empty);
        write_eval_csv(out_dir / "base_policy.csv", rows);
        const Aggregate a = aggregate(rows);
        r.passed = a.success_rate_pct > 90.0;
        r.detail = "obstacle-free SR " + with_ci(a) + " over " + std::to_string(a.episodes) + " seeds (need > 90%)";
    }));

    out.push_back(run_check(10, "guidance_efficacy", [&](CheckResult& r) {
        std::vector<Aggregate> aggs = {cells.agg(Method::unguided, 0.0, field)};
        for (Method m : {Method::repulsion, Method::steg, Method::ccg_p}) aggs.push_back(cells.agg(m, lambda, field));
        write_aggregate_csv(out_dir / "static_field.csv", aggs);
        const double base = aggs.front().success_rate_pct;
        r.passed = true;
        std::ostringstream os;
        os << "unguided " << with_ci(aggs.front());
        for (std::size_t i = 1; i < aggs.size(); ++i) {
            r.passed = r.passed && aggs[i].success_rate_pct >= base + 20.0;
            os << ", " << to_string(aggs[i].method) << ' ' << with_ci(aggs[i]);
        }
        r.detail = os.str() + " (each needs >= unguided + 20)";
    }));

    out.push_back(run_check(11, "reactivity", [&](CheckResult& r) {
        const std::vector<Aggregate> aggs = {cells.agg(Method::chunked_lookahead, lambda, chase),
                                             cells.agg(Method::steg, lambda, chase),
                                             cells.agg(Method::ccg_p, lambda, chase),
                                             cells.agg(Method::unguided, 0.0, chase)};
        write_aggregate_csv(out_dir / "chase.csv", aggs);
        const double base = aggs[0].success_rate_pct;
        r.passed = aggs[1].success_rate_pct > base && aggs[2].success_rate_pct > base;
        r.detail = "chunked_lookahead " + with_ci(aggs[0]) + ", steg " + with_ci(aggs[1]) + ", ccg_p " +
                   with_ci(aggs[2]) + ", unguided " + with_ci(aggs[3]) + " (streaming must beat chunked)";
    }));

    out.push_back(run_check(12, "pareto", [&](CheckResult& r) {
        const std::vector<double> grid = {0.0, 0.5, 1.0, 2.0, 4.0, 8.0};
        std::vector<Aggregate> sweep;
        r.passed = true;
        std::ostringstream os;
        for (Method m : {Method::repulsion, Method::steg, Method::ccg_p}) {
            for (double l : grid) {
                Aggregate a = cells.agg(m, l, field);
                a.method = m;
                a.lambda = l;
                sweep.push_back(a);
            }
            const double lo = sweep[sweep.size() - grid.size()].collision_rate;
            const double hi = sweep.back().collision_rate;
            r.passed = r.passed && hi <= lo;
            os << to_string(m) << " CR " << pct(100 * lo) << "% -> " << pct(100 * hi) << "%; ";
        }
        mark_dominated(sweep);
        write_sweep_csv(out_dir / "pareto.csv", sweep);
        r.detail = os.str() + "(lambda 0 -> 8, must not increase)";
    }));

    out.push_back(run_check(13, "determinism", [&](CheckResult& r) {
        ExperimentConfig small = config;
        small.eval.seeds = std::min<std::size_t>(config.eval.seeds, 10);
        std::vector<std::string> bytes;
        for (int run = 0; run < 2; ++run) {
            std::vector<EvalRow> rows;
            for (Method m : {Method::unguided, Method::steg, Method::ccg_p, Method::chunked_lookahead}) {
                const auto part = evaluate(m, lambda, small, ckpt, field);
                rows.insert(rows.end(), part.begin(), part.end());
            }
            const fs::path p = out_dir / ("determinism_run" + std::to_string(run) + ".csv");
            write_eval_csv(p, rows);
            bytes.push_back(read_file(p));
        }
        r.passed = !bytes[0].empty() && bytes[0] == bytes[1];
        r.detail = std::to_string(bytes[0].size()) + " bytes per run, identical: " + (r.passed ? "yes" : "no");
    }));
    return out;
}

// ---------------------------------------------------------------------------
// Commands

ExperimentConfig resolve_config(const CommandOptions& opts) {
    ExperimentConfig cfg = opts.config ? load_config(*opts.config) : ExperimentConfig{};
    if (opts.out) cfg.out_dir = opts.out->string();
    if (opts.seeds) cfg.eval.seeds = *opts.seeds;
    if (opts.lambda_grid) cfg.eval.lambda_grid = *opts.lambda_grid;
    cfg.train.horizon = static_cast<std::size_t>(cfg.sampler.horizon);
    cfg.validate();
    return cfg;
}

namespace {

fs::path prepare_out(const ExperimentConfig& cfg) {
    const fs::path dir(cfg.out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output dir " + dir.string());
    return dir;
}

Checkpoint require_checkpoint(const CommandOptions& opts, const ExperimentConfig& cfg) {
    if (!opts.checkpoint) throw ConfigError("--checkpoint is required");
    Checkpoint ckpt = load_checkpoint(*opts.checkpoint);
    check_compatible(ckpt, cfg);
    return ckpt;
}

template <class Body>
int guarded(const char* name, Body&& body) {
    try {
        return body();
    } catch (const TrainingDivergence& e) {
        std::cerr << name << ": training diverged: " << e.what() << '\n';
        return kExitDivergence;
    } catch (const std::exception& e) {
        std::cerr << name << ": " << e.what() << '\n';
        return kExitUsage;
    }
}

}  // namespace

int cmd_train(const CommandOptions& opts) {
    return guarded("train", [&] {
        const ExperimentConfig cfg = resolve_config(opts);
        const fs::path dir = prepare_out(cfg);
        const TrainOutcome out = train_experiment(cfg);
        const fs::path ckpt_path = opts.checkpoint ? *opts.checkpoint : dir / "checkpoint.bin";
        save_checkpoint(out.checkpoint, ckpt_path);
        write_curve_csv(dir / "training_curve.csv", out.curve);
        std::cout << "checkpoint " << ckpt_path.string() << " (" << out.curve.size() << " epochs, "
                  << out.checkpoint.critics.size() << " critics)\n";
        return int{kExitOk};
    });
}

int cmd_eval(const CommandOptions& opts) {
    return guarded("eval", [&] {
        const ExperimentConfig cfg = resolve_config(opts);
        const Checkpoint ckpt = require_checkpoint(opts, cfg);
        const fs::path dir = prepare_out(cfg);
        std::vector<EvalRow> rows;
        std::vector<Aggregate> aggs;
        for (Method m : cfg.eval.methods) {
            const auto part = evaluate(m, cfg.guidance.lambda, cfg, ckpt, cfg.script);
            aggs.push_back(aggregate(part));
            rows.insert(rows.end(), part.begin(), part.end());
        }
        write_eval_csv(dir / "metrics.csv", rows);
        write_latency_csv(dir / "latency.csv", rows);
        write_aggregate_csv(dir / "aggregate.csv", aggs);
        for (const Aggregate& a : aggs) {
            std::cout << to_string(a.method) << " lambda=" << a.lambda << " SR=" << with_ci(a)
                      << " collisions=" << pct(100 * a.collision_rate) << "% reward=" << a.mean_reward
                      << " latency_ms=" << a.mean_latency_ms << '\n';
        }
        return int{kExitOk};
    });
}

int cmd_sweep(const CommandOptions& opts) {
    return guarded("sweep", [&] {
        const ExperimentConfig cfg = resolve_config(opts);
        if (cfg.eval.lambda_grid.empty()) throw ConfigError("sweep: empty lambda grid");
        const Checkpoint ckpt = require_checkpoint(opts, cfg);
        const fs::path dir = prepare_out(cfg);
        std::vector<EvalRow> rows;
        std::vector<Aggregate> aggs;
        for (Method m : cfg.eval.methods) {
            for (double l : cfg.eval.lambda_grid) {
                const auto part = evaluate(m, l, cfg, ckpt, cfg.script);
                Aggregate a = aggregate(part);
                a.lambda = l;
                aggs.push_back(a);
                rows.insert(rows.end(), part.begin(), part.end());
            }
        }
        mark_dominated(aggs);
        write_eval_csv(dir / "sweep_rows.csv", rows);
        write_sweep_csv(dir / "pareto.csv", aggs);
        std::cout << "pareto rows: " << aggs.size() << " -> " << (dir / "pareto.csv").string() << '\n';
        return int{kExitOk};
    });
}

int cmd_verify(const CommandOptions& opts) {
    return guarded("verify", [&] {
        const ExperimentConfig cfg = resolve_config(opts);
        const fs::path dir = prepare_out(cfg);
        VerifyReport report = run_verification();
        if (opts.checkpoint) {
            const Checkpoint ckpt = require_checkpoint(opts, cfg);
            for (CheckResult& c : closed_loop_checks(cfg, ckpt, dir)) report.checks.push_back(std::move(c));
        } else {
            for (int id = 9; id <= 13; ++id) {
                std::cout << "criterion " << id << ": SKIP (needs --checkpoint)\n";
            }
        }
        report.write_csv((dir / "verify_evidence.csv").string());
        std::ofstream summary = open_csv(dir / "verify_report.csv");
        summary << "criterion,name,status,seconds,detail\n";
        for (const CheckResult& c : report.checks) {
            std::cout << format_check(c) << '\n';
            std::string detail = c.detail;
            std::replace(detail.begin(), detail.end(), ',', ';');
            summary << c.id << ',' << c.name << ',' << (c.passed ? "PASS" : "FAIL") << ',' << c.seconds << ','
                    << detail << '\n';
        }
        return report.all_passed() ? int{kExitOk} : int{kExitVerify};
    });
}

int cmd_gen_demos(const CommandOptions& opts) {
    return guarded("gen-demos", [&] {
        const ExperimentConfig cfg = resolve_config(opts);
        const fs::path dir = prepare_out(cfg);
        const auto demos = make_demos(cfg);
        std::ofstream out = open_csv(dir / "demos.csv");
        out << "demo,step,x,y\n";
        for (std::size_t d = 0; d < demos.size(); ++d) {
            for (std::size_t s = 0; s < demos[d].steps(); ++s) {
                const Vec& p = demos[d].xi()[s];
                out << d << ',' << s << ',' << p[0] << ',' << p[1] << '\n';
            }
        }
        std::cout << demos.size() << " demos -> " << (dir / "demos.csv").string() << '\n';
        return int{kExitOk};
    });
}

}  // namespace ssip
