#include "ssip/guidance.hpp"

#include "ssip/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ssip {

using tape::Graph;
using tape::NodeId;
using tape::Tensor;

std::string to_string(Mechanism m) {
    switch (m) {
        case Mechanism::none: return "none";
        case Mechanism::steg: return "steg";
        case Mechanism::ccg: return "ccg";
        case Mechanism::repulsion: return "repulsion";
        case Mechanism::lookahead: return "lookahead";
    }
    return "unknown";
}

std::optional<Mechanism> parse_mechanism(const std::string& name) {
    for (Mechanism m : {Mechanism::none, Mechanism::steg, Mechanism::ccg, Mechanism::repulsion,
                        Mechanism::lookahead}) {
        if (to_string(m) == name) return m;
    }
    return std::nullopt;
}

void GuidanceConfig::validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("guidance: lambda must be >= 0");
    if (!(d_act > 0.0)) throw std::invalid_argument("guidance: d_act must be > 0");
    if (!(k_power >= 1.0)) throw std::invalid_argument("guidance: k_power must be >= 1");
    if (!(grad_clip > 0.0)) throw std::invalid_argument("guidance: grad_clip must be > 0");
}

void EnsembleConfig::validate() const {
    if (members == 0) throw std::invalid_argument("ensemble: N must be >= 1");
    if (steps == 0) throw std::invalid_argument("ensemble: K must be >= 1");
    if (!(dt_sim > 0.0)) throw std::invalid_argument("ensemble: dt_sim must be > 0");
    if (!(sigma_rollout >= 0.0)) throw std::invalid_argument("ensemble: sigma_rollout must be >= 0");
}

Vec clip_norm(std::span<const double> v, double max_norm) {
    Vec out(v.begin(), v.end());
    const double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (n > max_norm) {
        for (double& x : out) x *= max_norm / n;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Costs

ObstacleCost::ObstacleCost(std::vector<Vec2> centers, double sigma_cost, const Normalizer& normalizer)
    : centers_(std::move(centers)), sigma_(sigma_cost), normalizer_(normalizer) {
    if (!(sigma_ > 0.0)) throw std::invalid_argument("obstacle cost: sigma must be > 0");
}

NodeId ObstacleCost::running(Graph& graph, NodeId a) const {
    const Tensor& av = graph.value(a);
    if (centers_.empty()) return graph.leaf(Tensor(av.rows(), 1));
    const Vec w = normalizer_.world_per_unit();
    Tensor scale(av.rows(), av.cols());
    for (std::size_t r = 0; r < av.rows(); ++r) {
        for (std::size_t j = 0; j < av.cols(); ++j) scale(r, j) = w[j];
    }
    Tensor offset(1, av.cols());
    for (std::size_t j = 0; j < av.cols(); ++j) offset[j] = normalizer_.lo[j] + w[j];
    const NodeId x = graph.add_const(graph.mul(a, graph.leaf(std::move(scale))), std::move(offset));

    const double k = -1.0 / (2.0 * sigma_ * sigma_);
    std::optional<NodeId> total;
    for (const Vec2& c : centers_) {
        const NodeId diff = graph.add_const(x, Tensor::row({-c[0], -c[1]}));
        const NodeId sq = graph.row_sum(graph.mul(diff, diff));
        const NodeId e = graph.exp(graph.scale(sq, k));
        total = total ? graph.add(*total, e) : e;
    }
    return *total;
}

double ObstacleCost::value(std::span<const double> a) const {
    const Vec x = normalizer_.denormalize(a);
    const double inv = 1.0 / (2.0 * sigma_ * sigma_);
    double c = 0.0;
    for (const Vec2& o : centers_) {
        const double dx = x[0] - o[0];
        const double dy = x[1] - o[1];
        c += std::exp(-(dx * dx + dy * dy) * inv);
    }
    return c;
}

Vec ObstacleCost::gradient(std::span<const double> a) const {
    const Vec x = normalizer_.denormalize(a);
    const Vec w = normalizer_.world_per_unit();
    const double s2 = sigma_ * sigma_;
    Vec g(2, 0.0);
    for (const Vec2& o : centers_) {
        const double dx = x[0] - o[0];
        const double dy = x[1] - o[1];
        const double e = std::exp(-(dx * dx + dy * dy) / (2.0 * s2));
        g[0] += -e * dx / s2 * w[0];
        g[1] += -e * dy / s2 * w[1];
    }
    return g;
}

NodeId QuadraticCost::running(Graph& graph, NodeId a) const {
    if (running_ == 0.0) return graph.leaf(Tensor(graph.value(a).rows(), 1));
    return graph.scale(graph.row_sum(graph.mul(a, a)), 0.5 * running_);
}

std::optional<NodeId> QuadraticCost::terminal(Graph& graph, NodeId a) const {
    if (terminal_ == 0.0) return std::nullopt;
    return graph.scale(graph.row_sum(graph.mul(a, a)), 0.5 * terminal_);
}

NodeId ZeroCost::running(Graph& graph, NodeId a) const {
    return graph.leaf(Tensor(graph.value(a).rows(), 1));
}

// ---------------------------------------------------------------------------
// STEG

std::vector<Tensor> ensemble_noise(const EnsembleConfig& cfg, std::size_t dim, std::uint64_t seed,
                                   std::uint64_t step_index) {
    std::vector<Tensor> noise(cfg.steps, Tensor(cfg.members, dim));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < cfg.members; ++i) {
        std::mt19937_64 rng = make_stream(seed, {kTagEnsemble, step_index, i});
        for (std::size_t k = 0; k < cfg.steps; ++k) {
            for (std::size_t j = 0; j < dim; ++j) noise[k](i, j) = normal(rng);
        }
    }
    return noise;
}

StegTrace steg_value(Graph& graph, NodeId a, double t, std::span<const double> h, const DriftModel& model,
                     const EnsembleConfig& cfg, const RolloutCost& cost, std::span<const Tensor> noise) {
    cfg.validate();
    if (noise.size() != cfg.steps) throw std::invalid_argument("steg: need one noise tensor per rollout step");
    const std::size_t n = cfg.members;
    NodeId x = n == 1 ? a : graph.broadcast_rows(a, n);
    const double diffusion = cfg.sigma_rollout * std::sqrt(cfg.dt_sim);

    std::optional<NodeId> total;
    for (std::size_t k = 0; k < cfg.steps; ++k) {
        const double tk = std::min(t + static_cast<double>(k) * cfg.dt_sim, 1.0);
        const NodeId b = model.drift_node(graph, x, tk, h, DriftForm::sde);
        x = graph.add(x, graph.scale(b, cfg.dt_sim));
        if (noise[k].rows() != n) throw std::invalid_argument("steg: noise rows != N");
        Tensor kick = noise[k];
        for (double& v : kick.values()) v *= diffusion;
        x = graph.add_const(x, std::move(kick));
        const NodeId c = graph.scale(cost.running(graph, x), cfg.dt_sim);
        total = total ? graph.add(*total, c) : c;
    }
    if (auto term = cost.terminal(graph, x)) total = graph.add(*total, *term);

    const NodeId lse = graph.logsumexp(graph.scale(*total, -1.0));
    const NodeId value = graph.add_const(lse, Tensor::scalar(-std::log(static_cast<double>(n))));
    if (!std::isfinite(graph.value(value).item())) throw tape::NonFiniteError("steg: non-finite cost");
    return StegTrace{value, *total, x};
}

StegGradient steg_gradient(std::span<const double> a, double t, std::span<const double> h,
                           const DriftModel& model, const EnsembleConfig& cfg, const RolloutCost& cost,
                           std::span<const Tensor> noise) {
    Graph graph;
    const NodeId an = graph.leaf(Tensor::row(a));
    const StegTrace trace = steg_value(graph, an, t, h, model, cfg, cost, noise);
    const tape::Gradients grads = graph.backward(trace.value);
    const auto g = grads[an].values();
    return StegGradient{graph.value(trace.value).item(), Vec(g.begin(), g.end())};
}

Vec steg_drift(std::span<const double> grad_value, double d_obs, const GuidanceConfig& cfg) {
    Vec out(grad_value.size(), 0.0);
    if (cfg.lambda == 0.0 || d_obs >= cfg.d_act) return out;
    const double w = cfg.lambda * (1.0 - std::max(d_obs, 0.0) / cfg.d_act);
    const Vec g = clip_norm(grad_value, cfg.grad_clip);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = w * g[j];
    return out;
}

// ---------------------------------------------------------------------------
// CCG

CcgTargets ccg_targets(std::span<const double> costs, std::span<const double> min_distances,
                       double collision_radius) {
    if (costs.empty() || costs.size() != min_distances.size()) {
        throw std::invalid_argument("ccg_targets: empty or mismatched rollout set");
    }
    const double m = -*std::min_element(costs.begin(), costs.end());
    double s = 0.0;
    for (double j : costs) s += std::exp(-j - m);
    CcgTargets out;
    out.y_distance = m + std::log(s) - std::log(static_cast<double>(costs.size()));
    const auto hits = std::count_if(min_distances.begin(), min_distances.end(),
                                    [&](double d) { return d < collision_radius; });
    out.y_probability = static_cast<double>(hits) / static_cast<double>(costs.size());
    return out;
}

Tensor critic_input(std::span<const double> a, double t, std::span<const double> h, std::span<const double> phi) {
    Tensor x(1, a.size() + kTimeFeatures + h.size() + phi.size());
    auto v = x.values();
    auto it = std::copy(a.begin(), a.end(), v.begin());
    time_features(t, std::span<double>(it, kTimeFeatures));
    it += kTimeFeatures;
    it = std::copy(h.begin(), h.end(), it);
    std::copy(phi.begin(), phi.end(), it);
    return x;
}

Critic ccg_train(std::span<const CriticSample> dataset, const CriticTrainConfig& cfg) {
    if (dataset.empty()) throw std::invalid_argument("ccg_train: empty dataset");
    if (cfg.batch_size == 0) throw std::invalid_argument("ccg_train: batch size must be >= 1");
    const CriticSample& s0 = dataset.front();
    const std::size_t in_dim = s0.a.size() + kTimeFeatures + s0.h.size() + s0.phi.size();

    std::mt19937_64 rng = make_stream(cfg.seed, {kTagCritic});
    std::vector<std::size_t> dims{in_dim};
    dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
    dims.push_back(1);
    Critic critic;
    critic.variant = cfg.variant;
    critic.net = tape::make_mlp(dims, cfg.init_scale, rng);

    std::vector<Tensor> rows;
    rows.reserve(dataset.size());
    for (const CriticSample& s : dataset) rows.push_back(critic_input(s.a, s.t, s.h, s.phi));

    Adam opt(critic.net.parameter_count(), cfg.learning_rate, 0.9, 0.999, 1e-8);
    Vec flat = critic.net.flatten();
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const std::size_t b = end - start;
            Tensor x(b, in_dim);
            Tensor y(b, 1);
            for (std::size_t i = 0; i < b; ++i) {
                const std::size_t idx = order[start + i];
                std::copy(rows[idx].values().begin(), rows[idx].values().end(),
                          x.values().begin() + static_cast<std::ptrdiff_t>(i * in_dim));
                y[i] = dataset[idx].y;
            }
            Graph g;
            const tape::MlpRecord rec = tape::mlp_forward(g, critic.net, g.leaf(std::move(x)));
            NodeId pred = rec.output;
            if (cfg.variant == CcgVariant::probability) pred = g.sigmoid(pred);
            const NodeId loss = g.scale(g.squared_norm(g.sub(pred, g.leaf(std::move(y)))), 1.0 / static_cast<double>(b));
            if (!std::isfinite(g.value(loss).item())) {
                throw TrainingDivergence(epoch, "ccg_train: loss diverged at epoch " + std::to_string(epoch));
            }
            const tape::Gradients grads = g.backward(loss);
            Vec gflat;
            gflat.reserve(flat.size());
            for (NodeId id : rec.params) {
                const auto gv = grads[id].values();
                gflat.insert(gflat.end(), gv.begin(), gv.end());
            }
            opt.step(flat, gflat);
            critic.net.assign(flat);
        }
    }
    return critic;
}

CriticEval critic_eval(const Critic& critic, std::span<const double> a, double t, std::span<const double> h,
                       std::span<const double> phi) {
    Graph g;
    const NodeId an = g.leaf(Tensor::row(a));
    const Tensor full = critic_input(a, t, h, phi);
    const std::size_t rest = full.cols() - a.size();
    Tensor tail(1, rest);
    std::copy(full.values().begin() + static_cast<std::ptrdiff_t>(a.size()), full.values().end(),
              tail.values().begin());
    const NodeId x = g.concat(an, g.leaf(std::move(tail)));
    const NodeId out = tape::mlp_forward(g, critic.net, x).output;
    const tape::Gradients grads = g.backward(out);
    const auto gv = grads[an].values();
    return CriticEval{g.value(out).item(), Vec(gv.begin(), gv.end())};
}

Vec ccg_drift(std::span<const double> a, double t, std::span<const double> h, std::span<const double> phi,
              const Critic& critic, const GuidanceConfig& cfg) {
    Vec out(a.size(), 0.0);
    if (cfg.lambda == 0.0) return out;
    const CriticEval ev = critic_eval(critic, a, t, h, phi);
    const Vec g = clip_norm(ev.gradient, cfg.grad_clip);
    if (critic.variant == CcgVariant::probability) {
        const double p = ev.value >= 0.0 ? 1.0 / (1.0 + std::exp(-ev.value))
                                         : std::exp(ev.value) / (1.0 + std::exp(ev.value));
        const double w = cfg.lambda * std::pow(p, cfg.k_power);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = -w * g[j];
    } else {
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = cfg.lambda * g[j];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Baselines

RepulsionResult repulsion_drift(Vec2 x, std::span<const Vec2> obstacles, const GuidanceConfig& cfg) {
    RepulsionResult out;
    Vec f{0.0, 0.0};
    for (const Vec2& o : obstacles) {
        const Vec2 r = x - o;
        const double d = norm(r);
        if (d == 0.0) {
            out.degenerate = true;
            continue;
        }
        const double ramp = std::max(0.0, 1.0 - d / cfg.d_act);
        f[0] += ramp * ramp * r[0] / d;
        f[1] += ramp * ramp * r[1] / d;
    }
    const Vec c = clip_norm(f, cfg.grad_clip);
    out.force = {cfg.lambda * c[0], cfg.lambda * c[1]};
    return out;
}

Vec lookahead_drift(std::span<const double> a, double t, std::span<const double> v,
                    const std::function<Vec(std::span<const double>)>& cost_gradient, const GuidanceConfig& cfg) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::out_of_range("lookahead: t outside [0, 1]");
    Vec endpoint(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) endpoint[j] = a[j] + v[j] * (1.0 - t);
    const Vec g = clip_norm(cost_gradient(endpoint), cfg.grad_clip);
    Vec out(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) out[j] = -cfg.lambda * g[j];
    return out;
}

// ---------------------------------------------------------------------------
// Dispatch

Guidance::Guidance(GuidanceConfig cfg, EnsembleConfig ensemble, const DriftModel& model,
                   const Normalizer& normalizer, const Critic* critic)
    : cfg_(cfg), ensemble_(ensemble), model_(model), normalizer_(normalizer), critic_(critic) {
    cfg_.validate();
    ensemble_.validate();
    if (cfg_.mechanism == Mechanism::ccg && critic_ == nullptr) {
        throw std::invalid_argument("guidance: ccg needs a trained critic");
    }
}

double Guidance::obstacle_distance(std::span<const double> a, const World2D& world) const {
    const Vec x = normalizer_.denormalize(a);
    double best = std::numeric_limits<double>::infinity();
    for (const Obstacle& o : world.obstacles) {
        best = std::min(best, distance({x[0], x[1]}, o.position) - o.radius);
    }
    return best;
}

Vec Guidance::drift(const GuidanceQuery& q) const {
    Vec zero(q.a.size(), 0.0);
    if (cfg_.mechanism == Mechanism::none || cfg_.lambda == 0.0 || q.world == nullptr) return zero;
    const World2D& world = *q.world;
    if (world.obstacles.empty()) return zero;
    std::vector<Vec2> centers;
    centers.reserve(world.obstacles.size());
    for (const Obstacle& o : world.obstacles) centers.push_back(o.position);

    switch (cfg_.mechanism) {
        case Mechanism::steg: {
            const double d_obs = obstacle_distance(q.a, world);
            if (d_obs >= cfg_.d_act) return zero;
            const ObstacleCost cost(centers, world.params.sigma_cost, normalizer_);
            const std::vector<Tensor> noise = ensemble_noise(ensemble_, q.a.size(), q.seed, q.step_index);
            const StegGradient sg = steg_gradient(q.a, q.t, q.h, model_, ensemble_, cost, noise);
            return steg_drift(sg.gradient, d_obs, cfg_);
        }
        case Mechanism::ccg: {
            Vec total = zero;
            for (const Vec2& c : centers) {
                const Vec phi = normalizer_.normalize(c);
                const Vec d = ccg_drift(q.a, q.t, q.h, phi, *critic_, cfg_);
                for (std::size_t j = 0; j < total.size(); ++j) total[j] += d[j];
            }
            return total;
        }
        case Mechanism::repulsion: {
            const Vec x = normalizer_.denormalize(q.a);
            const RepulsionResult r = repulsion_drift({x[0], x[1]}, centers, cfg_);
            return {r.force[0], r.force[1]};
        }
        case Mechanism::lookahead: {
            const ObstacleCost cost(centers, world.params.sigma_cost, normalizer_);
            return lookahead_drift(q.a, q.t, q.base_drift,
                                   [&](std::span<const double> p) { return cost.gradient(p); }, cfg_);
        }
        case Mechanism::none:
            break;
    }
    return zero;
}

}  // namespace ssip
