#include "ssip/interpolant.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace ssip {

using tape::Graph;
using tape::NodeId;
using tape::Tensor;

// ---------------------------------------------------------------------------
// Demonstration

Demonstration::Demonstration(std::vector<Vec> points, Vec context)
    : xi_(std::move(points)), context_(std::move(context)) {
    if (xi_.size() < 2) throw std::invalid_argument("demonstration: need at least 2 points");
    const std::size_t d = xi_.front().size();
    if (d == 0) throw std::invalid_argument("demonstration: zero-dimensional points");
    for (const Vec& p : xi_) {
        if (p.size() != d) throw std::invalid_argument("demonstration: ragged points");
    }
    const double dt = grid_dt();
    xi_dot_.resize(xi_.size());
    for (std::size_t i = 0; i + 1 < xi_.size(); ++i) {
        xi_dot_[i].resize(d);
        for (std::size_t j = 0; j < d; ++j) xi_dot_[i][j] = (xi_[i + 1][j] - xi_[i][j]) / dt;
    }
    xi_dot_.back() = xi_dot_[xi_.size() - 2];
}

std::size_t Demonstration::segment(double t) const {
    check_unit_time(t);
    const double s = t / grid_dt();
    return std::min(static_cast<std::size_t>(s), xi_.size() - 2);
}

Vec Demonstration::position(double t) const {
    const std::size_t i = segment(t);
    const double frac = t / grid_dt() - static_cast<double>(i);
    Vec out(dim());
    for (std::size_t j = 0; j < out.size(); ++j) {
        out[j] = xi_[i][j] + frac * (xi_[i + 1][j] - xi_[i][j]);
    }
    return out;
}

Vec Demonstration::velocity(double t) const { return xi_dot_[segment(t)]; }

// ---------------------------------------------------------------------------
// Normalizer

Normalizer Normalizer::fit(std::span<const Demonstration> demos) {
    if (demos.empty()) throw std::invalid_argument("normalizer: no demonstrations");
    const std::size_t d = demos.front().dim();
    Normalizer n;
    n.lo.assign(d, std::numeric_limits<double>::infinity());
    n.hi.assign(d, -std::numeric_limits<double>::infinity());
    for (const Demonstration& demo : demos) {
        for (const Vec& p : demo.xi()) {
            for (std::size_t j = 0; j < d; ++j) {
                n.lo[j] = std::min(n.lo[j], p[j]);
                n.hi[j] = std::max(n.hi[j], p[j]);
            }
        }
    }
    for (std::size_t j = 0; j < d; ++j) {
        if (!(n.hi[j] > n.lo[j])) {
            n.lo[j] -= 1.0;
            n.hi[j] += 1.0;
        }
    }
    return n;
}

Vec Normalizer::normalize(std::span<const double> x) const {
    Vec out(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) out[j] = 2.0 * (x[j] - lo[j]) / (hi[j] - lo[j]) - 1.0;
    return out;
}

Vec Normalizer::denormalize(std::span<const double> a) const {
    Vec out(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) out[j] = lo[j] + 0.5 * (a[j] + 1.0) * (hi[j] - lo[j]);
    return out;
}

Vec Normalizer::world_per_unit() const {
    Vec out(lo.size());
    for (std::size_t j = 0; j < lo.size(); ++j) out[j] = 0.5 * (hi[j] - lo[j]);
    return out;
}

// ---------------------------------------------------------------------------
// Networks

void time_features(double t, std::span<double> out) {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    out[0] = t;
    out[1] = std::sin(two_pi * t);
    out[2] = std::cos(two_pi * t);
    out[3] = std::sin(2.0 * two_pi * t);
    out[4] = std::cos(2.0 * two_pi * t);
}

void PolicyNets::validate() const {
    v_net.validate();
    eta_net.validate();
    if (v_net.input_dim() != eta_net.input_dim() || v_net.output_dim() != eta_net.output_dim()) {
        throw tape::ShapeError("policy: velocity and denoiser nets disagree on dims");
    }
    if (v_net.input_dim() <= v_net.output_dim() + kTimeFeatures) {
        throw tape::ShapeError("policy: input too narrow for action + time features");
    }
}

PolicyNets make_policy_nets(std::size_t action_dim, std::size_t context_dim,
                            std::span<const std::size_t> hidden, double init_scale,
                            std::mt19937_64& rng) {
    std::vector<std::size_t> dims;
    dims.push_back(action_dim + kTimeFeatures + context_dim);
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(action_dim);
    PolicyNets nets;
    nets.v_net = tape::make_mlp(dims, init_scale, rng);
    nets.eta_net = tape::make_mlp(dims, init_scale, rng);
    return nets;
}

NodeId policy_input(Graph& graph, NodeId a, double t, std::span<const double> h) {
    const std::size_t rows = graph.value(a).rows();
    Tensor extra(1, kTimeFeatures + h.size());
    time_features(t, extra.values().subspan(0, kTimeFeatures));
    std::copy(h.begin(), h.end(), extra.values().begin() + kTimeFeatures);
    NodeId e = graph.leaf(std::move(extra));
    if (rows != 1) e = graph.broadcast_rows(e, rows);
    return graph.concat(a, e);
}

Tensor policy_input_rows(const Tensor& a, std::span<const double> t, const Tensor& h) {
    if (t.size() != a.rows() || h.rows() != a.rows()) {
        throw tape::ShapeError("policy_input_rows: row count mismatch");
    }
    const std::size_t d = a.cols();
    Tensor x(a.rows(), d + kTimeFeatures + h.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t j = 0; j < d; ++j) x(r, j) = a(r, j);
        time_features(t[r], x.values().subspan(r * x.cols() + d, kTimeFeatures));
        for (std::size_t j = 0; j < h.cols(); ++j) x(r, d + kTimeFeatures + j) = h(r, j);
    }
    return x;
}

Vec score_from_eta(std::span<const double> eta, double t, const ScheduleSet& schedules) {
    const double g = schedules.gamma_clamped(t);
    Vec out(eta.size());
    for (std::size_t j = 0; j < eta.size(); ++j) out[j] = -eta[j] / g;
    return out;
}

Vec sfp_velocity(std::span<const double> a, double t, const Demonstration& demo, double k_gain) {
    const Vec xi = demo.position(t);
    Vec v = demo.velocity(t);
    if (a.size() != v.size()) throw std::invalid_argument("sfp_velocity: dim mismatch");
    for (std::size_t j = 0; j < v.size(); ++j) v[j] -= k_gain * (a[j] - xi[j]);
    return v;
}

// ---------------------------------------------------------------------------
// Training points and losses

TrainingPoint make_training_point(const Demonstration& demo, const ScheduleSet& schedules, double t,
                                  std::span<const double> eps, std::span<const double> z) {
    const std::size_t d = demo.dim();
    if (eps.size() != d || z.size() != d) throw std::invalid_argument("training point: noise dim mismatch");
    const Vec xi = demo.position(t);
    const double sig = schedules.sigma(t);
    const double gam = schedules.gamma(t);
    TrainingPoint p;
    p.t = t;
    p.h = demo.context();
    p.z.assign(z.begin(), z.end());
    p.eps.assign(eps.begin(), eps.end());
    Vec sfp_state(d);
    p.a_t.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
        sfp_state[j] = xi[j] + sig * eps[j];
        p.a_t[j] = sfp_state[j] + gam * z[j];
    }
    p.v_target = sfp_velocity(sfp_state, t, demo, schedules.k_gain);
    return p;
}

TrainingPoint sample_training_point(const Demonstration& demo, const ScheduleSet& schedules,
                                    std::mt19937_64& rng) {
    if (demo.steps() == 0) throw std::invalid_argument("training point: empty demonstration");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double t = unit(rng);
    Vec eps(demo.dim());
    Vec z(demo.dim());
    for (double& e : eps) e = normal(rng);
    for (double& e : z) e = normal(rng);
    return make_training_point(demo, schedules, t, eps, z);
}

namespace {

enum class Target { velocity, noise };

LossRecord regression_loss(Graph& graph, const tape::MlpParams& net,
                           std::span<const TrainingPoint> batch, Target target) {
    if (batch.empty()) throw std::invalid_argument("loss: empty batch");
    const std::size_t d = batch.front().a_t.size();
    const std::size_t hd = batch.front().h.size();
    Tensor a(batch.size(), d);
    Tensor h(batch.size(), hd);
    Tensor y(batch.size(), d);
    Vec t(batch.size());
    for (std::size_t r = 0; r < batch.size(); ++r) {
        const TrainingPoint& p = batch[r];
        const Vec& tgt = target == Target::velocity ? p.v_target : p.z;
        for (std::size_t j = 0; j < d; ++j) {
            a(r, j) = p.a_t[j];
            y(r, j) = tgt[j];
        }
        for (std::size_t j = 0; j < hd; ++j) h(r, j) = p.h[j];
        t[r] = p.t;
    }
    const NodeId x = graph.leaf(policy_input_rows(a, t, h));
    LossRecord rec;
    rec.net = tape::mlp_forward(graph, net, x);
    const NodeId diff = graph.sub(rec.net.output, graph.leaf(std::move(y)));
    rec.loss = graph.scale(graph.squared_norm(diff), 1.0 / static_cast<double>(batch.size()));
    return rec;
}

}  // namespace

LossRecord velocity_loss(Graph& graph, const tape::MlpParams& v_net,
                         std::span<const TrainingPoint> batch) {
    return regression_loss(graph, v_net, batch, Target::velocity);
}

LossRecord score_loss(Graph& graph, const tape::MlpParams& eta_net,
                      std::span<const TrainingPoint> batch) {
    return regression_loss(graph, eta_net, batch, Target::noise);
}

Vec parameter_gradient(const Graph& graph, const LossRecord& rec) {
    const tape::Gradients grads = graph.backward(rec.loss);
    Vec flat;
    for (NodeId id : rec.net.params) {
        const auto g = grads[id].values();
        flat.insert(flat.end(), g.begin(), g.end());
    }
    return flat;
}

// ---------------------------------------------------------------------------
// Optimizer and training loop

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("train: learning rate must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("train: batch size must be >= 1");
    if (horizon == 0) throw std::invalid_argument("train: horizon must be >= 1");
    if (hidden.empty()) throw std::invalid_argument("train: need at least one hidden layer");
}

Adam::Adam(std::size_t size, double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps), m_(size, 0.0), v_(size, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grad) {
    if (params.size() != m_.size() || grad.size() != m_.size()) {
        throw std::invalid_argument("adam: size mismatch");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
        params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
}

std::vector<Demonstration> chunk_windows(std::span<const Demonstration> paths,
                                         const Normalizer& normalizer, std::size_t horizon) {
    std::vector<Demonstration> windows;
    for (const Demonstration& path : paths) {
        const auto& pts = path.xi();
        for (std::size_t s = 0; s < pts.size(); ++s) {
            std::vector<Vec> w;
            w.reserve(horizon + 1);
            for (std::size_t k = 0; k <= horizon; ++k) {
                w.push_back(normalizer.normalize(pts[std::min(s + k, pts.size() - 1)]));
            }
            Vec h = w.front();
            windows.emplace_back(std::move(w), std::move(h));
        }
    }
    return windows;
}

std::vector<EpochLoss> fit_policy(PolicyNets& nets, std::span<const Demonstration> windows,
                                  const ScheduleSet& schedules, const TrainConfig& config) {
    config.validate();
    nets.validate();
    if (windows.empty()) throw std::invalid_argument("train: no demonstrations");

    std::mt19937_64 rng(config.seed ^ 0x5eed'7a1aULL);
    Adam v_opt(nets.v_net.parameter_count(), config.learning_rate, config.beta1, config.beta2,
               config.adam_eps);
    Adam eta_opt(nets.eta_net.parameter_count(), config.learning_rate, config.beta1, config.beta2,
                 config.adam_eps);
    Vec v_flat = nets.v_net.flatten();
    Vec eta_flat = nets.eta_net.flatten();

    std::vector<std::size_t> order(windows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<EpochLoss> curve;
    std::vector<TrainingPoint> batch;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double v_sum = 0.0;
        double eta_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            batch.clear();
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(sample_training_point(windows[order[i]], schedules, rng));
            }
            Graph vg;
            const LossRecord vl = velocity_loss(vg, nets.v_net, batch);
            Graph eg;
            const LossRecord el = score_loss(eg, nets.eta_net, batch);
            const double vloss = vg.value(vl.loss).item();
            const double eloss = eg.value(el.loss).item();
            v_opt.step(v_flat, parameter_gradient(vg, vl));
            eta_opt.step(eta_flat, parameter_gradient(eg, el));
            nets.v_net.assign(v_flat);
            nets.eta_net.assign(eta_flat);
            v_sum += vloss;
            eta_sum += eloss;
            ++batches;
        }
        EpochLoss rec{epoch, v_sum / static_cast<double>(batches), eta_sum / static_cast<double>(batches)};
        if (!std::isfinite(rec.velocity_loss) || !std::isfinite(rec.score_loss)) {
            throw TrainingDivergence(epoch, "train: loss diverged at epoch " + std::to_string(epoch));
        }
        curve.push_back(rec);
    }
    return curve;
}

TrainedPolicy train(std::span<const Demonstration> paths, const ScheduleSet& schedules,
                    const TrainConfig& config) {
    config.validate();
    if (paths.empty()) throw std::invalid_argument("train: no demonstrations");
    TrainedPolicy out;
    out.normalizer = Normalizer::fit(paths);
    const std::vector<Demonstration> windows = chunk_windows(paths, out.normalizer, config.horizon);
    std::mt19937_64 init_rng(config.seed);
    const std::size_t d = paths.front().dim();
    out.nets = make_policy_nets(d, d, config.hidden, config.init_scale, init_rng);
    try {
        out.curve = fit_policy(out.nets, windows, schedules, config);
    } catch (const tape::NonFiniteError& e) {
        throw TrainingDivergence(0, std::string("train: ") + e.what());
    }
    return out;
}

}  // namespace ssip
