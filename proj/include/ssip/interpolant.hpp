#pragma once

// Streaming stochastic interpolant: training samples built around a
// demonstration tube, plus the velocity / denoiser regression that learns
// the drift and (noise-parameterized) score of the interpolant.

#include "ssip/schedules.hpp"
#include "ssip/tape.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssip {

using Vec = std::vector<double>;

/// Action trajectory on a uniform grid over flow time [0, 1].
/// xi_dot is the forward difference (xi[i+1] - xi[i]) / dt, last entry repeated,
/// so it is exactly the derivative of the piecewise-linear interpolant.
class Demonstration {
public:
    Demonstration() = default;
    /// points: T x D, T >= 2. context: observation snapshot at the start.
    Demonstration(std::vector<Vec> points, Vec context);

    std::size_t steps() const { return xi_.size(); }
    std::size_t dim() const { return xi_.empty() ? 0 : xi_.front().size(); }
    double grid_dt() const { return 1.0 / static_cast<double>(xi_.size() - 1); }

    const std::vector<Vec>& xi() const { return xi_; }
    const std::vector<Vec>& xi_dot() const { return xi_dot_; }
    const Vec& context() const { return context_; }

    /// Linear interpolation of xi at flow time t.
    Vec position(double t) const;
    /// Slope of the segment containing t.
    Vec velocity(double t) const;

private:
    std::size_t segment(double t) const;

    std::vector<Vec> xi_;
    std::vector<Vec> xi_dot_;
    Vec context_;
};

/// Per-dimension affine map of world coordinates onto [-1, 1].
struct Normalizer {
    Vec lo;
    Vec hi;

    static Normalizer fit(std::span<const Demonstration> demos);
    Vec normalize(std::span<const double> x) const;
    Vec denormalize(std::span<const double> a) const;
    /// d(world)/d(normalized) for each dimension.
    Vec world_per_unit() const;
    bool operator==(const Normalizer&) const = default;
};

/// Time embedding fed to every network: t, sin/cos(2 pi t), sin/cos(4 pi t).
inline constexpr std::size_t kTimeFeatures = 5;
void time_features(double t, std::span<double> out);

struct PolicyNets {
    tape::MlpParams v_net;    // (a, t, h) -> velocity
    tape::MlpParams eta_net;  // (a, t, h) -> noise estimate

    std::size_t action_dim() const { return v_net.output_dim(); }
    std::size_t context_dim() const { return v_net.input_dim() - v_net.output_dim() - kTimeFeatures; }
    /// Throws tape::ShapeError if the two nets disagree on dims.
    void validate() const;
    bool operator==(const PolicyNets&) const = default;
};

PolicyNets make_policy_nets(std::size_t action_dim, std::size_t context_dim,
                            std::span<const std::size_t> hidden, double init_scale,
                            std::mt19937_64& rng);

/// Rows of [a | time features | h] as a tape node. `a` is [B, D]; t and h are
/// shared across rows.
tape::NodeId policy_input(tape::Graph& graph, tape::NodeId a, double t, std::span<const double> h);

/// Same, with per-row times and contexts (training batches).
tape::Tensor policy_input_rows(const tape::Tensor& a, std::span<const double> t,
                               const tape::Tensor& h);

/// -eta / max(gamma(t), gamma_floor)
Vec score_from_eta(std::span<const double> eta, double t, const ScheduleSet& schedules);

/// xi_dot(t) - k (a - xi(t))
Vec sfp_velocity(std::span<const double> a, double t, const Demonstration& demo, double k_gain);

struct TrainingPoint {
    Vec a_t;
    double t = 0.0;
    Vec h;
    Vec z;
    Vec eps;
    Vec v_target;
};

/// Deterministic construction: a_t = xi_t + sigma(t) eps + gamma(t) z,
/// v_target = sfp_velocity(xi_t + sigma(t) eps).
TrainingPoint make_training_point(const Demonstration& demo, const ScheduleSet& schedules, double t,
                                  std::span<const double> eps, std::span<const double> z);

/// t ~ U(0, 1), eps, z ~ N(0, I).
TrainingPoint sample_training_point(const Demonstration& demo, const ScheduleSet& schedules,
                                    std::mt19937_64& rng);

struct LossRecord {
    tape::NodeId loss;
    tape::MlpRecord net;
};

/// Mean over the batch of ||v_theta - v_target||^2, recorded on the tape.
LossRecord velocity_loss(tape::Graph& graph, const tape::MlpParams& v_net,
                         std::span<const TrainingPoint> batch);
/// Mean over the batch of ||eta_theta - z||^2, recorded on the tape.
LossRecord score_loss(tape::Graph& graph, const tape::MlpParams& eta_net,
                      std::span<const TrainingPoint> batch);

/// Flat gradient of the loss w.r.t. every parameter of the net, in flatten() order.
Vec parameter_gradient(const tape::Graph& graph, const LossRecord& rec);

struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t batch_size = 64;
    std::size_t epochs = 500;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double init_scale = 1.0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> hidden = {128, 128, 128};
    std::size_t horizon = 16;  // env steps covered by flow time [0, 1]

    void validate() const;
};

struct EpochLoss {
    std::size_t epoch = 0;
    double velocity_loss = 0.0;
    double score_loss = 0.0;
};

class TrainingDivergence : public std::runtime_error {
public:
    TrainingDivergence(std::size_t epoch, const std::string& what)
        : std::runtime_error(what), epoch_(epoch) {}
    std::size_t epoch() const { return epoch_; }

private:
    std::size_t epoch_;
};

/// Adam moments over a flat parameter vector.
class Adam {
public:
    Adam(std::size_t size, double learning_rate, double beta1, double beta2, double eps);
    void step(std::span<double> params, std::span<const double> grad);

private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    Vec m_, v_;
};

struct TrainedPolicy {
    PolicyNets nets;
    Normalizer normalizer;
    std::vector<EpochLoss> curve;
};

/// Splits a world-space path into horizon-length windows, one per start index,
/// holding the final point past the end. Each window is normalized and its
/// context is the normalized window start.
std::vector<Demonstration> chunk_windows(std::span<const Demonstration> paths,
                                         const Normalizer& normalizer, std::size_t horizon);

/// Trains both nets on already-windowed, normalized demos.
std::vector<EpochLoss> fit_policy(PolicyNets& nets, std::span<const Demonstration> windows,
                                  const ScheduleSet& schedules, const TrainConfig& config);

/// World-space expert paths -> normalizer, windows, freshly initialized nets, training.
TrainedPolicy train(std::span<const Demonstration> paths, const ScheduleSet& schedules,
                    const TrainConfig& config);

}  // namespace ssip
