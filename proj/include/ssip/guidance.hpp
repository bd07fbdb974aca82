#pragma once

// Inference-time guidance: drift corrections added to the base sampler drift.
//
//   steg       ensemble rollouts of the base SDE, LogSumExp value, BPTT gradient
//   ccg        learned critic, gated by a powered risk probability
//   repulsion  analytic potential field around obstacles
//   lookahead  gradient of the cost at a linearly extrapolated endpoint

#include "ssip/drift.hpp"
#include "ssip/env.hpp"
#include "ssip/interpolant.hpp"
#include "ssip/tape.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ssip {

enum class Mechanism { none, steg, ccg, repulsion, lookahead };
enum class CcgVariant { probability, distance };

std::string to_string(Mechanism m);
std::optional<Mechanism> parse_mechanism(const std::string& name);

struct GuidanceConfig {
    Mechanism mechanism = Mechanism::none;
    double lambda = 4.0;
    double d_act = 80.0;      // world units
    double k_power = 2.0;
    double grad_clip = 1.0;   // normalized action units
    CcgVariant ccg_variant = CcgVariant::probability;

    void validate() const;
};

struct EnsembleConfig {
    std::size_t members = 64;   // N
    std::size_t steps = 3;      // K
    double dt_sim = 0.15;
    double sigma_rollout = 0.1414213562373095;  // sqrt(2 * 0.01)

    void validate() const;
};

/// Scales v to norm at most max_norm.
Vec clip_norm(std::span<const double> v, double max_norm);

// ---------------------------------------------------------------------------
// Costs on ensemble rollouts

class RolloutCost {
public:
    virtual ~RolloutCost() = default;
    /// Per-row running cost c(a) of an [N, D] node, as an [N, 1] node.
    virtual tape::NodeId running(tape::Graph& graph, tape::NodeId a) const = 0;
    /// Optional per-row terminal cost.
    virtual std::optional<tape::NodeId> terminal(tape::Graph&, tape::NodeId) const { return std::nullopt; }
};

/// Gaussian obstacle potentials evaluated at denormalized action points.
class ObstacleCost final : public RolloutCost {
public:
    ObstacleCost(std::vector<Vec2> centers, double sigma_cost, const Normalizer& normalizer);
    tape::NodeId running(tape::Graph& graph, tape::NodeId a) const override;

    double value(std::span<const double> a) const;
    /// Gradient w.r.t. the normalized point.
    Vec gradient(std::span<const double> a) const;

private:
    std::vector<Vec2> centers_;
    double sigma_;
    Normalizer normalizer_;
};

/// 0.5 * running_coeff * ||a||^2 per step, 0.5 * terminal_coeff * ||a||^2 at the end.
class QuadraticCost final : public RolloutCost {
public:
    QuadraticCost(double running_coeff, double terminal_coeff)
        : running_(running_coeff), terminal_(terminal_coeff) {}
    tape::NodeId running(tape::Graph& graph, tape::NodeId a) const override;
    std::optional<tape::NodeId> terminal(tape::Graph& graph, tape::NodeId a) const override;

private:
    double running_;
    double terminal_;
};

class ZeroCost final : public RolloutCost {
public:
    tape::NodeId running(tape::Graph& graph, tape::NodeId a) const override;
};

// ---------------------------------------------------------------------------
// STEG

/// Rollout noise: noise[k] is an [N, D] tensor of standard normals, row i drawn
/// from the stream (seed, step_index, i).
std::vector<tape::Tensor> ensemble_noise(const EnsembleConfig& cfg, std::size_t dim, std::uint64_t seed,
                                         std::uint64_t step_index);

struct StegTrace {
    tape::NodeId value;         // V-hat
    tape::NodeId total_cost;    // [N, 1]
    tape::NodeId final_points;  // [N, D]
};

/// V-hat = LSE(-J) - log N over N rollouts of K Euler-Maruyama steps of the base
/// sde drift with frozen h; a must already be a [1, D] node on `graph`.
StegTrace steg_value(tape::Graph& graph, tape::NodeId a, double t, std::span<const double> h,
                     const DriftModel& model, const EnsembleConfig& cfg, const RolloutCost& cost,
                     std::span<const tape::Tensor> noise);

/// Gradient of V-hat w.r.t. a, plus the value.
struct StegGradient {
    double value = 0.0;
    Vec gradient;
};
StegGradient steg_gradient(std::span<const double> a, double t, std::span<const double> h,
                           const DriftModel& model, const EnsembleConfig& cfg, const RolloutCost& cost,
                           std::span<const tape::Tensor> noise);

/// w_dyn * clip(grad V-hat) with w_dyn = lambda (1 - d_obs / d_act); zero when d_obs >= d_act.
Vec steg_drift(std::span<const double> grad_value, double d_obs, const GuidanceConfig& cfg);

// ---------------------------------------------------------------------------
// CCG

struct CcgTargets {
    double y_distance = 0.0;     // LSE(-J) - log M
    double y_probability = 0.0;  // fraction of rollouts with min distance < collision radius
};

CcgTargets ccg_targets(std::span<const double> costs, std::span<const double> min_distances,
                       double collision_radius);

struct Critic {
    tape::MlpParams net;  // (a, time features, h, phi) -> scalar
    CcgVariant variant = CcgVariant::probability;

    bool operator==(const Critic&) const = default;
};

struct CriticSample {
    Vec a;
    double t = 0.0;
    Vec h;
    Vec phi;
    double y = 0.0;
};

struct CriticTrainConfig {
    std::vector<std::size_t> hidden = {64, 64};
    double learning_rate = 1e-3;
    std::size_t batch_size = 64;
    std::size_t epochs = 200;
    double init_scale = 1.0;
    std::uint64_t seed = 0;
    CcgVariant variant = CcgVariant::probability;
};

/// Critic input row for one query.
tape::Tensor critic_input(std::span<const double> a, double t, std::span<const double> h,
                          std::span<const double> phi);

/// L2 regression; probability critics regress sigmoid(logit) onto y.
/// Throws TrainingDivergence on a non-finite loss.
Critic ccg_train(std::span<const CriticSample> dataset, const CriticTrainConfig& cfg);

/// Critic output (logit for probability critics) and its gradient w.r.t. a.
struct CriticEval {
    double value = 0.0;
    Vec gradient;
};
CriticEval critic_eval(const Critic& critic, std::span<const double> a, double t, std::span<const double> h,
                       std::span<const double> phi);

/// Probability variant: -lambda sigmoid(V)^k clip(grad V). Distance variant: +lambda clip(grad V).
Vec ccg_drift(std::span<const double> a, double t, std::span<const double> h, std::span<const double> phi,
              const Critic& critic, const GuidanceConfig& cfg);

// ---------------------------------------------------------------------------
// Baselines

struct RepulsionResult {
    Vec2 force{};
    bool degenerate = false;  // some obstacle sat exactly on x
};

/// lambda * clip(sum_j max(0, 1 - d_j / d_act)^2 unit(x - o_j), grad_clip), in world directions.
RepulsionResult repulsion_drift(Vec2 x, std::span<const Vec2> obstacles, const GuidanceConfig& cfg);

/// -lambda clip(grad J(x + v (1 - t)), grad_clip), with v held constant in x.
Vec lookahead_drift(std::span<const double> a, double t, std::span<const double> v,
                    const std::function<Vec(std::span<const double>)>& cost_gradient,
                    const GuidanceConfig& cfg);

// ---------------------------------------------------------------------------
// Dispatch

struct GuidanceQuery {
    std::span<const double> a;          // normalized action point
    double t = 0.0;
    std::span<const double> h;
    std::span<const double> base_drift; // drift the sampler is about to apply
    const World2D* world = nullptr;     // obstacle snapshot
    std::uint64_t seed = 0;
    std::uint64_t step_index = 0;
};

class Guidance {
public:
    Guidance(GuidanceConfig cfg, EnsembleConfig ensemble, const DriftModel& model, const Normalizer& normalizer,
             const Critic* critic = nullptr);

    /// Drift correction for one sampler step (zeros when inactive).
    Vec drift(const GuidanceQuery& query) const;
    const GuidanceConfig& config() const { return cfg_; }

    /// Min distance from the denormalized point to any obstacle surface.
    double obstacle_distance(std::span<const double> a, const World2D& world) const;

private:
    GuidanceConfig cfg_;
    EnsembleConfig ensemble_;
    const DriftModel& model_;
    const Normalizer& normalizer_;
    const Critic* critic_;
};

}  // namespace ssip
