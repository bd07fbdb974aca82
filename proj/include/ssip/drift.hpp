#pragma once

// Base drift of the streaming sampler, evaluated either directly or on a tape
// (for differentiable ensemble rollouts).

#include "ssip/interpolant.hpp"
#include "ssip/schedules.hpp"
#include "ssip/tape.hpp"

#include <span>

namespace ssip {

/// Which member of the sampler family a drift belongs to:
/// sde -> v + (eps(t) - gamma gamma_dot) s, ode -> v - gamma gamma_dot s.
enum class DriftForm { ode, sde };

class DriftModel {
public:
    virtual ~DriftModel() = default;

    virtual Vec drift(std::span<const double> a, double t, std::span<const double> h,
                      DriftForm form) const = 0;
    /// Rows of `a` ([N, D]) advanced in lockstep; h shared.
    virtual tape::NodeId drift_node(tape::Graph& graph, tape::NodeId a, double t,
                                    std::span<const double> h, DriftForm form) const = 0;
    /// Diffusivity eps(t) of the sde form.
    virtual double epsilon(double t) const = 0;
    virtual std::size_t dim() const = 0;
};

/// v_theta + (eps - gamma gamma_dot) * (-eta_theta / max(gamma, floor)).
class PolicyDrift final : public DriftModel {
public:
    PolicyDrift(const PolicyNets& nets, const ScheduleSet& schedules);

    Vec drift(std::span<const double> a, double t, std::span<const double> h,
              DriftForm form) const override;
    tape::NodeId drift_node(tape::Graph& graph, tape::NodeId a, double t, std::span<const double> h,
                            DriftForm form) const override;
    double epsilon(double t) const override { return schedules_.epsilon(t); }
    std::size_t dim() const override { return nets_.action_dim(); }

    /// Coefficient multiplying the score for the given form.
    double score_coefficient(double t, DriftForm form) const;
    const PolicyNets& nets() const { return nets_; }
    const ScheduleSet& schedules() const { return schedules_; }

private:
    const PolicyNets& nets_;
    const ScheduleSet& schedules_;
};

/// -rate * a with constant diffusivity; the Ornstein-Uhlenbeck test bed.
class LinearDrift final : public DriftModel {
public:
    LinearDrift(double rate, double epsilon, std::size_t dim) : rate_(rate), eps_(epsilon), dim_(dim) {}

    Vec drift(std::span<const double> a, double t, std::span<const double> h,
              DriftForm form) const override;
    tape::NodeId drift_node(tape::Graph& graph, tape::NodeId a, double t, std::span<const double> h,
                            DriftForm form) const override;
    double epsilon(double) const override { return eps_; }
    std::size_t dim() const override { return dim_; }

private:
    double rate_;
    double eps_;
    std::size_t dim_;
};

/// Exact SSIP base drift b = v + (eps - gamma gamma_dot) s with s from the denoiser.
/// Throws tape::NonFiniteError on non-finite network output.
Vec base_drift(std::span<const double> a, double t, std::span<const double> h, const PolicyNets& nets,
               const ScheduleSet& schedules);

}  // namespace ssip
