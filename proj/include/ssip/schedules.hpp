#pragma once

// Scalar time schedules shared by training, sampling and guidance.

#include <stdexcept>

namespace ssip {

enum class EpsilonKind { zero, constant, gamma_squared };

struct ScheduleSet {
    double gamma_scale = 0.1;   // gamma(t) = gamma_scale * sqrt(t (1 - t))
    double sigma0 = 0.05;       // SFP tube width at t = 0
    double k_gain = 5.0;        // SFP stabilizing gain
    EpsilonKind epsilon_kind = EpsilonKind::zero;
    double epsilon_value = 0.0; // constant c, or proportionality factor for gamma_squared
    double gamma_floor = 1e-3;  // lower clamp on gamma wherever we divide by it

    /// Throws std::invalid_argument on a malformed set.
    void validate() const;

    double gamma(double t) const;
    /// Analytic derivative of gamma; diverges at the endpoints (throws there).
    double gamma_dot(double t) const;
    /// gamma(t) * gamma_dot(t) = gamma_scale^2 (1 - 2t) / 2, finite on [0, 1].
    double gamma_gamma_dot(double t) const;
    double sigma(double t) const;
    double epsilon(double t) const;
    /// max(gamma(t), gamma_floor)
    double gamma_clamped(double t) const;
    /// epsilon(t) - gamma(t) gamma_dot(t): coefficient of the score in the SDE drift.
    double diffusivity_correction(double t) const { return epsilon(t) - gamma_gamma_dot(t); }
};

/// Throws std::out_of_range unless 0 <= t <= 1.
void check_unit_time(double t);

}  // namespace ssip
