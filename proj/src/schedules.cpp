#include "ssip/schedules.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ssip {

void check_unit_time(double t) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw std::out_of_range("schedule: time " + std::to_string(t) + " outside [0, 1]");
    }
}

void ScheduleSet::validate() const {
    if (!(gamma_scale >= 0.0)) throw std::invalid_argument("schedule: gamma_scale must be >= 0");
    if (!(sigma0 > 0.0)) throw std::invalid_argument("schedule: sigma0 must be > 0");
    if (!(k_gain >= 0.0)) throw std::invalid_argument("schedule: k_gain must be >= 0");
    if (!(gamma_floor > 0.0)) throw std::invalid_argument("schedule: gamma_floor must be > 0");
    if (epsilon_kind != EpsilonKind::zero && !(epsilon_value >= 0.0)) {
        throw std::invalid_argument("schedule: epsilon value must be >= 0");
    }
}

double ScheduleSet::gamma(double t) const {
    check_unit_time(t);
    return gamma_scale * std::sqrt(t * (1.0 - t));
}

double ScheduleSet::gamma_dot(double t) const {
    check_unit_time(t);
    if (t == 0.0 || t == 1.0) {
        throw std::domain_error("schedule: gamma_dot diverges at t = " + std::to_string(t));
    }
    return gamma_scale * (1.0 - 2.0 * t) / (2.0 * std::sqrt(t * (1.0 - t)));
}

double ScheduleSet::gamma_gamma_dot(double t) const {
    check_unit_time(t);
    return gamma_scale * gamma_scale * (1.0 - 2.0 * t) / 2.0;
}

double ScheduleSet::sigma(double t) const {
    check_unit_time(t);
    return sigma0 * std::exp(-k_gain * t);
}

double ScheduleSet::epsilon(double t) const {
    check_unit_time(t);
    switch (epsilon_kind) {
        case EpsilonKind::zero: return 0.0;
        case EpsilonKind::constant: return epsilon_value;
        case EpsilonKind::gamma_squared: {
            const double g = gamma(t);
            return epsilon_value * g * g;
        }
    }
    return 0.0;
}

double ScheduleSet::gamma_clamped(double t) const {
    return std::max(gamma(t), gamma_floor);
}

}  // namespace ssip
