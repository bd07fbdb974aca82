#pragma once

// Closed-form and brute-force references for the guidance theory, built on a
// one-dimensional Ornstein-Uhlenbeck base process
//
//     dx = -a x dt + sqrt(2 eps) dW,   running cost c(x) = c_quad x^2 / 2,
//     terminal cost phi(x) = kappa x^2 / 2.
//
// With c_quad = 0 the desirability u(x, t) = E[exp(-phi(x_T)) | x_t = x] is
// Gaussian in closed form, which lets us check the Feynman-Kac PDE, the
// likelihood-ratio martingale, exact Doob guidance, and the ensemble estimator.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

namespace ssip::oracle {

struct OuSpec {
    double a_rate = 1.0;
    double eps = 0.5;
    double horizon = 1.0;
    double kappa = 1.0;
    double c_quad = 0.0;

    void validate() const;
    /// e^{-a (T - t)}
    double mean_factor(double t) const;
    /// (eps / a) (1 - e^{-2 a (T - t)})
    double transition_variance(double t) const;
    double terminal_cost(double x) const { return 0.5 * kappa * x * x; }
    double running_cost(double x) const { return 0.5 * c_quad * x * x; }
};

class DegeneratePosterior : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Closed forms; require c_quad == 0 (std::invalid_argument otherwise).
double ou_desirability(double x, double t, const OuSpec& spec);
double ou_log_desirability(double x, double t, const OuSpec& spec);
double ou_grad_log_u(double x, double t, const OuSpec& spec);

using ScalarField = std::function<double(double x, double t)>;
using CostFn = std::function<double(double x)>;

/// d_t u + b d_x u + eps d_xx u - c u by central differences, b = -a x.
double feynman_kac_residual(const ScalarField& u, double x, double t, const OuSpec& spec, double h_fd);
double feynman_kac_residual(const ScalarField& u, double x, double t, const OuSpec& spec, double h_fd,
                            const CostFn& running_cost);

struct Estimate {
    double mean = 0.0;
    double std_error = 0.0;
};

/// D_t = exp(-int_0^t c) u(x_t, t) / Z over M exact OU paths from x0; Z from an
/// independent batch of M paths. The std_error folds in the uncertainty of Z.
Estimate martingale_check(const OuSpec& spec, double t_probe, std::size_t paths, double x0, std::uint64_t seed);

struct TerminalMoments {
    double emp_mean = 0.0;
    double emp_var = 0.0;
    double mean_stderr = 0.0;
    double var_stderr = 0.0;
    double ana_mean = 0.0;
    double ana_var = 0.0;
};

/// Euler-Maruyama on dx = (-a x + 2 eps g(x, t)) dt + sqrt(2 eps) dW from x0.
/// g defaults to the closed-form grad log u; the analytic fields hold the tilted
/// terminal law mean m0 / (1 + kappa v0), var v0 / (1 + kappa v0).
TerminalMoments guided_terminal_moments(const OuSpec& spec, std::size_t n_steps, std::size_t paths, double x0,
                                        std::uint64_t seed, const ScalarField& guidance = {});

/// Self-normalized importance estimate of the tilted terminal mean/variance from
/// exact base samples, weights exp(-phi(x_T)).
TerminalMoments tilted_moments_importance(const OuSpec& spec, std::size_t paths, double x0, std::uint64_t seed);

/// Differentiable 1D path map tau = Phi(a, noise).
struct PathModel {
    double a_rate = 1.0;
    double eps = 0.5;
    double dt = 0.01;
    std::size_t steps = 100;
    double c_quad = 0.0;
    double kappa = 1.0;
    bool exact_transition = false;  // one exact OU jump over steps * dt instead of EM

    double horizon() const { return dt * static_cast<double>(steps); }
};

struct PathBatch {
    std::vector<double> cost;   // J_i
    std::vector<double> force;  // F_i = -dJ_i / da (pathwise, fixed noise)
};

/// noise: steps x M standard normals (ignored beyond the first row for exact transitions).
PathBatch simulate_paths(double a, const PathModel& model, const std::vector<std::vector<double>>& noise);

/// Standard normals, row k for step k, column i from the stream (seed, i).
std::vector<std::vector<double>> path_noise(std::size_t steps, std::size_t paths, std::uint64_t seed);

/// sum_i w_i F_i / sum_i w_i with w_i = exp(-J_i); throws DegeneratePosterior when
/// every weight underflows.
Estimate self_normalized_force(const PathBatch& batch);

Estimate brute_posterior_force(double a, const PathModel& model, std::size_t paths, std::uint64_t seed);

struct Decomposition {
    double estimator = 0.0;  // S-hat
    double oracle = 0.0;     // S*
    double total = 0.0;
    double term_distribution = 0.0;  // E_q_safe[F_est] - E_p_safe[F_est]
    double term_dynamics = 0.0;      // E_p_safe[F_est - F_phy]
};

/// Both path maps see the same Brownian path: the oracle's fine increments are
/// summed onto the estimator's coarser grid. estimator.dt must be an integer
/// multiple of oracle.dt and its horizon no longer than the oracle's.
Decomposition error_decomposition(double a, const PathModel& estimator, const PathModel& oracle, std::size_t paths,
                                  std::uint64_t seed);

}  // namespace ssip::oracle
