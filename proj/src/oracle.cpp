#include "ssip/oracle.hpp"

#include "ssip/rng.hpp"
#include "ssip/tape.hpp"

#include <optional>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

namespace ssip::oracle {

using tape::Graph;
using tape::NodeId;
using tape::Tensor;

void OuSpec::validate() const {
    if (!(a_rate > 0.0)) throw std::invalid_argument("ou: a_rate must be > 0");
    if (!(eps > 0.0)) throw std::invalid_argument("ou: eps must be > 0");
    if (!(horizon > 0.0)) throw std::invalid_argument("ou: horizon must be > 0");
    if (!(kappa >= 0.0)) throw std::invalid_argument("ou: kappa must be >= 0");
    if (!(c_quad >= 0.0)) throw std::invalid_argument("ou: c_quad must be >= 0");
}

double OuSpec::mean_factor(double t) const { return std::exp(-a_rate * (horizon - t)); }

double OuSpec::transition_variance(double t) const {
    return eps / a_rate * (1.0 - std::exp(-2.0 * a_rate * (horizon - t)));
}

namespace {

void require_closed_form(const OuSpec& spec) {
    spec.validate();
    if (spec.c_quad != 0.0) throw std::invalid_argument("ou: closed-form desirability needs c_quad = 0");
}

Estimate mean_and_stderr(const std::vector<double>& xs) {
    const double n = static_cast<double>(xs.size());
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= n;
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    const double var = xs.size() > 1 ? ss / (n - 1.0) : 0.0;
    return {mean, std::sqrt(var / n)};
}

}  // namespace

double ou_log_desirability(double x, double t, const OuSpec& spec) {
    require_closed_form(spec);
    const double m = x * spec.mean_factor(t);
    const double v = spec.transition_variance(t);
    const double q = 1.0 + spec.kappa * v;
    return -0.5 * std::log(q) - spec.kappa * m * m / (2.0 * q);
}

double ou_desirability(double x, double t, const OuSpec& spec) { return std::exp(ou_log_desirability(x, t, spec)); }

double ou_grad_log_u(double x, double t, const OuSpec& spec) {
    require_closed_form(spec);
    const double f = spec.mean_factor(t);
    return -spec.kappa * x * f * f / (1.0 + spec.kappa * spec.transition_variance(t));
}

double feynman_kac_residual(const ScalarField& u, double x, double t, const OuSpec& spec, double h_fd,
                            const CostFn& running_cost) {
    if (!(h_fd > 0.0)) throw std::invalid_argument("feynman_kac_residual: h_fd must be > 0");
    const double u0 = u(x, t);
    const double ut = (u(x, t + h_fd) - u(x, t - h_fd)) / (2.0 * h_fd);
    const double up = u(x + h_fd, t);
    const double um = u(x - h_fd, t);
    const double ux = (up - um) / (2.0 * h_fd);
    const double uxx = (up - 2.0 * u0 + um) / (h_fd * h_fd);
    return ut + (-spec.a_rate * x) * ux + spec.eps * uxx - running_cost(x) * u0;
}

double feynman_kac_residual(const ScalarField& u, double x, double t, const OuSpec& spec, double h_fd) {
    return feynman_kac_residual(u, x, t, spec, h_fd, [&](double y) { return spec.running_cost(y); });
}

Estimate martingale_check(const OuSpec& spec, double t_probe, std::size_t paths, double x0, std::uint64_t seed) {
    require_closed_form(spec);
    if (paths < 2) throw std::invalid_argument("martingale_check: need at least 2 paths");
    if (!(t_probe >= 0.0 && t_probe <= spec.horizon)) throw std::out_of_range("martingale_check: probe outside [0, T]");

    // Exact OU transition from 0 to s: mean x0 e^{-a s}, var (eps/a)(1 - e^{-2 a s}).
    auto transition = [&](double s, double z) {
        const double m = x0 * std::exp(-spec.a_rate * s);
        const double v = spec.eps / spec.a_rate * (1.0 - std::exp(-2.0 * spec.a_rate * s));
        return m + std::sqrt(v) * z;
    };

    std::mt19937_64 z_rng = make_stream(seed, {kTagOracle, 1});
    std::mt19937_64 d_rng = make_stream(seed, {kTagOracle, 2});
    std::normal_distribution<double> normal(0.0, 1.0);

    std::vector<double> terminal(paths);
    for (double& w : terminal) w = std::exp(-spec.terminal_cost(transition(spec.horizon, normal(z_rng))));
    const Estimate z = mean_and_stderr(terminal);

    std::vector<double> u(paths);
    for (double& v : u) v = ou_desirability(transition(t_probe, normal(d_rng)), t_probe, spec);
    const Estimate ue = mean_and_stderr(u);

    const double mean = ue.mean / z.mean;
    const double se = std::hypot(ue.std_error / z.mean, mean * z.std_error / z.mean);
    return {mean, se};
}

TerminalMoments guided_terminal_moments(const OuSpec& spec, std::size_t n_steps, std::size_t paths, double x0,
                                        std::uint64_t seed, const ScalarField& guidance) {
    require_closed_form(spec);
    if (n_steps == 0 || paths < 2) throw std::invalid_argument("guided_terminal_moments: need steps and paths");
    const ScalarField g = guidance ? guidance : ScalarField([&](double x, double t) { return ou_grad_log_u(x, t, spec); });
    const double dt = spec.horizon / static_cast<double>(n_steps);
    const double diffusion = std::sqrt(2.0 * spec.eps * dt);

    std::vector<double> xs(paths);
    for (std::size_t i = 0; i < paths; ++i) {
        std::mt19937_64 rng = make_stream(seed, {kTagOracle, 3, i});
        std::normal_distribution<double> normal(0.0, 1.0);
        double x = x0;
        for (std::size_t k = 0; k < n_steps; ++k) {
            const double t = static_cast<double>(k) * dt;
            x += (-spec.a_rate * x + 2.0 * spec.eps * g(x, t)) * dt + diffusion * normal(rng);
        }
        xs[i] = x;
    }

    TerminalMoments out;
    const double n = static_cast<double>(paths);
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= n;
    double m2 = 0.0;
    double m4 = 0.0;
    for (double x : xs) {
        const double d = x - mean;
        m2 += d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m4 /= n;
    out.emp_mean = mean;
    out.emp_var = m2 * n / (n - 1.0);
    out.mean_stderr = std::sqrt(out.emp_var / n);
    out.var_stderr = std::sqrt(std::max(m4 - m2 * m2, 0.0) / n);

    const double m0 = x0 * spec.mean_factor(0.0);
    const double v0 = spec.transition_variance(0.0);
    out.ana_mean = m0 / (1.0 + spec.kappa * v0);
    out.ana_var = v0 / (1.0 + spec.kappa * v0);
    return out;
}

TerminalMoments tilted_moments_importance(const OuSpec& spec, std::size_t paths, double x0, std::uint64_t seed) {
    require_closed_form(spec);
    std::mt19937_64 rng = make_stream(seed, {kTagOracle, 4});
    std::normal_distribution<double> normal(0.0, 1.0);
    const double m0 = x0 * spec.mean_factor(0.0);
    const double v0 = spec.transition_variance(0.0);
    double sw = 0.0;
    double swx = 0.0;
    double swxx = 0.0;
    double sww = 0.0;
    std::vector<double> xs(paths);
    std::vector<double> ws(paths);
    for (std::size_t i = 0; i < paths; ++i) {
        const double x = m0 + std::sqrt(v0) * normal(rng);
        const double w = std::exp(-spec.terminal_cost(x));
        xs[i] = x;
        ws[i] = w;
        sw += w;
        swx += w * x;
        swxx += w * x * x;
        sww += w * w;
    }
    TerminalMoments out;
    out.emp_mean = swx / sw;
    out.emp_var = swxx / sw - out.emp_mean * out.emp_mean;
    double se_m = 0.0;
    double se_v = 0.0;
    for (std::size_t i = 0; i < paths; ++i) {
        const double dm = xs[i] - out.emp_mean;
        se_m += ws[i] * ws[i] * dm * dm;
        const double dv = dm * dm - out.emp_var;
        se_v += ws[i] * ws[i] * dv * dv;
    }
    out.mean_stderr = std::sqrt(se_m) / sw;
    out.var_stderr = std::sqrt(se_v) / sw;
    out.ana_mean = m0 / (1.0 + spec.kappa * v0);
    out.ana_var = v0 / (1.0 + spec.kappa * v0);
    return out;
}

std::vector<std::vector<double>> path_noise(std::size_t steps, std::size_t paths, std::uint64_t seed) {
    std::vector<std::vector<double>> noise(steps, std::vector<double>(paths));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < paths; ++i) {
        std::mt19937_64 rng = make_stream(seed, {kTagOracle, 5, i});
        for (std::size_t k = 0; k < steps; ++k) noise[k][i] = normal(rng);
    }
    return noise;
}

PathBatch simulate_paths(double a, const PathModel& model, const std::vector<std::vector<double>>& noise) {
    if (model.steps == 0 || !(model.dt > 0.0)) throw std::invalid_argument("simulate_paths: bad step grid");
    if (noise.empty()) throw std::invalid_argument("simulate_paths: no noise");
    const std::size_t m = noise.front().size();
    if (m == 0) throw std::invalid_argument("simulate_paths: no paths");

    Graph g;
    const NodeId a0 = g.leaf(Tensor(m, 1, a));
    NodeId x = a0;
    std::optional<NodeId> cost;
    auto column = [&](std::size_t k, double scale) {
        Tensor t(m, 1);
        for (std::size_t i = 0; i < m; ++i) t[i] = scale * noise[k][i];
        return t;
    };

    if (model.exact_transition) {
        if (model.c_quad != 0.0) throw std::invalid_argument("simulate_paths: exact transition has no running cost");
        const double tau = model.horizon();
        const double var = model.eps / model.a_rate * (1.0 - std::exp(-2.0 * model.a_rate * tau));
        x = g.add_const(g.scale(x, std::exp(-model.a_rate * tau)), column(0, std::sqrt(var)));
    } else {
        if (noise.size() < model.steps) throw std::invalid_argument("simulate_paths: too few noise rows");
        const double diffusion = std::sqrt(2.0 * model.eps * model.dt);
        for (std::size_t k = 0; k < model.steps; ++k) {
            x = g.add_const(g.scale(x, 1.0 - model.a_rate * model.dt), column(k, diffusion));
            if (model.c_quad != 0.0) {
                const NodeId c = g.scale(g.mul(x, x), 0.5 * model.c_quad * model.dt);
                cost = cost ? g.add(*cost, c) : c;
            }
        }
    }
    const NodeId term = g.scale(g.mul(x, x), 0.5 * model.kappa);
    const NodeId j = cost ? g.add(*cost, term) : term;
    const tape::Gradients grads = g.backward(g.sum(j));

    PathBatch out;
    out.cost.assign(g.value(j).values().begin(), g.value(j).values().end());
    out.force.resize(m);
    for (std::size_t i = 0; i < m; ++i) out.force[i] = -grads[a0][i];
    return out;
}

Estimate self_normalized_force(const PathBatch& batch) {
    const std::size_t m = batch.cost.size();
    if (m == 0 || batch.force.size() != m) throw std::invalid_argument("self_normalized_force: bad batch");
    const double jmin = *std::min_element(batch.cost.begin(), batch.cost.end());
    if (std::exp(-jmin) == 0.0) throw DegeneratePosterior("posterior weights all underflow");
    double sw = 0.0;
    double swf = 0.0;
    std::vector<double> w(m);
    for (std::size_t i = 0; i < m; ++i) {
        w[i] = std::exp(-(batch.cost[i] - jmin));
        sw += w[i];
        swf += w[i] * batch.force[i];
    }
    const double s = swf / sw;
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) var += w[i] * w[i] * (batch.force[i] - s) * (batch.force[i] - s);
    return {s, std::sqrt(var) / sw};
}

Estimate brute_posterior_force(double a, const PathModel& model, std::size_t paths, std::uint64_t seed) {
    if (paths == 0) throw std::invalid_argument("brute_posterior_force: need at least one path");
    const std::size_t rows = model.exact_transition ? 1 : model.steps;
    return self_normalized_force(simulate_paths(a, model, path_noise(rows, paths, seed)));
}

Decomposition error_decomposition(double a, const PathModel& estimator, const PathModel& oracle, std::size_t paths,
                                  std::uint64_t seed) {
    if (estimator.exact_transition || oracle.exact_transition) {
        throw std::invalid_argument("error_decomposition: both path maps must be Euler-Maruyama");
    }
    const double ratio = estimator.dt / oracle.dt;
    const auto stride = static_cast<std::size_t>(std::llround(ratio));
    if (stride == 0 || std::abs(ratio - static_cast<double>(stride)) > 1e-9) {
        throw std::invalid_argument("error_decomposition: estimator dt must be a multiple of oracle dt");
    }
    if (estimator.steps * stride > oracle.steps) {
        throw std::invalid_argument("error_decomposition: estimator horizon exceeds oracle horizon");
    }

    const auto fine = path_noise(oracle.steps, paths, seed);
    std::vector<std::vector<double>> coarse(estimator.steps, std::vector<double>(paths, 0.0));
    const double norm = 1.0 / std::sqrt(static_cast<double>(stride));
    for (std::size_t k = 0; k < estimator.steps; ++k) {
        for (std::size_t s = 0; s < stride; ++s) {
            for (std::size_t i = 0; i < paths; ++i) coarse[k][i] += fine[k * stride + s][i];
        }
        for (double& v : coarse[k]) v *= norm;
    }

    const PathBatch est = simulate_paths(a, estimator, coarse);
    const PathBatch phy = simulate_paths(a, oracle, fine);

    auto weights = [](const std::vector<double>& cost) {
        const double jmin = *std::min_element(cost.begin(), cost.end());
        if (std::exp(-jmin) == 0.0) throw DegeneratePosterior("posterior weights all underflow");
        std::vector<double> w(cost.size());
        for (std::size_t i = 0; i < cost.size(); ++i) w[i] = std::exp(-(cost[i] - jmin));
        return w;
    };
    auto weighted = [](const std::vector<double>& w, auto&& f) {
        double sw = 0.0;
        double swf = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            sw += w[i];
            swf += w[i] * f(i);
        }
        return swf / sw;
    };

    const std::vector<double> wq = weights(est.cost);
    const std::vector<double> wp = weights(phy.cost);
    Decomposition d;
    d.estimator = weighted(wq, [&](std::size_t i) { return est.force[i]; });
    d.oracle = weighted(wp, [&](std::size_t i) { return phy.force[i]; });
    const double shifted = weighted(wp, [&](std::size_t i) { return est.force[i]; });
    d.total = d.estimator - d.oracle;
    d.term_distribution = d.estimator - shifted;
    d.term_dynamics = weighted(wp, [&](std::size_t i) { return est.force[i] - phy.force[i]; });
    return d;
}

}  // namespace ssip::oracle
