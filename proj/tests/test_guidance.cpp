#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ssip/guidance.hpp"
#include "ssip/oracle.hpp"
#include "ssip/rng.hpp"

#include <cmath>

using namespace ssip;
using tape::Graph;
using tape::NodeId;
using tape::Tensor;

namespace {

// Critic whose logit is w . a (time, context and phi ignored).
Critic linear_critic(const Vec& w, CcgVariant variant = CcgVariant::probability) {
    std::mt19937_64 rng(0);
    const std::size_t in = w.size() + kTimeFeatures + 2 + 2;
    const std::vector<std::size_t> dims = {in, 1};
    Critic c;
    c.variant = variant;
    c.net = tape::make_mlp(dims, 1.0, rng);
    c.net.layers[0].weight = Tensor(1, in);
    for (std::size_t j = 0; j < w.size(); ++j) c.net.layers[0].weight[j] = w[j];
    c.net.layers[0].bias = Tensor(1, 1);
    return c;
}

double vnorm(const Vec& v) { return std::hypot(v[0], v[1]); }

}  // namespace

TEST_CASE("ensemble value degenerate cases") {
    const LinearDrift model(1.0, 0.5, 2);
    const Vec a = {0.2, -0.1};
    const EnsembleConfig one{.members = 1, .steps = 3, .dt_sim = 0.1, .sigma_rollout = 1.0};
    const QuadraticCost quad(1.0, 1.0);
    const auto noise = ensemble_noise(one, 2, 1, 0);
    Graph g;
    const StegTrace tr = steg_value(g, g.leaf(Tensor::row(a)), 0.0, {}, model, one, quad, noise);
    CHECK(g.value(tr.value).item() == -g.value(tr.total_cost).item());

    const EnsembleConfig many{.members = 16, .steps = 3, .dt_sim = 0.1, .sigma_rollout = 1.0};
    const StegGradient z = steg_gradient(a, 0.0, {}, model, many, ZeroCost{}, ensemble_noise(many, 2, 1, 0));
    CHECK(z.value == 0.0);
    CHECK(z.gradient == Vec{0.0, 0.0});
}

TEST_CASE("ensemble value converges to the log desirability of a brute-force oracle") {
    // 1D OU base, quadratic running cost, K = 5 steps.
    const LinearDrift model(1.0, 0.5, 1);
    const QuadraticCost cost(1.0, 0.0);
    const std::size_t k = 5;
    const double dt = 0.1;
    const EnsembleConfig ens{.members = 4096, .steps = k, .dt_sim = dt, .sigma_rollout = 1.0};
    const StegGradient sg = steg_gradient(Vec{0.8}, 0.0, {}, model, ens, cost, ensemble_noise(ens, 1, 2, 0));

    // Plain Monte Carlo with the same discretization and independent noise.
    constexpr std::size_t kPaths = 1000000;
    std::mt19937_64 rng = make_stream(99, {kTagOracle});
    std::normal_distribution<double> normal(0.0, 1.0);
    double s = 0, ss = 0;
    for (std::size_t i = 0; i < kPaths; ++i) {
        double x = 0.8, j = 0;
        for (std::size_t step = 0; step < k; ++step) {
            x += -x * dt + std::sqrt(dt) * normal(rng);
            j += 0.5 * x * x * dt;
        }
        const double w = std::exp(-j);
        s += w;
        ss += w * w;
    }
    const double mean = s / kPaths;
    const double sd = std::sqrt(ss / kPaths - mean * mean);
    const double oracle = std::log(mean);
    const double se = std::hypot(sd / (std::sqrt(double(kPaths)) * mean), sd / (std::sqrt(4096.0) * mean));
    CHECK(std::abs(sg.value - oracle) < 3 * se);
}

TEST_CASE("ensemble gradient matches the closed-form guidance field") {
    const oracle::OuSpec spec;
    const LinearDrift model(spec.a_rate, spec.eps, 1);
    const QuadraticCost cost(0.0, spec.kappa);
    const double x = -0.7, t = 0.4;
    const std::size_t k = 60;
    const EnsembleConfig ens{.members = 4096, .steps = k, .dt_sim = (spec.horizon - t) / k,
                             .sigma_rollout = std::sqrt(2 * spec.eps)};
    const StegGradient sg = steg_gradient(Vec{x}, t, {}, model, ens, cost, ensemble_noise(ens, 1, 4, 0));
    const double exact = oracle::ou_grad_log_u(x, t, spec);
    CHECK(std::abs(sg.gradient[0] - exact) / std::abs(exact) < 0.1);
}

TEST_CASE("steg drift gating") {
    GuidanceConfig cfg;
    cfg.lambda = 2.0;
    cfg.d_act = 80.0;
    const Vec g = {3.0, 4.0};
    CHECK(steg_drift(g, 80.0, cfg) == Vec{0.0, 0.0});
    CHECK(steg_drift(g, 120.0, cfg) == Vec{0.0, 0.0});
    const Vec d = steg_drift(g, 40.0, cfg);  // w = 2 * 0.5, clipped unit gradient
    CHECK(d[0] == doctest::Approx(0.6));
    CHECK(d[1] == doctest::Approx(0.8));
    cfg.lambda = 0.0;
    CHECK(steg_drift(g, 10.0, cfg) == Vec{0.0, 0.0});
}

TEST_CASE("ccg targets") {
    const std::vector<double> zero_cost(4, 0.0);
    const std::vector<double> far(4, 100.0);
    const CcgTargets safe = ccg_targets(zero_cost, far, 25.0);
    CHECK(safe.y_distance == 0.0);
    CHECK(safe.y_probability == 0.0);
    CHECK(ccg_targets(zero_cost, std::vector<double>(4, 1.0), 25.0).y_probability == 1.0);
    CHECK(ccg_targets(zero_cost, std::vector<double>{1, 100, 2, 100}, 25.0).y_probability == 0.5);
    CHECK_THROWS(ccg_targets({}, {}, 1.0));
}

TEST_CASE("critic regression") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    auto sample = [&](double y) {
        return CriticSample{{u(rng), u(rng)}, 0.5 * (u(rng) + 1), {u(rng), u(rng)}, {u(rng), u(rng)}, y};
    };

    SUBCASE("constant target") {
        std::vector<CriticSample> data;
        for (int i = 0; i < 256; ++i) data.push_back(sample(0.3));
        CriticTrainConfig cfg;
        cfg.hidden = {16};
        cfg.epochs = 150;
        const Critic c = ccg_train(data, cfg);
        const Critic again = ccg_train(data, cfg);
        CHECK(c == again);
        double mse = 0;
        for (const CriticSample& s : data) {
            const double p = 1.0 / (1.0 + std::exp(-critic_eval(c, s.a, s.t, s.h, s.phi).value));
            mse += (p - 0.3) * (p - 0.3);
        }
        CHECK(mse / data.size() < 1e-3);
    }

    SUBCASE("separable collide/safe states") {
        auto label = [](const CriticSample& s) { return s.a[0] + 0.5 * s.a[1] > 0.1 ? 1.0 : 0.0; };
        std::vector<CriticSample> train, test;
        for (int i = 0; i < 512; ++i) {
            CriticSample s = sample(0);
            s.y = label(s);
            train.push_back(s);
        }
        for (int i = 0; i < 200; ++i) {
            CriticSample s = sample(0);
            s.y = label(s);
            test.push_back(s);
        }
        CriticTrainConfig cfg;
        cfg.hidden = {16, 16};
        cfg.epochs = 100;
        const Critic c = ccg_train(train, cfg);
        std::vector<double> pos, neg;
        for (const CriticSample& s : test) (s.y > 0.5 ? pos : neg).push_back(critic_eval(c, s.a, s.t, s.h, s.phi).value);
        double wins = 0;
        for (double p : pos) {
            for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
        }
        const double auc = wins / (pos.size() * neg.size());
        MESSAGE("held-out AUC " << auc);
        CHECK(auc > 0.95);
    }
}

TEST_CASE("critic gradient matches finite differences") {
    std::mt19937_64 rng(8);
    Critic c;
    const std::vector<std::size_t> dims = {2 + kTimeFeatures + 4, 8, 1};
    c.net = tape::make_mlp(dims, 1.0, rng);
    const Vec a = {0.1, -0.3}, h = {0.2, 0.2}, phi = {-0.5, 0.4};
    const CriticEval ev = critic_eval(c, a, 0.3, h, phi);
    for (std::size_t j = 0; j < 2; ++j) {
        Vec ap = a, am = a;
        ap[j] += 1e-6;
        am[j] -= 1e-6;
        const double fd = (critic_eval(c, ap, 0.3, h, phi).value - critic_eval(c, am, 0.3, h, phi).value) / 2e-6;
        CHECK(ev.gradient[j] == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("ccg drift gating") {
    const Vec h = {0.0, 0.0}, phi = {0.0, 0.0};
    GuidanceConfig cfg;
    cfg.lambda = 1.0;
    const Critic c = linear_critic({1.0, 0.0});

    cfg.k_power = 1.0;
    const double m1 = vnorm(ccg_drift(Vec{0.0, 0.0}, 0.5, h, phi, c, cfg));
    cfg.k_power = 4.0;
    const double m4 = vnorm(ccg_drift(Vec{0.0, 0.0}, 0.5, h, phi, c, cfg));
    CHECK(m1 / m4 == doctest::Approx(8.0));
    CHECK(m1 == doctest::Approx(0.5));
    // Direction: away from increasing risk.
    CHECK(ccg_drift(Vec{0.0, 0.0}, 0.5, h, phi, c, cfg)[0] < 0.0);

    const Critic safe = linear_critic({50.0, 0.0});
    CHECK(vnorm(ccg_drift(Vec{-10.0, 0.0}, 0.5, h, phi, safe, cfg)) < 1e-100);

    cfg.lambda = 0.0;
    CHECK(ccg_drift(Vec{0.0, 0.0}, 0.5, h, phi, c, cfg) == Vec{0.0, 0.0});

    cfg.lambda = 1.0;
    const Critic dist = linear_critic({0.0, 2.0}, CcgVariant::distance);
    const Vec d = ccg_drift(Vec{0.0, 0.0}, 0.5, h, phi, dist, cfg);
    CHECK(d[1] == doctest::Approx(1.0));
}

TEST_CASE("repulsion field") {
    GuidanceConfig cfg;
    cfg.lambda = 1.0;
    cfg.d_act = 80.0;
    const std::vector<Vec2> one = {{100, 100}};
    CHECK(repulsion_drift({100, 180}, one, cfg).force == Vec2{0, 0});
    CHECK(repulsion_drift({100, 300}, one, cfg).force == Vec2{0, 0});
    const RepulsionResult half = repulsion_drift({100, 140}, one, cfg);
    CHECK(half.force[0] == doctest::Approx(0.0));
    CHECK(half.force[1] == doctest::Approx(0.25));
    const std::vector<Vec2> pair = {{60, 100}, {140, 100}};
    const Vec2 f = repulsion_drift({100, 100}, pair, cfg).force;
    CHECK(std::abs(f[0]) < 1e-15);
    CHECK(std::abs(f[1]) < 1e-15);
    CHECK(repulsion_drift({100, 100}, one, cfg).degenerate);
}

TEST_CASE("lookahead") {
    GuidanceConfig cfg;
    cfg.lambda = 1.5;
    const Vec a = {0.1, 0.2}, v = {1.0, -1.0};
    Vec seen;
    auto spy = [&](std::span<const double> p) {
        seen.assign(p.begin(), p.end());
        return Vec{0.0, 0.0};
    };
    CHECK(lookahead_drift(a, 1.0, v, spy, cfg) == Vec{0.0, 0.0});
    CHECK(seen == a);
    lookahead_drift(a, 0.5, v, spy, cfg);
    CHECK(seen[0] == doctest::Approx(0.6));
    const Vec g = {0.3, -0.4};
    const Vec d = lookahead_drift(a, 0.2, v, [&](std::span<const double>) { return g; }, cfg);
    CHECK(d[0] == doctest::Approx(-1.5 * 0.3));
    CHECK(d[1] == doctest::Approx(1.5 * 0.4));
}

TEST_CASE("obstacle cost gradient matches its tape form") {
    const Normalizer n{{0, 0}, {512, 512}};
    const ObstacleCost cost({{250, 260}, {300, 200}}, 40.0, n);
    const Vec a = n.normalize(Vec{270.0, 240.0});
    Graph g;
    const NodeId an = g.leaf(Tensor::row(a));
    const NodeId c = cost.running(g, an);
    CHECK(g.value(c).item() == doctest::Approx(cost.value(a)));
    const tape::Gradients grads = g.backward(g.sum(c));
    const Vec direct = cost.gradient(a);
    CHECK(grads[an][0] == doctest::Approx(direct[0]));
    CHECK(grads[an][1] == doctest::Approx(direct[1]));
    const std::vector<Obstacle> obs = {Obstacle{{250, 260}}, Obstacle{{300, 200}}};
    CHECK(cost.value(a) == doctest::Approx(running_cost({270, 240}, obs, 40.0)));
}

TEST_CASE("config validation and parsing") {
    CHECK(parse_mechanism("steg") == Mechanism::steg);
    CHECK_FALSE(parse_mechanism("magic").has_value());
    GuidanceConfig bad;
    bad.d_act = 0;
    CHECK_THROWS(bad.validate());
    EnsembleConfig e;
    e.members = 0;
    CHECK_THROWS(e.validate());
}
