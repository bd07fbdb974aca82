#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ssip/sampler.hpp"
#include "ssip/rng.hpp"

#include <cmath>
#include <stdexcept>

using namespace ssip;

namespace {

const Normalizer kNorm{{0.0, 0.0}, {512.0, 512.0}};

PolicyNets random_nets(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::vector<std::size_t> hidden = {16, 16};
    return make_policy_nets(2, 2, hidden, 1.0, rng);
}

void set_constant_output(tape::MlpParams& net, const Vec& value) {
    tape::Layer& last = net.layers.back();
    last.weight = tape::Tensor(last.weight.rows(), last.weight.cols());
    last.bias = tape::Tensor::row(value);
}

Vec v_of(const PolicyNets& nets, const Vec& a, double t, const Vec& h) {
    Vec row(a.size() + kTimeFeatures + h.size());
    std::copy(a.begin(), a.end(), row.begin());
    time_features(t, std::span<double>(row.data() + a.size(), kTimeFeatures));
    std::copy(h.begin(), h.end(), row.begin() + static_cast<long>(a.size() + kTimeFeatures));
    const tape::Tensor out = tape::mlp_eval(nets.v_net, tape::Tensor::row(row));
    return {out[0], out[1]};
}

// b = k (goal - a) in normalized units; records every (t, h) it is queried with.
class GoalSeeker final : public DriftModel {
public:
    GoalSeeker(Vec goal, double gain, double eps) : goal_(std::move(goal)), gain_(gain), eps_(eps) {}

    Vec drift(std::span<const double> a, double t, std::span<const double> h, DriftForm) const override {
        calls.push_back({t, Vec(h.begin(), h.end())});
        Vec b(a.size());
        for (std::size_t j = 0; j < a.size(); ++j) b[j] = gain_ * (goal_[j] - a[j]);
        return b;
    }
    tape::NodeId drift_node(tape::Graph&, tape::NodeId, double, std::span<const double>, DriftForm) const override {
        throw std::logic_error("not differentiable");
    }
    double epsilon(double) const override { return eps_; }
    std::size_t dim() const override { return 2; }

    struct Call {
        double t;
        Vec h;
    };
    mutable std::vector<Call> calls;

private:
    Vec goal_;
    double gain_;
    double eps_;
};

World2D open_world(Vec2 start) {
    World2D w;
    w.agent = start;
    w.start = start;
    return w;
}

}  // namespace

TEST_CASE("drift reductions") {
    ScheduleSet sched;
    const Vec a = {0.1, -0.2}, h = {0.3, 0.0};

    SUBCASE("zero denoiser gives b = v") {
        PolicyNets nets = random_nets(1);
        set_constant_output(nets.eta_net, {0.0, 0.0});
        sched.epsilon_kind = EpsilonKind::constant;
        sched.epsilon_value = 0.3;
        const PolicyDrift model(nets, sched);
        const Vec v = v_of(nets, a, 0.3, h);
        for (DriftForm f : {DriftForm::ode, DriftForm::sde}) {
            const Vec b = model.drift(a, 0.3, h, f);
            CHECK(b[0] == doctest::Approx(v[0]).epsilon(1e-14));
            CHECK(b[1] == doctest::Approx(v[1]).epsilon(1e-14));
        }
    }
    SUBCASE("midpoint with zero diffusivity gives b = v") {
        const PolicyNets nets = random_nets(2);
        const PolicyDrift model(nets, sched);
        const Vec v = v_of(nets, a, 0.5, h);
        const Vec b = model.drift(a, 0.5, h, DriftForm::sde);
        CHECK(b[0] == doctest::Approx(v[0]).epsilon(1e-14));
        CHECK(b[1] == doctest::Approx(v[1]).epsilon(1e-14));
    }
    SUBCASE("vanishing noise scale gives b = v everywhere") {
        sched.gamma_scale = 0.0;
        const PolicyNets nets = random_nets(3);
        const PolicyDrift model(nets, sched);
        for (double t : {0.0, 0.2, 0.9}) {
            const Vec v = v_of(nets, a, t, h);
            CHECK(model.drift(a, t, h, DriftForm::ode) == v);
            CHECK(model.drift(a, t, h, DriftForm::sde) == v);
        }
    }
    SUBCASE("score coefficient") {
        sched.epsilon_kind = EpsilonKind::constant;
        sched.epsilon_value = 0.02;
        const PolicyNets nets = random_nets(4);
        const PolicyDrift model(nets, sched);
        CHECK(model.score_coefficient(0.25, DriftForm::sde) == doctest::Approx(0.0175));
        CHECK(model.score_coefficient(0.25, DriftForm::ode) == doctest::Approx(-0.0025));
    }
}

TEST_CASE("Euler-Maruyama moments of an Ornstein-Uhlenbeck drift") {
    const LinearDrift model(1.0, 0.5, 1);
    const std::size_t n = 100, paths = 20000;
    const double dt = 0.01, x0 = 1.0;
    std::mt19937_64 rng = make_stream(11, {kTagSampler});
    const Vec none = {0.0};
    double s = 0, ss = 0;
    for (std::size_t p = 0; p < paths; ++p) {
        StreamState st{{x0}, 0.0, {}, 0};
        for (std::size_t k = 0; k < n; ++k) st = sde_step(st, model, none, dt, rng);
        s += st.a[0];
        ss += st.a[0] * st.a[0];
        CHECK(st.t == doctest::Approx(1.0));
    }
    const double mean = s / paths;
    const double var = ss / paths - mean * mean;
    // Exact moments of the discrete recursion.
    const double r = 1.0 - dt;
    const double exp_mean = std::pow(r, double(n)) * x0;
    const double exp_var = 2 * 0.5 * dt * (1 - std::pow(r, 2.0 * n)) / (1 - r * r);
    CHECK(std::abs(mean - exp_mean) < 3 * std::sqrt(exp_var / paths));
    CHECK(std::abs(var - exp_var) < 3 * exp_var * std::sqrt(2.0 / paths));
}

TEST_CASE("ode_step and sde_step with zero noise agree for zero diffusivity") {
    const LinearDrift model(2.0, 0.0, 2);
    const StreamState s{{0.4, -0.1}, 0.25, {0.0, 0.0}, 3};
    const Vec extra = {0.5, 0.5};
    const StreamState o = ode_step(s, model, extra, 0.1);
    const StreamState e = sde_step(s, model, extra, 0.1, Vec{1.0, -1.0});
    CHECK(o.a == e.a);
    CHECK(o.a[0] == doctest::Approx(0.4 + (-0.8 + 0.5) * 0.1));
    CHECK(o.t == doctest::Approx(0.35));
    CHECK(o.step_index == 4);
}

TEST_CASE("flow time alignment") {
    SamplerConfig cfg;
    CHECK(aligned_flow_time(0, cfg) == 0.0);
    CHECK(aligned_flow_time(7, cfg) == doctest::Approx(7.0 / 16.0));
    CHECK(aligned_flow_time(8, cfg) == 0.0);
    CHECK(aligned_flow_time(13, cfg) == doctest::Approx(5.0 / 16.0));
    cfg.exec_horizon = 16;
    CHECK(aligned_flow_time(15, cfg) == doctest::Approx(15.0 / 16.0));
    CHECK(aligned_flow_time(16, cfg) == 0.0);
    cfg.exec_horizon = 17;
    CHECK_THROWS(cfg.validate());
}

TEST_CASE("streaming freezes context between handoffs") {
    const GoalSeeker model(kNorm.normalize(Vec{256, 440}), 2.0, 0.0);
    const Guidance guidance(GuidanceConfig{}, EnsembleConfig{}, model, kNorm);
    SamplerConfig cfg;
    World2D w = open_world({100, 60});
    w.params.max_steps = 24;
    w.params.goal_tolerance = 0.0;
    const EpisodeResult r = streaming_execute(w, model, kNorm, guidance, cfg, 1);
    REQUIRE(model.calls.size() == 24);
    for (std::size_t i = 0; i < model.calls.size(); ++i) {
        CHECK(model.calls[i].t == doctest::Approx(double(i % 8) / 16.0));
        const std::size_t block = i - i % 8;
        CHECK(model.calls[i].h == model.calls[block].h);
        if (block > 0) CHECK(model.calls[block].h == kNorm.normalize(r.agent_trace[block]));
    }
    CHECK(model.calls[0].h == kNorm.normalize(Vec{100, 60}));
    CHECK(model.calls[8].h != model.calls[0].h);
}

TEST_CASE("a constant velocity field carries the start to the end of the chunk") {
    const Vec xi0 = {-0.4, -0.6}, xi1 = {0.1, 0.7};
    PolicyNets nets = random_nets(5);
    set_constant_output(nets.v_net, {xi1[0] - xi0[0], xi1[1] - xi0[1]});
    set_constant_output(nets.eta_net, {0.0, 0.0});
    SamplerConfig cfg;
    const PolicyDrift model(nets, cfg.schedules);
    const Guidance guidance(GuidanceConfig{}, EnsembleConfig{}, model, kNorm);
    const std::vector<Vec> chunk = chunked_generate(xi0, xi0, open_world({0, 0}), model, guidance, cfg, 0, 0);
    REQUIRE(chunk.size() == 16);
    CHECK(std::abs(chunk.back()[0] - xi1[0]) < 1e-12);
    CHECK(std::abs(chunk.back()[1] - xi1[1]) < 1e-12);
    CHECK(chunk[7][0] == doctest::Approx(xi0[0] + 0.5 * (xi1[0] - xi0[0])));
}

TEST_CASE("closed-loop equivalences") {
    const Vec goal = kNorm.normalize(Vec{256, 440});
    World2D w = open_world({150, 80});
    w.obstacles.push_back(Obstacle{{230, 250}, 25.0, {}, OscillateBehavior{{230, 250}, 30.0, 0.05, {1.0, 0.0}}});
    w.obstacles.push_back(Obstacle{{320, 330}});
    SamplerConfig cfg;

    auto trace = [&](const SamplerConfig& c, const GuidanceConfig& g, double eps, std::uint64_t seed) {
        const GoalSeeker model(goal, 3.0, eps);
        const Guidance guidance(g, EnsembleConfig{}, model, kNorm);
        return c.execution == Execution::chunked ? chunked_execute(w, model, kNorm, guidance, c, seed).action_trace
                                                 : streaming_execute(w, model, kNorm, guidance, c, seed).action_trace;
    };

    SUBCASE("zero diffusivity: sde == ode") {
        SamplerConfig sde = cfg;
        sde.mode = SamplerMode::sde;
        CHECK(trace(sde, {}, 0.0, 4) == trace(cfg, {}, 0.0, 4));
    }
    SUBCASE("seeded determinism") {
        SamplerConfig sde = cfg;
        sde.mode = SamplerMode::sde;
        CHECK(trace(sde, {}, 0.01, 4) == trace(sde, {}, 0.01, 4));
        CHECK(trace(sde, {}, 0.01, 4) != trace(sde, {}, 0.01, 5));
    }
    SUBCASE("zero guidance strength leaves the trace unchanged") {
        for (SamplerMode mode : {SamplerMode::ode, SamplerMode::sde}) {
            SamplerConfig c = cfg;
            c.mode = mode;
            const auto base = trace(c, {}, 0.01, 9);
            for (Mechanism m : {Mechanism::repulsion, Mechanism::lookahead, Mechanism::steg}) {
                GuidanceConfig g;
                g.mechanism = m;
                g.lambda = 0.0;
                CHECK(trace(c, g, 0.01, 9) == base);
            }
            GuidanceConfig on;
            on.mechanism = Mechanism::repulsion;
            CHECK(trace(c, on, 0.01, 9) != base);
        }
    }
    SUBCASE("unguided chunked and streaming execution coincide") {
        for (SamplerMode mode : {SamplerMode::ode, SamplerMode::sde}) {
            SamplerConfig s = cfg, c = cfg;
            s.mode = c.mode = mode;
            c.execution = Execution::chunked;
            CHECK(trace(s, {}, 0.01, 2) == trace(c, {}, 0.01, 2));
        }
    }
    SUBCASE("chunked execution commits to the generated chunk") {
        GuidanceConfig g;
        g.mechanism = Mechanism::repulsion;
        g.lambda = 4.0;
        const GoalSeeker model(goal, 3.0, 0.0);
        const Guidance guidance(g, EnsembleConfig{}, model, kNorm);
        SamplerConfig c = cfg;
        c.execution = Execution::chunked;
        const EpisodeResult r = chunked_execute(w, model, kNorm, guidance, c, 1);
        const Vec a0 = kNorm.normalize(w.agent);
        const std::vector<Vec> chunk = chunked_generate(a0, a0, w, model, guidance, c, 1, 0);
        REQUIRE(r.action_trace.size() >= 8);
        for (std::size_t i = 0; i < 8; ++i) {
            const Vec act = kNorm.denormalize(chunk[i]);
            CHECK(r.action_trace[i] == Vec2{act[0], act[1]});
        }
    }
}

TEST_CASE("episode bookkeeping") {
    const GoalSeeker model(kNorm.normalize(Vec{256, 440}), 8.0, 0.0);
    const Guidance guidance(GuidanceConfig{}, EnsembleConfig{}, model, kNorm);
    SamplerConfig cfg;

    const EpisodeResult free = streaming_execute(open_world({256, 100}), model, kNorm, guidance, cfg, 0);
    CHECK_FALSE(free.collided);
    CHECK(free.success);
    CHECK(free.final_goal_distance < 15.0);
    CHECK(free.steps < 250);
    CHECK(free.latency_ms.size() == std::size_t(free.steps));

    World2D blocked = open_world({256, 100});
    blocked.obstacles.push_back(Obstacle{{256, 250}, 40.0});
    const EpisodeResult hit = streaming_execute(blocked, model, kNorm, guidance, cfg, 0);
    CHECK(hit.collided);
    CHECK_FALSE(hit.success);
    CHECK(hit.steps < free.steps);
    CHECK(hit.min_obstacle_distance <= 0.0);
}
