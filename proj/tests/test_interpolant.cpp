#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ssip/interpolant.hpp"

#include <cmath>

using namespace ssip;
using tape::Tensor;

namespace {

Demonstration straight_line(std::size_t steps = 17) {
    std::vector<Vec> pts;
    for (std::size_t i = 0; i < steps; ++i) pts.push_back({static_cast<double>(i) / (steps - 1), 0.0});
    return Demonstration(pts, {0.0, 0.0});
}

// Single linear layer whose output is the constant `value`.
tape::MlpParams constant_net(std::size_t in, const Vec& value) {
    std::mt19937_64 rng(0);
    const std::vector<std::size_t> dims = {in, value.size()};
    tape::MlpParams p = tape::make_mlp(dims, 1.0, rng);
    p.layers[0].weight = Tensor(value.size(), in);
    p.layers[0].bias = Tensor::row(value);
    return p;
}

}  // namespace

TEST_CASE("demonstration interpolation") {
    const Demonstration d = straight_line();
    CHECK(d.position(0.5)[0] == doctest::Approx(0.5));
    CHECK(d.velocity(0.3)[0] == doctest::Approx(1.0));
    CHECK(d.velocity(1.0)[0] == doctest::Approx(1.0));
    CHECK(d.xi_dot().size() == d.steps());
    CHECK_THROWS(Demonstration({{0.0, 0.0}}, {}));
}

TEST_CASE("training point construction") {
    const ScheduleSet s;
    const Demonstration d = straight_line();
    const Vec zero = {0.0, 0.0};
    const TrainingPoint p = make_training_point(d, s, 0.4, zero, zero);
    CHECK(p.a_t == d.position(0.4));
    CHECK(p.v_target[0] == doctest::Approx(d.velocity(0.4)[0]));
    CHECK(p.v_target[1] == doctest::Approx(0.0));

    const double t = std::log(0.05 / 0.02) / 5.0;  // sigma(t) = 0.02
    const TrainingPoint q = make_training_point(d, s, t, Vec{1.0, 0.0}, zero);
    CHECK(q.v_target[0] == doctest::Approx(d.velocity(t)[0] - 0.1));
    CHECK(q.v_target[1] == doctest::Approx(0.0));
}

TEST_CASE("sfp velocity") {
    const Demonstration d = straight_line();
    CHECK(sfp_velocity(d.position(0.3), 0.3, d, 5.0)[0] == doctest::Approx(1.0));
    const Vec v = sfp_velocity(Vec{0.5, 0.1}, 0.5, d, 5.0);
    CHECK(v[0] == doctest::Approx(1.0));
    CHECK(v[1] == doctest::Approx(-0.5));
    const Vec k0 = sfp_velocity(Vec{0.9, -3.0}, 0.5, d, 0.0);
    CHECK(k0[0] == doctest::Approx(1.0));
    CHECK(k0[1] == doctest::Approx(0.0));
}

TEST_CASE("score from eta") {
    const ScheduleSet s;
    const Vec zero = score_from_eta(Vec{0.0, 0.0}, 0.3, s);
    CHECK(zero[0] == 0.0);
    const Vec v = score_from_eta(Vec{0.05, 0.0}, 0.5, s);
    CHECK(v[0] == doctest::Approx(-1.0));
    CHECK(v[1] == 0.0);
    const Vec edge = score_from_eta(Vec{1.0, 0.0}, 0.0, s);
    CHECK(edge[0] == doctest::Approx(-1.0 / s.gamma_floor));
}

TEST_CASE("losses") {
    const ScheduleSet s;
    const Demonstration d = straight_line();
    const TrainingPoint p = make_training_point(d, s, 0.25, Vec{0.3, 0.0}, Vec{0.5, -1.0});
    const std::size_t in = 2 + kTimeFeatures + 2;
    const std::vector<TrainingPoint> batch = {p};

    tape::Graph g;
    CHECK(g.value(velocity_loss(g, constant_net(in, p.v_target), batch).loss).item() == doctest::Approx(0.0));
    CHECK(g.value(score_loss(g, constant_net(in, p.z), batch).loss).item() == doctest::Approx(0.0));
    const Vec off = {p.v_target[0] + 0.3, p.v_target[1] - 0.4};
    CHECK(g.value(velocity_loss(g, constant_net(in, off), batch).loss).item() == doctest::Approx(0.25));
}

TEST_CASE("normalizer round trip") {
    const auto demos = std::vector<Demonstration>{
        Demonstration({{10.0, 20.0}, {110.0, 220.0}}, {10.0, 20.0})};
    const Normalizer n = Normalizer::fit(demos);
    const Vec a = n.normalize(Vec{60.0, 120.0});
    CHECK(a[0] == doctest::Approx(0.0));
    CHECK(n.normalize(Vec{110.0, 220.0})[1] == doctest::Approx(1.0));
    const Vec back = n.denormalize(a);
    CHECK(back[0] == doctest::Approx(60.0));
    CHECK(n.world_per_unit()[0] == doctest::Approx(50.0));
}

TEST_CASE("chunk windows") {
    std::vector<Vec> pts;
    for (int i = 0; i < 10; ++i) pts.push_back({10.0 * i, 5.0 * i});
    const std::vector<Demonstration> paths = {Demonstration(pts, pts.front())};
    const Normalizer n = Normalizer::fit(paths);
    const auto windows = chunk_windows(paths, n, 4);
    REQUIRE_FALSE(windows.empty());
    for (const Demonstration& w : windows) {
        CHECK(w.steps() == 5);
        CHECK(w.context() == w.xi().front());
    }
    // The window starting at the last point holds the goal.
    const Demonstration& tail = windows.back();
    CHECK(tail.xi().front() == tail.xi().back());
    CHECK(tail.xi().back() == n.normalize(pts.back()));
}

TEST_CASE("training determinism and zero learning rate") {
    const ScheduleSet s;
    const std::vector<Demonstration> windows(8, straight_line());
    TrainConfig cfg;
    cfg.hidden = {16, 16};
    cfg.epochs = 3;
    cfg.batch_size = 4;
    auto fresh = [&] {
        std::mt19937_64 rng(cfg.seed);
        return make_policy_nets(2, 2, cfg.hidden, cfg.init_scale, rng);
    };
    PolicyNets a = fresh(), b = fresh();
    fit_policy(a, windows, s, cfg);
    fit_policy(b, windows, s, cfg);
    CHECK(a == b);
    CHECK_FALSE(a == fresh());

    cfg.learning_rate = 0.0;
    PolicyNets c = fresh();
    fit_policy(c, windows, s, cfg);
    CHECK(c == fresh());
}

TEST_CASE("straight line is learnable") {
    const ScheduleSet s;
    const std::vector<Demonstration> windows(64, straight_line());
    TrainConfig cfg;
    cfg.hidden = {32, 32};
    cfg.learning_rate = 3e-3;
    cfg.epochs = 500;
    std::mt19937_64 rng(cfg.seed);
    PolicyNets nets = make_policy_nets(2, 2, cfg.hidden, cfg.init_scale, rng);
    fit_policy(nets, windows, s, cfg);

    std::vector<TrainingPoint> mids;
    const Vec zero = {0.0, 0.0};
    for (int i = 0; i < 16; ++i) mids.push_back(make_training_point(windows[0], s, (i + 0.5) / 16.0, zero, zero));
    tape::Graph g;
    const double loss = g.value(velocity_loss(g, nets.v_net, mids).loss).item();
    MESSAGE("velocity loss at midpoints: " << loss);
    CHECK(loss < 1e-3);
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.batch_size = 0;
    CHECK_THROWS(cfg.validate());
    cfg = TrainConfig{};
    cfg.learning_rate = -1;
    CHECK_THROWS(cfg.validate());
}
