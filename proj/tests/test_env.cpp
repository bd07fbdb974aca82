#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ssip/env.hpp"

#include <cmath>

using namespace ssip;

TEST_CASE("oscillate returns to the anchor at zero phase") {
    Obstacle o;
    o.behavior = OscillateBehavior{{100, 200}, 40.0, 0.03, {1, 0}};
    const double half_period = 1.0 / (2.0 * 0.03);  // not an integer; step 0 is the exact zero
    CHECK(step_obstacle(o, {0, 0}, 0).position == Vec2{100, 200});
    const Obstacle q = step_obstacle(o, {0, 0}, 50);
    CHECK(q.position[0] == doctest::Approx(100 + 40 * std::sin(2 * std::acos(-1.0) * 0.03 * 50)));
    CHECK(q.position[1] == 200);
    CHECK(half_period > 0);
}

TEST_CASE("intercept reaches its target at the deadline and halts") {
    Obstacle o;
    o.behavior = InterceptBehavior{{0, 0}, {100, 50}, 50};
    const Obstacle at = step_obstacle(o, {0, 0}, 50);
    CHECK(at.position[0] == doctest::Approx(100));
    CHECK(at.position[1] == doctest::Approx(50));
    const Obstacle later = step_obstacle(at, {0, 0}, 80);
    CHECK(later.position == at.position);
    CHECK(later.velocity == Vec2{0, 0});
    const Obstacle mid = step_obstacle(o, {0, 0}, 25);
    CHECK(mid.position[0] == doctest::Approx(50));
}

TEST_CASE("chase from rest") {
    Obstacle o;
    o.position = {10, 10};
    o.behavior = ChaseBehavior{0.4, 3.0};
    const Obstacle q = step_obstacle(o, {11, 10}, 1);
    CHECK(q.velocity[0] == doctest::Approx(1.2));
    CHECK(q.velocity[1] == doctest::Approx(0.0));
    CHECK(q.position[0] == doctest::Approx(11.2));
    // Agent exactly on the chaser: keep the old velocity.
    const Obstacle r = step_obstacle(q, q.position, 2);
    CHECK(r.velocity == q.velocity);
}

TEST_CASE("running cost") {
    const std::vector<Obstacle> obs = {Obstacle{{100, 100}}};
    CHECK(running_cost({100, 100}, obs, 40) == 1.0);
    CHECK(running_cost({140, 100}, obs, 40) == doctest::Approx(std::exp(-0.5)));
    CHECK(running_cost({500, 500}, obs, 40) < 1e-20);
    const double h = 1e-5;
    const Vec2 x{130, 85};
    const Vec2 g = running_cost_gradient(x, obs, 40);
    CHECK(g[0] == doctest::Approx((running_cost({x[0] + h, x[1]}, obs, 40) - running_cost({x[0] - h, x[1]}, obs, 40)) / (2 * h)));
    CHECK(g[1] == doctest::Approx((running_cost({x[0], x[1] + h}, obs, 40) - running_cost({x[0], x[1] - h}, obs, 40)) / (2 * h)));
}

TEST_CASE("collision and reward") {
    const std::vector<Obstacle> obs = {Obstacle{{100, 100}, 25}};
    CHECK(collision_check({110, 100}, obs, 0));
    CHECK_FALSE(collision_check({126, 100}, obs, 0));
    CHECK(collision_check({126, 100}, obs, 2));

    World2D w;
    w.start = w.agent = {256, 100};
    CHECK(reward(w) == 0.0);
    w.agent = w.params.goal;
    CHECK(reward(w) == 1.0);
}

TEST_CASE("agent speed and bounds are clamped") {
    World2D w;
    w.agent = {10, 10};
    w.step({10, 100});
    CHECK(w.agent[1] == doctest::Approx(10 + w.params.max_agent_step));
    w.params.max_agent_step = 1000;
    w.step({-50, 600});
    CHECK(w.agent == Vec2{0, w.params.size});
    CHECK(w.step_count == 2);
}

TEST_CASE("world scripts are deterministic and sane") {
    const WorldParams p;
    for (ScriptKind k : {ScriptKind::empty, ScriptKind::static_field, ScriptKind::intercept,
                         ScriptKind::oscillate, ScriptKind::chase}) {
        WorldScript s;
        s.kind = k;
        const World2D a = make_world(s, p, 17);
        const World2D b = make_world(s, p, 17);
        CHECK(a.agent == b.agent);
        CHECK(a.obstacles.size() == b.obstacles.size());
        CHECK_FALSE(collision_check(a.agent, a.obstacles, 0));
        CHECK(parse_script_kind(to_string(k)) == k);
    }
    WorldScript s;
    s.kind = ScriptKind::static_field;
    CHECK(make_world(s, p, 3).obstacles.size() == 8);
    s.kind = ScriptKind::empty;
    CHECK(make_world(s, p, 3).obstacles.empty());
    CHECK_FALSE(parse_script_kind("nope").has_value());
}

TEST_CASE("demos end at the goal and are reproducible") {
    const WorldParams p;
    const auto demos = generate_demos(16, 5, p, 64);
    const auto again = generate_demos(16, 5, p, 64);
    REQUIRE(demos.size() == 16);
    for (std::size_t i = 0; i < demos.size(); ++i) {
        CHECK(demos[i].steps() == 64);
        const Vec& last = demos[i].xi().back();
        CHECK(distance({last[0], last[1]}, p.goal) < p.goal_tolerance);
        CHECK(demos[i].xi() == again[i].xi());
        for (const Vec& q : demos[i].xi()) {
            CHECK(q[0] >= 0);
            CHECK(q[0] <= p.size);
        }
    }
    CHECK(generate_demos(4, 6, p)[0].xi() != demos[0].xi());
}

TEST_CASE("validation") {
    WorldParams p;
    p.size = 0;
    CHECK_THROWS(p.validate());
    Obstacle o;
    o.radius = 0;
    CHECK_THROWS(step_obstacle(o, {0, 0}, 0));
    CHECK_THROWS(step_obstacle(Obstacle{}, {0, 0}, -1));
}
