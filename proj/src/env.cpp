#include "ssip/env.hpp"

#include "ssip/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace ssip {

double norm(Vec2 a) { return std::hypot(a[0], a[1]); }
double distance(Vec2 a, Vec2 b) { return norm(a - b); }

namespace {

struct ObstacleStepper {
    const Obstacle& obs;
    Vec2 agent;
    int step;

    Obstacle operator()(const StaticBehavior&) const { return obs; }

    Obstacle operator()(const InterceptBehavior& b) const {
        Obstacle out = obs;
        const int deadline = std::max(b.deadline, 1);
        const int k = std::min(step, deadline);
        const Vec2 v = (1.0 / deadline) * (b.target - b.start);
        out.position = b.start + static_cast<double>(k) * v;
        out.velocity = step < deadline ? v : Vec2{0.0, 0.0};
        return out;
    }

    Obstacle operator()(const OscillateBehavior& b) const {
        Obstacle out = obs;
        const double w = 2.0 * std::numbers::pi * b.frequency;
        out.position = b.anchor + (b.amplitude * std::sin(w * step)) * b.perp;
        out.velocity = (b.amplitude * w * std::cos(w * step)) * b.perp;
        return out;
    }

    Obstacle operator()(const ChaseBehavior& b) const {
        Obstacle out = obs;
        const Vec2 to_agent = agent - obs.position;
        const double d = norm(to_agent);
        if (d > 0.0) {
            out.velocity = (1.0 - b.turn_rate) * obs.velocity + (b.turn_rate * b.max_speed / d) * to_agent;
        }
        out.position = obs.position + out.velocity;
        return out;
    }
};

Vec2 clamp_to(Vec2 p, double size) {
    return {std::clamp(p[0], 0.0, size), std::clamp(p[1], 0.0, size)};
}

}  // namespace

Obstacle step_obstacle(const Obstacle& obstacle, Vec2 agent, int step_index) {
    if (step_index < 0) throw std::invalid_argument("step_obstacle: negative step index");
    if (!(obstacle.radius > 0.0)) throw std::invalid_argument("step_obstacle: radius must be > 0");
    return std::visit(ObstacleStepper{obstacle, agent, step_index}, obstacle.behavior);
}

void WorldParams::validate() const {
    if (!(size > 0.0)) throw std::invalid_argument("world: size must be > 0");
    if (max_steps <= 0) throw std::invalid_argument("world: max_steps must be > 0");
    if (!(goal_tolerance > 0.0)) throw std::invalid_argument("world: goal tolerance must be > 0");
    if (!(max_agent_step > 0.0)) throw std::invalid_argument("world: max agent step must be > 0");
    if (!(sigma_cost > 0.0)) throw std::invalid_argument("world: sigma_cost must be > 0");
    if (collision_margin < 0.0) throw std::invalid_argument("world: collision margin must be >= 0");
}

void World2D::step(Vec2 target) {
    Vec2 delta = target - agent;
    const double d = norm(delta);
    if (d > params.max_agent_step) delta = (params.max_agent_step / d) * delta;
    agent = clamp_to(agent + delta, params.size);
    ++step_count;
    for (Obstacle& o : obstacles) {
        o = step_obstacle(o, agent, step_count);
        o.position = clamp_to(o.position, params.size);
    }
}

double World2D::clearance() const {
    double best = std::numeric_limits<double>::infinity();
    for (const Obstacle& o : obstacles) best = std::min(best, distance(agent, o.position) - o.radius);
    return best;
}

double running_cost(Vec2 x, std::span<const Obstacle> obstacles, double sigma_cost) {
    if (!(sigma_cost > 0.0)) throw std::invalid_argument("running_cost: sigma must be > 0");
    const double inv = 1.0 / (2.0 * sigma_cost * sigma_cost);
    double c = 0.0;
    for (const Obstacle& o : obstacles) {
        const Vec2 r = x - o.position;
        c += std::exp(-(r[0] * r[0] + r[1] * r[1]) * inv);
    }
    return c;
}

Vec2 running_cost_gradient(Vec2 x, std::span<const Obstacle> obstacles, double sigma_cost) {
    const double s2 = sigma_cost * sigma_cost;
    Vec2 g{0.0, 0.0};
    for (const Obstacle& o : obstacles) {
        const Vec2 r = x - o.position;
        const double e = std::exp(-(r[0] * r[0] + r[1] * r[1]) / (2.0 * s2));
        g = g + (-e / s2) * r;
    }
    return g;
}

bool collision_check(Vec2 agent, std::span<const Obstacle> obstacles, double margin) {
    return std::any_of(obstacles.begin(), obstacles.end(), [&](const Obstacle& o) {
        return distance(agent, o.position) < o.radius + margin;
    });
}

double reward(const World2D& world) {
    const double initial = distance(world.start, world.params.goal);
    if (initial <= 0.0) return 1.0;
    return std::clamp(1.0 - world.goal_distance() / initial, 0.0, 1.0);
}

std::string to_string(ScriptKind kind) {
    switch (kind) {
        case ScriptKind::empty: return "empty";
        case ScriptKind::static_field: return "static";
        case ScriptKind::intercept: return "intercept";
        case ScriptKind::oscillate: return "oscillate";
        case ScriptKind::chase: return "chase";
    }
    return "unknown";
}

std::optional<ScriptKind> parse_script_kind(const std::string& name) {
    for (ScriptKind k : {ScriptKind::empty, ScriptKind::static_field, ScriptKind::intercept,
                         ScriptKind::oscillate, ScriptKind::chase}) {
        if (to_string(k) == name) return k;
    }
    return std::nullopt;
}

Vec2 sample_start(const WorldParams& params, std::mt19937_64& rng) {
    const double m = 0.09375 * params.size;  // 48 on the default 512 world
    std::uniform_real_distribution<double> ux(m, params.size - m);
    std::uniform_real_distribution<double> uy(m, 0.39 * params.size);
    return {ux(rng), uy(rng)};
}

World2D make_world(const WorldScript& script, const WorldParams& params, std::uint64_t seed) {
    params.validate();
    std::mt19937_64 rng = make_stream(seed, {kTagWorld, static_cast<std::uint64_t>(script.kind)});
    World2D w;
    w.params = params;
    w.start = sample_start(params, rng);
    w.agent = w.start;

    const Vec2 line = params.goal - w.start;
    const double len = norm(line);
    const Vec2 along = (1.0 / len) * line;
    const Vec2 perp{-along[1], along[0]};
    const double r = script.obstacle_radius;
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    auto on_path = [&](double frac, double lateral) { return w.start + (frac * len) * along + lateral * perp; };

    switch (script.kind) {
        case ScriptKind::empty:
            break;
        case ScriptKind::static_field: {
            const int on_path_n = std::min(script.on_path_count, script.static_count);
            for (int i = 0; i < on_path_n; ++i) {
                // Spread along the middle of the route, e.g. 0.35 and 0.65 for two.
                const double frac = on_path_n == 1 ? 0.5 : 0.35 + 0.3 * i / (on_path_n - 1);
                Obstacle o;
                o.radius = r;
                o.position = on_path(frac, script.lateral_jitter * normal(rng));
                w.obstacles.push_back(o);
            }
            // Remaining obstacles anywhere, away from start, goal and each other.
            int attempts = 0;
            while (static_cast<int>(w.obstacles.size()) < script.static_count && attempts < 10000) {
                ++attempts;
                const Vec2 p{r + unit(rng) * (params.size - 2 * r), r + unit(rng) * (params.size - 2 * r)};
                if (distance(p, w.start) < r + 60.0 || distance(p, params.goal) < r + 60.0) continue;
                const bool crowded = std::any_of(w.obstacles.begin(), w.obstacles.end(),
                                                 [&](const Obstacle& o) { return distance(o.position, p) < 2.0 * r; });
                if (crowded) continue;
                Obstacle o;
                o.radius = r;
                o.position = p;
                w.obstacles.push_back(o);
            }
            break;
        }
        case ScriptKind::intercept: {
            Obstacle o;
            o.radius = r;
            const Vec2 waypoint = on_path(0.55, 0.0);
            const double side = unit(rng) < 0.5 ? -1.0 : 1.0;
            InterceptBehavior b;
            b.start = waypoint + (side * (100.0 + 40.0 * unit(rng))) * perp;
            b.target = waypoint + (script.lateral_jitter * normal(rng)) * perp;
            b.deadline = script.intercept_deadline;
            o.position = b.start;
            o.behavior = b;
            w.obstacles.push_back(o);
            break;
        }
        case ScriptKind::oscillate: {
            Obstacle o;
            o.radius = r;
            OscillateBehavior b;
            b.anchor = on_path(0.5 + 0.1 * (unit(rng) - 0.5), 0.0);
            b.amplitude = script.oscillate_amplitude;
            b.frequency = script.oscillate_frequency;
            b.perp = perp;
            o.position = b.anchor;
            o.behavior = b;
            w.obstacles.push_back(o);
            break;
        }
        case ScriptKind::chase: {
            Obstacle o;
            o.radius = r;
            o.position = on_path(0.6 + 0.1 * unit(rng), script.lateral_jitter * normal(rng));
            o.behavior = ChaseBehavior{script.chase_turn_rate, script.chase_max_speed};
            w.obstacles.push_back(o);
            break;
        }
    }
    for (Obstacle& o : w.obstacles) o.position = clamp_to(o.position, params.size);
    return w;
}

std::vector<Demonstration> generate_demos(std::size_t n, std::uint64_t seed, const WorldParams& params,
                                          std::size_t steps) {
    if (n == 0) throw std::invalid_argument("generate_demos: n must be >= 1");
    if (steps < 2) throw std::invalid_argument("generate_demos: need at least 2 steps");
    params.validate();
    std::vector<Demonstration> demos;
    demos.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::mt19937_64 rng = make_stream(seed, {kTagDemos, i});
        std::uniform_real_distribution<double> angle(-0.5, 0.5);
        const Vec2 p0 = sample_start(params, rng);
        const Vec2 p1 = params.goal;
        const Vec2 chord = p1 - p0;
        auto rotate = [](Vec2 v, double th) {
            return Vec2{std::cos(th) * v[0] - std::sin(th) * v[1], std::sin(th) * v[0] + std::cos(th) * v[1]};
        };
        const Vec2 m0 = rotate(chord, angle(rng));
        const Vec2 m1 = rotate(chord, angle(rng));

        auto curve = [&](double u) {
            const double h00 = 2 * u * u * u - 3 * u * u + 1;
            const double h10 = u * u * u - 2 * u * u + u;
            const double h01 = -2 * u * u * u + 3 * u * u;
            const double h11 = u * u * u - u * u;
            return clamp_to(h00 * p0 + h10 * m0 + h01 * p1 + h11 * m1, params.size);
        };
        // Dense polyline, then resampled at uniform arc length (constant speed).
        constexpr std::size_t kDense = 1024;
        std::vector<Vec2> dense(kDense + 1);
        std::vector<double> arc(kDense + 1, 0.0);
        for (std::size_t k = 0; k <= kDense; ++k) {
            dense[k] = curve(static_cast<double>(k) / kDense);
            if (k > 0) arc[k] = arc[k - 1] + distance(dense[k], dense[k - 1]);
        }
        std::vector<Vec> pts;
        pts.reserve(steps);
        std::size_t seg = 0;
        for (std::size_t k = 0; k < steps; ++k) {
            const double target = arc.back() * static_cast<double>(k) / static_cast<double>(steps - 1);
            while (seg + 1 < kDense && arc[seg + 1] < target) ++seg;
            const double span = arc[seg + 1] - arc[seg];
            const double w = span > 0.0 ? std::clamp((target - arc[seg]) / span, 0.0, 1.0) : 0.0;
            const Vec2 p = dense[seg] + w * (dense[seg + 1] - dense[seg]);
            pts.push_back({p[0], p[1]});
        }
        pts.back() = {p1[0], p1[1]};
        demos.emplace_back(std::move(pts), Vec{p0[0], p0[1]});
    }
    return demos;
}

double EpisodeResult::mean_latency_ms() const {
    if (latency_ms.empty()) return 0.0;
    return std::accumulate(latency_ms.begin(), latency_ms.end(), 0.0) / static_cast<double>(latency_ms.size());
}

}  // namespace ssip
