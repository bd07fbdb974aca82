#pragma once

// 2D navigation world: a point agent under position control, a goal, and
// obstacles driven by scripted behaviors.

#include "ssip/interpolant.hpp"

#include <array>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace ssip {

using Vec2 = std::array<double, 2>;

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a[0] + b[0], a[1] + b[1]}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a[0] - b[0], a[1] - b[1]}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a[0], s * a[1]}; }
double norm(Vec2 a);
double distance(Vec2 a, Vec2 b);

struct StaticBehavior {};

/// Straight-line move from `start` to `target`, arriving at step `deadline`, then halt.
struct InterceptBehavior {
    Vec2 start{};
    Vec2 target{};
    int deadline = 50;
};

/// p(step) = anchor + amplitude * sin(2 pi frequency step) * perp
struct OscillateBehavior {
    Vec2 anchor{};
    double amplitude = 40.0;
    double frequency = 0.03;
    Vec2 perp{1.0, 0.0};
};

/// v' = (1 - turn_rate) v + turn_rate * max_speed * unit(agent - p); p' = p + v'
struct ChaseBehavior {
    double turn_rate = 0.4;
    double max_speed = 3.0;
};

using Behavior = std::variant<StaticBehavior, InterceptBehavior, OscillateBehavior, ChaseBehavior>;

struct Obstacle {
    Vec2 position{};
    double radius = 25.0;
    Vec2 velocity{};
    Behavior behavior = StaticBehavior{};
};

/// Advances one obstacle to its state after env step `step_index` (>= 0).
/// A chaser sitting exactly on the agent keeps its previous velocity.
Obstacle step_obstacle(const Obstacle& obstacle, Vec2 agent, int step_index);

struct WorldParams {
    double size = 512.0;          // square bounds [0, size]^2
    Vec2 goal{256.0, 440.0};
    double goal_tolerance = 15.0;
    int max_steps = 250;
    double collision_margin = 0.0;
    double max_agent_step = 15.0; // world units per control step
    double sigma_cost = 40.0;

    void validate() const;
};

struct World2D {
    WorldParams params;
    Vec2 agent{};
    Vec2 start{};
    std::vector<Obstacle> obstacles;
    int step_count = 0;

    /// Moves the agent toward `target` (clamped speed, clamped bounds), then
    /// advances every obstacle.
    void step(Vec2 target);
    double goal_distance() const { return distance(agent, params.goal); }
    /// Smallest agent-to-obstacle-surface distance (inf with no obstacles).
    double clearance() const;
};

/// Sum over obstacles of exp(-d^2 / (2 sigma^2)), d the center distance.
double running_cost(Vec2 x, std::span<const Obstacle> obstacles, double sigma_cost);
Vec2 running_cost_gradient(Vec2 x, std::span<const Obstacle> obstacles, double sigma_cost);

/// Agent inside any obstacle footprint (radius + margin).
bool collision_check(Vec2 agent, std::span<const Obstacle> obstacles, double margin);

/// clip(1 - final_goal_distance / initial_goal_distance, 0, 1)
double reward(const World2D& world);

enum class ScriptKind { empty, static_field, intercept, oscillate, chase };

std::string to_string(ScriptKind kind);
std::optional<ScriptKind> parse_script_kind(const std::string& name);

struct WorldScript {
    ScriptKind kind = ScriptKind::empty;
    int static_count = 8;          // static_field: total obstacles
    int on_path_count = 2;         // static_field: how many sit on the start-goal line
    double obstacle_radius = 25.0;
    double lateral_jitter = 10.0;  // std-dev of on-path lateral offsets
    int intercept_deadline = 50;
    double oscillate_amplitude = 40.0;
    double oscillate_frequency = 0.03;
    double chase_turn_rate = 0.4;
    double chase_max_speed = 3.0;
};

/// Random start below the goal band, then the scripted obstacle layout.
/// Deterministic in (script, params, seed).
World2D make_world(const WorldScript& script, const WorldParams& params, std::uint64_t seed);

/// Samples an agent start position (shared by demos and worlds).
Vec2 sample_start(const WorldParams& params, std::mt19937_64& rng);

/// Expert paths: cubic Hermite curves from random starts to the goal, resampled
/// to `steps` points at constant speed. Context is the start position.
std::vector<Demonstration> generate_demos(std::size_t n, std::uint64_t seed, const WorldParams& params,
                                          std::size_t steps = 64);

struct EpisodeResult {
    bool success = false;
    bool collided = false;
    double final_goal_distance = 0.0;
    double min_obstacle_distance = std::numeric_limits<double>::infinity();
    int steps = 0;
    double reward = 0.0;
    std::vector<double> latency_ms;
    std::vector<Vec2> agent_trace;
    std::vector<Vec2> action_trace;

    double mean_latency_ms() const;
};

/// Success iff reward > 0.85 and the episode never collided.
inline constexpr double kSuccessReward = 0.85;

}  // namespace ssip
