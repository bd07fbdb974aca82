#pragma once

// Euler-Maruyama / drift-only steppers and the closed-loop executors:
// streaming (flow time aligned with execution, handoff every exec_horizon
// steps) and chunked (whole horizon generated, then executed open loop).

#include "ssip/drift.hpp"
#include "ssip/env.hpp"
#include "ssip/guidance.hpp"
#include "ssip/interpolant.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ssip {

enum class SamplerMode { ode, sde };
enum class Execution { streaming, chunked };

std::string to_string(SamplerMode m);
std::string to_string(Execution e);

struct SamplerConfig {
    SamplerMode mode = SamplerMode::ode;
    ScheduleSet schedules;
    int horizon = 16;        // H
    int exec_horizon = 8;    // H_exec
    Execution execution = Execution::streaming;

    double dt() const { return 1.0 / static_cast<double>(horizon); }
    void validate() const;
};

struct StreamState {
    Vec a;
    double t = 0.0;
    Vec h;
    std::size_t step_index = 0;
};

/// a' = a + (b + extra) dt + sqrt(2 eps(t) dt) noise, t' = t + dt. noise ~ N(0, I) supplied.
StreamState sde_step(const StreamState& state, const DriftModel& model, std::span<const double> drift_extra,
                     double dt, std::span<const double> noise);
StreamState sde_step(const StreamState& state, const DriftModel& model, std::span<const double> drift_extra,
                     double dt, std::mt19937_64& rng);
/// a' = a + (v - gamma gamma_dot s + extra) dt, deterministic.
StreamState ode_step(const StreamState& state, const DriftModel& model, std::span<const double> drift_extra,
                     double dt);

/// Flow time at env step i: clip((i mod H_exec) dt, 0, 1).
double aligned_flow_time(std::size_t step_index, const SamplerConfig& config);

/// Everything a closed-loop episode needs besides the world.
struct PolicyRuntime {
    const PolicyNets* nets = nullptr;
    const Normalizer* normalizer = nullptr;
    const Critic* critic = nullptr;
    SamplerConfig sampler;
    GuidanceConfig guidance;
    EnsembleConfig ensemble;
};

/// Streaming closed loop; h is frozen at each handoff.
EpisodeResult streaming_execute(World2D world, const DriftModel& model, const Normalizer& normalizer,
                                const Guidance& guidance, const SamplerConfig& config, std::uint64_t seed);

/// Integrates all H flow steps from (a0, h) before execution, guiding each step
/// against the obstacle snapshot in `world`. Returns the H normalized points.
std::vector<Vec> chunked_generate(std::span<const double> a0, std::span<const double> h, const World2D& world,
                                  const DriftModel& model, const Guidance& guidance, const SamplerConfig& config,
                                  std::uint64_t seed, std::uint64_t first_step);

/// Chunked closed loop: a new chunk every H_exec steps, executed open loop.
EpisodeResult chunked_execute(World2D world, const DriftModel& model, const Normalizer& normalizer,
                              const Guidance& guidance, const SamplerConfig& config, std::uint64_t seed);

/// Builds the drift model and guidance from the runtime and runs the configured executor.
EpisodeResult run_episode(const World2D& world, const PolicyRuntime& runtime, std::uint64_t seed);

}  // namespace ssip
