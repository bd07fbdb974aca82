#include "ssip/sampler.hpp"

#include "ssip/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace ssip {

std::string to_string(SamplerMode m) { return m == SamplerMode::ode ? "ode" : "sde"; }
std::string to_string(Execution e) { return e == Execution::streaming ? "streaming" : "chunked"; }

void SamplerConfig::validate() const {
    schedules.validate();
    if (horizon < 1) throw std::invalid_argument("sampler: horizon must be >= 1");
    if (exec_horizon < 1 || exec_horizon > horizon) {
        throw std::invalid_argument("sampler: need 1 <= exec_horizon <= horizon");
    }
}

namespace {

DriftForm form_of(SamplerMode mode) { return mode == SamplerMode::ode ? DriftForm::ode : DriftForm::sde; }

Vec standard_normal(std::size_t dim, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Vec z(dim);
    for (double& v : z) v = normal(rng);
    return z;
}

Vec step_noise(std::uint64_t seed, std::uint64_t env_step, std::size_t dim) {
    std::mt19937_64 rng = make_stream(seed, {kTagSampler, env_step});
    return standard_normal(dim, rng);
}

StreamState advance(const StreamState& s, std::span<const double> b, std::span<const double> extra, double dt,
                    double diffusion, std::span<const double> noise) {
    StreamState out = s;
    for (std::size_t j = 0; j < out.a.size(); ++j) {
        out.a[j] = s.a[j] + (b[j] + extra[j]) * dt + diffusion * noise[j];
    }
    out.t = s.t + dt;
    out.step_index = s.step_index + 1;
    return out;
}

// One sampler step of the configured mode; the guidance query sees the pre-step state.
StreamState guided_step(const StreamState& s, const DriftModel& model, const Guidance& guidance,
                        const SamplerConfig& config, const World2D& world, std::uint64_t seed,
                        std::uint64_t env_step) {
    const DriftForm form = form_of(config.mode);
    const Vec b = model.drift(s.a, s.t, s.h, form);
    GuidanceQuery q;
    q.a = s.a;
    q.t = s.t;
    q.h = s.h;
    q.base_drift = b;
    q.world = &world;
    q.seed = seed;
    q.step_index = env_step;
    const Vec extra = guidance.drift(q);
    const double dt = config.dt();
    if (config.mode == SamplerMode::ode) {
        const Vec none(s.a.size(), 0.0);
        return advance(s, b, extra, dt, 0.0, none);
    }
    const Vec noise = step_noise(seed, env_step, s.a.size());
    return advance(s, b, extra, dt, std::sqrt(2.0 * model.epsilon(s.t) * dt), noise);
}

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
    return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

struct EpisodeBook {
    World2D& world;
    EpisodeResult result;

    explicit EpisodeBook(World2D& w) : world(w) {
        result.min_obstacle_distance = w.clearance();
        result.agent_trace.push_back(w.agent);
    }

    // Executes one action; returns true when the episode is over.
    bool execute(Vec2 action) {
        world.step(action);
        ++result.steps;
        result.action_trace.push_back(action);
        result.agent_trace.push_back(world.agent);
        result.min_obstacle_distance = std::min(result.min_obstacle_distance, world.clearance());
        if (collision_check(world.agent, world.obstacles, world.params.collision_margin)) {
            result.collided = true;
            return true;
        }
        return world.goal_distance() < world.params.goal_tolerance;
    }

    EpisodeResult finish() {
        result.final_goal_distance = world.goal_distance();
        result.reward = reward(world);
        result.success = !result.collided && result.reward > kSuccessReward;
        return std::move(result);
    }
};

}  // namespace

StreamState sde_step(const StreamState& state, const DriftModel& model, std::span<const double> drift_extra,
                     double dt, std::span<const double> noise) {
    const Vec b = model.drift(state.a, state.t, state.h, DriftForm::sde);
    return advance(state, b, drift_extra, dt, std::sqrt(2.0 * model.epsilon(state.t) * dt), noise);
}

StreamState sde_step(const StreamState& state, const DriftModel& model, std::span<const double> drift_extra,
                     double dt, std::mt19937_64& rng) {
    const Vec noise = standard_normal(state.a.size(), rng);
    return sde_step(state, model, drift_extra, dt, noise);
}

StreamState ode_step(const StreamState& state, const DriftModel& model, std::span<const double> drift_extra,
                     double dt) {
    const Vec b = model.drift(state.a, state.t, state.h, DriftForm::ode);
    const Vec none(state.a.size(), 0.0);
    return advance(state, b, drift_extra, dt, 0.0, none);
}

double aligned_flow_time(std::size_t step_index, const SamplerConfig& config) {
    const auto phase = static_cast<double>(step_index % static_cast<std::size_t>(config.exec_horizon));
    return std::clamp(phase * config.dt(), 0.0, 1.0);
}

EpisodeResult streaming_execute(World2D world, const DriftModel& model, const Normalizer& normalizer,
                                const Guidance& guidance, const SamplerConfig& config, std::uint64_t seed) {
    config.validate();
    EpisodeBook book(world);
    StreamState s;
    for (int i = 0; i < world.params.max_steps; ++i) {
        const auto tick = Clock::now();
        const auto step = static_cast<std::size_t>(i);
        if (i % config.exec_horizon == 0) {
            // Handoff: restart the flow from the observed agent position.
            s.a = normalizer.normalize(world.agent);
            s.h = s.a;
        }
        s.t = aligned_flow_time(step, config);
        s.step_index = step;
        const StreamState next = guided_step(s, model, guidance, config, world, seed, step);
        const Vec act = normalizer.denormalize(next.a);
        book.result.latency_ms.push_back(elapsed_ms(tick));
        if (book.execute({act[0], act[1]})) break;
        s = next;
    }
    return book.finish();
}

std::vector<Vec> chunked_generate(std::span<const double> a0, std::span<const double> h, const World2D& world,
                                  const DriftModel& model, const Guidance& guidance, const SamplerConfig& config,
                                  std::uint64_t seed, std::uint64_t first_step) {
    config.validate();
    StreamState s;
    s.a.assign(a0.begin(), a0.end());
    s.h.assign(h.begin(), h.end());
    std::vector<Vec> chunk;
    chunk.reserve(static_cast<std::size_t>(config.horizon));
    for (int j = 0; j < config.horizon; ++j) {
        s.t = std::clamp(j * config.dt(), 0.0, 1.0);
        s.step_index = static_cast<std::size_t>(j);
        s = guided_step(s, model, guidance, config, world, seed, first_step + static_cast<std::uint64_t>(j));
        chunk.push_back(s.a);
    }
    return chunk;
}

EpisodeResult chunked_execute(World2D world, const DriftModel& model, const Normalizer& normalizer,
                              const Guidance& guidance, const SamplerConfig& config, std::uint64_t seed) {
    config.validate();
    EpisodeBook book(world);
    std::vector<Vec> chunk;
    double amortized_ms = 0.0;
    for (int i = 0; i < world.params.max_steps; ++i) {
        const int phase = i % config.exec_horizon;
        if (phase == 0) {
            const auto tick = Clock::now();
            const Vec a0 = normalizer.normalize(world.agent);
            chunk = chunked_generate(a0, a0, world, model, guidance, config, seed, static_cast<std::uint64_t>(i));
            amortized_ms = elapsed_ms(tick) / config.exec_horizon;
        }
        const Vec act = normalizer.denormalize(chunk[static_cast<std::size_t>(phase)]);
        book.result.latency_ms.push_back(amortized_ms);
        if (book.execute({act[0], act[1]})) break;
    }
    return book.finish();
}

EpisodeResult run_episode(const World2D& world, const PolicyRuntime& runtime, std::uint64_t seed) {
    if (runtime.nets == nullptr || runtime.normalizer == nullptr) {
        throw std::invalid_argument("run_episode: runtime needs nets and a normalizer");
    }
    const PolicyDrift model(*runtime.nets, runtime.sampler.schedules);
    const Guidance guidance(runtime.guidance, runtime.ensemble, model, *runtime.normalizer, runtime.critic);
    if (runtime.sampler.execution == Execution::chunked) {
        return chunked_execute(world, model, *runtime.normalizer, guidance, runtime.sampler, seed);
    }
    return streaming_execute(world, model, *runtime.normalizer, guidance, runtime.sampler, seed);
}

}  // namespace ssip
