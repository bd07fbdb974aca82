#pragma once

// Experiment plumbing behind the command-line tool: configuration, checkpoints,
// demonstration/critic data, closed-loop evaluation, lambda sweeps, and the
// train / eval / sweep / verify / gen-demos commands.

#include "ssip/env.hpp"
#include "ssip/guidance.hpp"
#include "ssip/interpolant.hpp"
#include "ssip/sampler.hpp"
#include "ssip/schedules.hpp"
#include "ssip/verify.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssip {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Method { unguided, repulsion, steg, ccg_p, ccg_d, chunked, chunked_lookahead };

std::string to_string(Method m);
std::optional<Method> parse_method(const std::string& name);
const std::vector<Method>& all_methods();

struct DemoConfig {
    std::size_t count = 64;
    std::size_t steps = 64;
    std::uint64_t seed = 1;
};

struct CcgDataConfig {
    bool train_probability = true;
    bool train_distance = false;
    std::size_t episodes = 32;          // base-policy rollouts that supply query states
    std::size_t samples_per_state = 2;  // obstacle placements per state
    double placement_radius = 130.0;    // world units around the agent
    std::size_t rollouts = 16;          // M
    std::size_t rollout_steps = 6;      // K, in sampler steps
    std::uint64_t seed = 3;
};

struct EvalConfig {
    std::size_t seeds = 50;
    std::uint64_t seed_offset = 1000;
    std::vector<Method> methods = {Method::unguided, Method::repulsion, Method::steg, Method::ccg_p};
    std::vector<double> lambda_grid = {0.0, 0.5, 1.0, 2.0, 4.0, 8.0};
    std::size_t workers = 0;  // 0: hardware concurrency
};

struct ExperimentConfig {
    // Closed-loop default: SDE with constant ε = γ·γ̇ at t = 0, so the score
    // term vanishes at each handoff instead of being amplified by the γ floor.
    ScheduleSet schedules{.epsilon_kind = EpsilonKind::constant, .epsilon_value = 0.005};
    TrainConfig train;
    SamplerConfig sampler = [] { SamplerConfig s; s.mode = SamplerMode::sde; return s; }();
    GuidanceConfig guidance;
    EnsembleConfig ensemble;
    WorldParams world;
    WorldScript script;
    DemoConfig demos;
    CriticTrainConfig critic;
    CcgDataConfig ccg;
    EvalConfig eval;
    std::string out_dir = "out";

    /// Cross-field checks; throws ConfigError.
    void validate() const;
};

/// Parses the sectioned key = value format; any unknown section or key throws.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical text form of a config (every key, parseable by parse_config).
std::string dump_config(const ExperimentConfig& config);

struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    PolicyNets nets;
    Normalizer normalizer;
    std::vector<Critic> critics;  // at most one per variant
    std::uint64_t seed = 0;
    std::uint64_t epoch = 0;

    const Critic* critic(CcgVariant variant) const;
    /// Architecture / array-length consistency; throws CheckpointError.
    void validate() const;
    bool operator==(const Checkpoint&) const = default;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Throws CheckpointError if the checkpoint cannot drive this config.
void check_compatible(const Checkpoint& ckpt, const ExperimentConfig& config);

/// Expert demos in world coordinates.
std::vector<Demonstration> make_demos(const ExperimentConfig& config);

/// Query states from base-policy rollouts, labelled by short stochastic rollouts
/// against a randomly placed obstacle.
std::vector<CriticSample> collect_critic_data(const ExperimentConfig& config, const PolicyNets& nets,
                                              const Normalizer& normalizer, CcgVariant variant);

struct TrainOutcome {
    Checkpoint checkpoint;
    std::vector<EpochLoss> curve;
};

/// Demos -> policy -> optional critics.
TrainOutcome train_experiment(const ExperimentConfig& config);

/// Runtime for one (method, lambda) cell.
PolicyRuntime method_runtime(Method method, double lambda, const ExperimentConfig& config, const Checkpoint& ckpt);

struct EvalRow {
    Method method = Method::unguided;
    double lambda = 0.0;
    std::uint64_t seed = 0;
    bool success = false;
    bool collided = false;
    double reward = 0.0;
    double min_dist = 0.0;
    double latency_ms = 0.0;
};

struct Aggregate {
    Method method = Method::unguided;
    double lambda = 0.0;
    std::size_t episodes = 0;
    double success_rate_pct = 0.0;
    double collision_rate = 0.0;
    double mean_reward = 0.0;
    double mean_latency_ms = 0.0;
    double sr_ci_lo = 0.0;  // 95% bootstrap interval of the success rate, percent
    double sr_ci_hi = 0.0;
    bool dominated = false;  // sweep only

    double safety_rate() const { return 1.0 - collision_rate; }
};

/// One episode per seed, seeds seed_offset .. seed_offset + n - 1, on `script`.
std::vector<EvalRow> evaluate(Method method, double lambda, const ExperimentConfig& config,
                              const Checkpoint& ckpt, const WorldScript& script);

Aggregate aggregate(std::span<const EvalRow> rows);
/// Marks rows beaten on both mean reward and safety (strictly) by another row.
void mark_dominated(std::vector<Aggregate>& rows);

void write_eval_csv(const std::filesystem::path& path, std::span<const EvalRow> rows);
void write_latency_csv(const std::filesystem::path& path, std::span<const EvalRow> rows);
void write_aggregate_csv(const std::filesystem::path& path, std::span<const Aggregate> rows);
void write_sweep_csv(const std::filesystem::path& path, std::span<const Aggregate> rows);
void write_curve_csv(const std::filesystem::path& path, std::span<const EpochLoss> curve);

/// Closed-loop acceptance checks (ids 9-13) for a trained checkpoint; csv
/// artifacts land in out_dir.
std::vector<CheckResult> closed_loop_checks(const ExperimentConfig& config, const Checkpoint& ckpt,
                                            const std::filesystem::path& out_dir);

// Commands. Return the process exit status.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitVerify = 2, kExitDivergence = 3 };

struct CommandOptions {
    std::optional<std::filesystem::path> config;
    std::optional<std::filesystem::path> checkpoint;
    std::optional<std::filesystem::path> out;
    std::optional<std::size_t> seeds;
    std::optional<std::vector<double>> lambda_grid;
};

/// Config from --config (or defaults) with --out / --seeds / --lambda-grid applied.
ExperimentConfig resolve_config(const CommandOptions& opts);

int cmd_train(const CommandOptions& opts);
int cmd_eval(const CommandOptions& opts);
int cmd_sweep(const CommandOptions& opts);
int cmd_verify(const CommandOptions& opts);
int cmd_gen_demos(const CommandOptions& opts);

}  // namespace ssip
