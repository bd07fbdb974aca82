#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ssip/experiment.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace ssip;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(
[train]
epochs = 2
hidden = 8, 8
batch_size = 32

[demos]
count = 4
steps = 32

[ccg]
episodes = 2
samples_per_state = 1
rollouts = 4
rollout_steps = 3
hidden = 8
epochs = 2

[world]
max_steps = 40

[script]
kind = static

[eval]
seeds = 3
workers = 1
methods = unguided, repulsion, steg, ccg_p
)";

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("ssip_test_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const TrainOutcome& tiny_outcome() {
    static const TrainOutcome out = train_experiment(parse_config(kTiny));
    return out;
}

}  // namespace

TEST_CASE("config text round trip") {
    const ExperimentConfig defaults;
    const std::string text = dump_config(defaults);
    CHECK(dump_config(parse_config(text)) == text);
    CHECK(dump_config(parse_config("")) == text);

    const ExperimentConfig tiny = parse_config(kTiny);
    CHECK(tiny.train.epochs == 2);
    CHECK(tiny.train.hidden == std::vector<std::size_t>{8, 8});
    CHECK(tiny.script.kind == ScriptKind::static_field);
    CHECK(tiny.eval.methods.size() == 4);
    CHECK(dump_config(parse_config(dump_config(tiny))) == dump_config(tiny));
}

TEST_CASE("config rejects malformed input") {
    CHECK_THROWS_AS(parse_config("[train]\nepochz = 3\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[nowhere]\nx = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("epochs = 3\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[train]\nepochs = many\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[eval]\nmethods = unguided, magic\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[sampler]\nexec_horizon = 40\n"), ConfigError);
}

TEST_CASE("method names") {
    for (Method m : all_methods()) CHECK(parse_method(to_string(m)) == m);
    CHECK_FALSE(parse_method("nope").has_value());
}

TEST_CASE("zero epochs keep the initial weights") {
    ExperimentConfig cfg = parse_config(kTiny);
    cfg.train.epochs = 0;
    cfg.ccg.train_probability = false;
    const TrainOutcome out = train_experiment(cfg);
    CHECK(out.curve.empty());
    CHECK(out.checkpoint.critics.empty());
    CHECK(out.checkpoint.nets.v_net.layers.size() == 3);
}

TEST_CASE("checkpoint serialization") {
    const Checkpoint& ckpt = tiny_outcome().checkpoint;
    REQUIRE(ckpt.critic(CcgVariant::probability) != nullptr);
    const std::string bytes = serialize_checkpoint(ckpt);
    const Checkpoint back = deserialize_checkpoint(bytes);
    CHECK(back == ckpt);
    CHECK(serialize_checkpoint(back) == bytes);

    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bad), CheckpointError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), CheckpointError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes + "x"), CheckpointError);

    const fs::path dir = scratch("ckpt");
    save_checkpoint(ckpt, dir / "c.bin");
    CHECK(load_checkpoint(dir / "c.bin") == ckpt);

    ExperimentConfig cfg = parse_config(kTiny);
    CHECK_NOTHROW(check_compatible(ckpt, cfg));
    Checkpoint no_critic = ckpt;
    no_critic.critics.clear();
    CHECK_THROWS_AS(check_compatible(no_critic, cfg), CheckpointError);
}

TEST_CASE("training is reproducible from its seed") {
    const TrainOutcome again = train_experiment(parse_config(kTiny));
    CHECK(serialize_checkpoint(again.checkpoint) == serialize_checkpoint(tiny_outcome().checkpoint));
    ExperimentConfig other = parse_config(kTiny);
    other.train.seed = 99;
    CHECK_FALSE(train_experiment(other).checkpoint.nets == tiny_outcome().checkpoint.nets);
}

TEST_CASE("aggregates and dominance") {
    std::vector<EvalRow> rows(4);
    rows[0].success = true;
    rows[0].reward = 1.0;
    rows[1].collided = true;
    rows[1].reward = 0.2;
    rows[2].success = true;
    rows[2].reward = 0.9;
    rows[3].reward = 0.5;
    const Aggregate a = aggregate(rows);
    CHECK(a.episodes == 4);
    CHECK(a.success_rate_pct == doctest::Approx(50.0));
    CHECK(a.collision_rate == doctest::Approx(0.25));
    CHECK(a.mean_reward == doctest::Approx(0.65));
    CHECK(a.sr_ci_lo <= a.success_rate_pct);
    CHECK(a.sr_ci_hi >= a.success_rate_pct);

    auto row = [](double reward, double collisions) {
        Aggregate g;
        g.mean_reward = reward;
        g.collision_rate = collisions;
        return g;
    };
    std::vector<Aggregate> grid = {row(0.5, 0.5), row(0.8, 0.1), row(0.8, 0.3), row(0.9, 0.4), row(0.4, 0.6)};
    mark_dominated(grid);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        bool beaten = false;
        for (std::size_t j = 0; j < grid.size(); ++j) {
            beaten |= grid[j].mean_reward > grid[i].mean_reward && grid[j].safety_rate() > grid[i].safety_rate();
        }
        CHECK(grid[i].dominated == beaten);
    }
    CHECK_FALSE(grid[1].dominated);
    CHECK_FALSE(grid[2].dominated);  // ties on reward never dominate
    CHECK(grid[0].dominated);
}

TEST_CASE("evaluation is deterministic and its csv recomputes") {
    const ExperimentConfig cfg = parse_config(kTiny);
    const Checkpoint& ckpt = tiny_outcome().checkpoint;
    for (Method m : cfg.eval.methods) {
        const auto a = evaluate(m, 1.0, cfg, ckpt, cfg.script);
        const auto b = evaluate(m, 1.0, cfg, ckpt, cfg.script);
        REQUIRE(a.size() == 3);
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].seed == cfg.eval.seed_offset + i);
            CHECK(a[i].reward == b[i].reward);
            CHECK(a[i].min_dist == b[i].min_dist);
            CHECK(a[i].success == (!a[i].collided && a[i].reward > kSuccessReward));
        }
    }
    const auto rows = evaluate(Method::unguided, 0.0, cfg, ckpt, cfg.script);
    const fs::path dir = scratch("eval");
    write_eval_csv(dir / "m1.csv", rows);
    write_eval_csv(dir / "m2.csv", evaluate(Method::unguided, 0.0, cfg, ckpt, cfg.script));
    CHECK(slurp(dir / "m1.csv") == slurp(dir / "m2.csv"));

    // Success rate from the csv matches the aggregate.
    std::ifstream in(dir / "m1.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line.rfind("method,lambda,seed,success", 0) == 0);
    int n = 0, s = 0;
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string cell;
        for (int k = 0; k < 4; ++k) std::getline(ss, cell, ',');
        s += cell == "1" ? 1 : 0;
        ++n;
    }
    CHECK(n == 3);
    CHECK(aggregate(rows).success_rate_pct == doctest::Approx(100.0 * s / n));
}

TEST_CASE("commands map failures to exit codes") {
    const fs::path dir = scratch("cmd");
    {
        std::ofstream cfg(dir / "tiny.ini");
        cfg << kTiny;
    }
    CommandOptions opts;
    opts.config = dir / "tiny.ini";
    opts.out = dir / "run";

    CHECK(cmd_gen_demos(opts) == kExitOk);
    CHECK(fs::exists(dir / "run" / "demos.csv"));

    CHECK(cmd_eval(opts) == kExitUsage);  // no checkpoint
    opts.checkpoint = dir / "missing.bin";
    CHECK(cmd_eval(opts) == kExitUsage);

    opts.checkpoint = dir / "run" / "ckpt.bin";
    CHECK(cmd_train(opts) == kExitOk);
    CHECK(fs::exists(dir / "run" / "training_curve.csv"));
    CHECK(cmd_eval(opts) == kExitOk);
    CHECK(fs::exists(dir / "run" / "aggregate.csv"));
    opts.lambda_grid = std::vector<double>{0.0, 2.0};
    CHECK(cmd_sweep(opts) == kExitOk);
    CHECK(fs::exists(dir / "run" / "pareto.csv"));

    CommandOptions bad;
    {
        std::ofstream cfg(dir / "bad.ini");
        cfg << "[train]\nlearning_rate = -1\n";
    }
    bad.config = dir / "bad.ini";
    bad.out = dir / "bad";
    CHECK(cmd_train(bad) == kExitUsage);

    // Overflowing weights -> divergence exit code.
    ExperimentConfig boom = parse_config(kTiny);
    boom.train.init_scale = 1e300;
    {
        std::ofstream cfg(dir / "boom.ini");
        cfg << dump_config(boom);
    }
    CommandOptions diverge;
    diverge.config = dir / "boom.ini";
    diverge.out = dir / "boom";
    CHECK(cmd_train(diverge) == kExitDivergence);
}
