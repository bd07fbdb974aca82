// ssip: train / eval / sweep / verify / gen-demos front end.

#include "ssip/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <sstream>
#include <string>

namespace {

struct RawFlags {
    std::string config;
    std::string checkpoint;
    std::string out;
    std::size_t seeds = 0;
    std::string lambda_grid;
};

void add_common(CLI::App* cmd, RawFlags& f) {
    cmd->add_option("--config", f.config, "experiment config file")->check(CLI::ExistingFile);
    cmd->add_option("--checkpoint", f.checkpoint, "checkpoint path");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--seeds", f.seeds, "number of evaluation seeds")->check(CLI::PositiveNumber);
    cmd->add_option("--lambda-grid", f.lambda_grid, "comma-separated guidance strengths");
}

ssip::CommandOptions to_options(const RawFlags& f) {
    ssip::CommandOptions o;
    if (!f.config.empty()) o.config = f.config;
    if (!f.checkpoint.empty()) o.checkpoint = f.checkpoint;
    if (!f.out.empty()) o.out = f.out;
    if (f.seeds > 0) o.seeds = f.seeds;
    if (!f.lambda_grid.empty()) {
        std::vector<double> grid;
        std::stringstream ss(f.lambda_grid);
        std::string item;
        while (std::getline(ss, item, ',')) {
            std::size_t used = 0;
            const double v = std::stod(item, &used);
            if (used != item.size()) throw CLI::ValidationError("--lambda-grid", "bad number '" + item + "'");
            grid.push_back(v);
        }
        o.lambda_grid = grid;
    }
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Streaming stochastic-interpolant policies with inference-time guidance"};
    app.require_subcommand(1);
    RawFlags flags;

    auto* train = app.add_subcommand("train", "train the policy (and critics) from synthetic demos");
    auto* eval = app.add_subcommand("eval", "closed-loop evaluation of the configured methods");
    auto* sweep = app.add_subcommand("sweep", "guidance-strength sweep with Pareto flags");
    auto* verify = app.add_subcommand("verify", "numerical verification suite");
    auto* demos = app.add_subcommand("gen-demos", "write the synthetic demonstration set");
    for (CLI::App* c : {train, eval, sweep, verify, demos}) add_common(c, flags);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return ssip::kExitUsage;
    }

    ssip::CommandOptions opts;
    try {
        opts = to_options(flags);
    } catch (const std::exception& e) {
        std::cerr << "usage: " << e.what() << '\n';
        return ssip::kExitUsage;
    }

    if (train->parsed()) return ssip::cmd_train(opts);
    if (eval->parsed()) return ssip::cmd_eval(opts);
    if (sweep->parsed()) return ssip::cmd_sweep(opts);
    if (verify->parsed()) return ssip::cmd_verify(opts);
    if (demos->parsed()) return ssip::cmd_gen_demos(opts);
    return ssip::kExitUsage;
}
