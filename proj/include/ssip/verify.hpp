#pragma once

// Numerical verification suite: autodiff, the Ornstein-Uhlenbeck oracles, the
// ensemble estimator and sampler invariants. Each check is a named pass/fail
// with a short detail string; numeric evidence is collected as CSV rows.

#include <cstdint>
#include <string>
#include <vector>

namespace ssip {

struct CheckResult {
    int id = 0;
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

struct EvidenceRow {
    std::string check;
    std::string quantity;
    double x = 0.0;
    double t = 0.0;
    double value = 0.0;
    double reference = 0.0;
    double tolerance = 0.0;
};

struct VerifyOptions {
    std::uint64_t seed = 7;
    /// Mutation hook: negate the closed-form guidance fed to the Doob sampler.
    bool flip_guidance_sign = false;
};

struct VerifyReport {
    std::vector<CheckResult> checks;
    std::vector<EvidenceRow> evidence;

    bool all_passed() const;
    void write_csv(const std::string& path) const;
};

// Individual checks (ids 1-8).
CheckResult check_autodiff(VerifyReport& report);
CheckResult check_feynman_kac(VerifyReport& report);
CheckResult check_martingale(VerifyReport& report, const VerifyOptions& opts);
CheckResult check_doob_moments(VerifyReport& report, const VerifyOptions& opts);
CheckResult check_steg_theory(VerifyReport& report, const VerifyOptions& opts);
CheckResult check_lse_degenerate(VerifyReport& report);
CheckResult check_decomposition(VerifyReport& report, const VerifyOptions& opts);
CheckResult check_sampler_consistency(VerifyReport& report, const VerifyOptions& opts);

/// Runs checks 1-8 in order.
VerifyReport run_verification(const VerifyOptions& opts = {});

/// "id,name,PASS|FAIL,detail" style line.
std::string format_check(const CheckResult& c);

}  // namespace ssip
