#pragma once

// Built-in numerical verification suite: flow round-trips, log-determinant
// cross-checks, gradients vs central finite differences, KL identities and
// causality perturbation tests. Each check reports one line; any failure
// makes the suite fail.

#include <ostream>
#include <string>
#include <vector>

namespace vaenar {

struct SelfCheckOptions {
    std::uint64_t seed = 1234;
    // Test fixture: negates the analytic actnorm log-determinant before
    // comparison, modeling a sign bug the suite must catch.
    bool flip_actnorm_logdet_sign = false;
};

struct CheckResult {
    std::string name;
    bool ok = false;
    std::string detail;
};

std::vector<CheckResult> run_selfcheck(const SelfCheckOptions& opts);

int registered_check_count();

// Prints "ok <name>" / "FAIL <name>: <detail>" per check; returns 0 when
// everything passed, 1 otherwise.
int selfcheck_main(std::ostream& os, const SelfCheckOptions& opts);

}  // namespace vaenar
