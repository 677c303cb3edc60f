#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

// Invariant suites behind `segkit selftest`.
namespace segkit::selftest {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct GradientCase {
  std::string name;
  // Worst central-difference relative error for one seed.
  std::function<double(std::uint64_t seed, double step)> run;
};

// Every differentiable op and loss, on small random inputs kept away from
// kinks (relu at 0, max ties, the log clamp).
std::vector<GradientCase> gradient_cases();

// One result per case: passes when every seed stays below tolerance.
std::vector<CheckResult> gradient_suite(std::size_t seeds = 10, double step = 1e-5,
                                        double tolerance = 1e-4);

// conv2d at rate 1 against the direct sliding-window kernel, bitwise.
CheckResult atrous_identity(std::size_t cases = 50, std::uint64_t seed = 7);
// ConfusionMatrix scores against per-pixel set counting.
CheckResult metric_oracle(std::size_t cases = 100, std::uint64_t seed = 11);
CheckResult analytic_losses();
CheckResult palette_fidelity();

std::vector<CheckResult> run_all(std::size_t gradient_seeds = 10);

}  // namespace segkit::selftest
