#pragma once

#include "catx/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace catx {

// Central finite-difference gradient checking. The numeric side only ever
// calls the forward path, so it stays an independent oracle for backward().
struct GradCheckResult {
  std::string op;
  double max_rel_err = 0.0;
  bool pass = false;
};

struct GradCheckOptions {
  double h = 1e-3;
  double tol = 1e-4;
  uint64_t seed = 2024;
  // Test hook: adds 1.0 to the analytic gradient of the named suite so the
  // report is forced to name that op as failing.
  std::string corrupt_op;
};

// Builds a scalar from watched copies of `inputs` (in order) on the given
// tape. Must be deterministic in the input values.
using ScalarBuilder =
    std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

// Max relative error between tape gradients and central differences over all
// elements of all inputs. Relative error is |a-n| / max(1, |a|, |n|).
double gradcheck_case(const ScalarBuilder& fn, std::vector<Tensor> inputs,
                      double h = 1e-3, bool corrupt = false);

// The registered per-op suites (one entry per differentiable operation).
struct GradCheckSuite {
  std::string name;
  std::function<double(const GradCheckOptions&)> run;  // returns max rel err
};

const std::vector<GradCheckSuite>& gradcheck_suites();

// Per-module suite lists, combined by gradcheck_suites().
std::vector<GradCheckSuite> encoder_gradcheck_suites();
std::vector<GradCheckSuite> decoder_gradcheck_suites();
std::vector<GradCheckSuite> losses_gradcheck_suites();

// Runs every suite (or the named subset) and reports per-op results.
std::vector<GradCheckResult> run_gradcheck(
    const GradCheckOptions& opts, const std::vector<std::string>& ops = {});

}  // namespace catx
