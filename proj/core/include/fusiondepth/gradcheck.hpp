#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fusiondepth/tensor.hpp"

namespace fusiondepth {

struct GradcheckOptions {
  std::uint64_t seed = 1;
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-4;
  /// Elements probed per input tensor; 0 probes every element.
  int samples_per_tensor = 0;
  /// Adds a case whose backward rule is deliberately wrong.
  bool inject_fault = false;
};

struct GradcheckCase {
  std::string name;
  double max_rel_err = 0.0;
  int checked = 0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckCase> cases;
  double seconds = 0.0;
  bool passed() const;
};

/// Builds a scalar from the inputs; ops record on whatever tape is active.
using ScalarFn = std::function<Tensor<double>()>;

/// Compares backward() of `fn` against central differences. `numeric_fn`, if
/// given, is the function differentiated numerically instead of `fn`.
GradcheckCase check_gradients(const std::string& name, const std::vector<Tensor<double>>& inputs, const ScalarFn& fn,
                              const GradcheckOptions& options, const ScalarFn& numeric_fn = {});

/// Every differentiable op, both focal-loss variants, the composite loss and
/// a small end-to-end FusionNet.
GradcheckReport run_gradcheck_suite(const GradcheckOptions& options = {});

}  // namespace fusiondepth
