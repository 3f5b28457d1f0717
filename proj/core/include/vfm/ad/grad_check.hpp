#pragma once

#include <functional>

#include "vfm/ad/tape.hpp"

namespace vfm::ad {

/// Scalar-valued function recorded on a tape, given the input leaf.
using TapeFunction = std::function<Var(Tape&, Var)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  Tensor analytic;
  Tensor numeric;
};

/// Compares the reverse-mode gradient of `f` at `point` against central
/// differences with step h. Relative error per coordinate is
/// |a - c| / (|a| + |c| + 1e-12).
GradCheckResult grad_check_detailed(const TapeFunction& f, const Tensor& point, double h);

inline double grad_check(const TapeFunction& f, const Tensor& point, double h) {
  return grad_check_detailed(f, point, h).max_relative_error;
}

/// Same comparison for arbitrary callables: `value` evaluates the function,
/// `gradient` returns its analytic gradient.
double grad_check(const std::function<double(const std::vector<double>&)>& value,
                  const std::function<std::vector<double>(const std::vector<double>&)>& gradient,
                  const std::vector<double>& point, double h);

}  // namespace vfm::ad
