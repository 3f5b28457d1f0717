#include "vfm/ad/grad_check.hpp"

#include <cmath>

#include "vfm/error.hpp"

namespace vfm::ad {

namespace {

double relative_error(double a, double c) { return std::abs(a - c) / (std::abs(a) + std::abs(c) + 1e-12); }

double evaluate(const TapeFunction& f, const Tensor& point) {
  Tape tape;
  Var x = tape.leaf(point, false);
  const Tensor& out = tape.value(f(tape, x));
  if (out.size() != 1) throw UsageError("grad_check needs a scalar-valued function");
  return out.data[0];
}

}  // namespace

GradCheckResult grad_check_detailed(const TapeFunction& f, const Tensor& point, double h) {
  if (!(h > 0.0)) throw UsageError("grad_check: step h must be positive");
  GradCheckResult res;
  {
    Tape tape;
    Var x = tape.leaf(point, true);
    Var y = f(tape, x);
    tape.backward(y);
    res.analytic = tape.grad(x);
  }
  res.numeric = Tensor(point.rows, point.cols);
  Tensor probe = point;
  for (std::size_t k = 0; k < point.size(); ++k) {
    const double x0 = point.data[k];
    probe.data[k] = x0 + h;
    const double fp = evaluate(f, probe);
    probe.data[k] = x0 - h;
    const double fm = evaluate(f, probe);
    probe.data[k] = x0;
    res.numeric.data[k] = (fp - fm) / (2.0 * h);
    const double err = relative_error(res.analytic.data[k], res.numeric.data[k]);
    if (err > res.max_relative_error) {
      res.max_relative_error = err;
      res.worst_index = k;
    }
  }
  return res;
}

double grad_check(const std::function<double(const std::vector<double>&)>& value,
                  const std::function<std::vector<double>(const std::vector<double>&)>& gradient,
                  const std::vector<double>& point, double h) {
  if (!(h > 0.0)) throw UsageError("grad_check: step h must be positive");
  const std::vector<double> analytic = gradient(point);
  if (analytic.size() != point.size()) throw StructuralError("grad_check: gradient has wrong length");
  std::vector<double> probe = point;
  double worst = 0.0;
  for (std::size_t k = 0; k < point.size(); ++k) {
    probe[k] = point[k] + h;
    const double fp = value(probe);
    probe[k] = point[k] - h;
    const double fm = value(probe);
    probe[k] = point[k];
    worst = std::max(worst, relative_error(analytic[k], (fp - fm) / (2.0 * h)));
  }
  return worst;
}

}  // namespace vfm::ad
