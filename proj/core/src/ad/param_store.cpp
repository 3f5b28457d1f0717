#include "vfm/ad/param_store.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cmath>

#include "vfm/error.hpp"

namespace vfm::ad {

std::size_t ParamStore::add(std::string name, Tensor init) {
  if (find(name)) throw ConfigError(fmt::format("duplicate parameter name '{}'", name));
  Param p;
  p.name = std::move(name);
  p.grad = Tensor(init.rows, init.cols);
  p.adam_m = Tensor(init.rows, init.cols);
  p.adam_v = Tensor(init.rows, init.cols);
  p.value = std::move(init);
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

std::optional<std::size_t> ParamStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  return std::nullopt;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
}

double ParamStore::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_) {
    for (double g : p.grad.data) s += g * g;
  }
  return std::sqrt(s);
}

std::size_t ParamStore::n_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::vector<double> ParamStore::flat_values() const {
  std::vector<double> out;
  out.reserve(n_scalars());
  for (const auto& p : params_) out.insert(out.end(), p.value.data.begin(), p.value.data.end());
  return out;
}

void ParamStore::set_flat_values(const std::vector<double>& flat) {
  if (flat.size() != n_scalars()) {
    throw StructuralError(fmt::format("set_flat_values: {} values for {} scalars", flat.size(), n_scalars()));
  }
  std::size_t k = 0;
  for (auto& p : params_) {
    for (double& v : p.value.data) v = flat[k++];
  }
}

std::vector<double> ParamStore::flat_grads() const {
  std::vector<double> out;
  out.reserve(n_scalars());
  for (const auto& p : params_) out.insert(out.end(), p.grad.data.begin(), p.grad.data.end());
  return out;
}

void ParamStore::scale_grads(double factor) {
  for (auto& p : params_) {
    for (double& g : p.grad.data) g *= factor;
  }
}

bool adam_step(ParamStore& params, const AdamConfig& cfg) {
  for (const auto& p : params) {
    if (!p.grad.all_finite()) {
      spdlog::warn("adam_step: non-finite gradient in '{}', skipping step {}", p.name, params.step() + 1);
      return false;
    }
  }
  const std::uint64_t step = params.step() + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  // Staged so an overflowing update leaves parameters and moments untouched.
  std::vector<Tensor> values, ms, vs;
  for (const auto& p : params) {
    Tensor value = p.value, m = p.adam_m, v = p.adam_v;
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double g = p.grad.data[k];
      m.data[k] = cfg.beta1 * m.data[k] + (1.0 - cfg.beta1) * g;
      v.data[k] = cfg.beta2 * v.data[k] + (1.0 - cfg.beta2) * g * g;
      value.data[k] -= cfg.lr * (m.data[k] / bc1) / (std::sqrt(v.data[k] / bc2) + cfg.eps);
    }
    if (!value.all_finite() || !m.all_finite() || !v.all_finite()) {
      spdlog::warn("adam_step: non-finite update in '{}', skipping step {}", p.name, step);
      return false;
    }
    values.push_back(std::move(value));
    ms.push_back(std::move(m));
    vs.push_back(std::move(v));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].value = std::move(values[i]);
    params[i].adam_m = std::move(ms[i]);
    params[i].adam_v = std::move(vs[i]);
  }
  params.set_step(step);
  return true;
}

}  // namespace vfm::ad
