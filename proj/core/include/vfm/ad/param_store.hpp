#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vfm/ad/tensor.hpp"

namespace vfm::ad {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor adam_m;
  Tensor adam_v;
};

/// Named parameter tensors with gradient and Adam moment buffers.
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor init);

  std::size_t size() const { return params_.size(); }
  Param& operator[](std::size_t i) { return params_[i]; }
  const Param& operator[](std::size_t i) const { return params_[i]; }
  std::optional<std::size_t> find(const std::string& name) const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  double grad_norm() const;
  void scale_grads(double factor);
  std::size_t n_scalars() const;

  std::vector<double> flat_values() const;
  void set_flat_values(const std::vector<double>& flat);
  std::vector<double> flat_grads() const;

  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }

 private:
  std::vector<Param> params_;
  std::uint64_t step_ = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update. Returns false (and leaves every buffer
/// untouched) when any gradient is non-finite.
bool adam_step(ParamStore& params, const AdamConfig& cfg);

}  // namespace vfm::ad
