#pragma once

// Property functions f(x1) and Gaussian-residual likelihoods p(y | x1).
//
// Property functions read the continuous block of a batch of endpoint
// states and are recorded on a tape so that the same code serves labels,
// metrics and guidance gradients. Categorical blocks never influence f.

#include <span>
#include <string>
#include <vector>

#include "vfm/ad/tape.hpp"
#include "vfm/path.hpp"

namespace vfm {

enum class PropertyKind {
  circumradius,            // mean distance of the points to their centroid
  mean_pairwise_distance,  // mean over unordered point pairs
  component_index,         // soft nearest-centre index, sum_k k softmax(-|x - c_k|^2 / tau)
  coordinate_sum,          // scale * sum of continuous coordinates
};

struct PropertySpec {
  PropertyKind kind = PropertyKind::coordinate_sum;
  double scale = 1.0;                // coordinate_sum only
  std::vector<double> centers;       // component_index: M rows of n_continuous values
  double temperature = 0.05;         // component_index softmax temperature
};

class PropertyFunction {
 public:
  PropertyFunction(PropertySpec spec, SpaceSpec space);

  const PropertySpec& spec() const { return spec_; }
  const SpaceSpec& space() const { return space_; }

  /// x is B x D; returns B x 1.
  ad::Var record(ad::Tape& tape, ad::Var x) const;

  double value(std::span<const double> x1) const;
  std::vector<double> values(const ad::Tensor& batch) const;
  /// Gradient of f with respect to the full state vector.
  std::vector<double> gradient(std::span<const double> x1) const;

  /// True when f is invariant under rotations and permutations of points.
  bool is_group_invariant() const;

 private:
  PropertySpec spec_;
  SpaceSpec space_;
  ad::Index pair_i_;
  ad::Index pair_j_;
};

struct PropertyLikelihood {
  PropertyFunction f;
  double sigma_y = 1.0;
  double target = 0.0;

  PropertyLikelihood(PropertyFunction f, double sigma_y, double target);

  /// -(y - f)^2 / (2 sigma_y^2) - log(2 pi sigma_y^2) / 2
  double log_likelihood(std::span<const double> x1) const;
  /// (y - f) / sigma_y^2 * grad f. Throws NumericError naming the first
  /// non-finite coordinate.
  std::vector<double> grad_log_likelihood(std::span<const double> x1) const;
  /// Row-wise gradients for a B x D batch.
  ad::Tensor grad_log_likelihood_batch(const ad::Tensor& batch) const;
};

std::string to_string(PropertyKind k);
PropertyKind property_kind_from_string(const std::string& s);

}  // namespace vfm
