#pragma once

// Distributional and property metrics over sample sets (one sample per row).

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vfm/ad/tensor.hpp"
#include "vfm/guidance.hpp"
#include "vfm/path.hpp"
#include "vfm/random.hpp"

namespace vfm {

/// Mean over random unit directions of the exact 1-D W2 between the
/// projected empirical measures.
double sliced_w2(const ad::Tensor& a, const ad::Tensor& b, std::size_t n_projections, Rng& rng);
/// Same with explicit directions, one unit vector per row.
double sliced_w2(const ad::Tensor& a, const ad::Tensor& b, const ad::Tensor& directions);

/// Exact W2 between two 1-D empirical measures with uniform weights. Sizes
/// may differ; the quantile functions are merged.
double wasserstein2_1d(std::vector<double> a, std::vector<double> b);

ad::Tensor random_directions(std::size_t dim, std::size_t n, Rng& rng);

struct MarginalTv {
  std::vector<double> per_dim;
  double max = 0.0;
};

/// Total variation between the empirical per-block category frequencies of
/// decoded samples and the target tables.
MarginalTv marginal_tv(const ad::Tensor& samples, const SpaceSpec& space,
                       const std::vector<std::vector<double>>& target);
MarginalTv marginal_tv(const std::vector<std::vector<std::size_t>>& categories,
                       const std::vector<std::vector<double>>& target);

double property_mae(const ad::Tensor& samples, const PropertyFunction& f, double y_target);

/// Fraction of rows accepted by `valid`.
double validity_rate(const ad::Tensor& samples, const std::function<bool(std::span<const double>)>& valid);

/// Fraction of rows whose categorical blocks repeat an earlier row.
double duplicate_fraction(const std::vector<std::vector<std::size_t>>& categories);

struct MetricRecord {
  std::string metric;
  double value = 0.0;
  std::size_t n_a = 0;
  std::size_t n_b = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

/// CSV with header metric,value,n_a,n_b,seed,config_hash.
std::string metrics_report_csv(const std::vector<MetricRecord>& records);

}  // namespace vfm
