#include "vfm/metrics.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "vfm/error.hpp"

namespace vfm {

using ad::Tensor;

double wasserstein2_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw DataError("wasserstein2_1d: empty sample set");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  double total = 0.0;
  if (a.size() == b.size()) {
    for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(total / na);
  }
  // Walk the merged quantile breakpoints i / na and j / nb.
  std::size_t i = 0, j = 0;
  double u = 0.0;
  while (i < a.size() && j < b.size()) {
    const double ua = static_cast<double>(i + 1) / na;
    const double ub = static_cast<double>(j + 1) / nb;
    const double next = std::min(ua, ub);
    total += (next - u) * (a[i] - b[j]) * (a[i] - b[j]);
    u = next;
    if (ua <= ub) ++i;
    if (ub <= ua) ++j;
  }
  return std::sqrt(total);
}

Tensor random_directions(std::size_t dim, std::size_t n, Rng& rng) {
  if (dim == 0) throw DataError("random_directions: zero dimension");
  Tensor out(n, dim);
  for (std::size_t r = 0; r < n; ++r) {
    double norm = 0.0;
    while (norm < 1e-12) {
      norm = 0.0;
      for (double& v : out.row(r)) {
        v = standard_normal(rng);
        norm += v * v;
      }
      norm = std::sqrt(norm);
    }
    for (double& v : out.row(r)) v /= norm;
  }
  return out;
}

double sliced_w2(const Tensor& a, const Tensor& b, const Tensor& directions) {
  if (a.rows == 0 || b.rows == 0) throw DataError("sliced_w2: empty sample set");
  if (a.cols != b.cols || directions.cols != a.cols) throw StructuralError("sliced_w2: dimension mismatch");
  if (directions.rows == 0) throw ConfigError("sliced_w2: need at least one projection");
  double total = 0.0;
  for (std::size_t p = 0; p < directions.rows; ++p) {
    auto dir = directions.row(p);
    auto project = [&](const Tensor& s) {
      std::vector<double> out(s.rows);
      for (std::size_t r = 0; r < s.rows; ++r) {
        double v = 0.0;
        for (std::size_t k = 0; k < s.cols; ++k) v += s(r, k) * dir[k];
        out[r] = v;
      }
      return out;
    };
    total += wasserstein2_1d(project(a), project(b));
  }
  return total / static_cast<double>(directions.rows);
}

double sliced_w2(const Tensor& a, const Tensor& b, std::size_t n_projections, Rng& rng) {
  if (n_projections == 0) throw ConfigError("sliced_w2: need at least one projection");
  if (a.cols != b.cols) throw StructuralError("sliced_w2: dimension mismatch");
  return sliced_w2(a, b, random_directions(a.cols, n_projections, rng));
}

MarginalTv marginal_tv(const std::vector<std::vector<std::size_t>>& categories,
                       const std::vector<std::vector<double>>& target) {
  if (categories.empty()) throw DataError("marginal_tv: empty sample set");
  MarginalTv out;
  for (std::size_t d = 0; d < target.size(); ++d) {
    const std::size_t k = target[d].size();
    std::vector<double> freq(k, 0.0);
    for (const auto& row : categories) {
      if (row.size() != target.size()) throw StructuralError("marginal_tv: block count differs from target");
      if (row[d] >= k) throw StructuralError(fmt::format("marginal_tv: category {} out of range for K = {}", row[d], k));
      freq[row[d]] += 1.0;
    }
    double tv = 0.0;
    for (std::size_t c = 0; c < k; ++c) tv += std::abs(freq[c] / static_cast<double>(categories.size()) - target[d][c]);
    out.per_dim.push_back(0.5 * tv);
    out.max = std::max(out.max, 0.5 * tv);
  }
  return out;
}

MarginalTv marginal_tv(const Tensor& samples, const SpaceSpec& space, const std::vector<std::vector<double>>& target) {
  if (target.size() != space.categorical.size()) throw StructuralError("marginal_tv: target has the wrong block count");
  for (std::size_t b = 0; b < target.size(); ++b) {
    if (target[b].size() != space.categorical[b]) {
      throw StructuralError(fmt::format("marginal_tv: cardinality mismatch in block {}", b));
    }
  }
  if (samples.cols != space.total_dim()) throw StructuralError("marginal_tv: samples have the wrong dimension");
  std::vector<std::vector<std::size_t>> cats;
  for (std::size_t r = 0; r < samples.rows; ++r) {
    std::vector<std::size_t> row;
    std::size_t offset = space.n_continuous;
    for (std::size_t k : space.categorical) {
      auto block = samples.row(r).subspan(offset, k);
      row.push_back(static_cast<std::size_t>(std::max_element(block.begin(), block.end()) - block.begin()));
      offset += k;
    }
    cats.push_back(std::move(row));
  }
  return marginal_tv(cats, target);
}

double property_mae(const Tensor& samples, const PropertyFunction& f, double y_target) {
  if (samples.rows == 0) throw DataError("property_mae: empty sample set");
  const auto values = f.values(samples);
  double s = 0.0;
  for (double v : values) s += std::abs(v - y_target);
  return s / static_cast<double>(values.size());
}

double validity_rate(const Tensor& samples, const std::function<bool(std::span<const double>)>& valid) {
  if (samples.rows == 0) throw DataError("validity_rate: empty sample set");
  std::size_t ok = 0;
  for (std::size_t r = 0; r < samples.rows; ++r) ok += valid(samples.row(r)) ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(samples.rows);
}

double duplicate_fraction(const std::vector<std::vector<std::size_t>>& categories) {
  if (categories.empty()) return 0.0;
  std::map<std::vector<std::size_t>, std::size_t> seen;
  std::size_t dup = 0;
  for (const auto& row : categories) dup += seen[row]++ > 0 ? 1 : 0;
  return static_cast<double>(dup) / static_cast<double>(categories.size());
}

std::string metrics_report_csv(const std::vector<MetricRecord>& records) {
  std::string s = "metric,value,n_a,n_b,seed,config_hash\n";
  for (const auto& r : records) {
    if (!std::isfinite(r.value)) throw NumericError(fmt::format("metric '{}' is not finite", r.metric));
    s += fmt::format("{},{:.17g},{},{},{},{}\n", r.metric, r.value, r.n_a, r.n_b, r.seed, r.config_hash);
  }
  return s;
}

}  // namespace vfm
