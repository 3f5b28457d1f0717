#include "vfm/path.hpp"

#include <fmt/format.h>

#include <numeric>

#include "vfm/error.hpp"

namespace vfm {

std::size_t SpaceSpec::categorical_dim() const {
  return std::accumulate(categorical.begin(), categorical.end(), std::size_t{0});
}

std::size_t SpaceSpec::total_dim() const { return n_continuous + categorical_dim(); }

std::size_t SpaceSpec::block_offset(std::size_t block) const {
  if (block >= categorical.size()) {
    throw StructuralError(fmt::format("categorical block {} out of range ({} blocks)", block,
                                      categorical.size()));
  }
  std::size_t offset = n_continuous;
  for (std::size_t b = 0; b < block; ++b) offset += categorical[b];
  return offset;
}

void SpaceSpec::validate() const {
  for (std::size_t k : categorical) {
    if (k < 2) throw ConfigError(fmt::format("categorical cardinality {} < 2", k));
  }
  if (points) {
    if (points->n_points == 0 || points->spatial_dim == 0) {
      throw ConfigError("point cloud shape must have N >= 1 and d >= 1");
    }
    if (points->n_points * points->spatial_dim != n_continuous) {
      throw ConfigError(fmt::format("point cloud {}x{} does not cover {} continuous dims",
                                    points->n_points, points->spatial_dim, n_continuous));
    }
    if (!categorical.empty() && categorical.size() != points->n_points) {
      throw ConfigError("point cloud types need exactly one categorical block per point");
    }
  }
  if (total_dim() == 0) throw ConfigError("empty state space");
}

SpaceSpec point_cloud_space(std::size_t n_points, std::size_t dim, std::size_t n_types) {
  SpaceSpec s;
  s.n_continuous = n_points * dim;
  if (n_types > 0) s.categorical.assign(n_points, n_types);
  s.points = PointCloudShape{n_points, dim};
  return s;
}

void ConditionalVelocitySpec::validate() const {
  if (!(t_clamp > 0.0 && t_clamp < 0.5)) {
    throw ConfigError(fmt::format("t_clamp must lie in (0, 0.5), got {}", t_clamp));
  }
}

State interpolate(const State& x0, const State& x1, double t) {
  if (x0.values.size() != x1.values.size()) {
    throw StructuralError(fmt::format("interpolate: dimension mismatch {} vs {}", x0.values.size(),
                                      x1.values.size()));
  }
  if (!(t >= 0.0 && t <= 1.0)) throw UsageError(fmt::format("interpolate: t = {} outside [0, 1]", t));
  State out;
  out.time = t;
  out.values.resize(x0.values.size());
  // Endpoints are reproduced exactly at t = 0 and t = 1.
  if (t == 0.0) {
    out.values = x0.values;
  } else if (t == 1.0) {
    out.values = x1.values;
  } else {
    for (std::size_t i = 0; i < out.values.size(); ++i) {
      out.values[i] = (1.0 - t) * x0.values[i] + t * x1.values[i];
    }
  }
  return out;
}

double clamp_time(const ConditionalVelocitySpec& spec, double t, ClampDiagnostics* diag) {
  const double t_max = 1.0 - spec.t_clamp;
  if (t > t_max) {
    if (diag) diag->clamped.fetch_add(1, std::memory_order_relaxed);
    return t_max;
  }
  return t;
}

std::vector<double> conditional_velocity(const ConditionalVelocitySpec& spec, std::span<const double> x,
                                         std::span<const double> x1, double t,
                                         ClampDiagnostics* diag) {
  if (x.size() != x1.size()) {
    throw StructuralError(
        fmt::format("conditional_velocity: dimension mismatch {} vs {}", x.size(), x1.size()));
  }
  const double denom = 1.0 - clamp_time(spec, t, diag);
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) v[i] = (x1[i] - x[i]) / denom;
  return v;
}

std::vector<double> endpoint_to_velocity(const ConditionalVelocitySpec& spec, std::span<const double> x,
                                         double t, std::span<const double> x1_hat,
                                         ClampDiagnostics* diag) {
  if (!spec.linear_in_endpoint()) {
    throw ConfigError("endpoint_to_velocity requires a velocity family linear in the endpoint");
  }
  return conditional_velocity(spec, x, x1_hat, t, diag);
}

double sample_time(Rng& rng, double t_clamp) {
  std::uniform_real_distribution<double> dist(0.0, 1.0 - t_clamp);
  return dist(rng);
}

}  // namespace vfm
