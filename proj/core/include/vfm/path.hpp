#pragma once

// Product state space, OT probability path and conditional velocities.
//
// Layout of a state vector: the continuous block [0, n_continuous) comes
// first, followed by one simplex block per categorical factor. When a point
// cloud shape is declared, the continuous block holds N points of d
// coordinates in row-major order and categorical block i is the type of
// point i.

#include <atomic>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "vfm/random.hpp"

namespace vfm {

struct PointCloudShape {
  std::size_t n_points = 0;
  std::size_t spatial_dim = 0;

  bool operator==(const PointCloudShape&) const = default;
};

struct SpaceSpec {
  std::size_t n_continuous = 0;
  std::vector<std::size_t> categorical;  // cardinality of each factor, in block order
  std::optional<PointCloudShape> points;

  std::size_t total_dim() const;
  std::size_t categorical_dim() const;  // sum of cardinalities
  std::size_t block_offset(std::size_t block) const;
  bool is_point_cloud() const { return points.has_value(); }

  /// Throws ConfigError when an invariant is violated.
  void validate() const;

  bool operator==(const SpaceSpec&) const = default;
};

/// Point cloud of n points in `dim` dimensions with `n_types` categorical
/// types per point.
SpaceSpec point_cloud_space(std::size_t n_points, std::size_t dim, std::size_t n_types);

struct State {
  std::vector<double> values;
  double time = 0.0;
};

struct Coupling {
  State x0;
  State x1;
  std::optional<double> label;
};

enum class VelocityKind { optimal_transport };

struct ConditionalVelocitySpec {
  VelocityKind kind = VelocityKind::optimal_transport;
  double t_clamp = 1e-5;

  bool linear_in_endpoint() const { return kind == VelocityKind::optimal_transport; }
  void validate() const;
};

/// Counts how many times a time argument was clamped to 1 - eps.
struct ClampDiagnostics {
  std::atomic<std::size_t> clamped{0};
};

/// (1 - t) x0 + t x1. Labels on a coupling never enter here.
State interpolate(const State& x0, const State& x1, double t);

/// Applies the 1 - eps clamp; increments `diag` when it bites.
double clamp_time(const ConditionalVelocitySpec& spec, double t, ClampDiagnostics* diag = nullptr);

/// (x1 - x) / (1 - t_clamped).
std::vector<double> conditional_velocity(const ConditionalVelocitySpec& spec, std::span<const double> x,
                                         std::span<const double> x1, double t,
                                         ClampDiagnostics* diag = nullptr);

/// Marginal velocity from a predicted endpoint mean. Only valid for velocity
/// families that are linear in the endpoint; throws ConfigError otherwise.
std::vector<double> endpoint_to_velocity(const ConditionalVelocitySpec& spec, std::span<const double> x,
                                         double t, std::span<const double> x1_hat,
                                         ClampDiagnostics* diag = nullptr);

/// t ~ Uniform(0, 1 - eps).
double sample_time(Rng& rng, double t_clamp = 1e-5);

}  // namespace vfm
