#pragma once

// Numeric equivariance audits. Residuals are max-abs coordinate deviations.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vfm/heads.hpp"
#include "vfm/path.hpp"
#include "vfm/sampling.hpp"
#include "vfm/symmetry.hpp"

namespace vfm {

struct AuditTolerances {
  double exact = 1e-12;       // closed-form linear identities
  double head = 1e-9;         // learned-head identities
  double trajectory = 1e-8;   // K-step trajectories
  double negative_control = 0.1;
};

/// u(x | x1, t) for state vectors.
using VelocityFn = std::function<std::vector<double>(std::span<const double>, std::span<const double>, double)>;

VelocityFn ot_velocity(const ConditionalVelocitySpec& spec);
/// OT velocity with a fixed bias added to x1 only; breaks bi-equivariance.
VelocityFn biased_velocity(const ConditionalVelocitySpec& spec, std::vector<double> bias);

/// max over random (g, x, x1, t) of |u(g.x | g.x1, t) - g.u(x | x1, t)|, where
/// g acts linearly on the velocity (translations drop out).
double audit_bi_equivariance(const VelocityFn& u, const SpaceSpec& space, GroupFamily family, std::size_t trials,
                             std::uint64_t seed, const InvariantPrior& prior = {});

/// Point clouds are compared modulo translation, i.e. after centring.
struct PriorAudit {
  double covariance_residual = 0.0;  // max |G S G^T - S| for the analytic covariance S
  double moment_deviation = 0.0;     // max |empirical second moment of g x - S|
  double moment_tolerance = 0.0;     // five standard errors
  double categorical_deviation = 0.0;  // max |empirical block mean of g x - 1/K|
  double categorical_tolerance = 0.0;
  double max_com = 0.0;  // zero-CoM prior only, else 0
};

/// Analytic covariance of the continuous block, row-major.
std::vector<double> prior_covariance(const InvariantPrior& prior, const SpaceSpec& space);

PriorAudit audit_prior_invariance(const InvariantPrior& prior, const SpaceSpec& space, GroupFamily family,
                                  std::size_t samples, std::uint64_t seed);

struct ModelAudit {
  double expectation_residual = 0.0;
  double velocity_residual = 0.0;
};

/// Expectation and velocity equivariance of a head over random prior states,
/// times in (0, 1) and group elements.
ModelAudit audit_model_equivariance(const VariationalHead& head, GroupFamily family, std::size_t trials,
                                    std::uint64_t seed, const InvariantPrior& prior = {},
                                    std::optional<double> y = std::nullopt);

struct MarginalAudit {
  double trajectory_residual = 0.0;  // max over chains and frames
  double histogram_deviation = 0.0;  // max bin frequency gap
  double histogram_tolerance = 0.0;
};

/// Integrates x0 and g.x0 and compares g.traj(x0) with traj(g.x0). With
/// histogram_samples > 0, also compares pairwise-distance histograms of
/// samples started from x0 and from transformed independent prior draws.
MarginalAudit audit_marginal_invariance(const VariationalHead& head, const InvariantPrior& prior,
                                        const IntegratorConfig& integrator, GroupFamily family, std::size_t trials,
                                        std::uint64_t seed, std::size_t histogram_samples = 0);

/// Invariant statistic per sample: pairwise point distances, or the norm of
/// the continuous block when the space has no point-cloud shape.
std::vector<double> pairwise_distances(std::span<const double> x, const SpaceSpec& space);

std::string to_string(GroupFamily f);
GroupFamily group_family_from_string(const std::string& s);

}  // namespace vfm
