#pragma once

// ODE integration of the expected-endpoint velocity, fixed-point guidance
// and the batched sampler.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vfm/ad/tensor.hpp"
#include "vfm/guidance.hpp"
#include "vfm/heads.hpp"
#include "vfm/path.hpp"
#include "vfm/symmetry.hpp"

namespace vfm {

enum class Scheme { euler, rk4 };

struct IntegratorConfig {
  Scheme scheme = Scheme::euler;
  std::size_t steps = 100;  // K
  double t_clamp = 1e-5;

  void validate() const;
  /// Velocity evaluations per chain.
  std::size_t nfe() const { return scheme == Scheme::euler ? steps : 4 * steps; }
};

struct GuidanceConfig {
  std::size_t inner_steps = 5;  // S
  double damping = 0.5;         // lambda
  double divergence_cap = 1e3;  // on the per-step update norm
  double tolerance = 1e-8;      // final residual below which an iterate counts as converged

  void validate() const;
};

/// Batched velocity: X is B x D, one time for the whole batch.
using BatchField = std::function<ad::Tensor(const ad::Tensor& x, double t)>;

struct Trajectory {
  std::vector<double> times;     // K + 1 grid times, last one reported as 1 - eps
  std::vector<ad::Tensor> frames;  // K + 1 frames of B x D
};

/// Projects each categorical block of every row onto the probability simplex.
void project_to_simplex(ad::Tensor& x, const SpaceSpec& space);

/// Euclidean projection of one vector onto the probability simplex.
void project_to_simplex(std::span<double> v);

/// Integrates from t = 0 to 1 on the uniform grid k / K. Categorical blocks
/// are projected back onto the simplex after every step. Throws NumericError
/// naming the step when the state stops being finite.
Trajectory integrate(const BatchField& field, const ad::Tensor& x0, const IntegratorConfig& cfg,
                     const SpaceSpec& space, bool keep_frames = true);

/// Replaces every categorical block by the one-hot of its argmax (first
/// maximum wins).
void decode_categories(ad::Tensor& x, const SpaceSpec& space);
std::vector<std::size_t> argmax_categories(std::span<const double> x, const SpaceSpec& space);

/// v(x, t) = (E_q[x1] - x) / (1 - t).
std::vector<double> velocity_field(const VariationalHead& head, const State& x,
                                   std::optional<double> y = std::nullopt);
ad::Tensor velocity_batch(const VariationalHead& head, const ad::Tensor& x, double t,
                          const std::optional<double>& y = std::nullopt);

struct RefineResult {
  std::vector<double> x;
  std::vector<double> residuals;  // |x^(s+1) - x^(s)| per inner step
  bool diverged = false;
  bool converged = false;
};

/// x^(0) = mu; x^(s+1) = (1 - lambda) x^(s) + lambda (mu + sigma2 grad log p(y | x^(s))).
/// When an update norm exceeds the cap, returns mu unchanged with
/// diverged = true.
RefineResult fixed_point_refine(std::span<const double> mu, double sigma2, const PropertyLikelihood& lik,
                                const GuidanceConfig& cfg);

/// Row-wise refinement of a B x D batch of means.
std::vector<RefineResult> fixed_point_refine_batch(const ad::Tensor& mu, double sigma2, const PropertyLikelihood& lik,
                                                   const GuidanceConfig& cfg);

enum class SampleMode { unconditional, conditioned, guided };

struct SampleConfig {
  IntegratorConfig integrator;
  SampleMode mode = SampleMode::unconditional;
  std::optional<double> y;                    // conditioned mode
  std::optional<PropertyLikelihood> likelihood;  // guided mode
  GuidanceConfig guidance;
  InvariantPrior prior;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t chunk_size = 64;
  bool keep_trajectories = false;
};

struct SampleResult {
  ad::Tensor samples;  // n x D, categorical blocks decoded to one-hot
  std::vector<std::vector<std::size_t>> categories;
  std::vector<std::uint64_t> nfe;  // velocity evaluations per chain
  std::size_t refine_diverged = 0;
  std::size_t refine_total = 0;
  std::vector<double> times;
  std::vector<ad::Tensor> trajectories;  // per chain, (K + 1) x D, when kept
};

/// Initial states of chains [first, first + n) for the given seed.
ad::Tensor prior_batch(const InvariantPrior& prior, const SpaceSpec& space, std::uint64_t seed, std::size_t first,
                       std::size_t n);

/// Integrates given initial states in the requested mode.
SampleResult sample_from(const VariationalHead& head, const ad::Tensor& x0, const SampleConfig& cfg);

/// Draws n chains from the prior (chain i uses stream i of cfg.seed) and
/// integrates them. Chains are processed in fixed-size chunks, so the result
/// does not depend on the worker count.
SampleResult sample(const VariationalHead& head, std::size_t n, const SampleConfig& cfg);

// ------------------------------------------------------------ trajectories

struct TrajectoryFile {
  std::size_t dim = 0;
  std::vector<double> times;
  std::vector<ad::Tensor> chains;  // (K + 1) x D each

  std::string serialize() const;
  static TrajectoryFile parse(const std::string& bytes);
};

inline constexpr int kTrajectoryVersion = 1;

// ------------------------------------------------- continuity-equation check

/// Two-endpoint 1-D target, x0 ~ N(0, 1), OT path. Compares dp/dt against
/// -d/dx (p * E[u | x]) on a grid, both by central differences of exact
/// enumerated quantities.
struct ContinuityCheck {
  std::vector<double> endpoints{-1.0, 2.0};
  std::vector<double> weights{0.3, 0.7};  // p1(x1 | y)
  double x_min = -3.0;
  double x_max = 3.0;
  std::size_t x_points = 121;
  std::vector<double> times{0.1, 0.3, 0.5, 0.7, 0.9};
  double h = 1e-4;
};

struct ContinuityReport {
  double max_residual = 0.0;
  double worst_x = 0.0;
  double worst_t = 0.0;
};

double controlled_path_density(const ContinuityCheck& c, double x, double t);
double controlled_flux(const ContinuityCheck& c, double x, double t);
ContinuityReport continuity_residual(const ContinuityCheck& c);

std::string to_string(SampleMode m);
SampleMode sample_mode_from_string(const std::string& s);
std::string to_string(Scheme s);
Scheme scheme_from_string(const std::string& s);

}  // namespace vfm
