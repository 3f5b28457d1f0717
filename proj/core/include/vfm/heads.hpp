#pragma once

// Mean-field variational posteriors q_t(x1 | x) and q_t(x1 | x, y).
//
// Both heads emit, per state, Gaussian means for the continuous block and
// logits for every categorical block. Means are parameterised as
//   mu = x_c + (1 - t) * net(x, t, y)
// so that a zero output layer predicts the current position, and the
// Gaussian log-density with variance sigma_base^2 (1 - t)^2 stays well
// conditioned as t -> 1.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vfm/ad/param_store.hpp"
#include "vfm/ad/tape.hpp"
#include "vfm/path.hpp"

namespace vfm {

enum class Architecture { mlp, equivariant };

/// sigma_t^2 = base^2 (1 - t)^2 with t clamped to 1 - eps.
struct SigmaSchedule {
  double base = 1.0;
  double variance(double t, double t_clamp) const;
};

struct HeadConfig {
  Architecture architecture = Architecture::mlp;
  SpaceSpec space;
  std::vector<std::size_t> hidden{64, 64};  // equivariant head uses hidden[0] everywhere
  std::size_t rounds = 3;                   // message-passing rounds (equivariant)
  std::size_t time_features = 8;            // even; sin/cos pairs, raw t is added on top
  bool label_conditioned = false;
  std::size_t label_frequencies = 3;
  double label_scale = 1.0;
  SigmaSchedule sigma;
  double t_clamp = 1e-5;
  bool zero_init_output = true;
  std::uint64_t init_seed = 0;

  void validate() const;
};

struct MeanFieldPosterior {
  std::vector<double> means;  // continuous block
  double sigma2 = 1.0;        // isotropic variance of every Gaussian factor
  std::vector<double> logits;  // concatenated categorical blocks
  std::vector<std::size_t> cardinalities;
};

/// Continuous block = means, each categorical block = softmax(logits).
std::vector<double> expected_endpoint(const MeanFieldPosterior& post);

/// Sum of per-factor log densities. Categorical blocks of x1 must be one-hot.
double log_prob(const MeanFieldPosterior& post, std::span<const double> x1);

/// Posterior parameters for a batch, one row per state.
struct PosteriorBatch {
  ad::Tensor means;   // B x n_continuous
  ad::Tensor logits;  // B x categorical_dim
  std::vector<double> sigma2;

  MeanFieldPosterior row(std::size_t r, const SpaceSpec& space) const;
  /// B x D expected endpoints.
  ad::Tensor expected_endpoints() const;
  std::vector<std::size_t> cardinalities;
};

struct HeadOutput {
  ad::Var means;   // B x n_continuous (invalid if no continuous block)
  ad::Var logits;  // B x categorical_dim (invalid if no categorical block)
};

class VariationalHead {
 public:
  virtual ~VariationalHead() = default;

  const HeadConfig& config() const { return cfg_; }
  const SpaceSpec& space() const { return cfg_.space; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  /// Records the head on `tape`. `x` is B x D; `t` has B entries; `y` must be
  /// present iff the head is label-conditioned.
  virtual HeadOutput forward(ad::Tape& tape, ad::Var x, std::span<const double> t,
                             const std::optional<std::vector<double>>& y) const = 0;

  MeanFieldPosterior posterior_params(const State& x, std::optional<double> y = std::nullopt) const;
  PosteriorBatch posterior_batch(const ad::Tensor& x, std::span<const double> t,
                                 const std::optional<std::vector<double>>& y) const;

  double sigma2(double t) const { return cfg_.sigma.variance(t, cfg_.t_clamp); }

 protected:
  explicit VariationalHead(HeadConfig cfg);
  void check_inputs(const ad::Tensor& x, std::span<const double> t,
                    const std::optional<std::vector<double>>& y) const;

  /// Clamped t followed by sin/cos pairs, B x time_feature_dim().
  ad::Tensor time_features(std::span<const double> t) const;
  std::size_t time_feature_dim() const { return cfg_.time_features + 1; }
  /// Features of y that vanish at y = 0, B x (1 + 2 * label_frequencies).
  ad::Tensor label_features(const std::vector<double>& y) const;
  std::size_t label_feature_dim() const { return 1 + 2 * cfg_.label_frequencies; }

  HeadConfig cfg_;
  ad::ParamStore params_;
};

/// Fully connected head on the flattened state.
class MlpHead final : public VariationalHead {
 public:
  explicit MlpHead(HeadConfig cfg);
  HeadOutput forward(ad::Tape& tape, ad::Var x, std::span<const double> t,
                     const std::optional<std::vector<double>>& y) const override;
};

/// EGNN-style point-cloud head: invariant messages from squared distances
/// and node features, coordinate updates along relative difference vectors,
/// centre of mass removed on input and restored on output.
class EquivariantHead final : public VariationalHead {
 public:
  explicit EquivariantHead(HeadConfig cfg);
  HeadOutput forward(ad::Tape& tape, ad::Var x, std::span<const double> t,
                     const std::optional<std::vector<double>>& y) const override;

 private:
  std::vector<std::size_t> edge_i_;  // ordered pairs i != j within one cloud
  std::vector<std::size_t> edge_j_;
};

std::unique_ptr<VariationalHead> make_head(const HeadConfig& cfg);

/// Single point cloud through a head: `points` is N x d, `types` holds one
/// category index per point (empty when the space has no types). Throws
/// DataError for N < 2.
MeanFieldPosterior equivariant_forward(const VariationalHead& head, const ad::Tensor& points,
                                       std::span<const std::size_t> types, double t,
                                       std::optional<double> y = std::nullopt);

std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& s);

}  // namespace vfm
