#pragma once

// Group actions on point-cloud states and invariant priors.
//
// Permutations act jointly on point coordinates and per-point type blocks:
// (P.x)_i = x_{perm[i]}. Rotations and translations act on the coordinate
// block only. For spaces without a point-cloud shape the whole continuous
// block is treated as a single point.

#include <span>
#include <variant>
#include <vector>

#include "vfm/ad/tensor.hpp"
#include "vfm/path.hpp"
#include "vfm/random.hpp"

namespace vfm {

struct Permutation {
  std::vector<std::size_t> perm;
};

struct Rotation {
  std::size_t dim = 0;
  std::vector<double> matrix;  // row-major dim x dim
};

struct Translation {
  std::vector<double> shift;
};

class GroupElement {
 public:
  using Factor = std::variant<Permutation, Rotation, Translation>;

  GroupElement() = default;  // identity

  static GroupElement permutation(std::vector<std::size_t> perm);
  static GroupElement rotation(std::size_t dim, std::vector<double> matrix);
  static GroupElement translation(std::vector<double> shift);

  /// this . inner: act(compose(g, h), x) == act(g, act(h, x)).
  GroupElement compose(const GroupElement& inner) const;
  GroupElement inverse() const;

  bool is_identity() const { return factors_.empty(); }
  /// Factors in application order (first applied first).
  const std::vector<Factor>& factors() const { return factors_; }

  /// Throws StructuralError if some factor cannot act on `space`.
  void check_compatible(const SpaceSpec& space) const;

 private:
  std::vector<Factor> factors_;
};

/// Affine action on a state vector.
std::vector<double> act(const GroupElement& g, std::span<const double> values, const SpaceSpec& space);
State act(const GroupElement& g, const State& x, const SpaceSpec& space);
/// Applies the action to every row of a batch.
ad::Tensor act_rows(const GroupElement& g, const ad::Tensor& batch, const SpaceSpec& space);

/// Linear part only, for tangent vectors such as velocities (translations
/// act trivially).
std::vector<double> act_linear(const GroupElement& g, std::span<const double> values, const SpaceSpec& space);
ad::Tensor act_linear_rows(const GroupElement& g, const ad::Tensor& batch, const SpaceSpec& space);

/// Haar-uniform rotation: QR of a Gaussian matrix with sign and determinant
/// fixes.
GroupElement random_rotation(std::size_t dim, Rng& rng);
GroupElement random_permutation(std::size_t n, Rng& rng);
GroupElement random_translation(std::size_t dim, double scale, Rng& rng);

enum class GroupFamily { identity, permutations, rotations, translations, rigid };

/// rigid = rotation composed with a permutation.
GroupElement sample_group_element(GroupFamily family, const SpaceSpec& space, Rng& rng);

// ---------------------------------------------------------------- priors

enum class ContinuousPrior { standard_gaussian, zero_com_gaussian };
enum class CategoricalPrior { simplex_center, uniform_vertex, uniform_simplex };

struct InvariantPrior {
  ContinuousPrior continuous = ContinuousPrior::standard_gaussian;
  CategoricalPrior categorical = CategoricalPrior::uniform_simplex;
};

State prior_sample(const InvariantPrior& prior, const SpaceSpec& space, Rng& rng);
std::vector<State> prior_sample(const InvariantPrior& prior, const SpaceSpec& space, Rng& rng, std::size_t n);

/// Per-sample centre of mass of the point block.
std::vector<double> center_of_mass(std::span<const double> values, const SpaceSpec& space);

}  // namespace vfm
