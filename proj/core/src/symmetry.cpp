#include "vfm/symmetry.hpp"

#include <Eigen/Dense>
#include <fmt/format.h>

#include <algorithm>
#include <numeric>

#include "vfm/error.hpp"

namespace vfm {

namespace {

struct PointLayout {
  std::size_t n_points;
  std::size_t dim;
};

PointLayout layout_of(const SpaceSpec& space) {
  if (space.points) return {space.points->n_points, space.points->spatial_dim};
  return {1, space.n_continuous};
}

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

void apply_factor(const GroupElement::Factor& f, std::vector<double>& v, const SpaceSpec& space, bool linear) {
  const auto [n, d] = layout_of(space);
  std::visit(overloaded{
                 [&](const Permutation& p) {
                   const std::vector<double> src = v;
                   for (std::size_t i = 0; i < n; ++i) {
                     const std::size_t j = p.perm[i];
                     std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(j * d), d,
                                 v.begin() + static_cast<std::ptrdiff_t>(i * d));
                   }
                   if (!space.categorical.empty()) {
                     for (std::size_t i = 0; i < n; ++i) {
                       const std::size_t k = space.categorical[i];
                       const std::size_t dst = space.block_offset(i);
                       const std::size_t from = space.block_offset(p.perm[i]);
                       std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(from), k,
                                   v.begin() + static_cast<std::ptrdiff_t>(dst));
                     }
                   }
                 },
                 [&](const Rotation& r) {
                   std::vector<double> tmp(d);
                   for (std::size_t i = 0; i < n; ++i) {
                     double* pt = v.data() + i * d;
                     for (std::size_t a = 0; a < d; ++a) {
                       double s = 0.0;
                       for (std::size_t b = 0; b < d; ++b) s += r.matrix[a * d + b] * pt[b];
                       tmp[a] = s;
                     }
                     std::copy(tmp.begin(), tmp.end(), pt);
                   }
                 },
                 [&](const Translation& t) {
                   if (linear) return;
                   for (std::size_t i = 0; i < n; ++i) {
                     for (std::size_t a = 0; a < d; ++a) v[i * d + a] += t.shift[a];
                   }
                 },
             },
             f);
}

std::vector<double> apply(const GroupElement& g, std::span<const double> values, const SpaceSpec& space,
                          bool linear) {
  if (values.size() != space.total_dim()) {
    throw StructuralError(fmt::format("act: state has {} values, space has {}", values.size(), space.total_dim()));
  }
  g.check_compatible(space);
  std::vector<double> v(values.begin(), values.end());
  for (const auto& f : g.factors()) apply_factor(f, v, space, linear);
  return v;
}

ad::Tensor apply_rows(const GroupElement& g, const ad::Tensor& batch, const SpaceSpec& space, bool linear) {
  ad::Tensor out(batch.rows, batch.cols);
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const auto row = apply(g, batch.row(r), space, linear);
    std::copy(row.begin(), row.end(), out.row(r).begin());
  }
  return out;
}

}  // namespace

GroupElement GroupElement::permutation(std::vector<std::size_t> perm) {
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || seen[p]) throw StructuralError("permutation is not a bijection");
    seen[p] = true;
  }
  GroupElement g;
  g.factors_.emplace_back(Permutation{std::move(perm)});
  return g;
}

GroupElement GroupElement::rotation(std::size_t dim, std::vector<double> matrix) {
  if (matrix.size() != dim * dim) throw StructuralError("rotation matrix has wrong size");
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      matrix.data(), static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
  const double orth = (m.transpose() * m - Eigen::MatrixXd::Identity(m.rows(), m.cols())).cwiseAbs().maxCoeff();
  const double det = m.determinant();
  if (orth > 1e-12 || std::abs(det - 1.0) > 1e-12) {
    throw StructuralError(fmt::format("not a proper rotation (|R^T R - I| = {:.3g}, det = {:.15g})", orth, det));
  }
  GroupElement g;
  g.factors_.emplace_back(Rotation{dim, std::move(matrix)});
  return g;
}

GroupElement GroupElement::translation(std::vector<double> shift) {
  GroupElement g;
  g.factors_.emplace_back(Translation{std::move(shift)});
  return g;
}

GroupElement GroupElement::compose(const GroupElement& inner) const {
  GroupElement g;
  g.factors_ = inner.factors_;
  g.factors_.insert(g.factors_.end(), factors_.begin(), factors_.end());
  return g;
}

GroupElement GroupElement::inverse() const {
  GroupElement g;
  for (auto it = factors_.rbegin(); it != factors_.rend(); ++it) {
    std::visit(overloaded{
                   [&](const Permutation& p) {
                     std::vector<std::size_t> inv(p.perm.size());
                     for (std::size_t i = 0; i < p.perm.size(); ++i) inv[p.perm[i]] = i;
                     g.factors_.emplace_back(Permutation{std::move(inv)});
                   },
                   [&](const Rotation& r) {
                     std::vector<double> t(r.matrix.size());
                     for (std::size_t a = 0; a < r.dim; ++a) {
                       for (std::size_t b = 0; b < r.dim; ++b) t[b * r.dim + a] = r.matrix[a * r.dim + b];
                     }
                     g.factors_.emplace_back(Rotation{r.dim, std::move(t)});
                   },
                   [&](const Translation& tr) {
                     std::vector<double> s(tr.shift.size());
                     std::transform(tr.shift.begin(), tr.shift.end(), s.begin(), [](double x) { return -x; });
                     g.factors_.emplace_back(Translation{std::move(s)});
                   },
               },
               *it);
  }
  return g;
}

void GroupElement::check_compatible(const SpaceSpec& space) const {
  const auto [n, d] = layout_of(space);
  for (const auto& f : factors_) {
    std::visit(overloaded{
                   [&](const Permutation& p) {
                     if (!space.points && p.perm.size() != 1) {
                       throw StructuralError("permutations need a point-cloud space");
                     }
                     if (p.perm.size() != n) {
                       throw StructuralError(fmt::format("permutation of {} acting on {} points", p.perm.size(), n));
                     }
                   },
                   [&](const Rotation& r) {
                     if (r.dim != d) throw StructuralError(fmt::format("rotation of R^{} acting on R^{}", r.dim, d));
                   },
                   [&](const Translation& t) {
                     if (t.shift.size() != d) {
                       throw StructuralError(fmt::format("translation in R^{} acting on R^{}", t.shift.size(), d));
                     }
                   },
               },
               f);
  }
}

std::vector<double> act(const GroupElement& g, std::span<const double> values, const SpaceSpec& space) {
  return apply(g, values, space, false);
}

State act(const GroupElement& g, const State& x, const SpaceSpec& space) {
  return State{act(g, x.values, space), x.time};
}

ad::Tensor act_rows(const GroupElement& g, const ad::Tensor& batch, const SpaceSpec& space) {
  return apply_rows(g, batch, space, false);
}

std::vector<double> act_linear(const GroupElement& g, std::span<const double> values, const SpaceSpec& space) {
  return apply(g, values, space, true);
}

ad::Tensor act_linear_rows(const GroupElement& g, const ad::Tensor& batch, const SpaceSpec& space) {
  return apply_rows(g, batch, space, true);
}

GroupElement random_rotation(std::size_t dim, Rng& rng) {
  Eigen::MatrixXd a(dim, dim);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = standard_normal(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  if (q.determinant() < 0.0) q.col(0) *= -1.0;
  std::vector<double> m(dim * dim);
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      m[i * dim + j] = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  }
  return GroupElement::rotation(dim, std::move(m));
}

GroupElement random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::shuffle(p.begin(), p.end(), rng);
  return GroupElement::permutation(std::move(p));
}

GroupElement random_translation(std::size_t dim, double scale, Rng& rng) {
  std::vector<double> s(dim);
  for (double& x : s) x = scale * standard_normal(rng);
  return GroupElement::translation(std::move(s));
}

GroupElement sample_group_element(GroupFamily family, const SpaceSpec& space, Rng& rng) {
  const auto [n, d] = layout_of(space);
  switch (family) {
    case GroupFamily::identity: return {};
    case GroupFamily::permutations: return random_permutation(n, rng);
    case GroupFamily::rotations: return random_rotation(d, rng);
    case GroupFamily::translations: return random_translation(d, 1.0, rng);
    case GroupFamily::rigid: {
      auto rot = random_rotation(d, rng);
      return rot.compose(random_permutation(n, rng));
    }
  }
  throw ConfigError("unknown group family");
}

std::vector<double> center_of_mass(std::span<const double> values, const SpaceSpec& space) {
  const auto [n, d] = layout_of(space);
  std::vector<double> com(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < d; ++a) com[a] += values[i * d + a];
  }
  for (double& c : com) c /= static_cast<double>(n);
  return com;
}

State prior_sample(const InvariantPrior& prior, const SpaceSpec& space, Rng& rng) {
  State s;
  s.time = 0.0;
  s.values.resize(space.total_dim());
  for (std::size_t i = 0; i < space.n_continuous; ++i) s.values[i] = standard_normal(rng);
  if (prior.continuous == ContinuousPrior::zero_com_gaussian) {
    if (!space.points) throw ConfigError("zero-CoM prior needs a point-cloud space");
    const auto com = center_of_mass(s.values, space);
    const std::size_t d = space.points->spatial_dim;
    for (std::size_t i = 0; i < space.points->n_points; ++i) {
      for (std::size_t a = 0; a < d; ++a) s.values[i * d + a] -= com[a];
    }
  }
  for (std::size_t b = 0; b < space.categorical.size(); ++b) {
    const std::size_t k = space.categorical[b];
    double* block = s.values.data() + space.block_offset(b);
    switch (prior.categorical) {
      case CategoricalPrior::simplex_center:
        std::fill_n(block, k, 1.0 / static_cast<double>(k));
        break;
      case CategoricalPrior::uniform_vertex: {
        std::uniform_int_distribution<std::size_t> pick(0, k - 1);
        std::fill_n(block, k, 0.0);
        block[pick(rng)] = 1.0;
        break;
      }
      case CategoricalPrior::uniform_simplex: {
        std::exponential_distribution<double> expo(1.0);
        double total = 0.0;
        for (std::size_t c = 0; c < k; ++c) total += (block[c] = expo(rng));
        for (std::size_t c = 0; c < k; ++c) block[c] /= total;
        break;
      }
    }
  }
  return s;
}

std::vector<State> prior_sample(const InvariantPrior& prior, const SpaceSpec& space, Rng& rng, std::size_t n) {
  std::vector<State> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(prior_sample(prior, space, rng));
  return out;
}

}  // namespace vfm
