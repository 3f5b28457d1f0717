#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "vfm/audit.hpp"
#include "vfm/error.hpp"
#include "vfm/symmetry.hpp"

using namespace vfm;

namespace {

InvariantPrior cloud_prior() {
  InvariantPrior p;
  p.continuous = ContinuousPrior::zero_com_gaussian;
  return p;
}

std::vector<double> random_vector(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& e : v) e = standard_normal(rng);
  return v;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

const std::vector<GroupFamily> kFamilies{GroupFamily::permutations, GroupFamily::rotations,
                                         GroupFamily::translations, GroupFamily::rigid};

}  // namespace

TEST(GroupAction, IdentityIsExact) {
  const SpaceSpec s = point_cloud_space(3, 2, 2);
  Rng rng = make_stream(1, 0);
  const auto x = random_vector(s.total_dim(), rng);
  EXPECT_EQ(act(GroupElement(), x, s), x);
}

TEST(GroupAction, QuarterTurn) {
  const SpaceSpec s = point_cloud_space(2, 2, 1);
  const GroupElement g = GroupElement::rotation(2, {0.0, -1.0, 1.0, 0.0});
  const auto y = act(g, std::vector<double>{1.0, 0.0, 0.0, 2.0, 1.0, 1.0}, s);
  EXPECT_EQ(y, (std::vector<double>{0.0, 1.0, -2.0, 0.0, 1.0, 1.0}));
}

TEST(GroupAction, PermutationMovesPointsWithTypes) {
  const SpaceSpec s = point_cloud_space(3, 2, 2);
  const std::vector<double> x{1, 2, 3, 4, 5, 6, 1, 0, 0, 1, 1, 0};
  const auto y = act(GroupElement::permutation({2, 0, 1}), x, s);
  EXPECT_EQ(y, (std::vector<double>{5, 6, 1, 2, 3, 4, 1, 0, 1, 0, 0, 1}));
}

TEST(GroupAction, TranslationShiftsEveryPoint) {
  const SpaceSpec s = point_cloud_space(2, 2, 1);
  const auto y = act(GroupElement::translation({1.0, -1.0}), std::vector<double>{0, 0, 1, 1, 1, 1}, s);
  EXPECT_EQ(y, (std::vector<double>{1, -1, 2, 0, 1, 1}));
  const auto v = act_linear(GroupElement::translation({1.0, -1.0}), std::vector<double>{0, 0, 1, 1, 1, 1}, s);
  EXPECT_EQ(v, (std::vector<double>{0, 0, 1, 1, 1, 1}));
}

TEST(GroupAction, IncompatibleFactorsRejected) {
  const SpaceSpec s = point_cloud_space(3, 2, 2);
  EXPECT_THROW(act(GroupElement::permutation({0, 1}), std::vector<double>(12), s), StructuralError);
  EXPECT_THROW(act(GroupElement::rotation(3, std::vector<double>(9)), std::vector<double>(12), s), StructuralError);
  EXPECT_THROW(GroupElement::permutation({0, 0, 1}), StructuralError);
}

TEST(GroupAction, ComposeAndInverseAxioms) {
  const SpaceSpec s = point_cloud_space(4, 3, 2);
  Rng rng = make_stream(2, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const GroupElement g = sample_group_element(GroupFamily::rigid, s, rng)
                               .compose(random_translation(3, 2.0, rng));
    const GroupElement h = sample_group_element(GroupFamily::rigid, s, rng);
    const auto x = random_vector(s.total_dim(), rng);
    EXPECT_LE(max_abs_diff(act(g.compose(h), x, s), act(g, act(h, x, s), s)), 1e-12);
    EXPECT_LE(max_abs_diff(act(g.inverse(), act(g, x, s), s), x), 1e-12);
    EXPECT_LE(max_abs_diff(act(g, act(g.inverse(), x, s), s), x), 1e-12);
  }
}

TEST(GroupAction, RandomRotationsAreProper) {
  Rng rng = make_stream(3, 0);
  for (std::size_t d : {2u, 3u}) {
    for (int trial = 0; trial < 50; ++trial) {
      const GroupElement g = random_rotation(d, rng);
      const auto& r = std::get<Rotation>(g.factors().at(0));
      const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
          r.matrix.data(), d, d);
      EXPECT_LE((m * m.transpose() - Eigen::MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff(), 1e-12);
      EXPECT_NEAR(m.determinant(), 1.0, 1e-12);
    }
  }
}

TEST(GroupAction, RotationAnglesLookUniform) {
  // Haar measure on SO(2) has uniform angle.
  Rng rng = make_stream(4, 0);
  std::vector<int> bins(8, 0);
  const int n = 8000;
  for (int i = 0; i < n; ++i) {
    const GroupElement g = random_rotation(2, rng);
    const auto& r = std::get<Rotation>(g.factors().at(0));
    const double a = std::atan2(r.matrix[2], r.matrix[0]) + std::numbers::pi;
    ++bins[std::min<std::size_t>(7, static_cast<std::size_t>(a / (2 * std::numbers::pi) * 8))];
  }
  for (int b : bins) EXPECT_NEAR(b / static_cast<double>(n), 0.125, 0.02);
}

TEST(Prior, ZeroComHasZeroCentre) {
  const SpaceSpec s = point_cloud_space(6, 2, 2);
  Rng rng = make_stream(5, 0);
  for (const State& x : prior_sample(cloud_prior(), s, rng, 200)) {
    for (double c : center_of_mass(x.values, s)) EXPECT_LE(std::abs(c), 1e-12);
  }
}

TEST(Prior, StandardGaussianMoments) {
  SpaceSpec s;
  s.n_continuous = 3;
  s.categorical = {4};
  Rng rng = make_stream(6, 0);
  const auto xs = prior_sample(InvariantPrior{}, s, rng, 4000);
  std::vector<double> mean(7, 0.0);
  for (const State& x : xs) {
    double sum = 0.0;
    for (std::size_t i = 0; i < 7; ++i) mean[i] += x.values[i] / 4000.0;
    for (std::size_t i = 3; i < 7; ++i) {
      EXPECT_GE(x.values[i], 0.0);
      sum += x.values[i];
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(mean[i], 0.0, 0.05);
  for (std::size_t i = 3; i < 7; ++i) EXPECT_NEAR(mean[i], 0.25, 0.02);
}

TEST(Prior, CategoricalVariants) {
  SpaceSpec s;
  s.categorical = {3};
  Rng rng = make_stream(7, 0);
  InvariantPrior centre;
  centre.categorical = CategoricalPrior::simplex_center;
  EXPECT_EQ(prior_sample(centre, s, rng).values, (std::vector<double>(3, 1.0 / 3.0)));
  InvariantPrior vertex;
  vertex.categorical = CategoricalPrior::uniform_vertex;
  for (int i = 0; i < 20; ++i) {
    const auto v = prior_sample(vertex, s, rng).values;
    EXPECT_EQ(std::count(v.begin(), v.end(), 1.0), 1);
    EXPECT_EQ(std::count(v.begin(), v.end(), 0.0), 2);
  }
}

TEST(Prior, AnalyticCovariance) {
  const SpaceSpec s = point_cloud_space(3, 2, 1);
  const auto c = prior_covariance(cloud_prior(), s);
  ASSERT_EQ(c.size(), 36u);
  // Point 0 x with itself, with point 1 x, with point 0 y.
  EXPECT_NEAR(c[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(c[2], -1.0 / 3.0, 1e-15);
  EXPECT_EQ(c[1], 0.0);
  const auto id = prior_covariance(InvariantPrior{}, s);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(id[i * 6 + j], i == j ? 1.0 : 0.0);
  }
}

TEST(Prior, InvarianceAudit) {
  const SpaceSpec s = point_cloud_space(3, 2, 2);
  for (GroupFamily f : kFamilies) {
    const PriorAudit a = audit_prior_invariance(cloud_prior(), s, f, 20000, 8);
    EXPECT_LE(a.covariance_residual, 1e-12) << to_string(f);
    EXPECT_LE(a.moment_deviation, a.moment_tolerance) << to_string(f);
    EXPECT_LE(a.categorical_deviation, a.categorical_tolerance) << to_string(f);
    EXPECT_LE(a.max_com, 1e-12) << to_string(f);
  }
}

TEST(Prior, NonInvariantPriorIsCaught) {
  // Without point-cloud structure nothing re-centres the samples, so a
  // translation by s moves the second moment by s s^T.
  SpaceSpec s;
  s.n_continuous = 2;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng rng = make_stream(seed, 0);
    const std::vector<double> shift = std::get<Translation>(sample_group_element(GroupFamily::translations, s, rng).factors().at(0)).shift;
    const double expect = std::max({shift[0] * shift[0], shift[1] * shift[1], std::abs(shift[0] * shift[1])});
    const PriorAudit a = audit_prior_invariance(InvariantPrior{}, s, GroupFamily::translations, 20000, seed);
    EXPECT_NEAR(a.moment_deviation, expect, a.moment_tolerance);
  }
}

TEST(BiEquivariance, OtVelocityIsExact) {
  const SpaceSpec s = point_cloud_space(5, 2, 3);
  for (GroupFamily f : kFamilies) {
    EXPECT_LE(audit_bi_equivariance(ot_velocity({}), s, f, 200, 10, cloud_prior()), 1e-12) << to_string(f);
  }
}

TEST(BiEquivariance, BiasedVelocityFails) {
  const SpaceSpec s = point_cloud_space(5, 2, 3);
  std::vector<double> bias(s.total_dim(), 0.0);
  bias[0] = 0.5;
  bias[1] = -0.3;
  EXPECT_GT(audit_bi_equivariance(biased_velocity({}, bias), s, GroupFamily::rotations, 50, 11, cloud_prior()), 0.1);
  EXPECT_LE(audit_bi_equivariance(biased_velocity({}, bias), s, GroupFamily::identity, 50, 11, cloud_prior()), 1e-12);
}

TEST(MarginalAudit, EquivariantHeadVersusMlp) {
  HeadConfig c;
  c.architecture = Architecture::equivariant;
  c.space = point_cloud_space(4, 2, 2);
  c.hidden = {16};
  c.rounds = 2;
  c.zero_init_output = false;
  const auto egnn = make_head(c);
  c.architecture = Architecture::mlp;
  const auto mlp = make_head(c);
  IntegratorConfig ic;
  ic.steps = 20;
  const MarginalAudit a = audit_marginal_invariance(*egnn, cloud_prior(), ic, GroupFamily::rigid, 4, 12);
  EXPECT_LE(a.trajectory_residual, 1e-8);
  const MarginalAudit b = audit_marginal_invariance(*mlp, cloud_prior(), ic, GroupFamily::rotations, 4, 12);
  EXPECT_GT(b.trajectory_residual, 0.1);
  ic.steps = 1;
  EXPECT_LE(audit_marginal_invariance(*egnn, cloud_prior(), ic, GroupFamily::rigid, 4, 12).trajectory_residual, 1e-8);
}

TEST(MarginalAudit, HistogramWithinTolerance) {
  HeadConfig c;
  c.architecture = Architecture::equivariant;
  c.space = point_cloud_space(4, 2, 2);
  c.hidden = {8};
  c.rounds = 1;
  c.zero_init_output = false;
  const auto head = make_head(c);
  IntegratorConfig ic;
  ic.steps = 10;
  const MarginalAudit a = audit_marginal_invariance(*head, cloud_prior(), ic, GroupFamily::rigid, 2, 13, 256);
  EXPECT_GT(a.histogram_tolerance, 0.0);
  EXPECT_LE(a.histogram_deviation, a.histogram_tolerance);
}

TEST(PairwiseDistances, UnitSquare) {
  const SpaceSpec s = point_cloud_space(4, 2, 1);
  const auto d = pairwise_distances(std::vector<double>{0, 0, 1, 0, 1, 1, 0, 1, 1, 1, 1, 1}, s);
  ASSERT_EQ(d.size(), 6u);
  int diag = 0;
  for (double v : d) diag += std::abs(v - std::sqrt(2.0)) < 1e-15;
  EXPECT_EQ(diag, 2);
}

TEST(GroupFamily, Names) {
  for (GroupFamily f : kFamilies) EXPECT_EQ(group_family_from_string(to_string(f)), f);
  EXPECT_THROW(group_family_from_string("reflections"), ConfigError);
}
