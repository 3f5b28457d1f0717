#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "vfm/ad/grad_check.hpp"
#include "vfm/error.hpp"
#include "vfm/guidance.hpp"
#include "vfm/symmetry.hpp"

using namespace vfm;

namespace {

SpaceSpec hexagon_space() { return point_cloud_space(6, 2, 2); }

std::vector<double> hexagon(double r, double phase) {
  std::vector<double> x(6 * 2 + 6 * 2, 0.0);
  for (std::size_t i = 0; i < 6; ++i) {
    const double a = phase + 2.0 * std::numbers::pi * static_cast<double>(i) / 6.0;
    x[2 * i] = r * std::cos(a);
    x[2 * i + 1] = r * std::sin(a);
    x[12 + 2 * i + i % 2] = 1.0;
  }
  return x;
}

std::vector<double> random_cloud(const SpaceSpec& space, Rng& rng) {
  InvariantPrior p;
  p.continuous = ContinuousPrior::zero_com_gaussian;
  p.categorical = CategoricalPrior::uniform_vertex;
  return prior_sample(p, space, rng).values;
}

std::vector<PropertySpec> shipped_properties() {
  PropertySpec cr{PropertyKind::circumradius};
  PropertySpec mpd{PropertyKind::mean_pairwise_distance};
  PropertySpec ci{PropertyKind::component_index};
  ci.temperature = 0.5;
  for (std::size_t k = 0; k < 6; ++k) {
    ci.centers.push_back(std::cos(k * 1.0));
    ci.centers.push_back(std::sin(k * 1.0));
  }
  PropertySpec cs{PropertyKind::coordinate_sum};
  cs.scale = 0.5;
  return {cr, mpd, ci, cs};
}

SpaceSpec space_for(const PropertySpec& p) {
  if (p.kind == PropertyKind::component_index) {
    SpaceSpec s;
    s.n_continuous = 2;
    return s;
  }
  return hexagon_space();
}

}  // namespace

TEST(Property, HexagonValues) {
  const SpaceSpec s = hexagon_space();
  const auto x = hexagon(1.5, 0.3);
  EXPECT_NEAR(PropertyFunction({PropertyKind::circumradius}, s).value(x), 1.5, 1e-12);
  // Pair distances of a regular hexagon: 6 x r, 6 x sqrt(3) r, 3 x 2r.
  const double mpd = (6.0 + 6.0 * std::sqrt(3.0) + 6.0) * 1.5 / 15.0;
  EXPECT_NEAR(PropertyFunction({PropertyKind::mean_pairwise_distance}, s).value(x), mpd, 1e-12);
  PropertySpec cs{PropertyKind::coordinate_sum};
  cs.scale = 2.0;
  EXPECT_NEAR(PropertyFunction(cs, s).value(x), 0.0, 1e-12);
}

TEST(Property, CategoricalBlocksDoNotMatter) {
  const SpaceSpec s = hexagon_space();
  auto x = hexagon(1.0, 0.0);
  const PropertyFunction f({PropertyKind::circumradius}, s);
  const double before = f.value(x);
  std::swap(x[12], x[13]);
  EXPECT_EQ(f.value(x), before);
  const auto g = f.gradient(x);
  for (std::size_t i = 12; i < g.size(); ++i) EXPECT_EQ(g[i], 0.0);
}

TEST(Property, ComponentIndexApproachesHardLabel) {
  SpaceSpec s;
  s.n_continuous = 2;
  PropertySpec p{PropertyKind::component_index};
  p.centers = {0.0, 0.0, 4.0, 0.0, 0.0, 4.0};
  const PropertyFunction f(p, s);
  EXPECT_NEAR(f.value(std::vector<double>{4.1, 0.1}), 1.0, 1e-9);
  EXPECT_NEAR(f.value(std::vector<double>{0.1, 3.8}), 2.0, 1e-9);
  EXPECT_NEAR(f.value(std::vector<double>{2.0, 0.0}), 0.5, 1e-9);
}

TEST(Property, Validation) {
  SpaceSpec s;
  s.n_continuous = 2;
  EXPECT_THROW(PropertyFunction({PropertyKind::component_index}, s), ConfigError);
  PropertySpec bad{PropertyKind::component_index};
  bad.centers = {1.0, 2.0, 3.0};
  EXPECT_THROW(PropertyFunction(bad, s), ConfigError);
  EXPECT_THROW(PropertyFunction({PropertyKind::circumradius}, SpaceSpec{.categorical = {2}}), ConfigError);
  EXPECT_THROW(property_kind_from_string("energy"), ConfigError);
}

TEST(Property, BatchMatchesSingle) {
  const SpaceSpec s = hexagon_space();
  Rng rng = make_stream(1, 0);
  ad::Tensor b(4, s.total_dim());
  for (std::size_t r = 0; r < 4; ++r) {
    const auto x = random_cloud(s, rng);
    std::copy(x.begin(), x.end(), b.row(r).begin());
  }
  for (const auto& p : shipped_properties()) {
    if (p.kind == PropertyKind::component_index) continue;
    const PropertyFunction f(p, s);
    const auto v = f.values(b);
    for (std::size_t r = 0; r < 4; ++r) EXPECT_NEAR(v[r], f.value(b.row(r)), 1e-14);
  }
}

TEST(Likelihood, LogLikelihoodExamples) {
  SpaceSpec s;
  s.n_continuous = 1;
  PropertySpec p{PropertyKind::coordinate_sum};
  const PropertyLikelihood exact(PropertyFunction(p, s), 0.5, 2.0);
  EXPECT_NEAR(exact.log_likelihood(std::vector<double>{2.0}), -0.5 * std::log(2.0 * std::numbers::pi * 0.25), 1e-15);
  const PropertyLikelihood unit(PropertyFunction(p, s), 1.0, 1.0);
  EXPECT_NEAR(unit.log_likelihood(std::vector<double>{0.0}), -0.5 - 0.5 * std::log(2.0 * std::numbers::pi), 1e-15);
  EXPECT_THROW(PropertyLikelihood(PropertyFunction(p, s), 0.0, 1.0), ConfigError);
}

TEST(Likelihood, WideningNoiseMatchesDirectFormula) {
  SpaceSpec s;
  s.n_continuous = 1;
  PropertySpec p{PropertyKind::coordinate_sum};
  auto direct = [](double r, double sy) { return -r * r / (2 * sy * sy) - 0.5 * std::log(2 * std::numbers::pi * sy * sy); };
  for (double r : {0.1, 0.5, 1.0, 2.0, 5.0}) {
    for (double sy : {0.2, 1.0, 3.0}) {
      const PropertyLikelihood a(PropertyFunction(p, s), sy, r);
      const PropertyLikelihood b(PropertyFunction(p, s), 2.0 * sy, r);
      const double la = a.log_likelihood(std::vector<double>{0.0});
      const double lb = b.log_likelihood(std::vector<double>{0.0});
      EXPECT_NEAR(la, direct(r, sy), 1e-12);
      EXPECT_EQ(lb > la, direct(r, 2 * sy) > direct(r, sy));
    }
  }
}

TEST(Likelihood, LinearGradient) {
  SpaceSpec s;
  s.n_continuous = 3;
  PropertySpec p{PropertyKind::coordinate_sum};
  p.scale = 2.0;
  const PropertyLikelihood lik(PropertyFunction(p, s), 0.5, 1.0);
  const std::vector<double> x{0.1, 0.2, -0.6};
  const double f = 2.0 * (0.1 + 0.2 - 0.6);
  const auto g = lik.grad_log_likelihood(x);
  for (double gi : g) EXPECT_NEAR(gi, 2.0 * (1.0 - f) / 0.25, 1e-12);
  const PropertyLikelihood at_target(PropertyFunction(p, s), 0.5, f);
  for (double gi : at_target.grad_log_likelihood(x)) EXPECT_NEAR(gi, 0.0, 1e-14);
}

TEST(Likelihood, GradientsMatchFiniteDifferences) {
  Rng rng = make_stream(2, 0);
  for (const auto& p : shipped_properties()) {
    const SpaceSpec s = space_for(p);
    const PropertyLikelihood lik(PropertyFunction(p, s), 0.4, 1.3);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> x = s.points ? random_cloud(s, rng) : std::vector<double>{2 * standard_normal(rng), 2 * standard_normal(rng)};
      const double err = ad::grad_check([&](const std::vector<double>& v) { return lik.log_likelihood(v); },
                                        [&](const std::vector<double>& v) { return lik.grad_log_likelihood(v); }, x, 1e-6);
      EXPECT_LE(err, 1e-4) << to_string(p.kind);
    }
  }
}

TEST(Likelihood, HexagonCircumradiusGradient) {
  const SpaceSpec s = hexagon_space();
  const PropertyLikelihood lik(PropertyFunction({PropertyKind::circumradius}, s), 0.3, 2.0);
  const auto x = hexagon(1.2, 0.7);
  const double err = ad::grad_check([&](const std::vector<double>& v) { return lik.log_likelihood(v); },
                                    [&](const std::vector<double>& v) { return lik.grad_log_likelihood(v); }, x, 1e-6);
  EXPECT_LE(err, 1e-4);
  // Radial push outwards: each point's gradient is parallel to its position.
  const auto g = lik.grad_log_likelihood(x);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(g[2 * i] * x[2 * i + 1] - g[2 * i + 1] * x[2 * i], 0.0, 1e-12);
    EXPECT_GT(g[2 * i] * x[2 * i] + g[2 * i + 1] * x[2 * i + 1], 0.0);
  }
}

TEST(Likelihood, InvariantPropertiesGiveEquivariantGradients) {
  const SpaceSpec s = hexagon_space();
  Rng rng = make_stream(3, 0);
  for (const auto& p : shipped_properties()) {
    if (p.kind == PropertyKind::component_index || p.kind == PropertyKind::coordinate_sum) continue;
    const PropertyFunction f(p, s);
    ASSERT_TRUE(f.is_group_invariant());
    const PropertyLikelihood lik(f, 0.5, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
      const auto x = random_cloud(s, rng);
      const GroupElement g = sample_group_element(GroupFamily::rigid, s, rng);
      const auto lhs = lik.grad_log_likelihood(act(g, x, s));
      const auto rhs = act_linear(g, lik.grad_log_likelihood(x), s);
      for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-9) << to_string(p.kind);
    }
  }
  EXPECT_FALSE(PropertyFunction({PropertyKind::coordinate_sum}, s).is_group_invariant());
}

TEST(Likelihood, BatchGradients) {
  const SpaceSpec s = hexagon_space();
  const PropertyLikelihood lik(PropertyFunction({PropertyKind::mean_pairwise_distance}, s), 0.5, 1.0);
  Rng rng = make_stream(4, 0);
  ad::Tensor b(3, s.total_dim());
  for (std::size_t r = 0; r < 3; ++r) {
    const auto x = random_cloud(s, rng);
    std::copy(x.begin(), x.end(), b.row(r).begin());
  }
  const ad::Tensor g = lik.grad_log_likelihood_batch(b);
  for (std::size_t r = 0; r < 3; ++r) {
    const auto single = lik.grad_log_likelihood(b.row(r));
    for (std::size_t i = 0; i < single.size(); ++i) EXPECT_NEAR(g(r, i), single[i], 1e-14);
  }
}

TEST(Likelihood, NonFiniteGradientIsReported) {
  // Coincident points make the pair-distance gradient undefined.
  const SpaceSpec s = hexagon_space();
  const PropertyLikelihood lik(PropertyFunction({PropertyKind::mean_pairwise_distance}, s), 0.5, 1.0);
  std::vector<double> x(s.total_dim(), 0.0);
  try {
    lik.grad_log_likelihood(x);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate"), std::string::npos);
  }
}
