#include <gtest/gtest.h>

#include <cmath>

#include "vfm/error.hpp"
#include "vfm/metrics.hpp"
#include "vfm/symmetry.hpp"
#include "vfm/training.hpp"

using namespace vfm;
using ad::Tensor;

namespace {

Tensor gaussian_cloud(std::size_t n, std::size_t d, double shift, Rng& rng) {
  Tensor t(n, d);
  for (double& v : t.data) v = standard_normal(rng) + shift;
  return t;
}

}  // namespace

TEST(Wasserstein1d, KnownValues) {
  EXPECT_DOUBLE_EQ(wasserstein2_1d({0.0, 1.0}, {0.0, 1.0}), 0.0);
  EXPECT_DOUBLE_EQ(wasserstein2_1d({0.0, 1.0}, {3.0, 2.0}), 2.0);
  // One point against two: quantile pieces of mass 1/2 at distance 1 and 3.
  EXPECT_NEAR(wasserstein2_1d({1.0}, {0.0, 4.0}), std::sqrt(0.5 * 1.0 + 0.5 * 9.0), 1e-15);
}

TEST(SlicedW2, IdenticalSetsGiveZero) {
  Rng rng = make_stream(1, 0);
  const Tensor a = gaussian_cloud(100, 3, 0.0, rng);
  EXPECT_EQ(sliced_w2(a, a, 16, rng), 0.0);
}

TEST(SlicedW2, DiracsGiveProjectedDistance) {
  // Along a single direction the distance is the projection of the offset.
  const Tensor a(1, 2, {0.0, 0.0});
  const Tensor b(1, 2, {3.0, 4.0});
  EXPECT_NEAR(sliced_w2(a, b, Tensor(1, 2, {0.6, 0.8})), 5.0, 1e-15);
  EXPECT_NEAR(sliced_w2(a, b, Tensor(2, 2, {1.0, 0.0, 0.0, 1.0})), 3.5, 1e-15);
}

TEST(SlicedW2, SelfDistanceFloor) {
  Rng rng = make_stream(2, 0);
  const Tensor a = gaussian_cloud(4000, 2, 0.0, rng);
  const Tensor b = gaussian_cloud(4000, 2, 0.0, rng);
  EXPECT_LE(sliced_w2(a, b, 64, rng), 0.08);
  const Tensor c = gaussian_cloud(4000, 2, 1.0, rng);
  EXPECT_GT(sliced_w2(a, c, 64, rng), 0.5);
}

TEST(SlicedW2, SymmetricAndRotationInvariant) {
  Rng rng = make_stream(3, 0);
  const Tensor a = gaussian_cloud(200, 2, 0.0, rng);
  const Tensor b = gaussian_cloud(300, 2, 0.5, rng);
  const Tensor dirs = random_directions(2, 32, rng);
  EXPECT_NEAR(sliced_w2(a, b, dirs), sliced_w2(b, a, dirs), 1e-12);
  const SpaceSpec s{.n_continuous = 2};
  const GroupElement g = random_rotation(2, rng);
  const Tensor ra = act_rows(g, a, s), rb = act_rows(g, b, s), rd = act_rows(g, dirs, s);
  EXPECT_NEAR(sliced_w2(ra, rb, rd), sliced_w2(a, b, dirs), 1e-12);
}

TEST(SlicedW2, Validation) {
  Rng rng = make_stream(4, 0);
  EXPECT_THROW(sliced_w2(Tensor(2, 2), Tensor(2, 3), 4, rng), StructuralError);
  EXPECT_THROW(sliced_w2(Tensor(0, 2), Tensor(2, 2), 4, rng), DataError);
  EXPECT_THROW(sliced_w2(Tensor(2, 2), Tensor(2, 2), 0, rng), ConfigError);
}

TEST(RandomDirections, UnitNorm) {
  Rng rng = make_stream(5, 0);
  const Tensor d = random_directions(5, 20, rng);
  for (std::size_t r = 0; r < 20; ++r) {
    double n = 0.0;
    for (double v : d.row(r)) n += v * v;
    EXPECT_NEAR(n, 1.0, 1e-12);
  }
}

TEST(MarginalTv, ConstantSamplerAgainstUniform) {
  const std::vector<std::vector<std::size_t>> cats(50, std::vector<std::size_t>{0, 2});
  const std::vector<std::vector<double>> target(2, std::vector<double>(4, 0.25));
  const MarginalTv tv = marginal_tv(cats, target);
  EXPECT_NEAR(tv.max, 0.75, 1e-15);
  EXPECT_EQ(tv.per_dim.size(), 2u);
}

TEST(MarginalTv, ExactSamplerIsClose) {
  DatasetSpec spec;
  spec.kind = DatasetKind::categorical_factorized;
  const ToyDataset ds(spec);
  Rng rng = make_stream(6, 0);
  Tensor x(10000, ds.space().total_dim());
  for (std::size_t r = 0; r < x.rows; ++r) {
    const State s = ds.sample_target(rng);
    std::copy(s.values.begin(), s.values.end(), x.row(r).begin());
  }
  EXPECT_LE(marginal_tv(x, ds.space(), ds.marginals()).max, 0.03);
}

TEST(MarginalTv, Validation) {
  EXPECT_THROW(marginal_tv(std::vector<std::vector<std::size_t>>{{0}}, {{0.5, 0.5}, {1.0}}), StructuralError);
  EXPECT_THROW(marginal_tv(std::vector<std::vector<std::size_t>>{{3}}, {{0.5, 0.5}}), StructuralError);
}

TEST(PropertyMae, TwoPoints) {
  const SpaceSpec s{.n_continuous = 1};
  PropertySpec p{PropertyKind::coordinate_sum};
  EXPECT_DOUBLE_EQ(property_mae(Tensor(2, 1, {0.0, 2.0}), PropertyFunction(p, s), 1.0), 1.0);
}

TEST(Validity, Fraction) {
  const Tensor x(4, 1, {1.0, -1.0, 2.0, -3.0});
  EXPECT_DOUBLE_EQ(validity_rate(x, [](std::span<const double> r) { return r[0] > 0; }), 0.5);
}

TEST(Duplicates, Fraction) {
  EXPECT_DOUBLE_EQ(duplicate_fraction({{0, 1}, {1, 0}, {0, 1}, {0, 1}}), 0.5);
  EXPECT_DOUBLE_EQ(duplicate_fraction({}), 0.0);
}

TEST(MetricsReport, Csv) {
  const std::string csv = metrics_report_csv({{"sliced_w2", 0.125, 10, 20, 3, "abcd"}});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "metric,value,n_a,n_b,seed,config_hash");
  EXPECT_NE(csv.find("sliced_w2,0.125,10,20,3,abcd"), std::string::npos);
}
