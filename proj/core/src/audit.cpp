#include "vfm/audit.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "vfm/error.hpp"

namespace vfm {

using ad::Tensor;

namespace {

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

VelocityFn ot_velocity(const ConditionalVelocitySpec& spec) {
  return [spec](std::span<const double> x, std::span<const double> x1, double t) {
    return conditional_velocity(spec, x, x1, t);
  };
}

VelocityFn biased_velocity(const ConditionalVelocitySpec& spec, std::vector<double> bias) {
  return [spec, bias = std::move(bias)](std::span<const double> x, std::span<const double> x1, double t) {
    if (bias.size() != x1.size()) throw StructuralError("bias has the wrong dimension");
    std::vector<double> shifted(x1.begin(), x1.end());
    for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += bias[i];
    return conditional_velocity(spec, x, shifted, t);
  };
}

double audit_bi_equivariance(const VelocityFn& u, const SpaceSpec& space, GroupFamily family, std::size_t trials,
                             std::uint64_t seed, const InvariantPrior& prior) {
  if (trials == 0) throw ConfigError("audit needs at least one trial");
  double worst = 0.0;
  for (std::size_t i = 0; i < trials; ++i) {
    Rng rng = make_stream(seed, i);
    const GroupElement g = sample_group_element(family, space, rng);
    const State x = prior_sample(prior, space, rng);
    const State x1 = prior_sample(prior, space, rng);
    const double t = uniform(rng, 0.0, 0.99);
    const auto lhs = u(act(g, x.values, space), act(g, x1.values, space), t);
    const auto rhs = act_linear(g, u(x.values, x1.values, t), space);
    worst = std::max(worst, max_abs_diff(lhs, rhs));
  }
  return worst;
}

std::vector<double> prior_covariance(const InvariantPrior& prior, const SpaceSpec& space) {
  const std::size_t dc = space.n_continuous;
  std::vector<double> cov(dc * dc, 0.0);
  for (std::size_t i = 0; i < dc; ++i) cov[i * dc + i] = 1.0;
  if (prior.continuous == ContinuousPrior::zero_com_gaussian && space.points) {
    const std::size_t n = space.points->n_points;
    const std::size_t dim = space.points->spatial_dim;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t a = 0; a < dim; ++a) cov[(i * dim + a) * dc + j * dim + a] -= 1.0 / static_cast<double>(n);
      }
    }
  }
  return cov;
}

PriorAudit audit_prior_invariance(const InvariantPrior& prior, const SpaceSpec& space, GroupFamily family,
                                  std::size_t samples, std::uint64_t seed) {
  if (samples == 0) throw ConfigError("prior audit needs samples");
  const std::size_t dc = space.n_continuous;
  const std::size_t d = space.total_dim();
  const bool centre = prior.continuous == ContinuousPrior::zero_com_gaussian && space.points.has_value();
  Rng rng = make_stream(seed, 0);
  const GroupElement g = sample_group_element(family, space, rng);
  const std::vector<double> cov = prior_covariance(prior, space);
  PriorAudit out;

  // Linear part of g as a dc x dc matrix, column k = g e_k.
  std::vector<double> gm(dc * dc, 0.0);
  for (std::size_t k = 0; k < dc; ++k) {
    std::vector<double> e(d, 0.0);
    e[k] = 1.0;
    const auto col = act_linear(g, e, space);
    for (std::size_t r = 0; r < dc; ++r) gm[r * dc + k] = col[r];
  }
  for (std::size_t a = 0; a < dc; ++a) {
    for (std::size_t b = 0; b < dc; ++b) {
      double s = 0.0;
      for (std::size_t k = 0; k < dc; ++k) {
        for (std::size_t l = 0; l < dc; ++l) s += gm[a * dc + k] * cov[k * dc + l] * gm[b * dc + l];
      }
      out.covariance_residual = std::max(out.covariance_residual, std::abs(s - cov[a * dc + b]));
    }
  }

  std::vector<double> m(dc * dc, 0.0), cat(d - dc, 0.0);
  for (std::size_t s = 0; s < samples; ++s) {
    const State x = prior_sample(prior, space, rng);
    if (centre) {
      for (double c : center_of_mass(x.values, space)) out.max_com = std::max(out.max_com, std::abs(c));
    }
    auto gx = act(g, x.values, space);
    if (centre) {
      const auto com = center_of_mass(gx, space);
      const std::size_t dim = space.points->spatial_dim;
      for (std::size_t i = 0; i < dc; ++i) gx[i] -= com[i % dim];
    }
    for (std::size_t a = 0; a < dc; ++a) {
      for (std::size_t b = 0; b < dc; ++b) m[a * dc + b] += gx[a] * gx[b];
    }
    for (std::size_t i = dc; i < d; ++i) cat[i - dc] += gx[i];
  }
  const double n = static_cast<double>(samples);
  for (std::size_t i = 0; i < m.size(); ++i) out.moment_deviation = std::max(out.moment_deviation, std::abs(m[i] / n - cov[i]));
  // Var(x_a x_b) <= 2 for unit-variance Gaussian coordinates.
  out.moment_tolerance = 5.0 * std::sqrt(2.0 / n);
  std::size_t off = 0;
  for (std::size_t k : space.categorical) {
    for (std::size_t j = 0; j < k; ++j) {
      out.categorical_deviation = std::max(out.categorical_deviation, std::abs(cat[off + j] / n - 1.0 / static_cast<double>(k)));
    }
    off += k;
  }
  out.categorical_tolerance = 5.0 * std::sqrt(0.25 / n);
  return out;
}

ModelAudit audit_model_equivariance(const VariationalHead& head, GroupFamily family, std::size_t trials,
                                    std::uint64_t seed, const InvariantPrior& prior, std::optional<double> y) {
  if (trials == 0) throw ConfigError("audit needs at least one trial");
  const SpaceSpec& space = head.space();
  const std::size_t d = space.total_dim();
  Tensor x(trials, d), gx(trials, d);
  std::vector<double> ts(trials);
  std::vector<GroupElement> gs;
  for (std::size_t i = 0; i < trials; ++i) {
    Rng rng = make_stream(seed, i);
    gs.push_back(sample_group_element(family, space, rng));
    const State s = prior_sample(prior, space, rng);
    ts[i] = uniform(rng, 0.0, 0.99);
    std::copy(s.values.begin(), s.values.end(), x.row(i).begin());
    const auto moved = act(gs.back(), s.values, space);
    std::copy(moved.begin(), moved.end(), gx.row(i).begin());
  }
  std::optional<std::vector<double>> ys;
  if (y) ys = std::vector<double>(trials, *y);
  const Tensor e = head.posterior_batch(x, ts, ys).expected_endpoints();
  const Tensor eg = head.posterior_batch(gx, ts, ys).expected_endpoints();
  const ConditionalVelocitySpec vspec{VelocityKind::optimal_transport, head.config().t_clamp};
  ModelAudit out;
  for (std::size_t i = 0; i < trials; ++i) {
    const auto expected = act(gs[i], e.row(i), space);
    out.expectation_residual = std::max(out.expectation_residual, max_abs_diff(eg.row(i), expected));
    const auto v = endpoint_to_velocity(vspec, x.row(i), ts[i], e.row(i));
    const auto vg = endpoint_to_velocity(vspec, gx.row(i), ts[i], eg.row(i));
    out.velocity_residual = std::max(out.velocity_residual, max_abs_diff(vg, act_linear(gs[i], v, space)));
  }
  return out;
}

std::vector<double> pairwise_distances(std::span<const double> x, const SpaceSpec& space) {
  if (!space.points) {
    double s = 0.0;
    for (std::size_t i = 0; i < space.n_continuous; ++i) s += x[i] * x[i];
    return {std::sqrt(s)};
  }
  const std::size_t n = space.points->n_points;
  const std::size_t dim = space.points->spatial_dim;
  std::vector<double> out;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double dd = x[i * dim + k] - x[j * dim + k];
        s += dd * dd;
      }
      out.push_back(std::sqrt(s));
    }
  }
  return out;
}

MarginalAudit audit_marginal_invariance(const VariationalHead& head, const InvariantPrior& prior,
                                        const IntegratorConfig& integrator, GroupFamily family, std::size_t trials,
                                        std::uint64_t seed, std::size_t histogram_samples) {
  if (trials == 0) throw ConfigError("audit needs at least one trial");
  if (head.config().label_conditioned) throw UsageError("marginal audit expects an unconditioned head");
  const SpaceSpec& space = head.space();
  const std::size_t d = space.total_dim();
  MarginalAudit out;

  SampleConfig sc;
  sc.integrator = integrator;
  sc.keep_trajectories = true;

  Tensor x0 = prior_batch(prior, space, seed, 0, trials);
  Tensor gx0(trials, d);
  std::vector<GroupElement> gs;
  for (std::size_t i = 0; i < trials; ++i) {
    Rng rng = make_stream(seed ^ 0x5bd1e995ULL, i);
    gs.push_back(sample_group_element(family, space, rng));
    const auto moved = act(gs.back(), x0.row(i), space);
    std::copy(moved.begin(), moved.end(), gx0.row(i).begin());
  }
  // Trajectory frames are stored before categorical decoding.
  const SampleResult a = sample_from(head, x0, sc);
  const SampleResult b = sample_from(head, gx0, sc);
  for (std::size_t i = 0; i < trials; ++i) {
    const Tensor& ta = a.trajectories[i];
    const Tensor& tb = b.trajectories[i];
    for (std::size_t f = 0; f < ta.rows; ++f) {
      const auto moved = act(gs[i], ta.row(f), space);
      out.trajectory_residual = std::max(out.trajectory_residual, max_abs_diff(tb.row(f), moved));
    }
  }

  if (histogram_samples > 0) {
    SampleConfig hc;
    hc.integrator = integrator;
    const Tensor xa = prior_batch(prior, space, seed + 1, 0, histogram_samples);
    Tensor xb = prior_batch(prior, space, seed + 2, 0, histogram_samples);
    for (std::size_t i = 0; i < histogram_samples; ++i) {
      Rng rng = make_stream(seed + 3, i);
      const auto moved = act(sample_group_element(family, space, rng), xb.row(i), space);
      std::copy(moved.begin(), moved.end(), xb.row(i).begin());
    }
    const Tensor sa = sample_from(head, xa, hc).samples;
    const Tensor sb = sample_from(head, xb, hc).samples;
    std::vector<double> da, db;
    for (std::size_t i = 0; i < histogram_samples; ++i) {
      for (double v : pairwise_distances(sa.row(i), space)) da.push_back(v);
      for (double v : pairwise_distances(sb.row(i), space)) db.push_back(v);
    }
    const double hi = std::max(*std::max_element(da.begin(), da.end()), *std::max_element(db.begin(), db.end()));
    constexpr std::size_t kBins = 20;
    std::vector<double> ha(kBins, 0.0), hb(kBins, 0.0);
    auto bin = [&](double v) { return std::min(kBins - 1, static_cast<std::size_t>(v / hi * kBins)); };
    for (double v : da) ha[bin(v)] += 1.0 / static_cast<double>(da.size());
    for (double v : db) hb[bin(v)] += 1.0 / static_cast<double>(db.size());
    for (std::size_t k = 0; k < kBins; ++k) out.histogram_deviation = std::max(out.histogram_deviation, std::abs(ha[k] - hb[k]));
    // Four standard deviations of a difference of two bin frequencies,
    // counting each cloud as one independent draw.
    out.histogram_tolerance = 4.0 * std::sqrt(0.5 / static_cast<double>(histogram_samples));
  }
  return out;
}

std::string to_string(GroupFamily f) {
  switch (f) {
    case GroupFamily::identity: return "identity";
    case GroupFamily::permutations: return "permutations";
    case GroupFamily::rotations: return "rotations";
    case GroupFamily::translations: return "translations";
    case GroupFamily::rigid: return "rigid";
  }
  return "?";
}

GroupFamily group_family_from_string(const std::string& s) {
  if (s == "identity") return GroupFamily::identity;
  if (s == "permutations") return GroupFamily::permutations;
  if (s == "rotations") return GroupFamily::rotations;
  if (s == "translations") return GroupFamily::translations;
  if (s == "rigid") return GroupFamily::rigid;
  throw ConfigError(fmt::format("unknown group family '{}'", s));
}

}  // namespace vfm
