#include "vfm/sampling.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include "vfm/binary_io.hpp"
#include "vfm/error.hpp"

namespace vfm {

using ad::Tensor;

void IntegratorConfig::validate() const {
  if (steps == 0) throw ConfigError("integrator needs K >= 1 steps");
  ConditionalVelocitySpec{VelocityKind::optimal_transport, t_clamp}.validate();
}

void GuidanceConfig::validate() const {
  if (!(damping > 0.0 && damping <= 1.0)) throw ConfigError("damping must lie in (0, 1]");
  if (!(divergence_cap > 0.0)) throw ConfigError("divergence_cap must be positive");
  if (!(tolerance >= 0.0)) throw ConfigError("tolerance must be non-negative");
}

// ------------------------------------------------------------ integration

void project_to_simplex(std::span<double> v) {
  double sum = 0.0;
  bool nonneg = true;
  for (double x : v) {
    sum += x;
    nonneg = nonneg && x >= 0.0;
  }
  if (nonneg && std::abs(sum - 1.0) <= 1e-12) return;
  std::vector<double> u(v.begin(), v.end());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cs = 0.0, tau = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cs += u[j];
    const double cand = (cs - 1.0) / static_cast<double>(j + 1);
    if (u[j] - cand > 0.0) tau = cand;
  }
  for (double& x : v) x = std::max(x - tau, 0.0);
}

void project_to_simplex(Tensor& x, const SpaceSpec& space) {
  if (space.categorical.empty()) return;
  for (std::size_t r = 0; r < x.rows; ++r) {
    std::size_t offset = space.n_continuous;
    for (std::size_t k : space.categorical) {
      project_to_simplex(x.row(r).subspan(offset, k));
      offset += k;
    }
  }
}

namespace {

void axpy(Tensor& y, double a, const Tensor& x) {
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += a * x.data[i];
}

void check_field(const Tensor& v, const Tensor& x) {
  if (!v.same_shape(x)) {
    throw StructuralError(fmt::format("velocity field returned {}x{} for a {}x{} state", v.rows, v.cols, x.rows, x.cols));
  }
}

}  // namespace

Trajectory integrate(const BatchField& field, const Tensor& x0, const IntegratorConfig& cfg, const SpaceSpec& space,
                     bool keep_frames) {
  cfg.validate();
  if (x0.cols != space.total_dim()) throw StructuralError("integrate: initial state has the wrong dimension");
  const std::size_t k_steps = cfg.steps;
  const double h = 1.0 / static_cast<double>(k_steps);
  Trajectory traj;
  Tensor x = x0;
  traj.times.push_back(0.0);
  if (keep_frames) traj.frames.push_back(x);
  for (std::size_t k = 0; k < k_steps; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(k_steps);
    if (cfg.scheme == Scheme::euler) {
      Tensor v = field(x, t);
      check_field(v, x);
      axpy(x, h, v);
    } else {
      Tensor k1 = field(x, t);
      check_field(k1, x);
      Tensor tmp = x;
      axpy(tmp, 0.5 * h, k1);
      Tensor k2 = field(tmp, t + 0.5 * h);
      tmp = x;
      axpy(tmp, 0.5 * h, k2);
      Tensor k3 = field(tmp, t + 0.5 * h);
      tmp = x;
      axpy(tmp, h, k3);
      Tensor k4 = field(tmp, std::min(1.0, t + h));
      for (std::size_t i = 0; i < x.data.size(); ++i) {
        x.data[i] += h / 6.0 * (k1.data[i] + 2.0 * k2.data[i] + 2.0 * k3.data[i] + k4.data[i]);
      }
    }
    project_to_simplex(x, space);
    if (!x.all_finite()) throw NumericError(fmt::format("non-finite state after integration step {}", k + 1));
    traj.times.push_back(k + 1 == k_steps ? 1.0 - cfg.t_clamp : static_cast<double>(k + 1) / static_cast<double>(k_steps));
    if (keep_frames || k + 1 == k_steps) traj.frames.push_back(x);
  }
  return traj;
}

std::vector<std::size_t> argmax_categories(std::span<const double> x, const SpaceSpec& space) {
  std::vector<std::size_t> out;
  std::size_t offset = space.n_continuous;
  for (std::size_t k : space.categorical) {
    auto block = x.subspan(offset, k);
    out.push_back(static_cast<std::size_t>(std::max_element(block.begin(), block.end()) - block.begin()));
    offset += k;
  }
  return out;
}

void decode_categories(Tensor& x, const SpaceSpec& space) {
  for (std::size_t r = 0; r < x.rows; ++r) {
    const auto cats = argmax_categories(x.row(r), space);
    std::size_t offset = space.n_continuous;
    for (std::size_t b = 0; b < cats.size(); ++b) {
      const std::size_t k = space.categorical[b];
      for (std::size_t c = 0; c < k; ++c) x(r, offset + c) = c == cats[b] ? 1.0 : 0.0;
      offset += k;
    }
  }
}

// --------------------------------------------------------------- velocity

namespace {

Tensor endpoints_to_velocity(const Tensor& x, const Tensor& x1_hat, double t, double t_clamp) {
  const ConditionalVelocitySpec spec{VelocityKind::optimal_transport, t_clamp};
  Tensor v(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    auto row = endpoint_to_velocity(spec, x.row(r), t, x1_hat.row(r));
    std::copy(row.begin(), row.end(), v.row(r).begin());
  }
  return v;
}

std::optional<std::vector<double>> broadcast_label(const std::optional<double>& y, std::size_t n) {
  if (!y) return std::nullopt;
  return std::vector<double>(n, *y);
}

}  // namespace

Tensor velocity_batch(const VariationalHead& head, const Tensor& x, double t, const std::optional<double>& y) {
  std::vector<double> ts(x.rows, t);
  const PosteriorBatch post = head.posterior_batch(x, ts, broadcast_label(y, x.rows));
  return endpoints_to_velocity(x, post.expected_endpoints(), t, head.config().t_clamp);
}

std::vector<double> velocity_field(const VariationalHead& head, const State& x, std::optional<double> y) {
  return velocity_batch(head, Tensor::row_vector(x.values), x.time, y).data;
}

// --------------------------------------------------------------- guidance

RefineResult fixed_point_refine(std::span<const double> mu, double sigma2, const PropertyLikelihood& lik,
                                const GuidanceConfig& cfg) {
  cfg.validate();
  if (!(sigma2 > 0.0)) throw ConfigError("fixed_point_refine: sigma2 must be positive");
  RefineResult res;
  res.x.assign(mu.begin(), mu.end());
  const double lam = cfg.damping;
  std::vector<double> next(mu.size());
  for (std::size_t s = 0; s < cfg.inner_steps; ++s) {
    std::vector<double> g;
    try {
      g = lik.grad_log_likelihood(res.x);
    } catch (const NumericError&) {
      res.diverged = true;
    }
    double r2 = 0.0;
    if (!res.diverged) {
      for (std::size_t i = 0; i < mu.size(); ++i) {
        next[i] = (1.0 - lam) * res.x[i] + lam * (mu[i] + sigma2 * g[i]);
        const double d = next[i] - res.x[i];
        r2 += d * d;
      }
      const double r = std::sqrt(r2);
      res.residuals.push_back(r);
      if (!(r <= cfg.divergence_cap)) res.diverged = true;
    }
    if (res.diverged) {
      res.x.assign(mu.begin(), mu.end());
      return res;
    }
    res.x.swap(next);
  }
  res.converged = cfg.inner_steps > 0 && res.residuals.back() <= cfg.tolerance;
  return res;
}

std::vector<RefineResult> fixed_point_refine_batch(const Tensor& mu, double sigma2, const PropertyLikelihood& lik,
                                                   const GuidanceConfig& cfg) {
  cfg.validate();
  if (!(sigma2 > 0.0)) throw ConfigError("fixed_point_refine: sigma2 must be positive");
  const std::size_t b = mu.rows;
  const std::size_t d = mu.cols;
  std::vector<RefineResult> res(b);
  std::vector<bool> active(b, true);
  Tensor x = mu;
  const double lam = cfg.damping;
  for (std::size_t s = 0; s < cfg.inner_steps; ++s) {
    Tensor g;
    try {
      g = lik.grad_log_likelihood_batch(x);
    } catch (const NumericError&) {
      std::vector<RefineResult> single(b);
      for (std::size_t r = 0; r < b; ++r) single[r] = fixed_point_refine(mu.row(r), sigma2, lik, cfg);
      return single;
    }
    for (std::size_t r = 0; r < b; ++r) {
      if (!active[r]) continue;
      double r2 = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double nx = (1.0 - lam) * x(r, i) + lam * (mu(r, i) + sigma2 * g(r, i));
        const double diff = nx - x(r, i);
        r2 += diff * diff;
        x(r, i) = nx;
      }
      const double rn = std::sqrt(r2);
      res[r].residuals.push_back(rn);
      if (!(rn <= cfg.divergence_cap)) {
        res[r].diverged = true;
        active[r] = false;
        std::copy(mu.row(r).begin(), mu.row(r).end(), x.row(r).begin());
      }
    }
  }
  for (std::size_t r = 0; r < b; ++r) {
    res[r].x.assign(x.row(r).begin(), x.row(r).end());
    res[r].converged = !res[r].diverged && cfg.inner_steps > 0 && res[r].residuals.back() <= cfg.tolerance;
  }
  return res;
}

// ---------------------------------------------------------------- sampler

Tensor prior_batch(const InvariantPrior& prior, const SpaceSpec& space, std::uint64_t seed, std::size_t first,
                   std::size_t n) {
  Tensor x(n, space.total_dim());
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_stream(seed, first + i);
    State s = prior_sample(prior, space, rng);
    std::copy(s.values.begin(), s.values.end(), x.row(i).begin());
  }
  return x;
}

SampleResult sample_from(const VariationalHead& head, const Tensor& x0, const SampleConfig& cfg) {
  cfg.integrator.validate();
  const bool conditioned = head.config().label_conditioned;
  switch (cfg.mode) {
    case SampleMode::unconditional:
      if (conditioned) throw UsageError("unconditional sampling needs an unconditioned head");
      break;
    case SampleMode::conditioned:
      if (!conditioned) throw UsageError("conditioned sampling needs a label-conditioned head");
      if (!cfg.y) throw UsageError("conditioned sampling needs a target y");
      break;
    case SampleMode::guided:
      if (conditioned) throw UsageError("guided sampling needs an unconditioned head");
      if (!cfg.likelihood) throw UsageError("guided sampling needs a likelihood");
      if (!(cfg.likelihood->f.space() == head.space())) throw UsageError("likelihood and head spaces differ");
      cfg.guidance.validate();
      break;
  }
  const SpaceSpec& space = head.space();
  const double t_clamp = head.config().t_clamp;
  SampleResult res;
  std::uint64_t calls = 0;
  std::optional<double> y = cfg.mode == SampleMode::conditioned ? cfg.y : std::nullopt;

  BatchField field = [&](const Tensor& x, double t) {
    ++calls;
    std::vector<double> ts(x.rows, t);
    const PosteriorBatch post = head.posterior_batch(x, ts, broadcast_label(y, x.rows));
    Tensor x1_hat = post.expected_endpoints();
    if (cfg.mode == SampleMode::guided && cfg.guidance.inner_steps > 0) {
      const auto refined = fixed_point_refine_batch(x1_hat, head.sigma2(t), *cfg.likelihood, cfg.guidance);
      for (std::size_t r = 0; r < x.rows; ++r) {
        std::copy(refined[r].x.begin(), refined[r].x.end(), x1_hat.row(r).begin());
        res.refine_diverged += refined[r].diverged ? 1 : 0;
      }
      res.refine_total += x.rows;
    }
    return endpoints_to_velocity(x, x1_hat, t, t_clamp);
  };

  Trajectory traj = integrate(field, x0, cfg.integrator, space, cfg.keep_trajectories);
  res.samples = traj.frames.back();
  decode_categories(res.samples, space);
  for (std::size_t r = 0; r < res.samples.rows; ++r) res.categories.push_back(argmax_categories(res.samples.row(r), space));
  res.nfe.assign(x0.rows, calls);
  res.times = traj.times;
  if (cfg.keep_trajectories) {
    for (std::size_t r = 0; r < x0.rows; ++r) {
      Tensor chain(traj.frames.size(), x0.cols);
      for (std::size_t f = 0; f < traj.frames.size(); ++f) {
        std::copy(traj.frames[f].row(r).begin(), traj.frames[f].row(r).end(), chain.row(f).begin());
      }
      res.trajectories.push_back(std::move(chain));
    }
  }
  return res;
}

SampleResult sample(const VariationalHead& head, std::size_t n, const SampleConfig& cfg) {
  if (n == 0) throw ConfigError("number of samples must be positive");
  if (cfg.chunk_size == 0) throw ConfigError("chunk_size must be positive");
  const std::size_t chunks = (n + cfg.chunk_size - 1) / cfg.chunk_size;
  std::vector<SampleResult> parts(chunks);
  std::vector<std::exception_ptr> errors(chunks);
  auto run_chunk = [&](std::size_t c) {
    try {
      const std::size_t first = c * cfg.chunk_size;
      const std::size_t m = std::min(cfg.chunk_size, n - first);
      parts[c] = sample_from(head, prior_batch(cfg.prior, head.space(), cfg.seed, first, m), cfg);
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.workers, chunks));
  if (workers == 1) {
    for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t c = next++; c < chunks; c = next++) run_chunk(c);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  SampleResult out;
  out.samples = Tensor(n, head.space().total_dim());
  std::size_t row = 0;
  for (auto& p : parts) {
    for (std::size_t r = 0; r < p.samples.rows; ++r, ++row) {
      std::copy(p.samples.row(r).begin(), p.samples.row(r).end(), out.samples.row(row).begin());
    }
    out.categories.insert(out.categories.end(), p.categories.begin(), p.categories.end());
    out.nfe.insert(out.nfe.end(), p.nfe.begin(), p.nfe.end());
    out.refine_diverged += p.refine_diverged;
    out.refine_total += p.refine_total;
    for (auto& tr : p.trajectories) out.trajectories.push_back(std::move(tr));
    if (out.times.empty()) out.times = p.times;
  }
  return out;
}

// ------------------------------------------------------------ trajectories

std::string TrajectoryFile::serialize() const {
  std::ostringstream os;
  os << "vfm-trajectory\n"
     << "version " << kTrajectoryVersion << "\n"
     << "chains " << chains.size() << "\n"
     << "frames " << times.size() << "\n"
     << "dim " << dim << "\n"
     << "times";
  for (double t : times) os << ' ' << fmt::format("{:.17g}", t);
  os << "\nend\n";
  for (const auto& c : chains) {
    if (c.rows != times.size() || c.cols != dim) throw StructuralError("trajectory chain has the wrong shape");
    io::write_f64_le(os, c.data);
  }
  return os.str();
}

TrajectoryFile TrajectoryFile::parse(const std::string& bytes) {
  std::istringstream is(bytes);
  auto expect = [&](const char* key) {
    auto [k, v] = io::split_key(io::read_header_line(is));
    if (k != key) throw FormatError(fmt::format("trajectory header: expected '{}', found '{}'", key, k));
    return v;
  };
  if (io::read_header_line(is) != "vfm-trajectory") throw FormatError("not a vfm trajectory file (bad magic)");
  const std::string version = expect("version");
  if (version != std::to_string(kTrajectoryVersion)) {
    throw FormatError(fmt::format("unsupported trajectory version '{}'", version));
  }
  TrajectoryFile f;
  std::size_t n_chains = 0, n_frames = 0;
  try {
    n_chains = std::stoull(expect("chains"));
    n_frames = std::stoull(expect("frames"));
    f.dim = std::stoull(expect("dim"));
    std::istringstream ts(expect("times"));
    for (double t; ts >> t;) f.times.push_back(t);
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(fmt::format("trajectory header: {}", e.what()));
  }
  if (f.times.size() != n_frames) throw FormatError("trajectory header: frame count does not match times");
  if (io::read_header_line(is) != "end") throw FormatError("trajectory header: missing 'end'");
  for (std::size_t c = 0; c < n_chains; ++c) f.chains.emplace_back(n_frames, f.dim, io::read_f64_le(is, n_frames * f.dim));
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trajectory: trailing bytes after payload");
  return f;
}

// ------------------------------------------------- continuity-equation check

namespace {

double normal_pdf(double x, double m, double s) {
  const double z = (x - m) / s;
  return std::exp(-0.5 * z * z) / (s * std::sqrt(2.0 * std::numbers::pi));
}

}  // namespace

double controlled_path_density(const ContinuityCheck& c, double x, double t) {
  double p = 0.0;
  for (std::size_t j = 0; j < c.endpoints.size(); ++j) p += c.weights[j] * normal_pdf(x, t * c.endpoints[j], 1.0 - t);
  return p;
}

double controlled_flux(const ContinuityCheck& c, double x, double t) {
  // p_t(x | y) * sum_j p_t(x1_j | x, y) u_t(x | x1_j) by enumeration.
  const double p = controlled_path_density(c, x, t);
  double expected_u = 0.0;
  for (std::size_t j = 0; j < c.endpoints.size(); ++j) {
    const double post = c.weights[j] * normal_pdf(x, t * c.endpoints[j], 1.0 - t) / p;
    expected_u += post * (c.endpoints[j] - x) / (1.0 - t);
  }
  return p * expected_u;
}

ContinuityReport continuity_residual(const ContinuityCheck& c) {
  if (c.endpoints.size() != c.weights.size() || c.endpoints.empty()) {
    throw ConfigError("continuity check: one weight per endpoint required");
  }
  if (c.x_points < 3) throw ConfigError("continuity check: need at least three grid points");
  ContinuityReport rep;
  for (double t : c.times) {
    if (!(t > c.h && t < 1.0 - c.h)) throw ConfigError("continuity check: times must be interior");
    for (std::size_t i = 1; i + 1 < c.x_points; ++i) {
      const double x = c.x_min + (c.x_max - c.x_min) * static_cast<double>(i) / static_cast<double>(c.x_points - 1);
      const double dpdt = (controlled_path_density(c, x, t + c.h) - controlled_path_density(c, x, t - c.h)) / (2.0 * c.h);
      const double div = (controlled_flux(c, x + c.h, t) - controlled_flux(c, x - c.h, t)) / (2.0 * c.h);
      const double r = std::abs(dpdt + div);
      if (r > rep.max_residual) rep = {r, x, t};
    }
  }
  return rep;
}

std::string to_string(SampleMode m) {
  switch (m) {
    case SampleMode::unconditional: return "unconditional";
    case SampleMode::conditioned: return "conditioned";
    case SampleMode::guided: return "guided";
  }
  return "?";
}

SampleMode sample_mode_from_string(const std::string& s) {
  if (s == "unconditional") return SampleMode::unconditional;
  if (s == "conditioned") return SampleMode::conditioned;
  if (s == "guided") return SampleMode::guided;
  throw ConfigError(fmt::format("unknown sampling mode '{}'", s));
}

std::string to_string(Scheme s) { return s == Scheme::euler ? "euler" : "rk4"; }

Scheme scheme_from_string(const std::string& s) {
  if (s == "euler") return Scheme::euler;
  if (s == "rk4") return Scheme::rk4;
  throw ConfigError(fmt::format("unknown integrator scheme '{}'", s));
}

}  // namespace vfm
