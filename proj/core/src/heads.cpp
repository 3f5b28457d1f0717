#include "vfm/heads.hpp"

#include <fmt/format.h>

#include <cmath>
#include <numbers>

#include "vfm/error.hpp"
#include "vfm/random.hpp"

namespace vfm {

using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

Tensor random_weights(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor w(fan_in, fan_out);
  const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : w.data) v = scale * standard_normal(rng);
  return w;
}

Tensor output_weights(std::size_t fan_in, std::size_t fan_out, bool zero, Rng& rng) {
  return zero ? Tensor(fan_in, fan_out) : random_weights(fan_in, fan_out, rng);
}

void softmax_into(std::span<const double> logits, std::span<double> out) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) z += (out[k] = std::exp(logits[k] - m));
  for (double& v : out) v /= z;
}

Var p(Tape& tape, const ad::ParamStore& store, const std::string& name) {
  const auto idx = store.find(name);
  if (!idx) throw UsageError(fmt::format("missing parameter '{}'", name));
  return tape.param(store, *idx);
}

}  // namespace

double SigmaSchedule::variance(double t, double t_clamp) const {
  const double tc = std::min(t, 1.0 - t_clamp);
  const double s = base * (1.0 - tc);
  return s * s;
}

void HeadConfig::validate() const {
  space.validate();
  if (hidden.empty() || hidden.front() == 0) throw ConfigError("head needs at least one non-empty hidden layer");
  if (time_features == 0 || time_features % 2 != 0) throw ConfigError("time_features must be a positive even number");
  if (!(sigma.base > 0.0)) throw ConfigError("sigma base must be positive");
  if (!(t_clamp > 0.0 && t_clamp < 0.5)) throw ConfigError("t_clamp must lie in (0, 0.5)");
  if (!(label_scale > 0.0)) throw ConfigError("label_scale must be positive");
  if (architecture == Architecture::equivariant) {
    if (!space.points) throw ConfigError("equivariant head requires a point-cloud space");
    if (rounds == 0) throw ConfigError("equivariant head needs at least one round");
  }
}

std::vector<double> expected_endpoint(const MeanFieldPosterior& post) {
  std::vector<double> out = post.means;
  std::size_t offset = 0;
  for (std::size_t k : post.cardinalities) {
    std::vector<double> probs(k);
    softmax_into(std::span(post.logits).subspan(offset, k), probs);
    out.insert(out.end(), probs.begin(), probs.end());
    offset += k;
  }
  return out;
}

double log_prob(const MeanFieldPosterior& post, std::span<const double> x1) {
  const std::size_t dc = post.means.size();
  std::size_t cat_dim = 0;
  for (std::size_t k : post.cardinalities) cat_dim += k;
  if (x1.size() != dc + cat_dim) {
    throw StructuralError(fmt::format("log_prob: x1 has {} values, posterior covers {}", x1.size(), dc + cat_dim));
  }
  if (!(post.sigma2 > 0.0)) throw DataError("log_prob: sigma2 must be positive");
  double lp = 0.0;
  const double log_norm = -0.5 * std::log(2.0 * std::numbers::pi * post.sigma2);
  for (std::size_t i = 0; i < dc; ++i) {
    const double r = x1[i] - post.means[i];
    lp += log_norm - r * r / (2.0 * post.sigma2);
  }
  std::size_t offset = 0;
  for (std::size_t b = 0; b < post.cardinalities.size(); ++b) {
    const std::size_t k = post.cardinalities[b];
    auto block = x1.subspan(dc + offset, k);
    std::size_t hot = k;
    for (std::size_t c = 0; c < k; ++c) {
      if (block[c] == 1.0 && hot == k) {
        hot = c;
      } else if (block[c] != 0.0) {
        hot = k + 1;
        break;
      }
    }
    if (hot >= k) throw DataError(fmt::format("log_prob: categorical block {} of x1 is not one-hot", b));
    auto logits = std::span(post.logits).subspan(offset, k);
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - m);
    lp += logits[hot] - m - std::log(z);
    offset += k;
  }
  return lp;
}

MeanFieldPosterior PosteriorBatch::row(std::size_t r, const SpaceSpec& space) const {
  MeanFieldPosterior post;
  if (space.n_continuous > 0) post.means.assign(means.row(r).begin(), means.row(r).end());
  if (space.categorical_dim() > 0) post.logits.assign(logits.row(r).begin(), logits.row(r).end());
  post.sigma2 = sigma2[r];
  post.cardinalities = space.categorical;
  return post;
}

Tensor PosteriorBatch::expected_endpoints() const {
  const std::size_t rows = sigma2.size();
  const std::size_t dc = means.cols;
  const std::size_t dk = logits.cols;
  Tensor out(rows, dc + dk);
  for (std::size_t r = 0; r < rows; ++r) {
    auto dst = out.row(r);
    if (dc > 0) std::copy_n(means.row(r).begin(), dc, dst.begin());
    std::size_t offset = 0;
    for (std::size_t k : cardinalities) {
      softmax_into(logits.row(r).subspan(offset, k), dst.subspan(dc + offset, k));
      offset += k;
    }
  }
  return out;
}

// ----------------------------------------------------------------- base

VariationalHead::VariationalHead(HeadConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

void VariationalHead::check_inputs(const Tensor& x, std::span<const double> t,
                                   const std::optional<std::vector<double>>& y) const {
  if (x.cols != cfg_.space.total_dim()) {
    throw StructuralError(fmt::format("head expects {} state dims, got {}", cfg_.space.total_dim(), x.cols));
  }
  if (t.size() != x.rows) throw StructuralError(fmt::format("{} times for {} states", t.size(), x.rows));
  if (cfg_.label_conditioned && !y) throw UsageError("label-conditioned head called without y");
  if (!cfg_.label_conditioned && y) throw UsageError("unconditioned head called with y");
  if (y && y->size() != x.rows) throw StructuralError(fmt::format("{} labels for {} states", y->size(), x.rows));
}

Tensor VariationalHead::time_features(std::span<const double> t) const {
  const std::size_t half = cfg_.time_features / 2;
  Tensor out(t.size(), time_feature_dim());
  for (std::size_t r = 0; r < t.size(); ++r) {
    const double tc = std::min(t[r], 1.0 - cfg_.t_clamp);
    out(r, 0) = tc;
    for (std::size_t k = 0; k < half; ++k) {
      const double w = std::numbers::pi * std::ldexp(1.0, static_cast<int>(k));
      out(r, 1 + 2 * k) = std::sin(w * tc);
      out(r, 2 + 2 * k) = std::cos(w * tc);
    }
  }
  return out;
}

Tensor VariationalHead::label_features(const std::vector<double>& y) const {
  Tensor out(y.size(), label_feature_dim());
  for (std::size_t r = 0; r < y.size(); ++r) {
    const double u = y[r] / cfg_.label_scale;
    out(r, 0) = u;
    for (std::size_t k = 1; k <= cfg_.label_frequencies; ++k) {
      const double w = std::numbers::pi * static_cast<double>(k) * u;
      out(r, 2 * k - 1) = std::sin(w);
      out(r, 2 * k) = 1.0 - std::cos(w);
    }
  }
  return out;
}

MeanFieldPosterior VariationalHead::posterior_params(const State& x, std::optional<double> y) const {
  std::optional<std::vector<double>> ys;
  if (y) ys = std::vector<double>{*y};
  const double t = x.time;
  return posterior_batch(Tensor::row_vector(x.values), std::span(&t, 1), ys).row(0, cfg_.space);
}

PosteriorBatch VariationalHead::posterior_batch(const Tensor& x, std::span<const double> t,
                                                const std::optional<std::vector<double>>& y) const {
  check_inputs(x, t, y);
  Tape tape;
  Var xv = tape.constant(x);
  HeadOutput out = forward(tape, xv, t, y);
  PosteriorBatch post;
  post.means = out.means.valid() ? tape.value(out.means) : Tensor(x.rows, 0);
  post.logits = out.logits.valid() ? tape.value(out.logits) : Tensor(x.rows, 0);
  post.sigma2.resize(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r) post.sigma2[r] = sigma2(t[r]);
  post.cardinalities = cfg_.space.categorical;
  return post;
}

// ------------------------------------------------------------------ MLP

MlpHead::MlpHead(HeadConfig cfg) : VariationalHead(std::move(cfg)) {
  if (cfg_.architecture != Architecture::mlp) throw ConfigError("MlpHead constructed with non-mlp config");
  Rng rng(cfg_.init_seed);
  const std::size_t d = cfg_.space.total_dim();
  const std::size_t h0 = cfg_.hidden.front();
  params_.add("in_x", random_weights(d + time_feature_dim(), h0, rng));
  params_.add("in_b", Tensor(1, h0));
  for (std::size_t l = 1; l < cfg_.hidden.size(); ++l) {
    params_.add(fmt::format("h{}_w", l), random_weights(cfg_.hidden[l - 1], cfg_.hidden[l], rng));
    params_.add(fmt::format("h{}_b", l), Tensor(1, cfg_.hidden[l]));
  }
  const std::size_t n_out = cfg_.space.n_continuous + cfg_.space.categorical_dim();
  params_.add("out_w", output_weights(cfg_.hidden.back(), n_out, cfg_.zero_init_output, rng));
  params_.add("out_b", Tensor(1, n_out));
  // Label embedding is zero-initialised and drawn last so conditioned and
  // unconditioned heads share every other initial weight.
  if (cfg_.label_conditioned) params_.add("in_y", Tensor(label_feature_dim(), h0));
}

HeadOutput MlpHead::forward(Tape& tape, Var x, std::span<const double> t,
                            const std::optional<std::vector<double>>& y) const {
  const Tensor& xv = tape.value(x);
  check_inputs(xv, t, y);
  const std::size_t batch = xv.rows;
  const std::size_t dc = cfg_.space.n_continuous;
  const std::size_t dk = cfg_.space.categorical_dim();

  Var inputs = tape.concat_cols({x, tape.constant(time_features(t))});
  Var pre = tape.add_row(tape.matmul(inputs, p(tape, params_, "in_x")), p(tape, params_, "in_b"));
  if (cfg_.label_conditioned) {
    pre = tape.add(pre, tape.matmul(tape.constant(label_features(*y)), p(tape, params_, "in_y")));
  }
  Var h = tape.silu(pre);
  for (std::size_t l = 1; l < cfg_.hidden.size(); ++l) {
    h = tape.silu(tape.add_row(tape.matmul(h, p(tape, params_, fmt::format("h{}_w", l))),
                               p(tape, params_, fmt::format("h{}_b", l))));
  }
  Var out = tape.add_row(tape.matmul(h, p(tape, params_, "out_w")), p(tape, params_, "out_b"));

  HeadOutput res;
  if (dc > 0) {
    Tensor one_minus_t(batch, 1);
    for (std::size_t r = 0; r < batch; ++r) one_minus_t.data[r] = 1.0 - std::min(t[r], 1.0 - cfg_.t_clamp);
    Var offset = tape.mul_col(tape.slice_cols(out, 0, dc), tape.constant(std::move(one_minus_t)));
    res.means = tape.add(tape.slice_cols(x, 0, dc), offset);
  }
  if (dk > 0) res.logits = tape.slice_cols(out, dc, dk);
  return res;
}

// ----------------------------------------------------------- equivariant

EquivariantHead::EquivariantHead(HeadConfig cfg) : VariationalHead(std::move(cfg)) {
  if (cfg_.architecture != Architecture::equivariant) {
    throw ConfigError("EquivariantHead constructed with non-equivariant config");
  }
  const std::size_t n = cfg_.space.points->n_points;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      edge_i_.push_back(i);
      edge_j_.push_back(j);
    }
  }
  Rng rng(cfg_.init_seed);
  const std::size_t h = cfg_.hidden.front();
  const std::size_t k = cfg_.space.categorical.empty() ? 0 : cfg_.space.categorical.front();
  if (k > 0) params_.add("embed_types", random_weights(k, h, rng));
  params_.add("embed_t", random_weights(time_feature_dim(), h, rng));
  params_.add("embed_b", Tensor(1, h));
  for (std::size_t r = 0; r < cfg_.rounds; ++r) {
    params_.add(fmt::format("r{}.msg_hi", r), random_weights(h, h, rng));
    params_.add(fmt::format("r{}.msg_hj", r), random_weights(h, h, rng));
    params_.add(fmt::format("r{}.msg_d", r), random_weights(2, h, rng));
    params_.add(fmt::format("r{}.msg_b", r), Tensor(1, h));
    params_.add(fmt::format("r{}.msg2_w", r), random_weights(h, h, rng));
    params_.add(fmt::format("r{}.msg2_b", r), Tensor(1, h));
    params_.add(fmt::format("r{}.coord_w", r), output_weights(h, 1, cfg_.zero_init_output, rng));
    params_.add(fmt::format("r{}.node_h", r), random_weights(h, h, rng));
    params_.add(fmt::format("r{}.node_m", r), random_weights(h, h, rng));
    params_.add(fmt::format("r{}.node_b", r), Tensor(1, h));
  }
  if (k > 0) {
    params_.add("out_w", output_weights(h, k, cfg_.zero_init_output, rng));
    params_.add("out_b", Tensor(1, k));
  }
  if (cfg_.label_conditioned) params_.add("embed_y", Tensor(label_feature_dim(), h));
  params_.add("embed_r", random_weights(1, h, rng));
}

HeadOutput EquivariantHead::forward(Tape& tape, Var x, std::span<const double> t,
                                    const std::optional<std::vector<double>>& y) const {
  const Tensor& xv = tape.value(x);
  check_inputs(xv, t, y);
  const std::size_t batch = xv.rows;
  const std::size_t n = cfg_.space.points->n_points;
  const std::size_t d = cfg_.space.points->spatial_dim;
  const std::size_t k = cfg_.space.categorical.empty() ? 0 : cfg_.space.categorical.front();
  if (n < 2) throw DataError("equivariant head needs at least two points");
  const std::size_t nodes = batch * n;
  const double inv_neighbours = 1.0 / static_cast<double>(n - 1);

  // Per-node copies of the per-cloud inputs.
  Tensor tf = time_features(t);
  Tensor node_tf(nodes, tf.cols);
  Tensor one_minus_t(nodes, 1);
  for (std::size_t b = 0; b < batch; ++b) {
    const double tc = std::min(t[b], 1.0 - cfg_.t_clamp);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(tf.row(b).begin(), tf.cols, node_tf.row(b * n + i).begin());
      one_minus_t.data[b * n + i] = 1.0 - tc;
    }
  }
  std::vector<std::size_t> ei, ej;
  ei.reserve(batch * edge_i_.size());
  ej.reserve(batch * edge_j_.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t e = 0; e < edge_i_.size(); ++e) {
      ei.push_back(b * n + edge_i_[e]);
      ej.push_back(b * n + edge_j_[e]);
    }
  }
  const ad::Index idx_i = ad::make_index(std::move(ei));
  const ad::Index idx_j = ad::make_index(std::move(ej));
  Tensor ones(idx_i->size(), 1);
  std::fill(ones.data.begin(), ones.data.end(), 1.0);

  Var pts = tape.reshape(tape.slice_cols(x, 0, n * d), nodes, d);
  Var centered = tape.center_groups(pts, n);

  Var pre = tape.add_row(tape.matmul(tape.constant(std::move(node_tf)), p(tape, params_, "embed_t")),
                         p(tape, params_, "embed_b"));
  if (k > 0) {
    Var types = tape.reshape(tape.slice_cols(x, n * d, n * k), nodes, k);
    pre = tape.add(pre, tape.matmul(types, p(tape, params_, "embed_types")));
  }
  if (cfg_.label_conditioned) {
    Tensor lf = label_features(*y);
    Tensor node_lf(nodes, lf.cols);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < n; ++i) std::copy_n(lf.row(b).begin(), lf.cols, node_lf.row(b * n + i).begin());
    }
    pre = tape.add(pre, tape.matmul(tape.constant(std::move(node_lf)), p(tape, params_, "embed_y")));
  }
  // Squared distance to the centre of mass.
  pre = tape.add(pre, tape.matmul(tape.row_sum(tape.square(centered)), p(tape, params_, "embed_r")));
  Var h = tape.silu(pre);
  Var coords = centered;
  Var d2_in = tape.pairwise_sq_dist(centered, idx_i, idx_j);

  for (std::size_t r = 0; r < cfg_.rounds; ++r) {
    auto name = [r](const char* s) { return fmt::format("r{}.{}", r, s); };
    Var d2 = tape.pairwise_sq_dist(coords, idx_i, idx_j);
    // Node-level products gathered onto edges.
    Var hi = tape.gather_rows(tape.matmul(h, p(tape, params_, name("msg_hi"))), idx_i);
    Var hj = tape.gather_rows(tape.matmul(h, p(tape, params_, name("msg_hj"))), idx_j);
    Var m = tape.add(hi, hj);
    m = tape.add(m, tape.matmul(tape.concat_cols({d2, d2_in}), p(tape, params_, name("msg_d"))));
    m = tape.silu(tape.add_row(m, p(tape, params_, name("msg_b"))));
    m = tape.silu(tape.add_row(tape.matmul(m, p(tape, params_, name("msg2_w"))), p(tape, params_, name("msg2_b"))));

    // Edge directions scaled by 1 / sqrt(1 + d^2).
    Var inv_len = tape.exp(tape.scale(tape.log(tape.add(d2, tape.constant(ones))), -0.5));
    Var weight = tape.mul(tape.matmul(m, p(tape, params_, name("coord_w"))), inv_len);
    Var diff = tape.sub(tape.gather_rows(coords, idx_i), tape.gather_rows(coords, idx_j));
    Var update = tape.scatter_add_rows(tape.mul_col(diff, weight), idx_i, nodes);
    coords = tape.add(coords, tape.scale(update, inv_neighbours));

    Var agg = tape.scale(tape.scatter_add_rows(m, idx_i, nodes), inv_neighbours);
    Var node_pre = tape.add(tape.matmul(h, p(tape, params_, name("node_h"))), tape.matmul(agg, p(tape, params_, name("node_m"))));
    h = tape.add(h, tape.silu(tape.add_row(node_pre, p(tape, params_, name("node_b")))));
  }

  // Displacement is translation invariant; re-centring keeps the predicted
  // mean on the same centre of mass as the input.
  Var displacement = tape.center_groups(tape.sub(coords, centered), n);
  Var means = tape.add(pts, tape.mul_col(displacement, tape.constant(std::move(one_minus_t))));

  HeadOutput res;
  res.means = tape.reshape(means, batch, n * d);
  if (k > 0) {
    Var logits = tape.add_row(tape.matmul(h, p(tape, params_, "out_w")), p(tape, params_, "out_b"));
    res.logits = tape.reshape(logits, batch, n * k);
  }
  return res;
}

// ------------------------------------------------------------- factory

std::unique_ptr<VariationalHead> make_head(const HeadConfig& cfg) {
  switch (cfg.architecture) {
    case Architecture::mlp: return std::make_unique<MlpHead>(cfg);
    case Architecture::equivariant: return std::make_unique<EquivariantHead>(cfg);
  }
  throw ConfigError("unknown architecture");
}

MeanFieldPosterior equivariant_forward(const VariationalHead& head, const Tensor& points,
                                       std::span<const std::size_t> types, double t, std::optional<double> y) {
  const SpaceSpec& space = head.space();
  if (!space.points) throw ConfigError("equivariant_forward needs a point-cloud head");
  const std::size_t n = space.points->n_points;
  const std::size_t d = space.points->spatial_dim;
  if (points.rows < 2) throw DataError("equivariant_forward: need at least two points");
  if (points.rows != n || points.cols != d) {
    throw StructuralError(fmt::format("equivariant_forward: points {}x{} for a {}x{} cloud", points.rows,
                                      points.cols, n, d));
  }
  State s;
  s.time = t;
  s.values.assign(points.data.begin(), points.data.end());
  if (!space.categorical.empty()) {
    if (types.size() != n) throw StructuralError("equivariant_forward: one type per point required");
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = space.categorical[i];
      if (types[i] >= k) throw DataError(fmt::format("type {} out of range for K = {}", types[i], k));
      std::vector<double> block(k, 0.0);
      block[types[i]] = 1.0;
      s.values.insert(s.values.end(), block.begin(), block.end());
    }
  }
  return head.posterior_params(s, y);
}

std::string to_string(Architecture a) { return a == Architecture::mlp ? "mlp" : "equivariant"; }

Architecture architecture_from_string(const std::string& s) {
  if (s == "mlp") return Architecture::mlp;
  if (s == "equivariant") return Architecture::equivariant;
  throw ConfigError(fmt::format("unknown architecture '{}'", s));
}

}  // namespace vfm
