#include "vfm/training.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "vfm/ad/checkpoint.hpp"
#include "vfm/binary_io.hpp"
#include "vfm/config.hpp"
#include "vfm/error.hpp"

namespace vfm {

using ad::Tape;
using ad::Tensor;
using ad::Var;

// ---------------------------------------------------------------- datasets

void DatasetSpec::validate() const {
  switch (kind) {
    case DatasetKind::gauss_mixture_2d:
      if (n_components == 0) throw ConfigError("gauss_mixture_2d needs at least one component");
      if (!(ring_radius >= 0.0) || !(component_std > 0.0)) throw ConfigError("gauss_mixture_2d: bad radius or std");
      break;
    case DatasetKind::categorical_factorized:
      if (n_dims == 0 || n_categories < 2) throw ConfigError("categorical_factorized needs n_dims >= 1, K >= 2");
      if (!probabilities.empty()) {
        if (probabilities.size() != n_dims) throw ConfigError("probabilities: one row per dimension required");
        for (const auto& row : probabilities) {
          if (row.size() != n_categories) throw ConfigError("probabilities: one entry per category required");
          double s = 0.0;
          for (double p : row) {
            if (!(p >= 0.0)) throw ConfigError("probabilities must be non-negative");
            s += p;
          }
          if (std::abs(s - 1.0) > 1e-9) throw ConfigError("probability rows must sum to 1");
        }
      }
      if (labels == LabelMode::property) throw ConfigError("categorical_factorized has no property labels");
      break;
    case DatasetKind::typed_polygon_cloud:
      if (n_points < 3) throw ConfigError("typed_polygon_cloud needs at least three points");
      if (n_types == 0 || n_points % n_types != 0) throw ConfigError("n_points must be a multiple of n_types");
      if (!(radius_min > 0.0) || !(radius_max >= radius_min)) throw ConfigError("bad polygon radius range");
      if (!(noise >= 0.0)) throw ConfigError("noise must be non-negative");
      if (!(validity_band > 0.0 && validity_band < 1.0)) throw ConfigError("validity_band must lie in (0, 1)");
      break;
  }
  if (!std::isfinite(constant_label)) throw ConfigError("constant_label must be finite");
}

ToyDataset::ToyDataset(DatasetSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  switch (spec_.kind) {
    case DatasetKind::gauss_mixture_2d: {
      space_.n_continuous = 2;
      const auto m = spec_.n_components;
      for (std::size_t k = 0; k < m; ++k) {
        const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(m);
        centers_.push_back(spec_.ring_radius * std::cos(a));
        centers_.push_back(spec_.ring_radius * std::sin(a));
      }
      PropertySpec ps;
      ps.kind = PropertyKind::component_index;
      ps.centers = centers_;
      property_.emplace(ps, space_);
      break;
    }
    case DatasetKind::categorical_factorized: {
      space_.categorical.assign(spec_.n_dims, spec_.n_categories);
      marginals_ = spec_.probabilities;
      if (marginals_.empty()) {
        const auto k = spec_.n_categories;
        for (std::size_t d = 0; d < spec_.n_dims; ++d) {
          std::vector<double> row(k);
          for (std::size_t c = 0; c < k; ++c) row[c] = 1.0 + static_cast<double>((c + d) % k);
          const double s = std::accumulate(row.begin(), row.end(), 0.0);
          for (double& p : row) p /= s;
          marginals_.push_back(std::move(row));
        }
      }
      break;
    }
    case DatasetKind::typed_polygon_cloud: {
      space_ = point_cloud_space(spec_.n_points, 2, spec_.n_types);
      prior_.continuous = ContinuousPrior::zero_com_gaussian;
      PropertySpec ps;
      ps.kind = PropertyKind::circumradius;
      property_.emplace(ps, space_);
      break;
    }
  }
}

State ToyDataset::sample_target(Rng& rng) const {
  State s;
  s.time = 1.0;
  switch (spec_.kind) {
    case DatasetKind::gauss_mixture_2d: {
      std::uniform_int_distribution<std::size_t> pick(0, spec_.n_components - 1);
      const std::size_t k = pick(rng);
      const double x = centers_[2 * k] + spec_.component_std * standard_normal(rng);
      const double y = centers_[2 * k + 1] + spec_.component_std * standard_normal(rng);
      s.values = {x, y};
      break;
    }
    case DatasetKind::categorical_factorized: {
      const auto k = spec_.n_categories;
      s.values.assign(spec_.n_dims * k, 0.0);
      for (std::size_t d = 0; d < spec_.n_dims; ++d) {
        std::discrete_distribution<std::size_t> dist(marginals_[d].begin(), marginals_[d].end());
        s.values[d * k + dist(rng)] = 1.0;
      }
      break;
    }
    case DatasetKind::typed_polygon_cloud: {
      const std::size_t n = spec_.n_points;
      const std::size_t types = spec_.n_types;
      const double radius = uniform(rng, spec_.radius_min, spec_.radius_max);
      const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      s.values.assign(n * 2 + n * types, 0.0);
      for (std::size_t slot = 0; slot < n; ++slot) {
        const std::size_t i = order[slot];  // angular position of the point stored in `slot`
        const double a = phase + 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
        s.values[2 * slot] = radius * std::cos(a) + spec_.noise * standard_normal(rng);
        s.values[2 * slot + 1] = radius * std::sin(a) + spec_.noise * standard_normal(rng);
        s.values[2 * n + slot * types + i % types] = 1.0;
      }
      const auto com = center_of_mass(s.values, space_);
      for (std::size_t slot = 0; slot < n; ++slot) {
        s.values[2 * slot] -= com[0];
        s.values[2 * slot + 1] -= com[1];
      }
      break;
    }
  }
  return s;
}

std::optional<double> ToyDataset::label_of(const State& x1) const {
  switch (spec_.labels) {
    case LabelMode::none: return std::nullopt;
    case LabelMode::constant: return spec_.constant_label;
    case LabelMode::property:
      if (spec_.kind == DatasetKind::gauss_mixture_2d) return static_cast<double>(nearest_center(x1.values));
      return property_->value(x1.values);
  }
  return std::nullopt;
}

std::vector<Coupling> ToyDataset::sample_couplings(std::size_t n, Rng& rng) const {
  std::vector<Coupling> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Coupling c;
    c.x1 = sample_target(rng);
    c.x0 = prior_sample(prior_, space_, rng);
    c.label = label_of(c.x1);
    out.push_back(std::move(c));
  }
  return out;
}

std::size_t ToyDataset::nearest_center(std::span<const double> x) const {
  if (centers_.empty()) throw UsageError("nearest_center: dataset has no mixture centres");
  if (x.size() < 2) throw StructuralError("nearest_center: need a 2-D point");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centers_.size() / 2; ++k) {
    const double dx = x[0] - centers_[2 * k];
    const double dy = x[1] - centers_[2 * k + 1];
    const double d = dx * dx + dy * dy;
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

bool ToyDataset::is_valid_polygon(std::span<const double> x) const {
  if (spec_.kind != DatasetKind::typed_polygon_cloud) throw UsageError("validity rules exist only for polygons");
  if (x.size() != space_.total_dim()) throw StructuralError("is_valid_polygon: wrong state size");
  const std::size_t n = spec_.n_points;
  const std::size_t types = spec_.n_types;
  const double band = spec_.validity_band;
  double cx = 0.0, cy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cx += x[2 * i];
    cy += x[2 * i + 1];
  }
  cx /= static_cast<double>(n);
  cy /= static_cast<double>(n);
  struct P {
    double angle, radius, x, y;
    std::size_t type;
  };
  std::vector<P> pts(n);
  double mean_r = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[2 * i] - cx;
    const double dy = x[2 * i + 1] - cy;
    auto block = x.subspan(2 * n + i * types, types);
    const auto type = static_cast<std::size_t>(std::max_element(block.begin(), block.end()) - block.begin());
    pts[i] = {std::atan2(dy, dx), std::hypot(dx, dy), dx, dy, type};
    mean_r += pts[i].radius;
  }
  mean_r /= static_cast<double>(n);
  if (mean_r < spec_.radius_min * (1.0 - band) || mean_r > spec_.radius_max * (1.0 + band)) return false;
  for (const auto& p : pts) {
    if (std::abs(p.radius - mean_r) > band * mean_r) return false;
  }
  std::sort(pts.begin(), pts.end(), [](const P& a, const P& b) { return a.angle < b.angle; });
  const double edge = 2.0 * mean_r * std::sin(std::numbers::pi / static_cast<double>(n));
  for (std::size_t k = 0; k < n; ++k) {
    const auto& a = pts[k];
    const auto& b = pts[(k + 1) % n];
    if (std::abs(std::hypot(a.x - b.x, a.y - b.y) - edge) > band * edge) return false;
    if (b.type != (a.type + 1) % types) return false;
  }
  return true;
}

// ------------------------------------------------------------ dataset file

DatasetFile DatasetFile::generate(const DatasetSpec& spec, std::size_t n, std::uint64_t seed) {
  ToyDataset ds(spec);
  Rng rng = make_stream(seed, 0);
  DatasetFile f;
  f.spec = spec;
  f.seed = seed;
  for (std::size_t i = 0; i < n; ++i) {
    State x1 = ds.sample_target(rng);
    if (auto y = ds.label_of(x1)) f.labels.push_back(*y);
    f.x1.push_back(std::move(x1));
  }
  return f;
}

std::string DatasetFile::serialize() const {
  const std::size_t dim = ToyDataset(spec).space().total_dim();
  const bool labelled = !labels.empty();
  if (labelled && labels.size() != x1.size()) throw StructuralError("dataset: label count differs from sample count");
  std::ostringstream os;
  os << "vfm-dataset\n"
     << "version " << kDatasetVersion << "\n"
     << "seed " << seed << "\n"
     << "count " << x1.size() << "\n"
     << "dim " << dim << "\n"
     << "labels " << (labelled ? 1 : 0) << "\n"
     << "spec " << Json(spec).dump() << "\n"
     << "end\n";
  for (std::size_t i = 0; i < x1.size(); ++i) {
    if (x1[i].values.size() != dim) throw StructuralError("dataset: sample has the wrong dimension");
    io::write_f64_le(os, x1[i].values);
    if (labelled) io::write_f64_le(os, std::span(&labels[i], 1));
  }
  return os.str();
}

DatasetFile DatasetFile::parse(const std::string& bytes) {
  std::istringstream is(bytes);
  auto expect = [&](const char* key) {
    auto [k, v] = io::split_key(io::read_header_line(is));
    if (k != key) throw FormatError(fmt::format("dataset header: expected '{}', found '{}'", key, k));
    return v;
  };
  if (io::read_header_line(is) != "vfm-dataset") throw FormatError("not a vfm dataset file (bad magic)");
  const std::string version = expect("version");
  if (version != std::to_string(kDatasetVersion)) {
    throw FormatError(fmt::format("unsupported dataset version '{}' (reader supports {})", version, kDatasetVersion));
  }
  DatasetFile f;
  std::size_t count = 0, dim = 0;
  int labelled = 0;
  try {
    f.seed = std::stoull(expect("seed"));
    count = std::stoull(expect("count"));
    dim = std::stoull(expect("dim"));
    labelled = std::stoi(expect("labels"));
    f.spec = Json::parse(expect("spec")).get<DatasetSpec>();
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(fmt::format("dataset header (version {}): {}", kDatasetVersion, e.what()));
  }
  if (io::read_header_line(is) != "end") throw FormatError("dataset header: missing 'end'");
  if (ToyDataset(f.spec).space().total_dim() != dim) throw FormatError("dataset header: dim does not match spec");
  const std::size_t row = dim + (labelled ? 1 : 0);
  auto payload = io::read_f64_le(is, count * row);
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("dataset: trailing bytes after payload");
  for (std::size_t i = 0; i < count; ++i) {
    State s;
    s.time = 1.0;
    s.values.assign(payload.begin() + static_cast<std::ptrdiff_t>(i * row),
                    payload.begin() + static_cast<std::ptrdiff_t>(i * row + dim));
    f.x1.push_back(std::move(s));
    if (labelled) f.labels.push_back(payload[i * row + dim]);
  }
  return f;
}

void DatasetFile::save(const std::filesystem::path& path) const { io::write_atomically(path, serialize()); }

DatasetFile DatasetFile::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("cannot open dataset '{}'", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

// ------------------------------------------------------------------ losses

Var record_loss(Tape& tape, const VariationalHead& head, const std::vector<Coupling>& batch, Rng& rng,
                bool use_labels, const LossWeights& w) {
  if (batch.empty()) throw DataError("empty training batch");
  const SpaceSpec& space = head.space();
  const std::size_t b = batch.size();
  const std::size_t d = space.total_dim();
  const std::size_t dc = space.n_continuous;
  const std::size_t dk = space.categorical_dim();
  const double t_clamp = head.config().t_clamp;

  Tensor xt(b, d);
  Tensor x1c(b, dc);
  Tensor x1k(b, dk);
  std::vector<double> ts(b);
  std::optional<std::vector<double>> ys;
  if (use_labels) ys.emplace(b);
  for (std::size_t r = 0; r < b; ++r) {
    const Coupling& c = batch[r];
    if (c.x0.values.size() != d || c.x1.values.size() != d) {
      throw StructuralError(fmt::format("coupling {} has the wrong dimension", r));
    }
    ts[r] = sample_time(rng, t_clamp);
    State x = interpolate(c.x0, c.x1, ts[r]);
    std::copy(x.values.begin(), x.values.end(), xt.row(r).begin());
    std::copy_n(c.x1.values.begin(), dc, x1c.row(r).begin());
    std::copy_n(c.x1.values.begin() + static_cast<std::ptrdiff_t>(dc), dk, x1k.row(r).begin());
    if (use_labels) {
      if (!c.label) throw DataError(fmt::format("coupling {} has no label", r));
      (*ys)[r] = *c.label;
    }
  }

  HeadOutput out = head.forward(tape, tape.constant(std::move(xt)), ts, ys);
  Var total;
  if (dc > 0) {
    Tensor inv2s(b, 1);
    double norm = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
      const double s2 = head.sigma2(ts[r]);
      inv2s.data[r] = 0.5 / s2;
      norm += 0.5 * static_cast<double>(dc) * std::log(2.0 * std::numbers::pi * s2);
    }
    Var sq = tape.row_sum(tape.square(tape.sub(out.means, tape.constant(std::move(x1c)))));
    Var cont = tape.add(tape.sum(tape.mul_col(sq, tape.constant(std::move(inv2s)))), tape.constant(Tensor::scalar(norm)));
    total = tape.scale(cont, w.continuous);
  }
  if (dk > 0) {
    const auto& card = space.categorical;
    const bool uniform_k = std::all_of(card.begin(), card.end(), [&](std::size_t k) { return k == card.front(); });
    Var nll;
    if (uniform_k) {
      const std::size_t k = card.front();
      const std::size_t rows = b * card.size();
      Var lp = tape.log_softmax(tape.reshape(out.logits, rows, k));
      x1k.rows = rows;
      x1k.cols = k;
      nll = tape.scale(tape.sum(tape.mul(lp, tape.constant(std::move(x1k)))), -1.0);
    } else {
      std::size_t offset = 0;
      for (std::size_t k : card) {
        Tensor onehot(b, k);
        for (std::size_t r = 0; r < b; ++r) std::copy_n(x1k.row(r).begin() + static_cast<std::ptrdiff_t>(offset), k, onehot.row(r).begin());
        Var lp = tape.log_softmax(tape.slice_cols(out.logits, offset, k));
        Var term = tape.scale(tape.sum(tape.mul(lp, tape.constant(std::move(onehot)))), -1.0);
        nll = nll.valid() ? tape.add(nll, term) : term;
        offset += k;
      }
    }
    Var cat = tape.scale(nll, w.categorical);
    total = total.valid() ? tape.add(total, cat) : cat;
  }
  return tape.scale(total, 1.0 / static_cast<double>(b));
}

double vfm_loss(const VariationalHead& head, const std::vector<Coupling>& batch, Rng& rng, const LossWeights& w) {
  if (head.config().label_conditioned) throw UsageError("vfm_loss expects an unconditioned head");
  Tape tape;
  return tape.value(record_loss(tape, head, batch, rng, false, w)).data[0];
}

double controlled_vfm_loss(const VariationalHead& head, const std::vector<Coupling>& batch, Rng& rng,
                           const LossWeights& w) {
  if (!head.config().label_conditioned) throw UsageError("controlled_vfm_loss expects a label-conditioned head");
  Tape tape;
  return tape.value(record_loss(tape, head, batch, rng, true, w)).data[0];
}

double loss_and_gradient(VariationalHead& head, const std::vector<Coupling>& batch, Rng& rng, bool use_labels,
                         const LossWeights& w) {
  if (use_labels != head.config().label_conditioned) {
    throw UsageError("loss kind does not match the head's conditioning");
  }
  Tape tape;
  Var loss = record_loss(tape, head, batch, rng, use_labels, w);
  head.params().zero_grad();
  tape.backward(loss);
  tape.accumulate_param_grads(head.params());
  return tape.value(loss).data[0];
}

// --------------------------------------------------------------- training

double learning_rate(const TrainConfig& cfg, std::uint64_t step) {
  if (cfg.schedule == LrSchedule::constant) return cfg.adam.lr;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.steps));
  return cfg.adam.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

std::string to_string(LrSchedule s) { return s == LrSchedule::constant ? "constant" : "cosine"; }

LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "cosine") return LrSchedule::cosine;
  throw ConfigError(fmt::format("unknown lr schedule '{}'", s));
}

void TrainConfig::validate() const {
  if (steps == 0) throw ConfigError("steps must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (log_every == 0) throw ConfigError("log_every must be positive");
  if (checkpoint_every == 0) throw ConfigError("checkpoint_every must be positive");
  if (!(adam.lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(clip_grad_norm >= 0.0)) throw ConfigError("clip_grad_norm must be >= 0");
  if (!(weights.continuous >= 0.0) || !(weights.categorical >= 0.0)) throw ConfigError("loss weights must be >= 0");
  dataset.validate();
  if (conditioned && dataset.labels == LabelMode::none) {
    throw ConfigError("conditioned training needs a labelled dataset");
  }
}

namespace {

HeadConfig resolved_head(const TrainConfig& cfg) {
  HeadConfig h = cfg.head;
  h.space = ToyDataset(cfg.dataset).space();
  h.label_conditioned = cfg.conditioned;
  return h;
}

std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void copy_params(const ad::ParamStore& from, ad::ParamStore& to, bool with_moments) {
  for (auto& p : to) {
    const auto idx = from.find(p.name);
    if (!idx) throw FormatError(fmt::format("checkpoint lacks parameter '{}'", p.name));
    const auto& src = from[*idx];
    if (!src.value.same_shape(p.value)) throw FormatError(fmt::format("checkpoint shape mismatch for '{}'", p.name));
    p.value = src.value;
    if (with_moments) {
      p.adam_m = src.adam_m;
      p.adam_v = src.adam_v;
    }
  }
  if (from.size() != to.size()) throw FormatError("checkpoint has parameters the head does not know");
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const TrainOutputs& out, const std::optional<std::filesystem::path>& resume,
                  const DatasetFile* data) {
  cfg.validate();
  ToyDataset ds(cfg.dataset);
  TrainResult res;
  res.head = make_head(resolved_head(cfg));
  VariationalHead& head = *res.head;
  if (data) {
    if (data->x1.empty()) throw DataError("training dataset is empty");
    if (ToyDataset(data->spec).space() != ds.space()) throw ConfigError("dataset file does not match the config");
    if (cfg.conditioned && data->labels.empty()) throw ConfigError("conditioned training needs a labelled dataset file");
  }

  const Json cfg_json = cfg;
  Rng rng = make_stream(cfg.seed, 0);
  std::uint64_t step = 0;
  if (resume) {
    ad::Checkpoint ck = ad::load_checkpoint(*resume);
    copy_params(ck.params, head.params(), true);
    step = ck.header.step;
    std::istringstream rs(ck.header.rng_state);
    rs >> rng;
    if (rs.fail()) throw FormatError("checkpoint: unreadable rng state");
    spdlog::info("resuming from step {}", step);
  }
  head.params().set_step(step);

  auto save = [&](std::uint64_t at) {
    if (!out.checkpoint) return;
    ad::CheckpointHeader h;
    h.seed = cfg.seed;
    h.config_hash = config_hash(cfg_json);
    h.step = at;
    h.rng_state = rng_state(rng);
    h.config_json = cfg_json.dump();
    ad::save_checkpoint(*out.checkpoint, h, head.params());
  };
  auto write_metrics = [&] {
    if (out.metrics_csv) io::write_atomically(*out.metrics_csv, metrics_csv(res.metrics));
  };

  const auto start = std::chrono::steady_clock::now();
  while (step < cfg.steps) {
    const Rng rng_before = rng;
    std::vector<Coupling> batch;
    if (data) {
      std::uniform_int_distribution<std::size_t> pick(0, data->x1.size() - 1);
      batch.reserve(cfg.batch_size);
      for (std::size_t i = 0; i < cfg.batch_size; ++i) {
        const std::size_t j = pick(rng);
        Coupling c;
        c.x1 = data->x1[j];
        c.x0 = prior_sample(ds.prior(), ds.space(), rng);
        if (!data->labels.empty()) c.label = data->labels[j];
        batch.push_back(std::move(c));
      }
    } else {
      batch = ds.sample_couplings(cfg.batch_size, rng);
    }
    double loss = 0.0;
    bool ok = true;
    try {
      loss = loss_and_gradient(head, batch, rng, cfg.conditioned, cfg.weights);
      ok = std::isfinite(loss);
      if (!ok) res.abort_reason = fmt::format("non-finite loss at step {}", step + 1);
    } catch (const NumericError& e) {
      ok = false;
      res.abort_reason = fmt::format("step {}: {}", step + 1, e.what());
    }
    const double gn = ok ? head.params().grad_norm() : 0.0;
    if (ok && cfg.clip_grad_norm > 0.0 && gn > cfg.clip_grad_norm) head.params().scale_grads(cfg.clip_grad_norm / gn);
    ad::AdamConfig adam = cfg.adam;
    adam.lr = learning_rate(cfg, step);
    if (ok && !ad::adam_step(head.params(), adam)) {
      ok = false;
      res.abort_reason = fmt::format("non-finite gradient at step {}", step + 1);
    }
    if (!ok) {
      rng = rng_before;
      spdlog::error("training aborted: {}", res.abort_reason);
      res.aborted = true;
      save(step);
      write_metrics();
      res.steps_done = step;
      return res;
    }
    ++step;
    if (step % cfg.log_every == 0 || step == cfg.steps) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      res.metrics.push_back({step, loss, gn, secs});
      spdlog::debug("step {} loss {:.6f} grad_norm {:.4f}", step, loss, gn);
    }
    if (step % cfg.checkpoint_every == 0 && step != cfg.steps) save(step);
  }
  save(step);
  write_metrics();
  res.steps_done = step;
  return res;
}

std::unique_ptr<VariationalHead> load_head(const std::filesystem::path& checkpoint) {
  ad::Checkpoint ck = ad::load_checkpoint(checkpoint);
  TrainConfig cfg;
  try {
    cfg = Json::parse(ck.header.config_json).get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("checkpoint config: {}", e.what()));
  }
  auto head = make_head(resolved_head(cfg));
  copy_params(ck.params, head->params(), false);
  return head;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string s = "step,loss,grad_norm,seconds\n";
  for (const auto& r : rows) s += fmt::format("{},{:.17g},{:.17g},{:.6f}\n", r.step, r.loss, r.grad_norm, r.seconds);
  return s;
}

std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::gauss_mixture_2d: return "gauss_mixture_2d";
    case DatasetKind::categorical_factorized: return "categorical_factorized";
    case DatasetKind::typed_polygon_cloud: return "typed_polygon_cloud";
  }
  return "?";
}

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "gauss_mixture_2d") return DatasetKind::gauss_mixture_2d;
  if (s == "categorical_factorized") return DatasetKind::categorical_factorized;
  if (s == "typed_polygon_cloud") return DatasetKind::typed_polygon_cloud;
  throw ConfigError(fmt::format("unknown dataset kind '{}'", s));
}

}  // namespace vfm
