#include "cli.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "vfm/ad/checkpoint.hpp"
#include "vfm/audit.hpp"
#include "vfm/binary_io.hpp"
#include "vfm/config.hpp"
#include "vfm/error.hpp"
#include "vfm/metrics.hpp"
#include "vfm/sampling.hpp"
#include "vfm/training.hpp"

namespace vfm::cli {

namespace {

namespace fs = std::filesystem;

class ThresholdFailure : public Error {
 public:
  using Error::Error;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::array<char, 32> buf{};
  std::strftime(buf.data(), buf.size(), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf.data();
}

std::string git_describe() {
  std::string out;
  if (FILE* p = popen("git describe --always --dirty --tags 2>/dev/null", "r")) {
    std::array<char, 256> buf{};
    while (fgets(buf.data(), buf.size(), p)) out += buf.data();
    pclose(p);
  }
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("cannot open '{}'", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Json load_json_file(const fs::path& path) {
  try {
    return Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

/// Recursive merge where nulls in `patch` are kept as values.
void deep_merge(Json& base, const Json& patch) {
  for (const auto& [key, value] : patch.items()) {
    if (base.contains(key) && base[key].is_object() && value.is_object()) {
      deep_merge(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

struct Run {
  std::string command;
  std::optional<std::string> config_path;
  fs::path out_dir = ".";
  Json config;
  std::vector<std::string> outputs;
  Json extra = Json::object();
  std::string started;
  std::string status = "ok";

  fs::path output(const std::string& name) {
    outputs.push_back(name);
    return out_dir / name;
  }
};

/// defaults <- file (or the snapshot of a manifest). Top-level keys must
/// already exist in the defaults.
Json resolve_config(const std::string& command, Json defaults, const std::optional<std::string>& path) {
  if (!path) return defaults;
  Json file = load_json_file(*path);
  if (!file.is_object()) throw ConfigError(fmt::format("{}: expected a JSON object", *path));
  if (file.contains("command") && file.contains("config")) {
    if (file["command"] != command) {
      throw ConfigError(fmt::format("manifest was written by '{}', not '{}'", file["command"].get<std::string>(), command));
    }
    file = file["config"];
  }
  for (const auto& [key, _] : file.items()) {
    if (!defaults.contains(key)) throw ConfigError(fmt::format("{}: unknown key '{}'", *path, key));
  }
  deep_merge(defaults, file);
  return defaults;
}

void write_manifest(const Run& run) {
  Json m = {{"command", run.command},
            {"config_path", run.config_path ? Json(*run.config_path) : Json(nullptr)},
            {"config", run.config},
            {"config_hash", config_hash(run.config)},
            {"seed", run.config.value("seed", Json(nullptr))},
            {"git_describe", git_describe()},
            {"started", run.started},
            {"finished", utc_now()},
            {"status", run.status},
            {"outputs", run.outputs}};
  for (const auto& [k, v] : run.extra.items()) m[k] = v;
  io::write_atomically(run.out_dir / "manifest.json", m.dump(2) + "\n");
}

template <class T>
T get(const Json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(fmt::format("config key '{}': {}", key, e.what()));
  }
}

std::optional<std::string> optional_string(const Json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return get<std::string>(j, key);
}

std::optional<double> optional_double(const Json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return get<double>(j, key);
}

TrainConfig checkpoint_config(const fs::path& path) {
  const ad::Checkpoint ck = ad::load_checkpoint(path);
  return parse_config<TrainConfig>(Json::parse(ck.header.config_json), "checkpoint config");
}

PropertySpec property_for(const Json& j, const ToyDataset& ds) {
  if (j.is_null()) {
    if (!ds.property()) throw ConfigError("dataset has no property function; name one explicitly");
    return ds.property()->spec();
  }
  if (j.is_string()) {
    PropertySpec ps;
    ps.kind = property_kind_from_string(j.get<std::string>());
    if (ps.kind == PropertyKind::component_index) ps.centers = ds.centers();
    return ps;
  }
  return parse_config<PropertySpec>(j, "property");
}

// ----------------------------------------------------------- generate-data

Json generate_defaults() { return Json{{"dataset", DatasetSpec{}}, {"n", 10000}, {"seed", 0}}; }

void cmd_generate_data(Run& run) {
  const auto spec = parse_config<DatasetSpec>(run.config["dataset"], "dataset");
  const auto n = get<std::size_t>(run.config, "n");
  if (n == 0) throw ConfigError("n must be positive");
  const auto file = DatasetFile::generate(spec, n, get<std::uint64_t>(run.config, "seed"));
  file.save(run.output("dataset.bin"));
  run.extra["samples"] = n;
}

// ------------------------------------------------------------------- train

Json train_defaults() {
  return Json{{"train", TrainConfig{}}, {"loss", "vfm"}, {"data", nullptr}, {"resume", nullptr}, {"seed", 0}};
}

void cmd_train(Run& run) {
  Json& cfg = run.config;
  cfg["train"]["seed"] = cfg["seed"];
  TrainConfig tc = parse_config<TrainConfig>(cfg["train"], "train");
  const std::string loss = get<std::string>(cfg, "loss");
  const auto data_path = optional_string(cfg, "data");
  const auto resume = optional_string(cfg, "resume");

  std::optional<DatasetFile> data;
  if (data_path) {
    data = DatasetFile::load(*data_path);
    tc.dataset = data->spec;
  }
  const bool labelled = data ? !data->labels.empty() : tc.dataset.labels != LabelMode::none;
  if (loss == "vfm") {
    if (labelled) spdlog::warn("training data carries labels; --loss vfm ignores them");
    tc.conditioned = false;
  } else if (loss == "controlled-vfm") {
    if (!labelled) throw ConfigError("--loss controlled-vfm needs labelled training data");
    tc.conditioned = true;
  } else {
    throw ConfigError(fmt::format("unknown loss '{}' (expected vfm or controlled-vfm)", loss));
  }
  cfg["train"]["conditioned"] = tc.conditioned;
  tc.validate();

  TrainOutputs out;
  out.checkpoint = run.output("checkpoint.ckpt");
  out.metrics_csv = run.output("metrics.csv");
  std::optional<fs::path> resume_path;
  if (resume) resume_path = *resume;
  const TrainResult res = train(tc, out, resume_path, data ? &*data : nullptr);
  run.extra["steps_done"] = res.steps_done;
  if (!res.metrics.empty()) run.extra["final_loss"] = res.metrics.back().loss;
  if (res.aborted) {
    run.status = "aborted";
    write_manifest(run);
    throw NumericError(res.abort_reason);
  }
}

// ------------------------------------------------------------------ sample

Json sample_defaults() {
  return Json{{"checkpoint", nullptr},
              {"n", 1000},
              {"seed", 0},
              {"mode", "unconditional"},
              {"y", nullptr},
              {"integrator", IntegratorConfig{}},
              {"guidance", GuidanceConfig{}},
              {"likelihood", {{"property", nullptr}, {"sigma_y", 0.3}, {"target", nullptr}}},
              {"workers", 1},
              {"chunk_size", 64},
              {"trajectory", false}};
}

void cmd_sample(Run& run) {
  const Json& cfg = run.config;
  const auto ckpt = optional_string(cfg, "checkpoint");
  if (!ckpt) throw ConfigError("sample needs --checkpoint");
  const TrainConfig tc = checkpoint_config(*ckpt);
  const auto head = load_head(*ckpt);
  const ToyDataset ds(tc.dataset);

  SampleConfig sc;
  sc.integrator = parse_config<IntegratorConfig>(cfg["integrator"], "integrator");
  sc.guidance = parse_config<GuidanceConfig>(cfg["guidance"], "guidance");
  sc.mode = sample_mode_from_string(get<std::string>(cfg, "mode"));
  sc.y = optional_double(cfg, "y");
  sc.prior = ds.prior();
  sc.seed = get<std::uint64_t>(cfg, "seed");
  sc.workers = get<std::size_t>(cfg, "workers");
  sc.chunk_size = get<std::size_t>(cfg, "chunk_size");
  sc.keep_trajectories = get<bool>(cfg, "trajectory");
  const auto n = get<std::size_t>(cfg, "n");
  std::optional<double> y_column;
  if (sc.mode == SampleMode::conditioned) {
    if (!sc.y) throw ConfigError("conditioned mode needs --y");
    if (!head->config().label_conditioned) throw ConfigError("conditioned mode needs a conditioned checkpoint");
    y_column = sc.y;
  } else if (sc.y) {
    throw ConfigError("--y is only meaningful in conditioned mode");
  }
  if (sc.mode == SampleMode::guided) {
    const Json& lj = cfg["likelihood"];
    const auto target = optional_double(lj, "target");
    if (!target) throw ConfigError("guided mode needs --target");
    PropertyFunction f(property_for(lj.value("property", Json(nullptr)), ds), ds.space());
    sc.likelihood.emplace(std::move(f), get<double>(lj, "sigma_y"), *target);
    y_column = target;
  }
  if ((sc.mode == SampleMode::unconditional || sc.mode == SampleMode::guided) && head->config().label_conditioned) {
    throw ConfigError(fmt::format("{} mode needs an unconditioned checkpoint", to_string(sc.mode)));
  }

  const SampleResult res = sample(*head, n, sc);

  const SpaceSpec& space = ds.space();
  std::string csv = "sample";
  for (std::size_t i = 0; i < space.n_continuous; ++i) csv += fmt::format(",x{}", i);
  for (std::size_t b = 0; b < space.categorical.size(); ++b) csv += fmt::format(",c{}", b);
  if (ds.property()) csv += ",property";
  csv += ",mode,seed,y\n";
  std::vector<double> props;
  if (ds.property()) props = ds.property()->values(res.samples);
  for (std::size_t r = 0; r < n; ++r) {
    csv += fmt::format("{}", r);
    for (std::size_t i = 0; i < space.n_continuous; ++i) csv += fmt::format(",{:.17g}", res.samples(r, i));
    for (std::size_t c : res.categories[r]) csv += fmt::format(",{}", c);
    if (ds.property()) csv += fmt::format(",{:.17g}", props[r]);
    csv += fmt::format(",{},{},{}\n", to_string(sc.mode), sc.seed, y_column ? fmt::format("{:.17g}", *y_column) : "");
  }
  io::write_atomically(run.output("samples.csv"), csv);
  if (sc.keep_trajectories) {
    TrajectoryFile tf;
    tf.dim = space.total_dim();
    tf.times = res.times;
    tf.chains = res.trajectories;
    io::write_atomically(run.output("trajectory.bin"), tf.serialize());
  }
  run.extra["nfe_per_chain"] = res.nfe.front();
  run.extra["nfe_total"] = res.nfe.front() * n;
  run.extra["refine_diverged"] = res.refine_diverged;
  run.extra["refine_total"] = res.refine_total;
}

// -------------------------------------------------------------------- eval

Json eval_defaults() {
  return Json{{"samples", nullptr},
              {"reference", nullptr},
              {"seed", 0},
              {"n_projections", 64},
              {"property", nullptr},
              {"target", nullptr},
              {"thresholds",
               {{"max_sliced_w2", nullptr},
                {"max_tv", nullptr},
                {"min_validity", nullptr},
                {"max_property_mae", nullptr}}}};
}

/// Samples from either a dataset file or a samples CSV written by `sample`.
ad::Tensor load_samples(const fs::path& path, const SpaceSpec& space) {
  const std::string bytes = read_file(path);
  if (bytes.starts_with("vfm-dataset\n")) {
    const DatasetFile f = DatasetFile::parse(bytes);
    ad::Tensor out(f.x1.size(), space.total_dim());
    for (std::size_t r = 0; r < f.x1.size(); ++r) {
      if (f.x1[r].values.size() != space.total_dim()) throw ConfigError("samples and reference spaces differ");
      std::copy(f.x1[r].values.begin(), f.x1[r].values.end(), out.row(r).begin());
    }
    return out;
  }
  std::istringstream in(bytes);
  std::string line;
  if (!std::getline(in, line)) throw DataError(fmt::format("{}: empty samples file", path.string()));
  std::vector<std::string> header;
  for (std::stringstream hs(line); std::getline(hs, line, ',');) header.push_back(line);
  std::vector<int> x_col(space.n_continuous, -1), c_col(space.categorical.size(), -1);
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto& h = header[c];
    if (h.size() < 2 || (h[0] != 'x' && h[0] != 'c') || h.find_first_not_of("0123456789", 1) != std::string::npos) continue;
    const std::size_t idx = std::stoul(h.substr(1));
    auto& cols = h[0] == 'x' ? x_col : c_col;
    if (idx >= cols.size()) throw ConfigError(fmt::format("{}: column '{}' does not fit the reference space", path.string(), h));
    cols[idx] = static_cast<int>(c);
  }
  for (int c : x_col) if (c < 0) throw ConfigError(fmt::format("{}: missing coordinate columns", path.string()));
  for (int c : c_col) if (c < 0) throw ConfigError(fmt::format("{}: missing category columns", path.string()));
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    for (std::stringstream ls(line); std::getline(ls, line, ',');) cells.push_back(line);
    if (cells.size() + 1 < header.size()) throw DataError(fmt::format("{}: short row", path.string()));
    std::vector<double> v(space.total_dim(), 0.0);
    for (std::size_t i = 0; i < x_col.size(); ++i) v[i] = std::stod(cells[static_cast<std::size_t>(x_col[i])]);
    for (std::size_t b = 0; b < c_col.size(); ++b) {
      const std::size_t k = std::stoul(cells[static_cast<std::size_t>(c_col[b])]);
      if (k >= space.categorical[b]) throw DataError(fmt::format("{}: category out of range", path.string()));
      v[space.block_offset(b) + k] = 1.0;
    }
    rows.push_back(std::move(v));
  }
  if (rows.empty()) throw DataError(fmt::format("{}: no samples", path.string()));
  ad::Tensor out(rows.size(), space.total_dim());
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), out.row(r).begin());
  return out;
}

void cmd_eval(Run& run) {
  const Json& cfg = run.config;
  const auto samples_path = optional_string(cfg, "samples");
  const auto ref_path = optional_string(cfg, "reference");
  if (!samples_path || !ref_path) throw ConfigError("eval needs --samples and --reference");
  if (!fs::exists(*samples_path)) throw ConfigError(fmt::format("missing input '{}'", *samples_path));
  if (!fs::exists(*ref_path)) throw ConfigError(fmt::format("missing input '{}'", *ref_path));
  const DatasetFile ref = DatasetFile::load(*ref_path);
  const ToyDataset ds(ref.spec);
  const SpaceSpec& space = ds.space();
  const ad::Tensor samples = load_samples(*samples_path, space);
  ad::Tensor reference(ref.x1.size(), space.total_dim());
  for (std::size_t r = 0; r < ref.x1.size(); ++r) std::copy(ref.x1[r].values.begin(), ref.x1[r].values.end(), reference.row(r).begin());

  const auto seed = get<std::uint64_t>(cfg, "seed");
  const std::string hash = config_hash(cfg);
  std::vector<MetricRecord> recs;
  auto add = [&](std::string name, double v, std::size_t nb) {
    recs.push_back({std::move(name), v, samples.rows, nb, seed, hash});
  };
  std::optional<double> w2, tv, validity, mae;
  if (space.n_continuous > 0) {
    ad::Tensor a(samples.rows, space.n_continuous), b(reference.rows, space.n_continuous);
    for (std::size_t r = 0; r < a.rows; ++r) std::copy_n(samples.row(r).begin(), a.cols, a.row(r).begin());
    for (std::size_t r = 0; r < b.rows; ++r) std::copy_n(reference.row(r).begin(), b.cols, b.row(r).begin());
    Rng rng = make_stream(seed, 0);
    w2 = sliced_w2(a, b, get<std::size_t>(cfg, "n_projections"), rng);
    add("sliced_w2", *w2, b.rows);
  }
  if (!space.categorical.empty()) {
    std::vector<std::vector<double>> target = ds.marginals();
    if (target.empty()) {
      for (std::size_t b = 0; b < space.categorical.size(); ++b) {
        std::vector<double> freq(space.categorical[b], 0.0);
        for (std::size_t r = 0; r < reference.rows; ++r) {
          auto block = reference.row(r).subspan(space.block_offset(b), space.categorical[b]);
          freq[static_cast<std::size_t>(std::max_element(block.begin(), block.end()) - block.begin())] += 1.0 / static_cast<double>(reference.rows);
        }
        target.push_back(std::move(freq));
      }
    }
    const MarginalTv m = marginal_tv(samples, space, target);
    tv = m.max;
    add("marginal_tv_max", m.max, reference.rows);
    for (std::size_t d = 0; d < m.per_dim.size(); ++d) add(fmt::format("marginal_tv_dim{}", d), m.per_dim[d], reference.rows);
    std::vector<std::vector<std::size_t>> cats;
    for (std::size_t r = 0; r < samples.rows; ++r) cats.push_back(argmax_categories(samples.row(r), space));
    add("duplicate_fraction", duplicate_fraction(cats), 0);
  }
  if (ref.spec.kind == DatasetKind::typed_polygon_cloud) {
    validity = validity_rate(samples, [&](std::span<const double> x) { return ds.is_valid_polygon(x); });
    add("validity_rate", *validity, 0);
  }
  if (!cfg["property"].is_null()) {
    const auto target = optional_double(cfg, "target");
    if (!target) throw ConfigError("property_mae needs --target");
    const PropertyFunction f(property_for(cfg["property"], ds), space);
    mae = property_mae(samples, f, *target);
    add("property_mae", *mae, 0);
  }
  io::write_atomically(run.output("metrics.csv"), metrics_report_csv(recs));

  const Json& th = cfg["thresholds"];
  std::vector<std::string> failures;
  auto check = [&](const char* key, const std::optional<double>& v, bool upper) {
    const auto limit = optional_double(th, key);
    if (!limit) return;
    if (!v) throw ConfigError(fmt::format("threshold '{}' does not apply to this evaluation", key));
    if (upper ? *v > *limit : *v < *limit) failures.push_back(fmt::format("{}: {:.6g} vs {:.6g}", key, *v, *limit));
  };
  check("max_sliced_w2", w2, true);
  check("max_tv", tv, true);
  check("min_validity", validity, false);
  check("max_property_mae", mae, true);
  if (!failures.empty()) {
    run.status = "threshold_failure";
    write_manifest(run);
    std::string msg = "threshold failure";
    for (const auto& f : failures) msg += "; " + f;
    throw ThresholdFailure(msg);
  }
}

// -------------------------------------------------------------- audit

Json audit_defaults() {
  DatasetSpec ds;
  ds.kind = DatasetKind::typed_polygon_cloud;
  HeadConfig head;
  head.architecture = Architecture::equivariant;
  head.hidden = {32};
  head.rounds = 2;
  head.zero_init_output = false;
  AuditTolerances tol;
  return Json{{"dataset", ds},
              {"head", head},
              {"checkpoint", nullptr},
              {"families", {"permutations", "rotations", "translations", "rigid"}},
              {"histogram_family", "rigid"},
              {"trials", 32},
              {"seed", 0},
              {"integrator", IntegratorConfig{}},
              {"prior_samples", 10000},
              {"histogram_samples", 256},
              {"expect", "equivariant"},
              {"tolerances",
               {{"exact", tol.exact},
                {"head", tol.head},
                {"trajectory", tol.trajectory},
                {"negative_control", tol.negative_control}}}};
}

struct AuditLine {
  std::string tag;
  std::string check;
  std::string family;
  double value;
  bool upper;  // pass when value <= tol (else value > tol)
  double tol;
  bool pass() const { return upper ? value <= tol : value > tol; }
};

void cmd_audit(Run& run) {
  const Json& cfg = run.config;
  std::unique_ptr<VariationalHead> head;
  DatasetSpec dspec;
  std::string source;
  if (const auto ck = optional_string(cfg, "checkpoint")) {
    const TrainConfig tc = checkpoint_config(*ck);
    dspec = tc.dataset;
    head = load_head(*ck);
    source = "checkpoint " + *ck;
  } else {
    dspec = parse_config<DatasetSpec>(cfg["dataset"], "dataset");
    HeadConfig hc = parse_config<HeadConfig>(cfg["head"], "head");
    hc.space = ToyDataset(dspec).space();
    hc.label_conditioned = false;
    head = make_head(hc);
    source = fmt::format("fresh {} head (init_seed {})", to_string(hc.architecture), hc.init_seed);
  }
  if (head->config().label_conditioned) throw ConfigError("equivariance-audit expects an unconditioned head");
  const ToyDataset ds(dspec);
  const SpaceSpec& space = ds.space();
  const auto families_raw = get<std::vector<std::string>>(cfg, "families");
  if (families_raw.empty()) throw ConfigError("families must not be empty");
  std::vector<GroupFamily> families;
  for (const auto& f : families_raw) families.push_back(group_family_from_string(f));
  const GroupFamily hist_family = group_family_from_string(get<std::string>(cfg, "histogram_family"));
  const auto trials = get<std::size_t>(cfg, "trials");
  const auto seed = get<std::uint64_t>(cfg, "seed");
  const auto integrator = parse_config<IntegratorConfig>(cfg["integrator"], "integrator");
  const auto prior_samples = get<std::size_t>(cfg, "prior_samples");
  const auto hist_samples = get<std::size_t>(cfg, "histogram_samples");
  const std::string expect = get<std::string>(cfg, "expect");
  if (expect != "equivariant" && expect != "negative_control") {
    throw ConfigError("expect must be 'equivariant' or 'negative_control'");
  }
  const Json& tj = cfg["tolerances"];
  AuditTolerances tol{get<double>(tj, "exact"), get<double>(tj, "head"), get<double>(tj, "trajectory"),
                      get<double>(tj, "negative_control")};

  std::vector<AuditLine> lines;
  const InvariantPrior prior = ds.prior();
  for (GroupFamily f : families) {
    const PriorAudit pa = audit_prior_invariance(prior, space, f, prior_samples, seed);
    lines.push_back({"H1", "prior-covariance-invariance", to_string(f), pa.covariance_residual, true, tol.exact});
    lines.push_back({"H1", "prior-second-moment", to_string(f), pa.moment_deviation, true, pa.moment_tolerance});
    if (!space.categorical.empty()) {
      lines.push_back({"H1", "prior-category-mean", to_string(f), pa.categorical_deviation, true, pa.categorical_tolerance});
    }
  }
  if (prior.continuous == ContinuousPrior::zero_com_gaussian) {
    const PriorAudit pa = audit_prior_invariance(prior, space, GroupFamily::identity, prior_samples, seed);
    lines.push_back({"H1", "prior-zero-com", "-", pa.max_com, true, tol.exact});
  }
  const ConditionalVelocitySpec vspec{VelocityKind::optimal_transport, head->config().t_clamp};
  for (GroupFamily f : families) {
    lines.push_back({"H2", "bi-equivariance", to_string(f),
                     audit_bi_equivariance(ot_velocity(vspec), space, f, trials, seed, prior), true, tol.exact});
  }
  {
    Rng rng = make_stream(seed, 0xb1a5);
    std::vector<double> bias(space.total_dim(), 0.0);
    for (std::size_t i = 0; i < space.n_continuous; ++i) bias[i] = standard_normal(rng);
    const GroupFamily f = space.n_continuous > 1 ? GroupFamily::rotations : GroupFamily::permutations;
    lines.push_back({"H2", "negative-control-biased", to_string(f),
                     audit_bi_equivariance(biased_velocity(vspec, bias), space, f, trials, seed, prior), false,
                     tol.negative_control});
  }
  for (GroupFamily f : families) {
    const ModelAudit ma = audit_model_equivariance(*head, f, trials, seed, prior);
    lines.push_back({"H3", "expectation-equivariance", to_string(f), ma.expectation_residual, true, tol.head});
    lines.push_back({"H3", "velocity-equivariance", to_string(f), ma.velocity_residual, true, tol.head});
  }
  for (GroupFamily f : families) {
    const MarginalAudit ma = audit_marginal_invariance(*head, prior, integrator, f, std::min<std::size_t>(trials, 16),
                                                       seed, f == hist_family ? hist_samples : 0);
    lines.push_back({"C", fmt::format("trajectory-commutation-K{}", integrator.steps), to_string(f),
                     ma.trajectory_residual, true, tol.trajectory});
    if (f == hist_family && hist_samples > 0) {
      lines.push_back({"C", "pairwise-distance-histogram", to_string(f), ma.histogram_deviation, true,
                       ma.histogram_tolerance});
    }
  }

  auto group_pass = [&](const std::string& tag) {
    bool ok = true;
    for (const auto& l : lines) ok = ok && (l.tag != tag || l.pass());
    return ok;
  };
  const bool h1 = group_pass("H1"), h2 = group_pass("H2"), h3 = group_pass("H3"), c = group_pass("C");
  const bool verdict = expect == "equivariant" ? (h1 && h2 && h3 && c) : (h1 && h2 && !h3);

  std::string report = "vfm equivariance audit\n";
  report += fmt::format("head: {}\n", source);
  report += fmt::format("space: {} continuous, {} categorical blocks\n", space.n_continuous, space.categorical.size());
  report += fmt::format("trials: {}  seed: {}  integrator: {} K={}\n", trials, seed, to_string(integrator.scheme), integrator.steps);
  report += fmt::format("{:<4}{:<30}{:<14}{:>12}  {:<2} {:<9} {}\n", "hyp", "check", "family", "residual", "", "tolerance", "result");
  for (const auto& l : lines) {
    report += fmt::format("{:<4}{:<30}{:<14}{:>12.3e}  {:<2} {:<9.1e} {}\n", l.tag, l.check, l.family, l.value,
                          l.upper ? "<=" : ">", l.tol, l.pass() ? "PASS" : "FAIL");
  }
  auto word = [](bool ok) { return ok ? "PASS" : "FAIL"; };
  report += fmt::format("summary: H1 {}  H2 {}  H3 {}  conclusion {}\n", word(h1), word(h2), word(h3), word(c));
  report += fmt::format("expect: {}  verdict: {}\n", expect, word(verdict));
  io::write_atomically(run.output("audit_report.txt"), report);
  std::fputs(report.c_str(), stdout);
  run.extra["verdict"] = verdict ? "PASS" : "FAIL";
  if (!verdict) {
    run.status = "threshold_failure";
    write_manifest(run);
    throw ThresholdFailure(fmt::format("audit verdict FAIL (expect {})", expect));
  }
}

// ------------------------------------------------------------ flag wiring

template <class T>
void set_if(Json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Variational flow matching toolkit", "vfm"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "vfm 0.1.0");

  std::optional<std::string> config_path;
  std::string out_dir = ".";
  bool verbose = false;
  std::optional<std::uint64_t> seed;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file or a manifest.json to replay");
    sub->add_option("--out-dir", out_dir, "Directory for outputs and manifest.json");
    sub->add_option("--seed", seed, "Random seed");
    sub->add_flag("-v,--verbose", verbose, "Debug logging");
  };

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "Materialise a toy dataset");
  common(gen);
  std::optional<std::string> g_kind, g_labels;
  std::optional<std::size_t> g_n;
  gen->add_option("--kind", g_kind, "gauss_mixture_2d | categorical_factorized | typed_polygon_cloud");
  gen->add_option("--labels", g_labels, "none | property | constant");
  gen->add_option("-n,--n", g_n, "Number of samples");

  // train
  auto* tr = app.add_subcommand("train", "Train a variational head");
  common(tr);
  std::optional<std::string> t_loss, t_data, t_resume, t_arch, t_kind, t_labels;
  std::optional<std::size_t> t_steps, t_batch, t_log;
  std::optional<double> t_lr;
  tr->add_option("--loss", t_loss, "vfm | controlled-vfm");
  tr->add_option("--data", t_data, "Dataset file from generate-data");
  tr->add_option("--resume", t_resume, "Checkpoint to resume from");
  tr->add_option("--arch", t_arch, "mlp | equivariant");
  tr->add_option("--kind", t_kind, "Dataset kind for online sampling");
  tr->add_option("--labels", t_labels, "Label mode for online sampling");
  tr->add_option("--steps", t_steps, "Total optimisation steps");
  tr->add_option("--batch-size", t_batch, "Batch size");
  tr->add_option("--log-every", t_log, "Metrics cadence in steps");
  tr->add_option("--lr", t_lr, "Adam learning rate");

  // sample
  auto* sa = app.add_subcommand("sample", "Generate samples from a checkpoint");
  common(sa);
  std::optional<std::string> s_ckpt, s_mode, s_guide, s_scheme;
  std::optional<std::size_t> s_n, s_nfe, s_steps, s_inner, s_workers;
  std::optional<double> s_y, s_target, s_damping, s_sigma_y;
  bool s_traj = false;
  sa->add_option("--checkpoint", s_ckpt, "Checkpoint from train");
  sa->add_option("--mode", s_mode, "unconditional | conditioned | guided");
  sa->add_option("-n,--n", s_n, "Number of chains");
  sa->add_option("--y", s_y, "Label for conditioned mode");
  sa->add_option("--guide", s_guide, "Property used as guidance likelihood");
  sa->add_option("--target", s_target, "Guidance target y");
  sa->add_option("--sigma-y", s_sigma_y, "Guidance observation noise");
  sa->add_option("--inner-steps", s_inner, "Fixed-point iterations S");
  sa->add_option("--damping", s_damping, "Fixed-point damping lambda");
  sa->add_option("--scheme", s_scheme, "euler | rk4");
  sa->add_option("--steps", s_steps, "Integrator steps K");
  sa->add_option("--nfe", s_nfe, "Velocity evaluations per chain (sets K)");
  sa->add_option("--workers", s_workers, "Worker threads");
  sa->add_flag("--trajectory", s_traj, "Also write trajectory.bin");

  // eval
  auto* ev = app.add_subcommand("eval", "Compute metrics of samples against a reference dataset");
  common(ev);
  std::optional<std::string> e_samples, e_ref, e_prop;
  std::optional<double> e_target, e_max_w2, e_max_tv, e_min_valid, e_max_mae;
  std::optional<std::size_t> e_proj;
  ev->add_option("--samples", e_samples, "samples.csv or dataset file");
  ev->add_option("--reference", e_ref, "Reference dataset file");
  ev->add_option("--property", e_prop, "Property for property_mae");
  ev->add_option("--target", e_target, "Target value for property_mae");
  ev->add_option("--projections", e_proj, "Sliced-W2 projections");
  ev->add_option("--max-sliced-w2", e_max_w2, "Fail (exit 4) above this sliced W2");
  ev->add_option("--max-tv", e_max_tv, "Fail above this marginal TV");
  ev->add_option("--min-validity", e_min_valid, "Fail below this validity rate");
  ev->add_option("--max-property-mae", e_max_mae, "Fail above this property MAE");

  // equivariance-audit
  auto* au = app.add_subcommand("equivariance-audit", "Numeric audit of the equivariance hypotheses");
  common(au);
  std::optional<std::string> a_ckpt, a_arch, a_expect;
  std::optional<std::size_t> a_trials, a_steps;
  au->add_option("--checkpoint", a_ckpt, "Audit a trained head instead of a fresh one");
  au->add_option("--arch", a_arch, "mlp | equivariant (fresh head)");
  au->add_option("--expect", a_expect, "equivariant | negative_control");
  au->add_option("--trials", a_trials, "Random trials per check");
  au->add_option("--steps", a_steps, "Integrator steps for the trajectory check");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  static bool logger_ready = false;
  if (!logger_ready) {
    spdlog::set_default_logger(spdlog::stderr_color_mt("vfm"));
    logger_ready = true;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  Run run;
  run.started = utc_now();
  run.config_path = config_path;
  run.out_dir = out_dir;
  try {
    if (gen->parsed()) {
      run.command = "generate-data";
      run.config = resolve_config(run.command, generate_defaults(), config_path);
      set_if(run.config["dataset"], "kind", g_kind);
      set_if(run.config["dataset"], "labels", g_labels);
      set_if(run.config, "n", g_n);
    } else if (tr->parsed()) {
      run.command = "train";
      run.config = resolve_config(run.command, train_defaults(), config_path);
      Json& t = run.config["train"];
      set_if(run.config, "loss", t_loss);
      set_if(run.config, "data", t_data);
      set_if(run.config, "resume", t_resume);
      if (t_arch) t["head"]["architecture"] = *t_arch;
      if (t_kind) t["dataset"]["kind"] = *t_kind;
      if (t_labels) t["dataset"]["labels"] = *t_labels;
      set_if(t, "steps", t_steps);
      set_if(t, "batch_size", t_batch);
      set_if(t, "log_every", t_log);
      set_if(t, "lr", t_lr);
    } else if (sa->parsed()) {
      run.command = "sample";
      run.config = resolve_config(run.command, sample_defaults(), config_path);
      Json& c = run.config;
      set_if(c, "checkpoint", s_ckpt);
      set_if(c, "mode", s_mode);
      set_if(c, "n", s_n);
      set_if(c, "y", s_y);
      set_if(c, "workers", s_workers);
      if (s_traj) c["trajectory"] = true;
      if (s_guide) c["likelihood"]["property"] = *s_guide;
      set_if(c["likelihood"], "target", s_target);
      set_if(c["likelihood"], "sigma_y", s_sigma_y);
      set_if(c["guidance"], "inner_steps", s_inner);
      set_if(c["guidance"], "damping", s_damping);
      set_if(c["integrator"], "scheme", s_scheme);
      set_if(c["integrator"], "steps", s_steps);
      if (s_nfe) {
        const auto scheme = scheme_from_string(c["integrator"].value("scheme", std::string("euler")));
        const std::size_t per_step = scheme == Scheme::euler ? 1 : 4;
        if (*s_nfe == 0 || *s_nfe % per_step != 0) {
          throw ConfigError(fmt::format("--nfe {} is not a multiple of {} evaluations per step", *s_nfe, per_step));
        }
        c["integrator"]["steps"] = *s_nfe / per_step;
      }
    } else if (ev->parsed()) {
      run.command = "eval";
      run.config = resolve_config(run.command, eval_defaults(), config_path);
      Json& c = run.config;
      set_if(c, "samples", e_samples);
      set_if(c, "reference", e_ref);
      set_if(c, "property", e_prop);
      set_if(c, "target", e_target);
      set_if(c, "n_projections", e_proj);
      set_if(c["thresholds"], "max_sliced_w2", e_max_w2);
      set_if(c["thresholds"], "max_tv", e_max_tv);
      set_if(c["thresholds"], "min_validity", e_min_valid);
      set_if(c["thresholds"], "max_property_mae", e_max_mae);
    } else {
      run.command = "equivariance-audit";
      run.config = resolve_config(run.command, audit_defaults(), config_path);
      Json& c = run.config;
      set_if(c, "checkpoint", a_ckpt);
      if (a_arch) c["head"]["architecture"] = *a_arch;
      set_if(c, "expect", a_expect);
      set_if(c, "trials", a_trials);
      set_if(c["integrator"], "steps", a_steps);
    }
    set_if(run.config, "seed", seed);

    fs::create_directories(run.out_dir);
    if (run.command == "generate-data") cmd_generate_data(run);
    else if (run.command == "train") cmd_train(run);
    else if (run.command == "sample") cmd_sample(run);
    else if (run.command == "eval") cmd_eval(run);
    else cmd_audit(run);
    write_manifest(run);
    return kOk;
  } catch (const ThresholdFailure& e) {
    spdlog::error("{}", e.what());
    return kThresholdFailure;
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kConfigError;
  } catch (const NumericError& e) {
    spdlog::error("numeric failure: {}", e.what());
    return kNumericFailure;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kFailure;
  }
}

}  // namespace vfm::cli
