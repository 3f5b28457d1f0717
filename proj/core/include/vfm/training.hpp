#pragma once

// Toy datasets, the VFM and controlled-VFM objectives, and the Adam loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vfm/ad/param_store.hpp"
#include "vfm/guidance.hpp"
#include "vfm/heads.hpp"
#include "vfm/path.hpp"
#include "vfm/symmetry.hpp"

namespace vfm {

enum class DatasetKind { gauss_mixture_2d, categorical_factorized, typed_polygon_cloud };

/// How couplings are labelled.
enum class LabelMode {
  none,
  property,  // y = f(x1) for the dataset's property function
  constant,  // y = constant_label for every sample
};

struct DatasetSpec {
  DatasetKind kind = DatasetKind::gauss_mixture_2d;
  LabelMode labels = LabelMode::none;
  double constant_label = 0.0;

  // gauss_mixture_2d
  std::size_t n_components = 8;
  double ring_radius = 2.0;
  double component_std = 0.3;

  // categorical_factorized; empty probabilities -> built-in skewed table
  std::size_t n_dims = 8;
  std::size_t n_categories = 4;
  std::vector<std::vector<double>> probabilities;

  // typed_polygon_cloud
  std::size_t n_points = 6;
  std::size_t n_types = 2;
  double radius_min = 1.0;
  double radius_max = 2.0;
  double noise = 0.02;
  double validity_band = 0.15;  // relative tolerance of the validity rules

  void validate() const;
};

/// Seeded sampler over one of the toy targets. Immutable after construction.
class ToyDataset {
 public:
  explicit ToyDataset(DatasetSpec spec);

  const DatasetSpec& spec() const { return spec_; }
  const SpaceSpec& space() const { return space_; }
  const InvariantPrior& prior() const { return prior_; }
  bool has_labels() const { return spec_.labels != LabelMode::none; }

  /// Property used for labels and guidance: component_index for the mixture,
  /// circumradius for polygons. None for the categorical target.
  const std::optional<PropertyFunction>& property() const { return property_; }

  /// Mixture centres, row-major n_components x 2.
  const std::vector<double>& centers() const { return centers_; }
  /// Per-dimension category probabilities (categorical target).
  const std::vector<std::vector<double>>& marginals() const { return marginals_; }

  State sample_target(Rng& rng) const;
  std::optional<double> label_of(const State& x1) const;
  std::vector<Coupling> sample_couplings(std::size_t n, Rng& rng) const;

  /// Index of the nearest mixture centre.
  std::size_t nearest_center(std::span<const double> x) const;

  /// Rule-based validity of a polygon sample: alternating types in angular
  /// order, per-point radius and consecutive edge lengths within the band.
  bool is_valid_polygon(std::span<const double> x) const;

 private:
  DatasetSpec spec_;
  SpaceSpec space_;
  InvariantPrior prior_;
  std::optional<PropertyFunction> property_;
  std::vector<double> centers_;
  std::vector<std::vector<double>> marginals_;
};

/// Materialised samples with optional labels, stored as "text header +
/// float64 payload".
struct DatasetFile {
  DatasetSpec spec;
  std::uint64_t seed = 0;
  std::vector<State> x1;
  std::vector<double> labels;  // empty when unlabelled

  static DatasetFile generate(const DatasetSpec& spec, std::size_t n, std::uint64_t seed);
  std::string serialize() const;
  static DatasetFile parse(const std::string& bytes);
  void save(const std::filesystem::path& path) const;
  static DatasetFile load(const std::filesystem::path& path);
};

inline constexpr int kDatasetVersion = 1;

struct LossWeights {
  double continuous = 1.0;
  double categorical = 1.0;
};

/// Mean over the batch of -log q_t(x1 | x_t[, y]) with t drawn from `rng`
/// in coupling order. Records onto `tape` so the caller can backpropagate.
ad::Var record_loss(ad::Tape& tape, const VariationalHead& head, const std::vector<Coupling>& batch, Rng& rng,
                    bool use_labels, const LossWeights& w = {});

double vfm_loss(const VariationalHead& head, const std::vector<Coupling>& batch, Rng& rng,
                const LossWeights& w = {});
double controlled_vfm_loss(const VariationalHead& head, const std::vector<Coupling>& batch, Rng& rng,
                           const LossWeights& w = {});

/// Loss plus parameter gradients (written into head.params() grad buffers).
double loss_and_gradient(VariationalHead& head, const std::vector<Coupling>& batch, Rng& rng, bool use_labels,
                         const LossWeights& w = {});

enum class LrSchedule { constant, cosine };

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  ad::AdamConfig adam;
  LrSchedule schedule = LrSchedule::cosine;  // cosine decays to 0 at `steps`
  double clip_grad_norm = 0.0;                // 0 disables clipping
  HeadConfig head;
  DatasetSpec dataset;
  bool conditioned = false;
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 500;
  LossWeights weights;

  void validate() const;
};

struct MetricsRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double seconds = 0.0;
};

struct TrainOutputs {
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> metrics_csv;
};

struct TrainResult {
  std::unique_ptr<VariationalHead> head;
  std::vector<MetricsRow> metrics;
  std::uint64_t steps_done = 0;
  bool aborted = false;
  std::string abort_reason;
};

/// Runs Adam for cfg.steps total steps. With `resume`, parameters, moments,
/// step counter and RNG state continue from the checkpoint. On a non-finite
/// loss or gradient the loop stops, the pre-failure parameters are saved to
/// the checkpoint path, and the result is flagged as aborted.
TrainResult train(const TrainConfig& cfg, const TrainOutputs& out = {},
                  const std::optional<std::filesystem::path>& resume = std::nullopt,
                  const DatasetFile* data = nullptr);

/// Rebuilds a head from a checkpoint written by train().
std::unique_ptr<VariationalHead> load_head(const std::filesystem::path& checkpoint);

std::string metrics_csv(const std::vector<MetricsRow>& rows);

/// Learning rate used for the update that produces step `step + 1`.
double learning_rate(const TrainConfig& cfg, std::uint64_t step);

std::string to_string(DatasetKind k);
std::string to_string(LrSchedule s);
LrSchedule lr_schedule_from_string(const std::string& s);
DatasetKind dataset_kind_from_string(const std::string& s);

}  // namespace vfm
