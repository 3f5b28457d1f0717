#include "vfm/config.hpp"

#include <fmt/format.h>

#include <initializer_list>
#include <string_view>

#include "vfm/binary_io.hpp"

namespace vfm {

namespace {

void check_keys(const Json& j, std::string_view what, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw ConfigError(fmt::format("{}: expected a JSON object", what));
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(fmt::format("{}: unknown key '{}'", what, key));
  }
}

template <class T>
void opt(const Json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->get<T>();
}

std::string label_mode_name(LabelMode m) {
  switch (m) {
    case LabelMode::none: return "none";
    case LabelMode::property: return "property";
    case LabelMode::constant: return "constant";
  }
  return "?";
}

LabelMode label_mode_from(const std::string& s) {
  if (s == "none") return LabelMode::none;
  if (s == "property") return LabelMode::property;
  if (s == "constant") return LabelMode::constant;
  throw ConfigError(fmt::format("unknown label mode '{}'", s));
}

}  // namespace

void to_json(Json& j, const SpaceSpec& v) {
  j = Json{{"n_continuous", v.n_continuous}, {"categorical", v.categorical}};
  if (v.points) {
    j["points"] = Json{{"n_points", v.points->n_points}, {"spatial_dim", v.points->spatial_dim}};
  } else {
    j["points"] = nullptr;
  }
}

void from_json(const Json& j, SpaceSpec& v) {
  check_keys(j, "space", {"n_continuous", "categorical", "points"});
  opt(j, "n_continuous", v.n_continuous);
  opt(j, "categorical", v.categorical);
  if (auto it = j.find("points"); it != j.end() && !it->is_null()) {
    check_keys(*it, "space.points", {"n_points", "spatial_dim"});
    PointCloudShape p;
    opt(*it, "n_points", p.n_points);
    opt(*it, "spatial_dim", p.spatial_dim);
    v.points = p;
  }
}

void to_json(Json& j, const HeadConfig& v) {
  j = Json{{"architecture", to_string(v.architecture)},
           {"space", v.space},
           {"hidden", v.hidden},
           {"rounds", v.rounds},
           {"time_features", v.time_features},
           {"label_conditioned", v.label_conditioned},
           {"label_frequencies", v.label_frequencies},
           {"label_scale", v.label_scale},
           {"sigma_base", v.sigma.base},
           {"t_clamp", v.t_clamp},
           {"zero_init_output", v.zero_init_output},
           {"init_seed", v.init_seed}};
}

void from_json(const Json& j, HeadConfig& v) {
  check_keys(j, "head", {"architecture", "space", "hidden", "rounds", "time_features", "label_conditioned",
                         "label_frequencies", "label_scale", "sigma_base", "t_clamp", "zero_init_output",
                         "init_seed"});
  if (auto it = j.find("architecture"); it != j.end()) v.architecture = architecture_from_string(it->get<std::string>());
  opt(j, "space", v.space);
  opt(j, "hidden", v.hidden);
  opt(j, "rounds", v.rounds);
  opt(j, "time_features", v.time_features);
  opt(j, "label_conditioned", v.label_conditioned);
  opt(j, "label_frequencies", v.label_frequencies);
  opt(j, "label_scale", v.label_scale);
  opt(j, "sigma_base", v.sigma.base);
  opt(j, "t_clamp", v.t_clamp);
  opt(j, "zero_init_output", v.zero_init_output);
  opt(j, "init_seed", v.init_seed);
}

void to_json(Json& j, const DatasetSpec& v) {
  j = Json{{"kind", to_string(v.kind)},
           {"labels", label_mode_name(v.labels)},
           {"constant_label", v.constant_label},
           {"n_components", v.n_components},
           {"ring_radius", v.ring_radius},
           {"component_std", v.component_std},
           {"n_dims", v.n_dims},
           {"n_categories", v.n_categories},
           {"probabilities", v.probabilities},
           {"n_points", v.n_points},
           {"n_types", v.n_types},
           {"radius_min", v.radius_min},
           {"radius_max", v.radius_max},
           {"noise", v.noise},
           {"validity_band", v.validity_band}};
}

void from_json(const Json& j, DatasetSpec& v) {
  check_keys(j, "dataset", {"kind", "labels", "constant_label", "n_components", "ring_radius", "component_std",
                            "n_dims", "n_categories", "probabilities", "n_points", "n_types", "radius_min",
                            "radius_max", "noise", "validity_band"});
  if (auto it = j.find("kind"); it != j.end()) v.kind = dataset_kind_from_string(it->get<std::string>());
  if (auto it = j.find("labels"); it != j.end()) v.labels = label_mode_from(it->get<std::string>());
  opt(j, "constant_label", v.constant_label);
  opt(j, "n_components", v.n_components);
  opt(j, "ring_radius", v.ring_radius);
  opt(j, "component_std", v.component_std);
  opt(j, "n_dims", v.n_dims);
  opt(j, "n_categories", v.n_categories);
  opt(j, "probabilities", v.probabilities);
  opt(j, "n_points", v.n_points);
  opt(j, "n_types", v.n_types);
  opt(j, "radius_min", v.radius_min);
  opt(j, "radius_max", v.radius_max);
  opt(j, "noise", v.noise);
  opt(j, "validity_band", v.validity_band);
}

void to_json(Json& j, const TrainConfig& v) {
  j = Json{{"steps", v.steps},
           {"batch_size", v.batch_size},
           {"seed", v.seed},
           {"lr", v.adam.lr},
           {"beta1", v.adam.beta1},
           {"beta2", v.adam.beta2},
           {"adam_eps", v.adam.eps},
           {"schedule", to_string(v.schedule)},
           {"clip_grad_norm", v.clip_grad_norm},
           {"head", v.head},
           {"dataset", v.dataset},
           {"conditioned", v.conditioned},
           {"log_every", v.log_every},
           {"checkpoint_every", v.checkpoint_every},
           {"weight_continuous", v.weights.continuous},
           {"weight_categorical", v.weights.categorical}};
}

void from_json(const Json& j, TrainConfig& v) {
  check_keys(j, "train", {"steps", "batch_size", "seed", "lr", "beta1", "beta2", "adam_eps", "schedule", "clip_grad_norm", "head", "dataset",
                          "conditioned", "log_every", "checkpoint_every", "weight_continuous",
                          "weight_categorical"});
  opt(j, "steps", v.steps);
  opt(j, "batch_size", v.batch_size);
  opt(j, "seed", v.seed);
  opt(j, "lr", v.adam.lr);
  opt(j, "beta1", v.adam.beta1);
  opt(j, "beta2", v.adam.beta2);
  opt(j, "adam_eps", v.adam.eps);
  if (auto it = j.find("schedule"); it != j.end()) v.schedule = lr_schedule_from_string(it->get<std::string>());
  opt(j, "clip_grad_norm", v.clip_grad_norm);
  opt(j, "head", v.head);
  opt(j, "dataset", v.dataset);
  opt(j, "conditioned", v.conditioned);
  opt(j, "log_every", v.log_every);
  opt(j, "checkpoint_every", v.checkpoint_every);
  opt(j, "weight_continuous", v.weights.continuous);
  opt(j, "weight_categorical", v.weights.categorical);
}

void to_json(Json& j, const PropertySpec& v) {
  j = Json{{"kind", to_string(v.kind)}, {"scale", v.scale}, {"centers", v.centers}, {"temperature", v.temperature}};
}

void from_json(const Json& j, PropertySpec& v) {
  check_keys(j, "property", {"kind", "scale", "centers", "temperature"});
  if (auto it = j.find("kind"); it != j.end()) v.kind = property_kind_from_string(it->get<std::string>());
  opt(j, "scale", v.scale);
  opt(j, "centers", v.centers);
  opt(j, "temperature", v.temperature);
}

void to_json(Json& j, const IntegratorConfig& v) {
  j = Json{{"scheme", to_string(v.scheme)}, {"steps", v.steps}, {"t_clamp", v.t_clamp}};
}

void from_json(const Json& j, IntegratorConfig& v) {
  check_keys(j, "integrator", {"scheme", "steps", "t_clamp"});
  if (auto it = j.find("scheme"); it != j.end()) v.scheme = scheme_from_string(it->get<std::string>());
  opt(j, "steps", v.steps);
  opt(j, "t_clamp", v.t_clamp);
}

void to_json(Json& j, const GuidanceConfig& v) {
  j = Json{{"inner_steps", v.inner_steps},
           {"damping", v.damping},
           {"divergence_cap", v.divergence_cap},
           {"tolerance", v.tolerance}};
}

void from_json(const Json& j, GuidanceConfig& v) {
  check_keys(j, "guidance", {"inner_steps", "damping", "divergence_cap", "tolerance"});
  opt(j, "inner_steps", v.inner_steps);
  opt(j, "damping", v.damping);
  opt(j, "divergence_cap", v.divergence_cap);
  opt(j, "tolerance", v.tolerance);
}

void to_json(Json& j, const InvariantPrior& v) {
  const char* cont = v.continuous == ContinuousPrior::standard_gaussian ? "standard_gaussian" : "zero_com_gaussian";
  const char* cat = v.categorical == CategoricalPrior::simplex_center   ? "simplex_center"
                    : v.categorical == CategoricalPrior::uniform_vertex ? "uniform_vertex"
                                                                        : "uniform_simplex";
  j = Json{{"continuous", cont}, {"categorical", cat}};
}

void from_json(const Json& j, InvariantPrior& v) {
  check_keys(j, "prior", {"continuous", "categorical"});
  if (auto it = j.find("continuous"); it != j.end()) {
    const auto s = it->get<std::string>();
    if (s == "standard_gaussian") v.continuous = ContinuousPrior::standard_gaussian;
    else if (s == "zero_com_gaussian") v.continuous = ContinuousPrior::zero_com_gaussian;
    else throw ConfigError(fmt::format("unknown continuous prior '{}'", s));
  }
  if (auto it = j.find("categorical"); it != j.end()) {
    const auto s = it->get<std::string>();
    if (s == "simplex_center") v.categorical = CategoricalPrior::simplex_center;
    else if (s == "uniform_vertex") v.categorical = CategoricalPrior::uniform_vertex;
    else if (s == "uniform_simplex") v.categorical = CategoricalPrior::uniform_simplex;
    else throw ConfigError(fmt::format("unknown categorical prior '{}'", s));
  }
}

std::string config_hash(const Json& j) { return io::fnv1a_hex(j.dump()); }

}  // namespace vfm
