#pragma once

// JSON conversion for every configuration type. Missing keys keep their
// defaults; unknown keys are rejected with ConfigError.

#include <nlohmann/json.hpp>

#include "vfm/error.hpp"
#include "vfm/guidance.hpp"
#include "vfm/heads.hpp"
#include "vfm/sampling.hpp"
#include "vfm/symmetry.hpp"
#include "vfm/training.hpp"

namespace vfm {

using Json = nlohmann::json;

void to_json(Json& j, const SpaceSpec& v);
void from_json(const Json& j, SpaceSpec& v);
void to_json(Json& j, const HeadConfig& v);
void from_json(const Json& j, HeadConfig& v);
void to_json(Json& j, const DatasetSpec& v);
void from_json(const Json& j, DatasetSpec& v);
void to_json(Json& j, const TrainConfig& v);
void from_json(const Json& j, TrainConfig& v);
void to_json(Json& j, const PropertySpec& v);
void from_json(const Json& j, PropertySpec& v);
void to_json(Json& j, const IntegratorConfig& v);
void from_json(const Json& j, IntegratorConfig& v);
void to_json(Json& j, const GuidanceConfig& v);
void from_json(const Json& j, GuidanceConfig& v);
void to_json(Json& j, const InvariantPrior& v);
void from_json(const Json& j, InvariantPrior& v);

/// Parses `j` into T, converting library-level JSON errors to ConfigError.
template <class T>
T parse_config(const Json& j, const char* what) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
}

/// Hash of the canonical (sorted-key, compact) serialisation.
std::string config_hash(const Json& j);

}  // namespace vfm
