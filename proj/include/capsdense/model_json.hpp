#pragma once

#include <string>

#include "capsdense/model.hpp"

namespace capsdense {

// JSON (de)serialization of model specs. Parsing is strict: unknown keys
// and out-of-domain values raise ConfigError so config typos can't pass
// silently. Missing keys keep their defaults.
std::string model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const std::string& text);

void save_model_spec(const std::string& path, const ModelSpec& spec);
ModelSpec load_model_spec(const std::string& path);

}  // namespace capsdense
