#pragma once

#include <json.hpp>

#include "p3d/context.hpp"
#include "p3d/training.hpp"

namespace p3d {

using Json = nlohmann::json;

/// Rejects unknown keys so config typos fail loudly.
void check_allowed_keys(const Json& obj, const std::vector<std::string>& allowed,
                        const std::string& context);

Json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const Json& j);

Json context_config_to_json(const ContextConfig& cfg);
ContextConfig context_config_from_json(const Json& j);

TrainSetup train_setup_from_json(const Json& j);

Json load_json_file(const std::string& path);

}  // namespace p3d
