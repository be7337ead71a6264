#pragma once

#include <json.hpp>

#include "ofnet/loss.hpp"
#include "ofnet/model.hpp"

namespace ofnet {

using nlohmann::json;

json variant_to_json(const ModelVariant& v);
ModelVariant variant_from_json(const json& j);

json loss_config_to_json(const LossConfig& c);
LossConfig loss_config_from_json(const json& j);

}  // namespace ofnet
