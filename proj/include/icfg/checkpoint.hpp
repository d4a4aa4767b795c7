#ifndef ICFG_CHECKPOINT_HPP_
#define ICFG_CHECKPOINT_HPP_

#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "icfg/model.hpp"

namespace icfg {

// Layout: "ICFG" magic, u32 version, u32 header length, JSON header
// (config + named tensor shapes), then the tensors as little-endian
// IEEE-754 float32 in header order.
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const Params<float>& params);
std::pair<ModelConfig, Params<float>> load_checkpoint(const std::string& path);

nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::ordered_json& j);

}  // namespace icfg

#endif  // ICFG_CHECKPOINT_HPP_
