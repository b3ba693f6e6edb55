#pragma once

#include <filesystem>

#include "cocola/training.hpp"
#include "json.hpp"

namespace cocola {

// JSON round-trip for config types. Parsing accepts partial objects and
// fills the remaining fields with built-in defaults.
nlohmann::json to_json(const MelConfig& c);
MelConfig mel_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const SamplerConfig& c);
SamplerConfig sampler_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

TrainConfig load_train_config(const std::filesystem::path& path);

}  // namespace cocola
