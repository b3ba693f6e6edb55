#include "cocola/config_io.hpp"

#include <fstream>

namespace cocola {

using nlohmann::json;

json to_json(const MelConfig& c) {
  return json{{"sample_rate", c.sample_rate}, {"n_fft", c.n_fft},
              {"hop", c.hop},                 {"win_length", c.win_length},
              {"n_mels", c.n_mels},           {"fmin", c.fmin},
              {"fmax", c.fmax},               {"log_floor", c.log_floor}};
}

MelConfig mel_config_from_json(const json& j) {
  MelConfig d;
  d.sample_rate = j.value("sample_rate", d.sample_rate);
  d.n_fft = j.value("n_fft", d.n_fft);
  d.hop = j.value("hop", d.hop);
  d.win_length = j.value("win_length", d.win_length);
  d.n_mels = j.value("n_mels", d.n_mels);
  d.fmin = j.value("fmin", d.fmin);
  d.fmax = j.value("fmax", d.fmax);
  d.log_floor = j.value("log_floor", d.log_floor);
  return d;
}

json to_json(const EncoderConfig& c) {
  return json{{"embedding_dim", c.embedding_dim},
              {"dropout_rate", c.dropout_rate},
              {"scale", backbone_scale_name(c.scale)},
              {"l2_normalize", c.l2_normalize},
              {"standardize_features", c.standardize_features},
              {"mel", to_json(c.mel)}};
}

EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig d;
  d.embedding_dim = j.value("embedding_dim", d.embedding_dim);
  d.dropout_rate = j.value("dropout_rate", d.dropout_rate);
  if (j.contains("scale")) d.scale = parse_backbone_scale(j.at("scale").get<std::string>());
  d.l2_normalize = j.value("l2_normalize", d.l2_normalize);
  d.standardize_features = j.value("standardize_features", d.standardize_features);
  if (j.contains("mel")) d.mel = mel_config_from_json(j.at("mel"));
  return d;
}

json to_json(const SamplerConfig& c) {
  return json{{"window_samples", c.window_samples},
              {"max_overlap_ratio", c.max_overlap_ratio},
              {"batch_size", c.batch_size},
              {"subset_mode", c.subset_mode == SubsetMode::single_stem
                                  ? "single_stem"
                                  : "random_submix"},
              {"noise_sigma", c.noise_sigma},
              {"seed", c.seed}};
}

SamplerConfig sampler_config_from_json(const json& j) {
  SamplerConfig d;
  d.window_samples = j.value("window_samples", d.window_samples);
  d.max_overlap_ratio = j.value("max_overlap_ratio", d.max_overlap_ratio);
  d.batch_size = j.value("batch_size", d.batch_size);
  if (j.contains("subset_mode")) {
    auto s = j.at("subset_mode").get<std::string>();
    if (s == "single_stem") d.subset_mode = SubsetMode::single_stem;
    else if (s == "random_submix") d.subset_mode = SubsetMode::random_submix;
    else throw std::runtime_error("unknown subset_mode: " + s);
  }
  d.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  d.seed = j.value("seed", d.seed);
  return d;
}

json to_json(const TrainConfig& c) {
  return json{{"sampler", to_json(c.sampler)},
              {"encoder", to_json(c.encoder)},
              {"learning_rate", c.learning_rate},
              {"optimizer", c.optimizer},
              {"max_steps", c.max_steps},
              {"eval_every", c.eval_every},
              {"seed", c.seed},
              {"symmetric_loss", c.symmetric_loss}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig d;
  if (j.contains("sampler")) d.sampler = sampler_config_from_json(j.at("sampler"));
  if (j.contains("encoder")) d.encoder = encoder_config_from_json(j.at("encoder"));
  d.learning_rate = j.value("learning_rate", d.learning_rate);
  d.optimizer = j.value("optimizer", d.optimizer);
  d.max_steps = j.value("max_steps", d.max_steps);
  d.eval_every = j.value("eval_every", d.eval_every);
  d.seed = j.value("seed", d.seed);
  d.symmetric_loss = j.value("symmetric_loss", d.symmetric_loss);
  return d;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("bad config " + path.string() + ": " + e.what());
  }
  return train_config_from_json(j);
}

}  // namespace cocola
