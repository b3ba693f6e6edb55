#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "cocola/encoder.hpp"
#include "cocola/manifest.hpp"
#include "cocola/sampling.hpp"

namespace cocola {

struct TrainConfig {
  SamplerConfig sampler;
  EncoderConfig encoder;
  double learning_rate = 1e-3;
  std::string optimizer = "adam";
  std::int64_t max_steps = 1000;
  std::int64_t eval_every = 100;
  std::uint64_t seed = 0;
  // Eq-as-written loss anchors rows only; this flag adds the column term.
  bool symmetric_loss = false;

  void validate() const;
};

struct ModelState {
  EncoderParams encoder;
  BilinearHead head;

  static ModelState init(const EncoderConfig& config, Rng& rng);
  // Random W too, for chance-calibration baselines.
  static ModelState init_random(const EncoderConfig& config, Rng& rng);

  std::vector<nn::Tensor*> parameters();
  std::vector<const nn::Tensor*> parameters() const;
};

// Gradient buffers matching ModelState::parameters() order.
struct ModelGrads {
  EncoderParams encoder;
  nn::Tensor head_w;

  static ModelGrads zeros_like(const ModelState& state);
  std::vector<nn::Tensor*> tensors();
};

// Multi-class cross entropy over the similarity matrix, rows as anchors,
// log-sum-exp stabilized. S must be square and finite.
double contrastive_loss(const nn::Tensor& s, bool symmetric = false);
// dL/dS for the same loss.
nn::Tensor contrastive_loss_backward(const nn::Tensor& s, bool symmetric = false);

struct StepStats {
  double loss = 0.0;       // pre-update loss
  double accuracy = 0.0;   // Eq-6 batch accuracy on the pre-update model
};

// One optimization step: subsets -> mixes -> augment -> mel -> embed ->
// similarity matrix -> loss -> Adam update of encoder parameters and W.
StepStats train_step(const std::vector<Window>& batch, ModelState& state,
                     nn::Adam& optimizer, const TrainConfig& config, Rng& rng);

struct MetricsRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct Checkpoint {
  std::int64_t step = 0;
  ModelState model;
  TrainConfig config;
  std::string rng_state;
  std::vector<MetricsRow> history;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Runs the training loop: max_steps steps over the manifest's train split,
// metrics.csv and periodic checkpoints under out_dir, final checkpoint at
// out_dir/checkpoint.ckpt. Returns the final state.
Checkpoint train(const DatasetManifest& manifest, const TrainConfig& config,
                 const std::filesystem::path& out_dir,
                 std::ostream* log = nullptr);

}  // namespace cocola
