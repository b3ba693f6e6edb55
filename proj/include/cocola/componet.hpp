#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cocola/manifest.hpp"
#include "cocola/nn.hpp"
#include "cocola/rng.hpp"
#include "json.hpp"

namespace cocola {
namespace componet {

// --- Diffusion schedule -----------------------------------------------------

struct NoiseSchedule {
  int max_step = 0;                // T
  std::vector<double> alpha_bar;   // T+1 values, alpha_bar[0] = 1, strictly decreasing

  static NoiseSchedule cosine(int max_step);
  void validate() const;
  double snr(int t) const { return alpha_bar[t] / (1.0 - alpha_bar[t]); }
};

// z_t = sqrt(ab[t]) z + sqrt(1 - ab[t]) eps
nn::Tensor forward_noise(const nn::Tensor& z, int t, const NoiseSchedule& schedule,
                         const nn::Tensor& eps);

// --- Stub codec --------------------------------------------------------------

// Stand-in for the VAE: frame averaging by `factor` on encode, nearest
// upsampling on decode.
struct LatentCodec {
  int factor = 64;

  nn::Tensor encode(std::span<const double> wave) const;  // (1, n/factor)
  std::vector<double> decode(const nn::Tensor& z) const;
};

// --- Prompt -------------------------------------------------------------------

// Token ids over TagVocabulary plus one SEP token (id == vocab.size()).
struct Prompt {
  std::vector<int> tokens;
};

int sep_token(const TagVocabulary& vocab);

// [ids(tags_y)..., SEP, ids(tags_x)...]; tags_x must be non-empty.
Prompt build_prompt(const std::vector<std::string>& tags_y,
                    const std::vector<std::string>& tags_x,
                    const TagVocabulary& vocab);

std::pair<std::vector<std::string>, std::vector<std::string>> decode_prompt(
    const Prompt& prompt, const TagVocabulary& vocab);

// --- Task taxonomy -------------------------------------------------------------

enum class TaskLabel { UG, AG, SS, EA, ER };

const char* task_label_name(TaskLabel label);

// Five-way partition over (Y, X) with |X| > 0:
//   UG: Y empty; AG: disjoint non-empty Y; SS: X strictly inside Y;
//   EA: Y strictly inside X; ER: overlapping, neither strictly contains
//   the other (includes Y == X).
TaskLabel classify_task(const std::vector<int>& inputs,
                        const std::vector<int>& outputs);

struct TaskSample {
  std::vector<int> inputs;   // Y, sorted
  std::vector<int> outputs;  // X, sorted, non-empty
  TaskLabel label = TaskLabel::UG;
};

// Uniform over all (Y, X) subset pairs with |X| > 0.
TaskSample sample_task(int n_stems, Rng& rng);

// --- Toy denoiser ---------------------------------------------------------------

struct DenoiserConfig {
  int latent_channels = 1;
  int latent_length = 0;   // informational; the model is length-agnostic
  int hidden_channels = 16;
  int encoder_layers = 3;  // I: fusion happens at every encoder layer
  int prompt_dim = 8;
  int time_dim = 8;
  int vocab_size = 0;      // tags only; the table has vocab_size + 1 rows

  void validate() const;
};

// Sinusoidal embedding of the integer timestep.
nn::Tensor time_embedding(int t, int dim);

// One conditioned conv layer: relu(conv(x) + Us s + Ut tau), broadcast over
// the latent length.
struct CondLayer {
  nn::Tensor w;   // (Cout, Cin, 1, 3)
  nn::Tensor b;   // (Cout)
  nn::Tensor us;  // (Cout, prompt_dim)
  nn::Tensor ut;  // (Cout, time_dim)
};

struct LayerCache {
  nn::Tensor input;
  nn::Tensor pre;
};

struct BaseDenoiser {
  DenoiserConfig config;
  nn::Tensor prompt_table;          // (vocab_size + 1, prompt_dim)
  std::vector<CondLayer> encoder;   // I layers
  CondLayer bottleneck;
  nn::Tensor dec1_w, dec1_b;        // hidden -> hidden
  nn::Tensor dec2_w, dec2_b;        // hidden -> latent_channels, linear

  static BaseDenoiser init(const DenoiserConfig& config, Rng& rng);

  nn::Tensor embed_prompt(const Prompt& prompt) const;  // mean-pooled table rows

  std::vector<nn::Tensor*> parameters();
  std::vector<const nn::Tensor*> parameters() const;
  std::uint64_t hash() const;
};

struct BaseCache {
  std::vector<LayerCache> encoder;
  LayerCache bottleneck;
  LayerCache dec1;
  nn::Tensor dec2_input;
  nn::Tensor s, tau;
};

nn::Tensor base_predict(const BaseDenoiser& model, const nn::Tensor& z_t,
                        const nn::Tensor& s, int t, BaseCache* cache = nullptr);

struct BaseGrads {
  std::vector<CondLayer> encoder;
  CondLayer bottleneck;
  nn::Tensor dec1_w, dec1_b, dec2_w, dec2_b;
  nn::Tensor d_s;  // gradient into the prompt embedding

  static BaseGrads zeros_like(const BaseDenoiser& model);
  std::vector<nn::Tensor*> parameters();  // same order as BaseDenoiser
};

void base_backward(const BaseDenoiser& model, const BaseCache& cache,
                   const nn::Tensor& d_out, BaseGrads& grads);

// --- ControlNet-style adapter ---------------------------------------------------

// Trainable copy of the frozen base encoder plus zero-initialized conv_in
// (applied to the conditioning latent) and per-layer zero-initialized
// fusion convs. At creation the fused model equals the base exactly.
struct AdapterModel {
  BaseDenoiser base;  // frozen during adapter training
  std::vector<CondLayer> adapter_encoder;  // psi, initialized as a copy
  nn::Tensor conv_in_w, conv_in_b;         // (C, C, 1, 1), zero
  std::vector<nn::Tensor> fuse_w;          // per layer (H, H, 1, 1), zero
  std::vector<nn::Tensor> fuse_b;          // per layer (H)

  static AdapterModel create(const BaseDenoiser& base);

  std::vector<nn::Tensor*> psi_parameters();
  std::vector<const nn::Tensor*> psi_parameters() const;
};

struct AdapterCache {
  BaseCache base;                          // fused base stream
  std::vector<LayerCache> adapter;         // adapter stream
  std::vector<nn::Tensor> adapter_act;     // post-relu adapter features
  nn::Tensor conditioning;                 // w
  nn::Tensor conv_in_out;
};

nn::Tensor adapter_denoise(const AdapterModel& model, const nn::Tensor& z_t,
                           const nn::Tensor& s, int t, const nn::Tensor& w,
                           AdapterCache* cache = nullptr);

struct AdapterGrads {
  std::vector<CondLayer> adapter_encoder;
  nn::Tensor conv_in_w, conv_in_b;
  std::vector<nn::Tensor> fuse_w, fuse_b;

  static AdapterGrads zeros_like(const AdapterModel& model);
  std::vector<nn::Tensor*> parameters();  // same order as psi_parameters
};

// Gradients w.r.t. psi only; phi stays untouched.
void adapter_backward(const AdapterModel& model, const AdapterCache& cache,
                      const nn::Tensor& d_out, AdapterGrads& grads);

// --- Objectives -------------------------------------------------------------------

// || eps - model(z_t, s, t[, w]) ||^2 with z_t from forward_noise.
double score_matching_loss(const BaseDenoiser& model, const nn::Tensor& z,
                           const nn::Tensor& s, int t,
                           const NoiseSchedule& schedule, const nn::Tensor& eps);
double score_matching_loss(const AdapterModel& model, const nn::Tensor& z,
                           const nn::Tensor& s, int t,
                           const NoiseSchedule& schedule, const nn::Tensor& eps,
                           const nn::Tensor& w);

// --- Training ----------------------------------------------------------------------

struct TrainClip {
  std::vector<std::vector<double>> stems;
  std::vector<std::string> tags;
};

// Base pretraining: full mixes with UG prompts, optimizing phi.
void base_train(const std::vector<TrainClip>& clips, BaseDenoiser& model,
                const NoiseSchedule& schedule, const LatentCodec& codec,
                const TagVocabulary& vocab, int steps, double lr, Rng& rng,
                std::ostream* log = nullptr);

// Adapter fine-tuning: per step sample_task -> mixes -> latents -> prompt ->
// one Adam step on psi. phi is bit-identical before and after.
void adapter_train(const std::vector<TrainClip>& clips, AdapterModel& model,
                   const NoiseSchedule& schedule, const LatentCodec& codec,
                   const TagVocabulary& vocab, int steps, double lr, Rng& rng,
                   std::ostream* log = nullptr);

// Mean adapter-conditioned vs base loss over the same batches (diagnostics).
struct LossComparison {
  double adapter_loss = 0.0;
  double base_loss = 0.0;
};
LossComparison compare_losses(const std::vector<TrainClip>& clips,
                              const AdapterModel& model,
                              const NoiseSchedule& schedule,
                              const LatentCodec& codec, const TagVocabulary& vocab,
                              int n_batches, TaskLabel only_label, Rng& rng);

// --- Sampling ---------------------------------------------------------------------

using NoisePredictor = std::function<nn::Tensor(const nn::Tensor& z_t, int t)>;

// Ancestral DDPM with the lower-bound posterior variance. steps == 0 returns
// the initial noise; steps < T runs a strided schedule.
nn::Tensor ddpm_sample(const NoisePredictor& predict, const NoiseSchedule& schedule,
                       int steps, const std::vector<int>& shape, Rng& rng);

// --- Checkpoints -------------------------------------------------------------------

void save_base_checkpoint(const BaseDenoiser& model, const NoiseSchedule& schedule,
                          const TagVocabulary& vocab,
                          const std::filesystem::path& path);
struct BaseCheckpoint {
  BaseDenoiser model;
  NoiseSchedule schedule;
  TagVocabulary vocab;
};
BaseCheckpoint load_base_checkpoint(const std::filesystem::path& path);

// Adapter checkpoint stores the hash of the frozen base it was trained
// against; loading verifies it against the co-located base checkpoint.
void save_adapter_checkpoint(const AdapterModel& model,
                             const NoiseSchedule& schedule,
                             const TagVocabulary& vocab,
                             const std::filesystem::path& path);
AdapterModel load_adapter_checkpoint(const std::filesystem::path& path,
                                     const BaseCheckpoint& base);

// --- CLI-facing config ----------------------------------------------------------------

struct ComponetConfig {
  double window_seconds = 1.0;
  int codec_factor = 64;
  int hidden_channels = 16;
  int encoder_layers = 3;
  int prompt_dim = 8;
  int time_dim = 8;
  int schedule_steps = 100;
  std::int64_t base_steps = 500;
  std::int64_t adapter_steps = 500;
  double base_lr = 1e-3;
  double adapter_lr = 1e-4;
  std::uint64_t seed = 0;

  static ComponetConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

}  // namespace componet
}  // namespace cocola
