#pragma once

#include <span>
#include <vector>

#include "cocola/mel.hpp"
#include "cocola/nn.hpp"
#include "cocola/rng.hpp"

namespace cocola {

enum class BackboneScale { toy, small, paper };

const char* backbone_scale_name(BackboneScale s);
BackboneScale parse_backbone_scale(const std::string& name);

// Conv channel widths per scale; one avg-pool follows each block.
std::vector<int> backbone_channels(BackboneScale s);

struct EncoderConfig {
  int embedding_dim = 512;
  double dropout_rate = 0.1;
  BackboneScale scale = BackboneScale::paper;
  bool l2_normalize = false;  // ablation flag; the bilinear head uses raw h
  // Per-mel-bin standardization estimated on the training split; the
  // statistics live in EncoderParams and ride along in the checkpoint.
  bool standardize_features = false;
  MelConfig mel;

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

// Convolutional feature extractor over the mel map, global average pooling,
// affine projection to the embedding dimension.
struct EncoderParams {
  struct ConvBlock {
    nn::Tensor w;  // (Cout, Cin, 3, 3)
    nn::Tensor b;  // (Cout)
  };
  std::vector<ConvBlock> blocks;
  nn::Tensor proj_w;  // (d, C_last)
  nn::Tensor proj_b;  // (d)
  // Frozen feature statistics (n_mels each); identity until estimated.
  nn::Tensor feature_mean;
  nn::Tensor feature_std;

  static EncoderParams init(const EncoderConfig& config, Rng& rng);

  // Trainable tensors only; the feature statistics are not optimized.
  std::vector<nn::Tensor*> parameters();
  std::vector<const nn::Tensor*> parameters() const;
};

struct BilinearHead {
  nn::Tensor w;  // (d, d)

  static BilinearHead identity(int d) { return {nn::Tensor::identity(d)}; }
  bool symmetric(double tol = 1e-12) const;
};

enum class EmbedMode { train, eval };

// Forward activations kept for the backward pass.
struct EmbedCache {
  std::vector<nn::Tensor> inputs;      // block inputs
  std::vector<nn::Tensor> pre;         // conv pre-activations
  std::vector<nn::Tensor> masks;       // dropout masks (train mode)
  std::vector<nn::Tensor> dropped;     // post-dropout (pool inputs)
  std::vector<bool> pooled;            // whether the block pooled
  nn::Tensor final_features;           // input to global pooling
  nn::Tensor pooled_vec;               // input to projection
  nn::Tensor pre_norm;                 // projection output before l2 (if used)
};

nn::Tensor embed(const FeatureMap& features, const EncoderParams& params,
                 const EncoderConfig& config, EmbedMode mode,
                 Rng* dropout_rng = nullptr, EmbedCache* cache = nullptr);

// Accumulates dL/dparams given dL/dembedding; uses the cache from embed().
void embed_backward(const EmbedCache& cache, const EncoderParams& params,
                    const EncoderConfig& config, const nn::Tensor& d_embedding,
                    EncoderParams& grads);

// h1^T W h2
double similarity(std::span<const double> h1, std::span<const double> h2,
                  const BilinearHead& head);

// S[k][j] = sim(h1_k, h2_j). H1, H2: (K, d).
nn::Tensor similarity_matrix(const nn::Tensor& h1, const nn::Tensor& h2,
                             const BilinearHead& head);

// Backward of S = H1 W H2^T given dL/dS.
void similarity_matrix_backward(const nn::Tensor& h1, const nn::Tensor& h2,
                                const BilinearHead& head, const nn::Tensor& ds,
                                nn::Tensor& dh1, nn::Tensor& dh2, nn::Tensor& dw);

}  // namespace cocola
