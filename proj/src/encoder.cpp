#include "cocola/encoder.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace cocola {

const char* backbone_scale_name(BackboneScale s) {
  switch (s) {
    case BackboneScale::toy: return "toy";
    case BackboneScale::small: return "small";
    case BackboneScale::paper: return "paper";
  }
  return "paper";
}

BackboneScale parse_backbone_scale(const std::string& name) {
  if (name == "toy") return BackboneScale::toy;
  if (name == "small") return BackboneScale::small;
  if (name == "paper") return BackboneScale::paper;
  throw std::runtime_error("unknown backbone scale: " + name);
}

std::vector<int> backbone_channels(BackboneScale s) {
  switch (s) {
    case BackboneScale::toy: return {8, 16};
    case BackboneScale::small: return {8, 16, 32, 32};
    case BackboneScale::paper: return {16, 32, 64, 128, 256};
  }
  return {16, 32, 64, 128, 256};
}

void EncoderConfig::validate() const {
  if (embedding_dim < 1) throw std::runtime_error("encoder: embedding_dim must be >= 1");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw std::runtime_error("encoder: dropout_rate must be in [0, 1)");
  mel.validate();
}

EncoderParams EncoderParams::init(const EncoderConfig& config, Rng& rng) {
  config.validate();
  EncoderParams p;
  int c_in = 1;
  for (int c_out : backbone_channels(config.scale)) {
    ConvBlock block;
    const double stddev = std::sqrt(2.0 / (c_in * 9));
    block.w = nn::Tensor::randn({c_out, c_in, 3, 3}, rng, stddev);
    block.b = nn::Tensor({c_out});
    p.blocks.push_back(std::move(block));
    c_in = c_out;
  }
  p.proj_w = nn::Tensor::randn({config.embedding_dim, c_in}, rng,
                               std::sqrt(1.0 / c_in));
  p.proj_b = nn::Tensor({config.embedding_dim});
  p.feature_mean = nn::Tensor({config.mel.n_mels});
  p.feature_std = nn::Tensor({config.mel.n_mels});
  p.feature_std.fill(1.0);
  return p;
}

std::vector<nn::Tensor*> EncoderParams::parameters() {
  std::vector<nn::Tensor*> out;
  for (auto& b : blocks) {
    out.push_back(&b.w);
    out.push_back(&b.b);
  }
  out.push_back(&proj_w);
  out.push_back(&proj_b);
  return out;
}

std::vector<const nn::Tensor*> EncoderParams::parameters() const {
  std::vector<const nn::Tensor*> out;
  for (const auto& b : blocks) {
    out.push_back(&b.w);
    out.push_back(&b.b);
  }
  out.push_back(&proj_w);
  out.push_back(&proj_b);
  return out;
}

bool BilinearHead::symmetric(double tol) const {
  const int d = w.dim(0);
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j)
      if (std::abs(w.data[static_cast<std::size_t>(i) * d + j] -
                   w.data[static_cast<std::size_t>(j) * d + i]) > tol)
        return false;
  return true;
}

nn::Tensor embed(const FeatureMap& features, const EncoderParams& params,
                 const EncoderConfig& config, EmbedMode mode, Rng* dropout_rng,
                 EmbedCache* cache) {
  if (features.n_mels != config.mel.n_mels)
    throw std::runtime_error("embed: feature map has " +
                             std::to_string(features.n_mels) + " mel bins, config has " +
                             std::to_string(config.mel.n_mels));
  const auto channels = backbone_channels(config.scale);
  if (params.blocks.size() != channels.size())
    throw std::runtime_error("embed: parameter/config block count mismatch");
  const bool use_dropout = mode == EmbedMode::train && config.dropout_rate > 0.0;
  if (use_dropout && !dropout_rng)
    throw std::runtime_error("embed: train mode with dropout needs an rng");

  nn::Tensor x({1, features.n_mels, features.n_frames});
  x.data = features.values;
  if (config.standardize_features) {
    for (int m = 0; m < features.n_mels; ++m) {
      const double mu = params.feature_mean.data[static_cast<std::size_t>(m)];
      const double sd = params.feature_std.data[static_cast<std::size_t>(m)];
      double* row = x.ptr() + static_cast<std::size_t>(m) * features.n_frames;
      for (int t = 0; t < features.n_frames; ++t) row[t] = (row[t] - mu) / sd;
    }
  }

  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    if (cache) cache->inputs.push_back(x);
    nn::Tensor pre = nn::conv2d(x, params.blocks[i].w, params.blocks[i].b);
    nn::Tensor act = nn::relu(pre);
    if (cache) cache->pre.push_back(std::move(pre));
    if (use_dropout) {
      nn::Tensor mask = nn::dropout_mask(act.shape, config.dropout_rate, *dropout_rng);
      act = nn::hadamard(act, mask);
      if (cache) cache->masks.push_back(std::move(mask));
    } else if (cache) {
      cache->masks.emplace_back();
    }
    const bool can_pool = act.dim(1) >= 2 && act.dim(2) >= 2;
    if (cache) {
      cache->dropped.push_back(act);
      cache->pooled.push_back(can_pool);
    }
    x = can_pool ? nn::avgpool2(act) : std::move(act);
  }

  if (cache) cache->final_features = x;
  nn::Tensor g = nn::global_avg_pool(x);
  if (cache) cache->pooled_vec = g;
  nn::Tensor h = nn::linear(g, params.proj_w, params.proj_b);

  if (config.l2_normalize) {
    if (cache) cache->pre_norm = h;
    double norm = 0.0;
    for (double v : h.data) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (auto& v : h.data) v /= norm;
  }
  if (!h.all_finite()) throw std::runtime_error("embed: non-finite embedding");
  return h;
}

void embed_backward(const EmbedCache& cache, const EncoderParams& params,
                    const EncoderConfig& config, const nn::Tensor& d_embedding,
                    EncoderParams& grads) {
  nn::Tensor dh = d_embedding;

  if (config.l2_normalize) {
    // h = v / |v|; dL/dv = (dL/dh - h (h . dL/dh)) / |v|
    const auto& v = cache.pre_norm;
    double norm = 0.0;
    for (double x : v.data) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0.0) {
      double dot = 0.0;
      for (std::size_t i = 0; i < v.data.size(); ++i)
        dot += v.data[i] / norm * dh.data[i];
      for (std::size_t i = 0; i < v.data.size(); ++i)
        dh.data[i] = (dh.data[i] - v.data[i] / norm * dot) / norm;
    }
  }

  nn::Tensor dg;
  nn::linear_backward(cache.pooled_vec, params.proj_w, dh, dg, grads.proj_w,
                      grads.proj_b);
  nn::Tensor dx = nn::global_avg_pool_backward(cache.final_features, dg);

  for (int i = static_cast<int>(params.blocks.size()) - 1; i >= 0; --i) {
    const auto idx = static_cast<std::size_t>(i);
    nn::Tensor d_drop = cache.pooled[idx]
                            ? nn::avgpool2_backward(cache.dropped[idx], dx)
                            : std::move(dx);
    if (cache.masks[idx].size() > 0) d_drop = nn::hadamard(d_drop, cache.masks[idx]);
    nn::Tensor d_pre = nn::relu_backward(cache.pre[idx], d_drop);
    nn::Tensor d_input;
    nn::conv2d_backward(cache.inputs[idx], params.blocks[idx].w, d_pre, d_input,
                        grads.blocks[idx].w, grads.blocks[idx].b,
                        /*want_dx=*/i > 0);
    dx = std::move(d_input);
  }
}

double similarity(std::span<const double> h1, std::span<const double> h2,
                  const BilinearHead& head) {
  const int d = head.w.dim(0);
  if (static_cast<int>(h1.size()) != d || static_cast<int>(h2.size()) != d)
    throw std::runtime_error("similarity: dimension mismatch");
  Eigen::Map<const Eigen::VectorXd> a(h1.data(), d);
  Eigen::Map<const Eigen::VectorXd> b(h2.data(), d);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                 Eigen::RowMajor>> w(head.w.ptr(), d, d);
  return a.dot(w * b);
}

nn::Tensor similarity_matrix(const nn::Tensor& h1, const nn::Tensor& h2,
                             const BilinearHead& head) {
  if (h1.ndim() != 2 || h2.ndim() != 2 || h1.dim(0) != h2.dim(0) ||
      h1.dim(1) != h2.dim(1))
    throw std::runtime_error("similarity_matrix: ragged inputs");
  const int k = h1.dim(0), d = h1.dim(1);
  if (head.w.dim(0) != d) throw std::runtime_error("similarity_matrix: head dim mismatch");
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> m1(h1.ptr(), k, d);
  Eigen::Map<const Mat> m2(h2.ptr(), k, d);
  Eigen::Map<const Mat> w(head.w.ptr(), d, d);
  nn::Tensor s({k, k});
  Eigen::Map<Mat> sm(s.ptr(), k, k);
  sm.noalias() = m1 * w * m2.transpose();
  return s;
}

void similarity_matrix_backward(const nn::Tensor& h1, const nn::Tensor& h2,
                                const BilinearHead& head, const nn::Tensor& ds,
                                nn::Tensor& dh1, nn::Tensor& dh2, nn::Tensor& dw) {
  const int k = h1.dim(0), d = h1.dim(1);
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> m1(h1.ptr(), k, d);
  Eigen::Map<const Mat> m2(h2.ptr(), k, d);
  Eigen::Map<const Mat> w(head.w.ptr(), d, d);
  Eigen::Map<const Mat> g(ds.ptr(), k, k);
  if (!dh1.same_shape(h1)) dh1 = nn::Tensor(h1.shape);
  if (!dh2.same_shape(h2)) dh2 = nn::Tensor(h2.shape);
  if (!dw.same_shape(head.w)) dw = nn::Tensor(head.w.shape);
  Eigen::Map<Mat> d1(dh1.ptr(), k, d);
  Eigen::Map<Mat> d2(dh2.ptr(), k, d);
  Eigen::Map<Mat> dwm(dw.ptr(), d, d);
  d1.noalias() += g * m2 * w.transpose();
  d2.noalias() += g.transpose() * m1 * w;
  dwm.noalias() += m1.transpose() * g * m2;
}

}  // namespace cocola
