#include "cocola/componet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <ostream>
#include <stdexcept>

#include "cocola/sampling.hpp"

namespace cocola {
namespace componet {

using nlohmann::json;

// --- Schedule ----------------------------------------------------------------

NoiseSchedule NoiseSchedule::cosine(int max_step) {
  if (max_step < 2) throw std::runtime_error("schedule: T must be >= 2");
  NoiseSchedule s;
  s.max_step = max_step;
  s.alpha_bar.resize(static_cast<std::size_t>(max_step) + 1);
  const double offset = 0.008;
  auto f = [&](double t) {
    const double u = (t / max_step + offset) / (1.0 + offset) * 1.5707963267948966;
    const double c = std::cos(u);
    return c * c;
  };
  const double f0 = f(0.0);
  for (int t = 0; t <= max_step; ++t) {
    double v = f(static_cast<double>(t)) / f0;
    // Keep the tail positive and strictly decreasing.
    v = std::max(v, 1e-7 * (max_step - t + 1));
    s.alpha_bar[static_cast<std::size_t>(t)] = v;
  }
  s.validate();
  return s;
}

void NoiseSchedule::validate() const {
  if (max_step < 1 || alpha_bar.size() != static_cast<std::size_t>(max_step) + 1)
    throw std::runtime_error("schedule: alpha_bar must have T+1 entries");
  if (alpha_bar[0] <= 0.0 || alpha_bar[0] > 1.0)
    throw std::runtime_error("schedule: alpha_bar[0] must be in (0, 1]");
  if (alpha_bar[0] < 1.0 - 1e-3)
    throw std::runtime_error("schedule: alpha_bar[0] must be near 1");
  for (int t = 1; t <= max_step; ++t) {
    if (alpha_bar[t] <= 0.0 || alpha_bar[t] >= alpha_bar[t - 1])
      throw std::runtime_error("schedule: alpha_bar must be strictly decreasing in (0, 1]");
  }
  if (alpha_bar[static_cast<std::size_t>(max_step)] >= 1e-3)
    throw std::runtime_error("schedule: alpha_bar[T] must be < 1e-3");
}

nn::Tensor forward_noise(const nn::Tensor& z, int t, const NoiseSchedule& schedule,
                         const nn::Tensor& eps) {
  if (t < 0 || t > schedule.max_step)
    throw std::runtime_error("forward_noise: t out of range");
  if (!z.same_shape(eps)) throw std::runtime_error("forward_noise: eps shape mismatch");
  const double ab = schedule.alpha_bar[static_cast<std::size_t>(t)];
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  nn::Tensor out = z;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = a * z.data[i] + b * eps.data[i];
  return out;
}

// --- Codec ---------------------------------------------------------------------

nn::Tensor LatentCodec::encode(std::span<const double> wave) const {
  const auto n = static_cast<std::int64_t>(wave.size()) / factor;
  if (n < 1) throw std::runtime_error("codec: input shorter than one frame");
  nn::Tensor z({1, 1, static_cast<int>(n)});
  for (std::int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int j = 0; j < factor; ++j) acc += wave[static_cast<std::size_t>(i * factor + j)];
    z.data[static_cast<std::size_t>(i)] = acc / factor;
  }
  return z;
}

std::vector<double> LatentCodec::decode(const nn::Tensor& z) const {
  std::vector<double> out(z.data.size() * static_cast<std::size_t>(factor));
  for (std::size_t i = 0; i < z.data.size(); ++i)
    for (int j = 0; j < factor; ++j)
      out[i * static_cast<std::size_t>(factor) + static_cast<std::size_t>(j)] = z.data[i];
  return out;
}

// --- Prompt --------------------------------------------------------------------

int sep_token(const TagVocabulary& vocab) { return vocab.size(); }

Prompt build_prompt(const std::vector<std::string>& tags_y,
                    const std::vector<std::string>& tags_x,
                    const TagVocabulary& vocab) {
  if (tags_x.empty()) throw std::runtime_error("build_prompt: output tags must be non-empty");
  Prompt p;
  for (const auto& t : tags_y) p.tokens.push_back(vocab.id(t));
  p.tokens.push_back(sep_token(vocab));
  for (const auto& t : tags_x) p.tokens.push_back(vocab.id(t));
  return p;
}

std::pair<std::vector<std::string>, std::vector<std::string>> decode_prompt(
    const Prompt& prompt, const TagVocabulary& vocab) {
  const int sep = sep_token(vocab);
  std::vector<std::string> y, x;
  bool after_sep = false;
  int seps = 0;
  for (int tok : prompt.tokens) {
    if (tok == sep) {
      ++seps;
      after_sep = true;
      continue;
    }
    (after_sep ? x : y).push_back(vocab.tag(tok));
  }
  if (seps != 1) throw std::runtime_error("decode_prompt: prompt must contain exactly one SEP");
  if (x.empty()) throw std::runtime_error("decode_prompt: no output tags after SEP");
  return {y, x};
}

// --- Tasks ----------------------------------------------------------------------

const char* task_label_name(TaskLabel label) {
  switch (label) {
    case TaskLabel::UG: return "UG";
    case TaskLabel::AG: return "AG";
    case TaskLabel::SS: return "SS";
    case TaskLabel::EA: return "EA";
    case TaskLabel::ER: return "ER";
  }
  return "UG";
}

namespace {

bool is_subset(const std::vector<int>& a, const std::vector<int>& b) {
  // both sorted
  return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

bool intersects(const std::vector<int>& a, const std::vector<int>& b) {
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i == *j) return true;
    if (*i < *j) ++i; else ++j;
  }
  return false;
}

}  // namespace

TaskLabel classify_task(const std::vector<int>& inputs,
                        const std::vector<int>& outputs) {
  if (outputs.empty()) throw std::runtime_error("classify_task: X must be non-empty");
  std::vector<int> y = inputs, x = outputs;
  std::sort(y.begin(), y.end());
  std::sort(x.begin(), x.end());
  if (y.empty()) return TaskLabel::UG;
  if (!intersects(y, x)) return TaskLabel::AG;
  if (x.size() < y.size() && is_subset(x, y)) return TaskLabel::SS;
  if (y.size() < x.size() && is_subset(y, x)) return TaskLabel::EA;
  return TaskLabel::ER;
}

TaskSample sample_task(int n_stems, Rng& rng) {
  if (n_stems < 1) throw std::runtime_error("sample_task: track has no stems");
  if (n_stems > 62) throw std::runtime_error("sample_task: too many stems");
  const std::uint64_t full = (1ull << n_stems);
  const std::uint64_t x_bits = 1 + rng.uniform_u64(full - 1);  // non-empty
  const std::uint64_t y_bits = rng.uniform_u64(full);          // any subset
  TaskSample out;
  for (int i = 0; i < n_stems; ++i) {
    if (y_bits & (1ull << i)) out.inputs.push_back(i);
    if (x_bits & (1ull << i)) out.outputs.push_back(i);
  }
  out.label = classify_task(out.inputs, out.outputs);
  return out;
}

// --- Denoiser --------------------------------------------------------------------

void DenoiserConfig::validate() const {
  if (latent_channels < 1) throw std::runtime_error("denoiser: latent_channels >= 1");
  if (hidden_channels < 1) throw std::runtime_error("denoiser: hidden_channels >= 1");
  if (encoder_layers < 1) throw std::runtime_error("denoiser: encoder_layers >= 1");
  if (prompt_dim < 1) throw std::runtime_error("denoiser: prompt_dim >= 1");
  if (time_dim < 2 || time_dim % 2 != 0)
    throw std::runtime_error("denoiser: time_dim must be even and >= 2");
  if (vocab_size < 0) throw std::runtime_error("denoiser: vocab_size >= 0");
}

nn::Tensor time_embedding(int t, int dim) {
  nn::Tensor e({dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double omega = std::exp(-std::log(10000.0) * i / half);
    e.data[static_cast<std::size_t>(2 * i)] = std::sin(t * omega);
    e.data[static_cast<std::size_t>(2 * i + 1)] = std::cos(t * omega);
  }
  return e;
}

namespace {

CondLayer init_cond_layer(int c_in, int c_out, int prompt_dim, int time_dim,
                          Rng& rng) {
  CondLayer l;
  const double stddev = std::sqrt(2.0 / (c_in * 3));
  l.w = nn::Tensor::randn({c_out, c_in, 1, 3}, rng, stddev);
  l.b = nn::Tensor({c_out});
  l.us = nn::Tensor::randn({c_out, prompt_dim}, rng, 0.1);
  l.ut = nn::Tensor::randn({c_out, time_dim}, rng, 0.1);
  return l;
}

// relu(conv(x) + Us s + Ut tau)
nn::Tensor cond_forward(const CondLayer& layer, const nn::Tensor& x,
                        const nn::Tensor& s, const nn::Tensor& tau,
                        LayerCache* cache) {
  nn::Tensor pre = nn::conv2d(x, layer.w, layer.b);
  const int c_out = pre.dim(0);
  const auto l = static_cast<std::size_t>(pre.dim(1)) * pre.dim(2);
  for (int c = 0; c < c_out; ++c) {
    double bias = 0.0;
    for (int j = 0; j < layer.us.dim(1); ++j)
      bias += layer.us.data[static_cast<std::size_t>(c) * layer.us.dim(1) + j] * s.data[static_cast<std::size_t>(j)];
    for (int j = 0; j < layer.ut.dim(1); ++j)
      bias += layer.ut.data[static_cast<std::size_t>(c) * layer.ut.dim(1) + j] * tau.data[static_cast<std::size_t>(j)];
    double* row = pre.ptr() + static_cast<std::size_t>(c) * l;
    for (std::size_t i = 0; i < l; ++i) row[i] += bias;
  }
  if (cache) {
    cache->input = x;
    cache->pre = pre;
  }
  return nn::relu(pre);
}

// Backward through cond_forward; d_act is the gradient at the relu output.
// Accumulates layer gradients when `grads` is non-null; accumulates d_s when
// `d_s` is non-null; returns gradient w.r.t. the layer input when wanted.
nn::Tensor cond_backward(const CondLayer& layer, const LayerCache& cache,
                         const nn::Tensor& d_act, const nn::Tensor& s,
                         const nn::Tensor& tau, CondLayer* grads,
                         nn::Tensor* d_s, bool want_dx) {
  nn::Tensor d_pre = nn::relu_backward(cache.pre, d_act);
  const int c_out = d_pre.dim(0);
  const auto l = static_cast<std::size_t>(d_pre.dim(1)) * d_pre.dim(2);

  if (grads || d_s) {
    for (int c = 0; c < c_out; ++c) {
      const double* row = d_pre.ptr() + static_cast<std::size_t>(c) * l;
      double rowsum = 0.0;
      for (std::size_t i = 0; i < l; ++i) rowsum += row[i];
      if (grads) {
        for (int j = 0; j < layer.us.dim(1); ++j)
          grads->us.data[static_cast<std::size_t>(c) * layer.us.dim(1) + j] +=
              rowsum * s.data[static_cast<std::size_t>(j)];
        for (int j = 0; j < layer.ut.dim(1); ++j)
          grads->ut.data[static_cast<std::size_t>(c) * layer.ut.dim(1) + j] +=
              rowsum * tau.data[static_cast<std::size_t>(j)];
      }
      if (d_s)
        for (int j = 0; j < layer.us.dim(1); ++j)
          d_s->data[static_cast<std::size_t>(j)] +=
              rowsum * layer.us.data[static_cast<std::size_t>(c) * layer.us.dim(1) + j];
    }
  }

  nn::Tensor dx;
  nn::Tensor scratch_w, scratch_b;
  nn::Tensor& dw = grads ? grads->w : scratch_w;
  nn::Tensor& db = grads ? grads->b : scratch_b;
  nn::conv2d_backward(cache.input, layer.w, d_pre, dx, dw, db, want_dx);
  return dx;
}

}  // namespace

BaseDenoiser BaseDenoiser::init(const DenoiserConfig& cfg, Rng& rng) {
  cfg.validate();
  BaseDenoiser m;
  m.config = cfg;
  m.prompt_table = nn::Tensor::randn({cfg.vocab_size + 1, cfg.prompt_dim}, rng, 0.5);
  int c_in = cfg.latent_channels;
  for (int i = 0; i < cfg.encoder_layers; ++i) {
    m.encoder.push_back(
        init_cond_layer(c_in, cfg.hidden_channels, cfg.prompt_dim, cfg.time_dim, rng));
    c_in = cfg.hidden_channels;
  }
  m.bottleneck =
      init_cond_layer(cfg.hidden_channels, cfg.hidden_channels, cfg.prompt_dim,
                      cfg.time_dim, rng);
  const double stddev = std::sqrt(2.0 / (cfg.hidden_channels * 3));
  m.dec1_w = nn::Tensor::randn({cfg.hidden_channels, cfg.hidden_channels, 1, 3}, rng, stddev);
  m.dec1_b = nn::Tensor({cfg.hidden_channels});
  m.dec2_w = nn::Tensor::randn({cfg.latent_channels, cfg.hidden_channels, 1, 3}, rng, stddev);
  m.dec2_b = nn::Tensor({cfg.latent_channels});
  return m;
}

nn::Tensor BaseDenoiser::embed_prompt(const Prompt& prompt) const {
  if (prompt.tokens.empty()) throw std::runtime_error("embed_prompt: empty prompt");
  nn::Tensor s({config.prompt_dim});
  for (int tok : prompt.tokens) {
    if (tok < 0 || tok > config.vocab_size)
      throw std::runtime_error("embed_prompt: token id out of range");
    for (int j = 0; j < config.prompt_dim; ++j)
      s.data[static_cast<std::size_t>(j)] +=
          prompt_table.data[static_cast<std::size_t>(tok) * config.prompt_dim + j];
  }
  for (auto& v : s.data) v /= static_cast<double>(prompt.tokens.size());
  return s;
}

std::vector<nn::Tensor*> BaseDenoiser::parameters() {
  std::vector<nn::Tensor*> out{&prompt_table};
  for (auto& l : encoder) {
    out.push_back(&l.w);
    out.push_back(&l.b);
    out.push_back(&l.us);
    out.push_back(&l.ut);
  }
  out.push_back(&bottleneck.w);
  out.push_back(&bottleneck.b);
  out.push_back(&bottleneck.us);
  out.push_back(&bottleneck.ut);
  out.push_back(&dec1_w);
  out.push_back(&dec1_b);
  out.push_back(&dec2_w);
  out.push_back(&dec2_b);
  return out;
}

std::vector<const nn::Tensor*> BaseDenoiser::parameters() const {
  auto mut = const_cast<BaseDenoiser*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::uint64_t BaseDenoiser::hash() const { return nn::parameter_hash(parameters()); }

nn::Tensor base_predict(const BaseDenoiser& model, const nn::Tensor& z_t,
                        const nn::Tensor& s, int t, BaseCache* cache) {
  if (z_t.ndim() != 3 || z_t.dim(0) != model.config.latent_channels)
    throw std::runtime_error("base_predict: latent shape mismatch");
  if (s.size() != model.config.prompt_dim)
    throw std::runtime_error("base_predict: prompt embedding size mismatch");
  nn::Tensor tau = time_embedding(t, model.config.time_dim);
  if (cache) {
    cache->s = s;
    cache->tau = tau;
    cache->encoder.resize(model.encoder.size());
  }
  nn::Tensor x = z_t;
  for (std::size_t i = 0; i < model.encoder.size(); ++i)
    x = cond_forward(model.encoder[i], x, s, tau, cache ? &cache->encoder[i] : nullptr);
  x = cond_forward(model.bottleneck, x, s, tau, cache ? &cache->bottleneck : nullptr);

  nn::Tensor d1_pre = nn::conv2d(x, model.dec1_w, model.dec1_b);
  if (cache) {
    cache->dec1.input = x;
    cache->dec1.pre = d1_pre;
  }
  nn::Tensor d1 = nn::relu(d1_pre);
  if (cache) cache->dec2_input = d1;
  return nn::conv2d(d1, model.dec2_w, model.dec2_b);
}

BaseGrads BaseGrads::zeros_like(const BaseDenoiser& model) {
  BaseGrads g;
  auto zero_layer = [](const CondLayer& l) {
    CondLayer z;
    z.w = nn::Tensor(l.w.shape);
    z.b = nn::Tensor(l.b.shape);
    z.us = nn::Tensor(l.us.shape);
    z.ut = nn::Tensor(l.ut.shape);
    return z;
  };
  for (const auto& l : model.encoder) g.encoder.push_back(zero_layer(l));
  g.bottleneck = zero_layer(model.bottleneck);
  g.dec1_w = nn::Tensor(model.dec1_w.shape);
  g.dec1_b = nn::Tensor(model.dec1_b.shape);
  g.dec2_w = nn::Tensor(model.dec2_w.shape);
  g.dec2_b = nn::Tensor(model.dec2_b.shape);
  g.d_s = nn::Tensor({model.config.prompt_dim});
  return g;
}

std::vector<nn::Tensor*> BaseGrads::parameters() {
  // Matches BaseDenoiser::parameters() from index 1 (the prompt table grad is
  // scattered separately from d_s by the trainer).
  std::vector<nn::Tensor*> out;
  for (auto& l : encoder) {
    out.push_back(&l.w);
    out.push_back(&l.b);
    out.push_back(&l.us);
    out.push_back(&l.ut);
  }
  out.push_back(&bottleneck.w);
  out.push_back(&bottleneck.b);
  out.push_back(&bottleneck.us);
  out.push_back(&bottleneck.ut);
  out.push_back(&dec1_w);
  out.push_back(&dec1_b);
  out.push_back(&dec2_w);
  out.push_back(&dec2_b);
  return out;
}

void base_backward(const BaseDenoiser& model, const BaseCache& cache,
                   const nn::Tensor& d_out, BaseGrads& grads) {
  nn::Tensor d_dec2_in;
  nn::conv2d_backward(cache.dec2_input, model.dec2_w, d_out, d_dec2_in,
                      grads.dec2_w, grads.dec2_b);
  nn::Tensor d_dec1_pre = nn::relu_backward(cache.dec1.pre, d_dec2_in);
  nn::Tensor d_bneck_out;
  nn::conv2d_backward(cache.dec1.input, model.dec1_w, d_dec1_pre, d_bneck_out,
                      grads.dec1_w, grads.dec1_b);

  nn::Tensor dx = cond_backward(model.bottleneck, cache.bottleneck, d_bneck_out,
                                cache.s, cache.tau, &grads.bottleneck, &grads.d_s,
                                /*want_dx=*/true);
  for (int i = static_cast<int>(model.encoder.size()) - 1; i >= 0; --i) {
    const auto idx = static_cast<std::size_t>(i);
    dx = cond_backward(model.encoder[idx], cache.encoder[idx], dx, cache.s,
                       cache.tau, &grads.encoder[idx], &grads.d_s,
                       /*want_dx=*/i > 0);
  }
}

// --- Adapter -----------------------------------------------------------------------

AdapterModel AdapterModel::create(const BaseDenoiser& base) {
  AdapterModel m;
  m.base = base;
  m.adapter_encoder = base.encoder;  // trainable copy of the frozen encoder
  const int c = base.config.latent_channels;
  const int h = base.config.hidden_channels;
  m.conv_in_w = nn::Tensor({c, c, 1, 1});
  m.conv_in_b = nn::Tensor({c});
  for (int i = 0; i < base.config.encoder_layers; ++i) {
    m.fuse_w.push_back(nn::Tensor({h, h, 1, 1}));
    m.fuse_b.push_back(nn::Tensor({h}));
  }
  return m;
}

std::vector<nn::Tensor*> AdapterModel::psi_parameters() {
  std::vector<nn::Tensor*> out;
  for (auto& l : adapter_encoder) {
    out.push_back(&l.w);
    out.push_back(&l.b);
    out.push_back(&l.us);
    out.push_back(&l.ut);
  }
  out.push_back(&conv_in_w);
  out.push_back(&conv_in_b);
  for (std::size_t i = 0; i < fuse_w.size(); ++i) {
    out.push_back(&fuse_w[i]);
    out.push_back(&fuse_b[i]);
  }
  return out;
}

std::vector<const nn::Tensor*> AdapterModel::psi_parameters() const {
  auto mut = const_cast<AdapterModel*>(this)->psi_parameters();
  return {mut.begin(), mut.end()};
}

nn::Tensor adapter_denoise(const AdapterModel& model, const nn::Tensor& z_t,
                           const nn::Tensor& s, int t, const nn::Tensor& w,
                           AdapterCache* cache) {
  if (!w.same_shape(z_t))
    throw std::runtime_error("adapter_denoise: conditioning latent shape mismatch");
  const auto& base = model.base;
  nn::Tensor tau = time_embedding(t, base.config.time_dim);
  if (cache) {
    cache->base.s = s;
    cache->base.tau = tau;
    cache->base.encoder.resize(base.encoder.size());
    cache->adapter.resize(base.encoder.size());
    cache->adapter_act.resize(base.encoder.size());
    cache->conditioning = w;
  }

  nn::Tensor conv_in_out = nn::conv2d(w, model.conv_in_w, model.conv_in_b);
  if (cache) cache->conv_in_out = conv_in_out;
  nn::Tensor a = z_t;
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += conv_in_out.data[i];

  nn::Tensor x = z_t;
  for (std::size_t i = 0; i < base.encoder.size(); ++i) {
    a = cond_forward(model.adapter_encoder[i], a, s, tau,
                     cache ? &cache->adapter[i] : nullptr);
    if (cache) cache->adapter_act[i] = a;
    nn::Tensor x_base = cond_forward(base.encoder[i], x, s, tau,
                                     cache ? &cache->base.encoder[i] : nullptr);
    nn::Tensor fused = nn::conv2d(a, model.fuse_w[i], model.fuse_b[i]);
    for (std::size_t j = 0; j < fused.data.size(); ++j)
      fused.data[j] += x_base.data[j];
    x = std::move(fused);
  }

  x = cond_forward(base.bottleneck, x, s, tau, cache ? &cache->base.bottleneck : nullptr);
  nn::Tensor d1_pre = nn::conv2d(x, base.dec1_w, base.dec1_b);
  if (cache) {
    cache->base.dec1.input = x;
    cache->base.dec1.pre = d1_pre;
  }
  nn::Tensor d1 = nn::relu(d1_pre);
  if (cache) cache->base.dec2_input = d1;
  return nn::conv2d(d1, base.dec2_w, base.dec2_b);
}

AdapterGrads AdapterGrads::zeros_like(const AdapterModel& model) {
  AdapterGrads g;
  for (const auto& l : model.adapter_encoder) {
    CondLayer z;
    z.w = nn::Tensor(l.w.shape);
    z.b = nn::Tensor(l.b.shape);
    z.us = nn::Tensor(l.us.shape);
    z.ut = nn::Tensor(l.ut.shape);
    g.adapter_encoder.push_back(std::move(z));
  }
  g.conv_in_w = nn::Tensor(model.conv_in_w.shape);
  g.conv_in_b = nn::Tensor(model.conv_in_b.shape);
  for (std::size_t i = 0; i < model.fuse_w.size(); ++i) {
    g.fuse_w.push_back(nn::Tensor(model.fuse_w[i].shape));
    g.fuse_b.push_back(nn::Tensor(model.fuse_b[i].shape));
  }
  return g;
}

std::vector<nn::Tensor*> AdapterGrads::parameters() {
  std::vector<nn::Tensor*> out;
  for (auto& l : adapter_encoder) {
    out.push_back(&l.w);
    out.push_back(&l.b);
    out.push_back(&l.us);
    out.push_back(&l.ut);
  }
  out.push_back(&conv_in_w);
  out.push_back(&conv_in_b);
  for (std::size_t i = 0; i < fuse_w.size(); ++i) {
    out.push_back(&fuse_w[i]);
    out.push_back(&fuse_b[i]);
  }
  return out;
}

void adapter_backward(const AdapterModel& model, const AdapterCache& cache,
                      const nn::Tensor& d_out, AdapterGrads& grads) {
  const auto& base = model.base;

  // Decoder and bottleneck: flow dx only, phi gradients discarded.
  nn::Tensor d_dec2_in;
  nn::Tensor scratch_w, scratch_b;
  nn::conv2d_backward(cache.base.dec2_input, base.dec2_w, d_out, d_dec2_in,
                      scratch_w, scratch_b);
  nn::Tensor d_dec1_pre = nn::relu_backward(cache.base.dec1.pre, d_dec2_in);
  nn::Tensor d_bneck_out;
  scratch_w = nn::Tensor();
  scratch_b = nn::Tensor();
  nn::conv2d_backward(cache.base.dec1.input, base.dec1_w, d_dec1_pre, d_bneck_out,
                      scratch_w, scratch_b);
  nn::Tensor dx = cond_backward(base.bottleneck, cache.base.bottleneck, d_bneck_out,
                                cache.base.s, cache.base.tau, nullptr, nullptr,
                                /*want_dx=*/true);

  nn::Tensor d_a_carry;  // gradient flowing down the adapter chain
  for (int i = static_cast<int>(base.encoder.size()) - 1; i >= 0; --i) {
    const auto idx = static_cast<std::size_t>(i);

    // Fusion: dx feeds both the fuse conv and the frozen base layer.
    nn::Tensor d_a_fuse;
    nn::conv2d_backward(cache.adapter_act[idx], model.fuse_w[idx], dx, d_a_fuse,
                        grads.fuse_w[idx], grads.fuse_b[idx]);

    nn::Tensor d_x_prev =
        cond_backward(base.encoder[idx], cache.base.encoder[idx], dx, cache.base.s,
                      cache.base.tau, nullptr, nullptr, /*want_dx=*/i > 0);

    nn::Tensor d_a = std::move(d_a_fuse);
    if (d_a_carry.size() > 0)
      for (std::size_t j = 0; j < d_a.data.size(); ++j)
        d_a.data[j] += d_a_carry.data[j];

    d_a_carry = cond_backward(model.adapter_encoder[idx], cache.adapter[idx], d_a,
                              cache.base.s, cache.base.tau,
                              &grads.adapter_encoder[idx], nullptr,
                              /*want_dx=*/true);
    dx = std::move(d_x_prev);
  }

  // a_0 = z_t + conv_in(w)
  nn::Tensor unused;
  nn::conv2d_backward(cache.conditioning, model.conv_in_w, d_a_carry, unused,
                      grads.conv_in_w, grads.conv_in_b, /*want_dx=*/false);
}

// --- Objectives ---------------------------------------------------------------------

namespace {

double sq_error(const nn::Tensor& pred, const nn::Tensor& eps) {
  if (!pred.same_shape(eps)) throw std::runtime_error("score loss: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double d = eps.data[i] - pred.data[i];
    acc += d * d;
  }
  if (!std::isfinite(acc))
    throw std::runtime_error("score loss: non-finite value");
  return acc;
}

}  // namespace

double score_matching_loss(const BaseDenoiser& model, const nn::Tensor& z,
                           const nn::Tensor& s, int t,
                           const NoiseSchedule& schedule, const nn::Tensor& eps) {
  nn::Tensor z_t = forward_noise(z, t, schedule, eps);
  nn::Tensor pred = base_predict(model, z_t, s, t);
  try {
    return sq_error(pred, eps);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string(e.what()) + " at t=" + std::to_string(t));
  }
}

double score_matching_loss(const AdapterModel& model, const nn::Tensor& z,
                           const nn::Tensor& s, int t,
                           const NoiseSchedule& schedule, const nn::Tensor& eps,
                           const nn::Tensor& w) {
  nn::Tensor z_t = forward_noise(z, t, schedule, eps);
  nn::Tensor pred = adapter_denoise(model, z_t, s, t, w);
  try {
    return sq_error(pred, eps);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string(e.what()) + " at t=" + std::to_string(t));
  }
}

// --- Training -------------------------------------------------------------------------

namespace {

nn::Tensor randn_like_shape(const std::vector<int>& shape, Rng& rng) {
  nn::Tensor t(shape);
  for (auto& v : t.data) v = rng.normal();
  return t;
}

struct TaskBatchItem {
  nn::Tensor z, w, s;
  Prompt prompt;
  TaskLabel label;
};

TaskBatchItem make_task_item(const TrainClip& clip, const BaseDenoiser& model,
                             const LatentCodec& codec, const TagVocabulary& vocab,
                             Rng& rng) {
  TaskBatchItem item;
  TaskSample task = sample_task(static_cast<int>(clip.stems.size()), rng);
  item.label = task.label;

  const std::size_t n = clip.stems.front().size();
  std::vector<double> mix_y(n, 0.0), mix_x(n, 0.0);
  for (int i : task.inputs)
    for (std::size_t j = 0; j < n; ++j) mix_y[j] += clip.stems[static_cast<std::size_t>(i)][j];
  for (int i : task.outputs)
    for (std::size_t j = 0; j < n; ++j) mix_x[j] += clip.stems[static_cast<std::size_t>(i)][j];

  item.z = codec.encode(mix_x);
  item.w = codec.encode(mix_y);
  std::vector<std::string> tags_y, tags_x;
  for (int i : task.inputs) tags_y.push_back(clip.tags[static_cast<std::size_t>(i)]);
  for (int i : task.outputs) tags_x.push_back(clip.tags[static_cast<std::size_t>(i)]);
  item.prompt = build_prompt(tags_y, tags_x, vocab);
  item.s = model.embed_prompt(item.prompt);
  return item;
}

}  // namespace

void base_train(const std::vector<TrainClip>& clips, BaseDenoiser& model,
                const NoiseSchedule& schedule, const LatentCodec& codec,
                const TagVocabulary& vocab, int steps, double lr, Rng& rng,
                std::ostream* log) {
  if (clips.empty()) throw std::runtime_error("base_train: empty dataset");
  nn::Adam optimizer(lr);
  for (int step = 0; step < steps; ++step) {
    const auto& clip = clips[rng.uniform_u64(clips.size())];

    // Full mix with a UG prompt over all tags.
    const std::size_t n = clip.stems.front().size();
    std::vector<double> full(n, 0.0);
    for (const auto& stem : clip.stems)
      for (std::size_t j = 0; j < n; ++j) full[j] += stem[j];
    nn::Tensor z = codec.encode(full);
    Prompt prompt = build_prompt({}, clip.tags, vocab);
    nn::Tensor s = model.embed_prompt(prompt);

    const int t = static_cast<int>(rng.uniform_int(1, schedule.max_step));
    nn::Tensor eps = randn_like_shape(z.shape, rng);
    nn::Tensor z_t = forward_noise(z, t, schedule, eps);

    BaseCache cache;
    nn::Tensor pred = base_predict(model, z_t, s, t, &cache);
    nn::Tensor d_pred = pred;
    double loss = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
      const double diff = pred.data[i] - eps.data[i];
      loss += diff * diff;
      d_pred.data[i] = 2.0 * diff;
    }
    if (!std::isfinite(loss))
      throw std::runtime_error("base_train: non-finite loss at step " +
                               std::to_string(step));

    BaseGrads grads = BaseGrads::zeros_like(model);
    base_backward(model, cache, d_pred, grads);

    // Scatter d_s into the prompt table (mean pooling's adjoint).
    nn::Tensor table_grad(model.prompt_table.shape);
    const double inv = 1.0 / static_cast<double>(prompt.tokens.size());
    for (int tok : prompt.tokens)
      for (int j = 0; j < model.config.prompt_dim; ++j)
        table_grad.data[static_cast<std::size_t>(tok) * model.config.prompt_dim + j] +=
            grads.d_s.data[static_cast<std::size_t>(j)] * inv;

    std::vector<nn::Tensor*> params = model.parameters();
    std::vector<nn::Tensor*> grad_ptrs{&table_grad};
    for (auto* g : grads.parameters()) grad_ptrs.push_back(g);
    optimizer.step(params, grad_ptrs);

    if (log && (step + 1) % 100 == 0)
      (*log) << "base step " << (step + 1) << " loss " << loss << "\n";
  }
}

void adapter_train(const std::vector<TrainClip>& clips, AdapterModel& model,
                   const NoiseSchedule& schedule, const LatentCodec& codec,
                   const TagVocabulary& vocab, int steps, double lr, Rng& rng,
                   std::ostream* log) {
  if (clips.empty()) throw std::runtime_error("adapter_train: empty dataset");
  nn::Adam optimizer(lr);
  for (int step = 0; step < steps; ++step) {
    const auto& clip = clips[rng.uniform_u64(clips.size())];
    TaskBatchItem item = make_task_item(clip, model.base, codec, vocab, rng);

    const int t = static_cast<int>(rng.uniform_int(1, schedule.max_step));
    nn::Tensor eps = randn_like_shape(item.z.shape, rng);
    nn::Tensor z_t = forward_noise(item.z, t, schedule, eps);

    AdapterCache cache;
    nn::Tensor pred = adapter_denoise(model, z_t, item.s, t, item.w, &cache);
    nn::Tensor d_pred = pred;
    double loss = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
      const double diff = pred.data[i] - eps.data[i];
      loss += diff * diff;
      d_pred.data[i] = 2.0 * diff;
    }
    if (!std::isfinite(loss))
      throw std::runtime_error("adapter_train: non-finite loss at step " +
                               std::to_string(step));

    AdapterGrads grads = AdapterGrads::zeros_like(model);
    adapter_backward(model, cache, d_pred, grads);
    optimizer.step(model.psi_parameters(), grads.parameters());

    if (log && (step + 1) % 100 == 0)
      (*log) << "adapter step " << (step + 1) << " loss " << loss << "\n";
  }
}

LossComparison compare_losses(const std::vector<TrainClip>& clips,
                              const AdapterModel& model,
                              const NoiseSchedule& schedule,
                              const LatentCodec& codec, const TagVocabulary& vocab,
                              int n_batches, TaskLabel only_label, Rng& rng) {
  LossComparison cmp;
  int done = 0;
  int guard = 0;
  while (done < n_batches) {
    if (++guard > n_batches * 1000)
      throw std::runtime_error("compare_losses: cannot sample requested task label");
    const auto& clip = clips[rng.uniform_u64(clips.size())];
    TaskBatchItem item = make_task_item(clip, model.base, codec, vocab, rng);
    if (item.label != only_label) continue;
    const int t = static_cast<int>(rng.uniform_int(1, schedule.max_step));
    nn::Tensor eps = randn_like_shape(item.z.shape, rng);
    nn::Tensor z_t = forward_noise(item.z, t, schedule, eps);

    nn::Tensor pred_a = adapter_denoise(model, z_t, item.s, t, item.w);
    nn::Tensor pred_b = base_predict(model.base, z_t, item.s, t);
    for (std::size_t i = 0; i < pred_a.data.size(); ++i) {
      const double da = pred_a.data[i] - eps.data[i];
      const double db = pred_b.data[i] - eps.data[i];
      cmp.adapter_loss += da * da;
      cmp.base_loss += db * db;
    }
    ++done;
  }
  cmp.adapter_loss /= n_batches;
  cmp.base_loss /= n_batches;
  return cmp;
}

// --- Sampling ----------------------------------------------------------------------

nn::Tensor ddpm_sample(const NoisePredictor& predict, const NoiseSchedule& schedule,
                       int steps, const std::vector<int>& shape, Rng& rng) {
  if (steps < 0 || steps > schedule.max_step)
    throw std::runtime_error("ddpm_sample: steps must be in [0, T]");
  nn::Tensor z = randn_like_shape(shape, rng);
  if (steps == 0) return z;

  std::vector<int> ts(static_cast<std::size_t>(steps));
  if (steps == 1) {
    ts[0] = schedule.max_step;
  } else {
    for (int i = 0; i < steps; ++i)
      ts[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(
          schedule.max_step -
          static_cast<double>(i) * (schedule.max_step - 1) / (steps - 1)));
  }

  for (int i = 0; i < steps; ++i) {
    const int t = ts[static_cast<std::size_t>(i)];
    const int t_prev = i + 1 < steps ? ts[static_cast<std::size_t>(i + 1)] : 0;
    const double ab_t = schedule.alpha_bar[static_cast<std::size_t>(t)];
    const double ab_prev = schedule.alpha_bar[static_cast<std::size_t>(t_prev)];
    const double alpha = ab_t / ab_prev;
    const double beta = 1.0 - alpha;

    nn::Tensor eps_hat = predict(z, t);
    const double c1 = 1.0 / std::sqrt(alpha);
    const double c2 = beta / std::sqrt(1.0 - ab_t);
    for (std::size_t j = 0; j < z.data.size(); ++j)
      z.data[j] = c1 * (z.data[j] - c2 * eps_hat.data[j]);

    if (t_prev > 0) {
      const double sigma = std::sqrt((1.0 - ab_prev) / (1.0 - ab_t) * beta);
      for (auto& v : z.data) v += sigma * rng.normal();
    }
    if (!z.all_finite())
      throw std::runtime_error("ddpm_sample: non-finite latent at step t=" +
                               std::to_string(t));
  }
  return z;
}

// --- Checkpoints -----------------------------------------------------------------------

namespace {

constexpr std::uint32_t kComponetVersion = 1;

json schedule_to_json(const NoiseSchedule& s) {
  return json{{"max_step", s.max_step}, {"alpha_bar", s.alpha_bar}};
}

NoiseSchedule schedule_from_json(const json& j) {
  NoiseSchedule s;
  s.max_step = j.at("max_step").get<int>();
  s.alpha_bar = j.at("alpha_bar").get<std::vector<double>>();
  s.validate();
  return s;
}

json denoiser_config_to_json(const DenoiserConfig& c) {
  return json{{"latent_channels", c.latent_channels},
              {"latent_length", c.latent_length},
              {"hidden_channels", c.hidden_channels},
              {"encoder_layers", c.encoder_layers},
              {"prompt_dim", c.prompt_dim},
              {"time_dim", c.time_dim},
              {"vocab_size", c.vocab_size}};
}

DenoiserConfig denoiser_config_from_json(const json& j) {
  DenoiserConfig c;
  c.latent_channels = j.at("latent_channels").get<int>();
  c.latent_length = j.at("latent_length").get<int>();
  c.hidden_channels = j.at("hidden_channels").get<int>();
  c.encoder_layers = j.at("encoder_layers").get<int>();
  c.prompt_dim = j.at("prompt_dim").get<int>();
  c.time_dim = j.at("time_dim").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  return c;
}

void write_blob(std::ofstream& out, const char magic[4], const json& meta,
                const std::vector<const nn::Tensor*>& tensors) {
  out.write(magic, 4);
  out.write(reinterpret_cast<const char*>(&kComponetVersion), 4);
  std::string blob = meta.dump();
  std::uint64_t len = blob.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  for (const auto* t : tensors)
    out.write(reinterpret_cast<const char*>(t->data.data()),
              static_cast<std::streamsize>(t->data.size() * sizeof(double)));
}

json read_blob(std::ifstream& in, const char magic[4],
               const std::filesystem::path& path) {
  char m[4];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  if (!in.read(m, 4) || std::memcmp(m, magic, 4) != 0)
    throw std::runtime_error("checkpoint: wrong file type: " + path.string());
  if (!in.read(reinterpret_cast<char*>(&version), 4) || version != kComponetVersion)
    throw std::runtime_error("checkpoint: file version " + std::to_string(version) +
                             " but this build reads version " +
                             std::to_string(kComponetVersion));
  if (!in.read(reinterpret_cast<char*>(&len), 8))
    throw std::runtime_error("checkpoint: truncated header: " + path.string());
  std::string blob(len, '\0');
  if (!in.read(blob.data(), static_cast<std::streamsize>(len)))
    throw std::runtime_error("checkpoint: truncated metadata: " + path.string());
  return json::parse(blob);
}

void read_tensors(std::ifstream& in, const std::vector<nn::Tensor*>& tensors,
                  const std::filesystem::path& path) {
  for (auto* t : tensors)
    if (!in.read(reinterpret_cast<char*>(t->data.data()),
                 static_cast<std::streamsize>(t->data.size() * sizeof(double))))
      throw std::runtime_error("checkpoint: truncated tensor data: " + path.string());
}

}  // namespace

void save_base_checkpoint(const BaseDenoiser& model, const NoiseSchedule& schedule,
                          const TagVocabulary& vocab,
                          const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  json meta;
  meta["config"] = denoiser_config_to_json(model.config);
  meta["schedule"] = schedule_to_json(schedule);
  meta["vocab"] = vocab.tags();
  write_blob(out, "CNBS", meta, model.parameters());
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

BaseCheckpoint load_base_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json meta = read_blob(in, "CNBS", path);
  BaseCheckpoint ckpt;
  ckpt.schedule = schedule_from_json(meta.at("schedule"));
  ckpt.vocab = TagVocabulary(meta.at("vocab").get<std::vector<std::string>>());
  DenoiserConfig cfg = denoiser_config_from_json(meta.at("config"));
  Rng rng(0);
  ckpt.model = BaseDenoiser::init(cfg, rng);
  read_tensors(in, ckpt.model.parameters(), path);
  return ckpt;
}

void save_adapter_checkpoint(const AdapterModel& model,
                             const NoiseSchedule& schedule,
                             const TagVocabulary& vocab,
                             const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  json meta;
  meta["base_hash"] = model.base.hash();
  meta["config"] = denoiser_config_to_json(model.base.config);
  meta["schedule"] = schedule_to_json(schedule);
  meta["vocab"] = vocab.tags();
  write_blob(out, "CNAD", meta, model.psi_parameters());
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

AdapterModel load_adapter_checkpoint(const std::filesystem::path& path,
                                     const BaseCheckpoint& base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json meta = read_blob(in, "CNAD", path);
  const auto expected = meta.at("base_hash").get<std::uint64_t>();
  if (expected != base.model.hash())
    throw std::runtime_error(
        "adapter checkpoint was trained against a different base model "
        "(hash mismatch)");
  AdapterModel model = AdapterModel::create(base.model);
  read_tensors(in, model.psi_parameters(), path);
  return model;
}

ComponetConfig ComponetConfig::from_json(const json& j) {
  ComponetConfig d;
  d.window_seconds = j.value("window_seconds", d.window_seconds);
  d.codec_factor = j.value("codec_factor", d.codec_factor);
  d.hidden_channels = j.value("hidden_channels", d.hidden_channels);
  d.encoder_layers = j.value("encoder_layers", d.encoder_layers);
  d.prompt_dim = j.value("prompt_dim", d.prompt_dim);
  d.time_dim = j.value("time_dim", d.time_dim);
  d.schedule_steps = j.value("schedule_steps", d.schedule_steps);
  d.base_steps = j.value("base_steps", d.base_steps);
  d.adapter_steps = j.value("adapter_steps", d.adapter_steps);
  d.base_lr = j.value("base_lr", d.base_lr);
  d.adapter_lr = j.value("adapter_lr", d.adapter_lr);
  d.seed = j.value("seed", d.seed);
  return d;
}

json ComponetConfig::to_json() const {
  return json{{"window_seconds", window_seconds},
              {"codec_factor", codec_factor},
              {"hidden_channels", hidden_channels},
              {"encoder_layers", encoder_layers},
              {"prompt_dim", prompt_dim},
              {"time_dim", time_dim},
              {"schedule_steps", schedule_steps},
              {"base_steps", base_steps},
              {"adapter_steps", adapter_steps},
              {"base_lr", base_lr},
              {"adapter_lr", adapter_lr},
              {"seed", seed}};
}

}  // namespace componet
}  // namespace cocola
