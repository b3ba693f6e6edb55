#include "cocola/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <stdexcept>

#include "cocola/config_io.hpp"
#include "cocola/evaluation.hpp"
#include "json.hpp"

namespace cocola {

using nlohmann::json;

void TrainConfig::validate() const {
  sampler.validate();
  encoder.validate();
  if (learning_rate <= 0.0) throw std::runtime_error("train: learning_rate must be > 0");
  if (optimizer != "adam") throw std::runtime_error("train: unsupported optimizer " + optimizer);
  if (max_steps < 1) throw std::runtime_error("train: max_steps must be >= 1");
  if (eval_every < 1) throw std::runtime_error("train: eval_every must be >= 1");
}

ModelState ModelState::init(const EncoderConfig& config, Rng& rng) {
  ModelState s;
  s.encoder = EncoderParams::init(config, rng);
  s.head = BilinearHead::identity(config.embedding_dim);
  return s;
}

ModelState ModelState::init_random(const EncoderConfig& config, Rng& rng) {
  ModelState s;
  s.encoder = EncoderParams::init(config, rng);
  s.head.w = nn::Tensor::randn({config.embedding_dim, config.embedding_dim}, rng,
                               1.0 / std::sqrt(config.embedding_dim));
  return s;
}

std::vector<nn::Tensor*> ModelState::parameters() {
  auto out = encoder.parameters();
  out.push_back(&head.w);
  return out;
}

std::vector<const nn::Tensor*> ModelState::parameters() const {
  auto out = encoder.parameters();
  out.push_back(&head.w);
  return out;
}

ModelGrads ModelGrads::zeros_like(const ModelState& state) {
  ModelGrads g;
  for (const auto& b : state.encoder.blocks)
    g.encoder.blocks.push_back({nn::Tensor(b.w.shape), nn::Tensor(b.b.shape)});
  g.encoder.proj_w = nn::Tensor(state.encoder.proj_w.shape);
  g.encoder.proj_b = nn::Tensor(state.encoder.proj_b.shape);
  g.head_w = nn::Tensor(state.head.w.shape);
  return g;
}

std::vector<nn::Tensor*> ModelGrads::tensors() {
  auto out = encoder.parameters();
  out.push_back(&head_w);
  return out;
}

double contrastive_loss(const nn::Tensor& s, bool symmetric) {
  if (s.ndim() != 2 || s.dim(0) != s.dim(1))
    throw std::runtime_error("contrastive_loss: matrix must be square");
  if (!s.all_finite()) throw std::runtime_error("contrastive_loss: non-finite input");
  const int k = s.dim(0);
  double loss = 0.0;
  auto row_term = [&](auto value_at) {
    for (int a = 0; a < k; ++a) {
      double m = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < k; ++j) m = std::max(m, value_at(a, j));
      double sum = 0.0;
      for (int j = 0; j < k; ++j) sum += std::exp(value_at(a, j) - m);
      loss += m + std::log(sum) - value_at(a, a);
    }
  };
  row_term([&](int a, int j) { return s.data[static_cast<std::size_t>(a) * k + j]; });
  if (symmetric)
    row_term([&](int a, int j) { return s.data[static_cast<std::size_t>(j) * k + a]; });
  return loss;
}

nn::Tensor contrastive_loss_backward(const nn::Tensor& s, bool symmetric) {
  const int k = s.dim(0);
  nn::Tensor ds({k, k});
  auto add_grads = [&](bool transpose) {
    for (int a = 0; a < k; ++a) {
      double m = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < k; ++j) {
        double v = transpose ? s.data[static_cast<std::size_t>(j) * k + a]
                             : s.data[static_cast<std::size_t>(a) * k + j];
        m = std::max(m, v);
      }
      double sum = 0.0;
      for (int j = 0; j < k; ++j) {
        double v = transpose ? s.data[static_cast<std::size_t>(j) * k + a]
                             : s.data[static_cast<std::size_t>(a) * k + j];
        sum += std::exp(v - m);
      }
      for (int j = 0; j < k; ++j) {
        double v = transpose ? s.data[static_cast<std::size_t>(j) * k + a]
                             : s.data[static_cast<std::size_t>(a) * k + j];
        double g = std::exp(v - m) / sum - (j == a ? 1.0 : 0.0);
        if (transpose)
          ds.data[static_cast<std::size_t>(j) * k + a] += g;
        else
          ds.data[static_cast<std::size_t>(a) * k + j] += g;
      }
    }
  };
  add_grads(false);
  if (symmetric) add_grads(true);
  return ds;
}

StepStats train_step(const std::vector<Window>& batch, ModelState& state,
                     nn::Adam& optimizer, const TrainConfig& config, Rng& rng) {
  const int k = static_cast<int>(batch.size());
  const int d = config.encoder.embedding_dim;

  nn::Tensor h1({k, d}), h2({k, d});
  std::vector<EmbedCache> caches1(static_cast<std::size_t>(k));
  std::vector<EmbedCache> caches2(static_cast<std::size_t>(k));

  for (int i = 0; i < k; ++i) {
    const Window& w = batch[static_cast<std::size_t>(i)];
    SubMixPair pair = make_submix_pair(w, config.sampler.subset_mode, rng);
    auto m1 = augment(pair.mix_1, config.sampler.noise_sigma, rng);
    auto m2 = augment(pair.mix_2, config.sampler.noise_sigma, rng);
    auto f1 = mel_features(m1, config.encoder.mel);
    auto f2 = mel_features(m2, config.encoder.mel);
    auto e1 = embed(f1, state.encoder, config.encoder, EmbedMode::train, &rng,
                    &caches1[static_cast<std::size_t>(i)]);
    auto e2 = embed(f2, state.encoder, config.encoder, EmbedMode::train, &rng,
                    &caches2[static_cast<std::size_t>(i)]);
    std::copy(e1.data.begin(), e1.data.end(),
              h1.data.begin() + static_cast<std::size_t>(i) * d);
    std::copy(e2.data.begin(), e2.data.end(),
              h2.data.begin() + static_cast<std::size_t>(i) * d);
  }

  nn::Tensor s = similarity_matrix(h1, h2, state.head);
  double loss;
  try {
    loss = contrastive_loss(s, config.symmetric_loss);
  } catch (const std::exception&) {
    std::string ids;
    for (const auto& w : batch) ids += w.track_id + "@" + std::to_string(w.offset) + " ";
    throw std::runtime_error("train_step: non-finite loss on batch: " + ids);
  }
  if (!std::isfinite(loss)) {
    std::string ids;
    for (const auto& w : batch) ids += w.track_id + "@" + std::to_string(w.offset) + " ";
    throw std::runtime_error("train_step: non-finite loss on batch: " + ids);
  }

  StepStats stats;
  stats.loss = loss;
  stats.accuracy = batch_accuracy(s).accuracy;

  nn::Tensor ds = contrastive_loss_backward(s, config.symmetric_loss);
  nn::Tensor dh1, dh2;
  ModelGrads grads = ModelGrads::zeros_like(state);
  similarity_matrix_backward(h1, h2, state.head, ds, dh1, dh2, grads.head_w);

  for (int i = 0; i < k; ++i) {
    nn::Tensor g1({d}), g2({d});
    std::copy(dh1.data.begin() + static_cast<std::size_t>(i) * d,
              dh1.data.begin() + static_cast<std::size_t>(i + 1) * d, g1.data.begin());
    std::copy(dh2.data.begin() + static_cast<std::size_t>(i) * d,
              dh2.data.begin() + static_cast<std::size_t>(i + 1) * d, g2.data.begin());
    embed_backward(caches1[static_cast<std::size_t>(i)], state.encoder,
                   config.encoder, g1, grads.encoder);
    embed_backward(caches2[static_cast<std::size_t>(i)], state.encoder,
                   config.encoder, g2, grads.encoder);
  }

  optimizer.step(state.parameters(), grads.tensors());
  return stats;
}

namespace {

constexpr char kCheckpointMagic[4] = {'C', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  nn::Tensor* tensor;
};

std::vector<NamedTensor> named_tensors(ModelState& state) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < state.encoder.blocks.size(); ++i) {
    out.push_back({"encoder.block" + std::to_string(i) + ".w",
                   &state.encoder.blocks[i].w});
    out.push_back({"encoder.block" + std::to_string(i) + ".b",
                   &state.encoder.blocks[i].b});
  }
  out.push_back({"encoder.proj_w", &state.encoder.proj_w});
  out.push_back({"encoder.proj_b", &state.encoder.proj_b});
  out.push_back({"encoder.feature_mean", &state.encoder.feature_mean});
  out.push_back({"encoder.feature_std", &state.encoder.feature_std});
  out.push_back({"head.w", &state.head.w});
  return out;
}

// Per-mel-bin statistics over a few training batches, used when
// standardize_features is enabled.
void estimate_feature_norm(const TrackStore& store, const TrainConfig& config,
                           ModelState& state, Rng& rng) {
  const int n_mels = config.encoder.mel.n_mels;
  std::vector<double> sum(static_cast<std::size_t>(n_mels), 0.0);
  std::vector<double> sum2(static_cast<std::size_t>(n_mels), 0.0);
  std::int64_t count = 0;
  for (int b = 0; b < 8; ++b) {
    auto batch = sample_usable_windows(store, Split::train, config.sampler, rng);
    for (const auto& w : batch) {
      SubMixPair pair = make_submix_pair(w, config.sampler.subset_mode, rng);
      for (const auto* wave : {&pair.mix_1, &pair.mix_2}) {
        auto f = mel_features(*wave, config.encoder.mel);
        for (int m = 0; m < n_mels; ++m) {
          const double* row = f.values.data() + static_cast<std::size_t>(m) * f.n_frames;
          for (int t = 0; t < f.n_frames; ++t) {
            sum[static_cast<std::size_t>(m)] += row[t];
            sum2[static_cast<std::size_t>(m)] += row[t] * row[t];
          }
        }
        count += f.n_frames;
      }
    }
  }
  for (int m = 0; m < n_mels; ++m) {
    const double mu = sum[static_cast<std::size_t>(m)] / static_cast<double>(count);
    const double var =
        sum2[static_cast<std::size_t>(m)] / static_cast<double>(count) - mu * mu;
    state.encoder.feature_mean.data[static_cast<std::size_t>(m)] = mu;
    state.encoder.feature_std.data[static_cast<std::size_t>(m)] =
        std::sqrt(std::max(var, 1e-6));
  }
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot write " + tmp.string());

    json meta;
    meta["step"] = ckpt.step;
    meta["config"] = to_json(ckpt.config);
    meta["rng_state"] = ckpt.rng_state;
    json hist = json::array();
    for (const auto& row : ckpt.history)
      hist.push_back({row.step, row.loss, row.accuracy});
    meta["history"] = std::move(hist);

    auto& model = const_cast<ModelState&>(ckpt.model);
    json tensors = json::array();
    for (const auto& nt : named_tensors(model))
      tensors.push_back({{"name", nt.name}, {"shape", nt.tensor->shape}});
    meta["tensors"] = std::move(tensors);

    std::string blob = meta.dump();
    out.write(kCheckpointMagic, 4);
    out.write(reinterpret_cast<const char*>(&kCheckpointVersion), 4);
    std::uint64_t len = blob.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    for (const auto& nt : named_tensors(model))
      out.write(reinterpret_cast<const char*>(nt.tensor->data.data()),
                static_cast<std::streamsize>(nt.tensor->data.size() * sizeof(double)));
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw std::runtime_error("save_checkpoint: write failed for " + path.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());

  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw std::runtime_error("load_checkpoint: not a checkpoint file: " + path.string());
  if (!in.read(reinterpret_cast<char*>(&version), 4))
    throw std::runtime_error("load_checkpoint: truncated header: " + path.string());
  if (version != kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: file version " + std::to_string(version) +
                             " but this build reads version " +
                             std::to_string(kCheckpointVersion));
  if (!in.read(reinterpret_cast<char*>(&len), 8))
    throw std::runtime_error("load_checkpoint: truncated header: " + path.string());
  std::string blob(len, '\0');
  if (!in.read(blob.data(), static_cast<std::streamsize>(len)))
    throw std::runtime_error("load_checkpoint: truncated metadata: " + path.string());

  json meta;
  try {
    meta = json::parse(blob);
  } catch (const json::exception& e) {
    throw std::runtime_error("load_checkpoint: bad metadata in " + path.string() +
                             ": " + e.what());
  }

  Checkpoint ckpt;
  ckpt.step = meta.at("step").get<std::int64_t>();
  ckpt.config = train_config_from_json(meta.at("config"));
  ckpt.rng_state = meta.at("rng_state").get<std::string>();
  for (const auto& row : meta.at("history"))
    ckpt.history.push_back({row.at(0).get<std::int64_t>(), row.at(1).get<double>(),
                            row.at(2).get<double>()});

  Rng init_rng(0);
  ckpt.model = ModelState::init(ckpt.config.encoder, init_rng);
  auto tensors = named_tensors(ckpt.model);
  const auto& tensor_meta = meta.at("tensors");
  if (tensor_meta.size() != tensors.size())
    throw std::runtime_error("load_checkpoint: tensor count mismatch in " + path.string());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& tm = tensor_meta[i];
    if (tm.at("name").get<std::string>() != tensors[i].name)
      throw std::runtime_error("load_checkpoint: tensor order mismatch in " + path.string());
    auto shape = tm.at("shape").get<std::vector<int>>();
    if (shape != tensors[i].tensor->shape)
      throw std::runtime_error("load_checkpoint: shape mismatch for " + tensors[i].name);
    if (!in.read(reinterpret_cast<char*>(tensors[i].tensor->data.data()),
                 static_cast<std::streamsize>(tensors[i].tensor->data.size() *
                                              sizeof(double))))
      throw std::runtime_error("load_checkpoint: truncated tensor data: " + path.string());
  }
  return ckpt;
}

Checkpoint train(const DatasetManifest& manifest, const TrainConfig& config,
                 const std::filesystem::path& out_dir, std::ostream* log) {
  config.validate();
  std::filesystem::create_directories(out_dir);

  TrackStore store(manifest, config.encoder.mel.sample_rate);
  Rng rng(config.seed);
  ModelState state = ModelState::init(config.encoder, rng);
  if (config.encoder.standardize_features)
    estimate_feature_norm(store, config, state, rng);
  nn::Adam optimizer(config.learning_rate);

  std::ofstream metrics(out_dir / "metrics.csv");
  if (!metrics) throw std::runtime_error("train: cannot write metrics.csv in " +
                                         out_dir.string());
  metrics << "step,loss,batch_accuracy,wallclock\n";
  const auto t0 = std::chrono::steady_clock::now();

  Checkpoint ckpt;
  ckpt.config = config;

  for (std::int64_t step = 1; step <= config.max_steps; ++step) {
    auto batch = sample_usable_windows(store, Split::train, config.sampler, rng);
    StepStats stats = train_step(batch, state, optimizer, config, rng);

    const double wallclock =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char line[160];
    std::snprintf(line, sizeof(line), "%lld,%.9g,%.9g,%.3f\n",
                  static_cast<long long>(step), stats.loss, stats.accuracy, wallclock);
    metrics << line;
    metrics.flush();
    ckpt.history.push_back({step, stats.loss, stats.accuracy});
    if (log)
      (*log) << "step " << step << " loss " << stats.loss << " acc "
             << stats.accuracy << "\n";

    if (step % config.eval_every == 0 && step != config.max_steps) {
      ckpt.step = step;
      ckpt.model = state;
      ckpt.rng_state = rng.state();
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_step%06lld.ckpt",
                    static_cast<long long>(step));
      save_checkpoint(ckpt, out_dir / name);
    }
  }

  ckpt.step = config.max_steps;
  ckpt.model = std::move(state);
  ckpt.rng_state = rng.state();
  save_checkpoint(ckpt, out_dir / "checkpoint.ckpt");
  return ckpt;
}

}  // namespace cocola
