// cocola: stem-coherence encoder toolkit. One binary, eight subcommands:
// ingest, synth-data, train, eval, score, componet-train, componet-generate,
// report.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "cocola/componet.hpp"
#include "cocola/config_io.hpp"
#include "cocola/evaluation.hpp"
#include "cocola/manifest.hpp"
#include "cocola/resample.hpp"
#include "cocola/synthbench.hpp"
#include "cocola/training.hpp"
#include "cocola/wav.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cocola;

namespace {

// Run log under <dir>/logs, named by timestamp + subcommand. Primary outputs
// stay deterministic; logs carry the wall-clock detail.
std::ofstream open_run_log(const fs::path& out_dir, const std::string& subcommand,
                           fs::path* log_path) {
  auto dir = out_dir / "logs";
  std::error_code ec;
  fs::create_directories(dir, ec);
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  const auto stamp = std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
  char name[96];
  std::snprintf(name, sizeof(name), "%lld_%s.log", static_cast<long long>(stamp),
                subcommand.c_str());
  *log_path = dir / name;
  return std::ofstream(*log_path);
}

SplitSpec parse_split_flag(const std::string& flag, std::uint64_t seed) {
  if (flag == "explicit") return SplitSpec::explicit_dirs();
  double fr[3] = {0, 0, 0};
  std::istringstream in(flag);
  std::string part;
  int i = 0;
  while (std::getline(in, part, ',') && i < 3) fr[i++] = std::stod(part);
  if (i != 3 || fr[0] < 0 || fr[1] < 0 || fr[2] < 0 ||
      std::abs(fr[0] + fr[1] + fr[2] - 1.0) > 1e-9)
    throw std::runtime_error("--split must be 'explicit' or three fractions summing to 1");
  return SplitSpec::ratio(fr[0], fr[1], fr[2], seed);
}

std::vector<std::string> split_tags(const std::string& csv) {
  std::vector<std::string> out;
  std::istringstream in(csv);
  std::string part;
  while (std::getline(in, part, ',')) {
    auto tag = normalize_tag(part);
    if (!tag.empty()) out.push_back(tag);
  }
  return out;
}

json load_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("bad JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

int cmd_ingest(const std::string& root, const std::string& layout,
               const std::string& out, const std::string& split,
               std::uint64_t seed) {
  Layout lay;
  if (layout == "per_track_dirs") lay = Layout::per_track_dirs;
  else if (layout == "flat_stems") lay = Layout::flat_stems;
  else throw std::runtime_error("--layout must be per_track_dirs or flat_stems");

  auto result = scan_dataset(root, lay, parse_split_flag(split, seed));
  for (const auto& w : result.warnings)
    std::cerr << "warning: " << w.track_id << ": " << w.message << "\n";
  save_manifest(result.manifest, out);

  auto report = validate_manifest(result.manifest);
  std::cout << "ingested " << result.manifest.entries.size() << " tracks ("
            << report.ok << " ok, " << report.missing << " missing, "
            << report.decode_errors << " undecodable, "
            << report.length_mismatches << " length mismatches) -> " << out
            << "\n";
  return 0;
}

int cmd_synth_data(const std::string& spec_path, const std::string& out,
                   std::optional<std::uint64_t> seed) {
  SynthSpec spec = spec_path.empty() ? SynthSpec::defaults()
                                     : SynthSpec::from_json(load_json_file(spec_path));
  if (seed) spec.seed = *seed;
  auto result = generate(spec, out);
  std::cout << "generated " << result.manifest.entries.size() << " tracks ("
            << result.collisions.size() << " key/tempo collisions), manifest "
            << result.manifest_path.string() << "\n";
  std::cout << "coherence oracle: intra " << result.intra_coherence << " inter "
            << result.inter_coherence << "\n";
  if (result.intra_coherence <= result.inter_coherence)
    std::cerr << "warning: intra-track coherence does not exceed inter-track\n";
  return 0;
}

struct TrainOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps;
  std::optional<double> lr;
  std::optional<int> k;
  std::optional<std::int64_t> window;
};

int cmd_train(const std::string& manifest_path, const std::string& config_path,
              const std::string& out_dir, const TrainOverrides& ov) {
  DatasetManifest manifest = load_manifest(manifest_path);
  TrainConfig config =
      config_path.empty() ? TrainConfig{} : load_train_config(config_path);
  if (ov.seed) {
    config.seed = *ov.seed;
    config.sampler.seed = *ov.seed;
  }
  if (ov.steps) config.max_steps = *ov.steps;
  if (ov.lr) config.learning_rate = *ov.lr;
  if (ov.k) config.sampler.batch_size = *ov.k;
  if (ov.window) config.sampler.window_samples = *ov.window;
  config.validate();

  fs::create_directories(out_dir);
  fs::path log_path;
  auto log = open_run_log(out_dir, "train", &log_path);
  std::cout << "training " << config.max_steps << " steps (log: "
            << log_path.string() << ")\n";
  auto ckpt = train(manifest, config, out_dir, &log);
  std::cout << "final checkpoint: " << (fs::path(out_dir) / "checkpoint.ckpt").string()
            << " (step " << ckpt.step << ")\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& manifest_path,
             int k, std::int64_t batches, const std::string& split,
             std::uint64_t seed, const std::string& out) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  DatasetManifest manifest = load_manifest(manifest_path);
  EvalConfig config;
  config.k_eval = k;
  config.n_batches = batches;
  auto sp = parse_split(split);
  if (!sp) throw std::runtime_error("--split must be train, validation or test");
  config.split = *sp;
  config.seed = seed;

  auto report = evaluate_classification(ckpt, manifest, config);
  if (!out.empty()) write_accuracy_report_json(report, out);
  std::printf("accuracy %.4f +- %.4f over %lld batches (K=%d, %lld ties)\n",
              report.accuracy, report.half_width,
              static_cast<long long>(report.n_batches), k,
              static_cast<long long>(report.ties));
  return 0;
}

int cmd_score(const std::string& ckpt_path, const std::string& pairs_path,
              const std::string& out, const std::string& gt_manifest,
              int gt_pairs, const std::string& gt_split, std::uint64_t seed) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  auto pairs = read_pairs_csv(pairs_path);

  ScoreReportOptions options;
  options.seed = seed;
  DatasetManifest gtm;
  if (!gt_manifest.empty()) {
    gtm = load_manifest(gt_manifest);
    options.ground_truth_manifest = &gtm;
    options.ground_truth_pairs = gt_pairs;
    auto sp = parse_split(gt_split);
    if (!sp) throw std::runtime_error("--ground-truth-split must be a split name");
    options.ground_truth_split = *sp;
  }

  auto report = score_report(ckpt, pairs, options);
  write_score_report_csv(report, out);
  fs::path twin = fs::path(out).replace_extension(".json");
  write_score_report_json(report, twin);
  std::printf("scored %lld pairs (%lld errors), mean %.6g median %.6g -> %s\n",
              static_cast<long long>(report.n_ok + report.n_errors),
              static_cast<long long>(report.n_errors), report.mean, report.median,
              out.c_str());
  return 0;
}

std::vector<componet::TrainClip> slice_componet_clips(
    const DatasetManifest& manifest, Split split, int rate,
    std::int64_t window_samples) {
  std::vector<componet::TrainClip> clips;
  for (const auto& entry : manifest.entries) {
    if (entry.split != split) continue;
    StemTrack track = load_track(manifest, entry, rate);
    const auto n_windows =
        static_cast<std::int64_t>(track.n_samples) / window_samples;
    for (std::int64_t wi = 0; wi < n_windows; ++wi) {
      componet::TrainClip clip;
      for (const auto& stem : track.stems) {
        auto begin = stem.samples.begin() + wi * window_samples;
        clip.stems.emplace_back(begin, begin + window_samples);
        clip.tags.push_back(stem.tag);
      }
      clips.push_back(std::move(clip));
    }
  }
  return clips;
}

int cmd_componet_train(const std::string& manifest_path,
                       const std::string& config_path, const std::string& out_dir,
                       std::optional<std::uint64_t> seed) {
  DatasetManifest manifest = load_manifest(manifest_path);
  componet::ComponetConfig config =
      config_path.empty() ? componet::ComponetConfig{}
                          : componet::ComponetConfig::from_json(load_json_file(config_path));
  if (seed) config.seed = *seed;

  TagVocabulary vocab = TagVocabulary::from_manifest(manifest);
  const int rate = manifest.sample_rate > 0 ? manifest.sample_rate : 16000;
  const auto window_samples =
      static_cast<std::int64_t>(config.window_seconds * rate);
  auto clips = slice_componet_clips(manifest, Split::train, rate, window_samples);
  if (clips.empty())
    throw std::runtime_error("componet-train: no training clips of " +
                             std::to_string(config.window_seconds) + "s available");

  componet::DenoiserConfig dcfg;
  dcfg.latent_channels = 1;
  dcfg.latent_length = static_cast<int>(window_samples / config.codec_factor);
  dcfg.hidden_channels = config.hidden_channels;
  dcfg.encoder_layers = config.encoder_layers;
  dcfg.prompt_dim = config.prompt_dim;
  dcfg.time_dim = config.time_dim;
  dcfg.vocab_size = vocab.size();

  auto schedule = componet::NoiseSchedule::cosine(config.schedule_steps);
  componet::LatentCodec codec{config.codec_factor};
  Rng rng(config.seed);

  fs::create_directories(out_dir);
  fs::path log_path;
  auto log = open_run_log(out_dir, "componet-train", &log_path);
  std::cout << "componet: " << clips.size() << " clips, base "
            << config.base_steps << " steps, adapter " << config.adapter_steps
            << " steps (log: " << log_path.string() << ")\n";

  componet::BaseDenoiser base = componet::BaseDenoiser::init(dcfg, rng);
  componet::base_train(clips, base, schedule, codec, vocab,
                       static_cast<int>(config.base_steps), config.base_lr, rng,
                       &log);
  componet::save_base_checkpoint(base, schedule, vocab,
                                 fs::path(out_dir) / "base.ckpt");

  componet::AdapterModel adapter = componet::AdapterModel::create(base);
  componet::adapter_train(clips, adapter, schedule, codec, vocab,
                          static_cast<int>(config.adapter_steps),
                          config.adapter_lr, rng, &log);
  componet::save_adapter_checkpoint(adapter, schedule, vocab,
                                    fs::path(out_dir) / "adapter.ckpt");

  std::ofstream cfg_out(fs::path(out_dir) / "componet_config.json");
  cfg_out << config.to_json().dump(2) << "\n";
  std::cout << "saved base.ckpt and adapter.ckpt to " << out_dir << "\n";
  return 0;
}

int cmd_componet_generate(const std::string& ckpt_dir, const std::string& tags_in,
                          const std::string& tags_out, const std::string& cond,
                          int steps, std::uint64_t seed, const std::string& out) {
  auto base = componet::load_base_checkpoint(fs::path(ckpt_dir) / "base.ckpt");
  auto adapter = componet::load_adapter_checkpoint(
      fs::path(ckpt_dir) / "adapter.ckpt", base);

  componet::ComponetConfig config;
  const fs::path cfg_path = fs::path(ckpt_dir) / "componet_config.json";
  if (fs::exists(cfg_path))
    config = componet::ComponetConfig::from_json(load_json_file(cfg_path));
  componet::LatentCodec codec{config.codec_factor};
  const int rate = 16000;

  auto in_tags = split_tags(tags_in);
  auto out_tags = split_tags(tags_out);
  if (out_tags.empty()) throw std::runtime_error("--tags-out must name at least one tag");
  componet::Prompt prompt = componet::build_prompt(in_tags, out_tags, base.vocab);
  nn::Tensor s = base.model.embed_prompt(prompt);

  int latent_len = base.model.config.latent_length;
  nn::Tensor w({1, 1, latent_len});
  if (!cond.empty()) {
    WavData wav = read_wav(cond);
    auto mono = resample(to_mono(wav), wav.sample_rate, rate);
    const auto need = static_cast<std::size_t>(latent_len) *
                      static_cast<std::size_t>(codec.factor);
    mono.resize(need, 0.0);
    w = codec.encode(mono);
  }

  Rng rng(seed);
  if (steps <= 0) steps = base.schedule.max_step;
  auto predictor = [&](const nn::Tensor& z_t, int t) {
    return componet::adapter_denoise(adapter, z_t, s, t, w);
  };
  nn::Tensor z0 = componet::ddpm_sample(predictor, base.schedule, steps,
                                        {1, 1, latent_len}, rng);
  auto wave = codec.decode(z0);
  write_wav_float32(out, rate, wave);
  std::cout << "wrote " << wave.size() << " samples to " << out << " (task "
            << componet::task_label_name(componet::classify_task(
                   [&] {
                     std::vector<int> y;
                     for (std::size_t i = 0; i < in_tags.size(); ++i)
                       y.push_back(static_cast<int>(i));
                     return y;
                   }(),
                   [&] {
                     std::vector<int> x;
                     for (std::size_t i = 0; i < out_tags.size(); ++i)
                       x.push_back(static_cast<int>(in_tags.size() + i));
                     return x;
                   }()))
            << " by tag topology)\n";
  return 0;
}

int cmd_report(const std::string& scores_path, const std::string& fad_path,
               const std::string& out) {
  ScoreReport report = read_score_report_json(scores_path);
  if (!fad_path.empty()) {
    json fad = load_json_file(fad_path);
    if (fad.contains("fad_clap")) report.fad_clap = fad.at("fad_clap").get<double>();
    if (fad.contains("fad_encodec"))
      report.fad_encodec = fad.at("fad_encodec").get<double>();
    if (fad.contains("fad_vggish"))
      report.fad_vggish = fad.at("fad_vggish").get<double>();
  }
  write_score_report_json(report, out);

  auto cell = [](std::optional<double> v) {
    if (!v) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4g", *v);
    return std::string(buf);
  };
  std::printf("%-18s %s\n", "ccs_mean", cell(report.mean).c_str());
  std::printf("%-18s %s\n", "ccs_median", cell(report.median).c_str());
  if (report.ground_truth_mean)
    std::printf("%-18s %s\n", "ground_truth_mean", cell(report.ground_truth_mean).c_str());
  std::printf("%-18s %s\n", "fad_clap", cell(report.fad_clap).c_str());
  std::printf("%-18s %s\n", "fad_encodec", cell(report.fad_encodec).c_str());
  std::printf("%-18s %s\n", "fad_vggish", cell(report.fad_vggish).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"COCOLA: stem-coherence contrastive encoder and CompoNet toy"};
  app.require_subcommand(1);

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Scan a multi-stem dataset into a manifest");
  std::string ing_root, ing_layout = "per_track_dirs", ing_out = "manifest.json";
  std::string ing_split = "0.8,0.1,0.1";
  std::uint64_t ing_seed = 17;
  ingest->add_option("--root", ing_root, "Dataset root directory")->required();
  ingest->add_option("--layout", ing_layout, "per_track_dirs or flat_stems")
      ->capture_default_str();
  ingest->add_option("--out", ing_out, "Manifest output path")->capture_default_str();
  ingest->add_option("--split", ing_split, "'explicit' or train,val,test fractions")
      ->capture_default_str();
  ingest->add_option("--seed", ing_seed, "Split assignment seed")->capture_default_str();

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "Generate the synthetic coherence benchmark");
  std::string syn_spec, syn_out;
  std::uint64_t syn_seed = 0;
  bool syn_seed_set = false;
  synth->add_option("--spec", syn_spec, "SynthSpec JSON (defaults when omitted)");
  synth->add_option("--out", syn_out, "Output dataset directory")->required();
  synth->add_option("--seed", syn_seed, "Override the spec seed")
      ->each([&](const std::string&) { syn_seed_set = true; });

  // train
  auto* train_cmd = app.add_subcommand(
      "train", "Train the coherence encoder (defaults: K=32, 5s@16kHz windows, "
               "r=0.5, Adam lr=1e-3, sigma=1e-3, dropout=0.1, d=512)");
  std::string tr_manifest, tr_config, tr_out;
  TrainOverrides tr_ov;
  std::uint64_t tr_seed = 0;
  bool tr_seed_set = false;
  std::int64_t tr_steps = 0;
  double tr_lr = 0.0;
  int tr_k = 0;
  std::int64_t tr_window = 0;
  train_cmd->add_option("--manifest", tr_manifest, "Dataset manifest")->required();
  train_cmd->add_option("--config", tr_config, "TrainConfig JSON");
  train_cmd->add_option("--out-dir", tr_out, "Output directory")->required();
  train_cmd->add_option("--seed", tr_seed, "Seed override (default 0)")
      ->each([&](const std::string&) { tr_seed_set = true; });
  train_cmd->add_option("--steps", tr_steps, "max_steps override");
  train_cmd->add_option("--lr", tr_lr, "Learning rate override (paper default 1e-3)");
  train_cmd->add_option("--k", tr_k, "Batch size override (paper default 32)");
  train_cmd->add_option("--window", tr_window,
                        "Window length override in samples (paper default 80000)");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Coherent-pair classification accuracy");
  std::string ev_ckpt, ev_manifest, ev_split = "test", ev_out;
  int ev_k = 2;
  std::int64_t ev_batches = 0;
  std::uint64_t ev_seed = 0;
  eval_cmd->add_option("--ckpt", ev_ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--manifest", ev_manifest, "Dataset manifest")->required();
  eval_cmd->add_option("--k", ev_k, "Batch size K (paper evaluation uses 2)")
      ->capture_default_str();
  eval_cmd->add_option("--batches", ev_batches, "Batch count (0 = full epoch)")
      ->capture_default_str();
  eval_cmd->add_option("--split", ev_split, "Evaluation split")->capture_default_str();
  eval_cmd->add_option("--seed", ev_seed, "Sampling seed")->capture_default_str();
  eval_cmd->add_option("--out", ev_out, "Accuracy report JSON path");

  // score
  auto* score_cmd = app.add_subcommand("score", "COCOLA score for conditioning/candidate pairs");
  std::string sc_ckpt, sc_pairs, sc_out = "report.csv", sc_gtm, sc_gts = "test";
  int sc_gtp = 0;
  std::uint64_t sc_seed = 0;
  score_cmd->add_option("--ckpt", sc_ckpt, "Checkpoint path")->required();
  score_cmd->add_option("--pairs", sc_pairs,
                        "CSV: pair_id,conditioning_path,candidate_path")->required();
  score_cmd->add_option("--out", sc_out, "Report CSV path (JSON twin written too)")
      ->capture_default_str();
  score_cmd->add_option("--ground-truth-manifest", sc_gtm,
                        "Manifest for real-positive-pair upper bounds");
  score_cmd->add_option("--ground-truth-pairs", sc_gtp, "Ground-truth pair count")
      ->capture_default_str();
  score_cmd->add_option("--ground-truth-split", sc_gts, "Split for ground-truth pairs")
      ->capture_default_str();
  score_cmd->add_option("--seed", sc_seed, "Ground-truth sampling seed")
      ->capture_default_str();

  // componet-train
  auto* ct = app.add_subcommand(
      "componet-train", "Pretrain the toy denoiser, then fine-tune the adapter "
                        "(Adam, adapter lr default 1e-4)");
  std::string ct_manifest, ct_config, ct_out;
  std::uint64_t ct_seed = 0;
  bool ct_seed_set = false;
  ct->add_option("--manifest", ct_manifest, "Dataset manifest")->required();
  ct->add_option("--config", ct_config, "ComponetConfig JSON");
  ct->add_option("--out", ct_out, "Output directory")->required();
  ct->add_option("--seed", ct_seed, "Seed override (default 0)")
      ->each([&](const std::string&) { ct_seed_set = true; });

  // componet-generate
  auto* cg = app.add_subcommand("componet-generate",
                                "Sample a latent clip with the trained adapter");
  std::string cg_ckpt, cg_tags_in, cg_tags_out, cg_cond, cg_out = "clip.wav";
  int cg_steps = 0;
  std::uint64_t cg_seed = 0;
  cg->add_option("--ckpt", cg_ckpt, "Checkpoint directory from componet-train")->required();
  cg->add_option("--tags-in", cg_tags_in, "Comma-separated conditioning tags (may be empty)");
  cg->add_option("--tags-out", cg_tags_out, "Comma-separated output tags")->required();
  cg->add_option("--cond", cg_cond, "Conditioning audio WAV (silence when omitted)");
  cg->add_option("--steps", cg_steps, "Sampler steps (0 = full schedule)")
      ->capture_default_str();
  cg->add_option("--seed", cg_seed, "Sampling seed")->capture_default_str();
  cg->add_option("--out", cg_out, "Output WAV path")->capture_default_str();

  // report
  auto* rep = app.add_subcommand("report",
                                 "Merge a score report with external FAD values");
  std::string rp_scores, rp_fad, rp_out = "combined.json";
  rep->add_option("--scores", rp_scores, "Score report JSON")->required();
  rep->add_option("--fad", rp_fad, "External FAD JSON (fad_clap/fad_encodec/fad_vggish)");
  rep->add_option("--out", rp_out, "Combined report path")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;  // usage errors exit 1, --help exits 0
  }

  try {
    if (*ingest) return cmd_ingest(ing_root, ing_layout, ing_out, ing_split, ing_seed);
    if (*synth)
      return cmd_synth_data(syn_spec, syn_out,
                            syn_seed_set ? std::optional<std::uint64_t>(syn_seed)
                                         : std::nullopt);
    if (*train_cmd) {
      if (tr_seed_set) tr_ov.seed = tr_seed;
      if (train_cmd->count("--steps")) tr_ov.steps = tr_steps;
      if (train_cmd->count("--lr")) tr_ov.lr = tr_lr;
      if (train_cmd->count("--k")) tr_ov.k = tr_k;
      if (train_cmd->count("--window")) tr_ov.window = tr_window;
      return cmd_train(tr_manifest, tr_config, tr_out, tr_ov);
    }
    if (*eval_cmd)
      return cmd_eval(ev_ckpt, ev_manifest, ev_k, ev_batches, ev_split, ev_seed, ev_out);
    if (*score_cmd)
      return cmd_score(sc_ckpt, sc_pairs, sc_out, sc_gtm, sc_gtp, sc_gts, sc_seed);
    if (*ct)
      return cmd_componet_train(ct_manifest, ct_config, ct_out,
                                ct_seed_set ? std::optional<std::uint64_t>(ct_seed)
                                            : std::nullopt);
    if (*cg)
      return cmd_componet_generate(cg_ckpt, cg_tags_in, cg_tags_out, cg_cond,
                                   cg_steps, cg_seed, cg_out);
    if (*rep) return cmd_report(rp_scores, rp_fad, rp_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
