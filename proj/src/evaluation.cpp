#include "cocola/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "cocola/resample.hpp"
#include "json.hpp"

namespace cocola {

using nlohmann::json;

BatchAccuracy batch_accuracy(const nn::Tensor& s) {
  if (s.ndim() != 2 || s.dim(0) != s.dim(1))
    throw std::runtime_error("batch_accuracy: matrix must be square");
  if (!s.all_finite()) throw std::runtime_error("batch_accuracy: non-finite input");
  const int k = s.dim(0);
  BatchAccuracy out;
  int hits = 0;
  for (int a = 0; a < k; ++a) {
    int best = 0;
    bool tie = false;
    for (int j = 1; j < k; ++j) {
      const double v = s.data[static_cast<std::size_t>(a) * k + j];
      const double b = s.data[static_cast<std::size_t>(a) * k + best];
      if (v > b) {
        best = j;
        tie = false;
      } else if (v == b) {
        tie = true;
      }
    }
    if (tie) out.ties++;
    if (best == a) hits++;
  }
  out.accuracy = static_cast<double>(hits) / k;
  return out;
}

void EvalConfig::validate() const {
  if (k_eval < 2) throw std::runtime_error("eval: K must be >= 2 for classification");
  if (n_batches < 0) throw std::runtime_error("eval: n_batches must be >= 0");
}

AccuracyReport evaluate_classification(const Checkpoint& ckpt,
                                       const DatasetManifest& manifest,
                                       const EvalConfig& config) {
  config.validate();
  TrackStore store(manifest, ckpt.config.encoder.mel.sample_rate);

  SamplerConfig sampler = ckpt.config.sampler;
  sampler.batch_size = config.k_eval;
  sampler.noise_sigma = 0.0;  // noiseless evaluation
  sampler.seed = config.seed;

  std::int64_t n_batches = config.n_batches;
  if (n_batches == 0) {
    auto eligible = store.eligible(config.split,
                                   static_cast<std::uint64_t>(sampler.window_samples));
    n_batches = std::max<std::int64_t>(
        1, static_cast<std::int64_t>(eligible.size()) / config.k_eval);
  }

  Rng rng(config.seed);
  const int d = ckpt.config.encoder.embedding_dim;
  double acc_sum = 0.0;
  std::int64_t ties = 0;
  for (std::int64_t b = 0; b < n_batches; ++b) {
    auto batch = sample_usable_windows(store, config.split, sampler, rng);
    nn::Tensor h1({config.k_eval, d}), h2({config.k_eval, d});
    for (int i = 0; i < config.k_eval; ++i) {
      SubMixPair pair = make_submix_pair(batch[static_cast<std::size_t>(i)],
                                         sampler.subset_mode, rng);
      auto f1 = mel_features(pair.mix_1, ckpt.config.encoder.mel);
      auto f2 = mel_features(pair.mix_2, ckpt.config.encoder.mel);
      auto e1 = embed(f1, ckpt.model.encoder, ckpt.config.encoder, EmbedMode::eval);
      auto e2 = embed(f2, ckpt.model.encoder, ckpt.config.encoder, EmbedMode::eval);
      std::copy(e1.data.begin(), e1.data.end(),
                h1.data.begin() + static_cast<std::size_t>(i) * d);
      std::copy(e2.data.begin(), e2.data.end(),
                h2.data.begin() + static_cast<std::size_t>(i) * d);
    }
    auto ba = batch_accuracy(similarity_matrix(h1, h2, ckpt.model.head));
    acc_sum += ba.accuracy;
    ties += ba.ties;
  }

  AccuracyReport report;
  report.dataset = manifest.root.filename().string();
  report.accuracy = acc_sum / static_cast<double>(n_batches);
  report.n_batches = n_batches;
  report.decisions = n_batches * config.k_eval;
  report.ties = ties;
  const double p = report.accuracy;
  report.half_width =
      1.96 * std::sqrt(std::max(0.0, p * (1.0 - p)) /
                       static_cast<double>(report.decisions));
  report.config = config;
  return report;
}

double cocola_score(const Checkpoint& ckpt, std::span<const double> y,
                    std::span<const double> x) {
  const auto& mel = ckpt.config.encoder.mel;
  if (static_cast<int>(y.size()) < mel.win_length ||
      static_cast<int>(x.size()) < mel.win_length)
    throw std::runtime_error("cocola_score: input shorter than the analysis window");
  auto hy = embed(mel_features(y, mel), ckpt.model.encoder, ckpt.config.encoder,
                  EmbedMode::eval);
  auto hx = embed(mel_features(x, mel), ckpt.model.encoder, ckpt.config.encoder,
                  EmbedMode::eval);
  return similarity(hy.data, hx.data, ckpt.model.head);
}

double cocola_score_stems(const Checkpoint& ckpt,
                          const std::vector<std::span<const double>>& y_stems,
                          const std::vector<std::span<const double>>& x_stems) {
  auto y = mix(y_stems);
  auto x = mix(x_stems);
  return cocola_score(ckpt, y, x);
}

std::vector<ScorePairSpec> read_pairs_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open pairs file: " + path.string());
  std::vector<ScorePairSpec> out;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line == "pair_id,conditioning_path,candidate_path") continue;
    }
    std::istringstream ls(line);
    ScorePairSpec spec;
    if (!std::getline(ls, spec.pair_id, ',') ||
        !std::getline(ls, spec.conditioning_path, ',') ||
        !std::getline(ls, spec.candidate_path))
      throw std::runtime_error("bad pairs row: " + line);
    out.push_back(std::move(spec));
  }
  return out;
}

namespace {

std::vector<double> load_clip(const std::filesystem::path& path, int rate) {
  WavData wav = read_wav(path);
  return resample(to_mono(wav), wav.sample_rate, rate);
}

void aggregate(const std::vector<ScoreRow>& rows, double& mean, double& median,
               std::int64_t& n_ok, std::int64_t& n_errors) {
  std::vector<double> vals;
  for (const auto& r : rows)
    if (r.ok) vals.push_back(r.ccs);
  n_ok = static_cast<std::int64_t>(vals.size());
  n_errors = static_cast<std::int64_t>(rows.size()) - n_ok;
  if (vals.empty()) {
    mean = 0.0;
    median = 0.0;
    return;
  }
  double acc = 0.0;
  for (double v : vals) acc += v;
  mean = acc / static_cast<double>(vals.size());
  median = median_of(std::move(vals));
}

}  // namespace

double median_of(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

ScoreReport score_report(const Checkpoint& ckpt,
                         const std::vector<ScorePairSpec>& pairs,
                         const ScoreReportOptions& options) {
  ScoreReport report;
  report.w_symmetric = ckpt.model.head.symmetric(1e-12);
  const int rate = ckpt.config.encoder.mel.sample_rate;

  for (const auto& spec : pairs) {
    ScoreRow row;
    row.pair_id = spec.pair_id;
    try {
      auto y = load_clip(spec.conditioning_path, rate);
      auto x = load_clip(spec.candidate_path, rate);
      row.ccs = cocola_score(ckpt, y, x);
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    report.rows.push_back(std::move(row));
  }
  aggregate(report.rows, report.mean, report.median, report.n_ok, report.n_errors);

  if (options.ground_truth_manifest && options.ground_truth_pairs > 0) {
    TrackStore store(*options.ground_truth_manifest, rate);
    SamplerConfig sampler = ckpt.config.sampler;
    sampler.batch_size = 1;
    sampler.noise_sigma = 0.0;
    Rng rng(options.seed);
    for (int i = 0; i < options.ground_truth_pairs; ++i) {
      ScoreRow row;
      char id[32];
      std::snprintf(id, sizeof(id), "gt_%04d", i);
      row.pair_id = id;
      try {
        auto batch = sample_usable_windows(store, options.ground_truth_split,
                                           sampler, rng);
        SubMixPair pair = make_submix_pair(batch[0], sampler.subset_mode, rng);
        row.ccs = cocola_score(ckpt, pair.mix_1, pair.mix_2);
      } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
      }
      report.ground_truth_rows.push_back(std::move(row));
    }
    double mean = 0.0, median = 0.0;
    std::int64_t n_ok = 0, n_err = 0;
    aggregate(report.ground_truth_rows, mean, median, n_ok, n_err);
    report.ground_truth_mean = mean;
    report.ground_truth_median = median;
  }
  return report;
}

namespace {

std::string fmt_score(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

void write_score_report_csv(const ScoreReport& report,
                            const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report: " + path.string());
  out << "pair_id,ccs\n";
  for (const auto& r : report.rows)
    out << r.pair_id << "," << (r.ok ? fmt_score(r.ccs) : "") << "\n";
  for (const auto& r : report.ground_truth_rows)
    out << r.pair_id << "," << (r.ok ? fmt_score(r.ccs) : "") << "\n";
  out << "mean," << fmt_score(report.mean) << "\n";
  out << "median," << fmt_score(report.median) << "\n";
  out << "errors," << report.n_errors << "\n";
  if (report.ground_truth_mean) {
    out << "ground_truth_mean," << fmt_score(*report.ground_truth_mean) << "\n";
    out << "ground_truth_median," << fmt_score(*report.ground_truth_median) << "\n";
  }
}

namespace {

json rows_to_json(const std::vector<ScoreRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    json jr;
    jr["pair_id"] = r.pair_id;
    if (r.ok)
      jr["ccs"] = r.ccs;
    else {
      jr["ccs"] = nullptr;
      jr["error"] = r.error;
    }
    out.push_back(std::move(jr));
  }
  return out;
}

std::vector<ScoreRow> rows_from_json(const json& j) {
  std::vector<ScoreRow> rows;
  for (const auto& jr : j) {
    ScoreRow r;
    r.pair_id = jr.at("pair_id").get<std::string>();
    if (jr.at("ccs").is_null()) {
      r.ok = false;
      r.error = jr.value("error", std::string());
    } else {
      r.ccs = jr.at("ccs").get<double>();
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace

void write_score_report_json(const ScoreReport& report,
                             const std::filesystem::path& path) {
  json j;
  j["rows"] = rows_to_json(report.rows);
  j["aggregates"] = {{"mean", report.mean},
                     {"median", report.median},
                     {"n_ok", report.n_ok},
                     {"errors", report.n_errors}};
  j["w_symmetric"] = report.w_symmetric;
  if (!report.ground_truth_rows.empty()) {
    j["ground_truth_rows"] = rows_to_json(report.ground_truth_rows);
    j["ground_truth"] = {{"mean", *report.ground_truth_mean},
                         {"median", *report.ground_truth_median}};
  }
  if (report.fad_clap) j["fad_clap"] = *report.fad_clap;
  if (report.fad_encodec) j["fad_encodec"] = *report.fad_encodec;
  if (report.fad_vggish) j["fad_vggish"] = *report.fad_vggish;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report: " + path.string());
  out << j.dump(2) << "\n";
}

ScoreReport read_score_report_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open report: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("bad report " + path.string() + ": " + e.what());
  }
  ScoreReport report;
  report.rows = rows_from_json(j.at("rows"));
  report.mean = j.at("aggregates").at("mean").get<double>();
  report.median = j.at("aggregates").at("median").get<double>();
  report.n_ok = j.at("aggregates").at("n_ok").get<std::int64_t>();
  report.n_errors = j.at("aggregates").at("errors").get<std::int64_t>();
  report.w_symmetric = j.value("w_symmetric", false);
  if (j.contains("ground_truth_rows")) {
    report.ground_truth_rows = rows_from_json(j.at("ground_truth_rows"));
    report.ground_truth_mean = j.at("ground_truth").at("mean").get<double>();
    report.ground_truth_median = j.at("ground_truth").at("median").get<double>();
  }
  if (j.contains("fad_clap")) report.fad_clap = j.at("fad_clap").get<double>();
  if (j.contains("fad_encodec")) report.fad_encodec = j.at("fad_encodec").get<double>();
  if (j.contains("fad_vggish")) report.fad_vggish = j.at("fad_vggish").get<double>();
  return report;
}

void write_accuracy_report_json(const AccuracyReport& report,
                                const std::filesystem::path& path) {
  json j;
  j["dataset"] = report.dataset;
  j["accuracy"] = report.accuracy;
  j["n_batches"] = report.n_batches;
  j["decisions"] = report.decisions;
  j["ties"] = report.ties;
  j["half_width"] = report.half_width;
  j["config"] = {{"k", report.config.k_eval},
                 {"n_batches", report.config.n_batches},
                 {"split", split_name(report.config.split)},
                 {"seed", report.config.seed}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report: " + path.string());
  out << j.dump(2) << "\n";
}

std::size_t select_loudest_candidate(
    const std::vector<std::vector<double>>& candidates) {
  if (candidates.empty())
    throw std::runtime_error("select_loudest_candidate: empty candidate list");
  const std::size_t n = candidates.front().size();
  std::size_t best = 0;
  double best_norm2 = -1.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i].size() != n)
      throw std::runtime_error("select_loudest_candidate: length mismatch");
    double norm2 = 0.0;
    for (double v : candidates[i]) norm2 += v * v;
    if (norm2 > best_norm2) {
      best_norm2 = norm2;
      best = i;
    }
  }
  return best;
}

}  // namespace cocola
