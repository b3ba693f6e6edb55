#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cocola/training.hpp"

namespace cocola {

struct BatchAccuracy {
  double accuracy = 0.0;
  int ties = 0;  // argmax ties, broken toward the lowest index
};

// Eq-6 accuracy: fraction of rows whose argmax lies on the diagonal.
BatchAccuracy batch_accuracy(const nn::Tensor& s);

struct EvalConfig {
  int k_eval = 2;
  std::int64_t n_batches = 0;  // 0 = full epoch (eligible tracks / K)
  Split split = Split::test;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AccuracyReport {
  std::string dataset;
  double accuracy = 0.0;
  std::int64_t n_batches = 0;
  std::int64_t decisions = 0;
  std::int64_t ties = 0;
  double half_width = 0.0;  // normal-approximation 95% half width
  EvalConfig config;
};

// Classification protocol: batches built with the training sampling rules
// (overlap constraint, disjoint subsets) but sigma = 0 and dropout off.
AccuracyReport evaluate_classification(const Checkpoint& ckpt,
                                       const DatasetManifest& manifest,
                                       const EvalConfig& config);

// CCS between two clips already at the model sample rate.
double cocola_score(const Checkpoint& ckpt, std::span<const double> y,
                    std::span<const double> x);

// Stem-set variant: stems are summed before embedding.
double cocola_score_stems(const Checkpoint& ckpt,
                          const std::vector<std::span<const double>>& y_stems,
                          const std::vector<std::span<const double>>& x_stems);

struct ScorePairSpec {
  std::string pair_id;
  std::string conditioning_path;
  std::string candidate_path;
};

struct ScoreRow {
  std::string pair_id;
  double ccs = 0.0;
  bool ok = true;
  std::string error;
};

struct ScoreReportOptions {
  // When set, adds ground-truth bound rows: real positive pairs drawn from
  // this manifest's split with the training subset sampler.
  const DatasetManifest* ground_truth_manifest = nullptr;
  Split ground_truth_split = Split::test;
  int ground_truth_pairs = 0;
  std::uint64_t seed = 0;
};

struct ScoreReport {
  std::vector<ScoreRow> rows;
  double mean = 0.0;
  double median = 0.0;
  std::int64_t n_ok = 0;
  std::int64_t n_errors = 0;
  bool w_symmetric = false;
  std::vector<ScoreRow> ground_truth_rows;
  std::optional<double> ground_truth_mean;
  std::optional<double> ground_truth_median;
  // Pass-through slots for externally computed FAD values.
  std::optional<double> fad_clap;
  std::optional<double> fad_encodec;
  std::optional<double> fad_vggish;
};

ScoreReport score_report(const Checkpoint& ckpt,
                         const std::vector<ScorePairSpec>& pairs,
                         const ScoreReportOptions& options);

std::vector<ScorePairSpec> read_pairs_csv(const std::filesystem::path& path);
void write_score_report_csv(const ScoreReport& report,
                            const std::filesystem::path& path);
void write_score_report_json(const ScoreReport& report,
                             const std::filesystem::path& path);
ScoreReport read_score_report_json(const std::filesystem::path& path);
void write_accuracy_report_json(const AccuracyReport& report,
                                const std::filesystem::path& path);

// Index of the candidate with the largest Euclidean norm; ties -> lowest.
std::size_t select_loudest_candidate(
    const std::vector<std::vector<double>>& candidates);

double median_of(std::vector<double> values);

}  // namespace cocola
