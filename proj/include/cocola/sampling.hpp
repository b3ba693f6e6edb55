#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cocola/manifest.hpp"
#include "cocola/rng.hpp"

namespace cocola {

enum class SubsetMode { single_stem, random_submix };

struct SamplerConfig {
  std::int64_t window_samples = 80000;  // L: 5 s at 16 kHz
  double max_overlap_ratio = 0.5;       // r
  int batch_size = 32;                  // K
  SubsetMode subset_mode = SubsetMode::single_stem;
  double noise_sigma = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Window {
  std::string track_id;
  std::int64_t offset = 0;
  std::int64_t length = 0;
  std::vector<Stem> stems;  // each sliced to exactly `length` samples
};

struct SubMixPair {
  std::string track_id;
  std::int64_t offset = 0;
  std::vector<int> subset_1;
  std::vector<int> subset_2;
  std::vector<double> mix_1;
  std::vector<double> mix_2;
};

// RMS threshold below which a stem is excluded from subset selection.
inline constexpr double kSilentRms = 1e-4;

double rms(std::span<const double> x);

// Draws K windows from the split, tracks uniform with replacement.
// Same-track windows within the batch overlap by at most r*L samples;
// offsets are rejection-sampled with a cap of 100 retries per window.
std::vector<Window> sample_windows(const TrackStore& store, Split split,
                                   const SamplerConfig& config, Rng& rng);

// As sample_windows, but additionally guarantees each window has at least
// two non-silent stems, re-drawing unusable windows (bounded retries).
std::vector<Window> sample_usable_windows(const TrackStore& store, Split split,
                                          const SamplerConfig& config, Rng& rng);

// Two disjoint non-empty index sets over the window's non-silent stems.
// single_stem: two distinct singletons, uniform over ordered pairs.
// random_submix: uniform over all ordered disjoint non-empty pairs.
std::pair<std::vector<int>, std::vector<int>> select_disjoint_subsets(
    const Window& window, SubsetMode mode, Rng& rng);

// Elementwise sum of equal-length stems. No normalization, no clipping.
std::vector<double> mix(const std::vector<std::span<const double>>& stems);
std::vector<double> mix(const Window& window, const std::vector<int>& subset);

// Additive Gaussian noise with standard deviation noise_sigma.
std::vector<double> augment(std::span<const double> wave, double noise_sigma,
                            Rng& rng);

SubMixPair make_submix_pair(const Window& window, SubsetMode mode, Rng& rng);

// Length of the offset-interval intersection of two length-L windows.
std::int64_t window_overlap(std::int64_t offset_a, std::int64_t offset_b,
                            std::int64_t length);

}  // namespace cocola
