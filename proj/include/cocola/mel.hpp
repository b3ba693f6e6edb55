#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace cocola {

struct MelConfig {
  int sample_rate = 16000;
  int n_fft = 1024;      // must be a power of two
  int hop = 160;         // 10 ms
  int win_length = 400;  // 25 ms
  int n_mels = 64;
  double fmin = 60.0;
  double fmax = 7800.0;
  double log_floor = 1e-6;

  void validate() const;
  bool operator==(const MelConfig&) const = default;
};

// Log-mel feature map, row-major (n_mels x n_frames).
struct FeatureMap {
  int n_mels = 0;
  int n_frames = 0;
  std::vector<double> values;

  double at(int mel, int frame) const {
    return values[static_cast<std::size_t>(mel) * n_frames + frame];
  }
};

// n_frames = 1 + floor((L - win_length) / hop); requires L >= win_length.
int mel_frame_count(std::int64_t n_samples, const MelConfig& config);

// Magnitude STFT -> slaney-style triangular mel filterbank -> log(x + floor).
FeatureMap mel_features(std::span<const double> wave, const MelConfig& config);

// Center frequencies (Hz) of the triangular filters, for tests and tooling.
std::vector<double> mel_center_frequencies(const MelConfig& config);

// Slaney mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

}  // namespace cocola
