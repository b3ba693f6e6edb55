#include "cocola/mel.hpp"

#include <cmath>
#include <complex>
#include <stdexcept>

namespace cocola {

namespace {

constexpr double kPi = 3.14159265358979323846;

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Iterative radix-2 FFT, in place.
void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        auto u = a[i + k];
        auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

// Triangular filterbank on the slaney mel scale with area normalization,
// (n_mels x (n_fft/2 + 1)), row-major.
std::vector<double> build_filterbank(const MelConfig& c) {
  const int bins = c.n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(c.fmin);
  const double mel_hi = hz_to_mel(c.fmax);
  std::vector<double> edges(static_cast<std::size_t>(c.n_mels) + 2);
  for (int i = 0; i < c.n_mels + 2; ++i)
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (c.n_mels + 1));

  std::vector<double> fb(static_cast<std::size_t>(c.n_mels) * bins, 0.0);
  const double bin_hz = static_cast<double>(c.sample_rate) / c.n_fft;
  for (int m = 0; m < c.n_mels; ++m) {
    const double f_lo = edges[m], f_c = edges[m + 1], f_hi = edges[m + 2];
    const double norm = 2.0 / (f_hi - f_lo);
    for (int b = 0; b < bins; ++b) {
      const double f = b * bin_hz;
      double w = 0.0;
      if (f > f_lo && f < f_hi)
        w = f <= f_c ? (f - f_lo) / (f_c - f_lo) : (f_hi - f) / (f_hi - f_c);
      fb[static_cast<std::size_t>(m) * bins + b] = w * norm;
    }
  }
  return fb;
}

}  // namespace

double hz_to_mel(double hz) {
  constexpr double f_sp = 200.0 / 3.0;
  constexpr double min_log_hz = 1000.0;
  const double min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  if (hz < min_log_hz) return hz / f_sp;
  return min_log_mel + std::log(hz / min_log_hz) / logstep;
}

double mel_to_hz(double mel) {
  constexpr double f_sp = 200.0 / 3.0;
  constexpr double min_log_hz = 1000.0;
  const double min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  if (mel < min_log_mel) return mel * f_sp;
  return min_log_hz * std::exp(logstep * (mel - min_log_mel));
}

void MelConfig::validate() const {
  if (sample_rate <= 0) throw std::runtime_error("mel: sample_rate must be > 0");
  if (!is_pow2(n_fft)) throw std::runtime_error("mel: n_fft must be a power of two");
  if (!(hop <= win_length && win_length <= n_fft))
    throw std::runtime_error("mel: need hop <= win_length <= n_fft");
  if (hop <= 0) throw std::runtime_error("mel: hop must be > 0");
  if (!(0.0 <= fmin && fmin < fmax && fmax <= sample_rate / 2.0))
    throw std::runtime_error("mel: need 0 <= fmin < fmax <= sample_rate/2");
  if (n_mels < 1) throw std::runtime_error("mel: n_mels must be >= 1");
  if (log_floor <= 0.0) throw std::runtime_error("mel: log_floor must be > 0");
}

int mel_frame_count(std::int64_t n_samples, const MelConfig& config) {
  if (n_samples < config.win_length)
    throw std::runtime_error("mel: input shorter than win_length");
  return 1 + static_cast<int>((n_samples - config.win_length) / config.hop);
}

std::vector<double> mel_center_frequencies(const MelConfig& config) {
  const double mel_lo = hz_to_mel(config.fmin);
  const double mel_hi = hz_to_mel(config.fmax);
  std::vector<double> centers(static_cast<std::size_t>(config.n_mels));
  for (int m = 0; m < config.n_mels; ++m)
    centers[m] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) / (config.n_mels + 1));
  return centers;
}

FeatureMap mel_features(std::span<const double> wave, const MelConfig& config) {
  config.validate();
  const int n_frames = mel_frame_count(static_cast<std::int64_t>(wave.size()), config);
  const int bins = config.n_fft / 2 + 1;

  // Periodic Hann analysis window.
  std::vector<double> window(static_cast<std::size_t>(config.win_length));
  for (int i = 0; i < config.win_length; ++i)
    window[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / config.win_length);

  const auto fb = build_filterbank(config);

  FeatureMap out;
  out.n_mels = config.n_mels;
  out.n_frames = n_frames;
  out.values.assign(static_cast<std::size_t>(config.n_mels) * n_frames, 0.0);

  std::vector<std::complex<double>> buf(static_cast<std::size_t>(config.n_fft));
  std::vector<double> mag(static_cast<std::size_t>(bins));
  for (int t = 0; t < n_frames; ++t) {
    const std::int64_t start = static_cast<std::int64_t>(t) * config.hop;
    for (int i = 0; i < config.n_fft; ++i)
      buf[i] = i < config.win_length
                   ? std::complex<double>(wave[start + i] * window[i], 0.0)
                   : std::complex<double>(0.0, 0.0);
    fft(buf);
    for (int b = 0; b < bins; ++b) mag[b] = std::abs(buf[b]);

    for (int m = 0; m < config.n_mels; ++m) {
      const double* w = &fb[static_cast<std::size_t>(m) * bins];
      double acc = 0.0;
      for (int b = 0; b < bins; ++b) acc += w[b] * mag[b];
      out.values[static_cast<std::size_t>(m) * n_frames + t] =
          std::log(acc + config.log_floor);
    }
  }
  return out;
}

}  // namespace cocola
