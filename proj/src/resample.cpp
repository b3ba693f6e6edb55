#include "cocola/resample.hpp"

#include <cmath>
#include <stdexcept>

namespace cocola {

std::vector<double> to_mono(const WavData& wav) {
  if (wav.channels <= 0) throw std::runtime_error("to_mono: no channels");
  std::size_t frames = wav.frames();
  if (wav.channels == 1) return wav.samples;
  std::vector<double> out(frames);
  const double inv = 1.0 / wav.channels;
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (int c = 0; c < wav.channels; ++c) acc += wav.samples[i * wav.channels + c];
    out[i] = acc * inv;
  }
  return out;
}

std::uint64_t resampled_length(std::uint64_t n, int src_rate, int dst_rate) {
  if (src_rate == dst_rate) return n;
  return n * static_cast<std::uint64_t>(dst_rate) / static_cast<std::uint64_t>(src_rate);
}

namespace {
constexpr int kTaps = 24;  // half-width of the sinc kernel, in source samples

double hann(double u) {  // u in [-1, 1]
  return 0.5 + 0.5 * std::cos(3.141592653589793 * u);
}
}  // namespace

std::vector<double> resample(const std::vector<double>& x, int src_rate,
                             int dst_rate) {
  if (src_rate <= 0 || dst_rate <= 0)
    throw std::runtime_error("resample: rates must be positive");
  if (src_rate == dst_rate) return x;

  const std::size_t n_out = resampled_length(x.size(), src_rate, dst_rate);
  std::vector<double> out(n_out);
  const double step = static_cast<double>(src_rate) / dst_rate;
  // Cutoff at the lower of the two Nyquist rates, slightly backed off.
  const double fc = 0.97 * std::min(1.0, 1.0 / step);

  for (std::size_t i = 0; i < n_out; ++i) {
    const double t = i * step;
    const auto k0 = static_cast<long>(std::ceil(t)) - kTaps;
    const auto k1 = static_cast<long>(std::floor(t)) + kTaps;
    double acc = 0.0, wsum = 0.0;
    for (long k = k0; k <= k1; ++k) {
      const double u = t - k;
      const double w = hann(u / kTaps) *
                       (u == 0.0 ? fc : std::sin(3.141592653589793 * fc * u) /
                                            (3.141592653589793 * u));
      wsum += w;
      if (k >= 0 && k < static_cast<long>(x.size())) acc += w * x[k];
    }
    out[i] = wsum != 0.0 ? acc / wsum : 0.0;
  }
  return out;
}

}  // namespace cocola
