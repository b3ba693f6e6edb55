#pragma once

#include <vector>

#include "cocola/wav.hpp"

namespace cocola {

// Channel-mean downmix of interleaved audio.
std::vector<double> to_mono(const WavData& wav);

// Windowed-sinc sample-rate conversion. Returns the input unchanged when
// src_rate == dst_rate. Output length is floor(n * dst / src).
std::vector<double> resample(const std::vector<double>& x, int src_rate,
                             int dst_rate);

// Length the resampler will produce, without doing the work.
std::uint64_t resampled_length(std::uint64_t n, int src_rate, int dst_rate);

}  // namespace cocola
