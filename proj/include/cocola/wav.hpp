#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace cocola {

struct WavData {
  int sample_rate = 0;
  int channels = 0;
  std::vector<double> samples;  // interleaved, in [-1, 1] for integer PCM

  std::size_t frames() const {
    return channels > 0 ? samples.size() / channels : 0;
  }
};

// Reads a RIFF/WAVE file. Supports PCM 16/24-bit and IEEE float32,
// including the WAVE_FORMAT_EXTENSIBLE wrapping of those. Throws
// std::runtime_error naming the file on any decode problem.
WavData read_wav(const std::filesystem::path& path);

// Header-only probe: sample rate and frame count without decoding samples.
struct WavInfo {
  int sample_rate = 0;
  int channels = 0;
  std::uint64_t frames = 0;
};
WavInfo probe_wav(const std::filesystem::path& path);

// Writers used by the synthetic generator and tests.
void write_wav_float32(const std::filesystem::path& path, int sample_rate,
                       const std::vector<double>& mono);
void write_wav_pcm16(const std::filesystem::path& path, int sample_rate,
                     int channels, const std::vector<double>& interleaved);
void write_wav_pcm24(const std::filesystem::path& path, int sample_rate,
                     int channels, const std::vector<double>& interleaved);

}  // namespace cocola
