#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cocola/manifest.hpp"
#include "json.hpp"

namespace cocola {

// Synthetic multi-stem dataset: every stem of a track is locked to the
// track's (key, tempo) pair, so intra-track coherence is learnable while
// cross-track pairs are incoherent unless both values collide.
struct SynthSpec {
  int n_tracks = 250;
  int stems_per_track = 4;
  double duration = 6.0;  // seconds
  int sample_rate = 16000;
  std::vector<double> key_set;    // root frequencies, Hz
  std::vector<double> tempo_set;  // BPM
  std::uint64_t seed = 0;

  static SynthSpec defaults();
  static SynthSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;
};

struct SynthTrackMeta {
  double key_hz = 0.0;
  double tempo_bpm = 0.0;
};

struct SynthResult {
  DatasetManifest manifest;
  std::filesystem::path manifest_path;
  std::map<std::string, SynthTrackMeta> meta;
  // Track pairs sharing both key and tempo; excluded from held-out
  // negative statistics.
  std::vector<std::pair<std::string, std::string>> collisions;
  double intra_coherence = 0.0;  // mean chroma-profile correlation, same track
  double inter_coherence = 0.0;  // mean over different-key track pairs
};

SynthResult generate(const SynthSpec& spec, const std::filesystem::path& out_dir);

// Sidecar with per-track key/tempo and the collision list.
void write_synth_meta(const SynthResult& result, const std::filesystem::path& path);
std::map<std::string, SynthTrackMeta> read_synth_meta(
    const std::filesystem::path& path);

// Goertzel power of x at frequency hz; used by the coherence sanity oracle.
double goertzel_power(const std::vector<double>& x, double hz, int sample_rate);

}  // namespace cocola
