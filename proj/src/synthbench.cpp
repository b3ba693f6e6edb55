#include "cocola/synthbench.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "cocola/rng.hpp"
#include "cocola/wav.hpp"

namespace cocola {

using nlohmann::json;

namespace {
constexpr double kTau = 6.283185307179586;
}

SynthSpec SynthSpec::defaults() {
  SynthSpec s;
  // 12 whole-tone-spaced roots over two octaves, 6 tempos.
  for (int i = 0; i < 12; ++i) s.key_set.push_back(110.0 * std::pow(2.0, i / 6.0));
  s.tempo_set = {75.0, 90.0, 105.0, 120.0, 135.0, 150.0};
  return s;
}

void SynthSpec::validate() const {
  if (n_tracks < 2) throw std::runtime_error("synth: n_tracks must be >= 2");
  if (stems_per_track < 2) throw std::runtime_error("synth: stems_per_track must be >= 2");
  if (duration <= 0.0) throw std::runtime_error("synth: duration must be > 0");
  if (sample_rate <= 0) throw std::runtime_error("synth: sample_rate must be > 0");
  if (key_set.empty() || tempo_set.empty())
    throw std::runtime_error("synth: key_set and tempo_set must be non-empty");
}

SynthSpec SynthSpec::from_json(const json& j) {
  SynthSpec d = defaults();
  d.n_tracks = j.value("n_tracks", d.n_tracks);
  d.stems_per_track = j.value("stems_per_track", d.stems_per_track);
  d.duration = j.value("duration", d.duration);
  d.sample_rate = j.value("sample_rate", d.sample_rate);
  if (j.contains("key_set")) d.key_set = j.at("key_set").get<std::vector<double>>();
  if (j.contains("tempo_set")) d.tempo_set = j.at("tempo_set").get<std::vector<double>>();
  d.seed = j.value("seed", d.seed);
  return d;
}

json SynthSpec::to_json() const {
  return json{{"n_tracks", n_tracks},
              {"stems_per_track", stems_per_track},
              {"duration", duration},
              {"sample_rate", sample_rate},
              {"key_set", key_set},
              {"tempo_set", tempo_set},
              {"seed", seed}};
}

namespace {

struct VoiceParams {
  double key;
  double beat_sec;
  int sample_rate;
  std::size_t n;
};

std::vector<double> synth_arpeggio(const VoiceParams& p, double phase) {
  static const double ratios[3] = {1.0, 1.25, 1.5};  // just major triad
  std::vector<double> out(p.n);
  for (std::size_t i = 0; i < p.n; ++i) {
    const double t = static_cast<double>(i) / p.sample_rate;
    const auto beat = static_cast<std::int64_t>(t / p.beat_sec);
    const double t_rel = t - static_cast<double>(beat) * p.beat_sec;
    const double f = p.key * ratios[beat % 3];
    out[i] = 0.25 * std::exp(-t_rel / 0.25) * std::sin(kTau * f * t + phase);
  }
  return out;
}

std::vector<double> synth_drone(const VoiceParams& p, double phase) {
  std::vector<double> out(p.n);
  for (std::size_t i = 0; i < p.n; ++i) {
    const double t = static_cast<double>(i) / p.sample_rate;
    out[i] = 0.15 * std::sin(kTau * 1.5 * p.key * t + phase) +
             0.05 * std::sin(kTau * 3.0 * p.key * t + 0.5 * phase);
  }
  return out;
}

// Beat-locked noise bursts band-passed around 6x the root, so percussion
// carries both the tempo and the key color.
std::vector<double> synth_percussion(const VoiceParams& p, Rng& rng) {
  std::vector<double> noise(p.n);
  for (std::size_t i = 0; i < p.n; ++i) {
    const double t = static_cast<double>(i) / p.sample_rate;
    const auto beat = static_cast<std::int64_t>(t / p.beat_sec);
    const double t_rel = t - static_cast<double>(beat) * p.beat_sec;
    const double env = t_rel < 0.15 ? std::exp(-t_rel / 0.03) : 0.0;
    noise[i] = env * rng.normal();
  }
  // RBJ biquad bandpass at fc = 6 * key, Q = 6
  const double fc = std::min(6.0 * p.key, 0.45 * p.sample_rate);
  const double w0 = kTau * fc / p.sample_rate;
  const double q = 6.0;
  const double alpha = std::sin(w0) / (2.0 * q);
  const double a0 = 1.0 + alpha;
  const double b0 = alpha / a0, b2 = -alpha / a0;
  const double a1 = -2.0 * std::cos(w0) / a0, a2 = (1.0 - alpha) / a0;
  std::vector<double> out(p.n);
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
  for (std::size_t i = 0; i < p.n; ++i) {
    const double x0 = noise[i];
    const double y0 = b0 * x0 + b2 * x2 - a1 * y1 - a2 * y2;
    out[i] = y0;
    x2 = x1; x1 = x0;
    y2 = y1; y1 = y0;
  }
  double peak = 0.0;
  for (double v : out) peak = std::max(peak, std::abs(v));
  if (peak > 1e-9)
    for (auto& v : out) v *= 0.4 / peak;
  return out;
}

std::vector<double> synth_melody(const VoiceParams& p, double phase) {
  static const double ratios[4] = {2.0, 2.5, 3.0, 2.0};
  std::vector<double> out(p.n);
  for (std::size_t i = 0; i < p.n; ++i) {
    const double t = static_cast<double>(i) / p.sample_rate;
    const auto beat = static_cast<std::int64_t>(t / p.beat_sec);
    const double t_rel = t - static_cast<double>(beat) * p.beat_sec;
    const double f = p.key * ratios[beat % 4];
    const double attack = std::min(1.0, t_rel / 0.01);
    out[i] = 0.2 * attack * std::exp(-t_rel / 0.4) * std::sin(kTau * f * t + phase);
  }
  return out;
}

const char* kVoiceNames[4] = {"arpeggio", "drone", "percussion", "melody"};

std::vector<double> synth_voice(int voice, const VoiceParams& p, Rng& rng) {
  const double phase = rng.uniform_real(0.0, kTau);
  VoiceParams q = p;
  // Extra stems beyond the four base voices repeat an octave up.
  q.key = p.key * std::pow(2.0, voice / 4);
  switch (voice % 4) {
    case 0: return synth_arpeggio(q, phase);
    case 1: return synth_drone(q, phase);
    case 2: return synth_percussion(q, rng);
    default: return synth_melody(q, phase);
  }
}

std::string voice_name(int voice) {
  std::string name = kVoiceNames[voice % 4];
  if (voice >= 4) name += "_" + std::to_string(voice / 4);
  return name;
}

// Chroma-like key profile: harmonic energy at each candidate root.
std::vector<double> key_profile(const std::vector<double>& x, int sample_rate,
                                const std::vector<double>& roots) {
  static const double harmonics[] = {1.0, 1.25, 1.5, 2.0, 2.5, 3.0, 6.0};
  std::vector<double> profile;
  profile.reserve(roots.size());
  for (double r : roots) {
    double acc = 0.0;
    for (double h : harmonics) acc += goertzel_power(x, r * h, sample_rate);
    profile.push_back(acc);
  }
  return profile;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const auto n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) { ma += a[i]; mb += b[i]; }
  ma /= n; mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va <= 0 || vb <= 0) return 0.0;
  return cov / std::sqrt(va * vb);
}

}  // namespace

double goertzel_power(const std::vector<double>& x, double hz, int sample_rate) {
  const double w = kTau * hz / sample_rate;
  const double coeff = 2.0 * std::cos(w);
  double s0 = 0, s1 = 0, s2 = 0;
  for (double v : x) {
    s0 = v + coeff * s1 - s2;
    s2 = s1;
    s1 = s0;
  }
  return s1 * s1 + s2 * s2 - coeff * s1 * s2;
}

SynthResult generate(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir);

  SynthResult result;
  const auto n = static_cast<std::size_t>(spec.duration * spec.sample_rate);

  struct Generated {
    std::string id;
    SynthTrackMeta meta;
    std::vector<std::vector<double>> stems;
  };
  std::vector<Generated> tracks;

  for (int ti = 0; ti < spec.n_tracks; ++ti) {
    std::uint64_t track_seed = fnv1a64(&ti, sizeof(ti), 0x5eedu ^ spec.seed);
    Rng rng(track_seed);
    Generated g;
    char id[32];
    std::snprintf(id, sizeof(id), "track_%04d", ti);
    g.id = id;
    g.meta.key_hz = spec.key_set[rng.uniform_u64(spec.key_set.size())];
    g.meta.tempo_bpm = spec.tempo_set[rng.uniform_u64(spec.tempo_set.size())];

    VoiceParams p{g.meta.key_hz, 60.0 / g.meta.tempo_bpm, spec.sample_rate, n};
    auto dir = out_dir / g.id;
    std::filesystem::create_directories(dir);
    for (int v = 0; v < spec.stems_per_track; ++v) {
      auto wave = synth_voice(v, p, rng);
      write_wav_float32(dir / (voice_name(v) + ".wav"), spec.sample_rate, wave);
      g.stems.push_back(std::move(wave));
    }
    result.meta[g.id] = g.meta;
    tracks.push_back(std::move(g));
  }

  // Collisions: same key AND tempo on two different tracks.
  for (std::size_t i = 0; i < tracks.size(); ++i)
    for (std::size_t j = i + 1; j < tracks.size(); ++j)
      if (tracks[i].meta.key_hz == tracks[j].meta.key_hz &&
          tracks[i].meta.tempo_bpm == tracks[j].meta.tempo_bpm)
        result.collisions.emplace_back(tracks[i].id, tracks[j].id);

  // Sanity oracle on a slice of tracks: intra-track chroma correlation must
  // beat different-key inter-track correlation.
  const std::size_t probe = std::min<std::size_t>(8, tracks.size());
  double intra = 0.0, inter = 0.0;
  int n_intra = 0, n_inter = 0;
  std::vector<std::vector<std::vector<double>>> profiles(probe);
  for (std::size_t i = 0; i < probe; ++i)
    for (const auto& stem : tracks[i].stems)
      profiles[i].push_back(key_profile(stem, spec.sample_rate, spec.key_set));
  for (std::size_t i = 0; i < probe; ++i)
    for (std::size_t a = 0; a < profiles[i].size(); ++a)
      for (std::size_t b = a + 1; b < profiles[i].size(); ++b) {
        intra += pearson(profiles[i][a], profiles[i][b]);
        ++n_intra;
      }
  for (std::size_t i = 0; i < probe; ++i)
    for (std::size_t j = i + 1; j < probe; ++j) {
      if (tracks[i].meta.key_hz == tracks[j].meta.key_hz) continue;
      inter += pearson(profiles[i][0], profiles[j][0]);
      ++n_inter;
    }
  result.intra_coherence = n_intra > 0 ? intra / n_intra : 0.0;
  result.inter_coherence = n_inter > 0 ? inter / n_inter : 0.0;

  auto scan = scan_dataset(out_dir, Layout::per_track_dirs,
                           SplitSpec::ratio(0.8, 0.1, 0.1, spec.seed));
  if (!scan.warnings.empty())
    throw std::runtime_error("synth: generated dataset failed to scan cleanly");
  result.manifest = scan.manifest;
  result.manifest_path = out_dir / "manifest.json";
  save_manifest(result.manifest, result.manifest_path);
  write_synth_meta(result, out_dir / "synth_meta.json");
  return result;
}

void write_synth_meta(const SynthResult& result, const std::filesystem::path& path) {
  json j;
  json tracks;
  for (const auto& [id, meta] : result.meta)
    tracks[id] = {{"key_hz", meta.key_hz}, {"tempo_bpm", meta.tempo_bpm}};
  j["tracks"] = std::move(tracks);
  json collisions = json::array();
  for (const auto& [a, b] : result.collisions) collisions.push_back({a, b});
  j["collisions"] = std::move(collisions);
  j["intra_coherence"] = result.intra_coherence;
  j["inter_coherence"] = result.inter_coherence;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::map<std::string, SynthTrackMeta> read_synth_meta(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json j;
  in >> j;
  std::map<std::string, SynthTrackMeta> out;
  for (const auto& [id, jm] : j.at("tracks").items())
    out[id] = {jm.at("key_hz").get<double>(), jm.at("tempo_bpm").get<double>()};
  return out;
}

}  // namespace cocola
