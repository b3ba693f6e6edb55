#include "cocola/sampling.hpp"

#include <cmath>
#include <cstdlib>
#include <map>
#include <stdexcept>

namespace cocola {

namespace {
constexpr int kOffsetRetries = 100;
constexpr int kUsableRetries = 100;
}  // namespace

void SamplerConfig::validate() const {
  if (window_samples <= 0) throw std::runtime_error("sampler: L must be > 0");
  if (max_overlap_ratio < 0.0 || max_overlap_ratio >= 1.0)
    throw std::runtime_error("sampler: r must be in [0, 1)");
  if (batch_size < 1) throw std::runtime_error("sampler: K must be >= 1");
  if (noise_sigma < 0.0) throw std::runtime_error("sampler: noise_sigma must be >= 0");
}

double rms(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return std::sqrt(acc / static_cast<double>(x.size()));
}

std::int64_t window_overlap(std::int64_t offset_a, std::int64_t offset_b,
                            std::int64_t length) {
  return std::max<std::int64_t>(0, length - std::llabs(offset_a - offset_b));
}

namespace {

Window slice_window(const StemTrack& track, std::int64_t offset, std::int64_t length) {
  Window w;
  w.track_id = track.track_id;
  w.offset = offset;
  w.length = length;
  w.stems.reserve(track.stems.size());
  for (const auto& s : track.stems) {
    Stem cut;
    cut.tag = s.tag;
    cut.samples.assign(s.samples.begin() + offset, s.samples.begin() + offset + length);
    w.stems.push_back(std::move(cut));
  }
  return w;
}

std::vector<int> non_silent_indices(const Window& w) {
  std::vector<int> idx;
  for (std::size_t i = 0; i < w.stems.size(); ++i)
    if (rms(w.stems[i].samples) >= kSilentRms) idx.push_back(static_cast<int>(i));
  return idx;
}

}  // namespace

namespace {

// Core batch sampler. `usable` (optional) rejects a sliced window before it
// is committed; rejected draws do not reserve an offset.
std::vector<Window> sample_batch(const TrackStore& store, Split split,
                                 const SamplerConfig& config, Rng& rng,
                                 bool (*usable)(const Window&)) {
  config.validate();
  const std::int64_t L = config.window_samples;
  auto entries = store.eligible(split, static_cast<std::uint64_t>(L));
  if (entries.empty())
    throw std::runtime_error(std::string("sample_windows: no track of length >= ") +
                             std::to_string(L) + " in split " + split_name(split));

  // Minimum offset distance implied by overlap <= r*L.
  const auto min_gap = static_cast<std::int64_t>(
      std::ceil(static_cast<double>(L) * (1.0 - config.max_overlap_ratio)));

  std::vector<Window> batch;
  std::map<std::string, std::vector<std::int64_t>> placed;
  for (int k = 0; k < config.batch_size; ++k) {
    bool committed = false;
    for (int redraw = 0; redraw <= kUsableRetries && !committed; ++redraw) {
      const auto* entry = entries[rng.uniform_u64(entries.size())];
      const StemTrack& track = store.get(entry->track_id);
      const std::int64_t max_offset = static_cast<std::int64_t>(track.n_samples) - L;

      const auto& existing = placed[entry->track_id];
      std::int64_t offset = -1;
      for (int attempt = 0; attempt < kOffsetRetries; ++attempt) {
        std::int64_t candidate = rng.uniform_int(0, max_offset);
        bool ok = true;
        for (std::int64_t o : existing)
          if (std::llabs(candidate - o) < min_gap) { ok = false; break; }
        if (ok) { offset = candidate; break; }
      }
      if (offset < 0)
        throw std::runtime_error(
            "sample_windows: cannot satisfy overlap constraint on track " +
            entry->track_id + " after " + std::to_string(kOffsetRetries) +
            " attempts");

      Window w = slice_window(track, offset, L);
      if (usable && !usable(w)) continue;
      placed[entry->track_id].push_back(offset);
      batch.push_back(std::move(w));
      committed = true;
    }
    if (!committed)
      throw std::runtime_error(
          "sample_windows: cannot find a usable window after " +
          std::to_string(kUsableRetries) + " redraws");
  }
  return batch;
}

bool has_two_nonsilent(const Window& w) {
  return w.stems.size() >= 2 && non_silent_indices(w).size() >= 2;
}

}  // namespace

std::vector<Window> sample_windows(const TrackStore& store, Split split,
                                   const SamplerConfig& config, Rng& rng) {
  return sample_batch(store, split, config, rng, nullptr);
}

std::vector<Window> sample_usable_windows(const TrackStore& store, Split split,
                                          const SamplerConfig& config, Rng& rng) {
  return sample_batch(store, split, config, rng, has_two_nonsilent);
}

std::pair<std::vector<int>, std::vector<int>> select_disjoint_subsets(
    const Window& window, SubsetMode mode, Rng& rng) {
  if (window.stems.size() < 2)
    throw std::runtime_error("select_disjoint_subsets: window has fewer than 2 stems");
  auto usable = non_silent_indices(window);
  if (usable.size() < 2)
    throw std::runtime_error(
        "select_disjoint_subsets: fewer than 2 non-silent stems in window of track " +
        window.track_id);

  const auto n = usable.size();
  if (mode == SubsetMode::single_stem) {
    auto i = rng.uniform_u64(n);
    auto j = rng.uniform_u64(n - 1);
    if (j >= i) ++j;
    return {{usable[i]}, {usable[j]}};
  }

  // random_submix: assign each stem to {neither, set1, set2}; rejection keeps
  // the draw uniform over all ordered disjoint non-empty pairs.
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<int> s1, s2;
    for (auto idx : usable) {
      switch (rng.uniform_u64(3)) {
        case 1: s1.push_back(idx); break;
        case 2: s2.push_back(idx); break;
        default: break;
      }
    }
    if (!s1.empty() && !s2.empty()) return {s1, s2};
  }
  throw std::runtime_error("select_disjoint_subsets: rejection sampling failed");
}

std::vector<double> mix(const std::vector<std::span<const double>>& stems) {
  if (stems.empty()) return {};
  const std::size_t n = stems.front().size();
  for (const auto& s : stems)
    if (s.size() != n) throw std::runtime_error("mix: stem length mismatch");
  std::vector<double> out(n, 0.0);
  for (const auto& s : stems)
    for (std::size_t i = 0; i < n; ++i) out[i] += s[i];
  return out;
}

std::vector<double> mix(const Window& window, const std::vector<int>& subset) {
  std::vector<std::span<const double>> parts;
  parts.reserve(subset.size());
  for (int idx : subset) {
    if (idx < 0 || idx >= static_cast<int>(window.stems.size()))
      throw std::runtime_error("mix: stem index out of range");
    parts.emplace_back(window.stems[static_cast<std::size_t>(idx)].samples);
  }
  if (parts.empty()) return std::vector<double>(static_cast<std::size_t>(window.length), 0.0);
  return mix(parts);
}

std::vector<double> augment(std::span<const double> wave, double noise_sigma,
                            Rng& rng) {
  if (noise_sigma < 0.0) throw std::runtime_error("augment: noise_sigma must be >= 0");
  std::vector<double> out(wave.begin(), wave.end());
  if (noise_sigma == 0.0) return out;
  for (auto& v : out) v += rng.normal(0.0, noise_sigma);
  return out;
}

SubMixPair make_submix_pair(const Window& window, SubsetMode mode, Rng& rng) {
  auto [s1, s2] = select_disjoint_subsets(window, mode, rng);
  SubMixPair pair;
  pair.track_id = window.track_id;
  pair.offset = window.offset;
  pair.subset_1 = s1;
  pair.subset_2 = s2;
  pair.mix_1 = mix(window, s1);
  pair.mix_2 = mix(window, s2);
  return pair;
}

}  // namespace cocola
