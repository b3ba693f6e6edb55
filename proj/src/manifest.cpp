#include "cocola/manifest.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "cocola/resample.hpp"
#include "cocola/rng.hpp"
#include "json.hpp"

namespace cocola {

using nlohmann::json;

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "train";
}

std::optional<Split> parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  return std::nullopt;
}

const ManifestEntry* DatasetManifest::find(const std::string& track_id) const {
  for (const auto& e : entries)
    if (e.track_id == track_id) return &e;
  return nullptr;
}

SplitSpec SplitSpec::ratio(double tr, double va, double te, std::uint64_t seed) {
  SplitSpec s;
  s.mode = Mode::ratio;
  s.train = tr;
  s.validation = va;
  s.test = te;
  s.seed = seed;
  return s;
}

SplitSpec SplitSpec::explicit_dirs() {
  SplitSpec s;
  s.mode = Mode::explicit_dirs;
  return s;
}

std::string normalize_tag(const std::string& tag) {
  std::string out;
  bool pending_space = false;
  for (char c : tag) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!out.empty()) pending_space = true;
    } else {
      if (pending_space) out.push_back(' ');
      pending_space = false;
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  return out;
}

namespace {

bool is_wav(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return ext == ".wav";
}

struct RawTrack {
  std::string track_id;
  std::optional<Split> split;  // set when found under an explicit split dir
  std::vector<std::filesystem::path> files;  // absolute
};

std::vector<RawTrack> collect_per_track(const std::filesystem::path& dir,
                                        std::optional<Split> split) {
  std::vector<RawTrack> out;
  std::vector<std::filesystem::path> subdirs;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_directory()) subdirs.push_back(e.path());
  std::sort(subdirs.begin(), subdirs.end());
  for (const auto& d : subdirs) {
    RawTrack t;
    t.track_id = d.filename().string();
    t.split = split;
    for (const auto& f : std::filesystem::directory_iterator(d))
      if (f.is_regular_file() && is_wav(f.path())) t.files.push_back(f.path());
    std::sort(t.files.begin(), t.files.end());
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<RawTrack> collect_flat(const std::filesystem::path& dir,
                                   std::optional<Split> split) {
  // Files are named <track>__<tag>.wav; group by the part before "__".
  std::map<std::string, RawTrack> groups;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && is_wav(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::string base = f.stem().string();
    auto pos = base.rfind("__");
    std::string id = pos == std::string::npos ? base : base.substr(0, pos);
    auto& t = groups[id];
    t.track_id = id;
    t.split = split;
    t.files.push_back(f);
  }
  std::vector<RawTrack> out;
  out.reserve(groups.size());
  for (auto& [id, t] : groups) out.push_back(std::move(t));
  return out;
}

std::string tag_of(const std::filesystem::path& file, Layout layout) {
  std::string base = file.stem().string();
  if (layout == Layout::flat_stems) {
    auto pos = base.rfind("__");
    if (pos != std::string::npos) base = base.substr(pos + 2);
  }
  return normalize_tag(base);
}

// Largest-remainder apportionment of n tracks over the three fractions.
std::array<std::size_t, 3> apportion(std::size_t n, double tr, double va, double te) {
  double fr[3] = {tr, va, te};
  std::array<std::size_t, 3> counts{};
  double rem[3];
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    double exact = fr[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(exact);
    rem[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  while (assigned < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (rem[i] > rem[best]) best = i;
    counts[best]++;
    rem[best] = -1.0;
    ++assigned;
  }
  return counts;
}

}  // namespace

ScanResult scan_dataset(const std::filesystem::path& root, Layout layout,
                        const SplitSpec& split_rule) {
  if (!std::filesystem::exists(root) || !std::filesystem::is_directory(root))
    throw std::runtime_error("scan_dataset: root does not exist: " + root.string());

  std::vector<RawTrack> raw;
  if (split_rule.mode == SplitSpec::Mode::explicit_dirs) {
    for (Split s : {Split::train, Split::validation, Split::test}) {
      auto dir = root / split_name(s);
      if (!std::filesystem::is_directory(dir)) continue;
      auto part = layout == Layout::per_track_dirs ? collect_per_track(dir, s)
                                                   : collect_flat(dir, s);
      raw.insert(raw.end(), part.begin(), part.end());
    }
  } else {
    raw = layout == Layout::per_track_dirs ? collect_per_track(root, std::nullopt)
                                           : collect_flat(root, std::nullopt);
  }

  ScanResult result;
  result.manifest.root = root;
  std::map<int, int> rate_votes;

  for (auto& t : raw) {
    ManifestEntry entry;
    entry.track_id = t.track_id;
    for (const auto& f : t.files) {
      try {
        WavInfo info = probe_wav(f);
        rate_votes[info.sample_rate]++;
        StemRef ref;
        ref.tag = tag_of(f, layout);
        ref.path = std::filesystem::relative(f, root).generic_string();
        entry.stems.push_back(std::move(ref));
      } catch (const std::exception& e) {
        result.warnings.push_back({t.track_id, e.what()});
      }
    }
    if (entry.stems.empty()) {
      result.warnings.push_back({t.track_id, "track has zero readable stems; skipped"});
      continue;
    }
    if (t.split) entry.split = *t.split;
    result.manifest.entries.push_back(std::move(entry));
  }

  if (split_rule.mode == SplitSpec::Mode::ratio) {
    // Order tracks by seeded hash, then carve exact quota counts.
    auto& entries = result.manifest.entries;
    std::vector<std::size_t> order(entries.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      auto ha = fnv1a64(entries[a].track_id, 0xcbf29ce484222325ull ^ split_rule.seed);
      auto hb = fnv1a64(entries[b].track_id, 0xcbf29ce484222325ull ^ split_rule.seed);
      if (ha != hb) return ha < hb;
      return entries[a].track_id < entries[b].track_id;
    });
    auto counts = apportion(entries.size(), split_rule.train, split_rule.validation,
                            split_rule.test);
    std::size_t k = 0;
    for (std::size_t i = 0; i < order.size(); ++i, ++k) {
      Split s = k < counts[0]                ? Split::train
                : k < counts[0] + counts[1]  ? Split::validation
                                             : Split::test;
      entries[order[i]].split = s;
    }
  }

  if (!rate_votes.empty()) {
    auto best = std::max_element(rate_votes.begin(), rate_votes.end(),
                                 [](auto& a, auto& b) { return a.second < b.second; });
    result.manifest.sample_rate = best->first;
  }
  return result;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  json j;
  j["version"] = m.version;
  j["sample_rate"] = m.sample_rate;
  json entries = json::array();
  for (const auto& e : m.entries) {
    json je;
    je["track_id"] = e.track_id;
    je["split"] = split_name(e.split);
    json stems = json::array();
    for (const auto& s : e.stems) stems.push_back({{"tag", s.tag}, {"path", s.path}});
    je["stems"] = std::move(stems);
    entries.push_back(std::move(je));
  }
  j["entries"] = std::move(entries);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_manifest: cannot write " + path.string());
  out << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_manifest: cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("load_manifest: " + path.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.version = j.at("version").get<int>();
  if (m.version != 1)
    throw std::runtime_error("load_manifest: unsupported manifest version " +
                             std::to_string(m.version));
  m.sample_rate = j.at("sample_rate").get<int>();
  m.root = std::filesystem::absolute(path).parent_path();
  for (const auto& je : j.at("entries")) {
    ManifestEntry e;
    e.track_id = je.at("track_id").get<std::string>();
    auto split = parse_split(je.at("split").get<std::string>());
    if (!split)
      throw std::runtime_error("load_manifest: bad split for track " + e.track_id);
    e.split = *split;
    for (const auto& js : je.at("stems"))
      e.stems.push_back({js.at("tag").get<std::string>(), js.at("path").get<std::string>()});
    m.entries.push_back(std::move(e));
  }
  // track_ids must be unique
  std::vector<std::string> ids;
  for (const auto& e : m.entries) ids.push_back(e.track_id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw std::runtime_error("load_manifest: duplicate track_id in " + path.string());
  return m;
}

namespace {

std::optional<std::filesystem::path> cache_dir() {
  const char* env = std::getenv("COCOLA_CACHE");
  if (!env || !*env) return std::nullopt;
  return std::filesystem::path(env);
}

std::filesystem::path cache_key_path(const std::filesystem::path& dir,
                                     const std::filesystem::path& file,
                                     int target_rate) {
  std::error_code ec;
  auto size = std::filesystem::file_size(file, ec);
  auto mtime = std::filesystem::last_write_time(file, ec).time_since_epoch().count();
  std::uint64_t h = fnv1a64(file.string());
  h = fnv1a64(&size, sizeof(size), h);
  h = fnv1a64(&mtime, sizeof(mtime), h);
  h = fnv1a64(&target_rate, sizeof(target_rate), h);
  char name[32];
  std::snprintf(name, sizeof(name), "%016llx.f64",
                static_cast<unsigned long long>(h));
  return dir / name;
}

bool read_cached(const std::filesystem::path& p, std::vector<double>& out) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return false;
  std::uint64_t n = 0;
  if (!in.read(reinterpret_cast<char*>(&n), sizeof(n))) return false;
  out.resize(n);
  return static_cast<bool>(
      in.read(reinterpret_cast<char*>(out.data()),
              static_cast<std::streamsize>(n * sizeof(double))));
}

void write_cached(const std::filesystem::path& p, const std::vector<double>& v) {
  std::error_code ec;
  std::filesystem::create_directories(p.parent_path(), ec);
  std::ofstream out(p, std::ios::binary);
  if (!out) return;  // cache is best-effort
  std::uint64_t n = v.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
}

std::vector<double> decode_stem(const std::filesystem::path& file, int target_rate) {
  if (auto dir = cache_dir()) {
    auto key = cache_key_path(*dir, file, target_rate);
    std::vector<double> cached;
    if (read_cached(key, cached)) return cached;
    WavData wav = read_wav(file);
    auto mono = resample(to_mono(wav), wav.sample_rate, target_rate);
    write_cached(key, mono);
    return mono;
  }
  WavData wav = read_wav(file);
  return resample(to_mono(wav), wav.sample_rate, target_rate);
}

}  // namespace

StemTrack load_track(const DatasetManifest& manifest, const ManifestEntry& entry,
                     int target_rate) {
  if (entry.stems.empty())
    throw std::runtime_error("load_track: entry " + entry.track_id + " has no stems");
  StemTrack track;
  track.track_id = entry.track_id;
  track.sample_rate = target_rate;
  std::size_t min_len = std::numeric_limits<std::size_t>::max();
  for (const auto& ref : entry.stems) {
    auto file = manifest.stem_path(ref);
    Stem stem;
    stem.tag = ref.tag;
    stem.samples = decode_stem(file, target_rate);
    if (stem.samples.empty())
      throw std::runtime_error("load_track: zero-length stem " + file.string());
    min_len = std::min(min_len, stem.samples.size());
    track.stems.push_back(std::move(stem));
  }
  for (auto& s : track.stems) s.samples.resize(min_len);
  track.n_samples = min_len;
  return track;
}

std::uint64_t probe_track_length(const DatasetManifest& manifest,
                                 const ManifestEntry& entry, int target_rate) {
  std::uint64_t min_len = std::numeric_limits<std::uint64_t>::max();
  for (const auto& ref : entry.stems) {
    WavInfo info = probe_wav(manifest.stem_path(ref));
    min_len = std::min(min_len, resampled_length(info.frames, info.sample_rate,
                                                 target_rate));
  }
  return entry.stems.empty() ? 0 : min_len;
}

ValidationReport validate_manifest(const DatasetManifest& manifest) {
  ValidationReport report;
  for (const auto& e : manifest.entries) {
    EntryReport er;
    er.track_id = e.track_id;
    std::optional<std::uint64_t> common_frames;
    for (const auto& ref : e.stems) {
      auto file = manifest.stem_path(ref);
      if (!std::filesystem::exists(file)) {
        er.status = EntryStatus::missing_file;
        er.detail = file.string();
        break;
      }
      WavInfo info;
      try {
        info = probe_wav(file);
      } catch (const std::exception& ex) {
        er.status = EntryStatus::decode_error;
        er.detail = ex.what();
        break;
      }
      if (common_frames && *common_frames != info.frames) {
        er.status = EntryStatus::length_mismatch;
        er.detail = file.string();
        break;
      }
      common_frames = info.frames;
    }
    switch (er.status) {
      case EntryStatus::ok: report.ok++; break;
      case EntryStatus::missing_file: report.missing++; break;
      case EntryStatus::decode_error: report.decode_errors++; break;
      case EntryStatus::length_mismatch: report.length_mismatches++; break;
    }
    report.entries.push_back(std::move(er));
  }
  return report;
}

TagVocabulary::TagVocabulary(std::vector<std::string> tags) : tags_(std::move(tags)) {
  std::sort(tags_.begin(), tags_.end());
  tags_.erase(std::unique(tags_.begin(), tags_.end()), tags_.end());
  for (std::size_t i = 0; i < tags_.size(); ++i)
    index_[tags_[i]] = static_cast<int>(i);
}

TagVocabulary TagVocabulary::from_manifest(const DatasetManifest& m) {
  std::vector<std::string> tags;
  for (const auto& e : m.entries)
    for (const auto& s : e.stems) tags.push_back(normalize_tag(s.tag));
  return TagVocabulary(std::move(tags));
}

int TagVocabulary::id(const std::string& tag) const {
  auto it = index_.find(tag);
  if (it == index_.end())
    throw std::runtime_error("unknown tag: " + tag);
  return it->second;
}

bool TagVocabulary::contains(const std::string& tag) const {
  return index_.count(tag) > 0;
}

const std::string& TagVocabulary::tag(int id) const {
  if (id < 0 || id >= size()) throw std::runtime_error("tag id out of range");
  return tags_[static_cast<std::size_t>(id)];
}

TrackStore::TrackStore(const DatasetManifest& manifest, int target_rate)
    : manifest_(manifest), target_rate_(target_rate) {}

const StemTrack& TrackStore::get(const std::string& track_id) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = cache_.find(track_id);
  if (it != cache_.end()) return *it->second;
  const ManifestEntry* entry = manifest_.find(track_id);
  if (!entry) throw std::runtime_error("TrackStore: unknown track " + track_id);
  auto track = std::make_unique<StemTrack>(load_track(manifest_, *entry, target_rate_));
  auto [pos, _] = cache_.emplace(track_id, std::move(track));
  return *pos->second;
}

std::uint64_t TrackStore::length_of(const std::string& track_id) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = lengths_.find(track_id);
  if (it != lengths_.end()) return it->second;
  const ManifestEntry* entry = manifest_.find(track_id);
  if (!entry) throw std::runtime_error("TrackStore: unknown track " + track_id);
  auto len = probe_track_length(manifest_, *entry, target_rate_);
  lengths_[track_id] = len;
  return len;
}

std::vector<const ManifestEntry*> TrackStore::eligible(Split split,
                                                       std::uint64_t min_len) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : manifest_.entries) {
    if (e.split != split) continue;
    if (length_of(e.track_id) >= min_len) out.push_back(&e);
  }
  return out;
}

}  // namespace cocola
