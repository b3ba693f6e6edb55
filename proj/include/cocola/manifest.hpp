#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace cocola {

enum class Split { train, validation, test };

const char* split_name(Split s);
std::optional<Split> parse_split(const std::string& s);

struct StemRef {
  std::string tag;
  std::string path;  // relative to the manifest root

  bool operator==(const StemRef&) const = default;
};

struct ManifestEntry {
  std::string track_id;
  Split split = Split::train;
  std::vector<StemRef> stems;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  int version = 1;
  int sample_rate = 0;  // nominal rate of the source files
  std::filesystem::path root;  // directory stem paths are resolved against
  std::vector<ManifestEntry> entries;

  const ManifestEntry* find(const std::string& track_id) const;
  std::filesystem::path stem_path(const StemRef& ref) const { return root / ref.path; }
};

enum class Layout { flat_stems, per_track_dirs };

struct SplitSpec {
  enum class Mode { explicit_dirs, ratio };
  Mode mode = Mode::ratio;
  // Ratio mode: fractions apportioned exactly (largest remainder) over the
  // track list ordered by a seeded hash of track_id.
  double train = 0.8, validation = 0.1, test = 0.1;
  std::uint64_t seed = 0;

  static SplitSpec ratio(double tr, double va, double te, std::uint64_t seed);
  static SplitSpec explicit_dirs();
};

struct ScanWarning {
  std::string track_id;
  std::string message;
};

struct ScanResult {
  DatasetManifest manifest;
  std::vector<ScanWarning> warnings;
};

// Enumerates stem audio under root.
//   per_track_dirs: root/<track>/<tag>.wav (or root/<split>/<track>/<tag>.wav
//                   with explicit_dirs splits)
//   flat_stems:     root/<track>__<tag>.wav
// Tracks with zero readable stems are skipped with a warning record.
ScanResult scan_dataset(const std::filesystem::path& root, Layout layout,
                        const SplitSpec& split_rule);

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

// --- Track loading ---------------------------------------------------------

struct Stem {
  std::string tag;
  std::vector<double> samples;
};

struct StemTrack {
  std::string track_id;
  int sample_rate = 0;
  std::vector<Stem> stems;
  std::size_t n_samples = 0;  // common length of all stems
};

// Decodes every stem of an entry, downmixes to mono, resamples to
// target_rate and trims all stems to the minimum common length.
StemTrack load_track(const DatasetManifest& manifest, const ManifestEntry& entry,
                     int target_rate);

// Length load_track would produce, from headers only.
std::uint64_t probe_track_length(const DatasetManifest& manifest,
                                 const ManifestEntry& entry, int target_rate);

// --- Validation ------------------------------------------------------------

enum class EntryStatus { ok, missing_file, decode_error, length_mismatch };

struct EntryReport {
  std::string track_id;
  EntryStatus status = EntryStatus::ok;
  std::string detail;  // offending file for non-ok statuses
};

struct ValidationReport {
  std::vector<EntryReport> entries;
  int ok = 0;
  int missing = 0;
  int decode_errors = 0;
  int length_mismatches = 0;
};

ValidationReport validate_manifest(const DatasetManifest& manifest);

// --- Tag vocabulary --------------------------------------------------------

// Lower-cases and collapses whitespace; applied to every tag at ingestion.
std::string normalize_tag(const std::string& tag);

class TagVocabulary {
 public:
  TagVocabulary() = default;
  explicit TagVocabulary(std::vector<std::string> tags);  // sorted + deduped

  static TagVocabulary from_manifest(const DatasetManifest& m);

  int id(const std::string& tag) const;  // throws on unknown tag
  bool contains(const std::string& tag) const;
  const std::string& tag(int id) const;
  const std::vector<std::string>& tags() const { return tags_; }
  int size() const { return static_cast<int>(tags_.size()); }

  bool operator==(const TagVocabulary& o) const { return tags_ == o.tags_; }

 private:
  std::vector<std::string> tags_;
  std::map<std::string, int> index_;
};

// --- Shared in-memory store ------------------------------------------------

// Lazy cache of decoded tracks at a fixed rate. Honors the COCOLA_CACHE
// environment variable for an on-disk decoded-audio cache.
class TrackStore {
 public:
  TrackStore(const DatasetManifest& manifest, int target_rate);

  const StemTrack& get(const std::string& track_id) const;
  std::uint64_t length_of(const std::string& track_id) const;  // header probe
  std::vector<const ManifestEntry*> eligible(Split split, std::uint64_t min_len) const;
  const DatasetManifest& manifest() const { return manifest_; }
  int rate() const { return target_rate_; }

 private:
  DatasetManifest manifest_;
  int target_rate_;
  mutable std::mutex mu_;
  mutable std::map<std::string, std::unique_ptr<StemTrack>> cache_;
  mutable std::map<std::string, std::uint64_t> lengths_;
};

}  // namespace cocola
