#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace cacao {

// Stage-1 taxonomy, in class-index order.
const std::vector<std::string>& disease_labels();
// Default stage-2 taxonomy for black pod rot severity.
const std::vector<std::string>& default_level_labels();

inline constexpr const char* kUnlabeled = "unlabeled";
inline constexpr const char* kRejectedPrefix = "rejected:";

enum class Split { None, Train, Test };

const char* to_string(Split split) noexcept;
Split parse_split(const std::string& text);

struct ImageRecord {
    std::string path;
    std::string label;  // a class label, "unlabeled", or "rejected:<reason>"
    std::string source;
    std::string date;
    std::size_t width = 0;
    std::size_t height = 0;
    double blur_score = 0.0;
    Split split = Split::None;
    // Non-zero marks an oversampled duplicate; the value seeds its augmentation.
    std::uint64_t augment = 0;

    bool rejected() const { return label.starts_with(kRejectedPrefix); }
    bool accepted() const { return !rejected() && label != kUnlabeled; }
    std::string rejection_reason() const { return rejected() ? label.substr(9) : std::string(); }

    bool operator==(const ImageRecord&) const = default;
};

struct SourceInfo {
    std::string id;     // directory name under the ingest root
    std::string place;  // collection site
    std::string date;   // capture date, free-form (ISO recommended)
    std::size_t raw_count = 0;

    bool operator==(const SourceInfo&) const = default;
};

struct DatasetManifest {
    std::vector<SourceInfo> sources;
    std::vector<ImageRecord> entries;  // sorted by path

    bool operator==(const DatasetManifest&) const = default;
};

// Reads `<sources.json>`: [{"id", "place", "date"}, ...].
std::vector<SourceInfo> read_sources(const std::filesystem::path& path);

// Walks root/<source>/[<label>/]<image>. Every .png/.jpg/.jpeg file becomes
// one record; the label comes from the directory under the source when it is
// in `label_set` (any name if the set is empty), otherwise "unlabeled".
// Undecodable files are kept as rejected:undecodable.
DatasetManifest ingest(const std::filesystem::path& root, const std::vector<SourceInfo>& sources,
                       const std::vector<std::string>& label_set = {});

struct CleanOptions {
    double blur_threshold = 100.0;
    std::size_t min_resolution = 0;  // shorter side, pixels
    // Paths (or path suffixes) removed by hand as foreign objects.
    std::set<std::string> exclusions;
};

std::set<std::string> read_exclusion_list(const std::filesystem::path& path);

// Scores blur and applies the rejection rules in order: foreign, unlabeled,
// low-res, blurred. Already rejected records are left as they are.
DatasetManifest clean(const DatasetManifest& manifest, const CleanOptions& options);

// Resizes every accepted image to side x side and writes
// out/<label>/<label>_<seq:05>.png (seq from 1, path order per label).
DatasetManifest normalize(const DatasetManifest& manifest, const std::filesystem::path& out_dir, std::size_t side);

// Stratified: each label sends ceil(fraction * n) of its accepted records to
// test. Throws Stratification for a label with fewer than 2 records.
DatasetManifest split(const DatasetManifest& manifest, double test_fraction, std::uint64_t seed);

struct SourceRow {
    std::string id, place, date;
    std::size_t raw = 0;       // records ingested from the source
    std::size_t accepted = 0;  // still accepted
};

struct DatasetStats {
    std::vector<SourceRow> sources;
    std::map<std::string, std::size_t> labels;      // accepted records per label
    std::map<std::string, std::size_t> splits;      // accepted records per split
    std::map<std::string, std::size_t> rejections;  // per reason
    std::size_t total = 0;
    std::size_t accepted = 0;
    std::size_t rejected = 0;
    std::size_t unlabeled = 0;
};

DatasetStats stats(const DatasetManifest& manifest);
std::string render_stats(const DatasetStats& s);
std::string stats_to_json(const DatasetStats& s);

// JSON-lines records at `path` plus the sources header at `<path>.sources.json`.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);
std::filesystem::path sources_path_for(const std::filesystem::path& manifest_path);

// Deterministic Fisher-Yates independent of the standard library's
// distribution implementations.
void shuffle_indices(std::vector<std::size_t>& idx, std::uint64_t seed);
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);
std::uint64_t hash_string(const std::string& s);

}  // namespace cacao
