#include "cacao/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include <json.hpp>

#include "cacao/error.hpp"
#include "cacao/image.hpp"
#include "cacao/io.hpp"
#include "parallel.hpp"

namespace cacao {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& disease_labels() {
    static const std::vector<std::string> labels{"black-pod-rot", "healthy", "pod-borer"};
    return labels;
}

const std::vector<std::string>& default_level_labels() {
    static const std::vector<std::string> labels{"level-1", "level-2", "level-3"};
    return labels;
}

const char* to_string(Split split) noexcept {
    switch (split) {
        case Split::Train: return "train";
        case Split::Test: return "test";
        case Split::None: return "none";
    }
    return "none";
}

Split parse_split(const std::string& text) {
    if (text == "train") return Split::Train;
    if (text == "test") return Split::Test;
    if (text == "none" || text.empty()) return Split::None;
    throw Error(ErrorCode::Input, "unknown split '" + text + "'");
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    // splitmix64 finalizer
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::uint64_t hash_string(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

void shuffle_indices(std::vector<std::size_t>& idx, std::uint64_t seed) {
    std::mt19937_64 eng(seed);
    for (std::size_t i = idx.size(); i > 1; --i) {
        // Unbiased draw in [0, i) by rejection.
        const std::uint64_t bound = i;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t r;
        do {
            r = eng();
        } while (r >= limit);
        std::swap(idx[i - 1], idx[r % bound]);
    }
}

// ---------------------------------------------------------------------------

std::vector<SourceInfo> read_sources(const fs::path& path) {
    try {
        const json j = json::parse(read_text(path));
        std::vector<SourceInfo> out;
        for (const auto& s : j) {
            SourceInfo info;
            info.id = s.at("id").get<std::string>();
            info.place = s.value("place", info.id);
            info.date = s.value("date", "");
            info.raw_count = s.value("raw_count", std::size_t{0});
            out.push_back(std::move(info));
        }
        return out;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Input, "malformed sources file " + path.string() + ": " + e.what());
    }
}

namespace {

bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::string rejected(const std::string& reason) { return std::string(kRejectedPrefix) + reason; }

}  // namespace

DatasetManifest ingest(const fs::path& root, const std::vector<SourceInfo>& sources,
                       const std::vector<std::string>& label_set) {
    std::error_code ec;
    if (!fs::is_directory(root, ec)) throw Error(ErrorCode::Io, "ingest root is not a readable directory: " + root.string());

    std::vector<fs::path> files;
    for (auto it = fs::recursive_directory_iterator(root, ec); !ec && it != fs::recursive_directory_iterator();
         it.increment(ec)) {
        if (it->is_regular_file() && is_image_file(it->path())) files.push_back(it->path());
    }
    if (ec) throw Error(ErrorCode::Io, "cannot walk " + root.string() + ": " + ec.message());
    std::sort(files.begin(), files.end());

    std::map<std::string, const SourceInfo*> by_id;
    for (const auto& s : sources) by_id[s.id] = &s;
    const std::set<std::string> labels(label_set.begin(), label_set.end());

    DatasetManifest m;
    m.entries.resize(files.size());
    detail::parallel_for(files.size(), [&](std::size_t i) {
        const fs::path rel = files[i].lexically_relative(root);
        std::vector<std::string> parts;
        for (const auto& p : rel) parts.push_back(p.string());
        ImageRecord& r = m.entries[i];
        r.path = files[i].string();
        r.source = parts.size() >= 2 ? parts[0] : "unsourced";
        if (auto it = by_id.find(r.source); it != by_id.end()) r.date = it->second->date;
        r.label = kUnlabeled;
        if (parts.size() >= 3) {
            const std::string& dir = parts[parts.size() - 2];
            if (labels.empty() || labels.contains(dir)) r.label = dir;
        }
        try {
            const Image img = read_image(files[i]);
            r.width = img.width;
            r.height = img.height;
        } catch (const Error&) {
            r.label = rejected("undecodable");
        }
    });

    std::map<std::string, std::size_t> counts;
    for (const auto& r : m.entries) ++counts[r.source];
    for (const auto& s : sources) {
        SourceInfo info = s;
        info.raw_count = counts.contains(s.id) ? counts[s.id] : 0;
        m.sources.push_back(std::move(info));
    }
    for (const auto& [id, n] : counts) {
        if (!by_id.contains(id)) m.sources.push_back(SourceInfo{id, id, "", n});
    }
    return m;
}

std::set<std::string> read_exclusion_list(const fs::path& path) {
    std::set<std::string> out;
    std::istringstream in(read_text(path));
    for (std::string line; std::getline(in, line);) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        out.insert(line);
    }
    return out;
}

namespace {

bool excluded(const std::string& path, const std::set<std::string>& list) {
    if (list.contains(path)) return true;
    for (std::size_t pos = path.find('/'); pos != std::string::npos; pos = path.find('/', pos + 1)) {
        if (list.contains(path.substr(pos + 1))) return true;
    }
    return false;
}

}  // namespace

DatasetManifest clean(const DatasetManifest& manifest, const CleanOptions& options) {
    DatasetManifest m = manifest;
    detail::parallel_for(m.entries.size(), [&](std::size_t i) {
        ImageRecord& r = m.entries[i];
        if (r.rejected()) return;
        try {
            r.blur_score = laplacian_variance(read_image(r.path));
        } catch (const Error&) {
            r.label = rejected("undecodable");
            r.split = Split::None;
            return;
        }
        std::string reason;
        if (excluded(r.path, options.exclusions)) reason = "foreign";
        else if (r.label == kUnlabeled) reason = "unlabeled";
        else if (std::min(r.width, r.height) < options.min_resolution) reason = "low-res";
        else if (r.blur_score < options.blur_threshold) reason = "blurred";
        if (!reason.empty()) {
            r.label = rejected(reason);
            r.split = Split::None;
        }
    });
    return m;
}

DatasetManifest normalize(const DatasetManifest& manifest, const fs::path& out_dir, std::size_t side) {
    if (side == 0) throw Error(ErrorCode::InvalidArgument, "normalize side must be >= 1");
    DatasetManifest m = manifest;

    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < m.entries.size(); ++i)
        if (m.entries[i].accepted() && m.entries[i].augment == 0) order.push_back(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return m.entries[a].path < m.entries[b].path; });

    std::map<std::string, std::size_t> seq;
    std::vector<std::pair<std::size_t, fs::path>> jobs;
    std::set<fs::path> targets;
    for (auto i : order) {
        const std::string& label = m.entries[i].label;
        char name[32];
        std::snprintf(name, sizeof name, "_%05zu.png", ++seq[label]);
        fs::path target = out_dir / label / (label + name);
        if (!targets.insert(target).second) throw Error(ErrorCode::Internal, "name collision at " + target.string());
        jobs.emplace_back(i, std::move(target));
    }
    for (const auto& [label, _] : seq) fs::create_directories(out_dir / label);

    detail::parallel_for(jobs.size(), [&](std::size_t j) {
        auto& [i, target] = jobs[j];
        const Image img = resize_bilinear(read_image(m.entries[i].path), side, side);
        write_png(img, target);
    });
    for (auto& [i, target] : jobs) {
        m.entries[i].path = target.string();
        m.entries[i].width = side;
        m.entries[i].height = side;
    }
    std::stable_sort(m.entries.begin(), m.entries.end(),
                     [](const ImageRecord& a, const ImageRecord& b) { return a.path < b.path; });
    return m;
}

DatasetManifest split(const DatasetManifest& manifest, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "test fraction must be within [0, 1]");
    }
    DatasetManifest m = manifest;
    std::map<std::string, std::vector<std::size_t>> by_label;
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        auto& r = m.entries[i];
        if (!r.accepted()) {
            r.split = Split::None;
            continue;
        }
        r.split = Split::Train;
        if (r.augment == 0) by_label[r.label].push_back(i);
    }
    for (auto& [label, idx] : by_label) {
        if (idx.size() < 2) {
            throw Error(ErrorCode::Stratification,
                        "label '" + label + "' has " + std::to_string(idx.size()) + " sample(s); need at least 2");
        }
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return m.entries[a].path < m.entries[b].path; });
        shuffle_indices(idx, mix_seed(seed, hash_string(label)));
        const auto n_test = static_cast<std::size_t>(std::ceil(test_fraction * static_cast<double>(idx.size()) - 1e-9));
        for (std::size_t k = 0; k < n_test && k < idx.size(); ++k) m.entries[idx[k]].split = Split::Test;
    }
    // Oversampled duplicates follow their original record.
    std::map<std::string, Split> original;
    for (const auto& r : m.entries)
        if (r.accepted() && r.augment == 0) original[r.path] = r.split;
    for (auto& r : m.entries)
        if (r.accepted() && r.augment != 0 && original.contains(r.path)) r.split = original[r.path];
    return m;
}

// ---------------------------------------------------------------------------

DatasetStats stats(const DatasetManifest& manifest) {
    DatasetStats s;
    std::map<std::string, std::size_t> row_of;
    for (const auto& src : manifest.sources) {
        row_of[src.id] = s.sources.size();
        s.sources.push_back(SourceRow{src.id, src.place, src.date, 0, 0});
    }
    for (const auto& r : manifest.entries) {
        auto it = row_of.find(r.source);
        if (it == row_of.end()) {
            it = row_of.emplace(r.source, s.sources.size()).first;
            s.sources.push_back(SourceRow{r.source, r.source, r.date, 0, 0});
        }
        SourceRow& row = s.sources[it->second];
        ++row.raw;
        ++s.total;
        if (r.rejected()) {
            ++s.rejected;
            ++s.rejections[r.rejection_reason()];
        } else if (r.label == kUnlabeled) {
            ++s.unlabeled;
        } else {
            ++s.accepted;
            ++row.accepted;
            ++s.labels[r.label];
            ++s.splits[to_string(r.split)];
        }
    }
    return s;
}

std::string render_stats(const DatasetStats& s) {
    std::ostringstream os;
    std::size_t w = 6;
    for (const auto& row : s.sources) w = std::max(w, row.place.size());
    os << std::left << std::setw(12) << "Date" << "  " << std::setw(static_cast<int>(w)) << "Place" << "  " << std::right
       << std::setw(8) << "Raw" << "  " << std::setw(8) << "Accepted" << '\n';
    for (const auto& row : s.sources) {
        os << std::left << std::setw(12) << row.date << "  " << std::setw(static_cast<int>(w)) << row.place << "  "
           << std::right << std::setw(8) << row.raw << "  " << std::setw(8) << row.accepted << '\n';
    }
    os << std::left << std::setw(12) << "Total" << "  " << std::setw(static_cast<int>(w)) << "" << "  " << std::right
       << std::setw(8) << s.total << "  " << std::setw(8) << s.accepted << "\n\n";
    os << "accepted " << s.accepted << ", rejected " << s.rejected << ", unlabeled " << s.unlabeled << '\n';
    if (!s.labels.empty()) {
        os << "labels:";
        for (const auto& [k, v] : s.labels) os << ' ' << k << '=' << v;
        os << '\n';
    }
    if (!s.splits.empty()) {
        os << "splits:";
        for (const auto& [k, v] : s.splits) os << ' ' << k << '=' << v;
        os << '\n';
    }
    if (!s.rejections.empty()) {
        os << "rejections:";
        for (const auto& [k, v] : s.rejections) os << ' ' << k << '=' << v;
        os << '\n';
    }
    return os.str();
}

std::string stats_to_json(const DatasetStats& s) {
    json j;
    j["sources"] = json::array();
    for (const auto& row : s.sources) {
        j["sources"].push_back({{"id", row.id}, {"place", row.place}, {"date", row.date}, {"raw", row.raw},
                                {"accepted", row.accepted}});
    }
    j["labels"] = s.labels;
    j["splits"] = s.splits;
    j["rejections"] = s.rejections;
    j["total"] = s.total;
    j["accepted"] = s.accepted;
    j["rejected"] = s.rejected;
    j["unlabeled"] = s.unlabeled;
    return j.dump(2);
}

// ---------------------------------------------------------------------------

fs::path sources_path_for(const fs::path& manifest_path) { return manifest_path.string() + ".sources.json"; }

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
    std::string lines;
    for (const auto& r : manifest.entries) {
        json j{{"path", r.path},     {"label", r.label},   {"source", r.source},         {"date", r.date},
               {"width", r.width},   {"height", r.height}, {"blur_score", r.blur_score}, {"split", to_string(r.split)}};
        if (r.augment != 0) j["augment"] = r.augment;
        lines += j.dump();
        lines += '\n';
    }
    json src = json::array();
    for (const auto& s : manifest.sources) {
        src.push_back({{"id", s.id}, {"place", s.place}, {"date", s.date}, {"raw_count", s.raw_count}});
    }
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_text_atomic(sources_path_for(path), src.dump(2) + "\n");
    write_text_atomic(path, lines);
}

DatasetManifest read_manifest(const fs::path& path) {
    DatasetManifest m;
    std::istringstream in(read_text(path));
    std::size_t line_no = 0;
    try {
        for (std::string line; std::getline(in, line);) {
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            const json j = json::parse(line);
            ImageRecord r;
            r.path = j.at("path").get<std::string>();
            r.label = j.at("label").get<std::string>();
            r.source = j.value("source", "");
            r.date = j.value("date", "");
            r.width = j.value("width", std::size_t{0});
            r.height = j.value("height", std::size_t{0});
            r.blur_score = j.value("blur_score", 0.0);
            r.split = parse_split(j.value("split", "none"));
            r.augment = j.value("augment", std::uint64_t{0});
            m.entries.push_back(std::move(r));
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Input, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    const fs::path sp = sources_path_for(path);
    if (fs::exists(sp)) m.sources = read_sources(sp);
    return m;
}

}  // namespace cacao
