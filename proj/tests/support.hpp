#pragma once

#include <stdlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "cacao/dataset.hpp"
#include "cacao/image.hpp"
#include "cacao/model_format.hpp"
#include "cacao/nn.hpp"

namespace testing {

namespace fs = std::filesystem;

class TempDir {
public:
    explicit TempDir(const std::string& tag = "cacao") {
        std::string tmpl = (fs::temp_directory_path() / (tag + "-XXXXXX")).string();
        if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
        path_ = tmpl;
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    fs::path path_;
};

inline void write_text(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << text;
}

// High-frequency checkerboard: sharp enough to pass the default blur check.
inline cacao::Image checkerboard(std::size_t w, std::size_t h, std::size_t cell = 2) {
    cacao::Image img{w, h, std::vector<std::uint8_t>(w * h * 3)};
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const std::uint8_t v = ((x / cell + y / cell) % 2) ? 230 : 20;
            auto* p = img.at(x, y);
            p[0] = p[1] = p[2] = v;
        }
    return img;
}

inline cacao::Image flat_image(std::size_t w, std::size_t h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    cacao::Image img{w, h, {}};
    img.pixels.reserve(w * h * 3);
    for (std::size_t i = 0; i < w * h; ++i) {
        img.pixels.push_back(r);
        img.pixels.push_back(g);
        img.pixels.push_back(b);
    }
    return img;
}

// A pod-like ellipse on a noisy background. Class 0: dark brown with black
// lesions; class 1: smooth green; class 2: yellow with dark stripes.
inline cacao::Image blob_image(int cls, std::uint64_t seed, std::size_t side) {
    std::mt19937_64 rng(seed * 7919 + static_cast<std::uint64_t>(cls));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 18.0);
    const double cx = side * (0.4 + 0.2 * u(rng)), cy = side * (0.4 + 0.2 * u(rng));
    const double rx = side * (0.25 + 0.1 * u(rng)), ry = side * (0.3 + 0.1 * u(rng));
    const double phase = u(rng) * 6.28;
    static const double base[3][3] = {{70, 40, 20}, {60, 150, 50}, {210, 180, 40}};
    cacao::Image img{side, side, std::vector<std::uint8_t>(side * side * 3)};
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            const double dx = (x - cx) / rx, dy = (y - cy) / ry;
            double c[3] = {120, 110, 100};  // soil-like background
            if (dx * dx + dy * dy <= 1.0) {
                for (int k = 0; k < 3; ++k) c[k] = base[cls][k];
                if (cls == 0 && std::sin(x * 0.9 + phase) * std::cos(y * 0.8) > 0.55) c[0] = c[1] = c[2] = 10;
                if (cls == 2 && std::fmod(x + y + phase * 3, 8.0) < 3.0) {
                    c[0] *= 0.45;
                    c[1] *= 0.45;
                    c[2] *= 0.45;
                }
            }
            auto* p = img.at(x, y);
            for (int k = 0; k < 3; ++k) p[k] = static_cast<std::uint8_t>(std::clamp(c[k] + noise(rng), 0.0, 255.0));
        }
    return img;
}

// root/<source>/<label>/<label>_<i>.png for the three disease labels.
inline void write_blob_dataset(const fs::path& root, std::size_t per_class, std::size_t side, std::uint64_t seed = 1) {
    const auto& labels = cacao::disease_labels();
    nlohmann::json sources = nlohmann::json::array();
    const char* ids[2] = {"farm-a", "farm-b"};
    for (int s = 0; s < 2; ++s)
        sources.push_back({{"id", ids[s]}, {"place", s ? "Hill Farm" : "Valley Farm"}, {"date", s ? "2024-03-09" : "2024-03-02"}});
    for (std::size_t c = 0; c < labels.size(); ++c)
        for (std::size_t i = 0; i < per_class; ++i) {
            const fs::path p = root / ids[i % 2] / labels[c] / (labels[c] + "_" + std::to_string(i) + ".png");
            fs::create_directories(p.parent_path());
            cacao::write_png(blob_image(static_cast<int>(c), seed * 100003 + i, side), p);
        }
    write_text(root / "sources.json", sources.dump(2));
}

// Nine collection days with the raw photo counts of the field campaign.
struct CollectionDay {
    const char* id;
    const char* place;
    const char* date;
    std::size_t count;
};

inline const std::vector<CollectionDay>& collection_days() {
    static const std::vector<CollectionDay> days{
        {"2020-07-02-kvy", "KVY Farm Nursery", "2020-07-02", 335},
        {"2020-09-12-novela", "Novela Farms", "2020-09-12", 917},
        {"2020-09-19-novela", "Novela Farms", "2020-09-19", 725},
        {"2020-09-20-novela", "Novela Farms", "2020-09-20", 662},
        {"2020-10-10-novela", "Novela Farms", "2020-10-10", 1212},
        {"2020-10-18-novela", "Novela Farms", "2020-10-18", 503},
        {"2021-01-10-private", "Private Farm", "2021-01-10", 246},
        {"2021-01-16-private", "Private Farm", "2021-01-16", 224},
        {"2021-01-23-private", "Private Farm", "2021-01-23", 156},
    };
    return days;
}

// Writes root/<day>/<label>/img_<n>.png placeholders for every collection day
// (labels cycle through the disease taxonomy), root/sources.json, and an
// exclusion list naming every eighth-or-so image, `excluded` files in all.
inline void write_collection_fixture(const fs::path& root, std::size_t excluded = 590) {
    const auto& labels = cacao::disease_labels();
    const std::vector<std::uint8_t> png = cacao::encode_png(checkerboard(8, 8));
    nlohmann::json sources = nlohmann::json::array();
    std::vector<std::string> all;
    for (const auto& d : collection_days()) {
        sources.push_back({{"id", d.id}, {"place", d.place}, {"date", d.date}});
        for (std::size_t i = 0; i < d.count; ++i) {
            const std::string rel = std::string(d.id) + "/" + labels[i % labels.size()] + "/img_" + std::to_string(i) + ".png";
            const fs::path p = root / rel;
            fs::create_directories(p.parent_path());
            std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(png.data()),
                                                      static_cast<std::streamsize>(png.size()));
            all.push_back(rel);
        }
    }
    write_text(root / "sources.json", sources.dump(2));
    std::string list = "# foreign objects flagged during review\n";
    const double stride = static_cast<double>(all.size()) / static_cast<double>(excluded);
    for (std::size_t k = 0; k < excluded; ++k) list += all[static_cast<std::size_t>(k * stride)] + "\n";
    write_text(root.parent_path() / (root.filename().string() + "-exclusions.txt"), list);
}

// A small convolutional net for fast tests.
inline cacao::ArchSpec toy_arch(std::vector<std::string> labels, std::size_t res = 8, std::size_t channels = 3) {
    using cacao::LayerSpec;
    cacao::ArchSpec a;
    a.resolution = res;
    a.channels = channels;
    a.labels = std::move(labels);
    const std::size_t n = a.labels.size();
    a.layers = {LayerSpec::conv2d(4, 3), LayerSpec::relu(), LayerSpec::avg_pool(2, 2), LayerSpec::flatten(),
                LayerSpec::dense(n), LayerSpec::softmax()};
    return a;
}

inline cacao::Tensor random_tensor(const cacao::Shape& shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(lo, hi);
    cacao::Tensor t(shape);
    for (auto& v : t.data()) v = u(rng);
    return t;
}

// Disease model that classifies by mean brightness m of an 8x8 image:
// m > 0.625 black-pod-rot, m < 0.375 pod-borer, healthy in between.
inline cacao::Model brightness_disease_model() {
    cacao::Model m = cacao::Model::zeros(toy_arch(cacao::disease_labels()));
    auto& w = m.mutable_weights();
    for (auto& v : w.at("conv0.weight").data()) v = 1.0f / 27.0f;
    // Feature sum at m = 1: 4 channels * (22 * 22 in-bounds taps / 9) / 4 pooled.
    const float k = 484.0f / 9.0f;
    auto& dw = w.at("dense0.weight");
    const std::size_t in = dw.dim(1);
    for (std::size_t j = 0; j < in; ++j) {
        dw.at(0, j) = 1.0f;
        dw.at(2, j) = -1.0f;
    }
    w.at("dense0.bias").data()[0] = -0.625f * k;
    w.at("dense0.bias").data()[2] = 0.375f * k;
    return m;
}

inline cacao::Model toy_level_model(std::uint64_t seed = 4) {
    return cacao::Model::initialize(toy_arch(cacao::default_level_labels()), seed);
}

inline fs::path knowledge_base_path() { return fs::path(CACAO_DATA_DIR) / "knowledge_base.json"; }

// Writes disease.cdm and level.cdm into `dir`.
inline void write_toy_models(const fs::path& dir) {
    fs::create_directories(dir);
    cacao::save_model(brightness_disease_model(), dir / "disease.cdm");
    cacao::save_model(toy_level_model(), dir / "level.cdm");
}

// Uniform-brightness image with mild noise.
inline cacao::Image noisy_gray(std::size_t side, std::uint8_t level, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> noise(-6, 6);
    cacao::Image img{side, side, std::vector<std::uint8_t>(side * side * 3)};
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(std::clamp(level + noise(rng), 0, 255));
    return img;
}

}  // namespace testing
