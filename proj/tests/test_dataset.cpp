#include <doctest.h>

#include <map>

#include "cacao/dataset.hpp"
#include "cacao/error.hpp"
#include "cacao/image.hpp"
#include "cacao/io.hpp"
#include "support.hpp"

using namespace cacao;
namespace fs = std::filesystem;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return ErrorCode::Internal;
}

void put_png(const fs::path& p, const Image& img) {
    fs::create_directories(p.parent_path());
    write_png(img, p);
}

ImageRecord labeled(const std::string& path, const std::string& label) {
    ImageRecord r;
    r.path = path;
    r.label = label;
    r.width = r.height = 8;
    return r;
}

}  // namespace

TEST_CASE("collection fixture: ingest, clean and stats reproduce the campaign counts") {
    testing::TempDir dir;
    const fs::path root = dir / "raw";
    testing::write_collection_fixture(root);

    const auto sources = read_sources(root / "sources.json");
    const DatasetManifest m = ingest(root, sources, disease_labels());
    const DatasetStats s = stats(m);
    CHECK(s.total == 4980);
    REQUIRE(s.sources.size() == 9);
    const std::vector<std::size_t> expect{335, 917, 725, 662, 1212, 503, 246, 224, 156};
    std::size_t sum = 0;
    for (std::size_t i = 0; i < 9; ++i) {
        CHECK(s.sources[i].raw == expect[i]);
        CHECK(m.sources[i].raw_count == expect[i]);
        sum += m.sources[i].raw_count;
    }
    CHECK(sum == m.entries.size());
    CHECK(render_stats(s).find("4980") != std::string::npos);

    CleanOptions opts;
    opts.exclusions = read_exclusion_list(dir / "raw-exclusions.txt");
    CHECK(opts.exclusions.size() == 590);
    const DatasetManifest cleaned = clean(m, opts);
    const DatasetStats cs = stats(cleaned);
    CHECK(cs.total == 4980);
    CHECK(cs.accepted == 4390);
    CHECK(cs.rejections.at("foreign") == 590);
    CHECK(cs.accepted + cs.rejected + cs.unlabeled == cs.total);
}

TEST_CASE("ingest") {
    testing::TempDir dir;
    SUBCASE("empty directory") {
        fs::create_directories(dir / "empty");
        const DatasetManifest m = ingest(dir / "empty", {});
        CHECK(m.entries.empty());
        CHECK(stats(m).total == 0);
    }
    SUBCASE("missing root") {
        CHECK(code_of([&] { ingest(dir / "missing", {}); }) == ErrorCode::Io);
    }
    SUBCASE("one corrupt file among N") {
        for (int i = 0; i < 4; ++i) put_png(dir / "r/s1/healthy" / ("ok" + std::to_string(i) + ".png"), testing::checkerboard(8, 8));
        const auto good = read_file(dir / "r/s1/healthy/ok0.png");
        const std::vector<std::uint8_t> truncated(good.begin(), good.begin() + 30);
        write_file_atomic(dir / "r/s1/healthy/bad.png", truncated);
        const DatasetManifest m = ingest(dir / "r", {});
        REQUIRE(m.entries.size() == 5);
        std::size_t rejected = 0;
        for (const auto& r : m.entries) {
            if (r.rejected()) {
                ++rejected;
                CHECK(r.rejection_reason() == "undecodable");
                CHECK(r.path.ends_with("bad.png"));
            } else {
                CHECK(r.label == "healthy");
                CHECK(r.width == 8);
            }
        }
        CHECK(rejected == 1);
    }
    SUBCASE("labels outside the set and loose files are unlabeled") {
        put_png(dir / "r/s1/healthy/a.png", testing::checkerboard(8, 8));
        put_png(dir / "r/s1/mystery/b.png", testing::checkerboard(8, 8));
        put_png(dir / "r/s1/c.jpg", testing::checkerboard(8, 8));  // PNG bytes, sniffed regardless of extension
        testing::write_text(dir / "r/s1/notes.txt", "ignored");
        const DatasetManifest m = ingest(dir / "r", {{"s1", "Farm", "2024-01-01", 0}}, disease_labels());
        REQUIRE(m.entries.size() == 3);
        std::map<std::string, std::string> by_name;
        for (const auto& r : m.entries) by_name[fs::path(r.path).filename().string()] = r.label;
        CHECK(by_name["a.png"] == "healthy");
        CHECK(by_name["b.png"] == kUnlabeled);
        CHECK(by_name["c.jpg"] == kUnlabeled);
        CHECK(m.entries[0].date == "2024-01-01");
    }
}

TEST_CASE("clean") {
    testing::TempDir dir;
    put_png(dir / "r/s/healthy/flat.png", testing::flat_image(16, 16, 128, 128, 128));
    put_png(dir / "r/s/healthy/sharp.png", testing::checkerboard(16, 16));
    put_png(dir / "r/s/healthy/small.png", testing::checkerboard(6, 6));
    put_png(dir / "r/s/healthy/rock.png", testing::checkerboard(16, 16));
    put_png(dir / "r/s/loose.png", testing::checkerboard(16, 16));
    const DatasetManifest m = ingest(dir / "r", {});

    CleanOptions opts;
    opts.min_resolution = 8;
    opts.exclusions = {"healthy/rock.png"};
    const DatasetManifest c = clean(m, opts);
    std::map<std::string, const ImageRecord*> by_name;
    for (const auto& r : c.entries) by_name[fs::path(r.path).filename().string()] = &r;
    CHECK(by_name["flat.png"]->label == "rejected:blurred");
    CHECK(by_name["flat.png"]->blur_score == 0.0);
    CHECK(by_name["sharp.png"]->accepted());
    CHECK(by_name["sharp.png"]->blur_score > by_name["flat.png"]->blur_score);
    CHECK(by_name["small.png"]->label == "rejected:low-res");
    CHECK(by_name["rock.png"]->label == "rejected:foreign");
    CHECK(by_name["loose.png"]->label == "rejected:unlabeled");
    for (const auto& r : c.entries)
        if (r.rejected()) CHECK(r.split == Split::None);

    CleanOptions tiny;
    tiny.blur_threshold = 1e-9;
    CHECK(clean(m, tiny).entries.size() == m.entries.size());
    for (const auto& r : clean(m, tiny).entries)
        if (fs::path(r.path).filename() == "flat.png") CHECK(r.label == "rejected:blurred");
}

TEST_CASE("normalize") {
    testing::TempDir dir;
    put_png(dir / "r/s/healthy/wide.png", testing::blob_image(1, 1, 80));
    {
        Image big = testing::checkerboard(640, 480, 5);
        put_png(dir / "r/s/healthy/big.png", big);
    }
    put_png(dir / "r/s/pod-borer/exact.png", testing::blob_image(2, 3, 64));
    put_png(dir / "r/s/healthy/flat.png", testing::flat_image(20, 20, 9, 9, 9));
    const DatasetManifest cleaned = clean(ingest(dir / "r", {}), CleanOptions{});
    const fs::path out = dir / "out";
    const DatasetManifest n = normalize(cleaned, out, 64);

    CHECK(fs::exists(out / "healthy/healthy_00001.png"));
    CHECK(fs::exists(out / "healthy/healthy_00002.png"));
    CHECK_FALSE(fs::exists(out / "healthy/healthy_00003.png"));  // the flat image was rejected
    const Image first = read_image(out / "healthy/healthy_00001.png");
    CHECK(first.width == 64);
    CHECK(first.height == 64);
    CHECK(read_image(out / "pod-borer/pod-borer_00001.png") == testing::blob_image(2, 3, 64));

    std::size_t rejected = 0;
    for (const auto& r : n.entries) {
        if (r.rejected()) {
            ++rejected;
            CHECK(r.path.find("/r/") != std::string::npos);
        } else {
            CHECK(r.width == 64);
            CHECK(r.path.starts_with(out.string()));
        }
    }
    CHECK(rejected == 1);

    // Idempotent on its own output.
    std::map<std::string, std::vector<std::uint8_t>> before;
    for (const auto& e : fs::recursive_directory_iterator(out))
        if (e.is_regular_file()) before[e.path().string()] = read_file(e.path());
    const DatasetManifest again = normalize(n, out, 64);
    CHECK(again == n);
    for (const auto& [p, bytes] : before) CHECK(read_file(p) == bytes);
}

TEST_CASE("split") {
    DatasetManifest m;
    for (int i = 0; i < 100; ++i) m.entries.push_back(labeled("a/" + std::to_string(1000 + i) + ".png", "healthy"));
    for (int i = 0; i < 21; ++i) m.entries.push_back(labeled("b/" + std::to_string(1000 + i) + ".png", "pod-borer"));
    m.entries.push_back([] {
        ImageRecord r = labeled("c/rej.png", "rejected:blurred");
        return r;
    }());

    auto count = [](const DatasetManifest& d, const std::string& label, Split s) {
        std::size_t n = 0;
        for (const auto& r : d.entries) n += r.label == label && r.split == s;
        return n;
    };

    const DatasetManifest s = split(m, 0.15, 42);
    CHECK(count(s, "healthy", Split::Test) == 15);
    CHECK(count(s, "healthy", Split::Train) == 85);
    CHECK(count(s, "pod-borer", Split::Test) == 4);  // ceil(3.15)
    CHECK(count(s, "rejected:blurred", Split::None) == 1);
    CHECK(split(m, 0.15, 42) == s);
    CHECK_FALSE(split(m, 0.15, 43) == s);

    const DatasetManifest all_train = split(m, 0.0, 1);
    CHECK(count(all_train, "healthy", Split::Test) == 0);
    CHECK(count(all_train, "healthy", Split::Train) == 100);

    for (double f : {0.1, 0.2, 0.33, 0.5}) {
        const DatasetManifest d = split(m, f, 9);
        for (const char* label : {"healthy", "pod-borer"}) {
            const double n = static_cast<double>(count(d, label, Split::Test) + count(d, label, Split::Train));
            CHECK(std::fabs(static_cast<double>(count(d, label, Split::Test)) - f * n) <= 1.0);
        }
    }

    DatasetManifest lonely = m;
    lonely.entries.push_back(labeled("d/x.png", "black-pod-rot"));
    CHECK(code_of([&] { split(lonely, 0.15, 1); }) == ErrorCode::Stratification);
    CHECK(code_of([&] { split(m, 1.5, 1); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("stats") {
    const DatasetStats empty = stats(DatasetManifest{});
    CHECK(empty.total == 0);
    CHECK(empty.accepted == 0);
    CHECK(empty.sources.empty());
    CHECK(render_stats(empty).find("Total") != std::string::npos);

    DatasetManifest m;
    m.sources = {{"s1", "Farm", "2024-01-01", 3}};
    for (const char* l : {"healthy", "healthy", "rejected:blurred", "unlabeled"}) {
        ImageRecord r = labeled(std::string("p/") + l + std::to_string(m.entries.size()), l);
        r.source = "s1";
        m.entries.push_back(r);
    }
    m.entries[0].split = Split::Test;
    const DatasetStats s = stats(m);
    CHECK(s.total == 4);
    CHECK(s.accepted == 2);
    CHECK(s.rejected == 1);
    CHECK(s.unlabeled == 1);
    CHECK(s.labels.at("healthy") == 2);
    CHECK(s.splits.at("test") == 1);
    CHECK(s.rejections.at("blurred") == 1);
    const auto j = nlohmann::json::parse(stats_to_json(s));
    CHECK(j["total"] == 4);
    CHECK(j["sources"][0]["raw"] == 4);
}

TEST_CASE("manifest persistence round trip") {
    testing::TempDir dir;
    DatasetManifest m;
    m.sources = {{"s1", "Farm A", "2024-01-01", 2}, {"s2", "Farm B", "2024-02-01", 1}};
    ImageRecord a = labeled("x/a.png", "healthy");
    a.source = "s1";
    a.blur_score = 123.456;
    a.split = Split::Train;
    ImageRecord b = labeled("x/b.png", "rejected:foreign");
    b.source = "s2";
    ImageRecord c = a;
    c.augment = 99;
    m.entries = {a, b, c};
    write_manifest(m, dir / "m.jsonl");
    CHECK(fs::exists(sources_path_for(dir / "m.jsonl")));
    CHECK(read_manifest(dir / "m.jsonl") == m);

    testing::write_text(dir / "bad.jsonl", "{\"path\": 1}\n");
    CHECK(code_of([&] { read_manifest(dir / "bad.jsonl"); }) == ErrorCode::Input);
}

TEST_CASE("shuffle is deterministic and a permutation") {
    std::vector<std::size_t> a(50);
    std::iota(a.begin(), a.end(), 0);
    std::vector<std::size_t> b(a.begin(), a.end());
    shuffle_indices(a, 5);
    shuffle_indices(b, 5);
    CHECK(a == b);
    std::vector<std::size_t> sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
}
