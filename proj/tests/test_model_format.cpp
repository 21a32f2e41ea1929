#include <doctest.h>
#include <zlib.h>

#include <cstring>
#include <random>

#include "cacao/error.hpp"
#include "cacao/io.hpp"
#include "cacao/model_format.hpp"
#include "support.hpp"

using namespace cacao;
using Bytes = std::vector<std::uint8_t>;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return ErrorCode::Internal;
}

Model sample_model(std::uint64_t seed = 3) {
    return Model::initialize(testing::toy_arch({"black-pod-rot", "healthy", "pod-borer"}), seed);
}

// Minimal little-endian reader for checking the layout byte by byte.
struct Reader {
    const Bytes& b;
    std::size_t pos = 0;
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b.at(pos + i)) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b.at(pos + i)) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        std::string s(b.begin() + pos, b.begin() + pos + n);
        pos += n;
        return s;
    }
};

void fix_crc(Bytes& b) {
    const uLong crc = ::crc32(0L, b.data(), static_cast<uInt>(b.size() - 4));
    for (int i = 0; i < 4; ++i) b[b.size() - 4 + i] = static_cast<std::uint8_t>(crc >> (8 * i));
}

}  // namespace

TEST_CASE("container layout matches the documented format byte for byte") {
    const Model m = sample_model();
    const Bytes b = serialize_model(m);
    Reader r{b};
    REQUIRE(b.size() > 16);
    CHECK(std::memcmp(b.data(), "CDM1", 4) == 0);
    r.pos = 4;
    CHECK(r.u32() == 1);
    CHECK(r.str() == m.arch().to_text());
    const std::uint32_t nlabels = r.u32();
    REQUIRE(nlabels == 3);
    for (std::uint32_t i = 0; i < nlabels; ++i) CHECK(r.str() == m.labels()[i]);

    const std::uint32_t count = r.u32();
    REQUIRE(count == m.weights().size());
    struct Entry {
        std::string name;
        Shape shape;
        std::uint64_t offset, length;
    };
    std::vector<Entry> dir;
    for (std::uint32_t i = 0; i < count; ++i) {
        Entry e;
        e.name = r.str();
        const std::uint32_t rank = r.u32();
        for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.u32());
        e.offset = r.u64();
        e.length = r.u64();
        dir.push_back(e);
    }
    while (r.pos % 4) CHECK(b[r.pos++] == 0);
    const std::size_t payload = r.pos;

    std::uint64_t expect_offset = 0;
    for (std::size_t i = 0; i < dir.size(); ++i) {
        if (i) CHECK(dir[i - 1].name < dir[i].name);
        const Tensor& t = m.weights().at(dir[i].name);
        CHECK(dir[i].shape == t.shape());
        CHECK(dir[i].offset == expect_offset);
        CHECK(dir[i].length == 4 * t.size());
        CHECK((payload + dir[i].offset) % 4 == 0);
        for (std::size_t k = 0; k < t.size(); ++k) {
            std::uint32_t bits = 0;
            for (int j = 0; j < 4; ++j) bits |= static_cast<std::uint32_t>(b[payload + dir[i].offset + 4 * k + j]) << (8 * j);
            std::uint32_t want;
            const float f = t[k];
            std::memcpy(&want, &f, 4);
            CHECK(bits == want);
        }
        expect_offset += dir[i].length;
    }
    CHECK(payload + expect_offset + 4 == b.size());
    r.pos = b.size() - 4;
    CHECK(r.u32() == ::crc32(0L, b.data(), static_cast<uInt>(b.size() - 4)));
}

TEST_CASE("save/load round trip") {
    testing::TempDir dir;
    const Model m = sample_model();
    const auto path = dir / "m.cdm";
    save_model(m, path);
    const Model back = load_model(path);
    CHECK(back.bit_equal(m));
    CHECK(back.labels() == m.labels());
    CHECK(back.arch() == m.arch());
    for (std::uint64_t s = 0; s < 5; ++s) {
        const Tensor x = testing::random_tensor({2, 3, 8, 8}, s, 0, 1);
        CHECK(back.forward(x).bit_equal(m.forward(x)));
    }

    save_model(m, dir / "m2.cdm");
    CHECK(read_file(path) == read_file(dir / "m2.cdm"));

    // No temp files left behind.
    std::size_t files = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir.path())) files += e.is_regular_file();
    CHECK(files == 2);
}

TEST_CASE("round trip of a scaled base network") {
    ArchSpec a = cacaonet_b0({"level-1", "level-2", "level-3"}, 32);
    CompoundScalingConfig cfg;
    cfg.phi = 1;
    const Model m = Model::initialize(scale_arch(a, cfg), 1);
    const Model back = deserialize_model(serialize_model(m));
    CHECK(back.bit_equal(m));
    CHECK(back.arch() == m.arch());
}

TEST_CASE("an invalid model is rejected before any write") {
    testing::TempDir dir;
    Model m = sample_model();
    m.mutable_weights()["conv0.weight"] = Tensor({4, 3, 1, 1});
    CHECK(code_of([&] { save_model(m, dir / "bad.cdm"); }) == ErrorCode::Validation);
    CHECK_FALSE(std::filesystem::exists(dir / "bad.cdm"));
}

TEST_CASE("unwritable path is an i/o error") {
    CHECK(code_of([] { save_model(sample_model(), "/proc/definitely/not/here.cdm"); }) == ErrorCode::Io);
    CHECK(code_of([] { load_model("/nonexistent/model.cdm"); }) == ErrorCode::Io);
}

TEST_CASE("load errors") {
    const Bytes good = serialize_model(sample_model());

    SUBCASE("first byte flipped") {
        Bytes b = good;
        b[0] ^= 0xFF;
        CHECK(code_of([&] { deserialize_model(b); }) == ErrorCode::NotAModel);
    }
    SUBCASE("not a container at all") {
        const std::string text = "hello world, not a model";
        const Bytes b(text.begin(), text.end());
        CHECK(code_of([&] { deserialize_model(b); }) == ErrorCode::NotAModel);
        CHECK(code_of([&] { deserialize_model(Bytes{}); }) == ErrorCode::NotAModel);
    }
    SUBCASE("truncated mid-payload") {
        Bytes b(good.begin(), good.begin() + static_cast<long>(good.size() - 100));
        CHECK(code_of([&] { deserialize_model(b); }) == ErrorCode::Corruption);
        Bytes header_only(good.begin(), good.begin() + 6);
        CHECK(code_of([&] { deserialize_model(header_only); }) == ErrorCode::Corruption);
    }
    SUBCASE("unknown format version") {
        Bytes b = good;
        b[4] = 2;
        fix_crc(b);
        CHECK(code_of([&] { deserialize_model(b); }) == ErrorCode::Version);
    }
    SUBCASE("CRC mismatch") {
        Bytes b = good;
        b[b.size() / 2] ^= 0x01;
        CHECK(code_of([&] { deserialize_model(b); }) == ErrorCode::Corruption);
    }
    SUBCASE("inconsistent directory behind a valid CRC") {
        Bytes b = good;
        b.insert(b.end() - 4, {0, 0, 0, 0});  // payload longer than the directory says
        fix_crc(b);
        CHECK(code_of([&] { deserialize_model(b); }) == ErrorCode::Corruption);
    }
}

TEST_CASE("100 random single-byte corruptions are all detected") {
    const Model m = sample_model();
    const Bytes good = serialize_model(m);
    std::mt19937_64 rng(77);
    std::uniform_int_distribution<std::size_t> pos(0, good.size() - 1);
    std::uniform_int_distribution<int> delta(1, 255);
    for (int i = 0; i < 100; ++i) {
        Bytes b = good;
        const std::size_t p = pos(rng);
        b[p] = static_cast<std::uint8_t>(b[p] ^ delta(rng));
        bool detected = false;
        try {
            (void)deserialize_model(b);
        } catch (const Error& e) {
            detected = e.code() == ErrorCode::NotAModel || e.code() == ErrorCode::Corruption ||
                       e.code() == ErrorCode::Version;
        }
        INFO("flip at byte " << p);
        CHECK(detected);
    }
}

TEST_CASE("describe echoes header, labels and directory") {
    const Model m = sample_model();
    const ContainerInfo info = inspect_container(serialize_model(m));
    CHECK(info.version == 1);
    CHECK(info.labels == m.labels());
    CHECK(info.tensors.size() == m.weights().size());
    CHECK(info.digest.size() == 64);
    const std::string text = describe_container(info);
    for (const auto& l : m.labels()) CHECK(text.find(l) != std::string::npos);
    CHECK(text.find("conv0.weight") != std::string::npos);
    CHECK(text.find("CDM1") != std::string::npos);
}

TEST_CASE("checkpoint round trip and conversion") {
    testing::TempDir dir;
    const Model m = sample_model(11);
    save_checkpoint(m, dir / "ck.json");
    const Model back = load_checkpoint(dir / "ck.json");
    CHECK(back.bit_equal(m));
    save_model(back, dir / "out.cdm");
    CHECK(load_model(dir / "out.cdm").bit_equal(m));

    testing::write_text(dir / "broken.json", "{\"arch\": 3}");
    CHECK(code_of([&] { load_checkpoint(dir / "broken.json"); }) == ErrorCode::Input);
}
