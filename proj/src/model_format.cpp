#include "cacao/model_format.hpp"

#include <bit>
#include <cstring>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "cacao/error.hpp"
#include "cacao/io.hpp"

namespace cacao {

namespace {

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void align4() {
        while (buf_.size() % 4) buf_.push_back(0);
    }
    std::size_t size() const { return buf_.size(); }
    std::vector<std::uint8_t>& buffer() { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    Reader(std::span<const std::uint8_t> b, std::size_t end) : b_(b), end_(end) {}
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }
    void skip_to(std::size_t p) {
        if (p > end_ || p < pos_) throw Error(ErrorCode::Corruption, "container layout is inconsistent");
        pos_ = p;
    }

private:
    void need(std::size_t n) const {
        if (n > end_ - pos_) throw Error(ErrorCode::Corruption, "container truncated");
    }
    std::span<const std::uint8_t> b_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

float load_f32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return std::bit_cast<float>(v);
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const Model& model) {
    // Re-run validation: weights may have been edited through mutable_weights().
    const Model checked(model.arch(), model.weights());

    Writer w;
    w.bytes(kContainerMagic, 4);
    w.u32(kContainerVersion);
    w.str(checked.arch().to_text());
    w.u32(static_cast<std::uint32_t>(checked.labels().size()));
    for (const auto& l : checked.labels()) w.str(l);

    const auto& weights = checked.weights();
    w.u32(static_cast<std::uint32_t>(weights.size()));
    std::uint64_t offset = 0;
    for (const auto& [name, t] : weights) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
        const std::uint64_t len = 4ull * t.size();
        w.u64(offset);
        w.u64(len);
        offset += len;
    }
    w.align4();
    for (const auto& [_, t] : weights) {
        for (float v : t.data()) w.u32(std::bit_cast<std::uint32_t>(v));
    }
    const std::uint32_t crc = crc32(w.buffer());
    w.u32(crc);
    return std::move(w.buffer());
}

ContainerInfo inspect_container(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
        throw Error(ErrorCode::NotAModel, "missing CDM1 magic; not a model container");
    }
    if (bytes.size() < 12) throw Error(ErrorCode::Corruption, "container truncated");
    const std::size_t body = bytes.size() - 4;
    const std::uint32_t stored = Reader(bytes.subspan(body), 4).u32();
    const std::uint32_t actual = crc32(bytes.first(body));
    if (stored != actual) throw Error(ErrorCode::Corruption, "container checksum mismatch (truncated or corrupted)");

    ContainerInfo info;
    info.crc = stored;
    info.file_size = bytes.size();
    info.digest = sha256_hex(bytes);

    Reader r(bytes, body);
    r.skip_to(4);
    info.version = r.u32();
    if (info.version != kContainerVersion) {
        throw Error(ErrorCode::Version, "unsupported container format_version " + std::to_string(info.version));
    }
    info.arch_text = r.str();
    const std::uint32_t nlabels = r.u32();
    for (std::uint32_t i = 0; i < nlabels; ++i) info.labels.push_back(r.str());
    const std::uint32_t ntensors = r.u32();
    for (std::uint32_t i = 0; i < ntensors; ++i) {
        TensorEntry e;
        e.name = r.str();
        const std::uint32_t rank = r.u32();
        if (rank > kMaxRank) throw Error(ErrorCode::Corruption, "tensor " + e.name + " has rank > 4");
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint32_t extent = r.u32();
            if (extent == 0) throw Error(ErrorCode::Corruption, "tensor " + e.name + " has a zero extent");
            e.shape.push_back(extent);
        }
        e.offset = r.u64();
        e.length = r.u64();
        info.tensors.push_back(std::move(e));
    }
    info.payload_offset = (r.pos() + 3) / 4 * 4;
    r.skip_to(info.payload_offset);
    const std::uint64_t payload_size = body - info.payload_offset;

    std::uint64_t next = 0;
    for (const auto& e : info.tensors) {
        if (e.length != 4ull * shape_size(e.shape)) {
            throw Error(ErrorCode::Corruption, "tensor " + e.name + " byte length disagrees with its extents");
        }
        if (e.offset < next || e.offset % 4 != 0 || e.offset > payload_size || e.length > payload_size - e.offset) {
            throw Error(ErrorCode::Corruption, "tensor " + e.name + " has an invalid payload range");
        }
        next = e.offset + e.length;
    }
    if (next != payload_size) throw Error(ErrorCode::Corruption, "payload size disagrees with tensor directory");
    return info;
}

Model deserialize_model(std::span<const std::uint8_t> bytes) {
    const ContainerInfo info = inspect_container(bytes);
    ArchSpec arch = ArchSpec::parse(info.arch_text, info.labels);
    TensorMap weights;
    for (const auto& e : info.tensors) {
        std::vector<float> data(shape_size(e.shape));
        const std::uint8_t* p = bytes.data() + info.payload_offset + e.offset;
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = load_f32(p + 4 * i);
        weights.emplace(e.name, Tensor(e.shape, std::move(data)));
    }
    return Model(std::move(arch), std::move(weights));
}

void save_model(const Model& model, const std::filesystem::path& path) {
    const auto bytes = serialize_model(model);
    write_file_atomic(path, bytes);
}

Model load_model(const std::filesystem::path& path) { return deserialize_model(read_file(path)); }

std::string describe_container(const ContainerInfo& info) {
    std::ostringstream os;
    os << "format:   CDM1 v" << info.version << '\n';
    os << "size:     " << info.file_size << " bytes\n";
    os << "crc32:    " << std::hex << std::setw(8) << std::setfill('0') << info.crc << std::dec << std::setfill(' ') << '\n';
    os << "sha256:   " << info.digest << '\n';
    os << "labels:   " << info.labels.size() << '\n';
    for (std::size_t i = 0; i < info.labels.size(); ++i) os << "  [" << i << "] " << info.labels[i] << '\n';
    os << "arch:\n";
    std::istringstream arch(info.arch_text);
    for (std::string line; std::getline(arch, line);) os << "  " << line << '\n';
    os << "tensors:  " << info.tensors.size() << " (payload at byte " << info.payload_offset << ")\n";
    for (const auto& e : info.tensors) {
        os << "  " << std::left << std::setw(16) << e.name << std::right << std::setw(20) << shape_to_string(e.shape)
           << "  offset " << std::setw(9) << e.offset << "  bytes " << e.length << '\n';
    }
    return os.str();
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    nlohmann::json j;
    j["arch"] = model.arch().to_text();
    j["labels"] = model.labels();
    auto& tensors = j["tensors"];
    tensors = nlohmann::json::object();
    for (const auto& [name, t] : model.weights()) {
        tensors[name] = {{"shape", t.shape()}, {"data", t.values()}};
    }
    write_text_atomic(path, j.dump());
}

Model load_checkpoint(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(path));
        ArchSpec arch = ArchSpec::parse(j.at("arch").get<std::string>(), j.at("labels").get<std::vector<std::string>>());
        TensorMap weights;
        for (const auto& [name, t] : j.at("tensors").items()) {
            weights.emplace(name, Tensor(t.at("shape").get<Shape>(), t.at("data").get<std::vector<float>>()));
        }
        return Model(std::move(arch), std::move(weights));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Input, "malformed checkpoint " + path.string() + ": " + e.what());
    }
}

}  // namespace cacao
