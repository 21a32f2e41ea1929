#include "cacao/diagnose.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "cacao/dataset.hpp"
#include "cacao/error.hpp"
#include "cacao/io.hpp"
#include "cacao/model_format.hpp"

namespace cacao {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// knowledge base

json to_json(const RecommendationEntry& e) {
    return {{"disease", e.disease}, {"treatment", e.treatment}, {"symptoms", e.symptoms}, {"sources", e.sources}};
}

namespace {

std::vector<std::string> text_list(const json& entry, const char* key, const std::string& disease) {
    if (!entry.contains(key) || !entry[key].is_array()) {
        throw Error(ErrorCode::Config, "recommendation '" + disease + "': '" + key + "' must be an array of strings");
    }
    std::vector<std::string> out;
    for (const auto& v : entry[key]) {
        if (!v.is_string() || v.get<std::string>().empty()) {
            throw Error(ErrorCode::Config, "recommendation '" + disease + "': '" + key + "' holds a non-string or empty item");
        }
        out.push_back(v.get<std::string>());
    }
    if (out.empty()) throw Error(ErrorCode::Config, "recommendation '" + disease + "': '" + key + "' is empty");
    return out;
}

}  // namespace

KnowledgeBase KnowledgeBase::parse(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Config, std::string("knowledge base is not valid JSON: ") + e.what());
    }
    if (!j.is_array()) throw Error(ErrorCode::Config, "knowledge base must be a JSON array");
    KnowledgeBase kb;
    for (const auto& entry : j) {
        if (!entry.is_object() || !entry.contains("disease") || !entry["disease"].is_string()) {
            throw Error(ErrorCode::Config, "knowledge base entry lacks a string 'disease'");
        }
        for (const auto& [key, _] : entry.items()) {
            if (key != "disease" && key != "treatment" && key != "symptoms" && key != "sources") {
                throw Error(ErrorCode::Config, "knowledge base entry has unknown field '" + key + "'");
            }
        }
        RecommendationEntry e;
        e.disease = entry["disease"].get<std::string>();
        e.treatment = text_list(entry, "treatment", e.disease);
        e.symptoms = text_list(entry, "symptoms", e.disease);
        e.sources = text_list(entry, "sources", e.disease);
        if (!kb.entries_.emplace(e.disease, e).second) {
            throw Error(ErrorCode::Config, "knowledge base lists '" + e.disease + "' twice");
        }
    }
    return kb;
}

KnowledgeBase KnowledgeBase::load(const fs::path& path) {
    try {
        return parse(read_text(path));
    } catch (const Error& e) {
        if (e.code() == ErrorCode::Io) throw Error(ErrorCode::Config, "cannot read knowledge base " + path.string());
        throw;
    }
}

const RecommendationEntry& KnowledgeBase::lookup(const std::string& label) const {
    auto it = entries_.find(label);
    if (it == entries_.end()) throw Error(ErrorCode::MissingRecommendation, "no recommendation for '" + label + "'");
    return it->second;
}

// ---------------------------------------------------------------------------
// diagnosis json

namespace {

json stage_json(const StageResult& s) {
    return {{"label", s.label}, {"labels", s.labels}, {"confidences", s.confidences}};
}

StageResult stage_from_json(const json& j) {
    return StageResult{j.at("label").get<std::string>(), j.at("labels").get<std::vector<std::string>>(),
                       j.at("confidences").get<std::vector<float>>()};
}

}  // namespace

json to_json(const Diagnosis& d) {
    json j{{"id", d.id},
           {"timestamp", format_utc(d.timestamp_ms)},
           {"timestamp_ms", d.timestamp_ms},
           {"image_ref", d.image_ref},
           {"stage1", stage_json(d.stage1)},
           {"recommendation_key", d.recommendation_key},
           {"model_versions", {{"disease", d.disease_model_digest}, {"level", d.level_model_digest}}}};
    if (d.stage2) j["stage2"] = stage_json(*d.stage2);
    return j;
}

Diagnosis diagnosis_from_json(const json& j) {
    try {
        Diagnosis d;
        d.id = j.at("id").get<std::string>();
        d.timestamp_ms = j.at("timestamp_ms").get<std::int64_t>();
        d.image_ref = j.value("image_ref", "");
        d.stage1 = stage_from_json(j.at("stage1"));
        if (j.contains("stage2") && !j["stage2"].is_null()) d.stage2 = stage_from_json(j["stage2"]);
        d.recommendation_key = j.at("recommendation_key").get<std::string>();
        const auto& mv = j.at("model_versions");
        d.disease_model_digest = mv.value("disease", "");
        d.level_model_digest = mv.value("level", "");
        return d;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Input, std::string("malformed diagnosis record: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// cascade

LoadedModel LoadedModel::load(const fs::path& path) {
    const auto bytes = read_file(path);
    return LoadedModel{deserialize_model(bytes), sha256_hex(bytes), path.string()};
}

LoadedModel LoadedModel::in_memory(Model model) {
    const auto bytes = serialize_model(model);
    return LoadedModel{std::move(model), sha256_hex(bytes), ""};
}

CascadeEngine::CascadeEngine(LoadedModel disease, LoadedModel level, KnowledgeBase kb, std::string trigger)
    : disease_(std::move(disease)), level_(std::move(level)), kb_(std::move(kb)), trigger_(std::move(trigger)) {
    const auto& labels = disease_.model.labels();
    std::vector<std::string> sorted_have = labels, sorted_want = disease_labels();
    std::sort(sorted_have.begin(), sorted_have.end());
    std::sort(sorted_want.begin(), sorted_want.end());
    if (sorted_have != sorted_want) {
        throw Error(ErrorCode::Config, "disease model labels must be exactly black-pod-rot, healthy, pod-borer");
    }
    if (std::find(labels.begin(), labels.end(), trigger_) == labels.end()) {
        throw Error(ErrorCode::Config, "trigger label '" + trigger_ + "' is not a disease model label");
    }
    for (const auto& l : labels) {
        if (!kb_.contains(l)) throw Error(ErrorCode::Config, "knowledge base has no entry for '" + l + "'");
    }
    if (level_.model.labels().empty()) throw Error(ErrorCode::Config, "level model has no labels");
}

CascadeEngine CascadeEngine::load(const fs::path& disease_model, const fs::path& level_model, const fs::path& knowledge_base,
                                  std::string trigger) {
    auto wrap = [](const fs::path& p, const char* what) {
        try {
            return LoadedModel::load(p);
        } catch (const Error& e) {
            throw Error(ErrorCode::Config, std::string("cannot load ") + what + " model " + p.string() + ": " + e.what());
        }
    };
    return CascadeEngine(wrap(disease_model, "disease"), wrap(level_model, "level"), KnowledgeBase::load(knowledge_base),
                         std::move(trigger));
}

Tensor resize_tensor(const Tensor& chw, std::size_t height, std::size_t width) {
    if (chw.rank() != 3) throw Error(ErrorCode::InvalidShape, "resize expects a CHW tensor");
    const std::size_t c = chw.dim(0), ih = chw.dim(1), iw = chw.dim(2);
    if (ih == height && iw == width) return chw;
    Tensor out({c, height, width});
    const double sy = static_cast<double>(ih) / static_cast<double>(height);
    const double sx = static_cast<double>(iw) / static_cast<double>(width);
    for (std::size_t y = 0; y < height; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(ih - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, ih - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < width; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(iw - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, iw - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t k = 0; k < c; ++k) {
                const double top = chw.at(k, y0, x0) * (1 - wx) + chw.at(k, y0, x1) * wx;
                const double bot = chw.at(k, y1, x0) * (1 - wx) + chw.at(k, y1, x1) * wx;
                out.at(k, y, x) = static_cast<float>(top * (1 - wy) + bot * wy);
            }
        }
    }
    return out;
}

namespace {

std::string new_id() {
    static const std::uint64_t salt = [] {
        std::random_device rd;
        return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
    }();
    static std::atomic<std::uint64_t> counter{0};
    // Time prefix, then a process-wide sequence so same-millisecond ids still
    // sort in creation order, then a per-process salt for uniqueness.
    char buf[48];
    std::snprintf(buf, sizeof buf, "%011llx%08llx%08llx", static_cast<unsigned long long>(now_unix_ms()),
                  static_cast<unsigned long long>(counter++ & 0xffffffffULL),
                  static_cast<unsigned long long>(salt & 0xffffffffULL));
    return buf;
}

StageResult classify(const Model& model, const Tensor& image) {
    const auto& arch = model.arch();
    const Tensor x = resize_tensor(image, arch.resolution, arch.resolution);
    const Tensor p = model.forward(x);
    StageResult s;
    s.labels = model.labels();
    s.confidences.assign(p.data().begin(), p.data().end());
    // max_element keeps the first maximum: ties go to the lowest class index.
    const auto best = std::max_element(s.confidences.begin(), s.confidences.end()) - s.confidences.begin();
    s.label = s.labels[static_cast<std::size_t>(best)];
    return s;
}

}  // namespace

Diagnosis CascadeEngine::diagnose(const Tensor& image, std::string image_ref) const {
    if (image.rank() != 3 || image.dim(0) != 3) throw Error(ErrorCode::InvalidShape, "diagnose expects a 3-channel CHW image");
    Diagnosis d;
    d.id = new_id();
    d.timestamp_ms = now_unix_ms();
    d.image_ref = std::move(image_ref);
    d.stage1 = classify(disease_.model, image);
    if (d.stage1.label == trigger_) d.stage2 = classify(level_.model, image);
    d.recommendation_key = d.stage1.label;
    d.disease_model_digest = disease_.digest;
    d.level_model_digest = level_.digest;
    return d;
}

Diagnosis CascadeEngine::diagnose(const Image& image, std::string image_ref) const {
    return diagnose(image_to_tensor(image), std::move(image_ref));
}

// ---------------------------------------------------------------------------
// store

namespace {

constexpr char kRecordMagic[4] = {'C', 'D', 'R', '1'};
constexpr std::size_t kRecordOverhead = 4 + 4 + 1 + 4;

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::vector<std::uint8_t> encode_record(const std::string& payload) {
    std::vector<std::uint8_t> b;
    b.reserve(payload.size() + kRecordOverhead);
    b.insert(b.end(), kRecordMagic, kRecordMagic + 4);
    put_u32(b, static_cast<std::uint32_t>(payload.size()));
    b.push_back(0);  // flags
    b.insert(b.end(), payload.begin(), payload.end());
    put_u32(b, crc32(std::span(b).subspan(4)));
    return b;
}

// Payload of a record at the start of `b` or nullopt when it is damaged.
std::optional<std::string> decode_record(std::span<const std::uint8_t> b) {
    if (b.size() < kRecordOverhead || std::memcmp(b.data(), kRecordMagic, 4) != 0) return std::nullopt;
    const std::uint32_t len = get_u32(b.data() + 4);
    if (len > b.size() - kRecordOverhead) return std::nullopt;
    const std::uint8_t flags = b[8];
    if (flags != 0) return std::nullopt;
    const std::uint32_t crc = get_u32(b.data() + 9 + len);
    if (crc != crc32(b.subspan(4, 5 + len))) return std::nullopt;
    return std::string(reinterpret_cast<const char*>(b.data() + 9), len);
}

}  // namespace

DiagnosisStore::DiagnosisStore(fs::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw Error(ErrorCode::Io, "cannot create store directory " + dir_.string() + ": " + ec.message());
    log_fd_ = ::open((dir_ / "diagnoses.log").c_str(), O_RDWR | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (log_fd_ < 0) throw Error(ErrorCode::Io, "cannot open " + (dir_ / "diagnoses.log").string());
    if (!load_index()) {
        rebuild_index();
        write_index();
    }
}

DiagnosisStore::~DiagnosisStore() {
    if (log_fd_ >= 0) ::close(log_fd_);
}

void DiagnosisStore::insert(IndexEntry e) {
    auto owned = std::make_unique<IndexEntry>(std::move(e));
    const IndexEntry* raw = owned.get();
    by_id_[raw->id] = std::move(owned);
    ordered_.insert(raw);
}

bool DiagnosisStore::load_index() {
    struct stat st{};
    if (::fstat(log_fd_, &st) != 0) throw Error(ErrorCode::Io, "cannot stat diagnosis log");
    const auto log_size = static_cast<std::uint64_t>(st.st_size);
    std::ifstream in(dir_ / "diagnoses.idx");
    if (!in) return log_size == 0;

    std::vector<IndexEntry> entries;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        IndexEntry e;
        if (!(std::getline(ls, e.id, '\t') && ls >> e.offset >> e.length >> e.timestamp_ms)) return false;
        entries.push_back(std::move(e));
    }
    std::uint64_t end = 0;
    for (const auto& e : entries) {
        if (e.offset < end || e.length < kRecordOverhead) return false;
        end = e.offset + e.length;
    }
    if (end != log_size) return false;
    by_id_.clear();
    ordered_.clear();
    for (auto& e : entries) {
        if (by_id_.contains(e.id)) return false;
        insert(std::move(e));
    }
    return true;
}

void DiagnosisStore::rebuild_index() {
    by_id_.clear();
    ordered_.clear();
    const auto log = read_file(dir_ / "diagnoses.log");
    const std::span<const std::uint8_t> all(log);
    std::size_t pos = 0;
    auto resync = [&](std::size_t from) {
        for (std::size_t p = from; p + 4 <= log.size(); ++p)
            if (std::memcmp(log.data() + p, kRecordMagic, 4) == 0) return p;
        return log.size();
    };
    while (pos < log.size()) {
        auto payload = decode_record(all.subspan(pos));
        if (!payload) {
            const std::size_t next = resync(pos + 1);
            std::lock_guard lock(warn_mu_);
            warnings_.push_back("skipped damaged log bytes [" + std::to_string(pos) + ", " + std::to_string(next) + ")");
            pos = next;
            continue;
        }
        const std::uint64_t len = payload->size() + kRecordOverhead;
        try {
            const Diagnosis d = diagnosis_from_json(json::parse(*payload));
            if (by_id_.contains(d.id)) {
                warnings_.push_back("duplicate id " + d.id + " at offset " + std::to_string(pos) + " ignored");
            } else {
                insert(IndexEntry{d.id, pos, len, d.timestamp_ms});
            }
        } catch (const std::exception&) {
            warnings_.push_back("unparseable record at offset " + std::to_string(pos) + " skipped");
        }
        pos += len;
    }
}

void DiagnosisStore::write_index() const {
    std::vector<const IndexEntry*> entries;
    for (const auto& [_, e] : by_id_) entries.push_back(e.get());
    std::sort(entries.begin(), entries.end(), [](auto* a, auto* b) { return a->offset < b->offset; });
    std::string text;
    for (const auto* e : entries) {
        text += e->id + '\t' + std::to_string(e->offset) + '\t' + std::to_string(e->length) + '\t' +
                std::to_string(e->timestamp_ms) + '\n';
    }
    // A scan that skipped damaged bytes leaves the index shorter than the log;
    // the next open then scans again, which keeps the warnings visible.
    write_text_atomic(dir_ / "diagnoses.idx", text);
}

std::string DiagnosisStore::put(const Diagnosis& d) {
    if (d.id.empty() || d.id.find_first_of("\t\n") != std::string::npos) {
        throw Error(ErrorCode::InvalidArgument, "diagnosis id must be non-empty without tabs or newlines");
    }
    const auto record = encode_record(to_json(d).dump());

    std::unique_lock lock(mu_);
    if (by_id_.contains(d.id)) throw Error(ErrorCode::InvalidArgument, "diagnosis " + d.id + " already stored");
    if (::flock(log_fd_, LOCK_EX) != 0) throw Error(ErrorCode::Io, "cannot lock diagnosis log");
    struct Unlock {
        int fd;
        ~Unlock() { ::flock(fd, LOCK_UN); }
    } unlock{log_fd_};

    const off_t offset = ::lseek(log_fd_, 0, SEEK_END);
    std::size_t done = 0;
    while (done < record.size()) {
        const ssize_t n = ::write(log_fd_, record.data() + done, record.size() - done);
        if (n < 0) throw Error(ErrorCode::Io, "append to diagnosis log failed");
        done += static_cast<std::size_t>(n);
    }
    if (::fdatasync(log_fd_) != 0) throw Error(ErrorCode::Io, "fsync of diagnosis log failed");

    IndexEntry e{d.id, static_cast<std::uint64_t>(offset), record.size(), d.timestamp_ms};
    {
        const std::string line = e.id + '\t' + std::to_string(e.offset) + '\t' + std::to_string(e.length) + '\t' +
                                 std::to_string(e.timestamp_ms) + '\n';
        const int fd = ::open((dir_ / "diagnoses.idx").c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
        if (fd >= 0) {
            [[maybe_unused]] auto n = ::write(fd, line.data(), line.size());
            ::close(fd);
        }
    }
    insert(std::move(e));
    return d.id;
}

std::optional<Diagnosis> DiagnosisStore::read_record(const IndexEntry& e) const {
    std::vector<std::uint8_t> buf(e.length);
    const ssize_t n = ::pread(log_fd_, buf.data(), buf.size(), static_cast<off_t>(e.offset));
    if (n != static_cast<ssize_t>(buf.size())) return std::nullopt;
    const auto payload = decode_record(buf);
    if (!payload || payload->size() + kRecordOverhead != e.length) return std::nullopt;
    try {
        Diagnosis d = diagnosis_from_json(json::parse(*payload));
        if (d.id != e.id) return std::nullopt;
        return d;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

Diagnosis DiagnosisStore::get(const std::string& id) const {
    std::shared_lock lock(mu_);
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw Error(ErrorCode::NotFound, "no diagnosis with id " + id);
    auto d = read_record(*it->second);
    if (!d) throw Error(ErrorCode::Corruption, "diagnosis record " + id + " is damaged");
    return std::move(*d);
}

DiagnosisStore::Page DiagnosisStore::list(std::size_t limit, const std::optional<std::string>& before) const {
    std::shared_lock lock(mu_);
    auto it = ordered_.begin();
    if (before) {
        auto found = by_id_.find(*before);
        if (found == by_id_.end()) throw Error(ErrorCode::NotFound, "no diagnosis with id " + *before);
        it = std::next(ordered_.find(found->second.get()));
    }
    Page page;
    const IndexEntry* last = nullptr;
    for (; it != ordered_.end() && page.items.size() < limit; ++it) {
        last = *it;
        if (auto d = read_record(**it)) {
            page.items.push_back(std::move(*d));
        } else {
            std::lock_guard wl(warn_mu_);
            warnings_.push_back("damaged record " + (*it)->id + " skipped");
        }
    }
    if (last && it != ordered_.end()) page.next_before = last->id;
    return page;
}

std::size_t DiagnosisStore::size() const {
    std::shared_lock lock(mu_);
    return by_id_.size();
}

std::vector<std::string> DiagnosisStore::warnings() const {
    std::lock_guard lock(warn_mu_);
    return warnings_;
}

}  // namespace cacao
