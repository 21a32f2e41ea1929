#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "cacao/image.hpp"
#include "cacao/nn.hpp"

namespace cacao {

// ---------------------------------------------------------------------------
// Management recommendations

struct RecommendationEntry {
    std::string disease;
    std::vector<std::string> treatment;
    std::vector<std::string> symptoms;
    std::vector<std::string> sources;

    bool operator==(const RecommendationEntry&) const = default;
};

nlohmann::json to_json(const RecommendationEntry& entry);

class KnowledgeBase {
public:
    KnowledgeBase() = default;

    // JSON array of {"disease", "treatment": [], "symptoms": [], "sources": []}.
    // Throws Config when the schema is violated, a part is empty, or a disease
    // appears twice.
    static KnowledgeBase parse(const std::string& json_text);
    static KnowledgeBase load(const std::filesystem::path& path);

    // Throws MissingRecommendation for an unknown label.
    const RecommendationEntry& lookup(const std::string& label) const;
    bool contains(const std::string& label) const { return entries_.contains(label); }
    std::size_t size() const { return entries_.size(); }

private:
    std::map<std::string, RecommendationEntry> entries_;
};

// ---------------------------------------------------------------------------
// Diagnosis

struct StageResult {
    std::string label;
    std::vector<std::string> labels;  // class-index order
    std::vector<float> confidences;   // softmax over `labels`

    bool operator==(const StageResult&) const = default;
};

struct Diagnosis {
    std::string id;
    std::int64_t timestamp_ms = 0;  // UTC
    std::string image_ref;
    StageResult stage1;
    std::optional<StageResult> stage2;
    std::string recommendation_key;
    std::string disease_model_digest;
    std::string level_model_digest;

    bool operator==(const Diagnosis&) const = default;
};

nlohmann::json to_json(const Diagnosis& d);
Diagnosis diagnosis_from_json(const nlohmann::json& j);

struct LoadedModel {
    Model model;
    std::string digest;  // sha256 of the container file
    std::string path;

    static LoadedModel load(const std::filesystem::path& path);
    static LoadedModel in_memory(Model model);  // digest of its serialized bytes
};

// Two-stage cascade: the disease model always runs; the level model runs only
// when stage 1 yields the trigger label. Immutable after construction and
// safe to share between threads.
class CascadeEngine {
public:
    // Throws Config when the disease labels are not the disease taxonomy,
    // the trigger is not one of them, or a disease label lacks a KB entry.
    CascadeEngine(LoadedModel disease, LoadedModel level, KnowledgeBase kb, std::string trigger = "black-pod-rot");

    static CascadeEngine load(const std::filesystem::path& disease_model, const std::filesystem::path& level_model,
                              const std::filesystem::path& knowledge_base, std::string trigger = "black-pod-rot");

    // `image` is CHW in [0, 1]; it is resized to each model's input as needed.
    Diagnosis diagnose(const Tensor& image, std::string image_ref = {}) const;
    Diagnosis diagnose(const Image& image, std::string image_ref = {}) const;

    const KnowledgeBase& knowledge_base() const { return kb_; }
    const LoadedModel& disease_model() const { return disease_; }
    const LoadedModel& level_model() const { return level_; }
    const std::string& trigger() const { return trigger_; }

private:
    LoadedModel disease_;
    LoadedModel level_;
    KnowledgeBase kb_;
    std::string trigger_;
};

// Bilinear resize of a CHW float tensor.
Tensor resize_tensor(const Tensor& chw, std::size_t height, std::size_t width);

// ---------------------------------------------------------------------------
// Persistence

// Append-only log `diagnoses.log` plus sidecar index `diagnoses.idx`.
//
// Log record: "CDR1" | u32 len | u8 flags | len bytes JSON | u32 crc32(len, flags, payload)
// Index line: id \t offset \t record bytes \t timestamp_ms
//
// The flags byte is reserved (0 = plain JSON payload). A missing or stale
// index is rebuilt by scanning the log; damaged records are skipped with a
// warning and the scan resynchronises on the next record magic.
class DiagnosisStore {
public:
    explicit DiagnosisStore(std::filesystem::path dir);
    ~DiagnosisStore();
    DiagnosisStore(const DiagnosisStore&) = delete;
    DiagnosisStore& operator=(const DiagnosisStore&) = delete;

    // Durable (fsynced) before returning. Throws InvalidArgument on a
    // duplicate id.
    std::string put(const Diagnosis& d);

    // Throws NotFound for an unknown id, Corruption if its record is damaged.
    Diagnosis get(const std::string& id) const;

    struct Page {
        std::vector<Diagnosis> items;  // newest first, ties by id descending
        std::optional<std::string> next_before;
    };
    // Records strictly older than `before` (an id). Damaged records are
    // skipped and noted in warnings().
    Page list(std::size_t limit, const std::optional<std::string>& before = std::nullopt) const;

    std::size_t size() const;
    std::vector<std::string> warnings() const;
    const std::filesystem::path& directory() const { return dir_; }

private:
    struct IndexEntry {
        std::string id;
        std::uint64_t offset = 0;
        std::uint64_t length = 0;
        std::int64_t timestamp_ms = 0;
    };
    struct Newest {
        bool operator()(const IndexEntry* a, const IndexEntry* b) const {
            if (a->timestamp_ms != b->timestamp_ms) return a->timestamp_ms > b->timestamp_ms;
            return a->id > b->id;
        }
    };

    bool load_index();
    void rebuild_index();
    void write_index() const;
    void insert(IndexEntry e);
    std::optional<Diagnosis> read_record(const IndexEntry& e) const;

    std::filesystem::path dir_;
    int log_fd_ = -1;
    mutable std::shared_mutex mu_;
    std::map<std::string, std::unique_ptr<IndexEntry>> by_id_;
    std::set<const IndexEntry*, Newest> ordered_;
    mutable std::vector<std::string> warnings_;
    mutable std::mutex warn_mu_;
};

}  // namespace cacao
