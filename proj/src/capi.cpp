#include "cacao/cacao.h"

#include <cstring>
#include <new>
#include <set>
#include <sstream>

#include "cacao/dataset.hpp"
#include "cacao/diagnose.hpp"
#include "cacao/error.hpp"
#include "cacao/evaluate.hpp"
#include "cacao/io.hpp"
#include "cacao/model_format.hpp"
#include "cacao/server.hpp"
#include "cacao/trainer.hpp"

struct cacao_model {
    cacao::Model model;
};
struct cacao_engine {
    cacao::CascadeEngine engine;
};
struct cacao_store {
    cacao::DiagnosisStore store;
    explicit cacao_store(const std::string& dir) : store(dir) {}
};
struct cacao_server {
    cacao::DiagnosisService service;
    explicit cacao_server(cacao::ServiceConfig cfg) : service(std::move(cfg)) {}
};

namespace {

thread_local std::string last_error;

cacao_status fail(cacao_status status, const std::string& message) {
    last_error = message;
    return status;
}

// Runs `fn`, translating exceptions into status codes.
template <typename Fn>
cacao_status guarded(Fn&& fn) {
    try {
        fn();
        return CACAO_OK;
    } catch (const cacao::Error& e) {
        return fail(static_cast<cacao_status>(e.code()), e.what());
    } catch (const std::bad_alloc&) {
        return fail(CACAO_E_INTERNAL, "out of memory");
    } catch (const std::filesystem::filesystem_error& e) {
        return fail(CACAO_E_IO, e.what());
    } catch (const std::exception& e) {
        return fail(CACAO_E_INTERNAL, e.what());
    }
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

void require(const void* p, const char* what) {
    if (!p) throw cacao::Error(cacao::ErrorCode::InvalidArgument, std::string(what) + " must not be NULL");
}

std::vector<std::string> split_list(const char* csv) {
    std::vector<std::string> out;
    if (!csv) return out;
    std::istringstream in(csv);
    for (std::string tok; std::getline(in, tok, ',');) {
        if (!tok.empty()) out.push_back(tok);
    }
    return out;
}

}  // namespace

extern "C" {

const char* cacao_version(void) { return "1.0.0"; }

const char* cacao_status_name(cacao_status status) {
    if (status == CACAO_OK) return "ok";
    return cacao::to_string(static_cast<cacao::ErrorCode>(status));
}

const char* cacao_last_error(void) { return last_error.c_str(); }

void cacao_string_free(char* s) { std::free(s); }

// ---- dataset ---------------------------------------------------------------

cacao_status cacao_dataset_ingest(const char* root, const char* sources_json, const char* labels, const char* manifest_out) {
    return guarded([&] {
        require(root, "root");
        require(manifest_out, "manifest_out");
        std::vector<cacao::SourceInfo> sources;
        if (sources_json) sources = cacao::read_sources(sources_json);
        cacao::write_manifest(cacao::ingest(root, sources, split_list(labels)), manifest_out);
    });
}

cacao_status cacao_dataset_clean(const char* manifest_in, double blur_threshold, size_t min_resolution,
                                 const char* exclusion_list, const char* manifest_out) {
    return guarded([&] {
        require(manifest_in, "manifest_in");
        require(manifest_out, "manifest_out");
        cacao::CleanOptions opts;
        opts.blur_threshold = blur_threshold;
        opts.min_resolution = min_resolution;
        if (exclusion_list) opts.exclusions = cacao::read_exclusion_list(exclusion_list);
        cacao::write_manifest(cacao::clean(cacao::read_manifest(manifest_in), opts), manifest_out);
    });
}

cacao_status cacao_dataset_normalize(const char* manifest_in, const char* out_dir, size_t side, const char* manifest_out) {
    return guarded([&] {
        require(manifest_in, "manifest_in");
        require(out_dir, "out_dir");
        require(manifest_out, "manifest_out");
        cacao::write_manifest(cacao::normalize(cacao::read_manifest(manifest_in), out_dir, side), manifest_out);
    });
}

cacao_status cacao_dataset_split(const char* manifest_in, double test_fraction, uint64_t seed, const char* manifest_out) {
    return guarded([&] {
        require(manifest_in, "manifest_in");
        require(manifest_out, "manifest_out");
        cacao::write_manifest(cacao::split(cacao::read_manifest(manifest_in), test_fraction, seed), manifest_out);
    });
}

cacao_status cacao_dataset_rebalance(const char* manifest_in, const char* labels, uint64_t seed, const char* manifest_out) {
    return guarded([&] {
        require(manifest_in, "manifest_in");
        require(manifest_out, "manifest_out");
        const auto m = cacao::read_manifest(manifest_in);
        auto lbl = split_list(labels);
        if (lbl.empty()) {
            std::set<std::string> seen;
            for (const auto& r : m.entries)
                if (r.accepted()) seen.insert(r.label);
            lbl.assign(seen.begin(), seen.end());
        }
        cacao::write_manifest(cacao::rebalance(m, lbl, seed), manifest_out);
    });
}

cacao_status cacao_dataset_stats(const char* manifest, int as_json, char** out) {
    return guarded([&] {
        require(manifest, "manifest");
        require(out, "out");
        const auto s = cacao::stats(cacao::read_manifest(manifest));
        *out = dup_string(as_json ? cacao::stats_to_json(s) : cacao::render_stats(s));
    });
}

// ---- training --------------------------------------------------------------

void cacao_train_options_default(cacao_train_options* o) {
    if (!o) return;
    const cacao::TrainConfig cfg;
    const cacao::CompoundScalingConfig sc;
    o->learning_rate = cfg.learning_rate;
    o->batch_size = cfg.batch_size;
    o->max_epochs = cfg.max_epochs;
    o->patience = cfg.patience;
    o->seed = cfg.seed;
    o->augmentation = nullptr;
    o->rebalance = 0;
    o->phi = sc.phi;
    o->alpha = sc.alpha;
    o->beta = sc.beta;
    o->gamma = sc.gamma;
    o->resolution = 64;
    o->arch_path = nullptr;
    o->labels = nullptr;
}

cacao_status cacao_train(const char* manifest, const cacao_train_options* options, const char* checkpoint_out,
                         const char* history_csv_out, cacao_epoch_callback on_epoch, void* user) {
    return guarded([&] {
        require(manifest, "manifest");
        require(checkpoint_out, "checkpoint_out");
        cacao_train_options o;
        cacao_train_options_default(&o);
        if (options) o = *options;

        cacao::DatasetManifest m = cacao::read_manifest(manifest);
        std::vector<std::string> labels = split_list(o.labels);
        if (labels.empty()) {
            std::set<std::string> seen;
            for (const auto& r : m.entries)
                if (r.accepted()) seen.insert(r.label);
            labels.assign(seen.begin(), seen.end());
        }
        if (labels.empty()) throw cacao::Error(cacao::ErrorCode::Input, "manifest has no accepted records");

        cacao::ArchSpec arch = o.arch_path ? cacao::ArchSpec::parse(cacao::read_text(o.arch_path), labels)
                                           : cacao::cacaonet_b0(labels, o.resolution);
        cacao::CompoundScalingConfig sc;
        sc.phi = o.phi;
        sc.alpha = o.alpha;
        sc.beta = o.beta;
        sc.gamma = o.gamma;
        arch = cacao::scale_arch(arch, sc);

        cacao::TrainConfig cfg;
        cfg.learning_rate = o.learning_rate;
        cfg.batch_size = o.batch_size;
        cfg.max_epochs = o.max_epochs;
        cfg.patience = o.patience;
        cfg.seed = o.seed;
        cfg.augmentation = cacao::AugmentFlags::parse(o.augmentation ? o.augmentation : "");
        cfg.validate();
        if (o.rebalance) m = cacao::rebalance(m, labels, o.seed);

        const auto train_set = cacao::load_samples(m, cacao::Split::Train, labels, arch.resolution);
        const auto val_set = cacao::load_samples(m, cacao::Split::Test, labels, arch.resolution);
        if (val_set.empty()) throw cacao::Error(cacao::ErrorCode::Input, "manifest has no test split; run split first");

        cacao::EpochCallback cb;
        if (on_epoch) {
            cb = [&](const cacao::EpochRecord& r, bool improved) {
                on_epoch(r.epoch, r.train_acc, r.val_acc, r.train_loss, improved ? 1 : 0, user);
            };
        }
        const auto result = cacao::train(arch, train_set, val_set, cfg, cb);
        cacao::save_checkpoint(result.model, checkpoint_out);
        if (history_csv_out) cacao::write_text_atomic(history_csv_out, result.history.to_csv());
    });
}

// ---- models ----------------------------------------------------------------

cacao_status cacao_convert(const char* checkpoint, const char* container_out) {
    return guarded([&] {
        require(checkpoint, "checkpoint");
        require(container_out, "container_out");
        cacao::save_model(cacao::load_checkpoint(checkpoint), container_out);
    });
}

cacao_status cacao_model_describe(const char* container, char** out) {
    return guarded([&] {
        require(container, "container");
        require(out, "out");
        *out = dup_string(cacao::describe_container(cacao::inspect_container(cacao::read_file(container))));
    });
}

cacao_status cacao_model_load(const char* container, cacao_model** out) {
    return guarded([&] {
        require(container, "container");
        require(out, "out");
        *out = new cacao_model{cacao::load_model(container)};
    });
}

cacao_status cacao_model_save(const cacao_model* model, const char* container_out) {
    return guarded([&] {
        require(model, "model");
        require(container_out, "container_out");
        cacao::save_model(model->model, container_out);
    });
}

void cacao_model_free(cacao_model* model) { delete model; }

size_t cacao_model_num_labels(const cacao_model* model) { return model ? model->model.labels().size() : 0; }

const char* cacao_model_label(const cacao_model* model, size_t index) {
    if (!model || index >= model->model.labels().size()) return nullptr;
    return model->model.labels()[index].c_str();
}

size_t cacao_model_resolution(const cacao_model* model) { return model ? model->model.arch().resolution : 0; }

cacao_status cacao_model_predict(const cacao_model* model, const float* chw, size_t height, size_t width, float* probs,
                                 size_t probs_len) {
    return guarded([&] {
        require(model, "model");
        require(chw, "chw");
        require(probs, "probs");
        const auto& m = model->model;
        if (probs_len < m.labels().size()) throw cacao::Error(cacao::ErrorCode::InvalidArgument, "probs buffer too small");
        cacao::Tensor img({3, height, width}, std::vector<float>(chw, chw + 3 * height * width));
        const auto res = m.arch().resolution;
        const cacao::Tensor p = m.forward(cacao::resize_tensor(img, res, res));
        std::copy(p.data().begin(), p.data().end(), probs);
    });
}

// ---- evaluation ------------------------------------------------------------

cacao_status cacao_evaluate(const cacao_model* model, const char* manifest, char** report_json, char** report_table,
                            char** confusion_csv) {
    return guarded([&] {
        require(model, "model");
        require(manifest, "manifest");
        const auto report = cacao::evaluate_model(model->model, cacao::read_manifest(manifest));
        if (report_json) *report_json = dup_string(cacao::report_to_json(report));
        if (report_table) *report_table = dup_string(cacao::render_report(report));
        if (confusion_csv) *confusion_csv = dup_string(cacao::confusion_to_csv(report.matrix));
    });
}

cacao_status cacao_agreement(const char* csv, const char* trigger, size_t* matches, size_t* total, double* rate) {
    return guarded([&] {
        require(csv, "csv");
        std::vector<cacao::FieldLabel> app, expert;
        cacao::read_agreement_csv(csv, app, expert);
        const auto r = cacao::agreement(app, expert, trigger ? trigger : "black-pod-rot");
        if (matches) *matches = r.matches;
        if (total) *total = r.total;
        if (rate) *rate = r.rate;
    });
}

double cacao_f1(double precision, double recall) { return cacao::f1_score(precision, recall); }

// ---- cascade ---------------------------------------------------------------

cacao_status cacao_engine_load(const char* disease_model, const char* level_model, const char* knowledge_base,
                               const char* trigger, cacao_engine** out) {
    return guarded([&] {
        require(disease_model, "disease_model");
        require(level_model, "level_model");
        require(knowledge_base, "knowledge_base");
        require(out, "out");
        *out = new cacao_engine{
            cacao::CascadeEngine::load(disease_model, level_model, knowledge_base, trigger ? trigger : "black-pod-rot")};
    });
}

void cacao_engine_free(cacao_engine* engine) { delete engine; }

cacao_status cacao_engine_diagnose_file(const cacao_engine* engine, const char* image_path, char** diagnosis_json) {
    return guarded([&] {
        require(engine, "engine");
        require(image_path, "image_path");
        require(diagnosis_json, "diagnosis_json");
        const auto d = engine->engine.diagnose(cacao::read_image(image_path), image_path);
        *diagnosis_json = dup_string(cacao::to_json(d).dump(2));
    });
}

cacao_status cacao_engine_diagnose_bytes(const cacao_engine* engine, const uint8_t* data, size_t len,
                                         const char* image_ref, char** diagnosis_json) {
    return guarded([&] {
        require(engine, "engine");
        require(data, "data");
        require(diagnosis_json, "diagnosis_json");
        const std::span<const std::uint8_t> bytes(data, len);
        const auto d = engine->engine.diagnose(cacao::decode_image(bytes),
                                               image_ref ? image_ref : "sha256:" + cacao::sha256_hex(bytes));
        *diagnosis_json = dup_string(cacao::to_json(d).dump(2));
    });
}

cacao_status cacao_engine_recommendation(const cacao_engine* engine, const char* label, char** entry_json) {
    return guarded([&] {
        require(engine, "engine");
        require(label, "label");
        require(entry_json, "entry_json");
        *entry_json = dup_string(cacao::to_json(engine->engine.knowledge_base().lookup(label)).dump(2));
    });
}

// ---- store -----------------------------------------------------------------

cacao_status cacao_store_open(const char* dir, cacao_store** out) {
    return guarded([&] {
        require(dir, "dir");
        require(out, "out");
        *out = new cacao_store(dir);
    });
}

void cacao_store_free(cacao_store* store) { delete store; }

cacao_status cacao_store_put(cacao_store* store, const char* diagnosis_json, char** id_out) {
    return guarded([&] {
        require(store, "store");
        require(diagnosis_json, "diagnosis_json");
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(diagnosis_json);
        } catch (const nlohmann::json::exception& e) {
            throw cacao::Error(cacao::ErrorCode::Input, std::string("diagnosis is not valid JSON: ") + e.what());
        }
        const std::string id = store->store.put(cacao::diagnosis_from_json(j));
        if (id_out) *id_out = dup_string(id);
    });
}

cacao_status cacao_store_get(const cacao_store* store, const char* id, char** diagnosis_json) {
    return guarded([&] {
        require(store, "store");
        require(id, "id");
        require(diagnosis_json, "diagnosis_json");
        *diagnosis_json = dup_string(cacao::to_json(store->store.get(id)).dump(2));
    });
}

cacao_status cacao_store_list(const cacao_store* store, size_t limit, const char* before, char** page_json) {
    return guarded([&] {
        require(store, "store");
        require(page_json, "page_json");
        std::optional<std::string> cursor;
        if (before && *before) cursor = before;
        const auto page = store->store.list(limit, cursor);
        nlohmann::json items = nlohmann::json::array();
        for (const auto& d : page.items) items.push_back(cacao::to_json(d));
        nlohmann::json j{{"items", items},
                         {"next_before", page.next_before ? nlohmann::json(*page.next_before) : nlohmann::json()}};
        *page_json = dup_string(j.dump(2));
    });
}

// ---- service ---------------------------------------------------------------

void cacao_service_config_default(cacao_service_config* c) {
    if (!c) return;
    const cacao::ServiceConfig d;
    *c = cacao_service_config{nullptr, nullptr, nullptr, nullptr, nullptr, nullptr, d.port, d.max_upload_bytes};
}

cacao_status cacao_server_create(const cacao_service_config* config, cacao_server** out) {
    return guarded([&] {
        require(config, "config");
        require(out, "out");
        require(config->disease_model, "disease_model");
        require(config->level_model, "level_model");
        require(config->knowledge_base, "knowledge_base");
        require(config->store_dir, "store_dir");
        cacao::ServiceConfig cfg;
        cfg.disease_model = config->disease_model;
        cfg.level_model = config->level_model;
        cfg.knowledge_base = config->knowledge_base;
        cfg.store_dir = config->store_dir;
        if (config->trigger) cfg.trigger = config->trigger;
        if (config->host) cfg.host = config->host;
        cfg.port = config->port;
        if (config->max_upload_bytes) cfg.max_upload_bytes = config->max_upload_bytes;
        *out = new cacao_server(std::move(cfg));
    });
}

cacao_status cacao_server_bind(cacao_server* server, int* port_out) {
    return guarded([&] {
        require(server, "server");
        const int port = server->service.bind();
        if (port_out) *port_out = port;
    });
}

cacao_status cacao_server_run(cacao_server* server) {
    return guarded([&] {
        require(server, "server");
        server->service.run();
    });
}

void cacao_server_stop(cacao_server* server) {
    if (server) server->service.stop();
}

void cacao_server_free(cacao_server* server) { delete server; }

}  // extern "C"
