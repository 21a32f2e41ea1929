// Command-line driver over the C API.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "cacao/cacao.h"

namespace fs = std::filesystem;

namespace {

constexpr int kExitDomain = 1;
constexpr int kExitUsage = 2;

struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void check(cacao_status st) {
    if (st != CACAO_OK) {
        throw DomainError(std::string(cacao_status_name(st)) + ": " + cacao_last_error());
    }
}

// Takes ownership of a string returned by the library.
std::string take(char* s) {
    std::string out = s ? s : "";
    cacao_string_free(s);
    return out;
}

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Global settings resolved as flag > CACAO_* environment > config file.
struct Globals {
    std::optional<std::string> models_dir, kb, store, bind, config;
    std::optional<std::uint64_t> seed;

    nlohmann::json file;

    void load_config() {
        if (!config) {
            if (const char* e = std::getenv("CACAO_CONFIG")) config = e;
        }
        if (!config) return;
        std::ifstream in(*config);
        if (!in) throw UsageError("cannot read config file " + *config);
        try {
            file = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw UsageError("config file " + *config + " is not valid JSON: " + e.what());
        }
        if (!file.is_object()) throw UsageError("config file " + *config + " must hold a JSON object");
    }

    std::optional<std::string> resolve(const std::optional<std::string>& flag, const char* env, const char* key) const {
        if (flag) return flag;
        if (const char* v = std::getenv(env)) return std::string(v);
        if (file.contains(key)) {
            const auto& v = file[key];
            return v.is_string() ? v.get<std::string>() : v.dump();
        }
        return std::nullopt;
    }

    std::string require(const std::optional<std::string>& flag, const char* env, const char* key,
                        const char* flag_name) const {
        auto v = resolve(flag, env, key);
        if (!v) throw UsageError(std::string("missing ") + flag_name + " (or " + env + ", or \"" + key + "\" in --config)");
        return *v;
    }

    std::uint64_t resolved_seed(std::uint64_t fallback) const {
        if (seed) return *seed;
        const auto v = resolve(std::nullopt, "CACAO_SEED", "seed");
        if (!v) return fallback;
        try {
            std::size_t pos = 0;
            const auto n = std::stoull(*v, &pos);
            if (pos != v->size()) throw std::invalid_argument(*v);
            return n;
        } catch (const std::exception&) {
            throw UsageError("seed must be a non-negative integer, got '" + *v + "'");
        }
    }

    std::string models_path(const char* file_name) const {
        return (fs::path(require(models_dir, "CACAO_MODELS_DIR", "models_dir", "--models-dir")) / file_name).string();
    }
};

cacao_server* g_server = nullptr;

extern "C" void on_signal(int) {
    if (g_server) cacao_server_stop(g_server);
}

const char* opt_cstr(const std::string& s) { return s.empty() ? nullptr : s.c_str(); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cacao: pod disease triage pipeline"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for all subcommands");

    Globals g;
    std::string models_dir, kb, store, bind, config;
    std::uint64_t seed = 0;
    auto* o_models = app.add_option("--models-dir", models_dir, "Directory holding disease.cdm and level.cdm");
    auto* o_kb = app.add_option("--kb", kb, "Knowledge-base JSON");
    auto* o_store = app.add_option("--store", store, "Diagnosis store directory");
    auto* o_bind = app.add_option("--bind", bind, "host:port for serve (default 127.0.0.1:8080)");
    auto* o_seed = app.add_option("--seed", seed, "Random seed");
    auto* o_config = app.add_option("--config", config, "JSON config file");
    for (auto* o : {o_models, o_kb, o_store, o_bind, o_seed, o_config}) o->configurable(false);
    app.fallthrough();

    // ingest
    std::string ing_root, ing_sources, ing_labels, ing_out;
    auto* c_ingest = app.add_subcommand("ingest", "Record raw images from <root>/<source>/<label>/");
    c_ingest->add_option("root", ing_root, "Raw image root")->required()->check(CLI::ExistingDirectory);
    c_ingest->add_option("-o,--output", ing_out, "Manifest to write")->required();
    c_ingest->add_option("--sources", ing_sources, "Sources JSON [{id, place, date}]")->check(CLI::ExistingFile);
    c_ingest->add_option("--labels", ing_labels, "Comma-separated label set");

    // clean
    std::string cl_in, cl_out, cl_excl;
    double cl_blur = 100.0;
    std::size_t cl_minres = 0;
    auto* c_clean = app.add_subcommand("clean", "Reject foreign, unlabeled, low-resolution and blurred images");
    c_clean->add_option("manifest", cl_in)->required()->check(CLI::ExistingFile);
    c_clean->add_option("-o,--output", cl_out)->required();
    c_clean->add_option("--blur-threshold", cl_blur, "Minimum Laplacian variance")->capture_default_str();
    c_clean->add_option("--min-resolution", cl_minres, "Minimum shorter side in pixels")->capture_default_str();
    c_clean->add_option("--exclude", cl_excl, "File listing foreign images, one per line")->check(CLI::ExistingFile);

    // normalize
    std::string nm_in, nm_out, nm_dir;
    std::size_t nm_size = 64;
    auto* c_norm = app.add_subcommand("normalize", "Resize accepted images and rename them per label");
    c_norm->add_option("manifest", nm_in)->required()->check(CLI::ExistingFile);
    c_norm->add_option("--out-dir", nm_dir, "Directory for normalized images")->required();
    c_norm->add_option("-o,--output", nm_out)->required();
    c_norm->add_option("--size", nm_size, "Output side in pixels")->capture_default_str();

    // split
    std::string sp_in, sp_out;
    double sp_frac = 0.15;
    auto* c_split = app.add_subcommand("split", "Stratified train/test split");
    c_split->add_option("manifest", sp_in)->required()->check(CLI::ExistingFile);
    c_split->add_option("-o,--output", sp_out)->required();
    c_split->add_option("--test-fraction", sp_frac)->capture_default_str()->check(CLI::Range(0.0, 1.0));

    // stats
    std::string st_in;
    bool st_json = false;
    auto* c_stats = app.add_subcommand("stats", "Per-source and per-label counts");
    c_stats->add_option("manifest", st_in)->required()->check(CLI::ExistingFile);
    c_stats->add_flag("--json", st_json, "Emit JSON");

    // train
    std::string tr_in, tr_ckpt, tr_hist, tr_aug, tr_arch, tr_labels;
    float tr_lr = 0.01f;
    std::size_t tr_batch = 16, tr_epochs = 30, tr_patience = 3, tr_res = 64;
    double tr_phi = 0.0;
    bool tr_rebalance = false, tr_quiet = false;
    auto* c_train = app.add_subcommand("train", "Train a classifier on a split manifest");
    c_train->add_option("manifest", tr_in)->required()->check(CLI::ExistingFile);
    c_train->add_option("-o,--output", tr_ckpt, "Checkpoint to write")->required();
    c_train->add_option("--history", tr_hist, "Per-epoch history CSV");
    c_train->add_option("--lr", tr_lr)->capture_default_str();
    c_train->add_option("--batch-size", tr_batch)->capture_default_str();
    c_train->add_option("--epochs", tr_epochs, "Maximum epochs")->capture_default_str();
    auto* o_patience = c_train->add_option("--patience", tr_patience, "Epochs without improvement before halting (at most --epochs)")
                           ->capture_default_str();
    c_train->add_option("--augment", tr_aug, "hflip,rotate15,brightness20 or none");
    c_train->add_flag("--rebalance", tr_rebalance, "Oversample minority classes");
    c_train->add_option("--phi", tr_phi, "Compound scaling coefficient")->capture_default_str();
    c_train->add_option("--resolution", tr_res, "Base input side")->capture_default_str();
    c_train->add_option("--arch", tr_arch, "Architecture text file")->check(CLI::ExistingFile);
    c_train->add_option("--labels", tr_labels, "Comma-separated class order");
    c_train->add_flag("-q,--quiet", tr_quiet, "No per-epoch output");

    // convert / describe
    std::string cv_in, cv_out;
    auto* c_convert = app.add_subcommand("convert", "Convert a checkpoint to a deployable container");
    c_convert->add_option("checkpoint", cv_in)->required()->check(CLI::ExistingFile);
    c_convert->add_option("output", cv_out)->required();
    std::string ds_in;
    auto* c_describe = app.add_subcommand("describe", "Print a container header");
    c_describe->add_option("model", ds_in)->required()->check(CLI::ExistingFile);

    // eval
    std::string ev_model, ev_in, ev_conf;
    bool ev_json = false;
    auto* c_eval = app.add_subcommand("eval", "Evaluate a container on the test split");
    c_eval->add_option("model", ev_model)->required()->check(CLI::ExistingFile);
    c_eval->add_option("manifest", ev_in)->required()->check(CLI::ExistingFile);
    c_eval->add_flag("--json", ev_json, "Emit JSON");
    c_eval->add_option("--confusion", ev_conf, "Write the confusion matrix CSV here");

    // agreement
    std::string ag_in, ag_trigger = "black-pod-rot";
    auto* c_agree = app.add_subcommand("agreement", "Agreement between app and expert labels");
    c_agree->add_option("csv", ag_in, "app_label,app_level,expert_label,expert_level")->required()->check(CLI::ExistingFile);
    c_agree->add_option("--trigger", ag_trigger)->capture_default_str();

    // diagnose
    std::string dg_image, dg_trigger;
    auto* c_diag = app.add_subcommand("diagnose", "Diagnose one image and record it");
    c_diag->add_option("image", dg_image)->required()->check(CLI::ExistingFile);
    c_diag->add_option("--trigger", dg_trigger, "Label that invokes the level model");

    // serve
    std::size_t sv_max = 0;
    auto* c_serve = app.add_subcommand("serve", "Run the local HTTP service");
    c_serve->add_option("--max-upload-bytes", sv_max, "Upload limit (default 10 MiB)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    }

    try {
        if (o_models->count()) g.models_dir = models_dir;
        if (o_kb->count()) g.kb = kb;
        if (o_store->count()) g.store = store;
        if (o_bind->count()) g.bind = bind;
        if (o_seed->count()) g.seed = seed;
        if (o_config->count()) g.config = config;
        g.load_config();

        if (*c_ingest) {
            check(cacao_dataset_ingest(ing_root.c_str(), opt_cstr(ing_sources), opt_cstr(ing_labels), ing_out.c_str()));
        } else if (*c_clean) {
            check(cacao_dataset_clean(cl_in.c_str(), cl_blur, cl_minres, opt_cstr(cl_excl), cl_out.c_str()));
        } else if (*c_norm) {
            check(cacao_dataset_normalize(nm_in.c_str(), nm_dir.c_str(), nm_size, nm_out.c_str()));
        } else if (*c_split) {
            check(cacao_dataset_split(sp_in.c_str(), sp_frac, g.resolved_seed(42), sp_out.c_str()));
        } else if (*c_stats) {
            char* out = nullptr;
            check(cacao_dataset_stats(st_in.c_str(), st_json ? 1 : 0, &out));
            std::cout << take(out);
            if (st_json) std::cout << '\n';
        } else if (*c_train) {
            cacao_train_options o;
            cacao_train_options_default(&o);
            o.learning_rate = tr_lr;
            o.batch_size = tr_batch;
            o.max_epochs = tr_epochs;
            // An unset patience follows a short --epochs down; an explicit one is validated as given.
            o.patience = o_patience->count() ? tr_patience : std::min(tr_patience, tr_epochs);
            o.seed = g.resolved_seed(o.seed);
            o.augmentation = opt_cstr(tr_aug);
            o.rebalance = tr_rebalance ? 1 : 0;
            o.phi = tr_phi;
            o.resolution = tr_res;
            o.arch_path = opt_cstr(tr_arch);
            o.labels = opt_cstr(tr_labels);
            auto report = [](std::size_t epoch, double tr, double va, double loss, int improved, void*) {
                std::fprintf(stderr, "epoch %3zu  loss %.4f  train_acc %.4f  val_acc %.4f%s\n", epoch, loss, tr, va,
                             improved ? "  *" : "");
            };
            check(cacao_train(tr_in.c_str(), &o, tr_ckpt.c_str(), opt_cstr(tr_hist),
                              tr_quiet ? nullptr : +report, nullptr));
        } else if (*c_convert) {
            check(cacao_convert(cv_in.c_str(), cv_out.c_str()));
        } else if (*c_describe) {
            char* out = nullptr;
            check(cacao_model_describe(ds_in.c_str(), &out));
            std::cout << take(out);
        } else if (*c_eval) {
            cacao_model* m = nullptr;
            check(cacao_model_load(ev_model.c_str(), &m));
            char *js = nullptr, *table = nullptr, *csv = nullptr;
            const cacao_status st = cacao_evaluate(m, ev_in.c_str(), &js, &table, &csv);
            cacao_model_free(m);
            check(st);
            const std::string j = take(js), t = take(table), c = take(csv);
            std::cout << (ev_json ? j + "\n" : t);
            if (!ev_conf.empty()) {
                std::ofstream f(ev_conf);
                f << c;
                if (!f) throw DomainError("io: cannot write " + ev_conf);
            }
        } else if (*c_agree) {
            std::size_t matches = 0, total = 0;
            double rate = 0.0;
            check(cacao_agreement(ag_in.c_str(), ag_trigger.c_str(), &matches, &total, &rate));
            std::printf("agreement %zu/%zu = %.4f\n", matches, total, rate);
        } else if (*c_diag) {
            const std::string disease = g.models_path("disease.cdm"), level = g.models_path("level.cdm");
            const std::string kb_path = g.require(g.kb, "CACAO_KB", "kb", "--kb");
            const std::string store_dir = g.require(g.store, "CACAO_STORE", "store", "--store");
            cacao_engine* engine = nullptr;
            check(cacao_engine_load(disease.c_str(), level.c_str(), kb_path.c_str(), opt_cstr(dg_trigger), &engine));
            char* js = nullptr;
            cacao_status st = cacao_engine_diagnose_file(engine, dg_image.c_str(), &js);
            cacao_engine_free(engine);
            check(st);
            const std::string diagnosis = take(js);
            cacao_store* s = nullptr;
            check(cacao_store_open(store_dir.c_str(), &s));
            st = cacao_store_put(s, diagnosis.c_str(), nullptr);
            cacao_store_free(s);
            check(st);
            std::cout << diagnosis << '\n';
        } else if (*c_serve) {
            cacao_service_config cfg;
            cacao_service_config_default(&cfg);
            const std::string disease = g.models_path("disease.cdm"), level = g.models_path("level.cdm");
            const std::string kb_path = g.require(g.kb, "CACAO_KB", "kb", "--kb");
            const std::string store_dir = g.require(g.store, "CACAO_STORE", "store", "--store");
            std::string host = "127.0.0.1";
            if (auto b = g.resolve(g.bind, "CACAO_BIND", "bind")) {
                const auto colon = b->rfind(':');
                try {
                    if (colon == std::string::npos) {
                        cfg.port = std::stoi(*b);
                    } else {
                        host = b->substr(0, colon);
                        cfg.port = std::stoi(b->substr(colon + 1));
                    }
                } catch (const std::exception&) {
                    throw UsageError("--bind must be host:port or port, got '" + *b + "'");
                }
                if (cfg.port < 0 || cfg.port > 65535) throw UsageError("port out of range in --bind");
            }
            cfg.disease_model = disease.c_str();
            cfg.level_model = level.c_str();
            cfg.knowledge_base = kb_path.c_str();
            cfg.store_dir = store_dir.c_str();
            cfg.host = host.c_str();
            if (sv_max) cfg.max_upload_bytes = sv_max;

            cacao_server* server = nullptr;
            check(cacao_server_create(&cfg, &server));
            int port = 0;
            if (const cacao_status st = cacao_server_bind(server, &port); st != CACAO_OK) {
                cacao_server_free(server);
                check(st);
            }
            g_server = server;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::cerr << "listening on http://" << host << ':' << port << std::endl;
            const cacao_status st = cacao_server_run(server);
            g_server = nullptr;
            cacao_server_free(server);
            check(st);
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const DomainError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitDomain;
    }
    return 0;
}
