/*
 * C interface to the cacao pod triage library.
 *
 * Every fallible call returns a cacao_status; on failure cacao_last_error()
 * holds a message for the calling thread until its next failing call.
 * Strings returned through char** belong to the caller and are released with
 * cacao_string_free(). Handles are opaque and released with their _free
 * function; passing NULL to any _free function is a no-op.
 */
#ifndef CACAO_H
#define CACAO_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CACAO_API __declspec(dllexport)
#else
#define CACAO_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cacao_status {
    CACAO_OK = 0,
    CACAO_E_INVALID_ARGUMENT = 1,
    CACAO_E_INVALID_SHAPE = 2,
    CACAO_E_SHAPE_MISMATCH = 3,
    CACAO_E_INVALID_VALUE = 4,
    CACAO_E_INVALID_LABEL = 5,
    CACAO_E_IO = 6,
    CACAO_E_NOT_A_MODEL = 7,
    CACAO_E_CORRUPTION = 8,
    CACAO_E_VERSION = 9,
    CACAO_E_VALIDATION = 10,
    CACAO_E_EMPTY_CLASS = 11,
    CACAO_E_STRATIFICATION = 12,
    CACAO_E_MISSING_RECOMMENDATION = 13,
    CACAO_E_NOT_FOUND = 14,
    CACAO_E_CONFIG = 15,
    CACAO_E_INPUT = 16,
    CACAO_E_DIVERGENCE = 17,
    CACAO_E_RESOURCE_LIMIT = 18,
    CACAO_E_INTERNAL = 19
} cacao_status;

typedef struct cacao_model cacao_model;
typedef struct cacao_engine cacao_engine;
typedef struct cacao_store cacao_store;
typedef struct cacao_server cacao_server;

CACAO_API const char* cacao_version(void);
CACAO_API const char* cacao_status_name(cacao_status status);
CACAO_API const char* cacao_last_error(void);
CACAO_API void cacao_string_free(char* s);

/* ---- dataset pipeline ----------------------------------------------------
 * Manifests are JSON-lines files with a "<manifest>.sources.json" sidecar.
 * label lists are comma separated; NULL means "no restriction / default". */

CACAO_API cacao_status cacao_dataset_ingest(const char* root, const char* sources_json, const char* labels,
                                            const char* manifest_out);
CACAO_API cacao_status cacao_dataset_clean(const char* manifest_in, double blur_threshold, size_t min_resolution,
                                           const char* exclusion_list, const char* manifest_out);
CACAO_API cacao_status cacao_dataset_normalize(const char* manifest_in, const char* out_dir, size_t side,
                                               const char* manifest_out);
CACAO_API cacao_status cacao_dataset_split(const char* manifest_in, double test_fraction, uint64_t seed,
                                           const char* manifest_out);
CACAO_API cacao_status cacao_dataset_rebalance(const char* manifest_in, const char* labels, uint64_t seed,
                                               const char* manifest_out);
/* as_json != 0 renders JSON, otherwise an aligned text table. */
CACAO_API cacao_status cacao_dataset_stats(const char* manifest, int as_json, char** out);

/* ---- training ------------------------------------------------------------ */

typedef struct cacao_train_options {
    float learning_rate;
    size_t batch_size;
    size_t max_epochs;
    size_t patience;
    uint64_t seed;
    const char* augmentation; /* "hflip,rotate15,brightness20", "none" or NULL */
    int rebalance;
    double phi;               /* compound scaling coefficient, 0 = base */
    double alpha, beta, gamma;
    size_t resolution;        /* base input side */
    const char* arch_path;    /* arch text file; NULL = built-in base network */
    const char* labels;       /* class order; NULL = sorted labels in the manifest */
} cacao_train_options;

CACAO_API void cacao_train_options_default(cacao_train_options* options);

typedef void (*cacao_epoch_callback)(size_t epoch, double train_acc, double val_acc, double train_loss, int improved,
                                     void* user);

/* Trains on the manifest's train split, validating on its test split. Writes
 * the best-epoch checkpoint and, if history_csv_out is set, the history CSV. */
CACAO_API cacao_status cacao_train(const char* manifest, const cacao_train_options* options,
                                   const char* checkpoint_out, const char* history_csv_out,
                                   cacao_epoch_callback on_epoch, void* user);

/* ---- model containers ---------------------------------------------------- */

CACAO_API cacao_status cacao_convert(const char* checkpoint, const char* container_out);
CACAO_API cacao_status cacao_model_describe(const char* container, char** out);
CACAO_API cacao_status cacao_model_load(const char* container, cacao_model** out);
CACAO_API cacao_status cacao_model_save(const cacao_model* model, const char* container_out);
CACAO_API void cacao_model_free(cacao_model* model);
CACAO_API size_t cacao_model_num_labels(const cacao_model* model);
CACAO_API const char* cacao_model_label(const cacao_model* model, size_t index);
CACAO_API size_t cacao_model_resolution(const cacao_model* model);
/* chw holds 3*height*width floats in [0,1]; the image is resized to the
 * model input. probs receives num_labels values. */
CACAO_API cacao_status cacao_model_predict(const cacao_model* model, const float* chw, size_t height, size_t width,
                                           float* probs, size_t probs_len);

/* ---- evaluation ---------------------------------------------------------- */

/* Any of the three outputs may be NULL. */
CACAO_API cacao_status cacao_evaluate(const cacao_model* model, const char* manifest, char** report_json,
                                      char** report_table, char** confusion_csv);
CACAO_API cacao_status cacao_agreement(const char* csv, const char* trigger, size_t* matches, size_t* total,
                                       double* rate);
CACAO_API double cacao_f1(double precision, double recall);

/* ---- cascade ------------------------------------------------------------- */

CACAO_API cacao_status cacao_engine_load(const char* disease_model, const char* level_model, const char* knowledge_base,
                                         const char* trigger, cacao_engine** out);
CACAO_API void cacao_engine_free(cacao_engine* engine);
CACAO_API cacao_status cacao_engine_diagnose_file(const cacao_engine* engine, const char* image_path,
                                                  char** diagnosis_json);
CACAO_API cacao_status cacao_engine_diagnose_bytes(const cacao_engine* engine, const uint8_t* data, size_t len,
                                                   const char* image_ref, char** diagnosis_json);
CACAO_API cacao_status cacao_engine_recommendation(const cacao_engine* engine, const char* label, char** entry_json);

/* ---- diagnosis store ----------------------------------------------------- */

CACAO_API cacao_status cacao_store_open(const char* dir, cacao_store** out);
CACAO_API void cacao_store_free(cacao_store* store);
CACAO_API cacao_status cacao_store_put(cacao_store* store, const char* diagnosis_json, char** id_out);
CACAO_API cacao_status cacao_store_get(const cacao_store* store, const char* id, char** diagnosis_json);
/* before may be NULL; page_json is {"items": [...], "next_before": id|null}. */
CACAO_API cacao_status cacao_store_list(const cacao_store* store, size_t limit, const char* before, char** page_json);

/* ---- HTTP service -------------------------------------------------------- */

typedef struct cacao_service_config {
    const char* disease_model;
    const char* level_model;
    const char* knowledge_base;
    const char* store_dir;
    const char* trigger; /* NULL = black-pod-rot */
    const char* host;    /* NULL = 127.0.0.1 */
    int port;            /* 0 = any free port */
    size_t max_upload_bytes;
} cacao_service_config;

CACAO_API void cacao_service_config_default(cacao_service_config* config);
CACAO_API cacao_status cacao_server_create(const cacao_service_config* config, cacao_server** out);
CACAO_API cacao_status cacao_server_bind(cacao_server* server, int* port_out);
/* Blocks until cacao_server_stop() is called from another thread or a signal handler. */
CACAO_API cacao_status cacao_server_run(cacao_server* server);
CACAO_API void cacao_server_stop(cacao_server* server);
CACAO_API void cacao_server_free(cacao_server* server);

#ifdef __cplusplus
}
#endif

#endif /* CACAO_H */
