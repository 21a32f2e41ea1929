#pragma once

#include <cstddef>
#include <memory>
#include <string>

namespace cacao {

struct ServiceConfig {
    std::string disease_model;
    std::string level_model;
    std::string knowledge_base;
    std::string store_dir;
    std::string trigger = "black-pod-rot";
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    std::size_t max_upload_bytes = 10u << 20;
};

// Local JSON API over the cascade engine and diagnosis store:
//
//   POST /api/diagnose               image upload (multipart field "image" or raw body)
//   GET  /api/history?limit&before   newest-first page
//   GET  /api/history/{id}
//   GET  /api/recommendations/{label}
//   GET  /api/models
//   GET  /api/health
//
// Models, knowledge base and store are opened in the constructor, so a bad
// configuration fails there (Config) and never at request time.
class DiagnosisService {
public:
    explicit DiagnosisService(ServiceConfig cfg);
    ~DiagnosisService();
    DiagnosisService(const DiagnosisService&) = delete;
    DiagnosisService& operator=(const DiagnosisService&) = delete;

    // Binds the listening socket and returns the port actually bound.
    int bind();
    // Serves until stop(); bind() first.
    void run();
    void stop();
    bool running() const;

    const ServiceConfig& config() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace cacao
