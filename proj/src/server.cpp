#include "cacao/server.hpp"

#include <httplib.h>

#include <atomic>
#include <iostream>
#include <optional>

#include "cacao/diagnose.hpp"
#include "cacao/error.hpp"
#include "cacao/image.hpp"
#include "cacao/io.hpp"

namespace cacao {

using nlohmann::json;

namespace {

constexpr std::size_t kMultipartSlack = 64u << 10;
constexpr std::size_t kDefaultPage = 20;
constexpr std::size_t kMaxPage = 100;

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json; charset=utf-8");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
    send_json(res, status, json{{"error", message}});
}

}  // namespace

struct DiagnosisService::Impl {
    ServiceConfig cfg;
    CascadeEngine engine;
    DiagnosisStore store;
    httplib::Server server;
    std::atomic<bool> running{false};

    explicit Impl(ServiceConfig c)
        : cfg(std::move(c)),
          engine(CascadeEngine::load(cfg.disease_model, cfg.level_model, cfg.knowledge_base, cfg.trigger)),
          store(cfg.store_dir) {
        routes();
    }

    json with_recommendation(const Diagnosis& d) const {
        json j = to_json(d);
        j["recommendation"] = to_json(engine.knowledge_base().lookup(d.recommendation_key));
        return j;
    }

    void routes() {
        server.set_payload_max_length(cfg.max_upload_bytes + kMultipartSlack);

        server.set_exception_handler([](const httplib::Request& req, httplib::Response& res, std::exception_ptr ep) {
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                std::cerr << "error: " << req.method << ' ' << req.path << ": " << e.what() << '\n';
            } catch (...) {
                std::cerr << "error: " << req.method << ' ' << req.path << ": unknown exception\n";
            }
            send_error(res, 500, "internal error");
        });

        // Fills in JSON bodies for statuses httplib produces on its own
        // (413 on oversize bodies, 404 on unknown routes).
        server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (!res.body.empty()) return;
            switch (res.status) {
                case 413: send_error(res, 413, "image too large"); break;
                case 404: send_error(res, 404, "not found"); break;
                case 400: send_error(res, 400, "bad request"); break;
                default: send_error(res, res.status, "request failed"); break;
            }
        });

        server.Get("/api/health", [](const httplib::Request&, httplib::Response& res) {
            send_json(res, 200, json{{"status", "ok"}});
        });

        server.Get("/api/models", [this](const httplib::Request&, httplib::Response& res) {
            auto describe = [](const LoadedModel& m) {
                return json{{"digest", m.digest},
                            {"labels", m.model.labels()},
                            {"resolution", m.model.arch().resolution},
                            {"path", m.path}};
            };
            send_json(res, 200,
                      json{{"disease", describe(engine.disease_model())},
                           {"level", describe(engine.level_model())},
                           {"trigger", engine.trigger()}});
        });

        server.Get(R"(/api/recommendations/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            const std::string label = req.matches[1];
            if (!engine.knowledge_base().contains(label)) return send_error(res, 404, "no recommendation for '" + label + "'");
            send_json(res, 200, to_json(engine.knowledge_base().lookup(label)));
        });

        server.Get("/api/history", [this](const httplib::Request& req, httplib::Response& res) {
            std::size_t limit = kDefaultPage;
            if (req.has_param("limit")) {
                const std::string v = req.get_param_value("limit");
                try {
                    std::size_t pos = 0;
                    const long long n = std::stoll(v, &pos);
                    if (pos != v.size() || n < 1) throw std::invalid_argument(v);
                    limit = std::min<std::size_t>(static_cast<std::size_t>(n), kMaxPage);
                } catch (const std::exception&) {
                    return send_error(res, 400, "limit must be a positive integer");
                }
            }
            std::optional<std::string> before;
            if (req.has_param("before") && !req.get_param_value("before").empty()) before = req.get_param_value("before");
            DiagnosisStore::Page page;
            try {
                page = store.list(limit, before);
            } catch (const Error& e) {
                if (e.code() == ErrorCode::NotFound) return send_error(res, 404, "unknown cursor");
                throw;
            }
            json items = json::array();
            for (const auto& d : page.items) items.push_back(with_recommendation(d));
            send_json(res, 200, json{{"items", items}, {"next_before", page.next_before ? json(*page.next_before) : json()}});
        });

        server.Get(R"(/api/history/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            try {
                send_json(res, 200, with_recommendation(store.get(req.matches[1])));
            } catch (const Error& e) {
                if (e.code() == ErrorCode::NotFound) return send_error(res, 404, "no diagnosis with that id");
                throw;
            }
        });

        server.Post("/api/diagnose", [this](const httplib::Request& req, httplib::Response& res) {
            std::string body;
            if (req.is_multipart_form_data()) {
                if (req.has_file("image")) body = req.get_file_value("image").content;
                else if (!req.files.empty()) body = req.files.begin()->second.content;
                else return send_error(res, 400, "multipart upload has no image part");
            } else {
                body = req.body;
            }
            if (body.size() > cfg.max_upload_bytes) return send_error(res, 413, "image too large");
            if (body.empty()) return send_error(res, 400, "empty upload");

            const std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(body.data()), body.size());
            Image image;
            try {
                image = decode_image(bytes);
            } catch (const Error&) {
                return send_error(res, 400, "undecodable image; send PNG or JPEG");
            }
            const Diagnosis d = engine.diagnose(image, "sha256:" + sha256_hex(bytes));
            store.put(d);
            send_json(res, 200, with_recommendation(d));
        });
    }
};

DiagnosisService::DiagnosisService(ServiceConfig cfg) {
    if (cfg.store_dir.empty()) throw Error(ErrorCode::Config, "store directory is required");
    if (cfg.max_upload_bytes == 0) throw Error(ErrorCode::Config, "max upload bytes must be positive");
    try {
        impl_ = std::make_unique<Impl>(std::move(cfg));
    } catch (const Error& e) {
        if (e.code() == ErrorCode::Config) throw;
        throw Error(ErrorCode::Config, e.what());
    }
}

DiagnosisService::~DiagnosisService() {
    if (impl_) impl_->server.stop();
}

int DiagnosisService::bind() {
    auto& s = impl_->server;
    if (impl_->cfg.port == 0) {
        const int port = s.bind_to_any_port(impl_->cfg.host);
        if (port < 0) throw Error(ErrorCode::Io, "cannot bind " + impl_->cfg.host);
        impl_->cfg.port = port;
        return port;
    }
    if (!s.bind_to_port(impl_->cfg.host, impl_->cfg.port)) {
        throw Error(ErrorCode::Io, "cannot bind " + impl_->cfg.host + ":" + std::to_string(impl_->cfg.port));
    }
    return impl_->cfg.port;
}

void DiagnosisService::run() {
    impl_->running = true;
    impl_->server.listen_after_bind();
    impl_->running = false;
}

void DiagnosisService::stop() { impl_->server.stop(); }

bool DiagnosisService::running() const { return impl_->server.is_running(); }

const ServiceConfig& DiagnosisService::config() const { return impl_->cfg; }

}  // namespace cacao
