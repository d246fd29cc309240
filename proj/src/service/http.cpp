// Eigen (via service.hpp) must precede httplib, whose resolver headers define _res.
#include "phd/service.hpp"

#include <httplib.h>

#include <iostream>

namespace phd::service {

namespace {

struct HttpError {
    int status;
    std::string error;
    std::string detail;
    std::string field;
};

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const HttpError& e) {
    nlohmann::json body = {{"error", e.error}, {"detail", e.detail}};
    if (!e.field.empty()) body["field"] = e.field;
    send_json(res, e.status, body);
}

const char* status_name(int status) {
    switch (status) {
        case 400: return "bad_request";
        case 404: return "not_found";
        case 405: return "method_not_allowed";
        case 409: return "not_ready";
        case 413: return "payload_too_large";
        case 429: return "queue_full";
        default: return status >= 500 ? "internal_error" : "error";
    }
}

class Form {
public:
    Form(const httplib::Request& req, std::size_t max_image) : req_(req), max_image_(max_image) {
        if (!req.is_multipart_form_data()) {
            throw HttpError{400, "bad_request", "expected multipart/form-data", "content-type"};
        }
    }

    std::optional<std::string> text(const std::string& name) const {
        if (!req_.has_file(name)) return std::nullopt;
        return req_.get_file_value(name).content;
    }

    std::optional<std::string> image_bytes(const std::string& name) const {
        auto bytes = text(name);
        if (bytes && bytes->size() > max_image_) {
            throw HttpError{413, "payload_too_large",
                            name + " is " + std::to_string(bytes->size()) + " bytes; the limit is " +
                                std::to_string(max_image_),
                            name};
        }
        return bytes;
    }

    imaging::RasterImage image(const std::string& name) const {
        const auto bytes = image_bytes(name);
        if (!bytes) throw HttpError{400, "bad_request", "missing image part '" + name + "'", name};
        try {
            return imaging::decode_png(*bytes);
        } catch (const std::exception& e) {
            throw HttpError{400, "bad_request", name + ": " + e.what(), name};
        }
    }

    template <typename T>
    std::optional<T> number(const std::string& name) const {
        const auto v = text(name);
        if (!v || v->empty()) return std::nullopt;
        try {
            std::size_t used = 0;
            T out{};
            if constexpr (std::is_same_v<T, double>) {
                out = std::stod(*v, &used);
            } else if constexpr (std::is_same_v<T, std::uint64_t>) {
                if (v->front() == '-') throw std::invalid_argument("negative");
                out = std::stoull(*v, &used);
            } else {
                out = std::stoi(*v, &used);
            }
            if (used != v->size()) throw std::invalid_argument("trailing");
            return out;
        } catch (const std::exception&) {
            throw HttpError{400, "bad_request", name + " is not a valid number: '" + *v + "'", name};
        }
    }

private:
    const httplib::Request& req_;
    std::size_t max_image_;
};

}  // namespace

struct HttpService::Impl {
    pipeline::ModelBundle models;
    ServiceConfig config;
    nlohmann::json checksums;
    JobQueue queue;
    httplib::Server server;
    std::thread thread;
    int port = 0;

    Impl(pipeline::ModelBundle m, ServiceConfig c)
        : models(std::move(m)), config(std::move(c)), queue(config.queue_capacity) {
        checksums = {{"backbone", models.backbone->checksum()}};
        if (models.harmonizer) {
            checksums["harmonizer"] = models.harmonizer->checksum();
            checksums["harmonizer_backbone"] = models.harmonizer->backbone_checksum();
        }
        routes();
    }

    // Shared parameter parsing for edit and generate.
    pipeline::EditOptions options_from(const Form& form) const {
        EditParams p;
        p.guidance = form.number<double>("w");
        p.steps = form.number<int>("steps");
        p.seed = form.number<std::uint64_t>("seed").value_or(0);
        p.disconnect_k = form.number<int>("disconnect_k").value_or(-1);
        if (p.steps && *p.steps < 1) throw HttpError{400, "bad_request", "steps must be >= 1", "steps"};
        if (p.guidance && !(*p.guidance >= 0)) throw HttpError{400, "bad_request", "w must be >= 0", "w"};
        if (const auto mode = form.text("mode"); mode && !mode->empty()) {
            try {
                p.mode = parse_edit_mode(*mode);
            } catch (const std::exception& e) {
                throw HttpError{400, "bad_request", e.what(), "mode"};
            }
        }
        if (p.mode == pipeline::EditMode::kFull && !models.harmonizer) {
            throw HttpError{400, "bad_request", "full mode needs a harmonizer checkpoint", "mode"};
        }
        if (p.disconnect_k >= 0) {
            const int k = models.harmonizer ? models.harmonizer->connections() : 0;
            if (p.disconnect_k > k) {
                throw HttpError{400, "bad_request", "disconnect_k must lie in [0, " + std::to_string(k) + "]",
                                "disconnect_k"};
            }
        }
        return edit_options(config.sampler, p);
    }

    void accept(httplib::Response& res, const std::string& kind, int total, JobQueue::Work work) {
        const auto id = queue.submit(kind, total, std::move(work));
        if (!id) {
            throw HttpError{429, "queue_full",
                            "the job queue holds " + std::to_string(config.queue_capacity) + " pending jobs", ""};
        }
        send_json(res, 202, {{"job_id", *id}});
    }

    void post_edit(const httplib::Request& req, httplib::Response& res) {
        const Form form(req, config.max_upload_bytes);
        imaging::RasterImage scene = form.image("scene");
        imaging::RasterImage exemplar = form.image("exemplar");
        std::optional<imaging::BinaryMask> mask;
        std::optional<imaging::BBox> bbox;
        if (const auto m = form.image_bytes("mask")) {
            try {
                mask = imaging::decode_mask_png(*m);
            } catch (const std::exception& e) {
                throw HttpError{400, "bad_request", std::string("mask: ") + e.what(), "mask"};
            }
        } else if (const auto b = form.text("bbox")) {
            bbox = parse_bbox(*b);
        }
        pipeline::EditOptions options = options_from(form);
        pipeline::EditInputs inputs = prepare_inputs(std::move(scene), std::move(exemplar), mask, bbox,
                                                     form.text("prompt").value_or(""), config.max_dimension);
        pipeline::make_composite(inputs);  // surfaces paste errors as 400 before queueing
        const int total = options.sampler.steps;
        accept(res, "edit", total, [this, inputs = std::move(inputs), options](const JobQueue::Progress& progress) {
            pipeline::EditOptions o = options;
            o.progress = progress;
            return render_edit(models, inputs, o);
        });
    }

    void post_generate(const httplib::Request& req, httplib::Response& res) {
        const Form form(req, config.max_upload_bytes);
        const imaging::RasterImage image = limit_dimension(form.image("exemplar"), config.max_dimension);
        imaging::Exemplar exemplar;
        try {
            exemplar = imaging::extract_subject(image, imaging::threshold_matte(image), 0.5f);
        } catch (const std::exception& e) {
            throw HttpError{400, "bad_request", std::string("exemplar: ") + e.what(), "exemplar"};
        }
        const pipeline::EditOptions options = options_from(form);
        const std::string prompt = form.text("prompt").value_or("");
        accept(res, "generate", options.sampler.steps,
               [this, exemplar, prompt, options](const JobQueue::Progress& progress) {
                   pipeline::EditOptions o = options;
                   o.progress = progress;
                   return render_generation(models, exemplar, prompt, o);
               });
    }

    void get_job(const std::string& id, httplib::Response& res) const {
        const auto snap = queue.snapshot(id);
        if (!snap) throw HttpError{404, "not_found", "no job " + id, "id"};
        send_json(res, 200, snap->to_json());
    }

    void get_bytes(const std::string& id, bool composite, httplib::Response& res) const {
        const auto snap = queue.snapshot(id);
        if (!snap) throw HttpError{404, "not_found", "no job " + id, "id"};
        const auto bytes = composite ? queue.composite(id) : queue.result(id);
        if (!bytes) {
            std::string detail = "job is " + to_string(snap->state);
            if (snap->state == JobState::kFailed) detail += ": " + snap->error;
            throw HttpError{409, "not_ready", detail, ""};
        }
        res.status = 200;
        res.set_content(*bytes, "image/png");
    }

    template <typename F>
    httplib::Server::Handler guarded(F f) {
        return [f](const httplib::Request& req, httplib::Response& res) {
            try {
                f(req, res);
            } catch (const HttpError& e) {
                send_error(res, e);
            } catch (const InputError& e) {
                send_error(res, {400, "bad_request", e.what(), e.field()});
            } catch (const imaging::ImagingError& e) {
                send_error(res, {400, "bad_request", e.what(), "region"});
            } catch (const std::invalid_argument& e) {
                send_error(res, {400, "bad_request", e.what(), ""});
            } catch (const std::exception& e) {
                send_error(res, {500, "internal_error", e.what(), ""});
            }
        };
    }

    void routes() {
        server.set_payload_max_length(4 * config.max_upload_bytes + (1u << 20));
        server.Post("/api/edit", guarded([this](const auto& req, auto& res) { post_edit(req, res); }));
        server.Post("/api/generate", guarded([this](const auto& req, auto& res) { post_generate(req, res); }));
        server.Get(R"(/api/jobs/([^/]+))",
                   guarded([this](const auto& req, auto& res) { get_job(req.matches[1], res); }));
        server.Get(R"(/api/jobs/([^/]+)/result)",
                   guarded([this](const auto& req, auto& res) { get_bytes(req.matches[1], false, res); }));
        server.Get(R"(/api/jobs/([^/]+)/composite)",
                   guarded([this](const auto& req, auto& res) { get_bytes(req.matches[1], true, res); }));
        server.Get("/api/health", guarded([this](const auto&, auto& res) {
                       send_json(res, 200, {{"status", "ok"}, {"model_checksums", checksums}});
                   }));
        if (!config.static_dir.empty() && std::filesystem::is_directory(config.static_dir)) {
            server.set_mount_point("/ui", config.static_dir.string());
        }
        server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
            if (res.body.empty()) send_error(res, {res.status, status_name(res.status), req.method + " " + req.path, ""});
        });
    }
};

HttpService::HttpService(pipeline::ModelBundle models, ServiceConfig config)
    : impl_(std::make_unique<Impl>(std::move(models), std::move(config))) {}

HttpService::~HttpService() { stop(); }

int HttpService::start() {
    Impl& d = *impl_;
    if (d.config.port == 0) {
        d.port = d.server.bind_to_any_port(d.config.host);
    } else {
        d.port = d.server.bind_to_port(d.config.host, d.config.port) ? d.config.port : -1;
    }
    if (d.port < 0) throw std::runtime_error("cannot bind " + d.config.host + ":" + std::to_string(d.config.port));
    d.thread = std::thread([&d] { d.server.listen_after_bind(); });
    d.server.wait_until_ready();
    return d.port;
}

void HttpService::stop() {
    if (!impl_) return;
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

void HttpService::serve_forever() {
    const int port = start();
    std::cerr << "serving on http://" << impl_->config.host << ":" << port << "\n";
    impl_->thread.join();
}

JobQueue& HttpService::jobs() { return impl_->queue; }

}  // namespace phd::service
