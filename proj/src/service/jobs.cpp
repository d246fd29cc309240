#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>

#include "phd/service.hpp"

namespace phd::service {

namespace fs = std::filesystem;

ServiceConfig ServiceConfig::from_json(const nlohmann::json& j) {
    ServiceConfig c;
    if (j.contains("checkpoints")) {
        const auto& ck = j["checkpoints"];
        c.backbone = ck.value("backbone", std::string{});
        c.harmonizer = ck.value("harmonizer", std::string{});
        c.embedder = ck.value("embedder", std::string{});
    }
    if (j.contains("sampler")) c.sampler = sampler_from_json(j["sampler"]);
    if (j.contains("bind")) parse_bind(j["bind"].get<std::string>(), c.host, c.port);
    if (j.contains("service")) {
        const auto& s = j["service"];
        c.queue_capacity = s.value("queue_capacity", c.queue_capacity);
        c.static_dir = s.value("static_dir", std::string{});
        c.max_dimension = s.value("max_dimension", c.max_dimension);
    }
    if (c.queue_capacity < 1) throw std::invalid_argument("service.queue_capacity must be >= 1");
    return c;
}

nlohmann::json load_config(const fs::path& path) {
    fs::path p = path;
    if (p.empty()) {
        if (const char* env = std::getenv("PHD_CONFIG"); env && *env) p = env;
    }
    if (p.empty()) return nlohmann::json::object();
    std::ifstream is(p);
    if (!is) throw std::runtime_error("cannot read config " + p.string());
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("config " + p.string() + " is not valid JSON: " + e.what());
    }
}

diffusion::SamplerConfig sampler_from_json(const nlohmann::json& j, diffusion::SamplerConfig base) {
    base.steps = j.value("steps", base.steps);
    base.guidance = j.value("guidance", base.guidance);
    base.eta = j.value("eta", base.eta);
    if (j.contains("kind")) base.kind = diffusion::sampler_kind_from_string(j["kind"].get<std::string>());
    base.seed = j.value("seed", base.seed);
    return base;
}

void parse_bind(const std::string& bind, std::string& host, int& port) {
    const auto colon = bind.rfind(':');
    std::string port_text = bind;
    if (colon != std::string::npos) {
        if (colon > 0) host = bind.substr(0, colon);
        port_text = bind.substr(colon + 1);
    }
    try {
        std::size_t used = 0;
        const int p = std::stoi(port_text, &used);
        if (used != port_text.size() || p < 0 || p > 65535) throw std::invalid_argument("range");
        port = p;
    } catch (const std::exception&) {
        throw std::invalid_argument("bad bind address '" + bind + "' (expected host:port)");
    }
}

pipeline::EditMode parse_edit_mode(const std::string& s) {
    if (s == "full") return pipeline::EditMode::kFull;
    if (s == "i2i") return pipeline::EditMode::kImg2Img;
    if (s == "inpaint") return pipeline::EditMode::kInpaint;
    if (s == "inpaint_null") return pipeline::EditMode::kInpaintNull;
    throw std::invalid_argument("unknown edit mode '" + s + "' (full, i2i, inpaint, inpaint_null)");
}

pipeline::EditOptions edit_options(const diffusion::SamplerConfig& defaults, const EditParams& params) {
    pipeline::EditOptions o;
    o.sampler = defaults;
    if (params.guidance) o.sampler.guidance = *params.guidance;
    if (params.steps) o.sampler.steps = *params.steps;
    o.sampler.seed = params.seed;
    o.mode = params.mode;
    o.disconnect_k = params.disconnect_k;
    if (o.sampler.steps < 1) throw std::invalid_argument("steps must be >= 1");
    if (!(o.sampler.guidance >= 0)) throw std::invalid_argument("guidance weight w must be >= 0");
    return o;
}

RenderedEdit render_edit(const pipeline::ModelBundle& models, const pipeline::EditInputs& inputs,
                         const pipeline::EditOptions& options) {
    const pipeline::EditResult r = pipeline::run_edit(models, inputs, options);
    return {imaging::encode_png(r.image), imaging::encode_png(r.composite.image)};
}

RenderedEdit render_generation(const pipeline::ModelBundle& models, const imaging::Exemplar& exemplar,
                               const std::string& prompt, const pipeline::EditOptions& options) {
    const imaging::Composite c = evalsuite::scene_generation_composite(exemplar, models.resolution());
    const imaging::RasterImage out = evalsuite::scene_generation(exemplar, prompt, models, options);
    return {imaging::encode_png(out), imaging::encode_png(c.image)};
}

imaging::RasterImage limit_dimension(const imaging::RasterImage& image, int max_dim) {
    const int longest = std::max(image.height, image.width);
    if (longest <= max_dim) return image;
    const double s = static_cast<double>(max_dim) / longest;
    const int h = std::max(1, static_cast<int>(std::lround(image.height * s)));
    const int w = std::max(1, static_cast<int>(std::lround(image.width * s)));
    return imaging::resize_bilinear(image, h, w);
}

imaging::BBox parse_bbox(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
        throw InputError("bbox", "bbox is not valid JSON");
    }
    for (const char* key : {"x", "y", "w", "h"}) {
        if (!j.is_object() || !j.contains(key) || !j[key].is_number_integer()) {
            throw InputError("bbox", std::string("bbox needs an integer '") + key + "'");
        }
    }
    const imaging::BBox box = imaging::bbox_from_json(j);
    if (box.w < 1 || box.h < 1) throw InputError("bbox", "bbox width and height must be positive");
    return box;
}

pipeline::EditInputs prepare_inputs(imaging::RasterImage scene, imaging::RasterImage exemplar,
                                    const std::optional<imaging::BinaryMask>& mask,
                                    const std::optional<imaging::BBox>& bbox, std::string prompt, int max_dim) {
    try {
        imaging::validate_scene(scene);
    } catch (const imaging::ImagingError& e) {
        throw InputError("scene", e.what());
    }
    imaging::BinaryMask region;
    if (mask) {
        if (mask->height != scene.height || mask->width != scene.width) {
            throw InputError("mask", "mask is " + std::to_string(mask->width) + "x" + std::to_string(mask->height) +
                                         " but the scene is " + std::to_string(scene.width) + "x" +
                                         std::to_string(scene.height));
        }
        region = *mask;
    } else if (bbox) {
        if (!bbox->within(scene.height, scene.width)) {
            throw InputError("bbox", "bbox {x:" + std::to_string(bbox->x) + ", y:" + std::to_string(bbox->y) +
                                         ", w:" + std::to_string(bbox->w) + ", h:" + std::to_string(bbox->h) +
                                         "} is not inside the " + std::to_string(scene.width) + "x" +
                                         std::to_string(scene.height) + " scene");
        }
        region = imaging::make_mask(*bbox, scene.height, scene.width);
    } else {
        throw InputError("region", "either a mask or a bbox is required");
    }
    if (region.area() == 0) throw InputError(mask ? "mask" : "bbox", "editing area is empty");

    const imaging::RasterImage small = limit_dimension(scene, max_dim);
    if (small.height != scene.height || small.width != scene.width) {
        region = imaging::resize_nearest(region, small.height, small.width);
        if (region.area() == 0) throw InputError("region", "editing area vanishes after downscaling");
    }
    return {small, limit_dimension(exemplar, max_dim), std::nullopt, std::move(region), std::move(prompt)};
}

std::string to_string(JobState state) {
    switch (state) {
        case JobState::kQueued: return "queued";
        case JobState::kRunning: return "running";
        case JobState::kDone: return "done";
        case JobState::kFailed: return "failed";
    }
    return "unknown";
}

nlohmann::json JobSnapshot::to_json() const {
    nlohmann::json j = {{"id", id},
                        {"kind", kind},
                        {"state", to_string(state)},
                        {"progress", {{"done", done}, {"total", total}}}};
    if (state == JobState::kFailed) j["error"] = error;
    if (state == JobState::kDone) j["result"] = "/api/jobs/" + id + "/result";
    return j;
}

JobQueue::JobQueue(int capacity) : capacity_(capacity), salt_(std::random_device{}()) {
    if (capacity < 1) throw std::invalid_argument("queue capacity must be >= 1");
    worker_ = std::thread([this] { run(); });
}

JobQueue::~JobQueue() {
    {
        std::lock_guard lock(mu_);
        stopping_ = true;
    }
    cv_.notify_all();
    worker_.join();
}

std::optional<std::string> JobQueue::submit(const std::string& kind, int total, Work work) {
    std::lock_guard lock(mu_);
    if (static_cast<int>(queue_.size()) >= capacity_) return std::nullopt;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(derive_seed(salt_, counter_++)));
    const std::string id = buf;
    Job job;
    job.snap.id = id;
    job.snap.kind = kind;
    job.snap.total = total;
    job.work = std::move(work);
    jobs_.emplace(id, std::move(job));
    queue_.push_back(id);
    cv_.notify_all();
    return id;
}

std::optional<JobSnapshot> JobQueue::snapshot(const std::string& id) const {
    std::lock_guard lock(mu_);
    const auto it = jobs_.find(id);
    if (it == jobs_.end()) return std::nullopt;
    return it->second.snap;
}

std::optional<std::string> JobQueue::result(const std::string& id) const {
    std::lock_guard lock(mu_);
    const auto it = jobs_.find(id);
    if (it == jobs_.end() || it->second.snap.state != JobState::kDone) return std::nullopt;
    return it->second.output.png;
}

std::optional<std::string> JobQueue::composite(const std::string& id) const {
    std::lock_guard lock(mu_);
    const auto it = jobs_.find(id);
    if (it == jobs_.end() || it->second.snap.state != JobState::kDone) return std::nullopt;
    return it->second.output.composite_png;
}

bool JobQueue::wait(const std::string& id, std::chrono::milliseconds timeout) const {
    std::unique_lock lock(mu_);
    return cv_.wait_for(lock, timeout, [&] {
        const auto it = jobs_.find(id);
        return it == jobs_.end() || it->second.snap.state == JobState::kDone ||
               it->second.snap.state == JobState::kFailed;
    });
}

int JobQueue::pending() const {
    std::lock_guard lock(mu_);
    return static_cast<int>(queue_.size());
}

void JobQueue::run() {
    for (;;) {
        std::string id;
        Work work;
        {
            std::unique_lock lock(mu_);
            cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
            if (stopping_) return;
            id = queue_.front();
            queue_.pop_front();
            Job& job = jobs_.at(id);
            job.snap.state = JobState::kRunning;
            work = std::move(job.work);
        }
        cv_.notify_all();
        const Progress progress = [this, &id](int done, int total) {
            std::lock_guard lock(mu_);
            JobSnapshot& s = jobs_.at(id).snap;
            s.done = std::max(s.done, done);
            s.total = total;
        };
        RenderedEdit out;
        std::string error;
        try {
            out = work(progress);
        } catch (const std::exception& e) {
            error = e.what();
            if (error.empty()) error = "job failed";
        }
        {
            std::lock_guard lock(mu_);
            Job& job = jobs_.at(id);
            if (error.empty()) {
                job.output = std::move(out);
                job.snap.done = job.snap.total;
                job.snap.state = JobState::kDone;
            } else {
                job.snap.error = error;
                job.snap.state = JobState::kFailed;
            }
        }
        cv_.notify_all();
    }
}

}  // namespace phd::service
