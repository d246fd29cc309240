#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <thread>

#include "phd/evalsuite.hpp"
#include "phd/pipeline.hpp"

// CLI entry points and the HTTP job service.
namespace phd::service {

// Shared JSON config: {checkpoints:{backbone, harmonizer, embedder}, schedule,
// sampler, bind, service:{queue_capacity, static_dir}}, plus per-stage blocks
// (spec, corpus, pretrain, train, embedder) read by the CLI.
struct ServiceConfig {
    std::filesystem::path backbone;
    std::filesystem::path harmonizer;
    std::filesystem::path embedder;
    diffusion::SamplerConfig sampler;
    std::string host = "127.0.0.1";
    int port = 8080;
    int queue_capacity = 32;
    std::size_t max_upload_bytes = 4u << 20;
    int max_dimension = 1024;
    std::filesystem::path static_dir;

    static ServiceConfig from_json(const nlohmann::json& j);
};

// Reads `path`, or $PHD_CONFIG when `path` is empty; {} when neither is set.
nlohmann::json load_config(const std::filesystem::path& path);

diffusion::SamplerConfig sampler_from_json(const nlohmann::json& j, diffusion::SamplerConfig base = {});

// "host:port", ":port" or "port".
void parse_bind(const std::string& bind, std::string& host, int& port);

// User-level parameters shared by the CLI and the HTTP API; unset fields
// fall back to the configured sampler defaults.
struct EditParams {
    std::string prompt;
    std::optional<double> guidance;
    std::optional<int> steps;
    std::uint64_t seed = 0;
    int disconnect_k = -1;
    pipeline::EditMode mode = pipeline::EditMode::kFull;
};

pipeline::EditMode parse_edit_mode(const std::string& s);
pipeline::EditOptions edit_options(const diffusion::SamplerConfig& defaults, const EditParams& params);

struct RenderedEdit {
    std::string png;
    std::string composite_png;
};

RenderedEdit render_edit(const pipeline::ModelBundle& models, const pipeline::EditInputs& inputs,
                         const pipeline::EditOptions& options);
RenderedEdit render_generation(const pipeline::ModelBundle& models, const imaging::Exemplar& exemplar,
                               const std::string& prompt, const pipeline::EditOptions& options);

// Bilinear downscale so that neither side exceeds max_dim (aspect kept).
imaging::RasterImage limit_dimension(const imaging::RasterImage& image, int max_dim);

// Rejected request input, tagged with the offending field.
class InputError : public std::invalid_argument {
public:
    InputError(std::string field, const std::string& detail)
        : std::invalid_argument(detail), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

// Validates the region against the scene as given (mask PNG or bbox), then
// downscales scene, exemplar and mask together to max_dim. Used by both the
// CLI and the HTTP API so the two produce identical edits.
pipeline::EditInputs prepare_inputs(imaging::RasterImage scene, imaging::RasterImage exemplar,
                                    const std::optional<imaging::BinaryMask>& mask,
                                    const std::optional<imaging::BBox>& bbox, std::string prompt, int max_dim);

// {"x","y","w","h"} with a field-level error on malformed input.
imaging::BBox parse_bbox(const std::string& text);

enum class JobState { kQueued, kRunning, kDone, kFailed };
std::string to_string(JobState state);

struct JobSnapshot {
    std::string id;
    std::string kind;
    JobState state = JobState::kQueued;
    int done = 0;
    int total = 0;
    std::string error;

    nlohmann::json to_json() const;
};

// FIFO queue drained by one worker thread. `capacity` bounds the jobs that
// are waiting (the running one is not counted).
class JobQueue {
public:
    using Progress = std::function<void(int done, int total)>;
    using Work = std::function<RenderedEdit(const Progress& progress)>;

    explicit JobQueue(int capacity);
    ~JobQueue();
    JobQueue(const JobQueue&) = delete;
    JobQueue& operator=(const JobQueue&) = delete;

    // nullopt when the queue is full.
    std::optional<std::string> submit(const std::string& kind, int total, Work work);
    std::optional<JobSnapshot> snapshot(const std::string& id) const;
    // Bytes of a finished job; nullopt until done.
    std::optional<std::string> result(const std::string& id) const;
    std::optional<std::string> composite(const std::string& id) const;
    // Blocks until the job is done or failed, or the timeout passes.
    bool wait(const std::string& id, std::chrono::milliseconds timeout) const;
    int pending() const;

private:
    struct Job {
        JobSnapshot snap;
        Work work;
        RenderedEdit output;
    };
    void run();

    int capacity_;
    mutable std::mutex mu_;
    mutable std::condition_variable cv_;
    std::map<std::string, Job> jobs_;
    std::deque<std::string> queue_;
    std::uint64_t counter_ = 0;
    std::uint64_t salt_;
    bool stopping_ = false;
    std::thread worker_;
};

class HttpService {
public:
    HttpService(pipeline::ModelBundle models, ServiceConfig config);
    ~HttpService();

    // Binds and serves on a background thread; returns the bound port
    // (pass port 0 in the config for an ephemeral one).
    int start();
    void stop();
    // Blocks until stop() or a signal.
    void serve_forever();

    JobQueue& jobs();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Exit codes: 0 success, 1 runtime failure, 2 usage error.
int run_cli(int argc, char** argv);

}  // namespace phd::service
