#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "phd/backbone.hpp"
#include "phd/core/optim.hpp"
#include "phd/datasetgen.hpp"
#include "phd/harmonizer.hpp"

namespace phd::training {

class FrozenViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

struct LossRecord {
    int step = 0;
    double loss = 0;
    double loss_ma100 = 0;
    double lr = 0;
};

struct TrainConfig {
    double lr = 1e-4;
    int batch = 8;
    int steps = 5000;
    int warmup = 0;
    AdamWConfig optimizer;
    double cfg_dropout = 0.5;
    // Also blanks the composite condition whenever the text is dropped.
    bool image_dropout = false;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;  // 0 = only at the end (when a path is set)
    std::filesystem::path checkpoint_path;
    std::filesystem::path loss_csv;
    int log_every = 0;
    // Called after every optimizer step; not serialized.
    std::function<void(const LossRecord&)> on_step;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

// One minibatch of the training objective.
struct Batch {
    Tensor target;     // [N,3,H,W] in [-1,1]
    Tensor condition;  // [N,4,H,W]
    std::vector<TextCondition> text;
    std::vector<int> t;
    Tensor eps;  // [N,3,H,W]
};

// Noise predictor seen by the loss; lets tests substitute stubs.
class NoiseModel {
public:
    virtual ~NoiseModel() = default;
    virtual bool backbone_frozen() const = 0;
    virtual Var predict(const Var& x_t, std::span<const int> t, const std::vector<TextCondition>& text,
                        const Tensor& condition) const = 0;
};

// eps_theta(x_t, t, text, F_phi(composite)) with the frozen backbone.
class PhdModel : public NoiseModel {
public:
    PhdModel(const backbone::Backbone& backbone, const harmonizer::Harmonizer& harmonizer)
        : backbone_(&backbone), harmonizer_(&harmonizer) {}
    bool backbone_frozen() const override { return backbone_->frozen(); }
    Var predict(const Var& x_t, std::span<const int> t, const std::vector<TextCondition>& text,
                const Tensor& condition) const override;

private:
    const backbone::Backbone* backbone_;
    const harmonizer::Harmonizer* harmonizer_;
};

// Per-item forward noising of the batch targets.
Tensor noised_batch(const Batch& batch, const diffusion::NoiseSchedule& schedule);

// Mean squared error between eps and the model prediction at x_t.
Var phd_loss(const NoiseModel& model, const Batch& batch, const diffusion::NoiseSchedule& schedule);

TextCondition cfg_dropout(const TextCondition& text, double probability, Rng& rng);

struct TrainResult {
    std::vector<LossRecord> history;
};

// Draws a batch: items uniformly with replacement, t uniform on [1,T],
// standard-normal eps, text dropped with cfg_dropout.
Batch draw_batch(const std::vector<datasetgen::LoadedSample>& data, const diffusion::NoiseSchedule& schedule,
                 const TrainConfig& config, Rng& rng);

TrainResult train_harmonizer(harmonizer::Harmonizer& phi, const backbone::Backbone& backbone,
                             const std::vector<datasetgen::LoadedSample>& data, const diffusion::NoiseSchedule& schedule,
                             const TrainConfig& config);
TrainResult train_harmonizer(harmonizer::Harmonizer& phi, const backbone::Backbone& backbone,
                             const datasetgen::DatasetManifest& manifest, const diffusion::NoiseSchedule& schedule,
                             const TrainConfig& config);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& history);

struct GradientEntry {
    std::string name;
    std::size_t index = 0;
    double analytic = 0;
    double numeric = 0;
    double rel_error = 0;
};

struct GradientReport {
    std::vector<GradientEntry> entries;
    double max_rel_error = 0;
    double tolerance = 0;
    bool passed = false;
    nlohmann::json to_json() const;
};

inline constexpr double kGradientFloor = 1e-10;

// |a - n| / max(|a|, |n|, kGradientFloor).
double relative_error(double analytic, double numeric);

// Central differences against the tape gradient of `loss` for `count` random
// entries of `params`, drawn evenly from the groups selected by `groups`
// (name predicates; an entry is taken from each group in turn).
GradientReport check_gradients(ParamStore& params, const std::function<Var()>& loss, int count, double step,
                               double tolerance, Rng& rng,
                               const std::vector<std::function<bool(const std::string&)>>& groups = {});

// Harmonizer gradients spanning stem, encoder copy and projections.
GradientReport gradient_check(harmonizer::Harmonizer& phi, const backbone::Backbone& backbone, const Batch& batch,
                              const diffusion::NoiseSchedule& schedule, double tolerance, int count = 24,
                              double step = 1e-3, std::uint64_t seed = 0);

}  // namespace phd::training
