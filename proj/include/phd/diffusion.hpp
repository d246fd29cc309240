#pragma once

#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "phd/conditioning.hpp"
#include "phd/core/random.hpp"
#include "phd/core/tensor.hpp"
#include "phd/imaging.hpp"

namespace phd::diffusion {

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Noise levels for t = 1..T; index 0 of alpha_bar() is the clean state (1).
struct NoiseSchedule {
    int T = 0;
    double beta_start = 0;
    double beta_end = 0;
    std::string kind = "linear";
    std::vector<double> betas;       // betas[t-1]
    std::vector<double> alpha_bars;  // alpha_bars[t-1]

    double beta(int t) const { return betas.at(static_cast<std::size_t>(t - 1)); }
    double alpha(int t) const { return 1.0 - beta(t); }
    double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars.at(static_cast<std::size_t>(t - 1)); }

    nlohmann::json to_json() const;
    static NoiseSchedule from_json(const nlohmann::json& j);
};

NoiseSchedule linear_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02);

enum class SamplerKind { kAncestral, kDeterministic };

struct SamplerConfig {
    int steps = 50;
    SamplerKind kind = SamplerKind::kDeterministic;
    double eta = 0.0;
    double guidance = 2.0;  // w
    std::uint64_t seed = 0;
};

SamplerKind sampler_kind_from_string(const std::string& s);
std::string to_string(SamplerKind kind);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule);

// (1 + w) eps_cond - w eps_uncond, evaluated as eps_cond + w (eps_cond - eps_uncond).
Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double w);

constexpr double kX0Clamp = 1.5;

// One reverse transition from t to t_prev (< t; 0 is the clean state).
Tensor reverse_step(const Tensor& x_t, const Tensor& eps_hat, int t, int t_prev, const NoiseSchedule& schedule,
                    const SamplerConfig& config, Rng& rng);

// Uniformly strided, descending timesteps: floor(k T / steps) for k = steps..1.
std::vector<int> strided_timesteps(int T, int steps);

// Backbone interface seen by the sampler.
class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;
    virtual Tensor predict_noise(const Tensor& x_t, int t, const TextCondition& text,
                                 const ConditionFeatures* injected) = 0;
};

// Harmonizer interface: per-step condition features for a fixed composite.
class ConditionSource {
public:
    virtual ~ConditionSource() = default;
    virtual ConditionFeatures features(const Tensor& x_t, int t) = 0;
};

struct SampleOptions {
    // Image-to-image: start from init_latent noised to the first timestep of
    // the last start_steps strided steps, instead of pure noise.
    std::optional<Tensor> init_latent;
    int start_steps = -1;
    // Called after each transition with the new state and its timestep.
    std::function<void(Tensor& x, int t_prev, Rng& rng)> after_step;
    std::function<void(int done, int total)> progress;
};

// Runs the reverse process and returns the final latent in [-1,1] scale.
Tensor sample_latent(NoisePredictor& backbone, ConditionSource* harmonizer, const TextCondition& text,
                     const Shape& shape, const NoiseSchedule& schedule, const SamplerConfig& config, Rng& rng,
                     const SampleOptions& options = {});

imaging::RasterImage sample(NoisePredictor& backbone, ConditionSource* harmonizer, const TextCondition& text,
                            const Shape& shape, const NoiseSchedule& schedule, const SamplerConfig& config, Rng& rng,
                            const SampleOptions& options = {});

// [0,1] image <-> [-1,1] latent of shape [1,3,H,W].
Tensor to_latent(const imaging::RasterImage& image);
imaging::RasterImage to_image(const Tensor& latent, int batch_index = 0);

}  // namespace phd::diffusion
