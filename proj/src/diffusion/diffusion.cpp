#include "phd/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace phd::diffusion {

nlohmann::json NoiseSchedule::to_json() const {
    return {{"T", T}, {"beta_start", beta_start}, {"beta_end", beta_end}, {"kind", kind}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
    const std::string kind = j.value("kind", std::string("linear"));
    if (kind != "linear") throw std::invalid_argument("unsupported schedule kind: " + kind);
    return linear_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
}

NoiseSchedule linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 2) throw std::invalid_argument("schedule needs T >= 2");
    if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1)) {
        throw std::invalid_argument("schedule needs 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        const double beta = beta_start + (beta_end - beta_start) * i / (T - 1);
        s.betas.push_back(beta);
        prod *= 1.0 - beta;
        s.alpha_bars.push_back(prod);
    }
    return s;
}

SamplerKind sampler_kind_from_string(const std::string& s) {
    if (s == "ancestral") return SamplerKind::kAncestral;
    if (s == "deterministic") return SamplerKind::kDeterministic;
    throw std::invalid_argument("unknown sampler kind: " + s);
}

std::string to_string(SamplerKind kind) { return kind == SamplerKind::kAncestral ? "ancestral" : "deterministic"; }

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
    require_same_shape(x0, eps, "q_sample");
    if (t < 1 || t > schedule.T) throw std::out_of_range("q_sample: step " + std::to_string(t) + " outside [1,T]");
    const double ab = schedule.alpha_bar(t);
    const Real a = static_cast<Real>(std::sqrt(ab));
    const Real b = static_cast<Real>(std::sqrt(1.0 - ab));
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double w) {
    require_same_shape(eps_cond, eps_uncond, "cfg_combine");
    if (w == 0.0) return eps_cond;
    const Real wr = static_cast<Real>(w);
    Tensor out(eps_cond.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_cond[i] + wr * (eps_cond[i] - eps_uncond[i]);
    return out;
}

Tensor reverse_step(const Tensor& x_t, const Tensor& eps_hat, int t, int t_prev, const NoiseSchedule& schedule,
                    const SamplerConfig& config, Rng& rng) {
    require_same_shape(x_t, eps_hat, "reverse_step");
    if (t < 1 || t > schedule.T || t_prev < 0 || t_prev >= t) {
        throw std::out_of_range("reverse_step: invalid transition " + std::to_string(t) + " -> " + std::to_string(t_prev));
    }
    const double ab_t = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    Tensor out(x_t.shape());

    if (config.kind == SamplerKind::kAncestral) {
        // Strided steps use the effective single-transition alpha.
        const double alpha = ab_t / ab_prev;
        const double beta = 1.0 - alpha;
        const double coef = beta / std::sqrt(1.0 - ab_t);
        const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = static_cast<Real>(inv_sqrt_alpha * (x_t[i] - coef * eps_hat[i]));
        }
        if (t_prev > 0) {
            const double sigma = std::sqrt(beta);
            Tensor z = randn(x_t.shape(), rng);
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += static_cast<Real>(sigma * z[i]);
        }
        return out;
    }

    if (config.eta < 0 || config.eta > 1) throw std::invalid_argument("eta must lie in [0,1]");
    const double sqrt_ab = std::sqrt(ab_t);
    const double sqrt_1mab = std::sqrt(1.0 - ab_t);
    const double sigma =
        config.eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(std::max(0.0, 1.0 - ab_t / ab_prev));
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    const double sqrt_ab_prev = std::sqrt(ab_prev);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x0 = std::clamp((x_t[i] - sqrt_1mab * eps_hat[i]) / sqrt_ab, -kX0Clamp, kX0Clamp);
        out[i] = static_cast<Real>(sqrt_ab_prev * x0 + dir * eps_hat[i]);
    }
    if (sigma > 0) {
        Tensor z = randn(x_t.shape(), rng);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += static_cast<Real>(sigma * z[i]);
    }
    return out;
}

std::vector<int> strided_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) throw std::invalid_argument("inference steps must lie in [1,T]");
    std::vector<int> ts;
    for (int k = steps; k >= 1; --k) ts.push_back(static_cast<int>(static_cast<long long>(k) * T / steps));
    return ts;
}

Tensor sample_latent(NoisePredictor& backbone, ConditionSource* harmonizer, const TextCondition& text,
                     const Shape& shape, const NoiseSchedule& schedule, const SamplerConfig& config, Rng& rng,
                     const SampleOptions& options) {
    if (config.guidance < 0) throw std::invalid_argument("guidance weight must be >= 0");
    std::vector<int> ts = strided_timesteps(schedule.T, config.steps);
    Tensor x;
    if (options.init_latent) {
        require_same_shape(*options.init_latent, Tensor(shape), "sample init latent");
        const int keep = std::clamp(options.start_steps, 0, static_cast<int>(ts.size()));
        ts.erase(ts.begin(), ts.end() - keep);
        if (ts.empty()) return *options.init_latent;
        x = q_sample(*options.init_latent, ts.front(), randn(shape, rng), schedule);
    } else {
        x = randn(shape, rng);
    }

    const TextCondition uncond = TextCondition::null();
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        ConditionFeatures feats;
        if (harmonizer) feats = harmonizer->features(x, t);
        const ConditionFeatures* inj = harmonizer ? &feats : nullptr;
        Tensor eps = backbone.predict_noise(x, t, text, inj);
        if (config.guidance > 0) {
            Tensor eps_u = backbone.predict_noise(x, t, uncond, inj);
            eps = cfg_combine(eps, eps_u, config.guidance);
        }
        x = reverse_step(x, eps, t, t_prev, schedule, config, rng);
        if (!x.all_finite()) throw DivergenceError("non-finite latent after denoising step t=" + std::to_string(t));
        if (options.after_step) options.after_step(x, t_prev, rng);
        if (options.progress) options.progress(static_cast<int>(i) + 1, static_cast<int>(ts.size()));
    }
    return x;
}

imaging::RasterImage sample(NoisePredictor& backbone, ConditionSource* harmonizer, const TextCondition& text,
                            const Shape& shape, const NoiseSchedule& schedule, const SamplerConfig& config, Rng& rng,
                            const SampleOptions& options) {
    return to_image(sample_latent(backbone, harmonizer, text, shape, schedule, config, rng, options));
}

Tensor to_latent(const imaging::RasterImage& image) {
    Tensor t({1, 3, image.height, image.width});
    for (std::size_t i = 0; i < image.pixels.size(); ++i) t[i] = static_cast<Real>(image.pixels[i]) * 2 - 1;
    return t;
}

imaging::RasterImage to_image(const Tensor& latent, int batch_index) {
    if (latent.rank() != 4 || latent.dim(1) != 3) throw ShapeError("to_image expects [N,3,H,W]");
    const int h = latent.dim(2), w = latent.dim(3);
    imaging::RasterImage img(h, w);
    const Real* src = latent.data() + static_cast<std::size_t>(batch_index) * 3 * h * w;
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        img.pixels[i] = std::clamp(static_cast<float>((src[i] + 1) * 0.5), 0.0f, 1.0f);
    }
    return img;
}

}  // namespace phd::diffusion
