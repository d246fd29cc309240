#include "phd/training.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "phd/core/ops.hpp"

namespace phd::training {

void TrainConfig::validate() const {
    if (!(lr > 0)) throw std::invalid_argument("learning rate must be > 0");
    if (batch < 1) throw std::invalid_argument("batch size must be >= 1");
    if (steps < 0) throw std::invalid_argument("step count must be >= 0");
    if (!(cfg_dropout >= 0 && cfg_dropout <= 1)) throw std::invalid_argument("cfg dropout must lie in [0,1]");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"lr", lr},
            {"batch", batch},
            {"steps", steps},
            {"warmup", warmup},
            {"weight_decay", optimizer.weight_decay},
            {"beta1", optimizer.beta1},
            {"beta2", optimizer.beta2},
            {"clip_norm", optimizer.clip_norm},
            {"cfg_dropout", cfg_dropout},
            {"image_dropout", image_dropout},
            {"seed", seed},
            {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr = j.value("lr", c.lr);
    c.batch = j.value("batch", c.batch);
    c.steps = j.value("steps", c.steps);
    c.warmup = j.value("warmup", c.warmup);
    c.optimizer.weight_decay = j.value("weight_decay", c.optimizer.weight_decay);
    c.optimizer.beta1 = j.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = j.value("beta2", c.optimizer.beta2);
    c.optimizer.clip_norm = j.value("clip_norm", c.optimizer.clip_norm);
    c.cfg_dropout = j.value("cfg_dropout", c.cfg_dropout);
    c.image_dropout = j.value("image_dropout", c.image_dropout);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.validate();
    return c;
}

Var PhdModel::predict(const Var& x_t, std::span<const int> t, const std::vector<TextCondition>& text,
                      const Tensor& condition) const {
    const ConditionFeatures feats =
        harmonizer_->encode(condition, x_t, t, harmonizer::all_gates(harmonizer_->connections()));
    return backbone_->forward(x_t, t, backbone_->embed_text(text), &feats);
}

Tensor noised_batch(const Batch& batch, const diffusion::NoiseSchedule& schedule) {
    require_same_shape(batch.target, batch.eps, "noised_batch");
    const int n = batch.target.dim(0);
    if (static_cast<int>(batch.t.size()) != n) throw ShapeError("one timestep per batch item required");
    Tensor out(batch.target.shape());
    const std::size_t per = batch.target.size() / static_cast<std::size_t>(n);
    for (int b = 0; b < n; ++b) {
        const int t = batch.t[static_cast<std::size_t>(b)];
        if (t < 1 || t > schedule.T) throw std::out_of_range("timestep outside [1,T]");
        const double ab = schedule.alpha_bar(t);
        const Real a = static_cast<Real>(std::sqrt(ab)), s = static_cast<Real>(std::sqrt(1 - ab));
        for (std::size_t i = b * per; i < (b + 1) * per; ++i) out[i] = a * batch.target[i] + s * batch.eps[i];
    }
    return out;
}

Var phd_loss(const NoiseModel& model, const Batch& batch, const diffusion::NoiseSchedule& schedule) {
    if (!model.backbone_frozen()) throw FrozenViolation("the harmonizer objective requires a frozen backbone");
    const Var x_t = constant(noised_batch(batch, schedule));
    return ops::mse(model.predict(x_t, batch.t, batch.text, batch.condition), batch.eps);
}

TextCondition cfg_dropout(const TextCondition& text, double probability, Rng& rng) {
    if (!(probability >= 0 && probability <= 1)) throw std::invalid_argument("dropout probability must lie in [0,1]");
    return bernoulli(rng, probability) ? TextCondition::null() : text;
}

Batch draw_batch(const std::vector<datasetgen::LoadedSample>& data, const diffusion::NoiseSchedule& schedule,
                 const TrainConfig& config, Rng& rng) {
    if (data.empty()) throw std::invalid_argument("training data is empty");
    Batch b;
    std::vector<const imaging::RasterImage*> targets;
    std::vector<Tensor> conds;
    for (int i = 0; i < config.batch; ++i) {
        const auto& s = data[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(data.size()) - 1))];
        targets.push_back(&s.target);
        b.t.push_back(uniform_int(rng, 1, schedule.T));
        const TextCondition text = cfg_dropout(encode_text(s.caption), config.cfg_dropout, rng);
        Tensor cond = harmonizer::condition_tensor(s.composite, s.mask);
        if (config.image_dropout && text.is_null) cond.fill(Real(0));
        b.text.push_back(text);
        conds.push_back(std::move(cond));
    }
    b.target = backbone::batch_latents(targets);
    const Shape& cs = conds[0].shape();
    b.condition = Tensor({config.batch, cs[1], cs[2], cs[3]});
    for (int i = 0; i < config.batch; ++i) {
        const Tensor& c = conds[static_cast<std::size_t>(i)];
        std::copy(c.data(), c.data() + c.size(), b.condition.data() + static_cast<std::size_t>(i) * c.size());
    }
    b.eps = randn(b.target.shape(), rng);
    return b;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& history) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "step,loss,loss_ma100,lr\n" << std::setprecision(9);
    for (const auto& r : history) os << r.step << "," << r.loss << "," << r.loss_ma100 << "," << r.lr << "\n";
}

TrainResult train_harmonizer(harmonizer::Harmonizer& phi, const backbone::Backbone& backbone,
                             const std::vector<datasetgen::LoadedSample>& data, const diffusion::NoiseSchedule& schedule,
                             const TrainConfig& config) {
    config.validate();
    if (!backbone.frozen()) throw FrozenViolation("train_harmonizer requires a frozen backbone");
    if (phi.backbone_checksum() != backbone.checksum()) {
        throw std::invalid_argument("harmonizer was initialized from a different backbone");
    }
    if (data.empty()) throw std::invalid_argument("training data is empty");
    TrainResult result;
    if (config.steps == 0) return result;

    AdamW opt(phi.params(), config.optimizer);
    PhdModel model(backbone, phi);
    Rng rng(config.seed);
    std::deque<double> window;
    double window_sum = 0;
    std::ofstream csv;
    if (!config.loss_csv.empty()) {
        if (config.loss_csv.has_parent_path()) std::filesystem::create_directories(config.loss_csv.parent_path());
        csv.open(config.loss_csv, std::ios::trunc);
        if (!csv) throw std::runtime_error("cannot write " + config.loss_csv.string());
        csv << "step,loss,loss_ma100,lr\n" << std::setprecision(9);
    }

    for (int step = 1; step <= config.steps; ++step) {
        const Batch batch = draw_batch(data, schedule, config, rng);
        const Var loss = phd_loss(model, batch, schedule);
        const double lv = loss->value[0];
        if (!std::isfinite(lv)) {
            // The parameters have not seen this step yet, so they are the last good state.
            if (!config.checkpoint_path.empty()) phi.save(config.checkpoint_path, step - 1);
            throw diffusion::DivergenceError("harmonizer loss became non-finite at step " + std::to_string(step));
        }
        backward(loss);
        const double lr = cosine_lr(config.lr, step - 1, config.steps, config.warmup);
        opt.step(lr);

        window.push_back(lv);
        window_sum += lv;
        if (window.size() > 100) {
            window_sum -= window.front();
            window.pop_front();
        }
        const LossRecord rec{step, lv, window_sum / static_cast<double>(window.size()), lr};
        result.history.push_back(rec);
        if (csv) csv << rec.step << "," << rec.loss << "," << rec.loss_ma100 << "," << rec.lr << "\n";
        if (config.log_every > 0 && step % config.log_every == 0) {
            std::cerr << "train step " << step << "/" << config.steps << " loss_ma100 " << rec.loss_ma100 << "\n";
            if (csv) csv.flush();
        }
        if (!config.checkpoint_path.empty() && config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
            phi.save(config.checkpoint_path, step);
        }
        if (config.on_step) config.on_step(rec);
    }
    if (!config.checkpoint_path.empty()) phi.save(config.checkpoint_path, config.steps);
    return result;
}

TrainResult train_harmonizer(harmonizer::Harmonizer& phi, const backbone::Backbone& backbone,
                             const datasetgen::DatasetManifest& manifest, const diffusion::NoiseSchedule& schedule,
                             const TrainConfig& config) {
    if (manifest.size() == 0) throw std::invalid_argument("training manifest is empty");
    return train_harmonizer(phi, backbone, datasetgen::load_samples(manifest), schedule, config);
}

nlohmann::json GradientReport::to_json() const {
    nlohmann::json e = nlohmann::json::array();
    for (const auto& g : entries) {
        e.push_back({{"name", g.name},
                     {"index", g.index},
                     {"analytic", g.analytic},
                     {"numeric", g.numeric},
                     {"rel_error", g.rel_error}});
    }
    return {{"entries", e}, {"max_rel_error", max_rel_error}, {"tolerance", tolerance}, {"passed", passed}};
}

double relative_error(double analytic, double numeric) {
    // The floor keeps gradients that vanish up to roundoff (e.g. attention key
    // biases under softmax shift invariance) from reading as total disagreement.
    const double scale = std::max({std::abs(analytic), std::abs(numeric), kGradientFloor});
    return std::abs(analytic - numeric) / scale;
}

GradientReport check_gradients(ParamStore& params, const std::function<Var()>& loss, int count, double step,
                               double tolerance, Rng& rng,
                               const std::vector<std::function<bool(const std::string&)>>& groups) {
    std::vector<std::vector<std::size_t>> members(groups.empty() ? 1 : groups.size());
    const auto& entries = params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (!entries[i].second->requires_grad) continue;
        if (groups.empty()) {
            members[0].push_back(i);
            continue;
        }
        for (std::size_t g = 0; g < groups.size(); ++g) {
            if (groups[g](entries[i].first)) {
                members[g].push_back(i);
                break;
            }
        }
    }
    for (std::size_t g = 0; g < members.size(); ++g) {
        if (members[g].empty()) throw std::invalid_argument("gradient check group " + std::to_string(g) + " is empty");
    }

    params.zero_grad();
    backward(loss());
    auto eval = [&loss] {
        NoGradGuard guard;
        return static_cast<double>(loss()->value[0]);
    };

    GradientReport report;
    report.tolerance = tolerance;
    for (int k = 0; k < count; ++k) {
        const auto& group = members[static_cast<std::size_t>(k) % members.size()];
        const std::size_t pi = group[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(group.size()) - 1))];
        Node& p = *entries[pi].second;
        const std::size_t idx = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(p.value.size()) - 1));
        const double analytic = p.grad.size() == p.value.size() ? static_cast<double>(p.grad[idx]) : 0.0;
        const Real orig = p.value[idx];
        p.value[idx] = static_cast<Real>(orig + step);
        const double lp = eval();
        p.value[idx] = static_cast<Real>(orig - step);
        const double lm = eval();
        p.value[idx] = orig;
        const double numeric = (lp - lm) / (2 * step);
        GradientEntry e{entries[pi].first, idx, analytic, numeric, relative_error(analytic, numeric)};
        report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
        report.entries.push_back(std::move(e));
    }
    params.zero_grad();
    report.passed = report.max_rel_error < tolerance;
    return report;
}

GradientReport gradient_check(harmonizer::Harmonizer& phi, const backbone::Backbone& backbone, const Batch& batch,
                              const diffusion::NoiseSchedule& schedule, double tolerance, int count, double step,
                              std::uint64_t seed) {
    PhdModel model(backbone, phi);
    Rng rng(seed);
    auto loss = [&] { return phd_loss(model, batch, schedule); };
    return check_gradients(phi.params(), loss, count, step, tolerance, rng,
                           {harmonizer::Harmonizer::is_stem, harmonizer::Harmonizer::is_projection,
                            [](const std::string&) { return true; }});
}

}  // namespace phd::training
