#include "phd/core/optim.hpp"

#include <cmath>
#include <numbers>

namespace phd {

AdamW::AdamW(ParamStore& store, AdamWConfig config) : store_(&store), config_(config) {
    if (store.frozen()) throw ImmutableError("cannot attach an optimizer to frozen parameters");
    for (const auto& [name, v] : store.entries()) {
        m_.emplace_back(v->value.shape());
        v_.emplace_back(v->value.shape());
    }
}

double AdamW::step(double lr) {
    if (store_->frozen()) throw ImmutableError("parameter update rejected: parameters are frozen");
    const auto& entries = store_->entries();
    double sq = 0;
    for (const auto& [name, v] : entries) {
        if (v->grad.size() != v->value.size()) continue;
        for (Real g : v->grad.values()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw std::runtime_error("non-finite gradient norm");
    const double clip = (config_.clip_norm > 0 && norm > config_.clip_norm) ? config_.clip_norm / norm : 1.0;

    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, t_);
    const double bc2 = 1.0 - std::pow(config_.beta2, t_);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        Node& p = *entries[i].second;
        if (!p.requires_grad) continue;
        const bool has_grad = p.grad.size() == p.value.size();
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const double g = has_grad ? p.grad[j] * clip : 0.0;
            double w = p.value[j];
            w -= lr * config_.weight_decay * w;
            const double m = config_.beta1 * m_[i][j] + (1 - config_.beta1) * g;
            const double v = config_.beta2 * v_[i][j] + (1 - config_.beta2) * g * g;
            m_[i][j] = static_cast<Real>(m);
            v_[i][j] = static_cast<Real>(v);
            w -= lr * (m / bc1) / (std::sqrt(v / bc2) + config_.eps);
            p.value[j] = static_cast<Real>(w);
        }
    }
    store_->zero_grad();
    return norm;
}

double cosine_lr(double base, int step, int total, int warmup) {
    if (total <= 0) return base;
    if (warmup > 0 && step < warmup) return base * (step + 1) / warmup;
    const double span = std::max(1, total - warmup);
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
    return 0.5 * base * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace phd
