#pragma once

#include <vector>

#include "phd/core/nn.hpp"

namespace phd {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
    double clip_norm = 1.0;  // global-norm clipping; <= 0 disables
};

// Decoupled-weight-decay Adam over every parameter of one store.
class AdamW {
public:
    AdamW(ParamStore& store, AdamWConfig config);

    // Applies one update with learning rate lr using the accumulated grads,
    // then clears them. Returns the pre-clip global gradient norm.
    double step(double lr);
    int steps_taken() const { return t_; }

private:
    ParamStore* store_;
    AdamWConfig config_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    int t_ = 0;
};

// Cosine annealing from base to 0 over total steps, after an optional linear warmup.
double cosine_lr(double base, int step, int total, int warmup = 0);

}  // namespace phd
