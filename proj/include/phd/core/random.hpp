#pragma once

#include <cstdint>
#include <random>

#include "phd/core/tensor.hpp"

namespace phd {

using Rng = std::mt19937_64;

// Mixes a base seed with a stream id so parallel consumers get independent,
// reproducible generators (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

double uniform01(Rng& rng);
int uniform_int(Rng& rng, int lo, int hi);  // inclusive bounds
bool bernoulli(Rng& rng, double p);

void fill_normal(Tensor& t, Rng& rng, double stddev = 1.0);
Tensor randn(const Shape& shape, Rng& rng);

}  // namespace phd
