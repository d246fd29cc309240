#include "phd/core/random.hpp"

namespace phd {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

bool bernoulli(Rng& rng, double p) {
    // Always consume one draw so the stream position does not depend on p.
    const double u = uniform01(rng);
    return u < p;
}

void fill_normal(Tensor& t, Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.values()) v = static_cast<Real>(dist(rng));
}

Tensor randn(const Shape& shape, Rng& rng) {
    Tensor t(shape);
    fill_normal(t, rng);
    return t;
}

}  // namespace phd
