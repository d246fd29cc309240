#include "phd/core/nn.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstring>
#include <iomanip>
#include <sstream>

#include "phd/core/ops.hpp"

namespace phd {

Var ParamStore::obtain(const std::string& name, const Shape& shape, const Initializer& init) {
    if (auto it = index_.find(name); it != index_.end()) {
        const Var& v = entries_[it->second].second;
        if (v->value.shape() != shape) {
            throw ShapeError("parameter " + name + " has shape " + shape_str(v->value.shape()) + ", expected " +
                             shape_str(shape));
        }
        return v;
    }
    Tensor t(shape);
    if (init) init(t);
    insert(name, std::move(t));
    return entries_.back().second;
}

Var ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].second;
}

void ParamStore::insert(const std::string& name, Tensor value) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, leaf(std::move(value), !frozen_));
}

std::size_t ParamStore::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : entries_) n += v->value.size();
    return n;
}

ParamStore ParamStore::clone() const {
    ParamStore out;
    for (const auto& [name, v] : entries_) out.insert(name, v->value);
    out.set_frozen(frozen_);
    return out;
}

void ParamStore::set_requires_grad(bool on) {
    for (auto& [name, v] : entries_) v->requires_grad = on;
}

void ParamStore::zero_grad() {
    for (auto& [name, v] : entries_) v->grad = Tensor();
}

void ParamStore::set_frozen(bool frozen) {
    frozen_ = frozen;
    set_requires_grad(!frozen);
    if (frozen) zero_grad();
}

std::string ParamStore::checksum() const {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    for (const auto& [name, idx] : index_) {
        const Tensor& t = entries_[idx].second->value;
        EVP_DigestUpdate(ctx, name.data(), name.size());
        for (int d : t.shape()) {
            const auto v = static_cast<std::uint32_t>(d);
            unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                  static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
            EVP_DigestUpdate(ctx, b, 4);
        }
        for (std::size_t i = 0; i < t.size(); ++i) {
            const float f = static_cast<float>(t[i]);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                  static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
            EVP_DigestUpdate(ctx, b, 4);
        }
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return os.str();
}

namespace nn {

Var Conv2d::operator()(const Var& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
Var Linear::operator()(const Var& x) const { return ops::linear(x, weight, bias); }
Var GroupNorm::operator()(const Var& x) const { return ops::group_norm(x, gamma, beta, groups); }

namespace {

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for conv/linear.
ParamStore::Initializer fan_in_uniform(Rng& rng, int fan_in) {
    return [&rng, fan_in](Tensor& t) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : t.values()) v = static_cast<Real>(dist(rng));
    };
}

}  // namespace

Conv2d conv2d(ParamStore& store, Rng& rng, const std::string& name, int in, int out, int kernel, int stride,
              Init init) {
    const int fan_in = in * kernel * kernel;
    ParamStore::Initializer fill = init == Init::kZero ? ParamStore::Initializer{} : fan_in_uniform(rng, fan_in);
    Conv2d c;
    c.weight = store.obtain(name + ".weight", {out, in, kernel, kernel}, fill);
    c.bias = store.obtain(name + ".bias", {out}, fill);
    c.stride = stride;
    c.pad = kernel / 2;
    return c;
}

Linear linear(ParamStore& store, Rng& rng, const std::string& name, int in, int out, Init init) {
    ParamStore::Initializer fill = init == Init::kZero ? ParamStore::Initializer{} : fan_in_uniform(rng, in);
    Linear l;
    l.weight = store.obtain(name + ".weight", {out, in}, fill);
    l.bias = store.obtain(name + ".bias", {out}, fill);
    return l;
}

GroupNorm group_norm(ParamStore& store, const std::string& name, int channels, int groups) {
    GroupNorm g;
    g.gamma = store.obtain(name + ".gamma", {channels}, [](Tensor& t) { t.fill(Real(1)); });
    g.beta = store.obtain(name + ".beta", {channels}, {});
    g.groups = groups;
    return g;
}

}  // namespace nn
}  // namespace phd
