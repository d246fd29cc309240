#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "phd/core/autograd.hpp"
#include "phd/core/random.hpp"

namespace phd {

class ImmutableError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Named parameter tensors in insertion order. Copies share the underlying
// nodes; use clone() for an independent set.
class ParamStore {
public:
    using Initializer = std::function<void(Tensor&)>;

    // Returns the existing parameter (shape-checked) or creates one.
    Var obtain(const std::string& name, const Shape& shape, const Initializer& init);
    Var get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    void insert(const std::string& name, Tensor value);

    const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
    std::size_t parameter_count() const;

    ParamStore clone() const;
    void set_requires_grad(bool on);
    void zero_grad();

    bool frozen() const { return frozen_; }
    void set_frozen(bool frozen);

    // SHA-256 over names, shapes and float32 little-endian values, in name order.
    std::string checksum() const;

private:
    std::vector<std::pair<std::string, Var>> entries_;
    std::map<std::string, std::size_t> index_;
    bool frozen_ = false;
};

namespace nn {

struct Conv2d {
    Var weight;
    Var bias;
    int stride = 1;
    int pad = 0;
    Var operator()(const Var& x) const;
};

struct Linear {
    Var weight;
    Var bias;
    Var operator()(const Var& x) const;
};

struct GroupNorm {
    Var gamma;
    Var beta;
    int groups = 8;
    Var operator()(const Var& x) const;
};

enum class Init { kDefault, kZero };

Conv2d conv2d(ParamStore& store, Rng& rng, const std::string& name, int in, int out, int kernel, int stride = 1,
              Init init = Init::kDefault);
Linear linear(ParamStore& store, Rng& rng, const std::string& name, int in, int out, Init init = Init::kDefault);
GroupNorm group_norm(ParamStore& store, const std::string& name, int channels, int groups);

}  // namespace nn
}  // namespace phd
