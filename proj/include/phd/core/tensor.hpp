#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace phd {

// Working precision for every learned quantity. The gradient-check build
// compiles the numeric core with PHD_DOUBLE_PRECISION.
#ifdef PHD_DOUBLE_PRECISION
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<int>;

// Cache-line aligned storage. Vectorized kernels peel differently depending
// on the start address, so a fixed alignment keeps results reproducible.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using RealBuffer = std::vector<Real, AlignedAllocator<Real>>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dense row-major tensor. Images and feature maps use NCHW.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, Real fill = Real(0));
    Tensor(Shape shape, const std::vector<Real>& values);
    Tensor(Shape shape, std::initializer_list<Real> values);
    Tensor(Shape shape, RealBuffer values);

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const Shape& shape() const { return shape_; }
    int dim(int axis) const;
    int rank() const { return static_cast<int>(shape_.size()); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    Real* data() { return data_.data(); }
    const Real* data() const { return data_.data(); }
    std::span<Real> values() { return data_; }
    std::span<const Real> values() const { return data_; }

    Real& operator[](std::size_t i) { return data_[i]; }
    Real operator[](std::size_t i) const { return data_[i]; }

    // 4-D accessor, (n, c, y, x).
    Real& at(int n, int c, int y, int x);
    Real at(int n, int c, int y, int x) const;

    Tensor reshaped(Shape shape) const;
    void fill(Real value);

    Tensor& operator+=(const Tensor& other);
    Tensor& operator*=(Real s);

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool operator==(const Tensor& other) const = default;

    Real max_abs() const;
    bool all_finite() const;

private:
    Shape shape_;
    RealBuffer data_;
};

void require_same_shape(const Tensor& a, const Tensor& b, const std::string& what);

}  // namespace phd
