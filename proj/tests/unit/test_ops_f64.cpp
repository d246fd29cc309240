// Finite-difference and reference-value checks for every differentiable op,
// compiled against the double-precision library.
#include <doctest.h>

#include <cmath>

#include "phd/core/ops.hpp"
#include "phd/training.hpp"

using namespace phd;

static_assert(sizeof(Real) == sizeof(double));

namespace {

struct Harness {
    ParamStore store;
    Rng rng{11};

    Var input(const std::string& name, const Shape& shape) {
        store.insert(name, randn(shape, rng));
        return store.get(name);
    }

    // Loss = mse(out, random target) so every output entry contributes.
    // Samples entries only from the named inputs.
    void check(const std::vector<std::string>& names, const std::function<Var()>& forward, double tolerance = 1e-5) {
        store.set_requires_grad(true);
        const Var probe = forward();
        const Tensor target = randn(probe->value.shape(), rng);
        Rng pick(5);
        std::vector<std::function<bool(const std::string&)>> groups;
        for (const auto& n : names) groups.push_back([n](const std::string& name) { return name == n; });
        const auto report = training::check_gradients(
            store, [&] { return ops::mse(forward(), target); }, 40, 1e-5, tolerance, pick, groups);
        INFO(report.to_json().dump());
        CHECK(report.passed);
    }
};

// Direct convolution, the textbook loop.
Tensor conv_reference(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int o = w.dim(0), k = w.dim(2);
    const int oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
    Tensor out({n, o, oh, ow});
    for (int in = 0; in < n; ++in)
        for (int io = 0; io < o; ++io)
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx) {
                    double acc = b[io];
                    for (int ic = 0; ic < c; ++ic)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int sy = y * stride + ky - pad, sx = xx * stride + kx - pad;
                                if (sy < 0 || sx < 0 || sy >= h || sx >= wd) continue;
                                acc += x.at(in, ic, sy, sx) * w.at(io, ic, ky, kx);
                            }
                    out.at(in, io, y, xx) = acc;
                }
    return out;
}

}  // namespace

TEST_CASE("conv2d matches direct convolution") {
    Rng rng(1);
    for (auto [stride, pad, k] : {std::tuple{1, 1, 3}, {2, 1, 3}, {1, 0, 1}}) {
        const Tensor x = randn({2, 3, 7, 6}, rng), w = randn({4, 3, k, k}, rng), b = randn({4}, rng);
        const Tensor got = ops::conv2d(constant(x), constant(w), constant(b), stride, pad)->value;
        const Tensor want = conv_reference(x, w, b, stride, pad);
        REQUIRE(got.shape() == want.shape());
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
}

TEST_CASE("softmax rows sum to one and group_norm standardizes") {
    Rng rng(2);
    const Tensor x = randn({2, 3, 5}, rng);
    const Tensor s = ops::softmax_last(constant(x))->value;
    for (int r = 0; r < 6; ++r) {
        double sum = 0;
        for (int j = 0; j < 5; ++j) sum += s[r * 5 + j];
        CHECK(sum == doctest::Approx(1.0));
    }
    const Tensor g = ops::group_norm(constant(randn({1, 4, 3, 3}, rng)), constant(Tensor({4}, 1.0)),
                                     constant(Tensor({4}, 0.0)), 2, 0)
                         ->value;
    for (int grp = 0; grp < 2; ++grp) {
        double mean = 0, sq = 0;
        for (int i = 0; i < 18; ++i) mean += g[grp * 18 + i];
        mean /= 18;
        for (int i = 0; i < 18; ++i) sq += (g[grp * 18 + i] - mean) * (g[grp * 18 + i] - mean);
        CHECK(mean == doctest::Approx(0.0).epsilon(1e-9).scale(1));
        CHECK(sq / 18 == doctest::Approx(1.0));
    }
}

TEST_CASE("gradients: elementwise and broadcast ops") {
    Harness h;
    Var a = h.input("a", {2, 3, 4, 4}), b = h.input("b", {2, 3, 4, 4}), v = h.input("v", {2, 3});
    h.check({"a", "b"}, [&] { return ops::mul(ops::add(a, ops::scale(b, 0.5)), ops::sub(a, b)); });
    h.check({"a", "v"}, [&] { return ops::silu(ops::add_channel(a, v)); });
}

TEST_CASE("gradients: conv2d, group_norm, linear") {
    Harness h;
    Var x = h.input("x", {2, 4, 6, 6}), w = h.input("w", {3, 4, 3, 3}), b = h.input("b", {3});
    Var g = h.input("g", {4}), beta = h.input("beta", {4});
    Var lw = h.input("lw", {5, 6}), lb = h.input("lb", {5});
    h.check({"x", "w", "b"}, [&] { return ops::conv2d(x, w, b, 1, 1); });
    h.check({"x", "w", "b"}, [&] { return ops::conv2d(x, w, b, 2, 1); });
    h.check({"x", "g", "beta"}, [&] { return ops::group_norm(x, g, beta, 2); });
    h.check({"x", "lw", "lb"}, [&] { return ops::linear(ops::reshape(x, {2, 4, 6, 6}), lw, lb); });
}

TEST_CASE("gradients: resampling, concatenation and token layout") {
    Harness h;
    Var x = h.input("x", {2, 2, 3, 3}), y = h.input("y", {2, 3, 3, 3});
    h.check({"x"}, [&] { return ops::upsample2x(x); });
    h.check({"x", "y"}, [&] { return ops::concat_channels(x, y); });
    h.check({"y"}, [&] { return ops::from_tokens(ops::to_tokens(y), 3, 3); });
    h.check({"y"}, [&] { return ops::scale(ops::to_tokens(y), 2); });
    h.check({"y"}, [&] { return ops::global_avg_pool(y); });
    h.check({"x"}, [&] { return ops::concat0({x, ops::scale(x, 3)}); });
}

TEST_CASE("gradients: attention pieces") {
    Harness h;
    Var q = h.input("q", {2, 4, 3}), k = h.input("k", {2, 5, 3}), kt = h.input("kt", {2, 3, 5});
    h.check({"q", "k"}, [&] { return ops::softmax_last(ops::bmm(q, k, true)); });
    h.check({"q", "kt"}, [&] { return ops::bmm(q, kt, false); });
    Var table = h.input("table", {6, 3});
    const std::vector<int> rows{0, 3, 3, 5};
    h.check({"table"}, [&] { return ops::l2_normalize_rows(ops::gather_rows(table, rows)); });
}

TEST_CASE("cross_entropy value and gradient") {
    const Tensor logits({2, 3}, {1, 2, 3, 0, 0, 0});
    const std::vector<int> labels{2, 1};
    const double l0 = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
    const double l1 = std::log(3.0);
    CHECK(ops::cross_entropy(constant(logits), labels)->value[0] == doctest::Approx((l0 + l1) / 2));

    ParamStore store;
    Rng rng(3);
    store.insert("z", randn({4, 5}, rng));
    store.set_requires_grad(true);
    const std::vector<int> y{0, 4, 2, 2};
    Rng pick(1);
    const auto r = training::check_gradients(
        store, [&] { return ops::cross_entropy(store.get("z"), y); }, 20, 1e-5, 1e-6, pick);
    CHECK(r.passed);
}

TEST_CASE("relative_error floor") {
    CHECK(training::relative_error(0, 0) == 0);
    CHECK(training::relative_error(1e-20, 2e-13) < 1e-2);
    CHECK(training::relative_error(1.0, 1.01) == doctest::Approx(0.01 / 1.01));
}
