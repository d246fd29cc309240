#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <set>

#include "phd/core/archive.hpp"
#include "phd/core/ops.hpp"
#include "phd/core/optim.hpp"
#include "test_support.hpp"

using namespace phd;

TEST_CASE("tensor storage is 64-byte aligned") {
    for (int n : {1, 3, 17, 1000}) {
        Tensor t({n});
        CHECK(reinterpret_cast<std::uintptr_t>(t.data()) % 64 == 0);
        Tensor copy = t;
        CHECK(reinterpret_cast<std::uintptr_t>(copy.data()) % 64 == 0);
    }
}

TEST_CASE("tensor basics") {
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.dim(1) == 3);
    CHECK(t.max_abs() == 6);
    CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
    CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
    CHECK_THROWS_AS(Tensor({2}, {1, 2, 3}), ShapeError);
    t[0] = std::nan("");
    CHECK_FALSE(t.all_finite());
}

TEST_CASE("derive_seed streams are distinct and reproducible") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t s = 0; s < 100; ++s) seen.insert(derive_seed(7, s));
    CHECK(seen.size() == 100);
    CHECK(derive_seed(7, 3) == derive_seed(7, 3));
    CHECK(derive_seed(7, 3) != derive_seed(8, 3));
}

TEST_CASE("uniform_int is inclusive and roughly flat") {
    Rng rng(1);
    int counts[4] = {};
    for (int i = 0; i < 40000; ++i) ++counts[uniform_int(rng, 0, 3)];
    for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}

TEST_CASE("sha256 known answers") {
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("archive round trip keeps names, shapes, values and metadata") {
    const auto dir = test::scratch("core_archive");
    ParamStore store;
    store.insert("a.weight", Tensor({2, 3}, {1, -2, 3.5f, 0, 1e-3f, -7}));
    store.insert("b", Tensor({1}, {42}));
    write_archive(dir / "x.phd", {{"kind", "test"}, {"n", 2}}, store);
    const Archive back = read_archive(dir / "x.phd");
    CHECK(back.meta["kind"] == "test");
    REQUIRE(back.params.entries().size() == 2);
    CHECK(back.params.get("a.weight")->value == store.get("a.weight")->value);
    CHECK(back.params.get("b")->value == store.get("b")->value);
    CHECK(back.params.checksum() == store.checksum());

    const std::string bytes = test::slurp(dir / "x.phd");
    CHECK(bytes.substr(0, 8) == "PHDARCH1");
    CHECK_THROWS(read_archive(dir / "missing.phd"));
    {
        std::ofstream os(dir / "trunc.phd", std::ios::binary);
        os << bytes.substr(0, bytes.size() - 5);
    }
    CHECK_THROWS(read_archive(dir / "trunc.phd"));
}

TEST_CASE("checksum tracks values") {
    ParamStore a;
    a.insert("w", Tensor({3}, {1, 2, 3}));
    ParamStore b = a.clone();
    CHECK(a.checksum() == b.checksum());
    b.get("w")->value[2] = 3.0001f;
    CHECK(a.checksum() != b.checksum());
}

TEST_CASE("AdamW matches a hand-written reference") {
    AdamWConfig cfg;
    cfg.clip_norm = 0;
    ParamStore store;
    store.insert("p", Tensor({2}, {1.0f, -0.5f}));
    store.set_requires_grad(true);
    AdamW opt(store, cfg);

    // Reference in double precision, straight from the update rule.
    double w[2] = {1.0, -0.5}, m[2] = {}, v[2] = {};
    const double grads[3][2] = {{0.5, -1.0}, {0.2, 0.3}, {-0.4, 0.0}};
    const double lr = 0.1;
    for (int t = 1; t <= 3; ++t) {
        Tensor& g = store.get("p")->grad_buffer();
        g[0] = static_cast<Real>(grads[t - 1][0]);
        g[1] = static_cast<Real>(grads[t - 1][1]);
        opt.step(lr);
        for (int i = 0; i < 2; ++i) {
            const double gi = grads[t - 1][i];
            w[i] *= 1.0 - lr * cfg.weight_decay;
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.999 * v[i] + 0.001 * gi * gi;
            const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
            w[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
        }
        CHECK(store.get("p")->value[0] == doctest::Approx(w[0]).epsilon(1e-5));
        CHECK(store.get("p")->value[1] == doctest::Approx(w[1]).epsilon(1e-5));
    }
    // First step of Adam moves each coordinate by about lr.
    CHECK(opt.steps_taken() == 3);
}

TEST_CASE("AdamW clips by global norm and refuses frozen stores") {
    ParamStore store;
    store.insert("p", Tensor({2}, {0, 0}));
    store.set_requires_grad(true);
    AdamW opt(store, AdamWConfig{});
    Tensor& g = store.get("p")->grad_buffer();
    g[0] = 3;
    g[1] = 4;
    CHECK(opt.step(1e-3) == doctest::Approx(5.0));
    CHECK(store.get("p")->grad.max_abs() == 0);

    store.set_frozen(true);
    CHECK_THROWS_AS(opt.step(1e-3), ImmutableError);
}

TEST_CASE("cosine_lr schedule") {
    CHECK(cosine_lr(1.0, 0, 100) == doctest::Approx(1.0));
    CHECK(cosine_lr(1.0, 50, 100) == doctest::Approx(0.5));
    CHECK(cosine_lr(1.0, 100, 100) == doctest::Approx(0.0));
    CHECK(cosine_lr(2.0, 0, 100, 10) == doctest::Approx(0.2));
    CHECK(cosine_lr(2.0, 10, 100, 10) == doctest::Approx(2.0));
    for (int s = 11; s <= 100; ++s) CHECK(cosine_lr(1.0, s, 100, 10) <= cosine_lr(1.0, s - 1, 100, 10));
}

TEST_CASE("no-grad guard stops tape recording") {
    Var x = leaf(Tensor({2}, {1, 2}), true);
    {
        NoGradGuard guard;
        CHECK_FALSE(grad_enabled());
        Var y = ops::scale(x, 2);
        CHECK(y->parents.empty());
    }
    CHECK(grad_enabled());
    Var y = ops::mse(ops::scale(x, 2), Tensor({2}, {0, 0}));
    backward(y);
    // d/dx mean((2x)^2) = 4x
    CHECK(x->grad[0] == doctest::Approx(4.0));
    CHECK(x->grad[1] == doctest::Approx(8.0));
}
