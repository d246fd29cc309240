#include <doctest.h>

#include <algorithm>

#include "phd/core/ops.hpp"
#include "phd/training.hpp"
#include "test_support.hpp"

using namespace phd;
using namespace phd::training;

namespace {

// Returns the batch eps exactly, or zeros.
struct StubModel : NoiseModel {
    const Tensor* eps = nullptr;
    bool frozen = true;
    bool backbone_frozen() const override { return frozen; }
    Var predict(const Var& x_t, std::span<const int>, const std::vector<TextCondition>&, const Tensor&) const override {
        return constant(eps ? *eps : Tensor(x_t->value.shape()));
    }
};

Batch random_batch(int n, int size, const diffusion::NoiseSchedule& schedule, Rng& rng) {
    Batch b;
    b.target = randn({n, 3, size, size}, rng);
    b.condition = randn({n, 4, size, size}, rng);
    b.eps = randn({n, 3, size, size}, rng);
    for (int i = 0; i < n; ++i) {
        b.t.push_back(uniform_int(rng, 1, schedule.T));
        b.text.push_back(i % 2 ? encode_text("a green disk") : TextCondition::null());
    }
    return b;
}

Tensor slice_item(const Tensor& t, int i) {
    const std::size_t per = t.size() / static_cast<std::size_t>(t.dim(0));
    Shape s = t.shape();
    s[0] = 1;
    RealBuffer buf(t.data() + per * i, t.data() + per * (i + 1));
    return Tensor(s, std::move(buf));
}

Tensor stack(const std::vector<Tensor>& items) {
    Shape s = items[0].shape();
    s[0] = static_cast<int>(items.size());
    RealBuffer buf;
    for (const auto& t : items) buf.insert(buf.end(), t.values().begin(), t.values().end());
    return Tensor(s, std::move(buf));
}

Batch permuted(const Batch& b, const std::vector<int>& order) {
    Batch out;
    std::vector<Tensor> tg, cd, ep;
    for (int i : order) {
        tg.push_back(slice_item(b.target, i));
        cd.push_back(slice_item(b.condition, i));
        ep.push_back(slice_item(b.eps, i));
        out.t.push_back(b.t[static_cast<std::size_t>(i)]);
        out.text.push_back(b.text[static_cast<std::size_t>(i)]);
    }
    out.target = stack(tg);
    out.condition = stack(cd);
    out.eps = stack(ep);
    return out;
}

// Rendered at the smallest scene size, then shrunk to the tiny spec.
std::vector<datasetgen::LoadedSample> tiny_data(int count, std::uint64_t seed) {
    std::vector<datasetgen::LoadedSample> out;
    Rng rng(seed);
    for (int i = 0; i < count; ++i) {
        const auto scene = datasetgen::render_synthetic_scene(16, rng);
        auto sample = datasetgen::build_sample(scene.image, scene.bbox, datasetgen::AugmentationConfig{}, rng,
                                               &scene.matte, datasetgen::caption_for(scene.info));
        out.push_back({imaging::resize_bilinear(sample.target, 8, 8), imaging::resize_bilinear(sample.composite.image, 8, 8),
                       imaging::resize_nearest(sample.composite.mask, 8, 8), sample.caption});
    }
    return out;
}

TrainConfig short_run(int steps) {
    TrainConfig c;
    c.steps = steps;
    c.batch = 2;
    c.lr = 1e-3;
    c.seed = 5;
    return c;
}

}  // namespace

TEST_CASE("loss against stub predictors") {
    const auto schedule = diffusion::linear_schedule(20);
    Rng rng(1);
    const Batch b = random_batch(4, 32, schedule, rng);  // 12288 elements
    StubModel oracle;
    oracle.eps = &b.eps;
    CHECK(phd_loss(oracle, b, schedule)->value[0] == 0);

    StubModel zero;
    double mean_sq = 0;
    for (Real v : b.eps.values()) mean_sq += static_cast<double>(v) * v;
    mean_sq /= static_cast<double>(b.eps.size());
    const double l = phd_loss(zero, b, schedule)->value[0];
    CHECK(l == doctest::Approx(mean_sq).epsilon(1e-5));
    CHECK(std::abs(l - 1.0) < 0.05);

    StubModel thawed;
    thawed.frozen = false;
    CHECK_THROWS_AS(phd_loss(thawed, b, schedule), FrozenViolation);
}

TEST_CASE("loss is invariant to batch permutation") {
    const auto schedule = diffusion::linear_schedule(20);
    const auto bundle = test::tiny_bundle(2);
    const PhdModel model(*bundle.backbone, *bundle.harmonizer);
    Rng rng(2);
    const Batch b = random_batch(4, 8, schedule, rng);
    const double base = phd_loss(model, b, schedule)->value[0];
    for (const auto& order : {std::vector<int>{3, 2, 1, 0}, std::vector<int>{1, 3, 0, 2}}) {
        CHECK(phd_loss(model, permuted(b, order), schedule)->value[0] == doctest::Approx(base).epsilon(1e-6));
    }
}

TEST_CASE("untrained harmonizer leaves the backbone loss unchanged") {
    const auto schedule = diffusion::linear_schedule(20);
    const auto bundle = test::tiny_bundle(3, false);
    const PhdModel model(*bundle.backbone, *bundle.harmonizer);
    Rng rng(3);
    const Batch b = random_batch(3, 8, schedule, rng);
    const Tensor x_t = noised_batch(b, schedule);
    const Var plain = ops::mse(bundle.backbone->forward(constant(x_t), b.t, bundle.backbone->embed_text(b.text)), b.eps);
    CHECK(phd_loss(model, b, schedule)->value[0] == plain->value[0]);
}

TEST_CASE("noised_batch applies q_sample per item") {
    const auto schedule = diffusion::linear_schedule(20);
    Rng rng(4);
    const Batch b = random_batch(2, 4, schedule, rng);
    const Tensor x = noised_batch(b, schedule);
    for (int i = 0; i < 2; ++i) {
        const Tensor want = diffusion::q_sample(slice_item(b.target, i), b.t[static_cast<std::size_t>(i)],
                                                slice_item(b.eps, i), schedule);
        CHECK(slice_item(x, i) == want);
    }
}

TEST_CASE("cfg_dropout") {
    const TextCondition text = encode_text("a red disk");
    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        CHECK(cfg_dropout(text, 0.0, rng) == text);
        CHECK(cfg_dropout(text, 1.0, rng).is_null);
    }
    int nulls = 0;
    for (int i = 0; i < 20000; ++i) nulls += cfg_dropout(text, 0.5, rng).is_null;
    CHECK(nulls / 20000.0 >= 0.48);
    CHECK(nulls / 20000.0 <= 0.52);
}

TEST_CASE("train config validation and serialization") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.lr = 0;
    CHECK_THROWS(c.validate());
    c = TrainConfig{};
    c.batch = 0;
    CHECK_THROWS(c.validate());
    c = TrainConfig{};
    c.cfg_dropout = 1.5;
    CHECK_THROWS(c.validate());
    c = TrainConfig{};
    CHECK(c.lr == 1e-4);
    CHECK(c.batch == 8);
    CHECK(c.cfg_dropout == 0.5);
    CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
}

TEST_CASE("training requires a frozen, matching backbone") {
    const auto data = tiny_data(4, 1);
    const auto schedule = diffusion::linear_schedule(20);
    backbone::Backbone open(test::tiny_spec(), 1);
    harmonizer::Harmonizer phi = harmonizer::Harmonizer::init_from_backbone(open, 2);
    CHECK_THROWS_AS(train_harmonizer(phi, open, data, schedule, short_run(1)), FrozenViolation);

    backbone::Backbone other(test::tiny_spec(), 9);
    other.freeze();
    CHECK_THROWS_AS(train_harmonizer(phi, other, data, schedule, short_run(1)), std::invalid_argument);
    open.freeze();
    CHECK_THROWS_AS(train_harmonizer(phi, open, std::vector<datasetgen::LoadedSample>{}, schedule, short_run(1)), std::invalid_argument);
}

TEST_CASE("zero steps leave the harmonizer untouched") {
    const auto data = tiny_data(4, 1);
    const auto bundle = test::tiny_bundle(4, false);
    harmonizer::Harmonizer phi = *bundle.harmonizer;
    const std::string before = phi.checksum();
    const TrainResult r = train_harmonizer(phi, *bundle.backbone, data, bundle.schedule, short_run(0));
    CHECK(r.history.empty());
    CHECK(phi.checksum() == before);
}

TEST_CASE("a short run moves only the harmonizer, deterministically") {
    const auto dir = test::scratch("training_run");
    const auto data = tiny_data(6, 2);
    const auto bundle = test::tiny_bundle(5, false);
    const std::string bb_before = bundle.backbone->checksum();

    harmonizer::Harmonizer a = harmonizer::Harmonizer::init_from_backbone(*bundle.backbone, 6);
    harmonizer::Harmonizer b = harmonizer::Harmonizer::init_from_backbone(*bundle.backbone, 6);
    const harmonizer::Harmonizer initial = harmonizer::Harmonizer::init_from_backbone(*bundle.backbone, 6);
    TrainConfig cfg = short_run(12);
    cfg.loss_csv = dir / "loss.csv";
    cfg.checkpoint_path = dir / "h.phd";
    int seen = 0;
    cfg.on_step = [&](const LossRecord& r) { CHECK(r.step == ++seen); };
    const TrainResult ra = train_harmonizer(a, *bundle.backbone, data, bundle.schedule, cfg);
    cfg.on_step = nullptr;
    cfg.loss_csv.clear();
    cfg.checkpoint_path.clear();
    const TrainResult rb = train_harmonizer(b, *bundle.backbone, data, bundle.schedule, cfg);

    CHECK(seen == 12);
    CHECK(bundle.backbone->checksum() == bb_before);
    CHECK(a.checksum() == b.checksum());
    REQUIRE(ra.history.size() == 12);
    for (std::size_t i = 0; i < 12; ++i) CHECK(ra.history[i].loss == rb.history[i].loss);

    bool projection_moved = false;
    for (const auto& [name, v] : a.params().entries()) {
        if (harmonizer::Harmonizer::is_projection(name) && v->value.max_abs() > 0) projection_moved = true;
    }
    CHECK(projection_moved);
    // The backbone holds no harmonizer tensors, so any change is confined to phi.
    for (const auto& [name, v] : bundle.backbone->params().entries()) CHECK_FALSE(harmonizer::Harmonizer::is_projection(name));
    CHECK(a.checksum() != initial.checksum());

    // Learning-rate schedule is cosine from the configured base.
    CHECK(ra.history[0].lr == doctest::Approx(1e-3));
    for (std::size_t i = 1; i < 12; ++i) CHECK(ra.history[i].lr < ra.history[i - 1].lr);

    const std::string csv = test::slurp(dir / "loss.csv");
    CHECK(csv.rfind("step,loss,loss_ma100,lr\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);
    CHECK(harmonizer::Harmonizer::load(dir / "h.phd", *bundle.backbone).checksum() == a.checksum());
}

TEST_CASE("gradient check harness") {
    const auto bundle = test::tiny_bundle(6);
    Rng rng(7);
    const Batch b = random_batch(1, 8, bundle.schedule, rng);
    harmonizer::Harmonizer phi = *bundle.harmonizer;
    const GradientReport zero_tol = gradient_check(phi, *bundle.backbone, b, bundle.schedule, 0.0, 6, 1e-2, 1);
    CHECK_FALSE(zero_tol.passed);
    CHECK(zero_tol.entries.size() == 6);
    CHECK(zero_tol.to_json().contains("max_rel_error"));
    // A projection at exact zero with nothing upstream: both gradients vanish.
    CHECK(relative_error(0.0, 0.0) == 0.0);
}
