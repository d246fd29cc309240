#include <doctest.h>

#include <cmath>
#include <map>

#include "phd/datasetgen.hpp"
#include "test_support.hpp"

using namespace phd;
using namespace phd::datasetgen;

namespace {

// Opaque disk exemplar on a transparent square, soft edge.
Exemplar disk(int size) {
    Exemplar e{RasterImage(size, size), AlphaMatte(size, size)};
    const double c = size / 2.0, r = size * 0.4;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double d = std::hypot(y + 0.5 - c, x + 0.5 - c);
            const float a = static_cast<float>(std::clamp(r + 0.5 - d, 0.0, 1.0));
            e.matte.at(y, x) = a;
            e.image.at(0, y, x) = a > 0 ? 0.8f : 0.0f;
            e.image.at(1, y, x) = a > 0 ? static_cast<float>(x) / size : 0.0f;
            e.image.at(2, y, x) = a > 0 ? 0.3f : 0.0f;
        }
    return e;
}

AlphaMatte binarize(const AlphaMatte& m) {
    AlphaMatte out = m;
    for (auto& v : out.values) v = v >= 0.5f ? 1.0f : 0.0f;
    return out;
}

AugmentationConfig only(const char* name) {
    AugmentationConfig c = AugmentationConfig::none();
    const std::string n = name;
    if (n == "flip") c.p_flip = 1;
    if (n == "rotate") c.p_rotate = 1;
    if (n == "hsv") c.p_hsv = 1;
    if (n == "blur") c.p_blur = 1;
    if (n == "elastic") c.p_elastic = 1;
    return c;
}

}  // namespace

TEST_CASE("augmentation config validation") {
    AugmentationConfig c;
    CHECK_NOTHROW(c.validate());
    c.p_blur = 1.2;
    CHECK_THROWS(c.validate());
    c = AugmentationConfig{};
    c.blur_kernel_min = 4;
    CHECK_THROWS(c.validate());
    c = AugmentationConfig{};
    c.rotate_degrees = 200;
    CHECK_THROWS(c.validate());
    const AugmentationConfig d;
    CHECK(AugmentationConfig::from_json(d.to_json()).to_json() == d.to_json());
}

TEST_CASE("augment_subject with all probabilities zero is the identity") {
    const Exemplar e = disk(12);
    Rng rng(1);
    for (int i = 0; i < 50; ++i) {
        const Augmented a = augment_subject(e, AugmentationConfig::none(), rng);
        CHECK(a.exemplar == e);
        CHECK(a.applied.empty());
    }
}

TEST_CASE("flip is an involution") {
    const Exemplar e = disk(11);
    Rng rng(2);
    const Augmented once = augment_subject(e, only("flip"), rng);
    CHECK(once.applied == std::vector<std::string>{"flip"});
    CHECK_FALSE(once.exemplar == e);
    CHECK(augment_subject(once.exemplar, only("flip"), rng).exemplar == e);
}

TEST_CASE("each transform fires at its configured rate") {
    const Exemplar e = disk(6);
    AugmentationConfig c;
    Rng rng(3);
    std::map<std::string, int> counts;
    const int n = 20000;
    for (int i = 0; i < n; ++i)
        for (const auto& name : augment_subject(e, c, rng).applied) ++counts[name];
    for (const char* name : kTransformNames) {
        const double rate = static_cast<double>(counts[name]) / n;
        INFO(name << " rate " << rate);
        CHECK(rate >= 0.09);
        CHECK(rate <= 0.11);
    }
}

TEST_CASE("transforms keep the exemplar valid") {
    const Exemplar e = disk(16);
    Rng rng(4);
    for (const char* name : kTransformNames) {
        for (int i = 0; i < 20; ++i) {
            const Augmented a = augment_subject(e, only(name), rng);
            REQUIRE(a.applied.size() == 1);
            CHECK(a.exemplar.image.height == a.exemplar.matte.height);
            CHECK(a.exemplar.image.width == a.exemplar.matte.width);
            for (float v : a.exemplar.image.pixels) CHECK((v >= 0.0f && v <= 1.0f));
            for (float v : a.exemplar.matte.values) CHECK((v >= 0.0f && v <= 1.0f));
        }
    }
}

TEST_CASE("geometric transforms commute with matte thresholding") {
    // Edge alphas lifted into [0.5,1] so the soft and hard mattes share a support.
    Exemplar e = disk(96);
    for (auto& v : e.matte.values) v = v > 0 ? 0.5f + 0.5f * v : 0.0f;
    Exemplar hard = e;
    hard.matte = binarize(e.matte);
    for (double deg : {-30.0, -12.5, 7.0, 25.0}) {
        const AlphaMatte a = binarize(rotate_exemplar(e, deg).matte);
        const AlphaMatte b = rotate_exemplar(hard, deg).matte;
        REQUIRE(a.height == b.height);
        REQUIRE(a.width == b.width);
        double diff = 0;
        for (std::size_t i = 0; i < a.values.size(); ++i) diff += std::abs(a.values[i] - b.values[i]);
        CHECK(diff / a.values.size() < 0.02);
    }
    CHECK(binarize(imaging::flip_horizontal(e.matte)) == imaging::flip_horizontal(binarize(e.matte)));
}

TEST_CASE("rotation by zero degrees and blur on a flat subject are identities") {
    Exemplar flat{RasterImage(8, 8, 0.4f), AlphaMatte(8, 8, 1.0f)};
    const Exemplar r = rotate_exemplar(flat, 0);
    CHECK(r.image.height == 8);
    for (std::size_t i = 0; i < r.image.pixels.size(); ++i) CHECK(r.image.pixels[i] == doctest::Approx(0.4f));
    const Exemplar b = blur_exemplar(flat, 5);
    for (float v : b.image.pixels) CHECK(v == doctest::Approx(0.4f));
    CHECK(hsv_shift(flat, 0, 0, 0).image.pixels == flat.image.pixels);
}

TEST_CASE("irregular masks") {
    const BBox box{10, 12, 30, 24};
    Rng rng(5);
    CHECK(irregularize_mask(box, 64, 64, 0.0, rng) == imaging::make_mask(box, 64, 64));

    const BBox inner = inner_rect(box, 0.6), outer = dilated_rect(box, 1.1, 64, 64);
    for (int i = 0; i < 300; ++i) {
        bool irregular = false;
        const BinaryMask m = irregularize_mask(box, 64, 64, 1.0, rng, &irregular);
        CHECK(irregular);
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                const bool in_inner = x >= inner.x && x < inner.x + inner.w && y >= inner.y && y < inner.y + inner.h;
                const bool in_outer = x >= outer.x && x < outer.x + outer.w && y >= outer.y && y < outer.y + outer.h;
                if (in_inner) CHECK(m.at(y, x) == 1);
                if (!in_outer) CHECK(m.at(y, x) == 0);
            }
    }

    int count = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        bool irregular = false;
        irregularize_mask({4, 4, 8, 8}, 16, 16, 0.5, rng, &irregular);
        count += irregular;
    }
    CHECK(static_cast<double>(count) / n >= 0.48);
    CHECK(static_cast<double>(count) / n <= 0.52);
    CHECK_THROWS(irregularize_mask({60, 60, 10, 10}, 64, 64, 0.5, rng));
}

TEST_CASE("build_sample reconstruction identity") {
    // Opaque subject filling its box: composite equals target everywhere.
    RasterImage src = test::noise_image(32, 32, 6);
    AlphaMatte matte(32, 32);
    const BBox box{8, 6, 12, 10};
    for (int y = box.y; y < box.y + box.h; ++y)
        for (int x = box.x; x < box.x + box.w; ++x) matte.at(y, x) = 1.0f;
    Rng rng(7);
    const TrainingSample s = build_sample(src, box, AugmentationConfig::none(), rng, &matte, "cap");
    CHECK(s.target == src);
    CHECK(s.composite.image == src);
    CHECK(s.composite.mask == imaging::make_mask(box, 32, 32));
    CHECK(s.caption == "cap");

    // Soft-edged subject: inside the mask the composite is the alpha-weighted source over black.
    const Exemplar d = disk(10);
    RasterImage scene = test::noise_image(24, 24, 8);
    AlphaMatte m(24, 24);
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x) {
            m.at(y + 7, x + 5) = d.matte.at(y, x);
            for (int c = 0; c < 3; ++c) scene.at(c, y + 7, x + 5) = d.image.at(c, y, x);
        }
    const BBox tight{6, 8, 8, 8};  // rows and columns 1..8 of the disk reach alpha 0.5
    const TrainingSample t = build_sample(scene, tight, AugmentationConfig::none(), rng, &m);
    for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 24; ++x)
            for (int c = 0; c < 3; ++c) {
                const float want = t.composite.mask.at(y, x) ? m.at(y, x) * scene.at(c, y, x) : scene.at(c, y, x);
                CHECK(t.composite.image.at(c, y, x) == doctest::Approx(want).epsilon(1e-6));
            }
}

TEST_CASE("build_sample determinism and elastic difference") {
    const SyntheticScene scene = [] {
        Rng r(9);
        return render_synthetic_scene(48, r);
    }();
    AugmentationConfig c;
    Rng a(10), b(10);
    const TrainingSample s1 = build_sample(scene.image, scene.bbox, c, a, &scene.matte);
    const TrainingSample s2 = build_sample(scene.image, scene.bbox, c, b, &scene.matte);
    CHECK(s1.composite.image == s2.composite.image);
    CHECK(s1.composite.mask == s2.composite.mask);

    AugmentationConfig plain = AugmentationConfig::none();
    AugmentationConfig elastic = only("elastic");
    Rng p(11), q(11);
    const TrainingSample base = build_sample(scene.image, scene.bbox, plain, p, &scene.matte);
    const TrainingSample warped = build_sample(scene.image, scene.bbox, elastic, q, &scene.matte);
    CHECK(warped.target == base.target);
    CHECK(warped.applied == std::vector<std::string>{"elastic"});
    CHECK_FALSE(warped.composite.image == base.composite.image);
}

TEST_CASE("captions") {
    CHECK(caption_for({"red", "disk", "blue", ""}) == "a photo of a red disk on a blue background");
    CHECK(caption_for({"red", "disk", "blue", "my own words"}) == "my own words");
    CHECK(caption_for({}) == "a photo");
}

TEST_CASE("synthetic corpus") {
    const auto dir = test::scratch("corpus_a");
    CorpusConfig cfg;
    cfg.count = 1;
    cfg.image_size = 32;
    cfg.seed = 21;
    const DatasetManifest m = build_synthetic_corpus(dir, cfg);
    REQUIRE(m.size() == 1);
    Rng replay(derive_seed(cfg.seed, 0));
    const SyntheticScene scene = render_synthetic_scene(cfg.image_size, replay);
    CHECK(imaging::read_matte_png(m.resolve(m.samples[0].matte)) == scene.matte);
    CHECK(imaging::read_png(m.resolve(m.samples[0].target)) == scene.image);

    cfg.count = 40;
    const auto d1 = test::scratch("corpus_b"), d2 = test::scratch("corpus_c");
    const DatasetManifest m1 = build_synthetic_corpus(d1, cfg);
    build_synthetic_corpus(d2, cfg);
    CHECK(m1.size() == 40);
    for (const auto& e : m1.samples) {
        CHECK(e.bbox.within(32, 32));
        CHECK(e.caption.rfind("a photo of a ", 0) == 0);
        for (const auto* rel : {&e.target, &e.composite, &e.mask, &e.matte}) {
            CHECK(test::slurp(d1 / *rel) == test::slurp(d2 / *rel));
        }
    }
    CHECK(test::slurp(d1 / "manifest.json") == test::slurp(d2 / "manifest.json"));

    const DatasetManifest loaded = DatasetManifest::load(d1);
    CHECK(loaded.size() == 40);
    CHECK(loaded.seed == cfg.seed);
    const auto samples = load_samples(loaded);
    CHECK(samples[3].mask.area() > 0);

    std::filesystem::remove(d1 / m1.samples[5].composite);
    CHECK_THROWS(DatasetManifest::load(d1));
    CHECK_THROWS_AS(build_synthetic_corpus(d2, CorpusConfig{0}), std::invalid_argument);
}
