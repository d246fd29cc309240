#include <doctest.h>

#include <cmath>

#include "phd/evalsuite.hpp"
#include "test_support.hpp"

using namespace phd;
using namespace phd::evalsuite;

namespace {

// Mean color per channel plus a constant, normalized. Text maps to the
// embedding of a flat image of the color named by the caption.
struct ColorExtractor : FeatureExtractor {
    std::string name() const override { return "mean-color"; }
    int dim() const override { return 4; }
    VectorXd embed(const imaging::RasterImage& image) const override {
        VectorXd v = VectorXd::Zero(4);
        const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
        for (std::size_t i = 0; i < image.pixels.size(); ++i) v[static_cast<Eigen::Index>(i / plane)] += image.pixels[i];
        v.head(3) /= static_cast<double>(plane);
        v[3] = 0.25;
        return v.normalized();
    }
    VectorXd embed_text(const std::string& text) const override {
        if (text.empty()) return VectorXd::Unit(4, 3);
        imaging::RasterImage flat(4, 4, 0.0f);
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) flat.at(text == "red" ? 0 : 2, y, x) = 1.0f;
        return embed(flat);
    }
};

std::vector<imaging::RasterImage> scenes(int count, std::uint64_t seed, int size = 16) {
    std::vector<imaging::RasterImage> out;
    Rng rng(seed);
    for (int i = 0; i < count; ++i) out.push_back(datasetgen::render_synthetic_scene(size, rng).image);
    return out;
}

pipeline::EditOptions quick(pipeline::EditMode mode) {
    pipeline::EditOptions o;
    o.mode = mode;
    o.sampler.steps = 4;
    o.sampler.guidance = 2.0;
    return o;
}

Benchmark small_benchmark(const std::filesystem::path& dir, int count) {
    SyntheticBenchmarkConfig c;
    c.count = count;
    c.image_size = 16;
    c.reference_count = 8;
    c.seed = 31;
    write_synthetic_benchmark(dir, c);
    return load_benchmark(dir);
}

}  // namespace

TEST_CASE("frechet distance closed forms") {
    const VectorXd zero = VectorXd::Zero(1), one = VectorXd::Ones(1);
    const MatrixXd unit = MatrixXd::Identity(1, 1);
    CHECK(std::abs(frechet_distance(zero, unit, one, unit) - 1.0) < 1e-9);
    for (int d : {1, 3, 7}) {
        const VectorXd mu = VectorXd::Constant(d, 0.3);
        const MatrixXd i = MatrixXd::Identity(d, d);
        CHECK(frechet_distance(mu, 4 * i, mu, i) == doctest::Approx(d).epsilon(1e-9));
    }
    CHECK_THROWS_AS(frechet_distance(zero, unit, VectorXd::Zero(2), MatrixXd::Identity(2, 2)), std::invalid_argument);
    MatrixXd bad = MatrixXd::Identity(2, 2);
    bad(1, 1) = -1;
    CHECK_THROWS_AS(frechet_distance(VectorXd::Zero(2), bad, VectorXd::Zero(2), MatrixXd::Identity(2, 2)),
                    std::invalid_argument);
}

TEST_CASE("frechet distance properties over random Gaussians") {
    Rng rng(3);
    for (int trial = 0; trial < 25; ++trial) {
        const int d = uniform_int(rng, 1, 6);
        auto random_fit = [&] {
            MatrixXd f(d + 6, d);
            for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = (uniform01(rng) - 0.5) * (1 + trial % 3);
            return fit_gaussian(f);
        };
        const GaussianFit a = random_fit(), b = random_fit();
        CHECK(frechet_distance(a.mu, a.cov, a.mu, a.cov) < 1e-6);
        const double ab = frechet_distance(a.mu, a.cov, b.mu, b.cov), ba = frechet_distance(b.mu, b.cov, a.mu, a.cov);
        CHECK(ab >= 0);
        CHECK(std::abs(ab - ba) < 1e-6);
    }
}

TEST_CASE("fit_gaussian shrinks small sets toward the diagonal") {
    MatrixXd f(2, 3);
    f << 1, 2, 3, 3, 2, 1;
    const GaussianFit g = fit_gaussian(f);
    // Sample covariance: [[2,0,-2],[0,0,0],[-2,0,2]].
    CHECK(g.cov(0, 0) == doctest::Approx(2.0));
    CHECK(g.cov(0, 2) == doctest::Approx(-1.8));
    CHECK(g.mu(1) == doctest::Approx(2.0));
    CHECK_THROWS_AS(fit_gaussian(MatrixXd(0, 3)), EmptySetError);
}

TEST_CASE("fid and clip scores") {
    const ConvEmbedder net(4);
    const auto x = scenes(6, 1);
    CHECK(fid(x, x, net) < 1e-6);
    const auto y = scenes(6, 2);
    CHECK(std::abs(fid(x, y, net) - fid(y, x, net)) < 1e-6);
    CHECK_THROWS_AS(fid({}, y, net), EmptySetError);
    CHECK_THROWS_AS(fid(x, {}, net), EmptySetError);
    for (const auto& img : x) CHECK(std::abs(clip_i(img, img, net) - 100.0) < 1e-4);
    CHECK(clip_i(x[0], x[1], net) == doctest::Approx(clip_i(x[1], x[0], net)).epsilon(1e-12));
    CHECK(cosine_score(VectorXd::Unit(5, 1), VectorXd::Unit(5, 3)) == 0);
    CHECK(net.embed(x[0]).norm() == doctest::Approx(1.0));
}

TEST_CASE("clip_t") {
    const ColorExtractor stub;
    imaging::RasterImage red(4, 4, 0.0f);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) red.at(0, y, x) = 1.0f;
    CHECK(clip_t(red, "red", stub) == doctest::Approx(100.0));
    CHECK(std::abs(clip_t(red, "blue", stub)) < 100.0);
    const ConvEmbedder net(4);
    const double empty = clip_t(red, "", net);
    CHECK(std::isfinite(empty));
    CHECK(clip_t(red, "", net) == empty);
    CHECK(clip_t(red, "a red disk", net) == clip_t(red, "a red disk", net));
}

TEST_CASE("embedder checkpoint round trip") {
    const auto dir = test::scratch("embedder");
    const ConvEmbedder net(9);
    net.save(dir / "e.phd");
    const ConvEmbedder back = ConvEmbedder::load(dir / "e.phd");
    CHECK(back.checksum() == net.checksum());
    const auto img = scenes(1, 5)[0];
    CHECK(back.embed(img) == net.embed(img));
}

TEST_CASE("split-half fid is below the fid between corpora of distinct seeds") {
    const ConvEmbedder net(4);
    const auto a = scenes(64, 101), b = scenes(64, 202);
    const std::vector<imaging::RasterImage> half1(a.begin(), a.begin() + 32), half2(a.begin() + 32, a.end());
    const std::vector<imaging::RasterImage> other(b.begin(), b.begin() + 32);
    const double within = fid(half1, half2, net), across = fid(half1, other, net);
    INFO("within " << within << " across " << across);
    CHECK(across > within);
}

TEST_CASE("benchmark harness with an identity editor") {
    const auto dir = test::scratch("bench_identity");
    const Benchmark bench = small_benchmark(dir / "bench", 6);
    REQUIRE(bench.items.size() == 6);
    const ConvEmbedder net(4);
    const Editor identity = [](const BenchmarkItem& item, std::uint64_t) {
        pipeline::EditResult r;
        r.composite = pipeline::make_composite({item.scene, item.exemplar, item.exemplar_matte, item.mask, item.caption});
        r.image = r.composite.image;
        return r;
    };
    BenchmarkConfig cfg;
    cfg.seed = 3;
    cfg.output_dir = dir / "out";
    const MetricReport r = run_benchmark(identity, bench, net, cfg);
    std::vector<imaging::RasterImage> composites, scene_set;
    for (const auto& item : bench.items) {
        composites.push_back(identity(item, 0).image);
        scene_set.push_back(item.scene);
    }
    CHECK(r.fid_scene == fid(composites, scene_set, net));
    CHECK(r.sample_count == 6);
    CHECK(r.failures == 0);
    REQUIRE(r.masked_mse.has_value());
    CHECK(r.clip_i <= 100);
    CHECK(r.clip_i >= -100);
    CHECK(r.extractor == net.name());
    CHECK(std::filesystem::exists(dir / "out" / "report.json"));
    CHECK(run_benchmark(identity, bench, net, cfg).digest() == r.digest());
    cfg.seed = 4;
    CHECK(run_benchmark(identity, bench, net, cfg).config_digest != r.config_digest);

    CHECK_THROWS_AS(run_benchmark(identity, Benchmark{}, net, cfg), EmptySetError);
    std::filesystem::create_directories(dir / "empty" / "scenes");
    CHECK_THROWS_AS(load_benchmark(dir / "empty"), EmptySetError);
}

TEST_CASE("benchmark records failures and aborts past 10%") {
    const auto dir = test::scratch("bench_fail");
    const Benchmark bench = small_benchmark(dir, 10);
    const ConvEmbedder net(4);
    int calls = 0;
    const Editor one_bad = [&](const BenchmarkItem& item, std::uint64_t) {
        if (calls++ == 2) throw std::runtime_error("boom");
        pipeline::EditResult r;
        r.image = item.scene;
        return r;
    };
    const MetricReport r = run_benchmark(one_bad, bench, net, {});
    CHECK(r.failures == 1);
    CHECK(r.sample_count == 9);
    CHECK_FALSE(r.per_sample[2].ok);
    CHECK(r.per_sample[2].error == "boom");

    calls = 0;
    const Editor two_bad = [&](const BenchmarkItem& item, std::uint64_t) {
        if (calls++ % 4 == 1) throw std::runtime_error("boom");
        pipeline::EditResult r;
        r.image = item.scene;
        return r;
    };
    CHECK_THROWS_WITH_AS(run_benchmark(two_bad, bench, net, {}), doctest::Contains("aborted"), std::runtime_error);
}

TEST_CASE("ablation equivalences on a tiny model") {
    const auto dir = test::scratch("ablation");
    const Benchmark bench = small_benchmark(dir, 3);
    const auto models = test::tiny_bundle(21);
    const int k = models.harmonizer->connections();

    for (const auto& item : bench.items) {
        const auto run = [&](pipeline::EditMode mode, int disconnect) {
            pipeline::EditOptions o = quick(mode);
            o.disconnect_k = disconnect;
            return make_editor(models, o)(item, 77).image;
        };
        const auto full = run(pipeline::EditMode::kFull, -1);
        const auto inpaint = run(pipeline::EditMode::kInpaint, -1);
        CHECK(run(pipeline::EditMode::kFull, 0) == inpaint);
        CHECK(run(pipeline::EditMode::kFull, k) == full);
        CHECK_FALSE(full == inpaint);
    }

    const ColorExtractor stub;
    BenchmarkConfig cfg;
    cfg.seed = 5;
    const auto report = [&](const std::string& mode) {
        return run_ablation(AblationMode::parse(mode), models, {}, bench, stub, quick(pipeline::EditMode::kFull), cfg);
    };
    const MetricReport d0 = report("disconnect_k(0)"), inp = report("inpaint");
    CHECK(d0.clip_i == inp.clip_i);
    CHECK(d0.fid_scene == inp.fid_scene);
    CHECK(d0.masked_mse == inp.masked_mse);
    const MetricReport dk = report("disconnect_k(" + std::to_string(k) + ")"), full = report("full");
    CHECK(dk.clip_i == full.clip_i);
    CHECK(dk.fid_scene == full.fid_scene);
    CHECK_THROWS_AS(report("disconnect_k(" + std::to_string(k + 1) + ")"), std::out_of_range);
    CHECK_THROWS_AS(report("finetune_backbone"), MissingArtifact);
    CHECK_THROWS_AS(report("no_augmentation"), MissingArtifact);
}

TEST_CASE("img2img at zero strength returns the composite") {
    const auto dir = test::scratch("i2i");
    const Benchmark bench = small_benchmark(dir, 2);
    const auto models = test::tiny_bundle(22);
    pipeline::EditOptions o = quick(pipeline::EditMode::kImg2Img);
    o.img2img_strength = 0.0;
    for (const auto& item : bench.items) {
        const pipeline::EditResult r = make_editor(models, o)(item, 1);
        CHECK(r.image == r.composite.image);
        CHECK(r.model_output == imaging::resize_bilinear(r.composite.image, models.resolution(), models.resolution()));
    }
}

TEST_CASE("scene generation") {
    const auto models = test::tiny_bundle(23);
    Rng rng(2);
    const auto scene = datasetgen::render_synthetic_scene(16, rng);
    const imaging::Exemplar ex = imaging::extract_subject(scene.image, scene.matte);
    const imaging::Composite c = scene_generation_composite(ex, 8);
    std::size_t on = 0;
    for (auto b : c.mask.bits) on += b != 0;
    CHECK(on == 64);
    pipeline::EditOptions o = quick(pipeline::EditMode::kFull);
    o.sampler.seed = 9;
    const auto a = scene_generation(ex, "a photo of a red disk in a field", models, o);
    CHECK(a == scene_generation(ex, "a photo of a red disk in a field", models, o));
    const auto empty = scene_generation(ex, "", models, o);
    CHECK(empty.height == a.height);
    CHECK_FALSE(empty == a);
}

TEST_CASE("ablation mode names") {
    for (const char* s : {"full", "i2i", "inpaint", "inpaint_null", "finetune_backbone", "no_augmentation"})
        CHECK(AblationMode::parse(s).to_string() == s);
    const AblationMode d = AblationMode::parse("disconnect_k(3)");
    CHECK(d.kind == AblationMode::kDisconnect);
    CHECK(d.k == 3);
    CHECK(AblationMode::parse(d.to_string()).k == 3);
    CHECK(AblationMode::parse("disconnect_k=5").k == 5);
    CHECK_THROWS_AS(AblationMode::parse("ldm++"), std::invalid_argument);
}

TEST_CASE("masked_mse") {
    imaging::RasterImage a(2, 2, 0.0f), b(2, 2, 0.0f);
    b.at(1, 0, 1) = 0.5f;
    b.at(0, 1, 1) = 1.0f;
    imaging::BinaryMask m(2, 2, 0);
    m.at(0, 1) = 1;
    CHECK(masked_mse(a, b, m) == doctest::Approx(0.25 / 3));
    CHECK_THROWS_AS(masked_mse(a, b, imaging::BinaryMask(2, 2, 0)), EmptySetError);
}
