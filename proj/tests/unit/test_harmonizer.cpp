#include <doctest.h>

#include "phd/core/archive.hpp"
#include "phd/harmonizer.hpp"
#include "test_support.hpp"

using namespace phd;
using namespace phd::harmonizer;

namespace {

imaging::Composite random_composite(int size, std::uint64_t seed) {
    imaging::Composite c;
    c.image = test::noise_image(size, size, seed);
    c.bbox = {1, 2, size / 2, size / 2};
    c.mask = imaging::make_mask(c.bbox, size, size);
    return c;
}

bool all_zero(const Var& v) { return v->value.max_abs() == 0; }

}  // namespace

TEST_CASE("init copies the encoder and zeroes the projections") {
    backbone::Backbone bb(test::tiny_spec(), 1);
    const Harmonizer h = Harmonizer::init_from_backbone(bb, 2);
    int copied = 0, projections = 0;
    for (const auto& [name, v] : h.params().entries()) {
        if (Harmonizer::is_projection(name)) {
            ++projections;
            CHECK(all_zero(v));
        } else if (!Harmonizer::is_stem(name)) {
            REQUIRE(bb.params().contains(name));
            CHECK(v->value == bb.params().get(name)->value);
            ++copied;
        }
    }
    CHECK(projections == 2 * bb.spec().connections());  // weight and bias per connection
    CHECK(copied > 0);
    CHECK(h.backbone_checksum() == bb.checksum());
    CHECK(h.connections() == 4);
}

TEST_CASE("different seeds differ only in the stem") {
    backbone::Backbone bb(test::tiny_spec(), 1);
    const Harmonizer a = Harmonizer::init_from_backbone(bb, 2), b = Harmonizer::init_from_backbone(bb, 3);
    REQUIRE(a.params().entries().size() == b.params().entries().size());
    bool stem_differs = false;
    for (const auto& [name, v] : a.params().entries()) {
        const bool same = v->value == b.params().get(name)->value;
        if (Harmonizer::is_stem(name)) {
            stem_differs = stem_differs || !same;
        } else {
            CHECK_MESSAGE(same, name);
        }
    }
    CHECK(stem_differs);
}

TEST_CASE("gates") {
    CHECK(all_gates(4) == InjectionGates{true, true, true, true});
    CHECK(set_disconnect(all_gates(12), 0) == InjectionGates(12, false));
    CHECK(set_disconnect(all_gates(12), 12) == all_gates(12));
    const InjectionGates three = set_disconnect(all_gates(12), 3);
    CHECK(std::count(three.begin(), three.end(), true) == 3);
    CHECK(three[2]);
    CHECK_FALSE(three[3]);
    CHECK_THROWS_AS(set_disconnect(all_gates(4), 5), std::out_of_range);
    CHECK_THROWS_AS(set_disconnect(all_gates(4), -1), std::out_of_range);
}

TEST_CASE("condition tensor layout") {
    const imaging::Composite c = random_composite(8, 4);
    const Tensor t = condition_tensor(c);
    CHECK(t.shape() == Shape{1, 4, 8, 8});
    CHECK(t.at(0, 0, 3, 5) == doctest::Approx(c.image.at(0, 3, 5) * 2 - 1));
    CHECK(t.at(0, 3, 2, 1) == 1);
    CHECK(t.at(0, 3, 0, 0) == 0);
}

TEST_CASE("fresh harmonizer features are exactly zero") {
    backbone::Backbone bb(test::tiny_spec(), 1);
    const Harmonizer h = Harmonizer::init_from_backbone(bb, 2);
    Rng rng(3);
    for (int i = 0; i < 5; ++i) {
        const Tensor x = randn({1, 3, 8, 8}, rng);
        const ConditionFeatures f = h.encode_condition(random_composite(8, 10 + i), x, 1 + i * 4, all_gates(4));
        REQUIRE(f.size() == 4);
        for (const auto& m : f.maps) CHECK(all_zero(m));
    }
}

TEST_CASE("gated-off connections are zero, gated-on ones carry signal") {
    const auto bundle = test::tiny_bundle(7);
    const Harmonizer& h = *bundle.harmonizer;
    Rng rng(1);
    const Tensor x = randn({1, 3, 8, 8}, rng);
    const auto comp = random_composite(8, 5);
    CHECK(h.encode_condition(comp, x, 10, InjectionGates(4, false)).maps.size() == 4);
    for (const auto& m : h.encode_condition(comp, x, 10, InjectionGates(4, false)).maps) CHECK(all_zero(m));
    for (int keep = 0; keep <= 4; ++keep) {
        const auto f = h.encode_condition(comp, x, 10, set_disconnect(all_gates(4), keep));
        for (int k = 0; k < 4; ++k) CHECK(all_zero(f.maps[static_cast<std::size_t>(k)]) == (k >= keep));
    }
}

TEST_CASE("feature shapes match the decoder stages for random specs") {
    Rng rng(8);
    for (int trial = 0; trial < 8; ++trial) {
        backbone::UNetSpec s;
        s.groups = 4;
        s.base_width = 4 * uniform_int(rng, 2, 4);
        const int levels = uniform_int(rng, 2, 3);
        s.channel_mult.clear();
        for (int l = 0; l < levels; ++l) s.channel_mult.push_back(uniform_int(rng, 1, 2));
        s.res_blocks = uniform_int(rng, 1, 2);
        s.attention_levels = {levels - 1};
        s.time_embed_dim = 8;
        s.text_dim = 8;
        s.image_size = 4 << uniform_int(rng, 0, 1) << (levels - 1);
        s.validate();
        backbone::Backbone bb(s, trial);
        const Harmonizer h = Harmonizer::init_from_backbone(bb, trial);
        const int n = 2, size = s.image_size;
        const Tensor cond = randn({n, 4, size, size}, rng);
        const std::vector<int> ts{3, 9};
        const auto f = h.encode(cond, constant(randn({n, 3, size, size}, rng)), ts, all_gates(s.connections()));
        const auto shapes = s.connection_shapes();
        REQUIRE(f.size() == shapes.size());
        for (std::size_t k = 0; k < shapes.size(); ++k) {
            const Shape want{n, shapes[k][0], shapes[k][1], shapes[k][2]};
            CHECK(f.maps[k]->value.shape() == want);
        }
        // The backbone accepts them.
        CHECK_NOTHROW(bb.forward(constant(randn({n, 3, size, size}, rng)), ts,
                                 bb.embed_text({TextCondition::null(), encode_text("x")}), &f));
    }
}

TEST_CASE("zero-init transparency: sampling is bit-identical with a fresh harmonizer attached") {
    backbone::Backbone bb(test::tiny_spec(), 11);
    bb.freeze();
    const Harmonizer h = Harmonizer::init_from_backbone(bb, 12);
    const auto schedule = diffusion::linear_schedule(20);
    const char* prompts[] = {"a red disk", "", "a photo of a blue triangle on a green background"};
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        diffusion::SamplerConfig cfg;
        cfg.steps = 4;
        cfg.guidance = 2.0;
        cfg.kind = seed % 2 ? diffusion::SamplerKind::kAncestral : diffusion::SamplerKind::kDeterministic;
        const TextCondition text = encode_text(prompts[seed % 3]);
        BoundCondition bound(h, condition_tensor(random_composite(8, 100 + seed)), all_gates(h.connections()));
        Rng a(seed), b(seed);
        const auto with = diffusion::sample(bb, &bound, text, {1, 3, 8, 8}, schedule, cfg, a);
        const auto without = diffusion::sample(bb, nullptr, text, {1, 3, 8, 8}, schedule, cfg, b);
        CHECK(with == without);
    }
}

TEST_CASE("checkpoint round trip and backbone linkage") {
    const auto dir = test::scratch("harmonizer_ckpt");
    const auto bundle = test::tiny_bundle(3);
    bundle.harmonizer->save(dir / "h.phd", 17);
    const Harmonizer back = Harmonizer::load(dir / "h.phd", *bundle.backbone);
    CHECK(back.checksum() == bundle.harmonizer->checksum());
    CHECK(back.options().ipm_sees_latent);

    Rng rng(1);
    const Tensor x = randn({1, 3, 8, 8}, rng);
    const auto comp = random_composite(8, 2);
    const auto f1 = bundle.harmonizer->encode_condition(comp, x, 5, all_gates(4));
    const auto f2 = back.encode_condition(comp, x, 5, all_gates(4));
    for (std::size_t k = 0; k < 4; ++k) CHECK(f1.maps[k]->value == f2.maps[k]->value);

    backbone::Backbone other(test::tiny_spec(), 99);
    CHECK_THROWS(Harmonizer::load(dir / "h.phd", other));

    // Tampered tensor: stored checksum no longer matches.
    Archive ar = read_archive(dir / "h.phd");
    ar.params.get("proj.0.weight")->value[0] += 1.0f;
    write_archive(dir / "bad.phd", ar.meta, ar.params);
    CHECK_THROWS(Harmonizer::load(dir / "bad.phd", *bundle.backbone));

    // A backbone archive is not a harmonizer.
    bundle.backbone->save(dir / "b.phd", bundle.schedule);
    CHECK_THROWS(Harmonizer::load(dir / "b.phd", *bundle.backbone));
}

TEST_CASE("the latent path can be switched off") {
    backbone::Backbone bb(test::tiny_spec(), 1);
    HarmonizerOptions off;
    off.ipm_sees_latent = false;
    Harmonizer h = Harmonizer::init_from_backbone(bb, 2, off);
    Rng rng(4);
    for (auto& [name, v] : h.params().entries())
        if (Harmonizer::is_projection(name)) fill_normal(v->value, rng, 0.2);
    const auto comp = random_composite(8, 3);
    const auto a = h.encode_condition(comp, randn({1, 3, 8, 8}, rng), 5, all_gates(4));
    const auto b = h.encode_condition(comp, randn({1, 3, 8, 8}, rng), 5, all_gates(4));
    for (std::size_t k = 0; k < 4; ++k) CHECK(a.maps[k]->value == b.maps[k]->value);
    CHECK(HarmonizerOptions::from_json(off.to_json()).ipm_sees_latent == false);
}
