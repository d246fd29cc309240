#include <doctest.h>

#include <filesystem>

#include "phd/backbone.hpp"
#include "phd/core/ops.hpp"
#include "phd/core/optim.hpp"

using namespace phd;
using namespace phd::backbone;

namespace {

UNetSpec tiny_spec() {
    UNetSpec s;
    s.base_width = 8;
    s.channel_mult = {1, 2};
    s.attention_levels = {1};
    s.time_embed_dim = 16;
    s.text_dim = 8;
    s.image_size = 8;
    s.groups = 4;
    return s;
}

// Independent parameter count, written from the layer list rather than the store.
long long expected_params(const UNetSpec& s) {
    auto conv = [](long long i, long long o, long long k) { return o * i * k * k + o; };
    auto gn = [](long long c) { return 2 * c; };
    auto lin = [](long long i, long long o) { return o * i + o; };
    auto res = [&](long long i, long long o) {
        return gn(i) + conv(i, o, 3) + lin(s.time_embed_dim, o) + gn(o) + conv(o, o, 3) + (i != o ? conv(i, o, 1) : 0);
    };
    auto attn = [&](long long c) { return gn(c) + lin(c, c) + 2 * lin(s.text_dim, c) + lin(c, c); };
    long long n = lin(s.base_width, s.time_embed_dim) + lin(s.time_embed_dim, s.time_embed_dim);
    n += (TextCondition::kVocabulary + 1LL + 2LL * TextCondition::kMaxTokens) * s.text_dim;
    n += conv(s.in_channels, s.width(0), 3);
    std::vector<long long> skips{s.width(0)};
    long long ch = s.width(0);
    for (int l = 0; l < s.levels(); ++l) {
        for (int r = 0; r < s.res_blocks; ++r) {
            n += res(ch, s.width(l));
            ch = s.width(l);
            if (s.has_attention(l)) n += attn(ch);
            skips.push_back(ch);
        }
        if (l + 1 < s.levels()) {
            n += conv(ch, ch, 3);
            skips.push_back(ch);
        }
    }
    n += 2 * res(ch, ch) + attn(ch);
    for (int l = s.levels() - 1; l >= 0; --l) {
        for (int r = 0; r <= s.res_blocks; ++r) {
            n += res(ch + skips.back(), s.width(l));
            skips.pop_back();
            ch = s.width(l);
            if (s.has_attention(l)) n += attn(ch);
        }
    }
    n += gn(ch) + conv(ch, s.in_channels, 3);
    return n;
}

Tensor random_input(const UNetSpec& s, int n, std::uint64_t seed) {
    Rng rng(seed);
    return randn({n, s.in_channels, s.image_size, s.image_size}, rng);
}

}  // namespace

TEST_CASE("encode_text tokenization") {
    CHECK(encode_text("").is_null);
    CHECK(encode_text("   ").is_null);
    const auto a = encode_text("a photo of a red disk");
    CHECK_FALSE(a.is_null);
    CHECK(a.filled() == 6);
    CHECK(TextCondition::kMaxTokens - a.filled() == 10);
    CHECK(a == encode_text("a photo of a red disk"));
    CHECK(a == encode_text("A Photo  of a RED disk"));
    CHECK(a.token_ids[0] == a.token_ids[3]);
    std::string many;
    for (int i = 0; i < 30; ++i) many += "w" + std::to_string(i) + " ";
    CHECK(encode_text(many).filled() == TextCondition::kMaxTokens);
    CHECK_THROWS(encode_text(std::string(257, 'x')));
}

TEST_CASE("spec validation") {
    UNetSpec s;
    CHECK_NOTHROW(s.validate());
    s.channel_mult = {1};
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s = UNetSpec{};
    s.image_size = 62;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s = UNetSpec{};
    s.base_width = 4;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    CHECK(UNetSpec::from_json(UNetSpec{}.to_json()).to_json() == UNetSpec{}.to_json());
}

TEST_CASE("connection count and shapes") {
    UNetSpec s;
    CHECK(s.connections() == 6);
    const auto shapes = s.connection_shapes();
    REQUIRE(shapes.size() == 6);
    CHECK(shapes[0] == Shape{16, 64, 64});
    CHECK(shapes[2] == Shape{16, 32, 32});
    CHECK(shapes[5] == Shape{32, 16, 16});
    s.channel_mult = {1, 2, 2, 4};
    s.res_blocks = 2;
    s.image_size = 32;
    CHECK(s.connections() == 12);
    CHECK(s.connection_shapes().size() == 12);
}

TEST_CASE("parameter count matches the layer formula") {
    UNetSpec s;
    s.base_width = 32;
    s.channel_mult = {1, 2, 4};
    s.attention_levels = {2};
    s.image_size = 16;
    Backbone b(s, 1);
    CHECK(static_cast<long long>(b.params().parameter_count()) == expected_params(s));
    Backbone t(tiny_spec(), 1);
    CHECK(static_cast<long long>(t.params().parameter_count()) == expected_params(tiny_spec()));
}

TEST_CASE("init is deterministic per seed") {
    CHECK(init_backbone(tiny_spec(), 3).checksum() == init_backbone(tiny_spec(), 3).checksum());
    CHECK(init_backbone(tiny_spec(), 3).checksum() != init_backbone(tiny_spec(), 4).checksum());
    CHECK_FALSE(init_backbone(tiny_spec(), 3).frozen());
}

TEST_CASE("forward shape and zero-injection neutrality") {
    Backbone b(tiny_spec(), 5);
    b.freeze();
    const Tensor x = random_input(b.spec(), 2, 9);
    const TextCondition text = encode_text("a red disk");
    const Tensor plain = b.predict_noise(x, 17, text, nullptr);
    CHECK(plain.shape() == x.shape());
    CHECK(plain.all_finite());

    ConditionFeatures zeros;
    for (const auto& s : b.spec().connection_shapes()) zeros.maps.push_back(constant(Tensor({2, s[0], s[1], s[2]})));
    CHECK(b.predict_noise(x, 17, text, &zeros) == plain);
    CHECK(b.predict_noise(x, 17, text, nullptr) == plain);
    CHECK(b.predict_noise(x, 17, TextCondition::null(), nullptr) != plain);

    ConditionFeatures bumped = zeros;
    bumped.maps[1] = constant(Tensor(zeros.maps[1]->value.shape(), Real(0.5)));
    CHECK(b.predict_noise(x, 17, text, &bumped) != plain);
}

TEST_CASE("injection shape errors name the connection") {
    Backbone b(tiny_spec(), 5);
    const Tensor x = random_input(b.spec(), 1, 2);
    ConditionFeatures bad;
    for (const auto& s : b.spec().connection_shapes()) bad.maps.push_back(constant(Tensor({1, s[0], s[1], s[2]})));
    bad.maps[2] = constant(Tensor({1, 3, 4, 4}));
    try {
        b.predict_noise(x, 1, TextCondition::null(), &bad);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("injected feature 2") != std::string::npos);
    }
    bad.maps.pop_back();
    CHECK_THROWS_AS(b.predict_noise(x, 1, TextCondition::null(), &bad), ShapeError);
    CHECK_THROWS_AS(b.predict_noise(Tensor({1, 3, 16, 16}), 1, TextCondition::null(), nullptr), ShapeError);
}

TEST_CASE("freeze blocks optimizer updates") {
    Backbone b(tiny_spec(), 5);
    b.freeze();
    b.freeze();
    CHECK(b.frozen());
    CHECK_THROWS_AS(AdamW(b.params(), AdamWConfig{}), ImmutableError);
    Backbone u = b.unfrozen_copy();
    CHECK_FALSE(u.frozen());
    CHECK(u.checksum() == b.checksum());
    CHECK_NOTHROW(AdamW(u.params(), AdamWConfig{}));
}

TEST_CASE("clone is independent") {
    Backbone b(tiny_spec(), 5);
    Backbone c = b.clone();
    c.params().entries()[0].second->value[0] += 1;
    CHECK(c.checksum() != b.checksum());
}

TEST_CASE("checkpoint round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "phd_backbone_ckpt";
    std::filesystem::create_directories(dir);
    Backbone b(tiny_spec(), 8);
    b.freeze();
    const auto sched = diffusion::linear_schedule(50);
    b.save(dir / "b.phd", sched, 12);
    diffusion::NoiseSchedule loaded_sched;
    Backbone l = Backbone::load(dir / "b.phd", &loaded_sched);
    CHECK(l.checksum() == b.checksum());
    CHECK(l.frozen());
    CHECK(loaded_sched.T == 50);
    CHECK(loaded_sched.alpha_bars == sched.alpha_bars);
    const Tensor x = random_input(l.spec(), 1, 4);
    CHECK(l.predict_noise(x, 3, TextCondition::null(), nullptr) == b.predict_noise(x, 3, TextCondition::null(), nullptr));
    CHECK_THROWS(Backbone::load(dir / "missing.phd"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("pretraining: zero steps leave params unchanged, runs are deterministic") {
    imaging::RasterImage img(8, 8);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(i % 7) / 7.0f;
    std::vector<imaging::RasterImage> images{img, img};
    std::vector<std::string> caps{"a red disk", "a blue square"};
    const auto sched = diffusion::linear_schedule(50);

    Backbone a(tiny_spec(), 2);
    const std::string before = a.checksum();
    PretrainConfig cfg;
    cfg.steps = 0;
    CHECK(pretrain_backbone(a, images, caps, sched, cfg).losses.empty());
    CHECK(a.checksum() == before);

    cfg.steps = 3;
    cfg.batch = 2;
    Backbone b(tiny_spec(), 2), c(tiny_spec(), 2);
    const auto rb = pretrain_backbone(b, images, caps, sched, cfg);
    const auto rc = pretrain_backbone(c, images, caps, sched, cfg);
    CHECK(rb.losses == rc.losses);
    CHECK(b.checksum() == c.checksum());
    CHECK(b.checksum() != before);
    CHECK_THROWS(pretrain_backbone(b, {}, {}, sched, cfg));
}
