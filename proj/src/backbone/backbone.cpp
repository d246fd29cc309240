#include "phd/backbone.hpp"

#include <cmath>
#include <iostream>

#include "phd/core/archive.hpp"
#include "phd/core/ops.hpp"
#include "phd/core/optim.hpp"

namespace phd::backbone {

bool UNetSpec::has_attention(int level) const {
    return std::find(attention_levels.begin(), attention_levels.end(), level) != attention_levels.end();
}

void UNetSpec::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("invalid UNetSpec: " + msg); };
    if (in_channels < 1) fail("in_channels must be positive");
    if (levels() < 2) fail("at least 2 levels required");
    if (res_blocks < 1) fail("res_blocks must be >= 1");
    if (base_width < 8) fail("base width must be >= 8");
    for (int l = 0; l < levels(); ++l) {
        if (width(l) < 8) fail("every level width must be >= 8");
        if (width(l) % groups != 0) fail("level width not divisible by group count");
    }
    if (base_width % 2 != 0) fail("base width must be even (sinusoidal embedding)");
    if (time_embed_dim < 8 || text_dim < 8) fail("embedding dimensions must be >= 8");
    if (image_size % (1 << (levels() - 1)) != 0) fail("image size must be divisible by 2^(levels-1)");
    for (int l : attention_levels)
        if (l < 0 || l >= levels()) fail("attention level out of range");
}

nlohmann::json UNetSpec::to_json() const {
    return {{"in_channels", in_channels},       {"base_width", base_width}, {"channel_mult", channel_mult},
            {"res_blocks", res_blocks},         {"attention_levels", attention_levels},
            {"time_embed_dim", time_embed_dim}, {"text_dim", text_dim},     {"image_size", image_size},
            {"groups", groups}};
}

UNetSpec UNetSpec::from_json(const nlohmann::json& j) {
    UNetSpec s;
    s.in_channels = j.value("in_channels", s.in_channels);
    s.base_width = j.value("base_width", s.base_width);
    s.channel_mult = j.value("channel_mult", s.channel_mult);
    s.res_blocks = j.value("res_blocks", s.res_blocks);
    s.attention_levels = j.value("attention_levels", s.attention_levels);
    s.time_embed_dim = j.value("time_embed_dim", s.time_embed_dim);
    s.text_dim = j.value("text_dim", s.text_dim);
    s.image_size = j.value("image_size", s.image_size);
    s.groups = j.value("groups", s.groups);
    s.validate();
    return s;
}

std::vector<Shape> UNetSpec::connection_shapes() const {
    std::vector<Shape> out;
    int size = image_size;
    out.push_back({width(0), size, size});
    for (int l = 0; l < levels(); ++l) {
        for (int r = 0; r < res_blocks; ++r) out.push_back({width(l), size, size});
        if (l + 1 < levels()) {
            size /= 2;
            out.push_back({width(l), size, size});
        }
    }
    return out;
}

ResBlock ResBlock::build(ParamStore& store, Rng& rng, const std::string& name, int in, int out, int temb, int groups) {
    ResBlock b;
    b.norm1 = nn::group_norm(store, name + ".norm1", in, groups);
    b.conv1 = nn::conv2d(store, rng, name + ".conv1", in, out, 3);
    b.time_proj = nn::linear(store, rng, name + ".time", temb, out);
    b.norm2 = nn::group_norm(store, name + ".norm2", out, groups);
    b.conv2 = nn::conv2d(store, rng, name + ".conv2", out, out, 3);
    b.has_skip = in != out;
    if (b.has_skip) b.skip = nn::conv2d(store, rng, name + ".skip", in, out, 1);
    return b;
}

Var ResBlock::operator()(const Var& x, const Var& temb_act) const {
    Var h = conv1(ops::silu(norm1(x)));
    h = ops::add_channel(h, time_proj(temb_act));
    h = conv2(ops::silu(norm2(h)));
    return ops::add(has_skip ? skip(x) : x, h);
}

CrossAttention CrossAttention::build(ParamStore& store, Rng& rng, const std::string& name, int channels, int text_dim,
                                     int groups) {
    CrossAttention a;
    a.norm = nn::group_norm(store, name + ".norm", channels, groups);
    a.to_q = nn::linear(store, rng, name + ".q", channels, channels);
    a.to_k = nn::linear(store, rng, name + ".k", text_dim, channels);
    a.to_v = nn::linear(store, rng, name + ".v", text_dim, channels);
    a.to_out = nn::linear(store, rng, name + ".out", channels, channels);
    return a;
}

Var CrossAttention::operator()(const Var& x, const Var& context) const {
    const int c = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
    Var tokens = ops::to_tokens(norm(x));
    Var q = to_q(tokens);
    Var k = to_k(context);
    Var v = to_v(context);
    Var scores = ops::scale(ops::bmm(q, k, true), Real(1) / std::sqrt(static_cast<Real>(c)));
    Var attended = ops::bmm(ops::softmax_last(scores), v, false);
    return ops::add(x, ops::from_tokens(to_out(attended), h, w));
}

Tensor timestep_sinusoid(std::span<const int> timesteps, int dim) {
    const int half = dim / 2;
    Tensor out({static_cast<int>(timesteps.size()), dim});
    for (std::size_t n = 0; n < timesteps.size(); ++n) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            const double arg = timesteps[n] * freq;
            out[n * dim + i] = static_cast<Real>(std::cos(arg));
            out[n * dim + half + i] = static_cast<Real>(std::sin(arg));
        }
    }
    return out;
}

TimeEmbedding TimeEmbedding::build(ParamStore& store, Rng& rng, const UNetSpec& spec) {
    TimeEmbedding t;
    t.sinusoid_dim = spec.base_width;
    t.fc1 = nn::linear(store, rng, "time.fc1", spec.base_width, spec.time_embed_dim);
    t.fc2 = nn::linear(store, rng, "time.fc2", spec.time_embed_dim, spec.time_embed_dim);
    return t;
}

Var TimeEmbedding::operator()(std::span<const int> timesteps) const {
    Var s = constant(timestep_sinusoid(timesteps, sinusoid_dim));
    return ops::silu(fc2(ops::silu(fc1(s))));
}

Encoder Encoder::build(ParamStore& store, Rng& rng, const UNetSpec& spec) {
    Encoder e;
    int ch = spec.width(0);
    for (int l = 0; l < spec.levels(); ++l) {
        Level lv;
        for (int r = 0; r < spec.res_blocks; ++r) {
            const std::string name = "enc." + std::to_string(l) + "." + std::to_string(r);
            lv.blocks.push_back(ResBlock::build(store, rng, name + ".res", ch, spec.width(l), spec.time_embed_dim, spec.groups));
            ch = spec.width(l);
            if (spec.has_attention(l)) {
                lv.attn.push_back(CrossAttention::build(store, rng, name + ".attn", ch, spec.text_dim, spec.groups));
            }
        }
        if (l + 1 < spec.levels()) {
            lv.has_down = true;
            lv.down = nn::conv2d(store, rng, "enc." + std::to_string(l) + ".down", ch, ch, 3, 2);
        }
        e.levels.push_back(std::move(lv));
    }
    return e;
}

Var Encoder::operator()(Var h, const Var& temb_act, const Var& context, std::vector<Var>& skips) const {
    skips.push_back(h);
    for (const auto& lv : levels) {
        for (std::size_t r = 0; r < lv.blocks.size(); ++r) {
            h = lv.blocks[r](h, temb_act);
            if (!lv.attn.empty()) h = lv.attn[r](h, context);
            skips.push_back(h);
        }
        if (lv.has_down) {
            h = lv.down(h);
            skips.push_back(h);
        }
    }
    return h;
}

TextEmbedder TextEmbedder::build(ParamStore& store, Rng& rng, const UNetSpec& spec) {
    auto small_normal = [&rng](Tensor& t) { fill_normal(t, rng, 0.5); };
    TextEmbedder e;
    e.tokens = store.obtain("text.tokens", {TextCondition::kVocabulary + 1, spec.text_dim}, small_normal);
    e.positions = store.obtain("text.pos", {TextCondition::kMaxTokens, spec.text_dim}, small_normal);
    e.null_seq = store.obtain("text.null", {TextCondition::kMaxTokens, spec.text_dim}, small_normal);
    return e;
}

Var TextEmbedder::operator()(const std::vector<TextCondition>& batch) const {
    const int d = tokens->value.dim(1);
    std::vector<int> all_pos(TextCondition::kMaxTokens);
    for (int i = 0; i < TextCondition::kMaxTokens; ++i) all_pos[static_cast<std::size_t>(i)] = i;
    std::vector<Var> items;
    for (const auto& cond : batch) {
        Var seq;
        if (cond.is_null) {
            seq = ops::gather_rows(null_seq, all_pos);
        } else {
            std::vector<int> ids(cond.token_ids);
            ids.resize(TextCondition::kMaxTokens, TextCondition::kVocabulary);
            seq = ops::add(ops::gather_rows(tokens, ids), ops::gather_rows(positions, all_pos));
        }
        items.push_back(ops::reshape(seq, {1, TextCondition::kMaxTokens, d}));
    }
    return ops::concat0(items);
}

Backbone::Backbone(UNetSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    Rng rng(seed);
    build(rng);
}

Backbone::Backbone(UNetSpec spec, ParamStore params) : spec_(std::move(spec)), params_(std::move(params)) {
    spec_.validate();
    const std::size_t before = params_.entries().size();
    Rng rng(0);
    build(rng);
    if (params_.entries().size() != before) {
        throw std::invalid_argument("parameter set does not cover the U-Net spec (missing " +
                                    params_.entries().back().first + ")");
    }
}

void Backbone::build(Rng& rng) {
    const bool was_frozen = params_.frozen();
    params_.set_frozen(false);
    time_ = TimeEmbedding::build(params_, rng, spec_);
    text_ = TextEmbedder::build(params_, rng, spec_);
    conv_in_ = nn::conv2d(params_, rng, "conv_in", spec_.in_channels, spec_.width(0), 3);
    encoder_ = Encoder::build(params_, rng, spec_);

    const int deep = spec_.width(spec_.levels() - 1);
    mid1_ = ResBlock::build(params_, rng, "mid.res1", deep, deep, spec_.time_embed_dim, spec_.groups);
    mid_attn_ = CrossAttention::build(params_, rng, "mid.attn", deep, spec_.text_dim, spec_.groups);
    mid2_ = ResBlock::build(params_, rng, "mid.res2", deep, deep, spec_.time_embed_dim, spec_.groups);

    std::vector<int> skip_ch;
    for (const auto& s : spec_.connection_shapes()) skip_ch.push_back(s[0]);
    decoder_.assign(static_cast<std::size_t>(spec_.levels()), {});
    int ch = deep;
    for (int l = spec_.levels() - 1; l >= 0; --l) {
        auto& lv = decoder_[static_cast<std::size_t>(l)];
        for (int r = 0; r <= spec_.res_blocks; ++r) {
            const int sc = skip_ch.back();
            skip_ch.pop_back();
            const std::string name = "dec." + std::to_string(l) + "." + std::to_string(r);
            lv.blocks.push_back(ResBlock::build(params_, rng, name + ".res", ch + sc, spec_.width(l),
                                                spec_.time_embed_dim, spec_.groups));
            ch = spec_.width(l);
            if (spec_.has_attention(l)) {
                lv.attn.push_back(CrossAttention::build(params_, rng, name + ".attn", ch, spec_.text_dim, spec_.groups));
            }
        }
    }
    out_norm_ = nn::group_norm(params_, "out.norm", ch, spec_.groups);
    out_conv_ = nn::conv2d(params_, rng, "out.conv", ch, spec_.in_channels, 3);
    if (was_frozen) params_.set_frozen(true);
}

void Backbone::freeze() {
    if (!params_.frozen()) params_.set_frozen(true);
}

Backbone Backbone::clone() const { return Backbone(spec_, params_.clone()); }

Backbone Backbone::unfrozen_copy() const {
    ParamStore p = params_.clone();
    p.set_frozen(false);
    return Backbone(spec_, std::move(p));
}

Var Backbone::forward(const Var& x, std::span<const int> timesteps, const Var& context,
                      const ConditionFeatures* injected) const {
    const Shape& xs = x->value.shape();
    if (xs.size() != 4 || xs[1] != spec_.in_channels || xs[2] != spec_.image_size || xs[3] != spec_.image_size) {
        throw ShapeError("backbone input " + shape_str(xs) + " does not match spec size " +
                         std::to_string(spec_.image_size));
    }
    if (static_cast<int>(timesteps.size()) != xs[0]) throw ShapeError("one timestep per batch item required");
    const int k_total = spec_.connections();
    if (injected) {
        if (static_cast<int>(injected->size()) != k_total) {
            throw ShapeError("expected " + std::to_string(k_total) + " injected feature maps, got " +
                             std::to_string(injected->size()));
        }
        const auto shapes = spec_.connection_shapes();
        for (int k = 0; k < k_total; ++k) {
            const Shape& fs = injected->maps[static_cast<std::size_t>(k)]->value.shape();
            const Shape& want = shapes[static_cast<std::size_t>(k)];
            if (fs.size() != 4 || fs[0] != xs[0] || fs[1] != want[0] || fs[2] != want[1] || fs[3] != want[2]) {
                throw ShapeError("injected feature " + std::to_string(k) + " (decoder block consuming skip " +
                                 std::to_string(k) + ") has shape " + shape_str(fs) + ", expected [N," +
                                 std::to_string(want[0]) + "," + std::to_string(want[1]) + "," +
                                 std::to_string(want[2]) + "]");
            }
        }
    }

    Var temb = time_(timesteps);
    std::vector<Var> skips;
    Var h = encoder_(conv_in_(x), temb, context, skips);
    h = mid2_(mid_attn_(mid1_(h, temb), context), temb);

    for (int l = spec_.levels() - 1; l >= 0; --l) {
        const auto& lv = decoder_[static_cast<std::size_t>(l)];
        for (std::size_t r = 0; r < lv.blocks.size(); ++r) {
            const std::size_t k = skips.size() - 1;
            Var skip = skips[k];
            skips.pop_back();
            if (injected) skip = ops::add(skip, injected->maps[k]);
            h = lv.blocks[r](ops::concat_channels(h, skip), temb);
            if (!lv.attn.empty()) h = lv.attn[r](h, context);
        }
        if (l > 0) h = ops::upsample2x(h);
    }
    return out_conv_(ops::silu(out_norm_(h)));
}

Tensor Backbone::predict_noise(const Tensor& x_t, int t, const TextCondition& text, const ConditionFeatures* injected) {
    NoGradGuard guard;
    const int n = x_t.dim(0);
    std::vector<int> ts(static_cast<std::size_t>(n), t);
    std::vector<TextCondition> texts(static_cast<std::size_t>(n), text);
    return forward(constant(x_t), ts, embed_text(texts), injected)->value;
}

void Backbone::save(const std::filesystem::path& path, const diffusion::NoiseSchedule& schedule,
                    int training_step) const {
    nlohmann::json meta{{"kind", "backbone"},
                        {"version", 1},
                        {"spec", spec_.to_json()},
                        {"schedule", schedule.to_json()},
                        {"frozen", frozen()},
                        {"checksum", checksum()},
                        {"training_step", training_step}};
    write_archive(path, meta, params_);
}

Backbone Backbone::load(const std::filesystem::path& path, diffusion::NoiseSchedule* schedule) {
    Archive ar = read_archive(path);
    if (ar.meta.value("kind", "") != "backbone") throw std::runtime_error(path.string() + " is not a backbone checkpoint");
    Backbone b(UNetSpec::from_json(ar.meta.at("spec")), std::move(ar.params));
    if (b.checksum() != ar.meta.at("checksum").get<std::string>()) {
        throw std::runtime_error("checksum mismatch in " + path.string());
    }
    if (ar.meta.value("frozen", false)) b.freeze();
    if (schedule) *schedule = diffusion::NoiseSchedule::from_json(ar.meta.at("schedule"));
    return b;
}

Backbone init_backbone(const UNetSpec& spec, std::uint64_t seed) { return Backbone(spec, seed); }

Tensor batch_latents(const std::vector<const imaging::RasterImage*>& images) {
    if (images.empty()) throw ShapeError("empty image batch");
    const int h = images[0]->height, w = images[0]->width;
    Tensor out({static_cast<int>(images.size()), 3, h, w});
    const std::size_t plane = static_cast<std::size_t>(3) * h * w;
    for (std::size_t n = 0; n < images.size(); ++n) {
        if (images[n]->height != h || images[n]->width != w) throw ShapeError("batch images differ in size");
        for (std::size_t i = 0; i < plane; ++i) out[n * plane + i] = static_cast<Real>(images[n]->pixels[i]) * 2 - 1;
    }
    return out;
}

PretrainResult pretrain_backbone(Backbone& model, const std::vector<imaging::RasterImage>& images,
                                 const std::vector<std::string>& captions, const diffusion::NoiseSchedule& schedule,
                                 const PretrainConfig& config) {
    if (images.empty()) throw std::invalid_argument("pretraining corpus is empty");
    if (captions.size() != images.size()) throw std::invalid_argument("one caption per image required");
    PretrainResult result;
    if (config.steps <= 0) return result;
    AdamW opt(model.params(), AdamWConfig{});
    Rng rng(config.seed);
    std::vector<TextCondition> encoded;
    for (const auto& c : captions) encoded.push_back(encode_text(c));

    for (int step = 0; step < config.steps; ++step) {
        std::vector<const imaging::RasterImage*> picks;
        std::vector<int> ts;
        std::vector<TextCondition> texts;
        for (int b = 0; b < config.batch; ++b) {
            const int idx = uniform_int(rng, 0, static_cast<int>(images.size()) - 1);
            picks.push_back(&images[static_cast<std::size_t>(idx)]);
            ts.push_back(uniform_int(rng, 1, schedule.T));
            texts.push_back(bernoulli(rng, config.text_dropout) ? TextCondition::null()
                                                                : encoded[static_cast<std::size_t>(idx)]);
        }
        Tensor x0 = batch_latents(picks);
        Tensor eps = randn(x0.shape(), rng);
        Tensor xt(x0.shape());
        const std::size_t per = x0.size() / static_cast<std::size_t>(config.batch);
        for (int b = 0; b < config.batch; ++b) {
            const double ab = schedule.alpha_bar(ts[static_cast<std::size_t>(b)]);
            const Real a = static_cast<Real>(std::sqrt(ab)), s = static_cast<Real>(std::sqrt(1 - ab));
            for (std::size_t i = b * per; i < (b + 1) * per; ++i) xt[i] = a * x0[i] + s * eps[i];
        }
        Var pred = model.forward(constant(xt), ts, model.embed_text(texts));
        Var loss = ops::mse(pred, eps);
        const double lv = loss->value[0];
        if (!std::isfinite(lv)) throw diffusion::DivergenceError("pretraining loss diverged at step " + std::to_string(step));
        backward(loss);
        opt.step(cosine_lr(config.lr, step, config.steps, config.warmup));
        result.losses.push_back(lv);
        if (config.log_every > 0 && (step + 1) % config.log_every == 0) {
            double avg = 0;
            const int n = std::min<int>(config.log_every, static_cast<int>(result.losses.size()));
            for (int i = 0; i < n; ++i) avg += result.losses[result.losses.size() - 1 - static_cast<std::size_t>(i)];
            std::cerr << "pretrain step " << step + 1 << "/" << config.steps << " loss " << avg / n << "\n";
        }
    }
    return result;
}

PretrainResult pretrain_backbone(Backbone& model, const datasetgen::DatasetManifest& corpus,
                                 const diffusion::NoiseSchedule& schedule, const PretrainConfig& config) {
    if (corpus.size() == 0) throw std::invalid_argument("pretraining corpus is empty");
    std::vector<imaging::RasterImage> images;
    std::vector<std::string> captions;
    for (const auto& e : corpus.samples) {
        images.push_back(imaging::read_png(corpus.resolve(e.target)));
        captions.push_back(e.caption);
    }
    return pretrain_backbone(model, images, captions, schedule, config);
}

}  // namespace phd::backbone
