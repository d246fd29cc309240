#include "phd/harmonizer.hpp"

#include "phd/core/archive.hpp"
#include "phd/core/ops.hpp"

namespace phd::harmonizer {

namespace {

bool is_encoder_copy(const std::string& name) {
    for (const char* prefix : {"time.", "conv_in.", "enc.", "text.null"}) {
        if (name.rfind(prefix, 0) == 0) return true;
    }
    return false;
}

}  // namespace

HarmonizerOptions HarmonizerOptions::from_json(const nlohmann::json& j) {
    HarmonizerOptions o;
    o.ipm_sees_latent = j.value("ipm_sees_latent", o.ipm_sees_latent);
    return o;
}

InjectionGates all_gates(int connections) { return InjectionGates(static_cast<std::size_t>(connections), true); }

InjectionGates set_disconnect(const InjectionGates& gates, int keep_first) {
    const int k = static_cast<int>(gates.size());
    if (keep_first < 0 || keep_first > k) {
        throw std::out_of_range("disconnect count " + std::to_string(keep_first) + " outside [0," + std::to_string(k) + "]");
    }
    InjectionGates out(gates.size(), false);
    for (int i = 0; i < keep_first; ++i) out[static_cast<std::size_t>(i)] = true;
    return out;
}

Tensor condition_tensor(const imaging::RasterImage& image, const imaging::BinaryMask& mask) {
    if (mask.height != image.height || mask.width != image.width) throw ShapeError("mask and composite differ in size");
    const int h = image.height, w = image.width;
    Tensor t({1, 4, h, w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < 3 * plane; ++i) t[i] = static_cast<Real>(image.pixels[i]) * 2 - 1;
    for (std::size_t i = 0; i < plane; ++i) t[3 * plane + i] = mask.bits[i] ? Real(1) : Real(0);
    return t;
}

Tensor condition_tensor(const imaging::Composite& composite) {
    return condition_tensor(composite.image, composite.mask);
}

Harmonizer::Harmonizer(backbone::UNetSpec spec, ParamStore params, std::string backbone_checksum,
                       HarmonizerOptions options)
    : spec_(std::move(spec)),
      params_(std::move(params)),
      backbone_checksum_(std::move(backbone_checksum)),
      options_(options) {
    spec_.validate();
    const std::size_t before = params_.entries().size();
    Rng rng(0);
    build(rng);
    if (params_.entries().size() != before) {
        throw std::invalid_argument("harmonizer parameters do not cover the spec (missing " +
                                    params_.entries().back().first + ")");
    }
}

Harmonizer Harmonizer::init_from_backbone(const backbone::Backbone& backbone, std::uint64_t seed,
                                          HarmonizerOptions options) {
    ParamStore store;
    for (const auto& [name, v] : backbone.params().entries()) {
        if (is_encoder_copy(name)) store.insert(name, v->value);
    }
    Rng rng(seed);
    Harmonizer h(backbone.spec(), backbone.checksum(), options);
    // The builder finds the copied tensors in place, so only the stem and
    // the projections are created here.
    h.params_ = std::move(store);
    h.build(rng);
    return h;
}

void Harmonizer::build(Rng& rng) {
    time_ = backbone::TimeEmbedding::build(params_, rng, spec_);
    conv_in_ = nn::conv2d(params_, rng, "conv_in", spec_.in_channels, spec_.width(0), 3);
    encoder_ = backbone::Encoder::build(params_, rng, spec_);
    null_text_ = params_.obtain("text.null", {TextCondition::kMaxTokens, spec_.text_dim},
                                [&rng](Tensor& t) { fill_normal(t, rng, 0.5); });
    stem1_ = nn::conv2d(params_, rng, "stem.conv1", spec_.in_channels + 1, spec_.width(0), 3);
    stem2_ = nn::conv2d(params_, rng, "stem.conv2", spec_.width(0), spec_.width(0), 3);
    proj_.clear();
    const auto shapes = spec_.connection_shapes();
    for (std::size_t k = 0; k < shapes.size(); ++k) {
        proj_.push_back(nn::conv2d(params_, rng, "proj." + std::to_string(k), shapes[k][0], shapes[k][0], 1, 1,
                                   nn::Init::kZero));
    }
}

ConditionFeatures Harmonizer::encode(const Tensor& condition, const Var& x_t, std::span<const int> timesteps,
                                     const InjectionGates& gates) const {
    const int k_total = connections();
    if (static_cast<int>(gates.size()) != k_total) {
        throw ShapeError("gate vector has " + std::to_string(gates.size()) + " entries, expected " + std::to_string(k_total));
    }
    const Shape& xs = x_t->value.shape();
    const Shape& cs = condition.shape();
    if (cs.size() != 4 || cs[1] != spec_.in_channels + 1 || xs.size() != 4 || cs[0] != xs[0] || cs[2] != xs[2] ||
        cs[3] != xs[3] || xs[2] != spec_.image_size || xs[3] != spec_.image_size) {
        throw ShapeError("harmonizer condition " + shape_str(cs) + " incompatible with latent " + shape_str(xs));
    }
    const int n = xs[0];
    const auto shapes = spec_.connection_shapes();
    ConditionFeatures out;
    const bool any_on = std::find(gates.begin(), gates.end(), true) != gates.end();
    if (!any_on) {
        for (const auto& s : shapes) out.maps.push_back(constant(Tensor({n, s[0], s[1], s[2]})));
        return out;
    }

    Var temb = time_(timesteps);
    Var ctx1 = ops::reshape(null_text_, {1, TextCondition::kMaxTokens, spec_.text_dim});
    Var ctx = n == 1 ? ctx1 : ops::concat0(std::vector<Var>(static_cast<std::size_t>(n), ctx1));
    Var h = stem2_(ops::silu(stem1_(constant(condition))));
    if (options_.ipm_sees_latent) h = ops::add(conv_in_(x_t), h);
    std::vector<Var> skips;
    encoder_(h, temb, ctx, skips);
    for (int k = 0; k < k_total; ++k) {
        const std::size_t i = static_cast<std::size_t>(k);
        if (gates[i]) {
            out.maps.push_back(proj_[i](skips[i]));
        } else {
            out.maps.push_back(constant(Tensor({n, shapes[i][0], shapes[i][1], shapes[i][2]})));
        }
    }
    return out;
}

ConditionFeatures Harmonizer::encode_condition(const imaging::Composite& composite, const Tensor& x_t, int t,
                                               const InjectionGates& gates) const {
    NoGradGuard guard;
    const std::vector<int> ts(static_cast<std::size_t>(x_t.dim(0)), t);
    return encode(condition_tensor(composite), constant(x_t), ts, gates);
}

void Harmonizer::save(const std::filesystem::path& path, int training_step) const {
    nlohmann::json meta{{"kind", "harmonizer"},
                        {"version", 1},
                        {"spec", spec_.to_json()},
                        {"options", options_.to_json()},
                        {"backbone_checksum", backbone_checksum_},
                        {"checksum", checksum()},
                        {"training_step", training_step}};
    write_archive(path, meta, params_);
}

Harmonizer Harmonizer::load(const std::filesystem::path& path, const backbone::Backbone& backbone) {
    Archive ar = read_archive(path);
    if (ar.meta.value("kind", "") != "harmonizer") throw std::runtime_error(path.string() + " is not a harmonizer checkpoint");
    const std::string linked = ar.meta.at("backbone_checksum").get<std::string>();
    if (linked != backbone.checksum()) {
        throw std::runtime_error("harmonizer " + path.string() + " was trained against backbone " + linked.substr(0, 12) +
                                 "..., loaded backbone is " + backbone.checksum().substr(0, 12) + "...");
    }
    const auto spec = backbone::UNetSpec::from_json(ar.meta.at("spec"));
    if (spec.to_json() != backbone.spec().to_json()) throw std::runtime_error("harmonizer spec differs from the backbone spec");
    Harmonizer h(spec, std::move(ar.params), linked, HarmonizerOptions::from_json(ar.meta.value("options", nlohmann::json::object())));
    if (h.checksum() != ar.meta.at("checksum").get<std::string>()) throw std::runtime_error("checksum mismatch in " + path.string());
    return h;
}

BoundCondition::BoundCondition(const Harmonizer& harmonizer, Tensor condition, InjectionGates gates)
    : harmonizer_(&harmonizer), condition_(std::move(condition)), gates_(std::move(gates)) {}

ConditionFeatures BoundCondition::features(const Tensor& x_t, int t) {
    NoGradGuard guard;
    const std::vector<int> ts(static_cast<std::size_t>(x_t.dim(0)), t);
    return harmonizer_->encode(condition_, constant(x_t), ts, gates_);
}

}  // namespace phd::harmonizer
