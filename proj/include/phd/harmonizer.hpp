#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "phd/backbone.hpp"
#include "phd/conditioning.hpp"
#include "phd/diffusion.hpp"
#include "phd/imaging.hpp"

// The inpainting-and-harmonizing module: a trainable copy of the backbone
// encoder fed with the pasted composite, whose per-connection outputs pass
// through zero-initialized 1x1 projections before being added to the skip
// tensors of the frozen decoder.
namespace phd::harmonizer {

struct HarmonizerOptions {
    // Adds the noisy latent (through the copied input convolution) to the
    // condition stem output. Off means the copy only sees composite and mask.
    bool ipm_sees_latent = true;

    nlohmann::json to_json() const { return {{"ipm_sees_latent", ipm_sees_latent}}; }
    static HarmonizerOptions from_json(const nlohmann::json& j);
};

InjectionGates all_gates(int connections);
// Gates 0..keep_first-1 on, the rest off.
InjectionGates set_disconnect(const InjectionGates& gates, int keep_first);

// [1,4,H,W]: composite in [-1,1] followed by the mask in {0,1}.
Tensor condition_tensor(const imaging::Composite& composite);
Tensor condition_tensor(const imaging::RasterImage& image, const imaging::BinaryMask& mask);

class Harmonizer {
public:
    Harmonizer(backbone::UNetSpec spec, ParamStore params, std::string backbone_checksum, HarmonizerOptions options);

    // Encoder tensors are copied bit-exactly; the stem is drawn from `seed`
    // and every projection starts at zero.
    static Harmonizer init_from_backbone(const backbone::Backbone& backbone, std::uint64_t seed,
                                         HarmonizerOptions options = {});

    const backbone::UNetSpec& spec() const { return spec_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const HarmonizerOptions& options() const { return options_; }
    const std::string& backbone_checksum() const { return backbone_checksum_; }
    std::string checksum() const { return params_.checksum(); }
    int connections() const { return spec_.connections(); }

    static bool is_projection(const std::string& name) { return name.rfind("proj.", 0) == 0; }
    static bool is_stem(const std::string& name) { return name.rfind("stem.", 0) == 0; }

    // Differentiable pass. condition [N,4,H,W], x_t [N,C,H,W].
    ConditionFeatures encode(const Tensor& condition, const Var& x_t, std::span<const int> timesteps,
                             const InjectionGates& gates) const;

    // Inference-time features for one composite at the working resolution.
    ConditionFeatures encode_condition(const imaging::Composite& composite, const Tensor& x_t, int t,
                                       const InjectionGates& gates) const;

    void save(const std::filesystem::path& path, int training_step = 0) const;
    // Fails when the checkpoint was trained against a different backbone.
    static Harmonizer load(const std::filesystem::path& path, const backbone::Backbone& backbone);

private:
    Harmonizer(backbone::UNetSpec spec, std::string backbone_checksum, HarmonizerOptions options)
        : spec_(std::move(spec)), backbone_checksum_(std::move(backbone_checksum)), options_(options) {}
    void build(Rng& rng);

    backbone::UNetSpec spec_;
    ParamStore params_;
    std::string backbone_checksum_;
    HarmonizerOptions options_;

    backbone::TimeEmbedding time_;
    nn::Conv2d conv_in_;
    backbone::Encoder encoder_;
    Var null_text_;
    nn::Conv2d stem1_, stem2_;
    std::vector<nn::Conv2d> proj_;
};

// Binds a harmonizer to a fixed condition tensor for the sampler.
class BoundCondition : public diffusion::ConditionSource {
public:
    BoundCondition(const Harmonizer& harmonizer, Tensor condition, InjectionGates gates);
    ConditionFeatures features(const Tensor& x_t, int t) override;

private:
    const Harmonizer* harmonizer_;
    Tensor condition_;
    InjectionGates gates_;
};

}  // namespace phd::harmonizer
