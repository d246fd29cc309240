#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "phd/conditioning.hpp"
#include "phd/core/nn.hpp"
#include "phd/datasetgen.hpp"
#include "phd/diffusion.hpp"

namespace phd::backbone {

struct UNetSpec {
    int in_channels = 3;
    int base_width = 16;
    std::vector<int> channel_mult{1, 2, 2};
    int res_blocks = 1;
    std::vector<int> attention_levels{2};  // cross-attention at these levels and in the middle
    int time_embed_dim = 64;
    int text_dim = 32;
    int image_size = 64;
    int groups = 8;

    int levels() const { return static_cast<int>(channel_mult.size()); }
    int width(int level) const { return base_width * channel_mult.at(static_cast<std::size_t>(level)); }
    // Number of encoder->decoder skip connections (decoder stages x blocks per stage).
    int connections() const { return levels() * (res_blocks + 1); }
    bool has_attention(int level) const;

    // Throws std::invalid_argument on violated invariants.
    void validate() const;
    nlohmann::json to_json() const;
    static UNetSpec from_json(const nlohmann::json& j);

    // Shapes [C,H,W] of the skip tensors in encoder order.
    std::vector<Shape> connection_shapes() const;
};

// Building blocks shared by the backbone and the harmonizer's encoder copy.
struct ResBlock {
    nn::GroupNorm norm1, norm2;
    nn::Conv2d conv1, conv2;
    nn::Linear time_proj;
    bool has_skip = false;
    nn::Conv2d skip;

    static ResBlock build(ParamStore& store, Rng& rng, const std::string& name, int in, int out, int temb, int groups);
    Var operator()(const Var& x, const Var& temb_act) const;
};

struct CrossAttention {
    nn::GroupNorm norm;
    nn::Linear to_q, to_k, to_v, to_out;

    static CrossAttention build(ParamStore& store, Rng& rng, const std::string& name, int channels, int text_dim,
                                int groups);
    Var operator()(const Var& x, const Var& context) const;
};

struct TimeEmbedding {
    nn::Linear fc1, fc2;
    int sinusoid_dim = 0;

    static TimeEmbedding build(ParamStore& store, Rng& rng, const UNetSpec& spec);
    // Returns silu(mlp(sinusoid(t))) for each batch item, [N, time_embed_dim].
    Var operator()(std::span<const int> timesteps) const;
};

Tensor timestep_sinusoid(std::span<const int> timesteps, int dim);

// Encoder levels after the input convolution; names are "enc.*".
struct Encoder {
    struct Level {
        std::vector<ResBlock> blocks;
        std::vector<CrossAttention> attn;
        bool has_down = false;
        nn::Conv2d down;
    };
    std::vector<Level> levels;

    static Encoder build(ParamStore& store, Rng& rng, const UNetSpec& spec);
    // Appends every skip tensor (including h itself first) and returns the
    // deepest activation.
    Var operator()(Var h, const Var& temb_act, const Var& context, std::vector<Var>& skips) const;
};

// Token table, positional table and the learned null sequence.
struct TextEmbedder {
    Var tokens;     // [kVocabulary + 1, text_dim]; the last row pads
    Var positions;  // [kMaxTokens, text_dim]
    Var null_seq;   // [kMaxTokens, text_dim]

    static TextEmbedder build(ParamStore& store, Rng& rng, const UNetSpec& spec);
    Var operator()(const std::vector<TextCondition>& batch) const;  // [N, kMaxTokens, text_dim]
};

// The denoising U-Net eps_theta with its parameters, frozen flag and checksum.
class Backbone : public diffusion::NoisePredictor {
public:
    Backbone(UNetSpec spec, std::uint64_t seed);
    Backbone(UNetSpec spec, ParamStore params);

    const UNetSpec& spec() const { return spec_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    std::string checksum() const { return params_.checksum(); }

    bool frozen() const { return params_.frozen(); }
    // Marks the parameters immutable; repeated calls are no-ops.
    void freeze();
    // Deep copy with independent tensors (the copy keeps the frozen flag).
    Backbone clone() const;
    Backbone unfrozen_copy() const;

    Var embed_text(const std::vector<TextCondition>& batch) const { return text_(batch); }

    // x [N,C,H,W]; injected, when given, holds one map per connection in
    // encoder order, added to the skip tensor the decoder consumes.
    Var forward(const Var& x, std::span<const int> timesteps, const Var& context,
                const ConditionFeatures* injected = nullptr) const;

    Tensor predict_noise(const Tensor& x_t, int t, const TextCondition& text,
                         const ConditionFeatures* injected) override;

    // Checkpoint metadata includes the spec, schedule, frozen flag and checksum.
    void save(const std::filesystem::path& path, const diffusion::NoiseSchedule& schedule, int training_step = 0) const;
    static Backbone load(const std::filesystem::path& path, diffusion::NoiseSchedule* schedule = nullptr);

private:
    void build(Rng& rng);

    UNetSpec spec_;
    ParamStore params_;
    TimeEmbedding time_;
    TextEmbedder text_;
    nn::Conv2d conv_in_;
    Encoder encoder_;
    ResBlock mid1_, mid2_;
    CrossAttention mid_attn_;
    struct DecoderLevel {
        std::vector<ResBlock> blocks;
        std::vector<CrossAttention> attn;
    };
    std::vector<DecoderLevel> decoder_;  // index = level
    nn::GroupNorm out_norm_;
    nn::Conv2d out_conv_;
};

Backbone init_backbone(const UNetSpec& spec, std::uint64_t seed);

struct PretrainConfig {
    int steps = 5000;
    int batch = 8;
    double lr = 2e-4;
    int warmup = 100;
    double text_dropout = 0.1;
    std::uint64_t seed = 0;
    int log_every = 0;  // 0 = silent
};

struct PretrainResult {
    std::vector<double> losses;
};

// Minimizes the denoising loss on the given [0,1] images with their captions.
PretrainResult pretrain_backbone(Backbone& model, const std::vector<imaging::RasterImage>& images,
                                 const std::vector<std::string>& captions, const diffusion::NoiseSchedule& schedule,
                                 const PretrainConfig& config);

// Trains on the corpus targets and their captions.
PretrainResult pretrain_backbone(Backbone& model, const datasetgen::DatasetManifest& corpus,
                                 const diffusion::NoiseSchedule& schedule, const PretrainConfig& config);

// Stacks [0,1] images into a [-1,1] batch tensor [N,3,H,W].
Tensor batch_latents(const std::vector<const imaging::RasterImage*>& images);

}  // namespace phd::backbone
