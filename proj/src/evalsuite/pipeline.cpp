#include "phd/pipeline.hpp"

#include <cmath>

namespace phd::pipeline {

ModelBundle ModelBundle::load(const std::filesystem::path& backbone_path, const std::filesystem::path& harmonizer_path) {
    ModelBundle b;
    b.backbone = std::make_shared<backbone::Backbone>(backbone::Backbone::load(backbone_path, &b.schedule));
    b.backbone->freeze();
    if (!harmonizer_path.empty()) {
        b.harmonizer = std::make_shared<harmonizer::Harmonizer>(harmonizer::Harmonizer::load(harmonizer_path, *b.backbone));
    }
    return b;
}

std::string to_string(EditMode mode) {
    switch (mode) {
        case EditMode::kFull: return "full";
        case EditMode::kImg2Img: return "i2i";
        case EditMode::kInpaint: return "inpaint";
        case EditMode::kInpaintNull: return "inpaint_null";
    }
    return "unknown";
}

imaging::Composite make_composite(const EditInputs& inputs) {
    imaging::validate_scene(inputs.scene);
    if (inputs.mask.height != inputs.scene.height || inputs.mask.width != inputs.scene.width) {
        throw imaging::ImagingError("mask size " + std::to_string(inputs.mask.height) + "x" +
                                    std::to_string(inputs.mask.width) + " does not match the scene");
    }
    if (inputs.mask.area() == 0) throw imaging::ImagingError("editing area is empty");
    const imaging::AlphaMatte matte =
        inputs.exemplar_matte ? *inputs.exemplar_matte : imaging::threshold_matte(inputs.exemplar);
    const imaging::Exemplar subject = imaging::extract_subject(inputs.exemplar, matte, 0.5f);
    const imaging::BBox region = imaging::mask_bounds(inputs.mask);
    return imaging::paste(inputs.scene, imaging::fit_resize(subject, region), region, inputs.mask);
}

namespace {

int img2img_steps(const EditOptions& options) {
    if (options.img2img_strength < 0 || options.img2img_strength > 1) {
        throw std::invalid_argument("img2img strength must lie in [0,1]");
    }
    return static_cast<int>(std::lround(options.img2img_strength * options.sampler.steps));
}

}  // namespace

imaging::RasterImage sample_edit(const ModelBundle& models, const imaging::RasterImage& scene,
                                 const imaging::Composite& composite, const std::string& prompt,
                                 const EditOptions& options) {
    const int s = models.resolution();
    if (scene.height != s || scene.width != s || composite.image.height != s || composite.image.width != s ||
        composite.mask.height != s || composite.mask.width != s) {
        throw ShapeError("sample_edit expects inputs at the working resolution " + std::to_string(s));
    }
    const Shape shape{1, 3, s, s};
    Rng rng(options.sampler.seed);
    const TextCondition text = options.mode == EditMode::kInpaintNull ? TextCondition::null() : encode_text(prompt);

    diffusion::SampleOptions so;
    so.progress = options.progress;

    if (options.mode == EditMode::kImg2Img) {
        const int start = img2img_steps(options);
        if (start == 0) return composite.image;
        so.init_latent = diffusion::to_latent(composite.image);
        so.start_steps = start;
        return diffusion::to_image(
            diffusion::sample_latent(*models.backbone, nullptr, text, shape, models.schedule, options.sampler, rng, so));
    }

    // Outside the editing area the state is replaced by the scene noised to
    // the current level (exactly the scene at t = 0).
    const Tensor known = diffusion::to_latent(scene);
    const std::size_t plane = static_cast<std::size_t>(s) * s;
    const auto& bits = composite.mask.bits;
    so.after_step = [&](Tensor& x, int t_prev, Rng& r) {
        const Tensor level = t_prev == 0 ? known : diffusion::q_sample(known, t_prev, randn(shape, r), models.schedule);
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (!bits[i % plane]) x[i] = level[i];
        }
    };

    if (options.mode == EditMode::kFull) {
        if (!models.harmonizer) throw std::runtime_error("full mode needs a harmonizer checkpoint");
        const int k = models.harmonizer->connections();
        InjectionGates gates = harmonizer::all_gates(k);
        if (options.disconnect_k >= 0) gates = harmonizer::set_disconnect(gates, options.disconnect_k);
        harmonizer::BoundCondition cond(*models.harmonizer, harmonizer::condition_tensor(composite), gates);
        return diffusion::to_image(
            diffusion::sample_latent(*models.backbone, &cond, text, shape, models.schedule, options.sampler, rng, so));
    }
    return diffusion::to_image(
        diffusion::sample_latent(*models.backbone, nullptr, text, shape, models.schedule, options.sampler, rng, so));
}

EditResult run_edit(const ModelBundle& models, const EditInputs& inputs, const EditOptions& options) {
    EditResult r;
    r.composite = make_composite(inputs);
    const int s = models.resolution();
    const int h = inputs.scene.height, w = inputs.scene.width;
    const bool native = h == s && w == s;

    imaging::Composite working = r.composite;
    imaging::RasterImage scene_s = inputs.scene;
    if (!native) {
        scene_s = imaging::resize_bilinear(inputs.scene, s, s);
        working.image = imaging::resize_bilinear(r.composite.image, s, s);
        working.mask = imaging::resize_nearest(r.composite.mask, s, s);
        if (working.mask.area() == 0) throw imaging::ImagingError("editing area vanishes at the working resolution");
        working.bbox = imaging::mask_bounds(working.mask);
    }

    if (options.mode == EditMode::kImg2Img && img2img_steps(options) == 0) {
        r.model_output = working.image;
        r.image = r.composite.image;
        return r;
    }

    r.model_output = sample_edit(models, scene_s, working, inputs.prompt, options);
    const imaging::RasterImage up = native ? r.model_output : imaging::resize_bilinear(r.model_output, h, w);
    r.image = inputs.scene;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < r.image.pixels.size(); ++i) {
        if (r.composite.mask.bits[i % plane]) r.image.pixels[i] = up.pixels[i];
    }
    return r;
}

}  // namespace phd::pipeline
