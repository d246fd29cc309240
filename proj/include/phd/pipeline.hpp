#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>

#include "phd/backbone.hpp"
#include "phd/diffusion.hpp"
#include "phd/harmonizer.hpp"
#include "phd/imaging.hpp"

// Paste, then inpaint and harmonize: the editing pipeline shared by the CLI,
// the HTTP service and the benchmark harness.
namespace phd::pipeline {

struct ModelBundle {
    std::shared_ptr<backbone::Backbone> backbone;
    std::shared_ptr<harmonizer::Harmonizer> harmonizer;  // may be null
    diffusion::NoiseSchedule schedule;

    // The harmonizer path may be empty. The backbone is frozen on load.
    static ModelBundle load(const std::filesystem::path& backbone_path, const std::filesystem::path& harmonizer_path);
    int resolution() const { return backbone->spec().image_size; }
};

enum class EditMode {
    kFull,         // backbone guided by the harmonizer
    kImg2Img,      // noised composite as the starting point, no harmonizer
    kInpaint,      // backbone only, known region re-imposed every step
    kInpaintNull,  // inpaint with the null prompt
};

std::string to_string(EditMode mode);

struct EditOptions {
    diffusion::SamplerConfig sampler;
    EditMode mode = EditMode::kFull;
    int disconnect_k = -1;        // < 0 keeps every connection
    double img2img_strength = 0.6;  // fraction of the strided steps that are re-run
    std::function<void(int done, int total)> progress;
};

struct EditInputs {
    imaging::RasterImage scene;
    imaging::RasterImage exemplar;
    std::optional<imaging::AlphaMatte> exemplar_matte;  // threshold_matte when absent
    imaging::BinaryMask mask;  // editing area in scene pixels
    std::string prompt;
};

struct EditResult {
    imaging::RasterImage image;        // scene resolution
    imaging::Composite composite;      // scene resolution, pre-harmonization
    imaging::RasterImage model_output;  // working resolution
};

// Subject extraction, contain-fit to the mask bounds and paste into the
// blanked editing area.
imaging::Composite make_composite(const EditInputs& inputs);

// Runs the chosen mode. Outside the mask the result equals the scene exactly.
EditResult run_edit(const ModelBundle& models, const EditInputs& inputs, const EditOptions& options);

// Core sampler at working resolution: `composite` and `mask` are already
// resized, `scene` is the working-resolution scene used for re-imposition.
imaging::RasterImage sample_edit(const ModelBundle& models, const imaging::RasterImage& scene,
                                 const imaging::Composite& composite, const std::string& prompt,
                                 const EditOptions& options);

}  // namespace phd::pipeline
