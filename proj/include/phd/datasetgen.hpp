#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "phd/core/random.hpp"
#include "phd/imaging.hpp"

// Self-supervised training pairs: the subject inside a box is cut out,
// perturbed, and pasted back into the blanked box; the untouched image is the
// target.
namespace phd::datasetgen {

using imaging::AlphaMatte;
using imaging::BBox;
using imaging::BinaryMask;
using imaging::Composite;
using imaging::Exemplar;
using imaging::RasterImage;

struct AugmentationConfig {
    double p_flip = 0.10;
    double p_rotate = 0.10;
    double p_hsv = 0.10;
    double p_blur = 0.10;
    double p_elastic = 0.10;
    double rotate_degrees = 30.0;
    double hue_shift = 0.05;
    double saturation_shift = 0.2;
    double value_shift = 0.2;
    int blur_kernel_min = 3;
    int blur_kernel_max = 7;
    double elastic_alpha = 1.0 / 8.0;   // times the exemplar size
    double elastic_sigma = 1.0 / 20.0;  // times the exemplar size
    double p_irregular = 0.50;
    std::uint64_t seed = 0;

    // All transforms and irregular masks off.
    static AugmentationConfig none();

    void validate() const;
    nlohmann::json to_json() const;
    static AugmentationConfig from_json(const nlohmann::json& j);
};

inline constexpr const char* kTransformNames[] = {"flip", "rotate", "hsv", "blur", "elastic"};

struct Augmented {
    Exemplar exemplar;
    std::vector<std::string> applied;
};

// Applies each transform independently, in the fixed order flip, rotate, hsv,
// blur, elastic. Exactly one Bernoulli draw is consumed per transform.
Augmented augment_subject(const Exemplar& exemplar, const AugmentationConfig& config, Rng& rng);

// Individual transforms, exposed for tests.
Exemplar rotate_exemplar(const Exemplar& e, double degrees);
Exemplar hsv_shift(const Exemplar& e, double dh, double ds, double dv);
Exemplar blur_exemplar(const Exemplar& e, int kernel);
Exemplar elastic_exemplar(const Exemplar& e, double alpha, double sigma, Rng& rng);
// Crops to the matte's nonzero support (identity when already tight).
Exemplar tighten(const Exemplar& e);

// With probability p a jittered radial polygon (8..16 vertices) around the
// box, forced to contain the centered 60% rectangle and clipped to the box
// dilated by 10%; otherwise the plain rectangle. One Bernoulli draw is always
// consumed. `irregular`, if given, reports which branch was taken.
BinaryMask irregularize_mask(const BBox& box, int height, int width, double probability, Rng& rng,
                             bool* irregular = nullptr);

BBox inner_rect(const BBox& box, double scale);
BBox dilated_rect(const BBox& box, double scale, int height, int width);

struct TrainingSample {
    RasterImage target;
    Composite composite;
    std::string caption;
    std::vector<std::string> applied;
};

// Builds (target, composite). The matte, if given, covers the whole source;
// otherwise threshold_matte is run on the box crop.
TrainingSample build_sample(const RasterImage& source, const BBox& box, const AugmentationConfig& config, Rng& rng,
                            const AlphaMatte* matte = nullptr, const std::string& caption = "");

struct SubjectInfo {
    std::string color;
    std::string shape;
    std::string background;
    std::string caption;  // user-supplied, wins over the template
};

std::string caption_for(const SubjectInfo& info);

// A rendered corpus image: gradient background plus 1..3 shapes. The matte,
// bbox and info describe the topmost shape.
struct SyntheticScene {
    RasterImage image;
    AlphaMatte matte;
    BBox bbox;
    SubjectInfo info;
};

// Pixel values and matte levels are quantized to k/255 so PNG round trips
// are exact.
SyntheticScene render_synthetic_scene(int size, Rng& rng);

struct ManifestEntry {
    std::string target;
    std::string composite;
    std::string mask;
    std::string matte;
    BBox bbox;
    std::string caption;
    SubjectInfo info;
};

struct DatasetManifest {
    std::string version = "1";
    std::uint64_t seed = 0;
    int image_size = 0;
    AugmentationConfig config;
    std::vector<ManifestEntry> samples;
    std::filesystem::path root;  // directory holding manifest.json; paths are relative to it

    std::size_t size() const { return samples.size(); }
    std::filesystem::path resolve(const std::string& rel) const { return root / rel; }

    nlohmann::json to_json() const;
    void save() const;
    // Checks the count and that every listed file exists.
    static DatasetManifest load(const std::filesystem::path& dir_or_file);
};

struct CorpusConfig {
    int count = 200;
    int image_size = 64;
    std::uint64_t seed = 0;
    AugmentationConfig augmentation;
};

DatasetManifest build_synthetic_corpus(const std::filesystem::path& dir, const CorpusConfig& config);

// Loaded sample ready for training.
struct LoadedSample {
    RasterImage target;
    RasterImage composite;
    BinaryMask mask;
    std::string caption;
};

std::vector<LoadedSample> load_samples(const DatasetManifest& manifest);

}  // namespace phd::datasetgen
