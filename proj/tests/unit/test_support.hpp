#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "phd/backbone.hpp"
#include "phd/harmonizer.hpp"
#include "phd/pipeline.hpp"

namespace phd::test {

// Miniature U-Net: 8x8 images, two levels, four connections.
inline backbone::UNetSpec tiny_spec() {
    backbone::UNetSpec s;
    s.base_width = 8;
    s.channel_mult = {1, 2};
    s.attention_levels = {1};
    s.time_embed_dim = 16;
    s.text_dim = 8;
    s.image_size = 8;
    s.groups = 4;
    return s;
}

// Fresh directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("phd_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::string slurp(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Deterministic pseudo-random image with values k/255.
inline imaging::RasterImage noise_image(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    imaging::RasterImage img(h, w);
    for (auto& v : img.pixels) v = static_cast<float>(uniform_int(rng, 0, 255)) / 255.0f;
    return img;
}

// Tiny backbone plus harmonizer whose projections are randomized, so that
// injection actually changes the output.
inline pipeline::ModelBundle tiny_bundle(std::uint64_t seed, bool randomize_projections = true) {
    pipeline::ModelBundle b;
    b.schedule = diffusion::linear_schedule(20);
    b.backbone = std::make_shared<backbone::Backbone>(tiny_spec(), seed);
    b.backbone->freeze();
    auto h = harmonizer::Harmonizer::init_from_backbone(*b.backbone, seed + 1);
    if (randomize_projections) {
        Rng rng(seed + 2);
        for (auto& [name, v] : h.params().entries()) {
            if (harmonizer::Harmonizer::is_projection(name)) fill_normal(v->value, rng, 0.2);
        }
    }
    b.harmonizer = std::make_shared<harmonizer::Harmonizer>(std::move(h));
    return b;
}

}  // namespace phd::test
