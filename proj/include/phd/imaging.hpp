#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

// Pixel-space primitives and the paste step: subject extraction, contain-fit
// resize, alpha compositing into a blanked editing area, and mask handling.
namespace phd::imaging {

class ImagingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Three-channel image, channel-planar (CHW), values in [0,1].
struct RasterImage {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    RasterImage() = default;
    RasterImage(int h, int w, float fill = 0.0f);

    float& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    float at(int c, int y, int x) const { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    bool operator==(const RasterImage&) const = default;
};

struct AlphaMatte {
    int height = 0;
    int width = 0;
    std::vector<float> values;

    AlphaMatte() = default;
    AlphaMatte(int h, int w, float fill = 0.0f);

    float& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
    float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
    bool operator==(const AlphaMatte&) const = default;
};

struct BinaryMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> bits;

    BinaryMask() = default;
    BinaryMask(int h, int w, std::uint8_t fill = 0);

    std::uint8_t& at(int y, int x) { return bits[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
    std::size_t area() const;
    bool operator==(const BinaryMask&) const = default;
};

struct BBox {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;

    bool operator==(const BBox&) const = default;
    bool within(int height, int width) const { return x >= 0 && y >= 0 && w >= 1 && h >= 1 && x + w <= width && y + h <= height; }
};

struct Exemplar {
    RasterImage image;
    AlphaMatte matte;
    bool operator==(const Exemplar&) const = default;
};

struct Composite {
    RasterImage image;
    BinaryMask mask;
    BBox bbox;
};

// Scene images must be at least 8x8 with values in [0,1].
void validate_scene(const RasterImage& image);

Exemplar extract_subject(const RasterImage& image, const AlphaMatte& matte, float threshold = 0.5f);
Exemplar fit_resize(const Exemplar& exemplar, const BBox& box);
Composite paste(const RasterImage& scene, const Exemplar& exemplar, const BBox& box,
                const std::optional<BinaryMask>& mask = std::nullopt);
BinaryMask make_mask(const BBox& box, int height, int width);
AlphaMatte threshold_matte(const RasterImage& image);

// Smallest box covering the nonzero mask pixels; throws on an empty mask.
BBox mask_bounds(const BinaryMask& mask);

RasterImage resize_bilinear(const RasterImage& image, int height, int width);
AlphaMatte resize_bilinear(const AlphaMatte& matte, int height, int width);
BinaryMask resize_nearest(const BinaryMask& mask, int height, int width);
RasterImage flip_horizontal(const RasterImage& image);
AlphaMatte flip_horizontal(const AlphaMatte& matte);

// PNG and JSON interchange.
RasterImage read_png(const std::filesystem::path& path);
RasterImage decode_png(const std::string& bytes);
void write_png(const std::filesystem::path& path, const RasterImage& image);
std::string encode_png(const RasterImage& image);
// Single-channel files; masks threshold at 0.5.
AlphaMatte read_matte_png(const std::filesystem::path& path);
void write_matte_png(const std::filesystem::path& path, const AlphaMatte& matte);
BinaryMask read_mask_png(const std::filesystem::path& path);
BinaryMask decode_mask_png(const std::string& bytes);
void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask);

nlohmann::json to_json(const BBox& box);
BBox bbox_from_json(const nlohmann::json& j);

}  // namespace phd::imaging
