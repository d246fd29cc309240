#include "phd/imaging.hpp"

#include <algorithm>
#include <cmath>

namespace phd::imaging {

RasterImage::RasterImage(int h, int w, float fill)
    : height(h), width(w), pixels(static_cast<std::size_t>(3) * h * w, fill) {}

AlphaMatte::AlphaMatte(int h, int w, float fill) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

BinaryMask::BinaryMask(int h, int w, std::uint8_t fill) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, fill) {}

std::size_t BinaryMask::area() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }

void validate_scene(const RasterImage& image) {
    if (image.height < 8 || image.width < 8) {
        throw ImagingError("scene must be at least 8x8, got " + std::to_string(image.height) + "x" +
                           std::to_string(image.width));
    }
    for (float v : image.pixels) {
        if (!(v >= 0.0f && v <= 1.0f)) throw ImagingError("scene pixel outside [0,1]");
    }
}

Exemplar extract_subject(const RasterImage& image, const AlphaMatte& matte, float threshold) {
    if (matte.height != image.height || matte.width != image.width) {
        throw ImagingError("matte size does not match image");
    }
    if (!(threshold > 0.0f && threshold < 1.0f)) throw ImagingError("threshold must lie in (0,1)");
    int y0 = image.height, y1 = -1, x0 = image.width, x1 = -1;
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            if (matte.at(y, x) >= threshold) {
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
            }
    if (y1 < 0) throw ImagingError("empty matte: no pixel reaches the threshold");

    const int h = y1 - y0 + 1, w = x1 - x0 + 1;
    Exemplar ex{RasterImage(h, w), AlphaMatte(h, w)};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const float a = matte.at(y0 + y, x0 + x);
            ex.matte.at(y, x) = a;
            for (int c = 0; c < 3; ++c) ex.image.at(c, y, x) = a > 0.0f ? image.at(c, y0 + y, x0 + x) : 0.0f;
        }
    return ex;
}

namespace {

struct Tap {
    int i0, i1;
    float f;
};

std::vector<Tap> bilinear_taps(int src, int dst) {
    std::vector<Tap> taps(static_cast<std::size_t>(dst));
    const double scale = static_cast<double>(src) / dst;
    for (int i = 0; i < dst; ++i) {
        double s = (i + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(src - 1));
        const int i0 = static_cast<int>(std::floor(s));
        const int i1 = std::min(i0 + 1, src - 1);
        taps[static_cast<std::size_t>(i)] = {i0, i1, static_cast<float>(s - i0)};
    }
    return taps;
}

template <typename Sample>
void resample(int sh, int sw, int dh, int dw, Sample&& sample) {
    const auto ty = bilinear_taps(sh, dh);
    const auto tx = bilinear_taps(sw, dw);
    for (int y = 0; y < dh; ++y)
        for (int x = 0; x < dw; ++x) sample(y, x, ty[static_cast<std::size_t>(y)], tx[static_cast<std::size_t>(x)]);
}

}  // namespace

RasterImage resize_bilinear(const RasterImage& image, int height, int width) {
    if (height < 1 || width < 1) throw ImagingError("resize target must be at least 1x1");
    if (height == image.height && width == image.width) return image;
    RasterImage out(height, width);
    resample(image.height, image.width, height, width, [&](int y, int x, const Tap& a, const Tap& b) {
        for (int c = 0; c < 3; ++c) {
            const float top = image.at(c, a.i0, b.i0) * (1 - b.f) + image.at(c, a.i0, b.i1) * b.f;
            const float bot = image.at(c, a.i1, b.i0) * (1 - b.f) + image.at(c, a.i1, b.i1) * b.f;
            out.at(c, y, x) = std::clamp(top * (1 - a.f) + bot * a.f, 0.0f, 1.0f);
        }
    });
    return out;
}

AlphaMatte resize_bilinear(const AlphaMatte& matte, int height, int width) {
    if (height < 1 || width < 1) throw ImagingError("resize target must be at least 1x1");
    if (height == matte.height && width == matte.width) return matte;
    AlphaMatte out(height, width);
    resample(matte.height, matte.width, height, width, [&](int y, int x, const Tap& a, const Tap& b) {
        const float top = matte.at(a.i0, b.i0) * (1 - b.f) + matte.at(a.i0, b.i1) * b.f;
        const float bot = matte.at(a.i1, b.i0) * (1 - b.f) + matte.at(a.i1, b.i1) * b.f;
        out.at(y, x) = std::clamp(top * (1 - a.f) + bot * a.f, 0.0f, 1.0f);
    });
    return out;
}

BinaryMask resize_nearest(const BinaryMask& mask, int height, int width) {
    if (height == mask.height && width == mask.width) return mask;
    BinaryMask out(height, width);
    for (int y = 0; y < height; ++y) {
        const int sy = std::min(mask.height - 1, static_cast<int>((y + 0.5) * mask.height / height));
        for (int x = 0; x < width; ++x) {
            const int sx = std::min(mask.width - 1, static_cast<int>((x + 0.5) * mask.width / width));
            out.at(y, x) = mask.at(sy, sx);
        }
    }
    return out;
}

RasterImage flip_horizontal(const RasterImage& image) {
    RasterImage out(image.height, image.width);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < image.height; ++y)
            for (int x = 0; x < image.width; ++x) out.at(c, y, x) = image.at(c, y, image.width - 1 - x);
    return out;
}

AlphaMatte flip_horizontal(const AlphaMatte& matte) {
    AlphaMatte out(matte.height, matte.width);
    for (int y = 0; y < matte.height; ++y)
        for (int x = 0; x < matte.width; ++x) out.at(y, x) = matte.at(y, matte.width - 1 - x);
    return out;
}

Exemplar fit_resize(const Exemplar& exemplar, const BBox& box) {
    if (box.w < 1 || box.h < 1) throw ImagingError("box extents must be at least 1");
    const int h = exemplar.image.height, w = exemplar.image.width;
    const double scale = std::min(static_cast<double>(box.h) / h, static_cast<double>(box.w) / w);
    const int nh = std::clamp(static_cast<int>(std::lround(h * scale)), 1, box.h);
    const int nw = std::clamp(static_cast<int>(std::lround(w * scale)), 1, box.w);
    if (nh == h && nw == w) return exemplar;
    return {resize_bilinear(exemplar.image, nh, nw), resize_bilinear(exemplar.matte, nh, nw)};
}

BinaryMask make_mask(const BBox& box, int height, int width) {
    if (!box.within(height, width)) {
        throw ImagingError("box (" + std::to_string(box.x) + "," + std::to_string(box.y) + "," + std::to_string(box.w) +
                           "," + std::to_string(box.h) + ") exceeds " + std::to_string(height) + "x" +
                           std::to_string(width) + " image");
    }
    BinaryMask m(height, width);
    for (int y = box.y; y < box.y + box.h; ++y)
        for (int x = box.x; x < box.x + box.w; ++x) m.at(y, x) = 1;
    return m;
}

BBox mask_bounds(const BinaryMask& mask) {
    int y0 = mask.height, y1 = -1, x0 = mask.width, x1 = -1;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(y, x)) {
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
            }
    if (y1 < 0) throw ImagingError("mask is empty");
    return {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

Composite paste(const RasterImage& scene, const Exemplar& exemplar, const BBox& box,
                const std::optional<BinaryMask>& mask) {
    if (!box.within(scene.height, scene.width)) throw ImagingError("paste box lies outside the scene");
    const int eh = exemplar.image.height, ew = exemplar.image.width;
    if (eh > box.h || ew > box.w) throw ImagingError("exemplar exceeds the paste box; fit_resize it first");
    if (exemplar.matte.height != eh || exemplar.matte.width != ew) throw ImagingError("exemplar matte size mismatch");

    Composite out{scene, mask ? *mask : make_mask(box, scene.height, scene.width), box};
    if (out.mask.height != scene.height || out.mask.width != scene.width) throw ImagingError("mask size does not match scene");
    if (mask) {
        std::size_t inside = 0;
        for (int y = 0; y < scene.height; ++y)
            for (int x = 0; x < scene.width; ++x) {
                if (!out.mask.at(y, x)) continue;
                if (x < box.x || y < box.y || x >= box.x + box.w || y >= box.y + box.h) {
                    throw ImagingError("mask is not contained in the paste box");
                }
                ++inside;
            }
        if (inside == 0) throw ImagingError("mask has no overlap with the paste box");
    }

    for (int y = 0; y < scene.height; ++y)
        for (int x = 0; x < scene.width; ++x)
            if (out.mask.at(y, x))
                for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = 0.0f;

    const int oy = box.y + (box.h - eh) / 2;
    const int ox = box.x + (box.w - ew) / 2;
    for (int y = 0; y < eh; ++y)
        for (int x = 0; x < ew; ++x) {
            if (!out.mask.at(oy + y, ox + x)) continue;
            const float a = exemplar.matte.at(y, x);
            for (int c = 0; c < 3; ++c) {
                float& dst = out.image.at(c, oy + y, ox + x);
                dst = std::clamp(a * exemplar.image.at(c, y, x) + (1.0f - a) * dst, 0.0f, 1.0f);
            }
        }
    return out;
}

AlphaMatte threshold_matte(const RasterImage& image) {
    const int h = image.height, w = image.width;
    AlphaMatte out(h, w);
    if (h == 0 || w == 0) return out;
    float bg[3];
    for (int c = 0; c < 3; ++c) {
        std::vector<float> ring;
        for (int x = 0; x < w; ++x) {
            ring.push_back(image.at(c, 0, x));
            if (h > 1) ring.push_back(image.at(c, h - 1, x));
        }
        for (int y = 1; y + 1 < h; ++y) {
            ring.push_back(image.at(c, y, 0));
            if (w > 1) ring.push_back(image.at(c, y, w - 1));
        }
        auto mid = ring.begin() + static_cast<std::ptrdiff_t>(ring.size() / 2);
        std::nth_element(ring.begin(), mid, ring.end());
        bg[c] = *mid;
    }
    float dmax = 0.0f;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float s = 0;
            for (int c = 0; c < 3; ++c) {
                const float d = image.at(c, y, x) - bg[c];
                s += d * d;
            }
            out.at(y, x) = std::sqrt(s);
            dmax = std::max(dmax, out.at(y, x));
        }
    // Linear ramp between 10% and 50% of the largest distance.
    if (dmax < 1e-6f) {
        std::fill(out.values.begin(), out.values.end(), 0.0f);
        return out;
    }
    const float lo = 0.1f * dmax, hi = 0.5f * dmax;
    for (auto& v : out.values) v = std::clamp((v - lo) / (hi - lo), 0.0f, 1.0f);
    return out;
}

nlohmann::json to_json(const BBox& box) { return {{"x", box.x}, {"y", box.y}, {"w", box.w}, {"h", box.h}}; }

BBox bbox_from_json(const nlohmann::json& j) {
    try {
        return {j.at("x").get<int>(), j.at("y").get<int>(), j.at("w").get<int>(), j.at("h").get<int>()};
    } catch (const nlohmann::json::exception& e) {
        throw ImagingError(std::string("malformed bbox JSON: ") + e.what());
    }
}

}  // namespace phd::imaging
