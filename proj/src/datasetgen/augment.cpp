#include <algorithm>
#include <cmath>
#include <numbers>

#include "phd/datasetgen.hpp"

namespace phd::datasetgen {

AugmentationConfig AugmentationConfig::none() {
    AugmentationConfig c;
    c.p_flip = c.p_rotate = c.p_hsv = c.p_blur = c.p_elastic = 0.0;
    c.p_irregular = 0.0;
    return c;
}

void AugmentationConfig::validate() const {
    for (double p : {p_flip, p_rotate, p_hsv, p_blur, p_elastic, p_irregular}) {
        if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("augmentation probabilities must lie in [0,1]");
    }
    if (rotate_degrees < -180 || rotate_degrees > 180) throw std::invalid_argument("rotate range must lie in [-180,180]");
    if (blur_kernel_min < 3 || blur_kernel_min % 2 == 0 || blur_kernel_max % 2 == 0 || blur_kernel_max < blur_kernel_min) {
        throw std::invalid_argument("blur kernels must be odd and >= 3");
    }
    if (elastic_alpha < 0 || elastic_sigma <= 0) throw std::invalid_argument("elastic parameters must be positive");
}

nlohmann::json AugmentationConfig::to_json() const {
    return {{"p_flip", p_flip},
            {"p_rotate", p_rotate},
            {"p_hsv", p_hsv},
            {"p_blur", p_blur},
            {"p_elastic", p_elastic},
            {"rotate_degrees", rotate_degrees},
            {"hue_shift", hue_shift},
            {"saturation_shift", saturation_shift},
            {"value_shift", value_shift},
            {"blur_kernel_min", blur_kernel_min},
            {"blur_kernel_max", blur_kernel_max},
            {"elastic_alpha", elastic_alpha},
            {"elastic_sigma", elastic_sigma},
            {"p_irregular", p_irregular},
            {"seed", seed}};
}

AugmentationConfig AugmentationConfig::from_json(const nlohmann::json& j) {
    AugmentationConfig c;
    c.p_flip = j.value("p_flip", c.p_flip);
    c.p_rotate = j.value("p_rotate", c.p_rotate);
    c.p_hsv = j.value("p_hsv", c.p_hsv);
    c.p_blur = j.value("p_blur", c.p_blur);
    c.p_elastic = j.value("p_elastic", c.p_elastic);
    c.rotate_degrees = j.value("rotate_degrees", c.rotate_degrees);
    c.hue_shift = j.value("hue_shift", c.hue_shift);
    c.saturation_shift = j.value("saturation_shift", c.saturation_shift);
    c.value_shift = j.value("value_shift", c.value_shift);
    c.blur_kernel_min = j.value("blur_kernel_min", c.blur_kernel_min);
    c.blur_kernel_max = j.value("blur_kernel_max", c.blur_kernel_max);
    c.elastic_alpha = j.value("elastic_alpha", c.elastic_alpha);
    c.elastic_sigma = j.value("elastic_sigma", c.elastic_sigma);
    c.p_irregular = j.value("p_irregular", c.p_irregular);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

namespace {

// Bilinear lookup in index coordinates; samples outside the grid read 0.
template <typename Get>
float sample_zero(int h, int w, double sy, double sx, Get&& get) {
    const int x0 = static_cast<int>(std::floor(sx));
    const int y0 = static_cast<int>(std::floor(sy));
    const double fx = sx - x0, fy = sy - y0;
    double acc = 0;
    for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
            const int yy = y0 + dy, xx = x0 + dx;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            const double wgt = (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
            if (wgt != 0) acc += wgt * get(yy, xx);
        }
    }
    return static_cast<float>(acc);
}

// Resamples image and matte jointly through a per-pixel source coordinate map.
template <typename Map>
Exemplar warp(const Exemplar& e, int out_h, int out_w, Map&& map) {
    Exemplar out{RasterImage(out_h, out_w), AlphaMatte(out_h, out_w)};
    const int h = e.matte.height, w = e.matte.width;
    for (int y = 0; y < out_h; ++y) {
        for (int x = 0; x < out_w; ++x) {
            double sy, sx;
            map(y, x, sy, sx);
            const float a = std::clamp(sample_zero(h, w, sy, sx, [&](int yy, int xx) { return e.matte.at(yy, xx); }), 0.0f, 1.0f);
            out.matte.at(y, x) = a;
            if (a <= 0.0f) continue;
            for (int c = 0; c < 3; ++c) {
                out.image.at(c, y, x) = std::clamp(
                    sample_zero(h, w, sy, sx, [&](int yy, int xx) { return e.image.at(c, yy, xx); }), 0.0f, 1.0f);
            }
        }
    }
    return out;
}

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
    const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const float d = mx - mn;
    v = mx;
    s = mx > 0 ? d / mx : 0;
    if (d <= 0) {
        h = 0;
        return;
    }
    if (mx == r) {
        h = (g - b) / d;
    } else if (mx == g) {
        h = 2 + (b - r) / d;
    } else {
        h = 4 + (r - g) / d;
    }
    h /= 6;
    if (h < 0) h += 1;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    const float hh = h * 6;
    const int i = static_cast<int>(std::floor(hh)) % 6;
    const float f = hh - std::floor(hh);
    const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (i) {
        case 0: r = v, g = t, b = p; break;
        case 1: r = q, g = v, b = p; break;
        case 2: r = p, g = v, b = t; break;
        case 3: r = p, g = q, b = v; break;
        case 4: r = t, g = p, b = v; break;
        default: r = v, g = p, b = q; break;
    }
}

std::vector<double> gaussian_kernel(double sigma, int radius) {
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[static_cast<std::size_t>(i + radius)];
    }
    for (double& v : k) v /= sum;
    return k;
}

// Separable Gaussian smoothing with clamped borders.
void smooth(std::vector<double>& field, int h, int w, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
    const auto k = gaussian_kernel(sigma, radius);
    std::vector<double> tmp(field.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i) {
                acc += k[static_cast<std::size_t>(i + radius)] * field[static_cast<std::size_t>(y) * w + std::clamp(x + i, 0, w - 1)];
            }
            tmp[static_cast<std::size_t>(y) * w + x] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i) {
                acc += k[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(std::clamp(y + i, 0, h - 1)) * w + x];
            }
            field[static_cast<std::size_t>(y) * w + x] = acc;
        }
}

}  // namespace

Exemplar tighten(const Exemplar& e) {
    int y0 = e.matte.height, y1 = -1, x0 = e.matte.width, x1 = -1;
    for (int y = 0; y < e.matte.height; ++y)
        for (int x = 0; x < e.matte.width; ++x)
            if (e.matte.at(y, x) > 0) {
                y0 = std::min(y0, y), y1 = std::max(y1, y);
                x0 = std::min(x0, x), x1 = std::max(x1, x);
            }
    if (y1 < 0) return e;
    if (y0 == 0 && x0 == 0 && y1 == e.matte.height - 1 && x1 == e.matte.width - 1) return e;
    const int h = y1 - y0 + 1, w = x1 - x0 + 1;
    Exemplar out{RasterImage(h, w), AlphaMatte(h, w)};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            out.matte.at(y, x) = e.matte.at(y + y0, x + x0);
            for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = e.image.at(c, y + y0, x + x0);
        }
    return out;
}

Exemplar rotate_exemplar(const Exemplar& e, double degrees) {
    const double th = degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(th), sn = std::sin(th);
    const int h = e.matte.height, w = e.matte.width;
    const int out_w = std::max(1, static_cast<int>(std::ceil(std::abs(w * cs) + std::abs(h * sn) - 1e-9)));
    const int out_h = std::max(1, static_cast<int>(std::ceil(std::abs(w * sn) + std::abs(h * cs) - 1e-9)));
    const double icx = w / 2.0, icy = h / 2.0, ocx = out_w / 2.0, ocy = out_h / 2.0;
    Exemplar r = warp(e, out_h, out_w, [&](int y, int x, double& sy, double& sx) {
        const double dx = x + 0.5 - ocx, dy = y + 0.5 - ocy;
        sx = cs * dx + sn * dy + icx - 0.5;
        sy = -sn * dx + cs * dy + icy - 0.5;
    });
    Exemplar t = tighten(r);
    bool any = false;
    for (float a : t.matte.values) any = any || a > 0;
    return any ? t : e;
}

Exemplar hsv_shift(const Exemplar& e, double dh, double ds, double dv) {
    Exemplar out = e;
    const int h = e.matte.height, w = e.matte.width;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (e.matte.at(y, x) <= 0) continue;
            float hh, s, v, r, g, b;
            rgb_to_hsv(e.image.at(0, y, x), e.image.at(1, y, x), e.image.at(2, y, x), hh, s, v);
            hh = static_cast<float>(hh + dh);
            hh -= std::floor(hh);
            s = std::clamp(static_cast<float>(s + ds), 0.0f, 1.0f);
            v = std::clamp(static_cast<float>(v + dv), 0.0f, 1.0f);
            hsv_to_rgb(hh, s, v, r, g, b);
            out.image.at(0, y, x) = std::clamp(r, 0.0f, 1.0f);
            out.image.at(1, y, x) = std::clamp(g, 0.0f, 1.0f);
            out.image.at(2, y, x) = std::clamp(b, 0.0f, 1.0f);
        }
    return out;
}

Exemplar blur_exemplar(const Exemplar& e, int kernel) {
    if (kernel < 3 || kernel % 2 == 0) throw std::invalid_argument("blur kernel must be odd and >= 3");
    const int radius = kernel / 2;
    const double sigma = 0.3 * ((kernel - 1) * 0.5 - 1) + 0.8;
    const auto k = gaussian_kernel(sigma, radius);
    Exemplar out = e;
    const int h = e.matte.height, w = e.matte.width;
    // Normalized over subject pixels only, so the zero background does not
    // darken the rim.
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (e.matte.at(y, x) <= 0) continue;
            double acc[3] = {0, 0, 0}, wsum = 0;
            for (int dy = -radius; dy <= radius; ++dy)
                for (int dx = -radius; dx <= radius; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w || e.matte.at(yy, xx) <= 0) continue;
                    const double wgt = k[static_cast<std::size_t>(dy + radius)] * k[static_cast<std::size_t>(dx + radius)];
                    wsum += wgt;
                    for (int c = 0; c < 3; ++c) acc[c] += wgt * e.image.at(c, yy, xx);
                }
            for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = std::clamp(static_cast<float>(acc[c] / wsum), 0.0f, 1.0f);
        }
    return out;
}

Exemplar elastic_exemplar(const Exemplar& e, double alpha, double sigma, Rng& rng) {
    const int h = e.matte.height, w = e.matte.width;
    std::vector<double> fx(static_cast<std::size_t>(h) * w), fy(fx.size());
    for (auto& v : fx) v = uniform01(rng) * 2 - 1;
    for (auto& v : fy) v = uniform01(rng) * 2 - 1;
    smooth(fx, h, w, sigma);
    smooth(fy, h, w, sigma);
    Exemplar r = warp(e, h, w, [&](int y, int x, double& sy, double& sx) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        sx = x + alpha * fx[i];
        sy = y + alpha * fy[i];
    });
    Exemplar t = tighten(r);
    bool any = false;
    for (float a : t.matte.values) any = any || a > 0;
    return any ? t : e;
}

Augmented augment_subject(const Exemplar& exemplar, const AugmentationConfig& config, Rng& rng) {
    config.validate();
    Augmented out{exemplar, {}};
    auto uniform = [&rng](double lo, double hi) { return lo + (hi - lo) * uniform01(rng); };
    if (bernoulli(rng, config.p_flip)) {
        out.exemplar.image = imaging::flip_horizontal(out.exemplar.image);
        out.exemplar.matte = imaging::flip_horizontal(out.exemplar.matte);
        out.applied.emplace_back("flip");
    }
    if (bernoulli(rng, config.p_rotate)) {
        out.exemplar = rotate_exemplar(out.exemplar, uniform(-config.rotate_degrees, config.rotate_degrees));
        out.applied.emplace_back("rotate");
    }
    if (bernoulli(rng, config.p_hsv)) {
        const double dh = uniform(-config.hue_shift, config.hue_shift);
        const double ds = uniform(-config.saturation_shift, config.saturation_shift);
        const double dv = uniform(-config.value_shift, config.value_shift);
        out.exemplar = hsv_shift(out.exemplar, dh, ds, dv);
        out.applied.emplace_back("hsv");
    }
    if (bernoulli(rng, config.p_blur)) {
        const int steps = (config.blur_kernel_max - config.blur_kernel_min) / 2;
        const int kernel = config.blur_kernel_min + 2 * uniform_int(rng, 0, steps);
        out.exemplar = blur_exemplar(out.exemplar, kernel);
        out.applied.emplace_back("blur");
    }
    if (bernoulli(rng, config.p_elastic)) {
        const double size = std::max(out.exemplar.matte.height, out.exemplar.matte.width);
        out.exemplar = elastic_exemplar(out.exemplar, config.elastic_alpha * size,
                                        std::max(0.5, config.elastic_sigma * size), rng);
        out.applied.emplace_back("elastic");
    }
    return out;
}

BBox inner_rect(const BBox& box, double scale) {
    const int w = std::max(1, static_cast<int>(std::lround(box.w * scale)));
    const int h = std::max(1, static_cast<int>(std::lround(box.h * scale)));
    return {box.x + (box.w - w) / 2, box.y + (box.h - h) / 2, w, h};
}

BBox dilated_rect(const BBox& box, double scale, int height, int width) {
    const int mx = static_cast<int>(std::floor(box.w * (scale - 1) / 2));
    const int my = static_cast<int>(std::floor(box.h * (scale - 1) / 2));
    const int x0 = std::max(0, box.x - mx), y0 = std::max(0, box.y - my);
    const int x1 = std::min(width, box.x + box.w + mx), y1 = std::min(height, box.y + box.h + my);
    return {x0, y0, x1 - x0, y1 - y0};
}

BinaryMask irregularize_mask(const BBox& box, int height, int width, double probability, Rng& rng, bool* irregular) {
    if (!box.within(height, width)) throw imaging::ImagingError("mask box outside the image");
    if (!(probability >= 0 && probability <= 1)) throw std::invalid_argument("probability must lie in [0,1]");
    const bool take = bernoulli(rng, probability);
    if (irregular) *irregular = take;
    if (!take) return imaging::make_mask(box, height, width);

    const int n = uniform_int(rng, 8, 16);
    const double cx = box.x + box.w / 2.0, cy = box.y + box.h / 2.0;
    const double a = box.w / 2.0, b = box.h / 2.0;
    std::vector<double> jitter(static_cast<std::size_t>(n));
    for (auto& j : jitter) j = uniform01(rng) * 2 - 1;
    // Circular 3-tap smoothing of the radial offsets.
    std::vector<double> smooth_j(jitter.size());
    for (int i = 0; i < n; ++i) {
        smooth_j[static_cast<std::size_t>(i)] = 0.25 * jitter[static_cast<std::size_t>((i + n - 1) % n)] +
                                                0.5 * jitter[static_cast<std::size_t>(i)] +
                                                0.25 * jitter[static_cast<std::size_t>((i + 1) % n)];
    }
    std::vector<double> px(static_cast<std::size_t>(n)), py(px.size());
    for (int i = 0; i < n; ++i) {
        const double th = 2 * std::numbers::pi * (i + 0.5 * (uniform01(rng) - 0.5)) / n;
        const double c = std::cos(th), s = std::sin(th);
        // Distance from the center to the box edge along this ray.
        const double edge = std::min(std::abs(c) > 1e-12 ? a / std::abs(c) : 1e300, std::abs(s) > 1e-12 ? b / std::abs(s) : 1e300);
        const double r = edge * (1.0 + 0.2 * smooth_j[static_cast<std::size_t>(i)]);
        px[static_cast<std::size_t>(i)] = cx + r * c;
        py[static_cast<std::size_t>(i)] = cy + r * s;
    }
    const BBox inner = inner_rect(box, 0.6);
    const BBox outer = dilated_rect(box, 1.1, height, width);
    BinaryMask m(height, width);
    for (int y = outer.y; y < outer.y + outer.h; ++y) {
        for (int x = outer.x; x < outer.x + outer.w; ++x) {
            const double qx = x + 0.5, qy = y + 0.5;
            bool inside = false;
            for (int i = 0, j = n - 1; i < n; j = i++) {
                const double yi = py[static_cast<std::size_t>(i)], yj = py[static_cast<std::size_t>(j)];
                if ((yi > qy) != (yj > qy)) {
                    const double xi = px[static_cast<std::size_t>(i)], xj = px[static_cast<std::size_t>(j)];
                    if (qx < (xj - xi) * (qy - yi) / (yj - yi) + xi) inside = !inside;
                }
            }
            const bool in_inner = x >= inner.x && x < inner.x + inner.w && y >= inner.y && y < inner.y + inner.h;
            m.at(y, x) = (inside || in_inner) ? 1 : 0;
        }
    }
    return m;
}

}  // namespace phd::datasetgen
