#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "phd/datasetgen.hpp"

namespace phd::datasetgen {

namespace fs = std::filesystem;

TrainingSample build_sample(const RasterImage& source, const BBox& box, const AugmentationConfig& config, Rng& rng,
                            const AlphaMatte* matte, const std::string& caption) {
    imaging::validate_scene(source);
    if (!box.within(source.height, source.width)) throw imaging::ImagingError("sample box outside the source image");
    RasterImage crop(box.h, box.w);
    AlphaMatte crop_matte(box.h, box.w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < box.h; ++y)
            for (int x = 0; x < box.w; ++x) crop.at(c, y, x) = source.at(c, box.y + y, box.x + x);
    if (matte) {
        if (matte->height != source.height || matte->width != source.width) {
            throw imaging::ImagingError("matte size does not match the source image");
        }
        for (int y = 0; y < box.h; ++y)
            for (int x = 0; x < box.w; ++x) crop_matte.at(y, x) = matte->at(box.y + y, box.x + x);
    } else {
        crop_matte = imaging::threshold_matte(crop);
    }
    const Exemplar subject = imaging::extract_subject(crop, crop_matte, 0.5f);
    Augmented aug = augment_subject(subject, config, rng);
    const BinaryMask mask = irregularize_mask(box, source.height, source.width, config.p_irregular, rng);
    const BBox region = imaging::mask_bounds(mask);
    const Exemplar fitted = imaging::fit_resize(aug.exemplar, region);
    TrainingSample s;
    s.target = source;
    s.composite = imaging::paste(source, fitted, region, mask);
    s.caption = caption;
    s.applied = std::move(aug.applied);
    return s;
}

std::string caption_for(const SubjectInfo& info) {
    if (!info.caption.empty()) return info.caption;
    if (info.color.empty() || info.shape.empty()) return "a photo";
    std::string out = "a photo of a " + info.color + " " + info.shape;
    if (!info.background.empty()) out += " on a " + info.background + " background";
    return out;
}

namespace {

struct NamedColor {
    const char* name;
    float rgb[3];
};

constexpr NamedColor kPalette[] = {
    {"red", {0.86f, 0.16f, 0.14f}},   {"green", {0.18f, 0.66f, 0.24f}}, {"blue", {0.16f, 0.30f, 0.84f}},
    {"yellow", {0.92f, 0.84f, 0.18f}}, {"purple", {0.56f, 0.24f, 0.70f}}, {"orange", {0.95f, 0.55f, 0.12f}},
    {"white", {0.95f, 0.95f, 0.93f}},  {"black", {0.08f, 0.08f, 0.10f}},  {"cyan", {0.18f, 0.78f, 0.84f}},
};
constexpr int kPaletteSize = static_cast<int>(std::size(kPalette));
constexpr const char* kShapes[] = {"disk", "rectangle", "triangle"};

float quantize(float v) { return static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f; }

struct Shape2D {
    int kind = 0;
    double cx = 0, cy = 0, rx = 0, ry = 0, angle = 0;

    bool contains(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        if (kind == 0) return dx * dx + dy * dy <= rx * rx;
        if (kind == 1) return std::abs(dx) <= rx && std::abs(dy) <= ry;
        // Triangle: inside all three edges of the rotated equilateral triangle.
        double vx[3], vy[3];
        for (int k = 0; k < 3; ++k) {
            const double th = angle + 2 * std::numbers::pi * k / 3;
            vx[k] = cx + rx * std::cos(th);
            vy[k] = cy + rx * std::sin(th);
        }
        bool pos = false, neg = false;
        for (int k = 0; k < 3; ++k) {
            const int j = (k + 1) % 3;
            const double cross = (vx[j] - vx[k]) * (y - vy[k]) - (vy[j] - vy[k]) * (x - vx[k]);
            pos = pos || cross > 0;
            neg = neg || cross < 0;
        }
        return !(pos && neg);
    }
};

// 4x4 supersampled coverage, quantized to k/255.
AlphaMatte coverage(const Shape2D& s, int size) {
    AlphaMatte m(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            int hits = 0;
            for (int sy = 0; sy < 4; ++sy)
                for (int sx = 0; sx < 4; ++sx) hits += s.contains(x + (sx + 0.5) / 4, y + (sy + 0.5) / 4) ? 1 : 0;
            m.at(y, x) = quantize(hits / 16.0f);
        }
    return m;
}

}  // namespace

SyntheticScene render_synthetic_scene(int size, Rng& rng) {
    if (size < 16) throw std::invalid_argument("synthetic scenes need size >= 16");
    SyntheticScene out;
    out.image = RasterImage(size, size);
    const int bg = uniform_int(rng, 0, kPaletteSize - 1);
    const double angle = uniform01(rng) * 2 * std::numbers::pi;
    const bool toward_white = bernoulli(rng, 0.5);
    const double strength = 0.25 + 0.25 * uniform01(rng);
    const double ux = std::cos(angle), uy = std::sin(angle);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double u = 0.5 + ((x + 0.5) / size - 0.5) * ux + ((y + 0.5) / size - 0.5) * uy;
            const double tmix = std::clamp(u, 0.0, 1.0) * strength;
            for (int c = 0; c < 3; ++c) {
                const double base = kPalette[bg].rgb[c];
                out.image.at(c, y, x) = static_cast<float>(base * (1 - tmix) + (toward_white ? 1.0 : 0.0) * tmix);
            }
        }

    const int count = uniform_int(rng, 1, 3);
    for (int i = 0; i < count; ++i) {
        Shape2D s;
        s.kind = uniform_int(rng, 0, 2);
        s.rx = size / 8.0 + uniform01(rng) * size / 8.0;
        s.ry = s.kind == 1 ? s.rx * (0.6 + 0.4 * uniform01(rng)) : s.rx;
        s.angle = uniform01(rng) * 2 * std::numbers::pi;
        const double margin = s.rx + 1;
        s.cx = margin + uniform01(rng) * (size - 2 * margin);
        s.cy = margin + uniform01(rng) * (size - 2 * margin);
        int color = uniform_int(rng, 0, kPaletteSize - 2);
        if (color >= bg) ++color;
        const AlphaMatte cov = coverage(s, size);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const float a = cov.at(y, x);
                if (a <= 0) continue;
                for (int c = 0; c < 3; ++c) {
                    out.image.at(c, y, x) = a * kPalette[color].rgb[c] + (1 - a) * out.image.at(c, y, x);
                }
            }
        out.matte = cov;
        out.info = {kPalette[color].name, kShapes[s.kind], kPalette[bg].name, ""};
    }
    for (float& v : out.image.pixels) v = quantize(v);

    BinaryMask support(size, size);
    for (std::size_t i = 0; i < support.bits.size(); ++i) support.bits[i] = out.matte.values[i] > 0 ? 1 : 0;
    out.bbox = imaging::mask_bounds(support);
    return out;
}

nlohmann::json DatasetManifest::to_json() const {
    nlohmann::json samples_json = nlohmann::json::array();
    for (const auto& s : samples) {
        samples_json.push_back({{"target", s.target},
                                {"composite", s.composite},
                                {"mask", s.mask},
                                {"matte", s.matte},
                                {"bbox", imaging::to_json(s.bbox)},
                                {"caption", s.caption},
                                {"subject", {{"color", s.info.color}, {"shape", s.info.shape}, {"background", s.info.background}}}});
    }
    return {{"version", version},
            {"seed", seed},
            {"image_size", image_size},
            {"count", samples.size()},
            {"config", config.to_json()},
            {"samples", samples_json}};
}

void DatasetManifest::save() const {
    fs::create_directories(root);
    const fs::path path = root / "manifest.json";
    const fs::path tmp = root / "manifest.json.tmp";
    {
        std::ofstream os(tmp, std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + tmp.string());
        os << to_json().dump(2) << "\n";
        if (!os) throw std::runtime_error("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

DatasetManifest DatasetManifest::load(const fs::path& dir_or_file) {
    const fs::path file = fs::is_directory(dir_or_file) ? dir_or_file / "manifest.json" : dir_or_file;
    std::ifstream is(file);
    if (!is) throw std::runtime_error("cannot open manifest " + file.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed manifest " + file.string() + ": " + e.what());
    }
    DatasetManifest m;
    m.root = file.parent_path();
    m.version = j.value("version", std::string("1"));
    m.seed = j.value("seed", std::uint64_t{0});
    m.image_size = j.value("image_size", 0);
    if (j.contains("config")) m.config = AugmentationConfig::from_json(j.at("config"));
    for (const auto& s : j.at("samples")) {
        ManifestEntry e;
        e.target = s.at("target").get<std::string>();
        e.composite = s.at("composite").get<std::string>();
        e.mask = s.at("mask").get<std::string>();
        e.matte = s.value("matte", std::string());
        e.bbox = imaging::bbox_from_json(s.at("bbox"));
        e.caption = s.value("caption", std::string());
        if (s.contains("subject")) {
            const auto& sub = s.at("subject");
            e.info = {sub.value("color", ""), sub.value("shape", ""), sub.value("background", ""), ""};
        }
        m.samples.push_back(std::move(e));
    }
    if (j.contains("count") && j.at("count").get<std::size_t>() != m.samples.size()) {
        throw std::runtime_error("manifest " + file.string() + " count does not match its entries");
    }
    for (const auto& e : m.samples) {
        for (const auto* rel : {&e.target, &e.composite, &e.mask}) {
            if (!fs::exists(m.resolve(*rel))) throw std::runtime_error("manifest lists missing file " + m.resolve(*rel).string());
        }
    }
    return m;
}

DatasetManifest build_synthetic_corpus(const fs::path& dir, const CorpusConfig& config) {
    if (config.count < 1) throw std::invalid_argument("corpus needs at least one sample");
    config.augmentation.validate();
    DatasetManifest m;
    m.root = dir;
    m.seed = config.seed;
    m.image_size = config.image_size;
    m.config = config.augmentation;
    for (const char* sub : {"targets", "composites", "masks", "mattes", "bboxes"}) fs::create_directories(dir / sub);

    for (int i = 0; i < config.count; ++i) {
        char stem[16];
        std::snprintf(stem, sizeof stem, "%06d", i);
        for (int attempt = 0;; ++attempt) {
            Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(i) * 1024 + static_cast<std::uint64_t>(attempt)));
            SyntheticScene scene = render_synthetic_scene(config.image_size, rng);
            const std::string caption = caption_for(scene.info);
            TrainingSample sample;
            try {
                sample = build_sample(scene.image, scene.bbox, config.augmentation, rng, &scene.matte, caption);
            } catch (const imaging::ImagingError&) {
                if (attempt >= 16) throw;
                continue;
            }
            ManifestEntry e;
            e.target = std::string("targets/") + stem + ".png";
            e.composite = std::string("composites/") + stem + ".png";
            e.mask = std::string("masks/") + stem + ".png";
            e.matte = std::string("mattes/") + stem + ".png";
            e.bbox = scene.bbox;
            e.caption = caption;
            e.info = scene.info;
            imaging::write_png(dir / e.target, sample.target);
            imaging::write_png(dir / e.composite, sample.composite.image);
            imaging::write_mask_png(dir / e.mask, sample.composite.mask);
            imaging::write_matte_png(dir / e.matte, scene.matte);
            {
                std::ofstream os(dir / "bboxes" / (std::string(stem) + ".json"), std::ios::trunc);
                if (!os) throw std::runtime_error("cannot write bbox for sample " + std::string(stem));
                os << imaging::to_json(scene.bbox).dump() << "\n";
            }
            m.samples.push_back(std::move(e));
            break;
        }
    }
    m.save();
    return m;
}

std::vector<LoadedSample> load_samples(const DatasetManifest& manifest) {
    std::vector<LoadedSample> out;
    out.reserve(manifest.size());
    for (const auto& e : manifest.samples) {
        LoadedSample s;
        s.target = imaging::read_png(manifest.resolve(e.target));
        s.composite = imaging::read_png(manifest.resolve(e.composite));
        s.mask = imaging::read_mask_png(manifest.resolve(e.mask));
        s.caption = e.caption;
        if (s.target.height != s.composite.height || s.target.width != s.composite.width ||
            s.mask.height != s.target.height || s.mask.width != s.target.width) {
            throw std::runtime_error("sample " + e.target + " has inconsistent sizes");
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace phd::datasetgen
