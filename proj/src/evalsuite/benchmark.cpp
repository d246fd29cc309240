#include <algorithm>
#include <fstream>
#include <regex>

#include "phd/core/archive.hpp"
#include "phd/evalsuite.hpp"

namespace phd::evalsuite {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> png_stems(const fs::path& dir) {
    std::vector<std::string> stems;
    if (!fs::is_directory(dir)) return stems;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png") stems.push_back(entry.path().stem().string());
    }
    std::sort(stems.begin(), stems.end());
    return stems;
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    return nlohmann::json::parse(is);
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + tmp.string());
        os << text;
    }
    fs::rename(tmp, path);
}

std::string sample_id(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06d", i);
    return buf;
}

}  // namespace

Benchmark load_benchmark(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw MissingArtifact("benchmark directory not found: " + dir.string());
    Benchmark bench;
    const auto ids = png_stems(dir / "scenes");
    if (ids.empty()) throw EmptySetError("benchmark has no samples: " + (dir / "scenes").string());

    nlohmann::json captions = nlohmann::json::object();
    if (fs::exists(dir / "captions.json")) captions = read_json(dir / "captions.json");

    for (const auto& id : ids) {
        BenchmarkItem item;
        item.id = id;
        item.scene = imaging::read_png(dir / "scenes" / (id + ".png"));
        const fs::path mask_png = dir / "masks" / (id + ".png");
        const fs::path bbox_json = dir / "bboxes" / (id + ".json");
        if (fs::exists(mask_png)) {
            item.mask = imaging::read_mask_png(mask_png);
        } else if (fs::exists(bbox_json)) {
            const imaging::BBox box = imaging::bbox_from_json(read_json(bbox_json));
            if (!box.within(item.scene.height, item.scene.width)) {
                throw imaging::ImagingError("bbox for " + id + " lies outside the scene");
            }
            item.mask = imaging::make_mask(box, item.scene.height, item.scene.width);
        } else {
            throw MissingArtifact("sample " + id + " has neither masks/" + id + ".png nor bboxes/" + id + ".json");
        }
        const fs::path exemplar = dir / "exemplars" / (id + ".png");
        if (!fs::exists(exemplar)) throw MissingArtifact("missing exemplar " + exemplar.string());
        item.exemplar = imaging::read_png(exemplar);
        const fs::path matte = dir / "exemplar_mattes" / (id + ".png");
        if (fs::exists(matte)) item.exemplar_matte = imaging::read_matte_png(matte);
        const fs::path target = dir / "targets" / (id + ".png");
        if (fs::exists(target)) item.target = imaging::read_png(target);
        if (captions.contains(id)) item.caption = captions[id].get<std::string>();
        bench.items.push_back(std::move(item));
    }

    for (const auto& stem : png_stems(dir / "reference")) {
        bench.reference.push_back(imaging::read_png(dir / "reference" / (stem + ".png")));
    }
    if (bench.reference.empty()) {
        for (const auto& item : bench.items) bench.reference.push_back(item.scene);
        bench.reference_is_scenes = true;
    }
    return bench;
}

void write_synthetic_benchmark(const fs::path& dir, const SyntheticBenchmarkConfig& config) {
    if (config.count < 1 || config.image_size < 8) throw std::invalid_argument("benchmark needs count >= 1, size >= 8");
    config.augmentation.validate();
    for (const char* sub : {"scenes", "masks", "exemplars", "exemplar_mattes", "targets", "reference"}) {
        fs::create_directories(dir / sub);
    }
    nlohmann::json captions = nlohmann::json::object();
    for (int i = 0; i < config.count; ++i) {
        Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(i)));
        const datasetgen::SyntheticScene scene = datasetgen::render_synthetic_scene(config.image_size, rng);
        const imaging::Exemplar subject = imaging::extract_subject(scene.image, scene.matte, 0.5f);
        const datasetgen::Augmented aug = datasetgen::augment_subject(subject, config.augmentation, rng);
        const std::string id = sample_id(i);
        imaging::write_png(dir / "scenes" / (id + ".png"), scene.image);
        imaging::write_png(dir / "targets" / (id + ".png"), scene.image);
        imaging::write_mask_png(dir / "masks" / (id + ".png"),
                                imaging::make_mask(scene.bbox, config.image_size, config.image_size));
        imaging::write_png(dir / "exemplars" / (id + ".png"), aug.exemplar.image);
        imaging::write_matte_png(dir / "exemplar_mattes" / (id + ".png"), aug.exemplar.matte);
        captions[id] = datasetgen::caption_for(scene.info);
    }
    for (int i = 0; i < config.reference_count; ++i) {
        Rng rng(derive_seed(config.seed, (1ull << 32) + static_cast<std::uint64_t>(i)));
        imaging::write_png(dir / "reference" / (sample_id(i) + ".png"),
                           datasetgen::render_synthetic_scene(config.image_size, rng).image);
    }
    write_text(dir / "captions.json", captions.dump(2));
}

Editor make_editor(const pipeline::ModelBundle& models, const pipeline::EditOptions& options) {
    return [models, options](const BenchmarkItem& item, std::uint64_t seed) {
        pipeline::EditInputs in{item.scene, item.exemplar, item.exemplar_matte, item.mask, item.caption};
        pipeline::EditOptions o = options;
        o.sampler.seed = seed;
        return pipeline::run_edit(models, in, o);
    };
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json metrics = {{"clip_i", clip_i},       {"clip_t", clip_t},         {"fid_scene", fid_scene},
                              {"fid_ref", fid_ref},     {"fid_corpus", fid_corpus}, {"sample_count", sample_count},
                              {"failures", failures}};
    if (masked_mse) metrics["masked_mse"] = *masked_mse;
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& r : per_sample) {
        nlohmann::json s = {{"id", r.id}, {"ok", r.ok}};
        if (r.ok) {
            s["clip_i"] = r.clip_i;
            s["clip_t"] = r.clip_t;
            if (r.masked_mse) s["masked_mse"] = *r.masked_mse;
        } else {
            s["error"] = r.error;
        }
        samples.push_back(std::move(s));
    }
    return {{"metrics", metrics},
            {"per_sample", samples},
            {"config_digest", config_digest},
            {"extractor", extractor},
            {"mode", mode}};
}

std::string MetricReport::digest() const { return sha256_hex(to_json().dump()); }

MetricReport run_benchmark(const Editor& editor, const Benchmark& bench, const FeatureExtractor& extractor,
                           const BenchmarkConfig& config) {
    if (bench.items.empty()) throw EmptySetError("benchmark has no samples");
    MetricReport report;
    report.extractor = extractor.name();
    report.mode = config.describe.is_object() ? config.describe.value("mode", "custom") : "custom";
    report.config_digest = sha256_hex(nlohmann::json{{"seed", config.seed},
                                                     {"describe", config.describe},
                                                     {"extractor", report.extractor},
                                                     {"samples", bench.items.size()}}
                                          .dump());

    const auto max_failures = bench.items.size() / 10;
    std::vector<imaging::RasterImage> edited, scenes, exemplars;
    double sum_i = 0, sum_t = 0, sum_mse = 0;
    int mse_count = 0;
    for (std::size_t i = 0; i < bench.items.size(); ++i) {
        const BenchmarkItem& item = bench.items[i];
        SampleRecord rec;
        rec.id = item.id;
        try {
            const pipeline::EditResult result = editor(item, derive_seed(config.seed, i));
            rec.clip_i = clip_i(result.image, item.exemplar, extractor);
            rec.clip_t = clip_t(result.image, item.caption, extractor);
            if (item.target) rec.masked_mse = masked_mse(result.image, *item.target, item.mask);
            rec.ok = true;
            if (!config.output_dir.empty()) {
                imaging::write_png(config.output_dir / "edited" / (item.id + ".png"), result.image);
                imaging::write_png(config.output_dir / "composites" / (item.id + ".png"), result.composite.image);
            }
            edited.push_back(result.image);
            scenes.push_back(item.scene);
            exemplars.push_back(item.exemplar);
            sum_i += rec.clip_i;
            sum_t += rec.clip_t;
            if (rec.masked_mse) {
                sum_mse += *rec.masked_mse;
                ++mse_count;
            }
        } catch (const std::exception& e) {
            rec.error = e.what();
            ++report.failures;
            if (static_cast<std::size_t>(report.failures) > max_failures) {
                throw std::runtime_error("benchmark aborted: " + std::to_string(report.failures) + " of " +
                                         std::to_string(bench.items.size()) + " samples failed (last: " + item.id +
                                         ": " + e.what() + ")");
            }
        }
        report.per_sample.push_back(std::move(rec));
    }

    report.sample_count = static_cast<int>(edited.size());
    report.clip_i = sum_i / report.sample_count;
    report.clip_t = sum_t / report.sample_count;
    if (mse_count > 0) report.masked_mse = sum_mse / mse_count;
    report.fid_scene = fid(edited, scenes, extractor);
    report.fid_ref = fid(edited, exemplars, extractor);
    report.fid_corpus = fid(edited, bench.reference, extractor);

    if (!config.output_dir.empty()) write_text(config.output_dir / "report.json", report.to_json().dump(2));
    return report;
}

MetricReport run_benchmark(const pipeline::ModelBundle& models, const fs::path& dir, const FeatureExtractor& extractor,
                           const pipeline::EditOptions& options, const BenchmarkConfig& config) {
    const Benchmark bench = load_benchmark(dir);
    BenchmarkConfig c = config;
    if (!c.describe.contains("mode")) c.describe["mode"] = pipeline::to_string(options.mode);
    return run_benchmark(make_editor(models, options), bench, extractor, c);
}

imaging::Composite scene_generation_composite(const imaging::Exemplar& exemplar, int size) {
    if (size < 8) throw std::invalid_argument("scene size must be at least 8");
    const imaging::RasterImage black(size, size, 0.0f);
    const int half = size / 2;
    const imaging::BBox box{(size - half) / 2, (size - half) / 2, half, half};
    const imaging::Exemplar fitted = imaging::fit_resize(exemplar, box);
    imaging::Composite c = imaging::paste(black, fitted, box);
    c.mask = imaging::BinaryMask(size, size, 1);
    c.bbox = {0, 0, size, size};
    return c;
}

imaging::RasterImage scene_generation(const imaging::Exemplar& exemplar, const std::string& prompt,
                                      const pipeline::ModelBundle& models, const pipeline::EditOptions& options) {
    const int s = models.resolution();
    const imaging::Composite c = scene_generation_composite(exemplar, s);
    if (c.mask.area() != static_cast<std::size_t>(s) * s) throw std::logic_error("scene generation mask must cover the image");
    return pipeline::sample_edit(models, imaging::RasterImage(s, s, 0.0f), c, prompt, options);
}

AblationMode AblationMode::parse(const std::string& s) {
    static const std::pair<const char*, Kind> kNames[] = {
        {"full", kFull},
        {"i2i", kImg2Img},
        {"inpaint", kInpaint},
        {"inpaint_null", kInpaintNull},
        {"finetune_backbone", kFinetuneBackbone},
        {"no_augmentation", kNoAugmentation},
    };
    for (const auto& [name, kind] : kNames) {
        if (s == name) return {kind, 0};
    }
    static const std::regex kPattern(R"(disconnect_k[:=(]?(\d+)\)?)");
    std::smatch m;
    if (std::regex_match(s, m, kPattern)) return {kDisconnect, std::stoi(m[1].str())};
    throw std::invalid_argument("unknown ablation mode '" + s +
                                "' (full, i2i, inpaint, inpaint_null, finetune_backbone, no_augmentation, "
                                "disconnect_k(N))");
}

std::string AblationMode::to_string() const {
    switch (kind) {
        case kFull: return "full";
        case kImg2Img: return "i2i";
        case kInpaint: return "inpaint";
        case kInpaintNull: return "inpaint_null";
        case kFinetuneBackbone: return "finetune_backbone";
        case kNoAugmentation: return "no_augmentation";
        case kDisconnect: return "disconnect_k(" + std::to_string(k) + ")";
    }
    return "unknown";
}

MetricReport run_ablation(const AblationMode& mode, const pipeline::ModelBundle& models,
                          const AblationArtifacts& artifacts, const Benchmark& bench, const FeatureExtractor& extractor,
                          const pipeline::EditOptions& options, const BenchmarkConfig& config) {
    pipeline::ModelBundle bundle = models;
    pipeline::EditOptions o = options;
    o.disconnect_k = -1;
    auto need_harmonizer = [&] {
        if (!models.harmonizer) throw MissingArtifact(mode.to_string() + " needs a harmonizer checkpoint");
    };
    switch (mode.kind) {
        case AblationMode::kFull:
            need_harmonizer();
            o.mode = pipeline::EditMode::kFull;
            break;
        case AblationMode::kImg2Img: o.mode = pipeline::EditMode::kImg2Img; break;
        case AblationMode::kInpaint: o.mode = pipeline::EditMode::kInpaint; break;
        case AblationMode::kInpaintNull: o.mode = pipeline::EditMode::kInpaintNull; break;
        case AblationMode::kFinetuneBackbone:
            if (artifacts.finetuned_backbone.empty() || !fs::exists(artifacts.finetuned_backbone)) {
                throw MissingArtifact("finetune_backbone needs a fine-tuned backbone checkpoint (--finetuned-backbone)");
            }
            bundle = pipeline::ModelBundle::load(artifacts.finetuned_backbone, {});
            o.mode = pipeline::EditMode::kInpaint;
            break;
        case AblationMode::kNoAugmentation:
            if (artifacts.no_aug_harmonizer.empty() || !fs::exists(artifacts.no_aug_harmonizer)) {
                throw MissingArtifact(
                    "no_augmentation needs a harmonizer trained without augmentation (--no-aug-harmonizer)");
            }
            bundle.harmonizer = std::make_shared<harmonizer::Harmonizer>(
                harmonizer::Harmonizer::load(artifacts.no_aug_harmonizer, *models.backbone));
            o.mode = pipeline::EditMode::kFull;
            break;
        case AblationMode::kDisconnect:
            need_harmonizer();
            if (mode.k < 0 || mode.k > models.harmonizer->connections()) {
                throw std::out_of_range("disconnect_k must lie in [0, " +
                                        std::to_string(models.harmonizer->connections()) + "]");
            }
            o.mode = pipeline::EditMode::kFull;
            o.disconnect_k = mode.k;
            break;
    }
    BenchmarkConfig c = config;
    c.describe["mode"] = mode.to_string();
    c.describe["sampler"] = {{"steps", o.sampler.steps},
                             {"guidance", o.sampler.guidance},
                             {"eta", o.sampler.eta},
                             {"kind", diffusion::to_string(o.sampler.kind)}};
    return run_benchmark(make_editor(bundle, o), bench, extractor, c);
}

backbone::Backbone finetune_backbone(const backbone::Backbone& base, const datasetgen::DatasetManifest& corpus,
                                     const diffusion::NoiseSchedule& schedule, const backbone::PretrainConfig& config) {
    backbone::Backbone tuned = base.unfrozen_copy();
    backbone::pretrain_backbone(tuned, corpus, schedule, config);
    tuned.freeze();
    return tuned;
}

}  // namespace phd::evalsuite
