#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "phd/core/archive.hpp"
#include "phd/service.hpp"
#include "phd/training.hpp"

namespace phd::service {

namespace fs = std::filesystem;

namespace {

// Thrown for argument combinations CLI11 cannot express; maps to exit 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    nlohmann::json config;

    nlohmann::json block(const char* name) const {
        return config.contains(name) ? config[name] : nlohmann::json::object();
    }
    std::uint64_t seed_or(const nlohmann::json& j) const { return seed ? *seed : j.value("seed", std::uint64_t{0}); }
};

template <typename T>
T pick(const std::optional<T>& flag, const nlohmann::json& j, const char* key, T fallback) {
    if (flag) return *flag;
    return j.value(key, fallback);
}

fs::path pick_path(const std::string& flag, const nlohmann::json& config, const char* key) {
    if (!flag.empty()) return flag;
    if (config.contains("checkpoints")) return config["checkpoints"].value(key, std::string{});
    return {};
}

diffusion::NoiseSchedule schedule_from(const nlohmann::json& config) {
    const nlohmann::json j = config.contains("schedule") ? config["schedule"] : nlohmann::json::object();
    return diffusion::linear_schedule(j.value("T", 200), j.value("beta_start", 1e-4), j.value("beta_end", 0.02));
}

void write_file(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + tmp.string());
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    fs::rename(tmp, path);
}

pipeline::ModelBundle load_models(const fs::path& backbone, const fs::path& harmonizer) {
    if (backbone.empty()) throw UsageError("a backbone checkpoint is required (--backbone or checkpoints.backbone)");
    return pipeline::ModelBundle::load(backbone, harmonizer);
}

struct SamplerFlags {
    std::optional<int> steps;
    std::optional<double> guidance;
    std::string mode = "full";
    int disconnect_k = -1;

    void add(CLI::App* app, bool with_mode) {
        app->add_option("--steps", steps, "Sampling steps");
        app->add_option("-w,--guidance", guidance, "Guidance weight w");
        if (with_mode) {
            app->add_option("--mode", mode, "full | i2i | inpaint | inpaint_null");
            app->add_option("--disconnect-k", disconnect_k, "Keep only the first k connections");
        }
    }

    pipeline::EditOptions options(const Common& c) const {
        EditParams p;
        p.steps = steps;
        p.guidance = guidance;
        p.seed = c.seed_or(c.block("sampler"));
        p.mode = parse_edit_mode(mode);
        p.disconnect_k = disconnect_k;
        return edit_options(sampler_from_json(c.block("sampler")), p);
    }
};

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

std::unique_ptr<evalsuite::FeatureExtractor> resolve_embedder(const Common& c, const std::string& flag,
                                                              const std::string& corpus_dir, int steps,
                                                              const std::string& save_to,
                                                              const evalsuite::Benchmark& bench) {
    const fs::path path = pick_path(flag, c.config, "embedder");
    if (!path.empty() && fs::exists(path)) {
        return std::make_unique<evalsuite::ConvEmbedder>(evalsuite::ConvEmbedder::load(path));
    }
    evalsuite::EmbedderTrainConfig ec;
    const auto j = c.block("embedder");
    ec.steps = steps >= 0 ? steps : j.value("steps", ec.steps);
    ec.batch = j.value("batch", ec.batch);
    ec.lr = j.value("lr", ec.lr);
    ec.temperature = j.value("temperature", ec.temperature);
    ec.seed = c.seed_or(j);
    std::vector<imaging::RasterImage> images;
    std::vector<std::string> captions;
    if (!corpus_dir.empty()) {
        for (auto& s : datasetgen::load_samples(datasetgen::DatasetManifest::load(corpus_dir))) {
            images.push_back(std::move(s.target));
            captions.push_back(std::move(s.caption));
        }
    } else {
        for (const auto& item : bench.items) {
            images.push_back(item.scene);
            captions.push_back(item.caption);
        }
    }
    std::cerr << "training the feature extractor on " << images.size() << " images (" << ec.steps << " steps)\n";
    auto e = std::make_unique<evalsuite::ConvEmbedder>(evalsuite::train_embedder(images, captions, ec));
    const fs::path out = !save_to.empty() ? fs::path(save_to) : path;
    if (!out.empty()) e->save(out);
    return e;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"Paste, inpaint and harmonize: subject-driven image editing at desk scale", "phd"};
    app.require_subcommand(1);
    app.fallthrough();
    Common c;
    app.add_option("--config", c.config_path, "JSON config (default: $PHD_CONFIG)");
    app.add_option("--seed", c.seed, "Random seed");

    // corpus
    auto* corpus = app.add_subcommand("corpus", "Build the synthetic training corpus (or a benchmark)");
    std::string corpus_out;
    std::optional<int> corpus_count, corpus_size, reference_count;
    bool no_aug = false, as_benchmark = false;
    corpus->add_option("--out", corpus_out, "Output directory")->required();
    corpus->add_option("--count", corpus_count, "Number of samples");
    corpus->add_option("--size", corpus_size, "Image size");
    corpus->add_flag("--no-augmentation", no_aug, "Disable subject augmentation and irregular masks");
    corpus->add_flag("--benchmark", as_benchmark, "Write held-out edit triplets instead");
    corpus->add_option("--reference-count", reference_count, "Reference images for fid_corpus (benchmark only)");

    // pretrain
    auto* pretrain = app.add_subcommand("pretrain", "Pretrain (or continue training) the backbone");
    std::string pt_corpus, pt_out, pt_from, pt_csv;
    std::optional<int> pt_steps, pt_batch, pt_log;
    std::optional<double> pt_lr;
    pretrain->add_option("--corpus", pt_corpus, "Corpus directory")->required();
    pretrain->add_option("--out", pt_out, "Backbone checkpoint to write")->required();
    pretrain->add_option("--from", pt_from, "Continue from this checkpoint (fine-tuning)");
    pretrain->add_option("--steps", pt_steps);
    pretrain->add_option("--batch", pt_batch);
    pretrain->add_option("--lr", pt_lr);
    pretrain->add_option("--log-every", pt_log);
    pretrain->add_option("--loss-csv", pt_csv, "Write step,loss");

    // train
    auto* train = app.add_subcommand("train", "Train the harmonizer against a frozen backbone");
    std::string tr_corpus, tr_backbone, tr_out, tr_csv;
    std::optional<int> tr_steps, tr_batch, tr_log, tr_every;
    std::optional<double> tr_lr;
    bool tr_image_dropout = false, tr_no_latent = false;
    train->add_option("--corpus", tr_corpus, "Corpus directory")->required();
    train->add_option("--backbone", tr_backbone, "Frozen backbone checkpoint");
    train->add_option("--out", tr_out, "Harmonizer checkpoint to write")->required();
    train->add_option("--steps", tr_steps);
    train->add_option("--batch", tr_batch);
    train->add_option("--lr", tr_lr);
    train->add_option("--log-every", tr_log);
    train->add_option("--checkpoint-every", tr_every);
    train->add_option("--loss-csv", tr_csv, "Loss history CSV");
    train->add_flag("--image-dropout", tr_image_dropout, "Also blank the composite when the text is dropped");
    train->add_flag("--no-latent", tr_no_latent, "Harmonizer sees only composite and mask");

    // edit
    auto* edit = app.add_subcommand("edit", "Edit one scene");
    std::string ed_scene, ed_exemplar, ed_mask, ed_bbox, ed_prompt, ed_out = "out.png", ed_comp, ed_backbone,
                                                                ed_harmonizer;
    SamplerFlags ed_flags;
    edit->add_option("--scene", ed_scene)->required();
    edit->add_option("--exemplar", ed_exemplar)->required();
    auto* mask_opt = edit->add_option("--mask", ed_mask, "Mask PNG (nonzero = edit)");
    edit->add_option("--bbox", ed_bbox, R"(Region as JSON {"x":..,"y":..,"w":..,"h":..})")->excludes(mask_opt);
    edit->add_option("--prompt", ed_prompt);
    edit->add_option("--out", ed_out, "Result PNG");
    edit->add_option("--composite-out", ed_comp, "Also write the pasted composite");
    edit->add_option("--backbone", ed_backbone);
    edit->add_option("--harmonizer", ed_harmonizer);
    ed_flags.add(edit, true);

    // generate
    auto* generate = app.add_subcommand("generate", "Scene generation around an exemplar");
    std::string gen_exemplar, gen_prompt, gen_out = "out.png", gen_comp, gen_backbone, gen_harmonizer;
    SamplerFlags gen_flags;
    generate->add_option("--exemplar", gen_exemplar)->required();
    generate->add_option("--prompt", gen_prompt);
    generate->add_option("--out", gen_out);
    generate->add_option("--composite-out", gen_comp);
    generate->add_option("--backbone", gen_backbone);
    generate->add_option("--harmonizer", gen_harmonizer);
    gen_flags.add(generate, false);

    // eval / ablate share the benchmark flags
    struct BenchFlags {
        std::string bench, out, backbone, harmonizer, embedder, embedder_corpus, embedder_out;
        int embedder_steps = -1;
        SamplerFlags sampler;
    };
    auto add_bench = [](CLI::App* sub, BenchFlags& f) {
        sub->add_option("--bench", f.bench, "Benchmark directory")->required();
        sub->add_option("--out", f.out, "Per-sample outputs and report.json");
        sub->add_option("--backbone", f.backbone);
        sub->add_option("--harmonizer", f.harmonizer);
        sub->add_option("--embedder", f.embedder, "Feature extractor checkpoint (trained when missing)");
        sub->add_option("--embedder-corpus", f.embedder_corpus, "Train the extractor on this corpus");
        sub->add_option("--embedder-steps", f.embedder_steps);
        sub->add_option("--embedder-out", f.embedder_out, "Save a freshly trained extractor here");
    };
    auto* eval = app.add_subcommand("eval", "Run the benchmark");
    BenchFlags ev;
    add_bench(eval, ev);
    ev.sampler.add(eval, true);

    auto* ablate = app.add_subcommand("ablate", "Run one ablation mode over the benchmark");
    BenchFlags ab;
    std::string ab_mode, ab_finetuned, ab_noaug;
    add_bench(ablate, ab);
    ab.sampler.add(ablate, false);
    ablate->add_option("--ablation", ab_mode,
                       "full | i2i | inpaint | inpaint_null | finetune_backbone | no_augmentation | disconnect_k(N)")
        ->required();
    ablate->add_option("--finetuned-backbone", ab_finetuned);
    ablate->add_option("--no-aug-harmonizer", ab_noaug);

    auto* serve = app.add_subcommand("serve", "HTTP service");
    std::string sv_bind, sv_static, sv_backbone, sv_harmonizer;
    serve->add_option("--bind", sv_bind, "host:port");
    serve->add_option("--static", sv_static, "Directory served under /ui/");
    serve->add_option("--backbone", sv_backbone);
    serve->add_option("--harmonizer", sv_harmonizer);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        c.config = load_config(c.config_path);

        if (*corpus) {
            const auto j = c.block(as_benchmark ? "benchmark" : "corpus");
            datasetgen::AugmentationConfig aug = j.contains("augmentation")
                                                     ? datasetgen::AugmentationConfig::from_json(j["augmentation"])
                                                     : datasetgen::AugmentationConfig{};
            if (no_aug) aug = datasetgen::AugmentationConfig::none();
            if (as_benchmark) {
                evalsuite::SyntheticBenchmarkConfig bc;
                bc.count = pick(corpus_count, j, "count", bc.count);
                bc.image_size = pick(corpus_size, j, "image_size", bc.image_size);
                bc.reference_count = pick(reference_count, j, "reference_count", bc.reference_count);
                bc.seed = c.seed ? *c.seed : j.value("seed", bc.seed);
                bc.augmentation = aug;
                evalsuite::write_synthetic_benchmark(corpus_out, bc);
                std::cerr << "wrote " << bc.count << " triplets to " << corpus_out << "\n";
            } else {
                datasetgen::CorpusConfig cc;
                cc.count = pick(corpus_count, j, "count", cc.count);
                cc.image_size = pick(corpus_size, j, "image_size", cc.image_size);
                cc.seed = c.seed_or(j);
                aug.seed = cc.seed;
                cc.augmentation = aug;
                const auto m = datasetgen::build_synthetic_corpus(corpus_out, cc);
                std::cerr << "wrote " << m.size() << " samples to " << corpus_out << "\n";
            }
            return 0;
        }

        if (*pretrain) {
            const auto j = c.block("pretrain");
            backbone::PretrainConfig pc;
            pc.steps = pick(pt_steps, j, "steps", pc.steps);
            pc.batch = pick(pt_batch, j, "batch", pc.batch);
            pc.lr = pick(pt_lr, j, "lr", pc.lr);
            pc.warmup = j.value("warmup", pc.warmup);
            pc.text_dropout = j.value("text_dropout", pc.text_dropout);
            pc.log_every = pick(pt_log, j, "log_every", 100);
            pc.seed = c.seed_or(j);
            const auto manifest = datasetgen::DatasetManifest::load(pt_corpus);
            diffusion::NoiseSchedule schedule = schedule_from(c.config);
            std::optional<backbone::Backbone> model;
            int done_before = 0;
            if (!pt_from.empty()) {
                model.emplace(backbone::Backbone::load(pt_from, &schedule).unfrozen_copy());
                done_before = read_archive(pt_from).meta.value("training_step", 0);
            } else {
                backbone::UNetSpec spec =
                    c.config.contains("spec") ? backbone::UNetSpec::from_json(c.config["spec"]) : backbone::UNetSpec{};
                spec.image_size = manifest.image_size;
                model.emplace(spec, derive_seed(pc.seed, 0x5eed));
            }
            const auto r = backbone::pretrain_backbone(*model, manifest, schedule, pc);
            model->freeze();
            model->save(pt_out, schedule, done_before + pc.steps);
            if (!pt_csv.empty()) {
                std::string text = "step,loss\n";
                for (std::size_t i = 0; i < r.losses.size(); ++i) {
                    text += std::to_string(i + 1) + "," + std::to_string(r.losses[i]) + "\n";
                }
                write_file(pt_csv, text);
            }
            print_json({{"checkpoint", pt_out}, {"checksum", model->checksum()}, {"steps", pc.steps}});
            return 0;
        }

        if (*train) {
            const auto j = c.block("train");
            training::TrainConfig tc = training::TrainConfig::from_json(j);
            if (tr_steps) tc.steps = *tr_steps;
            if (tr_batch) tc.batch = *tr_batch;
            if (tr_lr) tc.lr = *tr_lr;
            if (tr_every) tc.checkpoint_every = *tr_every;
            tc.log_every = pick(tr_log, j, "log_every", 100);
            if (tr_image_dropout) tc.image_dropout = true;
            tc.seed = c.seed_or(j);
            tc.checkpoint_path = tr_out;
            tc.loss_csv = tr_csv.empty() ? j.value("loss_csv", std::string{}) : tr_csv;
            tc.validate();
            diffusion::NoiseSchedule schedule;
            backbone::Backbone bb = backbone::Backbone::load(
                [&] {
                    const fs::path p = pick_path(tr_backbone, c.config, "backbone");
                    if (p.empty()) throw UsageError("train needs --backbone");
                    return p;
                }(),
                &schedule);
            bb.freeze();
            harmonizer::HarmonizerOptions ho;
            if (c.config.contains("harmonizer")) ho = harmonizer::HarmonizerOptions::from_json(c.config["harmonizer"]);
            if (tr_no_latent) ho.ipm_sees_latent = false;
            harmonizer::Harmonizer phi = harmonizer::Harmonizer::init_from_backbone(bb, derive_seed(tc.seed, 0x1a), ho);
            const auto manifest = datasetgen::DatasetManifest::load(tr_corpus);
            const auto r = training::train_harmonizer(phi, bb, manifest, schedule, tc);
            print_json({{"checkpoint", tr_out},
                        {"checksum", phi.checksum()},
                        {"backbone_checksum", bb.checksum()},
                        {"final_loss_ma100", r.history.empty() ? 0.0 : r.history.back().loss_ma100}});
            return 0;
        }

        if (*edit) {
            const ServiceConfig sc = ServiceConfig::from_json(c.config);
            const pipeline::EditOptions options = ed_flags.options(c);
            std::optional<imaging::BinaryMask> mask;
            std::optional<imaging::BBox> bbox;
            if (!ed_mask.empty()) mask = imaging::read_mask_png(ed_mask);
            else if (!ed_bbox.empty()) bbox = parse_bbox(ed_bbox);
            const auto models = load_models(pick_path(ed_backbone, c.config, "backbone"),
                                            options.mode == pipeline::EditMode::kFull
                                                ? pick_path(ed_harmonizer, c.config, "harmonizer")
                                                : fs::path{});
            const auto inputs = prepare_inputs(imaging::read_png(ed_scene), imaging::read_png(ed_exemplar), mask, bbox,
                                               ed_prompt, sc.max_dimension);
            const RenderedEdit r = render_edit(models, inputs, options);
            write_file(ed_out, r.png);
            if (!ed_comp.empty()) write_file(ed_comp, r.composite_png);
            std::cerr << "wrote " << ed_out << "\n";
            return 0;
        }

        if (*generate) {
            const ServiceConfig sc = ServiceConfig::from_json(c.config);
            const pipeline::EditOptions options = gen_flags.options(c);
            const auto models = load_models(pick_path(gen_backbone, c.config, "backbone"),
                                            pick_path(gen_harmonizer, c.config, "harmonizer"));
            const imaging::RasterImage image = limit_dimension(imaging::read_png(gen_exemplar), sc.max_dimension);
            const imaging::Exemplar ex = imaging::extract_subject(image, imaging::threshold_matte(image), 0.5f);
            const RenderedEdit r = render_generation(models, ex, gen_prompt, options);
            write_file(gen_out, r.png);
            if (!gen_comp.empty()) write_file(gen_comp, r.composite_png);
            std::cerr << "wrote " << gen_out << "\n";
            return 0;
        }

        if (*eval || *ablate) {
            BenchFlags& f = *eval ? ev : ab;
            const evalsuite::Benchmark bench = evalsuite::load_benchmark(f.bench);
            const auto extractor =
                resolve_embedder(c, f.embedder, f.embedder_corpus, f.embedder_steps, f.embedder_out, bench);
            pipeline::EditOptions options = f.sampler.options(c);
            evalsuite::BenchmarkConfig bc;
            bc.seed = c.seed_or(c.block("sampler"));
            bc.output_dir = f.out;
            evalsuite::MetricReport report;
            if (*eval) {
                const auto models = load_models(pick_path(f.backbone, c.config, "backbone"),
                                                options.mode == pipeline::EditMode::kFull
                                                    ? pick_path(f.harmonizer, c.config, "harmonizer")
                                                    : fs::path{});
                bc.describe = {{"mode", pipeline::to_string(options.mode)},
                               {"disconnect_k", options.disconnect_k},
                               {"steps", options.sampler.steps},
                               {"guidance", options.sampler.guidance}};
                report = evalsuite::run_benchmark(evalsuite::make_editor(models, options), bench, *extractor, bc);
            } else {
                const auto mode = evalsuite::AblationMode::parse(ab_mode);
                const auto models = load_models(pick_path(f.backbone, c.config, "backbone"),
                                                pick_path(f.harmonizer, c.config, "harmonizer"));
                report = evalsuite::run_ablation(mode, models, {ab_finetuned, ab_noaug}, bench, *extractor, options, bc);
            }
            nlohmann::json summary = report.to_json();
            summary.erase("per_sample");
            summary["digest"] = report.digest();
            print_json(summary);
            return 0;
        }

        if (*serve) {
            ServiceConfig sc = ServiceConfig::from_json(c.config);
            if (!sv_bind.empty()) parse_bind(sv_bind, sc.host, sc.port);
            if (!sv_static.empty()) sc.static_dir = sv_static;
            sc.sampler.seed = c.seed_or(c.block("sampler"));
            auto models = load_models(pick_path(sv_backbone, c.config, "backbone"),
                                      pick_path(sv_harmonizer, c.config, "harmonizer"));
            HttpService http(std::move(models), sc);
            http.serve_forever();
            return 0;
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const InputError& e) {
        std::cerr << "error: " << e.field() << ": " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace phd::service
