#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "phd/core/nn.hpp"
#include "phd/datasetgen.hpp"
#include "phd/pipeline.hpp"

namespace phd::evalsuite {

using Eigen::MatrixXd;
using Eigen::VectorXd;

class MissingArtifact : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class EmptySetError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// ||mu1 - mu2||^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2)), with the square
// root taken through sqrt(cov1) cov2 sqrt(cov1).
double frechet_distance(const VectorXd& mu1, const MatrixXd& cov1, const VectorXd& mu2, const MatrixXd& cov2);

struct GaussianFit {
    VectorXd mu;
    MatrixXd cov;
};

// Rows are samples. With fewer than dim+1 rows the covariance is shrunk
// toward its diagonal by `shrinkage`.
GaussianFit fit_gaussian(const MatrixXd& features, double shrinkage = 0.1);

// 100 x cosine similarity.
double cosine_score(const VectorXd& a, const VectorXd& b);

class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual std::string name() const = 0;
    virtual int dim() const = 0;
    // Unit-norm embedding.
    virtual VectorXd embed(const imaging::RasterImage& image) const = 0;
    // Caption embedding in the same space; empty text maps to a fixed null vector.
    virtual VectorXd embed_text(const std::string& text) const = 0;
};

MatrixXd embed_all(const FeatureExtractor& extractor, const std::vector<imaging::RasterImage>& images);

double fid(const std::vector<imaging::RasterImage>& a, const std::vector<imaging::RasterImage>& b,
           const FeatureExtractor& extractor);
double clip_i(const imaging::RasterImage& edited, const imaging::RasterImage& exemplar, const FeatureExtractor& extractor);
double clip_t(const imaging::RasterImage& edited, const std::string& caption, const FeatureExtractor& extractor);

// Small convolutional image embedder with a hashed-token text tower, trained
// contrastively (two augmented views as positives, plus image-caption pairs).
class ConvEmbedder : public FeatureExtractor {
public:
    static constexpr int kInput = 32;
    static constexpr int kDim = 32;

    explicit ConvEmbedder(std::uint64_t seed);
    explicit ConvEmbedder(ParamStore params);

    std::string name() const override { return "phd-conv-embedder-v1"; }
    int dim() const override { return kDim; }
    VectorXd embed(const imaging::RasterImage& image) const override;
    VectorXd embed_text(const std::string& text) const override;

    Var forward_images(const Tensor& batch) const;  // [N,3,32,32] in [-1,1] -> [N,D] unit rows
    Var forward_texts(const std::vector<std::string>& texts) const;

    ParamStore& params() { return params_; }
    std::string checksum() const { return params_.checksum(); }
    void save(const std::filesystem::path& path) const;
    static ConvEmbedder load(const std::filesystem::path& path);

private:
    void build(Rng& rng);

    ParamStore params_;
    nn::Conv2d c1_, c2_, c3_;
    nn::GroupNorm n1_, n2_, n3_;
    nn::Linear head_;
    Var tokens_;
    Var null_text_;
    nn::Linear text_head_;
};

struct EmbedderTrainConfig {
    int steps = 300;
    int batch = 16;
    double lr = 3e-3;
    double temperature = 0.1;
    std::uint64_t seed = 0;
};

// Trains on images (and their captions when given, same length or empty).
ConvEmbedder train_embedder(const std::vector<imaging::RasterImage>& images, const std::vector<std::string>& captions,
                            const EmbedderTrainConfig& config);

struct BenchmarkItem {
    std::string id;
    imaging::RasterImage scene;
    imaging::BinaryMask mask;
    imaging::RasterImage exemplar;
    std::optional<imaging::AlphaMatte> exemplar_matte;
    std::string caption;
    std::optional<imaging::RasterImage> target;
};

struct Benchmark {
    std::vector<BenchmarkItem> items;
    std::vector<imaging::RasterImage> reference;  // corpus images for fid_corpus; scenes when absent
    bool reference_is_scenes = false;
};

// scenes/*.png, masks/*.png or bboxes/*.json, exemplars/*.png, captions.json;
// optional exemplar_mattes/, targets/ and reference/.
Benchmark load_benchmark(const std::filesystem::path& dir);

struct SyntheticBenchmarkConfig {
    int count = 32;
    int image_size = 64;
    int reference_count = 64;
    std::uint64_t seed = 1000;
    datasetgen::AugmentationConfig augmentation;  // applied to the exemplars
};

// Held-out triplets rendered like the synthetic corpus: the ground truth is
// the original scene, the exemplar is its own (augmented) subject.
void write_synthetic_benchmark(const std::filesystem::path& dir, const SyntheticBenchmarkConfig& config);

// Maps an item (with its per-sample seed) to an edit.
using Editor = std::function<pipeline::EditResult(const BenchmarkItem& item, std::uint64_t seed)>;

Editor make_editor(const pipeline::ModelBundle& models, const pipeline::EditOptions& options);

struct SampleRecord {
    std::string id;
    bool ok = false;
    std::string error;
    double clip_i = 0;
    double clip_t = 0;
    std::optional<double> masked_mse;
};

struct MetricReport {
    double clip_i = 0;
    double clip_t = 0;
    double fid_scene = 0;
    double fid_ref = 0;
    double fid_corpus = 0;
    std::optional<double> masked_mse;
    int sample_count = 0;
    int failures = 0;
    std::string extractor;
    std::string config_digest;
    std::string mode;
    std::vector<SampleRecord> per_sample;

    nlohmann::json to_json() const;
    std::string digest() const;
};

struct BenchmarkConfig {
    std::uint64_t seed = 0;
    std::filesystem::path output_dir;  // per-sample PNGs and report.json; empty = none
    nlohmann::json describe;           // folded into the config digest
};

MetricReport run_benchmark(const Editor& editor, const Benchmark& bench, const FeatureExtractor& extractor,
                           const BenchmarkConfig& config);
MetricReport run_benchmark(const pipeline::ModelBundle& models, const std::filesystem::path& dir,
                           const FeatureExtractor& extractor, const pipeline::EditOptions& options,
                           const BenchmarkConfig& config);

imaging::RasterImage scene_generation(const imaging::Exemplar& exemplar, const std::string& prompt,
                                      const pipeline::ModelBundle& models, const pipeline::EditOptions& options);
// The black-scene composite used by scene_generation (mask = whole image).
imaging::Composite scene_generation_composite(const imaging::Exemplar& exemplar, int size);

struct AblationMode {
    enum Kind { kFull, kImg2Img, kInpaint, kInpaintNull, kFinetuneBackbone, kNoAugmentation, kDisconnect };
    Kind kind = kFull;
    int k = 0;  // for kDisconnect

    static AblationMode parse(const std::string& s);
    std::string to_string() const;
};

struct AblationArtifacts {
    std::filesystem::path finetuned_backbone;     // for finetune_backbone
    std::filesystem::path no_aug_harmonizer;      // for no_augmentation
};

MetricReport run_ablation(const AblationMode& mode, const pipeline::ModelBundle& models,
                          const AblationArtifacts& artifacts, const Benchmark& bench, const FeatureExtractor& extractor,
                          const pipeline::EditOptions& options, const BenchmarkConfig& config);

// Unfreezes a copy of the backbone and keeps training it on the corpus
// targets; the result is frozen again.
backbone::Backbone finetune_backbone(const backbone::Backbone& base, const datasetgen::DatasetManifest& corpus,
                                     const diffusion::NoiseSchedule& schedule, const backbone::PretrainConfig& config);

double masked_mse(const imaging::RasterImage& a, const imaging::RasterImage& b, const imaging::BinaryMask& mask);

}  // namespace phd::evalsuite
