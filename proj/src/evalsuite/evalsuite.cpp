#include "phd/evalsuite.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>

#include "phd/core/archive.hpp"
#include "phd/core/ops.hpp"
#include "phd/core/optim.hpp"

namespace phd::evalsuite {

namespace {

constexpr double kNegativeFloor = -1e-8;

// Symmetric square root through the eigendecomposition; tiny negative
// eigenvalues are treated as zero, larger ones mean the input was not PSD.
Eigen::SelfAdjointEigenSolver<MatrixXd> psd_eigen(const MatrixXd& m, const char* what) {
    const MatrixXd sym = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym);
    if (es.info() != Eigen::Success) throw std::runtime_error(std::string("eigendecomposition failed for ") + what);
    const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    if (es.eigenvalues().minCoeff() < kNegativeFloor * scale) {
        throw std::invalid_argument(std::string(what) + " is not positive semidefinite (eigenvalue " +
                                    std::to_string(es.eigenvalues().minCoeff()) + ")");
    }
    return es;
}

MatrixXd sqrt_psd(const MatrixXd& m, const char* what) {
    const auto es = psd_eigen(m, what);
    const VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const VectorXd& mu1, const MatrixXd& cov1, const VectorXd& mu2, const MatrixXd& cov2) {
    const auto d = mu1.size();
    if (mu2.size() != d || cov1.rows() != d || cov1.cols() != d || cov2.rows() != d || cov2.cols() != d) {
        throw std::invalid_argument("frechet_distance: dimension mismatch");
    }
    psd_eigen(cov2, "cov2");
    const MatrixXd s1 = sqrt_psd(cov1, "cov1");
    const auto es = psd_eigen(s1 * cov2 * s1, "cov1^1/2 cov2 cov1^1/2");
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double value = (mu1 - mu2).squaredNorm() + cov1.trace() + cov2.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, value);
}

GaussianFit fit_gaussian(const MatrixXd& features, double shrinkage) {
    if (features.rows() == 0) throw EmptySetError("cannot fit a Gaussian to an empty set");
    GaussianFit g;
    g.mu = features.colwise().mean().transpose();
    const MatrixXd centered = features.rowwise() - g.mu.transpose();
    const double denom = features.rows() > 1 ? static_cast<double>(features.rows() - 1) : 1.0;
    g.cov = centered.transpose() * centered / denom;
    if (features.rows() < features.cols() + 1) {
        const MatrixXd diag = g.cov.diagonal().asDiagonal();
        g.cov = (1.0 - shrinkage) * g.cov + shrinkage * diag;
    }
    return g;
}

double cosine_score(const VectorXd& a, const VectorXd& b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine_score: dimension mismatch");
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(100.0 * a.dot(b) / (na * nb), -100.0, 100.0);
}

MatrixXd embed_all(const FeatureExtractor& extractor, const std::vector<imaging::RasterImage>& images) {
    MatrixXd out(static_cast<Eigen::Index>(images.size()), extractor.dim());
    for (std::size_t i = 0; i < images.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = extractor.embed(images[i]).transpose();
    return out;
}

double fid(const std::vector<imaging::RasterImage>& a, const std::vector<imaging::RasterImage>& b,
           const FeatureExtractor& extractor) {
    if (a.empty() || b.empty()) throw EmptySetError("fid needs two nonempty image sets");
    const GaussianFit ga = fit_gaussian(embed_all(extractor, a));
    const GaussianFit gb = fit_gaussian(embed_all(extractor, b));
    return frechet_distance(ga.mu, ga.cov, gb.mu, gb.cov);
}

double clip_i(const imaging::RasterImage& edited, const imaging::RasterImage& exemplar, const FeatureExtractor& extractor) {
    return cosine_score(extractor.embed(edited), extractor.embed(exemplar));
}

double clip_t(const imaging::RasterImage& edited, const std::string& caption, const FeatureExtractor& extractor) {
    return cosine_score(extractor.embed(edited), extractor.embed_text(caption));
}

// ---------------------------------------------------------------------------

ConvEmbedder::ConvEmbedder(std::uint64_t seed) {
    Rng rng(seed);
    build(rng);
}

ConvEmbedder::ConvEmbedder(ParamStore params) : params_(std::move(params)) {
    const std::size_t before = params_.entries().size();
    Rng rng(0);
    build(rng);
    if (params_.entries().size() != before) {
        throw std::invalid_argument("embedder checkpoint is missing " + params_.entries().back().first);
    }
    params_.set_requires_grad(false);
}

void ConvEmbedder::build(Rng& rng) {
    c1_ = nn::conv2d(params_, rng, "img.c1", 3, 16, 3, 2);
    n1_ = nn::group_norm(params_, "img.n1", 16, 4);
    c2_ = nn::conv2d(params_, rng, "img.c2", 16, 32, 3, 2);
    n2_ = nn::group_norm(params_, "img.n2", 32, 4);
    c3_ = nn::conv2d(params_, rng, "img.c3", 32, 64, 3, 2);
    n3_ = nn::group_norm(params_, "img.n3", 64, 4);
    head_ = nn::linear(params_, rng, "img.head", 64, kDim);
    tokens_ = params_.obtain("txt.tokens", {TextCondition::kVocabulary + 1, kDim},
                             [&rng](Tensor& t) { fill_normal(t, rng, 0.1); });
    null_text_ = params_.obtain("txt.null", {1, kDim}, [&rng](Tensor& t) { fill_normal(t, rng, 0.1); });
    text_head_ = nn::linear(params_, rng, "txt.head", kDim, kDim);
}

Var ConvEmbedder::forward_images(const Tensor& batch) const {
    if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != kInput || batch.dim(3) != kInput) {
        throw ShapeError("embedder expects [N,3," + std::to_string(kInput) + "," + std::to_string(kInput) + "], got " +
                         shape_str(batch.shape()));
    }
    Var h = ops::silu(n1_(c1_(constant(batch))));
    h = ops::silu(n2_(c2_(h)));
    h = ops::silu(n3_(c3_(h)));
    return ops::l2_normalize_rows(head_(ops::global_avg_pool(h)));
}

Var ConvEmbedder::forward_texts(const std::vector<std::string>& texts) const {
    std::vector<Var> rows;
    rows.reserve(texts.size());
    for (const auto& text : texts) {
        const TextCondition tc = encode_text(text);
        if (tc.is_null || tc.token_ids.empty()) {
            rows.push_back(null_text_);
            continue;
        }
        const int n = tc.filled();
        const Var picked = ops::reshape(ops::gather_rows(tokens_, tc.token_ids), {1, n, kDim});
        const Var mean = constant(Tensor({1, 1, n}, Real(1) / static_cast<Real>(n)));
        rows.push_back(ops::reshape(ops::bmm(mean, picked, false), {1, kDim}));
    }
    return ops::l2_normalize_rows(text_head_(ops::concat0(rows)));
}

namespace {

Tensor embedder_input(const imaging::RasterImage& image) {
    const imaging::RasterImage small =
        image.height == ConvEmbedder::kInput && image.width == ConvEmbedder::kInput
            ? image
            : imaging::resize_bilinear(image, ConvEmbedder::kInput, ConvEmbedder::kInput);
    return diffusion::to_latent(small);
}

VectorXd row_vector(const Tensor& t, int row) {
    const int d = t.dim(1);
    VectorXd v(d);
    for (int j = 0; j < d; ++j) v[j] = static_cast<double>(t[static_cast<std::size_t>(row) * d + j]);
    return v;
}

}  // namespace

VectorXd ConvEmbedder::embed(const imaging::RasterImage& image) const {
    NoGradGuard guard;
    return row_vector(forward_images(embedder_input(image))->value, 0);
}

VectorXd ConvEmbedder::embed_text(const std::string& text) const {
    NoGradGuard guard;
    return row_vector(forward_texts({text})->value, 0);
}

void ConvEmbedder::save(const std::filesystem::path& path) const {
    write_archive(path, {{"kind", "embedder"}, {"name", name()}, {"dim", kDim}, {"checksum", checksum()}}, params_);
}

ConvEmbedder ConvEmbedder::load(const std::filesystem::path& path) {
    Archive ar = read_archive(path);
    if (ar.meta.value("kind", "") != "embedder") throw std::runtime_error("not an embedder checkpoint: " + path.string());
    ConvEmbedder e(std::move(ar.params));
    if (ar.meta.contains("checksum") && ar.meta["checksum"] != e.checksum()) {
        throw std::runtime_error("embedder checksum mismatch: " + path.string());
    }
    return e;
}

namespace {

// Random resized crop, horizontal flip and per-channel gain.
imaging::RasterImage random_view(const imaging::RasterImage& image, Rng& rng) {
    const double scale = 0.6 + 0.4 * uniform01(rng);
    const int ch = std::max(1, static_cast<int>(std::lround(image.height * scale)));
    const int cw = std::max(1, static_cast<int>(std::lround(image.width * scale)));
    const int y0 = uniform_int(rng, 0, image.height - ch);
    const int x0 = uniform_int(rng, 0, image.width - cw);
    imaging::RasterImage crop(ch, cw);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < ch; ++y)
            for (int x = 0; x < cw; ++x) crop.at(c, y, x) = image.at(c, y0 + y, x0 + x);
    imaging::RasterImage view = imaging::resize_bilinear(crop, ConvEmbedder::kInput, ConvEmbedder::kInput);
    if (bernoulli(rng, 0.5)) view = imaging::flip_horizontal(view);
    for (int c = 0; c < 3; ++c) {
        const float gain = static_cast<float>(0.9 + 0.2 * uniform01(rng));
        for (int y = 0; y < view.height; ++y)
            for (int x = 0; x < view.width; ++x) view.at(c, y, x) = std::clamp(view.at(c, y, x) * gain, 0.0f, 1.0f);
    }
    return view;
}

Var similarity_logits(const Var& a, const Var& b, double temperature) {
    const int n = a->value.dim(0), m = b->value.dim(0), d = a->value.dim(1);
    const Var s = ops::bmm(ops::reshape(a, {1, n, d}), ops::reshape(b, {1, m, d}), true);
    return ops::scale(ops::reshape(s, {n, m}), static_cast<Real>(1.0 / temperature));
}

}  // namespace

ConvEmbedder train_embedder(const std::vector<imaging::RasterImage>& images, const std::vector<std::string>& captions,
                            const EmbedderTrainConfig& config) {
    if (images.empty()) throw EmptySetError("train_embedder needs at least one image");
    if (!captions.empty() && captions.size() != images.size()) {
        throw std::invalid_argument("captions must be empty or match the image count");
    }
    if (config.steps < 0 || config.batch < 2 || config.temperature <= 0) {
        throw std::invalid_argument("embedder config: steps >= 0, batch >= 2, temperature > 0");
    }
    ConvEmbedder model(derive_seed(config.seed, 1));
    model.params().set_requires_grad(true);
    AdamW opt(model.params(), AdamWConfig{});
    Rng rng(derive_seed(config.seed, 2));
    const int n = config.batch;
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i;

    for (int step = 0; step < config.steps; ++step) {
        std::vector<imaging::RasterImage> v1, v2;
        std::vector<std::string> texts;
        for (int i = 0; i < n; ++i) {
            const auto idx = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(images.size()) - 1));
            v1.push_back(random_view(images[idx], rng));
            v2.push_back(random_view(images[idx], rng));
            if (!captions.empty()) texts.push_back(captions[idx]);
        }
        std::vector<const imaging::RasterImage*> p1, p2;
        for (int i = 0; i < n; ++i) {
            p1.push_back(&v1[static_cast<std::size_t>(i)]);
            p2.push_back(&v2[static_cast<std::size_t>(i)]);
        }
        const Var z1 = model.forward_images(backbone::batch_latents(p1));
        const Var z2 = model.forward_images(backbone::batch_latents(p2));
        Var loss = ops::add(ops::cross_entropy(similarity_logits(z1, z2, config.temperature), labels),
                            ops::cross_entropy(similarity_logits(z2, z1, config.temperature), labels));
        if (!texts.empty()) {
            const Var zt = model.forward_texts(texts);
            loss = ops::add(loss, ops::cross_entropy(similarity_logits(z1, zt, config.temperature), labels));
        }
        backward(loss);
        opt.step(cosine_lr(config.lr, step, config.steps));
    }
    model.params().set_requires_grad(false);
    return model;
}

double masked_mse(const imaging::RasterImage& a, const imaging::RasterImage& b, const imaging::BinaryMask& mask) {
    if (a.height != b.height || a.width != b.width || mask.height != a.height || mask.width != a.width) {
        throw std::invalid_argument("masked_mse: size mismatch");
    }
    const std::size_t plane = static_cast<std::size_t>(a.height) * a.width;
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        if (!mask.bits[i % plane]) continue;
        const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
        sum += d * d;
        ++count;
    }
    if (count == 0) throw EmptySetError("masked_mse: empty mask");
    return sum / static_cast<double>(count);
}

}  // namespace phd::evalsuite
