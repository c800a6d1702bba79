#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cagan/ops.hpp"
#include "cagan/optim.hpp"

namespace cagan {

// ---------------------------------------------------------------------------
// pre-processing

inline constexpr std::size_t kEvalResolution = 32;

// Bilinear resize, align-corners=false convention: source coordinate of
// output pixel o is (o + 0.5) * (in/out) - 0.5, clamped at the borders.
inline Tensor resize_bilinear(const Tensor& img, std::size_t out_h, std::size_t out_w) {
    if (img.rank() != 4) throw std::invalid_argument("resize_bilinear: rank-4 tensor required");
    const std::size_t n = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3);
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    Tensor out = Tensor::zeros({n, c, out_h, out_w});
    double* dst = out.data();
    for (std::size_t nc = 0; nc < n * c; ++nc) {
        const double* src = img.data() + nc * h * w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
            fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
            const std::size_t y0 = static_cast<std::size_t>(fy);
            const std::size_t y1 = std::min(y0 + 1, h - 1);
            const double wy = fy - static_cast<double>(y0);
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
                fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
                const std::size_t x0 = static_cast<std::size_t>(fx);
                const std::size_t x1 = std::min(x0 + 1, w - 1);
                const double wx = fx - static_cast<double>(x0);
                const double v = (1.0 - wy) * ((1.0 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1]) +
                                 wy * ((1.0 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1]);
                dst[nc * out_h * out_w + oy * out_w + ox] = v;
            }
        }
    }
    return out;
}

// [-1,1] image at any stage resolution -> [0,1] at the classifier input size.
inline Tensor preprocess(const Tensor& img) {
    if (img.rank() != 4 || img.dim(1) != 3)
        throw std::invalid_argument("preprocess: want [N,3,H,W] in [-1,1]");
    Tensor resized = (img.dim(2) == kEvalResolution && img.dim(3) == kEvalResolution)
                         ? img.detach()
                         : resize_bilinear(img, kEvalResolution, kEvalResolution);
    Tensor out = Tensor::zeros(resized.shape());
    for (std::size_t i = 0; i < resized.size(); ++i) out.data()[i] = (resized.at(i) + 1.0) * 0.5;
    return out;
}

// ---------------------------------------------------------------------------
// the shared evaluation network (classifier head + feature head)

// Stand-in feature/classifier network trained on the toy labels; one trunk
// serves both the IS class-probability head and the FID feature head.
struct EvalNet {
    Tensor c1w, c1b, c2w, c2b, c3w, c3b;
    Tensor fc_w, fc_b;
    std::size_t n_classes = 20;
    static constexpr std::size_t kFeatureDim = 64;

    EvalNet() = default;
    EvalNet(std::size_t classes, Rng& rng) : n_classes(classes) {
        auto conv = [&](std::size_t co, std::size_t ci) {
            return Tensor::randn({co, ci, 3, 3}, rng, std::sqrt(2.0 / static_cast<double>(ci * 9)));
        };
        c1w = conv(32, 3);
        c1b = Tensor::zeros({32}, true);
        c2w = conv(64, 32);
        c2b = Tensor::zeros({64}, true);
        c3w = conv(64, 64);
        c3b = Tensor::zeros({64}, true);
        fc_w = Tensor::randn({classes, kFeatureDim}, rng, std::sqrt(1.0 / kFeatureDim));
        fc_b = Tensor::zeros({classes}, true);
    }

    // penultimate feature vector, [N, F]
    Tensor features(const Tensor& preprocessed) const {
        if (preprocessed.rank() != 4 || preprocessed.dim(2) != kEvalResolution)
            throw std::invalid_argument("evalnet: expected preprocessed input");
        Tensor t = relu(add_channel_bias(conv2d(preprocessed, c1w, 2, 1), c1b));
        t = relu(add_channel_bias(conv2d(t, c2w, 2, 1), c2b));
        t = relu(add_channel_bias(conv2d(t, c3w, 2, 1), c3b));
        return mean_pool_spatial(t);
    }

    Tensor logits(const Tensor& feats) const { return add_row_bias(linear(feats, fc_w), fc_b); }

    Tensor probabilities(const Tensor& preprocessed) const {
        return softmax(logits(features(preprocessed)), 1);
    }

    void collect(NamedTensors& reg) const {
        reg.add("eval.c1.w", c1w);
        reg.add("eval.c1.b", c1b);
        reg.add("eval.c2.w", c2w);
        reg.add("eval.c2.b", c2b);
        reg.add("eval.c3.w", c3w);
        reg.add("eval.c3.b", c3b);
        reg.add("eval.fc.w", fc_w);
        reg.add("eval.fc.b", fc_b);
    }
};

// ---------------------------------------------------------------------------
// inception score

struct InceptionScore {
    double mean = 0.0;
    double stddev = 0.0;
};

// exp(mean KL(p(y|x) || p(y))) per split; probabilities clamp at 1e-12.
// Returns mean and population standard deviation over the splits.
inline InceptionScore inception_score(const Tensor& probs, std::size_t n_splits) {
    if (probs.rank() != 2) throw std::invalid_argument("inception_score: want probs[M,C]");
    const std::size_t m = probs.dim(0), c = probs.dim(1);
    if (n_splits == 0 || m % n_splits != 0)
        throw std::invalid_argument("inception_score: sample count must divide into splits");
    const std::size_t per = m / n_splits;

    std::vector<double> split_scores(n_splits);
    for (std::size_t s = 0; s < n_splits; ++s) {
        std::vector<double> marginal(c, 0.0);
        for (std::size_t i = 0; i < per; ++i)
            for (std::size_t j = 0; j < c; ++j) marginal[j] += probs.at((s * per + i) * c + j);
        for (double& v : marginal) v = std::max(v / static_cast<double>(per), 1e-12);
        double mean_kl = 0.0;
        for (std::size_t i = 0; i < per; ++i) {
            double kl = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                const double p = std::max(probs.at((s * per + i) * c + j), 1e-12);
                kl += p * (std::log(p) - std::log(marginal[j]));
            }
            mean_kl += kl;
        }
        split_scores[s] = std::exp(mean_kl / static_cast<double>(per));
    }
    InceptionScore out;
    for (double v : split_scores) out.mean += v;
    out.mean /= static_cast<double>(n_splits);
    double var = 0.0;
    for (double v : split_scores) var += (v - out.mean) * (v - out.mean);
    out.stddev = std::sqrt(var / static_cast<double>(n_splits));
    return out;
}

// ---------------------------------------------------------------------------
// frechet distance

struct GaussianStats {
    Tensor mu;     // [F]
    Tensor sigma;  // [F, F], symmetric
};

// Sample mean and unbiased (M-1) covariance, two-pass.
inline GaussianStats fit_gaussian(const Tensor& features) {
    if (features.rank() != 2) throw std::invalid_argument("fit_gaussian: want features[M,F]");
    const std::size_t m = features.dim(0), f = features.dim(1);
    if (m < 2) throw std::invalid_argument("fit_gaussian: need at least 2 samples");
    GaussianStats out;
    out.mu = Tensor::zeros({f});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < f; ++j) out.mu.data()[j] += features.at(i * f + j);
    for (std::size_t j = 0; j < f; ++j) out.mu.data()[j] /= static_cast<double>(m);

    out.sigma = Tensor::zeros({f, f});
    double* s = out.sigma.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t a = 0; a < f; ++a) {
            const double da = features.at(i * f + a) - out.mu.at(a);
            for (std::size_t b = a; b < f; ++b)
                s[a * f + b] += da * (features.at(i * f + b) - out.mu.at(b));
        }
    }
    const double inv = 1.0 / static_cast<double>(m - 1);
    for (std::size_t a = 0; a < f; ++a)
        for (std::size_t b = a; b < f; ++b) {
            s[a * f + b] *= inv;
            s[b * f + a] = s[a * f + b];
        }
    return out;
}

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), with the matrix square
// root taken through the symmetric form Sa^(1/2) Sb Sa^(1/2); negative
// eigenvalues clamp to zero and a small negative result clamps to zero.
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    if (a.mu.shape() != b.mu.shape()) throw std::invalid_argument("frechet_distance: dim mismatch");
    const std::size_t f = a.mu.size();
    for (std::size_t i = 0; i < a.mu.size(); ++i)
        if (!std::isfinite(a.mu.at(i)) || !std::isfinite(b.mu.at(i)))
            throw std::invalid_argument("frechet_distance: non-finite mean");
    for (std::size_t i = 0; i < a.sigma.size(); ++i)
        if (!std::isfinite(a.sigma.at(i)) || !std::isfinite(b.sigma.at(i)))
            throw std::invalid_argument("frechet_distance: non-finite covariance");

    using Mat = Eigen::MatrixXd;
    Eigen::Map<const Mat> sa(a.sigma.data(), f, f), sb(b.sigma.data(), f, f);

    Eigen::SelfAdjointEigenSolver<Mat> eig_a(sa);
    Eigen::VectorXd la = eig_a.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    Mat sqrt_a = eig_a.eigenvectors() * la.asDiagonal() * eig_a.eigenvectors().transpose();

    Mat inner = sqrt_a * sb * sqrt_a;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Mat> eig_i(inner);
    const double tr_sqrt = eig_i.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    double mean_sq = 0.0;
    for (std::size_t i = 0; i < f; ++i) {
        const double d = a.mu.at(i) - b.mu.at(i);
        mean_sq += d * d;
    }
    const double fid = mean_sq + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    return std::max(fid, 0.0);
}

// ---------------------------------------------------------------------------
// report rows

struct MetricRow {
    std::size_t epoch = 0;
    double is_mean = 0.0;
    double is_std = 0.0;
    double fid = 0.0;
};

// Per-epoch metric curves plus the provenance needed to compare reports:
// scores from different EvalNet checkpoints are not on a common scale.
struct MetricReport {
    std::vector<MetricRow> rows;
    std::size_t n_samples = 0;
    std::size_t n_splits = 0;
    std::uint64_t seed = 0;
    std::uint64_t evalnet_hash = 0;
    std::uint64_t config_hash = 0;
    std::string extractor = "evalnet";

    std::string to_csv() const {
        std::ostringstream os;
        os << "# cagan metric report\n";
        os << "# extractor=" << extractor << "\n";
        os << "# evalnet_hash=" << std::hex << evalnet_hash << std::dec << "\n";
        os << "# config_hash=" << std::hex << config_hash << std::dec << "\n";
        os << "# seed=" << seed << "\n";
        os << "# n_samples=" << n_samples << " n_splits=" << n_splits << "\n";
        os << "epoch,is_mean,is_std,fid\n";
        os.precision(10);
        for (const auto& r : rows)
            os << r.epoch << ',' << r.is_mean << ',' << r.is_std << ',' << r.fid << '\n';
        return os.str();
    }
};

}  // namespace cagan
