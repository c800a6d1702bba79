#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "cagan/ops.hpp"
#include "cagan/optim.hpp"
#include "cagan/text.hpp"

namespace cagan {

struct DamsmTemperatures {
    double gamma1 = 4.0;   // sharpness of per-word attention over regions
    double gamma2 = 5.0;   // smooth-max over word relevances
    double gamma3 = 10.0;  // sharpness of the batch-matching posterior

    void validate() const {
        if (gamma1 <= 0.0 || gamma2 <= 0.0 || gamma3 <= 0.0)
            throw std::invalid_argument("damsm: temperatures must be positive");
    }
};

struct ImageRegionFeatures {
    Tensor regions;     // [N, D, R], columns follow the flattened spatial grid
    Tensor global_vec;  // [N, D]
};

namespace damsm_detail {

// column-wise L2 normalization of [D, K]; norms clamp at 1e-8
inline Tensor normalize_cols(const Tensor& x) {
    const std::size_t d = x.dim(0), k = x.dim(1);
    Tensor ones_row = Tensor::full({1, d}, 1.0);
    Tensor ones_col = Tensor::full({d, 1}, 1.0);
    Tensor norms = clamp_min(sqrt_t(matmul(ones_row, mul(x, x))), 1e-8);  // [1, K]
    (void)k;
    return div(x, matmul(ones_col, norms));
}

// row-wise L2 normalization of [N, D]
inline Tensor normalize_rows(const Tensor& x) {
    const std::size_t d = x.dim(1);
    Tensor ones_col = Tensor::full({d, 1}, 1.0);
    Tensor ones_row = Tensor::full({1, d}, 1.0);
    Tensor norms = clamp_min(sqrt_t(matmul(mul(x, x), ones_col)), 1e-8);  // [N, 1]
    return div(x, matmul(norms, ones_row));
}

}  // namespace damsm_detail

// Word-level image-text match: per-word attention over regions on the
// cosine-similarity matrix (sharpened by gamma1), word relevance as the
// cosine between each word and its region context, aggregated by a
// gamma2-smooth-max (log-sum-exp).
inline Tensor matching_score(const Tensor& regions, const Tensor& words,
                             const std::vector<std::uint8_t>& mask,
                             const DamsmTemperatures& temps) {
    temps.validate();
    if (regions.rank() != 2 || words.rank() != 2)
        throw std::invalid_argument("matching_score: want regions[D,R] and words[D,T]");
    if (regions.dim(0) != words.dim(0))
        throw std::invalid_argument("matching_score: common dimension mismatch");
    std::size_t len = 0;
    while (len < mask.size() && mask[len]) ++len;
    if (len == 0) throw std::invalid_argument("matching_score: caption has no real tokens");

    Tensor w = slice_cols(words, 0, len);                   // [D, L]
    Tensor wn = damsm_detail::normalize_cols(w);
    Tensor vn = damsm_detail::normalize_cols(regions);
    Tensor cos = matmul(transpose2d(wn), vn);               // [L, R]
    Tensor alpha = softmax(mul_scalar(cos, temps.gamma1), 1);
    Tensor ctx = matmul(vn, transpose2d(alpha));            // [D, L]

    const std::size_t d = w.dim(0);
    Tensor ones_row = Tensor::full({1, d}, 1.0);
    Tensor num = matmul(ones_row, mul(ctx, w));                              // [1, L]
    Tensor nc = clamp_min(sqrt_t(matmul(ones_row, mul(ctx, ctx))), 1e-8);    // [1, L]
    Tensor nw = clamp_min(sqrt_t(matmul(ones_row, mul(w, w))), 1e-8);        // [1, L]
    Tensor rel = div(num, mul(nc, nw));                                      // cosines in [-1, 1]

    Tensor lse = log_t(matmul(exp_t(mul_scalar(rel, temps.gamma2)), Tensor::full({len, 1}, 1.0)));
    return reshape(mul_scalar(lse, 1.0 / temps.gamma2), {1});
}

// Sum of four mean negative log-likelihood terms: the gamma3-softmax
// posterior of the matching pair over the batch, in both directions, at
// word level and sentence level.
inline Tensor damsm_loss(const ImageRegionFeatures& img, const std::vector<TextEncoding>& encs,
                         const DamsmTemperatures& temps) {
    temps.validate();
    const std::size_t n = encs.size();
    if (n < 2) throw std::invalid_argument("damsm_loss: batch must have at least 2 pairs");
    if (img.regions.dim(0) != n) throw std::invalid_argument("damsm_loss: batch size mismatch");
    const std::size_t d = img.regions.dim(1), r = img.regions.dim(2);

    std::vector<Tensor> rows;
    rows.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Tensor regions_i = reshape(slice0(img.regions, i), {d, r});
        std::vector<Tensor> cells;
        cells.reserve(n);
        for (std::size_t j = 0; j < n; ++j)
            cells.push_back(matching_score(regions_i, encs[j].words, encs[j].mask, temps));
        rows.push_back(reshape(concat(cells, 0), {1, n}));
    }
    Tensor s_word = concat(rows, 0);  // [N, N], image i vs caption j

    std::vector<Tensor> sent_rows;
    sent_rows.reserve(n);
    for (const auto& e : encs) sent_rows.push_back(reshape(e.sentence, {1, d}));
    Tensor s_sent = matmul(damsm_detail::normalize_rows(img.global_vec),
                           transpose2d(damsm_detail::normalize_rows(concat(sent_rows, 0))));

    std::vector<std::size_t> diag(n);
    for (std::size_t i = 0; i < n; ++i) diag[i] = i;

    Tensor loss = cross_entropy_logits(mul_scalar(s_word, temps.gamma3), diag);
    loss = add(loss, cross_entropy_logits(mul_scalar(transpose2d(s_word), temps.gamma3), diag));
    loss = add(loss, cross_entropy_logits(mul_scalar(s_sent, temps.gamma3), diag));
    loss = add(loss, cross_entropy_logits(mul_scalar(transpose2d(s_sent), temps.gamma3), diag));
    return loss;
}

// Small strided conv trunk standing in for the paper-scale region encoder:
// replicate padding keeps it translation invariant on uniform inputs.
struct DamsmImageEncoder {
    Tensor c1w, c1b, c2w, c2b, c3w, c3b, c4w, c4b;
    Tensor w_region;           // [D, Ct] 1x1 projection into the common space
    Tensor w_global, b_global; // [D, Ct] + [D]
    std::size_t input_resolution = 64;
    std::size_t common_dim = 32;

    DamsmImageEncoder() = default;
    DamsmImageEncoder(std::size_t resolution, std::size_t d, Rng& rng)
        : input_resolution(resolution), common_dim(d) {
        if (resolution % 4 != 0)
            throw std::invalid_argument("damsm image encoder: resolution must be divisible by 4");
        auto conv = [&](std::size_t co, std::size_t ci) {
            return Tensor::randn({co, ci, 3, 3}, rng, std::sqrt(2.0 / static_cast<double>(ci * 9)));
        };
        c1w = conv(32, 3);
        c1b = Tensor::zeros({32}, true);
        c2w = conv(48, 32);
        c2b = Tensor::zeros({48}, true);
        c3w = conv(64, 48);
        c3b = Tensor::zeros({64}, true);
        c4w = conv(64, 64);
        c4b = Tensor::zeros({64}, true);
        w_region = Tensor::randn({d, 64}, rng, std::sqrt(1.0 / 64.0));
        w_global = Tensor::randn({d, 64}, rng, std::sqrt(1.0 / 64.0));
        b_global = Tensor::zeros({d}, true);
    }

    std::size_t region_count() const {
        const std::size_t side = input_resolution / 4;
        return side * side;
    }

    ImageRegionFeatures forward(const Tensor& img) const {
        if (img.rank() != 4 || img.dim(1) != 3 || img.dim(2) != input_resolution ||
            img.dim(3) != input_resolution)
            throw std::invalid_argument("damsm image encoder: expected [N,3," +
                                        std::to_string(input_resolution) + "," +
                                        std::to_string(input_resolution) + "] input");
        auto block = [](const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride) {
            return leaky_relu(add_channel_bias(conv2d(pad_replicate(x, 1), w, stride, 0), b));
        };
        Tensor t = block(img, c1w, c1b, 1);
        t = block(t, c2w, c2b, 2);
        t = block(t, c3w, c3b, 2);
        t = block(t, c4w, c4b, 1);
        const std::size_t n = img.dim(0), side = input_resolution / 4;
        Tensor regions = reshape(conv2d(t, reshape(w_region, {common_dim, 64, 1, 1})),
                                 {n, common_dim, side * side});
        Tensor global_vec = add_row_bias(linear(mean_pool_spatial(t), w_global), b_global);
        return {regions, global_vec};
    }

    void collect(NamedTensors& reg, const std::string& prefix) const {
        reg.add(prefix + ".c1.w", c1w);
        reg.add(prefix + ".c1.b", c1b);
        reg.add(prefix + ".c2.w", c2w);
        reg.add(prefix + ".c2.b", c2b);
        reg.add(prefix + ".c3.w", c3w);
        reg.add(prefix + ".c3.b", c3b);
        reg.add(prefix + ".c4.w", c4w);
        reg.add(prefix + ".c4.b", c4b);
        reg.add(prefix + ".region.w", w_region);
        reg.add(prefix + ".global.w", w_global);
        reg.add(prefix + ".global.b", b_global);
    }
};

// The matching model: image-side region encoder plus the text encoder it is
// pre-trained with. Tensors save as "damsm.img.*" and "damsm.txt.*".
struct DamsmModel {
    DamsmImageEncoder image;
    TextEncoder text;
    DamsmTemperatures temps;

    void collect(NamedTensors& reg) const {
        image.collect(reg, "damsm.img");
        text.collect(reg, "damsm.txt");
    }
};

}  // namespace cagan
