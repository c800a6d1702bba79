#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "cagan/ops.hpp"
#include "cagan/optim.hpp"
#include "cagan/text.hpp"

namespace cagan {

// Squeeze-and-excitation channel recalibration: spatial mean-pool, a
// bottleneck of ratio r with a sigmoid gate, then per-channel rescaling.
struct SeBlock {
    Tensor w1;  // [C/r, C]
    Tensor w2;  // [C, C/r]
    std::size_t channels = 0;
    std::size_t ratio = 1;

    SeBlock() = default;
    SeBlock(std::size_t c, std::size_t r, Rng& rng) : channels(c), ratio(r) {
        if (r == 0 || c % r != 0)
            throw std::invalid_argument("se block: reduction ratio must divide the channel count");
        const std::size_t hidden = c / r;
        w1 = Tensor::randn({hidden, c}, rng, std::sqrt(2.0 / static_cast<double>(c)));
        w2 = Tensor::randn({c, hidden}, rng, std::sqrt(1.0 / static_cast<double>(hidden)));
    }

    Tensor forward(const Tensor& u) const {
        if (u.rank() != 4 || u.dim(1) != channels)
            throw std::invalid_argument("se block: expected channel count " + std::to_string(channels));
        Tensor z = mean_pool_spatial(u);                  // [N, C]
        Tensor gate = sigmoid(linear(relu(linear(z, w1)), w2));
        return scale_channels(u, gate);
    }

    void collect(NamedTensors& reg, const std::string& site) const {
        reg.add("se." + site + ".w1", w1);
        reg.add("se." + site + ".w2", w2);
    }
};

// Convolution-like attention: each pixel attends over its k x k neighborhood
// with query/key/value linear maps shared across positions.
struct LocalSelfAttention {
    Tensor wq, wk, wv;  // [C', C]
    std::size_t extent = 1;

    LocalSelfAttention() = default;
    LocalSelfAttention(std::size_t c_out, std::size_t c_in, std::size_t k, Rng& rng) : extent(k) {
        if (k % 2 == 0) throw std::invalid_argument("local attention: spatial extent must be odd");
        const double s = std::sqrt(1.0 / static_cast<double>(c_in));
        wq = Tensor::randn({c_out, c_in}, rng, s);
        wk = Tensor::randn({c_out, c_in}, rng, s);
        wv = Tensor::randn({c_out, c_in}, rng, s);
    }

    Tensor forward(const Tensor& x) const {
        const std::size_t co = wq.dim(0), ci = wq.dim(1);
        auto as_kernel = [](const Tensor& w, std::size_t o, std::size_t i) {
            return reshape(w, {o, i, 1, 1});
        };
        Tensor q = conv2d(x, as_kernel(wq, co, ci));
        Tensor k = conv2d(x, as_kernel(wk, co, ci));
        Tensor v = conv2d(x, as_kernel(wv, co, ci));
        return local_attention(q, k, v, extent);
    }

    void collect(NamedTensors& reg, const std::string& site) const {
        reg.add("lattn." + site + ".wq", wq);
        reg.add("lattn." + site + ".wk", wk);
        reg.add("lattn." + site + ".wv", wv);
    }
};

// Spatial word attention: projects word features into the image feature
// space and mixes them per subregion with a pad-masked softmax over words.
struct WordAttention {
    Tensor u_proj;  // [Chat, D]

    WordAttention() = default;
    WordAttention(std::size_t image_channels, std::size_t word_dim, Rng& rng) {
        u_proj = Tensor::randn({image_channels, word_dim},
                               rng, std::sqrt(1.0 / static_cast<double>(word_dim)));
    }

    struct Result {
        Tensor context;  // [N, Chat, H, W]
        Tensor weights;  // [N, H*W, T]; exactly 0 on pad positions
    };

    Result forward(const Tensor& h, const std::vector<TextEncoding>& encodings) const {
        if (h.rank() != 4) throw std::invalid_argument("word attention: rank-4 feature map required");
        const std::size_t n = h.dim(0), c = h.dim(1), hh = h.dim(2), ww = h.dim(3);
        if (n != encodings.size())
            throw std::invalid_argument("word attention: batch size mismatch with encodings");
        const std::size_t hw = hh * ww;

        std::vector<Tensor> ctxs, wts;
        ctxs.reserve(n);
        wts.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            const TextEncoding& enc = encodings[i];
            if (enc.words.dim(0) != u_proj.dim(1))
                throw std::invalid_argument("word attention: word feature dimension mismatch");
            Tensor proj = matmul(u_proj, enc.words);               // [Chat, T]
            Tensor flat = reshape(slice0(h, i), {c, hw});          // [Chat, HW]
            Tensor scores = matmul(transpose2d(flat), proj);       // [HW, T]
            Tensor alpha = masked_softmax_last(scores, enc.mask);  // [HW, T]
            Tensor ctx = matmul(proj, transpose2d(alpha));         // [Chat, HW]
            ctxs.push_back(reshape(ctx, {1, c, hh, ww}));
            wts.push_back(reshape(alpha, {1, hw, enc.mask.size()}));
        }
        return {concat(ctxs, 0), concat(wts, 0)};
    }

    void collect(NamedTensors& reg, const std::string& stage) const {
        reg.add("wattn." + stage + ".uproj", u_proj);
    }
};

}  // namespace cagan
