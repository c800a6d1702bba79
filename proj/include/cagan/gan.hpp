#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cagan/attention.hpp"
#include "cagan/ops.hpp"
#include "cagan/optim.hpp"
#include "cagan/text.hpp"

namespace cagan {

// ---------------------------------------------------------------------------
// spectral normalization

struct SpectralNormState {
    std::vector<double> u;  // persistent left singular-vector estimate, unit norm
    int n_power_iterations = 1;
    double last_sigma = 1.0;
};

// Divides w by a power-iteration estimate of its largest singular value.
// The weight is viewed as [out_features, rest]; u persists across calls and
// is refined by `n_power_iterations` update sweeps per call (skipped when
// `update` is false). Gradient flows through both w and the sigma estimate,
// with u and v held constant.
inline Tensor spectral_normalize(const Tensor& w, SpectralNormState& state, bool update = true) {
    const std::size_t rows = w.dim(0);
    const std::size_t cols = w.size() / rows;

    double max_abs = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) max_abs = std::max(max_abs, std::abs(w.at(i)));
    if (max_abs == 0.0) {
        state.last_sigma = 0.0;
        return w;  // zero matrix: nothing to normalize
    }

    if (state.u.size() != rows) {
        // deterministic lazy init; any non-degenerate direction works
        Rng init_rng(0x5eedu ^ (rows * 2654435761u) ^ (cols * 40503u));
        state.u.resize(rows);
        double norm = 0.0;
        for (auto& ui : state.u) {
            ui = init_rng.normal();
            norm += ui * ui;
        }
        norm = std::sqrt(norm);
        for (auto& ui : state.u) ui /= norm;
    }

    std::vector<double> u = state.u;
    std::vector<double> v(cols, 0.0);
    const double* wd = w.data();
    const int iters = std::max(1, state.n_power_iterations);
    for (int it = 0; it < iters; ++it) {
        // v = normalize(W^T u)
        std::fill(v.begin(), v.end(), 0.0);
        for (std::size_t i = 0; i < rows; ++i) {
            const double ui = u[i];
            const double* row = wd + i * cols;
            for (std::size_t j = 0; j < cols; ++j) v[j] += row[j] * ui;
        }
        double vn = 0.0;
        for (double x : v) vn += x * x;
        vn = std::max(std::sqrt(vn), 1e-12);
        for (double& x : v) x /= vn;
        // u = normalize(W v)
        for (std::size_t i = 0; i < rows; ++i) {
            const double* row = wd + i * cols;
            double acc = 0.0;
            for (std::size_t j = 0; j < cols; ++j) acc += row[j] * v[j];
            u[i] = acc;
        }
        double un = 0.0;
        for (double x : u) un += x * x;
        un = std::max(std::sqrt(un), 1e-12);
        for (double& x : u) x /= un;
    }
    if (update) state.u = u;

    Tensor ut = Tensor::from_vector({1, rows}, u);
    Tensor vt = Tensor::from_vector({cols, 1}, std::move(v));
    Tensor w2d = reshape(w, {rows, cols});
    Tensor sigma = clamp_min(reshape(matmul(matmul(ut, w2d), vt), {1}), 1e-12);
    state.last_sigma = sigma.item();
    return div_by_scalar_t(w, sigma);
}

// ---------------------------------------------------------------------------
// conditioning augmentation

// Reparameterized Gaussian draw of the condition vector from the sentence
// embedding, with the KL regularizer toward the standard normal.
struct CondAugment {
    Tensor w_mu;      // [Dc, D]
    Tensor w_logvar;  // [Dc, D]

    CondAugment() = default;
    CondAugment(std::size_t cond_dim, std::size_t sentence_dim, Rng& rng) {
        const double s = std::sqrt(1.0 / static_cast<double>(sentence_dim));
        w_mu = Tensor::randn({cond_dim, sentence_dim}, rng, s);
        w_logvar = Tensor::randn({cond_dim, sentence_dim}, rng, s * 0.1);
    }

    struct Result {
        Tensor c;   // [N, Dc]
        Tensor kl;  // scalar, mean over the batch
    };

    // eps must be [N, Dc] standard-normal draws (or zeros as a test hook).
    Result forward(const Tensor& s, const Tensor& eps) const {
        if (s.rank() != 2 || eps.rank() != 2 || eps.dim(0) != s.dim(0) ||
            eps.dim(1) != w_mu.dim(0))
            throw std::invalid_argument("cond augment: want s[N,D] and eps[N,Dc]");
        Tensor mu = linear(s, w_mu);
        Tensor logvar = linear(s, w_logvar);
        Tensor sigma = exp_t(mul_scalar(logvar, 0.5));
        Tensor c = add(mu, mul(sigma, eps));
        // 0.5 * (mu^2 + sigma^2 - logvar - 1), summed per sample, mean over batch
        Tensor per_elem = sub(add(mul(mu, mu), exp_t(logvar)), add_scalar(logvar, 1.0));
        Tensor kl = mul_scalar(mean(per_elem), 0.5 * static_cast<double>(w_mu.dim(0)));
        return {c, kl};
    }

    void collect(NamedTensors& reg, const std::string& prefix) const {
        reg.add(prefix + ".wmu", w_mu);
        reg.add(prefix + ".wlogvar", w_logvar);
    }
};

// ---------------------------------------------------------------------------
// model variant

enum class VariantKind { SE, LocalPlusSE };

struct ModelVariant {
    VariantKind kind = VariantKind::SE;
    std::size_t r = 1;
    double lambda = 0.1;
    std::size_t stage_h0 = 16;  // stages run at h0, 2*h0, 4*h0
    std::size_t lattn_extent = 3;
    std::set<std::string> placement;  // among f0.up0, f0.up1, f1.attn, f2.attn

    static const std::set<std::string>& allowed_sites() {
        static const std::set<std::string> sites = {"f0.up0", "f0.up1", "f1.attn", "f2.attn"};
        return sites;
    }

    void validate() const {
        if (kind == VariantKind::SE && !placement.empty())
            throw std::invalid_argument("variant: SE model must not place local attention");
        if (lambda < 0.0) throw std::invalid_argument("variant: lambda must be nonnegative");
        for (const auto& p : placement)
            if (!allowed_sites().count(p))
                throw std::invalid_argument("variant: unknown local-attention site " + p);
    }

    bool uses(const std::string& site) const { return placement.count(site) > 0; }
};

inline std::set<std::string> default_placement(VariantKind kind) {
    if (kind == VariantKind::SE) return {};
    return {"f0.up0", "f1.attn", "f2.attn"};
}

// ---------------------------------------------------------------------------
// generator building blocks

namespace gen_detail {

inline Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_channel_bias(conv2d(x, w, 1, 1), b);
}

struct ConvNorm {
    Tensor w, b, gamma, beta;

    ConvNorm() = default;
    ConvNorm(std::size_t cout, std::size_t cin, Rng& rng) {
        w = Tensor::randn({cout, cin, 3, 3}, rng, std::sqrt(2.0 / static_cast<double>(cin * 9)));
        b = Tensor::zeros({cout}, true);
        gamma = Tensor::full({cout}, 1.0);
        gamma.node()->requires_grad = true;
        beta = Tensor::zeros({cout}, true);
    }

    Tensor forward(const Tensor& x) const {
        return channel_affine(instance_norm(conv3x3(x, w, b)), gamma, beta);
    }

    void collect(NamedTensors& reg, const std::string& p) const {
        reg.add(p + ".w", w);
        reg.add(p + ".b", b);
        reg.add(p + ".gamma", gamma);
        reg.add(p + ".beta", beta);
    }
};

}  // namespace gen_detail

// Nearest-neighbor x2 upsample, 3x3 conv, instance norm, ReLU, SE gate.
struct UpBlock {
    gen_detail::ConvNorm cn;
    SeBlock se;

    UpBlock() = default;
    UpBlock(std::size_t cout, std::size_t cin, std::size_t r, Rng& rng)
        : cn(cout, cin, rng), se(cout, r, rng) {}

    Tensor forward(const Tensor& x) const { return se.forward(relu(cn.forward(upsample_nearest(x, 2)))); }

    void collect(NamedTensors& reg, const std::string& gp, const std::string& site) const {
        cn.collect(reg, gp);
        se.collect(reg, site);
    }
};

// Two 3x3 convs with instance norm, SE gate on the residual branch.
struct ResBlock {
    gen_detail::ConvNorm cn1, cn2;
    SeBlock se;

    ResBlock() = default;
    ResBlock(std::size_t c, std::size_t r, Rng& rng) : cn1(c, c, rng), cn2(c, c, rng), se(c, r, rng) {}

    Tensor forward(const Tensor& x) const {
        Tensor y = cn2.forward(relu(cn1.forward(x)));
        return relu(add(x, se.forward(y)));
    }

    void collect(NamedTensors& reg, const std::string& gp, const std::string& site) const {
        cn1.collect(reg, gp + ".c1");
        cn2.collect(reg, gp + ".c2");
        se.collect(reg, site);
    }
};

// F_0:.(condition, noise) through a linear layer to a 4x4 map, then two
// up-blocks to the first stage resolution.
struct StageZero {
    Tensor fc_w, fc_b;
    UpBlock up0, up1;
    std::optional<LocalSelfAttention> lattn_up0, lattn_up1;
    std::size_t c0 = 0;

    StageZero() = default;
    StageZero(std::size_t base_channels, std::size_t in_dim, const ModelVariant& var, Rng& rng) {
        c0 = base_channels * 4;
        fc_w = Tensor::randn({c0 * 16, in_dim}, rng, std::sqrt(1.0 / static_cast<double>(in_dim)));
        fc_b = Tensor::zeros({c0 * 16}, true);
        up0 = UpBlock(base_channels * 2, c0, var.r, rng);
        up1 = UpBlock(base_channels, base_channels * 2, var.r, rng);
        if (var.uses("f0.up0"))
            lattn_up0 = LocalSelfAttention(base_channels * 2, base_channels * 2, var.lattn_extent, rng);
        if (var.uses("f0.up1"))
            lattn_up1 = LocalSelfAttention(base_channels, base_channels, var.lattn_extent, rng);
    }

    Tensor forward(const Tensor& c, const Tensor& z) const {
        Tensor x = concat({c, z}, 1);
        Tensor y = relu(add_row_bias(linear(x, fc_w), fc_b));
        y = reshape(y, {x.dim(0), c0, 4, 4});
        y = up0.forward(y);
        if (lattn_up0) y = add(y, lattn_up0->forward(y));
        y = up1.forward(y);
        if (lattn_up1) y = add(y, lattn_up1->forward(y));
        return y;
    }

    void collect(NamedTensors& reg) const {
        reg.add("g.f0.fc.w", fc_w);
        reg.add("g.f0.fc.b", fc_b);
        up0.collect(reg, "g.f0.up0", "f0.up0");
        up1.collect(reg, "g.f0.up1", "f0.up1");
        if (lattn_up0) lattn_up0->collect(reg, "f0.up0");
        if (lattn_up1) lattn_up1->collect(reg, "f0.up1");
    }
};

// F_i for i >= 1: word attention over the previous features, channel fuse,
// residual blocks, and a x2 up-block.
struct StageNext {
    WordAttention wattn;
    gen_detail::ConvNorm fuse;
    std::optional<LocalSelfAttention> lattn;
    ResBlock rb0, rb1;
    UpBlock up;
    std::string name;

    StageNext() = default;
    StageNext(std::size_t base_channels, std::size_t word_dim, const ModelVariant& var,
              const std::string& stage_name, Rng& rng)
        : wattn(base_channels, word_dim, rng),
          fuse(base_channels, base_channels * 2, rng),
          rb0(base_channels, var.r, rng),
          rb1(base_channels, var.r, rng),
          up(base_channels, base_channels, var.r, rng),
          name(stage_name) {
        if (var.uses(name + ".attn"))
            lattn = LocalSelfAttention(base_channels, base_channels, var.lattn_extent, rng);
    }

    Tensor forward(const Tensor& h_prev, const std::vector<TextEncoding>& encs) const {
        Tensor ctx = wattn.forward(h_prev, encs).context;
        Tensor y = relu(fuse.forward(concat({h_prev, ctx}, 1)));
        if (lattn) y = add(y, lattn->forward(y));
        y = rb1.forward(rb0.forward(y));
        return up.forward(y);
    }

    void collect(NamedTensors& reg) const {
        wattn.collect(reg, name);
        fuse.collect(reg, "g." + name + ".fuse");
        if (lattn) lattn->collect(reg, name + ".attn");
        rb0.collect(reg, "g." + name + ".rb0", name + ".rb0");
        rb1.collect(reg, "g." + name + ".rb1", name + ".rb1");
        up.collect(reg, "g." + name + ".up", name + ".up");
    }
};

// 3x3 convolution + tanh image head.
struct GenHead {
    Tensor w, b;

    GenHead() = default;
    GenHead(std::size_t cin, Rng& rng) {
        w = Tensor::randn({3, cin, 3, 3}, rng, std::sqrt(1.0 / static_cast<double>(cin * 9)));
        b = Tensor::zeros({3}, true);
    }

    Tensor forward(const Tensor& h) const { return tanh_t(gen_detail::conv3x3(h, w, b)); }

    void collect(NamedTensors& reg, const std::string& p) const {
        reg.add(p + ".w", w);
        reg.add(p + ".b", b);
    }
};

// Per-stage image feature map plus the image generated from it.
struct StageState {
    Tensor h;      // [N, Chat, H, W]
    Tensor image;  // [N, 3, H, W] in [-1, 1]
};

struct Generator {
    CondAugment ca;
    StageZero f0;
    StageNext f1, f2;
    GenHead g0, g1, g2;
    std::size_t noise_dim = 100;
    std::size_t cond_dim = 0;
    std::size_t base_channels = 0;
    ModelVariant variant;

    Generator() = default;
    Generator(const ModelVariant& var, std::size_t word_dim, std::size_t nz, std::size_t base,
              Rng& rng)
        : noise_dim(nz), cond_dim(word_dim / 2), base_channels(base), variant(var) {
        var.validate();
        ca = CondAugment(cond_dim, word_dim, rng);
        f0 = StageZero(base, cond_dim + nz, var, rng);
        f1 = StageNext(base, word_dim, var, "f1", rng);
        f2 = StageNext(base, word_dim, var, "f2", rng);
        g0 = GenHead(base, rng);
        g1 = GenHead(base, rng);
        g2 = GenHead(base, rng);
    }

    struct Output {
        std::vector<StageState> stages;  // exactly three, doubling resolution
        Tensor kl;
    };

    // Builds the batched sentence matrix [N, D] from per-sample encodings.
    static Tensor sentence_batch(const std::vector<TextEncoding>& encs) {
        std::vector<Tensor> rows;
        rows.reserve(encs.size());
        for (const auto& e : encs) rows.push_back(reshape(e.sentence, {1, e.sentence.size()}));
        return concat(rows, 0);
    }

    Output forward(const std::vector<TextEncoding>& encs, const Tensor& noise,
                   const Tensor& eps) const {
        if (noise.rank() != 2 || noise.dim(0) != encs.size() || noise.dim(1) != noise_dim)
            throw std::invalid_argument("generator: want noise[N,Nz] matching the encoding batch");
        Tensor s = sentence_batch(encs);
        auto [c, kl] = ca.forward(s, eps);
        Output out;
        out.kl = kl;
        Tensor h0 = f0.forward(c, noise);
        out.stages.push_back({h0, g0.forward(h0)});
        Tensor h1 = f1.forward(h0, encs);
        out.stages.push_back({h1, g1.forward(h1)});
        Tensor h2 = f2.forward(h1, encs);
        out.stages.push_back({h2, g2.forward(h2)});
        return out;
    }

    Output forward(const std::vector<TextEncoding>& encs, const Tensor& noise, Rng& rng) const {
        Tensor eps = Tensor::zeros({encs.size(), cond_dim});
        for (auto& v : eps.mutable_values()) v = rng.normal();
        return forward(encs, noise, eps);
    }

    void collect(NamedTensors& reg) const {
        ca.collect(reg, "g.ca");
        f0.collect(reg);
        f1.collect(reg);
        f2.collect(reg);
        g0.collect(reg, "g.head0");
        g1.collect(reg, "g.head1");
        g2.collect(reg, "g.head2");
    }
};

// ---------------------------------------------------------------------------
// discriminator

// Strided 3x3 conv stack down to 4x4, then spectrally normalized linear
// heads: one unconditional, one conditioned on the sentence vector.
struct Discriminator {
    struct Conv {
        Tensor w, b;
        mutable SpectralNormState sn;
    };
    struct Lin {
        Tensor w, b;
        mutable SpectralNormState sn;
    };

    std::vector<Conv> downs;
    Lin fc_uncond;
    Tensor w_sent;  // [Ds, D] sentence projection
    mutable SpectralNormState sn_sent;
    Lin fc_cond1, fc_cond2;
    std::size_t resolution = 0;
    std::size_t flat_dim = 0;
    std::size_t sent_proj_dim = 0;

    Discriminator() = default;
    Discriminator(std::size_t resolution_, std::size_t base, std::size_t sentence_dim, Rng& rng)
        : resolution(resolution_) {
        if (resolution < 8 || (resolution & (resolution - 1)) != 0)
            throw std::invalid_argument("discriminator: resolution must be a power of two >= 8");
        std::size_t res = resolution, cin = 3, cout = base;
        while (res > 4) {
            Conv c;
            c.w = Tensor::randn({cout, cin, 3, 3}, rng, std::sqrt(2.0 / static_cast<double>(cin * 9)));
            c.b = Tensor::zeros({cout}, true);
            downs.push_back(std::move(c));
            cin = cout;
            cout = std::min<std::size_t>(cout * 2, base * 8);
            res /= 2;
        }
        flat_dim = cin * 16;
        sent_proj_dim = std::max<std::size_t>(sentence_dim / 2, 8);
        auto lin = [&](std::size_t o, std::size_t i) {
            Lin l;
            l.w = Tensor::randn({o, i}, rng, std::sqrt(1.0 / static_cast<double>(i)));
            l.b = Tensor::zeros({o}, true);
            return l;
        };
        fc_uncond = lin(1, flat_dim);
        w_sent = Tensor::randn({sent_proj_dim, sentence_dim},
                               rng, std::sqrt(1.0 / static_cast<double>(sentence_dim)));
        fc_cond1 = lin(base * 4, flat_dim + sent_proj_dim);
        fc_cond2 = lin(1, base * 4);
    }

    // One spectral-norm pass per weight; reuse the result for every forward
    // within a phase so the persistent u advances once per phase.
    struct NormalizedWeights {
        std::vector<Tensor> downs;
        Tensor fc_uncond, w_sent, fc_cond1, fc_cond2;
    };

    NormalizedWeights normalized(bool update = true) const {
        NormalizedWeights nw;
        nw.downs.reserve(downs.size());
        for (const auto& d : downs) nw.downs.push_back(spectral_normalize(d.w, d.sn, update));
        nw.fc_uncond = spectral_normalize(fc_uncond.w, fc_uncond.sn, update);
        nw.w_sent = spectral_normalize(w_sent, sn_sent, update);
        nw.fc_cond1 = spectral_normalize(fc_cond1.w, fc_cond1.sn, update);
        nw.fc_cond2 = spectral_normalize(fc_cond2.w, fc_cond2.sn, update);
        return nw;
    }

    struct Logits {
        Tensor uncond;  // [N, 1]
        Tensor cond;    // [N, 1]
    };

    Logits forward(const NormalizedWeights& nw, const Tensor& img, const Tensor& sentence) const {
        if (img.rank() != 4 || img.dim(2) != resolution || img.dim(3) != resolution)
            throw std::invalid_argument("discriminator: image resolution mismatch");
        Tensor y = img;
        for (std::size_t i = 0; i < downs.size(); ++i)
            y = leaky_relu(add_channel_bias(conv2d(y, nw.downs[i], 2, 1), downs[i].b));
        Tensor flat = reshape(y, {img.dim(0), flat_dim});
        Tensor uncond = add_row_bias(linear(flat, nw.fc_uncond), fc_uncond.b);
        Tensor sp = leaky_relu(linear(sentence, nw.w_sent));
        Tensor joint = leaky_relu(add_row_bias(linear(concat({flat, sp}, 1), nw.fc_cond1), fc_cond1.b));
        Tensor cond = add_row_bias(linear(joint, nw.fc_cond2), fc_cond2.b);
        return {uncond, cond};
    }

    void collect(NamedTensors& reg, const std::string& prefix) const {
        for (std::size_t i = 0; i < downs.size(); ++i) {
            reg.add(prefix + ".down" + std::to_string(i) + ".w", downs[i].w);
            reg.add(prefix + ".down" + std::to_string(i) + ".b", downs[i].b);
        }
        reg.add(prefix + ".uncond.w", fc_uncond.w);
        reg.add(prefix + ".uncond.b", fc_uncond.b);
        reg.add(prefix + ".sent.w", w_sent);
        reg.add(prefix + ".cond1.w", fc_cond1.w);
        reg.add(prefix + ".cond1.b", fc_cond1.b);
        reg.add(prefix + ".cond2.w", fc_cond2.w);
        reg.add(prefix + ".cond2.b", fc_cond2.b);
    }

    // Persistent power-iteration vectors, checkpointed so training resumes
    // bit-exactly.
    void collect_sn_state(NamedTensors& reg, const std::string& prefix) const {
        auto addu = [&](const std::string& name, const SpectralNormState& st, std::size_t rows) {
            std::vector<double> u = st.u;
            if (u.size() != rows) u.assign(rows, 0.0);
            reg.add(prefix + name + ".u", Tensor::from_vector({rows}, std::move(u)));
        };
        for (std::size_t i = 0; i < downs.size(); ++i)
            addu(".down" + std::to_string(i), downs[i].sn, downs[i].w.dim(0));
        addu(".uncond", fc_uncond.sn, 1);
        addu(".sent", sn_sent, sent_proj_dim);
        addu(".cond1", fc_cond1.sn, fc_cond1.w.dim(0));
        addu(".cond2", fc_cond2.sn, 1);
    }

    void restore_sn_state(const NamedTensors& loaded, const std::string& prefix) {
        auto getu = [&](const std::string& name, SpectralNormState& st) {
            const std::string key = prefix + name + ".u";
            for (const auto& [n, t] : loaded.entries()) {
                if (n == key) {
                    bool nonzero = false;
                    for (std::size_t i = 0; i < t.size(); ++i) nonzero = nonzero || t.at(i) != 0.0;
                    if (nonzero) st.u = t.values();
                    return;
                }
            }
        };
        for (std::size_t i = 0; i < downs.size(); ++i)
            getu(".down" + std::to_string(i), downs[i].sn);
        getu(".uncond", fc_uncond.sn);
        getu(".sent", sn_sent);
        getu(".cond1", fc_cond1.sn);
        getu(".cond2", fc_cond2.sn);
    }
};

// ---------------------------------------------------------------------------
// adversarial losses (probabilities live behind logits throughout)

// mean(softplus(x) - t*x) == binary cross-entropy of sigmoid(x) against t
inline Tensor bce_with_logits(const Tensor& logits, double target) {
    Tensor per = softplus(logits);
    if (target != 0.0) per = sub(per, mul_scalar(logits, target));
    return mean(per);
}

// Per-stage generator objective: -1/2 E[log D(y)] - 1/2 E[log D(y, s)].
inline Tensor generator_adv_loss(const Tensor& uncond_logits, const Tensor& cond_logits) {
    return add(mul_scalar(mean(softplus(neg(uncond_logits))), 0.5),
               mul_scalar(mean(softplus(neg(cond_logits))), 0.5));
}

// Full generator objective: summed per-stage adversarial terms, the
// lambda-weighted matching loss, and the conditioning KL term.
inline Tensor generator_loss(const std::vector<Tensor>& per_stage_adv, const Tensor& damsm_loss,
                             const Tensor& kl, double lambda, double kl_weight = 1.0) {
    if (lambda < 0.0) throw std::invalid_argument("generator_loss: lambda must be nonnegative");
    if (per_stage_adv.empty()) throw std::invalid_argument("generator_loss: no stages");
    Tensor total = add_all(per_stage_adv);
    if (damsm_loss.defined()) total = add(total, mul_scalar(damsm_loss, lambda));
    if (kl.defined()) total = add(total, mul_scalar(kl, kl_weight));
    return total;
}

// Discriminator objective: unconditional real/fake average plus the
// conditional head with fake and mismatched-caption terms half-weighted.
inline Tensor discriminator_loss(const Tensor& real_uncond, const Tensor& real_cond,
                                 const Tensor& fake_uncond, const Tensor& fake_cond,
                                 const Tensor& mismatch_cond) {
    Tensor uncond = mul_scalar(add(bce_with_logits(real_uncond, 1.0), bce_with_logits(fake_uncond, 0.0)), 0.5);
    Tensor cond = mul_scalar(
        add(bce_with_logits(real_cond, 1.0),
            mul_scalar(add(bce_with_logits(fake_cond, 0.0), bce_with_logits(mismatch_cond, 0.0)), 0.5)),
        0.5);
    return add(uncond, cond);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace cagan
