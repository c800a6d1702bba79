#include <catch2/catch_amalgamated.hpp>

#include "cagan/gan.hpp"
#include "cagan/train.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace cagan;

namespace {

std::vector<TextEncoding> fixed_encodings(std::size_t n, std::size_t d, std::size_t t, Rng& rng) {
    std::vector<TextEncoding> encs(n);
    for (auto& e : encs) {
        e.words = oracles::random_tensor({d, t}, rng, 0.5);
        e.sentence = oracles::random_tensor({d}, rng, 0.5);
        e.mask.assign(t, 0);
        for (std::size_t i = 0; i + 1 < t; ++i) e.mask[i] = 1;
    }
    return encs;
}

RunConfig tiny_config() {
    RunConfig cfg = RunConfig::for_profile("desk", "se");
    cfg.embed_dim = 8;
    cfg.max_len = 5;
    cfg.stage_h0 = 8;
    cfg.base_channels = 8;
    cfg.d_channels = 8;
    cfg.nz = 12;
    cfg.batch = 4;
    cfg.eval_samples = 8;
    cfg.n_splits = 2;
    return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// spectral normalization

TEST_CASE("spectral norm of the identity is one") {
    Tensor eye = Tensor::zeros({4, 4});
    for (std::size_t i = 0; i < 4; ++i) eye.data()[i * 4 + i] = 1.0;
    SpectralNormState st;
    st.n_power_iterations = 10;
    Tensor out = spectral_normalize(eye, st);
    REQUIRE(st.last_sigma == Catch::Approx(1.0).margin(1e-9));
    for (std::size_t i = 0; i < 16; ++i)
        REQUIRE(out.at(i) == Catch::Approx(eye.at(i)).margin(1e-9));
}

TEST_CASE("spectral norm of diag(3,1) converges to diag(1,1/3)") {
    Tensor w = Tensor::from_vector({2, 2}, {3, 0, 0, 1});
    SpectralNormState st;
    st.n_power_iterations = 50;
    Tensor out = spectral_normalize(w, st);
    REQUIRE(st.last_sigma == Catch::Approx(3.0).margin(1e-6));
    REQUIRE(out.at(0) == Catch::Approx(1.0).margin(1e-6));
    REQUIRE(out.at(3) == Catch::Approx(1.0 / 3.0).margin(1e-6));
}

TEST_CASE("power iteration tracks the SVD oracle on random 8x8 weights") {
    Rng rng(31);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor w = oracles::random_tensor({8, 8}, rng);
        SpectralNormState st;
        st.n_power_iterations = 30;
        spectral_normalize(w, st);
        const double want = oracles::svd_sigma_max(w);
        REQUIRE(std::abs(st.last_sigma - want) / want < 1e-3);
    }
}

TEST_CASE("zero matrix passes through unchanged") {
    Tensor w = Tensor::zeros({3, 3});
    SpectralNormState st;
    Tensor out = spectral_normalize(w, st);
    for (std::size_t i = 0; i < 9; ++i) REQUIRE(out.at(i) == 0.0);
}

TEST_CASE("persistent u refines across calls") {
    Rng rng(32);
    Tensor w = oracles::random_tensor({6, 6}, rng);
    SpectralNormState st;  // one iteration per call
    for (int i = 0; i < 40; ++i) spectral_normalize(w, st);
    const double want = oracles::svd_sigma_max(w);
    REQUIRE(std::abs(st.last_sigma - want) / want < 1e-3);
    REQUIRE(st.u.size() == 6);
    double norm = 0.0;
    for (double v : st.u) norm += v * v;
    REQUIRE(std::sqrt(norm) == Catch::Approx(1.0).margin(1e-12));  // ||u|| = 1 invariant
}

TEST_CASE("spectral norm is differentiable through w") {
    Rng rng(33);
    Tensor w = oracles::random_tensor({3, 4}, rng, 1.0, true);
    SpectralNormState st;
    st.n_power_iterations = 30;
    spectral_normalize(w, st);  // settle u before the check
    auto res = gradcheck::check({w}, [&] {
        SpectralNormState frozen = st;  // same u, no persistence during the check
        return gradcheck::project(spectral_normalize(w, frozen, false));
    });
    REQUIRE(res.max_rel_error < 1e-4);
}

TEST_CASE("reshaped convolution weights normalize over [out, rest]") {
    Rng rng(34);
    Tensor w = oracles::random_tensor({4, 3, 3, 3}, rng);
    SpectralNormState st;
    st.n_power_iterations = 30;
    Tensor out = spectral_normalize(w, st);
    REQUIRE(out.shape() == w.shape());
    REQUIRE(std::abs(st.last_sigma - oracles::svd_sigma_max(w)) / oracles::svd_sigma_max(w) < 1e-3);
}

// ---------------------------------------------------------------------------
// conditioning augmentation

TEST_CASE("kl of the standard normal posterior is exactly zero") {
    Rng rng(41);
    CondAugment ca(3, 4, rng);
    // zero sentence vector makes mu = 0 and logvar = 0, i.e. sigma = 1
    Tensor s = Tensor::zeros({2, 4});
    Tensor eps = Tensor::zeros({2, 3});
    auto out = ca.forward(s, eps);
    REQUIRE(out.kl.item() == 0.0);
}

TEST_CASE("zero epsilon reproduces the mean exactly") {
    Rng rng(42);
    CondAugment ca(3, 4, rng);
    Tensor s = oracles::random_tensor({2, 4}, rng);
    auto out = ca.forward(s, Tensor::zeros({2, 3}));
    Tensor mu = linear(s, ca.w_mu);
    for (std::size_t i = 0; i < mu.size(); ++i) REQUIRE(out.c.at(i) == mu.at(i));
}

TEST_CASE("kl closed form: mu=(1,0), sigma=(1,1) gives 0.5") {
    Rng rng(43);
    CondAugment ca(2, 1, rng);
    ca.w_mu.mutable_values() = {1.0, 0.0};      // mu = (s, 0)
    ca.w_logvar.mutable_values() = {0.0, 0.0};  // logvar = 0
    Tensor s = Tensor::from_vector({1, 1}, {1.0});
    auto out = ca.forward(s, Tensor::zeros({1, 2}));
    REQUIRE(out.kl.item() == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("conditioning augmentation gradient check") {
    Rng rng(44);
    CondAugment ca(2, 3, rng);
    Tensor s = oracles::random_tensor({2, 3}, rng, 0.6, true);
    Tensor eps = oracles::random_tensor({2, 2}, rng, 0.6);
    auto res = gradcheck::check({s, ca.w_mu, ca.w_logvar}, [&] {
        auto out = ca.forward(s, eps);
        return add(gradcheck::project(out.c), out.kl);
    });
    REQUIRE(res.max_rel_error < 1e-4);
}

// ---------------------------------------------------------------------------
// losses

TEST_CASE("per-stage generator loss at D = 0.5 equals log 2") {
    Tensor logits = Tensor::zeros({4, 1});  // sigmoid(0) = 0.5
    Tensor loss = generator_adv_loss(logits, logits);
    REQUIRE(loss.item() == Catch::Approx(std::log(2.0)).margin(1e-12));
}

TEST_CASE("generator loss hand arithmetic for D = (0.9, 0.8)") {
    Tensor uncond = Tensor::from_vector({1, 1}, {logit(0.9)});
    Tensor cond = Tensor::from_vector({1, 1}, {logit(0.8)});
    const double want = -0.5 * std::log(0.9) - 0.5 * std::log(0.8);  // ~0.164252
    REQUIRE(generator_adv_loss(uncond, cond).item() == Catch::Approx(want).margin(1e-9));
    REQUIRE(want == Catch::Approx(0.164252).margin(1e-6));
}

TEST_CASE("full generator objective composes adv + lambda*damsm + kl") {
    std::vector<Tensor> adv = {Tensor::scalar(0.7), Tensor::scalar(0.2), Tensor::scalar(0.1)};
    Tensor dm = Tensor::scalar(3.0);
    Tensor kl = Tensor::scalar(0.25);
    Tensor total = generator_loss(adv, dm, kl, 0.1, 1.0);
    REQUIRE(total.item() == Catch::Approx(0.7 + 0.2 + 0.1 + 0.3 + 0.25).margin(1e-12));
    REQUIRE_THROWS_AS(generator_loss(adv, dm, kl, -1.0), std::invalid_argument);
}

TEST_CASE("discriminator loss: D = 0.5 everywhere gives log2 per head group") {
    Tensor half = Tensor::zeros({6, 1});
    Tensor loss = discriminator_loss(half, half, half, half, half);
    // unconditional term = log 2; conditional term = log 2
    REQUIRE(loss.item() == Catch::Approx(2.0 * std::log(2.0)).margin(1e-12));
}

TEST_CASE("a perfect discriminator scores near zero") {
    Tensor right = Tensor::full({4, 1}, 30.0);   // p ~ 1
    Tensor wrong = Tensor::full({4, 1}, -30.0);  // p ~ 0
    Tensor loss = discriminator_loss(right, right, wrong, wrong, wrong);
    REQUIRE(loss.item() < 1e-6);
}

TEST_CASE("discriminator loss matches hand-computed cross-entropy") {
    Rng rng(51);
    auto draw = [&] { return oracles::random_tensor({3, 1}, rng, 1.5); };
    Tensor ru = draw(), rc = draw(), fu = draw(), fc = draw(), mc = draw();
    auto bce = [](const Tensor& t, double target) {
        double acc = 0.0;
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double p = 1.0 / (1.0 + std::exp(-t.at(i)));
            acc += -(target * std::log(p) + (1.0 - target) * std::log(1.0 - p));
        }
        return acc / static_cast<double>(t.size());
    };
    const double want = 0.5 * (bce(ru, 1) + bce(fu, 0)) +
                        0.5 * (bce(rc, 1) + 0.5 * (bce(fc, 0) + bce(mc, 0)));
    REQUIRE(discriminator_loss(ru, rc, fu, fc, mc).item() == Catch::Approx(want).margin(1e-12));
}

// ---------------------------------------------------------------------------
// variant + generator stack

TEST_CASE("variant validation") {
    ModelVariant v;
    v.kind = VariantKind::SE;
    v.placement = {"f1.attn"};
    REQUIRE_THROWS_AS(v.validate(), std::invalid_argument);
    v.kind = VariantKind::LocalPlusSE;
    REQUIRE_NOTHROW(v.validate());
    v.placement = {"nowhere"};
    REQUIRE_THROWS_AS(v.validate(), std::invalid_argument);
    REQUIRE(default_placement(VariantKind::SE).empty());
    REQUIRE(default_placement(VariantKind::LocalPlusSE).size() == 3);
}

TEST_CASE("generator emits three stages at doubling resolutions in [-1,1]") {
    Rng rng(61);
    RunConfig cfg = tiny_config();
    Generator gen(cfg.variant_config(), cfg.embed_dim, cfg.nz, cfg.base_channels, rng);
    auto encs = fixed_encodings(2, cfg.embed_dim, cfg.max_len, rng);
    Tensor noise = oracles::random_tensor({2, cfg.nz}, rng);
    Tensor eps = oracles::random_tensor({2, gen.cond_dim}, rng);
    auto out = gen.forward(encs, noise, eps);

    REQUIRE(out.stages.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        const auto& st = out.stages[i];
        REQUIRE(st.image.dim(1) == 3);
        REQUIRE(st.image.dim(2) == cfg.stage_h0 * (1u << i));
        REQUIRE(st.image.dim(2) == st.image.dim(3));
        if (i > 0) REQUIRE(st.image.dim(2) == 2 * out.stages[i - 1].image.dim(2));
        for (std::size_t j = 0; j < st.image.size(); ++j) {
            REQUIRE(st.image.at(j) <= 1.0);
            REQUIRE(st.image.at(j) >= -1.0);
        }
    }
}

TEST_CASE("generation is bitwise deterministic given seed, params, caption") {
    Rng rng(62);
    RunConfig cfg = tiny_config();
    Generator gen(cfg.variant_config(), cfg.embed_dim, cfg.nz, cfg.base_channels, rng);
    auto encs = fixed_encodings(2, cfg.embed_dim, cfg.max_len, rng);
    auto run = [&](std::uint64_t seed) {
        Rng r(seed);
        Tensor noise = Tensor::zeros({2, cfg.nz});
        for (auto& v : noise.mutable_values()) v = r.normal();
        Tensor eps = Tensor::zeros({2, gen.cond_dim});
        for (auto& v : eps.mutable_values()) v = r.normal();
        return gen.forward(encs, noise, eps);
    };
    auto a = run(99), b = run(99);
    for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t i = 0; i < a.stages[s].image.size(); ++i)
            REQUIRE(a.stages[s].image.at(i) == b.stages[s].image.at(i));
}

TEST_CASE("SE checkpoints carry no local-attention tensors, L+SE ones do") {
    Rng rng(63);
    RunConfig cfg = tiny_config();
    Generator se_gen(cfg.variant_config(), cfg.embed_dim, cfg.nz, cfg.base_channels, rng);
    NamedTensors se_reg;
    se_gen.collect(se_reg);
    std::size_t lattn_entries = 0, se_entries = 0, wattn_entries = 0;
    for (const auto& [name, _] : se_reg.entries()) {
        if (name.rfind("lattn.", 0) == 0) ++lattn_entries;
        if (name.rfind("se.", 0) == 0) ++se_entries;
        if (name.rfind("wattn.", 0) == 0) ++wattn_entries;
    }
    REQUIRE(lattn_entries == 0);
    REQUIRE(se_entries == 2 * 8);   // w1+w2 at 8 sites: f0.up0/up1, f{1,2}.rb0/rb1/up
    REQUIRE(wattn_entries == 2);

    RunConfig lcfg = tiny_config();
    lcfg.variant = "l+se";
    lcfg.r = 4;
    lcfg.placement = "f0.up0,f1.attn,f2.attn";
    Generator l_gen(lcfg.variant_config(), lcfg.embed_dim, lcfg.nz, lcfg.base_channels, rng);
    NamedTensors l_reg;
    l_gen.collect(l_reg);
    std::size_t l_lattn = 0;
    for (const auto& [name, _] : l_reg.entries())
        if (name.rfind("lattn.", 0) == 0) ++l_lattn;
    REQUIRE(l_lattn == 3 * 3);  // wq, wk, wv at three sites
}

TEST_CASE("discriminator heads produce one logit per sample") {
    Rng rng(64);
    Discriminator d(16, 8, 8, rng);
    Tensor img = oracles::random_tensor({3, 3, 16, 16}, rng);
    Tensor s = oracles::random_tensor({3, 8}, rng);
    auto nw = d.normalized(true);
    auto logits = d.forward(nw, img, s);
    REQUIRE(logits.uncond.shape() == Shape{3, 1});
    REQUIRE(logits.cond.shape() == Shape{3, 1});
    REQUIRE_THROWS_AS(d.forward(nw, oracles::random_tensor({3, 3, 8, 8}, rng), s),
                      std::invalid_argument);
}

// ---------------------------------------------------------------------------
// alternation: phase isolation

TEST_CASE("each training phase moves only its own parameters") {
    Rng rng(65);
    RunConfig cfg = tiny_config();
    Vocabulary vocab;
    for (const char* w : {"a", "b", "c", "d", "e", "f"}) vocab.add(w);
    GanModel model = build_gan_model(cfg, vocab);
    GanTrainer trainer(cfg, model);

    auto encs = fixed_encodings(cfg.batch, cfg.embed_dim, cfg.max_len, rng);
    Tensor final_real = oracles::random_tensor({cfg.batch, 3, 32, 32}, rng, 0.9);
    std::vector<Tensor> reals = {downsample_box(final_real, 4), downsample_box(final_real, 2),
                                 final_real};
    Tensor s_match = Generator::sentence_batch(encs).detach();
    Tensor s_mis = Tensor::zeros(s_match.shape());
    const std::size_t d = s_match.dim(1);
    for (std::size_t i = 0; i < cfg.batch; ++i)
        std::copy_n(s_match.data() + ((i + 1) % cfg.batch) * d, d, s_mis.data() + i * d);

    const std::uint64_t g0 = hash_tensors(trainer.g_params);
    std::vector<std::uint64_t> d0;
    for (auto& dp : trainer.d_params) d0.push_back(hash_tensors(dp));

    StepMetrics metrics;
    auto out = trainer.forward_generator(encs);
    trainer.phase_discriminators(out, reals, s_match, s_mis, metrics);

    // discriminators moved, generator untouched
    REQUIRE(hash_tensors(trainer.g_params) == g0);
    for (std::size_t i = 0; i < trainer.d_params.size(); ++i)
        REQUIRE(hash_tensors(trainer.d_params[i]) != d0[i]);

    std::vector<std::uint64_t> d1;
    for (auto& dp : trainer.d_params) d1.push_back(hash_tensors(dp));
    trainer.phase_generator(out, encs, s_match, metrics);

    // generator moved, discriminators untouched
    REQUIRE(hash_tensors(trainer.g_params) != g0);
    for (std::size_t i = 0; i < trainer.d_params.size(); ++i)
        REQUIRE(hash_tensors(trainer.d_params[i]) == d1[i]);

    for (double v : {metrics.d_loss[0], metrics.d_loss[1], metrics.d_loss[2], metrics.g_total})
        REQUIRE(std::isfinite(v));
}
