#pragma once

#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cagan/checkpoint.hpp"
#include "cagan/config.hpp"
#include "cagan/damsm.hpp"
#include "cagan/gan.hpp"
#include "cagan/io.hpp"
#include "cagan/metrics.hpp"
#include "cagan/toyset.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cagan {

inline void apply_thread_config(const RunConfig& cfg) {
#ifdef _OPENMP
    if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
#else
    (void)cfg;
#endif
}

inline void freeze(NamedTensors& params) {
    for (auto& [_, t] : params.entries()) t.node()->requires_grad = false;
}

inline void check_finite(double v, const std::string& what) {
    if (!std::isfinite(v)) throw NumericError(what + " is not finite (" + std::to_string(v) + ")");
}

// Stacks per-sample [3,H,W] dataset images into a constant [N,3,H,W] batch.
inline Tensor stack_images(const std::vector<Tensor>& images, const std::vector<std::size_t>& idx) {
    const std::size_t h = images[idx[0]].dim(1), w = images[idx[0]].dim(2);
    Tensor out = Tensor::zeros({idx.size(), 3, h, w});
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(images[idx[i]].data(), 3 * h * w, out.data() + i * 3 * h * w);
    return out;
}

// ---------------------------------------------------------------------------
// evaluation network training

inline EvalNet train_evalnet(const RunConfig& cfg, const ToyDataset& train, std::ostream& log) {
    Rng rng = Rng(cfg.seed).fork(0xE7A1);
    EvalNet net(kClassCount, rng);
    NamedTensors params;
    net.collect(params);
    Adam opt({cfg.evalnet_lr, 0.9, 0.999, 1e-8});

    std::vector<std::size_t> order(train.images.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    const std::size_t batch = std::min<std::size_t>(cfg.batch * 2, order.size());
    for (std::size_t epoch = 0; epoch < cfg.evalnet_epochs; ++epoch) {
        Rng shuffle_rng = Rng(cfg.seed).fork(0xE7A2 + epoch);
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t steps = 0;
        for (std::size_t off = 0; off + batch <= order.size(); off += batch) {
            std::vector<std::size_t> idx(order.begin() + off, order.begin() + off + batch);
            Tensor imgs = preprocess(stack_images(train.images, idx));
            std::vector<std::size_t> labels(batch);
            for (std::size_t i = 0; i < batch; ++i) labels[i] = train.specs[idx[i]].class_label();
            Tensor loss = cross_entropy_logits(net.logits(net.features(imgs)), labels);
            check_finite(loss.item(), "evalnet loss");
            params.zero_grads();
            backward(loss);
            opt.step(params);
            epoch_loss += loss.item();
            ++steps;
        }
        log << "[evalnet] epoch " << epoch + 1 << "/" << cfg.evalnet_epochs
            << " loss " << epoch_loss / std::max<std::size_t>(steps, 1) << "\n";
    }
    return net;
}

// ---------------------------------------------------------------------------
// DAMSM pre-training (jointly trains the text encoder)

struct DamsmTrainResult {
    DamsmModel model;
    std::vector<double> losses;  // one entry per step
};

inline DamsmTrainResult pretrain_damsm(const RunConfig& cfg, const ToyDataset& train,
                                       const Vocabulary& vocab, std::ostream& log) {
    if (train.resolution != cfg.final_resolution())
        throw ConfigError("dataset resolution " + std::to_string(train.resolution) +
                          " does not match 4*stage_h0 = " + std::to_string(cfg.final_resolution()));
    Rng init_rng = Rng(cfg.seed).fork(0xDA35);
    DamsmTrainResult out;
    out.model.image = DamsmImageEncoder(cfg.final_resolution(), cfg.embed_dim, init_rng);
    out.model.text = TextEncoder(vocab.size(), cfg.embed_dim, cfg.max_len, init_rng);
    out.model.temps = cfg.temperatures();

    NamedTensors params;
    out.model.collect(params);
    Adam opt({cfg.damsm_lr, 0.5, 0.999, 1e-8});

    std::vector<std::vector<std::size_t>> token_ids(train.captions.size());
    for (std::size_t i = 0; i < token_ids.size(); ++i)
        token_ids[i] = tokenize(train.captions[i], vocab, cfg.max_len);

    std::vector<std::size_t> order(train.images.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::size_t step = 0;
    bool done = false;
    for (std::size_t epoch = 0; epoch < cfg.damsm_epochs && !done; ++epoch) {
        Rng shuffle_rng = Rng(cfg.seed).fork(0xDA7A + epoch);
        shuffle_rng.shuffle(order);
        for (std::size_t off = 0; off + cfg.batch <= order.size() && !done; off += cfg.batch) {
            std::vector<std::size_t> idx(order.begin() + off, order.begin() + off + cfg.batch);
            std::vector<TextEncoding> encs;
            encs.reserve(cfg.batch);
            for (std::size_t i : idx) encs.push_back(out.model.text.encode(token_ids[i]));
            ImageRegionFeatures feats = out.model.image.forward(stack_images(train.images, idx));
            Tensor loss = damsm_loss(feats, encs, out.model.temps);
            check_finite(loss.item(), "damsm loss");
            params.zero_grads();
            backward(loss);
            opt.step(params);
            out.losses.push_back(loss.item());
            ++step;
            if (step % 50 == 0)
                log << "[damsm] step " << step << " loss " << loss.item() << "\n";
            if (cfg.max_steps > 0 && step >= cfg.max_steps) done = true;
        }
    }
    log << "[damsm] finished after " << step << " steps, first loss "
        << (out.losses.empty() ? 0.0 : out.losses.front()) << ", last loss "
        << (out.losses.empty() ? 0.0 : out.losses.back()) << "\n";
    return out;
}

// ---------------------------------------------------------------------------
// evaluation (IS + FID through the shared EvalNet)

struct EvalContext {
    const EvalNet* net = nullptr;
    GaussianStats real_stats;          // fitted once over the test split
    std::vector<TextEncoding> encs;    // frozen encodings of the test captions
    std::uint64_t evalnet_hash = 0;
};

inline EvalContext make_eval_context(const EvalNet& net, const ToyDataset& test,
                                     const TextEncoder& txt, const Vocabulary& vocab,
                                     const RunConfig& cfg) {
    NoGradGuard ng;
    EvalContext ctx;
    ctx.net = &net;
    std::vector<Tensor> feats;
    Tensor all = Tensor::zeros({test.images.size(), EvalNet::kFeatureDim});
    for (std::size_t off = 0; off < test.images.size(); off += cfg.batch) {
        const std::size_t n = std::min(cfg.batch, test.images.size() - off);
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = off + i;
        Tensor f = net.features(preprocess(stack_images(test.images, idx)));
        std::copy_n(f.data(), f.size(), all.data() + off * EvalNet::kFeatureDim);
    }
    ctx.real_stats = fit_gaussian(all);
    ctx.encs.reserve(test.captions.size());
    for (const auto& cap : test.captions)
        ctx.encs.push_back(txt.encode(tokenize(cap, vocab, cfg.max_len)));
    return ctx;
}

// Samples captions, generates final-stage images, and scores IS and FID
// against the real test statistics. Deterministic given (cfg.seed, tag).
inline MetricRow evaluate_generator(const Generator& gen, const EvalContext& ctx,
                                    const RunConfig& cfg, std::size_t epoch_tag) {
    NoGradGuard ng;
    if (cfg.eval_samples < 2 * cfg.n_splits)
        throw ConfigError("eval_samples must be at least 2*n_splits");
    Rng rng = Rng(cfg.seed).fork(0xEBA1000 + epoch_tag);
    const std::size_t m = cfg.eval_samples;
    Tensor probs = Tensor::zeros({m, kClassCount});
    Tensor feats = Tensor::zeros({m, EvalNet::kFeatureDim});
    for (std::size_t off = 0; off < m; off += cfg.batch) {
        const std::size_t n = std::min(cfg.batch, m - off);
        std::vector<TextEncoding> encs;
        encs.reserve(n);
        for (std::size_t i = 0; i < n; ++i)
            encs.push_back(ctx.encs[rng.below(ctx.encs.size())]);
        Tensor noise = Tensor::zeros({n, cfg.nz});
        for (auto& v : noise.mutable_values()) v = rng.normal();
        Tensor eps = Tensor::zeros({n, gen.cond_dim});
        for (auto& v : eps.mutable_values()) v = rng.normal();
        Generator::Output out = gen.forward(encs, noise, eps);
        Tensor pre = preprocess(out.stages.back().image);
        Tensor f = ctx.net->features(pre);
        Tensor p = softmax(ctx.net->logits(f), 1);
        std::copy_n(f.data(), f.size(), feats.data() + off * EvalNet::kFeatureDim);
        std::copy_n(p.data(), p.size(), probs.data() + off * kClassCount);
    }
    MetricRow row;
    row.epoch = epoch_tag;
    const InceptionScore is = inception_score(probs, cfg.n_splits);
    row.is_mean = is.mean;
    row.is_std = is.stddev;
    row.fid = frechet_distance(ctx.real_stats, fit_gaussian(feats));
    return row;
}

// ---------------------------------------------------------------------------
// GAN training

struct GanModel {
    Generator gen;
    std::vector<Discriminator> discs;  // one per stage
    TextEncoder txt;                   // frozen after DAMSM pre-training
    DamsmImageEncoder damsm_img;       // frozen
    DamsmTemperatures temps;

    NamedTensors gen_params() const {
        NamedTensors p;
        gen.collect(p);
        return p;
    }
    NamedTensors disc_params(std::size_t i) const {
        NamedTensors p;
        discs[i].collect(p, "d" + std::to_string(i));
        return p;
    }
};

inline GanModel build_gan_model(const RunConfig& cfg, const Vocabulary& vocab) {
    GanModel m;
    Rng init_rng = Rng(cfg.seed).fork(0x6A17);
    const ModelVariant var = cfg.variant_config();
    m.gen = Generator(var, cfg.embed_dim, cfg.nz, cfg.base_channels, init_rng);
    for (std::size_t i = 0; i < 3; ++i)
        m.discs.emplace_back(cfg.stage_h0 << i, cfg.d_channels, cfg.embed_dim, init_rng);
    m.txt = TextEncoder(vocab.size(), cfg.embed_dim, cfg.max_len, init_rng);
    m.damsm_img = DamsmImageEncoder(cfg.final_resolution(), cfg.embed_dim, init_rng);
    m.temps = cfg.temperatures();
    return m;
}

// Loads DAMSM weights into the model's frozen encoders.
inline void adopt_damsm(GanModel& m, const NamedTensors& damsm_ckpt) {
    NamedTensors txt_params, img_params;
    m.txt.collect(txt_params, "damsm.txt");
    m.damsm_img.collect(img_params, "damsm.img");
    assign_from_checkpoint(txt_params, damsm_ckpt);
    assign_from_checkpoint(img_params, damsm_ckpt);
    freeze(txt_params);
    freeze(img_params);
}

struct StepMetrics {
    double d_loss[3] = {0, 0, 0};
    double g_adv[3] = {0, 0, 0};
    double damsm = 0.0;
    double kl = 0.0;
    double g_total = 0.0;
};

struct GanTrainer {
    RunConfig cfg;
    GanModel* model = nullptr;
    NamedTensors g_params;
    std::vector<NamedTensors> d_params;
    Adam opt_g;
    std::vector<Adam> opt_d;
    Rng rng;
    std::size_t epoch = 0;
    std::size_t global_step = 0;

    GanTrainer(const RunConfig& c, GanModel& m)
        : cfg(c), model(&m), opt_g(c.gan_adam()), rng(Rng(c.seed).fork(0x57E9)) {
        g_params = m.gen_params();
        for (std::size_t i = 0; i < m.discs.size(); ++i) {
            d_params.push_back(m.disc_params(i));
            opt_d.emplace_back(c.gan_adam());
        }
        opt_g.init(g_params);
        for (std::size_t i = 0; i < d_params.size(); ++i) opt_d[i].init(d_params[i]);
    }

    Generator::Output forward_generator(const std::vector<TextEncoding>& encs) {
        const std::size_t n = encs.size();
        Tensor noise = Tensor::zeros({n, cfg.nz});
        for (auto& v : noise.mutable_values()) v = rng.normal();
        Tensor eps = Tensor::zeros({n, model->gen.cond_dim});
        for (auto& v : eps.mutable_values()) v = rng.normal();
        return model->gen.forward(encs, noise, eps);
    }

    // D phase: spectral norm re-estimated per discriminator, fakes detached.
    // Only discriminator parameters move.
    void phase_discriminators(const Generator::Output& out, const std::vector<Tensor>& stage_reals,
                              const Tensor& s_match, const Tensor& s_mismatch,
                              StepMetrics& metrics) {
        for (std::size_t i = 0; i < model->discs.size(); ++i) {
            Discriminator& d = model->discs[i];
            auto nw = d.normalized(true);
            auto real = d.forward(nw, stage_reals[i], s_match);
            auto fake = d.forward(nw, out.stages[i].image.detach(), s_match);
            auto mis = d.forward(nw, stage_reals[i], s_mismatch);
            Tensor loss = discriminator_loss(real.uncond, real.cond, fake.uncond, fake.cond, mis.cond);
            metrics.d_loss[i] = loss.item();
            check_finite(metrics.d_loss[i], "discriminator " + std::to_string(i) + " loss");
            d_params[i].zero_grads();
            backward(loss);
            opt_d[i].step(d_params[i]);
        }
    }

    // G phase: fresh spectral-norm pass through the just-updated
    // discriminators, summed per-stage objective plus matching and KL terms.
    // Only generator-side parameters move.
    void phase_generator(const Generator::Output& out, const std::vector<TextEncoding>& encs,
                         const Tensor& s_match, StepMetrics& metrics) {
        std::vector<Tensor> adv;
        adv.reserve(model->discs.size());
        for (std::size_t i = 0; i < model->discs.size(); ++i) {
            Discriminator& d = model->discs[i];
            auto nw = d.normalized(true);
            auto fake = d.forward(nw, out.stages[i].image, s_match);
            Tensor a = generator_adv_loss(fake.uncond, fake.cond);
            metrics.g_adv[i] = a.item();
            adv.push_back(a);
        }
        ImageRegionFeatures feats = model->damsm_img.forward(out.stages.back().image);
        Tensor dm = damsm_loss(feats, encs, model->temps);
        metrics.damsm = dm.item();
        metrics.kl = out.kl.item();
        Tensor g_loss = generator_loss(adv, dm, out.kl, cfg.lambda, cfg.kl_weight);
        metrics.g_total = g_loss.item();
        check_finite(metrics.g_total, "generator loss");
        g_params.zero_grads();
        backward(g_loss);
        opt_g.step(g_params);
    }

    // One alternation: update every D_i on real/fake/mismatched, then update
    // the generator stack.
    StepMetrics step(const std::vector<Tensor>& stage_reals,
                     const std::vector<TextEncoding>& encs, const Tensor& s_match,
                     const Tensor& s_mismatch) {
        StepMetrics metrics;
        Generator::Output out = forward_generator(encs);
        phase_discriminators(out, stage_reals, s_match, s_mismatch, metrics);
        phase_generator(out, encs, s_match, metrics);
        ++global_step;
        return metrics;
    }

    // --- checkpointing (parameters, optimizer moments, rng, epoch) ---

    NamedTensors snapshot() const {
        NamedTensors all;
        for (const auto& [name, t] : g_params.entries()) all.add(name, t);
        for (const auto& dp : d_params)
            for (const auto& [name, t] : dp.entries()) all.add(name, t);
        NamedTensors frozen;
        model->txt.collect(frozen, "damsm.txt");
        model->damsm_img.collect(frozen, "damsm.img");
        for (const auto& [name, t] : frozen.entries()) all.add(name, t);
        for (std::size_t i = 0; i < model->discs.size(); ++i)
            model->discs[i].collect_sn_state(all, "sn.d" + std::to_string(i));

        auto add_moments = [&all](const char* tag, const Adam& opt, const NamedTensors& params) {
            const auto& m = const_cast<Adam&>(opt).first_moments();
            const auto& v = const_cast<Adam&>(opt).second_moments();
            for (std::size_t i = 0; i < params.entries().size(); ++i) {
                const auto& [name, t] = params.entries()[i];
                all.add(std::string("opt.") + tag + ".m." + name,
                        Tensor::from_vector(t.shape(), m[i]));
                all.add(std::string("opt.") + tag + ".v." + name,
                        Tensor::from_vector(t.shape(), v[i]));
            }
            all.add(std::string("opt.") + tag + ".t",
                    Tensor::scalar(static_cast<double>(opt.steps())));
        };
        add_moments("g", opt_g, g_params);
        for (std::size_t i = 0; i < opt_d.size(); ++i)
            add_moments(("d" + std::to_string(i)).c_str(), opt_d[i], d_params[i]);

        all.add("rng.state", Tensor::from_vector({4}, {static_cast<double>(rng.seed()),
                                                       static_cast<double>(rng.counter()),
                                                       rng.has_cached() ? 1.0 : 0.0,
                                                       rng.cached_value()}));
        all.add("meta.epoch", Tensor::scalar(static_cast<double>(epoch)));
        all.add("meta.step", Tensor::scalar(static_cast<double>(global_step)));
        return all;
    }

    void save(const std::string& path) const {
        const std::string tmp = path + ".tmp";
        save_checkpoint(tmp, snapshot());
        std::filesystem::rename(tmp, path);
    }

    void restore(const NamedTensors& ckpt) {
        assign_from_checkpoint(g_params, ckpt);
        for (auto& dp : d_params) assign_from_checkpoint(dp, ckpt);
        NamedTensors frozen;
        model->txt.collect(frozen, "damsm.txt");
        model->damsm_img.collect(frozen, "damsm.img");
        assign_from_checkpoint(frozen, ckpt);
        freeze(frozen);
        for (std::size_t i = 0; i < model->discs.size(); ++i)
            model->discs[i].restore_sn_state(ckpt, "sn.d" + std::to_string(i));

        auto restore_moments = [&ckpt](const char* tag, Adam& opt, NamedTensors& params) {
            auto& m = opt.first_moments();
            auto& v = opt.second_moments();
            for (std::size_t i = 0; i < params.entries().size(); ++i) {
                const auto& name = params.entries()[i].first;
                for (const auto& [cn, ct] : ckpt.entries()) {
                    if (cn == std::string("opt.") + tag + ".m." + name) m[i] = ct.values();
                    if (cn == std::string("opt.") + tag + ".v." + name) v[i] = ct.values();
                }
            }
            for (const auto& [cn, ct] : ckpt.entries())
                if (cn == std::string("opt.") + tag + ".t")
                    opt.restore_steps(static_cast<std::uint64_t>(ct.item()));
        };
        restore_moments("g", opt_g, g_params);
        for (std::size_t i = 0; i < opt_d.size(); ++i)
            restore_moments(("d" + std::to_string(i)).c_str(), opt_d[i], d_params[i]);

        for (const auto& [cn, ct] : ckpt.entries()) {
            if (cn == "rng.state")
                rng.restore(static_cast<std::uint64_t>(ct.at(1)), ct.at(2) != 0.0, ct.at(3));
            if (cn == "meta.epoch") epoch = static_cast<std::size_t>(ct.item());
            if (cn == "meta.step") global_step = static_cast<std::size_t>(ct.item());
        }
    }
};

// Full training command: epochs of alternating updates, periodic IS/FID
// rows, per-epoch checkpoints, optional resume.
struct TrainOutcome {
    MetricReport report;
    std::size_t steps_run = 0;
    std::vector<double> g_losses;
    std::vector<double> d_losses;
};

inline TrainOutcome train_gan(const RunConfig& cfg, GanModel& model, const ToyDataset& train,
                              const EvalContext& eval_ctx, const Vocabulary& vocab,
                              const std::string& out_dir, bool resume, std::ostream& log) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    apply_thread_config(cfg);

    GanTrainer trainer(cfg, model);
    const std::string latest = (fs::path(out_dir) / "gan_latest.cagan").string();
    if (resume && fs::exists(latest)) {
        trainer.restore(load_checkpoint(latest));
        log << "[train] resumed from " << latest << " at epoch " << trainer.epoch << "\n";
    }

    TrainOutcome outcome;
    outcome.report.n_samples = cfg.eval_samples;
    outcome.report.n_splits = cfg.n_splits;
    outcome.report.seed = cfg.seed;
    outcome.report.evalnet_hash = eval_ctx.evalnet_hash;
    outcome.report.config_hash = cfg.hash();

    // frozen caption encodings, one per training sample
    std::vector<TextEncoding> all_encs;
    {
        NoGradGuard ng;
        all_encs.reserve(train.captions.size());
        for (const auto& cap : train.captions)
            all_encs.push_back(model.txt.encode(tokenize(cap, vocab, cfg.max_len)));
    }

    auto eval_row = [&](std::size_t tag) {
        MetricRow row = evaluate_generator(model.gen, eval_ctx, cfg, tag);
        outcome.report.rows.push_back(row);
        log << "[eval] epoch " << tag << " IS " << row.is_mean << " +/- " << row.is_std
            << " FID " << row.fid << "\n";
        write_text_file((fs::path(out_dir) / "report.csv").string(), outcome.report.to_csv());
        // sample grid for eyeballing progress
        NoGradGuard ng;
        const std::size_t n = std::min<std::size_t>(8, eval_ctx.encs.size());
        std::vector<TextEncoding> encs(eval_ctx.encs.begin(), eval_ctx.encs.begin() + n);
        Rng grid_rng = Rng(cfg.seed).fork(0x641D);
        Tensor noise = Tensor::zeros({n, cfg.nz});
        for (auto& v : noise.mutable_values()) v = grid_rng.normal();
        Tensor eps = Tensor::zeros({n, model.gen.cond_dim});
        for (auto& v : eps.mutable_values()) v = grid_rng.normal();
        Generator::Output out = model.gen.forward(encs, noise, eps);
        std::vector<Tensor> tiles;
        const Tensor& img = out.stages.back().image;
        for (std::size_t i = 0; i < n; ++i)
            tiles.push_back(reshape(slice0(img, i), {3, img.dim(2), img.dim(3)}));
        char name[40];
        std::snprintf(name, sizeof(name), "samples_epoch_%04zu.ppm", tag);
        write_ppm((fs::path(out_dir) / name).string(), tile_images(tiles, 4));
    };

    if (trainer.epoch == 0) eval_row(0);

    std::vector<std::size_t> order(train.images.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    bool done = false;
    for (; trainer.epoch < cfg.epochs && !done; ) {
        const std::size_t epoch = trainer.epoch;
        Rng shuffle_rng = Rng(cfg.seed).fork(0x9A7A + epoch);
        shuffle_rng.shuffle(order);
        double g_sum = 0.0, d_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t off = 0; off + cfg.batch <= order.size() && !done; off += cfg.batch) {
            std::vector<std::size_t> idx(order.begin() + off, order.begin() + off + cfg.batch);
            std::vector<TextEncoding> encs;
            encs.reserve(cfg.batch);
            for (std::size_t i : idx) encs.push_back(all_encs[i]);
            Tensor final_real = stack_images(train.images, idx);
            std::vector<Tensor> stage_reals = {downsample_box(final_real, 4),
                                               downsample_box(final_real, 2), final_real};
            Tensor s_match;
            {
                NoGradGuard ng;
                s_match = Generator::sentence_batch(encs);
            }
            // mismatched captions: rotate within the batch by one
            Tensor s_mis = Tensor::zeros(s_match.shape());
            const std::size_t d = s_match.dim(1);
            for (std::size_t i = 0; i < cfg.batch; ++i)
                std::copy_n(s_match.data() + ((i + 1) % cfg.batch) * d, d, s_mis.data() + i * d);

            StepMetrics m = trainer.step(stage_reals, encs, s_match, s_mis);
            g_sum += m.g_total;
            d_sum += m.d_loss[0] + m.d_loss[1] + m.d_loss[2];
            outcome.g_losses.push_back(m.g_total);
            outcome.d_losses.push_back(m.d_loss[0] + m.d_loss[1] + m.d_loss[2]);
            ++steps;
            ++outcome.steps_run;
            if (trainer.global_step % 20 == 0)
                log << "[train] step " << trainer.global_step << " g " << m.g_total << " d2 "
                    << m.d_loss[2] << " damsm " << m.damsm << " kl " << m.kl << "\n";
            if (cfg.max_steps > 0 && trainer.global_step >= cfg.max_steps) done = true;
        }
        trainer.epoch = epoch + 1;
        log << "[train] epoch " << trainer.epoch << "/" << cfg.epochs << " mean g "
            << g_sum / std::max<std::size_t>(steps, 1) << " mean d "
            << d_sum / std::max<std::size_t>(steps, 1) << "\n";
        trainer.save(latest);
        if (!done && (trainer.epoch % cfg.eval_every == 0 || trainer.epoch == cfg.epochs))
            eval_row(trainer.epoch);
    }
    if (done) {
        trainer.save(latest);
        eval_row(trainer.epoch + 1000000);  // tag smoke-capped partial epochs distinctly
    }

    // metric curves alongside the raw CSV
    std::vector<double> is_curve, fid_curve;
    for (const auto& r : outcome.report.rows) {
        is_curve.push_back(r.is_mean);
        fid_curve.push_back(r.fid);
    }
    write_line_chart_ppm((fs::path(out_dir) / "is_curve.ppm").string(), {is_curve});
    write_line_chart_ppm((fs::path(out_dir) / "fid_curve.ppm").string(), {fid_curve});
    write_text_file((fs::path(out_dir) / "report.csv").string(), outcome.report.to_csv());
    return outcome;
}

// ---------------------------------------------------------------------------
// generation and the caption-edit sensitivity test

// All three stage images for one caption, stages upsampled to a common grid.
inline std::vector<Tensor> generate_stages(const Generator& gen, const TextEncoder& txt,
                                           const Vocabulary& vocab, const std::string& cap,
                                           std::size_t max_len, Rng& rng) {
    NoGradGuard ng;
    std::vector<TextEncoding> encs = {txt.encode(tokenize(cap, vocab, max_len))};
    Tensor noise = Tensor::zeros({1, gen.noise_dim});
    for (auto& v : noise.mutable_values()) v = rng.normal();
    Tensor eps = Tensor::zeros({1, gen.cond_dim});
    for (auto& v : eps.mutable_values()) v = rng.normal();
    Generator::Output out = gen.forward(encs, noise, eps);
    std::vector<Tensor> stages;
    for (const auto& st : out.stages) {
        Shape s = st.image.shape();
        stages.push_back(reshape(st.image.detach(), {s[1], s[2], s[3]}));
    }
    return stages;
}

struct SensitivityRow {
    std::size_t draw = 0;
    ColorKind before = ColorKind::Red;
    ColorKind after = ColorKind::Red;
};

struct SensitivityReport {
    std::string base_caption;
    std::string edited_caption;
    std::string from_word, to_word;
    std::vector<SensitivityRow> rows;
    double flip_rate = 0.0;          // fraction of draws whose prediction changed
    double target_match_rate = 0.0;  // fraction predicting the substituted color

    std::string to_text() const {
        std::ostringstream os;
        os << "base: " << base_caption << "\n";
        os << "edit: " << from_word << " -> " << to_word << "\n";
        os << "edited: " << edited_caption << "\n";
        os << "draw,predicted_before,predicted_after\n";
        for (const auto& r : rows)
            os << r.draw << ',' << to_string(r.before) << ',' << to_string(r.after) << '\n';
        os << "flip_rate," << flip_rate << "\n";
        os << "target_match_rate," << target_match_rate << "\n";
        return os.str();
    }
};

// Generates the base and edited captions with shared noise per draw and
// classifies the final-stage dominant color through the toy oracle.
inline SensitivityReport run_sensitivity(const Generator& gen, const TextEncoder& txt,
                                         const Vocabulary& vocab, const std::string& base_caption,
                                         const std::string& from_word, const std::string& to_word,
                                         std::size_t n_draws, std::uint64_t seed,
                                         std::size_t max_len) {
    if (!vocab.contains(to_word))
        throw ConfigError("substitution token '" + to_word + "' absent from vocabulary");
    std::vector<std::string> words = split_words(base_caption);
    std::size_t hits = 0, pos = 0;
    for (std::size_t i = 0; i < words.size(); ++i)
        if (words[i] == from_word) {
            ++hits;
            pos = i;
        }
    if (hits != 1)
        throw ConfigError("substitution must alter exactly one token; '" + from_word +
                          "' occurs " + std::to_string(hits) + " times");
    words[pos] = to_word;
    std::string edited;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) edited += ' ';
        edited += words[i];
    }

    SensitivityReport rep;
    rep.base_caption = base_caption;
    rep.edited_caption = edited;
    rep.from_word = from_word;
    rep.to_word = to_word;

    NoGradGuard ng;
    std::vector<TextEncoding> enc_base = {txt.encode(tokenize(base_caption, vocab, max_len))};
    std::vector<TextEncoding> enc_edit = {txt.encode(tokenize(edited, vocab, max_len))};

    std::size_t flips = 0, matches = 0;
    std::optional<ColorKind> target;
    for (std::size_t c = 0; c < kColorCount; ++c)
        if (to_word == to_string(static_cast<ColorKind>(c))) target = static_cast<ColorKind>(c);

    for (std::size_t draw = 0; draw < n_draws; ++draw) {
        Rng rng = Rng(seed).fork(0x5E45 + draw);
        Tensor noise = Tensor::zeros({1, gen.noise_dim});
        for (auto& v : noise.mutable_values()) v = rng.normal();
        Tensor eps = Tensor::zeros({1, gen.cond_dim});
        for (auto& v : eps.mutable_values()) v = rng.normal();

        auto classify = [&](const std::vector<TextEncoding>& encs) {
            Generator::Output out = gen.forward(encs, noise, eps);
            const Tensor& img = out.stages.back().image;
            Shape s = img.shape();
            return classify_dominant_color(reshape(img.detach(), {s[1], s[2], s[3]}));
        };
        SensitivityRow row;
        row.draw = draw;
        row.before = classify(enc_base);
        row.after = classify(enc_edit);
        rep.rows.push_back(row);
        if (row.before != row.after) ++flips;
        if (target && row.after == *target) ++matches;
    }
    rep.flip_rate = static_cast<double>(flips) / static_cast<double>(std::max<std::size_t>(n_draws, 1));
    rep.target_match_rate =
        static_cast<double>(matches) / static_cast<double>(std::max<std::size_t>(n_draws, 1));
    return rep;
}

}  // namespace cagan
