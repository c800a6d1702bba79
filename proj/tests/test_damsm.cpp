#include <catch2/catch_amalgamated.hpp>

#include "cagan/damsm.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace cagan;

namespace {

TextEncoding make_encoding(const Tensor& words, std::size_t real_tokens, const Tensor& sentence) {
    TextEncoding enc;
    enc.words = words;
    enc.sentence = sentence;
    enc.mask.assign(words.dim(1), 0);
    for (std::size_t i = 0; i < real_tokens; ++i) enc.mask[i] = 1;
    return enc;
}

// Direct reimplementation of the matching chain with raw loops; shares no
// code with the library path.
double matching_score_ref(const Tensor& regions, const Tensor& words, std::size_t len,
                          const DamsmTemperatures& t) {
    const std::size_t d = regions.dim(0), r = regions.dim(1);
    auto norm_col = [&](const Tensor& m, std::size_t col, std::size_t cols) {
        double n = 0.0;
        for (std::size_t i = 0; i < d; ++i) n += m.at(i * cols + col) * m.at(i * cols + col);
        return std::max(std::sqrt(n), 1e-8);
    };
    std::vector<double> rel(len);
    for (std::size_t l = 0; l < len; ++l) {
        // cosine row against all regions
        std::vector<double> cos(r);
        for (std::size_t j = 0; j < r; ++j) {
            double dot = 0.0;
            for (std::size_t i = 0; i < d; ++i)
                dot += words.at(i * words.dim(1) + l) * regions.at(i * r + j);
            cos[j] = dot / (norm_col(words, l, words.dim(1)) * norm_col(regions, j, r));
        }
        // gamma1 softmax over regions
        double mx = cos[0];
        for (double c : cos) mx = std::max(mx, c);
        std::vector<double> alpha(r);
        double z = 0.0;
        for (std::size_t j = 0; j < r; ++j) {
            alpha[j] = std::exp(t.gamma1 * (cos[j] - mx));
            z += alpha[j];
        }
        for (auto& a : alpha) a /= z;
        // context over normalized regions
        std::vector<double> ctx(d, 0.0);
        for (std::size_t j = 0; j < r; ++j) {
            const double nr = norm_col(regions, j, r);
            for (std::size_t i = 0; i < d; ++i) ctx[i] += alpha[j] * regions.at(i * r + j) / nr;
        }
        double dot = 0.0, nc = 0.0, nw = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            dot += ctx[i] * words.at(i * words.dim(1) + l);
            nc += ctx[i] * ctx[i];
            nw += words.at(i * words.dim(1) + l) * words.at(i * words.dim(1) + l);
        }
        rel[l] = dot / (std::max(std::sqrt(nc), 1e-8) * std::max(std::sqrt(nw), 1e-8));
    }
    double acc = 0.0;
    for (double v : rel) acc += std::exp(t.gamma2 * v);
    return std::log(acc) / t.gamma2;
}

}  // namespace

TEST_CASE("matching score of perfectly aligned features is one") {
    // every region equals the single word's feature -> cosine 1, smooth-max of {1} = 1
    Tensor words = Tensor::zeros({3, 4});
    words.data()[0] = 0.2;
    words.data()[4] = -0.5;
    words.data()[8] = 0.8;
    Tensor regions = Tensor::zeros({3, 5});
    for (std::size_t j = 0; j < 5; ++j) {
        regions.data()[0 * 5 + j] = 0.2;
        regions.data()[1 * 5 + j] = -0.5;
        regions.data()[2 * 5 + j] = 0.8;
    }
    DamsmTemperatures t;
    std::vector<std::uint8_t> mask = {1, 0, 0, 0};
    Tensor score = matching_score(regions, words, mask, t);
    REQUIRE(score.item() == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("orthogonal features score the smooth-max of zeros") {
    Tensor words = Tensor::zeros({4, 2});
    words.data()[0] = 1.0;              // word 0 = e0
    words.data()[1 * 2 + 1] = 1.0;      // word 1 = e1
    Tensor regions = Tensor::zeros({4, 3});
    for (std::size_t j = 0; j < 3; ++j) regions.data()[2 * 3 + j] = 1.0;  // all regions = e2
    DamsmTemperatures t;
    Tensor score = matching_score(regions, words, {1, 1}, t);
    // cosines are 0 everywhere: score = log(2 * exp(0)) / gamma2
    REQUIRE(score.item() == Catch::Approx(std::log(2.0) / t.gamma2).margin(1e-9));
}

TEST_CASE("matching score matches an independent reimplementation") {
    Rng rng(71);
    DamsmTemperatures t;
    Tensor words = oracles::random_tensor({6, 3}, rng);
    Tensor regions = oracles::random_tensor({6, 4}, rng);
    Tensor got = matching_score(regions, words, {1, 1, 0}, t);
    const double want = matching_score_ref(regions, words, 2, t);
    REQUIRE(std::abs(got.item() - want) < 1e-10);
}

TEST_CASE("matching score is invariant to rescaling single feature vectors") {
    Rng rng(72);
    DamsmTemperatures t;
    Tensor words = oracles::random_tensor({5, 3}, rng);
    Tensor regions = oracles::random_tensor({5, 6}, rng);
    const double base = matching_score(regions, words, {1, 1, 1}, t).item();
    for (double lam : {0.5, 2.0, 10.0}) {
        Tensor r2 = regions.detach();
        for (std::size_t i = 0; i < 5; ++i) r2.data()[i * 6 + 2] *= lam;  // region 2
        REQUIRE(std::abs(matching_score(r2, words, {1, 1, 1}, t).item() - base) < 1e-9);
        Tensor w2 = words.detach();
        for (std::size_t i = 0; i < 5; ++i) w2.data()[i * 3 + 1] *= lam;  // word 1
        REQUIRE(std::abs(matching_score(regions, w2, {1, 1, 1}, t).item() - base) < 1e-9);
    }
}

TEST_CASE("matching score rejects empty captions and bad shapes") {
    DamsmTemperatures t;
    REQUIRE_THROWS_AS(matching_score(Tensor::zeros({3, 4}), Tensor::zeros({3, 2}), {0, 0}, t),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(matching_score(Tensor::zeros({3, 4}), Tensor::zeros({5, 2}), {1, 0}, t),
                      std::invalid_argument);
    DamsmTemperatures bad{0.0, 5.0, 10.0};
    REQUIRE_THROWS_AS(matching_score(Tensor::zeros({3, 4}), Tensor::zeros({3, 2}), {1, 0}, bad),
                      std::invalid_argument);
}

TEST_CASE("identical pairs give the uniform-posterior loss 4 log N") {
    Rng rng(73);
    const std::size_t n = 5, d = 4, r = 6;
    Tensor one_region = oracles::random_tensor({d, r}, rng);
    Tensor one_word = oracles::random_tensor({d, 3}, rng);
    Tensor one_sent = oracles::random_tensor({d}, rng);

    ImageRegionFeatures img;
    img.regions = Tensor::zeros({n, d, r});
    img.global_vec = Tensor::zeros({n, d});
    std::vector<TextEncoding> encs;
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(one_region.data(), d * r, img.regions.data() + i * d * r);
        for (std::size_t j = 0; j < d; ++j) img.global_vec.data()[i * d + j] = one_sent.at(j);
        encs.push_back(make_encoding(one_word, 3, one_sent));
    }
    DamsmTemperatures t;
    Tensor loss = damsm_loss(img, encs, t);
    REQUIRE(loss.item() == Catch::Approx(4.0 * std::log(double(n))).margin(1e-9));
}

TEST_CASE("damsm loss is permutation equivariant and rejects a batch of one") {
    Rng rng(74);
    const std::size_t n = 4, d = 4, r = 5;
    ImageRegionFeatures img;
    img.regions = oracles::random_tensor({n, d, r}, rng);
    img.global_vec = oracles::random_tensor({n, d}, rng);
    std::vector<TextEncoding> encs;
    for (std::size_t i = 0; i < n; ++i)
        encs.push_back(make_encoding(oracles::random_tensor({d, 3}, rng), 3,
                                     oracles::random_tensor({d}, rng)));
    DamsmTemperatures t;
    const double base = damsm_loss(img, encs, t).item();

    // permute the batch consistently on both sides
    std::vector<std::size_t> perm = {2, 0, 3, 1};
    ImageRegionFeatures pimg;
    pimg.regions = Tensor::zeros({n, d, r});
    pimg.global_vec = Tensor::zeros({n, d});
    std::vector<TextEncoding> pencs;
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(img.regions.data() + perm[i] * d * r, d * r, pimg.regions.data() + i * d * r);
        std::copy_n(img.global_vec.data() + perm[i] * d, d, pimg.global_vec.data() + i * d);
        pencs.push_back(encs[perm[i]]);
    }
    REQUIRE(std::abs(damsm_loss(pimg, pencs, t).item() - base) < 1e-10);

    ImageRegionFeatures single;
    single.regions = oracles::random_tensor({1, d, r}, rng);
    single.global_vec = oracles::random_tensor({1, d}, rng);
    REQUIRE_THROWS_AS(damsm_loss(single, {encs[0]}, t), std::invalid_argument);
}

TEST_CASE("a sharper batch posterior shrinks the loss of a well-matched pair") {
    Rng rng(75);
    const std::size_t n = 3, d = 4, r = 4;
    ImageRegionFeatures img;
    img.regions = oracles::random_tensor({n, d, r}, rng, 0.2);
    img.global_vec = oracles::random_tensor({n, d}, rng, 0.2);
    std::vector<TextEncoding> encs;
    for (std::size_t i = 0; i < n; ++i) {
        // make pair i strongly self-matched: words proportional to its own regions
        Tensor words = Tensor::zeros({d, 2});
        for (std::size_t j = 0; j < d; ++j) {
            words.data()[j * 2] = img.regions.at(i * d * r + j * r);
            words.data()[j * 2 + 1] = img.regions.at(i * d * r + j * r + 1);
        }
        Tensor sent = Tensor::zeros({d});
        for (std::size_t j = 0; j < d; ++j) sent.data()[j] = img.global_vec.at(i * d + j);
        encs.push_back(make_encoding(words, 2, sent));
    }
    double prev = 1e18;
    for (double g3 : {1.0, 10.0, 100.0}) {
        DamsmTemperatures t{4.0, 5.0, g3};
        const double cur = damsm_loss(img, encs, t).item();
        REQUIRE(cur < prev);
        prev = cur;
    }
}

TEST_CASE("damsm loss differentiates through both encoders' outputs") {
    Rng rng(76);
    const std::size_t n = 2, d = 3, r = 4;
    ImageRegionFeatures img;
    img.regions = oracles::random_tensor({n, d, r}, rng, 0.7, true);
    img.global_vec = oracles::random_tensor({n, d}, rng, 0.7, true);
    std::vector<Tensor> word_params = {oracles::random_tensor({d, 2}, rng, 0.7, true),
                                       oracles::random_tensor({d, 2}, rng, 0.7, true)};
    std::vector<Tensor> sent_params = {oracles::random_tensor({d}, rng, 0.7, true),
                                       oracles::random_tensor({d}, rng, 0.7, true)};
    DamsmTemperatures t;
    auto loss_fn = [&] {
        std::vector<TextEncoding> encs;
        for (std::size_t i = 0; i < n; ++i)
            encs.push_back(make_encoding(word_params[i], 2, sent_params[i]));
        return damsm_loss(img, encs, t);
    };
    auto res = gradcheck::check(
        {img.regions, img.global_vec, word_params[0], word_params[1], sent_params[0], sent_params[1]},
        loss_fn);
    REQUIRE(res.max_rel_error < 1e-4);
}

// ---------------------------------------------------------------------------
// image region encoder

TEST_CASE("region grid follows the stride arithmetic") {
    Rng rng(81);
    DamsmImageEncoder enc(64, 16, rng);
    REQUIRE(enc.region_count() == 256);  // (64/4)^2
    Tensor img = oracles::random_tensor({2, 3, 64, 64}, rng);
    auto feats = enc.forward(img);
    REQUIRE(feats.regions.shape() == Shape{2, 16, 256});
    REQUIRE(feats.global_vec.shape() == Shape{2, 16});
    REQUIRE_THROWS_AS(enc.forward(oracles::random_tensor({2, 3, 32, 32}, rng)),
                      std::invalid_argument);
}

TEST_CASE("constant-color images give identical region features") {
    Rng rng(82);
    DamsmImageEncoder enc(16, 8, rng);
    Tensor img = Tensor::zeros({1, 3, 16, 16});
    for (std::size_t i = 0; i < 256; ++i) img.data()[i] = 0.3;
    for (std::size_t i = 256; i < 512; ++i) img.data()[i] = -0.2;
    for (std::size_t i = 512; i < 768; ++i) img.data()[i] = 0.9;
    auto feats = enc.forward(img);
    const std::size_t cols = enc.region_count();
    for (std::size_t ch = 0; ch < 8; ++ch)
        for (std::size_t j = 1; j < cols; ++j)
            REQUIRE(feats.regions.at(ch * cols + j) ==
                    Catch::Approx(feats.regions.at(ch * cols)).margin(1e-12));
}

TEST_CASE("gradient flows through the image encoder") {
    Rng rng(83);
    DamsmImageEncoder enc(8, 4, rng);
    Tensor img = oracles::random_tensor({1, 3, 8, 8}, rng, 0.7, true);
    auto res = gradcheck::check({img, enc.w_region, enc.w_global}, [&] {
        auto f = enc.forward(img);
        return add(gradcheck::project(f.regions), gradcheck::project(f.global_vec));
    });
    REQUIRE(res.max_rel_error < 1e-4);
}
