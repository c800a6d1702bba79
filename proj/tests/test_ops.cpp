#include <catch2/catch_amalgamated.hpp>

#include "cagan/ops.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace cagan;

// ---------------------------------------------------------------------------
// matmul

TEST_CASE("matmul identity and hand arithmetic") {
    Tensor eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
    Tensor r = matmul(eye, m);
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(r.at(i) == m.at(i));

    Tensor a = Tensor::from_vector({1, 2}, {1, 2});
    Tensor b = Tensor::from_vector({2, 1}, {3, 4});
    REQUIRE(matmul(a, b).item() == Catch::Approx(11.0));

    REQUIRE_THROWS_AS(matmul(a, Tensor::zeros({3, 1})), std::invalid_argument);
}

TEST_CASE("matmul agrees with the loop oracle") {
    Rng rng(21);
    Tensor a = oracles::random_tensor({5, 7}, rng);
    Tensor b = oracles::random_tensor({7, 4}, rng);
    Tensor got = matmul(a, b);
    Tensor want = oracles::matmul_ref(a, b);
    for (std::size_t i = 0; i < got.size(); ++i)
        REQUIRE(std::abs(got.at(i) - want.at(i)) < 1e-10);
}

TEST_CASE("matmul gradient of sum equals broadcast column sums") {
    // d sum(A B) / dA = rows of B summed, replicated over A's rows
    Rng rng(22);
    Tensor a = oracles::random_tensor({3, 4}, rng, 1.0, true);
    Tensor b = oracles::random_tensor({4, 2}, rng, 1.0, true);
    Tensor loss = sum(matmul(a, b));
    backward(loss);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) {
            double want = 0.0;
            for (std::size_t j = 0; j < 2; ++j) want += b.at(k * 2 + j);
            REQUIRE(a.grad()[i * 4 + k] == Catch::Approx(want).epsilon(1e-9));
        }
    auto res = gradcheck::check({a, b}, [&]() { return gradcheck::project(matmul(a, b)); });
    REQUIRE(res.max_rel_error < 1e-6);
}

// ---------------------------------------------------------------------------
// conv2d

TEST_CASE("conv2d identity kernel") {
    Rng rng(31);
    Tensor x = oracles::random_tensor({1, 1, 3, 3}, rng);
    Tensor w = Tensor::from_vector({1, 1, 1, 1}, {1.0});
    Tensor y = conv2d(x, w, 1, 0);
    for (std::size_t i = 0; i < 9; ++i) REQUIRE(y.at(i) == x.at(i));
}

TEST_CASE("conv2d all-ones overlap counting") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor y = conv2d(x, w, 1, 1);
    REQUIRE(y.at(4) == Catch::Approx(9.0));   // center
    REQUIRE(y.at(0) == Catch::Approx(4.0));   // corner
    REQUIRE(y.at(1) == Catch::Approx(6.0));   // edge
}

TEST_CASE("conv2d validates shapes") {
    REQUIRE_THROWS_AS(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), 1, 1),
                      std::invalid_argument);  // channel mismatch
    REQUIRE_THROWS_AS(conv2d(Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 1, 2, 2}), 1, 0),
                      std::invalid_argument);  // even kernel
}

TEST_CASE("conv2d agrees with the six-nested-loop oracle") {
    Rng rng(32);
    Tensor x = oracles::random_tensor({2, 3, 5, 5}, rng);
    Tensor w = oracles::random_tensor({4, 3, 3, 3}, rng);
    for (std::size_t stride : {std::size_t(1), std::size_t(2)}) {
        Tensor got = conv2d(x, w, stride, 1);
        Tensor want = oracles::conv2d_ref(x, w, stride, 1);
        REQUIRE(got.shape() == want.shape());
        for (std::size_t i = 0; i < got.size(); ++i)
            REQUIRE(std::abs(got.at(i) - want.at(i)) < 1e-10);
    }
}

TEST_CASE("conv2d gradients pass finite differences") {
    Rng rng(33);
    Tensor x = oracles::random_tensor({2, 2, 4, 4}, rng, 0.8, true);
    Tensor w = oracles::random_tensor({3, 2, 3, 3}, rng, 0.8, true);
    auto res = gradcheck::check({x, w}, [&]() { return gradcheck::project(conv2d(x, w, 1, 1)); });
    REQUIRE(res.max_rel_error < 1e-4);
    // strided case
    auto res2 = gradcheck::check({x, w}, [&]() { return gradcheck::project(conv2d(x, w, 2, 1)); });
    REQUIRE(res2.max_rel_error < 1e-4);
}

// ---------------------------------------------------------------------------
// softmax and friends

TEST_CASE("softmax symmetry, normalization, shift invariance") {
    Tensor x = Tensor::from_vector({2}, {0.0, 0.0});
    Tensor y = softmax(x, 0);
    REQUIRE(y.at(0) == Catch::Approx(0.5).margin(1e-12));
    REQUIRE(y.at(1) == Catch::Approx(0.5).margin(1e-12));

    Rng rng(41);
    Tensor m = oracles::random_tensor({5, 7}, rng, 3.0);
    Tensor sm = softmax(m, 1);
    for (std::size_t i = 0; i < 5; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < 7; ++j) {
            row += sm.at(i * 7 + j);
            REQUIRE(sm.at(i * 7 + j) >= 0.0);
        }
        REQUIRE(std::abs(row - 1.0) < 1e-12);
    }
    Tensor shifted = softmax(add_scalar(m, 17.5), 1);
    for (std::size_t i = 0; i < m.size(); ++i)
        REQUIRE(std::abs(shifted.at(i) - sm.at(i)) < 1e-12);

    REQUIRE_THROWS_AS(softmax(m, 2), std::invalid_argument);
}

TEST_CASE("softmax along a middle axis") {
    Rng rng(42);
    Tensor m = oracles::random_tensor({2, 3, 4}, rng, 2.0);
    Tensor sm = softmax(m, 1);
    for (std::size_t o = 0; o < 2; ++o)
        for (std::size_t in = 0; in < 4; ++in) {
            double acc = 0.0;
            for (std::size_t j = 0; j < 3; ++j) acc += sm.at(o * 12 + j * 4 + in);
            REQUIRE(std::abs(acc - 1.0) < 1e-12);
        }
}

TEST_CASE("masked softmax zeroes pads exactly and renormalizes") {
    Tensor x = Tensor::from_vector({2, 4}, {0.3, -1.0, 2.0, 9.9, 0.0, 0.0, 0.0, 9.9});
    std::vector<std::uint8_t> mask = {1, 1, 1, 0};
    Tensor y = masked_softmax_last(x, mask);
    for (std::size_t r = 0; r < 2; ++r) {
        REQUIRE(y.at(r * 4 + 3) == 0.0);  // exactly zero on the pad
        double row = 0.0;
        for (std::size_t j = 0; j < 3; ++j) row += y.at(r * 4 + j);
        REQUIRE(std::abs(row - 1.0) < 1e-12);
    }
    // fully masked row comes out all-zero rather than NaN
    Tensor z = masked_softmax_last(x, {0, 0, 0, 0});
    for (std::size_t i = 0; i < z.size(); ++i) REQUIRE(z.at(i) == 0.0);
}

TEST_CASE("elementwise trivia") {
    REQUIRE(sigmoid(Tensor::scalar(0.0)).item() == Catch::Approx(0.5).margin(1e-15));
    REQUIRE(relu(Tensor::scalar(-3.0)).item() == 0.0);
    REQUIRE(tanh_t(Tensor::scalar(0.0)).item() == 0.0);
    REQUIRE(softplus(Tensor::scalar(0.0)).item() == Catch::Approx(std::log(2.0)).margin(1e-15));
    REQUIRE(clamp_min(Tensor::scalar(-5.0), 1e-12).item() == 1e-12);
}

TEST_CASE("mean_pool_spatial hand example") {
    // 1x2x2x2 with channel values {1,2,3,4} and {5,6,7,8} -> [2.5, 6.5]
    Tensor x = Tensor::from_vector({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor y = mean_pool_spatial(x);
    REQUIRE(y.at(0) == Catch::Approx(2.5));
    REQUIRE(y.at(1) == Catch::Approx(6.5));
    Tensor want = oracles::mean_pool_ref(x);
    for (std::size_t i = 0; i < 2; ++i) REQUIRE(std::abs(y.at(i) - want.at(i)) < 1e-10);
}

TEST_CASE("upsample_nearest repeats blocks") {
    Tensor x = Tensor::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor y = upsample_nearest(x, 2);
    REQUIRE(y.shape() == Shape{1, 1, 4, 4});
    REQUIRE(y.at(0) == 1.0);
    REQUIRE(y.at(1) == 1.0);
    REQUIRE(y.at(2) == 2.0);
    REQUIRE(y.at(5) == 1.0);
    REQUIRE(y.at(15) == 4.0);
}

TEST_CASE("downsample_box averages blocks") {
    Tensor x = Tensor::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor y = downsample_box(x, 2);
    REQUIRE(y.size() == 1);
    REQUIRE(y.item() == Catch::Approx(2.5));
}

TEST_CASE("concat and slice round trip") {
    Tensor a = Tensor::from_vector({1, 2}, {1, 2});
    Tensor b = Tensor::from_vector({1, 2}, {3, 4});
    Tensor c = concat({a, b}, 0);
    REQUIRE(c.shape() == Shape{2, 2});
    REQUIRE(c.at(2) == 3.0);
    Tensor d = concat({a, b}, 1);
    REQUIRE(d.shape() == Shape{1, 4});
    REQUIRE(d.at(3) == 4.0);

    Tensor s = slice0(c, 1);
    REQUIRE(s.shape() == Shape{2});
    REQUIRE(s.at(0) == 3.0);

    Tensor cols = slice_cols(c, 1, 2);
    REQUIRE(cols.shape() == Shape{2, 1});
    REQUIRE(cols.at(0) == 2.0);
    REQUIRE(cols.at(1) == 4.0);
}

TEST_CASE("pad_replicate keeps constants constant") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 0.7);
    Tensor y = pad_replicate(x, 2);
    REQUIRE(y.shape() == Shape{1, 1, 7, 7});
    for (std::size_t i = 0; i < y.size(); ++i) REQUIRE(y.at(i) == 0.7);
}

// ---------------------------------------------------------------------------
// gradient integrity sweep over every differentiable op

TEST_CASE("finite differences: unary and reduction ops") {
    Rng rng(51);
    Tensor x = oracles::random_tensor({3, 4}, rng, 0.8, true);
    auto check = [&](const std::function<Tensor()>& f) {
        auto res = gradcheck::check({x}, f);
        REQUIRE(res.max_rel_error < 1e-4);
    };
    check([&] { return gradcheck::project(relu(x)); });
    check([&] { return gradcheck::project(leaky_relu(x)); });
    check([&] { return gradcheck::project(sigmoid(x)); });
    check([&] { return gradcheck::project(tanh_t(x)); });
    check([&] { return gradcheck::project(exp_t(x)); });
    check([&] { return gradcheck::project(softplus(x)); });
    check([&] { return gradcheck::project(clamp_min(x, 0.05)); });
    check([&] { return gradcheck::project(softmax(x, 1)); });
    check([&] { return gradcheck::project(reshape(x, {4, 3})); });
    check([&] { return gradcheck::project(transpose2d(x)); });
    check([&] { return mean(x); });
    check([&] { return sum(mul(x, x)); });

    Tensor pos = oracles::random_tensor({3, 3}, rng, 0.4, true);
    for (auto& v : pos.mutable_values()) v = std::abs(v) + 0.5;
    auto res = gradcheck::check({pos}, [&] { return gradcheck::project(log_t(pos)); });
    REQUIRE(res.max_rel_error < 1e-4);
    res = gradcheck::check({pos}, [&] { return gradcheck::project(sqrt_t(pos)); });
    REQUIRE(res.max_rel_error < 1e-4);
}

TEST_CASE("finite differences: binary and structural ops") {
    Rng rng(52);
    Tensor a = oracles::random_tensor({2, 3}, rng, 0.8, true);
    Tensor b = oracles::random_tensor({2, 3}, rng, 0.8, true);
    for (auto& v : b.mutable_values()) v += v > 0 ? 0.7 : -0.7;  // keep divisions tame
    auto check2 = [&](const std::function<Tensor()>& f) {
        auto res = gradcheck::check({a, b}, f);
        REQUIRE(res.max_rel_error < 1e-4);
    };
    check2([&] { return gradcheck::project(add(a, b)); });
    check2([&] { return gradcheck::project(sub(a, b)); });
    check2([&] { return gradcheck::project(mul(a, b)); });
    check2([&] { return gradcheck::project(div(a, b)); });
    check2([&] { return gradcheck::project(concat({a, b}, 0)); });
    check2([&] { return gradcheck::project(concat({a, b}, 1)); });

    Tensor s = Tensor::from_vector({1}, {1.7}, true);
    auto res = gradcheck::check({a, s}, [&] { return gradcheck::project(div_by_scalar_t(a, s)); });
    REQUIRE(res.max_rel_error < 1e-4);
}

TEST_CASE("finite differences: image ops") {
    Rng rng(53);
    Tensor x = oracles::random_tensor({2, 3, 4, 4}, rng, 0.8, true);
    Tensor gamma = oracles::random_tensor({3}, rng, 0.5, true);
    Tensor beta = oracles::random_tensor({3}, rng, 0.5, true);
    Tensor gate = oracles::random_tensor({2, 3}, rng, 0.5, true);
    Tensor bias = oracles::random_tensor({3}, rng, 0.5, true);

    auto check = [&](std::vector<Tensor> params, const std::function<Tensor()>& f) {
        auto res = gradcheck::check(std::move(params), f);
        REQUIRE(res.max_rel_error < 1e-4);
    };
    check({x}, [&] { return gradcheck::project(upsample_nearest(x, 2)); });
    check({x}, [&] { return gradcheck::project(mean_pool_spatial(x)); });
    check({x}, [&] { return gradcheck::project(pad_replicate(x, 1)); });
    check({x, gate}, [&] { return gradcheck::project(scale_channels(x, gate)); });
    check({x, gamma, beta}, [&] { return gradcheck::project(channel_affine(x, gamma, beta)); });
    check({x, bias}, [&] { return gradcheck::project(add_channel_bias(x, bias)); });
    check({x}, [&] { return gradcheck::project(instance_norm(x)); });
    check({gate}, [&] { return gradcheck::project(broadcast_spatial(gate, 3, 2)); });
}

TEST_CASE("finite differences: embedding, linear, cross entropy") {
    Rng rng(54);
    Tensor table = oracles::random_tensor({5, 4}, rng, 0.8, true);
    Tensor xrow = oracles::random_tensor({3, 4}, rng, 0.8, true);
    Tensor w = oracles::random_tensor({2, 4}, rng, 0.8, true);
    Tensor rb = oracles::random_tensor({2}, rng, 0.5, true);

    auto res = gradcheck::check({table}, [&] {
        return gradcheck::project(concat({embed_row(table, 1), embed_row(table, 3)}, 0));
    });
    REQUIRE(res.max_rel_error < 1e-4);

    res = gradcheck::check({xrow, w, rb},
                           [&] { return gradcheck::project(add_row_bias(linear(xrow, w), rb)); });
    REQUIRE(res.max_rel_error < 1e-4);

    Tensor logits = oracles::random_tensor({4, 5}, rng, 1.0, true);
    std::vector<std::size_t> labels = {0, 3, 2, 4};
    res = gradcheck::check({logits}, [&] { return cross_entropy_logits(logits, labels); });
    REQUIRE(res.max_rel_error < 1e-4);
}

TEST_CASE("masked softmax gradient") {
    Rng rng(55);
    Tensor x = oracles::random_tensor({3, 5}, rng, 1.0, true);
    std::vector<std::uint8_t> mask = {1, 1, 0, 1, 0};
    auto res =
        gradcheck::check({x}, [&] { return gradcheck::project(masked_softmax_last(x, mask)); });
    REQUIRE(res.max_rel_error < 1e-4);
}
