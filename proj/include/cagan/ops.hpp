#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "cagan/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cagan {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline std::vector<double>& grad_of(const Tensor& t) {
    t.node()->ensure_grad();
    return t.node()->grad;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

inline double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    return detail::make_op(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& self) {
        if (a.requires_grad()) {
            auto& ga = detail::grad_of(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
        }
        if (b.requires_grad()) {
            auto& gb = detail::grad_of(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    return detail::make_op(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& self) {
        if (a.requires_grad()) {
            auto& ga = detail::grad_of(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
        }
        if (b.requires_grad()) {
            auto& gb = detail::grad_of(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    return detail::make_op(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& self) {
        if (a.requires_grad()) {
            auto& ga = detail::grad_of(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * b.at(i);
        }
        if (b.requires_grad()) {
            auto& gb = detail::grad_of(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * a.at(i);
        }
    });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) / b.at(i);
    return detail::make_op(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& self) {
        if (a.requires_grad()) {
            auto& ga = detail::grad_of(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] / b.at(i);
        }
        if (b.requires_grad()) {
            auto& gb = detail::grad_of(b);
            for (std::size_t i = 0; i < gb.size(); ++i)
                gb[i] -= self.grad[i] * a.at(i) / (b.at(i) * b.at(i));
        }
    });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * c;
    return detail::make_op(a.shape(), std::move(out), {a}, [a, c](detail::Node& self) {
        if (!a.requires_grad()) return;
        auto& ga = detail::grad_of(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * c;
    });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + c;
    return detail::make_op(a.shape(), std::move(out), {a}, [a](detail::Node& self) {
        if (!a.requires_grad()) return;
        auto& ga = detail::grad_of(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// unary maps

namespace detail {

// y = f(x), dx += df(x, y) * g
template <typename F, typename DF>
Tensor unary_op(const Tensor& a, F f, DF df) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.at(i));
    return make_op(a.shape(), std::move(out), {a}, [a, df](Node& self) {
        if (!a.requires_grad()) return;
        auto& ga = grad_of(a);
        for (std::size_t i = 0; i < ga.size(); ++i)
            ga[i] += self.grad[i] * df(a.at(i), self.value[i]);
    });
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor leaky_relu(const Tensor& a, double slope = 0.2) {
    return detail::unary_op(
        a, [slope](double x) { return x > 0.0 ? x : slope * x; },
        [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return detail::stable_sigmoid(x); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh_t(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

inline Tensor exp_t(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::exp(x); },
        [](double, double y) { return y; });
}

inline Tensor log_t(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::log(x); },
        [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt_t(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

// log(1 + e^x), evaluated without overflow
inline Tensor softplus(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
        [](double x, double) { return detail::stable_sigmoid(x); });
}

// max(x, c); gradient passes where x > c
inline Tensor clamp_min(const Tensor& a, double c) {
    return detail::unary_op(
        a, [c](double x) { return x > c ? x : c; },
        [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.at(i);
    return detail::make_op({1}, {acc}, {a}, [a](detail::Node& self) {
        if (!a.requires_grad()) return;
        auto& ga = detail::grad_of(a);
        const double g = self.grad[0];
        for (double& v : ga) v += g;
    });
}

inline Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.at(i);
    return detail::make_op({1}, {acc * inv}, {a}, [a, inv](detail::Node& self) {
        if (!a.requires_grad()) return;
        auto& ga = detail::grad_of(a);
        const double g = self.grad[0] * inv;
        for (double& v : ga) v += g;
    });
}

inline Tensor add_all(const std::vector<Tensor>& ts) {
    if (ts.empty()) throw std::invalid_argument("add_all: empty list");
    Tensor acc = ts[0];
    for (std::size_t i = 1; i < ts.size(); ++i) acc = add(acc, ts[i]);
    return acc;
}

// ---------------------------------------------------------------------------
// shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw std::invalid_argument("reshape: element count mismatch " + shape_str(a.shape()) +
                                    " -> " + shape_str(shape));
    return detail::make_op(std::move(shape), a.values(), {a}, [a](detail::Node& self) {
        if (!a.requires_grad()) return;
        auto& ga = detail::grad_of(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    });
}

inline Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose2d: rank-2 tensor required");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.at(i * n + j);
    return detail::make_op({n, m}, std::move(out), {a}, [a, m, n](detail::Node& self) {
        if (!a.requires_grad()) return;
        auto& ga = detail::grad_of(a);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
    });
}

inline Tensor concat(const std::vector<Tensor>& ts, std::size_t axis) {
    if (ts.empty()) throw std::invalid_argument("concat: empty list");
    const Shape& base = ts[0].shape();
    if (axis >= base.size()) throw std::invalid_argument("concat: axis out of range");
    Shape out_shape = base;
    out_shape[axis] = 0;
    for (const Tensor& t : ts) {
        if (t.rank() != base.size()) throw std::invalid_argument("concat: rank mismatch");
        for (std::size_t d = 0; d < base.size(); ++d)
            if (d != axis && t.dim(d) != base[d])
                throw std::invalid_argument("concat: shape mismatch off the concat axis");
        out_shape[axis] += t.dim(axis);
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= base[d];
    for (std::size_t d = axis + 1; d < base.size(); ++d) inner *= base[d];

    std::vector<double> out(numel(out_shape));
    const std::size_t out_block = out_shape[axis] * inner;
    std::size_t offset = 0;
    for (const Tensor& t : ts) {
        const std::size_t blk = t.dim(axis) * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(t.data() + o * blk, blk, out.data() + o * out_block + offset);
        offset += blk;
    }
    std::vector<Tensor> inputs = ts;
    return detail::make_op(out_shape, std::move(out), inputs,
                           [inputs, outer, inner, out_block](detail::Node& self) {
                               std::size_t offset = 0;
                               for (const Tensor& t : inputs) {
                                   const std::size_t tblk = t.size() / outer;
                                   if (t.requires_grad()) {
                                       auto& gt = detail::grad_of(t);
                                       for (std::size_t o = 0; o < outer; ++o)
                                           for (std::size_t i = 0; i < tblk; ++i)
                                               gt[o * tblk + i] += self.grad[o * out_block + offset + i];
                                   }
                                   offset += tblk;
                               }
                               (void)inner;
                           });
}

// contiguous column range of a matrix: x[m, c0:c1]
inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
    if (a.rank() != 2) throw std::invalid_argument("slice_cols: rank-2 tensor required");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (c0 >= c1 || c1 > n) throw std::invalid_argument("slice_cols: bad column range");
    const std::size_t w = c1 - c0;
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(a.data() + i * n + c0, w, out.data() + i * w);
    return detail::make_op({m, w}, std::move(out), {a}, [a, m, n, c0, w](detail::Node& self) {
        if (!a.requires_grad()) return;
        auto& ga = detail::grad_of(a);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) ga[i * n + c0 + j] += self.grad[i * w + j];
    });
}

// x[0] of a batched tensor; gradient scatters back into slot `index`.
inline Tensor slice0(const Tensor& a, std::size_t index) {
    if (a.rank() < 1 || index >= a.dim(0)) throw std::invalid_argument("slice0: index out of range");
    Shape out_shape(a.shape().begin() + 1, a.shape().end());
    if (out_shape.empty()) out_shape = {1};
    const std::size_t blk = numel(out_shape);
    std::vector<double> out(a.data() + index * blk, a.data() + (index + 1) * blk);
    return detail::make_op(out_shape, std::move(out), {a}, [a, index, blk](detail::Node& self) {
        if (!a.requires_grad()) return;
        auto& ga = detail::grad_of(a);
        for (std::size_t i = 0; i < blk; ++i) ga[index * blk + i] += self.grad[i];
    });
}

// [N,C] -> [N,C,H,W] by repetition; gradient sums over the spatial grid.
inline Tensor broadcast_spatial(const Tensor& a, std::size_t h, std::size_t w) {
    if (a.rank() != 2) throw std::invalid_argument("broadcast_spatial: rank-2 input required");
    const std::size_t n = a.dim(0), c = a.dim(1), hw = h * w;
    std::vector<double> out(n * c * hw);
    for (std::size_t i = 0; i < n * c; ++i)
        std::fill_n(out.data() + i * hw, hw, a.at(i));
    return detail::make_op({n, c, h, w}, std::move(out), {a}, [a, hw](detail::Node& self) {
        if (!a.requires_grad()) return;
        auto& ga = detail::grad_of(a);
        for (std::size_t i = 0; i < ga.size(); ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < hw; ++j) acc += self.grad[i * hw + j];
            ga[i] += acc;
        }
    });
}

// ---------------------------------------------------------------------------
// dense linear algebra (Eigen-backed kernels)

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul: rank-2 tensors required");
    if (a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: inner dimensions disagree " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n);
    {
        detail::ConstMap A(a.data(), m, k), B(b.data(), k, n);
        detail::MutMap C(out.data(), m, n);
        C.noalias() = A * B;
    }
    return detail::make_op({m, n}, std::move(out), {a, b}, [a, b, m, k, n](detail::Node& self) {
        detail::ConstMap G(self.grad.data(), m, n);
        if (a.requires_grad()) {
            detail::ConstMap B(b.data(), k, n);
            detail::MutMap GA(detail::grad_of(a).data(), m, k);
            GA.noalias() += G * B.transpose();
        }
        if (b.requires_grad()) {
            detail::ConstMap A(a.data(), m, k);
            detail::MutMap GB(detail::grad_of(b).data(), k, n);
            GB.noalias() += A.transpose() * G;
        }
    });
}

// Fully connected layer layout: x[B,in] * W[out,in]^T -> [B,out]
inline Tensor linear(const Tensor& x, const Tensor& w) {
    if (x.rank() != 2 || w.rank() != 2)
        throw std::invalid_argument("linear: rank-2 tensors required");
    if (x.dim(1) != w.dim(1))
        throw std::invalid_argument("linear: feature dimensions disagree " + shape_str(x.shape()) +
                                    " vs " + shape_str(w.shape()));
    const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
    std::vector<double> out(batch * out_dim);
    {
        detail::ConstMap X(x.data(), batch, in), W(w.data(), out_dim, in);
        detail::MutMap Y(out.data(), batch, out_dim);
        Y.noalias() = X * W.transpose();
    }
    return detail::make_op({batch, out_dim}, std::move(out), {x, w},
                           [x, w, batch, in, out_dim](detail::Node& self) {
                               detail::ConstMap G(self.grad.data(), batch, out_dim);
                               if (x.requires_grad()) {
                                   detail::ConstMap W(w.data(), out_dim, in);
                                   detail::MutMap GX(detail::grad_of(x).data(), batch, in);
                                   GX.noalias() += G * W;
                               }
                               if (w.requires_grad()) {
                                   detail::ConstMap X(x.data(), batch, in);
                                   detail::MutMap GW(detail::grad_of(w).data(), out_dim, in);
                                   GW.noalias() += G.transpose() * X;
                               }
                           });
}

inline Tensor add_row_bias(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(1))
        throw std::invalid_argument("add_row_bias: want x[B,F] and b[F]");
    const std::size_t batch = x.dim(0), f = x.dim(1);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j = 0; j < f; ++j) out[i * f + j] = x.at(i * f + j) + b.at(j);
    return detail::make_op(x.shape(), std::move(out), {x, b}, [x, b, batch, f](detail::Node& self) {
        if (x.requires_grad()) {
            auto& gx = detail::grad_of(x);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
        }
        if (b.requires_grad()) {
            auto& gb = detail::grad_of(b);
            for (std::size_t i = 0; i < batch; ++i)
                for (std::size_t j = 0; j < f; ++j) gb[j] += self.grad[i * f + j];
        }
    });
}

// x / s with a one-element divisor participating in the graph
inline Tensor div_by_scalar_t(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) throw std::invalid_argument("div_by_scalar_t: divisor must be scalar");
    const double sv = s.at(0);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) / sv;
    return detail::make_op(x.shape(), std::move(out), {x, s}, [x, s, sv](detail::Node& self) {
        if (x.requires_grad()) {
            auto& gx = detail::grad_of(x);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] / sv;
        }
        if (s.requires_grad()) {
            auto& gs = detail::grad_of(s);
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * self.value[i];
            gs[0] -= acc / sv;
        }
    });
}

// ---------------------------------------------------------------------------
// softmax

inline Tensor softmax(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank()) throw std::invalid_argument("softmax: axis out of range");
    const std::size_t len = a.dim(axis);
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
    for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);

    std::vector<double> out(a.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * len * inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, a.at(base + j * inner));
            double z = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(a.at(base + j * inner) - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
        }
    }
    return detail::make_op(a.shape(), std::move(out), {a},
                           [a, outer, inner, len](detail::Node& self) {
                               if (!a.requires_grad()) return;
                               auto& ga = detail::grad_of(a);
                               for (std::size_t o = 0; o < outer; ++o) {
                                   for (std::size_t i = 0; i < inner; ++i) {
                                       const std::size_t base = o * len * inner + i;
                                       double dot = 0.0;
                                       for (std::size_t j = 0; j < len; ++j)
                                           dot += self.grad[base + j * inner] * self.value[base + j * inner];
                                       for (std::size_t j = 0; j < len; ++j) {
                                           const std::size_t k = base + j * inner;
                                           ga[k] += self.value[k] * (self.grad[k] - dot);
                                       }
                                   }
                               }
                           });
}

// Softmax over the last axis restricted to unmasked entries. Masked entries
// come out exactly 0; a fully masked row comes out all-zero.
inline Tensor masked_softmax_last(const Tensor& a, const std::vector<std::uint8_t>& mask) {
    if (a.rank() < 1) throw std::invalid_argument("masked_softmax_last: rank >= 1 required");
    const std::size_t len = a.dim(a.rank() - 1);
    if (mask.size() != len) throw std::invalid_argument("masked_softmax_last: mask length mismatch");
    const std::size_t rows = a.size() / len;

    std::vector<double> out(a.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * len;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < len; ++j)
            if (mask[j]) mx = std::max(mx, a.at(base + j));
        if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked row
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
            if (!mask[j]) continue;
            const double e = std::exp(a.at(base + j) - mx);
            out[base + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < len; ++j)
            if (mask[j]) out[base + j] /= z;
    }
    return detail::make_op(a.shape(), std::move(out), {a}, [a, rows, len](detail::Node& self) {
        if (!a.requires_grad()) return;
        auto& ga = detail::grad_of(a);
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t base = r * len;
            double dot = 0.0;
            for (std::size_t j = 0; j < len; ++j) dot += self.grad[base + j] * self.value[base + j];
            for (std::size_t j = 0; j < len; ++j) {
                const std::size_t k = base + j;
                ga[k] += self.value[k] * (self.grad[k] - dot);  // zero rows stay zero
            }
        }
    });
}

// ---------------------------------------------------------------------------
// convolution and friends (NCHW)

namespace detail {

inline void im2col(const double* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                   std::size_t kw, std::size_t stride, std::size_t pad, std::size_t OH,
                   std::size_t OW, double* col) {
    // col is [C*kh*kw, OH*OW]
    const std::size_t ohw = OH * OW;
    std::size_t row = 0;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj, ++row) {
                double* dst = col + row * ohw;
                for (std::size_t oh = 0; oh < OH; ++oh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + ki) -
                                              static_cast<std::ptrdiff_t>(pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) {
                        std::fill_n(dst + oh * OW, OW, 0.0);
                        continue;
                    }
                    const double* src = x + (c * H + static_cast<std::size_t>(ih)) * W;
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + kj) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        dst[oh * OW + ow] =
                            (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) ? 0.0 : src[iw];
                    }
                }
            }
        }
    }
}

inline void col2im_add(const double* col, std::size_t C, std::size_t H, std::size_t W,
                       std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                       std::size_t OH, std::size_t OW, double* x) {
    const std::size_t ohw = OH * OW;
    std::size_t row = 0;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj, ++row) {
                const double* src = col + row * ohw;
                for (std::size_t oh = 0; oh < OH; ++oh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + ki) -
                                              static_cast<std::ptrdiff_t>(pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                    double* dst = x + (c * H + static_cast<std::size_t>(ih)) * W;
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + kj) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(W))
                            dst[iw] += src[oh * OW + ow];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// Cross-correlation of x[N,C,H,W] with w[Cout,C,kh,kw]. Odd kernels only;
// stride=1 with pad=(k-1)/2 preserves the spatial size.
inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1,
                     std::size_t pad = 0) {
    if (x.rank() != 4 || w.rank() != 4) throw std::invalid_argument("conv2d: rank-4 tensors required");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != C)
        throw std::invalid_argument("conv2d: channel mismatch, input has " + std::to_string(C) +
                                    ", kernel expects " + std::to_string(w.dim(1)));
    if (kh % 2 == 0 || kw % 2 == 0) throw std::invalid_argument("conv2d: kernel sides must be odd");
    if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
    if (H + 2 * pad < kh || W + 2 * pad < kw)
        throw std::invalid_argument("conv2d: kernel larger than padded input");
    const std::size_t OH = (H + 2 * pad - kh) / stride + 1;
    const std::size_t OW = (W + 2 * pad - kw) / stride + 1;
    const std::size_t K = C * kh * kw, OHW = OH * OW;

    std::vector<double> out(N * Co * OHW);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(N); ++n) {
        std::vector<double> col(K * OHW);
        detail::im2col(x.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW, col.data());
        detail::ConstMap Wm(w.data(), Co, K), Cm(col.data(), K, OHW);
        detail::MutMap Om(out.data() + n * Co * OHW, Co, OHW);
        Om.noalias() = Wm * Cm;
    }

    return detail::make_op(
        {N, Co, OH, OW}, std::move(out), {x, w},
        [x, w, N, C, H, W, Co, kh, kw, stride, pad, OH, OW, K, OHW](detail::Node& self) {
            const bool need_x = x.requires_grad();
            const bool need_w = w.requires_grad();
            std::vector<double> dw_per_sample;
            if (need_w) dw_per_sample.assign(N * Co * K, 0.0);
            double* gx = nullptr;
            if (need_x) gx = detail::grad_of(x).data();

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(N); ++n) {
                std::vector<double> col(K * OHW);
                detail::im2col(x.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW,
                               col.data());
                detail::ConstMap G(self.grad.data() + n * Co * OHW, Co, OHW);
                if (need_w) {
                    detail::ConstMap Cm(col.data(), K, OHW);
                    detail::MutMap Dw(dw_per_sample.data() + n * Co * K, Co, K);
                    Dw.noalias() = G * Cm.transpose();
                }
                if (need_x) {
                    std::vector<double> dcol(K * OHW);
                    detail::ConstMap Wm(w.data(), Co, K);
                    detail::MutMap Dc(dcol.data(), K, OHW);
                    Dc.noalias() = Wm.transpose() * G;
                    detail::col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                                       gx + n * C * H * W);
                }
            }
            if (need_w) {
                // fixed-order reduction keeps results thread-count independent
                auto& gw = detail::grad_of(w);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < Co * K; ++i) gw[i] += dw_per_sample[n * Co * K + i];
            }
        });
}

// Edge-replicating spatial pad; keeps constant inputs constant under
// convolution, unlike zero padding.
inline Tensor pad_replicate(const Tensor& x, std::size_t p) {
    if (x.rank() != 4) throw std::invalid_argument("pad_replicate: rank-4 tensor required");
    if (p == 0) return x;
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t OH = H + 2 * p, OW = W + 2 * p;
    auto clampi = [](std::ptrdiff_t v, std::ptrdiff_t hi) {
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, hi));
    };
    std::vector<double> out(N * C * OH * OW);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const double* src = x.data() + nc * H * W;
        double* dst = out.data() + nc * OH * OW;
        for (std::size_t oh = 0; oh < OH; ++oh) {
            const std::size_t ih = clampi(static_cast<std::ptrdiff_t>(oh) - static_cast<std::ptrdiff_t>(p), H - 1);
            for (std::size_t ow = 0; ow < OW; ++ow) {
                const std::size_t iw = clampi(static_cast<std::ptrdiff_t>(ow) - static_cast<std::ptrdiff_t>(p), W - 1);
                dst[oh * OW + ow] = src[ih * W + iw];
            }
        }
    }
    return detail::make_op({N, C, OH, OW}, std::move(out), {x},
                           [x, N, C, H, W, OH, OW, p](detail::Node& self) {
                               if (!x.requires_grad()) return;
                               auto clampi = [](std::ptrdiff_t v, std::ptrdiff_t hi) {
                                   return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, hi));
                               };
                               auto& gx = detail::grad_of(x);
                               for (std::size_t nc = 0; nc < N * C; ++nc) {
                                   const double* g = self.grad.data() + nc * OH * OW;
                                   double* dst = gx.data() + nc * H * W;
                                   for (std::size_t oh = 0; oh < OH; ++oh) {
                                       const std::size_t ih = clampi(static_cast<std::ptrdiff_t>(oh) - static_cast<std::ptrdiff_t>(p), H - 1);
                                       for (std::size_t ow = 0; ow < OW; ++ow) {
                                           const std::size_t iw = clampi(static_cast<std::ptrdiff_t>(ow) - static_cast<std::ptrdiff_t>(p), W - 1);
                                           dst[ih * W + iw] += g[oh * OW + ow];
                                       }
                                   }
                               }
                           });
}

inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    if (x.rank() != 4 || b.rank() != 1 || b.dim(0) != x.dim(1))
        throw std::invalid_argument("add_channel_bias: want x[N,C,H,W] and b[C]");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<double> out(x.size());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const double bv = b.at(c);
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) out[base + i] = x.at(base + i) + bv;
        }
    return detail::make_op(x.shape(), std::move(out), {x, b}, [x, b, N, C, HW](detail::Node& self) {
        if (x.requires_grad()) {
            auto& gx = detail::grad_of(x);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
        }
        if (b.requires_grad()) {
            auto& gb = detail::grad_of(b);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t base = (n * C + c) * HW;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < HW; ++i) acc += self.grad[base + i];
                    gb[c] += acc;
                }
        }
    });
}

inline Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
    if (x.rank() != 4) throw std::invalid_argument("upsample_nearest: rank-4 tensor required");
    if (factor == 0) throw std::invalid_argument("upsample_nearest: factor must be positive");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t OH = H * factor, OW = W * factor;
    std::vector<double> out(N * C * OH * OW);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const double* src = x.data() + nc * H * W;
        double* dst = out.data() + nc * OH * OW;
        for (std::size_t oh = 0; oh < OH; ++oh)
            for (std::size_t ow = 0; ow < OW; ++ow)
                dst[oh * OW + ow] = src[(oh / factor) * W + ow / factor];
    }
    return detail::make_op({N, C, OH, OW}, std::move(out), {x},
                           [x, N, C, H, W, OH, OW, factor](detail::Node& self) {
                               if (!x.requires_grad()) return;
                               auto& gx = detail::grad_of(x);
                               for (std::size_t nc = 0; nc < N * C; ++nc) {
                                   const double* g = self.grad.data() + nc * OH * OW;
                                   double* dst = gx.data() + nc * H * W;
                                   for (std::size_t oh = 0; oh < OH; ++oh)
                                       for (std::size_t ow = 0; ow < OW; ++ow)
                                           dst[(oh / factor) * W + ow / factor] += g[oh * OW + ow];
                               }
                           });
}

// squeeze step of the SE block: [N,C,H,W] -> [N,C] spatial means
inline Tensor mean_pool_spatial(const Tensor& x) {
    if (x.rank() != 4) throw std::invalid_argument("mean_pool_spatial: rank-4 tensor required");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const double inv = 1.0 / static_cast<double>(HW);
    std::vector<double> out(N * C);
    for (std::size_t i = 0; i < N * C; ++i) {
        double acc = 0.0;
        const double* src = x.data() + i * HW;
        for (std::size_t j = 0; j < HW; ++j) acc += src[j];
        out[i] = acc * inv;
    }
    return detail::make_op({N, C}, std::move(out), {x}, [x, HW, inv](detail::Node& self) {
        if (!x.requires_grad()) return;
        auto& gx = detail::grad_of(x);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double g = self.grad[i] * inv;
            for (std::size_t j = 0; j < HW; ++j) gx[i * HW + j] += g;
        }
    });
}

// per-sample, per-channel rescale: out[n,c,:,:] = x[n,c,:,:] * s[n,c]
inline Tensor scale_channels(const Tensor& x, const Tensor& s) {
    if (x.rank() != 4 || s.rank() != 2 || s.dim(0) != x.dim(0) || s.dim(1) != x.dim(1))
        throw std::invalid_argument("scale_channels: want x[N,C,H,W] and s[N,C]");
    const std::size_t NC = s.size(), HW = x.dim(2) * x.dim(3);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < NC; ++i) {
        const double sv = s.at(i);
        for (std::size_t j = 0; j < HW; ++j) out[i * HW + j] = x.at(i * HW + j) * sv;
    }
    return detail::make_op(x.shape(), std::move(out), {x, s}, [x, s, NC, HW](detail::Node& self) {
        if (x.requires_grad()) {
            auto& gx = detail::grad_of(x);
            for (std::size_t i = 0; i < NC; ++i) {
                const double sv = s.at(i);
                for (std::size_t j = 0; j < HW; ++j) gx[i * HW + j] += self.grad[i * HW + j] * sv;
            }
        }
        if (s.requires_grad()) {
            auto& gs = detail::grad_of(s);
            for (std::size_t i = 0; i < NC; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < HW; ++j) acc += self.grad[i * HW + j] * x.at(i * HW + j);
                gs[i] += acc;
            }
        }
    });
}

// out[n,c,:,:] = x[n,c,:,:] * gamma[c] + beta[c]
inline Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    if (x.rank() != 4 || gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != x.dim(1) ||
        beta.dim(0) != x.dim(1))
        throw std::invalid_argument("channel_affine: want x[N,C,H,W], gamma[C], beta[C]");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<double> out(x.size());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const double gv = gamma.at(c), bv = beta.at(c);
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t j = 0; j < HW; ++j) out[base + j] = x.at(base + j) * gv + bv;
        }
    return detail::make_op(x.shape(), std::move(out), {x, gamma, beta},
                           [x, gamma, beta, N, C, HW](detail::Node& self) {
                               if (x.requires_grad()) {
                                   auto& gx = detail::grad_of(x);
                                   for (std::size_t n = 0; n < N; ++n)
                                       for (std::size_t c = 0; c < C; ++c) {
                                           const double gv = gamma.at(c);
                                           const std::size_t base = (n * C + c) * HW;
                                           for (std::size_t j = 0; j < HW; ++j)
                                               gx[base + j] += self.grad[base + j] * gv;
                                       }
                               }
                               if (gamma.requires_grad()) {
                                   auto& gg = detail::grad_of(gamma);
                                   for (std::size_t n = 0; n < N; ++n)
                                       for (std::size_t c = 0; c < C; ++c) {
                                           const std::size_t base = (n * C + c) * HW;
                                           double acc = 0.0;
                                           for (std::size_t j = 0; j < HW; ++j)
                                               acc += self.grad[base + j] * x.at(base + j);
                                           gg[c] += acc;
                                       }
                               }
                               if (beta.requires_grad()) {
                                   auto& gb = detail::grad_of(beta);
                                   for (std::size_t n = 0; n < N; ++n)
                                       for (std::size_t c = 0; c < C; ++c) {
                                           const std::size_t base = (n * C + c) * HW;
                                           double acc = 0.0;
                                           for (std::size_t j = 0; j < HW; ++j) acc += self.grad[base + j];
                                           gb[c] += acc;
                                       }
                               }
                           });
}

// Per (n,c) spatial standardization, population variance.
inline Tensor instance_norm(const Tensor& x, double eps = 1e-5) {
    if (x.rank() != 4) throw std::invalid_argument("instance_norm: rank-4 tensor required");
    const std::size_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
    const double inv_n = 1.0 / static_cast<double>(HW);
    std::vector<double> out(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(NC);
    for (std::size_t i = 0; i < NC; ++i) {
        const double* src = x.data() + i * HW;
        double m = 0.0;
        for (std::size_t j = 0; j < HW; ++j) m += src[j];
        m *= inv_n;
        double v = 0.0;
        for (std::size_t j = 0; j < HW; ++j) {
            const double d = src[j] - m;
            v += d * d;
        }
        v *= inv_n;
        const double is = 1.0 / std::sqrt(v + eps);
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < HW; ++j) out[i * HW + j] = (src[j] - m) * is;
    }
    return detail::make_op(x.shape(), std::move(out), {x},
                           [x, NC, HW, inv_n, inv_std](detail::Node& self) {
                               if (!x.requires_grad()) return;
                               auto& gx = detail::grad_of(x);
                               for (std::size_t i = 0; i < NC; ++i) {
                                   const double* g = self.grad.data() + i * HW;
                                   const double* y = self.value.data() + i * HW;
                                   double gm = 0.0, gym = 0.0;
                                   for (std::size_t j = 0; j < HW; ++j) {
                                       gm += g[j];
                                       gym += g[j] * y[j];
                                   }
                                   gm *= inv_n;
                                   gym *= inv_n;
                                   const double is = (*inv_std)[i];
                                   for (std::size_t j = 0; j < HW; ++j)
                                       gx[i * HW + j] += is * (g[j] - gm - y[j] * gym);
                               }
                           });
}

// ---------------------------------------------------------------------------
// embedding

inline Tensor embed_row(const Tensor& table, std::size_t id) {
    if (table.rank() != 2) throw std::invalid_argument("embed_row: table must be [V,D]");
    if (id >= table.dim(0)) throw std::invalid_argument("embed_row: id out of range");
    const std::size_t d = table.dim(1);
    std::vector<double> out(table.data() + id * d, table.data() + (id + 1) * d);
    return detail::make_op({1, d}, std::move(out), {table}, [table, id, d](detail::Node& self) {
        if (!table.requires_grad()) return;
        auto& gt = detail::grad_of(table);
        for (std::size_t j = 0; j < d; ++j) gt[id * d + j] += self.grad[j];
    });
}

// ---------------------------------------------------------------------------
// local self-attention over k x k neighborhoods

// For each pixel: softmax over scaled query/key dot products within its
// neighborhood, convex combination of value vectors. Neighborhoods truncate
// at the borders (no padding); dot products scale by 1/sqrt(C').
inline Tensor local_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                              std::size_t extent) {
    if (q.rank() != 4) throw std::invalid_argument("local_attention: rank-4 tensors required");
    detail::check_same_shape(q, k, "local_attention(q,k)");
    detail::check_same_shape(q, v, "local_attention(q,v)");
    const std::size_t N = q.dim(0), C = q.dim(1), H = q.dim(2), W = q.dim(3);
    if (extent % 2 == 0) throw std::invalid_argument("local_attention: extent must be odd");
    if (extent > 2 * std::min(H, W) - 1)
        throw std::invalid_argument("local_attention: extent exceeds 2*min(H,W)-1");
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(extent / 2);
    const double scale = 1.0 / std::sqrt(static_cast<double>(C));
    const std::size_t HW = H * W;

    auto gather = [&](const Tensor& t, std::size_t n, std::size_t c, std::size_t y,
                      std::size_t x_) {
        return t.at(((n * C + c) * H + y) * W + x_);
    };

    std::vector<double> out(q.size(), 0.0);
    std::vector<double> scores(extent * extent);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < H; ++i) {
            for (std::size_t j = 0; j < W; ++j) {
                const std::ptrdiff_t a0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(i) - r);
                const std::ptrdiff_t a1 = std::min<std::ptrdiff_t>(H - 1, static_cast<std::ptrdiff_t>(i) + r);
                const std::ptrdiff_t b0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(j) - r);
                const std::ptrdiff_t b1 = std::min<std::ptrdiff_t>(W - 1, static_cast<std::ptrdiff_t>(j) + r);
                std::size_t m = 0;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::ptrdiff_t a = a0; a <= a1; ++a)
                    for (std::ptrdiff_t b = b0; b <= b1; ++b, ++m) {
                        double s = 0.0;
                        for (std::size_t c = 0; c < C; ++c)
                            s += gather(q, n, c, i, j) * gather(k, n, c, a, b);
                        scores[m] = s * scale;
                        mx = std::max(mx, scores[m]);
                    }
                double z = 0.0;
                for (std::size_t t = 0; t < m; ++t) {
                    scores[t] = std::exp(scores[t] - mx);
                    z += scores[t];
                }
                m = 0;
                for (std::ptrdiff_t a = a0; a <= a1; ++a)
                    for (std::ptrdiff_t b = b0; b <= b1; ++b, ++m) {
                        const double alpha = scores[m] / z;
                        for (std::size_t c = 0; c < C; ++c)
                            out[((n * C + c) * H + i) * W + j] += alpha * gather(v, n, c, a, b);
                    }
            }
        }
    }
    (void)HW;

    return detail::make_op(
        q.shape(), std::move(out), {q, k, v},
        [q, k, v, N, C, H, W, r, scale, extent](detail::Node& self) {
            const bool nq = q.requires_grad(), nk = k.requires_grad(), nv = v.requires_grad();
            if (!(nq || nk || nv)) return;
            auto idx = [&](std::size_t n, std::size_t c, std::size_t y, std::size_t x_) {
                return ((n * C + c) * H + y) * W + x_;
            };
            double* gq = nq ? detail::grad_of(q).data() : nullptr;
            double* gk = nk ? detail::grad_of(k).data() : nullptr;
            double* gv = nv ? detail::grad_of(v).data() : nullptr;
            std::vector<double> sc(extent * extent), alpha(extent * extent), dalpha(extent * extent);
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t i = 0; i < H; ++i) {
                    for (std::size_t j = 0; j < W; ++j) {
                        const std::ptrdiff_t a0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(i) - r);
                        const std::ptrdiff_t a1 = std::min<std::ptrdiff_t>(H - 1, static_cast<std::ptrdiff_t>(i) + r);
                        const std::ptrdiff_t b0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(j) - r);
                        const std::ptrdiff_t b1 = std::min<std::ptrdiff_t>(W - 1, static_cast<std::ptrdiff_t>(j) + r);
                        // recompute the softmax for this pixel
                        std::size_t m = 0;
                        double mx = -std::numeric_limits<double>::infinity();
                        for (std::ptrdiff_t a = a0; a <= a1; ++a)
                            for (std::ptrdiff_t b = b0; b <= b1; ++b, ++m) {
                                double s = 0.0;
                                for (std::size_t c = 0; c < C; ++c)
                                    s += q.at(idx(n, c, i, j)) * k.at(idx(n, c, a, b));
                                sc[m] = s * scale;
                                mx = std::max(mx, sc[m]);
                            }
                        const std::size_t count = m;
                        double z = 0.0;
                        for (std::size_t t = 0; t < count; ++t) {
                            alpha[t] = std::exp(sc[t] - mx);
                            z += alpha[t];
                        }
                        for (std::size_t t = 0; t < count; ++t) alpha[t] /= z;
                        // dalpha_m = dy . v_m, then softmax backward to ds
                        m = 0;
                        double dot = 0.0;
                        for (std::ptrdiff_t a = a0; a <= a1; ++a)
                            for (std::ptrdiff_t b = b0; b <= b1; ++b, ++m) {
                                double da = 0.0;
                                for (std::size_t c = 0; c < C; ++c)
                                    da += self.grad[idx(n, c, i, j)] * v.at(idx(n, c, a, b));
                                dalpha[m] = da;
                                dot += da * alpha[m];
                            }
                        m = 0;
                        for (std::ptrdiff_t a = a0; a <= a1; ++a)
                            for (std::ptrdiff_t b = b0; b <= b1; ++b, ++m) {
                                const double ds = alpha[m] * (dalpha[m] - dot) * scale;
                                if (nv) {
                                    for (std::size_t c = 0; c < C; ++c)
                                        gv[idx(n, c, a, b)] += alpha[m] * self.grad[idx(n, c, i, j)];
                                }
                                if (nq) {
                                    for (std::size_t c = 0; c < C; ++c)
                                        gq[idx(n, c, i, j)] += ds * k.at(idx(n, c, a, b));
                                }
                                if (nk) {
                                    for (std::size_t c = 0; c < C; ++c)
                                        gk[idx(n, c, a, b)] += ds * q.at(idx(n, c, i, j));
                                }
                            }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// classification losses

// mean over rows of -log softmax(logits)[label]
inline Tensor cross_entropy_logits(const Tensor& logits, const std::vector<std::size_t>& labels) {
    if (logits.rank() != 2 || labels.size() != logits.dim(0))
        throw std::invalid_argument("cross_entropy_logits: want logits[N,C] and N labels");
    const std::size_t N = logits.dim(0), C = logits.dim(1);
    auto probs = std::make_shared<std::vector<double>>(logits.size());
    double loss = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        if (labels[n] >= C) throw std::invalid_argument("cross_entropy_logits: label out of range");
        const double* row = logits.data() + n * C;
        double mx = row[0];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            (*probs)[n * C + c] = std::exp(row[c] - mx);
            z += (*probs)[n * C + c];
        }
        for (std::size_t c = 0; c < C; ++c) (*probs)[n * C + c] /= z;
        loss -= std::log((*probs)[n * C + labels[n]]);
    }
    loss /= static_cast<double>(N);
    return detail::make_op({1}, {loss}, {logits}, [logits, labels, probs, N, C](detail::Node& self) {
        if (!logits.requires_grad()) return;
        auto& gl = detail::grad_of(logits);
        const double g = self.grad[0] / static_cast<double>(N);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                gl[n * C + c] += g * ((*probs)[n * C + c] - (c == labels[n] ? 1.0 : 0.0));
    });
}

// ---------------------------------------------------------------------------
// non-differentiable image utilities

// Box-filter downsample by an integer factor; used to build the real-image
// pyramids the stage discriminators consume.
inline Tensor downsample_box(const Tensor& x, std::size_t factor) {
    if (x.rank() != 4) throw std::invalid_argument("downsample_box: rank-4 tensor required");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (factor == 0 || H % factor != 0 || W % factor != 0)
        throw std::invalid_argument("downsample_box: factor must divide the spatial size");
    const std::size_t OH = H / factor, OW = W / factor;
    const double inv = 1.0 / static_cast<double>(factor * factor);
    Tensor out = Tensor::zeros({N, C, OH, OW});
    double* dst = out.data();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const double* src = x.data() + nc * H * W;
        for (std::size_t oh = 0; oh < OH; ++oh)
            for (std::size_t ow = 0; ow < OW; ++ow) {
                double acc = 0.0;
                for (std::size_t a = 0; a < factor; ++a)
                    for (std::size_t b = 0; b < factor; ++b)
                        acc += src[(oh * factor + a) * W + ow * factor + b];
                dst[nc * OH * OW + oh * OW + ow] = acc * inv;
            }
    }
    return out;
}

}  // namespace cagan
