#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cagan/rng.hpp"

namespace cagan {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the differentiation graph. Values are immutable after the
// op that created them; only grad accumulates.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until touched by backward
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward;  // pushes this->grad into parents

    std::size_t size() const { return value.size(); }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

// Tape recording is on unless a NoGradGuard is live on this thread.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = std::make_shared<detail::Node>();
        n->value.assign(numel(shape), 0.0);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor full(Shape shape, double v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.node_->value.begin(), t.node_->value.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return full({1}, v); }

    static Tensor from_vector(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (numel(shape) != data.size())
            throw std::invalid_argument("tensor: data length does not match shape " + shape_str(shape));
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    // Trainable leaf filled with scaled normals.
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = true) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (double& v : t.node_->value) v = stddev * rng.normal();
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& values() const { return node_->value; }
    std::vector<double>& mutable_values() { return node_->value; }
    const double* data() const { return node_->value.data(); }
    double* data() { return node_->value.data(); }

    double item() const {
        if (size() != 1) throw std::invalid_argument("item: tensor is not scalar");
        return node_->value[0];
    }
    double at(std::size_t i) const { return node_->value[i]; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const { return node_->grad; }
    std::vector<double>& mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    // Same storage, severed from the graph.
    Tensor detach() const {
        auto n = std::make_shared<detail::Node>();
        n->shape = node_->shape;
        n->value = node_->value;
        return Tensor(std::move(n));
    }

    detail::NodePtr node() const { return node_; }

private:
    detail::NodePtr node_;
};

namespace detail {

// Builds an op node. The forward value must already be computed; `backward`
// sees the finished node and accumulates into parents that require grad.
inline Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                      std::function<void(Node&)> backward) {
    if (numel(shape) != value.size())
        throw std::logic_error("make_op: value length does not match shape");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (grad_mode()) {
        bool needs = false;
        for (const Tensor& t : inputs) needs = needs || t.requires_grad();
        if (needs) {
            n->requires_grad = true;
            n->parents.reserve(inputs.size());
            for (const Tensor& t : inputs) n->parents.push_back(t.node());
            n->backward = std::move(backward);
        }
    }
    return Tensor(std::move(n));
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Topological order guarantees each
// node's backward runs exactly once, after all of its consumers.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!loss.requires_grad()) return;

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward) {
            n->ensure_grad();
            n->backward(*n);
        }
    }
}

}  // namespace cagan
