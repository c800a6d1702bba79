#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cagan/tensor.hpp"

namespace cagan {

// Ordered name -> tensor registry. Insertion order is the serialization
// order, so identical construction paths give identical checkpoints.
class NamedTensors {
public:
    void add(const std::string& name, Tensor t) {
        for (auto& [n, _] : entries_)
            if (n == name) throw std::invalid_argument("duplicate tensor name: " + name);
        entries_.emplace_back(name, std::move(t));
    }

    Tensor& get(const std::string& name) {
        for (auto& [n, t] : entries_)
            if (n == name) return t;
        throw std::out_of_range("no tensor named " + name);
    }

    bool contains(const std::string& name) const {
        for (auto& [n, _] : entries_)
            if (n == name) return true;
        return false;
    }

    std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    void zero_grads() {
        for (auto& [_, t] : entries_) t.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

struct AdamConfig {
    double lr = 0.0002;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are keyed by registry position,
// so the optimizer must always be stepped with the same parameter list.
class Adam {
public:
    Adam() = default;
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    void step(NamedTensors& params) {
        if (m_.empty()) init(params);
        if (m_.size() != params.size())
            throw std::invalid_argument("adam: parameter list changed size");
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        std::size_t i = 0;
        for (auto& [name, p] : params.entries()) {
            auto& m = m_[i];
            auto& v = v_[i];
            ++i;
            if (!p.has_grad()) continue;  // zero gradient: moments decay, no movement needed
            const auto& g = p.grad();
            if (g.size() != m.size())
                throw std::invalid_argument("adam: shape mismatch for " + name);
            auto& val = p.mutable_values();
            for (std::size_t j = 0; j < g.size(); ++j) {
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                val[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    const AdamConfig& config() const { return cfg_; }
    std::uint64_t steps() const { return t_; }

    // state access for checkpointing
    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }
    void restore_steps(std::uint64_t t) { t_ = t; }
    void init(NamedTensors& params) {
        m_.clear();
        v_.clear();
        for (auto& [_, p] : params.entries()) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

private:
    AdamConfig cfg_;
    std::uint64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace cagan
