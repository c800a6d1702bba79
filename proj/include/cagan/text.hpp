#pragma once

#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "cagan/ops.hpp"
#include "cagan/optim.hpp"
#include "cagan/tensor.hpp"

namespace cagan {

// Token ids 0 and 1 are reserved for padding and unknown words. Ids are
// assigned in first-seen corpus order, so the mapping is reproducible.
class Vocabulary {
public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kUnk = 1;

    std::size_t add(const std::string& token) {
        auto it = to_id_.find(token);
        if (it != to_id_.end()) return it->second;
        const std::size_t id = tokens_.size() + 2;
        to_id_.emplace(token, id);
        tokens_.push_back(token);
        return id;
    }

    std::size_t lookup(const std::string& token) const {
        auto it = to_id_.find(token);
        return it == to_id_.end() ? kUnk : it->second;
    }

    bool contains(const std::string& token) const { return to_id_.count(token) > 0; }

    const std::string& token(std::size_t id) const {
        if (id < 2 || id - 2 >= tokens_.size()) throw std::out_of_range("vocabulary: bad id");
        return tokens_[id - 2];
    }

    std::size_t size() const { return tokens_.size() + 2; }

    // One token per line, line number = id - 2.
    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw std::runtime_error("vocabulary: cannot write " + path);
        for (const auto& t : tokens_) os << t << '\n';
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("vocabulary: cannot open " + path);
        Vocabulary v;
        std::string line;
        while (std::getline(is, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (!line.empty()) v.add(line);
        }
        return v;
    }

private:
    std::unordered_map<std::string, std::size_t> to_id_;
    std::vector<std::string> tokens_;
};

// Lowercase, strip punctuation, split on whitespace.
inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            words.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

// Fixed-length id sequence: real tokens form a prefix, the tail is padding.
inline std::vector<std::size_t> tokenize(const std::string& caption, const Vocabulary& vocab,
                                         std::size_t max_len) {
    std::vector<std::size_t> ids(max_len, Vocabulary::kPad);
    const auto words = split_words(caption);
    for (std::size_t i = 0; i < words.size() && i < max_len; ++i) ids[i] = vocab.lookup(words[i]);
    return ids;
}

// Word feature matrix e (one column per token position) plus the global
// sentence vector s. Padded columns are exactly zero.
struct TextEncoding {
    Tensor words;               // [D, T]
    Tensor sentence;            // [D]
    std::vector<std::uint8_t> mask;  // true where the token is real
};

// Word embeddings feeding a gated bidirectional recurrent pass. Each
// direction has hidden size D/2 so the concatenated features stay D-wide.
class TextEncoder {
public:
    TextEncoder() = default;

    TextEncoder(std::size_t vocab_size, std::size_t feature_dim, std::size_t max_len, Rng& rng)
        : dim_(feature_dim), hidden_(feature_dim / 2), max_len_(max_len) {
        if (feature_dim % 2 != 0)
            throw std::invalid_argument("text encoder: feature dimension must be even");
        const double es = 0.1;
        embed_ = Tensor::randn({vocab_size, dim_}, rng, es);
        auto gate = [&](std::size_t out, std::size_t in) {
            return Tensor::randn({out, in}, rng, std::sqrt(1.0 / static_cast<double>(in)));
        };
        for (auto dir : {&fwd_, &bwd_}) {
            dir->wz = gate(hidden_, dim_);
            dir->wr = gate(hidden_, dim_);
            dir->wh = gate(hidden_, dim_);
            dir->uz = gate(hidden_, hidden_);
            dir->ur = gate(hidden_, hidden_);
            dir->uh = gate(hidden_, hidden_);
            dir->bz = Tensor::zeros({hidden_}, true);
            dir->br = Tensor::zeros({hidden_}, true);
            dir->bh = Tensor::zeros({hidden_}, true);
        }
    }

    std::size_t feature_dim() const { return dim_; }
    std::size_t max_len() const { return max_len_; }
    std::size_t vocab_size() const { return embed_.dim(0); }

    void collect(NamedTensors& reg, const std::string& prefix) const {
        reg.add(prefix + ".embed", embed_);
        const Direction* dirs[2] = {&fwd_, &bwd_};
        const char* dn[2] = {"fwd", "bwd"};
        for (int d = 0; d < 2; ++d) {
            const std::string p = prefix + "." + dn[d] + ".";
            reg.add(p + "wz", dirs[d]->wz);
            reg.add(p + "wr", dirs[d]->wr);
            reg.add(p + "wh", dirs[d]->wh);
            reg.add(p + "uz", dirs[d]->uz);
            reg.add(p + "ur", dirs[d]->ur);
            reg.add(p + "uh", dirs[d]->uh);
            reg.add(p + "bz", dirs[d]->bz);
            reg.add(p + "br", dirs[d]->br);
            reg.add(p + "bh", dirs[d]->bh);
        }
    }

    TextEncoding encode(const std::vector<std::size_t>& ids) const {
        if (ids.size() > max_len_)
            throw std::invalid_argument("text encoder: sequence longer than max length");
        std::size_t len = 0;
        while (len < ids.size() && ids[len] != Vocabulary::kPad) ++len;

        TextEncoding enc;
        enc.mask.assign(max_len_, 0);
        for (std::size_t t = 0; t < len; ++t) enc.mask[t] = 1;

        if (len == 0) {
            enc.words = Tensor::zeros({dim_, max_len_});
            enc.sentence = Tensor::zeros({dim_});
            return enc;
        }

        std::vector<Tensor> xs(len);
        for (std::size_t t = 0; t < len; ++t) xs[t] = embed_row(embed_, ids[t]);

        std::vector<Tensor> hf(len), hb(len);
        Tensor h = Tensor::zeros({1, hidden_});
        for (std::size_t t = 0; t < len; ++t) {
            h = step(fwd_, xs[t], h);
            hf[t] = h;
        }
        h = Tensor::zeros({1, hidden_});
        for (std::size_t t = len; t-- > 0;) {
            h = step(bwd_, xs[t], h);
            hb[t] = h;
        }

        std::vector<Tensor> rows;
        rows.reserve(max_len_);
        for (std::size_t t = 0; t < len; ++t) rows.push_back(concat({hf[t], hb[t]}, 1));
        for (std::size_t t = len; t < max_len_; ++t) rows.push_back(Tensor::zeros({1, dim_}));
        enc.words = transpose2d(concat(rows, 0));  // [D, T]
        enc.sentence = reshape(concat({hf[len - 1], hb[0]}, 1), {dim_});
        return enc;
    }

private:
    struct Direction {
        Tensor wz, wr, wh;  // input maps   [H, D]
        Tensor uz, ur, uh;  // hidden maps  [H, H]
        Tensor bz, br, bh;  // biases       [H]
    };

    // update/reset-gated recurrent step on row vectors [1, H]
    Tensor step(const Direction& d, const Tensor& x, const Tensor& h) const {
        Tensor z = sigmoid(add_row_bias(add(linear(x, d.wz), linear(h, d.uz)), d.bz));
        Tensor r = sigmoid(add_row_bias(add(linear(x, d.wr), linear(h, d.ur)), d.br));
        Tensor cand = tanh_t(add_row_bias(add(linear(x, d.wh), linear(mul(r, h), d.uh)), d.bh));
        return add(sub(h, mul(z, h)), mul(z, cand));
    }

    std::size_t dim_ = 0, hidden_ = 0, max_len_ = 0;
    Tensor embed_;  // [V, D]
    Direction fwd_, bwd_;
};

}  // namespace cagan
