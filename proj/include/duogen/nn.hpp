// SPDX-License-Identifier: Apache-2.0
//
// Transformer building blocks on top of the tensor core: linear layers,
// pre-norm attention blocks (self, causal, cross) and parameter registries
// with per-tensor freeze flags.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "duogen/tensor.hpp"

namespace duogen {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

inline void freeze_all(ParamList& params) {
    for (auto& p : params) p.tensor.set_requires_grad(false);
}

inline void unfreeze_all(ParamList& params) {
    for (auto& p : params) p.tensor.set_requires_grad(true);
}

inline size_t param_count(const ParamList& params) {
    size_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
}

struct Linear {
    Tensor W;
    Tensor b;

    Linear() = default;
    Linear(int in, int out, Rng& rng, double init_scale = -1.0) {
        double s = init_scale > 0 ? init_scale : 1.0 / std::sqrt(double(in));
        W = Tensor::randn({in, out}, rng, s).set_requires_grad(true);
        b = Tensor::zeros({1, out}).set_requires_grad(true);
    }

    Tensor forward(const Tensor& x) const { return add_broadcast_row(matmul(x, W), b); }

    void collect(const std::string& prefix, ParamList& out) {
        out.push_back({prefix + ".W", W});
        out.push_back({prefix + ".b", b});
    }
};

struct LayerNorm {
    Tensor gain;
    Tensor bias;

    LayerNorm() = default;
    explicit LayerNorm(int width) {
        gain = Tensor::ones({width}).set_requires_grad(true);
        bias = Tensor::zeros({width}).set_requires_grad(true);
    }

    Tensor forward(const Tensor& x) const { return layer_norm_rows(x, gain, bias); }

    void collect(const std::string& prefix, ParamList& out) {
        out.push_back({prefix + ".gain", gain});
        out.push_back({prefix + ".bias", bias});
    }
};

struct Mlp {
    Linear fc1;
    Linear fc2;

    Mlp() = default;
    Mlp(int width, int hidden, Rng& rng) : fc1(width, hidden, rng), fc2(hidden, width, rng) {}

    Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

    void collect(const std::string& prefix, ParamList& out) {
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
    }
};

// Multi-head scaled dot-product attention. Inputs arrive as B stacked
// sequences of equal length; projections run over all rows at once and the
// attention pattern is applied per sequence so batch items never mix.
struct MultiHeadAttention {
    Linear q_proj, k_proj, v_proj, o_proj;
    int width = 0;
    int heads = 0;

    MultiHeadAttention() = default;
    MultiHeadAttention(int width_, int heads_, Rng& rng)
        : q_proj(width_, width_, rng),
          k_proj(width_, width_, rng),
          v_proj(width_, width_, rng),
          o_proj(width_, width_, rng),
          width(width_),
          heads(heads_) {
        if (width_ % heads_ != 0) throw ShapeError("attention width must divide evenly across heads");
    }

    // Self attention over `batch` equal-length sequences stacked along rows.
    Tensor forward(const Tensor& x, int batch, bool causal) const {
        return attend(q_proj.forward(x), k_proj.forward(x), v_proj.forward(x), batch, batch, causal);
    }

    // Cross attention: queries from x, keys/values from memory. Both are
    // stacked batches with matching batch counts.
    Tensor forward_cross(const Tensor& x, const Tensor& memory, int batch) const {
        return attend(q_proj.forward(x), k_proj.forward(memory), v_proj.forward(memory), batch, batch, false);
    }

    void collect(const std::string& prefix, ParamList& out) {
        q_proj.collect(prefix + ".q", out);
        k_proj.collect(prefix + ".k", out);
        v_proj.collect(prefix + ".v", out);
        o_proj.collect(prefix + ".o", out);
    }

private:
    Tensor attend(const Tensor& Q, const Tensor& K, const Tensor& V, int qbatch, int kvbatch, bool causal) const {
        if (Q.rows() % qbatch != 0 || K.rows() % kvbatch != 0)
            throw ShapeError("attention: rows not divisible by batch");
        const int Lq = Q.rows() / qbatch;
        const int Lk = K.rows() / kvbatch;
        const int hd = width / heads;
        const double inv_scale = 1.0 / std::sqrt(double(hd));

        std::vector<Tensor> per_sample;
        per_sample.reserve(static_cast<size_t>(qbatch));
        for (int s = 0; s < qbatch; ++s) {
            auto Qs = slice_rows(Q, s * Lq, (s + 1) * Lq);
            auto Ks = slice_rows(K, s * Lk, (s + 1) * Lk);
            auto Vs = slice_rows(V, s * Lk, (s + 1) * Lk);
            std::vector<Tensor> head_outs;
            head_outs.reserve(static_cast<size_t>(heads));
            for (int h = 0; h < heads; ++h) {
                auto Qh = slice_cols(Qs, h * hd, (h + 1) * hd);
                auto Kh = slice_cols(Ks, h * hd, (h + 1) * hd);
                auto Vh = slice_cols(Vs, h * hd, (h + 1) * hd);
                auto scores = scale(matmul(Qh, transpose(Kh)), inv_scale);
                Tensor probs;
                if (causal) {
                    std::vector<int> valid(static_cast<size_t>(Lq));
                    for (int i = 0; i < Lq; ++i) valid[static_cast<size_t>(i)] = i + 1;
                    probs = softmax_rows_masked(scores, valid);
                } else {
                    probs = softmax(scores, 1);
                }
                head_outs.push_back(matmul(probs, Vh));
            }
            per_sample.push_back(concat_cols(head_outs));
        }
        return o_proj.forward(concat_rows(per_sample));
    }
};

// Pre-norm transformer block: x + Att(LN(x)), then x + MLP(LN(x)).
// When `cross` is enabled a third sublayer attends over an external memory.
struct Block {
    LayerNorm ln1;
    MultiHeadAttention attn;
    LayerNorm ln_cross;
    MultiHeadAttention cross_attn;
    LayerNorm ln2;
    Mlp mlp;
    bool has_cross = false;

    Block() = default;
    Block(int width, int heads, Rng& rng, bool with_cross = false)
        : ln1(width),
          attn(width, heads, rng),
          ln2(width),
          mlp(width, 4 * width, rng),
          has_cross(with_cross) {
        if (with_cross) {
            ln_cross = LayerNorm(width);
            cross_attn = MultiHeadAttention(width, heads, rng);
        }
    }

    Tensor forward(const Tensor& x, int batch, bool causal, const Tensor* memory = nullptr) const {
        auto h = add(x, attn.forward(ln1.forward(x), batch, causal));
        if (has_cross) {
            if (!memory) throw ShapeError("cross-attention block called without memory");
            h = add(h, cross_attn.forward_cross(ln_cross.forward(h), *memory, batch));
        }
        return add(h, mlp.forward(ln2.forward(h)));
    }

    void collect(const std::string& prefix, ParamList& out) {
        ln1.collect(prefix + ".ln1", out);
        attn.collect(prefix + ".attn", out);
        if (has_cross) {
            ln_cross.collect(prefix + ".ln_cross", out);
            cross_attn.collect(prefix + ".cross", out);
        }
        ln2.collect(prefix + ".ln2", out);
        mlp.collect(prefix + ".mlp", out);
    }
};

// Classic fixed sinusoidal features for positions and diffusion timesteps.
inline std::vector<double> sinusoid_features(double pos, int width) {
    std::vector<double> v(static_cast<size_t>(width));
    for (int i = 0; i < width / 2; ++i) {
        double freq = std::exp(-std::log(10000.0) * (2.0 * i) / double(width));
        v[static_cast<size_t>(2 * i)] = std::sin(pos * freq);
        v[static_cast<size_t>(2 * i + 1)] = std::cos(pos * freq);
    }
    return v;
}

inline Tensor sinusoid_row(double pos, int width) {
    return Tensor::from_data({1, width}, sinusoid_features(pos, width));
}

}  // namespace duogen
