// SPDX-License-Identifier: Apache-2.0
//
// Joint image/text denoising transformer. Images enter as flattened square
// patches, text latents as embedded rows; two timestep tokens lead the
// sequence and two heads map hidden states back to per-modality noise.
// Geometry is configurable so micro instances stay cheap to finite-difference.

#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "duogen/diffusion.hpp"
#include "duogen/errors.hpp"
#include "duogen/nn.hpp"
#include "duogen/optim.hpp"
#include "duogen/tensor.hpp"

namespace duogen {

struct JointDenoiserConfig {
    int image_size = 16;
    int patch = 4;
    int width = 64;
    int depth = 4;
    int heads = 4;
    int lat_rows = 4;
    int lat_cols = 32;
    int T = 100;

    int patches_per_side() const { return image_size / patch; }
    int image_tokens() const { return patches_per_side() * patches_per_side(); }
    int patch_elems() const { return patch * patch; }
    int seq_len() const { return 2 + image_tokens() + lat_rows; }
};

struct JointDenoiser {
    JointDenoiserConfig cfg;
    Linear patch_embed;   // patch pixels -> width
    Linear text_embed;    // lat_cols -> width
    Mlp tx_embed;         // sinusoid(width) -> width
    Mlp ty_embed;
    Tensor pos_embed;     // [seq_len, width]
    std::vector<Block> blocks;
    LayerNorm final_ln;
    Linear head_x;  // width -> patch pixels
    Linear head_y;  // width -> lat_cols

    std::vector<size_t> patchify_idx;
    std::vector<size_t> unpatch_idx;

    JointDenoiser() = default;
    JointDenoiser(const JointDenoiserConfig& cfg_, Rng& rng)
        : cfg(cfg_),
          patch_embed(cfg_.patch_elems(), cfg_.width, rng),
          text_embed(cfg_.lat_cols, cfg_.width, rng),
          tx_embed(cfg_.width, cfg_.width, rng),
          ty_embed(cfg_.width, cfg_.width, rng),
          final_ln(cfg_.width),
          head_x(cfg_.width, cfg_.patch_elems(), rng),
          head_y(cfg_.width, cfg_.lat_cols, rng) {
        if (cfg.image_size % cfg.patch != 0)
            throw ConfigError("patch size " + std::to_string(cfg.patch) + " does not tile image size " +
                              std::to_string(cfg.image_size));
        pos_embed = Tensor::randn({cfg.seq_len(), cfg.width}, rng, 0.02).set_requires_grad(true);
        for (int i = 0; i < cfg.depth; ++i) blocks.emplace_back(cfg.width, cfg.heads, rng);

        const int ps = cfg.patches_per_side(), p = cfg.patch, n = cfg.image_size;
        patchify_idx.resize(static_cast<size_t>(n) * n);
        unpatch_idx.resize(static_cast<size_t>(n) * n);
        for (int py = 0; py < ps; ++py)
            for (int px = 0; px < ps; ++px)
                for (int i = 0; i < p; ++i)
                    for (int j = 0; j < p; ++j) {
                        size_t patch_pos = static_cast<size_t>((py * ps + px)) * (p * p) + i * p + j;
                        size_t image_pos = static_cast<size_t>(py * p + i) * n + px * p + j;
                        patchify_idx[patch_pos] = image_pos;
                        unpatch_idx[image_pos] = patch_pos;
                    }
    }

    void collect(const std::string& prefix, ParamList& out) {
        patch_embed.collect(prefix + ".patch_embed", out);
        text_embed.collect(prefix + ".text_embed", out);
        tx_embed.collect(prefix + ".tx_embed", out);
        ty_embed.collect(prefix + ".ty_embed", out);
        out.push_back({prefix + ".pos_embed", pos_embed});
        for (size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".blk" + std::to_string(i), out);
        final_ln.collect(prefix + ".final_ln", out);
        head_x.collect(prefix + ".head_x", out);
        head_y.collect(prefix + ".head_y", out);
    }

    ParamList params(const std::string& prefix = "denoiser") {
        ParamList out;
        collect(prefix, out);
        return out;
    }

    void check_inputs(const Tensor& x, const Tensor& y, int tx, int ty) const {
        if (x.shape() != std::vector<int>{cfg.image_size, cfg.image_size})
            throw ShapeError("denoiser image input " + shape_str(x.shape()) + ", expected [" +
                             std::to_string(cfg.image_size) + ", " + std::to_string(cfg.image_size) + "]");
        if (y.shape() != std::vector<int>{cfg.lat_rows, cfg.lat_cols})
            throw ShapeError("denoiser text input " + shape_str(y.shape()) + ", expected [" +
                             std::to_string(cfg.lat_rows) + ", " + std::to_string(cfg.lat_cols) + "]");
        if (tx < 0 || tx > cfg.T || ty < 0 || ty > cfg.T)
            throw ConfigError("denoiser timesteps (" + std::to_string(tx) + ", " + std::to_string(ty) +
                              ") outside [0, " + std::to_string(cfg.T) + "]");
    }

    // Stacked forward over B samples; returns per-sample (eps_x, eps_y).
    std::vector<std::pair<Tensor, Tensor>> forward_batch(const std::vector<Tensor>& xs,
                                                         const std::vector<Tensor>& ys,
                                                         const std::vector<int>& txs,
                                                         const std::vector<int>& tys) const {
        const size_t B = xs.size();
        if (ys.size() != B || txs.size() != B || tys.size() != B)
            throw ShapeError("denoiser batch arrays disagree in length");
        if (B == 0) throw ShapeError("denoiser batch is empty");
        std::vector<Tensor> rows;
        rows.reserve(B);
        for (size_t b = 0; b < B; ++b) {
            check_inputs(xs[b], ys[b], txs[b], tys[b]);
            auto patches = gather_flat(xs[b], patchify_idx, {cfg.image_tokens(), cfg.patch_elems()});
            auto img_tok = patch_embed.forward(patches);
            auto txt_tok = text_embed.forward(ys[b]);
            auto tx_tok = tx_embed.forward(sinusoid_row(double(txs[b]), cfg.width));
            auto ty_tok = ty_embed.forward(sinusoid_row(double(tys[b]), cfg.width));
            rows.push_back(add(concat_rows<double>({tx_tok, ty_tok, img_tok, txt_tok}),
                               pos_embed));
        }
        Tensor h = concat_rows(rows);
        for (const auto& blk : blocks) h = blk.forward(h, static_cast<int>(B), false);
        h = final_ln.forward(h);

        const int L = cfg.seq_len();
        std::vector<std::pair<Tensor, Tensor>> out;
        out.reserve(B);
        for (size_t b = 0; b < B; ++b) {
            int base = static_cast<int>(b) * L;
            auto img_h = slice_rows(h, base + 2, base + 2 + cfg.image_tokens());
            auto txt_h = slice_rows(h, base + 2 + cfg.image_tokens(), base + L);
            auto eps_x_patches = head_x.forward(img_h);
            auto eps_x = gather_flat(eps_x_patches, unpatch_idx, {cfg.image_size, cfg.image_size});
            auto eps_y = head_y.forward(txt_h);
            out.emplace_back(std::move(eps_x), std::move(eps_y));
        }
        return out;
    }

    std::pair<Tensor, Tensor> forward(const Tensor& x, const Tensor& y, int tx, int ty) const {
        return forward_batch({x}, {y}, {tx}, {ty})[0];
    }
};

struct NoisyBatch {
    std::vector<Tensor> x0, y0, eps_x, eps_y, xt, yt;
    std::vector<int> tx, ty;

    size_t size() const { return x0.size(); }
};

enum class TimestepRange { joint_full, finetune_positive };

// Draws per-sample timesteps and noises, producing the corrupted pair.
// The joint stage samples t uniformly over {0..T}; fine-tuning over {1..T}.
inline NoisyBatch make_noisy_batch(const std::vector<Tensor>& x0s, const std::vector<Tensor>& y0s,
                                   const NoiseSchedule& sched, TimestepRange range, Rng& rng) {
    if (x0s.size() != y0s.size()) throw ShapeError("paired batch arrays disagree in length");
    NoisyBatch b;
    int lo = range == TimestepRange::joint_full ? 0 : 1;
    for (size_t i = 0; i < x0s.size(); ++i) {
        int tx = static_cast<int>(rng.randint(lo, sched.T));
        int ty = static_cast<int>(rng.randint(lo, sched.T));
        auto ex = Tensor::from_data(x0s[i].shape(), rng.normal_vec(x0s[i].numel()));
        auto ey = Tensor::from_data(y0s[i].shape(), rng.normal_vec(y0s[i].numel()));
        b.x0.push_back(x0s[i]);
        b.y0.push_back(y0s[i]);
        b.eps_x.push_back(ex);
        b.eps_y.push_back(ey);
        b.tx.push_back(tx);
        b.ty.push_back(ty);
        b.xt.push_back(q_sample(x0s[i], tx, ex, sched));
        b.yt.push_back(q_sample(y0s[i], ty, ey, sched));
    }
    return b;
}

// Batched denoise callable: (xs, ys, txs, tys) -> per-sample (eps_x, eps_y).
using JointBatchFn = std::function<std::vector<std::pair<Tensor, Tensor>>(
    const std::vector<Tensor>&, const std::vector<Tensor>&, const std::vector<int>&,
    const std::vector<int>&)>;

inline JointBatchFn batch_fn(const JointDenoiser& model) {
    return [&model](const std::vector<Tensor>& xs, const std::vector<Tensor>& ys, const std::vector<int>& txs,
                    const std::vector<int>& tys) { return model.forward_batch(xs, ys, txs, tys); };
}

// Joint objective: mean squared error over the concatenation of both noise
// residuals (element-count weighted), averaged over the batch.
inline Tensor loss_unidiffuser(const NoisyBatch& batch, const JointBatchFn& fn) {
    auto preds = fn(batch.xt, batch.yt, batch.tx, batch.ty);
    std::vector<Tensor> per_sample;
    per_sample.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        auto dx = sub(batch.eps_x[i], preds[i].first);
        auto dy = sub(batch.eps_y[i], preds[i].second);
        size_t nx = dx.numel(), ny = dy.numel();
        auto sq_sum = add(sum_all(mul(dx, dx)), sum_all(mul(dy, dy)));
        per_sample.push_back(reshape(scale(sq_sum, 1.0 / double(nx + ny)), {1, 1}));
    }
    return mean_all(concat_rows(per_sample));
}

// Bidirectional objective: each branch conditions on the clean other
// modality at timestep 0. Returns Lx + alpha * Ly over per-branch means.
inline Tensor loss_bidiffuser(const NoisyBatch& batch, const JointBatchFn& fn, double alpha) {
    if (alpha < 0.0) throw ConfigError("loss_bidiffuser: alpha must be >= 0, got " + std::to_string(alpha));
    std::vector<int> zeros(batch.size(), 0);
    auto preds_img = fn(batch.xt, batch.y0, batch.tx, zeros);
    auto preds_txt = fn(batch.x0, batch.yt, zeros, batch.ty);
    std::vector<Tensor> lx, ly;
    lx.reserve(batch.size());
    ly.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        lx.push_back(reshape(mse(batch.eps_x[i], preds_img[i].first), {1, 1}));
        ly.push_back(reshape(mse(batch.eps_y[i], preds_txt[i].second), {1, 1}));
    }
    auto Lx = mean_all(concat_rows(lx));
    auto Ly = mean_all(concat_rows(ly));
    return add(Lx, scale(Ly, alpha));
}

// One optimizer step against the bidirectional loss; frozen parameters are
// untouched by construction. Returns the pre-step loss value.
inline double finetune_step(const NoisyBatch& batch, const JointBatchFn& fn, double alpha, AdamW& opt) {
    opt.zero_grad();
    auto loss = loss_bidiffuser(batch, fn, alpha);
    loss.backward();
    opt.step();
    return loss.item();
}

}  // namespace duogen
