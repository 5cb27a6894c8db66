// SPDX-License-Identifier: Apache-2.0
//
// Cross-attention adapter that reads LLM hidden states into the text-latent
// space: queries come from the frozen text encoder, keys and values from a
// projected view of the LLM, and the result is lambda-fused with the encoder
// output to form the denoiser condition.

#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "duogen/denoiser.hpp"
#include "duogen/errors.hpp"
#include "duogen/llm.hpp"
#include "duogen/nn.hpp"
#include "duogen/tensor.hpp"
#include "duogen/text_codec.hpp"

namespace duogen {

struct AdapterConfig {
    int llm_width = 64;
    int mlp_width = 32;
    int clip_width = 32;  // also the attention width, so fusion is well-typed
};

struct SurAdapter {
    AdapterConfig cfg;
    Linear mlp;  // llm_width -> mlp_width
    Tensor Wq;   // clip_width -> clip_width
    Tensor Wk;   // mlp_width -> clip_width
    Tensor Wv;   // mlp_width -> clip_width

    SurAdapter() = default;
    SurAdapter(const AdapterConfig& cfg_, Rng& rng) : cfg(cfg_), mlp(cfg_.llm_width, cfg_.mlp_width, rng) {
        Wq = Tensor::randn({cfg.clip_width, cfg.clip_width}, rng, 1.0 / std::sqrt(double(cfg.clip_width)))
                 .set_requires_grad(true);
        Wk = Tensor::randn({cfg.mlp_width, cfg.clip_width}, rng, 1.0 / std::sqrt(double(cfg.mlp_width)))
                 .set_requires_grad(true);
        Wv = Tensor::randn({cfg.mlp_width, cfg.clip_width}, rng, 1.0 / std::sqrt(double(cfg.mlp_width)))
                 .set_requires_grad(true);
    }

    void collect(const std::string& prefix, ParamList& out) {
        mlp.collect(prefix + ".mlp", out);
        out.push_back({prefix + ".Wq", Wq});
        out.push_back({prefix + ".Wk", Wk});
        out.push_back({prefix + ".Wv", Wv});
    }

    ParamList params(const std::string& prefix = "adapter") {
        ParamList out;
        collect(prefix, out);
        return out;
    }

    // Single-head cross attention; optionally reports the attention weights.
    Tensor forward(const Tensor& clip_seq, const Tensor& llm_hidden, Tensor* probs_out = nullptr) const {
        if (clip_seq.cols() != cfg.clip_width)
            throw ShapeError("adapter query width " + std::to_string(clip_seq.cols()) + " != clip width " +
                             std::to_string(cfg.clip_width));
        if (llm_hidden.cols() != cfg.llm_width)
            throw ShapeError("adapter memory width " + std::to_string(llm_hidden.cols()) + " != llm width " +
                             std::to_string(cfg.llm_width));
        auto proj = mlp.forward(llm_hidden);
        auto Q = matmul(clip_seq, Wq);
        auto K = matmul(proj, Wk);
        auto V = matmul(proj, Wv);
        auto scores = scale(matmul(Q, transpose(K)), 1.0 / std::sqrt(double(cfg.clip_width)));
        auto probs = softmax(scores, 1);
        if (probs_out) *probs_out = probs.detach();
        return matmul(probs, V);
    }
};

// y0 = lambda * y_sur + (1 - lambda) * clip_enc, exact convex combination.
inline Tensor fuse(const Tensor& y_sur, const Tensor& clip_enc, double lambda) {
    if (lambda < 0.0 || lambda > 1.0)
        throw ConfigError("fusion lambda must lie in [0, 1], got " + std::to_string(lambda));
    if (y_sur.shape() != clip_enc.shape())
        throw ShapeError("fuse: " + shape_str(y_sur.shape()) + " vs " + shape_str(clip_enc.shape()));
    return add(scale(y_sur, lambda), scale(clip_enc, 1.0 - lambda));
}

inline void require_frozen(const ParamList& params, const std::string& what) {
    for (const auto& p : params)
        if (p.tensor.requires_grad())
            throw ContractError(what + " parameter '" + p.name + "' must be frozen for this loss");
}

// Condition used by adapter pretraining and generation: encode the caption,
// read the LLM's hidden states for it, attend, fuse.
inline Tensor fused_condition(const ToyLlm& llm, const SurAdapter& adapter, const ClipEncoder& clip,
                              const std::vector<int>& caption_ids, double lambda) {
    auto clip_seq = clip.encode(caption_ids);
    auto hidden = llm.hidden_for_ids(caption_ids);
    auto y_sur = adapter.forward(clip_seq, hidden);
    return fuse(y_sur, clip_seq, lambda);
}

// Image-noise MSE with a fused condition and the denoiser held frozen.
// The caller supplies the timestep and noise so the value is deterministic.
inline Tensor loss_ada(const Tensor& x0, const Tensor& y0_condition, const JointBatchFn& fn,
                       const ParamList& denoiser_params, const NoiseSchedule& sched, int tx,
                       const Tensor& eps_x) {
    require_frozen(denoiser_params, "denoiser");
    if (tx < 1 || tx > sched.T)
        throw ConfigError("loss_ada timestep " + std::to_string(tx) + " outside [1, " + std::to_string(sched.T) + "]");
    auto xt = q_sample(x0, tx, eps_x, sched);
    auto preds = fn({xt}, {y0_condition}, {tx}, {0});
    return mse(eps_x, preds[0].first);
}

inline Tensor loss_ada_batch(const std::vector<Tensor>& x0s, const std::vector<Tensor>& y0s,
                             const JointBatchFn& fn, const ParamList& denoiser_params,
                             const NoiseSchedule& sched, const std::vector<int>& txs,
                             const std::vector<Tensor>& eps) {
    require_frozen(denoiser_params, "denoiser");
    if (x0s.empty() || x0s.size() != y0s.size() || x0s.size() != txs.size() || x0s.size() != eps.size())
        throw ShapeError("loss_ada_batch: array lengths disagree");
    std::vector<Tensor> xts;
    std::vector<int> zeros(x0s.size(), 0);
    for (size_t i = 0; i < x0s.size(); ++i) {
        if (txs[i] < 1 || txs[i] > sched.T)
            throw ConfigError("loss_ada timestep " + std::to_string(txs[i]) + " outside [1, " +
                              std::to_string(sched.T) + "]");
        xts.push_back(q_sample(x0s[i], txs[i], eps[i], sched));
    }
    auto preds = fn(xts, y0s, txs, zeros);
    std::vector<Tensor> per_sample;
    for (size_t i = 0; i < x0s.size(); ++i) per_sample.push_back(reshape(mse(eps[i], preds[i].first), {1, 1}));
    return mean_all(concat_rows(per_sample));
}

// Locates the single <Img>...</Img> span in a token sequence. Returns the
// caption token range [start, end) with the markers excluded.
inline std::pair<int, int> caption_span_token_range(const std::vector<int>& target_ids, const Vocab& vocab) {
    int open_id = vocab.img_open(), close_id = vocab.img_close();
    int spans = 0, start = -1, end = -1;
    int pending_open = -1;
    for (size_t i = 0; i < target_ids.size(); ++i) {
        if (target_ids[i] == open_id) {
            if (pending_open >= 0) throw ContractError("nested caption span in dialogue target");
            pending_open = static_cast<int>(i);
        } else if (target_ids[i] == close_id) {
            if (pending_open < 0) throw ContractError("unmatched caption span close in dialogue target");
            ++spans;
            start = pending_open + 1;
            end = static_cast<int>(i);
            pending_open = -1;
        }
    }
    if (pending_open >= 0) throw ContractError("unterminated caption span in dialogue target");
    if (spans == 0) throw ContractError("dialogue target contains no caption span");
    if (spans > 1) throw ContractError("dialogue target contains " + std::to_string(spans) + " caption spans");
    if (start == end) throw ContractError("caption span in dialogue target is empty");
    return {start, end};
}

struct DialogueLoss {
    Tensor all;
    Tensor t2i;
    Tensor t2t;
};

// Combined dialogue objective: next-token NLL of the target plus the
// denoising loss with the condition built from the LLM's own hidden states
// over the caption span (teacher forced). Denoiser stays frozen; gradients
// flow to the LLM and adapter only.
inline DialogueLoss loss_all(const ToyLlm& llm, const SurAdapter& adapter, double lambda,
                             const std::vector<int>& history_ids, const std::vector<int>& target_ids,
                             const ClipEncoder& clip, const Vocab& vocab, const Tensor& image,
                             const JointBatchFn& fn, const ParamList& denoiser_params,
                             const NoiseSchedule& sched, int tx, const Tensor& eps_x) {
    require_frozen(denoiser_params, "denoiser");
    auto [start, end] = caption_span_token_range(target_ids, vocab);

    auto t2t = loss_t2t(llm, history_ids, target_ids);

    std::vector<int> caption_ids(target_ids.begin() + start, target_ids.begin() + end);
    auto clip_seq = clip.encode(caption_ids);

    std::vector<int> input_ids(history_ids);
    input_ids.insert(input_ids.end(), target_ids.begin(), target_ids.end() - 1);
    auto hidden = llm.forward_decoder(llm.embed_ids(input_ids));
    int H = static_cast<int>(history_ids.size());
    auto caption_hidden = slice_rows(hidden, H + start, H + end);

    auto y_sur = adapter.forward(clip_seq, caption_hidden);
    auto y0 = fuse(y_sur, clip_seq, lambda);
    auto t2i = loss_ada(image, y0, fn, denoiser_params, sched, tx, eps_x);

    return {add(t2i, t2t), t2i, t2t};
}

}  // namespace duogen
