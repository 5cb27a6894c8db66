// SPDX-License-Identifier: Apache-2.0
//
// Small transformer language model. Two variants share the block stack:
// a decoder-only causal LM and an encoder-decoder whose decoder adds
// cross-attention over an external memory. Hidden states are post-norm
// (after the final layer norm), which is also what the adapter consumes.

#pragma once

#include <string>
#include <vector>

#include "duogen/errors.hpp"
#include "duogen/nn.hpp"
#include "duogen/templates.hpp"
#include "duogen/text_codec.hpp"

namespace duogen {

struct LlmConfig {
    int width = 64;
    int blocks = 4;
    int heads = 4;
    int max_positions = 96;
    LlmVariant variant = LlmVariant::decoder_only;
};

struct DialogueSample {
    std::vector<std::pair<std::string, std::string>> turns;  // (speaker, text)
    std::string target;
};

inline void check_balanced_spans(const std::string& text) {
    parse_img_spans(text);  // throws ParseError on violation
}

struct ToyLlm {
    LlmConfig cfg;
    int vocab_size = 0;
    Tensor tok_embed;  // [V, W]
    Tensor pos_embed;  // [max_positions, W]
    std::vector<Block> enc_blocks;
    std::vector<Block> dec_blocks;
    LayerNorm enc_ln;
    LayerNorm final_ln;
    Linear head;  // [W, V]

    ToyLlm() = default;
    ToyLlm(const LlmConfig& cfg_, int vocab_size_, Rng& rng) : cfg(cfg_), vocab_size(vocab_size_) {
        tok_embed = Tensor::randn({vocab_size, cfg.width}, rng, 0.02).set_requires_grad(true);
        pos_embed = Tensor::randn({cfg.max_positions, cfg.width}, rng, 0.02).set_requires_grad(true);
        bool cross = cfg.variant == LlmVariant::encoder_decoder;
        for (int i = 0; i < cfg.blocks; ++i) dec_blocks.emplace_back(cfg.width, cfg.heads, rng, cross);
        if (cross) {
            for (int i = 0; i < cfg.blocks; ++i) enc_blocks.emplace_back(cfg.width, cfg.heads, rng, false);
            enc_ln = LayerNorm(cfg.width);
        }
        final_ln = LayerNorm(cfg.width);
        head = Linear(cfg.width, vocab_size, rng);
    }

    void collect(const std::string& prefix, ParamList& out) {
        out.push_back({prefix + ".tok_embed", tok_embed});
        out.push_back({prefix + ".pos_embed", pos_embed});
        for (size_t i = 0; i < enc_blocks.size(); ++i)
            enc_blocks[i].collect(prefix + ".enc" + std::to_string(i), out);
        if (cfg.variant == LlmVariant::encoder_decoder) enc_ln.collect(prefix + ".enc_ln", out);
        for (size_t i = 0; i < dec_blocks.size(); ++i)
            dec_blocks[i].collect(prefix + ".dec" + std::to_string(i), out);
        final_ln.collect(prefix + ".final_ln", out);
        head.collect(prefix + ".head", out);
    }

    ParamList params(const std::string& prefix = "llm") {
        ParamList out;
        collect(prefix, out);
        return out;
    }

    // Token embeddings with absolute positions starting at pos_offset.
    Tensor embed_ids(const std::vector<int>& ids, int pos_offset = 0) const {
        if (ids.empty()) throw ShapeError("embed_ids: empty id list");
        if (pos_offset + static_cast<int>(ids.size()) > cfg.max_positions)
            throw ShapeError("sequence of " + std::to_string(ids.size()) + " tokens at offset " +
                             std::to_string(pos_offset) + " exceeds max positions " +
                             std::to_string(cfg.max_positions));
        std::vector<int> pos(ids.size());
        for (size_t i = 0; i < ids.size(); ++i) pos[i] = pos_offset + static_cast<int>(i);
        return add(embedding_rows(tok_embed, ids), embedding_rows(pos_embed, pos));
    }

    // Causal stack over a single sequence of input embeddings. Returns
    // final-norm hidden states [L, W]; feed through logits() for the head.
    Tensor forward_decoder(const Tensor& input_embeds, const Tensor* memory = nullptr) const {
        if (input_embeds.cols() != cfg.width)
            throw ShapeError("decoder input width " + std::to_string(input_embeds.cols()) + " != model width " +
                             std::to_string(cfg.width));
        bool cross = cfg.variant == LlmVariant::encoder_decoder;
        if (cross && !memory) throw ConfigError("encoder-decoder variant requires encoder memory");
        Tensor h = input_embeds;
        for (const auto& blk : dec_blocks) h = blk.forward(h, 1, true, memory);
        return final_ln.forward(h);
    }

    // Bidirectional encoder (encoder-decoder variant only).
    Tensor forward_encoder(const Tensor& input_embeds) const {
        if (cfg.variant != LlmVariant::encoder_decoder)
            throw ConfigError("decoder-only model has no encoder");
        Tensor h = input_embeds;
        for (const auto& blk : enc_blocks) h = blk.forward(h, 1, false);
        return enc_ln.forward(h);
    }

    Tensor logits(const Tensor& hidden) const { return head.forward(hidden); }

    // Hidden states for a raw token sequence (the f_LLM(.) of the adapter).
    Tensor hidden_for_ids(const std::vector<int>& ids) const {
        if (cfg.variant == LlmVariant::encoder_decoder) return forward_encoder(embed_ids(ids));
        return forward_decoder(embed_ids(ids));
    }
};

// Teacher-forced mean NLL of target_ids given an optional embedding prefix
// and a context token sequence. Decoder-only path: the model reads
// [prefix; context; target[:-1]] and each target token is scored at its
// predicting position.
inline Tensor teacher_forced_nll(const ToyLlm& llm, const Tensor* prefix_embeds,
                                 const std::vector<int>& context_ids, const std::vector<int>& target_ids) {
    if (target_ids.empty()) throw ShapeError("teacher forcing needs a nonempty target");
    if (context_ids.empty()) throw ShapeError("teacher forcing needs a nonempty context");
    const int P = prefix_embeds ? prefix_embeds->rows() : 0;
    if (prefix_embeds && prefix_embeds->cols() != llm.cfg.width)
        throw ShapeError("prefix width " + std::to_string(prefix_embeds->cols()) + " != model width " +
                         std::to_string(llm.cfg.width));
    const int I = static_cast<int>(context_ids.size());
    const int L = static_cast<int>(target_ids.size());

    std::vector<int> input_ids = context_ids;
    input_ids.insert(input_ids.end(), target_ids.begin(), target_ids.end() - 1);
    auto embeds = llm.embed_ids(input_ids, P);
    Tensor seq = prefix_embeds ? concat_rows<double>({*prefix_embeds, embeds}) : embeds;
    auto hidden = llm.forward_decoder(seq);
    auto all_logits = llm.logits(hidden);

    std::vector<Tensor> ces;
    ces.reserve(static_cast<size_t>(L));
    for (int k = 0; k < L; ++k) {
        auto row = reshape(slice_rows(all_logits, P + I - 1 + k, P + I + k), {llm.vocab_size});
        ces.push_back(reshape(cross_entropy(row, target_ids[static_cast<size_t>(k)]), {1, 1}));
    }
    return mean_all(concat_rows(ces));
}

// Image-grounded generation loss: NLL of the target caption given projected
// image embeddings and the rendered instruction.
inline Tensor loss_itg(const ToyLlm& llm, const Tensor& image_embeds, const std::vector<int>& instruction_ids,
                       const std::vector<int>& target_ids) {
    return teacher_forced_nll(llm, &image_embeds, instruction_ids, target_ids);
}

// Dialogue response loss over the full target (visible response + caption
// span) conditioned on the rendered history prompt. Same math as loss_itg
// with the history standing in for (image, instruction).
inline Tensor loss_t2t(const ToyLlm& llm, const std::vector<int>& history_ids,
                       const std::vector<int>& target_ids) {
    return teacher_forced_nll(llm, nullptr, history_ids, target_ids);
}

// Encoder-decoder teacher forcing: encoder memory is given; the decoder
// reads [BOS; target[:-1]] and scores each target token.
inline Tensor teacher_forced_nll_encdec(const ToyLlm& llm, const Tensor& memory, int bos_id,
                                        const std::vector<int>& target_ids) {
    if (llm.cfg.variant != LlmVariant::encoder_decoder)
        throw ConfigError("encoder-decoder teacher forcing on a decoder-only model");
    if (target_ids.empty()) throw ShapeError("teacher forcing needs a nonempty target");
    const int L = static_cast<int>(target_ids.size());
    std::vector<int> input_ids = {bos_id};
    input_ids.insert(input_ids.end(), target_ids.begin(), target_ids.end() - 1);
    auto hidden = llm.forward_decoder(llm.embed_ids(input_ids), &memory);
    auto all_logits = llm.logits(hidden);
    std::vector<Tensor> ces;
    ces.reserve(static_cast<size_t>(L));
    for (int k = 0; k < L; ++k) {
        auto row = reshape(slice_rows(all_logits, k, k + 1), {llm.vocab_size});
        ces.push_back(reshape(cross_entropy(row, target_ids[static_cast<size_t>(k)]), {1, 1}));
    }
    return mean_all(concat_rows(ces));
}

// Greedy decoding: repeated argmax with ties to the lowest token id; stops
// before emitting EOS or after max_len tokens. Returns only the new tokens.
inline std::vector<int> generate_greedy(const ToyLlm& llm, const Tensor* prefix_embeds,
                                        const std::vector<int>& prompt_ids, int eos_id, int max_len,
                                        const Tensor* memory = nullptr) {
    if (max_len < 1) throw ConfigError("generate_greedy: max_len must be >= 1");
    NoGradGuard ng;
    const int P = prefix_embeds ? prefix_embeds->rows() : 0;
    std::vector<int> ids = prompt_ids;
    std::vector<int> out;
    while (static_cast<int>(out.size()) < max_len) {
        Tensor seq;
        if (ids.empty()) {
            if (!prefix_embeds) throw ShapeError("generate_greedy: empty prompt without prefix");
            seq = *prefix_embeds;
        } else {
            auto embeds = llm.embed_ids(ids, P);
            seq = prefix_embeds ? concat_rows<double>({*prefix_embeds, embeds}) : embeds;
        }
        auto hidden = llm.forward_decoder(seq, memory);
        auto logits = llm.logits(slice_rows(hidden, hidden.rows() - 1, hidden.rows()));
        int best = 0;
        double best_v = logits.at(0, 0);
        for (int v = 1; v < llm.vocab_size; ++v)
            if (logits.at(0, v) > best_v) {
                best_v = logits.at(0, v);
                best = v;
            }
        if (best == eos_id) break;
        out.push_back(best);
        ids.push_back(best);
    }
    return out;
}

}  // namespace duogen
