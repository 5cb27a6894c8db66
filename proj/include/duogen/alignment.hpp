// SPDX-License-Identifier: Apache-2.0
//
// Projection layer bridging the denoiser's text latents into the LLM, in two
// manners: spliced into the decoder input ahead of the instruction (pre) or
// pooled into a single encoder-decoder memory vector (mid), plus the
// image-text distance loss between pooled latent and caption encodings.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "duogen/adapter.hpp"
#include "duogen/denoiser.hpp"
#include "duogen/diffusion.hpp"
#include "duogen/errors.hpp"
#include "duogen/llm.hpp"
#include "duogen/nn.hpp"
#include "duogen/tensor.hpp"

namespace duogen {

// Per-row linear map from text-latent width to LLM width.
struct Projection {
    Linear lin;

    Projection() = default;
    Projection(int lat_cols, int llm_width, Rng& rng) : lin(lat_cols, llm_width, rng) {}

    Tensor forward(const Tensor& latent) const { return lin.forward(latent); }

    void collect(const std::string& prefix, ParamList& out) { lin.collect(prefix, out); }

    ParamList params(const std::string& prefix = "projection") {
        ParamList out;
        collect(prefix, out);
        return out;
    }
};

// Samples a text latent for a clean image by running the reverse process on
// the text branch with the image as a timestep-0 condition. Inference only;
// nothing in the result carries gradients.
inline Tensor diffusion_image_to_text_latent(const Tensor& image, const JointBatchFn& fn, int lat_rows,
                                             int lat_cols, const NoiseSchedule& sched,
                                             const GuidanceConfig& guide, uint64_t seed) {
    DenoiseFn text_branch = [&fn](const Tensor& y, int t, const Tensor* cond, int cond_t) {
        if (!cond) throw ContractError("image-to-text sampling always conditions on an image");
        return fn({*cond}, {y}, {cond_t}, {t})[0].second;
    };
    return sample_loop(text_branch, {lat_rows, lat_cols}, &image, sched, guide, seed);
}

// Position of the single image placeholder inside an instruction.
inline int placeholder_index(const std::vector<int>& instruction_ids, int placeholder_id) {
    int at = -1;
    for (size_t i = 0; i < instruction_ids.size(); ++i) {
        if (instruction_ids[i] == placeholder_id) {
            if (at >= 0) throw ConfigError("instruction contains more than one image placeholder");
            at = static_cast<int>(i);
        }
    }
    if (at < 0) throw ConfigError("instruction contains no image placeholder");
    return at;
}

// Embeds an instruction with a block of rows standing in for the placeholder
// token, plus any extra trailing token ids. Token positions continue across
// the spliced rows (which carry no positional embedding of their own).
inline Tensor spliced_instruction_embeds(const ToyLlm& llm, const std::vector<int>& instruction_ids,
                                         int placeholder_id, const Tensor& spliced_rows,
                                         const std::vector<int>& extra_ids = {}) {
    if (spliced_rows.cols() != llm.cfg.width)
        throw ShapeError("spliced row width " + std::to_string(spliced_rows.cols()) + " != model width " +
                         std::to_string(llm.cfg.width));
    const int at = placeholder_index(instruction_ids, placeholder_id);

    std::vector<int> pre(instruction_ids.begin(), instruction_ids.begin() + at);
    std::vector<int> post(instruction_ids.begin() + at + 1, instruction_ids.end());
    post.insert(post.end(), extra_ids.begin(), extra_ids.end());

    const int K = spliced_rows.rows();
    std::vector<Tensor> parts;
    if (!pre.empty()) parts.push_back(llm.embed_ids(pre, 0));
    parts.push_back(spliced_rows);
    if (!post.empty()) parts.push_back(llm.embed_ids(post, static_cast<int>(pre.size()) + K));
    return concat_rows(parts);
}

// Teacher-forced NLL over a spliced instruction.
inline Tensor teacher_forced_nll_spliced(const ToyLlm& llm, const std::vector<int>& instruction_ids,
                                         int placeholder_id, const Tensor& spliced_rows,
                                         const std::vector<int>& target_ids) {
    if (target_ids.empty()) throw ShapeError("teacher forcing needs a nonempty target");
    std::vector<int> extra(target_ids.begin(), target_ids.end() - 1);
    auto seq = spliced_instruction_embeds(llm, instruction_ids, placeholder_id, spliced_rows, extra);
    auto hidden = llm.forward_decoder(seq);
    auto all_logits = llm.logits(hidden);

    const int C = static_cast<int>(instruction_ids.size()) - 1 + spliced_rows.rows();
    const int L = static_cast<int>(target_ids.size());
    std::vector<Tensor> ces;
    ces.reserve(static_cast<size_t>(L));
    for (int k = 0; k < L; ++k) {
        auto row = reshape(slice_rows(all_logits, C - 1 + k, C + k), {llm.vocab_size});
        ces.push_back(reshape(cross_entropy(row, target_ids[static_cast<size_t>(k)]), {1, 1}));
    }
    return mean_all(concat_rows(ces));
}

// Pre-align: project the latent to K embedding rows and train the caption NLL
// with those rows standing in for the image placeholder. The latent itself is
// a sampled constant, so the denoiser can never receive gradients here.
inline Tensor pre_align_forward(const ToyLlm& llm, const Projection& proj, const Tensor& latent,
                                const std::vector<int>& instruction_ids, int placeholder_id,
                                const std::vector<int>& target_ids) {
    return teacher_forced_nll_spliced(llm, instruction_ids, placeholder_id, proj.forward(latent), target_ids);
}

// (1/N) sum of squared row distances.
inline Tensor loss_itdm(const Tensor& d_diff, const Tensor& d_llm) {
    if (d_diff.shape() != d_llm.shape())
        throw ShapeError("loss_itdm: " + shape_str(d_diff.shape()) + " vs " + shape_str(d_llm.shape()));
    auto diff = sub(d_diff, d_llm);
    return scale(sum_all(mul(diff, diff)), 1.0 / double(d_diff.rows()));
}

struct MidAlignLoss {
    Tensor mid;
    Tensor itg;
    Tensor itdm;
};

// Mid-align: the pooled projected latent serves as the decoder's only memory
// row while the pooled encoder caption encoding anchors the distance loss.
// Only the projection may be trainable; the LLM must arrive frozen.
inline MidAlignLoss mid_align_forward(const ToyLlm& llm, const ParamList& llm_params, const Projection& proj,
                                      const Tensor& latent, const std::vector<int>& caption_ids,
                                      const std::vector<int>& target_ids, int bos_id) {
    if (llm.cfg.variant != LlmVariant::encoder_decoder)
        throw ConfigError("mid-align requires the encoder-decoder LLM variant");
    require_frozen(llm_params, "llm");

    auto d_llm = mean_rows(llm.forward_encoder(llm.embed_ids(caption_ids)));
    auto d_diff = mean_rows(proj.forward(latent));
    auto itdm = loss_itdm(d_diff, d_llm);
    auto itg = teacher_forced_nll_encdec(llm, d_diff, bos_id, target_ids);
    return {add(itg, itdm), itg, itdm};
}

}  // namespace duogen
