// SPDX-License-Identifier: Apache-2.0
//
// Named finite-difference checks covering every training loss in the project,
// run on micro geometries so the whole suite stays in seconds. Shared by the
// gradcheck CLI command and the release gate.

#pragma once

#include <string>
#include <vector>

#include "duogen/adapter.hpp"
#include "duogen/alignment.hpp"
#include "duogen/data.hpp"
#include "duogen/denoiser.hpp"
#include "duogen/gradcheck.hpp"
#include "duogen/llm.hpp"
#include "duogen/templates.hpp"
#include "duogen/text_codec.hpp"

namespace duogen {

struct SuiteEntry {
    std::string name;
    GradCheckResult result;
    double tol = 1e-5;
    bool pass = false;
};

namespace detail {

inline JointDenoiserConfig suite_denoiser_config() {
    JointDenoiserConfig cfg;
    cfg.image_size = 4;
    cfg.patch = 2;
    cfg.width = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.lat_rows = 2;
    cfg.lat_cols = 4;
    cfg.T = 10;
    return cfg;
}

inline LlmConfig suite_llm_config(LlmVariant variant) {
    LlmConfig cfg;
    cfg.width = 8;
    cfg.blocks = 1;
    cfg.heads = 2;
    cfg.max_positions = 48;
    cfg.variant = variant;
    return cfg;
}

inline NoisyBatch suite_batch(const JointDenoiserConfig& cfg, const NoiseSchedule& sched, size_t n,
                              TimestepRange range, uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor> x0s, y0s;
    for (size_t i = 0; i < n; ++i) {
        x0s.push_back(Tensor::randn({cfg.image_size, cfg.image_size}, rng));
        y0s.push_back(Tensor::randn({cfg.lat_rows, cfg.lat_cols}, rng));
    }
    return make_noisy_batch(x0s, y0s, sched, range, rng);
}

inline std::vector<Tensor> param_tensors(ParamList params) {
    std::vector<Tensor> out;
    for (auto& p : params) out.push_back(p.tensor);
    return out;
}

}  // namespace detail

// Central differences on every parameter of every loss. Key-projection
// biases have exactly zero gradient (softmax shift invariance), so their FD
// noise is compared absolutely at the 1e-5 floor; h=1e-5 keeps truncation on
// live parameters under the same bound.
inline std::vector<SuiteEntry> run_gradient_suite() {
    std::vector<SuiteEntry> entries;
    auto record = [&entries](const std::string& name, GradCheckResult res) {
        SuiteEntry e;
        e.name = name;
        e.result = res;
        e.pass = res.ok(e.tol);
        entries.push_back(e);
    };
    const double h = 1e-5, floor = 1e-5;

    auto dcfg = detail::suite_denoiser_config();
    auto sched = make_schedule(dcfg.T, 1e-4, 0.02);
    Rng drng(211);
    JointDenoiser den(dcfg, drng);
    auto fn = batch_fn(den);
    auto den_tensors = detail::param_tensors(den.params());

    {
        // single-network DDPM objective: both modalities share one timestep
        Rng rng(212);
        std::vector<Tensor> x0s{Tensor::randn({dcfg.image_size, dcfg.image_size}, rng)};
        std::vector<Tensor> y0s{Tensor::randn({dcfg.lat_rows, dcfg.lat_cols}, rng)};
        NoisyBatch batch;
        int t = 4;
        auto ex = Tensor::from_data(x0s[0].shape(), rng.normal_vec(x0s[0].numel()));
        auto ey = Tensor::from_data(y0s[0].shape(), rng.normal_vec(y0s[0].numel()));
        batch.x0 = x0s;
        batch.y0 = y0s;
        batch.eps_x = {ex};
        batch.eps_y = {ey};
        batch.tx = {t};
        batch.ty = {t};
        batch.xt = {q_sample(x0s[0], t, ex, sched)};
        batch.yt = {q_sample(y0s[0], t, ey, sched)};
        record("ddpm_noise_mse", grad_check<double>([&] { return loss_unidiffuser(batch, fn); }, den_tensors, h,
                                                    floor));
    }
    {
        auto batch = detail::suite_batch(dcfg, sched, 2, TimestepRange::joint_full, 213);
        record("unidiffuser", grad_check<double>([&] { return loss_unidiffuser(batch, fn); }, den_tensors, h,
                                                 floor));
    }
    {
        auto batch = detail::suite_batch(dcfg, sched, 2, TimestepRange::finetune_positive, 214);
        record("bidiffuser", grad_check<double>([&] { return loss_bidiffuser(batch, fn, 0.7); }, den_tensors, h,
                                                floor));
    }

    auto vocab = build_world_vocab();
    Rng lrng(215);
    ToyLlm llm(detail::suite_llm_config(LlmVariant::decoder_only), vocab.size(), lrng);
    auto llm_tensors = detail::param_tensors(llm.params());

    {
        Rng rng(216);
        Projection proj(dcfg.lat_cols, llm.cfg.width, rng);
        auto latent = Tensor::randn({dcfg.lat_rows, dcfg.lat_cols}, rng);
        auto instruction = tokenize(
            vocab, render_template(TemplateTask::caption, {{"query", caption_queries()[0]}}, llm.cfg.variant));
        auto target = tokenize(vocab, "a small red square at center");
        target.push_back(vocab.eos());
        auto tensors = detail::param_tensors(proj.params());
        for (auto& t : llm_tensors) tensors.push_back(t);
        record("itg", grad_check<double>(
                          [&] {
                              return pre_align_forward(llm, proj, latent, instruction,
                                                       vocab.image_placeholder(), target);
                          },
                          tensors, h, floor));
    }
    {
        Rng rng(217);
        Projection proj(dcfg.lat_cols, llm.cfg.width, rng);
        auto latent = Tensor::randn({dcfg.lat_rows, dcfg.lat_cols}, rng);
        auto d_llm = Tensor::randn({1, llm.cfg.width}, rng);
        record("itdm", grad_check<double>(
                           [&] { return loss_itdm(mean_rows(proj.forward(latent)), d_llm); },
                           detail::param_tensors(proj.params()), h, floor));
    }

    Rng arng(218);
    AdapterConfig acfg;
    acfg.llm_width = llm.cfg.width;
    acfg.mlp_width = 6;
    acfg.clip_width = ClipEncoder::kLatCols;
    SurAdapter adapter(acfg, arng);
    ClipEncoder clip(vocab);
    auto den_params = den.params();
    freeze_all(den_params);

    {
        Rng rng(219);
        JointDenoiserConfig wide = dcfg;
        wide.lat_rows = ClipEncoder::kLatRows;
        wide.lat_cols = ClipEncoder::kLatCols;
        Rng wrng(220);
        JointDenoiser wden(wide, wrng);
        auto wfn = batch_fn(wden);
        auto wden_params = wden.params();
        freeze_all(wden_params);
        auto wsched = make_schedule(wide.T, 1e-4, 0.02);
        auto caption_ids = tokenize(vocab, "a big blue circle at center");
        std::vector<Tensor> x0s{Tensor::randn({wide.image_size, wide.image_size}, rng)};
        std::vector<int> txs{3};
        std::vector<Tensor> eps{Tensor::from_data(x0s[0].shape(), rng.normal_vec(x0s[0].numel()))};
        auto tensors = detail::param_tensors(adapter.params());
        for (auto& t : llm_tensors) tensors.push_back(t);
        record("ada", grad_check<double>(
                          [&] {
                              std::vector<Tensor> y0s{
                                  fused_condition(llm, adapter, clip, caption_ids, 0.4)};
                              return loss_ada_batch(x0s, y0s, wfn, wden_params, wsched, txs, eps);
                          },
                          tensors, h, floor));

        auto history = tokenize(
            vocab,
            render_template(TemplateTask::dialogue,
                            {{"history", dialogue_request_verb() + " a big blue circle at center"}},
                            llm.cfg.variant));
        auto target = tokenize(vocab, render_dialogue_target(dialogue_response_word(),
                                                             "a big blue circle at center"));
        target.push_back(vocab.eos());
        int tx = 5;
        auto eps_x = Tensor::from_data(x0s[0].shape(), Rng(221).normal_vec(x0s[0].numel()));

        record("t2t", grad_check<double>([&] { return loss_t2t(llm, history, target); }, llm_tensors, h, floor));
        record("t2i", grad_check<double>(
                          [&] {
                              return loss_all(llm, adapter, 0.4, history, target, clip, vocab, x0s[0], wfn,
                                              wden_params, wsched, tx, eps_x)
                                  .t2i;
                          },
                          tensors, h, floor));
        record("all", grad_check<double>(
                          [&] {
                              return loss_all(llm, adapter, 0.4, history, target, clip, vocab, x0s[0], wfn,
                                              wden_params, wsched, tx, eps_x)
                                  .all;
                          },
                          tensors, h, floor));
    }

    return entries;
}

}  // namespace duogen
