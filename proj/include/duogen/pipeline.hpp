// SPDX-License-Identifier: Apache-2.0
//
// End-to-end composition over the synthetic world: the System bundle, the
// training stages (joint pretraining, bidirectional fine-tuning, adapter,
// alignment, dialogue), and the inference paths (image-to-text,
// text-to-image, dialogue with automatic image rendering). Every inference
// call fills a replay record with the prompt, conditioning text, seed, and
// parameter hashes needed to reproduce it bit-exactly.

#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "duogen/adapter.hpp"
#include "duogen/alignment.hpp"
#include "duogen/checkpoint.hpp"
#include "duogen/data.hpp"
#include "duogen/denoiser.hpp"
#include "duogen/diffusion.hpp"
#include "duogen/llm.hpp"
#include "duogen/metrics.hpp"
#include "duogen/optim.hpp"
#include "duogen/templates.hpp"
#include "duogen/text_codec.hpp"

namespace duogen {

// ---------------------------------------------------------------------------
// Metric reporting

struct MetricReport {
    std::map<std::string, double> scalars;
    std::map<std::string, std::string> info;

    std::string to_json() const {
        std::string out = "{\"info\":{";
        bool first = true;
        for (const auto& [k, v] : info) {
            if (!first) out += ',';
            first = false;
            out += "\"" + detail::json_escape(k) + "\":\"" + detail::json_escape(v) + "\"";
        }
        out += "},\"scalars\":{";
        first = true;
        for (const auto& [k, v] : scalars) {
            if (!first) out += ',';
            first = false;
            out += "\"" + detail::json_escape(k) + "\":" + detail::format_double(v);
        }
        out += "}}";
        return out;
    }

    static MetricReport from_json(const std::string& text) {
        detail::JsonCursor cur{text, 0, 1};
        MetricReport rep;
        cur.expect('{');
        for (int section = 0; section < 2; ++section) {
            auto name = cur.parse_string();
            cur.expect(':');
            cur.expect('{');
            if (!cur.peek('}'))
                while (true) {
                    auto key = cur.parse_string();
                    cur.expect(':');
                    if (name == "info")
                        rep.info[key] = cur.parse_string();
                    else if (name == "scalars")
                        rep.scalars[key] = cur.parse_number();
                    else
                        throw ParseError("metric report: unknown section '" + name + "'", cur.pos);
                    if (cur.peek(',')) {
                        cur.expect(',');
                        continue;
                    }
                    break;
                }
            cur.expect('}');
            if (section == 0) cur.expect(',');
        }
        cur.expect('}');
        return rep;
    }
};

inline uint64_t params_hash(const ParamList& params) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](uint64_t bits) {
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& p : params) {
        mix(hash_string64(p.name));
        for (size_t i = 0; i < p.tensor.numel(); ++i) {
            double v = p.tensor.at(i);
            uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            mix(bits);
        }
    }
    return h;
}

// Concise view of a world caption: "a <size> <color> <shape> at <position>"
// drops to "a <color> <shape>". Anything that does not match the six-word
// grammar is returned unchanged.
inline std::string concise_caption(const std::string& caption) {
    std::istringstream in(caption);
    std::vector<std::string> words;
    std::string w;
    while (in >> w) words.push_back(w);
    if (words.size() != 6 || words[0] != "a" || words[4] != "at") return caption;
    return "a " + words[2] + " " + words[3];
}

// ---------------------------------------------------------------------------
// The system bundle

struct SystemConfig {
    uint64_t init_seed = 1;
    WorldSpec world;

    int patch = 4;
    int denoiser_width = 48;
    int denoiser_depth = 4;
    int denoiser_heads = 4;
    int T = 50;
    double beta_start = 2e-3;
    double beta_end = 0.4;

    LlmConfig llm;
    int adapter_mlp_width = 24;
    double lambda = 0.3;
};

inline SystemConfig make_default_system_config() {
    SystemConfig cfg;
    cfg.llm.width = 32;
    cfg.llm.blocks = 2;
    cfg.llm.heads = 2;
    cfg.llm.max_positions = 96;
    return cfg;
}

struct System {
    SystemConfig cfg;
    Vocab vocab;
    ClipEncoder clip;
    CaptionCodebook codebook;
    NoiseSchedule sched;
    JointDenoiserConfig dcfg;
    JointDenoiser denoiser;
    ToyLlm llm;
    Projection proj;
    SurAdapter adapter;

    std::vector<PairedSample> data;          // unit-range images, seed-shuffled
    std::vector<Tensor> train_images;        // [-1, 1]
    std::vector<std::vector<int>> caption_ids;
    std::vector<std::vector<int>> concise_ids;  // concise_caption token ids
    std::vector<Tensor> caption_latents;     // frozen text-encoder latents

    explicit System(const SystemConfig& c)
        : cfg(c),
          vocab(build_world_vocab()),
          clip(vocab),
          codebook(CaptionCodebook::build(all_captions(), clip)),
          sched(make_schedule(c.T, c.beta_start, c.beta_end)),
          dcfg(make_denoiser_config(c)),
          denoiser(make_denoiser(c, dcfg)),
          llm(make_llm(c, vocab)),
          proj(make_projection(c)),
          adapter(make_adapter(c)) {
        data = gen_dataset(c.world);
        for (const auto& s : data) {
            train_images.push_back(to_train_range(s.image));
            caption_ids.push_back(tokenize(vocab, s.caption));
            concise_ids.push_back(tokenize(vocab, concise_caption(s.caption)));
            caption_latents.push_back(clip.encode_text(s.caption));
        }
    }

    System(const System&) = delete;
    System& operator=(const System&) = delete;

    ParamList denoiser_params() { return denoiser.params(); }
    ParamList llm_params() { return llm.params(); }
    ParamList proj_params() { return proj.params(); }
    ParamList adapter_params() { return adapter.params(); }
    ParamList all_params() {
        ParamList all = denoiser.params();
        for (auto& p : llm.params()) all.push_back(p);
        for (auto& p : proj.params()) all.push_back(p);
        for (auto& p : adapter.params()) all.push_back(p);
        return all;
    }
    std::string system_hash() { return hash_hex(params_hash(all_params())); }

  private:
    static JointDenoiserConfig make_denoiser_config(const SystemConfig& c) {
        JointDenoiserConfig d;
        d.image_size = c.world.image_size;
        d.patch = c.patch;
        d.width = c.denoiser_width;
        d.depth = c.denoiser_depth;
        d.heads = c.denoiser_heads;
        d.lat_rows = ClipEncoder::kLatRows;
        d.lat_cols = ClipEncoder::kLatCols;
        d.T = c.T;
        return d;
    }
    static JointDenoiser make_denoiser(const SystemConfig& c, const JointDenoiserConfig& d) {
        Rng rng(splitmix64(c.init_seed ^ hash_string64("init-denoiser")));
        return JointDenoiser(d, rng);
    }
    static ToyLlm make_llm(const SystemConfig& c, const Vocab& vocab) {
        Rng rng(splitmix64(c.init_seed ^ hash_string64("init-llm")));
        return ToyLlm(c.llm, vocab.size(), rng);
    }
    static Projection make_projection(const SystemConfig& c) {
        Rng rng(splitmix64(c.init_seed ^ hash_string64("init-projection")));
        return Projection(ClipEncoder::kLatCols, c.llm.width, rng);
    }
    static SurAdapter make_adapter(const SystemConfig& c) {
        Rng rng(splitmix64(c.init_seed ^ hash_string64("init-adapter")));
        AdapterConfig a;
        a.llm_width = c.llm.width;
        a.mlp_width = c.adapter_mlp_width;
        a.clip_width = ClipEncoder::kLatCols;
        return SurAdapter(a, rng);
    }
};

// ---------------------------------------------------------------------------
// Training stages

struct StageResult {
    std::map<std::string, double> metrics;
    std::vector<std::string> log;
};

namespace detail {

inline std::vector<size_t> draw_batch(Rng& rng, size_t n, int batch) {
    std::vector<size_t> idx;
    for (int b = 0; b < batch; ++b) idx.push_back(size_t(rng.randint(0, int64_t(n) - 1)));
    return idx;
}

inline void audit_frozen(const ParamList& frozen, uint64_t expected, const char* stage) {
    if (params_hash(frozen) != expected)
        throw ContractError(std::string(stage) + ": a frozen parameter changed between checkpoints");
}

}  // namespace detail

// Joint denoising over both modalities with timesteps drawn from the full
// range including 0.
inline StageResult pretrain_joint(System& sys, int steps, int batch, double lr, uint64_t seed) {
    StageResult res;
    auto params = sys.denoiser_params();
    unfreeze_all(params);
    AdamW opt(params, make_optim_config(lr, steps));
    auto fn = batch_fn(sys.denoiser);
    Rng rng(splitmix64(seed ^ hash_string64("pretrain-joint")));

    double first = 0.0, last = 0.0;
    for (int step = 0; step < steps; ++step) {
        auto idx = detail::draw_batch(rng, sys.data.size(), batch);
        std::vector<Tensor> xs, ys;
        for (auto i : idx) {
            xs.push_back(sys.train_images[i]);
            ys.push_back(sys.caption_latents[i]);
        }
        auto nb = make_noisy_batch(xs, ys, sys.sched, TimestepRange::joint_full, rng);
        opt.zero_grad();
        auto loss = loss_unidiffuser(nb, fn);
        loss.backward();
        double v = loss.item();
        opt.step();
        if (step == 0) first = v;
        last = v;
        res.log.push_back(std::to_string(step) + "," + detail::format_double(v));
    }
    res.metrics["steps"] = steps;
    res.metrics["loss_first"] = first;
    res.metrics["loss_last"] = last;
    return res;
}

// Bidirectional conditional loss over the whole training set with a fixed
// noise draw, for before/after comparisons.
inline double eval_bidiffuser_loss(System& sys, double alpha, uint64_t seed) {
    NoGradGuard ng;
    Rng rng(splitmix64(seed ^ hash_string64("eval-bidiffuser")));
    auto nb = make_noisy_batch(sys.train_images, sys.caption_latents, sys.sched, TimestepRange::finetune_positive,
                               rng);
    return loss_bidiffuser(nb, batch_fn(sys.denoiser), alpha).item();
}

inline StageResult finetune_bidiffuser(System& sys, int steps, int batch, double alpha, double lr, uint64_t seed) {
    StageResult res;
    auto params = sys.denoiser_params();
    unfreeze_all(params);
    AdamW opt(params, make_optim_config(lr, steps));
    auto fn = batch_fn(sys.denoiser);
    Rng rng(splitmix64(seed ^ hash_string64("finetune-bidiffuser")));

    const uint64_t eval_seed = splitmix64(seed ^ hash_string64("finetune-eval"));
    double start_ld = eval_bidiffuser_loss(sys, alpha, eval_seed);
    for (int step = 0; step < steps; ++step) {
        auto idx = detail::draw_batch(rng, sys.data.size(), batch);
        std::vector<Tensor> xs, ys;
        for (auto i : idx) {
            xs.push_back(sys.train_images[i]);
            ys.push_back(sys.caption_latents[i]);
        }
        auto nb = make_noisy_batch(xs, ys, sys.sched, TimestepRange::finetune_positive, rng);
        double v = finetune_step(nb, fn, alpha, opt);
        res.log.push_back(std::to_string(step) + "," + detail::format_double(v));
    }
    double end_ld = eval_bidiffuser_loss(sys, alpha, eval_seed);
    res.metrics["steps"] = steps;
    res.metrics["ld_start"] = start_ld;
    res.metrics["ld_end"] = end_ld;
    res.metrics["ld_ratio"] = end_ld / start_ld;
    return res;
}

// Adapter training with the denoiser frozen; the LLM is spectator-frozen too.
// Each batch element conditions on either the full caption or its concise
// view (coin flip), so the fused encoding also covers prompts that omit size
// and position. The frozen denoiser is hash-audited every step.
inline StageResult train_adapter(System& sys, int steps, int batch, double lr, uint64_t seed) {
    StageResult res;
    auto dparams = sys.denoiser_params();
    auto lparams = sys.llm_params();
    freeze_all(dparams);
    freeze_all(lparams);
    auto aparams = sys.adapter_params();
    unfreeze_all(aparams);
    const uint64_t frozen_hash = params_hash(dparams);

    AdamW opt(aparams, make_optim_config(lr, steps));
    auto fn = batch_fn(sys.denoiser);
    Rng rng(splitmix64(seed ^ hash_string64("train-adapter")));

    double first = 0.0, last = 0.0;
    for (int step = 0; step < steps; ++step) {
        auto idx = detail::draw_batch(rng, sys.data.size(), batch);
        std::vector<Tensor> xs, ys, eps;
        std::vector<int> txs;
        for (auto i : idx) {
            xs.push_back(sys.train_images[i]);
            const auto& ids = rng.randint(0, 1) == 1 ? sys.concise_ids[i] : sys.caption_ids[i];
            ys.push_back(fused_condition(sys.llm, sys.adapter, sys.clip, ids, sys.cfg.lambda));
            txs.push_back(int(rng.randint(1, sys.sched.T)));
            eps.push_back(Tensor::from_data(sys.train_images[i].shape(),
                                            rng.normal_vec(sys.train_images[i].numel())));
        }
        opt.zero_grad();
        auto loss = loss_ada_batch(xs, ys, fn, dparams, sys.sched, txs, eps);
        loss.backward();
        double v = loss.item();
        opt.step();
        detail::audit_frozen(dparams, frozen_hash, "train_adapter");
        if (step == 0) first = v;
        last = v;
        res.log.push_back(std::to_string(step) + "," + detail::format_double(v));
    }
    res.metrics["steps"] = steps;
    res.metrics["loss_first"] = first;
    res.metrics["loss_last"] = last;
    res.metrics["lambda"] = sys.cfg.lambda;
    return res;
}

// Pooled LLM caption representation used by the alignment metrics: encoder
// output for the encoder-decoder variant, token+position embeddings otherwise.
inline Tensor system_d_llm(const System& sys, const std::vector<int>& ids) {
    NoGradGuard ng;
    auto embeds = sys.llm.embed_ids(ids);
    if (sys.llm.cfg.variant == LlmVariant::encoder_decoder)
        return mean_rows(sys.llm.forward_encoder(embeds)).detach();
    return mean_rows(embeds).detach();
}

inline AlignmentMetrics system_alignment_metrics(System& sys, const std::vector<Tensor>& latents) {
    NoGradGuard ng;
    const int W = sys.cfg.llm.width;
    const int N = int(latents.size());
    std::vector<double> diff_rows, llm_rows;
    for (int i = 0; i < N; ++i) {
        auto d_diff = mean_rows(sys.proj.forward(latents[size_t(i)]));
        auto d_llm = system_d_llm(sys, sys.caption_ids[size_t(i)]);
        for (int c = 0; c < W; ++c) {
            diff_rows.push_back(d_diff.at(0, c));
            llm_rows.push_back(d_llm.at(0, c));
        }
    }
    return alignment_metrics(Tensor::from_data({N, W}, std::move(diff_rows)),
                             Tensor::from_data({N, W}, std::move(llm_rows)));
}

enum class AlignManner { pre, mid };

// Alignment stage over precomputed image latents (index-aligned with
// sys.data). Pre splices projected rows into the caption instruction and can
// co-train the LLM; mid pools through the encoder-decoder bridge and trains
// the projection only. Metric log rows: step,itg,itdm,cosine,mse.
inline StageResult train_alignment(System& sys, AlignManner manner, const std::vector<Tensor>& latents, int steps,
                                   int batch, double lr, bool freeze_llm, uint64_t seed) {
    if (latents.size() != sys.data.size())
        throw ShapeError("train_alignment: " + std::to_string(latents.size()) + " latents for " +
                         std::to_string(sys.data.size()) + " samples");
    if (manner == AlignManner::mid && !freeze_llm)
        throw ConfigError("mid-align trains the projection only; freeze-llm must stay true");

    StageResult res;
    auto dparams = sys.denoiser_params();
    freeze_all(dparams);
    auto lparams = sys.llm_params();
    auto pparams = sys.proj_params();
    unfreeze_all(pparams);

    ParamList trained = pparams;
    if (freeze_llm) {
        freeze_all(lparams);
    } else {
        unfreeze_all(lparams);
        for (auto& p : lparams) trained.push_back(p);
    }
    const uint64_t frozen_llm_hash = freeze_llm ? params_hash(lparams) : 0;
    const uint64_t frozen_den_hash = params_hash(dparams);

    AdamW opt(trained, make_optim_config(lr, steps));
    Rng rng(splitmix64(seed ^ hash_string64("train-alignment")));

    auto before = system_alignment_metrics(sys, latents);
    res.metrics["cosine_before"] = before.avg_cosine;
    res.metrics["mse_before"] = before.avg_mse;
    double last_cosine = before.avg_cosine, last_mse = before.avg_mse;

    const int placeholder = sys.vocab.image_placeholder();
    for (int step = 0; step < steps; ++step) {
        auto idx = detail::draw_batch(rng, sys.data.size(), batch);
        opt.zero_grad();
        double itg_v = 0.0, itdm_v = 0.0;
        std::vector<Tensor> losses;
        for (auto i : idx) {
            std::vector<int> target = sys.caption_ids[i];
            target.push_back(sys.vocab.eos());
            if (manner == AlignManner::pre) {
                const auto& query = caption_queries()[size_t(step) % caption_queries().size()];
                auto instruction =
                    tokenize(sys.vocab, render_template(TemplateTask::caption, {{"query", query}},
                                                        sys.llm.cfg.variant));
                auto nll = pre_align_forward(sys.llm, sys.proj, latents[i], instruction, placeholder, target);
                itg_v += nll.item();
                losses.push_back(reshape(nll, {1, 1}));
            } else {
                auto mid = mid_align_forward(sys.llm, lparams, sys.proj, latents[i], sys.caption_ids[i], target,
                                             sys.vocab.bos());
                itg_v += mid.itg.item();
                itdm_v += mid.itdm.item();
                losses.push_back(reshape(mid.mid, {1, 1}));
            }
        }
        auto loss = mean_all(concat_rows(losses));
        loss.backward();
        opt.step();
        detail::audit_frozen(dparams, frozen_den_hash, "train_alignment");
        if (freeze_llm) detail::audit_frozen(lparams, frozen_llm_hash, "train_alignment");

        if (step % 25 == 0 || step == steps - 1) {
            auto m = system_alignment_metrics(sys, latents);
            last_cosine = m.avg_cosine;
            last_mse = m.avg_mse;
        }
        res.log.push_back(std::to_string(step) + "," + detail::format_double(itg_v / double(idx.size())) + "," +
                          detail::format_double(itdm_v / double(idx.size())) + "," +
                          detail::format_double(last_cosine) + "," + detail::format_double(last_mse));
    }

    auto after = system_alignment_metrics(sys, latents);
    res.metrics["steps"] = steps;
    res.metrics["cosine_after"] = after.avg_cosine;
    res.metrics["mse_after"] = after.avg_mse;
    res.metrics["mse_improvement"] = after.avg_mse > 0.0 ? before.avg_mse / after.avg_mse : 1e300;
    return res;
}

// Dialogue stage: the LLM learns to answer a drawing request with a visible
// response plus a caption span, and the span's hidden states feed the adapter
// so the denoising loss shapes them too. Denoiser frozen throughout.
inline StageResult train_dialogue(System& sys, int steps, int batch, double lr, uint64_t seed) {
    StageResult res;
    auto dparams = sys.denoiser_params();
    freeze_all(dparams);
    const uint64_t frozen_hash = params_hash(dparams);
    auto lparams = sys.llm_params();
    auto aparams = sys.adapter_params();
    unfreeze_all(lparams);
    unfreeze_all(aparams);
    ParamList trained = lparams;
    for (auto& p : aparams) trained.push_back(p);

    AdamW opt(trained, make_optim_config(lr, steps));
    auto fn = batch_fn(sys.denoiser);
    Rng rng(splitmix64(seed ^ hash_string64("train-dialogue")));

    double first = 0.0, last = 0.0, first_t2t = 0.0, last_t2t = 0.0;
    for (int step = 0; step < steps; ++step) {
        auto idx = detail::draw_batch(rng, sys.data.size(), batch);
        opt.zero_grad();
        double all_v = 0.0, t2t_v = 0.0;
        std::vector<Tensor> losses;
        for (auto i : idx) {
            const auto& caption = sys.data[i].caption;
            auto history = tokenize(
                sys.vocab, render_template(TemplateTask::dialogue,
                                           {{"history", dialogue_request_verb() + " " + caption}},
                                           sys.llm.cfg.variant));
            auto target = tokenize(sys.vocab, render_dialogue_target(dialogue_response_word(), caption));
            target.push_back(sys.vocab.eos());
            int tx = int(rng.randint(1, sys.sched.T));
            auto eps = Tensor::from_data(sys.train_images[i].shape(), rng.normal_vec(sys.train_images[i].numel()));
            auto dl = loss_all(sys.llm, sys.adapter, sys.cfg.lambda, history, target, sys.clip, sys.vocab,
                               sys.train_images[i], fn, dparams, sys.sched, tx, eps);
            all_v += dl.all.item();
            t2t_v += dl.t2t.item();
            losses.push_back(reshape(dl.all, {1, 1}));
        }
        auto loss = mean_all(concat_rows(losses));
        loss.backward();
        opt.step();
        detail::audit_frozen(dparams, frozen_hash, "train_dialogue");
        all_v /= double(idx.size());
        t2t_v /= double(idx.size());
        if (step == 0) {
            first = all_v;
            first_t2t = t2t_v;
        }
        last = all_v;
        last_t2t = t2t_v;
        res.log.push_back(std::to_string(step) + "," + detail::format_double(all_v) + "," +
                          detail::format_double(t2t_v));
    }
    res.metrics["steps"] = steps;
    res.metrics["loss_first"] = first;
    res.metrics["loss_last"] = last;
    res.metrics["t2t_first"] = first_t2t;
    res.metrics["t2t_last"] = last_t2t;
    return res;
}

// ---------------------------------------------------------------------------
// Inference

struct ReplayLog {
    std::string task;
    std::string prompt;             // exact rendered template string, "" if none
    std::string conditioning_text;  // text conditioning the image branch, "" if none
    uint64_t seed = 0;
    std::string system_hash;
};

// One latent per training image from the bidirectional text branch,
// deterministic per (seed, index).
inline std::vector<Tensor> bidiffuser_image_latents(System& sys, uint64_t seed) {
    auto fn = batch_fn(sys.denoiser);
    std::vector<Tensor> latents;
    for (size_t i = 0; i < sys.train_images.size(); ++i)
        latents.push_back(diffusion_image_to_text_latent(sys.train_images[i], fn, ClipEncoder::kLatRows,
                                                         ClipEncoder::kLatCols, sys.sched,
                                                         GuidanceConfig{1.0, UncondMode::null_token},
                                                         splitmix64(seed ^ (0x9e3779b97f4a7c15ULL * (i + 1)))));
    return latents;
}

inline uint64_t latent_seed_for_index(uint64_t seed, size_t i) {
    return splitmix64(seed ^ (0x9e3779b97f4a7c15ULL * (i + 1)));
}

enum class ImageTask { caption, vqa };

struct ImageToTextResult {
    std::string text;
    Tensor latent;
    ReplayLog replay;
};

// Image -> text-branch latent -> projected rows spliced into the instruction
// -> greedy decoding.
inline ImageToTextResult image_to_text(System& sys, const Tensor& image01, ImageTask task,
                                       const std::string& question, uint64_t seed, int query_index = 0) {
    NoGradGuard ng;
    auto train_img = to_train_range(image01);
    auto latent = diffusion_image_to_text_latent(train_img, batch_fn(sys.denoiser), ClipEncoder::kLatRows,
                                                 ClipEncoder::kLatCols, sys.sched,
                                                 GuidanceConfig{1.0, UncondMode::null_token}, seed);

    std::string prompt;
    if (task == ImageTask::caption) {
        const auto& q = caption_queries()[size_t(query_index) % caption_queries().size()];
        prompt = render_template(TemplateTask::caption, {{"query", q}}, sys.llm.cfg.variant);
    } else {
        if (question.empty()) throw ConfigError("vqa needs a question");
        prompt = render_template(TemplateTask::vqa_short, {{"question", question}}, sys.llm.cfg.variant);
    }
    auto instruction = tokenize(sys.vocab, prompt);
    auto seq = spliced_instruction_embeds(sys.llm, instruction, sys.vocab.image_placeholder(),
                                          sys.proj.forward(latent));
    auto out_ids = generate_greedy(sys.llm, &seq, {}, sys.vocab.eos(), 16);

    ImageToTextResult res;
    res.text = detokenize(sys.vocab, out_ids);
    res.latent = latent;
    res.replay = {task == ImageTask::caption ? "caption" : "vqa", prompt, "", seed, sys.system_hash()};
    return res;
}

struct TextToImageResult {
    Tensor image;  // unit range
    ReplayLog replay;
};

// CFG-guided reverse diffusion on the image branch, conditioned on the fused
// (or raw, without the adapter) text encoding of the description.
inline TextToImageResult text_to_image(System& sys, const std::string& description, const GuidanceConfig& guide,
                                       uint64_t seed, bool use_adapter = true) {
    NoGradGuard ng;
    auto ids = tokenize(sys.vocab, description);
    Tensor y0 = use_adapter ? fused_condition(sys.llm, sys.adapter, sys.clip, ids, sys.cfg.lambda)
                            : sys.clip.encode(ids);
    y0 = y0.detach();

    auto fn = batch_fn(sys.denoiser);
    DenoiseFn image_branch = [&fn](const Tensor& x, int t, const Tensor* cond, int cond_t) {
        if (!cond) throw ContractError("text-to-image sampling always conditions on a text latent");
        return fn({x}, {*cond}, {t}, {cond_t})[0].first;
    };
    auto sample = sample_loop(image_branch, {sys.cfg.world.image_size, sys.cfg.world.image_size}, &y0, sys.sched,
                              guide, seed);

    TextToImageResult res;
    res.image = to_unit_range(sample);
    res.replay = {"t2i", "", description, seed, sys.system_hash()};
    return res;
}

struct DialogueResult {
    std::string visible_text;
    std::string raw_generation;
    std::optional<Tensor> image;
    bool parse_warning = false;
    ReplayLog replay;
};

// Renders the dialogue template, decodes greedily, splits out caption spans,
// and renders the first span to an image. Unbalanced generated markers fall
// back to text-only with the warning flag set.
inline DialogueResult dialogue_respond(System& sys, const std::string& history_text, const GuidanceConfig& guide,
                                       uint64_t seed) {
    DialogueResult res;
    auto prompt = render_template(TemplateTask::dialogue, {{"history", history_text}}, sys.llm.cfg.variant);
    auto ids = tokenize(sys.vocab, prompt);
    auto out_ids = generate_greedy(sys.llm, nullptr, ids, sys.vocab.eos(), 24);
    res.raw_generation = detokenize(sys.vocab, out_ids);
    res.replay = {"dialogue", prompt, "", seed, sys.system_hash()};

    try {
        auto [visible, captions] = parse_img_spans(res.raw_generation);
        res.visible_text = visible;
        if (!captions.empty()) {
            res.replay.conditioning_text = captions.front();
            auto t2i = text_to_image(sys, captions.front(), guide,
                                     splitmix64(seed ^ hash_string64("dialogue-image")));
            res.image = t2i.image;
        }
    } catch (const ParseError&) {
        res.visible_text = res.raw_generation;
        res.parse_warning = true;
    }
    return res;
}

}  // namespace duogen
