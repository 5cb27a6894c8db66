// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "duogen/pipeline.hpp"

using namespace duogen;

namespace {

SystemConfig tiny_config(uint64_t init_seed = 7) {
    SystemConfig cfg = make_default_system_config();
    cfg.init_seed = init_seed;
    cfg.denoiser_width = 16;
    cfg.denoiser_depth = 1;
    cfg.denoiser_heads = 2;
    cfg.T = 6;
    cfg.llm.width = 16;
    cfg.llm.blocks = 1;
    cfg.llm.heads = 2;
    cfg.adapter_mlp_width = 8;
    return cfg;
}

bool same_bits(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (size_t i = 0; i < a.numel(); ++i) {
        double av = a.at(i), bv = b.at(i);
        if (std::memcmp(&av, &bv, sizeof av) != 0) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("system construction is deterministic per seed") {
    System a(tiny_config(7)), b(tiny_config(7)), c(tiny_config(8));
    REQUIRE(a.system_hash() == b.system_hash());
    REQUIRE(a.system_hash() != c.system_hash());
    REQUIRE(a.data.size() == 120);
    REQUIRE(a.caption_latents.size() == 120);
    REQUIRE(a.caption_ids.size() == 120);
    REQUIRE(same_bits(a.train_images[5], to_train_range(a.data[5].image)));

    auto idx = a.codebook.decode_index(a.caption_latents[17]);
    REQUIRE(a.codebook.captions[size_t(idx)] == a.data[17].caption);
}

TEST_CASE("metric report json roundtrips losslessly") {
    MetricReport rep;
    rep.scalars["ld_end"] = 0.1234567890123456789;
    rep.scalars["neg"] = -1e-17;
    rep.scalars["steps"] = 2000;
    rep.info["task"] = "finetune";
    rep.info["quoted"] = "say \"hi\" \\ done";

    auto text = rep.to_json();
    auto back = MetricReport::from_json(text);
    REQUIRE(back.scalars.size() == 3);
    REQUIRE(back.info.size() == 2);
    for (const auto& [k, v] : rep.scalars) {
        REQUIRE(back.scalars.count(k) == 1);
        REQUIRE(std::memcmp(&back.scalars[k], &v, sizeof v) == 0);
    }
    REQUIRE(back.info == rep.info);
    REQUIRE(back.to_json() == text);
    REQUIRE(text.find("\"scalars\"") != std::string::npos);

    REQUIRE_THROWS_AS(MetricReport::from_json("{\"bogus\":{\"a\":1},\"scalars\":{}}"), ParseError);
}

TEST_CASE("params hash tracks content and names") {
    System sys(tiny_config());
    auto params = sys.denoiser_params();
    auto h0 = params_hash(params);
    REQUIRE(h0 == params_hash(params));

    double saved = params[0].tensor.at(0);
    params[0].tensor.at(0) = saved + 1.0;
    REQUIRE(params_hash(params) != h0);
    params[0].tensor.at(0) = saved;
    REQUIRE(params_hash(params) == h0);

    auto renamed = params;
    renamed[0].name = "other";
    REQUIRE(params_hash(renamed) != h0);
}

TEST_CASE("joint pretraining runs deterministically") {
    System a(tiny_config()), b(tiny_config());
    auto ra = pretrain_joint(a, 8, 3, 1e-3, 42);
    auto rb = pretrain_joint(b, 8, 3, 1e-3, 42);
    REQUIRE(ra.log == rb.log);
    REQUIRE(ra.log.size() == 8);
    REQUIRE(a.system_hash() == b.system_hash());
    REQUIRE(ra.metrics.at("steps") == 8.0);
    REQUIRE(ra.metrics.at("loss_first") > 0.0);

    System c(tiny_config());
    auto rc = pretrain_joint(c, 8, 3, 1e-3, 43);
    REQUIRE(rc.log != ra.log);
}

TEST_CASE("bidirectional finetune evaluates on a fixed noise draw") {
    System sys(tiny_config());
    auto res = finetune_bidiffuser(sys, 6, 3, 0.5, 1e-3, 11);
    REQUIRE(res.log.size() == 6);
    REQUIRE(res.metrics.at("ld_start") > 0.0);
    REQUIRE(res.metrics.at("ld_end") > 0.0);
    REQUIRE(res.metrics.at("ld_ratio") == res.metrics.at("ld_end") / res.metrics.at("ld_start"));

    const uint64_t eval_seed = splitmix64(11 ^ hash_string64("finetune-eval"));
    REQUIRE(eval_bidiffuser_loss(sys, 0.5, eval_seed) == res.metrics.at("ld_end"));
    REQUIRE(eval_bidiffuser_loss(sys, 0.5, eval_seed) == eval_bidiffuser_loss(sys, 0.5, eval_seed));
}

TEST_CASE("adapter stage trains the adapter only") {
    System sys(tiny_config());
    auto dhash = params_hash(sys.denoiser_params());
    auto lhash = params_hash(sys.llm_params());
    auto ahash = params_hash(sys.adapter_params());

    auto res = train_adapter(sys, 4, 2, 1e-3, 5);
    REQUIRE(res.log.size() == 4);
    REQUIRE(res.metrics.at("lambda") == sys.cfg.lambda);
    REQUIRE(params_hash(sys.denoiser_params()) == dhash);
    REQUIRE(params_hash(sys.llm_params()) == lhash);
    REQUIRE(params_hash(sys.adapter_params()) != ahash);
}

TEST_CASE("zero-step stages leave every parameter untouched") {
    System sys(tiny_config());
    auto full = params_hash(sys.all_params());

    REQUIRE(pretrain_joint(sys, 0, 2, 1e-3, 1).log.empty());
    REQUIRE(finetune_bidiffuser(sys, 0, 2, 0.5, 1e-3, 1).metrics.at("ld_ratio") == 1.0);
    REQUIRE(train_adapter(sys, 0, 2, 1e-3, 1).log.empty());
    auto ares = train_alignment(sys, AlignManner::pre, sys.caption_latents, 0, 2, 1e-3, true, 1);
    REQUIRE(ares.metrics.at("cosine_before") == ares.metrics.at("cosine_after"));
    REQUIRE(train_dialogue(sys, 0, 2, 1e-3, 1).log.empty());

    REQUIRE(params_hash(sys.all_params()) == full);
}

TEST_CASE("mid alignment trains projection only and reduces distance") {
    auto cfg = tiny_config();
    cfg.llm.variant = LlmVariant::encoder_decoder;
    System sys(cfg);

    REQUIRE_THROWS_AS(train_alignment(sys, AlignManner::mid, sys.caption_latents, 2, 2, 1e-3, false, 3),
                      ConfigError);
    std::vector<Tensor> short_latents(sys.caption_latents.begin(), sys.caption_latents.begin() + 10);
    REQUIRE_THROWS_AS(train_alignment(sys, AlignManner::mid, short_latents, 2, 2, 1e-3, true, 3), ShapeError);

    auto dhash = params_hash(sys.denoiser_params());
    auto lhash = params_hash(sys.llm_params());
    auto phash = params_hash(sys.proj_params());

    auto res = train_alignment(sys, AlignManner::mid, sys.caption_latents, 40, 8, 2e-2, true, 3);
    REQUIRE(params_hash(sys.denoiser_params()) == dhash);
    REQUIRE(params_hash(sys.llm_params()) == lhash);
    REQUIRE(params_hash(sys.proj_params()) != phash);
    REQUIRE(res.metrics.at("mse_after") < res.metrics.at("mse_before"));
    REQUIRE(res.metrics.at("mse_improvement") > 1.0);
    REQUIRE(res.log.size() == 40);
    for (const auto& row : res.log) REQUIRE(std::count(row.begin(), row.end(), ',') == 4);
}

TEST_CASE("pre alignment honors the llm freeze flag") {
    System frozen(tiny_config());
    auto lhash = params_hash(frozen.llm_params());
    train_alignment(frozen, AlignManner::pre, frozen.caption_latents, 3, 2, 1e-3, true, 9);
    REQUIRE(params_hash(frozen.llm_params()) == lhash);

    System open(tiny_config());
    auto lhash2 = params_hash(open.llm_params());
    auto phash2 = params_hash(open.proj_params());
    train_alignment(open, AlignManner::pre, open.caption_latents, 3, 2, 1e-3, false, 9);
    REQUIRE(params_hash(open.llm_params()) != lhash2);
    REQUIRE(params_hash(open.proj_params()) != phash2);
}

TEST_CASE("dialogue stage keeps the denoiser frozen") {
    System sys(tiny_config());
    auto dhash = params_hash(sys.denoiser_params());
    auto lhash = params_hash(sys.llm_params());
    auto ahash = params_hash(sys.adapter_params());

    auto res = train_dialogue(sys, 3, 2, 1e-3, 19);
    REQUIRE(res.log.size() == 3);
    REQUIRE(params_hash(sys.denoiser_params()) == dhash);
    REQUIRE(params_hash(sys.llm_params()) != lhash);
    REQUIRE(params_hash(sys.adapter_params()) != ahash);
    REQUIRE(res.metrics.count("t2t_last") == 1);
}

TEST_CASE("image latents are deterministic per seed and index") {
    System sys(tiny_config());
    auto l1 = bidiffuser_image_latents(sys, 31);
    auto l2 = bidiffuser_image_latents(sys, 31);
    REQUIRE(l1.size() == 120);
    REQUIRE(same_bits(l1[0], l2[0]));
    REQUIRE(same_bits(l1[77], l2[77]));
    REQUIRE_FALSE(same_bits(l1[0], l1[1]));

    auto single = diffusion_image_to_text_latent(sys.train_images[4], batch_fn(sys.denoiser),
                                                 ClipEncoder::kLatRows, ClipEncoder::kLatCols, sys.sched,
                                                 GuidanceConfig{1.0, UncondMode::null_token},
                                                 latent_seed_for_index(31, 4));
    REQUIRE(same_bits(single, l1[4]));
}

TEST_CASE("image to text replays deterministically") {
    System sys(tiny_config());
    auto r1 = image_to_text(sys, sys.data[3].image, ImageTask::caption, "", 101);
    auto r2 = image_to_text(sys, sys.data[3].image, ImageTask::caption, "", 101);
    REQUIRE(r1.text == r2.text);
    REQUIRE(same_bits(r1.latent, r2.latent));
    REQUIRE(r1.replay.task == "caption");
    REQUIRE(r1.replay.prompt ==
            render_template(TemplateTask::caption, {{"query", caption_queries()[0]}}, sys.llm.cfg.variant));
    REQUIRE(r1.replay.seed == 101);
    REQUIRE(r1.replay.system_hash == sys.system_hash());

    auto vqa = image_to_text(sys, sys.data[3].image, ImageTask::vqa, "what shape is in the image", 101);
    REQUIRE(vqa.replay.task == "vqa");
    REQUIRE(vqa.replay.prompt.find("what shape is in the image") != std::string::npos);
    REQUIRE_THROWS_AS(image_to_text(sys, sys.data[3].image, ImageTask::vqa, "", 101), ConfigError);
}

TEST_CASE("text to image with zero lambda matches the raw clip condition") {
    auto cfg = tiny_config();
    cfg.lambda = 0.0;
    System sys(cfg);
    GuidanceConfig guide{2.0, UncondMode::null_token};

    auto fused = text_to_image(sys, sys.data[9].caption, guide, 55, true);
    auto raw = text_to_image(sys, sys.data[9].caption, guide, 55, false);
    REQUIRE(same_bits(fused.image, raw.image));
    REQUIRE(fused.replay.conditioning_text == sys.data[9].caption);
    REQUIRE(fused.replay.task == "t2i");

    for (size_t i = 0; i < fused.image.numel(); ++i) {
        REQUIRE(fused.image.at(i) >= 0.0);
        REQUIRE(fused.image.at(i) <= 1.0);
    }
    REQUIRE_THROWS_AS(text_to_image(sys, "a purple dinosaur", guide, 55, true), VocabError);

    auto other_seed = text_to_image(sys, sys.data[9].caption, guide, 56, true);
    REQUIRE_FALSE(same_bits(fused.image, other_seed.image));
}

TEST_CASE("dialogue respond is deterministic and self-consistent") {
    System sys(tiny_config());
    GuidanceConfig guide{1.0, UncondMode::null_token};
    auto req = dialogue_request_verb() + " " + sys.data[0].caption;

    auto r1 = dialogue_respond(sys, req, guide, 77);
    auto r2 = dialogue_respond(sys, req, guide, 77);
    REQUIRE(r1.raw_generation == r2.raw_generation);
    REQUIRE(r1.visible_text == r2.visible_text);
    REQUIRE(r1.parse_warning == r2.parse_warning);
    REQUIRE(r1.image.has_value() == r2.image.has_value());
    REQUIRE(r1.replay.task == "dialogue");
    REQUIRE(r1.replay.prompt.find(req) != std::string::npos);

    if (r1.parse_warning) {
        REQUIRE_FALSE(r1.image.has_value());
        REQUIRE(r1.visible_text == r1.raw_generation);
    } else {
        REQUIRE(r1.image.has_value() == !r1.replay.conditioning_text.empty());
    }
    if (r1.image.has_value()) REQUIRE(same_bits(*r1.image, *r2.image));
}
