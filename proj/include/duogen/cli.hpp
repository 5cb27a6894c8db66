// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Every subcommand resolves a flat key=value config
// (defaults, then --config file, then flags), runs deterministically from the
// declared seeds, writes its artifacts under --out, and emits a MetricReport
// as JSON on stdout and in report.json. Unknown flags or subcommands print
// usage and exit 2; contract violations exit 1 with a diagnostic.

#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "duogen/checkpoint.hpp"
#include "duogen/config.hpp"
#include "duogen/gradient_suite.hpp"
#include "duogen/pipeline.hpp"

namespace duogen {

namespace detail {

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

inline const char* usage_text() {
    return
        "usage: duogen <command> [--flag value ...]\n"
        "\n"
        "commands:\n"
        "  gen-data             write the synthetic paired dataset as JSON lines\n"
        "                       flags: --out --seed\n"
        "  pretrain-joint       train the joint denoiser over all timesteps from scratch\n"
        "                       flags: --out --seed --steps --batch --lr\n"
        "  finetune-bidiffuser  bidirectional conditional fine-tune of a joint checkpoint\n"
        "                       flags: --out --seed --steps --batch --lr --alpha --init\n"
        "  train-adapter        train the conditioning adapter against a frozen denoiser\n"
        "                       flags: --out --seed --steps --batch --lr --lambda --init\n"
        "  align                train the latent-to-LLM projection (--manner pre|mid)\n"
        "                       flags: --out --seed --steps --batch --lr --manner\n"
        "                              --freeze-llm --latents-seed --init\n"
        "  train-dialogue       train the LLM + adapter on drawing-request dialogues\n"
        "                       flags: --out --seed --steps --batch --lr --lambda --init\n"
        "  generate             run one inference task (--task t2i|caption|vqa|dialogue)\n"
        "                       flags: --out --seed --task --prompt --index --guide\n"
        "                              --uncond --use-adapter --init\n"
        "  evaluate             compute a metric (--metric alignment|fid|bleu|perplexity|dataset)\n"
        "                       flags: --out --seed --metric --samples --latents-seed\n"
        "                              --guide --uncond --use-adapter --prompts --init\n"
        "  gradcheck            finite-difference check of every training loss\n"
        "                       flags: --out\n"
        "\n"
        "Every command also accepts --config <file> with one key=value per line;\n"
        "explicit flags override the file. Reruns with identical config and seeds\n"
        "reproduce every artifact bit for bit.\n";
}

inline RunConfig parse_command_line(const std::vector<std::string>& args, RunConfig cfg,
                                    const std::set<std::string>& allowed) {
    size_t i = 0;
    while (i < args.size()) {
        const auto& arg = args[i];
        if (arg.rfind("--", 0) != 0) throw UsageError("expected a --flag, got '" + arg + "'");
        auto key = arg.substr(2);
        if (key != "config" && allowed.count(key) == 0) throw UsageError("unknown flag '" + arg + "'");
        if (i + 1 >= args.size()) throw UsageError("flag '" + arg + "' needs a value");
        const auto& value = args[i + 1];
        if (key == "config")
            apply_config_file(cfg, value);
        else
            cfg.set(key, value);
        i += 2;
    }
    for (const auto& [k, v] : cfg.values)
        if (allowed.count(k) == 0) throw UsageError("unknown config key '" + k + "'");
    return cfg;
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << content;
}

inline std::string out_path(const RunConfig& cfg, const std::string& name) {
    return (std::filesystem::path(cfg.get_str("out")) / name).string();
}

inline void emit_run(const RunConfig& cfg, const MetricReport& report, const std::vector<std::string>& log = {}) {
    std::filesystem::create_directories(cfg.get_str("out"));
    write_text_file(out_path(cfg, "resolved.txt"), cfg.resolved());
    write_text_file(out_path(cfg, "report.json"), report.to_json() + "\n");
    if (!log.empty()) {
        std::string rows;
        for (const auto& r : log) rows += r + "\n";
        write_text_file(out_path(cfg, "log.csv"), rows);
    }
    std::cout << "resolved config:\n" << cfg.resolved() << report.to_json() << "\n";
}

inline SystemConfig cli_system_config(LlmVariant variant) {
    auto sys_cfg = make_default_system_config();
    sys_cfg.llm.variant = variant;
    return sys_cfg;
}

inline LlmVariant variant_from_name(const std::string& name) {
    if (name == "decoder-only") return LlmVariant::decoder_only;
    if (name == "encoder-decoder") return LlmVariant::encoder_decoder;
    throw ConfigError("unknown llm variant '" + name + "'");
}

inline const char* variant_name(LlmVariant v) {
    return v == LlmVariant::decoder_only ? "decoder-only" : "encoder-decoder";
}

// Loads a parameter group only when the checkpoint carries every array of the
// group at the right shape; anything else leaves the fresh initialization.
inline bool try_load_group(ParamList group, const Checkpoint& ckpt) {
    for (const auto& p : group) {
        const Tensor* src = ckpt.find(p.name);
        if (!src || src->shape() != p.tensor.shape()) return false;
    }
    load_into(group, ckpt);
    return true;
}

struct LoadedSystem {
    std::unique_ptr<System> sys;
    Checkpoint ckpt;
    bool llm_loaded = false;
};

inline LoadedSystem load_system(const RunConfig& cfg, const std::vector<std::string>& allowed_stages,
                                const std::string& what) {
    if (!cfg.has("init") || cfg.get_str("init").empty())
        throw ConfigError(what + " needs --init pointing at a checkpoint");
    LoadedSystem ls;
    ls.ckpt = load_checkpoint(cfg.get_str("init"));
    require_stage(ls.ckpt, allowed_stages, what);

    auto variant = LlmVariant::decoder_only;
    auto it = ls.ckpt.metadata.find("llm-variant");
    if (it != ls.ckpt.metadata.end()) variant = variant_from_name(it->second);

    auto sys_cfg = cli_system_config(variant);
    if (cfg.has("lambda")) sys_cfg.lambda = cfg.get_double("lambda");
    ls.sys = std::make_unique<System>(sys_cfg);

    auto den = ls.sys->denoiser_params();
    load_into(den, ls.ckpt);
    ls.llm_loaded = try_load_group(ls.sys->llm_params(), ls.ckpt);
    try_load_group(ls.sys->proj_params(), ls.ckpt);
    try_load_group(ls.sys->adapter_params(), ls.ckpt);
    return ls;
}

inline void save_system(System& sys, const RunConfig& cfg, const std::string& stage,
                        std::map<std::string, std::string> extra = {}) {
    std::map<std::string, std::string> meta = std::move(extra);
    meta["stage"] = stage;
    meta["llm-variant"] = variant_name(sys.llm.cfg.variant);
    meta["lambda"] = format_double(sys.cfg.lambda);
    meta["dataset-hash"] = hash_hex(dataset_hash(sys.data));
    auto params = sys.all_params();
    save_checkpoint(out_path(cfg, "model.ckpt"), meta, params);
}

inline MetricReport base_report(const RunConfig& cfg, const std::string& command) {
    MetricReport rep;
    rep.info["command"] = command;
    if (cfg.has("seed")) rep.info["seed"] = std::to_string(cfg.get_seed("seed"));
    return rep;
}

inline void fill_stage_metrics(MetricReport& rep, const StageResult& res) {
    for (const auto& [k, v] : res.metrics) rep.scalars[k] = v;
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_gen_data(const std::vector<std::string>& args) {
    auto cfg = parse_command_line(args, make_config({{"out", "runs/gen-data"}, {"seed", "1"}}),
                                  {"out", "seed"});
    WorldSpec spec;
    spec.seed = cfg.get_seed("seed");
    auto data = gen_dataset(spec);
    std::filesystem::create_directories(cfg.get_str("out"));
    save_dataset_jsonl(out_path(cfg, "dataset.jsonl"), data);

    auto rep = base_report(cfg, "gen-data");
    rep.scalars["samples"] = double(data.size());
    rep.scalars["image-size"] = double(spec.image_size);
    rep.info["dataset-hash"] = hash_hex(dataset_hash(data));
    emit_run(cfg, rep);
    return 0;
}

inline int cmd_pretrain_joint(const std::vector<std::string>& args) {
    auto cfg = parse_command_line(args,
                                  make_config({{"out", "runs/pretrain-joint"},
                                               {"seed", "1001"},
                                               {"steps", "1500"},
                                               {"batch", "4"},
                                               {"lr", "0.002"}}),
                                  {"out", "seed", "steps", "batch", "lr"});
    System sys(cli_system_config(LlmVariant::decoder_only));
    auto res = pretrain_joint(sys, int(cfg.get_int("steps")), int(cfg.get_int("batch")), cfg.get_double("lr"),
                              cfg.get_seed("seed"));
    std::filesystem::create_directories(cfg.get_str("out"));
    save_system(sys, cfg, kStageJoint);

    auto rep = base_report(cfg, "pretrain-joint");
    fill_stage_metrics(rep, res);
    rep.info["stage"] = kStageJoint;
    rep.info["checkpoint-hash"] = sys.system_hash();
    emit_run(cfg, rep, res.log);
    return 0;
}

inline int cmd_finetune_bidiffuser(const std::vector<std::string>& args) {
    auto cfg = parse_command_line(args,
                                  make_config({{"out", "runs/finetune-bidiffuser"},
                                               {"seed", "1002"},
                                               {"steps", "2000"},
                                               {"batch", "8"},
                                               {"lr", "0.002"},
                                               {"alpha", "1.0"},
                                               {"init", ""}}),
                                  {"out", "seed", "steps", "batch", "lr", "alpha", "init"});
    auto ls = load_system(cfg, {kStageJoint, kStageBidirectional}, "finetune-bidiffuser");
    auto res = finetune_bidiffuser(*ls.sys, int(cfg.get_int("steps")), int(cfg.get_int("batch")),
                                   cfg.get_double("alpha"), cfg.get_double("lr"), cfg.get_seed("seed"));
    std::filesystem::create_directories(cfg.get_str("out"));
    save_system(*ls.sys, cfg, kStageBidirectional, {{"alpha", format_double(cfg.get_double("alpha"))}});

    auto rep = base_report(cfg, "finetune-bidiffuser");
    fill_stage_metrics(rep, res);
    rep.info["stage"] = kStageBidirectional;
    rep.info["checkpoint-hash"] = ls.sys->system_hash();
    emit_run(cfg, rep, res.log);
    return 0;
}

inline int cmd_train_adapter(const std::vector<std::string>& args) {
    auto cfg = parse_command_line(args,
                                  make_config({{"out", "runs/train-adapter"},
                                               {"seed", "1006"},
                                               {"steps", "400"},
                                               {"batch", "4"},
                                               {"lr", "0.002"},
                                               {"lambda", "0.3"},
                                               {"init", ""}}),
                                  {"out", "seed", "steps", "batch", "lr", "lambda", "init"});
    auto ls = load_system(cfg, {kStageBidirectional, kStageAlignment, kStageDialogue}, "train-adapter");
    auto res = train_adapter(*ls.sys, int(cfg.get_int("steps")), int(cfg.get_int("batch")),
                             cfg.get_double("lr"), cfg.get_seed("seed"));
    std::filesystem::create_directories(cfg.get_str("out"));
    save_system(*ls.sys, cfg, kStageAdapter);

    auto rep = base_report(cfg, "train-adapter");
    fill_stage_metrics(rep, res);
    rep.info["stage"] = kStageAdapter;
    rep.info["checkpoint-hash"] = ls.sys->system_hash();
    emit_run(cfg, rep, res.log);
    return 0;
}

inline int cmd_align(const std::vector<std::string>& args) {
    auto cfg = parse_command_line(args,
                                  make_config({{"out", "runs/align"},
                                               {"seed", "1004"},
                                               {"steps", "3000"},
                                               {"batch", "8"},
                                               {"lr", "0.002"},
                                               {"manner", "pre"},
                                               {"freeze-llm", "false"},
                                               {"latents-seed", "1003"},
                                               {"init", ""}}),
                                  {"out", "seed", "steps", "batch", "lr", "manner", "freeze-llm",
                                   "latents-seed", "init"});
    const auto manner_name = cfg.get_str("manner");
    AlignManner manner;
    if (manner_name == "pre")
        manner = AlignManner::pre;
    else if (manner_name == "mid")
        manner = AlignManner::mid;
    else
        throw ConfigError("align: --manner must be pre or mid, got '" + manner_name + "'");

    if (!cfg.has("init") || cfg.get_str("init").empty())
        throw ConfigError("align needs --init pointing at a bidirectionally fine-tuned checkpoint");
    auto ckpt = load_checkpoint(cfg.get_str("init"));
    require_stage(ckpt, {kStageBidirectional, kStageAdapter, kStageAlignment, kStageDialogue}, "align");

    auto variant = manner == AlignManner::mid ? LlmVariant::encoder_decoder : LlmVariant::decoder_only;
    System sys(cli_system_config(variant));
    auto den = sys.denoiser_params();
    load_into(den, ckpt);
    auto meta_variant = ckpt.metadata.find("llm-variant");
    if (meta_variant != ckpt.metadata.end() && meta_variant->second == variant_name(variant)) {
        try_load_group(sys.llm_params(), ckpt);
        try_load_group(sys.proj_params(), ckpt);
    }

    auto latents = bidiffuser_image_latents(sys, cfg.get_seed("latents-seed"));
    auto res = train_alignment(sys, manner, latents, int(cfg.get_int("steps")), int(cfg.get_int("batch")),
                               cfg.get_double("lr"), cfg.get_bool("freeze-llm"), cfg.get_seed("seed"));
    std::filesystem::create_directories(cfg.get_str("out"));
    save_system(sys, cfg, kStageAlignment,
                {{"manner", manner_name},
                 {"freeze-llm", cfg.get_bool("freeze-llm") ? "true" : "false"},
                 {"latents-seed", std::to_string(cfg.get_seed("latents-seed"))}});

    auto rep = base_report(cfg, "align");
    fill_stage_metrics(rep, res);
    rep.info["stage"] = kStageAlignment;
    rep.info["manner"] = manner_name;
    rep.info["checkpoint-hash"] = sys.system_hash();
    emit_run(cfg, rep, res.log);
    return 0;
}

inline int cmd_train_dialogue(const std::vector<std::string>& args) {
    auto cfg = parse_command_line(args,
                                  make_config({{"out", "runs/train-dialogue"},
                                               {"seed", "1007"},
                                               {"steps", "400"},
                                               {"batch", "4"},
                                               {"lr", "0.002"},
                                               {"lambda", "0.3"},
                                               {"init", ""}}),
                                  {"out", "seed", "steps", "batch", "lr", "lambda", "init"});
    auto ls = load_system(cfg, {kStageAdapter, kStageAlignment, kStageDialogue}, "train-dialogue");
    auto res = train_dialogue(*ls.sys, int(cfg.get_int("steps")), int(cfg.get_int("batch")),
                              cfg.get_double("lr"), cfg.get_seed("seed"));
    std::filesystem::create_directories(cfg.get_str("out"));
    save_system(*ls.sys, cfg, kStageDialogue);

    auto rep = base_report(cfg, "train-dialogue");
    fill_stage_metrics(rep, res);
    rep.info["stage"] = kStageDialogue;
    rep.info["checkpoint-hash"] = ls.sys->system_hash();
    emit_run(cfg, rep, res.log);
    return 0;
}

inline std::string replay_record(const ReplayLog& replay, const std::string& text,
                                 const std::string& image_file) {
    std::string line = "{\"task\":\"" + json_escape(replay.task) + "\"";
    line += ",\"prompt\":\"" + json_escape(replay.prompt) + "\"";
    line += ",\"conditioning\":\"" + json_escape(replay.conditioning_text) + "\"";
    line += ",\"seed\":" + std::to_string(replay.seed);
    line += ",\"system-hash\":\"" + json_escape(replay.system_hash) + "\"";
    line += ",\"text\":\"" + json_escape(text) + "\"";
    line += ",\"image-file\":\"" + json_escape(image_file) + "\"}";
    return line;
}

inline int cmd_generate(const std::vector<std::string>& args) {
    auto cfg = parse_command_line(args,
                                  make_config({{"out", "runs/generate"},
                                               {"seed", "7"},
                                               {"task", "t2i"},
                                               {"prompt", ""},
                                               {"index", "0"},
                                               {"guide", "1.0"},
                                               {"uncond", "null-token"},
                                               {"use-adapter", "true"},
                                               {"init", ""}}),
                                  {"out", "seed", "task", "prompt", "index", "guide", "uncond", "use-adapter",
                                   "init"});
    auto ls = load_system(cfg, {kStageJoint, kStageBidirectional, kStageAdapter, kStageAlignment, kStageDialogue},
                          "generate");
    auto& sys = *ls.sys;
    std::filesystem::create_directories(cfg.get_str("out"));

    GuidanceConfig guide{cfg.get_double("guide"), parse_uncond_mode(cfg.get_str("uncond"))};
    const auto task = cfg.get_str("task");
    const uint64_t seed = cfg.get_seed("seed");
    auto rep = base_report(cfg, "generate");
    rep.info["task"] = task;
    rep.info["checkpoint-hash"] = sys.system_hash();

    std::string record;
    if (task == "t2i") {
        auto prompt = cfg.get_str("prompt");
        if (prompt.empty()) prompt = sys.data[0].caption;
        auto res = text_to_image(sys, prompt, guide, seed, cfg.get_bool("use-adapter"));
        write_pgm(out_path(cfg, "image.pgm"), res.image);
        rep.scalars["image-mean"] = mean_all(res.image).item();
        record = replay_record(res.replay, "", "image.pgm");
    } else if (task == "caption" || task == "vqa") {
        size_t index = cfg.get_seed("index") % sys.data.size();
        auto img_task = task == "caption" ? ImageTask::caption : ImageTask::vqa;
        auto res = image_to_text(sys, sys.data[index].image, img_task, cfg.get_str("prompt"), seed);
        rep.info["text"] = res.text;
        rep.scalars["index"] = double(index);
        rep.scalars["exact-match"] = res.text == sys.data[index].caption ? 1.0 : 0.0;
        record = replay_record(res.replay, res.text, "");
    } else if (task == "dialogue") {
        auto prompt = cfg.get_str("prompt");
        if (prompt.empty()) prompt = dialogue_request_verb() + " " + sys.data[0].caption;
        auto res = dialogue_respond(sys, prompt, guide, seed);
        rep.info["text"] = res.visible_text;
        rep.scalars["parse-warning"] = res.parse_warning ? 1.0 : 0.0;
        rep.scalars["image-produced"] = res.image.has_value() ? 1.0 : 0.0;
        std::string image_file;
        if (res.image.has_value()) {
            image_file = "image.pgm";
            write_pgm(out_path(cfg, image_file), *res.image);
        }
        record = replay_record(res.replay, res.raw_generation, image_file);
    } else {
        throw UsageError("unknown task '" + task + "'");
    }
    write_text_file(out_path(cfg, "record.jsonl"), record + "\n");
    emit_run(cfg, rep);
    return 0;
}

inline int cmd_evaluate(const std::vector<std::string>& args) {
    auto cfg = parse_command_line(args,
                                  make_config({{"out", "runs/evaluate"},
                                               {"seed", "7"},
                                               {"metric", "dataset"},
                                               {"samples", "64"},
                                               {"latents-seed", "1003"},
                                               {"guide", "1.0"},
                                               {"uncond", "null-token"},
                                               {"use-adapter", "true"},
                                               {"prompts", "full"},
                                               {"init", ""}}),
                                  {"out", "seed", "metric", "samples", "latents-seed", "guide", "uncond",
                                   "use-adapter", "prompts", "init"});
    const auto metric = cfg.get_str("metric");
    auto rep = base_report(cfg, "evaluate");
    rep.info["metric"] = metric;

    if (metric == "dataset") {
        WorldSpec spec;
        spec.seed = cfg.get_seed("seed");
        auto data = gen_dataset(spec);
        rep.scalars["samples"] = double(data.size());
        rep.info["dataset-hash"] = hash_hex(dataset_hash(data));
        emit_run(cfg, rep);
        return 0;
    }

    auto ls = load_system(cfg, {kStageJoint, kStageBidirectional, kStageAdapter, kStageAlignment, kStageDialogue},
                          "evaluate");
    auto& sys = *ls.sys;
    rep.info["checkpoint-hash"] = sys.system_hash();

    if (metric == "alignment") {
        auto latents = bidiffuser_image_latents(sys, cfg.get_seed("latents-seed"));
        auto m = system_alignment_metrics(sys, latents);
        rep.scalars["avg-cosine"] = m.avg_cosine;
        rep.scalars["avg-mse"] = m.avg_mse;
        rep.scalars["zero-vector-pairs"] = double(m.zero_vector_pairs);
        std::cout << "avg cosine " << format_double(m.avg_cosine) << ", avg mse " << format_double(m.avg_mse)
                  << "\n";
    } else if (metric == "fid") {
        GuidanceConfig guide{cfg.get_double("guide"), parse_uncond_mode(cfg.get_str("uncond"))};
        const int n = int(cfg.get_int("samples"));
        if (n < 2) throw ConfigError("evaluate fid needs --samples >= 2");
        const auto prompts = cfg.get_str("prompts");
        if (prompts != "full" && prompts != "concise")
            throw ConfigError("evaluate fid --prompts must be full or concise");
        const uint64_t seed = cfg.get_seed("seed");
        std::vector<Tensor> real, gen;
        for (const auto& s : sys.data) real.push_back(s.image);
        for (int k = 0; k < n; ++k) {
            auto caption = sys.data[size_t(k) % sys.data.size()].caption;
            if (prompts == "concise") caption = concise_caption(caption);
            gen.push_back(text_to_image(sys, caption, guide, splitmix64(seed ^ uint64_t(k + 1)),
                                        cfg.get_bool("use-adapter"))
                              .image);
        }
        rep.scalars["toy-fid"] = toy_fid(real, gen);
        rep.scalars["samples"] = double(n);
        rep.info["prompts"] = prompts;
    } else if (metric == "bleu") {
        const uint64_t lseed = cfg.get_seed("latents-seed");
        std::vector<std::string> candidates, references;
        int exact = 0;
        for (size_t i = 0; i < sys.data.size(); ++i) {
            auto res = image_to_text(sys, sys.data[i].image, ImageTask::caption, "",
                                     latent_seed_for_index(lseed, i));
            candidates.push_back(res.text);
            references.push_back(sys.data[i].caption);
            if (res.text == sys.data[i].caption) ++exact;
        }
        rep.scalars["bleu"] = bleu_text(candidates, references);
        rep.scalars["exact-caption-accuracy"] = double(exact) / double(sys.data.size());
    } else if (metric == "perplexity") {
        rep.scalars["perplexity"] = perplexity(sys.llm, sys.caption_ids, sys.vocab.bos());
        rep.scalars["vocab-size"] = double(sys.vocab.size());
    } else {
        throw UsageError("unknown metric '" + metric + "'");
    }
    emit_run(cfg, rep);
    return 0;
}

inline int cmd_gradcheck(const std::vector<std::string>& args) {
    auto cfg = parse_command_line(args, make_config({{"out", "runs/gradcheck"}}), {"out"});
    auto entries = run_gradient_suite();
    auto rep = base_report(cfg, "gradcheck");
    bool all_pass = true;
    for (const auto& e : entries) {
        rep.scalars["rel-err-" + e.name] = e.result.max_rel_err;
        std::cout << (e.pass ? "pass" : "FAIL") << "  " << e.name << "  max rel err "
                  << format_double(e.result.max_rel_err) << "\n";
        all_pass = all_pass && e.pass;
    }
    rep.info["result"] = all_pass ? "pass" : "fail";
    emit_run(cfg, rep);
    return all_pass ? 0 : 1;
}

}  // namespace detail

inline int run_cli(const std::vector<std::string>& args) {
    if (args.empty()) {
        std::cout << detail::usage_text();
        return 2;
    }
    const auto& command = args[0];
    std::vector<std::string> rest(args.begin() + 1, args.end());
    try {
        if (command == "gen-data") return detail::cmd_gen_data(rest);
        if (command == "pretrain-joint") return detail::cmd_pretrain_joint(rest);
        if (command == "finetune-bidiffuser") return detail::cmd_finetune_bidiffuser(rest);
        if (command == "train-adapter") return detail::cmd_train_adapter(rest);
        if (command == "align") return detail::cmd_align(rest);
        if (command == "train-dialogue") return detail::cmd_train_dialogue(rest);
        if (command == "generate") return detail::cmd_generate(rest);
        if (command == "evaluate") return detail::cmd_evaluate(rest);
        if (command == "gradcheck") return detail::cmd_gradcheck(rest);
        std::cout << detail::usage_text();
        std::cerr << "unknown command '" << command << "'\n";
        return 2;
    } catch (const detail::UsageError& e) {
        std::cout << detail::usage_text();
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

inline int run_cli(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(args);
}

}  // namespace duogen
