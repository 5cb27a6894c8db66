#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <string>

#include "duogen/checkpoint.hpp"
#include "duogen/config.hpp"
#include "duogen/nn.hpp"
#include "duogen/rng.hpp"

using namespace duogen;

namespace {

const char* kPath = "duogen_test_ckpt.bin";

ParamList random_params(uint64_t seed) {
    Rng rng(seed);
    Mlp mlp(6, 10, rng);
    ParamList params;
    mlp.collect("model.mlp", params);
    auto extra = Tensor::from_data({7}, rng.normal_vec(7)).set_requires_grad(true);
    params.push_back({"model.extra", extra});
    return params;
}

}  // namespace

TEST_CASE("checkpoint save/load is a bit-exact inverse") {
    auto params = random_params(3);
    std::map<std::string, std::string> meta = {
        {"stage", kStageJoint}, {"step", "120"}, {"note", "a=b=c"},
    };
    save_checkpoint(kPath, meta, params);
    auto ckpt = load_checkpoint(kPath);

    REQUIRE(ckpt.metadata == meta);
    REQUIRE(ckpt.arrays.size() == params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        REQUIRE(ckpt.arrays[i].name == params[i].name);
        REQUIRE(ckpt.arrays[i].tensor.shape() == params[i].tensor.shape());
        for (size_t k = 0; k < params[i].tensor.numel(); ++k)
            REQUIRE(ckpt.arrays[i].tensor.at(k) == params[i].tensor.at(k));
    }

    SECTION("load_into restores mutated parameters bitwise") {
        auto live = random_params(3);
        for (auto& p : live)
            for (size_t k = 0; k < p.tensor.numel(); ++k) p.tensor.at(k) += 0.5;
        load_into(live, ckpt);
        for (size_t i = 0; i < live.size(); ++i)
            for (size_t k = 0; k < live[i].tensor.numel(); ++k)
                REQUIRE(live[i].tensor.at(k) == params[i].tensor.at(k));
    }
    SECTION("resaving a loaded checkpoint reproduces identical bytes") {
        const char* second = "duogen_test_ckpt2.bin";
        save_checkpoint(second, ckpt);
        std::ifstream f1(kPath, std::ios::binary), f2(second, std::ios::binary);
        std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
        std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        REQUIRE(s1 == s2);
        REQUIRE_FALSE(s1.empty());
        std::remove(second);
    }
    std::remove(kPath);
}

TEST_CASE("checkpoint error kinds are distinct") {
    SECTION("missing file reports io") {
        try {
            load_checkpoint("no_such_checkpoint.bin");
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            REQUIRE(e.kind == CheckpointError::Kind::io);
        }
    }
    SECTION("wrong magic") {
        std::ofstream out(kPath, std::ios::binary);
        out << "NOTACKPTxxxxxxxxxxx";
        out.close();
        try {
            load_checkpoint(kPath);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            REQUIRE(e.kind == CheckpointError::Kind::bad_magic);
        }
    }
    SECTION("wrong version") {
        std::ofstream out(kPath, std::ios::binary);
        out.write(kCheckpointMagic, sizeof kCheckpointMagic);
        out << std::string(4, '\x09');
        out.close();
        try {
            load_checkpoint(kPath);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            REQUIRE(e.kind == CheckpointError::Kind::bad_version);
        }
    }
    SECTION("truncated payload") {
        auto params = random_params(1);
        save_checkpoint(kPath, {{"stage", kStageJoint}}, params);
        std::ifstream in(kPath, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        std::ofstream out(kPath, std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size() - 9));
        out.close();
        try {
            load_checkpoint(kPath);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            REQUIRE(e.kind == CheckpointError::Kind::truncated);
        }
    }
    SECTION("missing entry and shape mismatch on load_into") {
        auto params = random_params(2);
        save_checkpoint(kPath, {}, params);
        auto ckpt = load_checkpoint(kPath);

        auto renamed = random_params(2);
        renamed[0].name = "someone.else";
        try {
            load_into(renamed, ckpt);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            REQUIRE(e.kind == CheckpointError::Kind::missing_entry);
        }

        auto reshaped = random_params(2);
        reshaped[0].tensor = Tensor::zeros({2, 2});
        try {
            load_into(reshaped, ckpt);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            REQUIRE(e.kind == CheckpointError::Kind::shape_mismatch);
        }
    }
    std::remove(kPath);
}

TEST_CASE("stage compatibility gate") {
    Checkpoint ckpt;
    ckpt.metadata["stage"] = kStageJoint;
    REQUIRE_NOTHROW(require_stage(ckpt, {kStageJoint, kStageBidirectional}, "fine-tuning"));
    try {
        require_stage(ckpt, {kStageDialogue}, "dialogue training");
        FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
        REQUIRE(e.kind == CheckpointError::Kind::incompatible_stage);
        REQUIRE(std::string(e.what()).find("unidiffuser") != std::string::npos);
    }

    Checkpoint unstaged;
    REQUIRE_THROWS_AS(require_stage(unstaged, {kStageJoint}, "anything"), CheckpointError);
}

TEST_CASE("run config") {
    auto cfg = make_config({
        {"steps", "100"},
        {"lr", "0.001"},
        {"freeze-llm", "true"},
        {"out", "runs/x"},
    });
    SECTION("typed getters") {
        REQUIRE(cfg.get_int("steps") == 100);
        REQUIRE(cfg.get_double("lr") == 0.001);
        REQUIRE(cfg.get_bool("freeze-llm"));
        REQUIRE(cfg.get_str("out") == "runs/x");
        cfg.set("freeze-llm", "0");
        REQUIRE_FALSE(cfg.get_bool("freeze-llm"));
        cfg.set("seed", "7");
        REQUIRE(cfg.get_seed("seed") == 7);
    }
    SECTION("type errors and missing keys") {
        REQUIRE_THROWS_AS(cfg.get_int("lr"), ConfigError);
        REQUIRE_THROWS_AS(cfg.get_bool("steps"), ConfigError);
        REQUIRE_THROWS_AS(cfg.get_str("nope"), ConfigError);
        cfg.set("steps", "12x");
        REQUIRE_THROWS_AS(cfg.get_int("steps"), ConfigError);
        cfg.set("seed", "-3");
        REQUIRE_THROWS_AS(cfg.get_seed("seed"), ConfigError);
    }
    SECTION("file overrides with comments") {
        const char* path = "duogen_test_cfg.txt";
        std::ofstream out(path);
        out << "# run overrides\n\n  steps = 250 \nlr=0.5\n";
        out.close();
        apply_config_file(cfg, path);
        REQUIRE(cfg.get_int("steps") == 250);
        REQUIRE(cfg.get_double("lr") == 0.5);
        REQUIRE(cfg.get_str("out") == "runs/x");

        std::ofstream bad(path);
        bad << "just words\n";
        bad.close();
        REQUIRE_THROWS_AS(apply_config_file(cfg, path), ParseError);
        REQUIRE_THROWS_AS(apply_config_file(cfg, "no_such.cfg"), IoError);
        std::remove(path);
    }
    SECTION("resolved dump is sorted and complete") {
        auto dump = cfg.resolved();
        REQUIRE(dump == "freeze-llm=true\nlr=0.001\nout=runs/x\nsteps=100\n");
    }
}
