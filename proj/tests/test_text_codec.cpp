// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "duogen/text_codec.hpp"

using namespace duogen;

namespace {

Vocab demo_vocab() {
    auto v = Vocab::with_specials();
    for (const char* w : {"a", "red", "green", "square", "circle", "at", "center", "sure!", "Describe"})
        v.add(w);
    return v;
}

double dist(const Tensor& a, const Tensor& b) {
    double d = 0;
    for (size_t i = 0; i < a.numel(); ++i) {
        double x = a.at(i) - b.at(i);
        d += x * x;
    }
    return std::sqrt(d);
}

}  // namespace

TEST_CASE("specials are distinct and dense") {
    auto v = Vocab::with_specials();
    REQUIRE(v.size() == 6);
    std::vector<int> ids = {v.pad(), v.bos(), v.eos(), v.img_open(), v.img_close(), v.image_placeholder()};
    for (size_t i = 0; i < ids.size(); ++i) {
        REQUIRE(ids[i] == static_cast<int>(i));
        for (size_t j = i + 1; j < ids.size(); ++j) REQUIRE(ids[i] != ids[j]);
    }
}

TEST_CASE("tokenize roundtrip on plain captions") {
    auto v = demo_vocab();
    for (const std::string c : {"a red square at center", "a green circle", "sure!"}) {
        auto ids = tokenize(v, c);
        REQUIRE(detokenize(v, ids) == c);
    }
}

TEST_CASE("empty text tokenizes to nothing and back") {
    auto v = demo_vocab();
    auto ids = tokenize(v, "");
    REQUIRE(ids.empty());
    REQUIRE(detokenize(v, ids) == "");
}

TEST_CASE("span markers survive as single ids with spaces around them") {
    auto v = demo_vocab();
    auto ids = tokenize(v, "<Img> red square </Img>");
    REQUIRE(ids == std::vector<int>{v.img_open(), v.id("red"), v.id("square"), v.img_close()});
}

TEST_CASE("glued markers split off neighboring words") {
    auto v = demo_vocab();
    auto ids = tokenize(v, "sure! <Img>a red square</Img>");
    REQUIRE(ids == std::vector<int>{v.id("sure!"), v.img_open(), v.id("a"), v.id("red"), v.id("square"),
                                    v.img_close()});
    auto ids2 = tokenize(v, "<image>Describe");
    REQUIRE(ids2 == std::vector<int>{v.image_placeholder(), v.id("Describe")});
}

TEST_CASE("detokenize glues span markers to the caption") {
    auto v = demo_vocab();
    auto ids = tokenize(v, "sure! <Img>a red square</Img>");
    REQUIRE(detokenize(v, ids) == "sure! <Img>a red square</Img>");
    auto empty_span = std::vector<int>{v.img_open(), v.img_close()};
    REQUIRE(detokenize(v, empty_span) == "<Img></Img>");
}

TEST_CASE("out of vocab word is named in the error") {
    auto v = demo_vocab();
    REQUIRE_THROWS_MATCHES(tokenize(v, "a purple square"), VocabError,
                           Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("purple")));
}

TEST_CASE("encoder is frozen and deterministic") {
    auto v = demo_vocab();
    ClipEncoder enc(v);
    auto a = enc.encode_text("a red square at center");
    auto b = enc.encode_text("a red square at center");
    REQUIRE(a.shape() == std::vector<int>{ClipEncoder::kLatRows, ClipEncoder::kLatCols});
    REQUIRE(a.data() == b.data());
    auto c = enc.encode_text("a green circle at center");
    REQUIRE(dist(a, c) > 0.0);
}

TEST_CASE("single token latent replicates its position-adjusted embedding") {
    auto v = demo_vocab();
    ClipEncoder enc(v);
    int id = v.id("red");
    auto lat = enc.encode(std::vector<int>{id});
    auto pos = sinusoid_features(0.0, ClipEncoder::kLatCols);
    for (int r = 0; r < ClipEncoder::kLatRows; ++r)
        for (int c = 0; c < ClipEncoder::kLatCols; ++c)
            REQUIRE(lat.at(r, c) == Catch::Approx(enc.table.at(id, c) + pos[size_t(c)]).margin(1e-14));
}

TEST_CASE("two token caption pools each half into two rows") {
    auto v = demo_vocab();
    ClipEncoder enc(v);
    std::vector<int> ids = {v.id("red"), v.id("square")};
    auto lat = enc.encode(ids);
    auto p0 = sinusoid_features(0.0, ClipEncoder::kLatCols);
    auto p1 = sinusoid_features(1.0, ClipEncoder::kLatCols);
    for (int c = 0; c < ClipEncoder::kLatCols; ++c) {
        double r0 = enc.table.at(ids[0], c) + p0[size_t(c)];
        double r1 = enc.table.at(ids[1], c) + p1[size_t(c)];
        REQUIRE(lat.at(0, c) == Catch::Approx(r0).margin(1e-14));
        REQUIRE(lat.at(1, c) == Catch::Approx(r0).margin(1e-14));
        REQUIRE(lat.at(2, c) == Catch::Approx(r1).margin(1e-14));
        REQUIRE(lat.at(3, c) == Catch::Approx(r1).margin(1e-14));
    }
}

TEST_CASE("encoder rejects empty input") {
    auto v = demo_vocab();
    ClipEncoder enc(v);
    REQUIRE_THROWS_AS(enc.encode(std::vector<int>{}), ContractError);
}

TEST_CASE("codebook decodes its own captions exactly") {
    auto v = demo_vocab();
    ClipEncoder enc(v);
    std::vector<std::string> caps = {"a red square at center", "a green circle at center", "a red circle",
                                     "a green square"};
    auto cb = CaptionCodebook::build(caps, enc);
    REQUIRE(cb.min_pairwise_dist > 0.0);
    for (const auto& c : caps) REQUIRE(cb.decode(enc.encode_text(c)) == c);
}

TEST_CASE("perturbation below half the codebook margin keeps the decode") {
    auto v = demo_vocab();
    ClipEncoder enc(v);
    std::vector<std::string> caps = {"a red square at center", "a green circle at center", "a red circle"};
    auto cb = CaptionCodebook::build(caps, enc);
    Rng rng(31);
    for (const auto& c : caps) {
        auto lat = enc.encode_text(c);
        auto noise = Tensor::randn(lat.shape(), rng);
        double nn = 0;
        for (size_t i = 0; i < noise.numel(); ++i) nn += noise.at(i) * noise.at(i);
        double scale_to = 0.49 * cb.min_pairwise_dist / std::sqrt(nn);
        auto perturbed = add(lat, scale(noise, scale_to));
        REQUIRE(cb.decode(perturbed) == c);
    }
}

TEST_CASE("exact distance ties pick the lowest index") {
    CaptionCodebook cb;
    for (int i = 0; i < 8; ++i) {
        cb.captions.push_back("entry " + std::to_string(i));
        double x = (i == 3) ? 1.0 : (i == 7 ? -1.0 : 10.0 + i);
        cb.latents.push_back(Tensor::from_data({1}, {x}));
    }
    auto probe = Tensor::from_data({1}, {0.0});
    REQUIRE(cb.decode_index(probe) == 3);
}

TEST_CASE("empty codebook decode fails") {
    CaptionCodebook cb;
    REQUIRE_THROWS_AS(cb.decode(Tensor::zeros({1})), ContractError);
}
