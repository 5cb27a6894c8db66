// SPDX-License-Identifier: Apache-2.0
//
// The synthetic paired world: 3 shapes x 4 colors x 2 sizes x 5 positions
// rendered as 16x16 grayscale images with grammar captions. Also the full
// vocabulary builder, JSONL dataset I/O, PGM export, and dataset hashing.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "duogen/errors.hpp"
#include "duogen/rng.hpp"
#include "duogen/templates.hpp"
#include "duogen/tensor.hpp"
#include "duogen/text_codec.hpp"

namespace duogen {

inline const std::array<std::string, 3>& world_shapes() {
    static const std::array<std::string, 3> v = {"square", "circle", "triangle"};
    return v;
}
inline const std::array<std::string, 4>& world_colors() {
    static const std::array<std::string, 4> v = {"red", "green", "blue", "white"};
    return v;
}
inline const std::array<std::string, 2>& world_sizes() {
    static const std::array<std::string, 2> v = {"small", "big"};
    return v;
}
inline const std::array<std::string, 5>& world_positions() {
    static const std::array<std::string, 5> v = {"top-left", "top-right", "bottom-left", "bottom-right", "center"};
    return v;
}

struct WorldSpec {
    int image_size = 16;
    uint64_t seed = 0;

    int item_count() const {
        return int(world_shapes().size() * world_colors().size() * world_sizes().size() * world_positions().size());
    }
};

struct PairedSample {
    Tensor image;  // [n, n], values in [0, 1]
    std::string caption;
};

inline std::string make_caption(int shape_i, int color_i, int size_i, int pos_i) {
    return "a " + world_sizes()[size_t(size_i)] + " " + world_colors()[size_t(color_i)] + " " +
           world_shapes()[size_t(shape_i)] + " at " + world_positions()[size_t(pos_i)];
}

// Color is encoded purely in intensity: (index + 1) / 4.
inline double color_intensity(int color_i) { return double(color_i + 1) / double(world_colors().size()); }

// Deterministic rasterizer. Position anchors sit at quarter points, shape
// half-extent is 2 (small) or 3 (big).
inline Tensor render_item(const WorldSpec& spec, int shape_i, int color_i, int size_i, int pos_i) {
    const int n = spec.image_size;
    if (n < 12) throw ConfigError("image_size " + std::to_string(n) + " too small to render all items");
    const int q = n / 4;
    const std::array<std::pair<int, int>, 5> anchors = {
        std::pair<int, int>{q, q},
        {q, n - 1 - q},
        {n - 1 - q, q},
        {n - 1 - q, n - 1 - q},
        {(n - 1) / 2, (n - 1) / 2},
    };
    const auto [cr, cc] = anchors[size_t(pos_i)];
    const int r = size_i == 0 ? 2 : 3;
    const double intensity = color_intensity(color_i);

    auto img = Tensor::zeros({n, n});
    for (int row = 0; row < n; ++row)
        for (int col = 0; col < n; ++col) {
            const int dr = row - cr, dc = col - cc;
            bool inside = false;
            switch (shape_i) {
                case 0: inside = std::abs(dr) <= r && std::abs(dc) <= r; break;
                case 1: inside = dr * dr + dc * dc <= (r + 0.5) * (r + 0.5); break;
                case 2: inside = dr >= -r && dr <= r && 2 * std::abs(dc) <= dr + r; break;
                default: throw ConfigError("unknown shape index " + std::to_string(shape_i));
            }
            if (inside) img.at(row, col) = intensity;
        }
    return img;
}

// All 120 items in a seed-shuffled order. Every pair of images is checked
// distinct (positive L2 gap) before the set is returned.
inline std::vector<PairedSample> gen_dataset(const WorldSpec& spec) {
    std::vector<PairedSample> out;
    out.reserve(size_t(spec.item_count()));
    for (size_t sh = 0; sh < world_shapes().size(); ++sh)
        for (size_t co = 0; co < world_colors().size(); ++co)
            for (size_t si = 0; si < world_sizes().size(); ++si)
                for (size_t po = 0; po < world_positions().size(); ++po)
                    out.push_back({render_item(spec, int(sh), int(co), int(si), int(po)),
                                   make_caption(int(sh), int(co), int(si), int(po))});

    for (size_t i = 0; i < out.size(); ++i)
        for (size_t j = i + 1; j < out.size(); ++j) {
            double d2 = 0.0;
            for (size_t k = 0; k < out[i].image.numel(); ++k) {
                double diff = out[i].image.at(k) - out[j].image.at(k);
                d2 += diff * diff;
            }
            if (d2 <= 0.0)
                throw ContractError("renderer collision: '" + out[i].caption + "' and '" + out[j].caption +
                                    "' produced identical images");
        }

    Rng rng(splitmix64(spec.seed ^ hash_string64("world-shuffle")));
    for (size_t i = out.size(); i > 1; --i) {
        size_t j = size_t(rng.randint(0, int64_t(i) - 1));
        std::swap(out[i - 1], out[j]);
    }
    return out;
}

inline Tensor to_train_range(const Tensor& img01) {
    auto t = Tensor::zeros(img01.shape());
    for (size_t i = 0; i < t.numel(); ++i) t.at(i) = 2.0 * img01.at(i) - 1.0;
    return t;
}

inline Tensor to_unit_range(const Tensor& train) {
    auto t = Tensor::zeros(train.shape());
    for (size_t i = 0; i < t.numel(); ++i) t.at(i) = std::min(1.0, std::max(0.0, 0.5 * (train.at(i) + 1.0)));
    return t;
}

inline const std::string& dialogue_request_verb() {
    static const std::string v = "draw";
    return v;
}
inline const std::string& dialogue_response_word() {
    static const std::string v = "sure";
    return v;
}

// Every string the system can render, for vocabulary coverage.
inline std::vector<std::string> all_renderable_texts() {
    std::vector<std::string> texts;
    const std::string sample_caption = make_caption(0, 0, 0, 0);
    for (const auto& q : caption_queries()) texts.push_back(q);
    for (auto variant : {LlmVariant::decoder_only, LlmVariant::encoder_decoder}) {
        for (const auto& q : caption_queries())
            texts.push_back(render_template(TemplateTask::caption, {{"query", q}}, variant));
        const std::string question = caption_queries()[2];
        texts.push_back(render_template(TemplateTask::vqa_short, {{"question", question}}, variant));
        texts.push_back(render_template(TemplateTask::vqa_option, {{"question", question}}, variant));
        texts.push_back(render_template(TemplateTask::llava_v1, {{"question", question}}, variant));
        texts.push_back(render_template(TemplateTask::llava_v2, {{"question", question}}, variant));
        texts.push_back(render_template(TemplateTask::llava_v3, {{"question", question}}, variant));
        texts.push_back(render_template(TemplateTask::general, {{"instruction", question}}, variant));
        texts.push_back(render_template(
            TemplateTask::dialogue, {{"history", dialogue_request_verb() + " " + sample_caption}}, variant));
    }
    texts.push_back(render_dialogue_target(dialogue_response_word(), sample_caption));
    for (const auto& sh : world_shapes())
        for (const char* attr : {"color", "size"}) texts.push_back(std::string("what ") + attr + " is the " + sh);
    texts.push_back("what shape is in the image");
    for (size_t sh = 0; sh < world_shapes().size(); ++sh)
        for (size_t co = 0; co < world_colors().size(); ++co)
            for (size_t si = 0; si < world_sizes().size(); ++si)
                for (size_t po = 0; po < world_positions().size(); ++po)
                    texts.push_back(make_caption(int(sh), int(co), int(si), int(po)));
    return texts;
}

// Specials plus every word from captions, templates, and dialogue phrases,
// in first-encounter order. Must stay within the 128-entry budget.
inline Vocab build_world_vocab() {
    Vocab vocab = Vocab::with_specials();
    for (const auto& text : all_renderable_texts())
        for (const auto& w : split_words(text)) vocab.add(w);
    if (vocab.size() > 128)
        throw ContractError("vocabulary grew to " + std::to_string(vocab.size()) + " entries, budget is 128");
    return vocab;
}

inline std::vector<std::string> all_captions() {
    std::vector<std::string> caps;
    for (size_t sh = 0; sh < world_shapes().size(); ++sh)
        for (size_t co = 0; co < world_colors().size(); ++co)
            for (size_t si = 0; si < world_sizes().size(); ++si)
                for (size_t po = 0; po < world_positions().size(); ++po)
                    caps.push_back(make_caption(int(sh), int(co), int(si), int(po)));
    return caps;
}

namespace detail {

inline std::string json_escape(const std::string& s) {
    std::string out;
    for (char ch : s) {
        if (ch == '"' || ch == '\\') out += '\\';
        out += ch;
    }
    return out;
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct JsonCursor {
    const std::string& s;
    size_t pos = 0;
    size_t line;

    void skip_ws() {
        while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
    }
    void expect(char ch) {
        skip_ws();
        if (pos >= s.size() || s[pos] != ch)
            throw ParseError("dataset line " + std::to_string(line) + ": expected '" + std::string(1, ch) + "'",
                             pos);
        ++pos;
    }
    bool peek(char ch) {
        skip_ws();
        return pos < s.size() && s[pos] == ch;
    }
    std::string parse_string() {
        expect('"');
        std::string out;
        while (pos < s.size() && s[pos] != '"') {
            if (s[pos] == '\\' && pos + 1 < s.size()) ++pos;
            out += s[pos++];
        }
        expect('"');
        return out;
    }
    double parse_number() {
        skip_ws();
        size_t consumed = 0;
        double v;
        try {
            v = std::stod(s.substr(pos), &consumed);
        } catch (const std::exception&) {
            throw ParseError("dataset line " + std::to_string(line) + ": bad number", pos);
        }
        pos += consumed;
        return v;
    }
};

}  // namespace detail

// One sample per line: {"h":H,"w":W,"caption":"...","image":[...]} with the
// image flattened row-major and doubles printed at full precision.
inline void save_dataset_jsonl(const std::string& path, const std::vector<PairedSample>& samples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    for (const auto& s : samples) {
        out << "{\"h\":" << s.image.rows() << ",\"w\":" << s.image.cols() << ",\"caption\":\""
            << detail::json_escape(s.caption) << "\",\"image\":[";
        for (size_t i = 0; i < s.image.numel(); ++i) {
            if (i) out << ',';
            out << detail::format_double(s.image.at(i));
        }
        out << "]}\n";
    }
    if (!out) throw IoError("write to '" + path + "' failed");
}

inline std::vector<PairedSample> load_dataset_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::vector<PairedSample> samples;
    std::string linebuf;
    size_t lineno = 0;
    while (std::getline(in, linebuf)) {
        ++lineno;
        if (linebuf.empty()) continue;
        detail::JsonCursor cur{linebuf, 0, lineno};
        int h = -1, w = -1;
        std::string caption;
        std::vector<double> image;
        bool got_caption = false, got_image = false;
        cur.expect('{');
        while (true) {
            std::string key = cur.parse_string();
            cur.expect(':');
            if (key == "h")
                h = int(cur.parse_number());
            else if (key == "w")
                w = int(cur.parse_number());
            else if (key == "caption") {
                caption = cur.parse_string();
                got_caption = true;
            } else if (key == "image") {
                cur.expect('[');
                if (!cur.peek(']'))
                    while (true) {
                        image.push_back(cur.parse_number());
                        if (cur.peek(',')) {
                            cur.expect(',');
                            continue;
                        }
                        break;
                    }
                cur.expect(']');
                got_image = true;
            } else
                throw ParseError("dataset line " + std::to_string(lineno) + ": unknown key '" + key + "'",
                                 cur.pos);
            if (cur.peek(',')) {
                cur.expect(',');
                continue;
            }
            break;
        }
        cur.expect('}');
        if (h <= 0 || w <= 0 || !got_caption || !got_image)
            throw ParseError("dataset line " + std::to_string(lineno) + ": missing fields", 0);
        if (image.size() != size_t(h) * size_t(w))
            throw ParseError("dataset line " + std::to_string(lineno) + ": image has " +
                                 std::to_string(image.size()) + " values, expected " + std::to_string(h * w),
                             0);
        samples.push_back({Tensor::from_data({h, w}, std::move(image)), caption});
    }
    return samples;
}

// Plain PGM (P2), 8-bit quantized. An export format, not a roundtrip format.
inline void write_pgm(const std::string& path, const Tensor& img01) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "P2\n" << img01.cols() << " " << img01.rows() << "\n255\n";
    for (int r = 0; r < img01.rows(); ++r) {
        for (int c = 0; c < img01.cols(); ++c) {
            double v = std::min(1.0, std::max(0.0, img01.at(r, c)));
            out << int(std::lround(v * 255.0)) << (c + 1 == img01.cols() ? "" : " ");
        }
        out << "\n";
    }
    if (!out) throw IoError("write to '" + path + "' failed");
}

inline Tensor read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::string magic;
    in >> magic;
    if (magic != "P2") throw ParseError("'" + path + "' is not a P2 graymap", 0);
    int w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    if (!in || w <= 0 || h <= 0 || maxval <= 0) throw ParseError("'" + path + "' has a bad header", 0);
    std::vector<double> data(size_t(h) * size_t(w));
    for (auto& v : data) {
        int px;
        in >> px;
        if (!in) throw ParseError("'" + path + "' is truncated", 0);
        v = double(px) / double(maxval);
    }
    return Tensor::from_data({h, w}, std::move(data));
}

inline uint64_t dataset_hash(const std::vector<PairedSample>& samples) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* p, size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& s : samples) {
        int r = s.image.rows(), c = s.image.cols();
        mix(&r, sizeof r);
        mix(&c, sizeof c);
        for (size_t i = 0; i < s.image.numel(); ++i) {
            double v = s.image.at(i);
            uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            mix(&bits, sizeof bits);
        }
        mix(s.caption.data(), s.caption.size());
    }
    return h;
}

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace duogen
