// SPDX-License-Identifier: Apache-2.0
//
// Toy text side: word-level vocabulary, a frozen deterministic text encoder
// standing in for a pretrained contrastive model, and nearest-neighbor
// decoding of sampled text latents against the training caption codebook.

#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "duogen/errors.hpp"
#include "duogen/nn.hpp"
#include "duogen/rng.hpp"
#include "duogen/tensor.hpp"

namespace duogen {

inline constexpr const char* kImgOpen = "<Img>";
inline constexpr const char* kImgClose = "</Img>";
inline constexpr const char* kImagePlaceholder = "<image>";
inline constexpr const char* kPad = "<pad>";
inline constexpr const char* kBos = "<bos>";
inline constexpr const char* kEos = "<eos>";

struct Vocab {
    std::vector<std::string> words;
    std::unordered_map<std::string, int> index;

    int add(const std::string& w) {
        auto it = index.find(w);
        if (it != index.end()) return it->second;
        int id = static_cast<int>(words.size());
        words.push_back(w);
        index.emplace(w, id);
        return id;
    }

    bool has(const std::string& w) const { return index.count(w) != 0; }

    int id(const std::string& w) const {
        auto it = index.find(w);
        if (it == index.end()) throw VocabError("out-of-vocab word '" + w + "'");
        return it->second;
    }

    const std::string& word(int id) const {
        if (id < 0 || id >= static_cast<int>(words.size()))
            throw VocabError("token id " + std::to_string(id) + " outside vocab of size " +
                             std::to_string(words.size()));
        return words[static_cast<size_t>(id)];
    }

    int size() const { return static_cast<int>(words.size()); }

    int pad() const { return id(kPad); }
    int bos() const { return id(kBos); }
    int eos() const { return id(kEos); }
    int img_open() const { return id(kImgOpen); }
    int img_close() const { return id(kImgClose); }
    int image_placeholder() const { return id(kImagePlaceholder); }

    // Every vocab carries the protocol tokens up front in a fixed order.
    static Vocab with_specials() {
        Vocab v;
        v.add(kPad);
        v.add(kBos);
        v.add(kEos);
        v.add(kImgOpen);
        v.add(kImgClose);
        v.add(kImagePlaceholder);
        return v;
    }
};

namespace detail {

// The span markers and the image placeholder bind tightly to neighboring
// text in rendered prompts ("<Img>a red square</Img>", "<image>Describe...")
// so a whitespace chunk may hold several tokens. Split at the earliest
// marker occurrence, repeatedly.
inline void split_chunk(const std::string& chunk, std::vector<std::string>& out) {
    static const std::vector<std::string> markers = {kImgOpen, kImgClose, kImagePlaceholder};
    size_t pos = 0;
    while (pos < chunk.size()) {
        size_t best = std::string::npos;
        size_t best_len = 0;
        for (const auto& m : markers) {
            size_t p = chunk.find(m, pos);
            if (p != std::string::npos && (p < best || (p == best && m.size() > best_len))) {
                best = p;
                best_len = m.size();
            }
        }
        if (best == std::string::npos) {
            out.push_back(chunk.substr(pos));
            return;
        }
        if (best > pos) out.push_back(chunk.substr(pos, best - pos));
        out.push_back(chunk.substr(best, best_len));
        pos = best + best_len;
    }
}

}  // namespace detail

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) detail::split_chunk(text.substr(i, j - i), out);
        i = j;
    }
    return out;
}

inline std::vector<int> tokenize(const Vocab& vocab, const std::string& text) {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
    return ids;
}

// Canonical spacing: single spaces between tokens, except the span markers
// which glue to their caption ("<Img>a red square</Img>").
inline std::string detokenize(const Vocab& vocab, const std::vector<int>& ids) {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        const std::string& w = vocab.word(ids[i]);
        if (!out.empty() && !(w == kImgClose) && !(i > 0 && vocab.word(ids[i - 1]) == kImgOpen)) out += ' ';
        out += w;
    }
    return out;
}

// Frozen deterministic caption encoder: a hash-seeded embedding per vocab
// word plus sinusoidal positions, mean-pooled into a fixed number of latent
// rows. Never trained; stands in for a pretrained text encoder.
struct ClipEncoder {
    static constexpr int kLatRows = 4;
    static constexpr int kLatCols = 32;

    const Vocab* vocab = nullptr;
    Tensor table;  // [V, kLatCols], frozen

    ClipEncoder() = default;
    explicit ClipEncoder(const Vocab& v) : vocab(&v) {
        std::vector<double> data;
        data.reserve(static_cast<size_t>(v.size()) * kLatCols);
        for (const auto& w : v.words) {
            Rng rng(splitmix64(hash_string64("clip-embed") ^ hash_string64(w)));
            auto row = rng.normal_vec(kLatCols);
            data.insert(data.end(), row.begin(), row.end());
        }
        table = Tensor::from_data({v.size(), kLatCols}, std::move(data));
    }

    // [kLatRows, kLatCols]; window i pools token positions
    // [floor(i*n/R), ceil((i+1)*n/R)), always nonempty.
    Tensor encode(const std::vector<int>& ids) const {
        if (ids.empty()) throw ContractError("cannot encode an empty token sequence");
        const int n = static_cast<int>(ids.size());
        std::vector<double> rows(static_cast<size_t>(n) * kLatCols);
        for (int p = 0; p < n; ++p) {
            if (ids[static_cast<size_t>(p)] < 0 || ids[static_cast<size_t>(p)] >= vocab->size())
                throw VocabError("token id " + std::to_string(ids[static_cast<size_t>(p)]) + " outside vocab");
            auto pos = sinusoid_features(double(p), kLatCols);
            for (int c = 0; c < kLatCols; ++c)
                rows[static_cast<size_t>(p) * kLatCols + c] =
                    table.at(ids[static_cast<size_t>(p)], c) + pos[static_cast<size_t>(c)];
        }
        std::vector<double> out(static_cast<size_t>(kLatRows) * kLatCols, 0.0);
        for (int i = 0; i < kLatRows; ++i) {
            int lo = (i * n) / kLatRows;
            int hi = static_cast<int>(std::ceil(double((i + 1) * n) / kLatRows));
            for (int p = lo; p < hi; ++p)
                for (int c = 0; c < kLatCols; ++c)
                    out[static_cast<size_t>(i) * kLatCols + c] += rows[static_cast<size_t>(p) * kLatCols + c];
            for (int c = 0; c < kLatCols; ++c) out[static_cast<size_t>(i) * kLatCols + c] /= double(hi - lo);
        }
        return Tensor::from_data({kLatRows, kLatCols}, std::move(out));
    }

    Tensor encode_text(const std::string& text) const { return encode(tokenize(*vocab, text)); }
};

struct CaptionCodebook {
    std::vector<std::string> captions;
    std::vector<Tensor> latents;
    double min_pairwise_dist = 0.0;

    static CaptionCodebook build(const std::vector<std::string>& captions, const ClipEncoder& enc) {
        CaptionCodebook cb;
        cb.captions = captions;
        for (const auto& c : captions) cb.latents.push_back(enc.encode_text(c));
        cb.min_pairwise_dist = 1e300;
        for (size_t i = 0; i < cb.latents.size(); ++i)
            for (size_t j = i + 1; j < cb.latents.size(); ++j) {
                double d = 0;
                for (size_t k = 0; k < cb.latents[i].numel(); ++k) {
                    double diff = cb.latents[i].at(k) - cb.latents[j].at(k);
                    d += diff * diff;
                }
                d = std::sqrt(d);
                if (d <= 0.0)
                    throw ContractError("codebook captions '" + cb.captions[i] + "' and '" + cb.captions[j] +
                                        "' share a latent");
                cb.min_pairwise_dist = std::min(cb.min_pairwise_dist, d);
            }
        if (cb.latents.size() < 2) cb.min_pairwise_dist = 0.0;
        return cb;
    }

    // Nearest caption by Euclidean distance; exact ties go to the lowest index.
    int decode_index(const Tensor& latent) const {
        if (captions.empty()) throw ContractError("decode over an empty codebook");
        int best = 0;
        double best_d = 1e300;
        for (size_t i = 0; i < latents.size(); ++i) {
            double d = 0;
            for (size_t k = 0; k < latent.numel(); ++k) {
                double diff = latent.at(k) - latents[i].at(k);
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(i);
            }
        }
        return best;
    }

    const std::string& decode(const Tensor& latent) const { return captions[static_cast<size_t>(decode_index(latent))]; }
};

}  // namespace duogen
