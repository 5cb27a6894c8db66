// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics: a Frechet distance over fixed random-projection image
// features, cosine/MSE alignment scores, corpus BLEU with brevity penalty,
// and teacher-forced perplexity. Plain double-vector math, no autodiff.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "duogen/errors.hpp"
#include "duogen/llm.hpp"
#include "duogen/rng.hpp"
#include "duogen/tensor.hpp"
#include "duogen/text_codec.hpp"

namespace duogen {

// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major n*n).
// Returns eigenvalues; V receives eigenvectors as columns when non-null.
inline std::vector<double> jacobi_eigen(std::vector<double> A, int n, std::vector<double>* V_out = nullptr) {
    std::vector<double> V(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) V[static_cast<size_t>(i) * n + i] = 1.0;
    auto at = [n](std::vector<double>& M, int r, int c) -> double& { return M[static_cast<size_t>(r) * n + c]; };

    for (int sweep = 0; sweep < 128; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += at(A, p, q) * at(A, p, q);
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                double apq = at(A, p, q);
                if (std::abs(apq) < 1e-300) continue;
                double theta = (at(A, q, q) - at(A, p, p)) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (int k = 0; k < n; ++k) {
                    double akp = at(A, k, p), akq = at(A, k, q);
                    at(A, k, p) = c * akp - s * akq;
                    at(A, k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    double apk = at(A, p, k), aqk = at(A, q, k);
                    at(A, p, k) = c * apk - s * aqk;
                    at(A, q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    double vkp = at(V, k, p), vkq = at(V, k, q);
                    at(V, k, p) = c * vkp - s * vkq;
                    at(V, k, q) = s * vkp + c * vkq;
                }
            }
    }
    std::vector<double> evals(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) evals[static_cast<size_t>(i)] = A[static_cast<size_t>(i) * n + i];
    if (V_out) *V_out = std::move(V);
    return evals;
}

namespace detail {

inline std::vector<double> matmul_sq(const std::vector<double>& A, const std::vector<double>& B, int n) {
    std::vector<double> C(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            double a = A[static_cast<size_t>(i) * n + k];
            for (int j = 0; j < n; ++j) C[static_cast<size_t>(i) * n + j] += a * B[static_cast<size_t>(k) * n + j];
        }
    return C;
}

// Symmetric PSD square root via eigendecomposition. Eigenvalues below
// -1e-8 are treated as a numerical failure; small negatives clamp to 0.
inline std::vector<double> sym_sqrt(const std::vector<double>& M, int n, const char* what) {
    std::vector<double> V;
    auto evals = jacobi_eigen(M, n, &V);
    for (double& e : evals) {
        if (e < -1e-8)
            throw ContractError(std::string(what) + ": eigenvalue " + std::to_string(e) +
                                " is negative beyond tolerance");
        if (e < 0.0) e = 0.0;
    }
    std::vector<double> R(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int k = 0; k < n; ++k)
                s += V[static_cast<size_t>(i) * n + k] * std::sqrt(evals[static_cast<size_t>(k)]) *
                     V[static_cast<size_t>(j) * n + k];
            R[static_cast<size_t>(i) * n + j] = s;
        }
    return R;
}

}  // namespace detail

constexpr int kFidFeatureDim = 16;

// Fixed seeded projection from flattened images to feature vectors; the same
// matrix for every call so scores are comparable across runs.
inline std::vector<double> fid_features(const Tensor& image) {
    static thread_local std::vector<double> proj;
    static thread_local size_t proj_inputs = 0;
    size_t numel = image.numel();
    if (proj_inputs != numel) {
        Rng rng(splitmix64(hash_string64("toy-fid-projection")));
        proj = rng.normal_vec(static_cast<size_t>(kFidFeatureDim) * numel);
        double s = 1.0 / std::sqrt(double(numel));
        for (double& v : proj) v *= s;
        proj_inputs = numel;
    }
    std::vector<double> f(kFidFeatureDim, 0.0);
    for (int r = 0; r < kFidFeatureDim; ++r) {
        double s = 0.0;
        for (size_t k = 0; k < numel; ++k) s += proj[static_cast<size_t>(r) * numel + k] * image.at(k);
        f[static_cast<size_t>(r)] = s;
    }
    return f;
}

// ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}) over projection features,
// with unbiased covariances and 1e-6 diagonal regularization.
inline double toy_fid(const std::vector<Tensor>& real, const std::vector<Tensor>& gen) {
    if (real.size() < 2 || gen.size() < 2)
        throw ConfigError("toy_fid needs at least 2 samples per set, got " + std::to_string(real.size()) +
                          " and " + std::to_string(gen.size()));
    const int d = kFidFeatureDim;
    auto stats = [d](const std::vector<Tensor>& set, std::vector<double>& mu, std::vector<double>& cov) {
        std::vector<std::vector<double>> feats;
        feats.reserve(set.size());
        for (const auto& img : set) feats.push_back(fid_features(img));
        mu.assign(static_cast<size_t>(d), 0.0);
        for (const auto& f : feats)
            for (int i = 0; i < d; ++i) mu[static_cast<size_t>(i)] += f[static_cast<size_t>(i)];
        for (double& m : mu) m /= double(feats.size());
        cov.assign(static_cast<size_t>(d) * d, 0.0);
        for (const auto& f : feats)
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j)
                    cov[static_cast<size_t>(i) * d + j] +=
                        (f[static_cast<size_t>(i)] - mu[static_cast<size_t>(i)]) *
                        (f[static_cast<size_t>(j)] - mu[static_cast<size_t>(j)]);
        for (double& c : cov) c /= double(feats.size() - 1);
        for (int i = 0; i < d; ++i) cov[static_cast<size_t>(i) * d + i] += 1e-6;
    };
    std::vector<double> mu1, mu2, S1, S2;
    stats(real, mu1, S1);
    stats(gen, mu2, S2);

    double mean_term = 0.0;
    for (int i = 0; i < d; ++i) {
        double dm = mu1[static_cast<size_t>(i)] - mu2[static_cast<size_t>(i)];
        mean_term += dm * dm;
    }
    // tr((S1 S2)^{1/2}) via the symmetrized product R S2 R with R = S1^{1/2}
    auto R = detail::sym_sqrt(S1, d, "toy_fid S1");
    auto mid = detail::matmul_sq(detail::matmul_sq(R, S2, d), R, d);
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            double s = 0.5 * (mid[static_cast<size_t>(i) * d + j] + mid[static_cast<size_t>(j) * d + i]);
            mid[static_cast<size_t>(i) * d + j] = s;
            mid[static_cast<size_t>(j) * d + i] = s;
        }
    auto sq = detail::sym_sqrt(mid, d, "toy_fid product");
    double tr = 0.0;
    for (int i = 0; i < d; ++i)
        tr += S1[static_cast<size_t>(i) * d + i] + S2[static_cast<size_t>(i) * d + i] -
              2.0 * sq[static_cast<size_t>(i) * d + i];
    return mean_term + tr;
}

struct AlignmentMetrics {
    double avg_cosine = 0.0;
    double avg_mse = 0.0;
    int zero_vector_pairs = 0;
};

// Batch means of per-row cosine similarity and MSE. A zero vector on either
// side makes that pair's cosine 0 and is counted in zero_vector_pairs.
inline AlignmentMetrics alignment_metrics(const Tensor& d_diff, const Tensor& d_llm) {
    if (d_diff.shape() != d_llm.shape())
        throw ShapeError("alignment_metrics: " + shape_str(d_diff.shape()) + " vs " + shape_str(d_llm.shape()));
    const int N = d_diff.rows(), W = d_diff.cols();
    AlignmentMetrics m;
    for (int r = 0; r < N; ++r) {
        double dot = 0, na = 0, nb = 0, se = 0;
        for (int c = 0; c < W; ++c) {
            double a = d_diff.at(r, c), b = d_llm.at(r, c);
            dot += a * b;
            na += a * a;
            nb += b * b;
            se += (a - b) * (a - b);
        }
        if (na == 0.0 || nb == 0.0)
            ++m.zero_vector_pairs;
        else
            m.avg_cosine += dot / (std::sqrt(na) * std::sqrt(nb));
        m.avg_mse += se / double(W);
    }
    m.avg_cosine /= double(N);
    m.avg_mse /= double(N);
    return m;
}

// Corpus BLEU with clipped n-gram precisions up to max_n and the standard
// brevity penalty. n-gram orders with no candidate n-grams are skipped, so a
// one-word exact match still scores 1.
inline double bleu(const std::vector<std::vector<std::string>>& candidates,
                   const std::vector<std::vector<std::string>>& references, int max_n = 2) {
    if (candidates.empty() || references.empty()) throw ConfigError("bleu needs nonempty inputs");
    if (candidates.size() != references.size())
        throw ConfigError("bleu needs one reference per candidate, got " + std::to_string(candidates.size()) +
                          " vs " + std::to_string(references.size()));
    size_t cand_len = 0, ref_len = 0;
    std::vector<double> match(static_cast<size_t>(max_n), 0.0), total(static_cast<size_t>(max_n), 0.0);
    for (size_t s = 0; s < candidates.size(); ++s) {
        const auto& cand = candidates[s];
        const auto& ref = references[s];
        cand_len += cand.size();
        ref_len += ref.size();
        for (int n = 1; n <= max_n; ++n) {
            std::map<std::vector<std::string>, int> ref_counts;
            for (size_t i = 0; n <= static_cast<int>(ref.size()) && i + n <= ref.size(); ++i)
                ++ref_counts[std::vector<std::string>(ref.begin() + i, ref.begin() + i + n)];
            std::map<std::vector<std::string>, int> cand_counts;
            for (size_t i = 0; n <= static_cast<int>(cand.size()) && i + n <= cand.size(); ++i)
                ++cand_counts[std::vector<std::string>(cand.begin() + i, cand.begin() + i + n)];
            for (const auto& [gram, c] : cand_counts) {
                total[static_cast<size_t>(n - 1)] += c;
                auto it = ref_counts.find(gram);
                if (it != ref_counts.end()) match[static_cast<size_t>(n - 1)] += std::min(c, it->second);
            }
        }
    }
    double log_sum = 0.0;
    int used = 0;
    for (int n = 0; n < max_n; ++n) {
        if (total[static_cast<size_t>(n)] == 0.0) continue;
        if (match[static_cast<size_t>(n)] == 0.0) return 0.0;
        log_sum += std::log(match[static_cast<size_t>(n)] / total[static_cast<size_t>(n)]);
        ++used;
    }
    if (used == 0) return 0.0;
    double geo = std::exp(log_sum / double(used));
    double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - double(ref_len) / double(cand_len));
    return bp * geo;
}

inline double bleu_text(const std::vector<std::string>& candidates, const std::vector<std::string>& references,
                        int max_n = 2) {
    std::vector<std::vector<std::string>> c, r;
    for (const auto& s : candidates) c.push_back(split_words(s));
    for (const auto& s : references) r.push_back(split_words(s));
    return bleu(c, r, max_n);
}

// exp(mean NLL per token) with each sequence teacher-forced from BOS.
inline double perplexity(const ToyLlm& llm, const std::vector<std::vector<int>>& sequences, int bos_id) {
    if (sequences.empty()) throw ConfigError("perplexity needs a nonempty corpus");
    NoGradGuard ng;
    double nll_sum = 0.0;
    size_t tokens = 0;
    for (const auto& seq : sequences) {
        if (seq.empty()) throw ConfigError("perplexity: empty sequence in corpus");
        auto loss = teacher_forced_nll(llm, nullptr, {bos_id}, seq);
        nll_sum += loss.item() * double(seq.size());
        tokens += seq.size();
    }
    return std::exp(nll_sum / double(tokens));
}

}  // namespace duogen
