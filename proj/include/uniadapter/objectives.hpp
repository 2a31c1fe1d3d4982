#pragma once

// Training losses (contrastive alignment, image-text matching, answer
// generation) and retrieval/QA evaluation metrics.

#include <optional>

#include "uniadapter/tensor.hpp"

namespace uniadapter {

// Symmetric InfoNCE over the cosine-similarity matrix of paired batches.
// Inputs are L2-normalized embeddings, rows aligned (i-th text matches i-th
// visual); temperature is a trainable one-element tensor.
template <typename R>
Tensor<R> contrastive_loss(const Tensor<R>& visual_embed, const Tensor<R>& text_embed, const Tensor<R>& tau) {
    if (visual_embed.shape() != text_embed.shape())
        throw ShapeError("contrastive: batch shapes differ: " + shape_str(visual_embed.shape()) + " vs " +
                         shape_str(text_embed.shape()));
    const std::size_t batch = visual_embed.shape()[0];
    if (batch < 2) throw ContractError("contrastive loss needs a batch of at least 2 pairs");
    auto sim = mul_scalar_t(matmul(text_embed, transpose(visual_embed)), recip(tau));  // [B x B], text rows
    std::vector<std::size_t> diag(batch);
    for (std::size_t i = 0; i < batch; ++i) diag[i] = i;
    auto t2v = softmax_cross_entropy(sim, diag);
    auto v2t = softmax_cross_entropy(transpose(sim), diag);
    return scale(add(t2v, v2t), R(0.5));
}

// Plain cosine-similarity matrix (text rows x visual columns), no scaling.
template <typename R>
Tensor<R> similarity_matrix(const Tensor<R>& visual_embed, const Tensor<R>& text_embed) {
    return matmul(text_embed, transpose(visual_embed));
}

// For each row, the hardest off-diagonal column: argmax similarity, ties
// resolved toward the lowest index.
template <typename R>
std::vector<std::size_t> hardest_negatives(const Tensor<R>& sim) {
    if (sim.shape().size() != 2 || sim.shape()[0] != sim.shape()[1] || sim.shape()[0] < 2)
        throw ContractError("hardest_negatives needs a square similarity matrix of size >= 2, got " +
                            shape_str(sim.shape()));
    const std::size_t batch = sim.shape()[0];
    std::vector<std::size_t> out(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        std::size_t best = i == 0 ? 1 : 0;
        for (std::size_t j = 0; j < batch; ++j) {
            if (j == i) continue;
            if (sim.at(i, j) > sim.at(i, best)) best = j;
        }
        out[i] = best;
    }
    return out;
}

// Two-class cross-entropy on matching-head logits; labels 1 = matched pair.
template <typename R>
Tensor<R> itm_loss(const Tensor<R>& logits, const std::vector<std::size_t>& labels) {
    if (logits.shape().size() != 2 || logits.shape()[1] != 2)
        throw ShapeError("itm loss expects [n x 2] logits, got " + shape_str(logits.shape()));
    bool has_pos = false, has_neg = false;
    for (std::size_t l : labels) (l ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg)
        throw ContractError("itm loss needs at least one positive and one negative example");
    return softmax_cross_entropy(logits, labels);
}

// Teacher-forced decoding targets: prompt [bos, a_1..a_k], targets
// [a_1..a_k, eos]. The decoder consumes the prompt; mean token-level
// cross-entropy of its logits against the targets is the generation loss.
struct LmSequences {
    std::vector<std::size_t> prompt;
    std::vector<std::size_t> targets;
};

inline LmSequences lm_teacher_forcing(const std::vector<std::size_t>& answer, std::size_t bos, std::size_t eos) {
    if (answer.empty()) throw ContractError("answer generation loss needs a non-empty answer");
    LmSequences seq;
    seq.prompt.push_back(bos);
    seq.prompt.insert(seq.prompt.end(), answer.begin(), answer.end());
    seq.targets = answer;
    seq.targets.push_back(eos);
    return seq;
}

template <typename R>
Tensor<R> lm_loss(const Tensor<R>& decoder_logits, const std::vector<std::size_t>& targets) {
    if (targets.empty()) throw ContractError("answer generation loss needs a non-empty target sequence");
    return softmax_cross_entropy(decoder_logits, targets);
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRecord {
    std::optional<double> r1, r5, r10, median_rank, r_mean, accuracy;
    std::optional<double> loss;
    std::string split;
    std::size_t step = 0;
};

// Ranks by descending score; equal scores rank the lower gallery index
// first. Median of ranks averages the two middle values for even counts.
template <typename R>
MetricsRecord retrieval_metrics(const Tensor<R>& scores, const std::vector<std::size_t>& truth) {
    if (scores.shape().size() != 2) throw ShapeError("retrieval metrics expect a [Q x G] score matrix");
    const std::size_t queries = scores.shape()[0], gallery = scores.shape()[1];
    if (truth.size() != queries)
        throw ContractError("retrieval metrics: " + std::to_string(truth.size()) + " ground-truth entries for " +
                            std::to_string(queries) + " queries");
    if (gallery < 10) throw ContractError("retrieval metrics need a gallery of at least 10 for R@10");
    for (std::size_t t : truth)
        if (t >= gallery) throw IndexError("ground-truth index " + std::to_string(t) + " outside gallery");

    std::vector<double> ranks(queries);
    std::size_t hit1 = 0, hit5 = 0, hit10 = 0;
    for (std::size_t q = 0; q < queries; ++q) {
        const R target = scores.at(q, truth[q]);
        std::size_t rank = 1;
        for (std::size_t g = 0; g < gallery; ++g) {
            if (g == truth[q]) continue;
            if (scores.at(q, g) > target || (scores.at(q, g) == target && g < truth[q])) ++rank;
        }
        ranks[q] = static_cast<double>(rank);
        if (rank <= 1) ++hit1;
        if (rank <= 5) ++hit5;
        if (rank <= 10) ++hit10;
    }
    std::sort(ranks.begin(), ranks.end());
    MetricsRecord rec;
    rec.r1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(queries);
    rec.r5 = 100.0 * static_cast<double>(hit5) / static_cast<double>(queries);
    rec.r10 = 100.0 * static_cast<double>(hit10) / static_cast<double>(queries);
    rec.median_rank = queries % 2 ? ranks[queries / 2] : 0.5 * (ranks[queries / 2 - 1] + ranks[queries / 2]);
    rec.r_mean = (*rec.r1 + *rec.r5 + *rec.r10) / 3.0;
    return rec;
}

inline double vqa_accuracy(const std::vector<std::string>& predicted, const std::vector<std::string>& gold) {
    if (predicted.size() != gold.size())
        throw ContractError("accuracy: " + std::to_string(predicted.size()) + " predictions for " +
                            std::to_string(gold.size()) + " references");
    if (predicted.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i)
        if (predicted[i] == gold[i]) ++correct;
    return 100.0 * static_cast<double>(correct) / static_cast<double>(predicted.size());
}

}  // namespace uniadapter
