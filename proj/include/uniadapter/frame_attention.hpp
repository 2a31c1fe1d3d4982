#pragma once

// Video handling: per-frame feature sets, frame-major concatenation into the
// cross-attention input, and parameter-free frame-aware attention (PFA) that
// reweights patch tokens by the softmax of frame-CLS / text-CLS dot products.

#include "uniadapter/backbone.hpp"

namespace uniadapter {

template <typename R>
struct VideoFeatures {
    std::vector<FeatureSet<R>> frames;  // each [m+1 x d] with CLS at row 0

    std::size_t frame_count() const { return frames.size(); }

    void check() const {
        if (frames.empty()) throw ContractError("video with zero frames");
        const Shape& first = frames[0].tokens.shape();
        for (const auto& f : frames)
            if (f.tokens.shape() != first)
                throw ShapeError("frames disagree in shape: " + shape_str(first) + " vs " +
                                 shape_str(f.tokens.shape()));
    }
};

template <typename R>
struct FrameWeights {
    Tensor<R> weights;  // [1 x n], nonnegative, sums to 1

    std::size_t count() const { return weights.numel(); }
    R at(std::size_t i) const { return weights.data()[i]; }
};

struct PfaOptions {
    bool normalize = false;      // L2-normalize CLS vectors before the dot product
    bool stop_gradient = false;  // detach the weights from the tape
};

// Rows ordered frame-major: [cls_1, tok_11..tok_1m, cls_2, ...].
template <typename R>
Tensor<R> frame_concat(const VideoFeatures<R>& video) {
    video.check();
    if (video.frames.size() == 1) return video.frames[0].tokens;
    std::vector<Tensor<R>> parts;
    parts.reserve(video.frames.size());
    for (const auto& f : video.frames) parts.push_back(f.tokens);
    return concat_rows(parts);
}

// A_i = softmax_i( f^e_CLS,i . f^t_CLS ); no trainable parameters involved.
template <typename R>
FrameWeights<R> pfa_weights(const VideoFeatures<R>& video, const Tensor<R>& text_cls,
                            const PfaOptions& opts = {}) {
    video.check();
    const std::size_t d = video.frames[0].tokens.shape()[1];
    if (text_cls.numel() != d)
        throw ShapeError("pfa: text CLS width " + shape_str(text_cls.shape()) + " does not match frame width " +
                         std::to_string(d));
    std::vector<Tensor<R>> cls_rows;
    cls_rows.reserve(video.frames.size());
    for (const auto& f : video.frames) cls_rows.push_back(f.cls());
    Tensor<R> frame_cls = concat_rows(cls_rows);  // [n x d]
    Tensor<R> query = text_cls.shape().size() == 2 ? text_cls : Tensor<R>(Shape{1, d}, text_cls.data());
    if (opts.stop_gradient) {
        frame_cls = frame_cls.detach();
        query = query.detach();
    }
    if (opts.normalize) {
        frame_cls = l2_normalize_rows(frame_cls);
        query = l2_normalize_rows(query);
    }
    auto scores = transpose(matmul(frame_cls, transpose(query)));  // [1 x n]
    return FrameWeights<R>{softmax_rows(scores)};
}

// Patch tokens of frame i scaled by A_i; frame CLS rows pass through
// unscaled. Output row order matches frame_concat.
template <typename R>
Tensor<R> pfa_apply(const VideoFeatures<R>& video, const FrameWeights<R>& weights) {
    video.check();
    const std::size_t n = video.frames.size();
    if (weights.count() != n)
        throw ContractError("pfa: " + std::to_string(weights.count()) + " weights for " + std::to_string(n) +
                            " frames");
    const std::size_t m = video.frames[0].tokens.shape()[0] - 1;
    std::vector<Tensor<R>> parts;
    parts.reserve(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        parts.push_back(video.frames[i].cls());
        if (m > 0) {
            auto patches = slice_rows(video.frames[i].tokens, 1, m);
            parts.push_back(mul_scalar_t(patches, slice_cols(weights.weights, i, 1)));
        }
    }
    return concat_rows(parts);
}

// Convenience path used by the retrieval forward pass.
template <typename R>
Tensor<R> pfa_visual_tokens(const VideoFeatures<R>& video, const Tensor<R>& text_cls,
                            const PfaOptions& opts = {}) {
    return pfa_apply(video, pfa_weights(video, text_cls, opts));
}

}  // namespace uniadapter
