#pragma once

// The miniature hybrid-stream vision-language model: a visual encoder, a
// textual encoder, a fusion encoder that injects visual tokens through
// cross-attention, and a causal decoder for answer generation. Blocks are
// pre-norm; adaptation reaches in through the hook interface below, so the
// backbone itself stays oblivious to which variant (if any) is attached.

#include "uniadapter/params.hpp"
#include "uniadapter/tensor.hpp"

namespace uniadapter {

struct BackboneConfig {
    std::size_t hidden = 64;
    std::size_t heads = 4;
    std::size_t depth_visual = 4;
    std::size_t depth_text = 4;
    std::size_t depth_fusion = 4;
    std::size_t depth_decoder = 2;
    std::size_t patches = 9;     // patch rows per image
    std::size_t patch_dim = 16;  // raw feature width of one patch row
    std::size_t vocab = 64;
    std::size_t max_seq = 24;
    std::size_t ffn_mult = 4;
    std::size_t proj_dim = 32;  // contrastive projection width
    float ln_eps = 1e-5f;

    void validate() const {
        if (hidden == 0 || heads == 0 || hidden % heads != 0)
            throw ConfigError("hidden size " + std::to_string(hidden) + " must be a positive multiple of heads " +
                              std::to_string(heads));
        for (std::size_t depth : {depth_visual, depth_text, depth_fusion, depth_decoder})
            if (depth < 1) throw ConfigError("encoder depths must be >= 1");
        if (patches == 0 || patch_dim == 0 || vocab == 0 || max_seq == 0)
            throw ConfigError("patches, patch_dim, vocab and max_seq must be positive");
    }

    // The shape used when auditing published tunable-parameter counts; it is
    // never trained here.
    static BackboneConfig paper_audit() {
        BackboneConfig cfg;
        cfg.hidden = 768;
        cfg.heads = 12;
        cfg.depth_visual = 12;
        cfg.depth_text = 12;
        cfg.depth_fusion = 12;
        cfg.depth_decoder = 12;
        cfg.vocab = 1000;
        cfg.max_seq = 32;
        cfg.proj_dim = 256;
        return cfg;
    }
};

enum class EncoderKind { Visual, Text, Fusion, Decoder };

inline const char* encoder_name(EncoderKind k) {
    switch (k) {
        case EncoderKind::Visual: return "visual";
        case EncoderKind::Text: return "text";
        case EncoderKind::Fusion: return "fusion";
        case EncoderKind::Decoder: return "decoder";
    }
    return "?";
}

enum class ProjKind { Query, Key, Value, Output };

enum class AttnKind { SelfAttn, CrossAttn };

enum class Modality { Image, Video, Text, Fused };

// Zeros skips the random draws; useful when only parameter shapes matter
// (count audits) or when a checkpoint overwrites everything anyway.
enum class ParamInit { Random, Zeros };

template <typename R>
struct FeatureSet {
    Tensor<R> tokens;  // [seq x d], CLS at row 0
    Modality modality = Modality::Text;

    Tensor<R> cls() const { return slice_rows(tokens, 0, 1); }
    std::size_t length() const { return tokens.shape()[0]; }
};

// Seams the adaptation engine can occupy. The defaults reproduce the frozen
// backbone, so a null or default-constructed hook set means "no adaptation".
template <typename R>
struct AdaptationHooks {
    virtual ~AdaptationHooks() = default;

    // Attention projections (LoRA attaches here).
    virtual Tensor<R> project(EncoderKind, std::size_t, AttnKind, ProjKind, const Tensor<R>& x,
                              const Tensor<R>& w) const {
        return matmul(x, w);
    }

    // Residual carrier at the attention->FFN seam of unimodal blocks; the
    // block output is carrier + FFN(LN(h)).
    virtual Tensor<R> unimodal_carrier(EncoderKind, std::size_t, const Tensor<R>& h) const { return h; }

    // Carrier for fusion/decoder blocks: q is the self-attention stream,
    // h the cross-attention stream. Frozen behaviour keeps only h.
    virtual Tensor<R> crossmodal_carrier(EncoderKind, std::size_t, const Tensor<R>& /*q*/,
                                         const Tensor<R>& h) const {
        return h;
    }
};

template <typename R>
class Backbone {
public:
    Backbone(BackboneConfig cfg, ParameterStore<R>& store, Rng& rng, ParamInit init = ParamInit::Random)
        : cfg_(cfg), store_(&store) {
        cfg_.validate();
        const std::size_t d = cfg_.hidden;

        // Fan-in scaled init keeps per-block signal variance O(1) across
        // hidden sizes; embeddings use a small fixed spread.
        auto dense = [&](const std::string& name, std::size_t rows, std::size_t cols) {
            const R stddev = static_cast<R>(1.0 / std::sqrt(static_cast<double>(rows)));
            store.add(name,
                      init == ParamInit::Random ? Tensor<R>::randn({rows, cols}, rng, stddev)
                                                : Tensor<R>::zeros({rows, cols}),
                      true);
        };
        auto embed = [&](const std::string& name, std::size_t rows, std::size_t cols) {
            store.add(name,
                      init == ParamInit::Random ? Tensor<R>::randn({rows, cols}, rng, R(0.1))
                                                : Tensor<R>::zeros({rows, cols}),
                      true);
        };
        auto ln_pair = [&](const std::string& prefix) {
            store.add(prefix + ".gamma", Tensor<R>::full({d}, R(1)), true);
            store.add(prefix + ".beta", Tensor<R>::zeros({d}), true);
        };
        auto block = [&](const std::string& prefix, bool cross) {
            for (const char* w : {"wq", "wk", "wv", "wo"}) dense(prefix + ".attn." + w, d, d);
            ln_pair(prefix + ".ln1");
            if (cross) {
                for (const char* w : {"wq", "wk", "wv", "wo"}) dense(prefix + ".xattn." + w, d, d);
                ln_pair(prefix + ".ln2");
            }
            dense(prefix + ".ffn.w1", d, cfg_.ffn_mult * d);
            dense(prefix + ".ffn.w2", cfg_.ffn_mult * d, d);
            ln_pair(prefix + (cross ? ".ln3" : ".ln2"));
        };

        dense("backbone.visual.patch_embed", cfg_.patch_dim, d);
        embed("backbone.visual.cls", 1, d);
        embed("backbone.visual.pos", cfg_.patches + 1, d);
        for (std::size_t i = 0; i < cfg_.depth_visual; ++i) block("backbone.visual.blk" + std::to_string(i), false);
        ln_pair("backbone.visual.final_ln");

        embed("backbone.text.embed", cfg_.vocab, d);
        embed("backbone.text.cls", 1, d);
        embed("backbone.text.pos", cfg_.max_seq + 1, d);
        for (std::size_t i = 0; i < cfg_.depth_text; ++i) block("backbone.text.blk" + std::to_string(i), false);
        ln_pair("backbone.text.final_ln");

        for (std::size_t i = 0; i < cfg_.depth_fusion; ++i) block("backbone.fusion.blk" + std::to_string(i), true);
        ln_pair("backbone.fusion.final_ln");

        embed("backbone.decoder.embed", cfg_.vocab, d);
        embed("backbone.decoder.pos", cfg_.max_seq, d);
        for (std::size_t i = 0; i < cfg_.depth_decoder; ++i) block("backbone.decoder.blk" + std::to_string(i), true);
        ln_pair("backbone.decoder.final_ln");

        dense("head.itc.visual_proj", d, cfg_.proj_dim);
        dense("head.itc.text_proj", d, cfg_.proj_dim);
        dense("head.itm.w", d, 2);
        dense("head.lm.w", d, cfg_.vocab);
        store.add("head.itc.temperature", Tensor<R>::full({1}, R(0.07)), true);
    }

    const BackboneConfig& config() const { return cfg_; }
    ParameterStore<R>& store() const { return *store_; }

    FeatureSet<R> encode_visual(const Tensor<R>& patches, const AdaptationHooks<R>* hooks = nullptr) const {
        if (patches.shape().size() != 2 || patches.shape()[0] != cfg_.patches || patches.shape()[1] != cfg_.patch_dim)
            throw ShapeError("encode_visual expects [" + std::to_string(cfg_.patches) + "x" +
                             std::to_string(cfg_.patch_dim) + "] patches, got " + shape_str(patches.shape()));
        auto embedded = matmul(patches, p("backbone.visual.patch_embed"));
        auto seq = add(concat_rows<R>({p("backbone.visual.cls"), embedded}), p("backbone.visual.pos"));
        for (std::size_t i = 0; i < cfg_.depth_visual; ++i)
            seq = unimodal_block(EncoderKind::Visual, i, "backbone.visual.blk" + std::to_string(i), seq, hooks);
        seq = final_ln("backbone.visual.final_ln", seq);
        return FeatureSet<R>{seq, Modality::Image};
    }

    FeatureSet<R> encode_text(const std::vector<std::size_t>& tokens,
                              const AdaptationHooks<R>* hooks = nullptr) const {
        if (tokens.size() > cfg_.max_seq)
            throw ContractError("text length " + std::to_string(tokens.size()) + " exceeds max sequence " +
                                std::to_string(cfg_.max_seq));
        Tensor<R> seq;
        if (tokens.empty()) {
            seq = p("backbone.text.cls");
        } else {
            auto looked = embedding_lookup(p("backbone.text.embed"), tokens);
            seq = concat_rows<R>({p("backbone.text.cls"), looked});
        }
        seq = add(seq, slice_rows(p("backbone.text.pos"), 0, tokens.size() + 1));
        for (std::size_t i = 0; i < cfg_.depth_text; ++i)
            seq = unimodal_block(EncoderKind::Text, i, "backbone.text.blk" + std::to_string(i), seq, hooks);
        seq = final_ln("backbone.text.final_ln", seq);
        return FeatureSet<R>{seq, Modality::Text};
    }

    // Fusion encoder: text features in, visual tokens injected into every
    // cross-attention layer.
    FeatureSet<R> fuse(const FeatureSet<R>& text, const Tensor<R>& visual_tokens,
                       const AdaptationHooks<R>* hooks = nullptr) const {
        if (visual_tokens.numel() == 0 || visual_tokens.shape().size() != 2 || visual_tokens.shape()[0] == 0)
            throw ContractError("fuse requires a non-empty visual token matrix");
        if (visual_tokens.shape()[1] != cfg_.hidden)
            throw ShapeError("fuse: visual token width " + shape_str(visual_tokens.shape()) + " != hidden " +
                             std::to_string(cfg_.hidden));
        Tensor<R> seq = text.tokens;
        for (std::size_t i = 0; i < cfg_.depth_fusion; ++i)
            seq = crossmodal_block(EncoderKind::Fusion, i, "backbone.fusion.blk" + std::to_string(i), seq,
                                   visual_tokens, /*causal=*/false, hooks);
        seq = final_ln("backbone.fusion.final_ln", seq);
        return FeatureSet<R>{seq, Modality::Fused};
    }

    // Causal decoding over a prompt, cross-attending into fused features.
    // Returns per-position vocab logits [t x vocab].
    Tensor<R> decode_logits(const FeatureSet<R>& fused, const std::vector<std::size_t>& prompt,
                            const AdaptationHooks<R>* hooks = nullptr) const {
        if (prompt.empty()) throw ContractError("decode requires a non-empty prompt");
        if (prompt.size() > cfg_.max_seq)
            throw ContractError("prompt length " + std::to_string(prompt.size()) + " exceeds max sequence " +
                                std::to_string(cfg_.max_seq));
        auto seq = add(embedding_lookup(p("backbone.decoder.embed"), prompt),
                       slice_rows(p("backbone.decoder.pos"), 0, prompt.size()));
        for (std::size_t i = 0; i < cfg_.depth_decoder; ++i)
            seq = crossmodal_block(EncoderKind::Decoder, i, "backbone.decoder.blk" + std::to_string(i), seq,
                                   fused.tokens, /*causal=*/true, hooks);
        seq = final_ln("backbone.decoder.final_ln", seq);
        return matmul(seq, p("head.lm.w"));
    }

    // Greedy argmax decoding from `bos` until `eos` or max_len tokens.
    std::vector<std::size_t> greedy_decode(const FeatureSet<R>& fused, std::size_t bos, std::size_t eos,
                                           std::size_t max_len, const AdaptationHooks<R>* hooks = nullptr) const {
        std::vector<std::size_t> prompt{bos};
        std::vector<std::size_t> out;
        while (out.size() < max_len && prompt.size() < cfg_.max_seq) {
            auto logits = decode_logits(fused, prompt, hooks);
            const std::size_t last = prompt.size() - 1;
            std::size_t best = 0;
            R best_v = logits.at(last, 0);
            for (std::size_t v = 1; v < cfg_.vocab; ++v)
                if (logits.at(last, v) > best_v) {
                    best_v = logits.at(last, v);
                    best = v;
                }
            if (best == eos) break;
            out.push_back(best);
            prompt.push_back(best);
        }
        return out;
    }

    // Contrastive embeddings: projected, L2-normalized CLS.
    Tensor<R> itc_embed_visual(const FeatureSet<R>& vis) const {
        return l2_normalize_rows(matmul(vis.cls(), p("head.itc.visual_proj")));
    }
    Tensor<R> itc_embed_text(const FeatureSet<R>& txt) const {
        return l2_normalize_rows(matmul(txt.cls(), p("head.itc.text_proj")));
    }
    Tensor<R> itm_logits(const FeatureSet<R>& fused) const { return matmul(fused.cls(), p("head.itm.w")); }
    Tensor<R> temperature() const { return p("head.itc.temperature"); }

private:
    Tensor<R>& p(const std::string& name) const { return store_->get(name); }

    Tensor<R> final_ln(const std::string& prefix, const Tensor<R>& x) const {
        return layer_norm_rows(x, p(prefix + ".gamma"), p(prefix + ".beta"), static_cast<R>(cfg_.ln_eps));
    }

    Tensor<R> attention(EncoderKind enc, std::size_t layer, AttnKind kind, const std::string& prefix,
                        const Tensor<R>& q_in, const Tensor<R>& kv_in, bool causal,
                        const AdaptationHooks<R>* hooks) const {
        static const AdaptationHooks<R> plain;
        const AdaptationHooks<R>* h = hooks ? hooks : &plain;
        const std::size_t d = cfg_.hidden, nh = cfg_.heads, dh = d / nh;
        auto q = h->project(enc, layer, kind, ProjKind::Query, q_in, p(prefix + ".wq"));
        auto k = h->project(enc, layer, kind, ProjKind::Key, kv_in, p(prefix + ".wk"));
        auto v = h->project(enc, layer, kind, ProjKind::Value, kv_in, p(prefix + ".wv"));
        std::vector<Tensor<R>> ctx;
        ctx.reserve(nh);
        const R inv_sqrt_dh = static_cast<R>(1.0 / std::sqrt(static_cast<double>(dh)));
        for (std::size_t head = 0; head < nh; ++head) {
            auto qh = slice_cols(q, head * dh, dh);
            auto kh = slice_cols(k, head * dh, dh);
            auto vh = slice_cols(v, head * dh, dh);
            auto attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), causal);
            ctx.push_back(matmul(attn, vh));
        }
        return h->project(enc, layer, kind, ProjKind::Output, concat_cols(ctx), p(prefix + ".wo"));
    }

    Tensor<R> ffn(const std::string& prefix, const Tensor<R>& x) const {
        return matmul(gelu(matmul(x, p(prefix + ".ffn.w1"))), p(prefix + ".ffn.w2"));
    }

    Tensor<R> block_ln(const std::string& blk, const char* ln, const Tensor<R>& x) const {
        return layer_norm_rows(x, p(blk + "." + ln + ".gamma"), p(blk + "." + ln + ".beta"),
                               static_cast<R>(cfg_.ln_eps));
    }

    Tensor<R> unimodal_block(EncoderKind enc, std::size_t layer, const std::string& blk, const Tensor<R>& x,
                             const AdaptationHooks<R>* hooks) const {
        static const AdaptationHooks<R> plain;
        const AdaptationHooks<R>* h = hooks ? hooks : &plain;
        auto xn = block_ln(blk, "ln1", x);
        auto q = add(x, attention(enc, layer, AttnKind::SelfAttn, blk + ".attn", xn, xn, /*causal=*/false, hooks));
        auto carrier = h->unimodal_carrier(enc, layer, q);
        return add(carrier, ffn(blk, block_ln(blk, "ln2", q)));
    }

    Tensor<R> crossmodal_block(EncoderKind enc, std::size_t layer, const std::string& blk, const Tensor<R>& x,
                               const Tensor<R>& visual, bool causal, const AdaptationHooks<R>* hooks) const {
        static const AdaptationHooks<R> plain;
        const AdaptationHooks<R>* h = hooks ? hooks : &plain;
        auto xn = block_ln(blk, "ln1", x);
        auto q = add(x, attention(enc, layer, AttnKind::SelfAttn, blk + ".attn", xn, xn, causal, hooks));
        auto hstream = add(q, attention(enc, layer, AttnKind::CrossAttn, blk + ".xattn", block_ln(blk, "ln2", q),
                                        visual, /*causal=*/false, hooks));
        auto carrier = h->crossmodal_carrier(enc, layer, q, hstream);
        return add(carrier, ffn(blk, block_ln(blk, "ln3", hstream)));
    }

    BackboneConfig cfg_;
    ParameterStore<R>* store_;
};

}  // namespace uniadapter
