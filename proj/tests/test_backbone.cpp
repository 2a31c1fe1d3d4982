#include <catch2/catch_amalgamated.hpp>

#include "uniadapter/backbone.hpp"
#include "uniadapter/gradcheck.hpp"

using namespace uniadapter;
using Tf = Tensor<float>;
using Td = Tensor<double>;

namespace {

BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.depth_visual = 2;
    cfg.depth_text = 2;
    cfg.depth_fusion = 2;
    cfg.depth_decoder = 1;
    cfg.patches = 4;
    cfg.patch_dim = 6;
    cfg.vocab = 32;
    cfg.max_seq = 12;
    cfg.ffn_mult = 2;
    cfg.proj_dim = 8;
    return cfg;
}

template <typename R>
struct Model {
    ParameterStore<R> store;
    std::unique_ptr<Backbone<R>> net;

    explicit Model(const BackboneConfig& cfg, std::uint64_t seed = 1234) {
        Rng rng(seed);
        net = std::make_unique<Backbone<R>>(cfg, store, rng);
    }
};

}  // namespace

TEST_CASE("config validation") {
    BackboneConfig cfg = tiny_config();
    cfg.hidden = 10;
    cfg.heads = 4;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.depth_fusion = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_NOTHROW(tiny_config().validate());
}

TEST_CASE("encode_visual shapes and input checks") {
    Model<float> m(tiny_config());
    Rng rng(7);
    auto patches = Tf::randn({4, 6}, rng);
    auto feats = m.net->encode_visual(patches);
    CHECK(feats.tokens.shape() == Shape{5, 16});
    CHECK(feats.cls().shape() == Shape{1, 16});
    CHECK(feats.modality == Modality::Image);

    CHECK_THROWS_AS(m.net->encode_visual(Tf::zeros({3, 6})), ShapeError);
    CHECK_THROWS_AS(m.net->encode_visual(Tf::zeros({4, 5})), ShapeError);
}

TEST_CASE("zero patch input depends only on CLS and positional state") {
    Model<float> m(tiny_config());
    auto zero = Tf::zeros({4, 6});
    auto out1 = m.net->encode_visual(zero).tokens;
    auto out2 = m.net->encode_visual(zero).tokens;
    CHECK(out1.data() == out2.data());  // deterministic replay, bitwise

    // Zero features enter only through the patch embedding, so rewriting
    // that matrix cannot change the output.
    auto& embed = m.store.get("backbone.visual.patch_embed");
    for (auto& v : embed.data()) v = 17.f;
    auto out3 = m.net->encode_visual(zero).tokens;
    CHECK(out1.data() == out3.data());
}

TEST_CASE("distinct visual inputs give distinct CLS outputs") {
    Model<float> m(tiny_config());
    Rng rng(3);
    auto a = m.net->encode_visual(Tf::randn({4, 6}, rng));
    auto b = m.net->encode_visual(Tf::randn({4, 6}, rng));
    CHECK(a.cls().data() != b.cls().data());
}

TEST_CASE("encode_text length and vocabulary contracts") {
    Model<float> m(tiny_config());
    auto empty = m.net->encode_text({});
    CHECK(empty.tokens.shape() == Shape{1, 16});

    auto feats = m.net->encode_text({1, 2, 3});
    CHECK(feats.tokens.shape() == Shape{4, 16});

    CHECK_THROWS_AS(m.net->encode_text({31, 32}), IndexError);
    CHECK_THROWS_AS(m.net->encode_text(std::vector<std::size_t>(13, 1)), ContractError);
}

TEST_CASE("positional embeddings make token order matter") {
    Model<float> m(tiny_config());
    auto ab = m.net->encode_text({5, 9, 2});
    auto ba = m.net->encode_text({2, 9, 5});
    CHECK(ab.tokens.data() != ba.tokens.data());
}

TEST_CASE("fuse contracts and independence from visual input with zero output projection") {
    Model<float> m(tiny_config());
    Rng rng(11);
    auto text = m.net->encode_text({4, 8});
    CHECK_THROWS_AS(m.net->fuse(text, Tf::zeros({0, 16})), ContractError);
    CHECK_THROWS_AS(m.net->fuse(text, Tf::zeros({3, 7})), ShapeError);

    auto fused = m.net->fuse(text, Tf::randn({6, 16}, rng));
    CHECK(fused.tokens.shape() == Shape{3, 16});  // output length = text length
    CHECK(fused.modality == Modality::Fused);

    // Visual input reaches the block only through cross-attention: zeroing
    // the cross-attention output projections severs it exactly.
    for (int i = 0; i < 2; ++i) {
        auto& wo = m.store.get("backbone.fusion.blk" + std::to_string(i) + ".xattn.wo");
        std::fill(wo.data().begin(), wo.data().end(), 0.f);
    }
    auto fa = m.net->fuse(text, Tf::randn({6, 16}, rng));
    auto fb = m.net->fuse(text, Tf::randn({9, 16}, rng));
    CHECK(fa.tokens.data() == fb.tokens.data());
}

TEST_CASE("fusion block with zero value projection reduces to the text-only stream") {
    BackboneConfig cfg = tiny_config();
    cfg.depth_fusion = 1;
    Model<double> m(cfg, 99);
    for (const char* w : {"xattn.wv"}) {
        auto& t = m.store.get(std::string("backbone.fusion.blk0.") + w);
        std::fill(t.data().begin(), t.data().end(), 0.0);
    }
    Rng rng(5);
    auto text = m.net->encode_text({3, 7, 1});
    auto visual = Td::randn({6, 16}, rng);
    auto fused = m.net->fuse(text, visual);

    // Hand-rolled text-only block: q = x + MSA(LN1 x); out = q + FFN(LN3 q),
    // then the final layer norm. Must agree with the full fusion pass once
    // cross-attention contributes exactly zero.
    auto& store = m.store;
    auto ln = [&](const std::string& p, const Td& x) {
        return layer_norm_rows(x, store.get(p + ".gamma"), store.get(p + ".beta"), 1e-5);
    };
    auto attn = [&](const std::string& p, const Td& x) {
        const std::size_t dh = 8;
        std::vector<Td> ctx;
        auto q = matmul(x, store.get(p + ".wq"));
        auto k = matmul(x, store.get(p + ".wk"));
        auto v = matmul(x, store.get(p + ".wv"));
        for (std::size_t h = 0; h < 2; ++h) {
            auto qh = slice_cols(q, h * dh, dh), kh = slice_cols(k, h * dh, dh), vh = slice_cols(v, h * dh, dh);
            ctx.push_back(matmul(softmax_rows(scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(8.0))), vh));
        }
        return matmul(concat_cols(ctx), store.get(p + ".wo"));
    };
    auto x = text.tokens;
    auto q = add(x, attn("backbone.fusion.blk0.attn", ln("backbone.fusion.blk0.ln1", x)));
    auto ffn_in = ln("backbone.fusion.blk0.ln3", q);
    auto ffn = matmul(gelu(matmul(ffn_in, store.get("backbone.fusion.blk0.ffn.w1"))),
                      store.get("backbone.fusion.blk0.ffn.w2"));
    auto expect = ln("backbone.fusion.final_ln", add(q, ffn));

    REQUIRE(expect.shape() == fused.tokens.shape());
    for (std::size_t i = 0; i < expect.numel(); ++i)
        CHECK_THAT(fused.tokens.data()[i], Catch::Matchers::WithinAbs(expect.data()[i], 1e-6));
}

TEST_CASE("duplicating every visual token leaves fusion unchanged") {
    Model<double> m(tiny_config(), 31);
    Rng rng(13);
    auto text = m.net->encode_text({2, 4, 6});
    auto visual = Td::randn({5, 16}, rng);
    auto doubled = concat_rows<double>({visual, visual});
    auto f1 = m.net->fuse(text, visual);
    auto f2 = m.net->fuse(text, doubled);
    for (std::size_t i = 0; i < f1.tokens.numel(); ++i)
        CHECK_THAT(f1.tokens.data()[i], Catch::Matchers::WithinAbs(f2.tokens.data()[i], 1e-5));
}

TEST_CASE("decoder causality and distribution normalization") {
    Model<float> m(tiny_config());
    Rng rng(17);
    auto text = m.net->encode_text({1, 2});
    auto fused = m.net->fuse(text, Tf::randn({4, 16}, rng));

    CHECK_THROWS_AS(m.net->decode_logits(fused, {}), ContractError);
    CHECK_THROWS_AS(m.net->decode_logits(fused, std::vector<std::size_t>(13, 1)), ContractError);

    std::vector<std::size_t> prompt{3, 5, 7, 9};
    auto base = m.net->decode_logits(fused, prompt);
    CHECK(base.shape() == Shape{4, 32});

    // Changing position j never changes logits at positions < j.
    for (std::size_t j = 1; j < prompt.size(); ++j) {
        auto mutated = prompt;
        mutated[j] = (mutated[j] + 11) % 32;
        auto out = m.net->decode_logits(fused, mutated);
        for (std::size_t pos = 0; pos < j; ++pos)
            for (std::size_t v = 0; v < 32; ++v) CHECK(out.at(pos, v) == base.at(pos, v));
    }

    auto dist = softmax_rows(base);
    for (std::size_t pos = 0; pos < 4; ++pos) {
        float sum = 0.f;
        for (std::size_t v = 0; v < 32; ++v) sum += dist.at(pos, v);
        CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0f, 1e-6));
    }
}

TEST_CASE("full forward pass is differentiable end to end") {
    BackboneConfig cfg = tiny_config();
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.depth_visual = 1;
    cfg.depth_text = 1;
    cfg.depth_fusion = 1;
    cfg.patches = 2;
    cfg.patch_dim = 3;
    cfg.ffn_mult = 2;
    cfg.proj_dim = 4;
    Model<double> m(cfg, 77);

    // Perturbing a handful of weights through the whole pipeline must match
    // finite differences; this catches residual mis-wiring that per-op
    // checks cannot.
    std::vector<std::string> probed = {"backbone.fusion.blk0.xattn.wq", "backbone.text.blk0.ffn.w1",
                                       "backbone.visual.blk0.attn.wv", "head.itm.w"};
    Rng rng(23);
    auto patches = Td::randn({2, 3}, rng);
    auto loss_fn = [&](const std::vector<Td>&) {
        auto vis = m.net->encode_visual(patches);
        auto txt = m.net->encode_text({4, 9});
        auto fused = m.net->fuse(txt, vis.tokens);
        return mean_all(m.net->itm_logits(fused));
    };
    std::vector<Td> inputs;
    for (const auto& name : probed) inputs.push_back(m.store.get(name));
    auto report = grad_check<double>("backbone_pipeline", loss_fn, inputs, 1e-5, 1e-6);
    INFO(report.line());
    CHECK(report.pass);
}
