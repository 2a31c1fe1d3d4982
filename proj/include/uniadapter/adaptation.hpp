#pragma once

// The adaptation engine: bottleneck adapter variants, UniAdapter weight
// sharing, query-residual fusion blocks, LoRA on attention projections,
// insertion policy, freeze control and exact tunable-parameter accounting.

#include <iostream>
#include <optional>
#include <set>

#include "uniadapter/backbone.hpp"

namespace uniadapter {

enum class Variant { None, LinearProbe, FullFinetune, SequentialAdapter, ParallelAdapter, Lora, UniAdapter };

enum class Sharing { NoShare, ShareDown, ShareUp, ShareBoth };

enum class AdapterActivation { Relu, Gelu };

// Fusion blocks can add the query-stream adapter either as written (carrying
// the q residual into the block output a second time) or as the bare delta,
// which preserves the zero-init identity with the frozen backbone.
enum class QueryResidualForm { Verbatim, DeltaOnly };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::None: return "none";
        case Variant::LinearProbe: return "linear_probe";
        case Variant::FullFinetune: return "full_finetune";
        case Variant::SequentialAdapter: return "sequential_adapter";
        case Variant::ParallelAdapter: return "parallel_adapter";
        case Variant::Lora: return "lora";
        case Variant::UniAdapter: return "uniadapter";
    }
    return "?";
}

struct AdaptationConfig {
    Variant variant = Variant::UniAdapter;
    std::size_t bottleneck = 16;  // r
    double scale = 0.1;           // s
    Sharing sharing = Sharing::ShareDown;
    bool modality_visual = true;
    bool modality_text = true;
    bool modality_cross = true;
    // Layer indices receiving adapters, per encoder; empty means every layer.
    std::vector<std::size_t> insert_visual;
    std::vector<std::size_t> insert_text;
    std::vector<std::size_t> insert_fusion;
    bool query_residual = true;
    QueryResidualForm query_residual_form = QueryResidualForm::Verbatim;
    bool pfa = false;
    bool pfa_stop_gradient = false;
    bool pfa_normalize = false;
    bool share_encoder_decoder = false;
    std::size_t lora_rank = 8;
    double lora_alpha = 8.0;
    AdapterActivation activation = AdapterActivation::Relu;

    bool uses_adapters() const {
        return variant == Variant::SequentialAdapter || variant == Variant::ParallelAdapter ||
               variant == Variant::UniAdapter;
    }

    void validate(const BackboneConfig& backbone) const {
        if (bottleneck < 1) throw ConfigError("bottleneck r must be >= 1");
        if (!std::isfinite(scale)) throw ConfigError("adapter scale must be finite");
        if (variant != Variant::UniAdapter && uses_adapters() && sharing != Sharing::NoShare)
            throw ConfigError("weight sharing strategies apply to the uniadapter variant only");
        if (query_residual && uses_adapters() && !modality_text)
            throw ConfigError("query-residual adaptation shares the textual adapter and requires the T modality");
        if (share_encoder_decoder && !modality_cross)
            throw ConfigError("encoder-decoder adapter sharing requires the C modality");
        if (variant == Variant::Lora && lora_rank < 1) throw ConfigError("lora rank must be >= 1");
        auto check_layers = [](const std::vector<std::size_t>& layers, std::size_t depth, const char* enc) {
            for (std::size_t i : layers)
                if (i >= depth)
                    throw ConfigError(std::string("insert layer ") + std::to_string(i) + " out of range for " + enc +
                                      " depth " + std::to_string(depth));
        };
        check_layers(insert_visual, backbone.depth_visual, "visual");
        check_layers(insert_text, backbone.depth_text, "text");
        check_layers(insert_fusion, backbone.depth_fusion, "fusion");
        if (uses_adapters() && bottleneck > backbone.hidden)
            std::cerr << "warning: bottleneck r=" << bottleneck << " exceeds hidden d=" << backbone.hidden
                      << " (over-complete adapter)\n";
    }
};

// ---------------------------------------------------------------------------
// Adapter forward forms

template <typename R>
Tensor<R> adapter_activation(const Tensor<R>& x, AdapterActivation act) {
    return act == AdapterActivation::Relu ? relu(x) : gelu(x);
}

// delta(x) = s * sigma(x W_down) W_up
template <typename R>
Tensor<R> adapter_delta(const Tensor<R>& x, const Tensor<R>& down, const Tensor<R>& up, R s,
                        AdapterActivation act = AdapterActivation::Relu) {
    return scale(matmul(adapter_activation(matmul(x, down), act), up), s);
}

// Residual bottleneck: x + s * sigma(x W_down) W_up.
template <typename R>
Tensor<R> bottleneck_forward(const Tensor<R>& x, const Tensor<R>& down, const Tensor<R>& up, R s,
                             AdapterActivation act = AdapterActivation::Relu) {
    if (x.shape().size() != 2 || down.shape().size() != 2 || x.shape()[1] != down.shape()[0])
        throw ShapeError("adapter: input " + shape_str(x.shape()) + " does not match down projection " +
                         shape_str(down.shape()));
    if (up.shape()[0] != down.shape()[1] || up.shape()[1] != x.shape()[1])
        throw ShapeError("adapter: up projection " + shape_str(up.shape()) + " does not match down " +
                         shape_str(down.shape()));
    return add(x, adapter_delta(x, down, up, s, act));
}

// Cross-modal two-branch form: one shared down activation feeding both the
// reused textual up-projection and the cross-modal up-projection.
template <typename R>
Tensor<R> uniadapter_crossmodal(const Tensor<R>& x, const Tensor<R>& down, const Tensor<R>& up_text,
                                const Tensor<R>& up_cross, R s, AdapterActivation act = AdapterActivation::Relu) {
    auto hidden = adapter_activation(matmul(x, down), act);
    return add(x, scale(add(matmul(hidden, up_text), matmul(hidden, up_cross)), s));
}

// x (W + alpha/rank * A B), the low-rank reparameterization of a frozen
// linear layer.
template <typename R>
Tensor<R> lora_linear(const Tensor<R>& x, const Tensor<R>& frozen_w, const Tensor<R>& a, const Tensor<R>& b,
                      R alpha) {
    const R scaling = alpha / static_cast<R>(a.shape()[1]);
    return add(matmul(x, frozen_w), scale(matmul(matmul(x, a), b), scaling));
}

// ---------------------------------------------------------------------------
// Parameter plan

template <typename R>
class AdaptationEngine : public AdaptationHooks<R> {
public:
    struct UniSite {
        bool active = false;
        Tensor<R> down, up;
    };
    struct CrossSite {
        bool active = false;
        bool two_branch = false;     // Eq-style reuse of the textual up
        bool query_residual = false;
        Tensor<R> down, up_cross, up_text;
        Tensor<R> q_down, q_up;  // textual adapter at the same layer
    };
    struct LoraSite {
        bool active = false;
        Tensor<R> a_q, b_q, a_v, b_v;
    };

    AdaptationEngine() = default;

    const AdaptationConfig& config() const { return cfg_; }

    // LoRA attaches to the self-attention Q and V projections of the three
    // encoders; key/output projections and the decoder stay frozen verbatim.
    Tensor<R> project(EncoderKind enc, std::size_t layer, AttnKind attn, ProjKind which, const Tensor<R>& x,
                      const Tensor<R>& w) const override {
        if (cfg_.variant == Variant::Lora && enc != EncoderKind::Decoder && attn == AttnKind::SelfAttn) {
            const LoraSite& site = lora_site(enc, layer);
            if (site.active) {
                if (which == ProjKind::Query) return lora_linear(x, w, site.a_q, site.b_q, static_cast<R>(cfg_.lora_alpha));
                if (which == ProjKind::Value) return lora_linear(x, w, site.a_v, site.b_v, static_cast<R>(cfg_.lora_alpha));
            }
        }
        return matmul(x, w);
    }

    Tensor<R> unimodal_carrier(EncoderKind enc, std::size_t layer, const Tensor<R>& h) const override {
        const UniSite* site = uni_site(enc, layer);
        if (!site || !site->active) return h;
        const R s = static_cast<R>(cfg_.scale);
        if (cfg_.variant == Variant::ParallelAdapter) return add(h, adapter_delta(h, site->down, site->up, s, cfg_.activation));
        return bottleneck_forward(h, site->down, site->up, s, cfg_.activation);
    }

    Tensor<R> crossmodal_carrier(EncoderKind enc, std::size_t layer, const Tensor<R>& q,
                                 const Tensor<R>& h) const override {
        const CrossSite* site = cross_site(enc, layer);
        if (!site || !site->active) return h;
        const R s = static_cast<R>(cfg_.scale);

        Tensor<R> carrier;
        if (site->two_branch) {
            carrier = uniadapter_crossmodal(h, site->down, site->up_text, site->up_cross, s, cfg_.activation);
        } else if (cfg_.variant == Variant::ParallelAdapter) {
            carrier = add(h, adapter_delta(h, site->down, site->up_cross, s, cfg_.activation));
        } else {
            carrier = bottleneck_forward(h, site->down, site->up_cross, s, cfg_.activation);
        }
        if (site->query_residual) {
            if (cfg_.query_residual_form == QueryResidualForm::Verbatim) {
                carrier = add(carrier, bottleneck_forward(q, site->q_down, site->q_up, s, cfg_.activation));
            } else {
                carrier = add(carrier, adapter_delta(q, site->q_down, site->q_up, s, cfg_.activation));
            }
        }
        return carrier;
    }

    // Plan construction; prefer the build_parameter_plan free functions.
    static AdaptationEngine build(const BackboneConfig& bcfg, const AdaptationConfig& cfg,
                                  ParameterStore<R>& store, Rng& rng) {
        cfg.validate(bcfg);
        AdaptationEngine engine;
        engine.cfg_ = cfg;

        // Freeze policy first: adaptation trains only what it registers.
        switch (cfg.variant) {
            case Variant::FullFinetune:
                store.set_all_trainable(true);
                return engine;
            case Variant::LinearProbe:
                store.set_all_trainable(false);
                store.set_trainable_by_prefix("head.", true);
                return engine;
            case Variant::None:
                store.set_all_trainable(false);
                return engine;
            default:
                store.set_all_trainable(false);
                break;
        }

        auto layers_of = [](const std::vector<std::size_t>& chosen, std::size_t depth) {
            std::set<std::size_t> out;
            if (chosen.empty())
                for (std::size_t i = 0; i < depth; ++i) out.insert(i);
            else
                out.insert(chosen.begin(), chosen.end());
            return out;
        };
        const std::set<std::size_t> vis_layers =
            cfg.modality_visual ? layers_of(cfg.insert_visual, bcfg.depth_visual) : std::set<std::size_t>{};
        const std::set<std::size_t> txt_layers =
            cfg.modality_text ? layers_of(cfg.insert_text, bcfg.depth_text) : std::set<std::size_t>{};
        const std::set<std::size_t> fus_layers =
            cfg.modality_cross ? layers_of(cfg.insert_fusion, bcfg.depth_fusion) : std::set<std::size_t>{};

        if (cfg.variant == Variant::Lora) {
            engine.build_lora(store, rng, bcfg, vis_layers, txt_layers, fus_layers);
            return engine;
        }

        engine.build_adapters(store, rng, bcfg, vis_layers, txt_layers, fus_layers);
        return engine;
    }

    const UniSite* uni_site(EncoderKind enc, std::size_t layer) const {
        const std::vector<UniSite>* sites = nullptr;
        if (enc == EncoderKind::Visual) sites = &visual_;
        if (enc == EncoderKind::Text) sites = &text_;
        if (!sites || layer >= sites->size()) return nullptr;
        return &(*sites)[layer];
    }

    const CrossSite* cross_site(EncoderKind enc, std::size_t layer) const {
        const std::vector<CrossSite>* sites = nullptr;
        if (enc == EncoderKind::Fusion) sites = &fusion_;
        if (enc == EncoderKind::Decoder) sites = &decoder_;
        if (!sites || layer >= sites->size()) return nullptr;
        return &(*sites)[layer];
    }

private:
    const LoraSite& lora_site(EncoderKind enc, std::size_t layer) const {
        static const LoraSite none;
        const std::vector<LoraSite>* sites = nullptr;
        if (enc == EncoderKind::Visual) sites = &lora_visual_;
        if (enc == EncoderKind::Text) sites = &lora_text_;
        if (enc == EncoderKind::Fusion) sites = &lora_fusion_;
        if (!sites || layer >= sites->size()) return none;
        return (*sites)[layer];
    }

    void build_adapters(ParameterStore<R>& store, Rng& rng, const BackboneConfig& bcfg,
                        const std::set<std::size_t>& vis_layers, const std::set<std::size_t>& txt_layers,
                        const std::set<std::size_t>& fus_layers) {
        const std::size_t d = bcfg.hidden, r = cfg_.bottleneck;
        const bool uni = cfg_.variant == Variant::UniAdapter;
        const bool share_down = uni && (cfg_.sharing == Sharing::ShareDown || cfg_.sharing == Sharing::ShareBoth);
        const bool share_up = uni && (cfg_.sharing == Sharing::ShareUp || cfg_.sharing == Sharing::ShareBoth);

        visual_.assign(bcfg.depth_visual, UniSite{});
        text_.assign(bcfg.depth_text, UniSite{});
        fusion_.assign(bcfg.depth_fusion, CrossSite{});
        decoder_.assign(bcfg.depth_decoder, CrossSite{});

        auto in_set = [](const std::set<std::size_t>& s, std::size_t i) { return s.count(i) != 0; };
        auto member = [&](const std::string& modality, std::size_t layer, const char* kind) {
            return "adapter." + modality + ".L" + std::to_string(layer) + "." + kind;
        };

        // One pass per layer index; the canonical owner's tensors are created
        // the first time any enabled modality needs that layer.
        const std::size_t max_depth = std::max({bcfg.depth_visual, bcfg.depth_text, bcfg.depth_fusion});
        for (std::size_t layer = 0; layer < max_depth; ++layer) {
            struct Want {
                std::string modality;
                bool wanted;
            };
            const std::vector<Want> wants = {{"text", in_set(txt_layers, layer)},
                                             {"visual", in_set(vis_layers, layer)},
                                             {"cross", in_set(fus_layers, layer)}};
            // Canonical owner of shared tensors: the textual name when text
            // participates at this layer, else the first modality that does.
            // Fixing the owner fixes serialization order.
            std::string layer_owner;
            for (const auto& w : wants)
                if (w.wanted && layer_owner.empty()) layer_owner = w.modality;
            if (layer_owner.empty()) continue;

            auto ensure = [&](const char* kind, const std::string& modality, bool shared) -> Tensor<R> {
                const std::string name = member(modality, layer, kind);
                if (store.contains(name)) return store.get(name);
                if (shared) {
                    const std::string canon = member(layer_owner, layer, kind);
                    if (!store.contains(canon)) {
                        Tensor<R> t = std::strcmp(kind, "down") == 0
                                          ? Tensor<R>::kaiming_normal(d, r, rng)
                                          : Tensor<R>::zeros({r, d});
                        store.add(canon, std::move(t), true);
                    }
                    if (name != canon) store.alias(name, canon);
                    return store.get(name);
                }
                Tensor<R> t = std::strcmp(kind, "down") == 0 ? Tensor<R>::kaiming_normal(d, r, rng)
                                                             : Tensor<R>::zeros({r, d});
                return store.add(name, std::move(t), true);
            };

            for (const auto& w : wants) {
                if (!w.wanted) continue;
                Tensor<R> down = ensure("down", w.modality, share_down);
                Tensor<R> up = ensure("up", w.modality, share_up);
                if (w.modality == "visual") {
                    visual_[layer] = UniSite{true, down, up};
                } else if (w.modality == "text") {
                    text_[layer] = UniSite{true, down, up};
                } else {
                    CrossSite site;
                    site.active = true;
                    site.down = down;
                    site.up_cross = up;
                    // The two-branch cross-modal form reuses the textual up;
                    // with T disabled it degrades to a plain adapter.
                    if (uni && cfg_.modality_text) {
                        if (!store.contains(member("text", layer, "up")))
                            throw ConfigError("cross-modal uniadapter at layer " + std::to_string(layer) +
                                              " reuses the textual up-projection, but the text encoder has no "
                                              "adapter at that layer");
                        site.two_branch = true;
                        site.up_text = store.get(member("text", layer, "up"));
                    }
                    if (cfg_.query_residual) {
                        if (!store.contains(member("text", layer, "down")))
                            throw ConfigError("query-residual adaptation at layer " + std::to_string(layer) +
                                              " is weight-shared with the textual adapter, but the text encoder "
                                              "has no adapter at that layer");
                        site.query_residual = true;
                        site.q_down = store.get(member("text", layer, "down"));
                        site.q_up = store.get(member("text", layer, "up"));
                    }
                    fusion_[layer] = site;
                }
            }
        }

        // Decoder blocks reuse the fusion-encoder adapters wholesale.
        if (cfg_.share_encoder_decoder) {
            for (std::size_t layer = 0; layer < bcfg.depth_decoder; ++layer) {
                if (layer >= fusion_.size() || !fusion_[layer].active) continue;
                for (const char* kind : {"down", "up"}) {
                    const std::string src = member("cross", layer, kind);
                    if (store.contains(src)) store.alias(member("decoder", layer, kind), store.canonical_of(src));
                }
                decoder_[layer] = fusion_[layer];
            }
        }
    }

    void build_lora(ParameterStore<R>& store, Rng& rng, const BackboneConfig& bcfg,
                    const std::set<std::size_t>& vis_layers, const std::set<std::size_t>& txt_layers,
                    const std::set<std::size_t>& fus_layers) {
        const std::size_t d = bcfg.hidden, rank = cfg_.lora_rank;
        lora_visual_.assign(bcfg.depth_visual, LoraSite{});
        lora_text_.assign(bcfg.depth_text, LoraSite{});
        lora_fusion_.assign(bcfg.depth_fusion, LoraSite{});

        auto build = [&](const char* enc, std::vector<LoraSite>& sites, const std::set<std::size_t>& layers) {
            for (std::size_t layer : layers) {
                LoraSite site;
                site.active = true;
                const std::string prefix = "lora." + std::string(enc) + ".L" + std::to_string(layer);
                site.a_q = store.add(prefix + ".q.a", Tensor<R>::kaiming_normal(d, rank, rng), true);
                site.b_q = store.add(prefix + ".q.b", Tensor<R>::zeros({rank, d}), true);
                site.a_v = store.add(prefix + ".v.a", Tensor<R>::kaiming_normal(d, rank, rng), true);
                site.b_v = store.add(prefix + ".v.b", Tensor<R>::zeros({rank, d}), true);
                sites[layer] = site;
            }
        };
        build("visual", lora_visual_, vis_layers);
        build("text", lora_text_, txt_layers);
        build("fusion", lora_fusion_, fus_layers);
    }

    AdaptationConfig cfg_;
    std::vector<UniSite> visual_, text_;
    std::vector<CrossSite> fusion_, decoder_;
    std::vector<LoraSite> lora_visual_, lora_text_, lora_fusion_;
};

// Instantiates adapter units per enabled modality and insertion layer,
// applies the aliasing required by the sharing strategy and marks the
// trainable set per variant. The returned engine plugs into the backbone's
// adaptation hooks.
template <typename R>
AdaptationEngine<R> build_parameter_plan(const Backbone<R>& backbone, const AdaptationConfig& cfg,
                                         ParameterStore<R>& store, Rng& rng) {
    return AdaptationEngine<R>::build(backbone.config(), cfg, store, rng);
}

// Config-only overload: registers and counts adapter parameters without a
// materialized backbone. count_tunable on the resulting store then reflects
// adapter tensors alone, which is exactly what the published tables report.
template <typename R>
AdaptationEngine<R> build_parameter_plan(const BackboneConfig& backbone, const AdaptationConfig& cfg,
                                         ParameterStore<R>& store, Rng& rng) {
    return AdaptationEngine<R>::build(backbone, cfg, store, rng);
}

// ---------------------------------------------------------------------------
// Parameter accounting

// Published tables report counts at 0.1M precision with inconsistent
// rounding (identical exact counts map to differently rounded figures), so
// the exact integer is the contract here and the display uses plain half-up
// rounding to 0.1M.
inline std::string format_millions(std::uint64_t n) {
    const double m = static_cast<double>(n) / 1e6;
    const double rounded = std::floor(m * 10.0 + 0.5) / 10.0;
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(1);
    os << rounded << "M";
    return os.str();
}

// Checks an exact count against a table figure given at 0.1M precision,
// allowing the figure's observed rounding slack.
inline bool matches_published_figure(std::uint64_t n, double figure_millions, double slack = 0.13) {
    return std::abs(static_cast<double>(n) / 1e6 - figure_millions) <= slack;
}

struct TunableCount {
    std::uint64_t exact = 0;
    std::map<std::string, std::uint64_t> by_group;

    std::string report() const {
        std::ostringstream os;
        os << exact << " (" << format_millions(exact) << ")\n";
        for (const auto& [group, count] : by_group)
            os << "  " << group << " " << count << " (" << format_millions(count) << ")\n";
        return os.str();
    }
};

template <typename R>
TunableCount count_tunable(const ParameterStore<R>& store) {
    TunableCount out;
    out.exact = store.count_trainable();
    out.by_group = store.count_trainable_by_group(2);
    return out;
}

}  // namespace uniadapter
