#pragma once

// Run configuration: a sectioned key-value text format. Grammar:
//   - '#' starts a comment (full line or trailing)
//   - '[section]' opens a section; 'key = value' lines belong to it
//   - recognized sections: [backbone] [adaptation] [optimizer] [task]
//     [paths] for run configs, [world] for dataset specs
// Unknown sections and unknown keys are errors, not warnings: a silent typo
// in a sharing flag would invalidate every parameter-count audit downstream.

#include <map>

#include "uniadapter/adaptation.hpp"
#include "uniadapter/data_synth.hpp"
#include "uniadapter/optim.hpp"

namespace uniadapter {

enum class TaskKind { RetrievalImage, RetrievalVideo, Vqa };

inline const char* task_name(TaskKind t) {
    switch (t) {
        case TaskKind::RetrievalImage: return "retrieval-image";
        case TaskKind::RetrievalVideo: return "retrieval-video";
        case TaskKind::Vqa: return "vqa";
    }
    return "?";
}

struct RunConfig {
    BackboneConfig backbone;
    AdaptationConfig adaptation;
    OptimizerConfig optimizer;
    TaskKind task = TaskKind::RetrievalImage;
    double warmup_fraction = 0.05;
    std::size_t batch = 32;
    std::size_t epochs = 2;
    std::size_t train_frames = 8;
    std::size_t infer_frames = 16;
    std::uint64_t seed = 42;
    std::string data_dir, out_dir, metrics_path;

    void validate() const {
        backbone.validate();
        adaptation.validate(backbone);
        optimizer.validate();
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch < 2) throw ConfigError("batch size must be >= 2 (in-batch negatives)");
        if (train_frames < 1 || infer_frames < 1) throw ConfigError("frame counts must be >= 1");
    }

    // Canonical dump; its hash ties checkpoints to the configuration that
    // produced them.
    std::string dump() const;
    std::uint64_t hash() const { return fnv1a(dump()); }
};

namespace cfgdetail {

struct Section {
    std::string name;
    std::vector<std::pair<std::string, std::string>> entries;
};

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

inline std::vector<Section> parse_sections(const std::string& text) {
    std::vector<Section> sections;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("line " + std::to_string(lineno) + ": malformed section header '" + line + "'");
            sections.push_back(Section{trim(line.substr(1, line.size() - 2)), {}});
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
        if (sections.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": key outside any [section]");
        sections.back().entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return sections;
}

// Typed accessor over one section that tracks which keys were consumed and
// rejects the rest.
class Fields {
public:
    explicit Fields(const Section& s) : section_(s) {
        for (const auto& [k, v] : s.entries) {
            if (!values_.emplace(k, v).second)
                throw ConfigError("[" + s.name + "] repeats key '" + k + "'");
        }
    }

    template <typename Fn>
    void take(const std::string& key, Fn&& fn) {
        auto it = values_.find(key);
        if (it == values_.end()) return;
        try {
            fn(it->second);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError("[" + section_.name + "] " + key + ": " + e.what());
        }
        values_.erase(it);
    }

    void finish() const {
        if (!values_.empty())
            throw ConfigError("[" + section_.name + "] unknown key '" + values_.begin()->first + "'");
    }

private:
    const Section& section_;
    std::map<std::string, std::string> values_;
};

inline std::size_t to_size(const std::string& v) {
    std::size_t pos = 0;
    unsigned long long out = std::stoull(v, &pos);
    if (pos != v.size()) throw ConfigError("not an integer: '" + v + "'");
    return static_cast<std::size_t>(out);
}

inline double to_real(const std::string& v) {
    std::size_t pos = 0;
    double out = std::stod(v, &pos);
    if (pos != v.size()) throw ConfigError("not a number: '" + v + "'");
    return out;
}

inline bool to_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("not a boolean: '" + v + "'");
}

inline std::vector<std::size_t> to_layer_list(const std::string& v) {
    if (v == "all") return {};
    std::vector<std::size_t> out;
    std::istringstream in(v);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        if (auto dash = item.find('-'); dash != std::string::npos) {
            std::size_t lo = to_size(trim(item.substr(0, dash)));
            std::size_t hi = to_size(trim(item.substr(dash + 1)));
            if (hi < lo) throw ConfigError("bad layer range '" + item + "'");
            for (std::size_t i = lo; i <= hi; ++i) out.push_back(i);
        } else {
            out.push_back(to_size(item));
        }
    }
    return out;
}

inline Variant to_variant(const std::string& v) {
    static const std::map<std::string, Variant> names = {
        {"none", Variant::None},
        {"linear_probe", Variant::LinearProbe},
        {"full_finetune", Variant::FullFinetune},
        {"sequential_adapter", Variant::SequentialAdapter},
        {"parallel_adapter", Variant::ParallelAdapter},
        {"lora", Variant::Lora},
        {"uniadapter", Variant::UniAdapter},
    };
    auto it = names.find(v);
    if (it == names.end()) throw ConfigError("unknown variant '" + v + "'");
    return it->second;
}

inline Sharing to_sharing(const std::string& v) {
    static const std::map<std::string, Sharing> names = {
        {"no_share", Sharing::NoShare},
        {"share_down", Sharing::ShareDown},
        {"share_up", Sharing::ShareUp},
        {"share_both", Sharing::ShareBoth},
    };
    auto it = names.find(v);
    if (it == names.end()) throw ConfigError("unknown sharing strategy '" + v + "'");
    return it->second;
}

inline TaskKind to_task(const std::string& v) {
    if (v == "retrieval-image") return TaskKind::RetrievalImage;
    if (v == "retrieval-video") return TaskKind::RetrievalVideo;
    if (v == "vqa") return TaskKind::Vqa;
    throw ConfigError("unknown task '" + v + "'");
}

}  // namespace cfgdetail

inline RunConfig parse_run_config(const std::string& text) {
    using namespace cfgdetail;
    RunConfig cfg;
    bool saw_variant = false;
    bool saw_query_residual = false;
    for (const Section& section : parse_sections(text)) {
        Fields f(section);
        if (section.name == "backbone") {
            f.take("hidden", [&](const std::string& v) { cfg.backbone.hidden = to_size(v); });
            f.take("heads", [&](const std::string& v) { cfg.backbone.heads = to_size(v); });
            f.take("depth_visual", [&](const std::string& v) { cfg.backbone.depth_visual = to_size(v); });
            f.take("depth_text", [&](const std::string& v) { cfg.backbone.depth_text = to_size(v); });
            f.take("depth_fusion", [&](const std::string& v) { cfg.backbone.depth_fusion = to_size(v); });
            f.take("depth_decoder", [&](const std::string& v) { cfg.backbone.depth_decoder = to_size(v); });
            f.take("patches", [&](const std::string& v) { cfg.backbone.patches = to_size(v); });
            f.take("patch_dim", [&](const std::string& v) { cfg.backbone.patch_dim = to_size(v); });
            f.take("vocab", [&](const std::string& v) { cfg.backbone.vocab = to_size(v); });
            f.take("max_seq", [&](const std::string& v) { cfg.backbone.max_seq = to_size(v); });
            f.take("ffn_mult", [&](const std::string& v) { cfg.backbone.ffn_mult = to_size(v); });
            f.take("proj_dim", [&](const std::string& v) { cfg.backbone.proj_dim = to_size(v); });
        } else if (section.name == "adaptation") {
            f.take("variant", [&](const std::string& v) {
                cfg.adaptation.variant = to_variant(v);
                saw_variant = true;
            });
            f.take("bottleneck", [&](const std::string& v) { cfg.adaptation.bottleneck = to_size(v); });
            f.take("scale", [&](const std::string& v) { cfg.adaptation.scale = to_real(v); });
            f.take("sharing", [&](const std::string& v) { cfg.adaptation.sharing = to_sharing(v); });
            f.take("modalities", [&](const std::string& v) {
                cfg.adaptation.modality_visual = v.find('V') != std::string::npos;
                cfg.adaptation.modality_text = v.find('T') != std::string::npos;
                cfg.adaptation.modality_cross = v.find('C') != std::string::npos;
            });
            f.take("insert_visual", [&](const std::string& v) { cfg.adaptation.insert_visual = to_layer_list(v); });
            f.take("insert_text", [&](const std::string& v) { cfg.adaptation.insert_text = to_layer_list(v); });
            f.take("insert_fusion", [&](const std::string& v) { cfg.adaptation.insert_fusion = to_layer_list(v); });
            f.take("query_residual", [&](const std::string& v) {
                cfg.adaptation.query_residual = to_bool(v);
                saw_query_residual = true;
            });
            f.take("query_residual_form", [&](const std::string& v) {
                if (v == "verbatim")
                    cfg.adaptation.query_residual_form = QueryResidualForm::Verbatim;
                else if (v == "delta")
                    cfg.adaptation.query_residual_form = QueryResidualForm::DeltaOnly;
                else
                    throw ConfigError("unknown query_residual_form '" + v + "'");
            });
            f.take("pfa", [&](const std::string& v) { cfg.adaptation.pfa = to_bool(v); });
            f.take("pfa_stop_gradient",
                   [&](const std::string& v) { cfg.adaptation.pfa_stop_gradient = to_bool(v); });
            f.take("pfa_normalize", [&](const std::string& v) { cfg.adaptation.pfa_normalize = to_bool(v); });
            f.take("share_encoder_decoder",
                   [&](const std::string& v) { cfg.adaptation.share_encoder_decoder = to_bool(v); });
            f.take("lora_rank", [&](const std::string& v) { cfg.adaptation.lora_rank = to_size(v); });
            f.take("lora_alpha", [&](const std::string& v) { cfg.adaptation.lora_alpha = to_real(v); });
            f.take("activation", [&](const std::string& v) {
                if (v == "relu")
                    cfg.adaptation.activation = AdapterActivation::Relu;
                else if (v == "gelu")
                    cfg.adaptation.activation = AdapterActivation::Gelu;
                else
                    throw ConfigError("unknown activation '" + v + "'");
            });
        } else if (section.name == "optimizer") {
            f.take("lr", [&](const std::string& v) { cfg.optimizer.lr = to_real(v); });
            f.take("beta1", [&](const std::string& v) { cfg.optimizer.beta1 = to_real(v); });
            f.take("beta2", [&](const std::string& v) { cfg.optimizer.beta2 = to_real(v); });
            f.take("eps", [&](const std::string& v) { cfg.optimizer.eps = to_real(v); });
            f.take("weight_decay", [&](const std::string& v) { cfg.optimizer.weight_decay = to_real(v); });
            f.take("warmup_fraction", [&](const std::string& v) { cfg.warmup_fraction = to_real(v); });
        } else if (section.name == "task") {
            f.take("task", [&](const std::string& v) { cfg.task = to_task(v); });
            f.take("batch", [&](const std::string& v) { cfg.batch = to_size(v); });
            f.take("epochs", [&](const std::string& v) { cfg.epochs = to_size(v); });
            f.take("train_frames", [&](const std::string& v) { cfg.train_frames = to_size(v); });
            f.take("infer_frames", [&](const std::string& v) { cfg.infer_frames = to_size(v); });
            f.take("seed", [&](const std::string& v) { cfg.seed = to_size(v); });
        } else if (section.name == "paths") {
            f.take("data", [&](const std::string& v) { cfg.data_dir = v; });
            f.take("out", [&](const std::string& v) { cfg.out_dir = v; });
            f.take("metrics", [&](const std::string& v) { cfg.metrics_path = v; });
        } else {
            throw ConfigError("unknown section [" + section.name + "]");
        }
        f.finish();
    }
    // Query residual is part of the full uniadapter recipe; plain baselines
    // leave it off unless asked for explicitly.
    if (saw_variant && !saw_query_residual)
        cfg.adaptation.query_residual = cfg.adaptation.variant == Variant::UniAdapter;
    cfg.validate();
    return cfg;
}

inline WorldSpec parse_world_spec(const std::string& text) {
    using namespace cfgdetail;
    WorldSpec spec;
    for (const Section& section : parse_sections(text)) {
        if (section.name != "world") throw ConfigError("dataset specs use a single [world] section");
        Fields f(section);
        f.take("grid", [&](const std::string& v) { spec.grid = to_size(v); });
        f.take("shapes", [&](const std::string& v) { spec.shapes = to_size(v); });
        f.take("colors", [&](const std::string& v) { spec.colors = to_size(v); });
        f.take("positions", [&](const std::string& v) { spec.positions = to_size(v); });
        f.take("noise_amplitude", [&](const std::string& v) { spec.noise_amplitude = to_real(v); });
        f.take("noise_frame_prob", [&](const std::string& v) { spec.noise_frame_prob = to_real(v); });
        f.take("shift", [&](const std::string& v) { spec.shift = to_real(v); });
        f.take("video", [&](const std::string& v) { spec.video = to_bool(v); });
        f.take("frames", [&](const std::string& v) { spec.frames = to_size(v); });
        f.take("with_qa", [&](const std::string& v) { spec.with_qa = to_bool(v); });
        f.take("count_pretrain", [&](const std::string& v) { spec.count_pretrain = to_size(v); });
        f.take("count_downstream", [&](const std::string& v) { spec.count_downstream = to_size(v); });
        f.take("count_test", [&](const std::string& v) { spec.count_test = to_size(v); });
        f.take("seed", [&](const std::string& v) { spec.seed = to_size(v); });
        f.finish();
    }
    spec.validate();
    return spec;
}

inline std::string RunConfig::dump() const {
    std::ostringstream os;
    os << "[backbone]\n"
       << "hidden = " << backbone.hidden << "\nheads = " << backbone.heads
       << "\ndepth_visual = " << backbone.depth_visual << "\ndepth_text = " << backbone.depth_text
       << "\ndepth_fusion = " << backbone.depth_fusion << "\ndepth_decoder = " << backbone.depth_decoder
       << "\npatches = " << backbone.patches << "\npatch_dim = " << backbone.patch_dim
       << "\nvocab = " << backbone.vocab << "\nmax_seq = " << backbone.max_seq
       << "\nffn_mult = " << backbone.ffn_mult << "\nproj_dim = " << backbone.proj_dim << "\n";
    os << "[adaptation]\n"
       << "variant = " << variant_name(adaptation.variant) << "\nbottleneck = " << adaptation.bottleneck
       << "\nscale = " << adaptation.scale << "\nsharing = ";
    switch (adaptation.sharing) {
        case Sharing::NoShare: os << "no_share"; break;
        case Sharing::ShareDown: os << "share_down"; break;
        case Sharing::ShareUp: os << "share_up"; break;
        case Sharing::ShareBoth: os << "share_both"; break;
    }
    os << "\nmodalities = " << (adaptation.modality_visual ? "V" : "") << (adaptation.modality_text ? "T" : "")
       << (adaptation.modality_cross ? "C" : "");
    auto layers = [&](const char* key, const std::vector<std::size_t>& v) {
        os << "\n" << key << " = ";
        if (v.empty()) {
            os << "all";
        } else {
            for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
        }
    };
    layers("insert_visual", adaptation.insert_visual);
    layers("insert_text", adaptation.insert_text);
    layers("insert_fusion", adaptation.insert_fusion);
    os << "\nquery_residual = " << (adaptation.query_residual ? "true" : "false") << "\nquery_residual_form = "
       << (adaptation.query_residual_form == QueryResidualForm::Verbatim ? "verbatim" : "delta")
       << "\npfa = " << (adaptation.pfa ? "true" : "false")
       << "\npfa_stop_gradient = " << (adaptation.pfa_stop_gradient ? "true" : "false")
       << "\npfa_normalize = " << (adaptation.pfa_normalize ? "true" : "false")
       << "\nshare_encoder_decoder = " << (adaptation.share_encoder_decoder ? "true" : "false")
       << "\nlora_rank = " << adaptation.lora_rank << "\nlora_alpha = " << adaptation.lora_alpha
       << "\nactivation = " << (adaptation.activation == AdapterActivation::Relu ? "relu" : "gelu") << "\n";
    os << "[optimizer]\n"
       << "lr = " << optimizer.lr << "\nbeta1 = " << optimizer.beta1 << "\nbeta2 = " << optimizer.beta2
       << "\neps = " << optimizer.eps << "\nweight_decay = " << optimizer.weight_decay
       << "\nwarmup_fraction = " << warmup_fraction << "\n";
    os << "[task]\n"
       << "task = " << task_name(task) << "\nbatch = " << batch << "\nepochs = " << epochs
       << "\ntrain_frames = " << train_frames << "\ninfer_frames = " << infer_frames << "\nseed = " << seed
       << "\n";
    return os.str();
}

}  // namespace uniadapter
