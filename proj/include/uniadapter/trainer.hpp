#pragma once

// End-to-end workflows: assemble a model from a run configuration, pretrain
// the backbone, attach an adaptation plan, train the trainable set, and
// evaluate retrieval/QA metrics. One model instance is single-threaded.

#include "uniadapter/checkpoint.hpp"
#include "uniadapter/config.hpp"
#include "uniadapter/data_synth.hpp"
#include "uniadapter/frame_attention.hpp"
#include "uniadapter/objectives.hpp"
#include "uniadapter/optim.hpp"

namespace uniadapter {

// Begin/end marker token ids are fixed by the dataset format.
constexpr std::size_t kBosToken = WorldSpec::kBos;
constexpr std::size_t kEosToken = WorldSpec::kEos;

// Fingerprint of everything the adaptation contract freezes.
template <typename R>
std::uint64_t backbone_fingerprint(const ParameterStore<R>& store) {
    return fnv1a("bb", 2, store.checksum("backbone.")) ^ (store.checksum("head.") * 0x9e3779b97f4a7c15ull);
}

template <typename R>
class Model {
public:
    explicit Model(const RunConfig& cfg, ParamInit init = ParamInit::Random) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(cfg_.seed);
        net_ = std::make_unique<Backbone<R>>(cfg_.backbone, store_, rng, init);
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const RunConfig& config() const { return cfg_; }
    ParameterStore<R>& store() { return store_; }
    const ParameterStore<R>& store() const { return store_; }
    Backbone<R>& net() { return *net_; }
    const Backbone<R>& net() const { return *net_; }

    // Builds the adaptation plan and freezes per the variant. Rng continues
    // from a seed stream independent of backbone init.
    void attach_adaptation() {
        Rng rng(cfg_.seed ^ 0xada9ull);
        engine_ = build_parameter_plan(*net_, cfg_.adaptation, store_, rng);
        adapted_ = true;
    }

    bool adapted() const { return adapted_; }
    const AdaptationEngine<R>& engine() const { return engine_; }
    const AdaptationHooks<R>* hooks() const { return adapted_ ? &engine_ : nullptr; }

private:
    RunConfig cfg_;
    ParameterStore<R> store_;
    std::unique_ptr<Backbone<R>> net_;
    AdaptationEngine<R> engine_;
    bool adapted_ = false;
};

// ---------------------------------------------------------------------------
// Sample forwards

// Uniformly strided frame selection (train and inference frame counts may
// differ from what the dataset stores).
inline std::vector<std::size_t> pick_frames(std::size_t available, std::size_t wanted) {
    std::vector<std::size_t> out;
    if (available == 0) return out;
    if (wanted >= available) {
        for (std::size_t i = 0; i < available; ++i) out.push_back(i);
        return out;
    }
    for (std::size_t i = 0; i < wanted; ++i)
        out.push_back(wanted == 1 ? 0 : i * (available - 1) / (wanted - 1));
    return out;
}

template <typename R>
Tensor<R> sample_frame_tensor(const Sample& s, std::size_t frame) {
    const std::size_t stride = static_cast<std::size_t>(s.patches) * s.feat_dim;
    std::vector<R> data;
    data.reserve(stride);
    for (std::size_t i = 0; i < stride; ++i)
        data.push_back(static_cast<R>(s.payload[frame * stride + i]));
    return Tensor<R>({s.patches, s.feat_dim}, std::move(data));
}

template <typename R>
std::vector<std::size_t> to_tokens(const std::vector<std::uint32_t>& v) {
    return std::vector<std::size_t>(v.begin(), v.end());
}

template <typename R>
struct EncodedPair {
    VideoFeatures<R> visual;
    FeatureSet<R> text;
    Tensor<R> visual_cls;  // [1 x d]: image CLS, or the mean of frame CLS rows
};

template <typename R>
EncodedPair<R> encode_pair(Model<R>& model, const Sample& s, std::size_t frame_budget) {
    EncodedPair<R> out;
    const auto frames = pick_frames(s.frames, s.video ? frame_budget : 1);
    for (std::size_t f : frames)
        out.visual.frames.push_back(model.net().encode_visual(sample_frame_tensor<R>(s, f), model.hooks()));
    out.text = model.net().encode_text(to_tokens<R>(s.caption), model.hooks());
    if (out.visual.frames.size() == 1) {
        out.visual_cls = out.visual.frames[0].cls();
    } else {
        std::vector<Tensor<R>> cls_rows;
        for (const auto& f : out.visual.frames) cls_rows.push_back(f.cls());
        out.visual_cls = mean_rows(concat_rows(cls_rows));
    }
    return out;
}

// Visual tokens feeding the fusion encoder for a (visual, text) pair. PFA is
// a retrieval-path mechanism; QA always concatenates plainly.
template <typename R>
Tensor<R> fusion_visual_tokens(Model<R>& model, const EncodedPair<R>& pair, const FeatureSet<R>& text) {
    const auto& a = model.config().adaptation;
    const bool use_pfa = a.pfa && pair.visual.frames.size() > 1 && model.config().task != TaskKind::Vqa;
    if (!use_pfa) return frame_concat(pair.visual);
    PfaOptions opts;
    opts.normalize = a.pfa_normalize;
    opts.stop_gradient = a.pfa_stop_gradient;
    return pfa_visual_tokens(pair.visual, text.cls(), opts);
}

// ---------------------------------------------------------------------------
// Batch losses

template <typename R>
struct BatchLoss {
    Tensor<R> total;
    double itc = 0, itm = 0, lm = 0;
};

template <typename R>
BatchLoss<R> retrieval_batch_loss(Model<R>& model, const std::vector<const Sample*>& batch,
                                  std::size_t frame_budget) {
    if (batch.size() < 2) throw ContractError("retrieval batches need at least 2 pairs");
    std::vector<EncodedPair<R>> pairs;
    pairs.reserve(batch.size());
    std::vector<Tensor<R>> v_embeds, t_embeds;
    for (const Sample* s : batch) {
        pairs.push_back(encode_pair(model, *s, frame_budget));
        v_embeds.push_back(matmul(pairs.back().visual_cls, model.store().get("head.itc.visual_proj")));
        t_embeds.push_back(matmul(pairs.back().text.cls(), model.store().get("head.itc.text_proj")));
    }
    auto v = l2_normalize_rows(concat_rows(v_embeds));
    auto t = l2_normalize_rows(concat_rows(t_embeds));
    auto itc = contrastive_loss(v, t, model.net().temperature());

    // Matching head on fused positives plus in-batch hardest negatives.
    auto sim = similarity_matrix(v.detach(), t.detach());
    auto negatives = hardest_negatives(sim);
    std::vector<Tensor<R>> itm_rows;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto fused = model.net().fuse(pairs[i].text, fusion_visual_tokens(model, pairs[i], pairs[i].text),
                                      model.hooks());
        itm_rows.push_back(model.net().itm_logits(fused));
        labels.push_back(1);
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const std::size_t j = negatives[i];  // text i against visual j
        auto fused = model.net().fuse(pairs[i].text, fusion_visual_tokens(model, pairs[j], pairs[i].text),
                                      model.hooks());
        itm_rows.push_back(model.net().itm_logits(fused));
        labels.push_back(0);
    }
    auto itm = itm_loss(concat_rows(itm_rows), labels);

    BatchLoss<R> out;
    out.total = add(itc, itm);
    out.itc = static_cast<double>(itc.item());
    out.itm = static_cast<double>(itm.item());
    return out;
}

template <typename R>
BatchLoss<R> vqa_batch_loss(Model<R>& model, const std::vector<const Sample*>& batch, std::size_t frame_budget) {
    if (batch.empty()) throw ContractError("empty batch");
    Tensor<R> acc;
    bool first = true;
    for (const Sample* s : batch) {
        if (s->answer.empty()) throw ContractError("QA sample without an answer");
        auto pair = encode_pair(model, *s, frame_budget);
        auto question = model.net().encode_text(to_tokens<R>(s->question), model.hooks());
        auto fused = model.net().fuse(question, frame_concat(pair.visual), model.hooks());
        auto seq = lm_teacher_forcing(to_tokens<R>(s->answer), kBosToken, kEosToken);
        auto logits = model.net().decode_logits(fused, seq.prompt, model.hooks());
        auto loss = lm_loss(logits, seq.targets);
        acc = first ? loss : add(acc, loss);
        first = false;
    }
    BatchLoss<R> out;
    out.total = scale(acc, R(1) / static_cast<R>(batch.size()));
    out.lm = static_cast<double>(out.total.item());
    return out;
}

template <typename R>
BatchLoss<R> batch_loss(Model<R>& model, const std::vector<const Sample*>& batch, std::size_t frame_budget) {
    return model.config().task == TaskKind::Vqa ? vqa_batch_loss(model, batch, frame_budget)
                                                : retrieval_batch_loss(model, batch, frame_budget);
}

// ---------------------------------------------------------------------------
// Evaluation

template <typename R>
MetricsRecord evaluate(Model<R>& model, const std::vector<Sample>& samples, const std::string& split_label,
                       std::size_t step = 0) {
    if (samples.empty()) throw ContractError("evaluation on an empty split");
    MetricsRecord rec;
    rec.split = split_label;
    rec.step = step;
    const std::size_t frames = model.config().infer_frames;

    if (model.config().task == TaskKind::Vqa) {
        std::vector<std::string> predicted, gold;
        for (const Sample& s : samples) {
            auto pair = encode_pair(model, s, frames);
            auto question = model.net().encode_text(to_tokens<R>(s.question), model.hooks());
            auto fused = model.net().fuse(question, frame_concat(pair.visual), model.hooks());
            auto tokens = model.net().greedy_decode(fused, kBosToken, kEosToken, s.answer.size() + 2,
                                                    model.hooks());
            std::string p, g;
            for (std::size_t t : tokens) p += std::to_string(t) + " ";
            for (std::uint32_t t : s.answer) g += std::to_string(t) + " ";
            predicted.push_back(p);
            gold.push_back(g);
        }
        rec.accuracy = vqa_accuracy(predicted, gold);
        return rec;
    }

    std::vector<Tensor<R>> v_rows, t_rows;
    for (const Sample& s : samples) {
        auto pair = encode_pair(model, s, frames);
        v_rows.push_back(matmul(pair.visual_cls, model.store().get("head.itc.visual_proj")));
        t_rows.push_back(matmul(pair.text.cls(), model.store().get("head.itc.text_proj")));
    }
    auto v = l2_normalize_rows(concat_rows(v_rows));
    auto t = l2_normalize_rows(concat_rows(t_rows));
    auto scores = similarity_matrix(v, t);  // text queries x visual gallery
    std::vector<std::size_t> truth(samples.size());
    for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = i;
    auto metrics = retrieval_metrics(scores, truth);
    metrics.split = split_label;
    metrics.step = step;
    return metrics;
}

// Text-query x visual-gallery cosine scores, for metric cross-checks.
template <typename R>
Tensor<R> retrieval_scores(Model<R>& model, const std::vector<Sample>& samples) {
    std::vector<Tensor<R>> v_rows, t_rows;
    for (const Sample& s : samples) {
        auto pair = encode_pair(model, s, model.config().infer_frames);
        v_rows.push_back(matmul(pair.visual_cls, model.store().get("head.itc.visual_proj")));
        t_rows.push_back(matmul(pair.text.cls(), model.store().get("head.itc.text_proj")));
    }
    return similarity_matrix(l2_normalize_rows(concat_rows(v_rows)), l2_normalize_rows(concat_rows(t_rows)));
}

// ---------------------------------------------------------------------------
// Metrics CSV

class MetricsCsv {
public:
    static constexpr const char* kHeader = "step,split,task,loss,r1,r5,r10,mdr,rmean,acc";

    explicit MetricsCsv(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
        if (!out_) throw IOError("cannot write metrics to " + path.string());
        out_ << kHeader << "\n";
    }

    void append(const MetricsRecord& rec, TaskKind task) {
        auto field = [](const std::optional<double>& v) {
            if (!v) return std::string();
            std::ostringstream os;
            os << *v;
            return os.str();
        };
        out_ << rec.step << "," << rec.split << "," << task_name(task) << "," << field(rec.loss) << ","
             << field(rec.r1) << "," << field(rec.r5) << "," << field(rec.r10) << "," << field(rec.median_rank)
             << "," << field(rec.r_mean) << "," << field(rec.accuracy) << "\n";
        out_.flush();
    }

private:
    std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainSummary {
    double final_loss = 0;
    std::size_t steps = 0;
};

template <typename R>
TrainSummary train(Model<R>& model, const std::vector<Sample>& split, MetricsCsv* csv = nullptr,
                   const std::string& split_label = "train") {
    const RunConfig& cfg = model.config();
    if (split.size() < 2) throw ContractError("training split too small");

    AdamW<R> opt(model.store(), cfg.optimizer);
    const std::size_t per_epoch = split.size() / cfg.batch + (split.size() % cfg.batch >= 2 ? 1 : 0);
    const std::size_t total_steps = std::max<std::size_t>(1, per_epoch * cfg.epochs);

    TrainSummary summary;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(split.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng erng(fnv1a(&epoch, sizeof(epoch), cfg.seed));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[erng() % i]);

        for (std::size_t begin = 0; begin + 2 <= order.size(); begin += cfg.batch) {
            const std::size_t count = std::min(cfg.batch, order.size() - begin);
            if (count < 2) break;
            std::vector<const Sample*> batch;
            for (std::size_t k = 0; k < count; ++k) batch.push_back(&split[order[begin + k]]);

            Tape<R> tape;
            double loss_value;
            {
                AutogradScope<R> scope(tape);
                auto loss = batch_loss(model, batch, cfg.train_frames);
                loss_value = static_cast<double>(loss.total.item());
                if (!std::isfinite(loss_value))
                    throw NumericsError("training diverged at step " + std::to_string(step) +
                                        ": loss = " + std::to_string(loss_value));
                tape.backward(loss.total);
            }
            opt.step(cosine_warmup_lr(cfg.optimizer.lr, step, total_steps, cfg.warmup_fraction));
            summary.final_loss = loss_value;
            ++step;
            if (csv && (step % 10 == 0 || step == total_steps)) {
                MetricsRecord rec;
                rec.step = step;
                rec.split = split_label;
                rec.loss = loss_value;
                csv->append(rec, cfg.task);
            }
        }
    }
    summary.steps = step;
    return summary;
}

}  // namespace uniadapter
