#pragma once

// Deterministic synthetic cross-modal tasks: attribute worlds rendered as
// patch feature grids, captions from a small template grammar, videos with
// salient and distractor frames, and question/answer triples. A configurable
// prior reweighting plus template swap creates the pretrain -> downstream
// distribution shift.

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "uniadapter/common.hpp"

namespace uniadapter {

enum class Split { Pretrain, Downstream, Test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Pretrain: return "pretrain";
        case Split::Downstream: return "downstream";
        case Split::Test: return "test";
    }
    return "?";
}

inline Split split_from_name(const std::string& name) {
    if (name == "pretrain") return Split::Pretrain;
    if (name == "downstream") return Split::Downstream;
    if (name == "test") return Split::Test;
    throw ConfigError("unknown split: " + name);
}

struct WorldSpec {
    std::size_t grid = 9;       // patches per image (positions live on the grid)
    std::size_t shapes = 4;
    std::size_t colors = 4;
    std::size_t positions = 9;  // <= grid
    double noise_amplitude = 0.02;
    double noise_frame_prob = 0.5;  // distractor probability per video frame
    double shift = 0.6;             // downstream attribute-prior reweighting in [0,1]
    bool video = false;
    std::size_t frames = 4;  // frames per generated video
    bool with_qa = false;
    std::size_t count_pretrain = 512;
    std::size_t count_downstream = 256;
    std::size_t count_test = 64;
    std::uint64_t seed = 1;

    void validate() const {
        if (positions > grid) throw ConfigError("positions must fit on the grid");
        if (shapes < 2 || colors < 2 || positions < 2)
            throw ConfigError("attribute vocabularies need at least two values each");
        if (noise_frame_prob < 0.0 || noise_frame_prob > 1.0)
            throw ConfigError("noise_frame_prob must lie in [0, 1]");
        if (shift < 0.0 || shift > 1.0) throw ConfigError("shift must lie in [0, 1]");
        if (frames < 1) throw ConfigError("frames must be >= 1");
        if (count_pretrain == 0 || count_downstream == 0 || count_test == 0)
            throw ConfigError("all split counts must be positive");
    }

    // Token layout. Special ids first, then filler words, then the three
    // attribute vocabularies.
    static constexpr std::uint32_t kPad = 0, kBos = 1, kEos = 2;
    static constexpr std::uint32_t kA = 3, kThe = 4, kAt = 5, kIs = 6, kHolds = 7, kNear = 8, kSee = 9, kWhat = 10,
                                   kColorWord = 11, kShapeWord = 12;
    static constexpr std::uint32_t kFirstAttr = 13;

    std::uint32_t color_token(std::size_t c) const { return kFirstAttr + static_cast<std::uint32_t>(c); }
    std::uint32_t shape_token(std::size_t s) const {
        return kFirstAttr + static_cast<std::uint32_t>(colors + s);
    }
    std::uint32_t position_token(std::size_t p) const {
        return kFirstAttr + static_cast<std::uint32_t>(colors + shapes + p);
    }
    std::size_t vocab_size() const { return kFirstAttr + colors + shapes + positions; }

    std::size_t patch_dim() const { return shapes + colors + 1; }  // one-hot blocks + occupancy

    std::string token_text(std::uint32_t id) const {
        static const char* fillers[] = {"<pad>", "<bos>", "<eos>", "a",    "the",  "at",   "is",
                                        "holds", "near",  "see",   "what", "color", "shape"};
        static const char* color_names[] = {"red", "green", "blue", "yellow", "purple", "orange", "cyan", "white"};
        static const char* shape_names[] = {"cube", "ball", "cone", "torus", "prism", "wedge", "disk", "slab"};
        if (id < kFirstAttr) return fillers[id];
        std::size_t k = id - kFirstAttr;
        if (k < colors) return k < 8 ? color_names[k] : "color" + std::to_string(k);
        k -= colors;
        if (k < shapes) return k < 8 ? shape_names[k] : "shape" + std::to_string(k);
        k -= shapes;
        return "spot" + std::to_string(k);
    }

    std::uint64_t hash() const {
        std::string blob;
        for (std::size_t v : {grid, shapes, colors, positions, frames, count_pretrain, count_downstream, count_test})
            blob += std::to_string(v) + "|";
        blob += std::to_string(noise_amplitude) + "|" + std::to_string(noise_frame_prob) + "|" +
                std::to_string(shift) + "|" + std::to_string(seed) + "|" + (video ? "v" : "i") + "|" +
                (with_qa ? "q" : "-");
        return fnv1a(blob);
    }

    std::uint64_t total_count() const { return count_pretrain + count_downstream + count_test; }

    std::pair<std::uint64_t, std::uint64_t> split_range(Split s) const {
        switch (s) {
            case Split::Pretrain: return {0, count_pretrain};
            case Split::Downstream: return {count_pretrain, count_pretrain + count_downstream};
            case Split::Test: return {count_pretrain + count_downstream, total_count()};
        }
        return {0, 0};
    }
};

struct Sample {
    std::uint64_t pair_id = 0;
    bool video = false;
    std::uint32_t frames = 1;
    std::uint32_t patches = 0;
    std::uint32_t feat_dim = 0;
    std::vector<float> payload;             // [frames x patches x feat_dim], row-major
    std::vector<std::uint32_t> salient;     // salient frame indices, videos only
    std::vector<std::uint32_t> caption;
    std::vector<std::uint32_t> question;    // empty unless QA
    std::vector<std::uint32_t> answer;
};

namespace detail {

// Deterministic uniforms straight from the engine's standardized bit stream;
// the std distributions are implementation-defined and would break the
// byte-identical-files contract across library versions.
inline double rand_u01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}
inline std::size_t rand_index(Rng& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

inline Rng sample_rng(const WorldSpec& spec, std::uint64_t index, std::uint64_t stream) {
    std::uint64_t h = fnv1a(&index, sizeof(index), spec.seed ^ 0x9e3779b97f4a7c15ull);
    h = fnv1a(&stream, sizeof(stream), h);
    return Rng(h);
}

struct Attributes {
    std::size_t shape, color, position;
};

// Pretrain priors are uniform; the downstream regime reweights value k by
// 1 + shift * k (normalized), which is what the chi-squared check measures.
inline std::size_t sample_category(Rng& rng, std::size_t n, bool shifted, double shift) {
    if (!shifted || shift == 0.0) return rand_index(rng, n);
    double total = 0;
    for (std::size_t k = 0; k < n; ++k) total += 1.0 + shift * static_cast<double>(k);
    double u = rand_u01(rng) * total;
    for (std::size_t k = 0; k < n; ++k) {
        u -= 1.0 + shift * static_cast<double>(k);
        if (u <= 0) return k;
    }
    return n - 1;
}

inline Attributes sample_attributes(const WorldSpec& spec, Rng& rng, bool shifted) {
    Attributes a;
    a.shape = sample_category(rng, spec.shapes, shifted, spec.shift);
    a.color = sample_category(rng, spec.colors, shifted, spec.shift);
    a.position = rand_index(rng, spec.positions);
    return a;
}

inline void render_frame(const WorldSpec& spec, Rng& rng, const Attributes& a, std::vector<float>& out) {
    const std::size_t f = spec.patch_dim();
    const std::size_t base = out.size();
    out.resize(base + spec.grid * f, 0.f);
    for (std::size_t i = base; i < out.size(); ++i)
        out[i] = static_cast<float>((2.0 * rand_u01(rng) - 1.0) * spec.noise_amplitude);
    float* patch = out.data() + base + a.position * f;
    patch[a.shape] += 1.f;
    patch[spec.shapes + a.color] += 1.f;
    patch[spec.shapes + spec.colors] += 1.f;
}

inline std::vector<std::uint32_t> caption_tokens(const WorldSpec& spec, Rng& rng, const Attributes& a,
                                                 bool shifted) {
    const std::uint32_t c = spec.color_token(a.color);
    const std::uint32_t s = spec.shape_token(a.shape);
    const std::uint32_t p = spec.position_token(a.position);
    const std::size_t pick = rand_index(rng, 2);
    if (!shifted) {
        if (pick == 0) return {WorldSpec::kA, c, s, WorldSpec::kAt, p};
        return {WorldSpec::kThe, s, WorldSpec::kIs, c, WorldSpec::kAt, p};
    }
    // Downstream swaps the sentence templates: new word order, new fillers.
    if (pick == 0) return {p, WorldSpec::kHolds, WorldSpec::kA, c, s};
    return {WorldSpec::kSee, c, s, WorldSpec::kNear, p};
}

}  // namespace detail

inline bool index_is_shifted(const WorldSpec& spec, std::uint64_t index) {
    return index >= spec.count_pretrain;
}

inline Sample gen_image_pair(const WorldSpec& spec, std::uint64_t index) {
    Rng rng = detail::sample_rng(spec, index, 0);
    const bool shifted = index_is_shifted(spec, index);
    auto attrs = detail::sample_attributes(spec, rng, shifted);
    Sample sample;
    sample.pair_id = index;
    sample.video = false;
    sample.frames = 1;
    sample.patches = static_cast<std::uint32_t>(spec.grid);
    sample.feat_dim = static_cast<std::uint32_t>(spec.patch_dim());
    detail::render_frame(spec, rng, attrs, sample.payload);
    sample.caption = detail::caption_tokens(spec, rng, attrs, shifted);
    return sample;
}

inline Sample gen_video_pair(const WorldSpec& spec, std::uint64_t index, std::size_t n_frames) {
    if (n_frames < 1) throw ContractError("videos need at least one frame");
    Rng rng = detail::sample_rng(spec, index, 1);
    const bool shifted = index_is_shifted(spec, index);
    auto attrs = detail::sample_attributes(spec, rng, shifted);
    Sample sample;
    sample.pair_id = index;
    sample.video = true;
    sample.frames = static_cast<std::uint32_t>(n_frames);
    sample.patches = static_cast<std::uint32_t>(spec.grid);
    sample.feat_dim = static_cast<std::uint32_t>(spec.patch_dim());
    std::vector<bool> is_salient(n_frames);
    bool any = false;
    for (std::size_t i = 0; i < n_frames; ++i) {
        is_salient[i] = detail::rand_u01(rng) >= spec.noise_frame_prob;
        any = any || is_salient[i];
    }
    if (!any) is_salient[detail::rand_index(rng, n_frames)] = true;  // a salient frame always exists
    for (std::size_t i = 0; i < n_frames; ++i) {
        if (is_salient[i]) {
            sample.salient.push_back(static_cast<std::uint32_t>(i));
            detail::render_frame(spec, rng, attrs, sample.payload);
        } else {
            // Distractor: an unrelated attribute combination.
            detail::Attributes other = attrs;
            while (other.shape == attrs.shape && other.color == attrs.color)
                other = detail::sample_attributes(spec, rng, shifted);
            detail::render_frame(spec, rng, other, sample.payload);
        }
    }
    sample.caption = detail::caption_tokens(spec, rng, attrs, shifted);
    return sample;
}

inline Sample gen_vqa_triple(const WorldSpec& spec, std::uint64_t index) {
    Sample sample = spec.video ? gen_video_pair(spec, index, spec.frames) : gen_image_pair(spec, index);
    Rng rng = detail::sample_rng(spec, index, 2);
    // Recover the attributes from the caption rather than re-sampling, so
    // the answer always matches the payload.
    std::size_t color = 0, shape = 0, position = 0;
    for (std::uint32_t tok : sample.caption) {
        if (tok < WorldSpec::kFirstAttr) continue;
        std::size_t k = tok - WorldSpec::kFirstAttr;
        if (k < spec.colors)
            color = k;
        else if (k < spec.colors + spec.shapes)
            shape = k - spec.colors;
        else
            position = k - spec.colors - spec.shapes;
    }
    const bool ask_color = detail::rand_index(rng, 2) == 0;
    sample.question = {WorldSpec::kWhat, ask_color ? WorldSpec::kColorWord : WorldSpec::kShapeWord, WorldSpec::kAt,
                       spec.position_token(position)};
    sample.answer = {ask_color ? spec.color_token(color) : spec.shape_token(shape)};
    return sample;
}

inline Sample gen_sample(const WorldSpec& spec, std::uint64_t index) {
    if (spec.with_qa) return gen_vqa_triple(spec, index);
    if (spec.video) return gen_video_pair(spec, index, spec.frames);
    return gen_image_pair(spec, index);
}

// ---------------------------------------------------------------------------
// Dataset files: length-prefixed little-endian records per split plus a JSON
// manifest carrying the spec hash and split ranges.
//
// Record body layout (all little-endian):
//   u64 pair_id
//   u32 modality (0 image, 1 video), u32 frames, u32 patches, u32 feat_dim
//   u32 salient_count, u32 salient[salient_count]
//   f32 payload[frames * patches * feat_dim]
//   u32 caption_len, u32 question_len, u32 answer_len
//   u32 tokens[caption_len + question_len + answer_len]
// Each record is preceded by u32 body length in bytes.

inline void serialize_sample(const Sample& s, std::string& out) {
    std::string body;
    le::put<std::uint64_t>(body, s.pair_id);
    le::put<std::uint32_t>(body, s.video ? 1u : 0u);
    le::put<std::uint32_t>(body, s.frames);
    le::put<std::uint32_t>(body, s.patches);
    le::put<std::uint32_t>(body, s.feat_dim);
    le::put<std::uint32_t>(body, static_cast<std::uint32_t>(s.salient.size()));
    for (std::uint32_t v : s.salient) le::put<std::uint32_t>(body, v);
    for (float v : s.payload) le::put_f32(body, v);
    le::put<std::uint32_t>(body, static_cast<std::uint32_t>(s.caption.size()));
    le::put<std::uint32_t>(body, static_cast<std::uint32_t>(s.question.size()));
    le::put<std::uint32_t>(body, static_cast<std::uint32_t>(s.answer.size()));
    for (std::uint32_t v : s.caption) le::put<std::uint32_t>(body, v);
    for (std::uint32_t v : s.question) le::put<std::uint32_t>(body, v);
    for (std::uint32_t v : s.answer) le::put<std::uint32_t>(body, v);
    le::put<std::uint32_t>(out, static_cast<std::uint32_t>(body.size()));
    out += body;
}

inline Sample deserialize_sample(le::Reader& in) {
    const std::uint32_t len = in.get<std::uint32_t>();
    const std::size_t end = in.pos + len;
    in.need(len);
    Sample s;
    s.pair_id = in.get<std::uint64_t>();
    s.video = in.get<std::uint32_t>() != 0;
    s.frames = in.get<std::uint32_t>();
    s.patches = in.get<std::uint32_t>();
    s.feat_dim = in.get<std::uint32_t>();
    const std::uint32_t n_salient = in.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_salient; ++i) s.salient.push_back(in.get<std::uint32_t>());
    const std::size_t payload = static_cast<std::size_t>(s.frames) * s.patches * s.feat_dim;
    s.payload.reserve(payload);
    for (std::size_t i = 0; i < payload; ++i) s.payload.push_back(in.get_f32());
    const std::uint32_t nc = in.get<std::uint32_t>();
    const std::uint32_t nq = in.get<std::uint32_t>();
    const std::uint32_t na = in.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < nc; ++i) s.caption.push_back(in.get<std::uint32_t>());
    for (std::uint32_t i = 0; i < nq; ++i) s.question.push_back(in.get<std::uint32_t>());
    for (std::uint32_t i = 0; i < na; ++i) s.answer.push_back(in.get<std::uint32_t>());
    if (in.pos != end) throw IOError("dataset record length mismatch at pair " + std::to_string(s.pair_id));
    return s;
}

struct Dataset {
    std::uint64_t spec_hash = 0;
    std::vector<Sample> pretrain, downstream, test;

    const std::vector<Sample>& split(Split s) const {
        switch (s) {
            case Split::Pretrain: return pretrain;
            case Split::Downstream: return downstream;
            case Split::Test: return test;
        }
        return pretrain;
    }
};

inline void write_dataset(const WorldSpec& spec, const std::filesystem::path& dir) {
    spec.validate();
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    for (Split split : {Split::Pretrain, Split::Downstream, Split::Test}) {
        auto [lo, hi] = spec.split_range(split);
        std::string blob;
        for (std::uint64_t i = lo; i < hi; ++i) serialize_sample(gen_sample(spec, i), blob);
        std::ofstream out(dir / (std::string(split_name(split)) + ".bin"), std::ios::binary | std::ios::trunc);
        if (!out) throw IOError("cannot write dataset file in " + dir.string());
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
    nlohmann::json manifest;
    manifest["spec_hash"] = hex64(spec.hash());
    manifest["video"] = spec.video;
    manifest["with_qa"] = spec.with_qa;
    manifest["frames"] = spec.frames;
    manifest["vocab_size"] = spec.vocab_size();
    manifest["patch_dim"] = spec.patch_dim();
    manifest["grid"] = spec.grid;
    for (Split split : {Split::Pretrain, Split::Downstream, Split::Test}) {
        auto [lo, hi] = spec.split_range(split);
        manifest["splits"][split_name(split)] = {lo, hi};
    }
    std::ofstream mout(dir / "manifest.json", std::ios::trunc);
    if (!mout) throw IOError("cannot write manifest in " + dir.string());
    mout << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir, const std::string& expected_spec_hash = "") {
    std::ifstream min(dir / "manifest.json");
    if (!min) throw IOError("missing manifest.json in " + dir.string());
    nlohmann::json manifest;
    try {
        min >> manifest;
    } catch (const std::exception& e) {
        throw IOError("malformed manifest in " + dir.string() + ": " + e.what());
    }
    const std::string hash = manifest.at("spec_hash").get<std::string>();
    if (!expected_spec_hash.empty() && hash != expected_spec_hash)
        throw IOError("dataset spec hash mismatch: manifest has " + hash + ", expected " + expected_spec_hash);

    Dataset ds;
    ds.spec_hash = std::stoull(hash, nullptr, 16);
    auto read_split = [&](Split split) {
        std::ifstream in(dir / (std::string(split_name(split)) + ".bin"), std::ios::binary);
        if (!in) throw IOError("missing dataset split file " + std::string(split_name(split)) + ".bin");
        std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        le::Reader reader(blob.data(), blob.size());
        std::vector<Sample> out;
        while (!reader.done()) out.push_back(deserialize_sample(reader));
        const auto range = manifest.at("splits").at(split_name(split));
        const std::uint64_t expect = range.at(1).get<std::uint64_t>() - range.at(0).get<std::uint64_t>();
        if (out.size() != expect)
            throw IOError("split " + std::string(split_name(split)) + " has " + std::to_string(out.size()) +
                          " records, manifest says " + std::to_string(expect));
        return out;
    };
    ds.pretrain = read_split(Split::Pretrain);
    ds.downstream = read_split(Split::Downstream);
    ds.test = read_split(Split::Test);
    return ds;
}

}  // namespace uniadapter
