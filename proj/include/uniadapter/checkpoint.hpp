#pragma once

// Checkpoint container. Fixed little-endian layout:
//   magic "UADC", u32 version, u32 tensor count
//   per tensor: u32 name length, name bytes, u32 rank, u64 extents[rank],
//               f32 data (row-major)
//   alias table: u32 count, per alias u32+bytes alias name, u32+bytes
//                canonical name
//   trainable set: u32 count, u32+bytes names
//   u64 config hash, u64 backbone hash
// Canonical tensors are serialized exactly once; aliases only by name, so a
// load-then-save round trip is byte-identical.

#include <filesystem>
#include <fstream>
#include <functional>
#include <set>

#include "uniadapter/params.hpp"

namespace uniadapter {

constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct CheckpointData {
    std::vector<CheckpointEntry> entries;
    std::vector<std::pair<std::string, std::string>> aliases;  // alias -> canonical
    std::vector<std::string> trainable;
    std::uint64_t config_hash = 0;
    std::uint64_t backbone_hash = 0;
};

inline std::string serialize_checkpoint(const CheckpointData& ckpt) {
    std::string out;
    out += "UADC";
    le::put<std::uint32_t>(out, kCheckpointVersion);
    le::put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries.size()));
    auto put_str = [&](const std::string& s) {
        le::put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
        out += s;
    };
    for (const auto& e : ckpt.entries) {
        put_str(e.name);
        le::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
        for (std::size_t extent : e.shape) le::put<std::uint64_t>(out, extent);
        if (e.data.size() != shape_numel(e.shape))
            throw ContractError("checkpoint entry " + e.name + " has inconsistent data length");
        for (float v : e.data) le::put_f32(out, v);
    }
    le::put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.aliases.size()));
    for (const auto& [alias, canon] : ckpt.aliases) {
        put_str(alias);
        put_str(canon);
    }
    le::put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.trainable.size()));
    for (const auto& name : ckpt.trainable) put_str(name);
    le::put<std::uint64_t>(out, ckpt.config_hash);
    le::put<std::uint64_t>(out, ckpt.backbone_hash);
    return out;
}

inline CheckpointData parse_checkpoint(const std::string& bytes) {
    le::Reader in(bytes.data(), bytes.size());
    if (in.get_bytes(4) != "UADC") throw IOError("not a checkpoint: bad magic");
    const std::uint32_t version = in.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw IOError("unsupported checkpoint version " + std::to_string(version));
    auto get_str = [&]() { return in.get_bytes(in.get<std::uint32_t>()); };

    CheckpointData ckpt;
    const std::uint32_t count = in.get<std::uint32_t>();
    std::set<std::string> names;
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        e.name = get_str();
        if (!names.insert(e.name).second) throw IOError("duplicate checkpoint tensor " + e.name);
        const std::uint32_t rank = in.get<std::uint32_t>();
        for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(in.get<std::uint64_t>());
        const std::size_t n = shape_numel(e.shape);
        e.data.reserve(n);
        for (std::size_t k = 0; k < n; ++k) e.data.push_back(in.get_f32());
        ckpt.entries.push_back(std::move(e));
    }
    const std::uint32_t alias_count = in.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < alias_count; ++i) {
        std::string alias = get_str();
        std::string canon = get_str();
        if (!names.count(canon)) throw IOError("alias " + alias + " dangles: no canonical tensor " + canon);
        ckpt.aliases.emplace_back(std::move(alias), std::move(canon));
    }
    const std::uint32_t train_count = in.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < train_count; ++i) {
        std::string name = get_str();
        if (!names.count(name)) throw IOError("trainable listing names unknown tensor " + name);
        ckpt.trainable.push_back(std::move(name));
    }
    ckpt.config_hash = in.get<std::uint64_t>();
    ckpt.backbone_hash = in.get<std::uint64_t>();
    if (!in.done()) throw IOError("trailing bytes after checkpoint payload");
    return ckpt;
}

inline void save_checkpoint_file(const std::filesystem::path& path, const CheckpointData& ckpt) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IOError("cannot write checkpoint " + path.string());
    const std::string bytes = serialize_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline CheckpointData load_checkpoint_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("cannot read checkpoint " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes);
}

// Snapshot of the store, optionally restricted by predicate on the
// canonical name (aliases of excluded canonicals are dropped too).
template <typename R>
CheckpointData checkpoint_from_store(const ParameterStore<R>& store, std::uint64_t config_hash,
                                     std::uint64_t backbone_hash = 0,
                                     const std::function<bool(const std::string&)>& keep = nullptr) {
    CheckpointData ckpt;
    ckpt.config_hash = config_hash;
    ckpt.backbone_hash = backbone_hash;
    for (const auto& e : store.entries()) {
        const std::string& canon = e.canonical.empty() ? e.name : e.canonical;
        if (keep && !keep(canon)) continue;
        if (e.canonical.empty()) {
            CheckpointEntry entry;
            entry.name = e.name;
            entry.shape = e.tensor.shape();
            entry.data.reserve(e.tensor.numel());
            for (R v : e.tensor.data()) entry.data.push_back(static_cast<float>(v));
            ckpt.entries.push_back(std::move(entry));
            if (e.trainable) ckpt.trainable.push_back(e.name);
        } else {
            ckpt.aliases.emplace_back(e.name, e.canonical);
        }
    }
    return ckpt;
}

// Copies checkpoint values into existing tensors by name. Every checkpoint
// tensor must exist in the store with a matching shape.
template <typename R>
void restore_into_store(ParameterStore<R>& store, const CheckpointData& ckpt) {
    for (const auto& e : ckpt.entries) {
        if (!store.contains(e.name)) throw IOError("checkpoint tensor " + e.name + " not present in this model");
        Tensor<R>& t = store.get(e.name);
        if (t.shape() != e.shape)
            throw IOError("checkpoint tensor " + e.name + " has shape " + shape_str(e.shape) +
                          ", model expects " + shape_str(t.shape()));
        for (std::size_t i = 0; i < e.data.size(); ++i) t.data()[i] = static_cast<R>(e.data[i]);
    }
}

// Builds a store purely from checkpoint contents (canonical entries in file
// order, aliases after).
template <typename R>
ParameterStore<R> store_from_checkpoint(const CheckpointData& ckpt) {
    ParameterStore<R> store;
    std::set<std::string> trainable(ckpt.trainable.begin(), ckpt.trainable.end());
    for (const auto& e : ckpt.entries) {
        std::vector<R> data;
        data.reserve(e.data.size());
        for (float v : e.data) data.push_back(static_cast<R>(v));
        store.add(e.name, Tensor<R>(e.shape, std::move(data)), trainable.count(e.name) != 0);
    }
    for (const auto& [alias, canon] : ckpt.aliases) store.alias(alias, canon);
    return store;
}

}  // namespace uniadapter
