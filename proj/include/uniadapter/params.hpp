#pragma once

// Named parameter registry with explicit alias groups. An alias binds a name
// to the canonical entry's storage, so writes through any name are visible
// through all and counting sums each canonical tensor exactly once.

#include <map>
#include <unordered_map>

#include "uniadapter/tensor.hpp"

namespace uniadapter {

template <typename R>
class ParameterStore {
public:
    struct Entry {
        std::string name;
        Tensor<R> tensor;
        std::string canonical;  // empty when this entry owns the storage
        bool trainable = false;
    };

    Tensor<R>& add(const std::string& name, Tensor<R> t, bool trainable) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        t.set_requires_grad(trainable);
        entries_.push_back(Entry{name, std::move(t), "", trainable});
        index_[name] = entries_.size() - 1;
        return entries_.back().tensor;
    }

    void alias(const std::string& alias_name, const std::string& canonical_name) {
        if (index_.count(alias_name)) throw ConfigError("duplicate parameter name: " + alias_name);
        Entry& canon = entry(canonical_name);
        if (!canon.canonical.empty())
            throw ConfigError("alias target " + canonical_name + " is itself an alias of " + canon.canonical);
        entries_.push_back(Entry{alias_name, canon.tensor, canon.name, canon.trainable});
        index_[alias_name] = entries_.size() - 1;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<R>& get(const std::string& name) { return entry(name).tensor; }
    const Tensor<R>& get(const std::string& name) const { return entry(name).tensor; }

    const std::string& canonical_of(const std::string& name) const {
        const Entry& e = entry(name);
        return e.canonical.empty() ? e.name : e.canonical;
    }

    bool is_alias(const std::string& name) const { return !entry(name).canonical.empty(); }

    bool trainable(const std::string& name) const { return entry(canonical_of(name)).trainable; }

    void set_trainable(const std::string& name, bool t) {
        Entry& canon = entry(canonical_of(name));
        canon.trainable = t;
        canon.tensor.set_requires_grad(t);
        // Alias entries share the node, so the flag propagates through storage;
        // keep their bookkeeping in sync for the dump.
        for (Entry& e : entries_)
            if (e.canonical == canon.name) e.trainable = t;
    }

    void set_all_trainable(bool t) {
        for (Entry& e : entries_)
            if (e.canonical.empty()) set_trainable(e.name, t);
    }

    void set_trainable_by_prefix(const std::string& prefix, bool t) {
        for (Entry& e : entries_)
            if (e.canonical.empty() && e.name.rfind(prefix, 0) == 0) set_trainable(e.name, t);
    }

    // Insertion order; includes aliases.
    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const Entry& e : entries_) out.push_back(e.name);
        return out;
    }

    template <typename Fn>
    void for_each_canonical(Fn&& fn) {
        for (Entry& e : entries_)
            if (e.canonical.empty()) fn(e.name, e.tensor, e.trainable);
    }

    template <typename Fn>
    void for_each_canonical(Fn&& fn) const {
        for (const Entry& e : entries_)
            if (e.canonical.empty()) fn(e.name, e.tensor, e.trainable);
    }

    template <typename Fn>
    void for_each_trainable(Fn&& fn) {
        for (Entry& e : entries_)
            if (e.canonical.empty() && e.trainable) fn(e.name, e.tensor);
    }

    std::uint64_t count_trainable() const {
        std::uint64_t n = 0;
        for (const Entry& e : entries_)
            if (e.canonical.empty() && e.trainable) n += e.tensor.numel();
        return n;
    }

    // Trainable scalar counts keyed by the first `depth` dot-separated name
    // components, canonical tensors only.
    std::map<std::string, std::uint64_t> count_trainable_by_group(std::size_t depth = 2) const {
        std::map<std::string, std::uint64_t> groups;
        for (const Entry& e : entries_) {
            if (!e.canonical.empty() || !e.trainable) continue;
            std::string key;
            std::size_t pos = 0;
            for (std::size_t i = 0; i < depth; ++i) {
                std::size_t dot = e.name.find('.', pos);
                if (dot == std::string::npos) {
                    key = e.name;
                    break;
                }
                key = e.name.substr(0, dot);
                pos = dot + 1;
            }
            groups[key] += e.tensor.numel();
        }
        return groups;
    }

    void zero_grad() {
        for (Entry& e : entries_)
            if (e.canonical.empty()) e.tensor.zero_grad();
    }

    // Deterministic text report used by golden tests: one line per name in
    // insertion order.
    std::string dump() const {
        std::ostringstream os;
        for (const Entry& e : entries_) {
            os << e.name << " " << shape_str(e.tensor.shape()) << " "
               << (e.canonical.empty() ? "canonical" : ("alias->" + e.canonical)) << " "
               << (entry(e.canonical.empty() ? e.name : e.canonical).trainable ? "trainable" : "frozen") << "\n";
        }
        return os.str();
    }

    // Fingerprint of parameter bytes, optionally restricted by name prefix.
    // Used by the freeze audit: bytes must be identical before/after training.
    std::uint64_t checksum(const std::string& prefix = "") const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const Entry& e : entries_) {
            if (!e.canonical.empty()) continue;
            if (!prefix.empty() && e.name.rfind(prefix, 0) != 0) continue;
            h = fnv1a(e.name.data(), e.name.size(), h);
            h = fnv1a(e.tensor.data().data(), e.tensor.data().size() * sizeof(R), h);
        }
        return h;
    }

    std::size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }

private:
    Entry& entry(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return entries_[it->second];
    }
    const Entry& entry(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return entries_[it->second];
    }

    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace uniadapter
