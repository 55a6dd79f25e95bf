#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "indigo/tensor.hpp"

namespace indigo {

/// Ordered, named parameter set for one run. Names are dotted paths
/// ("visual.blocks.0.msa.wq") and double as the checkpoint keys; insertion
/// order is the canonical (deterministic) iteration order everywhere.
template <typename T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor<T> value;
        bool trainable = true;
    };

    int add(const std::string& name, Tensor<T> init, bool trainable = true) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        const int id = static_cast<int>(items_.size());
        items_.push_back(Entry{name, std::move(init), trainable});
        index_.emplace(name, id);
        return id;
    }

    int find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }

    int require(const std::string& name) const {
        const int id = find(name);
        if (id < 0) throw std::invalid_argument("unknown parameter: " + name);
        return id;
    }

    int size() const { return static_cast<int>(items_.size()); }

    Tensor<T>& value(int id) { return items_.at(id).value; }
    const Tensor<T>& value(int id) const { return items_.at(id).value; }
    Tensor<T>& value(const std::string& name) { return items_.at(require(name)).value; }
    const Tensor<T>& value(const std::string& name) const { return items_.at(require(name)).value; }

    const std::string& name(int id) const { return items_.at(id).name; }
    bool trainable(int id) const { return items_.at(id).trainable; }
    void set_trainable(int id, bool v) { items_.at(id).trainable = v; }

    void set_trainable_where(const std::function<bool(const std::string&)>& pred) {
        for (auto& e : items_) e.trainable = pred(e.name);
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(items_.size());
        for (const auto& e : items_) out.push_back(e.name);
        return out;
    }

    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        for (const auto& e : items_)
            if (e.trainable) out.push_back(e.name);
        return out;
    }

private:
    std::vector<Entry> items_;
    std::unordered_map<std::string, int> index_;
};

/// Gradient accumulator aligned with a ParamStore. Each training chunk owns
/// one sink; sinks are reduced in a fixed order so results do not depend on
/// the thread count.
template <typename T>
class GradSink {
public:
    explicit GradSink(int n_params = 0) { resize(n_params); }

    void resize(int n_params) {
        grads_.assign(static_cast<std::size_t>(n_params), Tensor<T>{});
        touched_.assign(static_cast<std::size_t>(n_params), 0);
    }

    void clear() {
        for (std::size_t i = 0; i < grads_.size(); ++i) {
            if (touched_[i]) grads_[i].fill(T(0));
            touched_[i] = 0;
        }
    }

    void accumulate(int id, const ParamStore<T>& store, const Tensor<T>& g) {
        auto& slot = grads_.at(id);
        if (!touched_[id]) {
            if (slot.numel() == 0) slot = Tensor<T>(store.value(id).shape);
            touched_[id] = 1;
        }
        for (long i = 0; i < g.numel(); ++i) slot.data[i] += g.data[i];
    }

    bool touched(int id) const { return touched_.at(id) != 0; }

    /// Gradient for a parameter; zeros if it was never written.
    Tensor<T> get(int id, const ParamStore<T>& store) const {
        if (touched_.at(id)) return grads_[id];
        return Tensor<T>(store.value(id).shape);
    }

    const Tensor<T>& raw(int id) const { return grads_.at(id); }

    void add_from(const GradSink& other, const ParamStore<T>& store) {
        for (std::size_t i = 0; i < grads_.size(); ++i)
            if (other.touched_[i]) accumulate(static_cast<int>(i), store, other.grads_[i]);
    }

    void scale(T factor) {
        for (std::size_t i = 0; i < grads_.size(); ++i)
            if (touched_[i])
                for (auto& v : grads_[i].data) v *= factor;
    }

    double max_abs() const {
        double m = 0;
        for (std::size_t i = 0; i < grads_.size(); ++i)
            if (touched_[i])
                for (auto v : grads_[i].data) m = std::max(m, std::abs(static_cast<double>(v)));
        return m;
    }

    double l2_norm() const {
        double acc = 0;
        for (std::size_t i = 0; i < grads_.size(); ++i)
            if (touched_[i])
                for (auto v : grads_[i].data) acc += static_cast<double>(v) * static_cast<double>(v);
        return std::sqrt(acc);
    }

    /// Global-norm clipping; no-op when the norm is within max_norm.
    void clip_by_norm(double max_norm) {
        const double n = l2_norm();
        if (n > max_norm) scale(static_cast<T>(max_norm / n));
    }

private:
    std::vector<Tensor<T>> grads_;
    std::vector<char> touched_;
};

} // namespace indigo
