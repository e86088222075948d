#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "psvit/tensor.hpp"

namespace psvit {

// Named, ordered collection of trainable tensors. Order is insertion order and
// is what checkpoints and the optimizer iterate over.
template <class T>
struct ParamStoreT {
    std::vector<std::string> names;
    std::vector<TensorT<T>> tensors;
    std::unordered_map<std::string, size_t> index;

    TensorT<T>& add(const std::string& name, TensorT<T> t) {
        if (index.count(name)) throw ValueError("param store: duplicate name " + name);
        index[name] = names.size();
        names.push_back(name);
        tensors.push_back(std::move(t));
        return tensors.back();
    }

    bool has(const std::string& name) const { return index.count(name) != 0; }

    TensorT<T>& at(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw ValueError("param store: no param named " + name);
        return tensors[it->second];
    }
    const TensorT<T>& at(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw ValueError("param store: no param named " + name);
        return tensors[it->second];
    }

    size_t size() const { return names.size(); }

    std::int64_t total_params() const {
        std::int64_t n = 0;
        for (const auto& t : tensors) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& t : tensors) {
            auto& g = t.grad();
            std::fill(g.begin(), g.end(), T(0));
        }
    }

    template <class U>
    ParamStoreT<U> cast(bool requires_grad) const {
        ParamStoreT<U> out;
        for (size_t i = 0; i < names.size(); ++i) {
            std::vector<U> v(tensors[i].values().begin(), tensors[i].values().end());
            out.add(names[i], TensorT<U>::from(tensors[i].shape(), std::move(v), requires_grad));
        }
        return out;
    }
};

using ParamStore = ParamStoreT<float>;

}  // namespace psvit
