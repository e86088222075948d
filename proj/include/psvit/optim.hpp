#pragma once

// Bias-corrected Adam with decoupled weight decay. step() refuses to touch
// anything when a gradient is non-finite; the caller decides whether to carry
// on with the next batch or abort.

#include <cmath>
#include <cstdint>
#include <vector>

#include "psvit/errors.hpp"
#include "psvit/param_store.hpp"

namespace psvit {

struct AdamW {
    float lr = 3e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 1e-4f;

    std::int64_t steps = 0;
    std::int64_t skipped = 0;  // batches dropped because of non-finite gradients
    std::vector<std::vector<float>> m, v;

    // applies grads accumulated in ps; returns false (and leaves params,
    // moments and step count alone) if any gradient is non-finite
    bool step(ParamStoreT<float>& ps) {
        if (m.empty()) {
            m.resize(ps.size());
            v.resize(ps.size());
            for (size_t i = 0; i < ps.size(); ++i) {
                m[i].assign(size_t(ps.tensors[i].numel()), 0.0f);
                v[i].assign(size_t(ps.tensors[i].numel()), 0.0f);
            }
        }
        if (m.size() != ps.size()) throw ValueError("adamw: param count changed mid-run");
        for (size_t i = 0; i < ps.size(); ++i) {
            auto& g = ps.tensors[i].grad();
            if (std::int64_t(g.size()) != ps.tensors[i].numel())
                throw ValueError("adamw: missing gradient for " + ps.names[i]);
            for (float x : g)
                if (!std::isfinite(x)) {
                    ++skipped;
                    return false;
                }
        }
        ++steps;
        double bc1 = 1.0 - std::pow(double(beta1), double(steps));
        double bc2 = 1.0 - std::pow(double(beta2), double(steps));
        for (size_t i = 0; i < ps.size(); ++i) {
            auto& p = ps.tensors[i].values();
            auto& g = ps.tensors[i].grad();
            auto& mi = m[i];
            auto& vi = v[i];
            for (size_t j = 0; j < p.size(); ++j) {
                mi[j] = beta1 * mi[j] + (1 - beta1) * g[j];
                vi[j] = beta2 * vi[j] + (1 - beta2) * g[j] * g[j];
                double mh = double(mi[j]) / bc1;
                double vh = double(vi[j]) / bc2;
                p[j] -= float(double(lr) * (mh / (std::sqrt(vh) + double(eps)) +
                                            double(weight_decay) * double(p[j])));
            }
        }
        return true;
    }
};

}  // namespace psvit
