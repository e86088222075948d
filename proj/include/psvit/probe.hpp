#pragma once

// Linear probing of frozen activations: mean-pooled per-layer token features,
// ridge regression heads (closed form), a softmax scalar mix across layers,
// and MAE reporting against in-distribution, OOD and random-init baselines.

#include <cstdint>
#include <string>
#include <vector>

#include "psvit/dataset.hpp"
#include "psvit/model.hpp"
#include "psvit/param_store.hpp"

namespace psvit::probe {

struct FeatureSet {
    std::int64_t n = 0;       // sequences
    std::int64_t layers = 0;  // captured global layers
    std::int64_t dim = 0;     // embedding width at the global level
    std::vector<float> layer_feats;  // [n][layers][dim], patch tokens pooled over space+time
    std::vector<float> reg_feats;    // [n][dim], final-layer registers pooled over regs+time
    std::vector<double> targets;     // simulator parameter mapped by the in-dist band to [0,1]

    const float* layer_row(std::int64_t i, std::int64_t l) const {
        return layer_feats.data() + (i * layers + l) * dim;
    }
    const float* concat_row(std::int64_t i) const { return layer_feats.data() + i * layers * dim; }
    const float* reg_row(std::int64_t i) const { return reg_feats.data() + i * dim; }
};

// Frozen forward over the first min(frames, t_max) frames of every sequence,
// capturing each global layer. `lo`/`hi` is the normalization band; pass the
// in-distribution band even when `ds` holds OOD sequences.
FeatureSet extract_features(const model::ModelConfig& cfg, const ParamStoreT<float>& ps,
                            const data::Dataset& ds, const std::string& target, double lo,
                            double hi);

struct Ridge {
    std::vector<double> mean, scale;  // feature standardization from the fit split
    std::vector<double> w;            // weights on standardized features
    double bias = 0;
    double lambda = 1e-3;
    bool bumped = false;  // solver had to inflate lambda to get a positive-definite system

    double predict(const float* x) const;
    double predict(const double* x) const;
};

// Closed-form ridge on standardized features; rows of X are `stride` floats
// apart and `d` wide. A singular normal system retries with lambda*10.
Ridge fit_ridge(const float* X, std::int64_t n, std::int64_t d, std::int64_t stride,
                const double* y, double lambda = 1e-3);

double mae(const Ridge& r, const float* X, std::int64_t n, std::int64_t d, std::int64_t stride,
           const double* y);

struct ScalarMix {
    std::int64_t layers = 0, dim = 0;
    std::vector<double> feat_mean, feat_scale;  // per [layer][dim] coordinate
    std::vector<double> logits;                 // softmax over layers
    Ridge head;                                 // ridge on the mixed features

    std::vector<double> weights() const;  // simplex: nonnegative, sums to 1
    double predict(const float* layer_feats) const;
};

// Alternates a closed-form head refit with gradient steps on the mix logits.
ScalarMix fit_scalar_mix(const float* X, std::int64_t n, std::int64_t layers, std::int64_t dim,
                         const double* y, int iters = 200, double lr = 0.5,
                         double lambda = 1e-3);

double mae(const ScalarMix& m, const float* X, std::int64_t n, const double* y);

struct ProbeRow {
    std::string name;  // layer0.., concat, scalar_mix, registers
    double mae_in = 0;
    double mae_ood = 0;
    double baseline_mae = 0;  // same probe on a randomly initialized model, in-dist
};

struct ProbeReport {
    std::vector<ProbeRow> rows;
    std::int64_t fit_n = 0, test_n = 0, ood_n = 0;
};

// Fits every probe on a fit/test split of `ds_in` (deterministic index split)
// and scores OOD sequences with the in-distribution normalization band.
ProbeReport run_probe(const model::ModelConfig& cfg, const ParamStoreT<float>& trained,
                      const ParamStoreT<float>& baseline, const data::Dataset& ds_in,
                      const data::Dataset& ds_ood, const std::string& target,
                      double test_frac = 0.25);

void write_probe_csv(const ProbeReport& rep, const std::string& path);

}  // namespace psvit::probe
