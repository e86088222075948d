#include "psvit/probe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "psvit/errors.hpp"

namespace psvit::probe {

namespace {

// in-place lower Cholesky; false on a non-positive pivot
bool cholesky(std::vector<double>& a, std::int64_t d) {
    for (std::int64_t i = 0; i < d; ++i) {
        for (std::int64_t j = 0; j <= i; ++j) {
            double s = a[i * d + j];
            for (std::int64_t k = 0; k < j; ++k) s -= a[i * d + k] * a[j * d + k];
            if (i == j) {
                if (!(s > 1e-300) || !std::isfinite(s)) return false;
                a[i * d + i] = std::sqrt(s);
            } else {
                a[i * d + j] = s / a[j * d + j];
            }
        }
        for (std::int64_t j = i + 1; j < d; ++j) a[i * d + j] = 0;
    }
    return true;
}

void chol_solve(const std::vector<double>& l, std::int64_t d, std::vector<double>& x) {
    for (std::int64_t i = 0; i < d; ++i) {
        double s = x[size_t(i)];
        for (std::int64_t k = 0; k < i; ++k) s -= l[i * d + k] * x[size_t(k)];
        x[size_t(i)] = s / l[i * d + i];
    }
    for (std::int64_t i = d; i-- > 0;) {
        double s = x[size_t(i)];
        for (std::int64_t k = i + 1; k < d; ++k) s -= l[k * d + i] * x[size_t(k)];
        x[size_t(i)] = s / l[i * d + i];
    }
}

// ridge normal equations on already-centered columns; bumps lambda until the
// system goes positive definite
void solve_normal(const std::vector<double>& gram, const std::vector<double>& rhs,
                  std::int64_t d, double lambda, std::vector<double>& w, double& used_lambda,
                  bool& bumped) {
    double lam = lambda;
    for (int attempt = 0; attempt < 12; ++attempt) {
        auto a = gram;
        for (std::int64_t i = 0; i < d; ++i) a[i * d + i] += lam;
        if (cholesky(a, d)) {
            w = rhs;
            chol_solve(a, d, w);
            used_lambda = lam;
            bumped = bumped || lam != lambda;
            return;
        }
        lam = lam > 0 ? lam * 10 : 1e-6;
        bumped = true;
    }
    throw NumericError("ridge: system stayed singular after 12 lambda bumps");
}

}  // namespace

FeatureSet extract_features(const model::ModelConfig& cfg, const ParamStoreT<float>& ps,
                            const data::Dataset& ds, const std::string& target, double lo,
                            double hi) {
    if (ds.seq_params.size() != ds.n)
        throw DataError("probe: dataset has no per-sequence parameter metadata");
    if (!(hi > lo))
        throw DataError("probe: degenerate normalization band [" + std::to_string(lo) + ", " +
                        std::to_string(hi) + "]");
    FeatureSet fs;
    fs.n = std::int64_t(ds.n);
    fs.layers = cfg.layers;
    fs.dim = cfg.dim;
    fs.layer_feats.assign(size_t(fs.n * fs.layers * fs.dim), 0.0f);
    fs.reg_feats.assign(size_t(fs.n * fs.dim), 0.0f);
    fs.targets.resize(size_t(fs.n));

    std::int64_t t = std::min<std::int64_t>(ds.frames, cfg.t_max);
    std::int64_t sg = cfg.grid_at(cfg.local_blocks) * cfg.grid_at(cfg.local_blocks);
    std::int64_t rows = sg + cfg.registers;
    NoGradGuard ng;
    for (std::int64_t i = 0; i < fs.n; ++i) {
        auto frames = TensorT<float>::from(
            {t, ds.channels, ds.height, ds.width},
            std::vector<float>(ds.seq_ptr(i), ds.seq_ptr(i) + t * ds.frame_elems()));
        model::ForwardCapture<float> cap;
        cap.want_global_tokens = true;
        model::forward(cfg, ps, frames, &cap);
        for (std::int64_t l = 0; l < fs.layers; ++l) {
            const auto& v = cap.global_tokens[size_t(l)].values();
            float* out = fs.layer_feats.data() + (i * fs.layers + l) * fs.dim;
            for (std::int64_t ti = 0; ti < t; ++ti)
                for (std::int64_t s = 0; s < sg; ++s) {
                    const float* row = v.data() + (ti * rows + s) * fs.dim;
                    for (std::int64_t j = 0; j < fs.dim; ++j) out[j] += row[j];
                }
            float inv = 1.0f / float(t * sg);
            for (std::int64_t j = 0; j < fs.dim; ++j) out[j] *= inv;
        }
        if (cfg.registers > 0) {
            const auto& v = cap.global_tokens.back().values();
            float* out = fs.reg_feats.data() + i * fs.dim;
            for (std::int64_t ti = 0; ti < t; ++ti)
                for (std::int64_t s = sg; s < rows; ++s) {
                    const float* row = v.data() + (ti * rows + s) * fs.dim;
                    for (std::int64_t j = 0; j < fs.dim; ++j) out[j] += row[j];
                }
            float inv = 1.0f / float(t * cfg.registers);
            for (std::int64_t j = 0; j < fs.dim; ++j) out[j] *= inv;
        }
        fs.targets[size_t(i)] = (ds.param_of(i, target) - lo) / (hi - lo);
    }
    return fs;
}

double Ridge::predict(const float* x) const {
    double s = bias;
    for (size_t j = 0; j < w.size(); ++j) s += w[j] * (double(x[j]) - mean[j]) / scale[j];
    return s;
}

double Ridge::predict(const double* x) const {
    double s = bias;
    for (size_t j = 0; j < w.size(); ++j) s += w[j] * (x[j] - mean[j]) / scale[j];
    return s;
}

Ridge fit_ridge(const float* X, std::int64_t n, std::int64_t d, std::int64_t stride,
                const double* y, double lambda) {
    if (n < 2) throw ValueError("ridge: need at least 2 examples, got " + std::to_string(n));
    Ridge r;
    r.lambda = lambda;
    r.mean.assign(size_t(d), 0.0);
    r.scale.assign(size_t(d), 0.0);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) r.mean[size_t(j)] += X[i * stride + j];
    for (auto& m : r.mean) m /= double(n);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) {
            double z = double(X[i * stride + j]) - r.mean[size_t(j)];
            r.scale[size_t(j)] += z * z;
        }
    for (auto& s : r.scale) {
        s = std::sqrt(s / double(n));
        if (s < 1e-12) s = 1.0;  // constant column contributes nothing
    }

    double ybar = 0;
    for (std::int64_t i = 0; i < n; ++i) ybar += y[i];
    ybar /= double(n);
    r.bias = ybar;

    std::vector<double> z(static_cast<size_t>(d));
    std::vector<double> gram(size_t(d * d), 0.0), rhs(size_t(d), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < d; ++j)
            z[size_t(j)] = (double(X[i * stride + j]) - r.mean[size_t(j)]) / r.scale[size_t(j)];
        double yc = y[i] - ybar;
        for (std::int64_t j = 0; j < d; ++j) {
            rhs[size_t(j)] += z[size_t(j)] * yc;
            for (std::int64_t k = 0; k <= j; ++k) gram[j * d + k] += z[size_t(j)] * z[size_t(k)];
        }
    }
    for (std::int64_t j = 0; j < d; ++j)
        for (std::int64_t k = j + 1; k < d; ++k) gram[j * d + k] = gram[k * d + j];

    double used = lambda;
    solve_normal(gram, rhs, d, lambda, r.w, used, r.bumped);
    r.lambda = used;
    return r;
}

double mae(const Ridge& r, const float* X, std::int64_t n, std::int64_t d, std::int64_t stride,
           const double* y) {
    if (n < 1) throw ValueError("mae: empty evaluation set");
    if (std::int64_t(r.w.size()) != d)
        throw ValueError("mae: probe expects " + std::to_string(r.w.size()) + " features, got " +
                         std::to_string(d));
    double s = 0;
    for (std::int64_t i = 0; i < n; ++i) s += std::fabs(r.predict(X + i * stride) - y[i]);
    return s / double(n);
}

std::vector<double> ScalarMix::weights() const {
    double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> w(logits.size());
    double sum = 0;
    for (size_t l = 0; l < logits.size(); ++l) sum += w[l] = std::exp(logits[l] - mx);
    for (auto& x : w) x /= sum;
    return w;
}

double ScalarMix::predict(const float* lf) const {
    auto al = weights();
    double s = head.bias;
    for (std::int64_t j = 0; j < dim; ++j) {
        double mj = 0;
        for (std::int64_t l = 0; l < layers; ++l)
            mj += al[size_t(l)] *
                  (double(lf[l * dim + j]) - feat_mean[size_t(l * dim + j)]) /
                  feat_scale[size_t(l * dim + j)];
        s += head.w[size_t(j)] * mj;
    }
    return s;
}

ScalarMix fit_scalar_mix(const float* X, std::int64_t n, std::int64_t layers, std::int64_t dim,
                         const double* y, int iters, double lr, double lambda) {
    if (n < 2) throw ValueError("scalar mix: need at least 2 examples");
    if (layers < 1) throw ValueError("scalar mix: no layers to mix");
    ScalarMix m;
    m.layers = layers;
    m.dim = dim;
    m.logits.assign(size_t(layers), 0.0);
    std::int64_t ld = layers * dim;
    m.feat_mean.assign(size_t(ld), 0.0);
    m.feat_scale.assign(size_t(ld), 0.0);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < ld; ++j) m.feat_mean[size_t(j)] += X[i * ld + j];
    for (auto& v : m.feat_mean) v /= double(n);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < ld; ++j) {
            double z = double(X[i * ld + j]) - m.feat_mean[size_t(j)];
            m.feat_scale[size_t(j)] += z * z;
        }
    for (auto& v : m.feat_scale) {
        v = std::sqrt(v / double(n));
        if (v < 1e-12) v = 1.0;
    }

    // standardized features, kept around for the whole fit
    std::vector<double> z(static_cast<size_t>(n * ld));
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < ld; ++j)
            z[size_t(i * ld + j)] =
                (double(X[i * ld + j]) - m.feat_mean[size_t(j)]) / m.feat_scale[size_t(j)];

    double ybar = 0;
    for (std::int64_t i = 0; i < n; ++i) ybar += y[i];
    ybar /= double(n);

    std::vector<double> mixed(static_cast<size_t>(n * dim));
    std::vector<double> gram(static_cast<size_t>(dim * dim)), rhs(static_cast<size_t>(dim));
    std::vector<double> gl(static_cast<size_t>(n * layers));  // per-example per-layer head response
    auto refit_head = [&](const std::vector<double>& al) {
        std::fill(mixed.begin(), mixed.end(), 0.0);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t l = 0; l < layers; ++l) {
                const double* zi = z.data() + i * ld + l * dim;
                double a = al[size_t(l)];
                double* mi = mixed.data() + i * dim;
                for (std::int64_t j = 0; j < dim; ++j) mi[j] += a * zi[j];
            }
        std::fill(gram.begin(), gram.end(), 0.0);
        std::fill(rhs.begin(), rhs.end(), 0.0);
        for (std::int64_t i = 0; i < n; ++i) {
            const double* mi = mixed.data() + i * dim;
            double yc = y[i] - ybar;
            for (std::int64_t j = 0; j < dim; ++j) {
                rhs[size_t(j)] += mi[j] * yc;
                for (std::int64_t k = 0; k <= j; ++k) gram[j * dim + k] += mi[j] * mi[k];
            }
        }
        for (std::int64_t j = 0; j < dim; ++j)
            for (std::int64_t k = j + 1; k < dim; ++k) gram[j * dim + k] = gram[k * dim + j];
        m.head.mean.assign(size_t(dim), 0.0);  // inputs already standardized and centered
        m.head.scale.assign(size_t(dim), 1.0);
        m.head.bias = ybar;
        double used = lambda;
        solve_normal(gram, rhs, dim, lambda, m.head.w, used, m.head.bumped);
        m.head.lambda = used;
    };

    for (int it = 0; it < iters; ++it) {
        auto al = m.weights();
        refit_head(al);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t l = 0; l < layers; ++l) {
                const double* zi = z.data() + i * ld + l * dim;
                double s = 0;
                for (std::int64_t j = 0; j < dim; ++j) s += m.head.w[size_t(j)] * zi[j];
                gl[size_t(i * layers + l)] = s;
            }
        std::vector<double> ga(size_t(layers), 0.0);
        for (std::int64_t i = 0; i < n; ++i) {
            double pred = m.head.bias;
            for (std::int64_t l = 0; l < layers; ++l)
                pred += al[size_t(l)] * gl[size_t(i * layers + l)];
            double r2 = 2.0 * (pred - y[i]) / double(n);
            for (std::int64_t l = 0; l < layers; ++l)
                ga[size_t(l)] += r2 * gl[size_t(i * layers + l)];
        }
        double dot = 0;
        for (std::int64_t l = 0; l < layers; ++l) dot += al[size_t(l)] * ga[size_t(l)];
        for (std::int64_t l = 0; l < layers; ++l)
            m.logits[size_t(l)] -= lr * al[size_t(l)] * (ga[size_t(l)] - dot);
    }
    refit_head(m.weights());
    return m;
}

double mae(const ScalarMix& m, const float* X, std::int64_t n, const double* y) {
    if (n < 1) throw ValueError("mae: empty evaluation set");
    double s = 0;
    for (std::int64_t i = 0; i < n; ++i)
        s += std::fabs(m.predict(X + i * m.layers * m.dim) - y[i]);
    return s / double(n);
}

ProbeReport run_probe(const model::ModelConfig& cfg, const ParamStoreT<float>& trained,
                      const ParamStoreT<float>& baseline, const data::Dataset& ds_in,
                      const data::Dataset& ds_ood, const std::string& target,
                      double test_frac) {
    if (target.empty() || target == "none")
        throw DataError("probe: no regression target named");
    if (ds_in.target != target)
        throw DataError("probe: dataset declares target '" + ds_in.target + "', asked for '" +
                        target + "'");
    double lo = ds_in.target_lo, hi = ds_in.target_hi;
    auto f_in = extract_features(cfg, trained, ds_in, target, lo, hi);
    auto f_ood = extract_features(cfg, trained, ds_ood, target, lo, hi);
    auto f_base = extract_features(cfg, baseline, ds_in, target, lo, hi);

    // leading block fits, trailing block tests: rows stay contiguous
    auto split = data::split_train_val(f_in.n, test_frac);
    std::int64_t nf = std::int64_t(split.train.size()), nt = std::int64_t(split.val.size());
    if (nf < 2 || nt < 1) throw ValueError("probe: split too small to fit and test");
    ProbeReport rep;
    rep.fit_n = nf;
    rep.test_n = nt;
    rep.ood_n = f_ood.n;

    std::int64_t d = f_in.dim, ld = f_in.layers * f_in.dim;
    const double* y = f_in.targets.data();
    const double* yt = y + nf;
    auto add_ridge_row = [&](const std::string& name, std::int64_t off, std::int64_t width) {
        auto pr = fit_ridge(f_in.layer_feats.data() + off, nf, width, ld, y);
        auto br = fit_ridge(f_base.layer_feats.data() + off, nf, width, ld, y);
        ProbeRow row;
        row.name = name;
        row.mae_in = mae(pr, f_in.layer_feats.data() + nf * ld + off, nt, width, ld, yt);
        row.mae_ood =
            mae(pr, f_ood.layer_feats.data() + off, f_ood.n, width, ld, f_ood.targets.data());
        row.baseline_mae = mae(br, f_base.layer_feats.data() + nf * ld + off, nt, width, ld, yt);
        rep.rows.push_back(row);
    };
    for (std::int64_t l = 0; l < f_in.layers; ++l)
        add_ridge_row("layer" + std::to_string(l), l * d, d);
    add_ridge_row("concat", 0, ld);

    {
        auto pm = fit_scalar_mix(f_in.layer_feats.data(), nf, f_in.layers, d, y);
        auto bm = fit_scalar_mix(f_base.layer_feats.data(), nf, f_in.layers, d, y);
        ProbeRow row;
        row.name = "scalar_mix";
        row.mae_in = mae(pm, f_in.layer_feats.data() + nf * ld, nt, yt);
        row.mae_ood = mae(pm, f_ood.layer_feats.data(), f_ood.n, f_ood.targets.data());
        row.baseline_mae = mae(bm, f_base.layer_feats.data() + nf * ld, nt, yt);
        rep.rows.push_back(row);
    }
    if (cfg.registers > 0) {
        auto pr = fit_ridge(f_in.reg_feats.data(), nf, d, d, y);
        auto br = fit_ridge(f_base.reg_feats.data(), nf, d, d, y);
        ProbeRow row;
        row.name = "registers";
        row.mae_in = mae(pr, f_in.reg_feats.data() + nf * d, nt, d, d, yt);
        row.mae_ood = mae(pr, f_ood.reg_feats.data(), f_ood.n, d, d, f_ood.targets.data());
        row.baseline_mae = mae(br, f_base.reg_feats.data() + nf * d, nt, d, d, yt);
        rep.rows.push_back(row);
    }
    return rep;
}

void write_probe_csv(const ProbeReport& rep, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("write_probe_csv: cannot open " + path);
    os << "name,mae_in,mae_ood,baseline_mae\n";
    for (const auto& r : rep.rows)
        os << r.name << "," << r.mae_in << "," << r.mae_ood << "," << r.baseline_mae << "\n";
    if (!os) throw DataError("write_probe_csv: short write to " + path);
}

}  // namespace psvit::probe
