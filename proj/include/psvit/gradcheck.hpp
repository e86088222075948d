#pragma once

// Finite-difference shadow checking. The scalar function under test is a
// builder callable, generic over precision: reverse-mode gradients are taken
// at Rev precision (float by default, the training dtype), the reference
// gradient always via central differences in double. The comparison uses a
// relative error with an absolute floor so near-zero reference gradients
// (e.g. d sum(softmax)/dx) don't blow up the ratio.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "psvit/tensor.hpp"

namespace psvit {

struct GradCheckReport {
    bool ok = false;
    double max_rel_err = 0;
    double tol = 0;
    size_t worst_input = 0;
    std::int64_t worst_coord = 0;
    double ad = 0, fd = 0;    // gradients at the worst coordinate
    double fd_inf_norm = 0;   // max |fd| over all coordinates
    std::int64_t coords = 0;  // total coordinates checked

    std::string str() const {
        std::ostringstream os;
        os << (ok ? "ok" : "FAIL") << " max_rel_err=" << max_rel_err << " (tol " << tol
           << ") at input " << worst_input << " coord " << worst_coord << ": ad=" << ad
           << " fd=" << fd << " over " << coords << " coords, |fd|_inf=" << fd_inf_norm;
        return os.str();
    }
};

template <class To, class From>
TensorT<To> cast_tensor(const TensorT<From>& x, bool requires_grad) {
    std::vector<To> v(x.values().begin(), x.values().end());
    return TensorT<To>::from(x.shape(), std::move(v), requires_grad);
}

// build(xs) -> scalar tensor, where xs is a vector of tensors of one scalar
// type. Must rebuild the graph from scratch on every call.
template <class Rev, class Builder>
GradCheckReport grad_check(Builder&& build, const std::vector<TensorT<double>>& inputs,
                           double tol, double h = 1e-3) {
    GradCheckReport rep;
    rep.tol = tol;

    // reverse-mode pass at Rev precision
    std::vector<TensorT<Rev>> xs;
    xs.reserve(inputs.size());
    for (const auto& in : inputs) xs.push_back(cast_tensor<Rev>(in, true));
    {
        TensorT<Rev> loss = build(xs);
        if (loss.numel() != 1) throw ShapeError("grad_check: builder must return a scalar");
        backward(loss);
    }
    std::vector<std::vector<double>> ad(inputs.size());
    for (size_t i = 0; i < xs.size(); ++i)
        ad[i].assign(xs[i].grad().begin(), xs[i].grad().end());

    // central differences in double
    std::vector<std::vector<double>> base(inputs.size());
    for (size_t i = 0; i < inputs.size(); ++i) base[i] = inputs[i].values();

    auto eval = [&](const std::vector<std::vector<double>>& pts) -> double {
        NoGradGuard ng;
        std::vector<TensorT<double>> ys;
        ys.reserve(pts.size());
        for (size_t i = 0; i < pts.size(); ++i)
            ys.push_back(TensorT<double>::from(inputs[i].shape(), pts[i], false));
        return build(ys).item();
    };

    std::vector<std::vector<double>> fd(inputs.size());
    auto pts = base;
    for (size_t i = 0; i < inputs.size(); ++i) {
        fd[i].resize(base[i].size());
        for (size_t j = 0; j < base[i].size(); ++j) {
            pts[i][j] = base[i][j] + h;
            double fp = eval(pts);
            pts[i][j] = base[i][j] - h;
            double fm = eval(pts);
            pts[i][j] = base[i][j];
            fd[i][j] = (fp - fm) / (2 * h);
            rep.coords++;
            double a = std::fabs(fd[i][j]);
            if (a > rep.fd_inf_norm) rep.fd_inf_norm = a;
        }
    }

    double denom = rep.fd_inf_norm > 1.0 ? rep.fd_inf_norm : 1.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        for (size_t j = 0; j < fd[i].size(); ++j) {
            double err = std::fabs(ad[i][j] - fd[i][j]) / denom;
            if (err > rep.max_rel_err) {
                rep.max_rel_err = err;
                rep.worst_input = i;
                rep.worst_coord = std::int64_t(j);
                rep.ad = ad[i][j];
                rep.fd = fd[i][j];
            }
        }
    }
    rep.ok = rep.max_rel_err <= tol;
    return rep;
}

}  // namespace psvit
