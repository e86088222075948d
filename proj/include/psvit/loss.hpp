#pragma once

// Differentiable training losses. SSIM follows the classic windowed form:
// 11x11 Gaussian (sigma 1.5), C1=(0.01)^2, C2=(0.03)^2, dynamic range 1,
// valid windows only (no padding), averaged over windows, channels, frames.

#include <cmath>
#include <string>
#include <vector>

#include "psvit/errors.hpp"
#include "psvit/model.hpp"
#include "psvit/tensor.hpp"

namespace psvit {

template <class T>
std::vector<T> gaussian_window(int n, double sigma) {
    std::vector<T> w(static_cast<size_t>(n));
    double c = (n - 1) / 2.0, sum = 0;
    for (int i = 0; i < n; ++i) {
        double v = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
        w[size_t(i)] = T(v);
        sum += v;
    }
    for (auto& v : w) v = T(double(v) / sum);
    return w;
}

namespace lossdetail {

// separable blur over the last two axes of [N,C,H,W], valid region only
template <class T>
TensorT<T> blur_hw(const TensorT<T>& x, const std::vector<T>& kern) {
    std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::int64_t k = std::int64_t(kern.size());
    auto y = reshape(x, {n * c * h, w});
    y = conv1d_rows(y, kern);
    std::int64_t w2 = w - k + 1;
    y = permute(reshape(y, {n, c, h, w2}), {0, 1, 3, 2});
    y = conv1d_rows(reshape(y, {n * c * w2, h}), kern);
    std::int64_t h2 = h - k + 1;
    return permute(reshape(y, {n, c, w2, h2}), {0, 1, 3, 2});
}

}  // namespace lossdetail

// mean SSIM between two [N,C,H,W] stacks (or [C,H,W] frames), in (-1, 1]
template <class T>
TensorT<T> ssim(const TensorT<T>& x, const TensorT<T>& y, int window = 11, double sigma = 1.5) {
    if (x.shape() != y.shape())
        throw ShapeError("ssim: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    if (x.ndim() == 3) {
        Shape s4 = {1, x.dim(0), x.dim(1), x.dim(2)};
        return ssim(reshape(x, s4), reshape(y, s4), window, sigma);
    }
    if (x.ndim() != 4) throw ShapeError("ssim: want [N,C,H,W], got " + shape_str(x.shape()));
    if (x.dim(2) < window || x.dim(3) < window)
        throw ShapeError("ssim: frame smaller than the " + std::to_string(window) + "px window");
    auto kern = gaussian_window<T>(window, sigma);
    const T c1 = T(0.01 * 0.01), c2 = T(0.03 * 0.03);

    auto mx = lossdetail::blur_hw(x, kern);
    auto my = lossdetail::blur_hw(y, kern);
    auto mxx = mul(mx, mx), myy = mul(my, my), mxy = mul(mx, my);
    auto vx = sub(lossdetail::blur_hw(mul(x, x), kern), mxx);
    auto vy = sub(lossdetail::blur_hw(mul(y, y), kern), myy);
    auto cxy = sub(lossdetail::blur_hw(mul(x, y), kern), mxy);

    auto num = mul(add_scalar(scale(mxy, T(2)), c1), add_scalar(scale(cxy, T(2)), c2));
    auto den = mul(add_scalar(add(mxx, myy), c1), add_scalar(add(vx, vy), c2));
    return mean_all(div(num, den));
}

enum class LossKind { SSIM, MSE };

inline std::string loss_name(LossKind k) { return k == LossKind::SSIM ? "ssim" : "mse"; }
inline LossKind loss_from(const std::string& s) {
    if (s == "ssim") return LossKind::SSIM;
    if (s == "mse") return LossKind::MSE;
    throw ValueError("unknown loss kind: " + s + " (want ssim or mse)");
}

template <class T>
TensorT<T> frame_loss(const TensorT<T>& pred, const TensorT<T>& target, LossKind kind) {
    if (kind == LossKind::SSIM) return add_scalar(scale(ssim(pred, target), T(-1)), T(1));
    auto d = sub(pred, target);
    return mean_all(mul(d, d));
}

// teacher forcing: feed frames 0..T-2, compare prediction row t against
// frame t+1. Gradients flow into the parameters only; `frames` is data.
template <class T>
TensorT<T> teacher_forced_loss(const model::ModelConfig& cfg, const ParamStoreT<T>& ps,
                               const TensorT<T>& frames, LossKind kind = LossKind::SSIM) {
    if (frames.ndim() != 4 || frames.dim(0) < 2)
        throw ShapeError("teacher_forced_loss: want at least 2 frames, got " +
                         shape_str(frames.shape()));
    std::int64_t t = frames.dim(0);
    auto inputs = slice(frames, 0, 0, t - 1);
    auto targets = slice(frames, 0, 1, t - 1);
    return frame_loss(model::forward(cfg, ps, inputs), targets, kind);
}

}  // namespace psvit
