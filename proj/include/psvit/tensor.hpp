#pragma once

// Reverse-mode autodiff over dense row-major tensors. Define-by-run: each op
// computes its value eagerly and, when gradients are enabled and some input
// needs them, records a backward closure on the output node. backward() walks
// the recorded graph in reverse topological order and accumulates into .grad.
//
// Everything is templated on the scalar type; float is the working precision,
// double instantiations exist for finite-difference shadow checks.

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "psvit/errors.hpp"
#include "psvit/kernels.hpp"
#include "psvit/rng.hpp"

namespace psvit {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

template <class T>
struct NodeT {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // lazily allocated, same length as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<NodeT>> parents;
    std::function<void()> backward;

    std::int64_t numel() const { return std::int64_t(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

// Scoped gradient kill switch: while alive, new ops record nothing.
inline bool& grad_enabled_flag() {
    thread_local bool on = true;
    return on;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled_flag()) { grad_enabled_flag() = false; }
    ~NoGradGuard() { grad_enabled_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
};

template <class T>
class TensorT {
  public:
    TensorT() = default;
    explicit TensorT(std::shared_ptr<NodeT<T>> n) : n_(std::move(n)) {}

    static TensorT zeros(Shape s, bool requires_grad = false) {
        auto n = std::make_shared<NodeT<T>>();
        n->shape = std::move(s);
        n->value.assign(shape_numel(n->shape), T(0));
        n->requires_grad = requires_grad && grad_enabled_flag();
        return TensorT(std::move(n));
    }

    static TensorT full(Shape s, T v, bool requires_grad = false) {
        auto t = zeros(std::move(s), requires_grad);
        for (auto& x : t.values()) x = v;
        return t;
    }

    static TensorT from(Shape s, std::vector<T> data, bool requires_grad = false) {
        if (std::int64_t(data.size()) != shape_numel(s))
            throw ShapeError("tensor from: " + std::to_string(data.size()) +
                             " values for shape " + shape_str(s));
        auto n = std::make_shared<NodeT<T>>();
        n->shape = std::move(s);
        n->value = std::move(data);
        n->requires_grad = requires_grad && grad_enabled_flag();
        return TensorT(std::move(n));
    }

    static TensorT randn(Shape s, Rng& rng, T std_dev, bool requires_grad = false) {
        auto t = zeros(std::move(s), requires_grad);
        for (auto& x : t.values()) x = T(rng.normal()) * std_dev;
        return t;
    }

    bool defined() const { return bool(n_); }
    const Shape& shape() const { return n_->shape; }
    std::int64_t dim(int i) const { return n_->shape[size_t(i)]; }
    int ndim() const { return int(n_->shape.size()); }
    std::int64_t numel() const { return n_->numel(); }
    std::vector<T>& values() { return n_->value; }
    const std::vector<T>& values() const { return n_->value; }
    std::vector<T>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    bool requires_grad() const { return n_->requires_grad; }
    T item() const {
        if (n_->numel() != 1) throw ShapeError("item: tensor has " + shape_str(n_->shape));
        return n_->value[0];
    }
    std::shared_ptr<NodeT<T>> node() const { return n_; }

  private:
    std::shared_ptr<NodeT<T>> n_;
};

namespace detail {

template <class T>
TensorT<T> make_out(Shape s) {
    return TensorT<T>::zeros(std::move(s), false);
}

template <class T, class... Parents>
bool track(TensorT<T>& out, const Parents&... ps) {
    bool need = grad_enabled_flag() && (ps.node()->requires_grad || ...);
    if (need) {
        out.node()->requires_grad = true;
        (out.node()->parents.push_back(ps.node()), ...);
    }
    return need;
}

template <class T>
void require_same_shape(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ------------------------------------------------------------ elementwise ----

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape("add", a, b);
    auto out = detail::make_out<T>(a.shape());
    const auto &av = a.values(), &bv = b.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (detail::track(out, a, b)) {
        auto an = a.node().get();
        auto bn = b.node().get();
        auto on = out.node().get();
        out.node()->backward = [an, bn, on] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
            }
        };
    }
    return out;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape("sub", a, b);
    auto out = detail::make_out<T>(a.shape());
    const auto &av = a.values(), &bv = b.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (detail::track(out, a, b)) {
        auto an = a.node().get();
        auto bn = b.node().get();
        auto on = out.node().get();
        out.node()->backward = [an, bn, on] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
            }
        };
    }
    return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape("mul", a, b);
    auto out = detail::make_out<T>(a.shape());
    const auto &av = a.values(), &bv = b.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (detail::track(out, a, b)) {
        auto an = a.node().get();
        auto bn = b.node().get();
        auto on = out.node().get();
        out.node()->backward = [an, bn, on] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i)
                    an->grad[i] += on->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i)
                    bn->grad[i] += on->grad[i] * an->value[i];
            }
        };
    }
    return out;
}

template <class T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape("div", a, b);
    auto out = detail::make_out<T>(a.shape());
    const auto &av = a.values(), &bv = b.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
    if (detail::track(out, a, b)) {
        auto an = a.node().get();
        auto bn = b.node().get();
        auto on = out.node().get();
        out.node()->backward = [an, bn, on] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i)
                    an->grad[i] += on->grad[i] / bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i)
                    bn->grad[i] -= on->grad[i] * on->value[i] / bn->value[i];
            }
        };
    }
    return out;
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, T c) {
    auto out = detail::make_out<T>(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
    if (detail::track(out, a)) {
        auto an = a.node().get();
        auto on = out.node().get();
        out.node()->backward = [an, on, c] {
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
        };
    }
    return out;
}

template <class T>
TensorT<T> add_scalar(const TensorT<T>& a, T c) {
    auto out = detail::make_out<T>(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
    if (detail::track(out, a)) {
        auto an = a.node().get();
        auto on = out.node().get();
        out.node()->backward = [an, on] {
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        };
    }
    return out;
}

// tanh-approximate gelu
template <class T>
TensorT<T> gelu(const TensorT<T>& a) {
    auto out = detail::make_out<T>(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    const T c0 = T(0.7978845608028654);  // sqrt(2/pi)
    const T c1 = T(0.044715);
    for (size_t i = 0; i < ov.size(); ++i) {
        T x = av[i];
        T u = c0 * (x + c1 * x * x * x);
        ov[i] = T(0.5) * x * (T(1) + std::tanh(u));
    }
    if (detail::track(out, a)) {
        auto an = a.node().get();
        auto on = out.node().get();
        out.node()->backward = [an, on, c0, c1] {
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) {
                T x = an->value[i];
                T u = c0 * (x + c1 * x * x * x);
                T t = std::tanh(u);
                T du = c0 * (T(1) + T(3) * c1 * x * x);
                T d = T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
                an->grad[i] += on->grad[i] * d;
            }
        };
    }
    return out;
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& a) {
    auto out = detail::make_out<T>(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = T(1) / (T(1) + std::exp(-av[i]));
    if (detail::track(out, a)) {
        auto an = a.node().get();
        auto on = out.node().get();
        out.node()->backward = [an, on] {
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) {
                T s = on->value[i];
                an->grad[i] += on->grad[i] * s * (T(1) - s);
            }
        };
    }
    return out;
}

// ------------------------------------------------------------- reductions ----

template <class T>
TensorT<T> sum_all(const TensorT<T>& a) {
    auto out = detail::make_out<T>(Shape{1});
    T s = 0;
    for (T x : a.values()) s += x;
    out.values()[0] = s;
    if (detail::track(out, a)) {
        auto an = a.node().get();
        auto on = out.node().get();
        out.node()->backward = [an, on] {
            an->ensure_grad();
            T g = on->grad[0];
            for (auto& x : an->grad) x += g;
        };
    }
    return out;
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& a) {
    return scale(sum_all(a), T(1) / T(a.numel()));
}

// ----------------------------------------------------------------- matmul ----

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = detail::make_out<T>({m, n});
    kernels::matmul_nn(m, k, n, a.values().data(), b.values().data(), out.values().data());
    if (detail::track(out, a, b)) {
        auto an = a.node().get();
        auto bn = b.node().get();
        auto on = out.node().get();
        out.node()->backward = [an, bn, on, m, k, n] {
            if (an->requires_grad) {
                an->ensure_grad();
                // dA += dC * B^T
                kernels::matmul_nt(m, n, k, on->grad.data(), bn->value.data(), an->grad.data());
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                // dB += A^T * dC
                kernels::matmul_tn(m, k, n, an->value.data(), on->grad.data(), bn->grad.data());
            }
        };
    }
    return out;
}

// x [R,C] + bias [C] broadcast over rows
template <class T>
TensorT<T> add_row_bias(const TensorT<T>& x, const TensorT<T>& bias) {
    if (x.ndim() != 2 || bias.ndim() != 1 || x.dim(1) != bias.dim(0))
        throw ShapeError("add_row_bias: " + shape_str(x.shape()) + " + " +
                         shape_str(bias.shape()));
    std::int64_t r = x.dim(0), c = x.dim(1);
    auto out = detail::make_out<T>(x.shape());
    const auto &xv = x.values(), &bv = bias.values();
    auto& ov = out.values();
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) ov[i * c + j] = xv[i * c + j] + bv[j];
    if (detail::track(out, x, bias)) {
        auto xn = x.node().get();
        auto bn = bias.node().get();
        auto on = out.node().get();
        out.node()->backward = [xn, bn, on, r, c] {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t i = 0; i < r; ++i)
                    for (std::int64_t j = 0; j < c; ++j) bn->grad[j] += on->grad[i * c + j];
            }
        };
    }
    return out;
}

// x [R,C] with out[i] = x[i] + table[map[i]]; positional-table add.
template <class T>
TensorT<T> add_gather_rows(const TensorT<T>& x, const TensorT<T>& table,
                           std::vector<std::int64_t> map) {
    if (x.ndim() != 2 || table.ndim() != 2 || x.dim(1) != table.dim(1))
        throw ShapeError("add_gather_rows: " + shape_str(x.shape()) + " + " +
                         shape_str(table.shape()));
    if (std::int64_t(map.size()) != x.dim(0))
        throw ShapeError("add_gather_rows: map size " + std::to_string(map.size()) + " vs rows " +
                         std::to_string(x.dim(0)));
    std::int64_t r = x.dim(0), c = x.dim(1), nrows = table.dim(0);
    for (auto t : map)
        if (t < 0 || t >= nrows) throw ValueError("add_gather_rows: map index out of range");
    auto out = detail::make_out<T>(x.shape());
    const auto &xv = x.values(), &tv = table.values();
    auto& ov = out.values();
    for (std::int64_t i = 0; i < r; ++i) {
        const T* trow = tv.data() + map[size_t(i)] * c;
        for (std::int64_t j = 0; j < c; ++j) ov[i * c + j] = xv[i * c + j] + trow[j];
    }
    if (detail::track(out, x, table)) {
        auto xn = x.node().get();
        auto tn = table.node().get();
        auto on = out.node().get();
        out.node()->backward = [xn, tn, on, r, c, map = std::move(map)] {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
            }
            if (tn->requires_grad) {
                tn->ensure_grad();
                for (std::int64_t i = 0; i < r; ++i) {
                    T* trow = tn->grad.data() + map[size_t(i)] * c;
                    for (std::int64_t j = 0; j < c; ++j) trow[j] += on->grad[i * c + j];
                }
            }
        };
    }
    return out;
}

// out[i] = x[idx[i]]; idx -1 selects a zero row (padding).
template <class T>
TensorT<T> gather_rows(const TensorT<T>& x, std::vector<std::int64_t> idx) {
    if (x.ndim() != 2) throw ShapeError("gather_rows: want 2d, got " + shape_str(x.shape()));
    std::int64_t c = x.dim(1), nrows = x.dim(0);
    for (auto t : idx)
        if (t < -1 || t >= nrows) throw ValueError("gather_rows: index out of range");
    auto out = detail::make_out<T>({std::int64_t(idx.size()), c});
    const auto& xv = x.values();
    auto& ov = out.values();
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0) continue;  // stays zero
        const T* src = xv.data() + idx[i] * c;
        T* dst = ov.data() + std::int64_t(i) * c;
        for (std::int64_t j = 0; j < c; ++j) dst[j] = src[j];
    }
    if (detail::track(out, x)) {
        auto xn = x.node().get();
        auto on = out.node().get();
        out.node()->backward = [xn, on, c, idx = std::move(idx)] {
            xn->ensure_grad();
            for (size_t i = 0; i < idx.size(); ++i) {
                if (idx[i] < 0) continue;
                T* dst = xn->grad.data() + idx[i] * c;
                const T* src = on->grad.data() + std::int64_t(i) * c;
                for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
            }
        };
    }
    return out;
}

// -------------------------------------------------------------- reshaping ----

template <class T>
TensorT<T> reshape(const TensorT<T>& x, Shape s) {
    if (shape_numel(s) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(s));
    auto out = detail::make_out<T>(std::move(s));
    out.values() = x.values();
    if (detail::track(out, x)) {
        auto xn = x.node().get();
        auto on = out.node().get();
        out.node()->backward = [xn, on] {
            xn->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
        };
    }
    return out;
}

inline std::vector<std::int64_t> row_major_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size());
    std::int64_t acc = 1;
    for (size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

template <class T>
TensorT<T> permute(const TensorT<T>& x, std::vector<int> axes) {
    if (int(axes.size()) != x.ndim())
        throw ShapeError("permute: axes rank " + std::to_string(axes.size()) + " vs tensor " +
                         shape_str(x.shape()));
    std::vector<bool> used(axes.size(), false);
    Shape os(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) {
        int a = axes[i];
        if (a < 0 || a >= int(axes.size()) || used[size_t(a)])
            throw ValueError("permute: bad axes");
        used[size_t(a)] = true;
        os[i] = x.shape()[size_t(a)];
    }
    auto out = detail::make_out<T>(os);
    auto in_strides = row_major_strides(x.shape());
    // stride in input units for each output axis
    std::vector<std::int64_t> map_strides(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) map_strides[i] = in_strides[size_t(axes[i])];
    const auto& xv = x.values();
    auto& ov = out.values();
    std::int64_t n = out.numel();
    int nd = int(os.size());
    std::vector<std::int64_t> coord(os.size(), 0);
    std::int64_t src = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        ov[i] = xv[src];
        for (int a = nd - 1; a >= 0; --a) {
            coord[size_t(a)]++;
            src += map_strides[size_t(a)];
            if (coord[size_t(a)] < os[size_t(a)]) break;
            src -= map_strides[size_t(a)] * os[size_t(a)];
            coord[size_t(a)] = 0;
        }
    }
    if (detail::track(out, x)) {
        auto xn = x.node().get();
        auto on = out.node().get();
        out.node()->backward = [xn, on, os, map_strides] {
            xn->ensure_grad();
            std::int64_t n2 = on->numel();
            int nd2 = int(os.size());
            std::vector<std::int64_t> c2(os.size(), 0);
            std::int64_t dst = 0;
            for (std::int64_t i = 0; i < n2; ++i) {
                xn->grad[dst] += on->grad[i];
                for (int a = nd2 - 1; a >= 0; --a) {
                    c2[size_t(a)]++;
                    dst += map_strides[size_t(a)];
                    if (c2[size_t(a)] < os[size_t(a)]) break;
                    dst -= map_strides[size_t(a)] * os[size_t(a)];
                    c2[size_t(a)] = 0;
                }
            }
        };
    }
    return out;
}

template <class T>
TensorT<T> slice(const TensorT<T>& x, int axis, std::int64_t start, std::int64_t len) {
    if (axis < 0 || axis >= x.ndim()) throw ValueError("slice: bad axis");
    std::int64_t asize = x.shape()[size_t(axis)];
    if (start < 0 || len < 0 || start + len > asize)
        throw ShapeError("slice: [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of axis size " + std::to_string(asize));
    Shape os = x.shape();
    os[size_t(axis)] = len;
    auto out = detail::make_out<T>(os);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape()[size_t(i)];
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.shape()[size_t(i)];
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::int64_t o = 0; o < outer; ++o) {
        const T* src = xv.data() + (o * asize + start) * inner;
        T* dst = ov.data() + o * len * inner;
        for (std::int64_t i = 0; i < len * inner; ++i) dst[i] = src[i];
    }
    if (detail::track(out, x)) {
        auto xn = x.node().get();
        auto on = out.node().get();
        out.node()->backward = [xn, on, outer, inner, asize, start, len] {
            xn->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o) {
                T* dst = xn->grad.data() + (o * asize + start) * inner;
                const T* src = on->grad.data() + o * len * inner;
                for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        };
    }
    return out;
}

template <class T>
TensorT<T> concat(const TensorT<T>& a, const TensorT<T>& b, int axis) {
    if (a.ndim() != b.ndim() || axis < 0 || axis >= a.ndim())
        throw ShapeError("concat: rank mismatch or bad axis");
    for (int i = 0; i < a.ndim(); ++i)
        if (i != axis && a.shape()[size_t(i)] != b.shape()[size_t(i)])
            throw ShapeError("concat: " + shape_str(a.shape()) + " | " + shape_str(b.shape()) +
                             " on axis " + std::to_string(axis));
    std::int64_t la = a.shape()[size_t(axis)], lb = b.shape()[size_t(axis)];
    Shape os = a.shape();
    os[size_t(axis)] = la + lb;
    auto out = detail::make_out<T>(os);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.shape()[size_t(i)];
    for (int i = axis + 1; i < a.ndim(); ++i) inner *= a.shape()[size_t(i)];
    const auto& avv = a.values();
    const auto& bvv = b.values();
    auto& ov = out.values();
    for (std::int64_t o = 0; o < outer; ++o) {
        T* dst = ov.data() + o * (la + lb) * inner;
        const T* sa = avv.data() + o * la * inner;
        const T* sb = bvv.data() + o * lb * inner;
        for (std::int64_t i = 0; i < la * inner; ++i) dst[i] = sa[i];
        for (std::int64_t i = 0; i < lb * inner; ++i) dst[la * inner + i] = sb[i];
    }
    if (detail::track(out, a, b)) {
        auto an = a.node().get();
        auto bn = b.node().get();
        auto on = out.node().get();
        out.node()->backward = [an, bn, on, outer, inner, la, lb] {
            for (std::int64_t o = 0; o < outer; ++o) {
                const T* src = on->grad.data() + o * (la + lb) * inner;
                if (an->requires_grad) {
                    an->ensure_grad();
                    T* da = an->grad.data() + o * la * inner;
                    for (std::int64_t i = 0; i < la * inner; ++i) da[i] += src[i];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    T* db = bn->grad.data() + o * lb * inner;
                    for (std::int64_t i = 0; i < lb * inner; ++i) db[i] += src[la * inner + i];
                }
            }
        };
    }
    return out;
}

// ------------------------------------------------------- softmax/layernorm ----

template <class T>
TensorT<T> softmax_lastdim(const TensorT<T>& x) {
    if (x.ndim() < 1) throw ShapeError("softmax: scalar input");
    std::int64_t n = x.shape().back();
    std::int64_t rows = x.numel() / n;
    auto out = detail::make_out<T>(x.shape());
    kernels::softmax_rows(rows, n, x.values().data(), out.values().data());
    if (detail::track(out, x)) {
        auto xn = x.node().get();
        auto on = out.node().get();
        out.node()->backward = [xn, on, rows, n] {
            xn->ensure_grad();
            kernels::softmax_bwd_rows(rows, n, on->value.data(), on->grad.data(),
                                      xn->grad.data());
        };
    }
    return out;
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes the last dimension, then applies per-feature gain and bias.
template <class T>
TensorT<T> layernorm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias,
                     T eps = T(kLayerNormEps)) {
    std::int64_t n = x.shape().back();
    if (gain.numel() != n || bias.numel() != n)
        throw ShapeError("layernorm: feature dim " + std::to_string(n) + " vs gain " +
                         shape_str(gain.shape()) + " bias " + shape_str(bias.shape()));
    std::int64_t rows = x.numel() / n;
    auto out = detail::make_out<T>(x.shape());
    auto mean = std::make_shared<std::vector<T>>(size_t(rows));
    auto istd = std::make_shared<std::vector<T>>(size_t(rows));
    kernels::layernorm_rows(rows, n, x.values().data(), gain.values().data(),
                            bias.values().data(), out.values().data(), mean->data(), istd->data(),
                            eps);
    if (detail::track(out, x, gain, bias)) {
        auto xn = x.node().get();
        auto gn = gain.node().get();
        auto bn = bias.node().get();
        auto on = out.node().get();
        out.node()->backward = [xn, gn, bn, on, rows, n, mean, istd] {
            if (xn->requires_grad) {
                xn->ensure_grad();
                kernels::layernorm_bwd_rows(rows, n, xn->value.data(), gn->value.data(),
                                            on->grad.data(), mean->data(), istd->data(),
                                            xn->grad.data());
            }
            if (gn->requires_grad || bn->requires_grad) {
                gn->ensure_grad();
                bn->ensure_grad();
                kernels::layernorm_bwd_affine(rows, n, xn->value.data(), on->grad.data(),
                                              mean->data(), istd->data(), gn->grad.data(),
                                              bn->grad.data());
            }
        };
    }
    return out;
}

// -------------------------------------------------------------- attention ----

template <class T>
struct AttnWeights {
    std::int64_t batch = 0, nq = 0, nk = 0;
    std::shared_ptr<std::vector<T>> w;  // batch*nq*nk, rows sum to 1 (or all-zero if fully masked)
};

// Fused masked scaled-dot-product attention.
// q: [B,nq,d], k,v: [B,nk,d]. mask, if given, holds groups*nq*nk bytes; batch b
// uses group b/repeat (so B == groups*repeat). Nonzero byte = attend. Masked
// pairs never enter the score/softmax loops, so their weights are exactly zero.
template <class T>
TensorT<T> attention(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                     std::shared_ptr<const std::vector<std::uint8_t>> mask, std::int64_t repeat,
                     T scale_factor, AttnWeights<T>* weights_out = nullptr) {
    if (q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3)
        throw ShapeError("attention: want 3d q/k/v");
    std::int64_t B = q.dim(0), nq = q.dim(1), d = q.dim(2);
    std::int64_t nk = k.dim(1);
    if (k.dim(0) != B || v.dim(0) != B || v.dim(1) != nk || k.dim(2) != d || v.dim(2) != d)
        throw ShapeError("attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) +
                         " v " + shape_str(v.shape()));
    const std::uint8_t* mp = nullptr;
    if (mask) {
        if (repeat <= 0 || B % repeat != 0)
            throw ValueError("attention: repeat must divide batch");
        std::int64_t groups = B / repeat;
        if (std::int64_t(mask->size()) != groups * nq * nk)
            throw ShapeError("attention: mask bytes " + std::to_string(mask->size()) +
                             " != groups*nq*nk = " + std::to_string(groups * nq * nk));
        mp = mask->data();
    } else {
        repeat = B > 0 ? B : 1;
    }
    auto out = detail::make_out<T>({B, nq, d});
    auto w = std::make_shared<std::vector<T>>(size_t(B * nq * nk));
    kernels::attn_forward(B, nq, nk, d, q.values().data(), k.values().data(), v.values().data(),
                          mp, repeat, scale_factor, w->data(), out.values().data());
    if (weights_out) *weights_out = AttnWeights<T>{B, nq, nk, w};
    if (detail::track(out, q, k, v)) {
        auto qn = q.node().get();
        auto kn = k.node().get();
        auto vn = v.node().get();
        auto on = out.node().get();
        out.node()->backward = [qn, kn, vn, on, w, mask, mp_repeat = repeat, B, nq, nk, d,
                                scale_factor] {
            qn->ensure_grad();
            kn->ensure_grad();
            vn->ensure_grad();
            std::vector<T> ds(size_t(B * nq * nk));
            kernels::attn_backward(B, nq, nk, d, qn->value.data(), kn->value.data(),
                                   vn->value.data(), w->data(), mask ? mask->data() : nullptr,
                                   mp_repeat, scale_factor, on->grad.data(), ds.data(),
                                   qn->grad.data(), kn->grad.data(), vn->grad.data());
        };
    }
    return out;
}

// ------------------------------------------------------------------- rope ----

// Rotary embedding on x [R,C]: for each row, consecutive pairs inside
// [dim_begin, dim_end) are rotated by pos[row] * base^(-2i/span). Rows with
// position 0 are untouched (identity rotation).
template <class T>
TensorT<T> rope_rows(const TensorT<T>& x, const std::vector<std::int32_t>& positions,
                     int dim_begin, int dim_end, double base = 10000.0) {
    if (x.ndim() != 2) throw ShapeError("rope_rows: want 2d, got " + shape_str(x.shape()));
    std::int64_t r = x.dim(0), c = x.dim(1);
    if (std::int64_t(positions.size()) != r) throw ShapeError("rope_rows: positions size");
    if (dim_begin < 0 || dim_end > c || (dim_end - dim_begin) % 2 != 0 || dim_begin > dim_end)
        throw ValueError("rope_rows: bad rotary span");
    std::int64_t half = (dim_end - dim_begin) / 2;
    auto out = detail::make_out<T>(x.shape());
    out.values() = x.values();
    auto cs = std::make_shared<std::vector<T>>(size_t(r * half));
    auto sn = std::make_shared<std::vector<T>>(size_t(r * half));
    double span = double(dim_end - dim_begin);
    auto& ov = out.values();
    for (std::int64_t i = 0; i < r; ++i) {
        double pos = double(positions[size_t(i)]);
        for (std::int64_t p = 0; p < half; ++p) {
            double ang = pos * std::pow(base, -2.0 * double(p) / span);
            T cv = T(std::cos(ang)), sv = T(std::sin(ang));
            (*cs)[size_t(i * half + p)] = cv;
            (*sn)[size_t(i * half + p)] = sv;
            std::int64_t j = i * c + dim_begin + 2 * p;
            T a = ov[size_t(j)], b = ov[size_t(j + 1)];
            ov[size_t(j)] = a * cv - b * sv;
            ov[size_t(j + 1)] = a * sv + b * cv;
        }
    }
    if (detail::track(out, x)) {
        auto xn = x.node().get();
        auto on = out.node().get();
        out.node()->backward = [xn, on, cs, sn, r, c, half, dim_begin] {
            xn->ensure_grad();
            for (std::int64_t i = 0; i < r; ++i) {
                std::int64_t j0 = i * c;
                for (std::int64_t j = 0; j < c; ++j)
                    if (j < dim_begin || j >= dim_begin + 2 * half)
                        xn->grad[size_t(j0 + j)] += on->grad[size_t(j0 + j)];
                for (std::int64_t p = 0; p < half; ++p) {
                    T cv = (*cs)[size_t(i * half + p)], sv = (*sn)[size_t(i * half + p)];
                    std::int64_t j = j0 + dim_begin + 2 * p;
                    T da = on->grad[size_t(j)], db = on->grad[size_t(j + 1)];
                    xn->grad[size_t(j)] += da * cv + db * sv;
                    xn->grad[size_t(j + 1)] += -da * sv + db * cv;
                }
            }
        };
    }
    return out;
}

// ------------------------------------------------------------------ conv ----

// Valid 1-d correlation along the last axis of a 2-d tensor with a fixed
// (non-learned) kernel. Used for separable Gaussian filtering.
template <class T>
TensorT<T> conv1d_rows(const TensorT<T>& x, std::vector<T> kern) {
    if (x.ndim() != 2) throw ShapeError("conv1d_rows: want 2d, got " + shape_str(x.shape()));
    std::int64_t rows = x.dim(0), w = x.dim(1), kw = std::int64_t(kern.size());
    if (kw < 1 || kw > w) throw ShapeError("conv1d_rows: kernel " + std::to_string(kw) +
                                           " vs width " + std::to_string(w));
    auto out = detail::make_out<T>({rows, w - kw + 1});
    kernels::conv1d_rows(rows, w, kw, x.values().data(), kern.data(), out.values().data());
    if (detail::track(out, x)) {
        auto xn = x.node().get();
        auto on = out.node().get();
        out.node()->backward = [xn, on, rows, w, kw, kern = std::move(kern)] {
            xn->ensure_grad();
            kernels::conv1d_bwd_rows(rows, w, kw, on->grad.data(), kern.data(), xn->grad.data());
        };
    }
    return out;
}

// --------------------------------------------------------------- backward ----

template <class T>
void backward(const TensorT<T>& loss) {
    if (loss.numel() != 1)
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;
    // post-order DFS; leaves land first, loss last
    std::vector<NodeT<T>*> order;
    std::unordered_set<NodeT<T>*> seen;
    std::vector<std::pair<NodeT<T>*, size_t>> stack;
    seen.insert(loss.node().get());
    stack.push_back({loss.node().get(), 0});
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            NodeT<T>* p = n->parents[i++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    for (size_t i = order.size(); i-- > 0;) {
        if (order[i]->backward) order[i]->backward();
    }
}

using Tensor = TensorT<float>;

}  // namespace psvit
