#pragma once

// template bodies for model.hpp

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "psvit/errors.hpp"

namespace psvit::model {

template <class T>
TensorT<T> patchify(const TensorT<T>& frames, std::int64_t patch) {
    if (frames.ndim() != 4)
        throw ShapeError("patchify: want [T,C,H,W], got " + shape_str(frames.shape()));
    std::int64_t t = frames.dim(0), c = frames.dim(1), h = frames.dim(2), w = frames.dim(3);
    if (patch < 1 || h % patch != 0 || w % patch != 0)
        throw ValueError("patchify: frame size not divisible by patch " + std::to_string(patch));
    std::int64_t gy = h / patch, gx = w / patch;
    auto x = reshape(frames, {t, c, gy, patch, gx, patch});
    x = permute(x, {0, 2, 4, 1, 3, 5});
    return reshape(x, {t * gy * gx, c * patch * patch});
}

template <class T>
TensorT<T> unpatchify(const TensorT<T>& tokens, std::int64_t channels, std::int64_t image,
                      std::int64_t patch) {
    std::int64_t g = image / patch, s = g * g;
    if (tokens.ndim() != 2 || tokens.dim(0) % s != 0 ||
        tokens.dim(1) != channels * patch * patch)
        throw ShapeError("unpatchify: tokens " + shape_str(tokens.shape()));
    std::int64_t t = tokens.dim(0) / s;
    auto x = reshape(tokens, {t, g, g, channels, patch, patch});
    x = permute(x, {0, 3, 1, 4, 2, 5});
    return reshape(x, {t, channels, image, image});
}

template <class T>
ParamStoreT<T> init_params(const ModelConfig& cfg, Rng& rng) {
    ParamStoreT<T> ps;
    for (auto& [name, shape] : param_shapes(cfg)) {
        std::string leaf = name.substr(name.rfind('.') + 1);
        if (leaf == "g")
            ps.add(name, TensorT<T>::full(shape, T(1), true));
        else if (!leaf.empty() && leaf[0] == 'b')
            ps.add(name, TensorT<T>::zeros(shape, true));
        else
            ps.add(name, TensorT<T>::randn(shape, rng, T(0.02), true));
    }
    return ps;
}

namespace detail {

template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
    return add_row_bias(matmul(x, w), b);
}

template <class T>
TensorT<T> ffn(const TensorT<T>& x, const ParamStoreT<T>& ps, const std::string& prefix) {
    auto h = gelu(linear(x, ps.at(prefix + ".w1"), ps.at(prefix + ".b1")));
    return linear(h, ps.at(prefix + ".w2"), ps.at(prefix + ".b2"));
}

template <class T>
TensorT<T> ln(const TensorT<T>& x, const ParamStoreT<T>& ps, const std::string& prefix) {
    return layernorm(x, ps.at(prefix + ".g"), ps.at(prefix + ".b"));
}

// geometry of one resolution level, for shuffling [T*(S+N), w] token matrices
// into attention batches
struct LayerGeom {
    std::int64_t t, g, n_reg, heads, head_dim;
    std::int64_t streams() const { return g * g + n_reg; }
    std::int64_t inner() const { return heads * head_dim; }
};

// [T*(S+N), inner] -> [T*h, S+N, dh]: one attention batch per (frame, head)
template <class T>
TensorT<T> to_spatial_heads(const TensorT<T>& x, const LayerGeom& gm) {
    auto y = reshape(x, {gm.t, gm.streams(), gm.heads, gm.head_dim});
    y = permute(y, {0, 2, 1, 3});
    return reshape(y, {gm.t * gm.heads, gm.streams(), gm.head_dim});
}

template <class T>
TensorT<T> from_spatial_heads(const TensorT<T>& x, const LayerGeom& gm) {
    auto y = reshape(x, {gm.t, gm.heads, gm.streams(), gm.head_dim});
    y = permute(y, {0, 2, 1, 3});
    return reshape(y, {gm.t * gm.streams(), gm.inner()});
}

// [T*(S+N), inner] -> [(S+N)*h, T, dh]: one batch per (stream, head)
template <class T>
TensorT<T> to_temporal_heads(const TensorT<T>& x, const LayerGeom& gm) {
    auto y = reshape(x, {gm.t, gm.streams(), gm.heads, gm.head_dim});
    y = permute(y, {1, 2, 0, 3});
    return reshape(y, {gm.streams() * gm.heads, gm.t, gm.head_dim});
}

template <class T>
TensorT<T> from_temporal_heads(const TensorT<T>& x, const LayerGeom& gm) {
    auto y = reshape(x, {gm.streams(), gm.heads, gm.t, gm.head_dim});
    y = permute(y, {2, 0, 1, 3});
    return reshape(y, {gm.t * gm.streams(), gm.inner()});
}

// keys/values for neighborhood temporal attention: each stream's batch holds
// the full time series of its 9 spatial neighbors, [(S+N)*h, 9T, dh]
template <class T>
TensorT<T> gather_streams(const TensorT<T>& x, const std::vector<std::int64_t>& idx,
                          const LayerGeom& gm) {
    auto y = reshape(x, {gm.t, gm.streams(), gm.inner()});
    y = permute(y, {1, 0, 2});
    y = reshape(y, {gm.streams(), gm.t * gm.inner()});
    y = gather_rows(y, idx);
    y = reshape(y, {gm.streams(), 9, gm.t, gm.heads, gm.head_dim});
    y = permute(y, {0, 3, 1, 2, 4});
    return reshape(y, {gm.streams() * gm.heads, 9 * gm.t, gm.head_dim});
}

// rotary encoding over per-head rows: first half of head_dim keyed by grid
// row, second half by grid col (1-based so registers can sit at 0, unrotated)
template <class T>
TensorT<T> rope_spatial(const TensorT<T>& x, const LayerGeom& gm) {
    std::int64_t rows = gm.t * gm.streams() * gm.heads, s = gm.g * gm.g;
    std::vector<std::int32_t> py(static_cast<size_t>(rows)), px(static_cast<size_t>(rows));
    std::int64_t i = 0;
    for (std::int64_t t = 0; t < gm.t; ++t)
        for (std::int64_t p = 0; p < gm.streams(); ++p)
            for (std::int64_t h = 0; h < gm.heads; ++h, ++i) {
                py[size_t(i)] = p < s ? std::int32_t(p / gm.g + 1) : 0;
                px[size_t(i)] = p < s ? std::int32_t(p % gm.g + 1) : 0;
            }
    auto y = reshape(x, {rows, gm.head_dim});
    y = rope_rows(y, py, 0, int(gm.head_dim / 2));
    y = rope_rows(y, px, int(gm.head_dim / 2), int(gm.head_dim));
    return reshape(y, {gm.t * gm.streams(), gm.inner()});
}

template <class T>
TensorT<T> rope_temporal(const TensorT<T>& x, const LayerGeom& gm) {
    std::int64_t rows = gm.t * gm.streams() * gm.heads;
    std::vector<std::int32_t> pt(static_cast<size_t>(rows));
    std::int64_t i = 0;
    for (std::int64_t t = 0; t < gm.t; ++t)
        for (std::int64_t p = 0; p < gm.streams(); ++p)
            for (std::int64_t h = 0; h < gm.heads; ++h, ++i) pt[size_t(i)] = std::int32_t(t);
    auto y = rope_rows(reshape(x, {rows, gm.head_dim}), pt, 0, int(gm.head_dim));
    return reshape(y, {gm.t * gm.streams(), gm.inner()});
}

template <class T>
TensorT<T> spatial_attn(const TensorT<T>& x, const ParamStoreT<T>& ps, const std::string& prefix,
                        const LayerGeom& gm, bool local, PosEnc pos, AttnWeights<T>* wout) {
    std::int64_t inner = gm.inner();
    auto qkv = linear(x, ps.at(prefix + ".qkv.w"), ps.at(prefix + ".qkv.b"));
    auto q = slice(qkv, 1, 0, inner);
    auto k = slice(qkv, 1, inner, inner);
    auto v = slice(qkv, 1, 2 * inner, inner);
    if (pos == PosEnc::ROPE) {
        q = rope_spatial(q, gm);
        k = rope_spatial(k, gm);
    }
    std::shared_ptr<const std::vector<std::uint8_t>> mask;
    if (local) mask = local_spatial_mask(gm.g, gm.n_reg);
    T scl = T(1) / T(std::sqrt(double(gm.head_dim)));
    auto o = attention(to_spatial_heads(q, gm), to_spatial_heads(k, gm), to_spatial_heads(v, gm),
                       mask, gm.t * gm.heads, scl, wout);
    return linear(from_spatial_heads(o, gm), ps.at(prefix + ".out.w"), ps.at(prefix + ".out.b"));
}

template <class T>
TensorT<T> temporal_attn(const TensorT<T>& x, const ParamStoreT<T>& ps, const std::string& prefix,
                         const LayerGeom& gm, bool local, PosEnc pos) {
    std::int64_t inner = gm.inner();
    auto qkv = linear(x, ps.at(prefix + ".qkv.w"), ps.at(prefix + ".qkv.b"));
    auto q = slice(qkv, 1, 0, inner);
    auto k = slice(qkv, 1, inner, inner);
    auto v = slice(qkv, 1, 2 * inner, inner);
    if (pos == PosEnc::ROPE) {
        q = rope_temporal(q, gm);
        k = rope_temporal(k, gm);
    }
    T scl = T(1) / T(std::sqrt(double(gm.head_dim)));
    TensorT<T> o;
    if (local) {
        auto nt = neighbor_time_tables(gm.g, gm.n_reg, gm.t);
        o = attention(to_temporal_heads(q, gm), gather_streams(k, nt.idx, gm),
                      gather_streams(v, nt.idx, gm), nt.mask, gm.heads, scl);
    } else {
        o = attention(to_temporal_heads(q, gm), to_temporal_heads(k, gm),
                      to_temporal_heads(v, gm), causal_mask(gm.t), gm.streams() * gm.heads, scl);
    }
    return linear(from_temporal_heads(o, gm), ps.at(prefix + ".out.w"), ps.at(prefix + ".out.b"));
}

// spatial attn -> FFN -> temporal attn -> FFN, each a pre-norm residual
template <class T>
TensorT<T> st_layer(TensorT<T> x, const ModelConfig& cfg, const ParamStoreT<T>& ps,
                    const std::string& block, const LayerGeom& gm, bool local_spatial,
                    bool local_temporal, ForwardCapture<T>* cap, bool record_spatial) {
    AttnWeights<T> w;
    AttnWeights<T>* wout =
        (cap && record_spatial && cap->want_global_spatial_attn) ? &w : nullptr;
    x = add(x, spatial_attn(ln(x, ps, block + ".ln1"), ps, block + ".sattn", gm, local_spatial,
                            cfg.pos, wout));
    if (wout) cap->attn.push_back(AttnRecord<T>{block, "spatial", gm.g, gm.heads, w});
    x = add(x, ffn(ln(x, ps, block + ".ln2"), ps, block + ".mix"));
    x = add(x, temporal_attn(ln(x, ps, block + ".ln3"), ps, block + ".tattn", gm, local_temporal,
                             cfg.pos));
    x = add(x, ffn(ln(x, ps, block + ".ln4"), ps, block + ".ffn"));
    return x;
}

// 2x2 patch merge into the next (wider, coarser) level; registers take a
// plain width adapter instead
template <class T>
TensorT<T> merge_level(const TensorT<T>& x, const ParamStoreT<T>& ps, std::int64_t l,
                       const ModelConfig& cfg, std::int64_t t) {
    std::int64_t g = cfg.grid_at(l), s = g * g, n = cfg.registers;
    std::int64_t w = cfg.width_at(l), wn = cfg.width_at(l + 1), g2 = g / 2;
    std::string tag = std::to_string(l);
    auto x3 = reshape(x, {t, s + n, w});
    auto p = reshape(slice(x3, 1, 0, s), {t, g2, 2, g2, 2, w});
    p = permute(p, {0, 1, 3, 2, 4, 5});
    p = reshape(p, {t * g2 * g2, 4 * w});
    p = linear(p, ps.at("merge" + tag + ".w"), ps.at("merge" + tag + ".b"));
    p = reshape(p, {t, g2 * g2, wn});
    if (n > 0) {
        auto r = reshape(slice(x3, 1, s, n), {t * n, w});
        r = linear(r, ps.at("reg_up" + tag + ".w"), ps.at("reg_up" + tag + ".b"));
        p = concat(p, reshape(r, {t, n, wn}), 1);
    }
    return reshape(p, {t * (g2 * g2 + n), wn});
}

template <class T>
TensorT<T> unmerge_level(const TensorT<T>& x, const ParamStoreT<T>& ps, std::int64_t l,
                         const ModelConfig& cfg, std::int64_t t) {
    std::int64_t g = cfg.grid_at(l), s = g * g, n = cfg.registers;
    std::int64_t w = cfg.width_at(l), wn = cfg.width_at(l + 1), g2 = g / 2, s2 = g2 * g2;
    std::string tag = std::to_string(l);
    auto x3 = reshape(x, {t, s2 + n, wn});
    auto p = reshape(slice(x3, 1, 0, s2), {t * s2, wn});
    p = linear(p, ps.at("unmerge" + tag + ".w"), ps.at("unmerge" + tag + ".b"));
    p = reshape(p, {t, g2, g2, 2, 2, w});
    p = permute(p, {0, 1, 3, 2, 4, 5});
    p = reshape(p, {t, s, w});
    if (n > 0) {
        auto r = reshape(slice(x3, 1, s2, n), {t * n, wn});
        r = linear(r, ps.at("reg_down" + tag + ".w"), ps.at("reg_down" + tag + ".b"));
        p = concat(p, reshape(r, {t, n, w}), 1);
    }
    return reshape(p, {t * (s + n), w});
}

// fixed sinusoid position table: quarter of the width keyed by grid row,
// quarter by grid col, half by time
template <class T>
TensorT<T> ape_table(const ModelConfig& cfg, std::int64_t t_frames) {
    std::int64_t g = cfg.grid(), s = g * g, w = cfg.width_at(0), q = w / 4;
    std::vector<T> v(size_t(t_frames * s * w));
    auto span = [](T* row, std::int64_t begin, std::int64_t m, double pos) {
        for (std::int64_t i = 0; i < m / 2; ++i) {
            double a = pos / std::pow(10000.0, double(2 * i) / double(m));
            row[begin + 2 * i] = T(std::sin(a));
            row[begin + 2 * i + 1] = T(std::cos(a));
        }
    };
    for (std::int64_t t = 0; t < t_frames; ++t)
        for (std::int64_t p = 0; p < s; ++p) {
            T* row = v.data() + (t * s + p) * w;
            span(row, 0, q, double(p / g));
            span(row, q, q, double(p % g));
            span(row, 2 * q, w - 2 * q, double(t));
        }
    return TensorT<T>::from({t_frames * s, w}, std::move(v));
}

}  // namespace detail

template <class T>
TensorT<T> forward(const ModelConfig& cfg, const ParamStoreT<T>& ps, const TensorT<T>& frames,
                   ForwardCapture<T>* cap) {
    cfg.validate();
    if (frames.ndim() != 4)
        throw ShapeError("forward: want [T,C,H,W], got " + shape_str(frames.shape()));
    std::int64_t t = frames.dim(0);
    if (t < 1 || t > cfg.t_max)
        throw ValueError("forward: " + std::to_string(t) + " frames vs t_max " +
                         std::to_string(cfg.t_max));
    if (frames.dim(1) != cfg.channels || frames.dim(2) != cfg.image ||
        frames.dim(3) != cfg.image)
        throw ShapeError("forward: frames " + shape_str(frames.shape()) + " don't match config");

    std::int64_t s0 = cfg.grid() * cfg.grid(), n_reg = cfg.registers, w0 = cfg.width_at(0);
    auto x = detail::linear(patchify(frames, cfg.patch), ps.at("embed.proj.w"),
                            ps.at("embed.proj.b"));
    if (cfg.pos == PosEnc::LPE) {
        std::vector<std::int64_t> ms(size_t(t * s0)), mt(size_t(t * s0));
        for (std::int64_t i = 0; i < t * s0; ++i) {
            ms[size_t(i)] = i % s0;
            mt[size_t(i)] = i / s0;
        }
        x = add_gather_rows(x, ps.at("pos.space"), std::move(ms));
        x = add_gather_rows(x, ps.at("pos.time"), std::move(mt));
    } else if (cfg.pos == PosEnc::APE) {
        x = add(x, detail::ape_table<T>(cfg, t));
    }
    if (n_reg > 0) {
        std::vector<std::int64_t> ri(size_t(t * n_reg));
        for (std::int64_t i = 0; i < t * n_reg; ++i) ri[size_t(i)] = i % n_reg;
        auto regs = gather_rows(ps.at("registers.tokens"), std::move(ri));
        x = concat(reshape(x, {t, s0, w0}), reshape(regs, {t, n_reg, w0}), 1);
        x = reshape(x, {t * (s0 + n_reg), w0});
    }

    std::vector<TensorT<T>> skips;
    for (std::int64_t l = 0; l < cfg.local_blocks; ++l) {
        detail::LayerGeom gm{t, cfg.grid_at(l), n_reg, cfg.heads_at(l), cfg.head_dim};
        x = detail::st_layer(x, cfg, ps, "enc" + std::to_string(l), gm, true, true, cap, false);
        skips.push_back(x);
        x = detail::merge_level(x, ps, l, cfg, t);
    }

    bool global_space = cfg.scheme != AttnScheme::LS_LT;
    bool neighbor_time = cfg.scheme != AttnScheme::GS_T;
    detail::LayerGeom gmg{t, cfg.grid_at(cfg.local_blocks), n_reg, cfg.heads, cfg.head_dim};
    for (std::int64_t j = 0; j < cfg.layers; ++j) {
        x = detail::st_layer(x, cfg, ps, "glb" + std::to_string(j), gmg, !global_space,
                             neighbor_time, cap, true);
        if (cap && cap->want_global_tokens) cap->global_tokens.push_back(x);
    }

    for (std::int64_t l = cfg.local_blocks; l-- > 0;) {
        x = add(detail::unmerge_level(x, ps, l, cfg, t), skips[size_t(l)]);
        detail::LayerGeom gm{t, cfg.grid_at(l), n_reg, cfg.heads_at(l), cfg.head_dim};
        x = detail::st_layer(x, cfg, ps, "dec" + std::to_string(l), gm, true, true, cap, false);
    }

    x = reshape(slice(reshape(x, {t, s0 + n_reg, w0}), 1, 0, s0), {t * s0, w0});
    x = layernorm(x, ps.at("head.ln.g"), ps.at("head.ln.b"));
    x = sigmoid(detail::linear(x, ps.at("head.proj.w"), ps.at("head.proj.b")));
    return unpatchify(x, cfg.channels, cfg.image, cfg.patch);
}

template <class T>
TensorT<T> rollout(const ModelConfig& cfg, const ParamStoreT<T>& ps, const TensorT<T>& context,
                   std::int64_t horizon) {
    cfg.validate();
    if (context.ndim() != 4 || context.dim(0) < 1)
        throw ShapeError("rollout: want a nonempty [T,C,H,W] context");
    if (horizon < 0) throw ValueError("rollout: negative horizon");
    NoGradGuard ng;
    std::int64_t c = context.dim(1), h = context.dim(2), w = context.dim(3);
    std::int64_t fe = c * h * w, wt = context.dim(0);
    std::vector<T> window(context.values());
    if (wt > cfg.t_max) {
        window.erase(window.begin(), window.begin() + (wt - cfg.t_max) * fe);
        wt = cfg.t_max;
    }
    std::vector<T> out;
    out.reserve(size_t(horizon * fe));
    for (std::int64_t step = 0; step < horizon; ++step) {
        auto pred = forward(cfg, ps, TensorT<T>::from({wt, c, h, w}, window));
        const T* last = pred.values().data() + (wt - 1) * fe;
        out.insert(out.end(), last, last + fe);
        window.insert(window.end(), last, last + fe);
        if (wt == cfg.t_max)
            window.erase(window.begin(), window.begin() + fe);
        else
            ++wt;
    }
    return TensorT<T>::from({horizon, c, h, w}, std::move(out));
}

}  // namespace psvit::model
