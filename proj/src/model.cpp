#include "psvit/model.hpp"

#include <algorithm>
#include <cmath>

#include "psvit/errors.hpp"

namespace psvit::model {

std::string scheme_name(AttnScheme s) {
    switch (s) {
        case AttnScheme::LS_LT: return "ls+lt";
        case AttnScheme::GS_LT: return "gs+lt";
        default: return "gs+t";
    }
}

std::string pos_name(PosEnc p) {
    switch (p) {
        case PosEnc::APE: return "ape";
        case PosEnc::ROPE: return "rope";
        default: return "lpe";
    }
}

AttnScheme scheme_from(const std::string& s) {
    if (s == "ls+lt") return AttnScheme::LS_LT;
    if (s == "gs+lt") return AttnScheme::GS_LT;
    if (s == "gs+t") return AttnScheme::GS_T;
    throw ValueError("unknown attention scheme: " + s + " (want ls+lt, gs+lt or gs+t)");
}

PosEnc pos_from(const std::string& s) {
    if (s == "lpe") return PosEnc::LPE;
    if (s == "ape") return PosEnc::APE;
    if (s == "rope") return PosEnc::ROPE;
    throw ValueError("unknown positional encoding: " + s + " (want lpe, ape or rope)");
}

void ModelConfig::validate() const {
    if (image < 1 || patch < 1 || image % patch != 0)
        throw ValueError("model config: image must be a multiple of patch");
    std::int64_t g = grid();
    if (local_blocks < 0 || local_blocks > 6)
        throw ValueError("model config: local_blocks out of range");
    if (g % (std::int64_t(1) << local_blocks) != 0)
        throw ValueError("model config: grid " + std::to_string(g) + " not divisible by 2^" +
                         std::to_string(local_blocks) + " merges");
    if (dim % (std::int64_t(1) << local_blocks) != 0)
        throw ValueError("model config: dim must be divisible by 2^local_blocks");
    if (ffn % (std::int64_t(1) << local_blocks) != 0)
        throw ValueError("model config: ffn must be divisible by 2^local_blocks");
    if (heads < 1 || head_dim < 1 || layers < 1 || registers < 0 || t_max < 1)
        throw ValueError("model config: bad heads/head_dim/layers/registers/t_max");
    if (pos == PosEnc::ROPE && head_dim % 4 != 0)
        throw ValueError("model config: rope needs head_dim divisible by 4");
    if (pos == PosEnc::APE && width_at(0) % 8 != 0)
        throw ValueError("model config: ape needs base width divisible by 8");
}

namespace {

void layer_shapes(std::vector<std::pair<std::string, Shape>>& out, const std::string& prefix,
                  std::int64_t w, std::int64_t heads, std::int64_t head_dim, std::int64_t ffn_w) {
    std::int64_t inner = heads * head_dim;
    auto add = [&](const char* name, Shape s) { out.push_back({prefix + name, std::move(s)}); };
    add(".ln1.g", {w});
    add(".ln1.b", {w});
    add(".sattn.qkv.w", {w, 3 * inner});
    add(".sattn.qkv.b", {3 * inner});
    add(".sattn.out.w", {inner, w});
    add(".sattn.out.b", {w});
    add(".ln2.g", {w});
    add(".ln2.b", {w});
    add(".mix.w1", {w, w});
    add(".mix.b1", {w});
    add(".mix.w2", {w, w});
    add(".mix.b2", {w});
    add(".ln3.g", {w});
    add(".ln3.b", {w});
    add(".tattn.qkv.w", {w, 3 * inner});
    add(".tattn.qkv.b", {3 * inner});
    add(".tattn.out.w", {inner, w});
    add(".tattn.out.b", {w});
    add(".ln4.g", {w});
    add(".ln4.b", {w});
    add(".ffn.w1", {w, ffn_w});
    add(".ffn.b1", {ffn_w});
    add(".ffn.w2", {ffn_w, w});
    add(".ffn.b2", {w});
}

}  // namespace

std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& cfg) {
    cfg.validate();
    std::vector<std::pair<std::string, Shape>> out;
    std::int64_t w0 = cfg.width_at(0);
    std::int64_t s0 = cfg.grid() * cfg.grid();
    out.push_back({"embed.proj.w", {cfg.channels * cfg.patch * cfg.patch, w0}});
    out.push_back({"embed.proj.b", {w0}});
    if (cfg.pos == PosEnc::LPE) {
        out.push_back({"pos.space", {s0, w0}});
        out.push_back({"pos.time", {cfg.t_max, w0}});
    }
    if (cfg.registers > 0) out.push_back({"registers.tokens", {cfg.registers, w0}});
    for (std::int64_t l = 0; l < cfg.local_blocks; ++l) {
        layer_shapes(out, "enc" + std::to_string(l), cfg.width_at(l), cfg.heads_at(l),
                     cfg.head_dim, cfg.ffn_at(l));
        std::int64_t wl = cfg.width_at(l), wn = cfg.width_at(l + 1);
        out.push_back({"merge" + std::to_string(l) + ".w", {4 * wl, wn}});
        out.push_back({"merge" + std::to_string(l) + ".b", {wn}});
        if (cfg.registers > 0) {
            out.push_back({"reg_up" + std::to_string(l) + ".w", {wl, wn}});
            out.push_back({"reg_up" + std::to_string(l) + ".b", {wn}});
        }
    }
    for (std::int64_t j = 0; j < cfg.layers; ++j)
        layer_shapes(out, "glb" + std::to_string(j), cfg.dim, cfg.heads, cfg.head_dim, cfg.ffn);
    for (std::int64_t l = cfg.local_blocks; l-- > 0;) {
        std::int64_t wl = cfg.width_at(l), wn = cfg.width_at(l + 1);
        out.push_back({"unmerge" + std::to_string(l) + ".w", {wn, 4 * wl}});
        out.push_back({"unmerge" + std::to_string(l) + ".b", {4 * wl}});
        if (cfg.registers > 0) {
            out.push_back({"reg_down" + std::to_string(l) + ".w", {wn, wl}});
            out.push_back({"reg_down" + std::to_string(l) + ".b", {wl}});
        }
        layer_shapes(out, "dec" + std::to_string(l), cfg.width_at(l), cfg.heads_at(l),
                     cfg.head_dim, cfg.ffn_at(l));
    }
    out.push_back({"head.ln.g", {w0}});
    out.push_back({"head.ln.b", {w0}});
    out.push_back({"head.proj.w", {w0, cfg.channels * cfg.patch * cfg.patch}});
    out.push_back({"head.proj.b", {cfg.channels * cfg.patch * cfg.patch}});
    return out;
}

std::int64_t param_count(const ModelConfig& cfg) {
    std::int64_t n = 0;
    for (const auto& [name, shape] : param_shapes(cfg)) n += shape_numel(shape);
    return n;
}

std::shared_ptr<const std::vector<std::uint8_t>> local_spatial_mask(std::int64_t g,
                                                                    std::int64_t n_reg) {
    std::int64_t s = g * g, tot = s + n_reg;
    auto m = std::make_shared<std::vector<std::uint8_t>>(size_t(tot * tot), std::uint8_t(0));
    auto at = [&](std::int64_t q, std::int64_t k) -> std::uint8_t& {
        return (*m)[size_t(q * tot + k)];
    };
    for (std::int64_t q = 0; q < tot; ++q) {
        if (q >= s) {  // register query: sees everything
            for (std::int64_t k = 0; k < tot; ++k) at(q, k) = 1;
            continue;
        }
        std::int64_t qy = q / g, qx = q % g;
        for (std::int64_t dy = -1; dy <= 1; ++dy)
            for (std::int64_t dx = -1; dx <= 1; ++dx) {
                std::int64_t ky = qy + dy, kx = qx + dx;
                if (ky < 0 || ky >= g || kx < 0 || kx >= g) continue;
                at(q, ky * g + kx) = 1;
            }
        for (std::int64_t k = s; k < tot; ++k) at(q, k) = 1;  // patches always see registers
    }
    return m;
}

std::shared_ptr<const std::vector<std::uint8_t>> causal_mask(std::int64_t t) {
    auto m = std::make_shared<std::vector<std::uint8_t>>(size_t(t * t), std::uint8_t(0));
    for (std::int64_t q = 0; q < t; ++q)
        for (std::int64_t k = 0; k <= q; ++k) (*m)[size_t(q * t + k)] = 1;
    return m;
}

NeighborTables neighbor_time_tables(std::int64_t g, std::int64_t n_reg, std::int64_t t) {
    std::int64_t s = g * g, tot = s + n_reg;
    NeighborTables nt;
    nt.idx.assign(size_t(tot * 9), -1);
    for (std::int64_t p = 0; p < tot; ++p) {
        if (p >= s) {
            nt.idx[size_t(p * 9)] = p;  // registers: own stream only
            continue;
        }
        std::int64_t py = p / g, px = p % g, j = 0;
        for (std::int64_t dy = -1; dy <= 1; ++dy)
            for (std::int64_t dx = -1; dx <= 1; ++dx, ++j) {
                std::int64_t ny = py + dy, nx = px + dx;
                if (ny < 0 || ny >= g || nx < 0 || nx >= g) continue;
                nt.idx[size_t(p * 9 + j)] = ny * g + nx;
            }
    }
    // mask per position: queries are the T steps, keys are 9 neighbor streams
    // of T steps each (key j*T + t'), visible iff neighbor exists and t' <= t
    auto m = std::make_shared<std::vector<std::uint8_t>>(size_t(tot * t * 9 * t),
                                                         std::uint8_t(0));
    for (std::int64_t p = 0; p < tot; ++p)
        for (std::int64_t q = 0; q < t; ++q)
            for (std::int64_t j = 0; j < 9; ++j) {
                if (nt.idx[size_t(p * 9 + j)] < 0) continue;
                for (std::int64_t k = 0; k <= q; ++k)
                    (*m)[size_t(((p * t + q) * 9 + j) * t + k)] = 1;
            }
    nt.mask = m;
    return nt;
}

std::vector<std::vector<double>> attention_stats(const std::vector<AttnRecord<float>>& records) {
    std::vector<std::vector<double>> out;
    for (const auto& rec : records) {
        if (rec.kind != "spatial") continue;
        std::int64_t g = rec.grid, s = g * g, h = rec.heads;
        std::int64_t t_steps = rec.w.batch / h;
        // grid distances and per-query normalizers
        std::vector<double> dist(size_t(s * s));
        std::vector<double> far(size_t(s), 0.0);
        for (std::int64_t a = 0; a < s; ++a)
            for (std::int64_t b = 0; b < s; ++b) {
                double d = std::hypot(double(a / g - b / g), double(a % g - b % g));
                dist[size_t(a * s + b)] = d;
                far[size_t(a)] = std::max(far[size_t(a)], d);
            }
        std::vector<double> head_scores(size_t(h), 0.0);
        for (std::int64_t hh = 0; hh < h; ++hh) {
            std::vector<double> q_medians;
            for (std::int64_t tt = 0; tt < t_steps; ++tt) {
                const float* wmat = rec.w.w->data() + ((tt * h + hh) * rec.w.nq) * rec.w.nk;
                for (std::int64_t q = 0; q < s; ++q) {
                    // renormalize over patch keys only
                    const float* wrow = wmat + q * rec.w.nk;
                    double tot_w = 0;
                    for (std::int64_t k = 0; k < s; ++k) tot_w += wrow[k];
                    if (tot_w <= 0) continue;
                    // weighted median of distances
                    std::vector<std::pair<double, double>> dw(static_cast<size_t>(s));
                    for (std::int64_t k = 0; k < s; ++k)
                        dw[size_t(k)] = {dist[size_t(q * s + k)], wrow[k] / tot_w};
                    std::sort(dw.begin(), dw.end());
                    double acc = 0, med = dw.back().first;
                    for (const auto& [d, wgt] : dw) {
                        acc += wgt;
                        if (acc >= 0.5) {
                            med = d;
                            break;
                        }
                    }
                    q_medians.push_back(far[size_t(q)] > 0 ? med / far[size_t(q)] : 0.0);
                }
            }
            if (!q_medians.empty()) {
                std::sort(q_medians.begin(), q_medians.end());
                head_scores[size_t(hh)] = q_medians[q_medians.size() / 2];
            }
        }
        out.push_back(std::move(head_scores));
    }
    return out;
}

}  // namespace psvit::model
