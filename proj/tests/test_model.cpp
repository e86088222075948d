#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "psvit/gradcheck.hpp"
#include "psvit/model.hpp"

using namespace psvit;
using namespace psvit::model;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.image = 8;
    cfg.channels = 1;
    cfg.patch = 4;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.head_dim = 8;
    cfg.ffn = 16;
    cfg.layers = 2;
    cfg.local_blocks = 1;
    cfg.registers = 2;
    cfg.t_max = 4;
    return cfg;
}

Tensor randn_frames(const ModelConfig& cfg, std::int64_t t, Rng& rng) {
    auto x = Tensor::zeros({t, cfg.channels, cfg.image, cfg.image});
    for (auto& v : x.values()) v = float(rng.uniform());
    return x;
}

}  // namespace

TEST_CASE("patchify maps pixels to the expected token slots") {
    std::int64_t t = 2, c = 2, img = 8, p = 4, g = img / p;
    auto frames = TensorT<double>::zeros({t, c, img, img});
    auto& v = frames.values();
    for (std::int64_t i = 0; i < frames.numel(); ++i) v[size_t(i)] = double(i);
    auto tok = patchify(frames, p);
    REQUIRE(tok.shape() == Shape{t * g * g, c * p * p});
    // pixel (tt, cc, y, x) should land in token (tt*g*g + (y/p)*g + x/p),
    // feature cc*p*p + (y%p)*p + x%p
    std::int64_t tt = 1, cc = 1, y = 5, x = 6;
    double want = double(((tt * c + cc) * img + y) * img + x);
    std::int64_t row = tt * g * g + (y / p) * g + x / p;
    std::int64_t col = cc * p * p + (y % p) * p + (x % p);
    CHECK(tok.values()[size_t(row * c * p * p + col)] == want);

    auto back = unpatchify(tok, c, img, p);
    REQUIRE(back.shape() == frames.shape());
    CHECK(back.values() == frames.values());
}

TEST_CASE("local spatial mask: 3x3 windows plus always-visible registers") {
    std::int64_t g = 4, n = 2, s = g * g, tot = s + n;
    auto m = local_spatial_mask(g, n);
    REQUIRE(std::int64_t(m->size()) == tot * tot);
    auto count = [&](std::int64_t q) {
        std::int64_t c = 0;
        for (std::int64_t k = 0; k < tot; ++k) c += (*m)[size_t(q * tot + k)];
        return c;
    };
    CHECK(count(0) == 4 + n);               // corner patch
    CHECK(count(1) == 6 + n);               // edge patch
    CHECK(count(1 * g + 1) == 9 + n);       // interior patch
    CHECK(count(s) == tot);                 // register sees everything
    CHECK(count(s + 1) == tot);
    // interior patch (1,1) must not see patch (3,3)
    CHECK((*m)[size_t((1 * g + 1) * tot + (3 * g + 3))] == 0);
    CHECK((*m)[size_t((1 * g + 1) * tot + s)] == 1);  // but sees registers
}

TEST_CASE("causal mask row q has q+1 visible keys") {
    std::int64_t t = 5;
    auto m = causal_mask(t);
    for (std::int64_t q = 0; q < t; ++q) {
        std::int64_t c = 0;
        for (std::int64_t k = 0; k < t; ++k) {
            c += (*m)[size_t(q * t + k)];
            CHECK((*m)[size_t(q * t + k)] == (k <= q ? 1 : 0));
        }
        CHECK(c == q + 1);
    }
}

TEST_CASE("neighbor tables: pads at borders, registers keep to themselves") {
    std::int64_t g = 3, n = 1, t = 2, s = g * g;
    auto nt = neighbor_time_tables(g, n, t);
    REQUIRE(std::int64_t(nt.idx.size()) == (s + n) * 9);
    // center patch (1,1): full 3x3 neighborhood in slot order
    std::vector<std::int64_t> center(nt.idx.begin() + 4 * 9, nt.idx.begin() + 5 * 9);
    CHECK(center == std::vector<std::int64_t>{0, 1, 2, 3, 4, 5, 6, 7, 8});
    // corner (0,0): only the 2x2 block exists
    std::vector<std::int64_t> corner(nt.idx.begin(), nt.idx.begin() + 9);
    CHECK(corner == std::vector<std::int64_t>{-1, -1, -1, -1, 0, 1, -1, 3, 4});
    // register stream: itself in slot 0
    std::vector<std::int64_t> reg(nt.idx.begin() + s * 9, nt.idx.begin() + (s + 1) * 9);
    CHECK(reg == std::vector<std::int64_t>{9, -1, -1, -1, -1, -1, -1, -1, -1});

    // mask: group p, query step q, key j*t+k visible iff slot exists and k <= q
    auto vis = [&](std::int64_t p, std::int64_t q, std::int64_t j, std::int64_t k) {
        return (*nt.mask)[size_t(((p * t + q) * 9 + j) * t + k)];
    };
    for (std::int64_t q = 0; q < t; ++q)
        for (std::int64_t j = 0; j < 9; ++j)
            for (std::int64_t k = 0; k < t; ++k) {
                bool want = nt.idx[size_t(0 * 9 + j)] >= 0 && k <= q;
                CHECK(vis(0, q, j, k) == (want ? 1 : 0));
            }
    CHECK(vis(s, 0, 0, 0) == 1);
    CHECK(vis(s, 0, 1, 0) == 0);
    CHECK(vis(s, 1, 0, 0) == 1);
    CHECK(vis(s, 1, 0, 1) == 1);
}

TEST_CASE("parameter schema: unique names, audited totals") {
    auto shapes = param_shapes(tiny_config());
    std::set<std::string> seen;
    for (auto& [name, shape] : shapes) {
        CHECK(seen.insert(name).second);
        CHECK(shape_numel(shape) > 0);
    }

    // independent recount for the full-size reference configuration
    ModelConfig ref;  // defaults: 64px/8, dim 512, 12 heads x 64, ffn 2048, 8 layers
    auto layer_params = [](std::int64_t w, std::int64_t heads, std::int64_t hd, std::int64_t f) {
        std::int64_t inner = heads * hd;
        std::int64_t attn = (w * 3 * inner + 3 * inner) + (inner * w + w);
        std::int64_t mix = 2 * (w * w) + 2 * w;
        std::int64_t ffn = w * f + f + f * w + w;
        std::int64_t lns = 8 * w;
        return 2 * attn + mix + ffn + lns;
    };
    std::int64_t want = 0;
    std::int64_t w0 = ref.dim >> ref.local_blocks, s0 = (ref.image / ref.patch) * (ref.image / ref.patch);
    want += (ref.channels * ref.patch * ref.patch) * w0 + w0;          // embed
    want += s0 * w0 + ref.t_max * w0;                                  // learned positions
    want += ref.registers * w0;
    for (std::int64_t l = 0; l < ref.local_blocks; ++l) {
        std::int64_t wl = ref.dim >> (ref.local_blocks - l), wn = wl * 2;
        want += 2 * layer_params(wl, wl / ref.head_dim, ref.head_dim, ref.ffn >> (ref.local_blocks - l));
        want += (4 * wl) * wn + wn + (wn * 4 * wl + 4 * wl);           // merge + unmerge
        want += wl * wn + wn + wn * wl + wl;                           // register adapters
    }
    want += ref.layers * layer_params(ref.dim, ref.heads, ref.head_dim, ref.ffn);
    want += 2 * w0 + w0 * (ref.channels * ref.patch * ref.patch) + ref.channels * ref.patch * ref.patch;
    CHECK(param_count(ref) == want);
    CHECK(param_count(ref) == 50923712);
}

TEST_CASE("init: gains one, biases zero, weights scattered, seed-stable") {
    auto cfg = tiny_config();
    Rng rng(11);
    auto ps = init_params<float>(cfg, rng);
    auto shapes = param_shapes(cfg);
    REQUIRE(ps.size() == shapes.size());
    std::int64_t total = 0;
    for (auto& [name, shape] : shapes) {
        auto& t = ps.at(name);
        REQUIRE(t.shape() == shape);
        total += t.numel();
        std::string leaf = name.substr(name.rfind('.') + 1);
        if (leaf == "g")
            for (auto v : t.values()) CHECK(v == 1.0f);
        else if (leaf[0] == 'b')
            for (auto v : t.values()) CHECK(v == 0.0f);
    }
    CHECK(total == param_count(cfg));
    float spread = 0;
    for (auto v : ps.at("embed.proj.w").values()) spread = std::max(spread, std::fabs(v));
    CHECK(spread > 0.0f);
    CHECK(spread < 0.2f);

    Rng rng2(11);
    auto ps2 = init_params<float>(cfg, rng2);
    for (size_t i = 0; i < ps.size(); ++i) CHECK(ps.tensors[i].values() == ps2.tensors[i].values());
}

TEST_CASE("forward: output shape, range, determinism") {
    auto cfg = tiny_config();
    Rng rng(3);
    auto ps = init_params<float>(cfg, rng);
    auto frames = randn_frames(cfg, 3, rng);
    NoGradGuard ng;
    auto out = forward(cfg, ps, frames);
    REQUIRE(out.shape() == Shape{3, cfg.channels, cfg.image, cfg.image});
    for (auto v : out.values()) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
    auto out2 = forward(cfg, ps, frames);
    CHECK(out.values() == out2.values());

    auto too_long = randn_frames(cfg, cfg.t_max + 1, rng);
    CHECK_THROWS_AS(forward(cfg, ps, too_long), ValueError);
}

TEST_CASE("forward with every parameter zero paints 0.5 everywhere") {
    auto cfg = tiny_config();
    ParamStoreT<float> ps;
    for (auto& [name, shape] : param_shapes(cfg)) ps.add(name, Tensor::zeros(shape));
    Rng rng(5);
    auto frames = randn_frames(cfg, 2, rng);
    NoGradGuard ng;
    auto out = forward(cfg, ps, frames);
    for (auto v : out.values()) CHECK(v == 0.5f);
}

TEST_CASE("multi-level merge pyramid runs and keeps its shape") {
    ModelConfig cfg;
    cfg.image = 32;
    cfg.patch = 4;  // grid 8 -> 4 -> 2
    cfg.dim = 64;
    cfg.heads = 4;
    cfg.head_dim = 16;
    cfg.ffn = 128;
    cfg.layers = 2;
    cfg.local_blocks = 2;
    cfg.registers = 4;
    cfg.t_max = 8;
    cfg.validate();
    CHECK(cfg.grid_at(0) == 8);
    CHECK(cfg.grid_at(2) == 2);
    CHECK(cfg.width_at(0) == 16);
    CHECK(cfg.width_at(2) == 64);
    Rng rng(7);
    auto ps = init_params<float>(cfg, rng);
    auto frames = randn_frames(cfg, 2, rng);
    NoGradGuard ng;
    auto out = forward(cfg, ps, frames);
    REQUIRE(out.shape() == Shape{2, 3, 32, 32});
}

TEST_CASE("prediction t never depends on frames after t") {
    auto cfg = tiny_config();
    Rng rng(23);
    std::int64_t t = 4, fe = cfg.channels * cfg.image * cfg.image;
    struct Case {
        AttnScheme scheme;
        PosEnc pos;
    } cases[] = {
        {AttnScheme::LS_LT, PosEnc::LPE}, {AttnScheme::GS_LT, PosEnc::LPE},
        {AttnScheme::GS_T, PosEnc::LPE},  {AttnScheme::GS_T, PosEnc::ROPE},
        {AttnScheme::GS_T, PosEnc::APE},
    };
    for (auto cs : cases) {
        ModelConfig c = cfg;
        c.scheme = cs.scheme;
        c.pos = cs.pos;
        CAPTURE(scheme_name(c.scheme));
        CAPTURE(pos_name(c.pos));
        auto ps = init_params<float>(c, rng);
        auto frames = randn_frames(c, t, rng);
        NoGradGuard ng;
        auto base = forward(c, ps, frames);
        for (std::int64_t u = 1; u < t; ++u) {
            auto poked = Tensor::from(frames.shape(), frames.values());
            for (std::int64_t i = 0; i < fe; ++i)
                poked.values()[size_t(u * fe + i)] = float(rng.uniform());
            auto out = forward(c, ps, poked);
            bool prefix_same = true, suffix_changed = false;
            for (std::int64_t q = 0; q < t; ++q) {
                bool same = true;
                for (std::int64_t i = 0; i < fe; ++i)
                    if (out.values()[size_t(q * fe + i)] != base.values()[size_t(q * fe + i)]) {
                        same = false;
                        break;
                    }
                if (q < u && !same) prefix_same = false;
                if (q >= u && !same) suffix_changed = true;
            }
            CHECK(prefix_same);
            CHECK(suffix_changed);
        }
    }
}

TEST_CASE("rollout matches a hand-run sliding window") {
    auto cfg = tiny_config();
    cfg.t_max = 2;
    Rng rng(31);
    auto ps = init_params<float>(cfg, rng);
    auto ctx = randn_frames(cfg, 2, rng);
    std::int64_t fe = cfg.channels * cfg.image * cfg.image;
    NoGradGuard ng;
    auto rolled = rollout(cfg, ps, ctx, 3);
    REQUIRE(rolled.shape() == Shape{3, cfg.channels, cfg.image, cfg.image});

    std::vector<float> win(ctx.values());
    std::vector<float> manual;
    for (int step = 0; step < 3; ++step) {
        auto pred = forward(cfg, ps, Tensor::from({2, cfg.channels, cfg.image, cfg.image}, win));
        manual.insert(manual.end(), pred.values().begin() + 1 * fe, pred.values().end());
        win.erase(win.begin(), win.begin() + fe);
        win.insert(win.end(), manual.end() - fe, manual.end());
    }
    CHECK(rolled.values() == manual);

    // context longer than t_max: only the most recent frames matter
    auto ctx4 = randn_frames(cfg, 4, rng);
    auto tail = Tensor::from({2, cfg.channels, cfg.image, cfg.image},
                             std::vector<float>(ctx4.values().end() - 2 * fe, ctx4.values().end()));
    auto a = rollout(cfg, ps, ctx4, 2);
    auto b = rollout(cfg, ps, tail, 2);
    CHECK(a.values() == b.values());
}

TEST_CASE("rotary attention scores depend only on relative time") {
    std::int64_t dh = 8;
    Rng rng(41);
    std::vector<float> qv(static_cast<size_t>(dh)), kv(static_cast<size_t>(dh));
    for (auto& v : qv) v = float(rng.normal());
    for (auto& v : kv) v = float(rng.normal());
    auto score_at = [&](std::int32_t pq, std::int32_t pk) {
        NoGradGuard ng;
        auto q = Tensor::from({1, dh}, qv);
        auto k = Tensor::from({1, dh}, kv);
        auto qr = rope_rows(q, {pq}, 0, int(dh));
        auto kr = rope_rows(k, {pk}, 0, int(dh));
        double dot = 0;
        for (std::int64_t i = 0; i < dh; ++i)
            dot += double(qr.values()[size_t(i)]) * double(kr.values()[size_t(i)]);
        return dot;
    };
    double base = score_at(7, 3);
    CHECK(score_at(12, 8) == doctest::Approx(base).epsilon(1e-5));
    CHECK(score_at(104, 100) == doctest::Approx(base).epsilon(1e-4));
    CHECK(score_at(3, 7) != doctest::Approx(base).epsilon(1e-3));
}

TEST_CASE("attention distance stats: self, far corner, uniform") {
    std::int64_t g = 2, s = g * g;
    auto rec = [&](std::vector<float> w) {
        AttnRecord<float> r;
        r.block = "glb0";
        r.kind = "spatial";
        r.grid = g;
        r.heads = 1;
        r.w = AttnWeights<float>{1, s, s, std::make_shared<std::vector<float>>(std::move(w))};
        return r;
    };
    std::vector<float> self_w(size_t(s * s), 0.0f), far_w(size_t(s * s), 0.0f),
        uni_w(size_t(s * s), 0.25f);
    for (std::int64_t q = 0; q < s; ++q) {
        self_w[size_t(q * s + q)] = 1.0f;
        far_w[size_t(q * s + (s - 1 - q))] = 1.0f;  // diagonal opposite on a 2x2 grid
    }
    auto st = attention_stats({rec(self_w), rec(far_w), rec(uni_w)});
    REQUIRE(st.size() == 3);
    CHECK(st[0][0] == doctest::Approx(0.0));
    CHECK(st[1][0] == doctest::Approx(1.0));
    // uniform 2x2: distances from any corner {0,1,1,sqrt2}; weighted median 1,
    // farthest sqrt2
    CHECK(st[2][0] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-9));

    // register keys are ignored: same stats when extra columns carry weight
    std::int64_t nk = s + 2;
    std::vector<float> with_regs(size_t(s * nk), 0.0f);
    for (std::int64_t q = 0; q < s; ++q) {
        with_regs[size_t(q * nk + q)] = 0.5f;  // self among patches
        with_regs[size_t(q * nk + s)] = 0.5f;  // rest on a register
    }
    AttnRecord<float> r2;
    r2.block = "glb0";
    r2.kind = "spatial";
    r2.grid = g;
    r2.heads = 1;
    r2.w = AttnWeights<float>{1, s, nk, std::make_shared<std::vector<float>>(with_regs)};
    auto st2 = attention_stats({r2});
    CHECK(st2[0][0] == doctest::Approx(0.0));
}

TEST_CASE("forward capture collects global tokens and spatial maps") {
    auto cfg = tiny_config();
    Rng rng(13);
    auto ps = init_params<float>(cfg, rng);
    auto frames = randn_frames(cfg, 2, rng);
    NoGradGuard ng;
    ForwardCapture<float> cap;
    cap.want_global_tokens = true;
    cap.want_global_spatial_attn = true;
    forward(cfg, ps, frames, &cap);
    std::int64_t sg = cfg.grid_at(cfg.local_blocks) * cfg.grid_at(cfg.local_blocks);
    REQUIRE(std::int64_t(cap.global_tokens.size()) == cfg.layers);
    for (auto& t : cap.global_tokens)
        CHECK(t.shape() == Shape{2 * (sg + cfg.registers), cfg.dim});
    REQUIRE(std::int64_t(cap.attn.size()) == cfg.layers);
    for (auto& r : cap.attn) {
        CHECK(r.kind == "spatial");
        CHECK(r.heads == cfg.heads);
        CHECK(r.w.nq == sg + cfg.registers);
        CHECK(r.w.batch == 2 * cfg.heads);
    }
    auto stats = attention_stats(cap.attn);
    REQUIRE(std::int64_t(stats.size()) == cfg.layers);
    for (auto& layer : stats)
        for (double v : layer) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
}

TEST_CASE("whole-model gradients vs finite differences (causal self-attention)") {
    auto cfg = tiny_config();
    cfg.scheme = AttnScheme::GS_T;
    Rng rng(71);
    auto master = init_params<double>(cfg, rng);
    auto frames_d = TensorT<double>::zeros({3, cfg.channels, cfg.image, cfg.image});
    for (auto& v : frames_d.values()) v = rng.uniform();

    std::vector<std::string> poke = {"embed.proj.w", "pos.time", "registers.tokens",
                                     "glb0.sattn.qkv.b", "head.proj.w"};
    std::vector<TensorT<double>> inputs = {frames_d};
    for (auto& n : poke) inputs.push_back(cast_tensor<double>(master.at(n), false));

    auto build = [&](auto& xs) {
        using S = std::decay_t<decltype(xs[0].values()[0])>;
        auto ps = master.cast<S>(false);
        for (size_t i = 0; i < poke.size(); ++i) ps.at(poke[i]) = xs[i + 1];
        return mean_all(forward(cfg, ps, xs[0]));
    };
    auto rep = grad_check<double>(build, inputs, 1e-6, 1e-4);
    INFO(rep.str());
    CHECK(rep.ok);
}

TEST_CASE("whole-model gradients vs finite differences (windowed, rotary)") {
    auto cfg = tiny_config();
    cfg.scheme = AttnScheme::LS_LT;
    cfg.pos = PosEnc::ROPE;
    Rng rng(73);
    auto master = init_params<double>(cfg, rng);
    auto frames_d = TensorT<double>::zeros({3, cfg.channels, cfg.image, cfg.image});
    for (auto& v : frames_d.values()) v = rng.uniform();

    std::vector<std::string> poke = {"enc0.tattn.qkv.b", "merge0.w", "glb0.sattn.out.b",
                                     "unmerge0.b", "enc0.ln1.g", "reg_up0.w"};
    std::vector<TensorT<double>> inputs = {frames_d};
    for (auto& n : poke) inputs.push_back(cast_tensor<double>(master.at(n), false));

    auto build = [&](auto& xs) {
        using S = std::decay_t<decltype(xs[0].values()[0])>;
        auto ps = master.cast<S>(false);
        for (size_t i = 0; i < poke.size(); ++i) ps.at(poke[i]) = xs[i + 1];
        return mean_all(forward(cfg, ps, xs[0]));
    };
    auto rep = grad_check<double>(build, inputs, 1e-6, 1e-4);
    INFO(rep.str());
    CHECK(rep.ok);
}

TEST_CASE("config validation rejects bad geometry") {
    auto cfg = tiny_config();
    cfg.patch = 3;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = tiny_config();
    cfg.local_blocks = 2;  // grid 2 can't merge twice
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = tiny_config();
    cfg.pos = PosEnc::ROPE;
    cfg.head_dim = 6;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    CHECK(scheme_from(scheme_name(AttnScheme::GS_LT)) == AttnScheme::GS_LT);
    CHECK(pos_from(pos_name(PosEnc::APE)) == PosEnc::APE);
    CHECK_THROWS_AS(scheme_from("bogus"), ValueError);
    CHECK_THROWS_AS(pos_from("bogus"), ValueError);
}
