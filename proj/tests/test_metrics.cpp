#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "psvit/metrics.hpp"
#include "psvit/rng.hpp"

using namespace psvit;
using namespace psvit::metrics;

namespace {

// 3x3 solid square centered at integer (cx, cy), single channel
void stamp(float* frame, std::int64_t w, std::int64_t cx, std::int64_t cy, float v = 1.0f) {
    for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dx = -1; dx <= 1; ++dx) frame[(cy + dy) * w + cx + dx] = v;
}

data::Dataset blob_dataset(std::int64_t n, std::int64_t frames, std::int64_t size,
                           std::int64_t vx) {
    data::Dataset ds;
    ds.n = std::uint32_t(n);
    ds.frames = std::uint32_t(frames);
    ds.channels = 1;
    ds.height = std::uint32_t(size);
    ds.width = std::uint32_t(size);
    ds.pixels.assign(size_t(n * frames * size * size), 0.0f);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t t = 0; t < frames; ++t)
            stamp(ds.pixels.data() + (i * frames + t) * size * size, size, 3 + vx * t,
                  size / 2);
    return ds;
}

}  // namespace

TEST_CASE("centroids: empty frame, threshold, min mass") {
    std::vector<float> f(16 * 16, 0.0f);
    CHECK(extract_centroids(f.data(), 1, 16, 16).empty());

    // below the luminance threshold: invisible
    stamp(f.data(), 16, 5, 5, 0.09f);
    CHECK(extract_centroids(f.data(), 1, 16, 16).empty());

    // bright but tiny (4 px): dropped by the mass filter
    std::fill(f.begin(), f.end(), 0.0f);
    f[2 * 16 + 2] = f[2 * 16 + 3] = f[3 * 16 + 2] = f[3 * 16 + 3] = 1.0f;
    CHECK(extract_centroids(f.data(), 1, 16, 16).empty());

    // 3x3 = 9 px: kept, centroid dead center
    std::fill(f.begin(), f.end(), 0.0f);
    stamp(f.data(), 16, 7, 9);
    auto cs = extract_centroids(f.data(), 1, 16, 16);
    REQUIRE(cs.size() == 1);
    CHECK(cs[0].x == doctest::Approx(7.0).epsilon(1e-12));
    CHECK(cs[0].y == doctest::Approx(9.0).epsilon(1e-12));
    CHECK(cs[0].mass == 9.0);
}

TEST_CASE("centroids: luminance averages channels") {
    std::vector<float> f(3 * 8 * 8, 0.0f);
    // one channel at 0.27 -> mean 0.09, under threshold
    for (std::int64_t p = 0; p < 9; ++p) f[(p / 3) * 8 + p % 3] = 0.27f;
    CHECK(extract_centroids(f.data(), 3, 8, 8).empty());
    // all channels at 0.27 -> mean 0.27, visible
    for (std::int64_t c = 1; c < 3; ++c)
        for (std::int64_t p = 0; p < 9; ++p) f[c * 64 + (p / 3) * 8 + p % 3] = 0.27f;
    CHECK(extract_centroids(f.data(), 3, 8, 8).size() == 1);
}

TEST_CASE("centroids: 8-connectivity and discovery order") {
    std::vector<float> f(16 * 16, 0.0f);
    // two 2x2 squares touching only at a corner: one 8-connected component
    f[2 * 16 + 2] = f[2 * 16 + 3] = f[3 * 16 + 2] = f[3 * 16 + 3] = 1.0f;
    f[4 * 16 + 4] = f[4 * 16 + 5] = f[5 * 16 + 4] = f[5 * 16 + 5] = 1.0f;
    auto cs = extract_centroids(f.data(), 1, 16, 16);
    REQUIRE(cs.size() == 1);
    CHECK(cs[0].mass == 8.0);

    // two separated blobs: reported in row-major discovery order
    std::fill(f.begin(), f.end(), 0.0f);
    stamp(f.data(), 16, 12, 2);
    stamp(f.data(), 16, 3, 10);
    cs = extract_centroids(f.data(), 1, 16, 16);
    REQUIRE(cs.size() == 2);
    CHECK(cs[0].y == doctest::Approx(2.0));
    CHECK(cs[1].y == doctest::Approx(10.0));
}

TEST_CASE("centroids: intensity weighting") {
    std::vector<float> f(16 * 16, 0.0f);
    // row of 8 px at y=4, x=2..9; right half three times brighter
    for (std::int64_t x = 2; x < 10; ++x) f[4 * 16 + x] = x < 6 ? 0.25f : 0.75f;
    auto cs = extract_centroids(f.data(), 1, 16, 16);
    REQUIRE(cs.size() == 1);
    // weighted x = (0.25*(2+3+4+5) + 0.75*(6+7+8+9)) / (4*0.25 + 4*0.75)
    double want = (0.25 * 14 + 0.75 * 30) / 4.0;
    CHECK(cs[0].x == doctest::Approx(want).epsilon(1e-6));
    CHECK(cs[0].y == doctest::Approx(4.0).epsilon(1e-6));
}

TEST_CASE("divergence: identical tracks score zero") {
    std::vector<std::vector<Centroid>> t(5);
    for (int s = 0; s < 5; ++s) t[size_t(s)] = {{10.0 + s, 20.0, 9}, {40.0, 30.0 - s, 9}};
    auto rep = divergence(t, t, 64, 64);
    for (int s = 1; s <= 5; ++s) CHECK(rep.at(s) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("divergence: uniform 3px offset at 64x64 is 6.0") {
    std::vector<std::vector<Centroid>> truth(4), pred(4);
    for (int s = 0; s < 4; ++s) {
        truth[size_t(s)] = {{10, 10, 9}, {30, 40, 9}};
        pred[size_t(s)] = {{13, 10, 9}, {30, 43, 9}};
    }
    auto rep = divergence(pred, truth, 64, 64);
    CHECK(rep.at(4) == doctest::Approx(6.0).epsilon(1e-9));
    // same pixels at 128x128 halve the normalized distance
    auto rep2 = divergence(pred, truth, 128, 128);
    CHECK(rep2.at(4) == doctest::Approx(3.0).epsilon(1e-9));
}

TEST_CASE("divergence: 0..49 px spread at 128x128 averages 24.5") {
    // one step, 50 well-separated objects, object i displaced by i pixels
    std::vector<Centroid> t, p;
    for (int i = 0; i < 50; ++i) {
        t.push_back({0.0, 1000.0 * i, 9});
        p.push_back({double(i), 1000.0 * i, 9});
    }
    auto rep = divergence({p}, {t}, 128, 128);
    CHECK(rep.at(1) == doctest::Approx(24.5).epsilon(1e-9));

    // 50 steps of a single object drifting i pixels: same rolling value
    std::vector<std::vector<Centroid>> ts(50), ps(50);
    for (int i = 0; i < 50; ++i) {
        ts[size_t(i)] = {{0, 0, 9}};
        ps[size_t(i)] = {{double(i), 0, 9}};
    }
    CHECK(divergence(ps, ts, 128, 128).at(50) == doctest::Approx(24.5).epsilon(1e-9));
}

TEST_CASE("divergence: unmatched truth pays the frame diagonal") {
    std::vector<std::vector<Centroid>> truth = {{{10, 10, 9}, {50, 50, 9}}};
    std::vector<std::vector<Centroid>> pred = {{{10, 10, 9}}};
    auto rep = divergence(pred, truth, 64, 64);
    double diag = std::hypot(64.0, 64.0) * 128.0 / 64.0;
    CHECK(rep.at(1) == doctest::Approx(diag / 2).epsilon(1e-12));

    // extra predictions on their own cost nothing
    std::vector<std::vector<Centroid>> pred2 = {{{10, 10, 9}, {50, 50, 9}, {62, 2, 9}}};
    CHECK(divergence(pred2, truth, 64, 64).at(1) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("divergence: distance tie resolves to the lower prediction id") {
    std::vector<std::vector<Centroid>> truth = {{{0, 0, 9}, {-1, 0, 9}}};
    std::vector<std::vector<Centroid>> pred = {{{1, 0, 9}, {-1, 0, 9}}};
    // truth 0 ties between both preds, keeps id 0; truth 1 then lands exactly
    auto rep = divergence(pred, truth, 64, 64);
    CHECK(rep.at(1) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("divergence: object-free steps are skipped by the rolling mean") {
    std::vector<std::vector<Centroid>> truth = {{}, {{10, 10, 9}}, {}};
    std::vector<std::vector<Centroid>> pred = {{{5, 5, 9}}, {{13, 10, 9}}, {}};
    auto rep = divergence(pred, truth, 64, 64);
    CHECK_FALSE(rep.step_valid[0]);
    CHECK(rep.step_valid[1]);
    CHECK_FALSE(rep.step_valid[2]);
    CHECK(rep.at(1) == 0.0);  // nothing scored yet
    CHECK(rep.at(2) == doctest::Approx(6.0).epsilon(1e-9));
    CHECK(rep.at(3) == doctest::Approx(6.0).epsilon(1e-9));  // empty step changes nothing
}

TEST_CASE("divergence: shape errors") {
    std::vector<std::vector<Centroid>> a(3), b(2);
    CHECK_THROWS_AS(divergence(a, b, 64, 64), ValueError);
    auto rep = divergence(b, b, 64, 64);
    CHECK_THROWS_AS(rep.at(0), ValueError);
    CHECK_THROWS_AS(rep.at(3), ValueError);
}

TEST_CASE("psnr oracles") {
    std::vector<float> x(100, 0.0f), y(100, 0.1f);
    CHECK(psnr(x.data(), x.data(), 100) == 100.0);  // identical -> capped
    CHECK(psnr(x.data(), y.data(), 100) == doctest::Approx(20.0).epsilon(5e-8));
    std::vector<float> ones(100, 1.0f);
    CHECK(psnr(x.data(), ones.data(), 100) == doctest::Approx(0.0).scale(1e-9));
    std::vector<float> near(100, 1e-6f);
    CHECK(psnr(x.data(), near.data(), 100) == 100.0);  // under the cap threshold
}

TEST_CASE("l1 mean absolute difference") {
    std::vector<float> x = {0.0f, 0.0f}, y = {1.0f, 3.0f};
    CHECK(l1(x.data(), y.data(), 2) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(l1(y.data(), x.data(), 2) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("ssim_frame identity and symmetry") {
    Rng rng(7);
    std::vector<float> x(16 * 16), y(16 * 16);
    for (auto& v : x) v = float(rng.uniform());
    for (auto& v : y) v = float(rng.uniform());
    CHECK(ssim_frame(x.data(), x.data(), 1, 16, 16) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(ssim_frame(x.data(), y.data(), 1, 16, 16) ==
          doctest::Approx(ssim_frame(y.data(), x.data(), 1, 16, 16)).epsilon(1e-9));
    CHECK(ssim_frame(x.data(), y.data(), 1, 16, 16) < 1.0);
}

TEST_CASE("baseline tracks: copy-last and constant-velocity") {
    auto ds = blob_dataset(1, 6, 16, 2);  // centroid x = 3 + 2t, y = 8
    std::vector<std::vector<Centroid>> truth(3);
    for (std::int64_t s = 0; s < 3; ++s)
        truth[size_t(s)] =
            extract_centroids(ds.frame_ptr(0, 3 + s), ds.channels, ds.height, ds.width);

    // copy-last freezes at x=7: distances 2,4,6 px, scaled by 128/16 = 8
    auto cl = divergence(copy_last_track(ds, 0, 3, 3), truth, 16, 16);
    CHECK(cl.at(1) == doctest::Approx(16.0).epsilon(1e-9));
    CHECK(cl.at(2) == doctest::Approx(24.0).epsilon(1e-9));
    CHECK(cl.at(3) == doctest::Approx(32.0).epsilon(1e-9));

    // constant velocity nails linear motion
    auto cv = divergence(const_velocity_track(ds, 0, 3, 3), truth, 16, 16);
    CHECK(cv.at(3) == doctest::Approx(0.0).epsilon(1e-9));

    // static scene: copy-last is perfect, velocity estimate is zero
    auto still = blob_dataset(1, 6, 16, 0);
    std::vector<std::vector<Centroid>> st(3);
    for (std::int64_t s = 0; s < 3; ++s)
        st[size_t(s)] =
            extract_centroids(still.frame_ptr(0, 3 + s), still.channels, 16, 16);
    CHECK(divergence(copy_last_track(still, 0, 3, 3), st, 16, 16).at(3) ==
          doctest::Approx(0.0).epsilon(1e-9));
    CHECK(divergence(const_velocity_track(still, 0, 3, 3), st, 16, 16).at(3) ==
          doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("rolling divergence grows as tracks separate") {
    auto ds = blob_dataset(1, 6, 16, 2);
    std::vector<std::vector<Centroid>> truth(3);
    for (std::int64_t s = 0; s < 3; ++s)
        truth[size_t(s)] =
            extract_centroids(ds.frame_ptr(0, 3 + s), ds.channels, ds.height, ds.width);
    auto rep = divergence(copy_last_track(ds, 0, 3, 3), truth, 16, 16);
    CHECK(rep.at(1) < rep.at(2));
    CHECK(rep.at(2) < rep.at(3));
}

TEST_CASE("evaluate_rollout: shapes, ranges and CSV output") {
    model::ModelConfig cfg;
    cfg.image = 16;
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
    Rng rng(11);
    auto ps = model::init_params<float>(cfg, rng);
    auto ds = blob_dataset(3, 6, 16, 1);

    auto ev = evaluate_rollout(cfg, ps, ds, 2, 3);
    REQUIRE(ev.divergence_median.size() == 3);
    REQUIRE(ev.l1_mean.size() == 3);
    REQUIRE(ev.psnr_mean.size() == 3);
    REQUIRE(ev.ssim_mean.size() == 3);
    REQUIRE(ev.copy_last_divergence_median.size() == 3);
    REQUIRE(ev.const_velocity_divergence_median.size() == 3);
    for (int s = 1; s <= 3; ++s) {
        CHECK(std::isfinite(ev.divergence_at(s)));
        CHECK(ev.psnr_mean[size_t(s - 1)] <= 100.0);
        CHECK(ev.ssim_mean[size_t(s - 1)] <= 1.0);
        CHECK(ev.ssim_mean[size_t(s - 1)] > -1.0);
    }
    CHECK(ev.ssim_first(3) == doctest::Approx((ev.ssim_mean[0] + ev.ssim_mean[1] +
                                               ev.ssim_mean[2]) / 3.0));
    CHECK_THROWS_AS(ev.divergence_at(4), ValueError);
    CHECK_THROWS_AS(evaluate_rollout(cfg, ps, ds, 4, 3), ValueError);

    std::string p1 = "/tmp/psvit_test_curves.csv", p2 = "/tmp/psvit_test_base.csv";
    write_curves_csv(ev, p1);
    write_baselines_csv(ev, p2);
    std::ifstream is(p1);
    std::string line;
    std::getline(is, line);
    CHECK(line == "step,divergence_median,l1_mean,psnr_mean,ssim_mean");
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 3);
    std::ifstream is2(p2);
    std::getline(is2, line);
    CHECK(line ==
          "step,model_divergence_median,copy_last_divergence_median,const_velocity_divergence_"
          "median");
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("rollout determinism: same checkpoint, same predictions") {
    model::ModelConfig cfg;
    cfg.image = 16;
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
    Rng rng(13);
    auto ps = model::init_params<float>(cfg, rng);
    auto ds = blob_dataset(1, 6, 16, 1);
    NoGradGuard ng;
    auto ctx = TensorT<float>::from({2, 1, 16, 16},
                                    std::vector<float>(ds.seq_ptr(0),
                                                       ds.seq_ptr(0) + 2 * ds.frame_elems()));
    auto a = model::rollout(cfg, ps, ctx, 3);
    auto b = model::rollout(cfg, ps, ctx, 3);
    CHECK(a.values() == b.values());
}

TEST_CASE("write_ppm emits a valid pixmap") {
    std::vector<float> f = {0.0f, 0.5f, 1.0f, 2.0f};  // 1 channel, 2x2; 2.0 clamps to 1
    std::string p = "/tmp/psvit_test_frame.ppm";
    write_ppm(f.data(), 1, 2, 2, p);
    std::ifstream is(p, std::ios::binary);
    std::string magic, dims1, dims2, maxv;
    is >> magic >> dims1 >> dims2 >> maxv;
    CHECK(magic == "P6");
    CHECK(dims1 == "2");
    CHECK(dims2 == "2");
    CHECK(maxv == "255");
    is.get();  // single whitespace after header
    unsigned char px[12];
    is.read(reinterpret_cast<char*>(px), 12);
    REQUIRE(bool(is));
    CHECK(px[0] == 0);    // gray replicated across rgb
    CHECK(px[1] == 0);
    CHECK(px[3] == 128);  // round(0.5*255)
    CHECK(px[6] == 255);
    CHECK(px[9] == 255);  // clamped
    CHECK_THROWS_AS(write_ppm(f.data(), 2, 2, 1, p), ValueError);
    std::remove(p.c_str());
}

TEST_CASE("median helper") {
    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.5);
    CHECK(median({5.0}) == 5.0);
    CHECK_THROWS_AS(median({}), ValueError);
}
