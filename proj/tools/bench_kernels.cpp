// Times the serial reference kernels against their OpenMP variants and prints
// a table with the speedup per kernel and size. The parallel path is invoked
// directly so the size-based dispatch heuristic does not get in the way.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <vector>

#include "psvit/kernels.hpp"
#include "psvit/rng.hpp"
#include "psvit/threading.hpp"

using namespace psvit;

namespace {

std::vector<float> randu(Rng& rng, std::int64_t n) {
    std::vector<float> v(static_cast<size_t>(n));
    for (auto& x : v) x = float(rng.uniform() - 0.5);
    return v;
}

double time_best_of(int reps, const std::function<void()>& fn) {
    double best = 1e30;
    for (int r = 0; r < reps; ++r) {
        auto t0 = std::chrono::steady_clock::now();
        fn();
        double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (dt < best) best = dt;
    }
    return best;
}

void row(const char* name, const char* size, double ts, double tp) {
    std::printf("%-16s %-14s %10.3f %10.3f %8.2fx\n", name, size, ts * 1e3, tp * 1e3, ts / tp);
}

}  // namespace

int main(int argc, char** argv) {
    int reps = argc > 1 ? std::atoi(argv[1]) : 3;
    Rng rng(7);
    std::printf("threads: %d (PSVIT_THREADS to change)\n", thread_cap());
    std::printf("%-16s %-14s %10s %10s %9s\n", "kernel", "size", "serial ms", "par ms", "speedup");

    for (std::int64_t n : {128, 256, 512}) {
        auto a = randu(rng, n * n), b = randu(rng, n * n);
        std::vector<float> c(static_cast<size_t>(n * n));
        char sz[32];
        std::snprintf(sz, sizeof sz, "%lldx%lld", (long long)n, (long long)n);
        auto fill0 = [&] { std::fill(c.begin(), c.end(), 0.0f); };
        fill0();
        double ts = time_best_of(reps, [&] { kernels::serial::matmul_nn(n, n, n, a.data(), b.data(), c.data()); });
        fill0();
        double tp = time_best_of(reps, [&] { kernels::par::matmul_nn(n, n, n, a.data(), b.data(), c.data()); });
        row("matmul_nn", sz, ts, tp);
        fill0();
        ts = time_best_of(reps, [&] { kernels::serial::matmul_nt(n, n, n, a.data(), b.data(), c.data()); });
        fill0();
        tp = time_best_of(reps, [&] { kernels::par::matmul_nt(n, n, n, a.data(), b.data(), c.data()); });
        row("matmul_nt", sz, ts, tp);
        fill0();
        ts = time_best_of(reps, [&] { kernels::serial::matmul_tn(n, n, n, a.data(), b.data(), c.data()); });
        fill0();
        tp = time_best_of(reps, [&] { kernels::par::matmul_tn(n, n, n, a.data(), b.data(), c.data()); });
        row("matmul_tn", sz, ts, tp);
    }

    {
        std::int64_t rows = 4096, n = 512;
        auto x = randu(rng, rows * n);
        std::vector<float> y(static_cast<size_t>(rows * n));
        double ts = time_best_of(reps, [&] { kernels::serial::softmax_rows(rows, n, x.data(), y.data()); });
        double tp = time_best_of(reps, [&] { kernels::par::softmax_rows(rows, n, x.data(), y.data()); });
        row("softmax_rows", "4096x512", ts, tp);

        auto gain = randu(rng, n), bias = randu(rng, n);
        std::vector<float> mean(static_cast<size_t>(rows)), istd(static_cast<size_t>(rows));
        ts = time_best_of(reps, [&] {
            kernels::serial::layernorm_rows(rows, n, x.data(), gain.data(), bias.data(), y.data(),
                                            mean.data(), istd.data(), 1e-5f);
        });
        tp = time_best_of(reps, [&] {
            kernels::par::layernorm_rows(rows, n, x.data(), gain.data(), bias.data(), y.data(),
                                         mean.data(), istd.data(), 1e-5f);
        });
        row("layernorm_rows", "4096x512", ts, tp);
    }

    {
        // one attention shape per regime: many short rows, few long rows
        for (auto [B, nq, nk, d] : {std::array<std::int64_t, 4>{32, 64, 64, 64},
                                    std::array<std::int64_t, 4>{4, 512, 512, 64}}) {
            auto q = randu(rng, B * nq * d), k = randu(rng, B * nk * d), v = randu(rng, B * nk * d);
            std::vector<float> w(static_cast<size_t>(B * nq * nk)), out(static_cast<size_t>(B * nq * d));
            std::vector<float> ds(static_cast<size_t>(B * nq * nk));
            std::vector<float> dq(static_cast<size_t>(B * nq * d)), dk(static_cast<size_t>(B * nk * d)),
                dv(static_cast<size_t>(B * nk * d));
            auto dout = randu(rng, B * nq * d);
            float scale = 0.125f;
            char sz[32];
            std::snprintf(sz, sizeof sz, "%lldx%lldx%lld", (long long)B, (long long)nq, (long long)d);
            double ts = time_best_of(reps, [&] {
                kernels::serial::attn_forward(B, nq, nk, d, q.data(), k.data(), v.data(), nullptr, 1,
                                              scale, w.data(), out.data());
            });
            double tp = time_best_of(reps, [&] {
                kernels::par::attn_forward(B, nq, nk, d, q.data(), k.data(), v.data(), nullptr, 1,
                                           scale, w.data(), out.data());
            });
            row("attn_forward", sz, ts, tp);
            auto zero = [&] {
                std::fill(dq.begin(), dq.end(), 0.0f);
                std::fill(dk.begin(), dk.end(), 0.0f);
                std::fill(dv.begin(), dv.end(), 0.0f);
            };
            zero();
            ts = time_best_of(reps, [&] {
                kernels::serial::attn_backward(B, nq, nk, d, q.data(), k.data(), v.data(), w.data(),
                                               nullptr, 1, scale, dout.data(), ds.data(), dq.data(),
                                               dk.data(), dv.data());
            });
            zero();
            tp = time_best_of(reps, [&] {
                kernels::par::attn_backward(B, nq, nk, d, q.data(), k.data(), v.data(), w.data(),
                                            nullptr, 1, scale, dout.data(), ds.data(), dq.data(),
                                            dk.data(), dv.data());
            });
            row("attn_backward", sz, ts, tp);
        }
    }
    return 0;
}
