#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "psvit/tensor.hpp"

using namespace psvit;

TEST_CASE("matmul known product") {
    auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
    auto b = Tensor::from({2, 2}, {5, 6, 7, 8});
    auto c = matmul(a, b);
    CHECK(c.values() == std::vector<float>{19, 22, 43, 50});
}

TEST_CASE("matmul identity") {
    auto i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
    auto b = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto c = matmul(i2, b);
    CHECK(c.values() == b.values());
}

TEST_CASE("matmul shape mismatch names shapes") {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected throw");
    } catch (const ShapeError& e) {
        std::string m = e.what();
        CHECK(m.find("[2,3]") != std::string::npos);
        CHECK(m.find("[4,2]") != std::string::npos);
    }
}

TEST_CASE("softmax uniform and saturated rows") {
    auto x = Tensor::from({2, 2}, {0, 0, 1000, 0});
    auto y = softmax_lastdim(x);
    CHECK(y.values()[0] == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(y.values()[1] == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(y.values()[2] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(y.values()[3] == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(7);
    auto x = Tensor::randn({5, 9}, rng, 3.0f);
    auto y = softmax_lastdim(x);
    for (int i = 0; i < 5; ++i) {
        double s = 0;
        for (int j = 0; j < 9; ++j) s += y.values()[size_t(i * 9 + j)];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("layernorm constant and ramp rows") {
    auto g = Tensor::from({3}, {1, 1, 1});
    auto b = Tensor::from({3}, {0, 0, 0});
    auto y = layernorm(Tensor::from({1, 3}, {5, 5, 5}), g, b);
    for (float v : y.values()) CHECK(std::fabs(v) < 1e-4f);
    auto z = layernorm(Tensor::from({1, 3}, {1, 2, 3}), g, b);
    CHECK(z.values()[0] == doctest::Approx(-1.2247).epsilon(1e-3));
    CHECK(z.values()[1] == doctest::Approx(0.0).scale(1).epsilon(1e-4));
    CHECK(z.values()[2] == doctest::Approx(1.2247).epsilon(1e-3));
}

TEST_CASE("gelu and sigmoid reference points") {
    auto y = gelu(Tensor::from({2}, {0, 1}));
    CHECK(y.values()[0] == 0.0f);
    CHECK(y.values()[1] == doctest::Approx(0.8412).epsilon(1e-3));
    auto s = sigmoid(Tensor::from({1}, {0}));
    CHECK(s.values()[0] == doctest::Approx(0.5));
}

TEST_CASE("reshape and permute round-trip bit-exact") {
    Rng rng(11);
    auto x = Tensor::randn({2, 3, 4}, rng, 1.0f);
    auto p = permute(x, {2, 0, 1});
    CHECK(p.shape() == Shape{4, 2, 3});
    auto back = permute(p, {1, 2, 0});
    CHECK(back.values() == x.values());
    auto r = reshape(x, {6, 4});
    CHECK(reshape(r, {2, 3, 4}).values() == x.values());
}

TEST_CASE("slice and concat round-trip") {
    Rng rng(13);
    auto x = Tensor::randn({4, 6}, rng, 1.0f);
    auto left = slice(x, 1, 0, 2);
    auto right = slice(x, 1, 2, 4);
    auto glued = concat(left, right, 1);
    CHECK(glued.values() == x.values());
    auto top = slice(x, 0, 0, 1);
    auto rest = slice(x, 0, 1, 3);
    CHECK(concat(top, rest, 0).values() == x.values());
}

TEST_CASE("gather_rows pads with zeros") {
    auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto g = gather_rows(x, {1, -1, 0});
    CHECK(g.values() == std::vector<float>{4, 5, 6, 0, 0, 0, 1, 2, 3});
}

TEST_CASE("gradient accumulates across two uses") {
    auto x = Tensor::from({3}, {1, 2, 3}, true);
    auto loss = add(sum_all(x), sum_all(scale(x, 2.0f)));
    backward(loss);
    for (float g : x.grad()) CHECK(g == 3.0f);
}

TEST_CASE("matmul backward known values") {
    auto a = Tensor::from({2, 2}, {1, 0, 0, 1}, true);
    auto b = Tensor::from({2, 2}, {2, 3, 4, 5}, true);
    backward(sum_all(matmul(a, b)));
    CHECK(a.grad() == std::vector<float>{5, 9, 5, 9});
    CHECK(b.grad() == std::vector<float>{1, 1, 1, 1});
}

TEST_CASE("attention uniform when keys identical, masked entries exactly zero") {
    std::int64_t B = 1, nq = 2, nk = 4, d = 3;
    Rng rng(5);
    auto q = Tensor::randn({B, nq, d}, rng, 1.0f);
    auto k = Tensor::zeros({B, nk, d});
    for (std::int64_t j = 0; j < nk; ++j)
        for (std::int64_t c = 0; c < d; ++c) k.values()[size_t(j * d + c)] = float(c);
    auto v = Tensor::randn({B, nk, d}, rng, 1.0f);

    auto mask = std::make_shared<std::vector<std::uint8_t>>(size_t(nq * nk), std::uint8_t(1));
    (*mask)[1] = 0;  // query 0 cannot see key 1
    (*mask)[7] = 0;  // query 1 cannot see key 3
    AttnWeights<float> w;
    attention<float>(q, k, v, mask, 1, 1.0f, &w);
    // identical keys: every visible weight equals 1/(visible count)
    CHECK((*w.w)[0] == doctest::Approx(1.0 / 3));
    CHECK((*w.w)[1] == 0.0f);
    CHECK((*w.w)[2] == doctest::Approx(1.0 / 3));
    CHECK((*w.w)[3] == doctest::Approx(1.0 / 3));
    CHECK((*w.w)[7] == 0.0f);
    for (std::int64_t qi = 0; qi < nq; ++qi) {
        double s = 0;
        for (std::int64_t j = 0; j < nk; ++j) s += (*w.w)[size_t(qi * nk + j)];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("attention with single key passes value through") {
    Rng rng(9);
    auto q = Tensor::randn({2, 3, 4}, rng, 1.0f);
    auto k = Tensor::randn({2, 1, 4}, rng, 1.0f);
    auto v = Tensor::randn({2, 1, 4}, rng, 1.0f);
    auto out = attention<float>(q, k, v, nullptr, 0, 0.5f);
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t qi = 0; qi < 3; ++qi)
            for (std::int64_t c = 0; c < 4; ++c)
                CHECK(out.values()[size_t((b * 3 + qi) * 4 + c)] ==
                      doctest::Approx(v.values()[size_t(b * 4 + c)]).epsilon(1e-6));
}

TEST_CASE("attention mask permutation invariance") {
    // permuting masked-out keys (and their values) must not change the output
    std::int64_t B = 1, nq = 2, nk = 5, d = 4;
    Rng rng(21);
    auto q = Tensor::randn({B, nq, d}, rng, 1.0f);
    auto k = Tensor::randn({B, nk, d}, rng, 1.0f);
    auto v = Tensor::randn({B, nk, d}, rng, 1.0f);
    auto mask = std::make_shared<std::vector<std::uint8_t>>(size_t(nq * nk), std::uint8_t(0));
    // visible: keys 0 and 2 for both queries
    for (std::int64_t qi = 0; qi < nq; ++qi) {
        (*mask)[size_t(qi * nk) + 0] = 1;
        (*mask)[size_t(qi * nk) + 2] = 1;
    }
    auto out1 = attention<float>(q, k, v, mask, 1, 0.7f);
    // scramble the hidden keys 1,3,4
    auto k2 = k, v2 = v;
    auto swap_row = [d](Tensor& t, std::int64_t i, std::int64_t j) {
        for (std::int64_t c = 0; c < d; ++c)
            std::swap(t.values()[size_t(i * d + c)], t.values()[size_t(j * d + c)]);
    };
    swap_row(k2, 1, 4);
    swap_row(v2, 1, 4);
    auto out2 = attention<float>(q, k2, v2, mask, 1, 0.7f);
    CHECK(out1.values() == out2.values());
}

TEST_CASE("no-grad guard suppresses graph recording") {
    auto x = Tensor::from({2}, {1, 2}, true);
    NoGradGuard ng;
    auto y = scale(x, 3.0f);
    CHECK(!y.requires_grad());
    CHECK(y.node()->parents.empty());
}

TEST_CASE("rope zero position is identity") {
    Rng rng(3);
    auto x = Tensor::randn({3, 8}, rng, 1.0f);
    auto y = rope_rows(x, {0, 0, 0}, 0, 8);
    CHECK(y.values() == x.values());
}

TEST_CASE("rope preserves pair norms") {
    Rng rng(4);
    auto x = Tensor::randn({2, 6}, rng, 1.0f);
    auto y = rope_rows(x, {5, 17}, 0, 6);
    for (std::int64_t i = 0; i < 2; ++i)
        for (std::int64_t p = 0; p < 3; ++p) {
            auto n0 = std::hypot(x.values()[size_t(i * 6 + 2 * p)],
                                 x.values()[size_t(i * 6 + 2 * p + 1)]);
            auto n1 = std::hypot(y.values()[size_t(i * 6 + 2 * p)],
                                 y.values()[size_t(i * 6 + 2 * p + 1)]);
            CHECK(n0 == doctest::Approx(n1).epsilon(1e-5));
        }
}

TEST_CASE("conv1d valid correlation") {
    auto x = Tensor::from({1, 5}, {1, 2, 3, 4, 5});
    auto y = conv1d_rows(x, std::vector<float>{1, 0, -1});
    CHECK(y.shape() == Shape{1, 3});
    CHECK(y.values() == std::vector<float>{-2, -2, -2});
}
