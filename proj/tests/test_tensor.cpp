// Tensor-core tests: independent naive oracles for every compute-heavy op,
// finite-difference gradient checks, and structural invariants.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "dnerv/tensor.hpp"
#include "doctest.h"

using namespace dnerv;
using D = Tensor<double>;

namespace {

std::vector<double> randn(std::mt19937_64& rng, int64_t n, double sd = 1.0) {
    std::normal_distribution<double> d(0.0, sd);
    std::vector<double> v((size_t)n);
    for (auto& x : v) x = d(rng);
    return v;
}

// Six-loop reference convolution (zero padding).
std::vector<double> naive_conv(const std::vector<double>& x, const std::vector<double>& w,
                               const std::vector<double>& b, int64_t bs, int64_t cin,
                               int64_t h, int64_t ww, int64_t cout, int64_t k, int64_t stride,
                               int64_t pad) {
    int64_t oh = (h + 2 * pad - k) / stride + 1, ow = (ww + 2 * pad - k) / stride + 1;
    std::vector<double> out((size_t)(bs * cout * oh * ow), 0.0);
    for (int64_t bi = 0; bi < bs; ++bi)
        for (int64_t co = 0; co < cout; ++co)
            for (int64_t oy = 0; oy < oh; ++oy)
                for (int64_t ox = 0; ox < ow; ++ox) {
                    double acc = b.empty() ? 0.0 : b[(size_t)co];
                    for (int64_t ci = 0; ci < cin; ++ci)
                        for (int64_t ky = 0; ky < k; ++ky)
                            for (int64_t kx = 0; kx < k; ++kx) {
                                int64_t iy = oy * stride + ky - pad;
                                int64_t ix = ox * stride + kx - pad;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= ww) continue;
                                acc += x[(size_t)(((bi * cin + ci) * h + iy) * ww + ix)] *
                                       w[(size_t)(((co * cin + ci) * k + ky) * k + kx)];
                            }
                    out[(size_t)(((bi * cout + co) * oh + oy) * ow + ox)] = acc;
                }
    return out;
}

}  // namespace

TEST_CASE("gemm against naive triple loop") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        int64_t m = 1 + (int64_t)(rng() % 7), k = 1 + (int64_t)(rng() % 9),
                n = 1 + (int64_t)(rng() % 8);
        auto A = randn(rng, m * k), B = randn(rng, k * n), Bt = randn(rng, n * k);
        std::vector<double> C((size_t)(m * n), 0.0), ref((size_t)(m * n), 0.0);
        gemm_nn(A.data(), B.data(), C.data(), m, k, n);
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j)
                for (int64_t l = 0; l < k; ++l)
                    ref[(size_t)(i * n + j)] += A[(size_t)(i * k + l)] * B[(size_t)(l * n + j)];
        for (size_t i = 0; i < C.size(); ++i) CHECK(C[i] == doctest::Approx(ref[i]).epsilon(1e-12));

        // nt: C += A(m,k) * B(n,k)^T
        std::fill(C.begin(), C.end(), 0.0);
        std::fill(ref.begin(), ref.end(), 0.0);
        gemm_nt(A.data(), Bt.data(), C.data(), m, k, n);
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j)
                for (int64_t l = 0; l < k; ++l)
                    ref[(size_t)(i * n + j)] +=
                        A[(size_t)(i * k + l)] * Bt[(size_t)(j * k + l)];
        for (size_t i = 0; i < C.size(); ++i) CHECK(C[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
}

TEST_CASE("conv2d forward equals six-loop oracle") {
    std::mt19937_64 rng(7);
    struct Cfg { int64_t bs, cin, h, w, cout, k, stride, pad; };
    for (Cfg c : {Cfg{2, 3, 6, 7, 4, 3, 1, 1}, Cfg{1, 2, 5, 5, 3, 3, 1, 0},
                  Cfg{1, 4, 8, 8, 2, 1, 1, 0}, Cfg{2, 2, 9, 9, 3, 3, 2, 1},
                  Cfg{1, 1, 11, 11, 1, 5, 2, 2}}) {
        auto xv = randn(rng, c.bs * c.cin * c.h * c.w);
        auto wv = randn(rng, c.cout * c.cin * c.k * c.k);
        auto bv = randn(rng, c.cout);
        D x = D::from({c.bs, c.cin, c.h, c.w}, xv);
        D w = D::from({c.cout, c.cin, c.k, c.k}, wv);
        D b = D::from({c.cout}, bv);
        D y = conv2d(x, w, b, c.stride, c.pad);
        auto ref = naive_conv(xv, wv, bv, c.bs, c.cin, c.h, c.w, c.cout, c.k, c.stride, c.pad);
        REQUIRE(y.size() == (int64_t)ref.size());
        for (size_t i = 0; i < ref.size(); ++i)
            CHECK(y.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
}

TEST_CASE("conv2d rejects inexact geometry and even kernels") {
    D x = D::zeros({1, 1, 6, 6});
    D w = D::zeros({1, 1, 4, 4});
    D none;
    CHECK_THROWS_AS((void)conv2d(x, w, none, 1, 0), TensorError);  // even kernel
    D w3 = D::zeros({1, 1, 3, 3});
    CHECK_THROWS_AS((void)conv2d(x, w3, none, 2, 0), TensorError);  // (6-3)%2 != 0
}

TEST_CASE("linear equals naive matmul") {
    std::mt19937_64 rng(23);
    auto xv = randn(rng, 4 * 5), wv = randn(rng, 5 * 3), bv = randn(rng, 3);
    D y = linear(D::from({4, 5}, xv), D::from({5, 3}, wv), D::from({3}, bv));
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 3; ++j) {
            double ref = bv[(size_t)j];
            for (int64_t l = 0; l < 5; ++l)
                ref += xv[(size_t)(i * 5 + l)] * wv[(size_t)(l * 3 + j)];
            CHECK(y.data()[(size_t)(i * 3 + j)] == doctest::Approx(ref).epsilon(1e-12));
        }
}

TEST_CASE("gelu reference values") {
    D x = D::from({3}, {0.0, 1.0, -1.0});
    D y = gelu(x);
    CHECK(y.data()[0] == doctest::Approx(0.0));
    CHECK(y.data()[1] == doctest::Approx(0.8413447461).epsilon(1e-9));   // 1 * Phi(1)
    CHECK(y.data()[2] == doctest::Approx(-0.1586552539).epsilon(1e-9));  // -1 * Phi(-1)
}

TEST_CASE("pixel shuffle/unshuffle are inverse bijections") {
    std::mt19937_64 rng(3);
    for (int64_t r : {2, 3}) {
        int64_t bs = 2, c = 4 * r * r, h = 3, w = 5;
        auto xv = randn(rng, bs * c * h * w);
        D x = D::from({bs, c, h, w}, xv);
        D y = pixel_shuffle(x, r);
        CHECK(y.shape() == Shape{bs, c / (r * r), h * r, w * r});
        D z = pixel_unshuffle(y, r);
        REQUIRE(z.shape() == x.shape());
        for (size_t i = 0; i < xv.size(); ++i) CHECK(z.data()[i] == xv[i]);  // bit-exact
    }
}

TEST_CASE("pixel_shuffle index formula") {
    // Standard layout: out[b, c, y*r+dy, x*r+dx] = in[b, (c*r + dy)*r + dx, y, x].
    int64_t r = 2, c = 2, h = 2, w = 2;
    std::vector<double> xv((size_t)(c * r * r * h * w));
    for (size_t i = 0; i < xv.size(); ++i) xv[i] = (double)i;
    D y = pixel_shuffle(D::from({1, c * r * r, h, w}, xv), r);
    for (int64_t cc = 0; cc < c; ++cc)
        for (int64_t yy = 0; yy < h * r; ++yy)
            for (int64_t xx = 0; xx < w * r; ++xx) {
                int64_t ci = (cc * r + yy % r) * r + xx % r;
                double expect = xv[(size_t)((ci * h + yy / r) * w + xx / r)];
                CHECK(y.data()[(size_t)((cc * h * r + yy) * w * r + xx)] == expect);
            }
}

TEST_CASE("bilinear_sample identities") {
    std::mt19937_64 rng(5);
    int64_t bs = 1, c = 2, h = 4, w = 5;
    auto sv = randn(rng, bs * c * h * w);
    D src = D::from({bs, c, h, w}, sv);

    D zero_flow = D::zeros({bs, 2, h, w});
    D out = bilinear_sample(src, zero_flow);
    for (size_t i = 0; i < sv.size(); ++i) CHECK(out.data()[i] == sv[i]);  // exact copy

    // Integer shift by (+1, 0) with border clamp on the last column.
    D shift = D::full({bs, 2, h, w}, 0.0);
    for (int64_t i = 0; i < h * w; ++i) shift.data()[(size_t)i] = 1.0;  // dx channel
    D out2 = bilinear_sample(src, shift);
    for (int64_t cc = 0; cc < c; ++cc)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                int64_t sx = std::min(x + 1, w - 1);
                CHECK(out2.data()[(size_t)((cc * h + y) * w + x)] ==
                      sv[(size_t)((cc * h + y) * w + sx)]);
            }
}

TEST_CASE("time_matmul equals naive per-channel matmul") {
    std::mt19937_64 rng(9);
    int64_t bs = 2, c = 3, h = 2, w = 2, t = 4;
    auto xv = randn(rng, bs * c * h * w * t);
    auto wv = randn(rng, c * t * t);
    D y = time_matmul(D::from({bs, c, h, w, t}, xv), D::from({c, t, t}, wv));
    for (int64_t bi = 0; bi < bs; ++bi)
        for (int64_t cc = 0; cc < c; ++cc)
            for (int64_t p = 0; p < h * w; ++p)
                for (int64_t j = 0; j < t; ++j) {
                    double ref = 0.0;
                    for (int64_t i = 0; i < t; ++i)
                        ref += xv[(size_t)(((bi * c + cc) * h * w + p) * t + i)] *
                               wv[(size_t)((cc * t + i) * t + j)];
                    CHECK(y.data()[(size_t)(((bi * c + cc) * h * w + p) * t + j)] ==
                          doctest::Approx(ref).epsilon(1e-12));
                }
}

TEST_CASE("elementwise and reduction gradient checks") {
    std::mt19937_64 rng(101);
    for (int seed = 0; seed < 6; ++seed) {
        auto av = randn(rng, 12), bv = randn(rng, 12);
        // Keep |a| away from 0 (absval kink) and |b| away from 0 (division).
        for (auto& v : av) v += (v >= 0 ? 0.5 : -0.5);
        for (auto& v : bv) v += (v >= 0 ? 0.5 : -0.5);
        D a = D::from({3, 4}, av, true);
        D b = D::from({3, 4}, bv, true);
        auto f = [&]() {
            D x = add(mul(a, b), div(a, b));
            x = sub(x, scale(b, 0.3));
            x = add_scalar(x, 0.25);
            return add(mean(absval(x)), scale(sum(mul(x, x)), 0.01));
        };
        CHECK(grad_check<double>(f, {a, b}) < 1e-6);
    }
}

TEST_CASE("activation gradient checks") {
    std::mt19937_64 rng(202);
    for (int seed = 0; seed < 4; ++seed) {
        D a = D::from({10}, randn(rng, 10), true);
        auto f = [&]() { return mean(mul(gelu(a), sigmoid(a))); };
        CHECK(grad_check<double>(f, {a}) < 1e-6);
    }
}

TEST_CASE("conv2d gradient check (x, w, b)") {
    std::mt19937_64 rng(303);
    for (int seed = 0; seed < 3; ++seed) {
        D x = D::from({2, 2, 5, 5}, randn(rng, 2 * 2 * 5 * 5), true);
        D w = D::from({3, 2, 3, 3}, randn(rng, 3 * 2 * 3 * 3, 0.4), true);
        D b = D::from({3}, randn(rng, 3), true);
        auto f = [&]() { return mean(mul(conv2d(x, w, b, 1, 1), conv2d(x, w, b, 1, 1))); };
        CHECK(grad_check<double>(f, {x, w, b}) < 1e-5);
    }
    // Strided, unpadded case.
    D x = D::from({1, 2, 7, 7}, randn(rng, 2 * 7 * 7), true);
    D w = D::from({2, 2, 3, 3}, randn(rng, 2 * 2 * 3 * 3, 0.4), true);
    D b = D::from({2}, randn(rng, 2), true);
    auto f = [&]() { return sum(conv2d(x, w, b, 2, 0)); };
    CHECK(grad_check<double>(f, {x, w, b}) < 1e-5);
}

TEST_CASE("linear gradient check") {
    std::mt19937_64 rng(404);
    D x = D::from({3, 4}, randn(rng, 12), true);
    D w = D::from({4, 5}, randn(rng, 20, 0.5), true);
    D b = D::from({5}, randn(rng, 5), true);
    auto f = [&]() { return mean(gelu(linear(x, w, b))); };
    CHECK(grad_check<double>(f, {x, w, b}) < 1e-6);
}

TEST_CASE("pixel shuffle/unshuffle gradient check") {
    std::mt19937_64 rng(505);
    D x = D::from({1, 8, 3, 3}, randn(rng, 72), true);
    auto f = [&]() { return mean(mul(pixel_shuffle(x, 2), pixel_shuffle(x, 2))); };
    CHECK(grad_check<double>(f, {x}) < 1e-6);
    D y = D::from({1, 2, 6, 6}, randn(rng, 72), true);
    auto g = [&]() { return sum(absval(pixel_unshuffle(y, 3))); };
    CHECK(grad_check<double>(g, {y}) < 1e-6);
}

TEST_CASE("bilinear_sample gradient check for src and flow") {
    std::mt19937_64 rng(606);
    for (int seed = 0; seed < 3; ++seed) {
        int64_t h = 5, w = 6;
        D src = D::from({1, 2, h, w}, randn(rng, 2 * h * w), true);
        // Flows strictly inside the frame and away from integer lattice points
        // (floor is non-differentiable there) and away from the border clamp.
        std::vector<double> fv((size_t)(2 * h * w));
        std::uniform_real_distribution<double> d(0.15, 0.85);
        for (int64_t i = 0; i < h * w; ++i) {
            int64_t x = i % w, y = i / w;
            fv[(size_t)i] = (x < w - 2 ? d(rng) : -d(rng));
            fv[(size_t)(h * w + i)] = (y < h - 2 ? d(rng) : -d(rng));
        }
        D flow = D::from({1, 2, h, w}, fv, true);
        auto f = [&]() {
            D o = bilinear_sample(src, flow);
            return mean(mul(o, o));
        };
        CHECK(grad_check<double>(f, {src, flow}, 1e-6) < 1e-4);
    }
}

TEST_CASE("time_matmul gradient check") {
    std::mt19937_64 rng(707);
    D x = D::from({1, 2, 2, 2, 3}, randn(rng, 24), true);
    D w = D::from({2, 3, 3}, randn(rng, 18, 0.5), true);
    auto f = [&]() { return mean(mul(time_matmul(x, w), time_matmul(x, w))); };
    CHECK(grad_check<double>(f, {x, w}) < 1e-6);
}

TEST_CASE("structural op gradient checks") {
    std::mt19937_64 rng(808);
    D a = D::from({1, 2, 3, 3}, randn(rng, 18), true);
    D b = D::from({1, 3, 3, 3}, randn(rng, 27), true);
    auto f = [&]() {
        D c = concat_channels(a, b);
        D s = slice_channels(c, 1, 4);
        return mean(mul(s, s));
    };
    CHECK(grad_check<double>(f, {a, b}) < 1e-6);

    D x = D::from({2, 6}, randn(rng, 12), true);
    auto g = [&]() { return sum(absval(reshape(x, {3, 4}))); };
    CHECK(grad_check<double>(g, {x}) < 1e-6);

    D p = D::from({1, 2, 2, 2}, randn(rng, 8), true);
    D q = D::from({1, 2, 2, 2}, randn(rng, 8), true);
    auto h = [&]() {
        D st = stack_last(std::vector<D>{p, q, p});
        return add(mean(mul(st, st)), sum(select_last(st, 1)));
    };
    CHECK(grad_check<double>(h, {p, q}) < 1e-6);
}

TEST_CASE("scale_bias_pixelwise gradient check and formula") {
    std::mt19937_64 rng(909);
    int64_t h = 3, w = 4;
    D x = D::from({2, 3, h, w}, randn(rng, 2 * 3 * h * w), true);
    D g = D::from({2, 1, h, w}, randn(rng, 2 * h * w), true);
    D b = D::from({2, 1, h, w}, randn(rng, 2 * h * w), true);
    D y = scale_bias_pixelwise(x, g, b);
    for (int64_t bi = 0; bi < 2; ++bi)
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t i = 0; i < h * w; ++i) {
                double expect = x.data()[(size_t)((bi * 3 + c) * h * w + i)] *
                                    g.data()[(size_t)(bi * h * w + i)] +
                                b.data()[(size_t)(bi * h * w + i)];
                CHECK(y.data()[(size_t)((bi * 3 + c) * h * w + i)] ==
                      doctest::Approx(expect).epsilon(1e-12));
            }
    auto f = [&]() {
        D o = scale_bias_pixelwise(x, g, b);
        return mean(mul(o, o));
    };
    CHECK(grad_check<double>(f, {x, g, b}) < 1e-6);
}

TEST_CASE("gradient accumulation through shared subexpressions") {
    D x = D::from({4}, {0.5, -1.5, 2.0, 0.25}, true);
    D y = add(mul(x, x), x);  // d/dx = 2x + 1
    backward(sum(y));
    for (int64_t i = 0; i < 4; ++i)
        CHECK(x.grad()[(size_t)i] == doctest::Approx(2.0 * x.data()[(size_t)i] + 1.0));
}

TEST_CASE("backward twice on one graph is an error") {
    D x = D::from({2}, {1.0, 2.0}, true);
    D l = sum(mul(x, x));
    backward(l);
    CHECK_THROWS_AS(backward(l), TensorError);
}

TEST_CASE("NoGradGuard suppresses graph building") {
    D x = D::from({2}, {1.0, 2.0}, true);
    D y;
    {
        NoGradGuard ng;
        y = mul(x, x);
    }
    CHECK_FALSE(y.requires_grad());
    backward(sum(y));  // nothing recorded: no gradient reaches x
    for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("shape errors carry both shapes") {
    D a = D::zeros({2, 3});
    D b = D::zeros({3, 2});
    CHECK_THROWS_WITH_AS((void)add(a, b), doctest::Contains("(2,3)"), TensorError);
}
