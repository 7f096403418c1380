// Metric tests: closed-form PSNR values, a naive sliding-window SSIM oracle,
// multiscale degeneracies, monotonicity ladders, and averaging-order checks.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "dnerv/metrics.hpp"
#include "doctest.h"

using namespace dnerv;

namespace {

Frame make_frame(int64_t h, int64_t w, float v) {
    Frame f;
    f.h = h;
    f.w = w;
    f.px.assign((size_t)(3 * h * w), v);
    return f;
}

Frame random_frame(std::mt19937_64& rng, int64_t h, int64_t w) {
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    Frame f;
    f.h = h;
    f.w = w;
    f.px.resize((size_t)(3 * h * w));
    for (auto& v : f.px) v = d(rng);
    return f;
}

Frame add_noise(const Frame& f, std::mt19937_64& rng, double sigma) {
    std::normal_distribution<double> d(0.0, sigma);
    Frame o = f;
    for (auto& v : o.px) v = (float)std::clamp((double)v + d(rng), 0.0, 1.0);
    return o;
}

// Naive SSIM oracle: explicit 11x11 Gaussian window at every valid position,
// no separable filtering, all in double.
double naive_ssim(const Frame& a, const Frame& b) {
    const int k = 11;
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double g[k][k];
    double sum = 0.0;
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
            double dy = i - 5.0, dx = j - 5.0;
            g[i][j] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
            sum += g[i][j];
        }
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) g[i][j] /= sum;
    double total = 0.0;
    int64_t count = 0;
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y + k <= a.h; ++y)
            for (int64_t x = 0; x + k <= a.w; ++x) {
                double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < k; ++j) {
                        double va = a.at(c, y + i, x + j), vb = b.at(c, y + i, x + j);
                        ma += g[i][j] * va;
                        mb += g[i][j] * vb;
                        saa += g[i][j] * va * va;
                        sbb += g[i][j] * vb * vb;
                        sab += g[i][j] * va * vb;
                    }
                double va_ = saa - ma * ma, vb_ = sbb - mb * mb, cov = sab - ma * mb;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                         ((ma * ma + mb * mb + c1) * (va_ + vb_ + c2));
                ++count;
            }
    return total / (double)count;
}

}  // namespace

TEST_CASE("psnr closed forms") {
    Frame a = make_frame(16, 16, 0.5f);
    CHECK(psnr(a, a) == 100.0);  // zero MSE hits the cap

    Frame zeros = make_frame(16, 16, 0.0f), ones = make_frame(16, 16, 1.0f);
    CHECK(psnr(zeros, ones) == doctest::Approx(0.0).epsilon(1e-12));

    // Uniform offset of 1/255: -10*log10((1/255)^2) = 48.1308 dB.
    Frame off = make_frame(16, 16, 0.5f + 1.0f / 255.0f);
    CHECK(psnr(a, off) == doctest::Approx(-10.0 * std::log10(1.0 / (255.0 * 255.0)))
                              .epsilon(1e-4));
}

TEST_CASE("psnr symmetry and shape errors") {
    std::mt19937_64 rng(1);
    Frame a = random_frame(rng, 12, 13), b = random_frame(rng, 12, 13);
    CHECK(psnr(a, b) == psnr(b, a));  // exact
    Frame c = random_frame(rng, 12, 14);
    CHECK_THROWS_AS((void)psnr(a, c), TensorError);
}

TEST_CASE("psnr strictly decreases along a noise ladder") {
    std::mt19937_64 rng(2);
    Frame a = random_frame(rng, 24, 24);
    double prev = 1e9;
    for (double sigma : {0.005, 0.02, 0.05, 0.1}) {
        std::mt19937_64 r2(7);
        double p = psnr(a, add_noise(a, r2, sigma));
        CHECK(p < prev);
        prev = p;
    }
}

TEST_CASE("ssim identities and naive oracle") {
    std::mt19937_64 rng(3);
    Frame a = random_frame(rng, 16, 20), b = random_frame(rng, 16, 20);
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
    CHECK(ssim(a, b) == doctest::Approx(naive_ssim(a, b)).epsilon(1e-6));

    // Slightly correlated pair too (noise around a shared base).
    Frame c = add_noise(a, rng, 0.05);
    CHECK(ssim(a, c) == doctest::Approx(naive_ssim(a, c)).epsilon(1e-6));
}

TEST_CASE("ssim of a pattern and its negation is negative") {
    // 0.5 + s and 0.5 - s for a zero-mean pattern s: covariance flips sign.
    Frame a = make_frame(16, 16, 0.5f), b = a;
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < 16; ++y)
            for (int64_t x = 0; x < 16; ++x) {
                float s = 0.3f * (float)std::sin(0.7 * x + 0.9 * y);
                a.at(c, y, x) += s;
                b.at(c, y, x) -= s;
            }
    CHECK(ssim(a, b) < 0.0);
}

TEST_CASE("ssim rejects frames smaller than the window") {
    Frame tiny = make_frame(8, 12, 0.5f);
    CHECK_THROWS_AS((void)ssim(tiny, tiny), TensorError);
}

TEST_CASE("ms_ssim identities and degenerate single scale") {
    std::mt19937_64 rng(4);
    Frame a = random_frame(rng, 32, 40), b = random_frame(rng, 32, 40);
    CHECK(ms_ssim(a, a) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(ms_ssim(a, b, 1) == doctest::Approx(ssim(a, b)).epsilon(1e-12));
    double v = ms_ssim(a, b);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
}

TEST_CASE("ms_ssim strictly decreases along a noise ladder") {
    std::mt19937_64 rng(5);
    Frame a = random_frame(rng, 48, 48);
    double prev = 2.0;
    for (double sigma : {0.01, 0.05, 0.1}) {
        std::mt19937_64 r2(11);
        double s = ms_ssim(a, add_noise(a, r2, sigma));
        CHECK(s < prev);
        prev = s;
    }
}

TEST_CASE("rd_point averaging order: per video then over videos") {
    std::mt19937_64 rng(6);
    // Video A: 2 frames with some distortion; video B: 5 identical frames.
    Video ga, gb, da, db;
    ga.id = da.id = "a";
    gb.id = db.id = "b";
    Frame base = random_frame(rng, 16, 16);
    for (int i = 0; i < 2; ++i) {
        ga.frames.push_back(base);
        da.frames.push_back(add_noise(base, rng, 0.05));
    }
    for (int i = 0; i < 5; ++i) {
        gb.frames.push_back(base);
        db.frames.push_back(base);
    }
    double pa = 0, ma = 0;
    for (int i = 0; i < 2; ++i) {
        pa += psnr(ga.frames[(size_t)i], da.frames[(size_t)i]) / 2.0;
        ma += ms_ssim(ga.frames[(size_t)i], da.frames[(size_t)i]) / 2.0;
    }
    // Video b is perfect: psnr cap 100, ms_ssim 1. Equal weight regardless of
    // frame counts.
    std::vector<VideoScore> per;
    RdPoint pt = rd_point("x", 1.5, {{&ga, &da}, {&gb, &db}}, &per);
    CHECK(pt.psnr_db == doctest::Approx((pa + 100.0) / 2.0).epsilon(1e-12));
    CHECK(pt.ms_ssim == doctest::Approx((ma + 1.0) / 2.0).epsilon(1e-9));
    REQUIRE(per.size() == 2);
    CHECK(per[1].psnr_db == 100.0);
    CHECK(per[1].ms_ssim == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(pt.bpp == 1.5);
}

TEST_CASE("rd_point identity and error cases") {
    std::mt19937_64 rng(7);
    Video g, d;
    g.id = d.id = "v";
    g.frames.push_back(random_frame(rng, 16, 16));
    d.frames = g.frames;
    RdPoint pt = rd_point("id", 0.5, {{&g, &d}});
    CHECK(pt.psnr_db == 100.0);
    CHECK(pt.ms_ssim == doctest::Approx(1.0).epsilon(1e-9));

    Video d2 = d;
    d2.frames.push_back(d.frames[0]);
    CHECK_THROWS_WITH_AS((void)rd_point("x", 0.5, {{&g, &d2}}), doctest::Contains("mismatch"),
                         TensorError);
    CHECK_THROWS_AS((void)rd_point("x", 0.0, {{&g, &d}}), TensorError);  // bpp must be > 0
}
