#include "dnerv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>

namespace dnerv {

double psnr(const std::vector<float>& a, const std::vector<float>& b, double cap_db) {
    check(a.size() == b.size(), "psnr: size mismatch " + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()));
    check(!a.empty(), "psnr: empty input");
    double mse = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = (double)a[i] - (double)b[i];
        mse += d * d;
    }
    mse /= (double)a.size();
    if (mse == 0.0) return cap_db;
    return std::min(cap_db, -10.0 * std::log10(mse));
}

double psnr(const Frame& a, const Frame& b, double cap_db) {
    check(a.h == b.h && a.w == b.w, "psnr: frame size mismatch");
    return psnr(a.px, b.px, cap_db);
}

namespace {

constexpr int kWin = 11;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::vector<double> gaussian_taps() {
    std::vector<double> g(kWin);
    double sum = 0.0;
    for (int i = 0; i < kWin; ++i) {
        double x = i - (kWin - 1) / 2.0;
        g[i] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
        sum += g[i];
    }
    for (auto& v : g) v /= sum;
    return g;
}

// Valid separable Gaussian filter of one [h,w] plane.
std::vector<double> gfilter(const std::vector<double>& in, int64_t h, int64_t w) {
    static const std::vector<double> taps = gaussian_taps();
    int64_t oh = h - kWin + 1, ow = w - kWin + 1;
    std::vector<double> tmp((size_t)(h * ow));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int k = 0; k < kWin; ++k) acc += taps[(size_t)k] * in[(size_t)(y * w + x + k)];
            tmp[(size_t)(y * ow + x)] = acc;
        }
    std::vector<double> out((size_t)(oh * ow));
    for (int64_t y = 0; y < oh; ++y)
        for (int64_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int k = 0; k < kWin; ++k)
                acc += taps[(size_t)k] * tmp[(size_t)((y + k) * ow + x)];
            out[(size_t)(y * ow + x)] = acc;
        }
    return out;
}

struct SsimSums {
    double ssim = 0.0;  // mean of per-window luminance*cs
    double cs = 0.0;    // mean of per-window contrast-structure term
};

SsimSums ssim_channel(const double* a, const double* b, int64_t h, int64_t w) {
    std::vector<double> va(a, a + h * w), vb(b, b + h * w);
    std::vector<double> aa((size_t)(h * w)), bb((size_t)(h * w)), ab((size_t)(h * w));
    for (int64_t i = 0; i < h * w; ++i) {
        aa[(size_t)i] = va[(size_t)i] * va[(size_t)i];
        bb[(size_t)i] = vb[(size_t)i] * vb[(size_t)i];
        ab[(size_t)i] = va[(size_t)i] * vb[(size_t)i];
    }
    auto mu_a = gfilter(va, h, w), mu_b = gfilter(vb, h, w);
    auto e_aa = gfilter(aa, h, w), e_bb = gfilter(bb, h, w), e_ab = gfilter(ab, h, w);
    SsimSums s;
    for (size_t i = 0; i < mu_a.size(); ++i) {
        double ma = mu_a[i], mb = mu_b[i];
        double sa = e_aa[i] - ma * ma, sb = e_bb[i] - mb * mb, sab = e_ab[i] - ma * mb;
        double l = (2 * ma * mb + kC1) / (ma * ma + mb * mb + kC1);
        double cs = (2 * sab + kC2) / (sa + sb + kC2);
        s.ssim += l * cs;
        s.cs += cs;
    }
    s.ssim /= (double)mu_a.size();
    s.cs /= (double)mu_a.size();
    return s;
}

SsimSums ssim_frame(const Frame& a, const Frame& b) {
    check(a.h == b.h && a.w == b.w, "ssim: frame size mismatch");
    check(a.h >= kWin && a.w >= kWin,
          "ssim: frame " + std::to_string(a.w) + "x" + std::to_string(a.h) +
              " smaller than the 11x11 window");
    std::vector<double> da(a.px.begin(), a.px.end()), db(b.px.begin(), b.px.end());
    SsimSums acc;
    for (int64_t c = 0; c < 3; ++c) {
        SsimSums s = ssim_channel(da.data() + c * a.h * a.w, db.data() + c * a.h * a.w, a.h,
                                  a.w);
        acc.ssim += s.ssim;
        acc.cs += s.cs;
    }
    acc.ssim /= 3.0;
    acc.cs /= 3.0;
    return acc;
}

Frame downsample2(const Frame& f) {
    Frame o;
    o.h = f.h / 2;
    o.w = f.w / 2;
    o.px.resize((size_t)(3 * o.h * o.w));
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < o.h; ++y)
            for (int64_t x = 0; x < o.w; ++x)
                o.at(c, y, x) = 0.25f * (f.at(c, 2 * y, 2 * x) + f.at(c, 2 * y, 2 * x + 1) +
                                         f.at(c, 2 * y + 1, 2 * x) +
                                         f.at(c, 2 * y + 1, 2 * x + 1));
    return o;
}

}  // namespace

double ssim(const Frame& a, const Frame& b) { return ssim_frame(a, b).ssim; }

double ms_ssim(const Frame& a, const Frame& b, int scales) {
    static const double kWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    check(scales >= 1 && scales <= 5, "ms_ssim: scales must be in 1..5");
    int usable = 1;
    int64_t m = std::min(a.h, a.w);
    while (usable < scales && (m >> usable) >= kWin) ++usable;
    if (usable < scales) {
        static std::set<std::tuple<int64_t, int64_t, int>> warned;
        if (warned.insert({a.w, a.h, scales}).second)
            std::cerr << "ms_ssim: frame " << a.w << "x" << a.h << " too small for " << scales
                      << " scales, using " << usable << "\n";
        scales = usable;
    }
    double wsum = 0.0;
    for (int i = 0; i < scales; ++i) wsum += kWeights[i];

    Frame fa = a, fb = b;
    double score = 1.0;
    for (int s = 0; s < scales; ++s) {
        SsimSums sums = ssim_frame(fa, fb);
        double wgt = kWeights[s] / wsum;
        double term = (s == scales - 1) ? sums.ssim : sums.cs;
        score *= std::pow(std::max(term, 0.0), wgt);
        if (s + 1 < scales) {
            fa = downsample2(fa);
            fb = downsample2(fb);
        }
    }
    return std::clamp(score, 0.0, 1.0);
}

RdPoint rd_point(const std::string& label, double bpp,
                 const std::vector<std::pair<const Video*, const Video*>>& pairs,
                 std::vector<VideoScore>* per_video) {
    check(!pairs.empty(), "rd_point: no videos");
    check(bpp > 0.0, "rd_point: bpp must be positive");
    RdPoint pt;
    pt.label = label;
    pt.bpp = bpp;
    for (const auto& [gt, dec] : pairs) {
        check(gt->frames.size() == dec->frames.size(),
              "rd_point: frame count mismatch for video " + gt->id + ": " +
                  std::to_string(gt->frames.size()) + " vs " +
                  std::to_string(dec->frames.size()));
        VideoScore vs;
        vs.id = gt->id;
        for (size_t i = 0; i < gt->frames.size(); ++i) {
            vs.psnr_db += psnr(gt->frames[i], dec->frames[i]);
            vs.ms_ssim += ms_ssim(gt->frames[i], dec->frames[i]);
        }
        vs.psnr_db /= (double)gt->frames.size();
        vs.ms_ssim /= (double)gt->frames.size();
        pt.psnr_db += vs.psnr_db;
        pt.ms_ssim += vs.ms_ssim;
        if (per_video) per_video->push_back(vs);
    }
    pt.psnr_db /= (double)pairs.size();
    pt.ms_ssim /= (double)pairs.size();
    return pt;
}

}  // namespace dnerv
