// Reconstruction quality metrics and rate-distortion point assembly.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dnerv/io.hpp"

namespace dnerv {

struct RdPoint {
    std::string label;
    double bpp = 0.0;
    double psnr_db = 0.0;
    double ms_ssim = 0.0;
};

// -10*log10(MSE) for unit-range inputs; capped when MSE is zero.
double psnr(const std::vector<float>& a, const std::vector<float>& b, double cap_db = 100.0);
double psnr(const Frame& a, const Frame& b, double cap_db = 100.0);

// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), valid windows,
// averaged over channels and positions. Frames are planar [3,H,W] in [0,1].
double ssim(const Frame& a, const Frame& b);

// Multi-scale SSIM. The scale count is reduced (with renormalized weights and
// a stderr warning) when the frame is too small for the requested scales.
double ms_ssim(const Frame& a, const Frame& b, int scales = 5);

// Per-video mean PSNR / MS-SSIM, then averaged over videos.
struct VideoScore {
    std::string id;
    double psnr_db = 0.0;
    double ms_ssim = 0.0;
};
RdPoint rd_point(const std::string& label, double bpp,
                 const std::vector<std::pair<const Video*, const Video*>>& pairs,
                 std::vector<VideoScore>* per_video = nullptr);

}  // namespace dnerv
