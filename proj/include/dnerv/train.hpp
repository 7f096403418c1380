// Objective, optimizer and schedule, clip dataset pipeline, synthetic corpus
// generator, and the inpainting mask protocol.
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dnerv/io.hpp"
#include "dnerv/model.hpp"
#include "dnerv/tensor.hpp"

namespace dnerv {

struct TrainConfig {
    double lr_peak = 5e-4;
    int64_t batch_size = 4;
    int64_t epochs = 100;
    int64_t warmup_epochs = 20;
    double alpha = 0.7;  // SSIM weight in the loss
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    uint64_t seed = 1;

    void validate() const {
        check(epochs >= 0 && warmup_epochs >= 0, "train config: negative epoch counts");
        check(epochs == 0 || warmup_epochs < epochs,
              "train config: warmup_epochs must be < epochs");
        check(alpha >= 0.0 && alpha <= 1.0, "train config: alpha must be in [0,1]");
        check(batch_size >= 1, "train config: batch_size must be >= 1");
    }
};

struct MaskSpec {
    int64_t boxes_per_frame = 5;
    int64_t box_width = 8;
    uint64_t seed = 0;
};

struct ClipBatch {
    Tensor<float> key0, key1;        // [B,3,H,W]
    Tensor<float> frames;            // [B,3,H,W,S]
    std::vector<double> t_indices;   // 0/S .. (S-1)/S
    std::vector<std::string> video_ids;
    Tensor<float> masks;             // optional [B,1,H,W,S], 1 = visible
};

// ---------------------------------------------------------------------------
// Loss. Differentiable single-scale SSIM with an 11x11 Gaussian window is
// built from the tensor op set so gradients come from the tape.

template <typename T>
Tensor<T> ssim_gaussian_kernel() {
    const int k = 11;
    std::vector<double> g(k);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
        double x = i - (k - 1) / 2.0;
        g[(size_t)i] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
        sum += g[(size_t)i];
    }
    // Block-diagonal [3,3,11,11]: each channel filtered independently.
    std::vector<T> w((size_t)(3 * 3 * k * k), T(0));
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j)
                w[(size_t)(((c * 3 + c) * k + i) * k + j)] =
                    (T)(g[(size_t)i] * g[(size_t)j] / (sum * sum));
    return Tensor<T>::from({3, 3, k, k}, std::move(w));
}

// Mean SSIM over valid windows of a [B,3,H,W] pair, as a graph scalar.
template <typename T>
Tensor<T> ssim_score(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.dim(2) >= 11 && a.dim(3) >= 11,
          "ssim_score: frame " + shape_str(a.shape()) + " smaller than the 11x11 window");
    const T c1 = (T)1e-4, c2 = (T)9e-4;
    Tensor<T> kern = ssim_gaussian_kernel<T>();
    Tensor<T> none;
    auto filt = [&](const Tensor<T>& x) { return conv2d(x, kern, none, 1, 0); };
    Tensor<T> mu_a = filt(a), mu_b = filt(b);
    Tensor<T> e_aa = filt(mul(a, a)), e_bb = filt(mul(b, b)), e_ab = filt(mul(a, b));
    Tensor<T> mu_ab = mul(mu_a, mu_b);
    Tensor<T> sa = sub(e_aa, mul(mu_a, mu_a));
    Tensor<T> sb = sub(e_bb, mul(mu_b, mu_b));
    Tensor<T> sab = sub(e_ab, mu_ab);
    Tensor<T> num = mul(add_scalar(scale(mu_ab, T(2)), c1), add_scalar(scale(sab, T(2)), c2));
    Tensor<T> den = mul(add_scalar(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), c1),
                        add_scalar(add(sa, sb), c2));
    return mean(div(num, den));
}

// Eq-style objective: mean over frames of L1 + alpha*(1 - SSIM). When a mask
// is given ([B,1,H,W,S], 1 = visible), masked pixels are excluded from the L1
// statistics and zeroed out of both inputs before the SSIM term, so altering
// ground truth inside masks cannot change the loss.
template <typename T>
Tensor<T> composite_loss(const Tensor<T>& pred, const Tensor<T>& gt, double alpha,
                         const Tensor<T>& mask = {}) {
    check_same_shape(pred, gt, "composite_loss");
    check(pred.shape().size() == 5, "composite_loss: [B,3,H,W,S] expected");
    int64_t s = pred.shape().back();
    if (mask.defined())
        check(mask.dim(0) == pred.dim(0) && mask.dim(1) == 1 && mask.dim(2) == pred.dim(2) &&
                  mask.dim(3) == pred.dim(3) && mask.shape().back() == s,
              "composite_loss: mask shape " + shape_str(mask.shape()) + " vs pred " +
                  shape_str(pred.shape()));
    Tensor<T> total;
    for (int64_t t = 0; t < s; ++t) {
        Tensor<T> p = select_last(pred, t);
        Tensor<T> g = select_last(gt, t);
        Tensor<T> l1, sim;
        if (mask.defined()) {
            Tensor<T> mt = select_last(mask, t);  // [B,1,H,W], constant
            // Expand to 3 channels.
            Tensor<T> m3 = concat_channels(concat_channels(mt, mt), mt);
            T visible = T(0);
            for (T v : m3.data()) visible += v;
            check(visible > T(0), "composite_loss: fully masked frame");
            Tensor<T> pm = mul(p, m3), gm = mul(g, m3);
            l1 = scale(sum(absval(sub(pm, gm))), T(1) / visible);
            sim = ssim_score(pm, gm);
        } else {
            l1 = mean(absval(sub(p, g)));
            sim = ssim_score(p, g);
        }
        Tensor<T> term = add(l1, scale(add_scalar(scale(sim, T(-1)), T(1)), (T)alpha));
        total = total.defined() ? add(total, term) : term;
    }
    return scale(total, T(1) / (T)s);
}

// ---------------------------------------------------------------------------
// Optimizer and schedule.

struct AdamState {
    std::vector<std::vector<float>> m, v;
    int64_t step = 0;
};

void adamw_init(AdamState& st, const ParamStore<float>& params);
void adamw_step(ParamStore<float>& params, AdamState& st, double lr, double beta1,
                double beta2, double eps, double weight_decay);

double lr_at(int64_t step, int64_t total_steps, int64_t warmup_steps, double lr_peak);

// ---------------------------------------------------------------------------
// Clip layout and data pipeline.

struct ClipLayout {
    int64_t n_clips = 0;
    int64_t used_frames = 0;  // n_clips * S + 1, trailing frames dropped
};

ClipLayout build_clips(int64_t n_frames, int64_t clip_len, const std::string& video_id = "");

struct ClipRef {
    int64_t video = 0;
    int64_t clip = 0;  // clip j covers frames [j*S, (j+1)*S)
};

Tensor<float> frame_to_tensor(const Frame& f);
Frame tensor_to_frame(const Tensor<float>& t, int64_t b);            // from [B,3,H,W]
Frame clip_frame(const Tensor<float>& t, int64_t b, int64_t s);      // from [B,3,H,W,S]

ClipBatch make_clip_batch(const std::vector<Video>& dataset, const std::vector<ClipRef>& refs,
                          int64_t clip_len);

// Deterministic per-frame box mask; 0 inside boxes, 1 elsewhere.
std::vector<float> mask_for_frame(const MaskSpec& spec, uint64_t video_ord,
                                  uint64_t frame_index, int64_t h, int64_t w);
void apply_masks(ClipBatch& batch, const MaskSpec& spec,
                 const std::vector<ClipRef>& refs);

// ---------------------------------------------------------------------------
// Synthetic corpus: per class a motion program, per video random appearance.

std::vector<Video> synth_corpus(int64_t n_videos, int64_t n_classes, int64_t frames,
                                int64_t h, int64_t w, uint64_t seed);

// ---------------------------------------------------------------------------
// Training loop.

struct TrainOptions {
    ModelConfig model;
    TrainConfig train;
    std::optional<MaskSpec> masks;
    std::filesystem::path checkpoint_path;  // empty: skip writing
    std::filesystem::path metrics_path;     // empty: skip writing
    bool quiet = false;
};

struct TrainResult {
    ModelConfig config;
    ParamStore<float> params;
    double final_psnr = 0.0;
    int64_t steps = 0;
    std::string metrics_csv;
};

struct NanAbort : std::runtime_error {
    explicit NanAbort(const std::string& msg) : std::runtime_error(msg) {}
};

TrainResult train_loop(const std::vector<Video>& dataset, const TrainOptions& opt);

// Reconstruction of a full video from a trained model: n_clips*S frames from
// the network plus the trailing boundary keyframe.
Video reconstruct_video(const Model<float>& model, const std::string& id,
                        const std::vector<Frame>& keyframes, int64_t n_clips);
Video reconstruct_video_nerv(const Model<float>& model, const std::string& id,
                             int64_t first_global, int64_t n_frames, int64_t total_frames);

}  // namespace dnerv
