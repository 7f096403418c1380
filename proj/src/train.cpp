#include "dnerv/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <random>

#include "dnerv/metrics.hpp"

namespace dnerv {

// ---------------------------------------------------------------------------
// Optimizer.

void adamw_init(AdamState& st, const ParamStore<float>& params) {
    st.m.clear();
    st.v.clear();
    st.step = 0;
    for (const auto& [_, t] : params.items) {
        st.m.emplace_back((size_t)t.size(), 0.0f);
        st.v.emplace_back((size_t)t.size(), 0.0f);
    }
}

void adamw_step(ParamStore<float>& params, AdamState& st, double lr, double beta1,
                double beta2, double eps, double weight_decay) {
    check(st.m.size() == params.items.size(), "adamw_step: state does not match params");
    ++st.step;
    double bc1 = 1.0 - std::pow(beta1, (double)st.step);
    double bc2 = 1.0 - std::pow(beta2, (double)st.step);
    for (size_t pi = 0; pi < params.items.size(); ++pi) {
        auto& [name, t] = params.items[pi];
        auto& g = t.grad();
        auto& m = st.m[pi];
        auto& v = st.v[pi];
        for (int64_t i = 0; i < t.size(); ++i) {
            double gi = (double)g[(size_t)i];
            if (std::isnan(gi))
                throw NanAbort("NaN gradient in parameter '" + name + "' at element " +
                               std::to_string(i));
            double mi = beta1 * m[(size_t)i] + (1.0 - beta1) * gi;
            double vi = beta2 * v[(size_t)i] + (1.0 - beta2) * gi * gi;
            m[(size_t)i] = (float)mi;
            v[(size_t)i] = (float)vi;
            double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
            double p = (double)t.data()[(size_t)i];
            t.data()[(size_t)i] = (float)(p - lr * update - lr * weight_decay * p);
        }
    }
}

double lr_at(int64_t step, int64_t total_steps, int64_t warmup_steps, double lr_peak) {
    check(step >= 0 && step < total_steps, "lr_at: step out of range");
    if (warmup_steps > 0 && step < warmup_steps)
        return lr_peak * (double)step / (double)warmup_steps;
    double progress = (double)(step - warmup_steps) / (double)(total_steps - warmup_steps);
    return lr_peak * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// ---------------------------------------------------------------------------
// Clip layout and batches.

ClipLayout build_clips(int64_t n_frames, int64_t clip_len, const std::string& video_id) {
    check(n_frames >= clip_len + 1,
          "build_clips: need at least " + std::to_string(clip_len + 1) + " frames, video '" +
              video_id + "' has " + std::to_string(n_frames));
    ClipLayout l;
    l.n_clips = (n_frames - 1) / clip_len;
    l.used_frames = l.n_clips * clip_len + 1;
    if (l.used_frames < n_frames)
        std::cerr << "build_clips: video '" << video_id << "' truncated from " << n_frames
                  << " to " << l.used_frames << " frames\n";
    return l;
}

Tensor<float> frame_to_tensor(const Frame& f) {
    std::vector<float> v = f.px;
    return Tensor<float>::from({1, 3, f.h, f.w}, std::move(v));
}

Frame tensor_to_frame(const Tensor<float>& t, int64_t b) {
    check(t.shape().size() == 4 && t.dim(1) == 3, "tensor_to_frame: [B,3,H,W] expected");
    Frame f;
    f.h = t.dim(2);
    f.w = t.dim(3);
    int64_t n = 3 * f.h * f.w;
    f.px.assign(t.data().begin() + b * n, t.data().begin() + (b + 1) * n);
    return f;
}

Frame clip_frame(const Tensor<float>& t, int64_t b, int64_t s) {
    check(t.shape().size() == 5 && t.dim(1) == 3, "clip_frame: [B,3,H,W,S] expected");
    int64_t S = t.shape().back();
    Frame f;
    f.h = t.dim(2);
    f.w = t.dim(3);
    f.px.resize((size_t)(3 * f.h * f.w));
    int64_t n = 3 * f.h * f.w;
    for (int64_t i = 0; i < n; ++i) f.px[(size_t)i] = t.data()[(size_t)((b * n + i) * S + s)];
    return f;
}

ClipBatch make_clip_batch(const std::vector<Video>& dataset, const std::vector<ClipRef>& refs,
                          int64_t clip_len) {
    check(!refs.empty(), "make_clip_batch: empty batch");
    int64_t B = (int64_t)refs.size();
    const Frame& f0 = dataset[(size_t)refs[0].video].frames[0];
    int64_t h = f0.h, w = f0.w, plane = 3 * h * w;
    ClipBatch batch;
    std::vector<float> k0((size_t)(B * plane)), k1((size_t)(B * plane));
    std::vector<float> fr((size_t)(B * plane * clip_len));
    for (int64_t b = 0; b < B; ++b) {
        const Video& v = dataset[(size_t)refs[(size_t)b].video];
        int64_t start = refs[(size_t)b].clip * clip_len;
        check(start + clip_len < (int64_t)v.frames.size(),
              "make_clip_batch: clip out of range for video " + v.id);
        batch.video_ids.push_back(v.id);
        std::copy(v.frames[(size_t)start].px.begin(), v.frames[(size_t)start].px.end(),
                  k0.begin() + b * plane);
        std::copy(v.frames[(size_t)(start + clip_len)].px.begin(),
                  v.frames[(size_t)(start + clip_len)].px.end(), k1.begin() + b * plane);
        for (int64_t s = 0; s < clip_len; ++s) {
            const Frame& f = v.frames[(size_t)(start + s)];
            for (int64_t i = 0; i < plane; ++i)
                fr[(size_t)((b * plane + i) * clip_len + s)] = f.px[(size_t)i];
        }
    }
    batch.key0 = Tensor<float>::from({B, 3, h, w}, std::move(k0));
    batch.key1 = Tensor<float>::from({B, 3, h, w}, std::move(k1));
    batch.frames = Tensor<float>::from({B, 3, h, w, clip_len}, std::move(fr));
    for (int64_t s = 0; s < clip_len; ++s)
        batch.t_indices.push_back((double)s / (double)clip_len);
    return batch;
}

// ---------------------------------------------------------------------------
// Masks.

static uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::vector<float> mask_for_frame(const MaskSpec& spec, uint64_t video_ord,
                                  uint64_t frame_index, int64_t h, int64_t w) {
    check(spec.box_width >= 1, "mask: box_width must be >= 1");
    check(spec.box_width <= std::min(h, w),
          "mask: box_width " + std::to_string(spec.box_width) + " exceeds frame " +
              std::to_string(w) + "x" + std::to_string(h));
    std::vector<float> m((size_t)(h * w), 1.0f);
    std::mt19937_64 rng(mix64(spec.seed ^ mix64(video_ord * 0x10001 + frame_index)));
    std::uniform_int_distribution<int64_t> dy(0, h - spec.box_width);
    std::uniform_int_distribution<int64_t> dx(0, w - spec.box_width);
    for (int64_t b = 0; b < spec.boxes_per_frame; ++b) {
        int64_t y0 = dy(rng), x0 = dx(rng);
        for (int64_t y = y0; y < y0 + spec.box_width; ++y)
            for (int64_t x = x0; x < x0 + spec.box_width; ++x) m[(size_t)(y * w + x)] = 0.0f;
    }
    return m;
}

void apply_masks(ClipBatch& batch, const MaskSpec& spec, const std::vector<ClipRef>& refs) {
    int64_t B = batch.key0.dim(0), h = batch.key0.dim(2), w = batch.key0.dim(3);
    int64_t S = (int64_t)batch.t_indices.size();
    check((int64_t)refs.size() == B, "apply_masks: refs do not match batch");
    std::vector<float> m((size_t)(B * h * w * S));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t s = 0; s < S; ++s) {
            uint64_t frame = (uint64_t)(refs[(size_t)b].clip * S + s);
            auto mf = mask_for_frame(spec, (uint64_t)refs[(size_t)b].video, frame, h, w);
            for (int64_t i = 0; i < h * w; ++i)
                m[(size_t)((b * h * w + i) * S + s)] = mf[(size_t)i];
        }
    batch.masks = Tensor<float>::from({B, 1, h, w, S}, std::move(m));
}

// ---------------------------------------------------------------------------
// Synthetic corpus.

namespace {

struct MotionProgram {
    int type = 0;  // 0 translate, 1 orbit, 2 scale pulse
    double speed = 1.0;
    double angle = 0.0;
};

MotionProgram class_program(uint64_t seed, int64_t cls) {
    std::mt19937_64 rng(mix64(seed * 1000003ull + (uint64_t)cls));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    MotionProgram p;
    p.type = (int)(cls % 3);
    p.speed = 0.6 + 0.9 * u01(rng);
    p.angle = 2.0 * M_PI * u01(rng);
    return p;
}

}  // namespace

std::vector<Video> synth_corpus(int64_t n_videos, int64_t n_classes, int64_t frames,
                                int64_t h, int64_t w, uint64_t seed) {
    check(n_videos >= 1 && n_classes >= 1 && frames >= 2, "synth_corpus: bad arguments");
    std::vector<Video> out;
    for (int64_t vi = 0; vi < n_videos; ++vi) {
        int64_t cls = vi % n_classes;
        MotionProgram prog = class_program(seed, cls);
        std::mt19937_64 rng(mix64(seed ^ mix64((uint64_t)vi + 17)));
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        // Per-video appearance: background waves and two shape colors.
        double bga[3], bgb[3], bgp[3], col1[3], col2[3];
        for (int c = 0; c < 3; ++c) {
            bga[c] = 1.0 + 2.0 * u01(rng);
            bgb[c] = 1.0 + 2.0 * u01(rng);
            bgp[c] = 2.0 * M_PI * u01(rng);
            col1[c] = 0.1 + 0.8 * u01(rng);
            col2[c] = 0.1 + 0.8 * u01(rng);
        }
        double cx0 = 0.25 + 0.5 * u01(rng), cy0 = 0.25 + 0.5 * u01(rng);
        double cx1 = 0.25 + 0.5 * u01(rng), cy1 = 0.25 + 0.5 * u01(rng);
        double phase = 2.0 * M_PI * u01(rng);

        Video v;
        char id[32];
        std::snprintf(id, sizeof(id), "video_%03d", (int)vi);
        v.id = id;
        double rect_half = 0.12, circ_r = 0.10;
        for (int64_t fi = 0; fi < frames; ++fi) {
            double u = (double)fi / (double)(frames - 1);
            double rcx = cx0, rcy = cy0, ccx = cx1, ccy = cy1;
            double rh = rect_half, cr = circ_r;
            switch (prog.type) {
                case 0: {  // translation along a fixed direction
                    double d = 0.35 * prog.speed * u;
                    rcx += d * std::cos(prog.angle);
                    rcy += d * std::sin(prog.angle);
                    ccx -= d * std::cos(prog.angle);
                    ccy -= d * std::sin(prog.angle);
                    break;
                }
                case 1: {  // orbit around the frame center
                    double a = phase + 2.0 * M_PI * prog.speed * u;
                    rcx = 0.5 + 0.25 * std::cos(a);
                    rcy = 0.5 + 0.25 * std::sin(a);
                    ccx = 0.5 + 0.25 * std::cos(a + M_PI);
                    ccy = 0.5 + 0.25 * std::sin(a + M_PI);
                    break;
                }
                default: {  // pulsing scale
                    double s = 1.0 + 0.5 * std::sin(phase + 2.0 * M_PI * prog.speed * u);
                    rh *= s;
                    cr *= 2.0 - s * 0.8;
                    break;
                }
            }
            Frame f;
            f.h = h;
            f.w = w;
            f.px.resize((size_t)(3 * h * w));
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                    double nx = (double)x / (double)w, ny = (double)y / (double)h;
                    for (int c = 0; c < 3; ++c) {
                        double val = 0.45 + 0.25 * std::sin(2.0 * M_PI *
                                                                (bga[c] * nx + bgb[c] * ny) +
                                                            bgp[c]);
                        if (std::abs(nx - rcx) < rh && std::abs(ny - rcy) < rh) val = col1[c];
                        double dx = nx - ccx, dy = ny - ccy;
                        if (dx * dx + dy * dy < cr * cr) val = col2[c];
                        f.at(c, y, x) = (float)std::clamp(val, 0.0, 1.0);
                    }
                }
            v.frames.push_back(std::move(f));
        }
        out.push_back(std::move(v));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loop.

namespace {

std::string csv_row(int64_t epoch, int64_t step, double loss, double psnr_db, double lr) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%lld,%lld,%.8g,%.6f,%.8g\n", (long long)epoch,
                  (long long)step, loss, psnr_db, lr);
    return buf;
}

struct Sample {  // dnerv: one clip; nerv: one frame
    ClipRef ref;
    int64_t global_frame = 0;  // nerv only
};

double eval_psnr_dnerv(const Model<float>& model, const std::vector<Video>& dataset) {
    NoGradGuard ng;
    int64_t S = model.cfg.clip_len;
    double acc = 0.0;
    int64_t count = 0;
    for (size_t vi = 0; vi < dataset.size(); ++vi) {
        const Video& v = dataset[vi];
        int64_t n_clips = ((int64_t)v.frames.size() - 1) / S;
        std::vector<ClipRef> refs;
        for (int64_t j = 0; j < n_clips; ++j) refs.push_back({(int64_t)vi, j});
        ClipBatch batch = make_clip_batch(dataset, refs, S);
        Tensor<float> pred = model.forward_clip(batch.key0, batch.key1, batch.t_indices);
        for (int64_t b = 0; b < n_clips; ++b)
            for (int64_t s : {(int64_t)0, S / 2}) {
                Frame p = clip_frame(pred, b, s);
                Frame g = clip_frame(batch.frames, b, s);
                acc += psnr(p, g);
                ++count;
            }
    }
    return count ? acc / (double)count : 0.0;
}

double eval_psnr_nerv(const Model<float>& model, const std::vector<Video>& dataset,
                      const std::vector<Sample>& eval_set, int64_t total_frames) {
    NoGradGuard ng;
    double acc = 0.0;
    for (const Sample& s : eval_set) {
        double t = total_frames > 1 ? (double)s.global_frame / (double)(total_frames - 1) : 0.0;
        Tensor<float> pred = model.nerv_forward(t);
        Frame p = tensor_to_frame(pred, 0);
        // nerv samples store the frame index directly in ref.clip.
        const Frame& g = dataset[(size_t)s.ref.video].frames[(size_t)s.ref.clip];
        acc += psnr(p, g);
    }
    return eval_set.empty() ? 0.0 : acc / (double)eval_set.size();
}

}  // namespace

TrainResult train_loop(const std::vector<Video>& dataset_in, const TrainOptions& opt) {
    opt.train.validate();
    ModelConfig mc = opt.model;
    mc.validate();
    check(!dataset_in.empty(), "train_loop: empty dataset");
    int64_t S = mc.clip_len;

    // Truncate videos to full-clip coverage.
    std::vector<Video> dataset = dataset_in;
    for (auto& v : dataset) {
        check(!v.frames.empty() && v.frames[0].h == mc.input_h && v.frames[0].w == mc.input_w,
              "train_loop: video '" + v.id + "' does not match configured input size");
        ClipLayout l = build_clips((int64_t)v.frames.size(), S, v.id);
        v.frames.resize((size_t)l.used_frames);
    }

    bool is_nerv = mc.variant == Variant::nerv;
    std::vector<Sample> samples;
    int64_t total_frames = 0;
    {
        int64_t global = 0;
        for (size_t vi = 0; vi < dataset.size(); ++vi) {
            int64_t n_clips = ((int64_t)dataset[vi].frames.size() - 1) / S;
            total_frames += (int64_t)dataset[vi].frames.size();
            for (int64_t j = 0; j < n_clips; ++j) {
                if (is_nerv) {
                    for (int64_t s = 0; s < S; ++s)
                        samples.push_back({{(int64_t)vi, j * S + s}, global + j * S + s});
                } else {
                    samples.push_back({{(int64_t)vi, j}, 0});
                }
            }
            global += (int64_t)dataset[vi].frames.size();
        }
    }
    // nerv samples store the frame index directly in ref.clip.
    std::vector<Sample> nerv_eval;
    if (is_nerv)
        for (auto& s : samples)
            if (s.ref.clip % S == 0 || s.ref.clip % S == S / 2) nerv_eval.push_back(s);

    Model<float> model(mc);
    model.init(opt.train.seed);
    AdamState st;
    adamw_init(st, model.params);

    int64_t spe = (int64_t)((samples.size() + (size_t)opt.train.batch_size - 1) /
                            (size_t)opt.train.batch_size);
    int64_t total_steps = std::max<int64_t>(1, opt.train.epochs * spe);
    int64_t warmup_steps = opt.train.warmup_epochs * spe;

    std::mt19937_64 shuffle_rng(opt.train.seed ^ 0x5eedull);
    std::string csv = "epoch,step,loss,psnr,lr\n";
    std::vector<std::vector<float>> snapshot;
    auto take_snapshot = [&]() {
        snapshot.clear();
        for (auto& [_, t] : model.params.items) snapshot.push_back(t.data());
    };
    auto restore_snapshot = [&]() {
        for (size_t i = 0; i < snapshot.size(); ++i)
            model.params.items[i].second.data() = snapshot[i];
    };
    take_snapshot();

    auto finish = [&](int64_t steps, double last_psnr) {
        TrainResult r;
        r.config = mc;
        r.params = model.params;
        r.final_psnr = last_psnr;
        r.steps = steps;
        r.metrics_csv = csv;
        if (!opt.checkpoint_path.empty()) checkpoint_save(opt.checkpoint_path, mc, model.params);
        if (!opt.metrics_path.empty()) write_text_atomic(opt.metrics_path, csv);
        return r;
    };

    int64_t step = 0;
    double last_psnr = 0.0;
    for (int64_t epoch = 0; epoch < opt.train.epochs; ++epoch) {
        std::shuffle(samples.begin(), samples.end(), shuffle_rng);
        double epoch_loss = 0.0;
        int64_t epoch_batches = 0;
        for (size_t off = 0; off < samples.size(); off += (size_t)opt.train.batch_size) {
            size_t end = std::min(samples.size(), off + (size_t)opt.train.batch_size);
            double lr = lr_at(std::min(step, total_steps - 1), total_steps, warmup_steps,
                              opt.train.lr_peak);
            model.params.zero_grads();
            Tensor<float> loss;
            if (!is_nerv) {
                std::vector<ClipRef> refs;
                for (size_t i = off; i < end; ++i) refs.push_back(samples[i].ref);
                ClipBatch batch = make_clip_batch(dataset, refs, S);
                if (opt.masks) apply_masks(batch, *opt.masks, refs);
                Tensor<float> pred = model.forward_clip(batch.key0, batch.key1,
                                                        batch.t_indices);
                loss = composite_loss(pred, batch.frames, opt.train.alpha, batch.masks);
            } else {
                for (size_t i = off; i < end; ++i) {
                    const Sample& s = samples[i];
                    double t = total_frames > 1
                                   ? (double)s.global_frame / (double)(total_frames - 1)
                                   : 0.0;
                    Tensor<float> pred = model.nerv_forward(t);
                    const Frame& gt =
                        dataset[(size_t)s.ref.video].frames[(size_t)s.ref.clip];
                    Tensor<float> gt5 = Tensor<float>::zeros({1, 3, mc.input_h, mc.input_w, 1});
                    for (size_t k = 0; k < gt.px.size(); ++k) gt5.data()[k] = gt.px[k];
                    Tensor<float> pred5 = stack_last(std::vector<Tensor<float>>{pred});
                    Tensor<float> m5;
                    if (opt.masks) {
                        auto mf = mask_for_frame(*opt.masks, (uint64_t)s.ref.video,
                                                 (uint64_t)s.ref.clip, mc.input_h, mc.input_w);
                        m5 = Tensor<float>::from({1, 1, mc.input_h, mc.input_w, 1},
                                                 std::vector<float>(mf.begin(), mf.end()));
                    }
                    Tensor<float> l = composite_loss(pred5, gt5, opt.train.alpha, m5);
                    loss = loss.defined() ? add(loss, l) : l;
                }
                loss = scale(loss, 1.0f / (float)(end - off));
            }
            double lv = (double)loss.item();
            if (std::isnan(lv) || std::isinf(lv)) {
                restore_snapshot();
                finish(step, last_psnr);
                throw NanAbort("loss became non-finite at step " + std::to_string(step) +
                               "; last-good checkpoint retained");
            }
            backward(loss);
            adamw_step(model.params, st, lr, opt.train.beta1, opt.train.beta2, opt.train.eps,
                       opt.train.weight_decay);
            epoch_loss += lv;
            ++epoch_batches;
            ++step;
        }
        last_psnr = is_nerv ? eval_psnr_nerv(model, dataset, nerv_eval, total_frames)
                            : eval_psnr_dnerv(model, dataset);
        double lr_now = lr_at(std::min(step - 1, total_steps - 1), total_steps, warmup_steps,
                              opt.train.lr_peak);
        csv += csv_row(epoch, step, epoch_loss / (double)std::max<int64_t>(1, epoch_batches),
                       last_psnr, lr_now);
        take_snapshot();
        if (!opt.quiet && (epoch % 25 == 0 || epoch + 1 == opt.train.epochs))
            std::cerr << "epoch " << epoch << " loss "
                      << epoch_loss / (double)std::max<int64_t>(1, epoch_batches) << " psnr "
                      << last_psnr << "\n";
    }
    return finish(step, last_psnr);
}

// ---------------------------------------------------------------------------
// Reconstruction.

Video reconstruct_video(const Model<float>& model, const std::string& id,
                        const std::vector<Frame>& keyframes, int64_t n_clips) {
    NoGradGuard ng;
    check((int64_t)keyframes.size() == n_clips + 1,
          "reconstruct_video: need " + std::to_string(n_clips + 1) + " keyframes, got " +
              std::to_string(keyframes.size()));
    int64_t S = model.cfg.clip_len;
    int64_t h = model.cfg.input_h, w = model.cfg.input_w, plane = 3 * h * w;
    std::vector<float> k0((size_t)(n_clips * plane)), k1((size_t)(n_clips * plane));
    for (int64_t j = 0; j < n_clips; ++j) {
        std::copy(keyframes[(size_t)j].px.begin(), keyframes[(size_t)j].px.end(),
                  k0.begin() + j * plane);
        std::copy(keyframes[(size_t)(j + 1)].px.begin(), keyframes[(size_t)(j + 1)].px.end(),
                  k1.begin() + j * plane);
    }
    std::vector<double> t_indices;
    for (int64_t s = 0; s < S; ++s) t_indices.push_back((double)s / (double)S);
    Tensor<float> pred =
        model.forward_clip(Tensor<float>::from({n_clips, 3, h, w}, std::move(k0)),
                           Tensor<float>::from({n_clips, 3, h, w}, std::move(k1)), t_indices);
    Video out;
    out.id = id;
    for (int64_t j = 0; j < n_clips; ++j)
        for (int64_t s = 0; s < S; ++s) {
            if (model.cfg.copy_keyframes && s == 0)
                out.frames.push_back(keyframes[(size_t)j]);
            else
                out.frames.push_back(clip_frame(pred, j, s));
        }
    out.frames.push_back(keyframes.back());
    return out;
}

Video reconstruct_video_nerv(const Model<float>& model, const std::string& id,
                             int64_t first_global, int64_t n_frames, int64_t total_frames) {
    NoGradGuard ng;
    Video out;
    out.id = id;
    for (int64_t i = 0; i < n_frames; ++i) {
        double t = total_frames > 1
                       ? (double)(first_global + i) / (double)(total_frames - 1)
                       : 0.0;
        out.frames.push_back(tensor_to_frame(model.nerv_forward(t), 0));
    }
    return out;
}

}  // namespace dnerv
