// Keyframe-conditioned video network (content encoder + motion-aware decoder)
// and the plain frame-index-to-frame baseline, as pure functions of parameters.
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dnerv/tensor.hpp"
#include "json.hpp"

namespace dnerv {

enum class Variant { dnerv, nerv };

inline std::string variant_name(Variant v) { return v == Variant::dnerv ? "dnerv" : "nerv"; }
inline Variant variant_from(const std::string& s) {
    if (s == "dnerv") return Variant::dnerv;
    if (s == "nerv") return Variant::nerv;
    throw TensorError("unknown variant '" + s + "'");
}

struct ModelConfig {
    std::vector<int64_t> stage_upscales{2, 2, 2};
    std::vector<int64_t> stage_channels{32, 24, 16};
    int64_t clip_len = 8;
    double pe_base = 1.25;
    int64_t pe_levels = 12;
    int64_t input_h = 32;
    int64_t input_w = 40;
    int64_t flow_hidden = 16;
    Variant variant = Variant::dnerv;
    // When set, frames at keyframe indices are copied from the decoded
    // keyframes at evaluation instead of being synthesized. Off by default:
    // the network reconstructs all clip frames.
    bool copy_keyframes = false;

    int64_t stages() const { return (int64_t)stage_upscales.size(); }
    int64_t total_upscale() const {
        int64_t p = 1;
        for (int64_t u : stage_upscales) p *= u;
        return p;
    }
    int64_t base_h() const { return input_h / total_upscale(); }
    int64_t base_w() const { return input_w / total_upscale(); }

    void validate() const {
        check(!stage_upscales.empty(), "config: stage_upscales must be non-empty");
        check(stage_channels.size() == stage_upscales.size(),
              "config: stage_channels and stage_upscales must have equal length");
        for (int64_t u : stage_upscales) check(u >= 1, "config: upscales must be >= 1");
        for (int64_t c : stage_channels) check(c >= 1, "config: channels must be >= 1");
        check(clip_len >= 1, "config: clip_len must be >= 1");
        check(pe_levels >= 1, "config: pe_levels must be >= 1");
        int64_t p = total_upscale();
        check(input_h % p == 0 && input_w % p == 0,
              "config: input size " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                  " not divisible by total upscale " + std::to_string(p));
    }

    nlohmann::json to_json() const {
        return {{"stage_upscales", stage_upscales}, {"stage_channels", stage_channels},
                {"clip_len", clip_len},             {"pe_base", pe_base},
                {"pe_levels", pe_levels},           {"input_h", input_h},
                {"input_w", input_w},               {"flow_hidden", flow_hidden},
                {"variant", variant_name(variant)}, {"copy_keyframes", copy_keyframes}};
    }
    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.stage_upscales = j.at("stage_upscales").get<std::vector<int64_t>>();
        c.stage_channels = j.at("stage_channels").get<std::vector<int64_t>>();
        c.clip_len = j.at("clip_len");
        c.pe_base = j.at("pe_base");
        c.pe_levels = j.at("pe_levels");
        c.input_h = j.at("input_h");
        c.input_w = j.at("input_w");
        c.flow_hidden = j.value("flow_hidden", (int64_t)16);
        c.variant = variant_from(j.at("variant"));
        c.copy_keyframes = j.value("copy_keyframes", false);
        return c;
    }
};

template <typename T>
struct ParamStore {
    std::vector<std::pair<std::string, Tensor<T>>> items;

    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        t.set_requires_grad(true);
        items.emplace_back(name, std::move(t));
        return items.back().second;
    }
    Tensor<T>& get(const std::string& name) {
        for (auto& [n, t] : items)
            if (n == name) return t;
        throw TensorError("unknown parameter '" + name + "'");
    }
    const Tensor<T>& get(const std::string& name) const {
        return const_cast<ParamStore*>(this)->get(name);
    }
    bool has(const std::string& name) const {
        for (auto& [n, t] : items)
            if (n == name) return true;
        return false;
    }
    int64_t total_size() const {
        int64_t n = 0;
        for (auto& [_, t] : items) n += t.size();
        return n;
    }
    std::vector<Tensor<T>> tensors() const {
        std::vector<Tensor<T>> out;
        for (auto& [_, t] : items) out.push_back(t);
        return out;
    }
    void zero_grads() {
        for (auto& [_, t] : items) t.zero_grad();
    }
};

template <typename T>
struct FlowPair {
    Tensor<T> forward;   // displacements toward the start keyframe
    Tensor<T> backward;  // displacements toward the end keyframe
};

template <typename T>
using KeyframePyramid = std::vector<Tensor<T>>;  // index 0 = deepest stage

// ---------------------------------------------------------------------------
// Stateless pieces.

template <typename T>
Tensor<T> positional_encode(double t, double base, int64_t levels) {
    check(t >= 0.0 && t <= 1.0, "positional_encode: t=" + std::to_string(t) +
                                    " outside [0,1]");
    std::vector<T> v((size_t)(2 * levels));
    double f = 1.0;
    for (int64_t j = 0; j < levels; ++j) {
        v[2 * j + 0] = (T)std::sin(f * M_PI * t);
        v[2 * j + 1] = (T)std::cos(f * M_PI * t);
        f *= base;
    }
    return Tensor<T>::from({2 * levels}, std::move(v));
}

template <typename T>
Tensor<T> content_interp(const Tensor<T>& a, const Tensor<T>& b, double t) {
    check(t >= 0.0 && t <= 1.0, "content_interp: t outside [0,1]");
    if (t == 0.0) return a;
    if (t == 1.0) return b;
    return add(scale(a, (T)(1.0 - t)), scale(b, (T)t));
}

// Broadcasts a [2l] encoding spatially and concatenates it to [B,C,h,w].
template <typename T>
Tensor<T> stage1_input(const Tensor<T>& feat, const Tensor<T>& pe) {
    check(feat.shape().size() == 4, "stage1_input: 4-D features expected");
    check(pe.shape().size() == 1, "stage1_input: 1-D encoding expected");
    int64_t bs = feat.dim(0), pc = pe.dim(0), h = feat.dim(2), w = feat.dim(3);
    std::vector<T> v((size_t)(bs * pc * h * w));
    for (int64_t bi = 0; bi < bs; ++bi)
        for (int64_t c = 0; c < pc; ++c)
            std::fill(v.begin() + (bi * pc + c) * h * w, v.begin() + (bi * pc + c + 1) * h * w,
                      pe.data()[c]);
    Tensor<T> pe_map = Tensor<T>::from({bs, pc, h, w}, std::move(v));
    return concat_channels(feat, pe_map);
}

template <typename T>
FlowPair<T> estimate_flow(const Tensor<T>& m, const Tensor<T>& w1, const Tensor<T>& b1,
                          const Tensor<T>& w2, const Tensor<T>& b2) {
    Tensor<T> h = gelu(conv2d(m, w1, b1, 1, 1));
    Tensor<T> f = conv2d(h, w2, b2, 1, 1);  // 4 channels: fwd (dx,dy), bwd (dx,dy)
    return {slice_channels(f, 0, 2), slice_channels(f, 2, 4)};
}

template <typename T>
Tensor<T> warp_blend(const Tensor<T>& feat0, const Tensor<T>& feat1, const FlowPair<T>& fl,
                     double t) {
    if (t == 0.0) return bilinear_sample(feat0, fl.forward);
    if (t == 1.0) return bilinear_sample(feat1, fl.backward);
    return add(scale(bilinear_sample(feat0, fl.forward), (T)(1.0 - t)),
               scale(bilinear_sample(feat1, fl.backward), (T)t));
}

// Pixel-wise modulation: gamma/beta from 1x1 convolutions over the warped
// content features, applied across all channels of m.
template <typename T>
Tensor<T> saf(const Tensor<T>& m, const Tensor<T>& ihat, const Tensor<T>& gw,
              const Tensor<T>& gb, const Tensor<T>& bw, const Tensor<T>& bb) {
    check(m.dim(2) == ihat.dim(2) && m.dim(3) == ihat.dim(3),
          "saf: spatial size of content " + shape_str(ihat.shape()) +
              " does not match features " + shape_str(m.shape()));
    Tensor<T> gamma = conv2d(ihat, gw, gb, 1, 0);
    Tensor<T> beta = conv2d(ihat, bw, bb, 1, 0);
    return scale_bias_pixelwise(m, gamma, beta);
}

template <typename T>
Tensor<T> upsample_block(const Tensor<T>& j, const Tensor<T>& w, const Tensor<T>& b,
                         int64_t r) {
    return pixel_shuffle(gelu(conv2d(j, w, b, 1, 1)), r);
}

template <typename T>
Tensor<T> gtmlp(const Tensor<T>& o, const Tensor<T>& w) {
    return add(o, time_matmul(o, w));
}

// ---------------------------------------------------------------------------

template <typename T>
class Model {
public:
    ModelConfig cfg;
    ParamStore<T> params;

    explicit Model(ModelConfig c) : cfg(std::move(c)) { cfg.validate(); }

    void init(uint64_t seed) {
        std::mt19937_64 rng(seed);
        params.items.clear();
        const auto& u = cfg.stage_upscales;
        const auto& ch = cfg.stage_channels;
        int64_t L = cfg.stages();
        if (cfg.variant == Variant::dnerv) {
            // Encoder: applied top-down, stage a downsamples by u[L-1-a] via
            // space-to-depth and a 3x3 convolution.
            int64_t in_ch = 3;
            for (int64_t a = 0; a < L; ++a) {
                int64_t r = u[L - 1 - a], out_ch = ch[L - 1 - a];
                add_conv(rng, "enc." + std::to_string(a), in_ch * r * r, out_ch, 3);
                in_ch = out_ch;
            }
            for (int64_t i = 0; i < L; ++i) {
                std::string p = "dec." + std::to_string(i);
                int64_t mi = stage_in_channels(i);
                add_conv(rng, p + ".flow1", mi, cfg.flow_hidden, 3);
                add_conv(rng, p + ".flow2", cfg.flow_hidden, 4, 3, /*zero=*/true);
                // SAF starts as the identity: gamma = 1, beta = 0.
                add_conv(rng, p + ".saf_g", ch[i], 1, 1, /*zero=*/true);
                params.get(p + ".saf_g.b").data()[0] = T(1);
                add_conv(rng, p + ".saf_b", ch[i], 1, 1, /*zero=*/true);
                add_conv(rng, p + ".up", mi, ch[i] * u[i] * u[i], 3);
                add_zeros(p + ".tmix.w", {ch[i], cfg.clip_len, cfg.clip_len});
            }
            int64_t cl = ch[L - 1];
            add_conv(rng, "head.flow1", cl, cfg.flow_hidden, 3);
            add_conv(rng, "head.flow2", cfg.flow_hidden, 4, 3, /*zero=*/true);
            add_conv(rng, "head.refine1", cl + 3, cl, 3);
            add_conv(rng, "head.refine2", cl, 3, 3);
        } else {
            int64_t stem_out = ch[0] * cfg.base_h() * cfg.base_w();
            add_linear(rng, "stem", 2 * cfg.pe_levels, stem_out);
            for (int64_t i = 0; i < L; ++i) {
                int64_t in_ch = (i == 0) ? ch[0] : ch[i - 1];
                add_conv(rng, "dec." + std::to_string(i) + ".up", in_ch, ch[i] * u[i] * u[i],
                         3);
            }
            add_conv(rng, "head", ch[L - 1], 3, 3);
        }
    }

    // Channels of the stage-i decoder input M^i.
    int64_t stage_in_channels(int64_t i) const {
        if (i == 0) return cfg.stage_channels[0] + 2 * cfg.pe_levels;
        return cfg.stage_channels[i - 1];
    }

    // Spatial height of the stage-i decoder input.
    int64_t stage_h(int64_t i) const {
        int64_t h = cfg.base_h();
        for (int64_t j = 0; j < i; ++j) h *= cfg.stage_upscales[j];
        return h;
    }
    int64_t stage_w(int64_t i) const {
        int64_t w = cfg.base_w();
        for (int64_t j = 0; j < i; ++j) w *= cfg.stage_upscales[j];
        return w;
    }

    KeyframePyramid<T> encode_keyframe(const Tensor<T>& img) const {
        check(img.shape().size() == 4 && img.dim(1) == 3,
              "encode_keyframe: [B,3,H,W] expected, got " + shape_str(img.shape()));
        check(img.dim(2) == cfg.input_h && img.dim(3) == cfg.input_w,
              "encode_keyframe: input " + shape_str(img.shape()) + " does not match config " +
                  std::to_string(cfg.input_h) + "x" + std::to_string(cfg.input_w));
        int64_t L = cfg.stages();
        KeyframePyramid<T> pyr((size_t)L);
        Tensor<T> x = img;
        for (int64_t a = 0; a < L; ++a) {
            int64_t r = cfg.stage_upscales[L - 1 - a];
            std::string p = "enc." + std::to_string(a);
            x = gelu(conv2d(pixel_unshuffle(x, r), params.get(p + ".w"), params.get(p + ".b"),
                            1, 1));
            pyr[(size_t)(L - 1 - a)] = x;
        }
        return pyr;
    }

    // Full clip pipeline; I0/I1 are [B,3,H,W], t_indices has clip_len entries.
    Tensor<T> forward_clip(const Tensor<T>& i0, const Tensor<T>& i1,
                           const std::vector<double>& t_indices) const {
        check((int64_t)t_indices.size() == cfg.clip_len,
              "forward_clip: expected " + std::to_string(cfg.clip_len) + " time indices, got " +
                  std::to_string(t_indices.size()));
        check(cfg.variant == Variant::dnerv, "forward_clip: model variant is not dnerv");
        int64_t L = cfg.stages(), S = cfg.clip_len;
        KeyframePyramid<T> pyr0 = encode_keyframe(i0);
        KeyframePyramid<T> pyr1 = encode_keyframe(i1);

        // M[t]: per-frame features entering the current stage.
        std::vector<Tensor<T>> m((size_t)S);
        for (int64_t t = 0; t < S; ++t) {
            Tensor<T> interp = content_interp(pyr0[0], pyr1[0], t_indices[(size_t)t]);
            Tensor<T> pe = positional_encode<T>(t_indices[(size_t)t], cfg.pe_base,
                                                cfg.pe_levels);
            m[(size_t)t] = stage1_input(interp, pe);
        }
        for (int64_t i = 0; i < L; ++i) {
            std::string p = "dec." + std::to_string(i);
            std::vector<Tensor<T>> outs((size_t)S);
            for (int64_t t = 0; t < S; ++t) {
                try {
                    double tv = t_indices[(size_t)t];
                    FlowPair<T> fl = estimate_flow(m[(size_t)t], params.get(p + ".flow1.w"),
                                                   params.get(p + ".flow1.b"),
                                                   params.get(p + ".flow2.w"),
                                                   params.get(p + ".flow2.b"));
                    Tensor<T> ihat = warp_blend(pyr0[(size_t)i], pyr1[(size_t)i], fl, tv);
                    Tensor<T> j = saf(m[(size_t)t], ihat, params.get(p + ".saf_g.w"),
                                      params.get(p + ".saf_g.b"), params.get(p + ".saf_b.w"),
                                      params.get(p + ".saf_b.b"));
                    outs[(size_t)t] = upsample_block(j, params.get(p + ".up.w"),
                                                     params.get(p + ".up.b"),
                                                     cfg.stage_upscales[i]);
                } catch (const TensorError& e) {
                    throw TensorError("stage " + std::to_string(i) + ": " + e.what());
                }
            }
            Tensor<T> stacked = gtmlp(stack_last(outs), params.get(p + ".tmix.w"));
            for (int64_t t = 0; t < S; ++t) m[(size_t)t] = select_last(stacked, t);
        }
        // Final refinement: fresh full-resolution flows warp the raw keyframes.
        std::vector<Tensor<T>> frames((size_t)S);
        for (int64_t t = 0; t < S; ++t) {
            double tv = t_indices[(size_t)t];
            FlowPair<T> fl = estimate_flow(m[(size_t)t], params.get("head.flow1.w"),
                                           params.get("head.flow1.b"),
                                           params.get("head.flow2.w"),
                                           params.get("head.flow2.b"));
            Tensor<T> warped = warp_blend(i0, i1, fl, tv);
            Tensor<T> x = concat_channels(m[(size_t)t], warped);
            x = gelu(conv2d(x, params.get("head.refine1.w"), params.get("head.refine1.b"), 1,
                            1));
            frames[(size_t)t] =
                conv2d(x, params.get("head.refine2.w"), params.get("head.refine2.b"), 1, 1);
        }
        return sigmoid(stack_last(frames));
    }

    // Baseline: absolute normalized time index to one frame, [B,3,H,W].
    Tensor<T> nerv_forward(double t_absolute, int64_t batch = 1) const {
        check(cfg.variant == Variant::nerv, "nerv_forward: model variant is not nerv");
        check(t_absolute >= 0.0 && t_absolute <= 1.0, "nerv_forward: t outside [0,1]");
        int64_t L = cfg.stages();
        Tensor<T> pe = positional_encode<T>(t_absolute, cfg.pe_base, cfg.pe_levels);
        if (batch > 1) {
            std::vector<T> v;
            v.reserve((size_t)(batch * pe.size()));
            for (int64_t b = 0; b < batch; ++b)
                v.insert(v.end(), pe.data().begin(), pe.data().end());
            pe = Tensor<T>::from({batch, pe.size()}, std::move(v));
        } else {
            pe = reshape(pe, {1, pe.size()});
        }
        Tensor<T> x = gelu(linear(pe, params.get("stem.w"), params.get("stem.b")));
        x = reshape(x, {batch, cfg.stage_channels[0], cfg.base_h(), cfg.base_w()});
        for (int64_t i = 0; i < L; ++i) {
            std::string p = "dec." + std::to_string(i);
            x = upsample_block(x, params.get(p + ".up.w"), params.get(p + ".up.b"),
                               cfg.stage_upscales[i]);
        }
        return sigmoid(conv2d(x, params.get("head.w"), params.get("head.b"), 1, 1));
    }

private:
    void add_conv(std::mt19937_64& rng, const std::string& name, int64_t cin, int64_t cout,
                  int64_t k, bool zero = false) {
        Tensor<T> w = Tensor<T>::zeros({cout, cin, k, k});
        Tensor<T> b = Tensor<T>::zeros({cout});
        if (!zero) fill_uniform(rng, w, std::sqrt(1.0 / (double)(cin * k * k)));
        params.add(name + ".w", std::move(w));
        params.add(name + ".b", std::move(b));
    }
    void add_linear(std::mt19937_64& rng, const std::string& name, int64_t din, int64_t dout) {
        Tensor<T> w = Tensor<T>::zeros({din, dout});
        Tensor<T> b = Tensor<T>::zeros({dout});
        fill_uniform(rng, w, std::sqrt(1.0 / (double)din));
        params.add(name + ".w", std::move(w));
        params.add(name + ".b", std::move(b));
    }
    void add_zeros(const std::string& name, Shape shape) {
        params.add(name, Tensor<T>::zeros(std::move(shape)));
    }
    static void fill_uniform(std::mt19937_64& rng, Tensor<T>& t, double limit) {
        std::uniform_real_distribution<double> d(-limit, limit);
        for (auto& v : t.data()) v = (T)d(rng);
    }
};

}  // namespace dnerv
