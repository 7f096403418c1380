// Training tests: loss closed forms and masking invariants, optimizer and
// schedule algebra, clip layout, mask statistics against an exact coverage
// oracle, synthetic-corpus determinism, and train-loop contracts.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "dnerv/train.hpp"
#include "doctest.h"

using namespace dnerv;
using F = Tensor<float>;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.stage_upscales = {2, 2};
    c.stage_channels = {6, 4};
    c.clip_len = 2;
    c.pe_levels = 3;
    c.input_h = 12;
    c.input_w = 12;
    c.flow_hidden = 4;
    return c;
}

F random5(std::mt19937_64& rng, Shape s) {
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    F t = F::zeros(std::move(s));
    for (auto& v : t.data()) v = d(rng);
    return t;
}

}  // namespace

TEST_CASE("composite_loss closed forms") {
    std::mt19937_64 rng(1);
    F a = random5(rng, {1, 3, 12, 12, 2});
    CHECK(composite_loss(a, a, 0.7).item() <= 1e-6);  // identical inputs

    F p = F::full({1, 3, 12, 12, 2}, 0.5f);
    F g = F::full({1, 3, 12, 12, 2}, 0.25f);
    CHECK(composite_loss(p, g, 0.0).item() == doctest::Approx(0.25).epsilon(1e-6));

    // alpha=0 reduces to mean absolute error.
    F b = random5(rng, {1, 3, 12, 12, 2});
    double mae = 0.0;
    for (int64_t i = 0; i < a.size(); ++i)
        mae += std::abs((double)a.data()[(size_t)i] - (double)b.data()[(size_t)i]);
    mae /= (double)a.size();
    CHECK(composite_loss(a, b, 0.0).item() == doctest::Approx(mae).epsilon(1e-5));

    CHECK(composite_loss(a, b, 0.7).item() >= 0.0f);
}

TEST_CASE("masked loss is bit-identical under changes hidden by the mask") {
    std::mt19937_64 rng(2);
    F pred = random5(rng, {1, 3, 12, 12, 2});
    F gt = random5(rng, {1, 3, 12, 12, 2});
    F mask = F::full({1, 1, 12, 12, 2}, 1.0f);
    // Hide a 4x4 box in frame 0.
    for (int64_t y = 3; y < 7; ++y)
        for (int64_t x = 2; x < 6; ++x) mask.data()[(size_t)((y * 12 + x) * 2 + 0)] = 0.0f;

    float before = composite_loss(pred, gt, 0.7, mask).item();
    F gt2 = F::from(gt.shape(), gt.data());
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 3; y < 7; ++y)
            for (int64_t x = 2; x < 6; ++x)
                gt2.data()[(size_t)(((c * 12 + y) * 12 + x) * 2 + 0)] = 0.123f;
    float after = composite_loss(pred, gt2, 0.7, mask).item();
    CHECK(before == after);  // bit-identical

    // Changing gt outside the mask does move the loss.
    F gt3 = F::from(gt.shape(), gt.data());
    gt3.data()[(size_t)((0 * 12 + 0) * 2 + 1)] += 0.2f;
    CHECK(composite_loss(pred, gt3, 0.7, mask).item() != before);
}

TEST_CASE("adamw fixed points and decay algebra") {
    ModelConfig mc = tiny_config();
    Model<float> m(mc);
    m.init(5);
    std::vector<float> orig = m.params.items[0].second.data();
    AdamState st;
    adamw_init(st, m.params);
    m.params.zero_grads();
    adamw_step(m.params, st, 1e-3, 0.9, 0.999, 1e-8, 0.0);
    CHECK(m.params.items[0].second.data() == orig);  // zero grads, no decay

    adamw_step(m.params, st, 1e-3, 0.9, 0.999, 1e-8, 0.1);
    for (size_t i = 0; i < orig.size(); ++i)
        CHECK(m.params.items[0].second.data()[i] ==
              doctest::Approx(orig[i] * (1.0 - 1e-3 * 0.1)).epsilon(1e-6));
}

TEST_CASE("adamw first step moves against the gradient at ~lr magnitude") {
    ModelConfig mc = tiny_config();
    Model<float> m(mc);
    m.init(6);
    AdamState st;
    adamw_init(st, m.params);
    m.params.zero_grads();
    auto& p = m.params.items[0].second;
    std::vector<float> orig = p.data();
    for (size_t i = 0; i < p.grad().size(); ++i) p.grad()[i] = (i % 2) ? 0.5f : -2.0f;
    adamw_step(m.params, st, 1e-3, 0.9, 0.999, 1e-8, 0.0);
    // Bias-corrected moments at step 1: mhat = g, vhat = g^2, update = g/|g|.
    for (size_t i = 0; i < orig.size(); ++i) {
        double g = (i % 2) ? 0.5 : -2.0;
        double expect = orig[i] - 1e-3 * g / (std::abs(g) + 1e-8 / std::sqrt(1.0 - 0.999));
        CHECK(p.data()[i] == doctest::Approx(expect).epsilon(1e-4));
    }
}

TEST_CASE("adamw aborts on NaN gradients naming the parameter") {
    ModelConfig mc = tiny_config();
    Model<float> m(mc);
    m.init(7);
    AdamState st;
    adamw_init(st, m.params);
    m.params.zero_grads();
    m.params.items[2].second.grad()[0] = std::nanf("");
    CHECK_THROWS_WITH_AS(adamw_step(m.params, st, 1e-3, 0.9, 0.999, 1e-8, 0.0),
                         doctest::Contains(m.params.items[2].first.c_str()), NanAbort);
}

TEST_CASE("lr schedule closed forms and boundary continuity") {
    double peak = 5e-4;
    CHECK(lr_at(0, 100, 20, peak) == 0.0);
    CHECK(lr_at(20, 100, 20, peak) == doctest::Approx(peak));  // ramp endpoint
    CHECK(lr_at(60, 100, 20, peak) == doctest::Approx(0.5 * peak));  // cos(pi/2)
    CHECK(lr_at(99, 100, 20, peak) < peak * 0.01);  // ~0 at the end
    double left = lr_at(19, 100, 20, peak), right = lr_at(20, 100, 20, peak);
    CHECK(std::abs(right - left) < peak * 0.06);  // one ramp increment
    CHECK_THROWS_AS((void)lr_at(100, 100, 20, peak), TensorError);
}

TEST_CASE("build_clips layouts") {
    ClipLayout l = build_clips(17, 8);
    CHECK(l.n_clips == 2);
    CHECK(l.used_frames == 17);
    l = build_clips(9, 8);
    CHECK(l.n_clips == 1);
    CHECK(l.used_frames == 9);
    l = build_clips(12, 8);  // frames 9..11 dropped
    CHECK(l.n_clips == 1);
    CHECK(l.used_frames == 9);
    CHECK_THROWS_AS((void)build_clips(8, 8), TensorError);
}

TEST_CASE("clip batches share boundary keyframes and carry t = s/S") {
    auto ds = synth_corpus(1, 1, 5, 12, 12, 3);
    ClipBatch b = make_clip_batch(ds, {{0, 0}, {0, 1}}, 2);
    CHECK(b.t_indices == std::vector<double>{0.0, 0.5});
    // Clip 0's end keyframe is clip 1's start keyframe (frame 2).
    int64_t plane = 3 * 12 * 12;
    for (int64_t i = 0; i < plane; ++i)
        CHECK(b.key1.data()[(size_t)i] == b.key0.data()[(size_t)(plane + i)]);
    // frames[b,:,:,:,s] equals the source frame jS+s.
    for (int64_t s = 0; s < 2; ++s)
        for (int64_t i = 0; i < plane; ++i)
            CHECK(b.frames.data()[(size_t)(i * 2 + s)] == ds[0].frames[(size_t)s].px[(size_t)i]);
}

TEST_CASE("mask basics: empty spec, exact unclipped fraction") {
    MaskSpec none{0, 8, 1};
    auto m = mask_for_frame(none, 0, 0, 32, 40);
    for (float v : m) CHECK(v == 1.0f);

    // One 50-wide box in 100x100: always fully inside, fraction exactly 0.25.
    MaskSpec one{1, 50, 0};
    for (uint64_t seed = 0; seed < 20; ++seed) {
        MaskSpec s = one;
        s.seed = seed;
        auto mm = mask_for_frame(s, 0, 0, 100, 100);
        int64_t zeros = 0;
        for (float v : mm) zeros += (v == 0.0f);
        CHECK(zeros == 2500);
    }
    MaskSpec bad{1, 200, 0};
    CHECK_THROWS_AS((void)mask_for_frame(bad, 0, 0, 100, 100), TensorError);
}

TEST_CASE("expected masked fraction matches the exact coverage oracle") {
    // P(pixel covered by one box) has a closed form from the count of box
    // positions that include it; 5 iid boxes give 1-(1-p)^5 per pixel.
    int64_t h = 32, w = 40, bw = 8, boxes = 5;
    double expect = 0.0;
    int64_t ph = h - bw + 1, pw = w - bw + 1;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            double cy = (double)(std::min(y, ph - 1) - std::max<int64_t>(0, y - bw + 1) + 1);
            double cx = (double)(std::min(x, pw - 1) - std::max<int64_t>(0, x - bw + 1) + 1);
            double p = (cy * cx) / (double)(ph * pw);
            expect += 1.0 - std::pow(1.0 - p, (double)boxes);
        }
    expect /= (double)(h * w);

    double measured = 0.0;
    for (uint64_t seed = 0; seed < 1000; ++seed) {
        MaskSpec s{boxes, bw, seed};
        auto m = mask_for_frame(s, 0, 0, h, w);
        int64_t zeros = 0;
        for (float v : m) zeros += (v == 0.0f);
        measured += (double)zeros / (double)(h * w);
    }
    measured /= 1000.0;
    CHECK(std::abs(measured - expect) < 0.01);
}

TEST_CASE("masks are stable per frame and differ across frames") {
    MaskSpec s{5, 8, 42};
    CHECK(mask_for_frame(s, 1, 3, 32, 40) == mask_for_frame(s, 1, 3, 32, 40));
    CHECK(mask_for_frame(s, 1, 3, 32, 40) != mask_for_frame(s, 1, 4, 32, 40));
    CHECK(mask_for_frame(s, 1, 3, 32, 40) != mask_for_frame(s, 2, 3, 32, 40));
}

TEST_CASE("synth corpus determinism, range, and shape") {
    auto a = synth_corpus(3, 2, 5, 16, 20, 99);
    auto b = synth_corpus(3, 2, 5, 16, 20, 99);
    REQUIRE(a.size() == 3);
    for (size_t v = 0; v < 3; ++v) {
        CHECK(a[v].id == b[v].id);
        REQUIRE(a[v].frames.size() == 5);
        for (size_t f = 0; f < 5; ++f) {
            CHECK(a[v].frames[f].px == b[v].frames[f].px);  // bit-identical
            for (float px : a[v].frames[f].px) {
                CHECK(px >= 0.0f);
                CHECK(px <= 1.0f);
            }
        }
    }
    // Different videos differ; frames move over time.
    CHECK(a[0].frames[0].px != a[1].frames[0].px);
    CHECK(a[0].frames[0].px != a[0].frames[4].px);
    auto c = synth_corpus(3, 2, 5, 16, 20, 100);
    CHECK(a[0].frames[0].px != c[0].frames[0].px);
}

TEST_CASE("train_loop with 0 epochs returns the seeded initialization") {
    auto ds = synth_corpus(1, 1, 5, 12, 12, 1);
    TrainOptions opt;
    opt.model = tiny_config();
    opt.train.epochs = 0;
    opt.train.warmup_epochs = 0;
    opt.train.seed = 77;
    opt.quiet = true;
    TrainResult r = train_loop(ds, opt);
    CHECK(r.steps == 0);
    CHECK(r.metrics_csv == "epoch,step,loss,psnr,lr\n");
    Model<float> fresh(opt.model);
    fresh.init(77);
    REQUIRE(r.params.items.size() == fresh.params.items.size());
    for (size_t i = 0; i < fresh.params.items.size(); ++i)
        CHECK(r.params.items[i].second.data() == fresh.params.items[i].second.data());
}

TEST_CASE("train_loop is bit-deterministic for a fixed seed") {
    auto ds = synth_corpus(2, 2, 5, 12, 12, 4);
    TrainOptions opt;
    opt.model = tiny_config();
    opt.train.epochs = 2;
    opt.train.warmup_epochs = 1;
    opt.train.batch_size = 2;
    opt.train.seed = 31;
    opt.quiet = true;
    TrainResult a = train_loop(ds, opt);
    TrainResult b = train_loop(ds, opt);
    CHECK(a.metrics_csv == b.metrics_csv);
    for (size_t i = 0; i < a.params.items.size(); ++i)
        CHECK(a.params.items[i].second.data() == b.params.items[i].second.data());
    CHECK(a.steps == 2 * 2);  // 2 videos x 2 clips / batch 2 = 2 steps per epoch

    TrainOptions opt2 = opt;
    opt2.train.seed = 32;
    TrainResult c = train_loop(ds, opt2);
    CHECK(a.metrics_csv != c.metrics_csv);
}

TEST_CASE("train_loop loss trends down while overfitting a tiny clip") {
    auto ds = synth_corpus(1, 1, 3, 12, 12, 8);
    TrainOptions opt;
    opt.model = tiny_config();
    opt.train.epochs = 150;
    opt.train.warmup_epochs = 10;
    opt.train.batch_size = 1;
    opt.train.lr_peak = 3e-3;
    opt.quiet = true;
    TrainResult r = train_loop(ds, opt);
    // First vs last epoch loss from the metrics CSV.
    std::vector<double> losses;
    std::stringstream ss(r.metrics_csv);
    std::string line;
    std::getline(ss, line);  // header
    while (std::getline(ss, line)) {
        size_t c1 = line.find(','), c2 = line.find(',', c1 + 1);
        losses.push_back(std::stod(line.substr(c2 + 1)));
    }
    REQUIRE(losses.size() == 150);
    CHECK(losses.back() < losses.front() * 0.7);
}

TEST_CASE("reconstruct_video emits n_clips*S+1 frames ending on the keyframe") {
    auto ds = synth_corpus(1, 1, 5, 12, 12, 2);
    ModelConfig mc = tiny_config();
    Model<float> m(mc);
    m.init(3);
    std::vector<Frame> kfs = {ds[0].frames[0], ds[0].frames[2], ds[0].frames[4]};
    Video v = reconstruct_video(m, "v", kfs, 2);
    REQUIRE(v.frames.size() == 5);
    CHECK(v.frames.back().px == ds[0].frames[4].px);  // trailing keyframe copied
}
