#include "dnerv/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dnerv/metrics.hpp"

namespace fs = std::filesystem;

namespace dnerv {

// ---------------------------------------------------------------------------
// Config parsing.

namespace {

int64_t parse_i64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config field '" + key + "': not an integer: '" + v + "'");
    }
}

double parse_f64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config field '" + key + "': not a number: '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config field '" + key + "': not a boolean: '" + v + "'");
}

std::vector<int64_t> parse_i64_list(const std::string& key, const std::string& v) {
    std::vector<int64_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_i64(key, item));
    if (out.empty()) throw ConfigError("config field '" + key + "': empty list");
    return out;
}

std::string join_i64(const std::vector<int64_t>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

void set_field(RunConfig& c, const std::string& key, const std::string& val) {
    if (key == "dataset") c.dataset = val;
    else if (key == "name") c.name = val;
    else if (key == "variant") {
        try {
            c.model.variant = variant_from(val);
        } catch (const TensorError&) {
            throw ConfigError("config field 'variant': must be dnerv or nerv, got '" + val +
                              "'");
        }
    } else if (key == "clip_len") c.model.clip_len = parse_i64(key, val);
    else if (key == "stage_upscales") c.model.stage_upscales = parse_i64_list(key, val);
    else if (key == "stage_channels") c.model.stage_channels = parse_i64_list(key, val);
    else if (key == "pe_base") c.model.pe_base = parse_f64(key, val);
    else if (key == "pe_levels") c.model.pe_levels = parse_i64(key, val);
    else if (key == "input_h") c.model.input_h = parse_i64(key, val);
    else if (key == "input_w") c.model.input_w = parse_i64(key, val);
    else if (key == "flow_hidden") c.model.flow_hidden = parse_i64(key, val);
    else if (key == "copy_keyframes") c.model.copy_keyframes = parse_bool(key, val);
    else if (key == "epochs") c.train.epochs = parse_i64(key, val);
    else if (key == "batch_size") c.train.batch_size = parse_i64(key, val);
    else if (key == "lr_peak") c.train.lr_peak = parse_f64(key, val);
    else if (key == "warmup_epochs") c.train.warmup_epochs = parse_i64(key, val);
    else if (key == "alpha") c.train.alpha = parse_f64(key, val);
    else if (key == "weight_decay") c.train.weight_decay = parse_f64(key, val);
    else if (key == "seed") c.train.seed = (uint64_t)parse_i64(key, val);
    else if (key == "bits") c.bits = (int)parse_i64(key, val);
    else if (key == "kf_codec") {
        if (val == "raw") c.kf.codec_id = kCodecRaw;
        else if (val == "dct8") c.kf.codec_id = kCodecDct8;
        else
            throw ConfigError("config field 'kf_codec': must be raw or dct8, got '" + val +
                              "'");
    } else if (key == "quality") c.kf.quality = (int)parse_i64(key, val);
    else if (key == "boxes_per_frame") c.mask.boxes_per_frame = parse_i64(key, val);
    else if (key == "box_width") c.mask.box_width = parse_i64(key, val);
    else if (key == "mask_seed") c.mask.seed = (uint64_t)parse_i64(key, val);
    else
        throw ConfigError("unknown config field '" + key + "'");
}

void validate_run_config(const RunConfig& c) {
    try {
        c.model.validate();
        c.train.validate();
    } catch (const TensorError& e) {
        throw ConfigError(e.what());
    }
    if (c.bits < 1 || c.bits > 16)
        throw ConfigError("config field 'bits': must be in 1..16, got " +
                          std::to_string(c.bits));
    if (c.kf.quality < 1 || c.kf.quality > 100)
        throw ConfigError("config field 'quality': must be in 1..100, got " +
                          std::to_string(c.kf.quality));
    if (c.mask.boxes_per_frame < 0)
        throw ConfigError("config field 'boxes_per_frame': must be >= 0");
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
    RunConfig c;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected key = value, got '" + t + "'");
        set_field(c, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return c;
}

RunConfig load_run_config(const fs::path& path,
                          const std::map<std::string, std::string>& overrides) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file '" + path.string() + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    RunConfig c = parse_run_config(ss.str());
    for (const auto& [k, v] : overrides) set_field(c, k, v);
    validate_run_config(c);
    return c;
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j = {{"dataset", dataset.string()},
                        {"name", name},
                        {"model", model.to_json()},
                        {"bits", bits},
                        {"kf_codec", kf.codec_id == kCodecRaw ? "raw" : "dct8"},
                        {"quality", kf.quality},
                        {"epochs", train.epochs},
                        {"batch_size", train.batch_size},
                        {"lr_peak", train.lr_peak},
                        {"warmup_epochs", train.warmup_epochs},
                        {"alpha", train.alpha},
                        {"weight_decay", train.weight_decay},
                        {"seed", train.seed},
                        {"boxes_per_frame", mask.boxes_per_frame},
                        {"box_width", mask.box_width},
                        {"mask_seed", mask.seed}};
    return j;
}

std::string RunConfig::resolved_text() const {
    std::string s;
    s += "dataset = " + dataset.string() + "\n";
    s += "name = " + name + "\n";
    s += "variant = " + variant_name(model.variant) + "\n";
    s += "clip_len = " + std::to_string(model.clip_len) + "\n";
    s += "stage_upscales = " + join_i64(model.stage_upscales) + "\n";
    s += "stage_channels = " + join_i64(model.stage_channels) + "\n";
    s += "pe_base = " + fmt_g(model.pe_base) + "\n";
    s += "pe_levels = " + std::to_string(model.pe_levels) + "\n";
    s += "input_h = " + std::to_string(model.input_h) + "\n";
    s += "input_w = " + std::to_string(model.input_w) + "\n";
    s += "flow_hidden = " + std::to_string(model.flow_hidden) + "\n";
    s += "copy_keyframes = " + std::string(model.copy_keyframes ? "true" : "false") + "\n";
    s += "epochs = " + std::to_string(train.epochs) + "\n";
    s += "batch_size = " + std::to_string(train.batch_size) + "\n";
    s += "lr_peak = " + fmt_g(train.lr_peak) + "\n";
    s += "warmup_epochs = " + std::to_string(train.warmup_epochs) + "\n";
    s += "alpha = " + fmt_g(train.alpha) + "\n";
    s += "weight_decay = " + fmt_g(train.weight_decay) + "\n";
    s += "seed = " + std::to_string(train.seed) + "\n";
    s += "bits = " + std::to_string(bits) + "\n";
    s += "kf_codec = " + std::string(kf.codec_id == kCodecRaw ? "raw" : "dct8") + "\n";
    s += "quality = " + std::to_string(kf.quality) + "\n";
    s += "boxes_per_frame = " + std::to_string(mask.boxes_per_frame) + "\n";
    s += "box_width = " + std::to_string(mask.box_width) + "\n";
    s += "mask_seed = " + std::to_string(mask.seed) + "\n";
    return s;
}

// ---------------------------------------------------------------------------
// Run directory lock.

RunLock::RunLock(const fs::path& run_dir) {
    path_ = run_dir / "lock";
    int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
        throw ConfigError("run directory '" + run_dir.string() +
                          "' is locked by another command (remove '" + path_.string() +
                          "' if stale)");
    ::close(fd);
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

SelectSpec parse_select(const std::string& s) {
    SelectSpec sel;
    if (s.empty()) return sel;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        size_t eq = part.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--select: expected video=ID[,clip=J], got '" + s + "'");
        std::string k = trim(part.substr(0, eq)), v = trim(part.substr(eq + 1));
        if (k == "video") sel.video = v;
        else if (k == "clip") sel.clip = parse_i64("clip", v);
        else
            throw ConfigError("--select: unknown key '" + k + "'");
    }
    if (sel.clip && sel.video.empty())
        throw ConfigError("--select: clip requires a video");
    return sel;
}

void apply_thread_env() {
#ifdef _OPENMP
    if (const char* e = std::getenv("DNERV_THREADS")) {
        int n = std::atoi(e);
        if (n >= 1) omp_set_num_threads(n);
    }
#endif
}

// ---------------------------------------------------------------------------
// Shared pipeline pieces.

std::vector<KeyframeEntry> encode_dataset_keyframes(const std::vector<Video>& dataset,
                                                    int64_t clip_len,
                                                    const KeyframeCodecConfig& kf) {
    std::vector<KeyframeEntry> out;
    for (const Video& v : dataset) {
        ClipLayout l = build_clips((int64_t)v.frames.size(), clip_len, v.id);
        for (int64_t j = 0; j <= l.n_clips; ++j) {
            KeyframeEntry e;
            e.video_id = v.id;
            e.frame_index = (uint32_t)(j * clip_len);
            e.codec_id = kf.codec_id;
            e.payload = keyframe_encode(v.frames[(size_t)e.frame_index], kf);
            out.push_back(std::move(e));
        }
    }
    return out;
}

namespace {

struct VideoMeta {
    std::string id;
    int64_t frames = 0;  // used (clip-covering) frame count
};

nlohmann::json dataset_config(const std::vector<Video>& dataset, int64_t clip_len,
                              int64_t h, int64_t w) {
    nlohmann::json vids = nlohmann::json::array();
    for (const Video& v : dataset) {
        ClipLayout l = build_clips((int64_t)v.frames.size(), clip_len, v.id);
        vids.push_back({{"id", v.id}, {"frames", l.used_frames}});
    }
    return {{"videos", vids}, {"frame_h", h}, {"frame_w", w}};
}

uint64_t config_total_pixels(const nlohmann::json& cfg) {
    uint64_t px = 0;
    for (const auto& v : cfg.at("videos"))
        px += (uint64_t)v.at("frames").get<int64_t>() *
              (uint64_t)cfg.at("frame_h").get<int64_t>() *
              (uint64_t)cfg.at("frame_w").get<int64_t>();
    return px;
}

// Reconstructs every video in the bundle with the dequantized model and the
// decoded keyframes (the true decode-side path).
std::vector<Video> decode_bundle_videos(const CompressedBundle& b) {
    ModelConfig mc = ModelConfig::from_json(b.config.at("model"));
    Model<float> model(mc);
    decompress_params(b, model.params);
    std::vector<Video> out;
    int64_t global = 0, total = 0;
    for (const auto& v : b.config.at("videos")) total += v.at("frames").get<int64_t>();
    for (const auto& v : b.config.at("videos")) {
        std::string id = v.at("id");
        int64_t n = v.at("frames").get<int64_t>();
        if (mc.variant == Variant::nerv) {
            out.push_back(reconstruct_video_nerv(model, id, global, n, total));
        } else {
            std::vector<Frame> kfs;
            for (const auto& e : b.keyframes)
                if (e.video_id == id) kfs.push_back(keyframe_decode(e.payload));
            int64_t n_clips = (n - 1) / mc.clip_len;
            out.push_back(reconstruct_video(model, id, kfs, n_clips));
        }
        global += n;
    }
    return out;
}

void append_report_row(const fs::path& csv, const RdPoint& pt) {
    std::string text;
    if (fs::exists(csv)) {
        auto bytes = read_file(csv);
        text.assign(bytes.begin(), bytes.end());
    } else {
        text = "label,bpp,psnr_db,ms_ssim\n";
    }
    char row[256];
    std::snprintf(row, sizeof(row), "%s,%.10g,%.10g,%.10g\n", pt.label.c_str(), pt.bpp,
                  pt.psnr_db, pt.ms_ssim);
    text += row;
    write_text_atomic(csv, text);
}

std::vector<Video> load_dataset_checked(const fs::path& dir) {
    if (!fs::is_directory(dir))
        throw ConfigError("dataset directory '" + dir.string() + "' does not exist");
    auto ds = load_dataset(dir);
    if (ds.empty()) throw ConfigError("dataset directory '" + dir.string() + "' is empty");
    return ds;
}

fs::path resolve_run_dir(const fs::path& out_dir, const RunConfig& cfg) {
    return out_dir.empty() ? fs::path("runs") / cfg.name : out_dir;
}

}  // namespace

RdPoint run_rd_point(const RunConfig& cfg, const std::vector<Video>& dataset,
                     const std::string& label, bool quiet) {
    TrainOptions opt;
    opt.model = cfg.model;
    opt.train = cfg.train;
    opt.quiet = quiet;
    TrainResult res = train_loop(dataset, opt);

    std::vector<Video> used = dataset;
    for (auto& v : used)
        v.frames.resize((size_t)build_clips((int64_t)v.frames.size(), cfg.model.clip_len,
                                            v.id).used_frames);
    std::vector<KeyframeEntry> kfs;
    if (cfg.model.variant == Variant::dnerv)
        kfs = encode_dataset_keyframes(used, cfg.model.clip_len, cfg.kf);
    CompressedBundle b = compress_model(
        res.config, res.params, cfg.bits, kfs,
        dataset_config(used, cfg.model.clip_len, cfg.model.input_h, cfg.model.input_w));
    auto bytes = bundle_serialize(b);
    CompressedBundle parsed = bundle_parse(bytes);
    std::vector<Video> decoded = decode_bundle_videos(parsed);

    std::vector<std::pair<const Video*, const Video*>> pairs;
    for (size_t i = 0; i < used.size(); ++i) pairs.push_back({&used[i], &decoded[i]});
    double rate = bpp(parsed, config_total_pixels(parsed.config));
    return rd_point(label, rate, pairs, nullptr);
}

ModelConfig nerv_config_for_bytes(const ModelConfig& base, int bits, uint64_t target_bytes) {
    ModelConfig cfg = base;
    cfg.variant = Variant::nerv;
    auto bytes_at = [&](double m) {
        ModelConfig c = cfg;
        for (size_t i = 0; i < c.stage_channels.size(); ++i)
            c.stage_channels[i] = std::max<int64_t>(1, (int64_t)std::llround(
                                                           base.stage_channels[i] * m));
        Model<float> model(c);
        model.init(1);
        CompressedBundle b = compress_model(c, model.params, bits, {});
        return std::make_pair(bundle_serialize(b).size(), c);
    };
    double lo = 0.02, hi = 8.0;
    if (bytes_at(hi).first < target_bytes) return bytes_at(hi).second;
    for (int it = 0; it < 40; ++it) {
        double mid = 0.5 * (lo + hi);
        if (bytes_at(mid).first >= target_bytes) hi = mid;
        else lo = mid;
    }
    return bytes_at(hi).second;  // smallest found width meeting the budget
}

// ---------------------------------------------------------------------------
// Commands.

int cmd_train(const fs::path& config, const std::map<std::string, std::string>& ov,
              const fs::path& out_dir) {
    try {
        RunConfig cfg = load_run_config(config, ov);
        if (cfg.dataset.empty()) throw ConfigError("config field 'dataset': missing");
        std::vector<Video> dataset = load_dataset_checked(cfg.dataset);
        fs::path dir = resolve_run_dir(out_dir, cfg);
        fs::create_directories(dir);
        RunLock lock(dir);
        write_text_atomic(dir / "config.resolved", cfg.resolved_text());
        TrainOptions opt;
        opt.model = cfg.model;
        opt.train = cfg.train;
        opt.checkpoint_path = dir / "checkpoint.dnrv";
        opt.metrics_path = dir / "metrics.csv";
        TrainResult res = train_loop(dataset, opt);
        std::cout << "trained " << res.steps << " steps, psnr=" << fmt_g(res.final_psnr)
                  << " dB, checkpoint " << (dir / "checkpoint.dnrv").string() << "\n";
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NanAbort& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

int cmd_compress(const fs::path& checkpoint, const fs::path& dataset_dir,
                 const fs::path& out_bundle, const std::string& kf_codec, int quality,
                 int bits) {
    try {
        ModelConfig mc;
        ParamStore<float> params;
        try {
            checkpoint_load(checkpoint, mc, params);
        } catch (const std::exception& e) {
            throw ConfigError("checkpoint '" + checkpoint.string() + "': " + e.what());
        }
        KeyframeCodecConfig kf;
        if (kf_codec == "raw") kf.codec_id = kCodecRaw;
        else if (kf_codec == "dct8") kf.codec_id = kCodecDct8;
        else
            throw ConfigError("--kf-codec: must be raw or dct8, got '" + kf_codec + "'");
        kf.quality = quality;
        if (bits < 1 || bits > 16) throw ConfigError("--bits: must be in 1..16");

        std::vector<Video> dataset = load_dataset_checked(dataset_dir);
        for (auto& v : dataset) {
            check(!v.frames.empty() && v.frames[0].h == mc.input_h &&
                      v.frames[0].w == mc.input_w,
                  "video '" + v.id + "' does not match checkpoint input size");
            v.frames.resize((size_t)build_clips((int64_t)v.frames.size(), mc.clip_len,
                                                v.id).used_frames);
        }
        std::vector<KeyframeEntry> kfs;
        if (mc.variant == Variant::dnerv)
            kfs = encode_dataset_keyframes(dataset, mc.clip_len, kf);
        CompressedBundle b = compress_model(mc, params, bits, kfs,
                                            dataset_config(dataset, mc.clip_len, mc.input_h,
                                                           mc.input_w));
        auto bytes = bundle_serialize(b);
        fs::path out = out_bundle.empty() ? fs::path("model.dnvb") : out_bundle;
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        write_file_atomic(out, bytes);
        double rate = bpp(b, config_total_pixels(b.config));
        std::cout << "model_bytes=" << b.model_bytes << " keyframe_bytes=" << b.keyframe_bytes
                  << " bpp=" << fmt_g(rate) << "\n";
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

int cmd_decode(const fs::path& bundle_path, const fs::path& out_dir,
               const std::string& select) {
    try {
        SelectSpec sel = parse_select(select);
        CompressedBundle b = bundle_parse(read_file(bundle_path));
        ModelConfig mc = ModelConfig::from_json(b.config.at("model"));
        fs::create_directories(out_dir);

        if (!sel.video.empty()) {
            const nlohmann::json* meta = nullptr;
            int64_t global = 0, total = 0, before = 0;
            for (const auto& v : b.config.at("videos")) total += v.at("frames").get<int64_t>();
            for (const auto& v : b.config.at("videos")) {
                if (v.at("id") == sel.video) {
                    meta = &v;
                    before = global;
                }
                global += v.at("frames").get<int64_t>();
            }
            if (!meta)
                throw ConfigError("--select: video '" + sel.video + "' not in bundle");
            int64_t n = meta->at("frames").get<int64_t>();
            int64_t n_clips = (n - 1) / mc.clip_len;
            Model<float> model(mc);
            decompress_params(b, model.params);
            if (sel.clip) {
                int64_t j = *sel.clip;
                if (j < 0 || j >= n_clips)
                    throw ConfigError("--select: clip " + std::to_string(j) +
                                      " out of range (video has " + std::to_string(n_clips) +
                                      " clips)");
                check(mc.variant == Variant::dnerv,
                      "--select clip applies to the dnerv variant only");
                std::vector<Frame> kfs(2);
                int kf_found = 0;
                for (const auto& e : b.keyframes) {
                    if (e.video_id != sel.video) continue;
                    if ((int64_t)e.frame_index == j * mc.clip_len) {
                        kfs[0] = keyframe_decode(e.payload);
                        ++kf_found;
                    }
                    if ((int64_t)e.frame_index == (j + 1) * mc.clip_len) {
                        kfs[1] = keyframe_decode(e.payload);
                        ++kf_found;
                    }
                }
                check(kf_found == 2, "bundle is missing keyframes for clip " +
                                         std::to_string(j));
                std::cerr << "decoding clip " << j << " of " << sel.video
                          << " using keyframes " << j * mc.clip_len << "," <<
                          (j + 1) * mc.clip_len << "\n";
                Video v = reconstruct_video(model, sel.video, kfs, 1);
                fs::path vdir = out_dir / sel.video;
                fs::create_directories(vdir);
                for (int64_t s = 0; s < mc.clip_len; ++s) {
                    char name[32];
                    std::snprintf(name, sizeof(name), "frame_%05lld.ppm",
                                  (long long)(j * mc.clip_len + s));
                    ppm_write(vdir / name, v.frames[(size_t)s]);
                }
            } else {
                Video v;
                if (mc.variant == Variant::nerv) {
                    v = reconstruct_video_nerv(model, sel.video, before, n, total);
                } else {
                    std::vector<Frame> kfs;
                    for (const auto& e : b.keyframes)
                        if (e.video_id == sel.video) kfs.push_back(keyframe_decode(e.payload));
                    v = reconstruct_video(model, sel.video, kfs, n_clips);
                }
                save_video_dir(out_dir / sel.video, v);
            }
        } else {
            for (const Video& v : decode_bundle_videos(b))
                save_video_dir(out_dir / v.id, v);
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

int cmd_eval(const fs::path& decoded_dir, const fs::path& gt_dir, const fs::path& bundle_path,
             const fs::path& report_csv, const std::string& label) {
    try {
        std::vector<Video> decoded = load_dataset_checked(decoded_dir);
        std::vector<Video> gt = load_dataset_checked(gt_dir);
        CompressedBundle b = bundle_parse(read_file(bundle_path));

        std::vector<std::pair<const Video*, const Video*>> pairs;
        for (const Video& d : decoded) {
            const Video* g = nullptr;
            for (const Video& v : gt)
                if (v.id == d.id) g = &v;
            if (!g) throw ConfigError("ground truth has no video '" + d.id + "'");
            if (g->frames.size() != d.frames.size())
                throw ConfigError("video '" + d.id + "': frame count mismatch, ground truth " +
                                  std::to_string(g->frames.size()) + " vs decoded " +
                                  std::to_string(d.frames.size()));
            pairs.push_back({g, &d});
        }
        double rate = bpp(b, config_total_pixels(b.config));
        std::vector<VideoScore> per_video;
        RdPoint pt = rd_point(label.empty() ? "eval" : label, rate, pairs, &per_video);
        std::printf("%-16s %10s %10s\n", "video", "psnr_db", "ms_ssim");
        for (const auto& vs : per_video)
            std::printf("%-16s %10.4f %10.6f\n", vs.id.c_str(), vs.psnr_db, vs.ms_ssim);
        std::printf("%-16s %10.4f %10.6f  bpp=%.6g\n", "average", pt.psnr_db, pt.ms_ssim,
                    pt.bpp);
        if (!report_csv.empty()) append_report_row(report_csv, pt);
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

namespace {

// PSNR restricted to masked-out pixels (mask 0 = hidden) across a video pair.
double masked_psnr(const std::vector<Video>& gt, const std::vector<Video>& rec,
                   const MaskSpec& spec) {
    double se = 0.0;
    int64_t n = 0;
    for (size_t vi = 0; vi < gt.size(); ++vi)
        for (size_t fi = 0; fi < gt[vi].frames.size(); ++fi) {
            const Frame& g = gt[vi].frames[fi];
            const Frame& r = rec[vi].frames[fi];
            auto m = mask_for_frame(spec, (uint64_t)vi, (uint64_t)fi, g.h, g.w);
            for (int64_t c = 0; c < 3; ++c)
                for (int64_t i = 0; i < g.h * g.w; ++i)
                    if (m[(size_t)i] == 0.0f) {
                        double d = (double)g.px[(size_t)(c * g.h * g.w + i)] -
                                   (double)r.px[(size_t)(c * g.h * g.w + i)];
                        se += d * d;
                        ++n;
                    }
        }
    if (n == 0) return 100.0;
    double mse = se / (double)n;
    return mse == 0.0 ? 100.0 : std::min(100.0, -10.0 * std::log10(mse));
}

// Baseline: each hidden pixel replaced by the per-channel mean of the frame's
// visible pixels.
std::vector<Video> mean_fill(const std::vector<Video>& gt, const MaskSpec& spec) {
    std::vector<Video> out = gt;
    for (size_t vi = 0; vi < out.size(); ++vi)
        for (size_t fi = 0; fi < out[vi].frames.size(); ++fi) {
            Frame& f = out[vi].frames[fi];
            auto m = mask_for_frame(spec, (uint64_t)vi, (uint64_t)fi, f.h, f.w);
            for (int64_t c = 0; c < 3; ++c) {
                double sum = 0.0;
                int64_t n = 0;
                for (int64_t i = 0; i < f.h * f.w; ++i)
                    if (m[(size_t)i] != 0.0f) {
                        sum += f.px[(size_t)(c * f.h * f.w + i)];
                        ++n;
                    }
                float fill = n ? (float)(sum / (double)n) : 0.5f;
                for (int64_t i = 0; i < f.h * f.w; ++i)
                    if (m[(size_t)i] == 0.0f) f.px[(size_t)(c * f.h * f.w + i)] = fill;
            }
        }
    return out;
}

}  // namespace

int cmd_inpaint(const fs::path& config, const std::map<std::string, std::string>& ov,
                const fs::path& out_dir) {
    try {
        RunConfig cfg = load_run_config(config, ov);
        if (cfg.dataset.empty()) throw ConfigError("config field 'dataset': missing");
        std::vector<Video> dataset = load_dataset_checked(cfg.dataset);
        fs::path dir = resolve_run_dir(out_dir, cfg);
        fs::create_directories(dir);
        RunLock lock(dir);
        write_text_atomic(dir / "config.resolved", cfg.resolved_text());

        TrainOptions opt;
        opt.model = cfg.model;
        opt.train = cfg.train;
        if (cfg.mask.boxes_per_frame > 0) opt.masks = cfg.mask;
        opt.checkpoint_path = dir / "checkpoint.dnrv";
        opt.metrics_path = dir / "metrics.csv";
        TrainResult res = train_loop(dataset, opt);

        // Reconstruct with the trained model and raw keyframes.
        std::vector<Video> used = dataset;
        for (auto& v : used)
            v.frames.resize((size_t)build_clips((int64_t)v.frames.size(), cfg.model.clip_len,
                                                v.id).used_frames);
        Model<float> model(res.config);
        model.params = res.params;
        std::vector<Video> rec;
        int64_t global = 0, total = 0;
        for (const auto& v : used) total += (int64_t)v.frames.size();
        for (const auto& v : used) {
            int64_t n_clips = ((int64_t)v.frames.size() - 1) / cfg.model.clip_len;
            if (cfg.model.variant == Variant::nerv) {
                rec.push_back(reconstruct_video_nerv(model, v.id, global, (int64_t)v.frames.size(),
                                                     total));
            } else {
                std::vector<Frame> kfs;
                for (int64_t j = 0; j <= n_clips; ++j)
                    kfs.push_back(v.frames[(size_t)(j * cfg.model.clip_len)]);
                rec.push_back(reconstruct_video(model, v.id, kfs, n_clips));
            }
            global += (int64_t)v.frames.size();
        }

        std::string report;
        if (cfg.mask.boxes_per_frame == 0) {
            double p = res.final_psnr;
            char line[128];
            std::snprintf(line, sizeof(line), "full_frame_psnr=%.6f\n", p);
            report = line;
            std::cout << line;
        } else {
            double model_psnr = masked_psnr(used, rec, cfg.mask);
            double base_psnr = masked_psnr(used, mean_fill(used, cfg.mask), cfg.mask);
            char line[160];
            std::snprintf(line, sizeof(line),
                          "masked_psnr=%.6f\nmean_fill_masked_psnr=%.6f\n", model_psnr,
                          base_psnr);
            report = line;
            std::cout << line;
        }
        write_text_atomic(dir / "report.csv", report);
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NanAbort& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

int cmd_rd_sweep(const fs::path& config, const std::map<std::string, std::string>& ov,
                 const fs::path& out_dir, const std::vector<int>& qualities,
                 const std::vector<double>& widths, const std::vector<std::string>& variants,
                 bool match_total_size) {
    try {
        RunConfig cfg = load_run_config(config, ov);
        if (cfg.dataset.empty()) throw ConfigError("config field 'dataset': missing");
        std::vector<Video> dataset = load_dataset_checked(cfg.dataset);
        fs::path dir = resolve_run_dir(out_dir, cfg);
        fs::create_directories(dir);
        RunLock lock(dir);
        write_text_atomic(dir / "config.resolved", cfg.resolved_text());

        std::vector<int> qs = qualities.empty() ? std::vector<int>{cfg.kf.quality} : qualities;
        std::vector<double> ws = widths.empty() ? std::vector<double>{1.0} : widths;
        std::vector<std::string> vs =
            variants.empty() ? std::vector<std::string>{variant_name(cfg.model.variant)}
                             : variants;

        int failures = 0;
        // D-NeRV first so total-size matching has a byte target per point.
        std::map<std::pair<double, int>, uint64_t> dnerv_bytes;
        std::string csv = "label,bpp,psnr_db,ms_ssim\n";
        for (const std::string& vname : vs)
            for (double wmul : ws)
                for (int q : qs) {
                    RunConfig pt = cfg;
                    pt.model.variant = variant_from(vname);
                    pt.kf.quality = q;
                    for (auto& c : pt.model.stage_channels)
                        c = std::max<int64_t>(1, (int64_t)std::llround(c * wmul));
                    char label[96];
                    std::snprintf(label, sizeof(label), "%s_w%.3g_q%d", vname.c_str(), wmul,
                                  q);
                    try {
                        if (pt.model.variant == Variant::nerv && match_total_size) {
                            auto it = dnerv_bytes.find({wmul, q});
                            check(it != dnerv_bytes.end(),
                                  "no dnerv point to match for width/quality");
                            pt.model = nerv_config_for_bytes(cfg.model, pt.bits, it->second);
                            for (auto& c : pt.model.stage_channels)
                                (void)c;  // width set by the byte search
                        }
                        RdPoint r = run_rd_point(pt, dataset, label, /*quiet=*/true);
                        if (pt.model.variant == Variant::dnerv) {
                            // Record total bytes for later matching.
                            uint64_t px = 0;
                            for (const Video& v : dataset)
                                px += (uint64_t)build_clips((int64_t)v.frames.size(),
                                                            pt.model.clip_len, v.id)
                                          .used_frames *
                                      (uint64_t)pt.model.input_h * (uint64_t)pt.model.input_w;
                            dnerv_bytes[{wmul, q}] =
                                (uint64_t)std::llround(r.bpp * (double)px / 8.0);
                        }
                        char row[256];
                        std::snprintf(row, sizeof(row), "%s,%.10g,%.10g,%.10g\n",
                                      r.label.c_str(), r.bpp, r.psnr_db, r.ms_ssim);
                        csv += row;
                        std::cout << row;
                    } catch (const std::exception& e) {
                        std::cerr << "sweep point " << label << " failed: " << e.what()
                                  << "\n";
                        ++failures;
                    }
                }
        write_text_atomic(dir / "report.csv", csv);
        return failures ? 1 : 0;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

int cmd_synth(const fs::path& out_dir, int64_t videos, int64_t classes, int64_t frames,
              int64_t h, int64_t w, uint64_t seed) {
    try {
        auto corpus = synth_corpus(videos, classes, frames, h, w, seed);
        for (const Video& v : corpus) save_video_dir(out_dir / v.id, v);
        std::cout << "wrote " << corpus.size() << " videos to " << out_dir.string() << "\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace dnerv
