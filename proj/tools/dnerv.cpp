// dnerv: train/compress/decode/eval/inpaint/rd-sweep driver.
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dnerv/cli.hpp"

int main(int argc, char** argv) {
    dnerv::apply_thread_env();

    CLI::App app{"implicit-neural video codec"};
    app.require_subcommand(1);

    // Sentinel defaults: an override is forwarded only when the user set the
    // flag, so config-file values are never stomped by CLI defaults.
    std::string config, out, select, kf_codec, variant, label;
    std::string checkpoint, dataset, bundle, decoded, gt, report;
    int quality = -1, bits = -1;
    long long seed = -1, epochs = -1, clip_len = -1;

    auto add_override_flags = [&](CLI::App* c) {
        c->add_option("--config", config, "key=value config file")->required();
        c->add_option("--out", out, "run directory (default runs/<name>)");
        c->add_option("--seed", seed, "training seed override");
        c->add_option("--epochs", epochs, "epoch count override");
        c->add_option("--clip-len", clip_len, "clip length override");
        c->add_option("--variant", variant, "dnerv or nerv")
            ->check(CLI::IsMember({"dnerv", "nerv"}));
        c->add_option("--kf-codec", kf_codec, "keyframe codec: raw or dct8")
            ->check(CLI::IsMember({"raw", "dct8"}));
        c->add_option("--quality", quality, "dct8 quality 1..100");
        c->add_option("--bits", bits, "quantization bit width");
    };
    auto overrides = [&](bool with_codec) {
        std::map<std::string, std::string> ov;
        if (seed >= 0) ov["seed"] = std::to_string(seed);
        if (epochs >= 0) ov["epochs"] = std::to_string(epochs);
        if (clip_len >= 0) ov["clip_len"] = std::to_string(clip_len);
        if (!variant.empty()) ov["variant"] = variant;
        if (with_codec) {
            if (!kf_codec.empty()) ov["kf_codec"] = kf_codec;
            if (quality >= 0) ov["quality"] = std::to_string(quality);
            if (bits >= 0) ov["bits"] = std::to_string(bits);
        }
        return ov;
    };

    CLI::App* train = app.add_subcommand("train", "fit a model to a dataset");
    add_override_flags(train);

    CLI::App* compress = app.add_subcommand("compress", "quantize + entropy-code a checkpoint");
    compress->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    compress->add_option("--dataset", dataset, "dataset directory (keyframe source)")
        ->required();
    compress->add_option("--out", out, "output bundle path");
    compress->add_option("--kf-codec", kf_codec, "keyframe codec: raw or dct8")
        ->check(CLI::IsMember({"raw", "dct8"}));
    compress->add_option("--quality", quality, "dct8 quality 1..100");
    compress->add_option("--bits", bits, "quantization bit width");

    CLI::App* decode = app.add_subcommand("decode", "reconstruct frames from a bundle");
    decode->add_option("--bundle", bundle, "compressed bundle")->required();
    decode->add_option("--out", out, "output directory")->required();
    decode->add_option("--select", select, "video=ID[,clip=J] subset");

    CLI::App* eval = app.add_subcommand("eval", "score decoded frames against ground truth");
    eval->add_option("--decoded", decoded, "decoded frame directory")->required();
    eval->add_option("--dataset", gt, "ground-truth dataset directory")->required();
    eval->add_option("--bundle", bundle, "bundle (for bpp)")->required();
    eval->add_option("--out", report, "report CSV to append to");
    eval->add_option("--label", label, "RD row label");

    CLI::App* inpaint = app.add_subcommand("inpaint", "masked training + masked-region PSNR");
    add_override_flags(inpaint);

    CLI::App* sweep = app.add_subcommand("rd-sweep", "multi-point rate-distortion sweep");
    add_override_flags(sweep);
    std::vector<int> qualities;
    std::vector<double> widths;
    std::vector<std::string> variants;
    bool match_total = false;
    sweep->add_option("--qualities", qualities, "keyframe quality list")->delimiter(',');
    sweep->add_option("--widths", widths, "channel width multipliers")->delimiter(',');
    sweep->add_option("--variants", variants, "variant list")->delimiter(',');
    sweep->add_flag("--match-total-size", match_total,
                    "match nerv bundle bytes to the dnerv point");

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    long long n_videos = 4, n_classes = 3, n_frames = 33, sh = 32, sw = 40, sseed = 1;
    synth->add_option("--out", out, "output dataset directory")->required();
    synth->add_option("--videos", n_videos, "video count");
    synth->add_option("--classes", n_classes, "motion class count");
    synth->add_option("--frames", n_frames, "frames per video");
    synth->add_option("--height", sh, "frame height");
    synth->add_option("--width", sw, "frame width");
    synth->add_option("--seed", sseed, "corpus seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    if (train->parsed()) return dnerv::cmd_train(config, overrides(false), out);
    if (compress->parsed())
        return dnerv::cmd_compress(checkpoint, dataset, out,
                                   kf_codec.empty() ? "raw" : kf_codec,
                                   quality < 0 ? 60 : quality, bits < 0 ? 8 : bits);
    if (decode->parsed()) return dnerv::cmd_decode(bundle, out, select);
    if (eval->parsed()) return dnerv::cmd_eval(decoded, gt, bundle, report, label);
    if (inpaint->parsed()) return dnerv::cmd_inpaint(config, overrides(true), out);
    if (sweep->parsed())
        return dnerv::cmd_rd_sweep(config, overrides(true), out, qualities, widths, variants,
                                   match_total);
    if (synth->parsed())
        return dnerv::cmd_synth(out, n_videos, n_classes, n_frames, sh, sw,
                                (uint64_t)sseed);
    return 2;
}
