// Command implementations behind the dnerv tool: config resolution, run
// directories, and the train / compress / decode / eval / inpaint / rd-sweep
// entry points. Each returns a process exit code (0 ok, 1 partial sweep
// failure, 2 bad config or input, 3 runtime abort).
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dnerv/compress.hpp"
#include "dnerv/metrics.hpp"
#include "dnerv/train.hpp"

namespace dnerv {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Merged view of model + training + compression settings plus dataset paths.
// Parsed from a `key = value` text file; command-line overrides win.
struct RunConfig {
    std::filesystem::path dataset;
    std::string name = "run";
    ModelConfig model;
    TrainConfig train;
    int bits = 8;
    KeyframeCodecConfig kf;
    MaskSpec mask;

    nlohmann::json to_json() const;
    std::string resolved_text() const;  // round-trippable key=value form
};

// Parses key=value text (with # comments). Unknown keys are errors.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path,
                          const std::map<std::string, std::string>& overrides);

// Holds an exclusive `lock` file inside a run directory for the process
// lifetime; creation fails if another command owns the directory.
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& run_dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path path_;
};

struct SelectSpec {
    std::string video;            // empty: all videos
    std::optional<int64_t> clip;  // only with a video
};
SelectSpec parse_select(const std::string& s);

void apply_thread_env();  // honors DNERV_THREADS

// Builds the per-video keyframe entries (clip boundaries) for a dataset.
std::vector<KeyframeEntry> encode_dataset_keyframes(const std::vector<Video>& dataset,
                                                    int64_t clip_len,
                                                    const KeyframeCodecConfig& kf);

// Trains + compresses + evaluates one configuration in-process and returns
// the resulting RD point. Shared by cmd_rd_sweep and the acceptance tests.
RdPoint run_rd_point(const RunConfig& cfg, const std::vector<Video>& dataset,
                     const std::string& label, bool quiet);

// Searches a channel-width multiplier for the nerv variant whose serialized
// bundle is closest to (and not below) target_bytes.
ModelConfig nerv_config_for_bytes(const ModelConfig& base, int bits, uint64_t target_bytes);

int cmd_train(const std::filesystem::path& config, const std::map<std::string, std::string>& ov,
              const std::filesystem::path& out_dir);
int cmd_compress(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset,
                 const std::filesystem::path& out_bundle, const std::string& kf_codec,
                 int quality, int bits);
int cmd_decode(const std::filesystem::path& bundle, const std::filesystem::path& out_dir,
               const std::string& select);
int cmd_eval(const std::filesystem::path& decoded_dir, const std::filesystem::path& gt_dir,
             const std::filesystem::path& bundle, const std::filesystem::path& report_csv,
             const std::string& label);
int cmd_inpaint(const std::filesystem::path& config,
                const std::map<std::string, std::string>& ov,
                const std::filesystem::path& out_dir);
int cmd_rd_sweep(const std::filesystem::path& config,
                 const std::map<std::string, std::string>& ov,
                 const std::filesystem::path& out_dir, const std::vector<int>& qualities,
                 const std::vector<double>& widths, const std::vector<std::string>& variants,
                 bool match_total_size);
int cmd_synth(const std::filesystem::path& out_dir, int64_t videos, int64_t classes,
              int64_t frames, int64_t h, int64_t w, uint64_t seed);

}  // namespace dnerv
