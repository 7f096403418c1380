// On-disk formats: binary PPM frames, video directories, and the checkpoint
// container, plus little-endian byte stream helpers shared with the bundle.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dnerv/model.hpp"
#include "dnerv/tensor.hpp"

namespace dnerv {

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Little-endian byte streams.

class ByteWriter {
public:
    std::vector<uint8_t> bytes;

    void u8(uint8_t v) { bytes.push_back(v); }
    void u16(uint16_t v) {
        for (int i = 0; i < 2; ++i) bytes.push_back((uint8_t)(v >> (8 * i)));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back((uint8_t)(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back((uint8_t)(v >> (8 * i)));
    }
    void f64(double v);
    void raw(const void* p, size_t n);
    void str(const std::string& s) {
        u32((uint32_t)s.size());
        raw(s.data(), s.size());
    }
    size_t size() const { return bytes.size(); }
};

class ByteReader {
public:
    ByteReader(const uint8_t* p, size_t n) : p_(p), n_(n) {}
    explicit ByteReader(const std::vector<uint8_t>& v) : p_(v.data()), n_(v.size()) {}

    uint8_t u8();
    uint16_t u16();
    uint32_t u32();
    uint64_t u64();
    double f64();
    void raw(void* out, size_t n);
    std::string str();
    size_t pos() const { return pos_; }
    size_t remaining() const { return n_ - pos_; }

private:
    void need(size_t n) const;
    const uint8_t* p_;
    size_t n_;
    size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Frames and videos. Pixels are planar [3,H,W] floats in [0,1].

struct Frame {
    int64_t h = 0, w = 0;
    std::vector<float> px;

    float& at(int64_t c, int64_t y, int64_t x) { return px[(size_t)((c * h + y) * w + x)]; }
    float at(int64_t c, int64_t y, int64_t x) const {
        return px[(size_t)((c * h + y) * w + x)];
    }
};

struct Video {
    std::string id;
    std::vector<Frame> frames;
};

Frame ppm_read(const std::filesystem::path& path);
void ppm_write(const std::filesystem::path& path, const Frame& f);

// Loads a video directory of frame_%05d.ppm files, or a dataset directory of
// such video directories.
Video load_video_dir(const std::filesystem::path& dir);
std::vector<Video> load_dataset(const std::filesystem::path& dir);
void save_video_dir(const std::filesystem::path& dir, const Video& v);

// Writes bytes to path atomically (temp file + rename).
void write_file_atomic(const std::filesystem::path& path, const std::vector<uint8_t>& bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<uint8_t> read_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Checkpoint: magic "DNRV1" | u64 config JSON length + bytes | u32 tensor
// count | per tensor: u32 name length + name | u8 dtype (0=f32, 1=f64) |
// u32 rank | u64 dims | raw little-endian payload.

std::vector<uint8_t> checkpoint_serialize(const ModelConfig& cfg,
                                          const ParamStore<float>& params);
void checkpoint_deserialize(const std::vector<uint8_t>& bytes, ModelConfig& cfg,
                            ParamStore<float>& params);
void checkpoint_save(const std::filesystem::path& path, const ModelConfig& cfg,
                     const ParamStore<float>& params);
void checkpoint_load(const std::filesystem::path& path, ModelConfig& cfg,
                     ParamStore<float>& params);

}  // namespace dnerv
