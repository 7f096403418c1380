// Post-training model quantization, entropy coding, keyframe codecs, bundle
// serialization, and bits-per-pixel accounting.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dnerv/io.hpp"
#include "dnerv/model.hpp"

namespace dnerv {

struct QuantizedTensor {
    std::string name;
    Shape shape;
    double scale = 0.0;
    double zero_point = 0.0;
    std::vector<uint8_t> symbols;  // bits <= 8: one byte per value; else two (LE)
};

QuantizedTensor quantize(const std::string& name, const Tensor<float>& t, int bits = 8);
Tensor<float> dequantize(const QuantizedTensor& q, int bits = 8);

// Lossless byte-stream coder: canonical Huffman with raw and constant-run
// fallbacks so the output is never catastrophically larger than the input.
std::vector<uint8_t> entropy_encode(const std::vector<uint8_t>& symbols);
std::vector<uint8_t> entropy_decode(const std::vector<uint8_t>& stream, uint64_t expected_n);

// Keyframe codecs. Payloads are self-describing (first byte is the codec id).
enum : uint8_t { kCodecRaw = 0, kCodecDct8 = 1 };

struct KeyframeCodecConfig {
    uint8_t codec_id = kCodecRaw;
    int quality = 60;  // dct8 only, 1..100
};

std::vector<uint8_t> keyframe_encode(const Frame& img, const KeyframeCodecConfig& cfg);
Frame keyframe_decode(const std::vector<uint8_t>& payload);

// ---------------------------------------------------------------------------
// Bundle. File layout (little-endian throughout):
//   magic "DNVB1" | u32 version | u64 config-JSON length + bytes
//   | u32 tensor count | per tensor: u32 name length + name, u8 dtype,
//     u32 rank, u64 dims, f64 scale, f64 zero_point, u64 symbol count
//   | u64 entropy-stream length + bytes
//   | u32 keyframe count | per keyframe: u32 id length + video_id, u32 frame
//     index, u8 codec_id, u64 payload length + bytes
// model_bytes covers everything before the keyframe section; keyframe_bytes
// covers the keyframe section; their sum is the exact file size.

struct KeyframeEntry {
    std::string video_id;
    uint32_t frame_index = 0;
    uint8_t codec_id = 0;
    std::vector<uint8_t> payload;
};

struct CompressedBundle {
    nlohmann::json config;
    std::vector<QuantizedTensor> tensors;
    int bits = 8;
    std::vector<KeyframeEntry> keyframes;
    // Size ledger, filled on serialize/parse.
    uint64_t model_bytes = 0;
    uint64_t keyframe_bytes = 0;
};

std::vector<uint8_t> bundle_serialize(const CompressedBundle& b);
CompressedBundle bundle_parse(const std::vector<uint8_t>& bytes);

// Quantizes every checkpoint parameter and encodes the given keyframes.
CompressedBundle compress_model(const ModelConfig& cfg, const ParamStore<float>& params,
                                int bits, const std::vector<KeyframeEntry>& keyframes,
                                const nlohmann::json& extra_config = {});

// Restores dequantized parameters; bit-identical to quantize+dequantize.
void decompress_params(const CompressedBundle& b, ParamStore<float>& params);

double bpp(const CompressedBundle& b, uint64_t total_pixels);

}  // namespace dnerv
