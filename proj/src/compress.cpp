#include "dnerv/compress.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>

namespace dnerv {

// ---------------------------------------------------------------------------
// Quantization.

QuantizedTensor quantize(const std::string& name, const Tensor<float>& t, int bits) {
    check(bits >= 1 && bits <= 16, "quantize: bits must be in 1..16");
    QuantizedTensor q;
    q.name = name;
    q.shape = t.shape();
    float lo = t.data()[0], hi = t.data()[0];
    for (float v : t.data()) {
        check(std::isfinite(v), "quantize: non-finite value in tensor '" + name + "'");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    q.zero_point = (double)lo;
    uint32_t levels = (uint32_t)((1u << bits) - 1);
    q.scale = (hi > lo) ? ((double)hi - (double)lo) / (double)levels : 0.0;
    size_t stride = bits <= 8 ? 1 : 2;
    q.symbols.resize((size_t)t.size() * stride);
    for (int64_t i = 0; i < t.size(); ++i) {
        uint32_t s = 0;
        if (q.scale > 0.0) {
            double v = ((double)t.data()[i] - q.zero_point) / q.scale;
            s = (uint32_t)std::clamp((int64_t)std::llround(v), (int64_t)0, (int64_t)levels);
        }
        q.symbols[(size_t)i * stride] = (uint8_t)(s & 0xff);
        if (stride == 2) q.symbols[(size_t)i * stride + 1] = (uint8_t)(s >> 8);
    }
    return q;
}

Tensor<float> dequantize(const QuantizedTensor& q, int bits) {
    size_t stride = bits <= 8 ? 1 : 2;
    int64_t n = numel(q.shape);
    check((size_t)n * stride == q.symbols.size(),
          "dequantize: symbol count mismatch for tensor '" + q.name + "'");
    std::vector<float> data((size_t)n);
    for (int64_t i = 0; i < n; ++i) {
        uint32_t s = q.symbols[(size_t)i * stride];
        if (stride == 2) s |= (uint32_t)q.symbols[(size_t)i * stride + 1] << 8;
        data[(size_t)i] = (float)(q.zero_point + (double)s * q.scale);
    }
    return Tensor<float>::from(q.shape, std::move(data));
}

// ---------------------------------------------------------------------------
// Entropy coding: canonical Huffman (mode 1) with raw (mode 0) and constant
// (mode 2) fallbacks.

namespace {

std::array<uint8_t, 256> huffman_lengths(const std::array<uint64_t, 256>& freq) {
    struct Item {
        uint64_t f;
        uint32_t order;  // deterministic tie-break
        std::vector<int> symbols;
    };
    std::vector<Item> heap;
    uint32_t order = 0;
    std::array<uint8_t, 256> len{};
    for (int s = 0; s < 256; ++s)
        if (freq[(size_t)s]) heap.push_back({freq[(size_t)s], order++, {s}});
    if (heap.size() == 1) {
        len[(size_t)heap[0].symbols[0]] = 1;
        return len;
    }
    auto smallest = [&]() {
        size_t best = 0;
        for (size_t i = 1; i < heap.size(); ++i)
            if (heap[i].f < heap[best].f ||
                (heap[i].f == heap[best].f && heap[i].order < heap[best].order))
                best = i;
        Item it = std::move(heap[best]);
        heap.erase(heap.begin() + (long)best);
        return it;
    };
    while (heap.size() > 1) {
        Item a = smallest();
        Item b = smallest();
        for (int s : a.symbols) ++len[(size_t)s];
        for (int s : b.symbols) ++len[(size_t)s];
        a.f += b.f;
        a.order = order++;
        a.symbols.insert(a.symbols.end(), b.symbols.begin(), b.symbols.end());
        heap.push_back(std::move(a));
    }
    return len;
}

struct CanonicalCodes {
    std::array<uint32_t, 256> code{};
    std::array<uint8_t, 256> len{};
};

CanonicalCodes canonical_from_lengths(const std::array<uint8_t, 256>& len) {
    CanonicalCodes c;
    c.len = len;
    // Symbols ordered by (length, symbol); codes assigned sequentially.
    std::vector<int> syms;
    for (int s = 0; s < 256; ++s)
        if (len[(size_t)s]) syms.push_back(s);
    std::sort(syms.begin(), syms.end(), [&](int a, int b) {
        if (len[(size_t)a] != len[(size_t)b]) return len[(size_t)a] < len[(size_t)b];
        return a < b;
    });
    uint32_t code = 0;
    uint8_t prev = 0;
    for (int s : syms) {
        code <<= (len[(size_t)s] - prev);
        prev = len[(size_t)s];
        c.code[(size_t)s] = code++;
    }
    return c;
}

class BitWriter {
public:
    explicit BitWriter(std::vector<uint8_t>& out) : out_(out) {}
    void put(uint32_t code, uint8_t nbits) {
        for (int i = nbits - 1; i >= 0; --i) {
            acc_ = (acc_ << 1) | ((code >> i) & 1u);
            if (++n_ == 8) {
                out_.push_back((uint8_t)acc_);
                acc_ = 0;
                n_ = 0;
            }
        }
    }
    void flush() {
        if (n_) out_.push_back((uint8_t)(acc_ << (8 - n_)));
        acc_ = 0;
        n_ = 0;
    }

private:
    std::vector<uint8_t>& out_;
    uint32_t acc_ = 0;
    int n_ = 0;
};

}  // namespace

std::vector<uint8_t> entropy_encode(const std::vector<uint8_t>& symbols) {
    ByteWriter raw_mode;
    raw_mode.u8(0);
    raw_mode.u64(symbols.size());
    raw_mode.raw(symbols.data(), symbols.size());
    if (symbols.empty()) return std::move(raw_mode.bytes);

    bool constant = std::all_of(symbols.begin(), symbols.end(),
                                [&](uint8_t s) { return s == symbols[0]; });
    if (constant) {
        ByteWriter w;
        w.u8(2);
        w.u64(symbols.size());
        w.u8(symbols[0]);
        return std::move(w.bytes);
    }

    std::array<uint64_t, 256> freq{};
    for (uint8_t s : symbols) ++freq[s];
    auto lengths = huffman_lengths(freq);
    for (int s = 0; s < 256; ++s)
        check(lengths[(size_t)s] <= 32, "entropy_encode: code length overflow");
    CanonicalCodes codes = canonical_from_lengths(lengths);

    ByteWriter w;
    w.u8(1);
    w.u64(symbols.size());
    w.raw(lengths.data(), 256);
    BitWriter bw(w.bytes);
    for (uint8_t s : symbols) bw.put(codes.code[s], codes.len[s]);
    bw.flush();
    return w.size() < raw_mode.size() ? std::move(w.bytes) : std::move(raw_mode.bytes);
}

std::vector<uint8_t> entropy_decode(const std::vector<uint8_t>& stream, uint64_t expected_n) {
    try {
        ByteReader r(stream);
        uint8_t mode = r.u8();
        uint64_t n = r.u64();
        check(n == expected_n, "entropy_decode: stream holds " + std::to_string(n) +
                                   " symbols, expected " + std::to_string(expected_n));
        std::vector<uint8_t> out((size_t)n);
        if (mode == 0) {
            r.raw(out.data(), (size_t)n);
            return out;
        }
        if (mode == 2) {
            uint8_t s = r.u8();
            std::fill(out.begin(), out.end(), s);
            return out;
        }
        check(mode == 1, "entropy_decode: unknown mode " + std::to_string(mode));
        std::array<uint8_t, 256> lengths{};
        r.raw(lengths.data(), 256);
        // first_code[l] / first_sym[l] over symbols in canonical order.
        std::vector<int> syms;
        for (int s = 0; s < 256; ++s)
            if (lengths[(size_t)s]) syms.push_back(s);
        check(!syms.empty(), "entropy_decode: empty code table");
        std::sort(syms.begin(), syms.end(), [&](int a, int b) {
            if (lengths[(size_t)a] != lengths[(size_t)b])
                return lengths[(size_t)a] < lengths[(size_t)b];
            return a < b;
        });
        std::array<uint32_t, 33> first_code{};
        std::array<int, 33> first_idx{};
        std::array<int, 33> count{};
        for (int s : syms) ++count[lengths[(size_t)s]];
        {
            uint32_t code = 0;
            int idx = 0;
            for (int l = 1; l <= 32; ++l) {
                first_code[(size_t)l] = code;
                first_idx[(size_t)l] = idx;
                code = (code + (uint32_t)count[(size_t)l]) << 1;
                idx += count[(size_t)l];
            }
        }
        size_t bitpos = 0;
        size_t total_bits = (stream.size() - (1 + 8 + 256)) * 8;
        auto next_bit = [&]() -> uint32_t {
            check(bitpos < total_bits, "entropy_decode: truncated bitstream");
            size_t byte = 1 + 8 + 256 + bitpos / 8;
            uint32_t b = (stream[byte] >> (7 - bitpos % 8)) & 1u;
            ++bitpos;
            return b;
        };
        for (uint64_t i = 0; i < n; ++i) {
            uint32_t code = 0;
            int l = 0;
            int sym = -1;
            while (l < 32) {
                code = (code << 1) | next_bit();
                ++l;
                if (count[(size_t)l] &&
                    code - first_code[(size_t)l] < (uint32_t)count[(size_t)l]) {
                    sym = syms[(size_t)(first_idx[(size_t)l] +
                                        (int)(code - first_code[(size_t)l]))];
                    break;
                }
            }
            check(sym >= 0, "entropy_decode: invalid code");
            out[(size_t)i] = (uint8_t)sym;
        }
        return out;
    } catch (const TensorError& e) {
        throw IoError(e.what());
    }
}

// ---------------------------------------------------------------------------
// Keyframe codecs.

namespace {

uint8_t to_u8(float v) {
    return (uint8_t)std::clamp((long)std::lround(v * 255.0f), 0l, 255l);
}

// Orthonormal 8x8 DCT-II basis.
const double* dct_basis() {
    static double c[64];
    static bool init = [] {
        for (int k = 0; k < 8; ++k)
            for (int n = 0; n < 8; ++n)
                c[k * 8 + n] = std::sqrt(k == 0 ? 1.0 / 8 : 2.0 / 8) *
                               std::cos(M_PI * (2 * n + 1) * k / 16.0);
        return true;
    }();
    (void)init;
    return c;
}

void dct2d(const double* x, double* y) {
    const double* c = dct_basis();
    double tmp[64];
    for (int k = 0; k < 8; ++k)
        for (int n = 0; n < 8; ++n) {
            double acc = 0;
            for (int m = 0; m < 8; ++m) acc += c[k * 8 + m] * x[n * 8 + m];
            tmp[n * 8 + k] = acc;  // rows transformed
        }
    for (int k = 0; k < 8; ++k)
        for (int j = 0; j < 8; ++j) {
            double acc = 0;
            for (int n = 0; n < 8; ++n) acc += c[k * 8 + n] * tmp[n * 8 + j];
            y[k * 8 + j] = acc;
        }
}

void idct2d(const double* y, double* x) {
    const double* c = dct_basis();
    double tmp[64];
    for (int n = 0; n < 8; ++n)
        for (int j = 0; j < 8; ++j) {
            double acc = 0;
            for (int k = 0; k < 8; ++k) acc += c[k * 8 + n] * y[k * 8 + j];
            tmp[n * 8 + j] = acc;
        }
    for (int n = 0; n < 8; ++n)
        for (int m = 0; m < 8; ++m) {
            double acc = 0;
            for (int k = 0; k < 8; ++k) acc += c[k * 8 + m] * tmp[n * 8 + k];
            x[n * 8 + m] = acc;
        }
}

const int kZigzag[64] = {0,  1,  8,  16, 9,  2,  3,  10, 17, 24, 32, 25, 18, 11, 4,  5,
                         12, 19, 26, 33, 40, 48, 41, 34, 27, 20, 13, 6,  7,  14, 21, 28,
                         35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51,
                         58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63};

void quant_steps(int quality, double& dc_step, double& ac_step) {
    check(quality >= 1 && quality <= 100, "dct8: quality must be in 1..100");
    double qf = quality < 50 ? 5000.0 / quality : 200.0 - 2.0 * quality;  // percent
    double s = qf / 100.0;
    ac_step = std::max(1.0, 32.0 * s);
    dc_step = std::clamp(8.0 * s, 1.0, 6.0);  // kept < 8 so flat blocks round-trip
}

void put_varint(std::vector<uint8_t>& out, int64_t v) {
    uint64_t u = ((uint64_t)v << 1) ^ (uint64_t)(v >> 63);  // zigzag
    while (u >= 0x80) {
        out.push_back((uint8_t)(u | 0x80));
        u >>= 7;
    }
    out.push_back((uint8_t)u);
}

int64_t get_varint(ByteReader& r) {
    uint64_t u = 0;
    int shift = 0;
    while (true) {
        uint8_t b = r.u8();
        u |= (uint64_t)(b & 0x7f) << shift;
        if (!(b & 0x80)) break;
        shift += 7;
        check(shift < 64, "dct8: varint overflow");
    }
    return (int64_t)(u >> 1) ^ -(int64_t)(u & 1);
}

}  // namespace

std::vector<uint8_t> keyframe_encode(const Frame& img, const KeyframeCodecConfig& cfg) {
    check(img.h > 0 && img.w > 0 && (int64_t)img.px.size() == 3 * img.h * img.w,
          "keyframe_encode: malformed frame");
    check(img.h <= 0xffff && img.w <= 0xffff, "keyframe_encode: frame too large");
    if (cfg.codec_id == kCodecRaw) {
        ByteWriter w;
        w.u8(kCodecRaw);
        w.u16((uint16_t)img.h);
        w.u16((uint16_t)img.w);
        for (float v : img.px) w.u8(to_u8(v));
        return std::move(w.bytes);
    }
    check(cfg.codec_id == kCodecDct8, "keyframe_encode: unknown codec id " +
                                          std::to_string(cfg.codec_id));
    double dc_step, ac_step;
    quant_steps(cfg.quality, dc_step, ac_step);
    int64_t ph = (img.h + 7) / 8 * 8, pw = (img.w + 7) / 8 * 8;
    std::vector<uint8_t> coeffs;
    for (int64_t c = 0; c < 3; ++c) {
        // Edge-replicated padded 8-bit plane.
        std::vector<double> plane((size_t)(ph * pw));
        for (int64_t y = 0; y < ph; ++y)
            for (int64_t x = 0; x < pw; ++x) {
                int64_t sy = std::min(y, img.h - 1), sx = std::min(x, img.w - 1);
                plane[(size_t)(y * pw + x)] = (double)to_u8(img.at(c, sy, sx)) - 128.0;
            }
        for (int64_t by = 0; by < ph; by += 8)
            for (int64_t bx = 0; bx < pw; bx += 8) {
                double blk[64], y[64];
                for (int i = 0; i < 8; ++i)
                    for (int j = 0; j < 8; ++j)
                        blk[i * 8 + j] = plane[(size_t)((by + i) * pw + bx + j)];
                dct2d(blk, y);
                for (int z = 0; z < 64; ++z) {
                    double step = z == 0 ? dc_step : ac_step;
                    put_varint(coeffs, std::llround(y[kZigzag[z]] / step));
                }
            }
    }
    std::vector<uint8_t> stream = entropy_encode(coeffs);
    ByteWriter w;
    w.u8(kCodecDct8);
    w.u16((uint16_t)img.h);
    w.u16((uint16_t)img.w);
    w.u8((uint8_t)cfg.quality);
    w.u64(coeffs.size());
    w.raw(stream.data(), stream.size());
    return std::move(w.bytes);
}

Frame keyframe_decode(const std::vector<uint8_t>& payload) {
    ByteReader r(payload);
    uint8_t codec = r.u8();
    int64_t h = r.u16(), w = r.u16();
    Frame f;
    f.h = h;
    f.w = w;
    f.px.resize((size_t)(3 * h * w));
    if (codec == kCodecRaw) {
        for (auto& v : f.px) v = (float)r.u8() / 255.0f;
        return f;
    }
    if (codec != kCodecDct8)
        throw IoError("keyframe_decode: unknown codec id " + std::to_string(codec));
    int quality = r.u8();
    uint64_t n_coeff = r.u64();
    double dc_step, ac_step;
    quant_steps(quality, dc_step, ac_step);
    std::vector<uint8_t> stream(payload.begin() + (long)r.pos(), payload.end());
    std::vector<uint8_t> coeffs = entropy_decode(stream, n_coeff);
    ByteReader cr(coeffs);
    int64_t ph = (h + 7) / 8 * 8, pw = (w + 7) / 8 * 8;
    for (int64_t c = 0; c < 3; ++c) {
        std::vector<double> plane((size_t)(ph * pw));
        for (int64_t by = 0; by < ph; by += 8)
            for (int64_t bx = 0; bx < pw; bx += 8) {
                double y[64], blk[64];
                for (int z = 0; z < 64; ++z) {
                    double step = z == 0 ? dc_step : ac_step;
                    y[kZigzag[z]] = (double)get_varint(cr) * step;
                }
                idct2d(y, blk);
                for (int i = 0; i < 8; ++i)
                    for (int j = 0; j < 8; ++j)
                        plane[(size_t)((by + i) * pw + bx + j)] = blk[i * 8 + j];
            }
        for (int64_t yy = 0; yy < h; ++yy)
            for (int64_t xx = 0; xx < w; ++xx) {
                long v = std::lround(plane[(size_t)(yy * pw + xx)] + 128.0);
                f.at(c, yy, xx) = (float)std::clamp(v, 0l, 255l) / 255.0f;
            }
    }
    return f;
}

// ---------------------------------------------------------------------------
// Bundle.

static const char kBundleMagic[5] = {'D', 'N', 'V', 'B', '1'};
static const uint32_t kBundleVersion = 1;

std::vector<uint8_t> bundle_serialize(const CompressedBundle& b) {
    ByteWriter w;
    w.raw(kBundleMagic, 5);
    w.u32(kBundleVersion);
    std::string js = b.config.dump();
    w.u64(js.size());
    w.raw(js.data(), js.size());

    size_t stride = b.bits <= 8 ? 1 : 2;
    w.u32((uint32_t)b.tensors.size());
    std::vector<uint8_t> all_symbols;
    for (const auto& t : b.tensors) {
        w.str(t.name);
        w.u8(0);  // f32
        w.u32((uint32_t)t.shape.size());
        for (int64_t d : t.shape) w.u64((uint64_t)d);
        w.f64(t.scale);
        w.f64(t.zero_point);
        w.u64(t.symbols.size() / stride);
        all_symbols.insert(all_symbols.end(), t.symbols.begin(), t.symbols.end());
    }
    std::vector<uint8_t> stream = entropy_encode(all_symbols);
    w.u64(stream.size());
    w.raw(stream.data(), stream.size());

    uint64_t model_end = w.size();
    w.u32((uint32_t)b.keyframes.size());
    for (const auto& k : b.keyframes) {
        w.str(k.video_id);
        w.u32(k.frame_index);
        w.u8(k.codec_id);
        w.u64(k.payload.size());
        w.raw(k.payload.data(), k.payload.size());
    }
    const_cast<CompressedBundle&>(b).model_bytes = model_end;
    const_cast<CompressedBundle&>(b).keyframe_bytes = w.size() - model_end;
    return std::move(w.bytes);
}

CompressedBundle bundle_parse(const std::vector<uint8_t>& bytes) {
    try {
        ByteReader r(bytes);
        char magic[5];
        r.raw(magic, 5);
        if (std::memcmp(magic, kBundleMagic, 5) != 0) throw IoError("bad bundle magic");
        uint32_t version = r.u32();
        if (version != kBundleVersion)
            throw IoError("bundle version " + std::to_string(version) + " unsupported");
        uint64_t jn = r.u64();
        std::string js(jn, '\0');
        r.raw(js.data(), jn);
        CompressedBundle b;
        b.config = nlohmann::json::parse(js);
        b.bits = b.config.value("bits", 8);
        size_t stride = b.bits <= 8 ? 1 : 2;

        uint32_t count = r.u32();
        std::vector<uint64_t> counts;
        for (uint32_t i = 0; i < count; ++i) {
            QuantizedTensor q;
            q.name = r.str();
            uint8_t dtype = r.u8();
            if (dtype != 0) throw IoError("bundle tensor '" + q.name + "': unsupported dtype");
            uint32_t rank = r.u32();
            q.shape.resize(rank);
            for (uint32_t d = 0; d < rank; ++d) q.shape[d] = (int64_t)r.u64();
            q.scale = r.f64();
            q.zero_point = r.f64();
            counts.push_back(r.u64());
            b.tensors.push_back(std::move(q));
        }
        uint64_t sn = r.u64();
        std::vector<uint8_t> stream((size_t)sn);
        r.raw(stream.data(), (size_t)sn);
        uint64_t total = 0;
        for (uint64_t c : counts) total += c * stride;
        std::vector<uint8_t> symbols = entropy_decode(stream, total);
        size_t off = 0;
        for (size_t i = 0; i < counts.size(); ++i) {
            size_t n = (size_t)counts[i] * stride;
            b.tensors[i].symbols.assign(symbols.begin() + (long)off,
                                        symbols.begin() + (long)(off + n));
            off += n;
        }
        b.model_bytes = r.pos();

        uint32_t kf = r.u32();
        for (uint32_t i = 0; i < kf; ++i) {
            KeyframeEntry e;
            e.video_id = r.str();
            e.frame_index = r.u32();
            e.codec_id = r.u8();
            uint64_t pn = r.u64();
            e.payload.resize((size_t)pn);
            r.raw(e.payload.data(), (size_t)pn);
            b.keyframes.push_back(std::move(e));
        }
        b.keyframe_bytes = r.pos() - b.model_bytes;
        if (r.remaining() != 0) throw IoError("trailing bytes after bundle keyframe section");
        return b;
    } catch (const TensorError& e) {
        throw IoError(std::string("corrupt bundle: ") + e.what());
    }
}

CompressedBundle compress_model(const ModelConfig& cfg, const ParamStore<float>& params,
                                int bits, const std::vector<KeyframeEntry>& keyframes,
                                const nlohmann::json& extra_config) {
    CompressedBundle b;
    b.bits = bits;
    b.config = extra_config.is_null() ? nlohmann::json::object() : extra_config;
    b.config["model"] = cfg.to_json();
    b.config["bits"] = bits;
    for (const auto& [name, t] : params.items) b.tensors.push_back(quantize(name, t, bits));
    b.keyframes = keyframes;
    return b;
}

void decompress_params(const CompressedBundle& b, ParamStore<float>& params) {
    params.items.clear();
    for (const auto& q : b.tensors) params.add(q.name, dequantize(q, b.bits));
}

double bpp(const CompressedBundle& b, uint64_t total_pixels) {
    check(total_pixels > 0, "bpp: total_pixels must be positive");
    check(b.model_bytes + b.keyframe_bytes > 0, "bpp: bundle has no size ledger");
    return 8.0 * (double)(b.model_bytes + b.keyframe_bytes) / (double)total_pixels;
}

}  // namespace dnerv
