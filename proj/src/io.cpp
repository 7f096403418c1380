#include "dnerv/io.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

namespace dnerv {

namespace fs = std::filesystem;

void ByteWriter::f64(double v) {
    uint64_t u;
    std::memcpy(&u, &v, 8);
    u64(u);
}

void ByteWriter::raw(const void* p, size_t n) {
    const uint8_t* b = (const uint8_t*)p;
    bytes.insert(bytes.end(), b, b + n);
}

void ByteReader::need(size_t n) const {
    if (pos_ + n > n_)
        throw IoError("truncated stream: need " + std::to_string(n) + " bytes at offset " +
                      std::to_string(pos_) + ", have " + std::to_string(n_ - pos_));
}

uint8_t ByteReader::u8() {
    need(1);
    return p_[pos_++];
}

uint16_t ByteReader::u16() {
    need(2);
    uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= (uint16_t)p_[pos_++] << (8 * i);
    return v;
}

uint32_t ByteReader::u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= (uint32_t)p_[pos_++] << (8 * i);
    return v;
}

uint64_t ByteReader::u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= (uint64_t)p_[pos_++] << (8 * i);
    return v;
}

double ByteReader::f64() {
    uint64_t u = u64();
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

void ByteReader::raw(void* out, size_t n) {
    need(n);
    std::memcpy(out, p_ + pos_, n);
    pos_ += n;
}

std::string ByteReader::str() {
    uint32_t n = u32();
    need(n);
    std::string s((const char*)p_ + pos_, n);
    pos_ += n;
    return s;
}

// ---------------------------------------------------------------------------
// PPM (binary P6, maxval 255).

Frame ppm_read(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string magic;
    in >> magic;
    if (magic != "P6") throw IoError(path.string() + ": not a binary PPM (P6) file");
    int64_t w, h, maxval;
    in >> w >> h >> maxval;
    if (!in || w <= 0 || h <= 0 || maxval != 255)
        throw IoError(path.string() + ": unsupported PPM header");
    in.get();  // single whitespace after maxval
    std::vector<uint8_t> buf((size_t)(3 * w * h));
    in.read((char*)buf.data(), (std::streamsize)buf.size());
    if (!in) throw IoError(path.string() + ": truncated pixel data");
    Frame f;
    f.h = h;
    f.w = w;
    f.px.resize(buf.size());
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c)
                f.at(c, y, x) = (float)buf[(size_t)(3 * (y * w + x) + c)] / 255.0f;
    return f;
}

void ppm_write(const fs::path& path, const Frame& f) {
    std::vector<uint8_t> buf((size_t)(3 * f.w * f.h));
    for (int64_t y = 0; y < f.h; ++y)
        for (int64_t x = 0; x < f.w; ++x)
            for (int64_t c = 0; c < 3; ++c) {
                float v = std::clamp(f.at(c, y, x), 0.0f, 1.0f);
                buf[(size_t)(3 * (y * f.w + x) + c)] = (uint8_t)std::lround(v * 255.0f);
            }
    std::string header = "P6\n" + std::to_string(f.w) + " " + std::to_string(f.h) + "\n255\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), buf.begin(), buf.end());
    write_file_atomic(path, out);
}

static std::string frame_name(int64_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%05d.ppm", (int)i);
    return buf;
}

Video load_video_dir(const fs::path& dir) {
    Video v;
    v.id = dir.filename().string();
    for (int64_t i = 0;; ++i) {
        fs::path p = dir / frame_name(i);
        if (!fs::exists(p)) break;
        v.frames.push_back(ppm_read(p));
    }
    if (v.frames.empty()) throw IoError("no frame_00000.ppm under " + dir.string());
    return v;
}

std::vector<Video> load_dataset(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
    std::vector<fs::path> subdirs;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) subdirs.push_back(e.path());
    std::sort(subdirs.begin(), subdirs.end());
    std::vector<Video> out;
    for (const auto& d : subdirs) out.push_back(load_video_dir(d));
    if (out.empty()) throw IoError("no video directories under " + dir.string());
    return out;
}

void save_video_dir(const fs::path& dir, const Video& v) {
    fs::create_directories(dir);
    for (size_t i = 0; i < v.frames.size(); ++i)
        ppm_write(dir / frame_name((int64_t)i), v.frames[i]);
}

void write_file_atomic(const fs::path& path, const std::vector<uint8_t>& bytes) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write((const char*)bytes.data(), (std::streamsize)bytes.size());
        if (!out) throw IoError("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    write_file_atomic(path, std::vector<uint8_t>(text.begin(), text.end()));
}

std::vector<uint8_t> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(in),
                                std::istreambuf_iterator<char>());
}

// ---------------------------------------------------------------------------
// Checkpoint.

static const char kCkptMagic[5] = {'D', 'N', 'R', 'V', '1'};

std::vector<uint8_t> checkpoint_serialize(const ModelConfig& cfg,
                                          const ParamStore<float>& params) {
    ByteWriter w;
    w.raw(kCkptMagic, 5);
    std::string js = cfg.to_json().dump();
    w.u64(js.size());
    w.raw(js.data(), js.size());
    w.u32((uint32_t)params.items.size());
    for (const auto& [name, t] : params.items) {
        w.str(name);
        w.u8(0);  // f32
        w.u32((uint32_t)t.shape().size());
        for (int64_t d : t.shape()) w.u64((uint64_t)d);
        static_assert(sizeof(float) == 4);
        for (float v : t.data()) {
            uint32_t u;
            std::memcpy(&u, &v, 4);
            w.u32(u);
        }
    }
    return std::move(w.bytes);
}

void checkpoint_deserialize(const std::vector<uint8_t>& bytes, ModelConfig& cfg,
                            ParamStore<float>& params) {
    ByteReader r(bytes);
    char magic[5];
    r.raw(magic, 5);
    if (std::memcmp(magic, kCkptMagic, 5) != 0) throw IoError("bad checkpoint magic");
    uint64_t jn = r.u64();
    std::string js(jn, '\0');
    r.raw(js.data(), jn);
    cfg = ModelConfig::from_json(nlohmann::json::parse(js));
    uint32_t count = r.u32();
    params.items.clear();
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        uint8_t dtype = r.u8();
        if (dtype != 0) throw IoError("checkpoint tensor '" + name + "': unsupported dtype");
        uint32_t rank = r.u32();
        Shape shape(rank);
        for (uint32_t d = 0; d < rank; ++d) shape[d] = (int64_t)r.u64();
        std::vector<float> data((size_t)numel(shape));
        for (auto& v : data) {
            uint32_t u = r.u32();
            std::memcpy(&v, &u, 4);
        }
        params.add(name, Tensor<float>::from(shape, std::move(data)));
    }
}

void checkpoint_save(const fs::path& path, const ModelConfig& cfg,
                     const ParamStore<float>& params) {
    write_file_atomic(path, checkpoint_serialize(cfg, params));
}

void checkpoint_load(const fs::path& path, ModelConfig& cfg, ParamStore<float>& params) {
    checkpoint_deserialize(read_file(path), cfg, params);
}

}  // namespace dnerv
