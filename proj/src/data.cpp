#include "megan/data.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "megan/io.hpp"

namespace fs = std::filesystem;

namespace megan {

// ---- PNG codec -------------------------------------------------------------
// Minimal but complete 8-bit RGB support: we emit filter-0 scanlines through
// zlib and accept any valid non-interlaced RGB8 file (all five row filters).

namespace {

void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xFF));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xFF));
    out.push_back(static_cast<uint8_t>(v & 0xFF));
}

uint32_t get_u32be(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const uint8_t* data,
               size_t len) {
    put_u32be(out, static_cast<uint32_t>(len));
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    if (len) out.insert(out.end(), data, data + len);
    uint32_t crc = static_cast<uint32_t>(
        crc32(0, out.data() + start, static_cast<uInt>(len + 4)));
    put_u32be(out, crc);
}

constexpr uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};

uint8_t quantize_byte(double v) {
    v = std::min(1.0, std::max(0.0, v));
    return static_cast<uint8_t>(std::floor(v * 255.0 + 0.5));
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

std::vector<uint8_t> png_encode(const Tensor& frame) {
    if (frame.rank() != 3 || frame.dim(0) != 3)
        throw ShapeError("png: expected [3,H,W] frame, got " + frame.shape_str());
    const int h = frame.dim(1), w = frame.dim(2);

    std::vector<uint8_t> raw(static_cast<size_t>(h) * (1 + 3 * static_cast<size_t>(w)));
    size_t pos = 0;
    for (int y = 0; y < h; ++y) {
        raw[pos++] = 0;  // filter: none
        for (int x = 0; x < w; ++x) {
            raw[pos++] = quantize_byte(frame.at(0, y, x));
            raw[pos++] = quantize_byte(frame.at(1, y, x));
            raw[pos++] = quantize_byte(frame.at(2, y, x));
        }
    }

    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) !=
        Z_OK)
        throw IoError("png: deflate failed");
    compressed.resize(bound);

    std::vector<uint8_t> out(kPngSig, kPngSig + 8);
    uint8_t ihdr[13];
    ihdr[0] = static_cast<uint8_t>(w >> 24);
    ihdr[1] = static_cast<uint8_t>((w >> 16) & 0xFF);
    ihdr[2] = static_cast<uint8_t>((w >> 8) & 0xFF);
    ihdr[3] = static_cast<uint8_t>(w & 0xFF);
    ihdr[4] = static_cast<uint8_t>(h >> 24);
    ihdr[5] = static_cast<uint8_t>((h >> 16) & 0xFF);
    ihdr[6] = static_cast<uint8_t>((h >> 8) & 0xFF);
    ihdr[7] = static_cast<uint8_t>(h & 0xFF);
    ihdr[8] = 8;   // bit depth
    ihdr[9] = 2;   // color type: truecolor RGB
    ihdr[10] = 0;  // compression
    ihdr[11] = 0;  // filter method
    ihdr[12] = 0;  // no interlace
    put_chunk(out, "IHDR", ihdr, 13);
    put_chunk(out, "IDAT", compressed.data(), compressed.size());
    put_chunk(out, "IEND", nullptr, 0);
    return out;
}

Tensor png_decode(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSig, 8) != 0)
        throw IoError("png: bad signature");
    size_t pos = 8;
    int w = 0, h = 0;
    bool have_ihdr = false;
    bool have_iend = false;
    std::vector<uint8_t> idat;
    while (pos + 12 <= bytes.size()) {
        const uint32_t len = get_u32be(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw IoError("png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const uint8_t* data = bytes.data() + pos + 8;
        const uint32_t stored_crc = get_u32be(bytes.data() + pos + 8 + len);
        const uint32_t crc =
            static_cast<uint32_t>(crc32(0, bytes.data() + pos + 4, len + 4));
        if (crc != stored_crc) throw IoError("png: chunk crc mismatch");
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw IoError("png: bad IHDR");
            w = static_cast<int>(get_u32be(data));
            h = static_cast<int>(get_u32be(data + 4));
            if (data[8] != 8) throw IoError("png: only 8-bit images supported");
            if (data[9] != 2) throw IoError("png: non-RGB color type " + std::to_string(data[9]));
            if (data[12] != 0) throw IoError("png: interlaced images not supported");
            have_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            have_iend = true;
            break;
        }
        pos += 12 + len;
    }
    if (!have_ihdr || w <= 0 || h <= 0) throw IoError("png: missing image header");
    if (!have_iend) throw IoError("png: truncated file (no IEND)");
    if (idat.empty()) throw IoError("png: missing image data");

    const size_t stride = 3 * static_cast<size_t>(w);
    std::vector<uint8_t> raw(static_cast<size_t>(h) * (1 + stride));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw IoError("png: inflate failed");

    // undo row filters in place (prev = reconstructed previous scanline)
    std::vector<uint8_t> img(static_cast<size_t>(h) * stride);
    for (int y = 0; y < h; ++y) {
        const uint8_t filt = raw[static_cast<size_t>(y) * (1 + stride)];
        const uint8_t* src = raw.data() + static_cast<size_t>(y) * (1 + stride) + 1;
        uint8_t* dst = img.data() + static_cast<size_t>(y) * stride;
        const uint8_t* up = y > 0 ? dst - stride : nullptr;
        for (size_t i = 0; i < stride; ++i) {
            const int a = i >= 3 ? dst[i - 3] : 0;
            const int b = up ? up[i] : 0;
            const int c = (up && i >= 3) ? up[i - 3] : 0;
            int v = src[i];
            switch (filt) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw IoError("png: unknown filter " + std::to_string(filt));
            }
            dst[i] = static_cast<uint8_t>(v & 0xFF);
        }
    }

    Tensor t({3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const uint8_t* px = img.data() + static_cast<size_t>(y) * stride + 3 * static_cast<size_t>(x);
            t.at(0, y, x) = px[0] / 255.0;
            t.at(1, y, x) = px[1] / 255.0;
            t.at(2, y, x) = px[2] / 255.0;
        }
    return t;
}

Tensor png_read(const std::string& path) { return png_decode(read_file(path)); }

void png_write(const Tensor& frame, const std::string& path) {
    std::vector<uint8_t> bytes = png_encode(frame);
    write_file_atomic(path, bytes.data(), bytes.size());
}

// ---- bicubic resampling ---------------------------------------------------------

namespace {

// Keys kernel, a = -0.5
double keys(double t) {
    t = std::fabs(t);
    if (t <= 1.0) return (1.5 * t - 2.5) * t * t + 1.0;
    if (t < 2.0) return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0;
    return 0.0;
}

// one horizontal pass over a [C,H,W] tensor
Tensor resize_axis_w(const Tensor& in, int out_w) {
    const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
    const double ratio = static_cast<double>(w) / out_w;
    Tensor out({c, h, out_w});
    std::vector<int> idx(static_cast<size_t>(out_w) * 4);
    std::vector<double> wt(static_cast<size_t>(out_w) * 4);
    for (int o = 0; o < out_w; ++o) {
        const double s = (o + 0.5) * ratio - 0.5;
        const int i0 = static_cast<int>(std::floor(s));
        for (int k = 0; k < 4; ++k) {
            const int i = i0 - 1 + k;
            idx[static_cast<size_t>(o) * 4 + k] = std::min(w - 1, std::max(0, i));
            wt[static_cast<size_t>(o) * 4 + k] = keys(s - i);
        }
    }
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y) {
            const double* row = in.data() + in.idx3(ci, y, 0);
            double* orow = out.data() + out.idx3(ci, y, 0);
            for (int o = 0; o < out_w; ++o) {
                const int* ip = idx.data() + static_cast<size_t>(o) * 4;
                const double* wp = wt.data() + static_cast<size_t>(o) * 4;
                orow[o] = wp[0] * row[ip[0]] + wp[1] * row[ip[1]] + wp[2] * row[ip[2]] +
                          wp[3] * row[ip[3]];
            }
        }
    return out;
}

Tensor transpose_hw(const Tensor& in) {
    const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
    Tensor out({c, w, h});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(ci, x, y) = in.at(ci, y, x);
    return out;
}

}  // namespace

Tensor bicubic_resize(const Tensor& frame, int out_h, int out_w) {
    if (frame.rank() != 3) throw ShapeError("bicubic_resize: expected CHW input");
    Tensor t = resize_axis_w(frame, out_w);
    t = transpose_hw(t);
    t = resize_axis_w(t, out_h);
    t = transpose_hw(t);
    for (double& v : t.values()) v = std::min(1.0, std::max(0.0, v));
    return t;
}

Tensor bicubic_downsample(const Tensor& frame, int factor) {
    if (frame.dim(1) % factor != 0 || frame.dim(2) % factor != 0)
        throw ShapeError("bicubic_downsample: dims " + frame.shape_str() +
                         " not divisible by " + std::to_string(factor));
    return bicubic_resize(frame, frame.dim(1) / factor, frame.dim(2) / factor);
}

Tensor bicubic_upsample(const Tensor& frame, int factor) {
    return bicubic_resize(frame, frame.dim(1) * factor, frame.dim(2) * factor);
}

// ---- frame selection -------------------------------------------------------------

VideoClip select_frames(const std::vector<Tensor>& hr_frames, const std::string& clip_id) {
    if (hr_frames.size() != 7)
        throw ShapeError("select_frames: expected 7 HR frames, got " +
                         std::to_string(hr_frames.size()));
    VideoClip clip;
    clip.clip_id = clip_id;
    clip.hr_frames = hr_frames;
    for (int i : {0, 2, 4, 6}) clip.lr_frames.push_back(bicubic_downsample(hr_frames[static_cast<size_t>(i)]));
    return clip;
}

// ---- synthetic scenes --------------------------------------------------------------

SceneSpec make_scene(Rng& rng, int size, int n_objects) {
    if (n_objects < 1) throw ValueError("make_scene: need at least one object");
    SceneSpec scene;
    scene.size = size;
    for (int ch = 0; ch < 3; ++ch) {
        scene.bg_base[ch] = rng.uniform(0.15, 0.6);
        scene.bg_dx[ch] = rng.uniform(-0.3, 0.3);
        scene.bg_dy[ch] = rng.uniform(-0.3, 0.3);
    }
    for (int i = 0; i < n_objects; ++i) {
        ObjectSpec obj;
        obj.ellipse = rng.coin();
        obj.cx = rng.uniform(0.25, 0.75) * size;
        obj.cy = rng.uniform(0.25, 0.75) * size;
        obj.half_w = rng.uniform(0.08, 0.22) * size;
        obj.half_h = rng.uniform(0.08, 0.22) * size;
        const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        const double speed = rng.uniform(0.8, 2.0);  // capped at 2 px/frame
        obj.vx = speed * std::cos(angle);
        obj.vy = speed * std::sin(angle);
        obj.r = rng.uniform(0.0, 1.0);
        obj.g = rng.uniform(0.0, 1.0);
        obj.b = rng.uniform(0.0, 1.0);
        obj.drift = rng.coin() ? rng.uniform(-0.04, 0.04) : 0.0;
        scene.objects.push_back(obj);
    }
    return scene;
}

Tensor render_frame(const SceneSpec& scene, int t) {
    const int size = scene.size;
    Tensor frame({3, size, size});
    const int ss = 4;  // supersampling grid
    const double inv = 1.0 / (ss * ss);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            double acc[3] = {0, 0, 0};
            for (int sy = 0; sy < ss; ++sy) {
                for (int sx = 0; sx < ss; ++sx) {
                    const double px = x + (sx + 0.5) / ss;
                    const double py = y + (sy + 0.5) / ss;
                    double col[3];
                    for (int ch = 0; ch < 3; ++ch)
                        col[ch] = scene.bg_base[ch] + scene.bg_dx[ch] * (px / size) +
                                  scene.bg_dy[ch] * (py / size);
                    for (const ObjectSpec& obj : scene.objects) {
                        const double cx = obj.cx + obj.vx * t;
                        const double cy = obj.cy + obj.vy * t;
                        const double rx = (px - cx) / obj.half_w;
                        const double ry = (py - cy) / obj.half_h;
                        const bool inside = obj.ellipse ? (rx * rx + ry * ry <= 1.0)
                                                        : (std::fabs(rx) <= 1.0 && std::fabs(ry) <= 1.0);
                        if (inside) {
                            const double gain = 1.0 + obj.drift * t;
                            col[0] = obj.r * gain;
                            col[1] = obj.g * gain;
                            col[2] = obj.b * gain;
                        }
                    }
                    for (int ch = 0; ch < 3; ++ch)
                        acc[ch] += std::min(1.0, std::max(0.0, col[ch]));
                }
            }
            for (int ch = 0; ch < 3; ++ch) frame.at(ch, y, x) = acc[ch] * inv;
        }
    }
    return frame;
}

// ---- dataset generation / loading -------------------------------------------------

namespace {

// PNG quantization applied up front so the on-disk degradation invariant
// (LR == downsample of the stored HR bytes) is bit-exact.
Tensor quantize_frame(const Tensor& frame) {
    Tensor q = frame;
    for (double& v : q.values()) v = quantize_byte(v) / 255.0;
    return q;
}

std::string clip_dir(const std::string& root, const std::string& id) {
    return root + "/clip/" + id;
}

}  // namespace

void synth_generate(const std::string& root, uint64_t seed, int n_clips, int size,
                    int n_objects) {
    if (size % 4 != 0)
        throw ValueError("synth: size " + std::to_string(size) + " must be divisible by 4");
    if (n_clips < 1) throw ValueError("synth: need at least one clip");
    std::error_code ec;
    fs::create_directories(root + "/clip", ec);
    if (ec) throw IoError("synth: cannot create " + root + ": " + ec.message());

    std::string manifest;
    for (int ci = 0; ci < n_clips; ++ci) {
        char idbuf[32];
        std::snprintf(idbuf, sizeof idbuf, "clip_%04d", ci);
        const std::string id = idbuf;
        const std::string dir = clip_dir(root, id);
        fs::create_directories(dir, ec);
        if (ec) throw IoError("synth: cannot create " + dir);

        Rng rng(Rng::derive(seed, 1, static_cast<uint64_t>(ci)));
        SceneSpec scene = make_scene(rng, size, n_objects);
        std::vector<Tensor> hr(7);
        for (int t = 0; t < 7; ++t) hr[static_cast<size_t>(t)] = quantize_frame(render_frame(scene, t));
        for (int t = 0; t < 7; ++t)
            png_write(hr[static_cast<size_t>(t)], dir + "/hr_" + std::to_string(t + 1) + ".png");
        int li = 1;
        for (int t : {0, 2, 4, 6}) {
            png_write(bicubic_downsample(hr[static_cast<size_t>(t)]),
                      dir + "/lr_" + std::to_string(li) + ".png");
            ++li;
        }
        manifest += id;
        manifest += '\n';
    }
    write_file_atomic(root + "/manifest.txt", manifest.data(), manifest.size());
}

DatasetManifest load_manifest(const std::string& root) {
    std::ifstream in(root + "/manifest.txt");
    if (!in) throw IoError("dataset: cannot open " + root + "/manifest.txt");
    DatasetManifest m;
    m.root = root;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty()) m.clip_ids.push_back(line);
    }
    if (m.clip_ids.empty()) throw IoError("dataset: empty manifest in " + root);
    return m;
}

VideoClip load_clip(const DatasetManifest& manifest, size_t index, bool verify) {
    if (index >= manifest.clip_ids.size()) throw ValueError("dataset: clip index out of range");
    const std::string dir = clip_dir(manifest.root, manifest.clip_ids[index]);
    VideoClip clip;
    clip.clip_id = manifest.clip_ids[index];
    for (int t = 1; t <= 7; ++t)
        clip.hr_frames.push_back(png_read(dir + "/hr_" + std::to_string(t) + ".png"));
    for (int t = 1; t <= 4; ++t)
        clip.lr_frames.push_back(png_read(dir + "/lr_" + std::to_string(t) + ".png"));
    if (verify) {
        int li = 0;
        for (int t : {0, 2, 4, 6}) {
            Tensor expect = quantize_frame(bicubic_downsample(clip.hr_frames[static_cast<size_t>(t)]));
            const Tensor& got = clip.lr_frames[static_cast<size_t>(li)];
            require_same_shape(expect, got, "clip degradation");
            for (size_t i = 0; i < expect.size(); ++i)
                if (expect[i] != got[i])
                    throw ValueError("dataset: clip " + clip.clip_id +
                                     " violates the degradation invariant (lr_" +
                                     std::to_string(li + 1) + ")");
            ++li;
        }
    }
    return clip;
}

}  // namespace megan
