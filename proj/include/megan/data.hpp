#ifndef MEGAN_DATA_HPP
#define MEGAN_DATA_HPP

#include <string>
#include <vector>

#include "megan/tensor.hpp"

namespace megan {

// A training clip: 7 ground-truth HR frames plus the 4 LR inputs derived by
// bicubic-downsampling the odd-indexed (1,3,5,7) HR frames.
struct VideoClip {
    std::vector<Tensor> hr_frames;  // 7 x [3,H,W], values in [0,1]
    std::vector<Tensor> lr_frames;  // 4 x [3,H/4,W/4]
    std::string clip_id;
};

// ---- PNG (8-bit RGB) --------------------------------------------------------

/// Read an 8-bit RGB PNG into [3,H,W] with value = byte/255.
Tensor png_read(const std::string& path);

/// Write [3,H,W] in [0,1]; quantization rounds half away from zero. The file
/// is written via temp + rename.
void png_write(const Tensor& frame, const std::string& path);

// in-memory codec, exposed for tests
std::vector<uint8_t> png_encode(const Tensor& frame);
Tensor png_decode(const std::vector<uint8_t>& bytes);

// ---- resampling -------------------------------------------------------------

/// Separable Keys bicubic (a = -0.5), source coordinate of output pixel o is
/// (o + 0.5) * in/out - 0.5, replicate edges, result clamped to [0,1].
Tensor bicubic_resize(const Tensor& frame, int out_h, int out_w);

/// The x4 degradation: dims must be divisible by the factor.
Tensor bicubic_downsample(const Tensor& frame, int factor = 4);

/// x4 upsampling with the same kernel (baseline use).
Tensor bicubic_upsample(const Tensor& frame, int factor = 4);

// ---- frame selection -----------------------------------------------------------

/// From 7 HR frames: LR inputs = downsample of frames 1,3,5,7 (1-based);
/// ground truth = all 7 untouched.
VideoClip select_frames(const std::vector<Tensor>& hr_frames, const std::string& clip_id);

// ---- synthetic clips -------------------------------------------------------------

struct ObjectSpec {
    bool ellipse = false;
    double cx = 0, cy = 0;          // center at t = 0, HR pixels
    double half_w = 4, half_h = 4;  // half extents
    double vx = 0, vy = 0;          // velocity, px/frame, |v| <= 2
    double r = 1, g = 1, b = 1;     // color
    double drift = 0.0;             // linear brightness drift per frame
};

struct SceneSpec {
    int size = 64;  // square HR frames
    // background: per-channel linear gradient base + slopes
    double bg_base[3] = {0.5, 0.5, 0.5};
    double bg_dx[3] = {0, 0, 0};
    double bg_dy[3] = {0, 0, 0};
    std::vector<ObjectSpec> objects;
};

SceneSpec make_scene(Rng& rng, int size, int n_objects);

/// Render frame t of the scene (anti-aliased by 4x4 supersampling).
Tensor render_frame(const SceneSpec& scene, int t);

/// Write `n_clips` synthetic clips under `root` (clip/<id>/hr_<t>.png,
/// lr_<t>.png) plus manifest.txt. Deterministic per (seed, clip index).
void synth_generate(const std::string& root, uint64_t seed, int n_clips, int size,
                    int n_objects);

// ---- dataset ------------------------------------------------------------------------

struct DatasetManifest {
    std::string root;
    std::vector<std::string> clip_ids;
};

DatasetManifest load_manifest(const std::string& root);

/// Loads one clip and verifies the degradation invariant (LR files match the
/// bicubic downsample of the quantized HR frames bit-for-bit).
VideoClip load_clip(const DatasetManifest& manifest, size_t index, bool verify = true);

}  // namespace megan

#endif
