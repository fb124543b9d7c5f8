#ifndef MEGAN_TRAIN_HPP
#define MEGAN_TRAIN_HPP

#include <string>
#include <vector>

#include "megan/data.hpp"
#include "megan/model.hpp"
#include "megan/tensor.hpp"

namespace megan {

// ---- loss -------------------------------------------------------------------

enum class LossReduction {
    global,       // sqrt(sum d^2 + eps^2): the single-global-sqrt form
    elementwise,  // mean of sqrt(d^2 + eps^2) per element
};

double charbonnier_loss(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt,
                        double eps, LossReduction red = LossReduction::global);

/// Returns the loss and fills dpred with d(loss)/d(pred).
double charbonnier_loss_grad(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt,
                             double eps, LossReduction red, std::vector<Tensor>& dpred);

// ---- schedule ------------------------------------------------------------------

struct LrSchedule {
    double eta_max = 1e-4;
    double eta_min = 1e-7;
    int period = 20000;
};

/// eta(t) = eta_min + 0.5 (eta_max - eta_min) (1 + cos(pi min(t,T)/T)).
double cosine_lr(int64_t t, const LrSchedule& s);

// ---- Adam --------------------------------------------------------------------

struct AdamState {
    std::vector<Tensor> m, v;  // aligned with the params enumeration order
    int64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState create(MeganParams& params);
};

/// One bias-corrected update on a single tensor (t is the post-increment step
/// count, i.e. 1 on the first call).
void adam_update(Tensor& p, const Tensor& g, Tensor& m, Tensor& v, int64_t t, double lr,
                 double beta1, double beta2, double eps);

/// Full-model step; throws on non-finite gradients before touching any state.
void adam_step(MeganParams& params, MeganParams& grads, AdamState& state, double lr);

// ---- augmentation ----------------------------------------------------------------

Tensor rot90(const Tensor& frame);   // CHW, counter-clockwise
Tensor flip_h(const Tensor& frame);  // mirror columns
Tensor flip_v(const Tensor& frame);  // mirror rows

/// Seeded coin flips for horizontal/vertical flip, 90-degree rotation count
/// and temporal reversal; LR and HR frames transform consistently.
VideoClip augment(const VideoClip& clip, uint64_t seed);

// ---- config ------------------------------------------------------------------------
// Flat "key = value" text file, '#' comments, unknown keys rejected.
// Required keys: iterations, seed.

struct TrainConfig {
    int batch_size = 2;
    int64_t iterations = 0;
    int crop = 32;
    uint64_t seed = 0;
    double epsilon = 1e-3;
    LossReduction reduction = LossReduction::global;
    LrSchedule schedule;
    int64_t checkpoint_every = 0;  // 0: only the final checkpoint
    bool enable_augment = true;
    std::string resume;  // optional checkpoint to continue from
};

struct RunConfig {
    MeganConfig model;
    TrainConfig train;
};

RunConfig parse_config_file(const std::string& path);
RunConfig parse_config_text(const std::string& text);

// ---- loop ---------------------------------------------------------------------------

struct TrainResult {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    int64_t iterations_run = 0;
};

/// Runs the loop, writing `out_ckpt` and `out_ckpt + ".trace.csv"` (one
/// "iteration,loss,lr" row per step; a resumed run appends, keeping traces
/// contiguous across restarts).
TrainResult train_loop(const RunConfig& cfg, const DatasetManifest& data,
                       const std::string& out_ckpt);

// sub-stream ids for Rng::derive
inline constexpr uint64_t kStreamInit = 0;
inline constexpr uint64_t kStreamScene = 1;
inline constexpr uint64_t kStreamClip = 2;
inline constexpr uint64_t kStreamAugment = 3;
inline constexpr uint64_t kStreamCrop = 4;
inline constexpr uint64_t kStreamPool = 5;

}  // namespace megan

#endif
