#ifndef MEGAN_METRICS_HPP
#define MEGAN_METRICS_HPP

#include <string>
#include <vector>

#include "megan/tensor.hpp"

namespace megan {

struct MetricReport {
    std::vector<double> psnr;  // dB per frame, +inf for identical frames
    std::vector<double> ssim;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
};

/// 10*log10(1/MSE) over all channels and pixels; identical frames return +inf.
double psnr(const Tensor& a, const Tensor& b);

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, L = 1, valid-region windowing, channels averaged.
double ssim(const Tensor& a, const Tensor& b);

MetricReport evaluate_frames(const std::vector<Tensor>& pred,
                             const std::vector<Tensor>& gt);

/// Text table: one row per frame "frame_idx  psnr_db  ssim", then a "mean"
/// row; 4 decimal places, infinite PSNR printed as "inf".
std::string format_eval_table(const MetricReport& report);

}  // namespace megan

#endif
