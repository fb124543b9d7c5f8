#include "megan/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

namespace megan {

double psnr(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "psnr");
    double mse = 0.0;
    const double* pa = a.data();
    const double* pb = b.data();
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = pa[i] - pb[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

namespace {

constexpr int kWin = 11;

const double* gaussian_window() {
    static double win[kWin * kWin];
    static bool ready = false;
    if (!ready) {
        const double sigma = 1.5;
        double total = 0.0;
        for (int y = 0; y < kWin; ++y)
            for (int x = 0; x < kWin; ++x) {
                const double dy = y - (kWin - 1) / 2.0;
                const double dx = x - (kWin - 1) / 2.0;
                win[y * kWin + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                total += win[y * kWin + x];
            }
        for (double& v : win) v /= total;
        ready = true;
    }
    return win;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "ssim");
    if (a.rank() != 3) throw ShapeError("ssim: expected CHW frames");
    const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
    if (h < kWin || w < kWin)
        throw ShapeError("ssim: image " + a.shape_str() + " smaller than the 11x11 window");

    const double* win = gaussian_window();
    const double c1 = 0.01 * 0.01;  // (K1 * L)^2
    const double c2 = 0.03 * 0.03;  // (K2 * L)^2

    double total = 0.0;
    for (int ci = 0; ci < c; ++ci) {
        double acc = 0.0;
        size_t count = 0;
        for (int y = 0; y + kWin <= h; ++y) {
            for (int x = 0; x + kWin <= w; ++x) {
                double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
                for (int wy = 0; wy < kWin; ++wy)
                    for (int wx = 0; wx < kWin; ++wx) {
                        const double wv = win[wy * kWin + wx];
                        const double va = a.at(ci, y + wy, x + wx);
                        const double vb = b.at(ci, y + wy, x + wx);
                        mx += wv * va;
                        my += wv * vb;
                        mxx += wv * va * va;
                        myy += wv * vb * vb;
                        mxy += wv * (va * vb);
                    }
                const double vx = mxx - mx * mx;
                const double vy = myy - my * my;
                const double cov = mxy - mx * my;
                const double val = ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
                                   ((mx * mx + my * my + c1) * (vx + vy + c2));
                acc += val;
                ++count;
            }
        }
        total += acc / static_cast<double>(count);
    }
    return total / c;
}

MetricReport evaluate_frames(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt) {
    if (pred.size() != gt.size())
        throw ShapeError("evaluate: " + std::to_string(pred.size()) + " predictions vs " +
                         std::to_string(gt.size()) + " references");
    MetricReport r;
    double psum = 0.0, ssum = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        r.psnr.push_back(psnr(pred[i], gt[i]));
        r.ssim.push_back(ssim(pred[i], gt[i]));
        psum += r.psnr.back();
        ssum += r.ssim.back();
    }
    r.mean_psnr = psum / static_cast<double>(pred.size());
    r.mean_ssim = ssum / static_cast<double>(pred.size());
    return r;
}

namespace {

std::string fmt4(double v) {
    if (std::isinf(v)) return "inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

}  // namespace

std::string format_eval_table(const MetricReport& report) {
    std::string out;
    for (size_t i = 0; i < report.psnr.size(); ++i) {
        out += std::to_string(i + 1);
        out += "  ";
        out += fmt4(report.psnr[i]);
        out += "  ";
        out += fmt4(report.ssim[i]);
        out += "\n";
    }
    out += "mean  " + fmt4(report.mean_psnr) + "  " + fmt4(report.mean_ssim) + "\n";
    return out;
}

}  // namespace megan
