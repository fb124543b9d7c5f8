#ifndef MEGAN_OPS_HPP
#define MEGAN_OPS_HPP

#include "megan/tensor.hpp"

namespace megan {

/// Geometry of a 2-D convolution: kernel size, stride, symmetric zero pad.
struct ConvSpec {
    int kh = 3;
    int kw = 3;
    int stride = 1;
    int pad = 0;

    int out_h(int in_h) const { return (in_h + 2 * pad - kh) / stride + 1; }
    int out_w(int in_w) const { return (in_w + 2 * pad - kw) / stride + 1; }
};

inline ConvSpec conv3x3_pad1() { return ConvSpec{3, 3, 1, 1}; }
inline ConvSpec conv1x1() { return ConvSpec{1, 1, 1, 0}; }

// ---- conv2d -------------------------------------------------------------
// Cross-correlation (no kernel flip) with zero padding.
//   x: [N,Cin,H,W]  w: [Cout,Cin,kh,kw]  b: [Cout]  ->  [N,Cout,H',W']

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const ConvSpec& spec);

/// Accumulates cotangents into dx/dw/db (callers pass zero-initialized
/// tensors, or running accumulators when weights are shared).
void conv2d_backward(const Tensor& dy, const Tensor& x, const Tensor& w,
                     const ConvSpec& spec, Tensor* dx, Tensor* dw, Tensor* db);

// ---- elementwise activations -------------------------------------------

Tensor leaky_relu(const Tensor& x, double slope);
Tensor leaky_relu_backward(const Tensor& dy, const Tensor& x, double slope);

Tensor sigmoid(const Tensor& x);
Tensor sigmoid_backward(const Tensor& dy, const Tensor& y);  // from output

Tensor tanh_op(const Tensor& x);
Tensor tanh_backward(const Tensor& dy, const Tensor& y);  // from output

// ---- softmax ------------------------------------------------------------
// Row-max subtraction keeps huge logits finite.

Tensor softmax(const Tensor& x, int axis);
Tensor softmax_backward(const Tensor& dy, const Tensor& y, int axis);

// ---- bilinear sampling ---------------------------------------------------
// Samples all C channels of f[C,H,W] at continuous (px, py); px indexes
// columns, py rows. Coordinates outside [0,W-1]x[0,H-1] read zeros.

void bilinear_sample(const Tensor& f, double px, double py, double* out);

/// Backward for a single sample: scatters into df and accumulates the
/// coordinate gradients (what makes deformable offsets learnable).
void bilinear_sample_backward(const Tensor& f, double px, double py,
                              const double* dout, Tensor* df, double* dpx,
                              double* dpy);

/// Tensor-valued wrapper used by the gradient checker.
Tensor bilinear_sample_op(const Tensor& f, double px, double py);

// ---- pixel shuffle --------------------------------------------------------
//   out(n, c, h*r+dy, w*r+dx) = in(n, c*r^2 + dy*r + dx, h, w)

Tensor pixel_shuffle(const Tensor& x, int r);
Tensor pixel_unshuffle(const Tensor& x, int r);

// ---- NCHW channel slicing ---------------------------------------------------

Tensor slice_channels(const Tensor& x, int c0, int c1);           // [c0, c1)
void add_into_channels(Tensor& dst, const Tensor& src, int c0);   // dst[:,c0:...] += src

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for rank-4 conv weights
/// (fan_in = Cin*kh*kw); rank-2 uses the trailing dim.
void init_uniform(Tensor& w, Rng& rng);

}  // namespace megan

#endif
