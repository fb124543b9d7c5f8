#include "megan/ops.hpp"

#include <cmath>

namespace megan {

namespace {

// ceil(a / s) for s > 0 and any sign of a
inline int divceil(int a, int s) { return a > 0 ? (a + s - 1) / s : a / s; }

void check_conv_shapes(const Tensor& x, const Tensor& w, const Tensor& b,
                       const ConvSpec& spec) {
    if (x.rank() != 4) throw ShapeError("conv2d: input rank " + std::to_string(x.rank()) + ", expected 4 (NCHW)");
    if (w.rank() != 4) throw ShapeError("conv2d: weight rank " + std::to_string(w.rank()) + ", expected 4");
    if (b.rank() != 1) throw ShapeError("conv2d: bias rank " + std::to_string(b.rank()) + ", expected 1");
    if (w.dim(1) != x.dim(1))
        throw ShapeError("conv2d: weight in-channels " + std::to_string(w.dim(1)) +
                         " != input channels " + std::to_string(x.dim(1)));
    if (b.dim(0) != w.dim(0))
        throw ShapeError("conv2d: bias length " + std::to_string(b.dim(0)) +
                         " != out-channels " + std::to_string(w.dim(0)));
    if (w.dim(2) != spec.kh || w.dim(3) != spec.kw)
        throw ShapeError("conv2d: weight kernel " + std::to_string(w.dim(2)) + "x" +
                         std::to_string(w.dim(3)) + " != spec " + std::to_string(spec.kh) +
                         "x" + std::to_string(spec.kw));
    if (spec.stride < 1 || spec.pad < 0) throw ShapeError("conv2d: bad stride/pad");
    if (spec.out_h(x.dim(2)) < 1)
        throw ShapeError("conv2d: input height " + std::to_string(x.dim(2)) + " too small for kernel");
    if (spec.out_w(x.dim(3)) < 1)
        throw ShapeError("conv2d: input width " + std::to_string(x.dim(3)) + " too small for kernel");
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const ConvSpec& spec) {
    check_conv_shapes(x, w, b, spec);
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int cout = w.dim(0);
    const int oh = spec.out_h(h), ow = spec.out_w(wd);
    const int s = spec.stride, pad = spec.pad;

    Tensor out({n, cout, oh, ow});
    const size_t xplane = static_cast<size_t>(h) * wd;
    const size_t oplane = static_cast<size_t>(oh) * ow;

    for (int bi = 0; bi < n; ++bi) {
        for (int co = 0; co < cout; ++co) {
            double* op = out.data() + (static_cast<size_t>(bi) * cout + co) * oplane;
            const double bias = b[static_cast<size_t>(co)];
            for (size_t i = 0; i < oplane; ++i) op[i] = bias;
            for (int ci = 0; ci < cin; ++ci) {
                const double* xp = x.data() + (static_cast<size_t>(bi) * cin + ci) * xplane;
                for (int ky = 0; ky < spec.kh; ++ky) {
                    const int y_lo = std::max(0, divceil(pad - ky, s));
                    const int y_hi = std::min(oh - 1, (h - 1 + pad - ky) / s);
                    for (int kx = 0; kx < spec.kw; ++kx) {
                        const double wv = w.at(co, ci, ky, kx);
                        if (wv == 0.0) continue;
                        const int x_lo = std::max(0, divceil(pad - kx, s));
                        const int x_hi = std::min(ow - 1, (wd - 1 + pad - kx) / s);
                        const int shift = kx - pad;
                        for (int y = y_lo; y <= y_hi; ++y) {
                            const double* xrow = xp + static_cast<size_t>(y * s - pad + ky) * wd;
                            double* orow = op + static_cast<size_t>(y) * ow;
                            if (s == 1) {
                                for (int xo = x_lo; xo <= x_hi; ++xo) orow[xo] += wv * xrow[xo + shift];
                            } else {
                                for (int xo = x_lo; xo <= x_hi; ++xo) orow[xo] += wv * xrow[xo * s + shift];
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

void conv2d_backward(const Tensor& dy, const Tensor& x, const Tensor& w,
                     const ConvSpec& spec, Tensor* dx, Tensor* dw, Tensor* db) {
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int cout = w.dim(0);
    const int oh = spec.out_h(h), ow = spec.out_w(wd);
    const int s = spec.stride, pad = spec.pad;
    if (dy.rank() != 4 || dy.dim(0) != n || dy.dim(1) != cout || dy.dim(2) != oh || dy.dim(3) != ow)
        throw ShapeError("conv2d_backward: cotangent shape " + dy.shape_str());

    const size_t xplane = static_cast<size_t>(h) * wd;
    const size_t oplane = static_cast<size_t>(oh) * ow;

    if (db) {
        for (int bi = 0; bi < n; ++bi)
            for (int co = 0; co < cout; ++co) {
                const double* dyp = dy.data() + (static_cast<size_t>(bi) * cout + co) * oplane;
                double acc = 0.0;
                for (size_t i = 0; i < oplane; ++i) acc += dyp[i];
                (*db)[static_cast<size_t>(co)] += acc;
            }
    }

    for (int bi = 0; bi < n; ++bi) {
        for (int co = 0; co < cout; ++co) {
            const double* dyp = dy.data() + (static_cast<size_t>(bi) * cout + co) * oplane;
            for (int ci = 0; ci < cin; ++ci) {
                const double* xp = x.data() + (static_cast<size_t>(bi) * cin + ci) * xplane;
                double* dxp = dx ? dx->data() + (static_cast<size_t>(bi) * cin + ci) * xplane : nullptr;
                for (int ky = 0; ky < spec.kh; ++ky) {
                    const int y_lo = std::max(0, divceil(pad - ky, s));
                    const int y_hi = std::min(oh - 1, (h - 1 + pad - ky) / s);
                    for (int kx = 0; kx < spec.kw; ++kx) {
                        const int x_lo = std::max(0, divceil(pad - kx, s));
                        const int x_hi = std::min(ow - 1, (wd - 1 + pad - kx) / s);
                        const int shift = kx - pad;
                        const double wv = w.at(co, ci, ky, kx);
                        double wacc = 0.0;
                        for (int y = y_lo; y <= y_hi; ++y) {
                            const size_t rowoff = static_cast<size_t>(y * s - pad + ky) * wd;
                            const double* xrow = xp + rowoff;
                            const double* dyrow = dyp + static_cast<size_t>(y) * ow;
                            if (dw) {
                                if (s == 1)
                                    for (int xo = x_lo; xo <= x_hi; ++xo) wacc += dyrow[xo] * xrow[xo + shift];
                                else
                                    for (int xo = x_lo; xo <= x_hi; ++xo) wacc += dyrow[xo] * xrow[xo * s + shift];
                            }
                            if (dxp && wv != 0.0) {
                                double* dxrow = dxp + rowoff;
                                if (s == 1)
                                    for (int xo = x_lo; xo <= x_hi; ++xo) dxrow[xo + shift] += wv * dyrow[xo];
                                else
                                    for (int xo = x_lo; xo <= x_hi; ++xo) dxrow[xo * s + shift] += wv * dyrow[xo];
                            }
                        }
                        if (dw) dw->at(co, ci, ky, kx) += wacc;
                    }
                }
            }
        }
    }
}

Tensor leaky_relu(const Tensor& x, double slope) {
    if (!(slope > 0.0 && slope < 1.0)) throw ValueError("leaky_relu: slope must be in (0,1)");
    Tensor y = x;
    for (double& v : y.values())
        if (v < 0.0) v *= slope;
    return y;
}

Tensor leaky_relu_backward(const Tensor& dy, const Tensor& x, double slope) {
    require_same_shape(dy, x, "leaky_relu_backward");
    Tensor dx = dy;
    const double* xp = x.data();
    double* dp = dx.data();
    for (size_t i = 0; i < dx.size(); ++i)
        if (xp[i] < 0.0) dp[i] *= slope;
    return dx;
}

Tensor sigmoid(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.values()) {
        if (v >= 0.0) {
            v = 1.0 / (1.0 + std::exp(-v));
        } else {
            double e = std::exp(v);
            v = e / (1.0 + e);
        }
    }
    return y;
}

Tensor sigmoid_backward(const Tensor& dy, const Tensor& y) {
    require_same_shape(dy, y, "sigmoid_backward");
    Tensor dx = dy;
    const double* yp = y.data();
    double* dp = dx.data();
    for (size_t i = 0; i < dx.size(); ++i) dp[i] *= yp[i] * (1.0 - yp[i]);
    return dx;
}

Tensor tanh_op(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.values()) v = std::tanh(v);
    return y;
}

Tensor tanh_backward(const Tensor& dy, const Tensor& y) {
    require_same_shape(dy, y, "tanh_backward");
    Tensor dx = dy;
    const double* yp = y.data();
    double* dp = dx.data();
    for (size_t i = 0; i < dx.size(); ++i) dp[i] *= 1.0 - yp[i] * yp[i];
    return dx;
}

namespace {

struct AxisSplit {
    size_t outer, len, inner;
};

AxisSplit split_axis(const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.rank())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(x.rank()));
    AxisSplit s{1, static_cast<size_t>(x.dim(axis)), 1};
    for (int i = 0; i < axis; ++i) s.outer *= static_cast<size_t>(x.dim(i));
    for (int i = axis + 1; i < x.rank(); ++i) s.inner *= static_cast<size_t>(x.dim(i));
    return s;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
    AxisSplit s = split_axis(x, axis);
    Tensor y = x;
    double* d = y.data();
    for (size_t o = 0; o < s.outer; ++o) {
        for (size_t in = 0; in < s.inner; ++in) {
            double* lane = d + o * s.len * s.inner + in;
            double mx = lane[0];
            for (size_t k = 1; k < s.len; ++k) mx = std::max(mx, lane[k * s.inner]);
            double z = 0.0;
            for (size_t k = 0; k < s.len; ++k) {
                double e = std::exp(lane[k * s.inner] - mx);
                lane[k * s.inner] = e;
                z += e;
            }
            for (size_t k = 0; k < s.len; ++k) lane[k * s.inner] /= z;
        }
    }
    return y;
}

Tensor softmax_backward(const Tensor& dy, const Tensor& y, int axis) {
    require_same_shape(dy, y, "softmax_backward");
    AxisSplit s = split_axis(y, axis);
    Tensor dx = dy;
    double* dp = dx.data();
    const double* yp = y.data();
    for (size_t o = 0; o < s.outer; ++o) {
        for (size_t in = 0; in < s.inner; ++in) {
            size_t base = o * s.len * s.inner + in;
            double acc = 0.0;
            for (size_t k = 0; k < s.len; ++k) acc += dp[base + k * s.inner] * yp[base + k * s.inner];
            for (size_t k = 0; k < s.len; ++k) {
                size_t i = base + k * s.inner;
                dp[i] = yp[i] * (dp[i] - acc);
            }
        }
    }
    return dx;
}

void bilinear_sample(const Tensor& f, double px, double py, double* out) {
    const int c = f.dim(0), h = f.dim(1), w = f.dim(2);
    const double fx0 = std::floor(px), fy0 = std::floor(py);
    const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
    const double ax = px - fx0, ay = py - fy0;
    const double w00 = (1.0 - ax) * (1.0 - ay), w10 = ax * (1.0 - ay);
    const double w01 = (1.0 - ax) * ay, w11 = ax * ay;
    const bool in_x0 = x0 >= 0 && x0 < w, in_x1 = x0 + 1 >= 0 && x0 + 1 < w;
    const bool in_y0 = y0 >= 0 && y0 < h, in_y1 = y0 + 1 >= 0 && y0 + 1 < h;
    const size_t plane = static_cast<size_t>(h) * w;
    const double* base = f.data();
    for (int ci = 0; ci < c; ++ci) {
        const double* p = base + ci * plane;
        double v = 0.0;
        if (in_y0) {
            if (in_x0) v += w00 * p[static_cast<size_t>(y0) * w + x0];
            if (in_x1) v += w10 * p[static_cast<size_t>(y0) * w + x0 + 1];
        }
        if (in_y1) {
            if (in_x0) v += w01 * p[static_cast<size_t>(y0 + 1) * w + x0];
            if (in_x1) v += w11 * p[static_cast<size_t>(y0 + 1) * w + x0 + 1];
        }
        out[ci] = v;
    }
}

void bilinear_sample_backward(const Tensor& f, double px, double py,
                              const double* dout, Tensor* df, double* dpx,
                              double* dpy) {
    const int c = f.dim(0), h = f.dim(1), w = f.dim(2);
    const double fx0 = std::floor(px), fy0 = std::floor(py);
    const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
    const double ax = px - fx0, ay = py - fy0;
    const double w00 = (1.0 - ax) * (1.0 - ay), w10 = ax * (1.0 - ay);
    const double w01 = (1.0 - ax) * ay, w11 = ax * ay;
    const bool in_x0 = x0 >= 0 && x0 < w, in_x1 = x0 + 1 >= 0 && x0 + 1 < w;
    const bool in_y0 = y0 >= 0 && y0 < h, in_y1 = y0 + 1 >= 0 && y0 + 1 < h;
    const size_t plane = static_cast<size_t>(h) * w;
    double gx = 0.0, gy = 0.0;
    for (int ci = 0; ci < c; ++ci) {
        const double* p = f.data() + ci * plane;
        double* dp = df ? df->data() + ci * plane : nullptr;
        const double g = dout[ci];
        double v00 = 0.0, v10 = 0.0, v01 = 0.0, v11 = 0.0;
        if (in_y0) {
            if (in_x0) {
                v00 = p[static_cast<size_t>(y0) * w + x0];
                if (dp) dp[static_cast<size_t>(y0) * w + x0] += g * w00;
            }
            if (in_x1) {
                v10 = p[static_cast<size_t>(y0) * w + x0 + 1];
                if (dp) dp[static_cast<size_t>(y0) * w + x0 + 1] += g * w10;
            }
        }
        if (in_y1) {
            if (in_x0) {
                v01 = p[static_cast<size_t>(y0 + 1) * w + x0];
                if (dp) dp[static_cast<size_t>(y0 + 1) * w + x0] += g * w01;
            }
            if (in_x1) {
                v11 = p[static_cast<size_t>(y0 + 1) * w + x0 + 1];
                if (dp) dp[static_cast<size_t>(y0 + 1) * w + x0 + 1] += g * w11;
            }
        }
        // d(weight)/d(coordinate) chain, zero-padded values already excluded
        gx += g * ((1.0 - ay) * (v10 - v00) + ay * (v11 - v01));
        gy += g * ((1.0 - ax) * (v01 - v00) + ax * (v11 - v10));
    }
    if (dpx) *dpx += gx;
    if (dpy) *dpy += gy;
}

Tensor bilinear_sample_op(const Tensor& f, double px, double py) {
    if (f.rank() != 3) throw ShapeError("bilinear_sample: expected CHW input");
    Tensor out({f.dim(0)});
    bilinear_sample(f, px, py, out.data());
    return out;
}

Tensor pixel_shuffle(const Tensor& x, int r) {
    if (x.rank() != 4) throw ShapeError("pixel_shuffle: expected NCHW input");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (c % (r * r) != 0)
        throw ShapeError("pixel_shuffle: channels " + std::to_string(c) +
                         " not divisible by r^2 = " + std::to_string(r * r));
    const int co = c / (r * r);
    Tensor out({n, co, h * r, w * r});
    for (int bi = 0; bi < n; ++bi)
        for (int ci = 0; ci < co; ++ci)
            for (int dy = 0; dy < r; ++dy)
                for (int dx = 0; dx < r; ++dx) {
                    const int src_c = ci * r * r + dy * r + dx;
                    for (int y = 0; y < h; ++y) {
                        const double* srow = x.data() + x.idx4(bi, src_c, y, 0);
                        double* drow = out.data() + out.idx4(bi, ci, y * r + dy, dx);
                        for (int xx = 0; xx < w; ++xx) drow[static_cast<size_t>(xx) * r] = srow[xx];
                    }
                }
    return out;
}

Tensor slice_channels(const Tensor& x, int c0, int c1) {
    if (x.rank() != 4) throw ShapeError("slice_channels: expected NCHW input");
    if (c0 < 0 || c1 > x.dim(1) || c0 >= c1)
        throw ShapeError("slice_channels: bad range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") for " + std::to_string(x.dim(1)) + " channels");
    const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const size_t plane = static_cast<size_t>(h) * w;
    Tensor out({n, c1 - c0, h, w});
    for (int bi = 0; bi < n; ++bi) {
        const double* src = x.data() + (static_cast<size_t>(bi) * x.dim(1) + c0) * plane;
        double* dst = out.data() + static_cast<size_t>(bi) * (c1 - c0) * plane;
        for (size_t i = 0; i < static_cast<size_t>(c1 - c0) * plane; ++i) dst[i] = src[i];
    }
    return out;
}

void add_into_channels(Tensor& dst, const Tensor& src, int c0) {
    if (dst.rank() != 4 || src.rank() != 4) throw ShapeError("add_into_channels: expected NCHW");
    if (c0 < 0 || c0 + src.dim(1) > dst.dim(1) || dst.dim(0) != src.dim(0) ||
        dst.dim(2) != src.dim(2) || dst.dim(3) != src.dim(3))
        throw ShapeError("add_into_channels: incompatible shapes " + dst.shape_str() +
                         " vs " + src.shape_str());
    const int n = dst.dim(0), h = dst.dim(2), w = dst.dim(3);
    const size_t plane = static_cast<size_t>(h) * w;
    for (int bi = 0; bi < n; ++bi) {
        double* d = dst.data() + (static_cast<size_t>(bi) * dst.dim(1) + c0) * plane;
        const double* s = src.data() + static_cast<size_t>(bi) * src.dim(1) * plane;
        for (size_t i = 0; i < static_cast<size_t>(src.dim(1)) * plane; ++i) d[i] += s[i];
    }
}

void init_uniform(Tensor& w, Rng& rng) {
    size_t fan_in = 1;
    for (int i = 1; i < w.rank(); ++i) fan_in *= static_cast<size_t>(w.dim(i));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    fill_uniform(w, rng, bound);
}

Tensor pixel_unshuffle(const Tensor& x, int r) {
    if (x.rank() != 4) throw ShapeError("pixel_unshuffle: expected NCHW input");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % r != 0 || w % r != 0)
        throw ShapeError("pixel_unshuffle: spatial dims not divisible by r");
    const int ho = h / r, wo = w / r;
    Tensor out({n, c * r * r, ho, wo});
    for (int bi = 0; bi < n; ++bi)
        for (int ci = 0; ci < c; ++ci)
            for (int dy = 0; dy < r; ++dy)
                for (int dx = 0; dx < r; ++dx) {
                    const int dst_c = ci * r * r + dy * r + dx;
                    for (int y = 0; y < ho; ++y) {
                        const double* srow = x.data() + x.idx4(bi, ci, y * r + dy, dx);
                        double* drow = out.data() + out.idx4(bi, dst_c, y, 0);
                        for (int xx = 0; xx < wo; ++xx) drow[xx] = srow[static_cast<size_t>(xx) * r];
                    }
                }
    return out;
}

}  // namespace megan
