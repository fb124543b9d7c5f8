#include "megan/blocks.hpp"

#include <cmath>

namespace megan {

namespace {

Tensor zero_bias(int cout) { return Tensor({cout}); }

// Small row-major matrix kernels for the non-local block. All operands are
// raw pointers into tensor storage; shapes are tiny (C x P with P = H*W).

// C[m x n] += A[m x k] * B[k x n]
void mm(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
            const double av = a[static_cast<size_t>(i) * k + l];
            if (av == 0.0) continue;
            const double* brow = b + static_cast<size_t>(l) * n;
            double* crow = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
}

// C[m x n] += A^T * B with A stored [k x m]
void mtm(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int l = 0; l < k; ++l)
        for (int i = 0; i < m; ++i) {
            const double av = a[static_cast<size_t>(l) * m + i];
            if (av == 0.0) continue;
            const double* brow = b + static_cast<size_t>(l) * n;
            double* crow = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
}

// C[m x n] += A * B^T with B stored [n x k]
void mmt(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            const double* arow = a + static_cast<size_t>(i) * k;
            const double* brow = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
            c[static_cast<size_t>(i) * n + j] += acc;
        }
}

}  // namespace

// ---- non-local ------------------------------------------------------------

NonLocalParams NonLocalParams::create(int channels) {
    if (channels % 2 != 0)
        throw ShapeError("nonlocal: channel count " + std::to_string(channels) + " must be even");
    const int half = channels / 2;
    NonLocalParams p;
    p.w_u = Tensor({half, channels, 1, 1});
    p.w_v = Tensor({half, channels, 1, 1});
    p.w_g = Tensor({half, channels, 1, 1});
    p.w_z = Tensor({channels, half, 1, 1});
    return p;
}

Tensor nonlocal_forward(const Tensor& x, const NonLocalParams& p, NonLocalNorm norm,
                        NonLocalCtx* ctx) {
    if (x.rank() != 4) throw ShapeError("nonlocal: expected NCHW input");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (c % 2 != 0) throw ShapeError("nonlocal: channel count " + std::to_string(c) + " must be even");
    if (p.w_u.dim(1) != c) throw ShapeError("nonlocal: weights built for " +
                                            std::to_string(p.w_u.dim(1)) + " channels, input has " +
                                            std::to_string(c));
    const int c2 = c / 2;
    const int pn = h * w;

    Tensor u({n, c2, h, w}), v({n, c2, h, w}), g({n, c2, h, w});
    Tensor att({n, pn, pn});
    Tensor scores, row_sum;
    if (norm == NonLocalNorm::sum) {
        scores = Tensor({n, pn, pn});
        row_sum = Tensor({n, pn});
    }
    Tensor y({n, c2, h, w});
    Tensor z = x;  // residual

    for (int bi = 0; bi < n; ++bi) {
        const double* xb = x.data() + static_cast<size_t>(bi) * c * pn;
        double* ub = u.data() + static_cast<size_t>(bi) * c2 * pn;
        double* vb = v.data() + static_cast<size_t>(bi) * c2 * pn;
        double* gb = g.data() + static_cast<size_t>(bi) * c2 * pn;
        mm(p.w_u.data(), xb, ub, c2, c, pn);
        mm(p.w_v.data(), xb, vb, c2, c, pn);
        mm(p.w_g.data(), xb, gb, c2, c, pn);

        double* ab = att.data() + static_cast<size_t>(bi) * pn * pn;
        mtm(ub, vb, ab, pn, c2, pn);  // scores = U^T V

        if (norm == NonLocalNorm::softmax) {
            for (int i = 0; i < pn; ++i) {
                double* row = ab + static_cast<size_t>(i) * pn;
                double mx = row[0];
                for (int j = 1; j < pn; ++j) mx = std::max(mx, row[j]);
                double zsum = 0.0;
                for (int j = 0; j < pn; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    zsum += row[j];
                }
                for (int j = 0; j < pn; ++j) row[j] /= zsum;
            }
        } else {
            double* sb = scores.data() + static_cast<size_t>(bi) * pn * pn;
            double* db = row_sum.data() + static_cast<size_t>(bi) * pn;
            for (size_t i = 0; i < static_cast<size_t>(pn) * pn; ++i) sb[i] = ab[i];
            for (int i = 0; i < pn; ++i) {
                double* row = ab + static_cast<size_t>(i) * pn;
                double d = 0.0;
                for (int j = 0; j < pn; ++j) d += row[j];
                if (std::fabs(d) < 1e-12)
                    throw ValueError("nonlocal: sum normalization hit a vanishing row sum");
                db[i] = d;
                for (int j = 0; j < pn; ++j) row[j] /= d;
            }
        }

        // y_i = sum_j att_ij g_j  ->  Y = G * A^T
        double* yb = y.data() + static_cast<size_t>(bi) * c2 * pn;
        mmt(gb, ab, yb, c2, pn, pn);

        double* zb = z.data() + static_cast<size_t>(bi) * c * pn;
        mm(p.w_z.data(), yb, zb, c, c2, pn);
    }

    if (ctx) {
        ctx->x = x;
        ctx->u = u;
        ctx->v = v;
        ctx->g = g;
        ctx->att = att;
        ctx->y = y;
        ctx->scores = scores;
        ctx->row_sum = row_sum;
        ctx->norm = norm;
    }
    return z;
}

Tensor nonlocal_backward(const Tensor& dz, const NonLocalCtx& ctx,
                         const NonLocalParams& p, NonLocalParams& dp) {
    const int n = ctx.x.dim(0), c = ctx.x.dim(1), h = ctx.x.dim(2), w = ctx.x.dim(3);
    const int c2 = c / 2;
    const int pn = h * w;
    require_same_shape(dz, ctx.x, "nonlocal_backward");

    Tensor dx = dz;  // residual term
    std::vector<double> dy_buf(static_cast<size_t>(c2) * pn);
    std::vector<double> dg_buf(static_cast<size_t>(c2) * pn);
    std::vector<double> du_buf(static_cast<size_t>(c2) * pn);
    std::vector<double> dv_buf(static_cast<size_t>(c2) * pn);
    std::vector<double> da_buf(static_cast<size_t>(pn) * pn);
    std::vector<double> ds_buf(static_cast<size_t>(pn) * pn);

    for (int bi = 0; bi < n; ++bi) {
        const double* xb = ctx.x.data() + static_cast<size_t>(bi) * c * pn;
        const double* ub = ctx.u.data() + static_cast<size_t>(bi) * c2 * pn;
        const double* vb = ctx.v.data() + static_cast<size_t>(bi) * c2 * pn;
        const double* gb = ctx.g.data() + static_cast<size_t>(bi) * c2 * pn;
        const double* ab = ctx.att.data() + static_cast<size_t>(bi) * pn * pn;
        const double* yb = ctx.y.data() + static_cast<size_t>(bi) * c2 * pn;
        const double* dzb = dz.data() + static_cast<size_t>(bi) * c * pn;

        // dWz += dZ * Y^T ; dY = Wz^T dZ
        mmt(dzb, yb, dp.w_z.data(), c, pn, c2);
        std::fill(dy_buf.begin(), dy_buf.end(), 0.0);
        mtm(p.w_z.data(), dzb, dy_buf.data(), c2, c, pn);

        // dG = dY * A ; dA_ij = dY[:,i] . G[:,j]
        std::fill(dg_buf.begin(), dg_buf.end(), 0.0);
        mm(dy_buf.data(), ab, dg_buf.data(), c2, pn, pn);
        std::fill(da_buf.begin(), da_buf.end(), 0.0);
        for (int i = 0; i < pn; ++i)
            for (int j = 0; j < pn; ++j) {
                double acc = 0.0;
                for (int l = 0; l < c2; ++l)
                    acc += dy_buf[static_cast<size_t>(l) * pn + i] * gb[static_cast<size_t>(l) * pn + j];
                da_buf[static_cast<size_t>(i) * pn + j] = acc;
            }

        std::fill(ds_buf.begin(), ds_buf.end(), 0.0);
        if (ctx.norm == NonLocalNorm::softmax) {
            for (int i = 0; i < pn; ++i) {
                const double* arow = ab + static_cast<size_t>(i) * pn;
                const double* darow = da_buf.data() + static_cast<size_t>(i) * pn;
                double acc = 0.0;
                for (int j = 0; j < pn; ++j) acc += arow[j] * darow[j];
                double* dsrow = ds_buf.data() + static_cast<size_t>(i) * pn;
                for (int j = 0; j < pn; ++j) dsrow[j] = arow[j] * (darow[j] - acc);
            }
        } else {
            const double* db = ctx.row_sum.data() + static_cast<size_t>(bi) * pn;
            for (int i = 0; i < pn; ++i) {
                const double* arow = ab + static_cast<size_t>(i) * pn;
                const double* darow = da_buf.data() + static_cast<size_t>(i) * pn;
                double acc = 0.0;
                for (int j = 0; j < pn; ++j) acc += arow[j] * darow[j];
                double* dsrow = ds_buf.data() + static_cast<size_t>(i) * pn;
                for (int j = 0; j < pn; ++j) dsrow[j] = (darow[j] - acc) / db[i];
            }
        }

        // S = U^T V: dU = V dS^T, dV = U dS
        std::fill(du_buf.begin(), du_buf.end(), 0.0);
        std::fill(dv_buf.begin(), dv_buf.end(), 0.0);
        mmt(vb, ds_buf.data(), du_buf.data(), c2, pn, pn);
        mm(ub, ds_buf.data(), dv_buf.data(), c2, pn, pn);

        // embeddings: dW += dE * X^T ; dX += W^T dE
        double* dxb = dx.data() + static_cast<size_t>(bi) * c * pn;
        mmt(du_buf.data(), xb, dp.w_u.data(), c2, pn, c);
        mmt(dv_buf.data(), xb, dp.w_v.data(), c2, pn, c);
        mmt(dg_buf.data(), xb, dp.w_g.data(), c2, pn, c);
        mtm(p.w_u.data(), du_buf.data(), dxb, c, c2, pn);
        mtm(p.w_v.data(), dv_buf.data(), dxb, c, c2, pn);
        mtm(p.w_g.data(), dg_buf.data(), dxb, c, c2, pn);
    }
    return dx;
}

// ---- deformable convolution -------------------------------------------------

DeformConvParams DeformConvParams::create(int cin, int cout, bool modulated) {
    DeformConvParams p;
    p.weight = Tensor({cout, cin, 3, 3});
    p.bias = Tensor({cout});
    p.modulated = modulated;
    return p;
}

DeformConvParams DeformConvParams::identity(int channels) {
    DeformConvParams p = create(channels, channels, false);
    for (int c = 0; c < channels; ++c) p.weight.at(c, c, 1, 1) = 1.0;
    return p;
}

namespace {

void check_deform_shapes(const Tensor& x, const Tensor& offsets, const Tensor* mask,
                         const DeformConvParams& p) {
    if (x.rank() != 4 || offsets.rank() != 4) throw ShapeError("deform_conv2d: expected NCHW tensors");
    if (offsets.dim(1) != 18)
        throw ShapeError("deform_conv2d: offset channel count " + std::to_string(offsets.dim(1)) +
                         " != 18");
    if (offsets.dim(0) != x.dim(0) || offsets.dim(2) != x.dim(2) || offsets.dim(3) != x.dim(3))
        throw ShapeError("deform_conv2d: offsets " + offsets.shape_str() + " vs input " + x.shape_str());
    if (p.weight.dim(1) != x.dim(1))
        throw ShapeError("deform_conv2d: weight in-channels " + std::to_string(p.weight.dim(1)) +
                         " != input channels " + std::to_string(x.dim(1)));
    if (p.modulated) {
        if (!mask) throw ShapeError("deform_conv2d: modulated but no mask given");
        if (mask->dim(1) != 9)
            throw ShapeError("deform_conv2d: mask channel count " + std::to_string(mask->dim(1)) +
                             " != 9");
        if (mask->dim(0) != x.dim(0) || mask->dim(2) != x.dim(2) || mask->dim(3) != x.dim(3))
            throw ShapeError("deform_conv2d: mask " + mask->shape_str() + " vs input " + x.shape_str());
    }
}

inline double sigmoid_scalar(double v) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

}  // namespace

Tensor deform_conv2d(const Tensor& x, const Tensor& offsets, const Tensor* mask,
                     const DeformConvParams& p) {
    check_deform_shapes(x, offsets, mask, p);
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int cout = p.weight.dim(0);
    Tensor out({n, cout, h, w});
    const size_t plane = static_cast<size_t>(h) * w;

    std::vector<double> vals(static_cast<size_t>(cin) * 9);
    for (int bi = 0; bi < n; ++bi) {
        const double* xb = x.data() + static_cast<size_t>(bi) * cin * plane;
        for (int oy = 0; oy < h; ++oy) {
            for (int ox = 0; ox < w; ++ox) {
                double mk[9];
                for (int k = 0; k < 9; ++k) {
                    const int ky = k / 3, kx = k % 3;
                    const double dy = offsets.at(bi, 2 * k, oy, ox);
                    const double dx = offsets.at(bi, 2 * k + 1, oy, ox);
                    const double py = oy + (ky - 1) + dy;
                    const double px = ox + (kx - 1) + dx;
                    mk[k] = p.modulated ? sigmoid_scalar(mask->at(bi, k, oy, ox)) : 1.0;

                    const double fx0 = std::floor(px), fy0 = std::floor(py);
                    const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
                    const double axf = px - fx0, ayf = py - fy0;
                    const double w00 = (1.0 - axf) * (1.0 - ayf), w10 = axf * (1.0 - ayf);
                    const double w01 = (1.0 - axf) * ayf, w11 = axf * ayf;
                    const bool ix0 = x0 >= 0 && x0 < w, ix1 = x0 + 1 >= 0 && x0 + 1 < w;
                    const bool iy0 = y0 >= 0 && y0 < h, iy1 = y0 + 1 >= 0 && y0 + 1 < h;
                    for (int ci = 0; ci < cin; ++ci) {
                        const double* pch = xb + ci * plane;
                        double v = 0.0;
                        if (iy0) {
                            if (ix0) v += w00 * pch[static_cast<size_t>(y0) * w + x0];
                            if (ix1) v += w10 * pch[static_cast<size_t>(y0) * w + x0 + 1];
                        }
                        if (iy1) {
                            if (ix0) v += w01 * pch[static_cast<size_t>(y0 + 1) * w + x0];
                            if (ix1) v += w11 * pch[static_cast<size_t>(y0 + 1) * w + x0 + 1];
                        }
                        vals[static_cast<size_t>(ci) * 9 + k] = v;
                    }
                }
                for (int co = 0; co < cout; ++co) {
                    double acc = p.bias[static_cast<size_t>(co)];
                    const double* wr = p.weight.data() + static_cast<size_t>(co) * cin * 9;
                    for (int ci = 0; ci < cin; ++ci) {
                        const double* vk = vals.data() + static_cast<size_t>(ci) * 9;
                        const double* wk = wr + static_cast<size_t>(ci) * 9;
                        for (int k = 0; k < 9; ++k) acc += wk[k] * mk[k] * vk[k];
                    }
                    out.at(bi, co, oy, ox) = acc;
                }
            }
        }
    }
    return out;
}

void deform_conv2d_backward(const Tensor& dy, const Tensor& x, const Tensor& offsets,
                            const Tensor* mask, const DeformConvParams& p,
                            Tensor& dx, Tensor& doffsets, Tensor* dmask,
                            DeformConvParams& dp) {
    check_deform_shapes(x, offsets, mask, p);
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int cout = p.weight.dim(0);
    const size_t plane = static_cast<size_t>(h) * w;

    std::vector<double> vals(static_cast<size_t>(cin) * 9);
    std::vector<double> dvals(static_cast<size_t>(cin) * 9);

    for (int bi = 0; bi < n; ++bi) {
        const double* xb = x.data() + static_cast<size_t>(bi) * cin * plane;
        double* dxb = dx.data() + static_cast<size_t>(bi) * cin * plane;
        for (int oy = 0; oy < h; ++oy) {
            for (int ox = 0; ox < w; ++ox) {
                double mk[9], px9[9], py9[9];
                for (int k = 0; k < 9; ++k) {
                    const int ky = k / 3, kx = k % 3;
                    py9[k] = oy + (ky - 1) + offsets.at(bi, 2 * k, oy, ox);
                    px9[k] = ox + (kx - 1) + offsets.at(bi, 2 * k + 1, oy, ox);
                    mk[k] = p.modulated ? sigmoid_scalar(mask->at(bi, k, oy, ox)) : 1.0;
                    const double fx0 = std::floor(px9[k]), fy0 = std::floor(py9[k]);
                    const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
                    const double axf = px9[k] - fx0, ayf = py9[k] - fy0;
                    const double w00 = (1.0 - axf) * (1.0 - ayf), w10 = axf * (1.0 - ayf);
                    const double w01 = (1.0 - axf) * ayf, w11 = axf * ayf;
                    const bool ix0 = x0 >= 0 && x0 < w, ix1 = x0 + 1 >= 0 && x0 + 1 < w;
                    const bool iy0 = y0 >= 0 && y0 < h, iy1 = y0 + 1 >= 0 && y0 + 1 < h;
                    for (int ci = 0; ci < cin; ++ci) {
                        const double* pch = xb + ci * plane;
                        double v = 0.0;
                        if (iy0) {
                            if (ix0) v += w00 * pch[static_cast<size_t>(y0) * w + x0];
                            if (ix1) v += w10 * pch[static_cast<size_t>(y0) * w + x0 + 1];
                        }
                        if (iy1) {
                            if (ix0) v += w01 * pch[static_cast<size_t>(y0 + 1) * w + x0];
                            if (ix1) v += w11 * pch[static_cast<size_t>(y0 + 1) * w + x0 + 1];
                        }
                        vals[static_cast<size_t>(ci) * 9 + k] = v;
                    }
                }

                std::fill(dvals.begin(), dvals.end(), 0.0);
                double dmk[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
                for (int co = 0; co < cout; ++co) {
                    const double g = dy.at(bi, co, oy, ox);
                    if (g == 0.0) continue;
                    dp.bias[static_cast<size_t>(co)] += g;
                    double* dwr = dp.weight.data() + static_cast<size_t>(co) * cin * 9;
                    const double* wr = p.weight.data() + static_cast<size_t>(co) * cin * 9;
                    for (int ci = 0; ci < cin; ++ci) {
                        const double* vk = vals.data() + static_cast<size_t>(ci) * 9;
                        double* dvk = dvals.data() + static_cast<size_t>(ci) * 9;
                        const double* wk = wr + static_cast<size_t>(ci) * 9;
                        double* dwk = dwr + static_cast<size_t>(ci) * 9;
                        for (int k = 0; k < 9; ++k) {
                            dwk[k] += g * mk[k] * vk[k];
                            dvk[k] += g * wk[k] * mk[k];
                            dmk[k] += g * wk[k] * vk[k];
                        }
                    }
                }

                for (int k = 0; k < 9; ++k) {
                    const double fx0 = std::floor(px9[k]), fy0 = std::floor(py9[k]);
                    const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
                    const double axf = px9[k] - fx0, ayf = py9[k] - fy0;
                    const double w00 = (1.0 - axf) * (1.0 - ayf), w10 = axf * (1.0 - ayf);
                    const double w01 = (1.0 - axf) * ayf, w11 = axf * ayf;
                    const bool ix0 = x0 >= 0 && x0 < w, ix1 = x0 + 1 >= 0 && x0 + 1 < w;
                    const bool iy0 = y0 >= 0 && y0 < h, iy1 = y0 + 1 >= 0 && y0 + 1 < h;
                    double gx = 0.0, gy = 0.0;
                    for (int ci = 0; ci < cin; ++ci) {
                        const double gv = dvals[static_cast<size_t>(ci) * 9 + k];
                        const double* pch = xb + ci * plane;
                        double* dpch = dxb + ci * plane;
                        double v00 = 0.0, v10 = 0.0, v01 = 0.0, v11 = 0.0;
                        if (iy0) {
                            if (ix0) {
                                v00 = pch[static_cast<size_t>(y0) * w + x0];
                                dpch[static_cast<size_t>(y0) * w + x0] += gv * w00;
                            }
                            if (ix1) {
                                v10 = pch[static_cast<size_t>(y0) * w + x0 + 1];
                                dpch[static_cast<size_t>(y0) * w + x0 + 1] += gv * w10;
                            }
                        }
                        if (iy1) {
                            if (ix0) {
                                v01 = pch[static_cast<size_t>(y0 + 1) * w + x0];
                                dpch[static_cast<size_t>(y0 + 1) * w + x0] += gv * w01;
                            }
                            if (ix1) {
                                v11 = pch[static_cast<size_t>(y0 + 1) * w + x0 + 1];
                                dpch[static_cast<size_t>(y0 + 1) * w + x0 + 1] += gv * w11;
                            }
                        }
                        gx += gv * ((1.0 - ayf) * (v10 - v00) + ayf * (v11 - v01));
                        gy += gv * ((1.0 - axf) * (v01 - v00) + axf * (v11 - v10));
                    }
                    doffsets.at(bi, 2 * k, oy, ox) += gy;
                    doffsets.at(bi, 2 * k + 1, oy, ox) += gx;
                    if (p.modulated && dmask) {
                        const double s = mk[k];
                        dmask->at(bi, k, oy, ox) += dmk[k] * s * (1.0 - s);
                    }
                }
            }
        }
    }
}

// ---- offset net ---------------------------------------------------------------

OffsetNetParams OffsetNetParams::create(int channels, bool modulated) {
    OffsetNetParams p;
    const int out_ch = modulated ? 27 : 18;
    p.w1 = Tensor({channels, 2 * channels, 3, 3});
    p.b1 = Tensor({channels});
    p.w2 = Tensor({out_ch, channels, 3, 3});
    p.b2 = Tensor({out_ch});
    return p;
}

Tensor offsetnet_forward(const Tensor& a, const Tensor& b, const OffsetNetParams& p,
                         OffsetNetCtx* ctx) {
    Tensor in = concat_channels({&a, &b});
    Tensor pre = conv2d(in, p.w1, p.b1, conv3x3_pad1());
    Tensor h1 = leaky_relu(pre, kLreluSlope);
    Tensor out = conv2d(h1, p.w2, p.b2, conv3x3_pad1());
    if (ctx) {
        ctx->in = std::move(in);
        ctx->pre = std::move(pre);
    }
    return out;
}

void offsetnet_backward(const Tensor& dout, const OffsetNetCtx& ctx,
                        const OffsetNetParams& p, OffsetNetParams& dp,
                        Tensor& da, Tensor& db) {
    Tensor h1 = leaky_relu(ctx.pre, kLreluSlope);
    Tensor dh1 = zeros_like(h1);
    conv2d_backward(dout, h1, p.w2, conv3x3_pad1(), &dh1, &dp.w2, &dp.b2);
    Tensor dpre = leaky_relu_backward(dh1, ctx.pre, kLreluSlope);
    Tensor din = zeros_like(ctx.in);
    conv2d_backward(dpre, ctx.in, p.w1, conv3x3_pad1(), &din, &dp.w1, &dp.b1);
    const int ca = da.dim(1);
    add_inplace(da, slice_channels(din, 0, ca));
    add_inplace(db, slice_channels(din, ca, din.dim(1)));
}

// ---- feature temporal interpolation ----------------------------------------------

BlendParams BlendParams::create(int channels) {
    BlendParams p;
    p.c1 = Tensor({channels, channels, 1, 1});
    p.c3 = Tensor({channels, channels, 1, 1});
    return p;
}

InterpParams InterpParams::create(int channels, bool modulated) {
    InterpParams p;
    p.off1 = OffsetNetParams::create(channels, modulated);
    p.off3 = OffsetNetParams::create(channels, modulated);
    p.dc1 = DeformConvParams::create(channels, channels, modulated);
    p.dc3 = DeformConvParams::create(channels, channels, modulated);
    p.blend = BlendParams::create(channels);
    return p;
}

Tensor feature_interpolate(const Tensor& f1, const Tensor& f3, const InterpParams& p,
                           InterpCtx* ctx) {
    require_same_shape(f1, f3, "feature_interpolate");
    InterpCtx local;
    InterpCtx* c = ctx ? ctx : &local;
    c->f1 = f1;
    c->f3 = f3;

    c->raw1 = offsetnet_forward(f1, f3, p.off1, &c->off1);
    Tensor off1 = slice_channels(c->raw1, 0, 18);
    Tensor mask1;
    if (p.dc1.modulated) mask1 = slice_channels(c->raw1, 18, 27);
    c->s1 = deform_conv2d(f1, off1, p.dc1.modulated ? &mask1 : nullptr, p.dc1);

    c->raw3 = offsetnet_forward(f3, f1, p.off3, &c->off3);
    Tensor off3 = slice_channels(c->raw3, 0, 18);
    Tensor mask3;
    if (p.dc3.modulated) mask3 = slice_channels(c->raw3, 18, 27);
    c->s3 = deform_conv2d(f3, off3, p.dc3.modulated ? &mask3 : nullptr, p.dc3);

    Tensor zb({f1.dim(1)});
    Tensor out = conv2d(c->s1, p.blend.c1, zb, conv1x1());
    Tensor out3 = conv2d(c->s3, p.blend.c3, zb, conv1x1());
    add_inplace(out, out3);
    return out;
}

void feature_interpolate_backward(const Tensor& dout, const InterpCtx& ctx,
                                  const InterpParams& p, InterpParams& dp,
                                  Tensor& df1, Tensor& df3) {
    Tensor ds1 = zeros_like(ctx.s1);
    Tensor ds3 = zeros_like(ctx.s3);
    conv2d_backward(dout, ctx.s1, p.blend.c1, conv1x1(), &ds1, &dp.blend.c1, nullptr);
    conv2d_backward(dout, ctx.s3, p.blend.c3, conv1x1(), &ds3, &dp.blend.c3, nullptr);

    // branch 1
    {
        Tensor off1 = slice_channels(ctx.raw1, 0, 18);
        Tensor mask1;
        if (p.dc1.modulated) mask1 = slice_channels(ctx.raw1, 18, 27);
        Tensor doff = zeros_like(off1);
        Tensor dmask;
        if (p.dc1.modulated) dmask = zeros_like(mask1);
        deform_conv2d_backward(ds1, ctx.f1, off1, p.dc1.modulated ? &mask1 : nullptr, p.dc1,
                               df1, doff, p.dc1.modulated ? &dmask : nullptr, dp.dc1);
        Tensor draw = zeros_like(ctx.raw1);
        add_into_channels(draw, doff, 0);
        if (p.dc1.modulated) add_into_channels(draw, dmask, 18);
        offsetnet_backward(draw, ctx.off1, p.off1, dp.off1, df1, df3);
    }
    // branch 3
    {
        Tensor off3 = slice_channels(ctx.raw3, 0, 18);
        Tensor mask3;
        if (p.dc3.modulated) mask3 = slice_channels(ctx.raw3, 18, 27);
        Tensor doff = zeros_like(off3);
        Tensor dmask;
        if (p.dc3.modulated) dmask = zeros_like(mask3);
        deform_conv2d_backward(ds3, ctx.f3, off3, p.dc3.modulated ? &mask3 : nullptr, p.dc3,
                               df3, doff, p.dc3.modulated ? &dmask : nullptr, dp.dc3);
        Tensor draw = zeros_like(ctx.raw3);
        add_into_channels(draw, doff, 0);
        if (p.dc3.modulated) add_into_channels(draw, dmask, 18);
        offsetnet_backward(draw, ctx.off3, p.off3, dp.off3, df3, df1);
    }
}

// ---- deformable ConvLSTM ---------------------------------------------------------

ConvLstmParams ConvLstmParams::create(int channels, bool modulated) {
    ConvLstmParams p;
    auto gate_w = [&] { return Tensor({channels, channels, 3, 3}); };
    auto gate_b = [&] { return Tensor({channels}); };
    p.w_xi = gate_w(); p.w_hi = gate_w(); p.b_i = gate_b();
    p.w_xf = gate_w(); p.w_hf = gate_w(); p.b_f = gate_b();
    p.w_xo = gate_w(); p.w_ho = gate_w(); p.b_o = gate_b();
    p.w_xg = gate_w(); p.w_hg = gate_w(); p.b_g = gate_b();
    p.g_h = OffsetNetParams::create(channels, modulated);
    p.g_c = OffsetNetParams::create(channels, modulated);
    p.align_h = DeformConvParams::create(channels, channels, modulated);
    p.align_c = DeformConvParams::create(channels, channels, modulated);
    return p;
}

namespace {

Tensor align_state(const Tensor& state, const Tensor& f_t, const OffsetNetParams& onp,
                   const DeformConvParams& dcp, OffsetNetCtx* octx, Tensor* raw_out) {
    Tensor raw = offsetnet_forward(state, f_t, onp, octx);
    Tensor off = slice_channels(raw, 0, 18);
    Tensor mask;
    if (dcp.modulated) mask = slice_channels(raw, 18, 27);
    Tensor aligned = deform_conv2d(state, off, dcp.modulated ? &mask : nullptr, dcp);
    if (raw_out) *raw_out = std::move(raw);
    return aligned;
}

void align_state_backward(const Tensor& dal, const Tensor& state, const Tensor& raw,
                          const OffsetNetCtx& octx, const OffsetNetParams& onp,
                          const DeformConvParams& dcp, OffsetNetParams& donp,
                          DeformConvParams& ddcp, Tensor& dstate, Tensor& df_t) {
    Tensor off = slice_channels(raw, 0, 18);
    Tensor mask;
    if (dcp.modulated) mask = slice_channels(raw, 18, 27);
    Tensor doff = zeros_like(off);
    Tensor dmask;
    if (dcp.modulated) dmask = zeros_like(mask);
    deform_conv2d_backward(dal, state, off, dcp.modulated ? &mask : nullptr, dcp, dstate,
                           doff, dcp.modulated ? &dmask : nullptr, ddcp);
    Tensor draw = zeros_like(raw);
    add_into_channels(draw, doff, 0);
    if (dcp.modulated) add_into_channels(draw, dmask, 18);
    offsetnet_backward(draw, octx, onp, donp, dstate, df_t);
}

}  // namespace

void dconvlstm_step(const Tensor& h_prev, const Tensor& c_prev, const Tensor& f_t,
                    const ConvLstmParams& p, Tensor& h_t, Tensor& c_t,
                    ConvLstmStepCtx* ctx) {
    require_same_shape(h_prev, f_t, "dconvlstm_step h/f");
    require_same_shape(c_prev, f_t, "dconvlstm_step c/f");
    ConvLstmStepCtx local;
    ConvLstmStepCtx* c = ctx ? ctx : &local;
    c->h_prev = h_prev;
    c->c_prev = c_prev;
    c->f_t = f_t;

    c->h_al = align_state(h_prev, f_t, p.g_h, p.align_h, &c->off_h, &c->raw_h);
    c->c_al = align_state(c_prev, f_t, p.g_c, p.align_c, &c->off_c, &c->raw_c);

    const ConvSpec s3 = conv3x3_pad1();
    Tensor zb({f_t.dim(1)});
    auto gate = [&](const Tensor& wx, const Tensor& wh, const Tensor& b) {
        Tensor acc = conv2d(f_t, wx, b, s3);
        add_inplace(acc, conv2d(c->h_al, wh, zb, s3));
        return acc;
    };
    c->gi = sigmoid(gate(p.w_xi, p.w_hi, p.b_i));
    c->gf = sigmoid(gate(p.w_xf, p.w_hf, p.b_f));
    c->go = sigmoid(gate(p.w_xo, p.w_ho, p.b_o));
    c->gg = tanh_op(gate(p.w_xg, p.w_hg, p.b_g));

    c->c_t = add(mul(c->gf, c->c_al), mul(c->gi, c->gg));
    c->tanh_c = tanh_op(c->c_t);
    c_t = c->c_t;
    h_t = mul(c->go, c->tanh_c);
}

void dconvlstm_step_backward(const Tensor& dh_t, const Tensor& dc_t,
                             const ConvLstmStepCtx& ctx, const ConvLstmParams& p,
                             ConvLstmParams& dp, Tensor& dh_prev, Tensor& dc_prev,
                             Tensor& df_t) {
    const ConvSpec s3 = conv3x3_pad1();

    Tensor dgo = mul(dh_t, ctx.tanh_c);
    Tensor dtanh_c = mul(dh_t, ctx.go);
    Tensor dct = add(dc_t, tanh_backward(dtanh_c, ctx.tanh_c));

    Tensor dgf = mul(dct, ctx.c_al);
    Tensor dc_al = mul(dct, ctx.gf);
    Tensor dgi = mul(dct, ctx.gg);
    Tensor dgg = mul(dct, ctx.gi);

    Tensor dpre_i = sigmoid_backward(dgi, ctx.gi);
    Tensor dpre_f = sigmoid_backward(dgf, ctx.gf);
    Tensor dpre_o = sigmoid_backward(dgo, ctx.go);
    Tensor dpre_g = tanh_backward(dgg, ctx.gg);

    Tensor dh_al = zeros_like(ctx.h_al);
    conv2d_backward(dpre_i, ctx.f_t, p.w_xi, s3, &df_t, &dp.w_xi, &dp.b_i);
    conv2d_backward(dpre_i, ctx.h_al, p.w_hi, s3, &dh_al, &dp.w_hi, nullptr);
    conv2d_backward(dpre_f, ctx.f_t, p.w_xf, s3, &df_t, &dp.w_xf, &dp.b_f);
    conv2d_backward(dpre_f, ctx.h_al, p.w_hf, s3, &dh_al, &dp.w_hf, nullptr);
    conv2d_backward(dpre_o, ctx.f_t, p.w_xo, s3, &df_t, &dp.w_xo, &dp.b_o);
    conv2d_backward(dpre_o, ctx.h_al, p.w_ho, s3, &dh_al, &dp.w_ho, nullptr);
    conv2d_backward(dpre_g, ctx.f_t, p.w_xg, s3, &df_t, &dp.w_xg, &dp.b_g);
    conv2d_backward(dpre_g, ctx.h_al, p.w_hg, s3, &dh_al, &dp.w_hg, nullptr);

    align_state_backward(dh_al, ctx.h_prev, ctx.raw_h, ctx.off_h, p.g_h, p.align_h,
                         dp.g_h, dp.align_h, dh_prev, df_t);
    align_state_backward(dc_al, ctx.c_prev, ctx.raw_c, ctx.off_c, p.g_c, p.align_c,
                         dp.g_c, dp.align_c, dc_prev, df_t);
}

// ---- bidirectional pass ------------------------------------------------------------

BidirParams BidirParams::create(int channels, bool modulated) {
    BidirParams p;
    p.fwd = ConvLstmParams::create(channels, modulated);
    p.bwd = ConvLstmParams::create(channels, modulated);
    p.fuse_w = Tensor({channels, 2 * channels, 1, 1});
    p.fuse_b = Tensor({channels});
    return p;
}

std::vector<Tensor> bidirectional_pass(const std::vector<Tensor>& frames,
                                       const BidirParams& p, BidirCtx* ctx) {
    if (frames.empty()) throw ShapeError("bidirectional_pass: empty frame sequence");
    const size_t t_len = frames.size();
    BidirCtx local;
    BidirCtx* c = ctx ? ctx : &local;
    c->fwd_steps.resize(t_len);
    c->bwd_steps.resize(t_len);
    c->h_fwd.resize(t_len);
    c->h_bwd.resize(t_len);

    Tensor h = zeros_like(frames[0]);
    Tensor cst = zeros_like(frames[0]);
    for (size_t t = 0; t < t_len; ++t) {
        Tensor hn, cn;
        dconvlstm_step(h, cst, frames[t], p.fwd, hn, cn, &c->fwd_steps[t]);
        h = std::move(hn);
        cst = std::move(cn);
        c->h_fwd[t] = h;
    }
    h = zeros_like(frames[0]);
    cst = zeros_like(frames[0]);
    for (size_t ri = 0; ri < t_len; ++ri) {
        const size_t t = t_len - 1 - ri;
        Tensor hn, cn;
        dconvlstm_step(h, cst, frames[t], p.bwd, hn, cn, &c->bwd_steps[t]);
        h = std::move(hn);
        cst = std::move(cn);
        c->h_bwd[t] = h;
    }

    // fuse as two summed 1x1 convs (same arithmetic as a conv over the
    // concat, but commutative in the two directions, which makes the
    // sequence-reversal symmetry bit-exact)
    const int ch = frames[0].dim(1);
    Tensor w_f = slice_channels(p.fuse_w, 0, ch);
    Tensor w_b = slice_channels(p.fuse_w, ch, 2 * ch);
    Tensor zb({ch});
    const size_t plane = static_cast<size_t>(frames[0].dim(2)) * frames[0].dim(3);
    std::vector<Tensor> out(t_len);
    for (size_t t = 0; t < t_len; ++t) {
        out[t] = conv2d(c->h_fwd[t], w_f, zb, conv1x1());
        add_inplace(out[t], conv2d(c->h_bwd[t], w_b, zb, conv1x1()));
        // bias last, after the commutative direction sum
        for (int bi = 0; bi < out[t].dim(0); ++bi)
            for (int cc = 0; cc < ch; ++cc) {
                double* row = out[t].data() + (static_cast<size_t>(bi) * ch + cc) * plane;
                const double bias = p.fuse_b[static_cast<size_t>(cc)];
                for (size_t i = 0; i < plane; ++i) row[i] += bias;
            }
    }
    return out;
}

void bidirectional_backward(const std::vector<Tensor>& dout, const BidirCtx& ctx,
                            const BidirParams& p, BidirParams& dp,
                            std::vector<Tensor>& dframes) {
    const size_t t_len = dout.size();
    const int ch = ctx.h_fwd[0].dim(1);
    Tensor w_f = slice_channels(p.fuse_w, 0, ch);
    Tensor w_b = slice_channels(p.fuse_w, ch, 2 * ch);
    Tensor dw_f = zeros_like(w_f);
    Tensor dw_b = zeros_like(w_b);
    std::vector<Tensor> dh_fwd(t_len), dh_bwd(t_len);
    for (size_t t = 0; t < t_len; ++t) {
        dh_fwd[t] = zeros_like(ctx.h_fwd[t]);
        dh_bwd[t] = zeros_like(ctx.h_bwd[t]);
        conv2d_backward(dout[t], ctx.h_fwd[t], w_f, conv1x1(), &dh_fwd[t], &dw_f, &dp.fuse_b);
        conv2d_backward(dout[t], ctx.h_bwd[t], w_b, conv1x1(), &dh_bwd[t], &dw_b, nullptr);
    }
    add_into_channels(dp.fuse_w, dw_f, 0);
    add_into_channels(dp.fuse_w, dw_b, ch);

    // forward direction: reverse traversal t = T-1 .. 0
    Tensor dh_carry = zeros_like(dh_fwd[0]);
    Tensor dc_carry = zeros_like(dh_fwd[0]);
    for (size_t ri = 0; ri < t_len; ++ri) {
        const size_t t = t_len - 1 - ri;
        Tensor dh_total = add(dh_fwd[t], dh_carry);
        Tensor dh_prev = zeros_like(dh_total);
        Tensor dc_prev = zeros_like(dh_total);
        dconvlstm_step_backward(dh_total, dc_carry, ctx.fwd_steps[t], p.fwd, dp.fwd,
                                dh_prev, dc_prev, dframes[t]);
        dh_carry = std::move(dh_prev);
        dc_carry = std::move(dc_prev);
    }

    // backward direction visited t = T-1 .. 0, so reverse traversal is t = 0 .. T-1
    dh_carry = zeros_like(dh_bwd[0]);
    dc_carry = zeros_like(dh_bwd[0]);
    for (size_t t = 0; t < t_len; ++t) {
        Tensor dh_total = add(dh_bwd[t], dh_carry);
        Tensor dh_prev = zeros_like(dh_total);
        Tensor dc_prev = zeros_like(dh_total);
        dconvlstm_step_backward(dh_total, dc_carry, ctx.bwd_steps[t], p.bwd, dp.bwd,
                                dh_prev, dc_prev, dframes[t]);
        dh_carry = std::move(dh_prev);
        dc_carry = std::move(dc_prev);
    }
}

// ---- residual block ------------------------------------------------------------------

ResBlockParams ResBlockParams::create(int channels) {
    ResBlockParams p;
    p.w1 = Tensor({channels, channels, 3, 3});
    p.b1 = Tensor({channels});
    p.w2 = Tensor({channels, channels, 3, 3});
    p.b2 = Tensor({channels});
    return p;
}

Tensor resblock_forward(const Tensor& x, const ResBlockParams& p, ResBlockCtx* ctx) {
    const ConvSpec s3 = conv3x3_pad1();
    Tensor pre = conv2d(x, p.w1, p.b1, s3);
    Tensor mid = leaky_relu(pre, kLreluSlope);
    Tensor out = conv2d(mid, p.w2, p.b2, s3);
    add_inplace(out, x);
    if (ctx) {
        ctx->x = x;
        ctx->pre = std::move(pre);
    }
    return out;
}

Tensor resblock_backward(const Tensor& dy, const ResBlockCtx& ctx,
                         const ResBlockParams& p, ResBlockParams& dp) {
    const ConvSpec s3 = conv3x3_pad1();
    Tensor mid = leaky_relu(ctx.pre, kLreluSlope);
    Tensor dmid = zeros_like(mid);
    conv2d_backward(dy, mid, p.w2, s3, &dmid, &dp.w2, &dp.b2);
    Tensor dpre = leaky_relu_backward(dmid, ctx.pre, kLreluSlope);
    Tensor dx = dy;  // residual path
    conv2d_backward(dpre, ctx.x, p.w1, s3, &dx, &dp.w1, &dp.b1);
    return dx;
}

// ---- PFRDB ------------------------------------------------------------------------------

PfrdbParams PfrdbParams::create(int channels, int frames) {
    PfrdbParams p;
    p.wa = Tensor({channels, channels, 3, 3});
    p.ba = Tensor({channels});
    p.wb = Tensor({channels, 2 * channels, 3, 3});
    p.bb = Tensor({channels});
    p.w_dist = Tensor({channels, frames * channels, 1, 1});
    p.b_dist = Tensor({channels});
    p.wc = Tensor({channels, 2 * channels, 3, 3});
    p.bc = Tensor({channels});
    return p;
}

std::vector<Tensor> pfrdb_forward(const std::vector<Tensor>& frames, const PfrdbParams& p,
                                  PfrdbCtx* ctx) {
    if (frames.empty()) throw ShapeError("pfrdb: empty frame list");
    for (const Tensor& f : frames) require_same_shape(f, frames[0], "pfrdb frames");
    const size_t t_len = frames.size();
    if (p.w_dist.dim(1) != static_cast<int>(t_len) * frames[0].dim(1))
        throw ShapeError("pfrdb: distillation conv built for " +
                         std::to_string(p.w_dist.dim(1)) + " channels, got " +
                         std::to_string(t_len * frames[0].dim(1)));
    const ConvSpec s3 = conv3x3_pad1();
    PfrdbCtx local;
    PfrdbCtx* c = ctx ? ctx : &local;
    c->x = frames;
    c->pre_a.resize(t_len);
    c->cat_ab.resize(t_len);
    c->s.resize(t_len);
    c->cat_sf.resize(t_len);

    std::vector<const Tensor*> all;
    for (size_t t = 0; t < t_len; ++t) {
        c->pre_a[t] = conv2d(frames[t], p.wa, p.ba, s3);
        Tensor act = leaky_relu(c->pre_a[t], kLreluSlope);
        c->cat_ab[t] = concat_channels({&frames[t], &act});
        c->s[t] = conv2d(c->cat_ab[t], p.wb, p.bb, s3);
    }
    for (size_t t = 0; t < t_len; ++t) all.push_back(&c->s[t]);
    c->cat_all = concat_channels(all);
    c->fused = conv2d(c->cat_all, p.w_dist, p.b_dist, conv1x1());

    std::vector<Tensor> out(t_len);
    for (size_t t = 0; t < t_len; ++t) {
        c->cat_sf[t] = concat_channels({&c->s[t], &c->fused});
        out[t] = conv2d(c->cat_sf[t], p.wc, p.bc, s3);
        add_inplace(out[t], frames[t]);
    }
    return out;
}

void pfrdb_backward(const std::vector<Tensor>& dy, const PfrdbCtx& ctx,
                    const PfrdbParams& p, PfrdbParams& dp, std::vector<Tensor>& dframes) {
    const size_t t_len = dy.size();
    const int ch = ctx.x[0].dim(1);
    const ConvSpec s3 = conv3x3_pad1();

    std::vector<Tensor> ds(t_len);
    Tensor dfused = zeros_like(ctx.fused);
    for (size_t t = 0; t < t_len; ++t) {
        Tensor dcat = zeros_like(ctx.cat_sf[t]);
        conv2d_backward(dy[t], ctx.cat_sf[t], p.wc, s3, &dcat, &dp.wc, &dp.bc);
        ds[t] = slice_channels(dcat, 0, ch);
        add_inplace(dfused, slice_channels(dcat, ch, 2 * ch));
        add_inplace(dframes[t], dy[t]);  // residual
    }

    Tensor dcat_all = zeros_like(ctx.cat_all);
    conv2d_backward(dfused, ctx.cat_all, p.w_dist, conv1x1(), &dcat_all, &dp.w_dist,
                    &dp.b_dist);
    for (size_t t = 0; t < t_len; ++t)
        add_inplace(ds[t], slice_channels(dcat_all, static_cast<int>(t) * ch,
                                          static_cast<int>(t + 1) * ch));

    for (size_t t = 0; t < t_len; ++t) {
        Tensor dcat = zeros_like(ctx.cat_ab[t]);
        conv2d_backward(ds[t], ctx.cat_ab[t], p.wb, s3, &dcat, &dp.wb, &dp.bb);
        add_inplace(dframes[t], slice_channels(dcat, 0, ch));
        Tensor dact = slice_channels(dcat, ch, 2 * ch);
        Tensor dpre = leaky_relu_backward(dact, ctx.pre_a[t], kLreluSlope);
        conv2d_backward(dpre, ctx.x[t], p.wa, s3, &dframes[t], &dp.wa, &dp.ba);
    }
}

// ---- initialization -----------------------------------------------------------------

void NonLocalParams::init(Rng& rng) {
    init_uniform(w_u, rng);
    init_uniform(w_v, rng);
    init_uniform(w_g, rng);
    init_uniform(w_z, rng);
}

void DeformConvParams::init(Rng& rng) {
    init_uniform(weight, rng);
    bias.fill(0.0);
}

void OffsetNetParams::init(Rng& rng) {
    init_uniform(w1, rng);
    b1.fill(0.0);
    w2.fill(0.0);
    b2.fill(0.0);
}

void BlendParams::init(Rng& rng) {
    init_uniform(c1, rng);
    init_uniform(c3, rng);
}

void InterpParams::init(Rng& rng) {
    off1.init(rng);
    off3.init(rng);
    dc1.init(rng);
    dc3.init(rng);
    blend.init(rng);
}

void ConvLstmParams::init(Rng& rng) {
    for (Tensor* w : {&w_xi, &w_hi, &w_xf, &w_hf, &w_xo, &w_ho, &w_xg, &w_hg})
        init_uniform(*w, rng);
    for (Tensor* b : {&b_i, &b_f, &b_o, &b_g}) b->fill(0.0);
    g_h.init(rng);
    g_c.init(rng);
    align_h.init(rng);
    align_c.init(rng);
}

void BidirParams::init(Rng& rng) {
    fwd.init(rng);
    bwd.init(rng);
    init_uniform(fuse_w, rng);
    fuse_b.fill(0.0);
}

void ResBlockParams::init(Rng& rng) {
    init_uniform(w1, rng);
    b1.fill(0.0);
    init_uniform(w2, rng);
    b2.fill(0.0);
}

void PfrdbParams::init(Rng& rng) {
    init_uniform(wa, rng);
    ba.fill(0.0);
    init_uniform(wb, rng);
    bb.fill(0.0);
    init_uniform(w_dist, rng);
    b_dist.fill(0.0);
    init_uniform(wc, rng);
    bc.fill(0.0);
}

}  // namespace megan
