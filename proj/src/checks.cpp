#include <cmath>

#include "megan/gradcheck.hpp"
#include "megan/lmga.hpp"
#include "megan/model.hpp"
#include "megan/train.hpp"

// Registered finite-difference checks, one per differentiable operation.
// Shapes stay tiny so the whole suite runs in seconds; magnitudes keep
// LeakyReLU pre-activations and bilinear sample points away from their kinks
// at the h = 1e-5 step scale.

namespace megan {

namespace {

// uniform magnitude in [lo, hi] with random sign
void fill_rand(Tensor& t, Rng& rng, double lo, double hi, bool signed_vals = true) {
    for (double& v : t.values()) {
        const double mag = rng.uniform(lo, hi);
        v = signed_vals && rng.coin() ? -mag : mag;
    }
}

Tensor rand_tensor(std::vector<int> dims, Rng& rng, double lo, double hi,
                   bool signed_vals = true) {
    Tensor t(std::move(dims));
    fill_rand(t, rng, lo, hi, signed_vals);
    return t;
}

template <class P>
void fill_params(P& p, Rng& rng, double lo = 0.05, double hi = 0.45) {
    p.for_each([&](const std::string&, Tensor& t) { fill_rand(t, rng, lo, hi); });
}

// Bias predicted offsets into roughly [0.05, 0.6], clear of the integer
// sampling lattice where the bilinear coordinate derivative is non-smooth;
// a h = 1e-5 parameter perturbation then never crosses a kink, while the
// final-conv weights stay large enough that upstream gradients sit well
// above the central-difference noise floor.
void tame_offset_net(OffsetNetParams& p, Rng& rng) {
    fill_rand(p.w1, rng, 0.05, 0.3);
    fill_rand(p.b1, rng, 0.3, 0.6, false);  // keeps the hidden activations positive
    fill_rand(p.w2, rng, 0.1, 0.3);
    fill_rand(p.b2, rng, 0.25, 0.4, false);
}

// ---- kink margins ------------------------------------------------------------
// Central differences are only meaningful where the composite is
// differentiable. Each check measures how close its forward pass came to a
// LeakyReLU kink, an |x| kink, or the bilinear sampling lattice, and redraws
// its inputs when the margin is thinner than ~100x the step size.

constexpr double kMinMargin = 1e-3;

double lrelu_margin(const Tensor& pre) {
    double m = 1e300;
    for (double v : pre.values()) m = std::min(m, std::fabs(v));
    return m;
}

// distance of every predicted offset to the integer lattice
double lattice_margin(const Tensor& raw_offsets) {
    double m = 1e300;
    const int n = raw_offsets.dim(0), h = raw_offsets.dim(2), w = raw_offsets.dim(3);
    for (int bi = 0; bi < n; ++bi)
        for (int ch = 0; ch < 18; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const double v = raw_offsets.at(bi, ch, y, x);
                    const double fr = v - std::floor(v);
                    m = std::min(m, std::min(fr, 1.0 - fr));
                }
    return m;
}

double offsetnet_margin(const OffsetNetCtx& ctx, const Tensor& raw) {
    return std::min(lrelu_margin(ctx.pre), lattice_margin(raw));
}

double lstm_step_margin(const ConvLstmStepCtx& ctx) {
    return std::min(offsetnet_margin(ctx.off_h, ctx.raw_h),
                    offsetnet_margin(ctx.off_c, ctx.raw_c));
}

double ng_margin(const NgCtx& ctx) {
    return std::min(lrelu_margin(ctx.pre1), lrelu_margin(ctx.pre2));
}

double edge_margin(const EdgeCtx& ctx) {
    double m = 1e300;
    for (const Tensor& pre : ctx.pre1) m = std::min(m, lrelu_margin(pre));
    for (const Tensor& d : ctx.diff) m = std::min(m, lrelu_margin(d));  // |x| kink at 0
    return m;
}

/// Redraws inputs until `margin(inputs)` clears kMinMargin. The redraw
/// sequence is a pure function of the caller's rng, so checks stay
/// reproducible per seed.
template <class Draw, class Margin>
std::vector<Tensor> draw_clear_of_kinks(Draw&& draw, Margin&& margin) {
    std::vector<Tensor> inputs = draw();
    for (int attempt = 0; attempt < 64; ++attempt) {
        if (margin(inputs) >= kMinMargin) break;
        inputs = draw();
    }
    return inputs;
}

template <class P>
void append_params(P& p, const std::string& prefix, std::vector<Tensor>& inputs,
                   std::vector<std::string>& names) {
    p.for_each([&](const std::string& n, Tensor& t) {
        inputs.push_back(t);
        names.push_back(prefix + n);
    });
}

template <class P>
void load_params(P& p, const std::vector<Tensor>& inputs, size_t& pos) {
    p.for_each([&](const std::string&, Tensor& t) { t = inputs[pos++]; });
}

template <class P>
void collect_params(P& p, std::vector<Tensor>& grads) {
    p.for_each([&](const std::string&, Tensor& t) { grads.push_back(t); });
}

GradReport check_conv2d(uint64_t seed, double h, double tol) {
    Rng rng(seed);
    const ConvSpec spec{3, 3, 1, 1};
    CheckableOp op;
    op.name = "conv2d";
    op.input_names = {"x", "w", "b"};
    op.forward = [spec](const std::vector<Tensor>& in) {
        return conv2d(in[0], in[1], in[2], spec);
    };
    op.grad_sum = [spec](const std::vector<Tensor>& in) {
        Tensor y = conv2d(in[0], in[1], in[2], spec);
        Tensor dy = Tensor::full(y.dims(), 1.0);
        Tensor dx = zeros_like(in[0]), dw = zeros_like(in[1]), db = zeros_like(in[2]);
        conv2d_backward(dy, in[0], in[1], spec, &dx, &dw, &db);
        return std::vector<Tensor>{dx, dw, db};
    };
    std::vector<Tensor> inputs = {rand_tensor({2, 3, 5, 5}, rng, 0.1, 1.0),
                                  rand_tensor({4, 3, 3, 3}, rng, 0.1, 0.6),
                                  rand_tensor({4}, rng, 0.05, 0.3)};
    return grad_check(op, inputs, h, tol);
}

GradReport check_elementwise(const char* which, uint64_t seed, double h, double tol) {
    Rng rng(seed);
    const std::string name = which;
    CheckableOp op;
    op.name = name;
    op.input_names = {"x"};
    op.forward = [name](const std::vector<Tensor>& in) {
        if (name == "leaky_relu") return leaky_relu(in[0], 0.1);
        if (name == "sigmoid") return sigmoid(in[0]);
        return tanh_op(in[0]);
    };
    op.grad_sum = [name](const std::vector<Tensor>& in) {
        Tensor dy = Tensor::full(in[0].dims(), 1.0);
        if (name == "leaky_relu") return std::vector<Tensor>{leaky_relu_backward(dy, in[0], 0.1)};
        if (name == "sigmoid") return std::vector<Tensor>{sigmoid_backward(dy, sigmoid(in[0]))};
        return std::vector<Tensor>{tanh_backward(dy, tanh_op(in[0]))};
    };
    // keep every entry at least 1e-3 from the LeakyReLU kink
    std::vector<Tensor> inputs = {rand_tensor({2, 3, 4, 4}, rng, 0.01, 2.0)};
    return grad_check(op, inputs, h, tol);
}

GradReport check_softmax(uint64_t seed, double h, double tol) {
    Rng rng(seed);
    // plain summation of softmax output is constant, so project with fixed
    // random coefficients to expose the jacobian
    Tensor proj = rand_tensor({3, 7}, rng, 0.2, 1.0);
    CheckableOp op;
    op.name = "softmax";
    op.input_names = {"x"};
    op.forward = [proj](const std::vector<Tensor>& in) { return mul(softmax(in[0], 1), proj); };
    op.grad_sum = [proj](const std::vector<Tensor>& in) {
        Tensor y = softmax(in[0], 1);
        return std::vector<Tensor>{softmax_backward(proj, y, 1)};
    };
    std::vector<Tensor> inputs = {rand_tensor({3, 7}, rng, 0.1, 2.0)};
    return grad_check(op, inputs, h, tol);
}

GradReport check_bilinear(uint64_t seed, double h, double tol) {
    Rng rng(seed);
    CheckableOp op;
    op.name = "bilinear_sample";
    op.input_names = {"f", "px", "py"};
    op.forward = [](const std::vector<Tensor>& in) {
        return bilinear_sample_op(in[0], in[1][0], in[2][0]);
    };
    op.grad_sum = [](const std::vector<Tensor>& in) {
        Tensor df = zeros_like(in[0]);
        Tensor out({in[0].dim(0)});
        std::vector<double> ones(static_cast<size_t>(in[0].dim(0)), 1.0);
        double dpx = 0.0, dpy = 0.0;
        bilinear_sample_backward(in[0], in[1][0], in[2][0], ones.data(), &df, &dpx, &dpy);
        return std::vector<Tensor>{df, Tensor::scalar(dpx), Tensor::scalar(dpy)};
    };
    // fractional part in [0.2, 0.8], including slightly out-of-range points
    auto coord = [&](int extent) {
        const int cell = rng.uniform_int(extent + 1) - 1;
        return cell + rng.uniform(0.2, 0.8);
    };
    std::vector<Tensor> inputs = {rand_tensor({3, 5, 5}, rng, 0.1, 1.0),
                                  Tensor::scalar(coord(5)), Tensor::scalar(coord(5))};
    return grad_check(op, inputs, h, tol);
}

GradReport check_pixel_shuffle(uint64_t seed, double h, double tol) {
    Rng rng(seed);
    Tensor proj = rand_tensor({1, 2, 6, 6}, rng, 0.2, 1.0);
    CheckableOp op;
    op.name = "pixel_shuffle";
    op.input_names = {"x"};
    op.forward = [proj](const std::vector<Tensor>& in) {
        return mul(pixel_shuffle(in[0], 2), proj);
    };
    op.grad_sum = [proj](const std::vector<Tensor>&) {
        return std::vector<Tensor>{pixel_unshuffle(proj, 2)};
    };
    std::vector<Tensor> inputs = {rand_tensor({1, 8, 3, 3}, rng, 0.1, 1.0)};
    return grad_check(op, inputs, h, tol);
}

GradReport check_nonlocal(NonLocalNorm norm, uint64_t seed, double h, double tol) {
    Rng rng(seed);
    NonLocalParams proto = NonLocalParams::create(4);
    if (norm == NonLocalNorm::softmax) {
        fill_params(proto, rng);
    } else {
        // positive embeddings keep the Eq.-(1) row sums away from zero
        proto.for_each([&](const std::string& n, Tensor& t) {
            fill_rand(t, rng, 0.1, 0.5, n == "w_z");
        });
    }
    CheckableOp op;
    op.name = norm == NonLocalNorm::softmax ? "nonlocal_forward" : "nonlocal_sum";
    op.input_names = {"x"};
    std::vector<Tensor> inputs = {rand_tensor({1, 4, 3, 3}, rng, 0.1, 1.0,
                                              norm == NonLocalNorm::softmax)};
    append_params(proto, "", inputs, op.input_names);
    if (norm == NonLocalNorm::sum) {
        inputs = draw_clear_of_kinks(
            [&] {
                std::vector<Tensor> in = {rand_tensor({1, 4, 3, 3}, rng, 0.1, 1.0, false)};
                NonLocalParams pr = proto;
                pr.for_each([&](const std::string& n, Tensor& t) {
                    fill_rand(t, rng, 0.1, 0.5, n == "w_z");
                    in.push_back(t);
                });
                return in;
            },
            [&](const std::vector<Tensor>& in) {
                NonLocalParams pr = proto;
                size_t pos = 1;
                load_params(pr, in, pos);
                NonLocalCtx ctx;
                nonlocal_forward(in[0], pr, NonLocalNorm::sum, &ctx);
                return lrelu_margin(ctx.row_sum);  // |row sum| away from zero
            });
    }
    op.forward = [proto, norm](const std::vector<Tensor>& in) {
        NonLocalParams p = proto;
        size_t pos = 1;
        load_params(p, in, pos);
        return nonlocal_forward(in[0], p, norm);
    };
    op.grad_sum = [proto, norm](const std::vector<Tensor>& in) {
        NonLocalParams p = proto;
        size_t pos = 1;
        load_params(p, in, pos);
        NonLocalCtx ctx;
        Tensor y = nonlocal_forward(in[0], p, norm, &ctx);
        NonLocalParams dp = NonLocalParams::create(4);
        Tensor dx = nonlocal_backward(Tensor::full(y.dims(), 1.0), ctx, p, dp);
        std::vector<Tensor> grads = {dx};
        collect_params(dp, grads);
        return grads;
    };
    return grad_check(op, inputs, h, tol);
}

GradReport check_deform_conv(uint64_t seed, double h, double tol) {
    Rng rng(seed);
    DeformConvParams proto = DeformConvParams::create(2, 3, true);
    fill_rand(proto.weight, rng, 0.05, 0.4);
    fill_rand(proto.bias, rng, 0.05, 0.2);
    CheckableOp op;
    op.name = "deform_conv2d";
    op.input_names = {"x", "offsets", "mask", "weight", "bias"};
    op.forward = [proto](const std::vector<Tensor>& in) {
        DeformConvParams p = proto;
        p.weight = in[3];
        p.bias = in[4];
        return deform_conv2d(in[0], in[1], &in[2], p);
    };
    op.grad_sum = [proto](const std::vector<Tensor>& in) {
        DeformConvParams p = proto;
        p.weight = in[3];
        p.bias = in[4];
        Tensor y = deform_conv2d(in[0], in[1], &in[2], p);
        Tensor dy = Tensor::full(y.dims(), 1.0);
        Tensor dx = zeros_like(in[0]), doff = zeros_like(in[1]), dmask = zeros_like(in[2]);
        DeformConvParams dp = DeformConvParams::create(2, 3, true);
        deform_conv2d_backward(dy, in[0], in[1], &in[2], p, dx, doff, &dmask, dp);
        return std::vector<Tensor>{dx, doff, dmask, dp.weight, dp.bias};
    };
    // offsets away from the integer lattice at the finite-difference scale
    std::vector<Tensor> inputs = {rand_tensor({1, 2, 4, 4}, rng, 0.1, 1.0),
                                  rand_tensor({1, 18, 4, 4}, rng, 0.2, 0.45),
                                  rand_tensor({1, 9, 4, 4}, rng, 0.1, 1.0)};
    inputs.push_back(proto.weight);
    inputs.push_back(proto.bias);
    return grad_check(op, inputs, h, tol);
}

GradReport check_interp(uint64_t seed, double h, double tol) {
    Rng rng(seed);
    InterpParams proto = InterpParams::create(2, false);
    CheckableOp op;
    op.name = "feature_interpolate";
    op.input_names = {"f1", "f3"};
    {
        std::vector<Tensor> dummy = {Tensor({1}), Tensor({1})};
        append_params(proto, "", dummy, op.input_names);
    }
    std::vector<Tensor> inputs = draw_clear_of_kinks(
        [&] {
            fill_params(proto, rng);
            tame_offset_net(proto.off1, rng);
            tame_offset_net(proto.off3, rng);
            std::vector<Tensor> in = {rand_tensor({1, 2, 4, 4}, rng, 0.1, 1.0),
                                      rand_tensor({1, 2, 4, 4}, rng, 0.1, 1.0)};
            proto.for_each([&](const std::string&, Tensor& t) { in.push_back(t); });
            return in;
        },
        [&](const std::vector<Tensor>& in) {
            InterpParams pr = proto;
            size_t pos = 2;
            load_params(pr, in, pos);
            InterpCtx ctx;
            feature_interpolate(in[0], in[1], pr, &ctx);
            return std::min(offsetnet_margin(ctx.off1, ctx.raw1),
                            offsetnet_margin(ctx.off3, ctx.raw3));
        });
    op.forward = [proto](const std::vector<Tensor>& in) {
        InterpParams p = proto;
        size_t pos = 2;
        load_params(p, in, pos);
        return feature_interpolate(in[0], in[1], p);
    };
    op.grad_sum = [proto](const std::vector<Tensor>& in) {
        InterpParams p = proto;
        size_t pos = 2;
        load_params(p, in, pos);
        InterpCtx ctx;
        Tensor y = feature_interpolate(in[0], in[1], p, &ctx);
        InterpParams dp = InterpParams::create(2, false);
        Tensor df1 = zeros_like(in[0]), df3 = zeros_like(in[1]);
        feature_interpolate_backward(Tensor::full(y.dims(), 1.0), ctx, p, dp, df1, df3);
        std::vector<Tensor> grads = {df1, df3};
        collect_params(dp, grads);
        return grads;
    };
    return grad_check(op, inputs, h, tol);
}

GradReport check_lstm_step(uint64_t seed, double h, double tol) {
    Rng rng(seed);
    ConvLstmParams proto = ConvLstmParams::create(2, false);
    CheckableOp op;
    op.name = "dconvlstm_step";
    op.input_names = {"h_prev", "c_prev", "f_t"};
    {
        std::vector<Tensor> dummy = {Tensor({1}), Tensor({1}), Tensor({1})};
        append_params(proto, "", dummy, op.input_names);
    }
    std::vector<Tensor> inputs = draw_clear_of_kinks(
        [&] {
            fill_params(proto, rng);
            tame_offset_net(proto.g_h, rng);
            tame_offset_net(proto.g_c, rng);
            std::vector<Tensor> in = {rand_tensor({1, 2, 4, 4}, rng, 0.1, 0.5),
                                      rand_tensor({1, 2, 4, 4}, rng, 0.1, 0.5),
                                      rand_tensor({1, 2, 4, 4}, rng, 0.1, 0.5)};
            proto.for_each([&](const std::string&, Tensor& t) { in.push_back(t); });
            return in;
        },
        [&](const std::vector<Tensor>& in) {
            ConvLstmParams pr = proto;
            size_t pos = 3;
            load_params(pr, in, pos);
            ConvLstmStepCtx ctx;
            Tensor ht, ct;
            dconvlstm_step(in[0], in[1], in[2], pr, ht, ct, &ctx);
            return lstm_step_margin(ctx);
        });
    auto run = [proto](const std::vector<Tensor>& in, ConvLstmStepCtx* ctx, Tensor& ht,
                       Tensor& ct) {
        ConvLstmParams p = proto;
        size_t pos = 3;
        load_params(p, in, pos);
        dconvlstm_step(in[0], in[1], in[2], p, ht, ct, ctx);
        return p;
    };
    op.forward = [run](const std::vector<Tensor>& in) {
        Tensor ht, ct;
        run(in, nullptr, ht, ct);
        // check through both outputs: sum(h_t) + sum(c_t)
        Tensor both({2 * static_cast<int>(ht.size())});
        for (size_t i = 0; i < ht.size(); ++i) both[i] = ht[i];
        for (size_t i = 0; i < ct.size(); ++i) both[ht.size() + i] = ct[i];
        return both;
    };
    op.grad_sum = [run](const std::vector<Tensor>& in) {
        ConvLstmStepCtx ctx;
        Tensor ht, ct;
        ConvLstmParams p = run(in, &ctx, ht, ct);
        ConvLstmParams dp = ConvLstmParams::create(2, false);
        Tensor dh = zeros_like(in[0]), dc = zeros_like(in[1]), df = zeros_like(in[2]);
        dconvlstm_step_backward(Tensor::full(ht.dims(), 1.0), Tensor::full(ct.dims(), 1.0),
                                ctx, p, dp, dh, dc, df);
        std::vector<Tensor> grads = {dh, dc, df};
        collect_params(dp, grads);
        return grads;
    };
    return grad_check(op, inputs, h, tol);
}

GradReport check_bidirectional(uint64_t seed, double h, double tol) {
    Rng rng(seed);
    BidirParams proto = BidirParams::create(2, false);
    CheckableOp op;
    op.name = "bidirectional_pass";
    op.input_names = {"f0", "f1", "f2"};
    {
        std::vector<Tensor> dummy = {Tensor({1}), Tensor({1}), Tensor({1})};
        append_params(proto, "", dummy, op.input_names);
    }
    std::vector<Tensor> inputs = draw_clear_of_kinks(
        [&] {
            fill_params(proto, rng);
            for (ConvLstmParams* lstm : {&proto.fwd, &proto.bwd}) {
                tame_offset_net(lstm->g_h, rng);
                tame_offset_net(lstm->g_c, rng);
            }
            std::vector<Tensor> in = {rand_tensor({1, 2, 3, 3}, rng, 0.1, 0.5),
                                      rand_tensor({1, 2, 3, 3}, rng, 0.1, 0.5),
                                      rand_tensor({1, 2, 3, 3}, rng, 0.1, 0.5)};
            proto.for_each([&](const std::string&, Tensor& t) { in.push_back(t); });
            return in;
        },
        [&](const std::vector<Tensor>& in) {
            BidirParams pr = proto;
            size_t pos = 3;
            load_params(pr, in, pos);
            BidirCtx ctx;
            bidirectional_pass({in[0], in[1], in[2]}, pr, &ctx);
            double m = 1e300;
            for (const auto& st : ctx.fwd_steps) m = std::min(m, lstm_step_margin(st));
            for (const auto& st : ctx.bwd_steps) m = std::min(m, lstm_step_margin(st));
            return m;
        });
    op.forward = [proto](const std::vector<Tensor>& in) {
        BidirParams p = proto;
        size_t pos = 3;
        load_params(p, in, pos);
        std::vector<Tensor> out = bidirectional_pass({in[0], in[1], in[2]}, p);
        return concat_channels({&out[0], &out[1], &out[2]});
    };
    op.grad_sum = [proto](const std::vector<Tensor>& in) {
        BidirParams p = proto;
        size_t pos = 3;
        load_params(p, in, pos);
        BidirCtx ctx;
        std::vector<Tensor> out = bidirectional_pass({in[0], in[1], in[2]}, p, &ctx);
        std::vector<Tensor> dout;
        for (const Tensor& o : out) dout.push_back(Tensor::full(o.dims(), 1.0));
        BidirParams dp = BidirParams::create(2, false);
        std::vector<Tensor> dframes(3);
        for (int i = 0; i < 3; ++i) dframes[static_cast<size_t>(i)] = zeros_like(in[0]);
        bidirectional_backward(dout, ctx, p, dp, dframes);
        std::vector<Tensor> grads = {dframes[0], dframes[1], dframes[2]};
        collect_params(dp, grads);
        return grads;
    };
    return grad_check(op, inputs, h, tol);
}

GradReport check_resblock(uint64_t seed, double h, double tol) {
    Rng rng(seed);
    ResBlockParams proto = ResBlockParams::create(3);
    CheckableOp op;
    op.name = "resblock";
    op.input_names = {"x"};
    {
        std::vector<Tensor> dummy = {Tensor({1})};
        append_params(proto, "", dummy, op.input_names);
    }
    std::vector<Tensor> inputs = draw_clear_of_kinks(
        [&] {
            fill_params(proto, rng);
            std::vector<Tensor> in = {rand_tensor({1, 3, 4, 4}, rng, 0.1, 1.0)};
            proto.for_each([&](const std::string&, Tensor& t) { in.push_back(t); });
            return in;
        },
        [&](const std::vector<Tensor>& in) {
            ResBlockParams pr = proto;
            size_t pos = 1;
            load_params(pr, in, pos);
            ResBlockCtx ctx;
            resblock_forward(in[0], pr, &ctx);
            return lrelu_margin(ctx.pre);
        });
    op.forward = [proto](const std::vector<Tensor>& in) {
        ResBlockParams p = proto;
        size_t pos = 1;
        load_params(p, in, pos);
        return resblock_forward(in[0], p);
    };
    op.grad_sum = [proto](const std::vector<Tensor>& in) {
        ResBlockParams p = proto;
        size_t pos = 1;
        load_params(p, in, pos);
        ResBlockCtx ctx;
        Tensor y = resblock_forward(in[0], p, &ctx);
        ResBlockParams dp = ResBlockParams::create(3);
        Tensor dx = resblock_backward(Tensor::full(y.dims(), 1.0), ctx, p, dp);
        std::vector<Tensor> grads = {dx};
        collect_params(dp, grads);
        return grads;
    };
    return grad_check(op, inputs, h, tol);
}

GradReport check_pfrdb(uint64_t seed, double h, double tol) {
    Rng rng(seed);
    PfrdbParams proto = PfrdbParams::create(2, 3);
    CheckableOp op;
    op.name = "pfrdb";
    op.input_names = {"f0", "f1", "f2"};
    {
        std::vector<Tensor> dummy = {Tensor({1}), Tensor({1}), Tensor({1})};
        append_params(proto, "", dummy, op.input_names);
    }
    std::vector<Tensor> inputs = draw_clear_of_kinks(
        [&] {
            fill_params(proto, rng);
            std::vector<Tensor> in = {rand_tensor({1, 2, 3, 3}, rng, 0.1, 1.0),
                                      rand_tensor({1, 2, 3, 3}, rng, 0.1, 1.0),
                                      rand_tensor({1, 2, 3, 3}, rng, 0.1, 1.0)};
            proto.for_each([&](const std::string&, Tensor& t) { in.push_back(t); });
            return in;
        },
        [&](const std::vector<Tensor>& in) {
            PfrdbParams pr = proto;
            size_t pos = 3;
            load_params(pr, in, pos);
            PfrdbCtx ctx;
            pfrdb_forward({in[0], in[1], in[2]}, pr, &ctx);
            double m = 1e300;
            for (const Tensor& pre : ctx.pre_a) m = std::min(m, lrelu_margin(pre));
            return m;
        });
    op.forward = [proto](const std::vector<Tensor>& in) {
        PfrdbParams p = proto;
        size_t pos = 3;
        load_params(p, in, pos);
        std::vector<Tensor> out = pfrdb_forward({in[0], in[1], in[2]}, p);
        return concat_channels({&out[0], &out[1], &out[2]});
    };
    op.grad_sum = [proto](const std::vector<Tensor>& in) {
        PfrdbParams p = proto;
        size_t pos = 3;
        load_params(p, in, pos);
        PfrdbCtx ctx;
        std::vector<Tensor> out = pfrdb_forward({in[0], in[1], in[2]}, p, &ctx);
        std::vector<Tensor> dout;
        for (const Tensor& o : out) dout.push_back(Tensor::full(o.dims(), 1.0));
        PfrdbParams dp = PfrdbParams::create(2, 3);
        std::vector<Tensor> dframes(3);
        for (int i = 0; i < 3; ++i) dframes[static_cast<size_t>(i)] = zeros_like(in[0]);
        pfrdb_backward(dout, ctx, p, dp, dframes);
        std::vector<Tensor> grads = {dframes[0], dframes[1], dframes[2]};
        collect_params(dp, grads);
        return grads;
    };
    return grad_check(op, inputs, h, tol);
}

GradReport check_aggregate(uint64_t seed, double h, double tol) {
    Rng rng(seed);
    GcnParams proto = GcnParams::create(2, 1);
    CheckableOp op;
    op.name = "aggregate";
    op.input_names = {"x", "ng_w1", "ng_b1", "ng_w2", "ng_b2", "ng_w3", "ng_b3"};
    std::vector<Tensor> inputs = draw_clear_of_kinks(
        [&] {
            fill_params(proto, rng);
            return std::vector<Tensor>{rand_tensor({1, 2, 4, 4}, rng, 0.1, 1.0),
                                       proto.ng_w1, proto.ng_b1, proto.ng_w2,
                                       proto.ng_b2, proto.ng_w3, proto.ng_b3};
        },
        [&](const std::vector<Tensor>& in) {
            GcnParams pr = proto;
            pr.ng_w1 = in[1]; pr.ng_b1 = in[2];
            pr.ng_w2 = in[3]; pr.ng_b2 = in[4];
            pr.ng_w3 = in[5]; pr.ng_b3 = in[6];
            NgCtx ctx;
            ng_encode(in[0], pr, &ctx);
            return ng_margin(ctx);
        });
    auto load = [proto](const std::vector<Tensor>& in) {
        GcnParams p = proto;
        p.ng_w1 = in[1]; p.ng_b1 = in[2];
        p.ng_w2 = in[3]; p.ng_b2 = in[4];
        p.ng_w3 = in[5]; p.ng_b3 = in[6];
        return p;
    };
    op.forward = [load](const std::vector<Tensor>& in) { return ng_encode(in[0], load(in)); };
    op.grad_sum = [load](const std::vector<Tensor>& in) {
        GcnParams p = load(in);
        NgCtx ctx;
        Tensor y = ng_encode(in[0], p, &ctx);
        GcnParams dp = GcnParams::create(2, 1);
        Tensor dx = zeros_like(in[0]);
        ng_encode_backward(Tensor::full(y.dims(), 1.0), ctx, p, dp, dx);
        return std::vector<Tensor>{dx,      dp.ng_w1, dp.ng_b1, dp.ng_w2,
                                   dp.ng_b2, dp.ng_w3, dp.ng_b3};
    };
    return grad_check(op, inputs, h, tol);
}

GradReport check_edge_weights(uint64_t seed, double h, double tol) {
    Rng rng(seed);
    EdgeNetParams proto = EdgeNetParams::create(2);
    // adjacency rows always sum to 1, so project with fixed coefficients
    Tensor proj = rand_tensor({3, 3}, rng, 0.2, 1.0);
    CheckableOp op;
    op.name = "edge_weights";
    op.input_names = {"n0", "n1", "n2"};
    {
        std::vector<Tensor> dummy = {Tensor({1}), Tensor({1}), Tensor({1})};
        append_params(proto, "", dummy, op.input_names);
    }
    std::vector<Tensor> inputs = draw_clear_of_kinks(
        [&] {
            fill_params(proto, rng);
            std::vector<Tensor> in = {rand_tensor({1, 2, 3, 3}, rng, 0.1, 1.0),
                                      rand_tensor({1, 2, 3, 3}, rng, 0.1, 1.0),
                                      rand_tensor({1, 2, 3, 3}, rng, 0.1, 1.0)};
            proto.for_each([&](const std::string&, Tensor& t) { in.push_back(t); });
            return in;
        },
        [&](const std::vector<Tensor>& in) {
            EdgeNetParams pr = proto;
            size_t pos = 3;
            load_params(pr, in, pos);
            EdgeCtx ctx;
            edge_weights({in[0], in[1], in[2]}, pr, &ctx);
            double m = edge_margin(ctx);
            // b1 decouples from the row softmax when a channel's
            // pre-activations share one sign across every pair; insist on
            // sign diversity so its gradient stays measurable
            const int half = pr.w1.dim(0);
            for (int c = 0; c < half; ++c) {
                bool pos_seen = false, neg_seen = false;
                for (const Tensor& pre : ctx.pre1)
                    for (int y = 0; y < pre.dim(2); ++y)
                        for (int x = 0; x < pre.dim(3); ++x) {
                            const double v = pre.at(0, c, y, x);
                            pos_seen = pos_seen || v > 0.0;
                            neg_seen = neg_seen || v < 0.0;
                        }
                if (!pos_seen || !neg_seen) m = 0.0;
            }
            return m;
        });
    op.forward = [proto, proj](const std::vector<Tensor>& in) {
        EdgeNetParams p = proto;
        size_t pos = 3;
        load_params(p, in, pos);
        return mul(edge_weights({in[0], in[1], in[2]}, p), proj);
    };
    op.grad_sum = [proto, proj](const std::vector<Tensor>& in) {
        EdgeNetParams p = proto;
        size_t pos = 3;
        load_params(p, in, pos);
        EdgeCtx ctx;
        std::vector<Tensor> nodes = {in[0], in[1], in[2]};
        edge_weights(nodes, p, &ctx);
        EdgeNetParams dp = EdgeNetParams::create(2);
        std::vector<Tensor> dnodes(3);
        for (int i = 0; i < 3; ++i) dnodes[static_cast<size_t>(i)] = zeros_like(in[0]);
        edge_weights_backward(proj, nodes, ctx, p, dp, dnodes);
        std::vector<Tensor> grads = {dnodes[0], dnodes[1], dnodes[2]};
        collect_params(dp, grads);
        return grads;
    };
    return grad_check(op, inputs, h, tol);
}

GradReport check_gcn_layer(uint64_t seed, double h, double tol) {
    Rng rng(seed);
    // fixed row-stochastic adjacency (perturbing it would break the
    // stochasticity contract the layer validates)
    Tensor adj({3, 3});
    for (int pi = 0; pi < 3; ++pi) {
        double row[3], tot = 0.0;
        for (int q = 0; q < 3; ++q) row[q] = q == pi ? 0.0 : rng.uniform(0.2, 1.0);
        for (int q = 0; q < 3; ++q) tot += row[q];
        for (int q = 0; q < 3; ++q) adj.at(pi, q) = row[q] / tot;
    }
    CheckableOp op;
    op.name = "gcn_layer";
    op.input_names = {"n0", "n1", "n2", "theta"};
    std::vector<Tensor> inputs = draw_clear_of_kinks(
        [&] {
            return std::vector<Tensor>{rand_tensor({1, 2, 3, 3}, rng, 0.1, 1.0),
                                       rand_tensor({1, 2, 3, 3}, rng, 0.1, 1.0),
                                       rand_tensor({1, 2, 3, 3}, rng, 0.1, 1.0),
                                       rand_tensor({2, 2, 3, 3}, rng, 0.05, 0.45)};
        },
        [&](const std::vector<Tensor>& in) {
            GcnLayerCtx ctx;
            gcn_layer({in[0], in[1], in[2]}, adj, in[3], GcnMessage::neighbor, &ctx);
            double m = 1e300;
            for (const Tensor& pre : ctx.pre) m = std::min(m, lrelu_margin(pre));
            return m;
        });
    op.forward = [adj](const std::vector<Tensor>& in) {
        std::vector<Tensor> out = gcn_layer({in[0], in[1], in[2]}, adj, in[3],
                                            GcnMessage::neighbor);
        return concat_channels({&out[0], &out[1], &out[2]});
    };
    op.grad_sum = [adj](const std::vector<Tensor>& in) {
        GcnLayerCtx ctx;
        std::vector<Tensor> out = gcn_layer({in[0], in[1], in[2]}, adj, in[3],
                                            GcnMessage::neighbor, &ctx);
        std::vector<Tensor> dout;
        for (const Tensor& o : out) dout.push_back(Tensor::full(o.dims(), 1.0));
        Tensor dtheta = zeros_like(in[3]);
        Tensor dadj({3, 3});
        std::vector<Tensor> dnodes(3);
        for (int i = 0; i < 3; ++i) dnodes[static_cast<size_t>(i)] = zeros_like(in[0]);
        gcn_layer_backward(dout, ctx, in[3], GcnMessage::neighbor, dtheta, dadj, dnodes);
        return std::vector<Tensor>{dnodes[0], dnodes[1], dnodes[2], dtheta};
    };
    return grad_check(op, inputs, h, tol);
}

GradReport check_lmga(uint64_t seed, double h, double tol) {
    Rng rng(seed);
    GcnParams gproto = GcnParams::create(2, 2);
    EdgeNetParams eproto = EdgeNetParams::create(2);
    CheckableOp op;
    op.name = "lmga_forward";
    op.input_names = {"f0", "f1", "f2"};
    {
        std::vector<Tensor> dummy = {Tensor({1}), Tensor({1}), Tensor({1})};
        append_params(gproto, "gcn.", dummy, op.input_names);
        append_params(eproto, "edge.", dummy, op.input_names);
    }
    const uint64_t pool_seed = seed ^ 0x5bd1e995u;
    std::vector<Tensor> inputs = draw_clear_of_kinks(
        [&] {
            fill_params(gproto, rng);
            fill_params(eproto, rng);
            std::vector<Tensor> in = {rand_tensor({1, 2, 3, 3}, rng, 0.1, 1.0),
                                      rand_tensor({1, 2, 3, 3}, rng, 0.1, 1.0),
                                      rand_tensor({1, 2, 3, 3}, rng, 0.1, 1.0)};
            gproto.for_each([&](const std::string&, Tensor& t) { in.push_back(t); });
            eproto.for_each([&](const std::string&, Tensor& t) { in.push_back(t); });
            return in;
        },
        [&](const std::vector<Tensor>& in) {
            GcnParams g = gproto;
            EdgeNetParams e = eproto;
            size_t pos = 3;
            load_params(g, in, pos);
            load_params(e, in, pos);
            LmgaCtx ctx;
            lmga_forward({in[0], in[1], in[2]}, g, e, 1, pool_seed, GcnMessage::neighbor, &ctx);
            double m = 1e300;
            for (const auto& fc : ctx.frames) {
                for (const auto& ng : fc.ng) m = std::min(m, ng_margin(ng));
                for (const auto& ec : fc.edges) m = std::min(m, edge_margin(ec));
                for (const auto& lc : fc.layers)
                    for (const Tensor& pre : lc.pre) m = std::min(m, lrelu_margin(pre));
                m = std::min(m, lrelu_margin(fc.ref_pre1));
            }
            return m;
        });
    op.forward = [gproto, eproto, pool_seed](const std::vector<Tensor>& in) {
        GcnParams g = gproto;
        EdgeNetParams e = eproto;
        size_t pos = 3;
        load_params(g, in, pos);
        load_params(e, in, pos);
        std::vector<Tensor> out = lmga_forward({in[0], in[1], in[2]}, g, e, 1, pool_seed);
        return concat_channels({&out[0], &out[1], &out[2]});
    };
    op.grad_sum = [gproto, eproto, pool_seed](const std::vector<Tensor>& in) {
        GcnParams g = gproto;
        EdgeNetParams e = eproto;
        size_t pos = 3;
        load_params(g, in, pos);
        load_params(e, in, pos);
        LmgaCtx ctx;
        std::vector<Tensor> out = lmga_forward({in[0], in[1], in[2]}, g, e, 1, pool_seed,
                                               GcnMessage::neighbor, &ctx);
        std::vector<Tensor> dout;
        for (const Tensor& o : out) dout.push_back(Tensor::full(o.dims(), 1.0));
        GcnParams dg = GcnParams::create(2, 2);
        EdgeNetParams de = EdgeNetParams::create(2);
        std::vector<Tensor> dfeat(3);
        for (int i = 0; i < 3; ++i) dfeat[static_cast<size_t>(i)] = zeros_like(in[0]);
        lmga_backward(dout, ctx, g, e, GcnMessage::neighbor, dg, de, dfeat);
        std::vector<Tensor> grads = {dfeat[0], dfeat[1], dfeat[2]};
        collect_params(dg, grads);
        collect_params(de, grads);
        return grads;
    };
    return grad_check(op, inputs, h, tol);
}

GradReport check_reconstruct(uint64_t seed, double h, double tol) {
    Rng rng(seed);
    MeganConfig cfg;
    cfg.channels = 2;
    cfg.m1 = 0;
    cfg.m2 = 1;
    cfg.m3 = 1;
    cfg.tau = 0;
    cfg.k_layers = 1;
    cfg.n_pairs = 1;
    cfg.nonlocal_enabled = false;
    cfg.lmga_enabled = false;
    MeganParams proto = MeganParams::create(cfg);

    CheckableOp op;
    op.name = "reconstruct";
    op.input_names = {"f0", "f1", "f2"};
    proto.for_each([&](const std::string& n, Tensor&) {
        if (n.rfind("recon.", 0) == 0) op.input_names.push_back(n);
    });
    std::vector<Tensor> inputs = draw_clear_of_kinks(
        [&] {
            proto.for_each([&](const std::string&, Tensor& t) { fill_rand(t, rng, 0.05, 0.45); });
            std::vector<Tensor> in = {rand_tensor({1, 2, 4, 4}, rng, 0.1, 1.0),
                                      rand_tensor({1, 2, 4, 4}, rng, 0.1, 1.0),
                                      rand_tensor({1, 2, 4, 4}, rng, 0.1, 1.0)};
            proto.for_each([&](const std::string& n, Tensor& t) {
                if (n.rfind("recon.", 0) == 0) in.push_back(t);
            });
            return in;
        },
        [&](const std::vector<Tensor>& in) {
            MeganParams pr = proto;
            size_t pos = 3;
            pr.for_each([&](const std::string& n, Tensor& t) {
                if (n.rfind("recon.", 0) == 0) t = in[pos++];
            });
            ReconCtx ctx;
            reconstruct({in[0], in[1], in[2]}, pr, cfg, &ctx);
            double m = 1e300;
            for (const auto& pc : ctx.pfrdb)
                for (const Tensor& pre : pc.pre_a) m = std::min(m, lrelu_margin(pre));
            for (const auto& fc : ctx.frames)
                for (const auto& rc : fc.res) m = std::min(m, lrelu_margin(rc.pre));
            return m;
        });
    auto load = [proto](const std::vector<Tensor>& in) {
        MeganParams p = proto;
        size_t pos = 3;
        p.for_each([&](const std::string& n, Tensor& t) {
            if (n.rfind("recon.", 0) == 0) t = in[pos++];
        });
        return p;
    };
    op.forward = [load, cfg](const std::vector<Tensor>& in) {
        MeganParams p = load(in);
        std::vector<Tensor> out = reconstruct({in[0], in[1], in[2]}, p, cfg);
        return concat_channels({&out[0], &out[1], &out[2]});
    };
    op.grad_sum = [load, cfg](const std::vector<Tensor>& in) {
        MeganParams p = load(in);
        ReconCtx ctx;
        std::vector<Tensor> out = reconstruct({in[0], in[1], in[2]}, p, cfg, &ctx);
        std::vector<Tensor> dout;
        for (const Tensor& o : out) dout.push_back(Tensor::full(o.dims(), 1.0));
        MeganParams dp = MeganParams::create(cfg);
        std::vector<Tensor> dfeats(3);
        for (int i = 0; i < 3; ++i) dfeats[static_cast<size_t>(i)] = zeros_like(in[0]);
        reconstruct_backward(dout, ctx, p, cfg, dp, dfeats);
        std::vector<Tensor> grads = {dfeats[0], dfeats[1], dfeats[2]};
        dp.for_each([&](const std::string& n, Tensor& t) {
            if (n.rfind("recon.", 0) == 0) grads.push_back(t);
        });
        return grads;
    };
    return grad_check(op, inputs, h, tol);
}

GradReport check_charbonnier(LossReduction red, uint64_t seed, double h, double tol) {
    Rng rng(seed);
    CheckableOp op;
    op.name = red == LossReduction::global ? "charbonnier_loss" : "charbonnier_elementwise";
    op.input_names = {"pred", "gt"};
    op.forward = [red](const std::vector<Tensor>& in) {
        return Tensor::scalar(charbonnier_loss({in[0]}, {in[1]}, 1e-3, red));
    };
    op.grad_sum = [red](const std::vector<Tensor>& in) {
        std::vector<Tensor> dpred;
        charbonnier_loss_grad({in[0]}, {in[1]}, 1e-3, red, dpred);
        Tensor dgt = scale(dpred[0], -1.0);
        return std::vector<Tensor>{dpred[0], dgt};
    };
    std::vector<Tensor> inputs = {rand_tensor({1, 3, 4, 4}, rng, 0.0, 1.0, false),
                                  rand_tensor({1, 3, 4, 4}, rng, 0.0, 1.0, false)};
    return grad_check(op, inputs, h, tol);
}

}  // namespace

const std::vector<RegisteredCheck>& registered_checks() {
    static const std::vector<RegisteredCheck> checks = {
        {"conv2d", check_conv2d},
        {"leaky_relu", [](uint64_t s, double h, double t) { return check_elementwise("leaky_relu", s, h, t); }},
        {"sigmoid", [](uint64_t s, double h, double t) { return check_elementwise("sigmoid", s, h, t); }},
        {"tanh", [](uint64_t s, double h, double t) { return check_elementwise("tanh", s, h, t); }},
        {"softmax", check_softmax},
        {"bilinear_sample", check_bilinear},
        {"pixel_shuffle", check_pixel_shuffle},
        {"nonlocal_forward", [](uint64_t s, double h, double t) { return check_nonlocal(NonLocalNorm::softmax, s, h, t); }},
        {"nonlocal_sum", [](uint64_t s, double h, double t) { return check_nonlocal(NonLocalNorm::sum, s, h, t); }},
        {"deform_conv2d", check_deform_conv},
        {"feature_interpolate", check_interp},
        {"dconvlstm_step", check_lstm_step},
        {"bidirectional_pass", check_bidirectional},
        {"resblock", check_resblock},
        {"pfrdb", check_pfrdb},
        {"aggregate", check_aggregate},
        {"edge_weights", check_edge_weights},
        {"gcn_layer", check_gcn_layer},
        {"lmga_forward", check_lmga},
        {"reconstruct", check_reconstruct},
        {"charbonnier_loss", [](uint64_t s, double h, double t) { return check_charbonnier(LossReduction::global, s, h, t); }},
        {"charbonnier_elementwise", [](uint64_t s, double h, double t) { return check_charbonnier(LossReduction::elementwise, s, h, t); }},
    };
    return checks;
}

}  // namespace megan
