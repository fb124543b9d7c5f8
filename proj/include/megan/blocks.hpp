#ifndef MEGAN_BLOCKS_HPP
#define MEGAN_BLOCKS_HPP

#include <optional>
#include <vector>

#include "megan/ops.hpp"
#include "megan/tensor.hpp"

namespace megan {

// LeakyReLU negative slope used throughout the network.
inline constexpr double kLreluSlope = 0.1;

// Backward functions accumulate (+=) into the gradient structures they are
// handed; callers zero-initialize them once per backward sweep. That keeps
// weight sharing (offset nets, N_g, recurrent gates) a non-event.

// ---- residual non-local attention ----------------------------------------

enum class NonLocalNorm {
    softmax,  // attention rows from softmax over dot-product scores
    sum,      // raw scores normalized by their row sum
};

struct NonLocalParams {
    // 1x1 embeddings: w_u, w_v, w_g map C -> C/2, w_z maps C/2 -> C.
    Tensor w_u, w_v, w_g, w_z;

    static NonLocalParams create(int channels);
    void init(Rng& rng);
    template <class F>
    void for_each(F&& f) {
        f("w_u", w_u);
        f("w_v", w_v);
        f("w_g", w_g);
        f("w_z", w_z);
    }
};

struct NonLocalCtx {
    Tensor x;           // input N,C,H,W
    Tensor u, v, g;     // N,C2,P embeddings
    Tensor att;         // N,P,P attention (row i sums to 1 in softmax mode)
    Tensor y;           // N,C2,P aggregated features
    Tensor row_sum;     // N,P denominators, sum mode only
    Tensor scores;      // N,P,P raw scores, sum mode only
    NonLocalNorm norm = NonLocalNorm::softmax;
};

Tensor nonlocal_forward(const Tensor& x, const NonLocalParams& p,
                        NonLocalNorm norm = NonLocalNorm::softmax,
                        NonLocalCtx* ctx = nullptr);
Tensor nonlocal_backward(const Tensor& dz, const NonLocalCtx& ctx,
                         const NonLocalParams& p, NonLocalParams& dp);

// ---- deformable 3x3 convolution -------------------------------------------

struct DeformConvParams {
    Tensor weight;  // [Cout,Cin,3,3]
    Tensor bias;    // [Cout]
    bool modulated = false;

    static DeformConvParams create(int cin, int cout, bool modulated = false);
    void init(Rng& rng);
    static DeformConvParams identity(int channels);  // center-tap identity kernel
    template <class F>
    void for_each(F&& f) {
        f("weight", weight);
        f("bias", bias);
    }
};

// Offset channel layout: for kernel tap k in 0..8 (row-major over the 3x3
// grid) channels 2k and 2k+1 hold (dy, dx). Mask logits (when modulated)
// pass through a sigmoid.
Tensor deform_conv2d(const Tensor& x, const Tensor& offsets, const Tensor* mask,
                     const DeformConvParams& p);
void deform_conv2d_backward(const Tensor& dy, const Tensor& x, const Tensor& offsets,
                            const Tensor* mask, const DeformConvParams& p,
                            Tensor& dx, Tensor& doffsets, Tensor* dmask,
                            DeformConvParams& dp);

// ---- offset prediction net -------------------------------------------------
// Two 3x3 convs with LeakyReLU between; input is the channel concat of two
// feature maps. Output is 18 offset channels, plus 9 mask logits when the
// deformable sampling is modulated. The final conv starts at zero so training
// begins in the plain-convolution regime.

struct OffsetNetParams {
    Tensor w1, b1;  // 2C -> C
    Tensor w2, b2;  // C -> 18 (or 27 with modulation)

    static OffsetNetParams create(int channels, bool modulated);
    void init(Rng& rng);  // final conv stays zero
    template <class F>
    void for_each(F&& f) {
        f("w1", w1);
        f("b1", b1);
        f("w2", w2);
        f("b2", b2);
    }
};

struct OffsetNetCtx {
    Tensor in;   // concat input
    Tensor pre;  // first conv output, pre-activation
};

Tensor offsetnet_forward(const Tensor& a, const Tensor& b,
                         const OffsetNetParams& p, OffsetNetCtx* ctx = nullptr);
// returns (da, db) contributions via out parameters
void offsetnet_backward(const Tensor& dout, const OffsetNetCtx& ctx,
                        const OffsetNetParams& p, OffsetNetParams& dp,
                        Tensor& da, Tensor& db);

// ---- frame feature temporal interpolation ----------------------------------

struct BlendParams {
    Tensor c1, c3;  // 1x1 convs C -> C, no bias

    static BlendParams create(int channels);
    void init(Rng& rng);
    template <class F>
    void for_each(F&& f) {
        f("c1", c1);
        f("c3", c3);
    }
};

struct InterpParams {
    OffsetNetParams off1, off3;
    DeformConvParams dc1, dc3;
    BlendParams blend;

    static InterpParams create(int channels, bool modulated);
    void init(Rng& rng);
    template <class F>
    void for_each(F&& f) {
        off1.for_each([&](const std::string& n, Tensor& t) { f("off1." + n, t); });
        off3.for_each([&](const std::string& n, Tensor& t) { f("off3." + n, t); });
        dc1.for_each([&](const std::string& n, Tensor& t) { f("dc1." + n, t); });
        dc3.for_each([&](const std::string& n, Tensor& t) { f("dc3." + n, t); });
        blend.for_each([&](const std::string& n, Tensor& t) { f("blend." + n, t); });
    }
};

struct InterpCtx {
    OffsetNetCtx off1, off3;
    Tensor f1, f3;            // inputs
    Tensor raw1, raw3;        // offset-net outputs (offsets [+ mask logits])
    Tensor s1, s3;            // deformable samples F1', F3'
};

Tensor feature_interpolate(const Tensor& f1, const Tensor& f3,
                           const InterpParams& p, InterpCtx* ctx = nullptr);
void feature_interpolate_backward(const Tensor& dout, const InterpCtx& ctx,
                                  const InterpParams& p, InterpParams& dp,
                                  Tensor& df1, Tensor& df3);

// ---- deformable ConvLSTM ----------------------------------------------------

struct ConvLstmParams {
    Tensor w_xi, w_hi, b_i;
    Tensor w_xf, w_hf, b_f;
    Tensor w_xo, w_ho, b_o;
    Tensor w_xg, w_hg, b_g;
    OffsetNetParams g_h, g_c;       // state alignment offset nets
    DeformConvParams align_h, align_c;

    static ConvLstmParams create(int channels, bool modulated);
    void init(Rng& rng);
    template <class F>
    void for_each(F&& f) {
        f("w_xi", w_xi); f("w_hi", w_hi); f("b_i", b_i);
        f("w_xf", w_xf); f("w_hf", w_hf); f("b_f", b_f);
        f("w_xo", w_xo); f("w_ho", w_ho); f("b_o", b_o);
        f("w_xg", w_xg); f("w_hg", w_hg); f("b_g", b_g);
        g_h.for_each([&](const std::string& n, Tensor& t) { f("g_h." + n, t); });
        g_c.for_each([&](const std::string& n, Tensor& t) { f("g_c." + n, t); });
        align_h.for_each([&](const std::string& n, Tensor& t) { f("align_h." + n, t); });
        align_c.for_each([&](const std::string& n, Tensor& t) { f("align_c." + n, t); });
    }
};

struct ConvLstmStepCtx {
    Tensor h_prev, c_prev, f_t;
    OffsetNetCtx off_h, off_c;
    Tensor raw_h, raw_c;        // offset-net outputs
    Tensor h_al, c_al;          // aligned h'_{t-1}, c'_{t-1}
    Tensor gi, gf, go, gg;      // gate activations (post sigmoid/tanh)
    Tensor c_t, tanh_c;
};

void dconvlstm_step(const Tensor& h_prev, const Tensor& c_prev, const Tensor& f_t,
                    const ConvLstmParams& p, Tensor& h_t, Tensor& c_t,
                    ConvLstmStepCtx* ctx = nullptr);
void dconvlstm_step_backward(const Tensor& dh_t, const Tensor& dc_t,
                             const ConvLstmStepCtx& ctx, const ConvLstmParams& p,
                             ConvLstmParams& dp, Tensor& dh_prev, Tensor& dc_prev,
                             Tensor& df_t);

// ---- bidirectional pass -----------------------------------------------------

struct BidirParams {
    ConvLstmParams fwd, bwd;
    Tensor fuse_w, fuse_b;  // 1x1 conv 2C -> C on concat(h_fwd, h_bwd)

    static BidirParams create(int channels, bool modulated);
    void init(Rng& rng);
    template <class F>
    void for_each(F&& f) {
        fwd.for_each([&](const std::string& n, Tensor& t) { f("fwd." + n, t); });
        bwd.for_each([&](const std::string& n, Tensor& t) { f("bwd." + n, t); });
        f("fuse_w", fuse_w);
        f("fuse_b", fuse_b);
    }
};

struct BidirCtx {
    std::vector<ConvLstmStepCtx> fwd_steps, bwd_steps;  // indexed by frame
    std::vector<Tensor> h_fwd, h_bwd;
};

std::vector<Tensor> bidirectional_pass(const std::vector<Tensor>& frames,
                                       const BidirParams& p, BidirCtx* ctx = nullptr);
void bidirectional_backward(const std::vector<Tensor>& dout, const BidirCtx& ctx,
                            const BidirParams& p, BidirParams& dp,
                            std::vector<Tensor>& dframes);

// ---- residual block ----------------------------------------------------------

struct ResBlockParams {
    Tensor w1, b1, w2, b2;  // 3x3 convs, LeakyReLU between

    static ResBlockParams create(int channels);
    void init(Rng& rng);
    template <class F>
    void for_each(F&& f) {
        f("w1", w1); f("b1", b1); f("w2", w2); f("b2", b2);
    }
};

struct ResBlockCtx {
    Tensor x, pre;  // pre = first conv output before activation
};

Tensor resblock_forward(const Tensor& x, const ResBlockParams& p, ResBlockCtx* ctx = nullptr);
Tensor resblock_backward(const Tensor& dy, const ResBlockCtx& ctx,
                         const ResBlockParams& p, ResBlockParams& dp);

// ---- progressive fusion residual dense block ----------------------------------
// Per frame stream: two densely connected 3x3 convs. Fusion: concat of all
// stream features -> 1x1 distillation conv back to C -> broadcast concat with
// each stream -> 3x3 conv -> residual add to the stream input.

struct PfrdbParams {
    Tensor wa, ba;          // C -> C
    Tensor wb, bb;          // 2C -> C (sees [x, lrelu(a)])
    Tensor w_dist, b_dist;  // T*C -> C, 1x1
    Tensor wc, bc;          // 2C -> C (sees [stream, fused])

    static PfrdbParams create(int channels, int frames);
    void init(Rng& rng);
    template <class F>
    void for_each(F&& f) {
        f("wa", wa); f("ba", ba);
        f("wb", wb); f("bb", bb);
        f("w_dist", w_dist); f("b_dist", b_dist);
        f("wc", wc); f("bc", bc);
    }
};

struct PfrdbCtx {
    std::vector<Tensor> x;       // inputs per stream
    std::vector<Tensor> pre_a;   // conv_a outputs pre-activation
    std::vector<Tensor> cat_ab;  // [x, lrelu(pre_a)]
    std::vector<Tensor> s;       // stream features (conv_b output)
    Tensor cat_all;              // concat of all s
    Tensor fused;                // distillation output
    std::vector<Tensor> cat_sf;  // [s, fused] per stream
};

std::vector<Tensor> pfrdb_forward(const std::vector<Tensor>& frames,
                                  const PfrdbParams& p, PfrdbCtx* ctx = nullptr);
void pfrdb_backward(const std::vector<Tensor>& dy, const PfrdbCtx& ctx,
                    const PfrdbParams& p, PfrdbParams& dp,
                    std::vector<Tensor>& dframes);

}  // namespace megan

#endif
