#ifndef MEGAN_LMGA_HPP
#define MEGAN_LMGA_HPP

#include <vector>

#include "megan/blocks.hpp"
#include "megan/ops.hpp"
#include "megan/tensor.hpp"

namespace megan {

// Long-range memory graph aggregation. Per key frame the module builds a
// small fully connected graph over the key's local feature plus tau randomly
// sampled global features, learns scalar edge weights from feature
// differences, runs K graph-convolution layers, and feeds the refined key
// embedding back through a residual connection.

/// Which node the layer convolves inside the neighbor sum. The printed
/// equation convolves the target node itself; conventional message passing
/// convolves the neighbor. The neighbor form is the default.
enum class GcnMessage { neighbor, self };

struct MemoryPool {
    std::vector<Tensor> local;      // one entry per frame, length 2n+1
    std::vector<Tensor> global;     // tau sampled entries
    std::vector<int> global_indices;  // 0-based frame indices, distinct
    uint64_t seed = 0;
};

/// Scalar edge logits phi(|E_p - E_q|): 3x3 conv C->C/2, LeakyReLU,
/// 3x3 conv C/2->1, spatial mean. The second conv carries no bias: a bias
/// would shift every pair logit equally and vanish in the row softmax.
struct EdgeNetParams {
    Tensor w1, b1;
    Tensor w2;

    static EdgeNetParams create(int channels);
    void init(Rng& rng);
    template <class F>
    void for_each(F&& f) {
        f("w1", w1); f("b1", b1); f("w2", w2);
    }
};

struct GcnParams {
    std::vector<Tensor> theta;  // per layer [C,C,3,3], no bias
    // shared per-node aggregation encoder N_g: three 3x3 convs
    Tensor ng_w1, ng_b1, ng_w2, ng_b2, ng_w3, ng_b3;
    // two-conv refinement applied to the key node's final embedding
    Tensor ref_w1, ref_b1, ref_w2, ref_b2;

    static GcnParams create(int channels, int k_layers);
    void init(Rng& rng);
    template <class F>
    void for_each(F&& f) {
        for (size_t k = 0; k < theta.size(); ++k) f("theta" + std::to_string(k + 1), theta[k]);
        f("ng_w1", ng_w1); f("ng_b1", ng_b1);
        f("ng_w2", ng_w2); f("ng_b2", ng_b2);
        f("ng_w3", ng_w3); f("ng_b3", ng_b3);
        f("ref_w1", ref_w1); f("ref_b1", ref_b1);
        f("ref_w2", ref_w2); f("ref_b2", ref_b2);
    }
};

/// Sample tau distinct frame indices with the seeded PRNG (the key frame's
/// own index is not excluded). Deterministic given the seed.
MemoryPool build_pools(const std::vector<Tensor>& features, int tau, uint64_t seed);

struct NgCtx {
    Tensor in, pre1, pre2;
};

Tensor ng_encode(const Tensor& x, const GcnParams& p, NgCtx* ctx = nullptr);
void ng_encode_backward(const Tensor& dout, const NgCtx& ctx, const GcnParams& p,
                        GcnParams& dp, Tensor& dx);

/// Node set for one key frame: [N_g(local[key]), N_g(global[0]), ...].
std::vector<Tensor> aggregate(const MemoryPool& pool, int key_index, const GcnParams& p,
                              std::vector<NgCtx>* ctxs = nullptr);

struct EdgeCtx {
    // per ordered pair (p,q), p != q, stored row-major without diagonal
    std::vector<Tensor> diff;  // signed E_p - E_q
    std::vector<Tensor> pre1;  // first conv output pre-activation
    Tensor logits;             // [phi,phi], diagonal zero
    Tensor adj;                // row-softmax over off-diagonal entries
};

/// Row-stochastic adjacency [phi x phi] with zero diagonal; phi = 1 yields
/// the 1x1 zero matrix.
Tensor edge_weights(const std::vector<Tensor>& nodes, const EdgeNetParams& p,
                    EdgeCtx* ctx = nullptr);
void edge_weights_backward(const Tensor& dadj, const std::vector<Tensor>& nodes,
                           const EdgeCtx& ctx, const EdgeNetParams& p,
                           EdgeNetParams& dp, std::vector<Tensor>& dnodes);

struct GcnLayerCtx {
    std::vector<Tensor> nodes;   // inputs
    std::vector<Tensor> conv;    // conv(E_q) per node (neighbor) or conv(E_p) (self)
    std::vector<Tensor> pre;     // pre-activation aggregates
    Tensor adj;
};

/// E'_p = LeakyReLU( sum_{q != p} A[p,q] * conv3x3(E_source) ); a node with
/// no neighbors aggregates to zero.
std::vector<Tensor> gcn_layer(const std::vector<Tensor>& nodes, const Tensor& adjacency,
                              const Tensor& theta, GcnMessage message,
                              GcnLayerCtx* ctx = nullptr);
void gcn_layer_backward(const std::vector<Tensor>& dout, const GcnLayerCtx& ctx,
                        const Tensor& theta, GcnMessage message, Tensor& dtheta,
                        Tensor& dadj, std::vector<Tensor>& dnodes);

struct LmgaFrameCtx {
    std::vector<NgCtx> ng;
    std::vector<EdgeCtx> edges;        // K entries
    std::vector<GcnLayerCtx> layers;   // K entries
    Tensor key_emb;                    // final key-node embedding
    Tensor ref_pre1;
};

struct LmgaCtx {
    MemoryPool pool;
    std::vector<LmgaFrameCtx> frames;
};

/// Full pass: pools are built once per call and shared by every key frame.
std::vector<Tensor> lmga_forward(const std::vector<Tensor>& features, const GcnParams& gcn,
                                 const EdgeNetParams& edge, int tau, uint64_t seed,
                                 GcnMessage message = GcnMessage::neighbor,
                                 LmgaCtx* ctx = nullptr);
void lmga_backward(const std::vector<Tensor>& dout, const LmgaCtx& ctx,
                   const GcnParams& gcn, const EdgeNetParams& edge, GcnMessage message,
                   GcnParams& dgcn, EdgeNetParams& dedge, std::vector<Tensor>& dfeatures);

}  // namespace megan

#endif
