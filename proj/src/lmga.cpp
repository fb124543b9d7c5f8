#include "megan/lmga.hpp"

#include <cmath>

namespace megan {

EdgeNetParams EdgeNetParams::create(int channels) {
    if (channels % 2 != 0)
        throw ShapeError("edge net: channel count " + std::to_string(channels) + " must be even");
    EdgeNetParams p;
    p.w1 = Tensor({channels / 2, channels, 3, 3});
    p.b1 = Tensor({channels / 2});
    p.w2 = Tensor({1, channels / 2, 3, 3});
    return p;
}

void EdgeNetParams::init(Rng& rng) {
    init_uniform(w1, rng);
    b1.fill(0.0);
    init_uniform(w2, rng);
}

GcnParams GcnParams::create(int channels, int k_layers) {
    if (k_layers < 1) throw ValueError("gcn: K must be >= 1");
    GcnParams p;
    p.theta.resize(static_cast<size_t>(k_layers));
    for (Tensor& t : p.theta) t = Tensor({channels, channels, 3, 3});
    p.ng_w1 = Tensor({channels, channels, 3, 3});
    p.ng_b1 = Tensor({channels});
    p.ng_w2 = Tensor({channels, channels, 3, 3});
    p.ng_b2 = Tensor({channels});
    p.ng_w3 = Tensor({channels, channels, 3, 3});
    p.ng_b3 = Tensor({channels});
    p.ref_w1 = Tensor({channels, channels, 3, 3});
    p.ref_b1 = Tensor({channels});
    p.ref_w2 = Tensor({channels, channels, 3, 3});
    p.ref_b2 = Tensor({channels});
    return p;
}

void GcnParams::init(Rng& rng) {
    for (Tensor& t : theta) init_uniform(t, rng);
    init_uniform(ng_w1, rng);
    ng_b1.fill(0.0);
    init_uniform(ng_w2, rng);
    ng_b2.fill(0.0);
    init_uniform(ng_w3, rng);
    ng_b3.fill(0.0);
    init_uniform(ref_w1, rng);
    ref_b1.fill(0.0);
    init_uniform(ref_w2, rng);
    ref_b2.fill(0.0);
}

MemoryPool build_pools(const std::vector<Tensor>& features, int tau, uint64_t seed) {
    const int t_len = static_cast<int>(features.size());
    if (tau < 0 || tau > t_len)
        throw ValueError("build_pools: tau = " + std::to_string(tau) + " exceeds frame count " +
                         std::to_string(t_len));
    MemoryPool pool;
    pool.local = features;
    pool.seed = seed;

    // Fisher-Yates shuffle of the ordered index sequence, take the first tau.
    std::vector<int> idx(static_cast<size_t>(t_len));
    for (int i = 0; i < t_len; ++i) idx[static_cast<size_t>(i)] = i;
    Rng rng(seed);
    for (int i = t_len - 1; i > 0; --i) {
        const int j = rng.uniform_int(i + 1);
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    pool.global_indices.assign(idx.begin(), idx.begin() + tau);
    pool.global.reserve(static_cast<size_t>(tau));
    for (int i : pool.global_indices) pool.global.push_back(features[static_cast<size_t>(i)]);
    return pool;
}

Tensor ng_encode(const Tensor& x, const GcnParams& p, NgCtx* ctx) {
    const ConvSpec s3 = conv3x3_pad1();
    Tensor pre1 = conv2d(x, p.ng_w1, p.ng_b1, s3);
    Tensor pre2 = conv2d(leaky_relu(pre1, kLreluSlope), p.ng_w2, p.ng_b2, s3);
    Tensor out = conv2d(leaky_relu(pre2, kLreluSlope), p.ng_w3, p.ng_b3, s3);
    if (ctx) {
        ctx->in = x;
        ctx->pre1 = std::move(pre1);
        ctx->pre2 = std::move(pre2);
    }
    return out;
}

void ng_encode_backward(const Tensor& dout, const NgCtx& ctx, const GcnParams& p,
                        GcnParams& dp, Tensor& dx) {
    const ConvSpec s3 = conv3x3_pad1();
    Tensor a2 = leaky_relu(ctx.pre2, kLreluSlope);
    Tensor da2 = zeros_like(a2);
    conv2d_backward(dout, a2, p.ng_w3, s3, &da2, &dp.ng_w3, &dp.ng_b3);
    Tensor dpre2 = leaky_relu_backward(da2, ctx.pre2, kLreluSlope);
    Tensor a1 = leaky_relu(ctx.pre1, kLreluSlope);
    Tensor da1 = zeros_like(a1);
    conv2d_backward(dpre2, a1, p.ng_w2, s3, &da1, &dp.ng_w2, &dp.ng_b2);
    Tensor dpre1 = leaky_relu_backward(da1, ctx.pre1, kLreluSlope);
    conv2d_backward(dpre1, ctx.in, p.ng_w1, s3, &dx, &dp.ng_w1, &dp.ng_b1);
}

std::vector<Tensor> aggregate(const MemoryPool& pool, int key_index, const GcnParams& p,
                              std::vector<NgCtx>* ctxs) {
    if (key_index < 0 || key_index >= static_cast<int>(pool.local.size()))
        throw ValueError("aggregate: key index " + std::to_string(key_index) + " out of range");
    const size_t phi = pool.global.size() + 1;
    std::vector<Tensor> nodes(phi);
    if (ctxs) ctxs->resize(phi);
    nodes[0] = ng_encode(pool.local[static_cast<size_t>(key_index)], p, ctxs ? &(*ctxs)[0] : nullptr);
    for (size_t i = 0; i < pool.global.size(); ++i)
        nodes[i + 1] = ng_encode(pool.global[i], p, ctxs ? &(*ctxs)[i + 1] : nullptr);
    return nodes;
}

Tensor edge_weights(const std::vector<Tensor>& nodes, const EdgeNetParams& p, EdgeCtx* ctx) {
    const int phi = static_cast<int>(nodes.size());
    if (phi == 0) throw ShapeError("edge_weights: empty node set");
    Tensor adj({std::max(phi, 1), std::max(phi, 1)});
    if (phi == 1) {
        if (ctx) {
            ctx->adj = adj;
            ctx->logits = adj;
        }
        return adj;  // degenerate single-node graph: no edges
    }
    const ConvSpec s3 = conv3x3_pad1();
    Tensor logits({phi, phi});
    EdgeCtx local;
    EdgeCtx* c = ctx ? ctx : &local;
    c->diff.clear();
    c->pre1.clear();
    const double inv_area = 1.0 / (nodes[0].dim(2) * static_cast<double>(nodes[0].dim(3)));
    for (int pi = 0; pi < phi; ++pi) {
        for (int q = 0; q < phi; ++q) {
            if (q == pi) continue;
            Tensor diff = sub(nodes[static_cast<size_t>(pi)], nodes[static_cast<size_t>(q)]);
            Tensor absdiff = diff;
            for (double& v : absdiff.values()) v = std::fabs(v);
            Tensor pre1 = conv2d(absdiff, p.w1, p.b1, s3);
            Tensor act = leaky_relu(pre1, kLreluSlope);
            Tensor zb({1});
            Tensor m = conv2d(act, p.w2, zb, s3);  // [N,1,H,W]
            logits.at(pi, q) = sum(m) * inv_area / m.dim(0);
            c->diff.push_back(std::move(diff));
            c->pre1.push_back(std::move(pre1));
        }
    }
    // row softmax over the phi-1 off-diagonal entries; diagonal pinned at 0
    for (int pi = 0; pi < phi; ++pi) {
        double mx = -1e300;
        for (int q = 0; q < phi; ++q)
            if (q != pi) mx = std::max(mx, logits.at(pi, q));
        double z = 0.0;
        for (int q = 0; q < phi; ++q)
            if (q != pi) z += std::exp(logits.at(pi, q) - mx);
        for (int q = 0; q < phi; ++q)
            adj.at(pi, q) = q == pi ? 0.0 : std::exp(logits.at(pi, q) - mx) / z;
    }
    c->logits = logits;
    c->adj = adj;
    return adj;
}

void edge_weights_backward(const Tensor& dadj, const std::vector<Tensor>& nodes,
                           const EdgeCtx& ctx, const EdgeNetParams& p, EdgeNetParams& dp,
                           std::vector<Tensor>& dnodes) {
    const int phi = static_cast<int>(nodes.size());
    if (phi <= 1) return;
    const ConvSpec s3 = conv3x3_pad1();
    const int h = nodes[0].dim(2), w = nodes[0].dim(3);
    const double inv_area = 1.0 / (static_cast<double>(h) * w) / nodes[0].dim(0);

    // softmax backward per row, restricted to off-diagonal entries
    Tensor dlogits({phi, phi});
    for (int pi = 0; pi < phi; ++pi) {
        double acc = 0.0;
        for (int q = 0; q < phi; ++q)
            if (q != pi) acc += dadj.at(pi, q) * ctx.adj.at(pi, q);
        for (int q = 0; q < phi; ++q)
            if (q != pi) dlogits.at(pi, q) = ctx.adj.at(pi, q) * (dadj.at(pi, q) - acc);
    }

    size_t pair = 0;
    for (int pi = 0; pi < phi; ++pi) {
        for (int q = 0; q < phi; ++q) {
            if (q == pi) continue;
            const double dl = dlogits.at(pi, q);
            const Tensor& diff = ctx.diff[pair];
            const Tensor& pre1 = ctx.pre1[pair];
            ++pair;
            if (dl == 0.0) continue;
            Tensor dm({diff.dim(0), 1, h, w});
            dm.fill(dl * inv_area);
            Tensor act = leaky_relu(pre1, kLreluSlope);
            Tensor dact = zeros_like(act);
            conv2d_backward(dm, act, p.w2, s3, &dact, &dp.w2, nullptr);
            Tensor dpre1 = leaky_relu_backward(dact, pre1, kLreluSlope);
            Tensor absdiff = diff;
            for (double& v : absdiff.values()) v = std::fabs(v);
            Tensor dabs = zeros_like(absdiff);
            conv2d_backward(dpre1, absdiff, p.w1, s3, &dabs, &dp.w1, &dp.b1);
            // d|x|/dx = sign(x), subgradient 0 at x = 0
            double* da = dabs.data();
            const double* dd = diff.data();
            for (size_t i = 0; i < dabs.size(); ++i) {
                const double s = dd[i] > 0.0 ? 1.0 : (dd[i] < 0.0 ? -1.0 : 0.0);
                da[i] *= s;
            }
            add_inplace(dnodes[static_cast<size_t>(pi)], dabs);
            add_scaled(dnodes[static_cast<size_t>(q)], dabs, -1.0);
        }
    }
}

std::vector<Tensor> gcn_layer(const std::vector<Tensor>& nodes, const Tensor& adjacency,
                              const Tensor& theta, GcnMessage message, GcnLayerCtx* ctx) {
    const int phi = static_cast<int>(nodes.size());
    if (adjacency.rank() != 2 || adjacency.dim(0) != phi || adjacency.dim(1) != phi)
        throw ShapeError("gcn_layer: adjacency " + adjacency.shape_str() + " for " +
                         std::to_string(phi) + " nodes");
    if (phi >= 2) {
        for (int pi = 0; pi < phi; ++pi) {
            double rs = 0.0;
            for (int q = 0; q < phi; ++q) rs += adjacency.at(pi, q);
            if (std::fabs(rs - 1.0) > 1e-6)
                throw ValueError("gcn_layer: adjacency row " + std::to_string(pi) +
                                 " sums to " + std::to_string(rs) + ", expected 1");
            if (adjacency.at(pi, pi) != 0.0)
                throw ValueError("gcn_layer: adjacency diagonal must be zero");
        }
    }
    const ConvSpec s3 = conv3x3_pad1();
    Tensor zb({theta.dim(0)});
    GcnLayerCtx local;
    GcnLayerCtx* c = ctx ? ctx : &local;
    c->nodes = nodes;
    c->adj = adjacency;
    c->conv.resize(static_cast<size_t>(phi));
    c->pre.resize(static_cast<size_t>(phi));
    for (int q = 0; q < phi; ++q)
        c->conv[static_cast<size_t>(q)] = conv2d(nodes[static_cast<size_t>(q)], theta, zb, s3);

    std::vector<Tensor> out(static_cast<size_t>(phi));
    for (int pi = 0; pi < phi; ++pi) {
        Tensor pre = zeros_like(nodes[0]);
        for (int q = 0; q < phi; ++q) {
            if (q == pi) continue;
            const double a = adjacency.at(pi, q);
            const Tensor& msg = message == GcnMessage::neighbor
                                    ? c->conv[static_cast<size_t>(q)]
                                    : c->conv[static_cast<size_t>(pi)];
            add_scaled(pre, msg, a);
        }
        out[static_cast<size_t>(pi)] = leaky_relu(pre, kLreluSlope);
        c->pre[static_cast<size_t>(pi)] = std::move(pre);
    }
    return out;
}

void gcn_layer_backward(const std::vector<Tensor>& dout, const GcnLayerCtx& ctx,
                        const Tensor& theta, GcnMessage message, Tensor& dtheta,
                        Tensor& dadj, std::vector<Tensor>& dnodes) {
    const int phi = static_cast<int>(dout.size());
    const ConvSpec s3 = conv3x3_pad1();
    std::vector<Tensor> dconv(static_cast<size_t>(phi));
    for (int q = 0; q < phi; ++q) dconv[static_cast<size_t>(q)] = zeros_like(ctx.conv[0]);

    for (int pi = 0; pi < phi; ++pi) {
        Tensor dpre = leaky_relu_backward(dout[static_cast<size_t>(pi)],
                                          ctx.pre[static_cast<size_t>(pi)], kLreluSlope);
        for (int q = 0; q < phi; ++q) {
            if (q == pi) continue;
            const int src = message == GcnMessage::neighbor ? q : pi;
            dadj.at(pi, q) += dot(dpre, ctx.conv[static_cast<size_t>(src)]);
            add_scaled(dconv[static_cast<size_t>(src)], dpre, ctx.adj.at(pi, q));
        }
    }
    for (int q = 0; q < phi; ++q)
        conv2d_backward(dconv[static_cast<size_t>(q)], ctx.nodes[static_cast<size_t>(q)], theta,
                        s3, &dnodes[static_cast<size_t>(q)], &dtheta, nullptr);
}

std::vector<Tensor> lmga_forward(const std::vector<Tensor>& features, const GcnParams& gcn,
                                 const EdgeNetParams& edge, int tau, uint64_t seed,
                                 GcnMessage message, LmgaCtx* ctx) {
    if (gcn.theta.empty()) throw ValueError("lmga: K must be >= 1");
    const size_t t_len = features.size();
    LmgaCtx local;
    LmgaCtx* c = ctx ? ctx : &local;
    c->pool = build_pools(features, tau, seed);
    c->frames.resize(t_len);

    const ConvSpec s3 = conv3x3_pad1();
    std::vector<Tensor> out(t_len);
    for (size_t t = 0; t < t_len; ++t) {
        LmgaFrameCtx& fc = c->frames[t];
        std::vector<Tensor> nodes = aggregate(c->pool, static_cast<int>(t), gcn, &fc.ng);
        fc.edges.resize(gcn.theta.size());
        fc.layers.resize(gcn.theta.size());
        for (size_t k = 0; k < gcn.theta.size(); ++k) {
            Tensor adj = edge_weights(nodes, edge, &fc.edges[k]);
            nodes = gcn_layer(nodes, adj, gcn.theta[k], message, &fc.layers[k]);
        }
        fc.key_emb = nodes[0];
        fc.ref_pre1 = conv2d(fc.key_emb, gcn.ref_w1, gcn.ref_b1, s3);
        Tensor refined = conv2d(leaky_relu(fc.ref_pre1, kLreluSlope), gcn.ref_w2, gcn.ref_b2, s3);
        out[t] = add(features[t], refined);
    }
    return out;
}

void lmga_backward(const std::vector<Tensor>& dout, const LmgaCtx& ctx, const GcnParams& gcn,
                   const EdgeNetParams& edge, GcnMessage message, GcnParams& dgcn,
                   EdgeNetParams& dedge, std::vector<Tensor>& dfeatures) {
    const size_t t_len = dout.size();
    const ConvSpec s3 = conv3x3_pad1();
    const size_t k_layers = gcn.theta.size();

    for (size_t t = 0; t < t_len; ++t) {
        const LmgaFrameCtx& fc = ctx.frames[t];
        add_inplace(dfeatures[t], dout[t]);  // residual

        // refinement backward
        Tensor a1 = leaky_relu(fc.ref_pre1, kLreluSlope);
        Tensor da1 = zeros_like(a1);
        conv2d_backward(dout[t], a1, gcn.ref_w2, s3, &da1, &dgcn.ref_w2, &dgcn.ref_b2);
        Tensor dpre1 = leaky_relu_backward(da1, fc.ref_pre1, kLreluSlope);
        Tensor dkey = zeros_like(fc.key_emb);
        conv2d_backward(dpre1, fc.key_emb, gcn.ref_w1, s3, &dkey, &dgcn.ref_w1, &dgcn.ref_b1);

        // K graph layers in reverse; only the key node carries a cotangent in
        const size_t phi = fc.ng.size();
        std::vector<Tensor> dnodes(phi);
        for (size_t i = 0; i < phi; ++i) dnodes[i] = zeros_like(fc.key_emb);
        add_inplace(dnodes[0], dkey);
        for (size_t kr = 0; kr < k_layers; ++kr) {
            const size_t k = k_layers - 1 - kr;
            std::vector<Tensor> dnodes_in(phi);
            for (size_t i = 0; i < phi; ++i) dnodes_in[i] = zeros_like(fc.key_emb);
            Tensor dadj({static_cast<int>(phi), static_cast<int>(phi)});
            gcn_layer_backward(dnodes, fc.layers[k], gcn.theta[k], message, dgcn.theta[k],
                               dadj, dnodes_in);
            edge_weights_backward(dadj, fc.layers[k].nodes, fc.edges[k], edge, dedge, dnodes_in);
            dnodes = std::move(dnodes_in);
        }

        // N_g backward: node 0 is the key frame, node i >= 1 is global i-1
        ng_encode_backward(dnodes[0], fc.ng[0], gcn, dgcn, dfeatures[t]);
        for (size_t i = 1; i < phi; ++i) {
            const int src = ctx.pool.global_indices[i - 1];
            ng_encode_backward(dnodes[i], fc.ng[i], gcn, dgcn,
                               dfeatures[static_cast<size_t>(src)]);
        }
    }
}

}  // namespace megan
