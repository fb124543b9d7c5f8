#include "megan/model.hpp"

#include <cstring>
#include <map>

#include "megan/io.hpp"

namespace megan {

void MeganConfig::validate() const {
    if (scale != 4) throw ConfigError("config: scale is fixed at 4");
    if (channels < 2 || channels % 2 != 0)
        throw ConfigError("config: channels must be even and >= 2");
    if (m1 < 0 || m2 < 0 || m3 < 0) throw ConfigError("config: m1/m2/m3 must be >= 0");
    if (n_pairs < 1) throw ConfigError("config: n must be >= 1");
    if (tau < 0 || tau > out_frames())
        throw ConfigError("config: tau must satisfy 0 <= tau <= 2n+1");
    if (lmga_enabled && k_layers < 1)
        throw ConfigError("config: K must be >= 1 when LMGA is enabled");
}

MeganParams MeganParams::create(const MeganConfig& cfg) {
    cfg.validate();
    const int c = cfg.channels;
    MeganParams p;
    p.extract.shallow_w = Tensor({c, 3, 3, 3});
    p.extract.shallow_b = Tensor({c});
    if (cfg.nonlocal_enabled) p.extract.nl = NonLocalParams::create(c);
    p.extract.convs.resize(static_cast<size_t>(cfg.m1));
    for (ConvWB& cw : p.extract.convs) {
        cw.w = Tensor({c, c, 3, 3});
        cw.b = Tensor({c});
    }
    p.interp = InterpParams::create(c, cfg.modulated);
    p.bidir = BidirParams::create(c, cfg.modulated);
    if (cfg.lmga_enabled) {
        p.gcn = GcnParams::create(c, cfg.k_layers);
        p.edge = EdgeNetParams::create(c);
    }
    p.pfrdbs.resize(static_cast<size_t>(cfg.m2));
    for (PfrdbParams& b : p.pfrdbs) b = PfrdbParams::create(c, cfg.out_frames());
    p.resblocks.resize(static_cast<size_t>(cfg.m3));
    for (ResBlockParams& b : p.resblocks) b = ResBlockParams::create(c);
    p.up1_w = Tensor({4 * c, c, 3, 3});
    p.up1_b = Tensor({4 * c});
    p.up2_w = Tensor({4 * c, c, 3, 3});
    p.up2_b = Tensor({4 * c});
    p.out_w = Tensor({3, c, 3, 3});
    p.out_b = Tensor({3});
    return p;
}

MeganParams MeganParams::init(const MeganConfig& cfg, uint64_t seed) {
    MeganParams p = create(cfg);
    Rng rng(seed);
    init_uniform(p.extract.shallow_w, rng);
    p.extract.shallow_b.fill(0.0);
    if (p.extract.nl) p.extract.nl->init(rng);
    for (ConvWB& cw : p.extract.convs) {
        init_uniform(cw.w, rng);
        cw.b.fill(0.0);
    }
    p.interp.init(rng);
    p.bidir.init(rng);
    if (p.gcn) p.gcn->init(rng);
    if (p.edge) p.edge->init(rng);
    for (PfrdbParams& b : p.pfrdbs) b.init(rng);
    for (ResBlockParams& b : p.resblocks) b.init(rng);
    init_uniform(p.up1_w, rng);
    p.up1_b.fill(0.0);
    init_uniform(p.up2_w, rng);
    p.up2_b.fill(0.0);
    init_uniform(p.out_w, rng);
    p.out_b.fill(0.0);
    return p;
}

size_t param_count(const MeganConfig& cfg) {
    MeganParams p = MeganParams::create(cfg);
    size_t n = 0;
    p.for_each([&](const std::string&, Tensor& t) { n += t.size(); });
    return n;
}

// ---- feature extraction -----------------------------------------------------

Tensor feature_extract(const Tensor& frame, const MeganParams& p, const MeganConfig& cfg,
                       ExtractCtx* ctx) {
    if (frame.rank() != 4 || frame.dim(1) != 3)
        throw ShapeError("feature_extract: expected Nx3xHxW frame, got " + frame.shape_str());
    const ConvSpec s3 = conv3x3_pad1();
    ExtractCtx local;
    ExtractCtx* c = ctx ? ctx : &local;
    c->frame = frame;

    Tensor feat = conv2d(frame, p.extract.shallow_w, p.extract.shallow_b, s3);
    if (cfg.nonlocal_enabled)
        feat = nonlocal_forward(feat, *p.extract.nl, cfg.nonlocal_norm, &c->nl);
    c->first_in = feat;
    c->pre.resize(p.extract.convs.size());
    for (size_t i = 0; i < p.extract.convs.size(); ++i) {
        c->pre[i] = conv2d(feat, p.extract.convs[i].w, p.extract.convs[i].b, s3);
        feat = leaky_relu(c->pre[i], kLreluSlope);
    }
    return feat;
}

void feature_extract_backward(const Tensor& dout, const ExtractCtx& ctx,
                              const MeganParams& p, const MeganConfig& cfg,
                              MeganParams& dp) {
    const ConvSpec s3 = conv3x3_pad1();
    Tensor d = dout;
    for (size_t ri = 0; ri < p.extract.convs.size(); ++ri) {
        const size_t i = p.extract.convs.size() - 1 - ri;
        Tensor dpre = leaky_relu_backward(d, ctx.pre[i], kLreluSlope);
        const Tensor& in = i == 0 ? ctx.first_in : leaky_relu(ctx.pre[i - 1], kLreluSlope);
        Tensor din = zeros_like(in);
        conv2d_backward(dpre, in, p.extract.convs[i].w, s3, &din, &dp.extract.convs[i].w,
                        &dp.extract.convs[i].b);
        d = std::move(din);
    }
    if (cfg.nonlocal_enabled) d = nonlocal_backward(d, ctx.nl, *p.extract.nl, *dp.extract.nl);
    conv2d_backward(d, ctx.frame, p.extract.shallow_w, s3, nullptr, &dp.extract.shallow_w,
                    &dp.extract.shallow_b);
}

// ---- reconstruction -----------------------------------------------------------

std::vector<Tensor> reconstruct(const std::vector<Tensor>& feats, const MeganParams& p,
                                const MeganConfig& cfg, ReconCtx* ctx) {
    (void)cfg;  // topology is fully determined by the parameter shapes
    const ConvSpec s3 = conv3x3_pad1();
    ReconCtx local;
    ReconCtx* c = ctx ? ctx : &local;
    c->pfrdb.resize(p.pfrdbs.size());
    c->frames.resize(feats.size());

    std::vector<Tensor> cur = feats;
    for (size_t i = 0; i < p.pfrdbs.size(); ++i) cur = pfrdb_forward(cur, p.pfrdbs[i], &c->pfrdb[i]);

    std::vector<Tensor> out(cur.size());
    for (size_t t = 0; t < cur.size(); ++t) {
        ReconFrameCtx& fc = c->frames[t];
        fc.res.resize(p.resblocks.size());
        Tensor f = cur[t];
        for (size_t i = 0; i < p.resblocks.size(); ++i)
            f = resblock_forward(f, p.resblocks[i], &fc.res[i]);
        fc.up1_in = f;
        fc.up1_pre = conv2d(f, p.up1_w, p.up1_b, s3);
        fc.up2_in = pixel_shuffle(fc.up1_pre, 2);
        fc.up2_pre = conv2d(fc.up2_in, p.up2_w, p.up2_b, s3);
        fc.out_in = pixel_shuffle(fc.up2_pre, 2);
        out[t] = conv2d(fc.out_in, p.out_w, p.out_b, s3);
    }
    return out;
}

void reconstruct_backward(const std::vector<Tensor>& dout, const ReconCtx& ctx,
                          const MeganParams& p, const MeganConfig& cfg, MeganParams& dp,
                          std::vector<Tensor>& dfeats) {
    (void)cfg;
    const ConvSpec s3 = conv3x3_pad1();
    std::vector<Tensor> dcur(dout.size());
    for (size_t t = 0; t < dout.size(); ++t) {
        const ReconFrameCtx& fc = ctx.frames[t];
        Tensor dout_in = zeros_like(fc.out_in);
        conv2d_backward(dout[t], fc.out_in, p.out_w, s3, &dout_in, &dp.out_w, &dp.out_b);
        Tensor dup2_pre = pixel_unshuffle(dout_in, 2);
        Tensor dup2_in = zeros_like(fc.up2_in);
        conv2d_backward(dup2_pre, fc.up2_in, p.up2_w, s3, &dup2_in, &dp.up2_w, &dp.up2_b);
        Tensor dup1_pre = pixel_unshuffle(dup2_in, 2);
        Tensor df = zeros_like(fc.up1_in);
        conv2d_backward(dup1_pre, fc.up1_in, p.up1_w, s3, &df, &dp.up1_w, &dp.up1_b);
        for (size_t ri = 0; ri < p.resblocks.size(); ++ri) {
            const size_t i = p.resblocks.size() - 1 - ri;
            df = resblock_backward(df, fc.res[i], p.resblocks[i], dp.resblocks[i]);
        }
        dcur[t] = std::move(df);
    }
    for (size_t ri = 0; ri < p.pfrdbs.size(); ++ri) {
        const size_t i = p.pfrdbs.size() - 1 - ri;
        std::vector<Tensor> dprev(dcur.size());
        for (size_t t = 0; t < dcur.size(); ++t) dprev[t] = zeros_like(dcur[t]);
        pfrdb_backward(dcur, ctx.pfrdb[i], p.pfrdbs[i], dp.pfrdbs[i], dprev);
        dcur = std::move(dprev);
    }
    for (size_t t = 0; t < dcur.size(); ++t) add_inplace(dfeats[t], dcur[t]);
}

// ---- full pipeline ---------------------------------------------------------------

std::vector<Tensor> megan_forward(const std::vector<Tensor>& lr_frames,
                                  const MeganParams& p, const MeganConfig& cfg,
                                  uint64_t pool_seed, MeganCtx* ctx) {
    cfg.validate();
    if (static_cast<int>(lr_frames.size()) != cfg.in_frames())
        throw ShapeError("megan_forward: expected " + std::to_string(cfg.in_frames()) +
                         " input frames, got " + std::to_string(lr_frames.size()));
    MeganCtx local;
    MeganCtx* c = ctx ? ctx : &local;
    const size_t n_in = lr_frames.size();

    c->extract.resize(n_in);
    std::vector<Tensor> odd(n_in);
    for (size_t i = 0; i < n_in; ++i)
        odd[i] = feature_extract(lr_frames[i], p, cfg, &c->extract[i]);

    // interleave: odd maps at even slots, interpolated maps between
    c->interp.resize(n_in - 1);
    c->seq.assign(2 * n_in - 1, Tensor());
    for (size_t i = 0; i < n_in; ++i) c->seq[2 * i] = odd[i];
    for (size_t i = 0; i + 1 < n_in; ++i)
        c->seq[2 * i + 1] = feature_interpolate(odd[i], odd[i + 1], p.interp, &c->interp[i]);

    c->lstm_out = bidirectional_pass(c->seq, p.bidir, &c->bidir);

    std::vector<Tensor> agg;
    if (cfg.lmga_enabled)
        agg = lmga_forward(c->lstm_out, *p.gcn, *p.edge, cfg.tau, pool_seed, cfg.gcn_message,
                           &c->lmga);
    else
        agg = c->lstm_out;

    return reconstruct(agg, p, cfg, &c->recon);
}

void megan_backward(const std::vector<Tensor>& dout, const MeganCtx& ctx,
                    const MeganParams& p, const MeganConfig& cfg, MeganParams& dp) {
    const size_t t_len = ctx.seq.size();
    std::vector<Tensor> dagg(t_len);
    for (size_t t = 0; t < t_len; ++t) dagg[t] = zeros_like(ctx.lstm_out[t]);
    reconstruct_backward(dout, ctx.recon, p, cfg, dp, dagg);

    std::vector<Tensor> dlstm;
    if (cfg.lmga_enabled) {
        dlstm.assign(t_len, Tensor());
        for (size_t t = 0; t < t_len; ++t) dlstm[t] = zeros_like(ctx.lstm_out[t]);
        lmga_backward(dagg, ctx.lmga, *p.gcn, *p.edge, cfg.gcn_message, *dp.gcn, *dp.edge,
                      dlstm);
    } else {
        dlstm = std::move(dagg);
    }

    std::vector<Tensor> dseq(t_len);
    for (size_t t = 0; t < t_len; ++t) dseq[t] = zeros_like(ctx.seq[t]);
    bidirectional_backward(dlstm, ctx.bidir, p.bidir, dp.bidir, dseq);

    const size_t n_in = ctx.extract.size();
    std::vector<Tensor> dodd(n_in);
    for (size_t i = 0; i < n_in; ++i) dodd[i] = dseq[2 * i];
    for (size_t i = 0; i + 1 < n_in; ++i)
        feature_interpolate_backward(dseq[2 * i + 1], ctx.interp[i], p.interp, dp.interp,
                                     dodd[i], dodd[i + 1]);

    for (size_t i = 0; i < n_in; ++i)
        feature_extract_backward(dodd[i], ctx.extract[i], p, cfg, dp);
}

// ---- checkpoints --------------------------------------------------------------------

Tensor encode_config(const MeganConfig& cfg) {
    return Tensor({13}, {static_cast<double>(cfg.channels), static_cast<double>(cfg.m1),
                         static_cast<double>(cfg.m2), static_cast<double>(cfg.m3),
                         static_cast<double>(cfg.tau), static_cast<double>(cfg.k_layers),
                         static_cast<double>(cfg.scale), static_cast<double>(cfg.n_pairs),
                         cfg.nonlocal_enabled ? 1.0 : 0.0, cfg.lmga_enabled ? 1.0 : 0.0,
                         cfg.modulated ? 1.0 : 0.0,
                         cfg.nonlocal_norm == NonLocalNorm::sum ? 1.0 : 0.0,
                         cfg.gcn_message == GcnMessage::self ? 1.0 : 0.0});
}

MeganConfig decode_config(const Tensor& t) {
    if (t.rank() != 1 || t.dim(0) != 13) throw IoError("checkpoint: bad config record");
    MeganConfig cfg;
    cfg.channels = static_cast<int>(t[0]);
    cfg.m1 = static_cast<int>(t[1]);
    cfg.m2 = static_cast<int>(t[2]);
    cfg.m3 = static_cast<int>(t[3]);
    cfg.tau = static_cast<int>(t[4]);
    cfg.k_layers = static_cast<int>(t[5]);
    cfg.scale = static_cast<int>(t[6]);
    cfg.n_pairs = static_cast<int>(t[7]);
    cfg.nonlocal_enabled = t[8] != 0.0;
    cfg.lmga_enabled = t[9] != 0.0;
    cfg.modulated = t[10] != 0.0;
    cfg.nonlocal_norm = t[11] != 0.0 ? NonLocalNorm::sum : NonLocalNorm::softmax;
    cfg.gcn_message = t[12] != 0.0 ? GcnMessage::self : GcnMessage::neighbor;
    cfg.validate();
    return cfg;
}

namespace {

void append_entry(std::vector<uint8_t>& buf, const std::string& name, const Tensor& t) {
    if (name.size() > 0xFFFF) throw IoError("checkpoint: name too long");
    const uint16_t len = static_cast<uint16_t>(name.size());
    buf.push_back(static_cast<uint8_t>(len & 0xFF));
    buf.push_back(static_cast<uint8_t>(len >> 8));
    buf.insert(buf.end(), name.begin(), name.end());
    mgt_encode(t, Dtype::f64, buf);
}

}  // namespace

void save_checkpoint(const std::string& path, const MeganConfig& cfg, MeganParams& params,
                     const std::vector<std::pair<std::string, Tensor>>& extra) {
    std::vector<std::pair<std::string, Tensor*>> entries;
    params.for_each([&](const std::string& n, Tensor& t) { entries.emplace_back(n, &t); });

    uint32_t count = static_cast<uint32_t>(entries.size() + extra.size() + 1);
    std::vector<uint8_t> buf;
    buf.push_back(static_cast<uint8_t>(count & 0xFF));
    buf.push_back(static_cast<uint8_t>((count >> 8) & 0xFF));
    buf.push_back(static_cast<uint8_t>((count >> 16) & 0xFF));
    buf.push_back(static_cast<uint8_t>(count >> 24));
    Tensor cfg_t = encode_config(cfg);
    append_entry(buf, "__meta__.config", cfg_t);
    for (auto& [name, t] : entries) append_entry(buf, name, *t);
    for (const auto& [name, t] : extra) append_entry(buf, name, t);
    write_file_atomic(path, buf.data(), buf.size());
}

Checkpoint load_checkpoint(const std::string& path) {
    std::vector<uint8_t> bytes = read_file(path);
    if (bytes.size() < 4) throw IoError("checkpoint: truncated file " + path);
    uint32_t count;
    std::memcpy(&count, bytes.data(), 4);
    size_t pos = 4;

    std::map<std::string, Tensor> table;
    std::vector<std::pair<std::string, Tensor>> extra;
    for (uint32_t i = 0; i < count; ++i) {
        if (pos + 2 > bytes.size()) throw IoError("checkpoint: truncated entry header");
        uint16_t len;
        std::memcpy(&len, bytes.data() + pos, 2);
        pos += 2;
        if (pos + len > bytes.size()) throw IoError("checkpoint: truncated entry name");
        std::string name(reinterpret_cast<const char*>(bytes.data() + pos), len);
        pos += len;
        Tensor t = mgt_decode(bytes, pos);
        if (name.rfind("__opt__.", 0) == 0 || name.rfind("__meta__.", 0) == 0) {
            if (name == "__meta__.config")
                table.emplace(name, std::move(t));
            else
                extra.emplace_back(name, std::move(t));
        } else {
            if (!table.emplace(name, std::move(t)).second)
                throw IoError("checkpoint: duplicate entry " + name);
        }
    }
    if (pos != bytes.size()) throw IoError("checkpoint: trailing bytes in " + path);

    auto cfg_it = table.find("__meta__.config");
    if (cfg_it == table.end()) throw IoError("checkpoint: missing config record");
    Checkpoint ck;
    ck.config = decode_config(cfg_it->second);
    table.erase(cfg_it);
    ck.params = MeganParams::create(ck.config);
    ck.params.for_each([&](const std::string& n, Tensor& t) {
        auto it = table.find(n);
        if (it == table.end()) throw IoError("checkpoint: missing parameter " + n);
        if (it->second.dims() != t.dims())
            throw IoError("checkpoint: shape mismatch for " + n + ": stored " +
                          it->second.shape_str() + " vs expected " + t.shape_str());
        t = std::move(it->second);
        table.erase(it);
    });
    if (!table.empty()) throw IoError("checkpoint: unknown entry " + table.begin()->first);
    ck.extra = std::move(extra);
    return ck;
}

}  // namespace megan
