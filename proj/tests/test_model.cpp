#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "megan/io.hpp"
#include "megan/model.hpp"
#include "megan/train.hpp"
#include "testutil.hpp"

using namespace megan;

namespace {

MeganConfig desk_config() {
    MeganConfig cfg;  // C=16, m1=3, m2=1, m3=2, tau=2, K=2, n=3
    return cfg;
}

MeganConfig tiny_config() {
    MeganConfig cfg;
    cfg.channels = 4;
    cfg.m1 = 1;
    cfg.m2 = 1;
    cfg.m3 = 1;
    cfg.tau = 1;
    cfg.k_layers = 1;
    cfg.n_pairs = 1;
    return cfg;
}

std::vector<Tensor> rand_frames(Rng& rng, int count, int c, int h, int w) {
    std::vector<Tensor> out;
    for (int i = 0; i < count; ++i)
        out.push_back(testutil::rand_tensor({1, c, h, w}, rng, 0.0, 1.0));
    return out;
}

// Random parameter point for finite differences: offset predictors biased so
// every deformable tap samples clear of the integer lattice, everything else
// uniform. (The training init starts offsets exactly ON the lattice, where
// the bilinear coordinate derivative is one-sided and central differences
// do not apply.)
MeganParams fd_params(const MeganConfig& cfg, Rng& rng) {
    MeganParams p = MeganParams::create(cfg);
    p.for_each([&](const std::string&, Tensor& t) {
        for (double& v : t.values()) {
            const double mag = rng.uniform(0.05, 0.4);
            v = rng.coin() ? -mag : mag;
        }
    });
    auto tame = [&](OffsetNetParams& onp) {
        for (double& v : onp.w1.values()) v = rng.uniform(-0.2, 0.2);
        for (double& v : onp.b1.values()) v = rng.uniform(0.3, 0.6);
        for (double& v : onp.w2.values()) v = rng.uniform(-0.15, 0.15);
        for (double& v : onp.b2.values()) v = rng.uniform(0.25, 0.4);
    };
    tame(p.interp.off1);
    tame(p.interp.off3);
    for (ConvLstmParams* lstm : {&p.bidir.fwd, &p.bidir.bwd}) {
        tame(lstm->g_h);
        tame(lstm->g_c);
    }
    return p;
}

double lrelu_margin(const Tensor& pre) {
    double m = 1e300;
    for (double v : pre.values()) m = std::min(m, std::fabs(v));
    return m;
}

double lattice_margin(const Tensor& raw) {
    double m = 1e300;
    for (double v : raw.values()) {
        const double fr = v - std::floor(v);
        m = std::min(m, std::min(fr, 1.0 - fr));
    }
    return m;
}

// smallest distance any LeakyReLU / |x| / bilinear-lattice nonlinearity came
// to its kink during the forward pass
double model_margin(const MeganCtx& ctx) {
    double m = 1e300;
    for (const ExtractCtx& ec : ctx.extract)
        for (const Tensor& pre : ec.pre) m = std::min(m, lrelu_margin(pre));
    for (const InterpCtx& ic : ctx.interp) {
        m = std::min(m, lrelu_margin(ic.off1.pre));
        m = std::min(m, lrelu_margin(ic.off3.pre));
        m = std::min(m, lattice_margin(ic.raw1));
        m = std::min(m, lattice_margin(ic.raw3));
    }
    auto step_margin = [&](const ConvLstmStepCtx& sc) {
        m = std::min(m, lrelu_margin(sc.off_h.pre));
        m = std::min(m, lrelu_margin(sc.off_c.pre));
        m = std::min(m, lattice_margin(sc.raw_h));
        m = std::min(m, lattice_margin(sc.raw_c));
    };
    for (const ConvLstmStepCtx& sc : ctx.bidir.fwd_steps) step_margin(sc);
    for (const ConvLstmStepCtx& sc : ctx.bidir.bwd_steps) step_margin(sc);
    for (const LmgaFrameCtx& fc : ctx.lmga.frames) {
        for (const NgCtx& ng : fc.ng) {
            m = std::min(m, lrelu_margin(ng.pre1));
            m = std::min(m, lrelu_margin(ng.pre2));
        }
        for (const EdgeCtx& ec : fc.edges) {
            for (const Tensor& pre : ec.pre1) m = std::min(m, lrelu_margin(pre));
            for (const Tensor& d : ec.diff) m = std::min(m, lrelu_margin(d));
        }
        for (const GcnLayerCtx& lc : fc.layers)
            for (const Tensor& pre : lc.pre) m = std::min(m, lrelu_margin(pre));
        m = std::min(m, lrelu_margin(fc.ref_pre1));
    }
    for (const PfrdbCtx& pc : ctx.recon.pfrdb)
        for (const Tensor& pre : pc.pre_a) m = std::min(m, lrelu_margin(pre));
    for (const ReconFrameCtx& fc : ctx.recon.frames)
        for (const ResBlockCtx& rc : fc.res) m = std::min(m, lrelu_margin(rc.pre));
    return m;
}

}  // namespace

TEST_CASE("shape contract: 4 LR frames 3x16x16 -> 7 HR frames 3x64x64") {
    MeganConfig cfg = desk_config();
    MeganParams p = MeganParams::init(cfg, 1);
    Rng rng(2);
    std::vector<Tensor> lr = rand_frames(rng, 4, 3, 16, 16);
    std::vector<Tensor> hr = megan_forward(lr, p, cfg, 3);
    REQUIRE(hr.size() == 7);
    for (const Tensor& f : hr) {
        CHECK(f.dims() == std::vector<int>{1, 3, 64, 64});
        CHECK(all_finite(f));
    }
}

TEST_CASE("fixed seed and params give bit-identical output") {
    MeganConfig cfg = tiny_config();
    MeganParams p = MeganParams::init(cfg, 4);
    Rng rng(5);
    std::vector<Tensor> lr = rand_frames(rng, 2, 3, 8, 8);
    std::vector<Tensor> a = megan_forward(lr, p, cfg, 42);
    std::vector<Tensor> b = megan_forward(lr, p, cfg, 42);
    for (size_t t = 0; t < a.size(); ++t) CHECK(testutil::bit_equal(a[t], b[t]));
}

TEST_CASE("disabling LMGA removes the only seed dependence") {
    MeganConfig cfg = tiny_config();
    cfg.lmga_enabled = false;
    MeganParams p = MeganParams::init(cfg, 6);
    Rng rng(7);
    std::vector<Tensor> lr = rand_frames(rng, 2, 3, 8, 8);
    std::vector<Tensor> a = megan_forward(lr, p, cfg, 1);
    std::vector<Tensor> b = megan_forward(lr, p, cfg, 999);
    for (size_t t = 0; t < a.size(); ++t) CHECK(testutil::bit_equal(a[t], b[t]));
}

TEST_CASE("ablation toggles change the parameter set") {
    MeganConfig cfg = tiny_config();
    auto names_of = [](const MeganConfig& c) {
        MeganParams p = MeganParams::create(c);
        std::set<std::string> names;
        p.for_each([&](const std::string& n, Tensor&) { names.insert(n); });
        return names;
    };
    std::set<std::string> full = names_of(cfg);
    CHECK(full.count("extract.nl.w_u") == 1);
    CHECK(full.count("lmga.gcn.theta1") == 1);

    cfg.nonlocal_enabled = false;
    std::set<std::string> no_nl = names_of(cfg);
    CHECK(no_nl.count("extract.nl.w_u") == 0);
    CHECK(no_nl.count("lmga.gcn.theta1") == 1);

    cfg.nonlocal_enabled = true;
    cfg.lmga_enabled = false;
    std::set<std::string> no_lmga = names_of(cfg);
    CHECK(no_lmga.count("lmga.gcn.theta1") == 0);
    CHECK(no_lmga.count("lmga.edge.w1") == 0);
    CHECK(no_lmga.count("extract.nl.w_u") == 1);
}

TEST_CASE("param_count matches a hand enumeration of the remaining convs") {
    MeganConfig cfg;
    cfg.channels = 2;
    cfg.m1 = 0;
    cfg.m2 = 0;
    cfg.m3 = 0;
    cfg.tau = 0;
    cfg.k_layers = 1;
    cfg.n_pairs = 1;
    cfg.nonlocal_enabled = false;
    cfg.lmga_enabled = false;

    // independent arithmetic, block by block
    const size_t shallow = 2 * 3 * 9 + 2;                       // 56
    const size_t offnet = (2 * 4 * 9 + 2) + (18 * 2 * 9 + 18);  // 416
    const size_t dconv = 2 * 2 * 9 + 2;                         // 38
    const size_t blend = 2 * (2 * 2);
    const size_t interp = 2 * offnet + 2 * dconv + blend;       // 916
    const size_t direction = 8 * (2 * 2 * 9) + 4 * 2 + 2 * offnet + 2 * dconv;  // 1204
    const size_t fuse = 2 * 4 + 2;
    const size_t bidir = 2 * direction + fuse;                  // 2418
    const size_t up = 8 * 2 * 9 + 8;                            // 152 each
    const size_t out = 3 * 2 * 9 + 3;                           // 57
    const size_t recon = 2 * up + out;                          // 361
    const size_t expect = shallow + interp + bidir + recon;
    CHECK(expect == 3751);
    CHECK(param_count(cfg) == expect);

    // enabling the graph module adds K thetas, N_g, refinement and the edge net
    cfg.lmga_enabled = true;
    cfg.tau = 1;
    const size_t gcn = 1 * (2 * 2 * 9) + 3 * (2 * 2 * 9 + 2) + 2 * (2 * 2 * 9 + 2);
    const size_t edge = (1 * 2 * 9 + 1) + (1 * 1 * 9);
    CHECK(param_count(cfg) == expect + gcn + edge);
}

TEST_CASE("checkpoint round-trip is bit exact") {
    testutil::TempDir tmp("ckpt");
    MeganConfig cfg = tiny_config();
    MeganParams p = MeganParams::init(cfg, 8);
    const std::string path = tmp.path() + "/model.ckpt";
    save_checkpoint(path, cfg, p,
                    {{"__opt__.t", Tensor::scalar(7.0)},
                     {"__meta__.iteration", Tensor::scalar(100.0)}});
    Checkpoint ck = load_checkpoint(path);
    CHECK(encode_config(ck.config).values() == encode_config(cfg).values());

    std::vector<Tensor*> orig, loaded;
    p.for_each([&](const std::string&, Tensor& t) { orig.push_back(&t); });
    ck.params.for_each([&](const std::string&, Tensor& t) { loaded.push_back(&t); });
    REQUIRE(orig.size() == loaded.size());
    for (size_t i = 0; i < orig.size(); ++i) CHECK(testutil::bit_equal(*orig[i], *loaded[i]));
    REQUIRE(ck.extra.size() == 2);
    CHECK(ck.extra[0].second[0] == 7.0);
}

TEST_CASE("corrupted checkpoint magic fails cleanly") {
    testutil::TempDir tmp("ckptbad");
    MeganConfig cfg = tiny_config();
    MeganParams p = MeganParams::init(cfg, 9);
    const std::string path = tmp.path() + "/model.ckpt";
    save_checkpoint(path, cfg, p);

    std::vector<uint8_t> bytes = read_file(path);
    // flip a byte inside the first MGT1 magic
    bool flipped = false;
    for (size_t i = 0; i + 3 < bytes.size() && !flipped; ++i)
        if (bytes[i] == 'M' && bytes[i + 1] == 'G' && bytes[i + 2] == 'T') {
            bytes[i] = 'X';
            flipped = true;
        }
    REQUIRE(flipped);
    write_file_atomic(path, bytes.data(), bytes.size());
    CHECK_THROWS_AS(static_cast<void>(load_checkpoint(path)), IoError);

    // truncation is also detected
    save_checkpoint(path, cfg, p);
    std::vector<uint8_t> cut = read_file(path);
    cut.resize(cut.size() / 2);
    write_file_atomic(path, cut.data(), cut.size());
    CHECK_THROWS_AS(static_cast<void>(load_checkpoint(path)), IoError);
}

TEST_CASE("end-to-end loss gradient matches central differences on sampled parameters") {
    MeganConfig cfg;
    cfg.channels = 4;
    cfg.m1 = 1;
    cfg.m2 = 1;
    cfg.m3 = 1;
    cfg.tau = 1;
    cfg.k_layers = 1;
    cfg.n_pairs = 1;

    const uint64_t pool_seed = 11;
    Rng rng(12);
    std::vector<Tensor> lr = rand_frames(rng, 2, 3, 8, 8);
    std::vector<Tensor> gt = rand_frames(rng, 3, 3, 32, 32);

    MeganParams params = fd_params(cfg, rng);
    for (int attempt = 0; attempt < 32; ++attempt) {
        MeganCtx probe;
        megan_forward(lr, params, cfg, pool_seed, &probe);
        if (model_margin(probe) > 1e-3) break;
        params = fd_params(cfg, rng);
    }

    auto loss_at = [&](const MeganParams& p) {
        std::vector<Tensor> out = megan_forward(lr, p, cfg, pool_seed);
        return charbonnier_loss(out, gt, 1e-3);
    };

    MeganCtx ctx;
    std::vector<Tensor> out = megan_forward(lr, params, cfg, pool_seed, &ctx);
    std::vector<Tensor> dout;
    const double base = charbonnier_loss_grad(out, gt, 1e-3, LossReduction::global, dout);
    CHECK(std::isfinite(base));
    MeganParams grads = MeganParams::create(cfg);
    megan_backward(dout, ctx, params, cfg, grads);

    std::vector<Tensor*> ptensors, gtensors;
    params.for_each([&](const std::string&, Tensor& t) { ptensors.push_back(&t); });
    grads.for_each([&](const std::string&, Tensor& t) { gtensors.push_back(&t); });

    size_t total = 0;
    for (Tensor* t : ptensors) total += t->size();
    const double h = 1e-5;
    int checked = 0;
    double worst = 0.0;
    Rng pick(13);
    while (checked < 100) {
        size_t flat = static_cast<size_t>(pick.next_u64() % total);
        size_t ti = 0;
        while (flat >= ptensors[ti]->size()) {
            flat -= ptensors[ti]->size();
            ++ti;
        }
        double& slot = (*ptensors[ti])[flat];
        const double saved = slot;
        slot = saved + h;
        const double fp = loss_at(params);
        slot = saved - h;
        const double fm = loss_at(params);
        slot = saved;
        const double numeric = (fp - fm) / (2.0 * h);
        const double analytic = (*gtensors[ti])[flat];
        const double rel = std::fabs(analytic - numeric) /
                           std::max(1e-8, std::fabs(analytic) + std::fabs(numeric));
        worst = std::max(worst, rel);
        ++checked;
    }
    CHECK_MESSAGE(worst <= 1e-4, "worst sampled rel err ", worst);
}

TEST_CASE("one gradient step reaches every parameter") {
    // at the training init the offset predictors' final convs are zero, so
    // their first conv would legitimately see a zero cotangent; probe wiring
    // liveness at a generic random point instead. tau must be >= 2: a
    // two-node graph pins its adjacency at exactly 1 whatever the edge
    // logits, which provably kills the edge-net gradient.
    MeganConfig cfg = tiny_config();
    cfg.tau = 2;
    Rng rng(22);
    MeganParams params = fd_params(cfg, rng);
    std::vector<Tensor> lr = rand_frames(rng, 2, 3, 8, 8);
    std::vector<Tensor> gt = rand_frames(rng, 3, 3, 32, 32);

    MeganCtx ctx;
    std::vector<Tensor> out = megan_forward(lr, params, cfg, 5, &ctx);
    std::vector<Tensor> dout;
    charbonnier_loss_grad(out, gt, 1e-3, LossReduction::global, dout);
    MeganParams grads = MeganParams::create(cfg);
    megan_backward(dout, ctx, params, cfg, grads);

    grads.for_each([&](const std::string& name, Tensor& g) {
        CHECK_MESSAGE(all_finite(g), name, " has non-finite gradient");
        CHECK_MESSAGE(max_abs(g) > 0.0, name, " received no gradient");
    });
}

TEST_CASE("reconstruct with no blocks still upsamples by 4") {
    MeganConfig cfg = tiny_config();
    cfg.m2 = 0;
    cfg.m3 = 0;
    MeganParams p = MeganParams::init(cfg, 30);
    Rng rng(31);
    std::vector<Tensor> feats;
    for (int i = 0; i < 3; ++i) feats.push_back(testutil::rand_tensor({1, 4, 6, 5}, rng));
    std::vector<Tensor> out = reconstruct(feats, p, cfg);
    for (const Tensor& f : out) CHECK(f.dims() == std::vector<int>{1, 3, 24, 20});
}

TEST_CASE("zero residual-path weights reduce reconstruction to the upsample stack") {
    MeganConfig cfg = tiny_config();
    MeganParams p = MeganParams::init(cfg, 32);
    for (PfrdbParams& b : p.pfrdbs)
        b.for_each([](const std::string&, Tensor& t) { t.fill(0.0); });
    for (ResBlockParams& b : p.resblocks)
        b.for_each([](const std::string&, Tensor& t) { t.fill(0.0); });

    MeganConfig bare = cfg;
    bare.m2 = 0;
    bare.m3 = 0;
    MeganParams q = MeganParams::create(bare);
    // share the non-residual weights
    q.extract = p.extract;
    q.interp = p.interp;
    q.bidir = p.bidir;
    q.gcn = p.gcn;
    q.edge = p.edge;
    q.up1_w = p.up1_w;
    q.up1_b = p.up1_b;
    q.up2_w = p.up2_w;
    q.up2_b = p.up2_b;
    q.out_w = p.out_w;
    q.out_b = p.out_b;

    Rng rng(33);
    std::vector<Tensor> feats;
    for (int i = 0; i < 3; ++i) feats.push_back(testutil::rand_tensor({1, 4, 5, 5}, rng));
    std::vector<Tensor> a = reconstruct(feats, p, cfg);
    std::vector<Tensor> b = reconstruct(feats, q, bare);
    for (size_t t = 0; t < a.size(); ++t) CHECK(testutil::bit_equal(a[t], b[t]));
}

TEST_CASE("megan_forward validates the input frame count") {
    MeganConfig cfg = tiny_config();
    MeganParams p = MeganParams::init(cfg, 40);
    Rng rng(41);
    std::vector<Tensor> lr = rand_frames(rng, 3, 3, 8, 8);  // expects 2
    CHECK_THROWS_WITH_AS(static_cast<void>(megan_forward(lr, p, cfg, 0)),
                         doctest::Contains("frames"), ShapeError);
}
