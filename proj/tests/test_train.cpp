#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "megan/train.hpp"
#include "testutil.hpp"

using namespace megan;

// ---- charbonnier ------------------------------------------------------------

TEST_CASE("loss at a perfect prediction equals epsilon exactly") {
    Rng rng(1);
    Tensor a = testutil::rand_tensor({1, 3, 4, 4}, rng, 0.0, 1.0);
    CHECK(charbonnier_loss({a}, {a}, 1e-3) == 1e-3);
    CHECK(charbonnier_loss({a}, {a}, 1e-3, LossReduction::elementwise) ==
          doctest::Approx(1e-3).epsilon(1e-14));
}

TEST_CASE("single-element closed form") {
    Tensor pred({1}, {0.0});
    Tensor gt({1}, {4e-3});
    const double want = std::sqrt(1.6e-5 + 1e-6);
    CHECK(charbonnier_loss({pred}, {gt}, 1e-3) == doctest::Approx(want).epsilon(1e-14));
    CHECK(want == doctest::Approx(4.1231e-3).epsilon(1e-4));
}

TEST_CASE("gradient at the minimum is exactly zero") {
    Rng rng(2);
    Tensor a = testutil::rand_tensor({2, 5}, rng, 0.0, 1.0);
    std::vector<Tensor> dpred;
    charbonnier_loss_grad({a}, {a}, 1e-3, LossReduction::global, dpred);
    CHECK(max_abs(dpred[0]) == 0.0);
    charbonnier_loss_grad({a}, {a}, 1e-3, LossReduction::elementwise, dpred);
    CHECK(max_abs(dpred[0]) == 0.0);
}

TEST_CASE("loss is bounded below by epsilon, equality only at the minimum") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor a = testutil::rand_tensor({7}, rng, 0.0, 1.0);
        Tensor b = testutil::rand_tensor({7}, rng, 0.0, 1.0);
        const double l = charbonnier_loss({a}, {b}, 1e-3);
        CHECK(l >= 1e-3);
        if (testutil::max_abs_diff(a, b) > 0.0) CHECK(l > 1e-3);
    }
}

TEST_CASE("loss is invariant to batch-frame permutations") {
    Rng rng(4);
    Tensor a = testutil::rand_tensor({1, 3, 3, 3}, rng, 0.0, 1.0);
    Tensor b = testutil::rand_tensor({1, 3, 3, 3}, rng, 0.0, 1.0);
    Tensor ga = testutil::rand_tensor({1, 3, 3, 3}, rng, 0.0, 1.0);
    Tensor gb = testutil::rand_tensor({1, 3, 3, 3}, rng, 0.0, 1.0);
    for (LossReduction red : {LossReduction::global, LossReduction::elementwise})
        CHECK(charbonnier_loss({a, b}, {ga, gb}, 1e-3, red) ==
              doctest::Approx(charbonnier_loss({b, a}, {gb, ga}, 1e-3, red)).epsilon(1e-14));
}

TEST_CASE("loss input validation") {
    Tensor a({2, 2});
    Tensor b({2, 3});
    CHECK_THROWS_AS(static_cast<void>(charbonnier_loss({a}, {b}, 1e-3)), ShapeError);
    CHECK_THROWS_AS(static_cast<void>(charbonnier_loss({a}, {a}, 0.0)), ValueError);
}

// ---- schedule ----------------------------------------------------------------

TEST_CASE("cosine schedule anchors") {
    LrSchedule s;
    CHECK(cosine_lr(0, s) == 1e-4);
    CHECK(cosine_lr(20000, s) == doctest::Approx(1e-7).epsilon(1e-12));
    CHECK(cosine_lr(10000, s) == doctest::Approx(5.005e-5).epsilon(1e-12));
    CHECK(cosine_lr(30000, s) == cosine_lr(20000, s));  // clamps past the period
    for (int t = 0; t <= 20000; t += 500) {
        const double lr = cosine_lr(t, s);
        CHECK(lr <= 1e-4);
        CHECK(lr >= 1e-7);
    }
    CHECK_THROWS_AS(static_cast<void>(cosine_lr(-1, s)), ValueError);
}

// ---- Adam ---------------------------------------------------------------------

TEST_CASE("zero gradient leaves parameters unchanged") {
    Tensor p({3}, {1.0, -2.0, 3.0});
    Tensor g({3});
    Tensor m({3}), v({3});
    Tensor before = p;
    adam_update(p, g, m, v, 1, 1e-4, 0.9, 0.999, 1e-8);
    CHECK(testutil::bit_equal(p, before));
}

TEST_CASE("first step moves by about lr in the gradient direction") {
    Tensor p({1}, {0.5});
    Tensor g({1}, {0.5});
    Tensor m({1}), v({1});
    adam_update(p, g, m, v, 1, 1e-4, 0.9, 0.999, 1e-8);
    // bias correction cancels at t = 1: dp = -lr * g / (|g| + eps)
    CHECK(p[0] == doctest::Approx(0.5 - 1e-4).epsilon(1e-7));
}

TEST_CASE("two steps match a hand-rolled scalar recurrence") {
    const double g = 0.3, lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    Tensor p({1}, {1.0});
    Tensor m({1}), v({1});
    adam_update(p, Tensor({1}, {g}), m, v, 1, lr, b1, b2, eps);
    adam_update(p, Tensor({1}, {g}), m, v, 2, lr, b1, b2, eps);

    // independent recurrence
    double mm = 0.0, vv = 0.0, pp = 1.0;
    for (int t = 1; t <= 2; ++t) {
        mm = b1 * mm + (1 - b1) * g;
        vv = b2 * vv + (1 - b2) * g * g;
        const double mhat = mm / (1 - std::pow(b1, t));
        const double vhat = vv / (1 - std::pow(b2, t));
        pp -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    CHECK(p[0] == doctest::Approx(pp).epsilon(1e-15));
    CHECK(m[0] == doctest::Approx(mm).epsilon(1e-15));
    CHECK(v[0] == doctest::Approx(vv).epsilon(1e-15));
}

TEST_CASE("full-model adam with lr 0 is the identity") {
    MeganConfig cfg;
    cfg.channels = 2;
    cfg.m1 = 0;
    cfg.m2 = 0;
    cfg.m3 = 0;
    cfg.tau = 1;
    cfg.k_layers = 1;
    cfg.n_pairs = 1;
    MeganParams params = MeganParams::init(cfg, 5);
    MeganParams snapshot = params;
    MeganParams grads = MeganParams::create(cfg);
    Rng rng(6);
    grads.for_each([&](const std::string&, Tensor& t) {
        for (double& x : t.values()) x = rng.uniform(-1.0, 1.0);
    });
    AdamState st = AdamState::create(params);
    adam_step(params, grads, st, 0.0);
    std::vector<Tensor*> a, b;
    params.for_each([&](const std::string&, Tensor& t) { a.push_back(&t); });
    snapshot.for_each([&](const std::string&, Tensor& t) { b.push_back(&t); });
    for (size_t i = 0; i < a.size(); ++i) CHECK(testutil::bit_equal(*a[i], *b[i]));
    CHECK(st.t == 1);
}

TEST_CASE("non-finite gradients abort the step") {
    MeganConfig cfg;
    cfg.channels = 2;
    cfg.m1 = 0;
    cfg.m2 = 0;
    cfg.m3 = 0;
    cfg.tau = 0;
    cfg.k_layers = 1;
    cfg.n_pairs = 1;
    cfg.lmga_enabled = false;
    MeganParams params = MeganParams::init(cfg, 7);
    MeganParams grads = MeganParams::create(cfg);
    grads.up1_w[0] = std::numeric_limits<double>::quiet_NaN();
    AdamState st = AdamState::create(params);
    CHECK_THROWS_AS(adam_step(params, grads, st, 1e-4), Error);
}

// ---- augmentation -------------------------------------------------------------

namespace {

VideoClip make_clip(Rng& rng, int size) {
    VideoClip clip;
    clip.clip_id = "t";
    for (int t = 0; t < 7; ++t)
        clip.hr_frames.push_back(testutil::rand_tensor({3, size, size}, rng, 0.0, 1.0));
    for (int t : {0, 2, 4, 6})
        clip.lr_frames.push_back(bicubic_downsample(clip.hr_frames[static_cast<size_t>(t)]));
    return clip;
}

bool clips_equal(const VideoClip& a, const VideoClip& b) {
    for (size_t i = 0; i < a.hr_frames.size(); ++i)
        if (!testutil::bit_equal(a.hr_frames[i], b.hr_frames[i])) return false;
    for (size_t i = 0; i < a.lr_frames.size(); ++i)
        if (!testutil::bit_equal(a.lr_frames[i], b.lr_frames[i])) return false;
    return true;
}

}  // namespace

TEST_CASE("flip and rotation helpers are involutions / 4-cycles") {
    Rng rng(8);
    Tensor f = testutil::rand_tensor({3, 6, 6}, rng);
    CHECK(testutil::bit_equal(flip_h(flip_h(f)), f));
    CHECK(testutil::bit_equal(flip_v(flip_v(f)), f));
    CHECK(testutil::bit_equal(rot90(rot90(rot90(rot90(f)))), f));
}

TEST_CASE("augmentation applied twice with reversal-only seeds is the identity") {
    Rng rng(9);
    VideoClip clip = make_clip(rng, 16);
    // find a seed whose draw is reversal-only, then apply it twice
    for (uint64_t seed = 0; seed < 512; ++seed) {
        Rng probe(seed);
        const bool hflip = probe.coin();
        const bool vflip = probe.coin();
        const int rot = probe.uniform_int(4);
        const bool rev = probe.coin();
        if (!hflip && !vflip && rot == 0 && rev) {
            VideoClip twice = augment(augment(clip, seed), seed);
            CHECK(clips_equal(twice, clip));
            return;
        }
    }
    FAIL("no reversal-only seed found in the probe range");
}

TEST_CASE("augmentation is deterministic per seed") {
    Rng rng(10);
    VideoClip clip = make_clip(rng, 16);
    CHECK(clips_equal(augment(clip, 77), augment(clip, 77)));
}

TEST_CASE("flip augmentation commutes with downsampling") {
    Rng rng(11);
    Tensor hr = testutil::rand_tensor({3, 32, 32}, rng, 0.0, 1.0);
    Tensor a = flip_h(bicubic_downsample(hr));
    Tensor b = bicubic_downsample(flip_h(hr));
    CHECK(testutil::max_abs_diff(a, b) < 1e-12);
    Tensor c = flip_v(bicubic_downsample(hr));
    Tensor d = bicubic_downsample(flip_v(hr));
    CHECK(testutil::max_abs_diff(c, d) < 1e-12);
}

TEST_CASE("rotation on non-square frames is rejected") {
    VideoClip clip;
    clip.hr_frames.push_back(Tensor({3, 8, 12}));
    // find a seed that draws at least one rotation
    for (uint64_t seed = 0; seed < 512; ++seed) {
        Rng probe(seed);
        probe.coin();
        probe.coin();
        if (probe.uniform_int(4) != 0) {
            CHECK_THROWS_AS(static_cast<void>(augment(clip, seed)), ShapeError);
            return;
        }
    }
    FAIL("no rotating seed found in the probe range");
}

// ---- config parsing ----------------------------------------------------------

TEST_CASE("config happy path with comments and defaults") {
    RunConfig cfg = parse_config_text(
        "# desk run\n"
        "iterations = 10\n"
        "seed = 42\n"
        "channels = 8   # narrow\n"
        "lmga = false\n"
        "reduction = elementwise\n");
    CHECK(cfg.train.iterations == 10);
    CHECK(cfg.train.seed == 42);
    CHECK(cfg.model.channels == 8);
    CHECK_FALSE(cfg.model.lmga_enabled);
    CHECK(cfg.train.reduction == LossReduction::elementwise);
    CHECK(cfg.model.m1 == 3);             // desk default
    CHECK(cfg.train.schedule.eta_max == 1e-4);
    CHECK(cfg.train.schedule.period == 20000);
}

TEST_CASE("missing required keys are reported by name") {
    CHECK_THROWS_WITH_AS(static_cast<void>(parse_config_text("seed = 1\n")),
                         doctest::Contains("iterations"), ConfigError);
    CHECK_THROWS_WITH_AS(static_cast<void>(parse_config_text("iterations = 5\n")),
                         doctest::Contains("seed"), ConfigError);
}

TEST_CASE("unknown keys are rejected by name") {
    CHECK_THROWS_WITH_AS(
        static_cast<void>(parse_config_text("iterations = 5\nseed = 1\nbogus_knob = 3\n")),
        doctest::Contains("bogus_knob"), ConfigError);
}

TEST_CASE("malformed lines and duplicates are rejected") {
    CHECK_THROWS_AS(static_cast<void>(parse_config_text("iterations 5\n")), ConfigError);
    CHECK_THROWS_AS(static_cast<void>(parse_config_text("seed = 1\nseed = 2\niterations = 1\n")),
                    ConfigError);
}

// ---- training loop -------------------------------------------------------------

namespace {

RunConfig tiny_run(uint64_t seed, int64_t iterations) {
    RunConfig cfg;
    cfg.model.channels = 4;
    cfg.model.m1 = 1;
    cfg.model.m2 = 1;
    cfg.model.m3 = 1;
    cfg.model.tau = 1;
    cfg.model.k_layers = 1;
    cfg.model.n_pairs = 3;
    cfg.train.iterations = iterations;
    cfg.train.seed = seed;
    cfg.train.batch_size = 1;
    cfg.train.crop = 8;
    return cfg;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("train loop is deterministic and the trace lr column is the schedule") {
    testutil::TempDir tmp("train");
    synth_generate(tmp.path() + "/data", 3, 1, 32, 2);
    DatasetManifest data = load_manifest(tmp.path() + "/data");

    RunConfig cfg = tiny_run(5, 4);
    TrainResult r1 = train_loop(cfg, data, tmp.path() + "/a.ckpt");
    TrainResult r2 = train_loop(cfg, data, tmp.path() + "/b.ckpt");
    CHECK(r1.final_loss == r2.final_loss);
    CHECK(slurp(tmp.path() + "/a.ckpt.trace.csv") == slurp(tmp.path() + "/b.ckpt.trace.csv"));
    CHECK(slurp(tmp.path() + "/a.ckpt") == slurp(tmp.path() + "/b.ckpt"));

    std::ifstream trace(tmp.path() + "/a.ckpt.trace.csv");
    std::string line;
    std::getline(trace, line);
    CHECK(line == "iteration,loss,lr");
    int64_t it = 0;
    while (std::getline(trace, line)) {
        const size_t c1 = line.find(',');
        const size_t c2 = line.rfind(',');
        REQUIRE(c1 != std::string::npos);
        REQUIRE(c2 > c1);
        CHECK(std::stoll(line.substr(0, c1)) == it);
        CHECK(std::stod(line.substr(c2 + 1)) == cosine_lr(it, cfg.train.schedule));
        ++it;
    }
    CHECK(it == 4);
}

TEST_CASE("resumed run continues the trace contiguously") {
    testutil::TempDir tmp("resume");
    synth_generate(tmp.path() + "/data", 4, 1, 32, 2);
    DatasetManifest data = load_manifest(tmp.path() + "/data");

    // one 6-iteration run
    RunConfig full = tiny_run(9, 6);
    train_loop(full, data, tmp.path() + "/full.ckpt");

    // 3 + 3 via resume into the same output path
    RunConfig part = tiny_run(9, 3);
    train_loop(part, data, tmp.path() + "/part.ckpt");
    part.train.resume = tmp.path() + "/part.ckpt";
    train_loop(part, data, tmp.path() + "/part.ckpt");

    CHECK(slurp(tmp.path() + "/part.ckpt.trace.csv") ==
          slurp(tmp.path() + "/full.ckpt.trace.csv"));
    CHECK(slurp(tmp.path() + "/part.ckpt") == slurp(tmp.path() + "/full.ckpt"));
}

TEST_CASE("crop larger than the LR frames is rejected") {
    testutil::TempDir tmp("crop");
    synth_generate(tmp.path() + "/data", 5, 1, 32, 2);
    DatasetManifest data = load_manifest(tmp.path() + "/data");
    RunConfig cfg = tiny_run(1, 1);
    cfg.train.crop = 16;  // LR frames are 8x8
    CHECK_THROWS_WITH_AS(static_cast<void>(train_loop(cfg, data, tmp.path() + "/x.ckpt")),
                         doctest::Contains("crop"), ConfigError);
}
