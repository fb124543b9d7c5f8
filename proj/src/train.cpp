#include "megan/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace megan {

// ---- loss ---------------------------------------------------------------------

namespace {

void check_loss_shapes(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt,
                       double eps) {
    if (eps <= 0.0) throw ValueError("charbonnier: epsilon must be positive");
    if (pred.size() != gt.size() || pred.empty())
        throw ShapeError("charbonnier: " + std::to_string(pred.size()) + " predictions vs " +
                         std::to_string(gt.size()) + " references");
    for (size_t i = 0; i < pred.size(); ++i)
        require_same_shape(pred[i], gt[i], "charbonnier");
}

}  // namespace

double charbonnier_loss(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt,
                        double eps, LossReduction red) {
    check_loss_shapes(pred, gt, eps);
    if (red == LossReduction::global) {
        double acc = 0.0;
        for (size_t i = 0; i < pred.size(); ++i) {
            const double* pp = pred[i].data();
            const double* pg = gt[i].data();
            for (size_t k = 0; k < pred[i].size(); ++k) {
                const double d = pg[k] - pp[k];
                acc += d * d;
            }
        }
        return std::sqrt(acc + eps * eps);
    }
    double acc = 0.0;
    size_t count = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const double* pp = pred[i].data();
        const double* pg = gt[i].data();
        for (size_t k = 0; k < pred[i].size(); ++k) {
            const double d = pg[k] - pp[k];
            acc += std::sqrt(d * d + eps * eps);
        }
        count += pred[i].size();
    }
    return acc / static_cast<double>(count);
}

double charbonnier_loss_grad(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt,
                             double eps, LossReduction red, std::vector<Tensor>& dpred) {
    check_loss_shapes(pred, gt, eps);
    dpred.resize(pred.size());
    const double loss = charbonnier_loss(pred, gt, eps, red);
    if (red == LossReduction::global) {
        for (size_t i = 0; i < pred.size(); ++i) {
            dpred[i] = zeros_like(pred[i]);
            double* dd = dpred[i].data();
            const double* pp = pred[i].data();
            const double* pg = gt[i].data();
            for (size_t k = 0; k < pred[i].size(); ++k) dd[k] = (pp[k] - pg[k]) / loss;
        }
        return loss;
    }
    size_t count = 0;
    for (const Tensor& t : pred) count += t.size();
    for (size_t i = 0; i < pred.size(); ++i) {
        dpred[i] = zeros_like(pred[i]);
        double* dd = dpred[i].data();
        const double* pp = pred[i].data();
        const double* pg = gt[i].data();
        for (size_t k = 0; k < pred[i].size(); ++k) {
            const double d = pp[k] - pg[k];
            dd[k] = d / (std::sqrt(d * d + eps * eps) * static_cast<double>(count));
        }
    }
    return loss;
}

// ---- schedule -------------------------------------------------------------------

double cosine_lr(int64_t t, const LrSchedule& s) {
    if (t < 0) throw ValueError("cosine_lr: negative step");
    const double frac = static_cast<double>(std::min<int64_t>(t, s.period)) / s.period;
    // eta_min + 0.5 (eta_max - eta_min)(1 + cos), written as a convex
    // combination so both endpoints are hit exactly
    const double w = 0.5 * (1.0 + std::cos(M_PI * frac));
    return w * s.eta_max + (1.0 - w) * s.eta_min;
}

// ---- Adam ------------------------------------------------------------------------

AdamState AdamState::create(MeganParams& params) {
    AdamState st;
    params.for_each([&](const std::string&, Tensor& t) {
        st.m.push_back(zeros_like(t));
        st.v.push_back(zeros_like(t));
    });
    return st;
}

void adam_update(Tensor& p, const Tensor& g, Tensor& m, Tensor& v, int64_t t, double lr,
                 double beta1, double beta2, double eps) {
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    double* pp = p.data();
    const double* gp = g.data();
    double* mp = m.data();
    double* vp = v.data();
    for (size_t i = 0; i < p.size(); ++i) {
        mp[i] = beta1 * mp[i] + (1.0 - beta1) * gp[i];
        vp[i] = beta2 * vp[i] + (1.0 - beta2) * gp[i] * gp[i];
        const double mhat = mp[i] / bc1;
        const double vhat = vp[i] / bc2;
        pp[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

void adam_step(MeganParams& params, MeganParams& grads, AdamState& state, double lr) {
    std::vector<Tensor*> ps, gs;
    params.for_each([&](const std::string&, Tensor& t) { ps.push_back(&t); });
    grads.for_each([&](const std::string& n, Tensor& t) {
        if (!all_finite(t)) throw Error("adam: non-finite gradient for " + n);
        gs.push_back(&t);
    });
    if (ps.size() != gs.size() || ps.size() != state.m.size())
        throw ShapeError("adam: parameter/gradient/state size mismatch");
    ++state.t;
    for (size_t i = 0; i < ps.size(); ++i)
        adam_update(*ps[i], *gs[i], state.m[i], state.v[i], state.t, lr, state.beta1,
                    state.beta2, state.eps);
}

// ---- augmentation -------------------------------------------------------------------

Tensor rot90(const Tensor& frame) {
    const int c = frame.dim(0), h = frame.dim(1), w = frame.dim(2);
    Tensor out({c, w, h});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(ci, w - 1 - x, y) = frame.at(ci, y, x);
    return out;
}

Tensor flip_h(const Tensor& frame) {
    const int c = frame.dim(0), h = frame.dim(1), w = frame.dim(2);
    Tensor out({c, h, w});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(ci, y, w - 1 - x) = frame.at(ci, y, x);
    return out;
}

Tensor flip_v(const Tensor& frame) {
    const int c = frame.dim(0), h = frame.dim(1), w = frame.dim(2);
    Tensor out({c, h, w});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(ci, h - 1 - y, x) = frame.at(ci, y, x);
    return out;
}

VideoClip augment(const VideoClip& clip, uint64_t seed) {
    Rng rng(seed);
    const bool hflip = rng.coin();
    const bool vflip = rng.coin();
    const int rotations = rng.uniform_int(4);
    const bool reverse = rng.coin();

    auto apply = [&](const Tensor& f) {
        Tensor t = f;
        for (int r = 0; r < rotations; ++r) {
            if (t.dim(1) != t.dim(2))
                throw ShapeError("augment: rotation requested on non-square frames " +
                                 t.shape_str());
            t = rot90(t);
        }
        if (hflip) t = flip_h(t);
        if (vflip) t = flip_v(t);
        return t;
    };

    VideoClip out;
    out.clip_id = clip.clip_id;
    out.hr_frames.reserve(clip.hr_frames.size());
    out.lr_frames.reserve(clip.lr_frames.size());
    for (const Tensor& f : clip.hr_frames) out.hr_frames.push_back(apply(f));
    for (const Tensor& f : clip.lr_frames) out.lr_frames.push_back(apply(f));
    if (reverse) {
        std::reverse(out.hr_frames.begin(), out.hr_frames.end());
        std::reverse(out.lr_frames.begin(), out.lr_frames.end());
    }
    return out;
}

// ---- config parsing -------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: bad boolean for " + key + ": " + v);
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " is not key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty() || val.empty())
            throw ConfigError("config: line " + std::to_string(lineno) + " is not key = value");
        if (!kv.emplace(key, val).second) throw ConfigError("config: duplicate key " + key);
    }

    RunConfig cfg;
    auto take = [&](const char* key) -> std::string {
        auto it = kv.find(key);
        if (it == kv.end()) return "";
        std::string v = it->second;
        kv.erase(it);
        return v;
    };
    auto take_int = [&](const char* key, int def) {
        const std::string v = take(key);
        return v.empty() ? def : std::stoi(v);
    };
    auto take_double = [&](const char* key, double def) {
        const std::string v = take(key);
        return v.empty() ? def : std::stod(v);
    };
    auto take_bool = [&](const char* key, bool def) {
        const std::string v = take(key);
        return v.empty() ? def : parse_bool(key, v);
    };

    cfg.model.channels = take_int("channels", cfg.model.channels);
    cfg.model.m1 = take_int("m1", cfg.model.m1);
    cfg.model.m2 = take_int("m2", cfg.model.m2);
    cfg.model.m3 = take_int("m3", cfg.model.m3);
    cfg.model.tau = take_int("tau", cfg.model.tau);
    cfg.model.k_layers = take_int("K", cfg.model.k_layers);
    cfg.model.n_pairs = take_int("n", cfg.model.n_pairs);
    cfg.model.nonlocal_enabled = take_bool("nonlocal", cfg.model.nonlocal_enabled);
    cfg.model.lmga_enabled = take_bool("lmga", cfg.model.lmga_enabled);
    cfg.model.modulated = take_bool("modulated", cfg.model.modulated);
    {
        const std::string v = take("nonlocal_norm");
        if (!v.empty()) {
            if (v == "softmax") cfg.model.nonlocal_norm = NonLocalNorm::softmax;
            else if (v == "sum") cfg.model.nonlocal_norm = NonLocalNorm::sum;
            else throw ConfigError("config: nonlocal_norm must be softmax or sum");
        }
    }
    {
        const std::string v = take("gcn_message");
        if (!v.empty()) {
            if (v == "neighbor") cfg.model.gcn_message = GcnMessage::neighbor;
            else if (v == "self") cfg.model.gcn_message = GcnMessage::self;
            else throw ConfigError("config: gcn_message must be neighbor or self");
        }
    }

    {
        const std::string v = take("iterations");
        if (v.empty()) throw ConfigError("config: missing required key iterations");
        cfg.train.iterations = std::stoll(v);
    }
    {
        const std::string v = take("seed");
        if (v.empty()) throw ConfigError("config: missing required key seed");
        cfg.train.seed = std::stoull(v);
    }
    cfg.train.batch_size = take_int("batch_size", cfg.train.batch_size);
    cfg.train.crop = take_int("crop", cfg.train.crop);
    cfg.train.epsilon = take_double("epsilon", cfg.train.epsilon);
    {
        const std::string v = take("reduction");
        if (!v.empty()) {
            if (v == "global") cfg.train.reduction = LossReduction::global;
            else if (v == "elementwise") cfg.train.reduction = LossReduction::elementwise;
            else throw ConfigError("config: reduction must be global or elementwise");
        }
    }
    cfg.train.schedule.eta_max = take_double("lr_max", cfg.train.schedule.eta_max);
    cfg.train.schedule.eta_min = take_double("lr_min", cfg.train.schedule.eta_min);
    cfg.train.schedule.period = take_int("lr_period", cfg.train.schedule.period);
    cfg.train.checkpoint_every = take_int("checkpoint_every", 0);
    cfg.train.enable_augment = take_bool("augment", cfg.train.enable_augment);
    cfg.train.resume = take("resume");

    if (!kv.empty()) throw ConfigError("config: unknown key " + kv.begin()->first);
    if (cfg.train.iterations < 1) throw ConfigError("config: iterations must be >= 1");
    if (cfg.train.batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
    cfg.model.validate();
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

// ---- training loop ----------------------------------------------------------------------

namespace {

Tensor crop_chw(const Tensor& f, int y0, int x0, int ch, int cw) {
    Tensor out({f.dim(0), ch, cw});
    for (int c = 0; c < f.dim(0); ++c)
        for (int y = 0; y < ch; ++y)
            for (int x = 0; x < cw; ++x) out.at(c, y, x) = f.at(c, y0 + y, x0 + x);
    return out;
}

Tensor lift(const Tensor& chw) {
    return chw.reshaped({1, chw.dim(0), chw.dim(1), chw.dim(2)});
}

}  // namespace

TrainResult train_loop(const RunConfig& cfg, const DatasetManifest& data,
                       const std::string& out_ckpt) {
    cfg.model.validate();
    if (data.clip_ids.empty()) throw ValueError("train: empty dataset");

    std::vector<VideoClip> clips;
    clips.reserve(data.clip_ids.size());
    for (size_t i = 0; i < data.clip_ids.size(); ++i) clips.push_back(load_clip(data, i));

    const int lr_h = clips[0].lr_frames[0].dim(1);
    const int lr_w = clips[0].lr_frames[0].dim(2);
    const int crop = std::min(cfg.train.crop, std::min(lr_h, lr_w));
    if (cfg.train.crop > std::min(lr_h, lr_w))
        throw ConfigError("train: crop " + std::to_string(cfg.train.crop) +
                          " exceeds LR frame size " + std::to_string(std::min(lr_h, lr_w)));

    MeganParams params = MeganParams::create(cfg.model);
    AdamState opt = AdamState::create(params);
    int64_t start_iter = 0;

    bool resumed = false;
    if (!cfg.train.resume.empty()) {
        Checkpoint ck = load_checkpoint(cfg.train.resume);
        const Tensor want = encode_config(cfg.model);
        const Tensor got = encode_config(ck.config);
        for (size_t i = 0; i < want.size(); ++i)
            if (want[i] != got[i])
                throw ConfigError("train: resume checkpoint was built for a different config");
        params = std::move(ck.params);
        size_t mi = 0, vi = 0;
        for (const auto& [name, t] : ck.extra) {
            if (name == "__opt__.t") opt.t = static_cast<int64_t>(t[0]);
            else if (name == "__meta__.iteration") start_iter = static_cast<int64_t>(t[0]);
            else if (name.rfind("__opt__.m.", 0) == 0 && mi < opt.m.size()) opt.m[mi++] = t;
            else if (name.rfind("__opt__.v.", 0) == 0 && vi < opt.v.size()) opt.v[vi++] = t;
        }
        if (mi != opt.m.size() || vi != opt.v.size())
            throw IoError("train: resume checkpoint is missing optimizer state");
        resumed = true;
    } else {
        params = MeganParams::init(cfg.model, Rng::derive(cfg.train.seed, kStreamInit, 0));
    }

    auto write_ckpt = [&](int64_t iter) {
        std::vector<std::pair<std::string, Tensor>> extra;
        extra.emplace_back("__meta__.iteration", Tensor::scalar(static_cast<double>(iter)));
        extra.emplace_back("__opt__.t", Tensor::scalar(static_cast<double>(opt.t)));
        size_t k = 0;
        params.for_each([&](const std::string& n, Tensor&) {
            extra.emplace_back("__opt__.m." + n, opt.m[k]);
            extra.emplace_back("__opt__.v." + n, opt.v[k]);
            ++k;
        });
        save_checkpoint(out_ckpt, cfg.model, params, extra);
    };

    const std::string trace_path = out_ckpt + ".trace.csv";
    std::ofstream trace;
    if (resumed && std::filesystem::exists(trace_path)) {
        trace.open(trace_path, std::ios::app);
    } else {
        trace.open(trace_path, std::ios::trunc);
        trace << "iteration,loss,lr\n";
    }
    if (!trace) throw IoError("train: cannot open " + trace_path);

    TrainResult result;
    const int batch = cfg.train.batch_size;

    for (int64_t it = start_iter; it < start_iter + cfg.train.iterations; ++it) {
        const double lr = cosine_lr(it, cfg.train.schedule);

        MeganParams grads = MeganParams::create(cfg.model);
        std::vector<std::vector<Tensor>> preds(static_cast<size_t>(batch));
        std::vector<std::vector<Tensor>> gts(static_cast<size_t>(batch));
        std::vector<MeganCtx> ctxs(static_cast<size_t>(batch));

        for (int s = 0; s < batch; ++s) {
            const uint64_t sample = static_cast<uint64_t>(it) * static_cast<uint64_t>(batch) +
                                    static_cast<uint64_t>(s);
            const size_t ci = static_cast<size_t>(
                Rng::derive(cfg.train.seed, kStreamClip, sample) % clips.size());
            VideoClip clip = clips[ci];
            if (cfg.train.enable_augment)
                clip = augment(clip, Rng::derive(cfg.train.seed, kStreamAugment, sample));

            Rng crng(Rng::derive(cfg.train.seed, kStreamCrop, sample));
            const int ah = clip.lr_frames[0].dim(1), aw = clip.lr_frames[0].dim(2);
            const int oy = crng.uniform_int(ah - crop + 1);
            const int ox = crng.uniform_int(aw - crop + 1);

            std::vector<Tensor> lr_in;
            for (const Tensor& f : clip.lr_frames)
                lr_in.push_back(lift(crop_chw(f, oy, ox, crop, crop)));
            for (const Tensor& f : clip.hr_frames)
                gts[static_cast<size_t>(s)].push_back(
                    lift(crop_chw(f, 4 * oy, 4 * ox, 4 * crop, 4 * crop)));

            preds[static_cast<size_t>(s)] =
                megan_forward(lr_in, params, cfg.model,
                              Rng::derive(cfg.train.seed, kStreamPool, sample),
                              &ctxs[static_cast<size_t>(s)]);
        }

        // the loss couples the whole batch, so gradients come after all samples
        std::vector<Tensor> flat_pred, flat_gt;
        for (int s = 0; s < batch; ++s) {
            for (const Tensor& t : preds[static_cast<size_t>(s)]) flat_pred.push_back(t);
            for (const Tensor& t : gts[static_cast<size_t>(s)]) flat_gt.push_back(t);
        }
        std::vector<Tensor> dflat;
        const double loss = charbonnier_loss_grad(flat_pred, flat_gt, cfg.train.epsilon,
                                                  cfg.train.reduction, dflat);
        if (!std::isfinite(loss))
            throw Error("train: non-finite loss at iteration " + std::to_string(it) +
                        "; last checkpoint kept");

        size_t cursor = 0;
        for (int s = 0; s < batch; ++s) {
            std::vector<Tensor> dpred(preds[static_cast<size_t>(s)].size());
            for (size_t f = 0; f < dpred.size(); ++f) dpred[f] = dflat[cursor++];
            megan_backward(dpred, ctxs[static_cast<size_t>(s)], params, cfg.model, grads);
        }

        adam_step(params, grads, opt, lr);

        char row[96];
        std::snprintf(row, sizeof row, "%lld,%.17g,%.17g\n", static_cast<long long>(it), loss,
                      lr);
        trace << row;

        if (it == start_iter) result.initial_loss = loss;
        result.final_loss = loss;
        ++result.iterations_run;

        if (cfg.train.checkpoint_every > 0 && (it + 1) % cfg.train.checkpoint_every == 0 &&
            it + 1 < start_iter + cfg.train.iterations)
            write_ckpt(it + 1);
    }

    trace.flush();
    write_ckpt(start_iter + cfg.train.iterations);
    return result;
}

}  // namespace megan
