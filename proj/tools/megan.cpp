// Command-line front end: synth | train | infer | eval | gradcheck.
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "megan/data.hpp"
#include "megan/gradcheck.hpp"
#include "megan/io.hpp"
#include "megan/metrics.hpp"
#include "megan/model.hpp"
#include "megan/train.hpp"

namespace fs = std::filesystem;
using namespace megan;

namespace {

Dtype storage_dtype() {
    const char* env = std::getenv("MEGAN_REFERENCE_PRECISION");
    if (!env || std::string(env) == "f64") return Dtype::f64;
    if (std::string(env) == "f32") return Dtype::f32;
    throw ConfigError("MEGAN_REFERENCE_PRECISION must be f64 or f32");
}

int cmd_synth(const std::string& out, int clips, int size, uint64_t seed, int objects) {
    synth_generate(out, seed, clips, size, objects);
    std::printf("wrote %d clips under %s\n", clips, out.c_str());
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_ckpt) {
    RunConfig cfg = parse_config_file(config_path);
    DatasetManifest data = load_manifest(data_dir);
    TrainResult res = train_loop(cfg, data, out_ckpt);
    std::printf("trained %lld iterations: loss %.6g -> %.6g\n",
                static_cast<long long>(res.iterations_run), res.initial_loss, res.final_loss);
    return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& in_dir,
              const std::string& out_dir, uint64_t seed, bool dump_tensors) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    const int in_frames = ck.config.in_frames();

    std::vector<Tensor> lr;
    for (int i = 1; i <= in_frames; ++i) {
        const std::string path = in_dir + "/lr_" + std::to_string(i) + ".png";
        if (!fs::exists(path)) throw ValueError("infer: missing input frame " + path);
        Tensor f = png_read(path);
        lr.push_back(f.reshaped({1, f.dim(0), f.dim(1), f.dim(2)}));
    }

    std::vector<Tensor> hr = megan_forward(lr, ck.params, ck.config, seed);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("infer: cannot create " + out_dir);
    const Dtype dtype = storage_dtype();

    // two-phase emission: stage everything under temp names, then rename,
    // so a failure never leaves a partial frame set behind
    std::vector<std::pair<std::string, std::string>> staged;
    auto cleanup = [&] {
        for (const auto& [tmp, final_path] : staged) {
            (void)final_path;
            std::error_code rm;
            fs::remove(tmp, rm);
        }
    };
    try {
        for (size_t t = 0; t < hr.size(); ++t) {
            Tensor frame = hr[t].reshaped({hr[t].dim(1), hr[t].dim(2), hr[t].dim(3)});
            // clamp to [0,1] at emission; png quantization does the same clamp
            for (double& v : frame.values()) v = std::min(1.0, std::max(0.0, v));
            const std::string base = out_dir + "/hr_" + std::to_string(t + 1);
            png_write(frame, base + ".png.staged");
            staged.emplace_back(base + ".png.staged", base + ".png");
            if (dump_tensors) {
                mgt_write(frame, base + ".mgt.staged", dtype);
                staged.emplace_back(base + ".mgt.staged", base + ".mgt");
            }
        }
        for (const auto& [tmp, final_path] : staged) fs::rename(tmp, final_path);
    } catch (...) {
        cleanup();
        throw;
    }
    std::printf("wrote %zu frames to %s\n", hr.size(), out_dir.c_str());
    return 0;
}

std::vector<std::string> png_names(const std::string& dir) {
    std::vector<std::string> names;
    if (!fs::is_directory(dir)) throw ValueError("eval: not a directory: " + dir);
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".png") names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
    if (names.empty()) throw ValueError("eval: no PNG files in " + dir);
    return names;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir) {
    std::vector<std::string> names = png_names(gt_dir);
    std::vector<Tensor> pred, gt;
    for (const std::string& name : names) {
        const std::string ppath = pred_dir + "/" + name;
        if (!fs::exists(ppath)) throw ValueError("eval: missing prediction " + ppath);
        pred.push_back(png_read(ppath));
        gt.push_back(png_read(gt_dir + "/" + name));
    }
    MetricReport report = evaluate_frames(pred, gt);
    std::fputs(format_eval_table(report).c_str(), stdout);
    return 0;
}

int cmd_gradcheck(const std::string& op_name, double tol, double step, int seeds) {
    // reference precision is always 64-bit here regardless of the env var
    std::vector<const RegisteredCheck*> to_run;
    if (op_name.empty()) {
        for (const RegisteredCheck& c : registered_checks()) to_run.push_back(&c);
    } else {
        const RegisteredCheck* c = find_check(op_name);
        if (!c) throw ValueError("gradcheck: unknown op " + op_name);
        to_run.push_back(c);
    }
    bool all_passed = true;
    for (const RegisteredCheck* c : to_run) {
        double worst = 0.0;
        bool passed = true;
        for (int s = 0; s < seeds; ++s) {
            GradReport r = c->run(0xC0FFEE + static_cast<uint64_t>(s) * 7919, step, tol);
            worst = std::max(worst, r.max_rel_error);
            passed = passed && r.passed;
            if (!op_name.empty()) {
                std::printf("  seed %d:\n", s);
                for (const auto& [name, err] : r.per_input_errors)
                    std::printf("    %-12s rel err %.3e\n", name.c_str(), err);
            }
        }
        std::printf("%-24s %s  max rel err %.3e (tol %.1e, %d seeds)\n", c->name.c_str(),
                    passed ? "PASS" : "FAIL", worst, tol, seeds);
        all_passed = all_passed && passed;
    }
    if (!all_passed) throw Error("gradcheck: at least one operation failed");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"memory-enhanced graph aggregation network for space-time video "
                 "super-resolution"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "generate a synthetic clip dataset");
    std::string synth_out;
    int synth_clips = 1, synth_size = 64, synth_objects = 3;
    uint64_t synth_seed = 0;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--clips", synth_clips, "number of clips")->required();
    synth->add_option("--size", synth_size, "HR frame size (divisible by 4)")->required();
    synth->add_option("--seed", synth_seed, "PRNG seed")->required();
    synth->add_option("--objects", synth_objects, "moving objects per clip");

    auto* train = app.add_subcommand("train", "train on a clip dataset");
    std::string train_config, train_data, train_out;
    train->add_option("--config", train_config, "key = value config file")->required();
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--out", train_out, "checkpoint output path")->required();

    auto* infer = app.add_subcommand("infer", "upsample LR frames with a checkpoint");
    std::string infer_ckpt, infer_in, infer_out;
    uint64_t infer_seed = 0;
    bool dump_tensors = false;
    infer->add_option("--ckpt", infer_ckpt, "checkpoint path")->required();
    infer->add_option("--in", infer_in, "directory with lr_<t>.png inputs")->required();
    infer->add_option("--out", infer_out, "output directory")->required();
    infer->add_option("--seed", infer_seed, "pool sampling seed");
    infer->add_flag("--dump-tensors", dump_tensors, "also write MGT1 tensors");

    auto* eval = app.add_subcommand("eval", "PSNR/SSIM between two frame directories");
    std::string eval_pred, eval_gt;
    eval->add_option("--pred", eval_pred, "prediction directory")->required();
    eval->add_option("--gt", eval_gt, "ground-truth directory")->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    std::string gc_op;
    double gc_tol = 1e-4, gc_step = 1e-5;
    int gc_seeds = 10;
    gradcheck->add_option("--op", gc_op, "single operation (default: all registered)");
    gradcheck->add_option("--tol", gc_tol, "relative error tolerance");
    gradcheck->add_option("--step", gc_step, "central difference step");
    gradcheck->add_option("--seeds", gc_seeds, "random seeds per operation");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_out, synth_clips, synth_size, synth_seed, synth_objects);
        if (train->parsed()) return cmd_train(train_config, train_data, train_out);
        if (infer->parsed()) return cmd_infer(infer_ckpt, infer_in, infer_out, infer_seed, dump_tensors);
        if (eval->parsed()) return cmd_eval(eval_pred, eval_gt);
        if (gradcheck->parsed()) return cmd_gradcheck(gc_op, gc_tol, gc_step, gc_seeds);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const ValueError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}
