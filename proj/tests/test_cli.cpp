#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "megan/data.hpp"
#include "megan/io.hpp"
#include "testutil.hpp"

// End-to-end checks of the command-line surface: every invocation goes
// through the real binary (path in MEGAN_BIN).

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr
};

RunResult run_cli(const std::string& args) {
    const char* bin = std::getenv("MEGAN_BIN");
    REQUIRE_MESSAGE(bin != nullptr, "MEGAN_BIN must point at the CLI binary");
    static int counter = 0;
    const std::string capture =
        (fs::temp_directory_path() / ("megan_cli_out_" + std::to_string(::getpid()) + "_" +
                                      std::to_string(counter++)))
            .string();
    const std::string cmd = std::string(bin) + " " + args + " > " + capture + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(capture);
    std::stringstream ss;
    ss << in.rdbuf();
    r.output = ss.str();
    fs::remove(capture);
    return r;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
}

const char* kTinyConfig =
    "iterations = 3\n"
    "seed = 7\n"
    "channels = 4\n"
    "m1 = 1\n"
    "m2 = 1\n"
    "m3 = 1\n"
    "tau = 1\n"
    "K = 1\n"
    "batch_size = 1\n"
    "crop = 8\n";

}  // namespace

TEST_CASE("synth writes the documented tree and is byte-deterministic") {
    testutil::TempDir tmp("clisynth");
    RunResult r = run_cli("synth --out " + tmp.path() + "/d --clips 2 --size 64 --seed 7");
    CHECK(r.exit_code == 0);
    for (int c = 0; c < 2; ++c) {
        const std::string dir = tmp.path() + "/d/clip/clip_000" + std::to_string(c);
        for (int t = 1; t <= 7; ++t) CHECK(fs::exists(dir + "/hr_" + std::to_string(t) + ".png"));
        for (int t = 1; t <= 4; ++t) CHECK(fs::exists(dir + "/lr_" + std::to_string(t) + ".png"));
    }
    CHECK(slurp(tmp.path() + "/d/manifest.txt") == "clip_0000\nclip_0001\n");

    RunResult r2 = run_cli("synth --out " + tmp.path() + "/e --clips 2 --size 64 --seed 7");
    CHECK(r2.exit_code == 0);
    for (const auto& e : fs::recursive_directory_iterator(tmp.path() + "/d")) {
        if (!e.is_regular_file()) continue;
        const std::string rel = fs::relative(e.path(), tmp.path() + "/d").string();
        CHECK(slurp(e.path().string()) == slurp(tmp.path() + "/e/" + rel));
    }
}

TEST_CASE("synth rejects sizes not divisible by 4 with exit 1") {
    testutil::TempDir tmp("clisize");
    RunResult r = run_cli("synth --out " + tmp.path() + "/d --clips 1 --size 63 --seed 1");
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("divisible") != std::string::npos);
}

TEST_CASE("unknown flags are rejected with usage text") {
    testutil::TempDir tmp("cliflag");
    RunResult r = run_cli("synth --out " + tmp.path() + " --clips 1 --size 64 --seed 1 --bogus 3");
    CHECK(r.exit_code == 1);
}

TEST_CASE("train reports missing config keys by name with exit 1") {
    testutil::TempDir tmp("clicfg");
    run_cli("synth --out " + tmp.path() + "/d --clips 1 --size 32 --seed 3");
    write_text(tmp.path() + "/broken.cfg", "seed = 1\n");
    RunResult r = run_cli("train --config " + tmp.path() + "/broken.cfg --data " + tmp.path() +
                          "/d --out " + tmp.path() + "/m.ckpt");
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("iterations") != std::string::npos);
}

TEST_CASE("train writes checkpoint plus trace; identical flags give identical bytes") {
    testutil::TempDir tmp("clitrain");
    REQUIRE(run_cli("synth --out " + tmp.path() + "/d --clips 1 --size 32 --seed 3").exit_code == 0);
    write_text(tmp.path() + "/run.cfg", kTinyConfig);

    RunResult r1 = run_cli("train --config " + tmp.path() + "/run.cfg --data " + tmp.path() +
                           "/d --out " + tmp.path() + "/a.ckpt");
    CHECK(r1.exit_code == 0);
    CHECK(fs::exists(tmp.path() + "/a.ckpt"));
    CHECK(fs::exists(tmp.path() + "/a.ckpt.trace.csv"));

    RunResult r2 = run_cli("train --config " + tmp.path() + "/run.cfg --data " + tmp.path() +
                           "/d --out " + tmp.path() + "/b.ckpt");
    CHECK(r2.exit_code == 0);
    CHECK(slurp(tmp.path() + "/a.ckpt") == slurp(tmp.path() + "/b.ckpt"));
    CHECK(slurp(tmp.path() + "/a.ckpt.trace.csv") == slurp(tmp.path() + "/b.ckpt.trace.csv"));
}

TEST_CASE("resume continues the iteration counter contiguously") {
    testutil::TempDir tmp("cliresume");
    REQUIRE(run_cli("synth --out " + tmp.path() + "/d --clips 1 --size 32 --seed 4").exit_code == 0);

    write_text(tmp.path() + "/full.cfg",
               "iterations = 6\nseed = 7\nchannels = 4\nm1 = 1\nm2 = 1\nm3 = 1\ntau = 1\n"
               "K = 1\nbatch_size = 1\ncrop = 8\n");
    write_text(tmp.path() + "/half.cfg",
               "iterations = 3\nseed = 7\nchannels = 4\nm1 = 1\nm2 = 1\nm3 = 1\ntau = 1\n"
               "K = 1\nbatch_size = 1\ncrop = 8\n");
    write_text(tmp.path() + "/half2.cfg",
               "iterations = 3\nseed = 7\nchannels = 4\nm1 = 1\nm2 = 1\nm3 = 1\ntau = 1\n"
               "K = 1\nbatch_size = 1\ncrop = 8\nresume = " + tmp.path() + "/part.ckpt\n");

    REQUIRE(run_cli("train --config " + tmp.path() + "/full.cfg --data " + tmp.path() +
                    "/d --out " + tmp.path() + "/full.ckpt").exit_code == 0);
    REQUIRE(run_cli("train --config " + tmp.path() + "/half.cfg --data " + tmp.path() +
                    "/d --out " + tmp.path() + "/part.ckpt").exit_code == 0);
    REQUIRE(run_cli("train --config " + tmp.path() + "/half2.cfg --data " + tmp.path() +
                    "/d --out " + tmp.path() + "/part.ckpt").exit_code == 0);

    CHECK(slurp(tmp.path() + "/part.ckpt.trace.csv") == slurp(tmp.path() + "/full.ckpt.trace.csv"));
    CHECK(slurp(tmp.path() + "/part.ckpt") == slurp(tmp.path() + "/full.ckpt"));
}

TEST_CASE("infer upsamples lr_1..4 into hr_1..7 at x4 size") {
    testutil::TempDir tmp("cliinfer");
    REQUIRE(run_cli("synth --out " + tmp.path() + "/d --clips 1 --size 64 --seed 5").exit_code == 0);
    write_text(tmp.path() + "/run.cfg", kTinyConfig);
    REQUIRE(run_cli("train --config " + tmp.path() + "/run.cfg --data " + tmp.path() +
                    "/d --out " + tmp.path() + "/m.ckpt").exit_code == 0);

    RunResult r = run_cli("infer --ckpt " + tmp.path() + "/m.ckpt --in " + tmp.path() +
                          "/d/clip/clip_0000 --out " + tmp.path() + "/pred --dump-tensors");
    CHECK(r.exit_code == 0);
    for (int t = 1; t <= 7; ++t) {
        const std::string base = tmp.path() + "/pred/hr_" + std::to_string(t);
        REQUIRE(fs::exists(base + ".png"));
        megan::Tensor img = megan::png_read(base + ".png");
        CHECK(img.dims() == std::vector<int>{3, 64, 64});
        REQUIRE(fs::exists(base + ".mgt"));
        megan::Tensor raw = megan::mgt_read(base + ".mgt");
        CHECK(raw.dims() == std::vector<int>{3, 64, 64});
    }
}

TEST_CASE("corrupt checkpoints exit 2 and leave no partial outputs") {
    testutil::TempDir tmp("clicorrupt");
    REQUIRE(run_cli("synth --out " + tmp.path() + "/d --clips 1 --size 32 --seed 6").exit_code == 0);
    write_text(tmp.path() + "/bad.ckpt", "not a checkpoint at all");
    RunResult r = run_cli("infer --ckpt " + tmp.path() + "/bad.ckpt --in " + tmp.path() +
                          "/d/clip/clip_0000 --out " + tmp.path() + "/pred");
    CHECK(r.exit_code == 2);
    CHECK_FALSE(fs::exists(tmp.path() + "/pred/hr_1.png"));
}

TEST_CASE("eval of a directory against itself prints inf and 1.0000 rows") {
    testutil::TempDir tmp("clieval");
    // size 64 keeps even the LR frames at 16x16, inside the SSIM window
    REQUIRE(run_cli("synth --out " + tmp.path() + "/d --clips 1 --size 64 --seed 8").exit_code == 0);
    const std::string dir = tmp.path() + "/d/clip/clip_0000";
    RunResult r = run_cli("eval --pred " + dir + " --gt " + dir);
    CHECK(r.exit_code == 0);
    std::istringstream lines(r.output);
    std::string line;
    int rows = 0;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        CHECK(line.find("inf") != std::string::npos);
        CHECK(line.find("1.0000") != std::string::npos);
        ++rows;
    }
    CHECK(rows == 12);  // 11 frames + mean
}

TEST_CASE("gradcheck single op prints a report with the max error") {
    RunResult r = run_cli("gradcheck --op deform_conv2d --tol 1e-4 --seeds 2");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("deform_conv2d") != std::string::npos);
    CHECK(r.output.find("PASS") != std::string::npos);
    CHECK(r.output.find("max rel err") != std::string::npos);
    CHECK(r.output.find("offsets") != std::string::npos);  // per-input detail

    RunResult bad = run_cli("gradcheck --op no_such_op");
    CHECK(bad.exit_code == 1);
}
