#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "megan/metrics.hpp"
#include "megan/train.hpp"
#include "testutil.hpp"

using namespace megan;

TEST_CASE("psnr landmark values") {
    Tensor a = Tensor::full({3, 4, 4}, 0.5);
    CHECK(std::isinf(psnr(a, a)));

    Tensor b = Tensor::full({3, 4, 4}, 0.6);  // uniform error 0.1 -> 20 dB
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-9));

    Tensor c = Tensor::full({3, 4, 4}, 1.0);
    Tensor d = Tensor::full({3, 4, 4}, 0.0);
    CHECK(psnr(c, d) == doctest::Approx(0.0).epsilon(1e-12));

    CHECK_THROWS_AS(static_cast<void>(psnr(a, Tensor({3, 4, 5}))), ShapeError);
}

TEST_CASE("psnr strictly decreases as the error grows") {
    Tensor base = Tensor::full({3, 8, 8}, 0.2);
    double prev = std::numeric_limits<double>::infinity();
    for (double err = 0.05; err <= 0.65; err += 0.1) {
        Tensor noisy = Tensor::full({3, 8, 8}, 0.2 + err);
        const double p = psnr(base, noisy);
        CHECK(p < prev);
        prev = p;
    }
}

TEST_CASE("ssim of an image with itself is one") {
    Rng rng(1);
    Tensor a = testutil::rand_tensor({3, 12, 12}, rng, 0.0, 1.0);
    CHECK(std::fabs(ssim(a, a) - 1.0) < 1e-12);
}

TEST_CASE("ssim is symmetric bit-for-bit and flip invariant") {
    Rng rng(2);
    Tensor a = testutil::rand_tensor({3, 13, 16}, rng, 0.0, 1.0);
    Tensor b = testutil::rand_tensor({3, 13, 16}, rng, 0.0, 1.0);
    CHECK(ssim(a, b) == ssim(b, a));
    CHECK(ssim(flip_h(a), flip_h(b)) == doctest::Approx(ssim(a, b)).epsilon(1e-12));
}

TEST_CASE("two constant images match the direct stabilized formula") {
    Tensor a = Tensor::full({3, 12, 12}, 0.2);
    Tensor b = Tensor::full({3, 12, 12}, 0.8);
    // zero variance: contrast/structure terms collapse to 1, luminance term
    // evaluated directly
    const double c1 = 1e-4;
    const double want = (2.0 * 0.2 * 0.8 + c1) / (0.2 * 0.2 + 0.8 * 0.8 + c1);
    CHECK(ssim(a, b) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("ssim needs at least the window size") {
    Tensor small({3, 10, 12});
    CHECK_THROWS_WITH_AS(static_cast<void>(ssim(small, small)),
                         doctest::Contains("window"), ShapeError);
}

TEST_CASE("evaluation table formatting") {
    Tensor a = Tensor::full({3, 12, 12}, 0.5);
    Tensor b = Tensor::full({3, 12, 12}, 0.6);
    MetricReport r = evaluate_frames({a, a}, {a, b});
    const std::string table = format_eval_table(r);
    CHECK(table.find("1  inf  1.0000") == 0);
    CHECK(table.find("\n2  20.0000  ") != std::string::npos);
    CHECK(table.find("\nmean  inf  ") != std::string::npos);
}
