#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "megan/gradcheck.hpp"
#include "megan/ops.hpp"
#include "testutil.hpp"

using namespace megan;

TEST_CASE("conv2d constant-input sum") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor w = Tensor::full({1, 1, 2, 2}, 1.0);
    Tensor b({1});
    Tensor y = conv2d(x, w, b, ConvSpec{2, 2, 1, 0});
    CHECK(y.dims() == std::vector<int>{1, 1, 2, 2});
    for (size_t i = 0; i < y.size(); ++i) CHECK(y[i] == 4.0);
}

TEST_CASE("conv2d identity kernel is exact") {
    Rng rng(11);
    Tensor x = testutil::rand_tensor({2, 1, 4, 5}, rng);
    Tensor w({1, 1, 1, 1}, {1.0});
    Tensor b({1});
    Tensor y = conv2d(x, w, b, ConvSpec{1, 1, 1, 0});
    CHECK(testutil::bit_equal(y, x));
}

TEST_CASE("conv2d shape errors name the offending dimension") {
    Tensor x({1, 3, 4, 4});
    Tensor w({2, 2, 3, 3});
    Tensor b({2});
    CHECK_THROWS_WITH_AS(static_cast<void>(conv2d(x, w, b, conv3x3_pad1())),
                         doctest::Contains("in-channels"), ShapeError);
    Tensor w2({2, 3, 3, 3});
    Tensor b2({3});
    CHECK_THROWS_WITH_AS(static_cast<void>(conv2d(x, w2, b2, conv3x3_pad1())),
                         doctest::Contains("bias"), ShapeError);
    Tensor tiny({1, 3, 2, 2});
    Tensor w5({2, 3, 5, 5});
    CHECK_THROWS_AS(static_cast<void>(conv2d(tiny, w5, b, ConvSpec{5, 5, 1, 0})), ShapeError);
}

TEST_CASE("conv2d stride and padding output dims") {
    Tensor x({1, 1, 7, 9});
    Tensor w({1, 1, 3, 3});
    Tensor b({1});
    Tensor y = conv2d(x, w, b, ConvSpec{3, 3, 2, 1});
    CHECK(y.dims() == std::vector<int>{1, 1, 4, 5});
}

TEST_CASE("conv2d gradients match central differences") {
    const RegisteredCheck* c = find_check("conv2d");
    REQUIRE(c != nullptr);
    GradReport r = c->run(123, 1e-5, 1e-6);
    CHECK(r.passed);
}

TEST_CASE("activation point values") {
    Tensor x({4}, {-1.0, 2.0, 0.0, -3.0});
    Tensor y = leaky_relu(x, 0.1);
    CHECK(y[0] == doctest::Approx(-0.1));
    CHECK(y[1] == 2.0);
    CHECK(y[2] == 0.0);
    CHECK(y[3] == doctest::Approx(-0.3));
    CHECK_THROWS_AS(static_cast<void>(leaky_relu(x, 1.5)), ValueError);

    Tensor s = sigmoid(Tensor({1}, {0.0}));
    CHECK(s[0] == 0.5);
    Tensor t = tanh_op(Tensor({1}, {0.0}));
    CHECK(t[0] == 0.0);
}

TEST_CASE("leaky_relu away from the kink has tiny finite-difference error") {
    const RegisteredCheck* c = find_check("leaky_relu");
    REQUIRE(c != nullptr);
    GradReport r = c->run(55, 1e-5, 1e-8);
    CHECK(r.passed);
    CHECK(r.max_rel_error <= 1e-8);
}

TEST_CASE("softmax behaviors") {
    Tensor x({1, 2}, {0.0, 0.0});
    Tensor y = softmax(x, 1);
    CHECK(y[0] == doctest::Approx(0.5).epsilon(1e-14));

    Tensor x2({1, 2}, {std::log(2.0), 0.0});
    Tensor y2 = softmax(x2, 1);
    CHECK(y2[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(y2[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

    // large logits stay finite and match the shifted evaluation
    Tensor big({1, 2}, {1000.0, 999.0});
    Tensor shifted({1, 2}, {1.0, 0.0});
    Tensor yb = softmax(big, 1);
    Tensor ys = softmax(shifted, 1);
    CHECK(all_finite(yb));
    CHECK(testutil::max_abs_diff(yb, ys) < 1e-15);
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(17);
    Tensor x = testutil::rand_tensor({5, 9}, rng, -30.0, 30.0);
    Tensor y = softmax(x, 1);
    for (int r = 0; r < 5; ++r) {
        double s = 0.0;
        for (int c = 0; c < 9; ++c) {
            const double v = y.at(r, c);
            CHECK(v > 0.0);
            CHECK(v < 1.0);
            s += v;
        }
        CHECK(std::fabs(s - 1.0) < 1e-12);
    }
    CHECK_THROWS_AS(static_cast<void>(softmax(x, 2)), ShapeError);
}

TEST_CASE("bilinear sample point values") {
    // f laid out (row, col); px indexes columns
    Tensor f({1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
    double out[1];
    bilinear_sample(f, 0.5, 0.5, out);
    CHECK(out[0] == doctest::Approx(1.5));
    bilinear_sample(f, 1.0, 0.0, out);
    CHECK(out[0] == 1.0);  // exact grid value, bit exact

    Tensor g({1, 2, 2}, {4.0, 1.0, 2.0, 3.0});
    bilinear_sample(g, -0.5, 0.0, out);
    CHECK(out[0] == doctest::Approx(2.0));  // half weight on zero padding

    bilinear_sample(g, -3.0, 0.0, out);
    CHECK(out[0] == 0.0);  // fully outside
}

TEST_CASE("bilinear integer in-range sample is bit exact") {
    Rng rng(23);
    Tensor f = testutil::rand_tensor({3, 4, 5}, rng);
    double out[3];
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 5; ++x) {
            bilinear_sample(f, x, y, out);
            for (int c = 0; c < 3; ++c) CHECK(out[c] == f.at(c, y, x));
        }
}

TEST_CASE("bilinear coordinate gradients pass the checker") {
    const RegisteredCheck* c = find_check("bilinear_sample");
    REQUIRE(c != nullptr);
    for (uint64_t seed : {1u, 2u, 3u}) {
        GradReport r = c->run(seed, 1e-5, 1e-6);
        CHECK(r.passed);
    }
}

TEST_CASE("pixel shuffle defined layout") {
    Tensor x({1, 4, 1, 1}, {1.0, 2.0, 3.0, 4.0});
    Tensor y = pixel_shuffle(x, 2);
    CHECK(y.dims() == std::vector<int>{1, 1, 2, 2});
    CHECK(y[0] == 1.0);
    CHECK(y[1] == 2.0);
    CHECK(y[2] == 3.0);
    CHECK(y[3] == 4.0);
}

TEST_CASE("pixel shuffle shape contract and errors") {
    Tensor x({2, 12, 5, 7});
    Tensor y = pixel_shuffle(x, 2);
    CHECK(y.dims() == std::vector<int>{2, 3, 10, 14});
    Tensor bad({1, 6, 2, 2});
    CHECK_THROWS_WITH_AS(static_cast<void>(pixel_shuffle(bad, 2)),
                         doctest::Contains("divisible"), ShapeError);
}

TEST_CASE("pixel unshuffle of shuffle is the identity bit exactly") {
    Rng rng(31);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor x = testutil::rand_tensor({2, 8, 3, 4}, rng);
        CHECK(testutil::bit_equal(pixel_unshuffle(pixel_shuffle(x, 2), 2), x));
    }
}

TEST_CASE("grad_check flags a deliberately wrong backward") {
    CheckableOp op;
    op.name = "scaled_square";
    op.input_names = {"x"};
    op.forward = [](const std::vector<Tensor>& in) { return mul(in[0], in[0]); };
    op.grad_sum = [](const std::vector<Tensor>& in) {
        // wrong on purpose: twice the true gradient
        return std::vector<Tensor>{scale(in[0], 4.0)};
    };
    Rng rng(5);
    GradReport r = grad_check(op, {testutil::rand_tensor({3, 3}, rng, 0.5, 1.0)}, 1e-5, 1e-4);
    CHECK_FALSE(r.passed);
    CHECK(r.max_rel_error > 0.1);
}

TEST_CASE("grad_check reports non-finite gradients") {
    CheckableOp op;
    op.name = "inverse";
    op.input_names = {"x"};
    op.forward = [](const std::vector<Tensor>& in) {
        Tensor y = in[0];
        for (double& v : y.values()) v = 1.0 / v;
        return y;
    };
    op.grad_sum = [](const std::vector<Tensor>& in) {
        Tensor g = in[0];
        for (double& v : g.values()) v = -1.0 / (v * v);
        return std::vector<Tensor>{g};
    };
    Tensor x({2}, {1.0, 0.0});  // derivative blows up at 0
    GradReport r = grad_check(op, {x}, 1e-5, 1e-4);
    CHECK_FALSE(r.passed);
}
