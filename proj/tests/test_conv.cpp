#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "segnet/ops.hpp"
#include "testutil.hpp"

using namespace segnet;
using testutil::conv2d_bruteforce;
using testutil::random_tensor;
using testutil::zero_inflate_kernel;

TEST_CASE("conv2d 1x1 identity") {
    Pcg32 rng(2, 1);
    Tensor<float> x = random_tensor<float>({2, 1, 4, 4}, rng);
    Tensor<float> w = Tensor<float>::full({1, 1, 1, 1}, 1.0f);
    Tensor<float> b(Shape{1});
    Tensor<float> y = ops::conv2d<float>(nullptr, x, w, b, 1, 1, 0);
    CHECK(y.values() == x.values());
}

TEST_CASE("dilated row case: kernel [1,1] along width, r=2") {
    Tensor<float> x(Shape{1, 1, 1, 5}, {1, 2, 3, 4, 5});
    Tensor<float> w(Shape{1, 1, 1, 2}, {1, 1});
    Tensor<float> b(Shape{1});
    Tensor<float> y = ops::conv2d<float>(nullptr, x, w, b, 1, 2, 0);
    REQUIRE(y.shape() == Shape{1, 1, 1, 3});
    CHECK(y.values() == std::vector<float>{4, 6, 8});
}

TEST_CASE("r=1 equals brute-force direct summation exactly") {
    Pcg32 rng(5, 2);
    Tensor<double> x = random_tensor<double>({2, 3, 6, 6}, rng);
    Tensor<double> w = random_tensor<double>({4, 3, 3, 3}, rng);
    Tensor<double> b = random_tensor<double>({4}, rng);
    Tensor<double> y = ops::conv2d<double>(nullptr, x, w, b, 1, 1, 1);
    Tensor<double> ref = conv2d_bruteforce(x, w, b, 1, 1, 1);
    CHECK(testutil::max_rel_diff(y, ref) < 1e-12);
}

TEST_CASE("conv2d matches brute force over the (r,s,pad,K) grid") {
    Pcg32 rng(9, 3);
    for (int r : {1, 2, 3}) {
        for (int k : {1, 3, 5}) {
            for (int s : {1, 2}) {
                for (int pad : {0, 1, 2}) {
                    const int64_t h = 11, wdim = 9;
                    if (std::min(h, wdim) + 2 * pad - r * (k - 1) - 1 < 0) continue;
                    Tensor<double> x = random_tensor<double>({1, 2, h, wdim}, rng);
                    Tensor<double> w = random_tensor<double>({3, 2, k, k}, rng);
                    Tensor<double> b = random_tensor<double>({3}, rng);
                    CAPTURE(r);
                    CAPTURE(k);
                    CAPTURE(s);
                    CAPTURE(pad);
                    Tensor<double> y = ops::conv2d<double>(nullptr, x, w, b, s, r, pad);
                    Tensor<double> ref = conv2d_bruteforce(x, w, b, s, r, pad);
                    REQUIRE(y.shape() == ref.shape());
                    CHECK(testutil::max_rel_diff(y, ref) < 1e-6);
                }
            }
        }
    }
}

TEST_CASE("dilated conv equals standard conv on zero-inflated kernel") {
    Pcg32 rng(13, 4);
    for (int r : {2, 3}) {
        Tensor<float> x = random_tensor<float>({1, 2, 12, 12}, rng);
        Tensor<float> w = random_tensor<float>({2, 2, 3, 3}, rng);
        Tensor<float> b = random_tensor<float>({2}, rng);
        Tensor<float> winf = zero_inflate_kernel(w, r);
        Tensor<float> y_dil = ops::conv2d<float>(nullptr, x, w, b, 1, r, r);
        Tensor<float> y_inf = ops::conv2d<float>(nullptr, x, winf, b, 1, 1, r);
        REQUIRE(y_dil.shape() == y_inf.shape());
        CHECK(testutil::max_rel_diff(y_dil, y_inf) < 1e-6);
    }
}

TEST_CASE("conv2d gradients match finite differences, r=1 and r=2") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        for (int r : {1, 2}) {
            Pcg32 rng(seed, 50 + static_cast<uint64_t>(r));
            Tensor<double> x = random_tensor<double>({2, 2, 6, 6}, rng);
            Tensor<double> w = random_tensor<double>({3, 2, 3, 3}, rng);
            Tensor<double> b = random_tensor<double>({3}, rng);
            Tensor<double> proj = random_tensor<double>({2, 3, 6, 6}, rng);
            double err = testutil::finite_diff_max_rel_err({&x, &w, &b}, [&](Tape<double>* t) {
                return testutil::project_to_scalar(t, ops::conv2d(t, x, w, b, 1, r, r), proj);
            });
            CHECK(err < 1e-5);
        }
    }
}

TEST_CASE("conv2d error paths") {
    Tensor<float> x(Shape{1, 2, 4, 4});
    Tensor<float> w(Shape{1, 3, 3, 3});  // channel mismatch
    Tensor<float> b(Shape{1});
    CHECK_THROWS_AS(ops::conv2d<float>(nullptr, x, w, b, 1, 1, 1), shape_error);

    Tensor<float> w2(Shape{1, 2, 3, 3});
    // 4x4 input, 3x3 kernel at dilation 4 without padding has no valid position
    CHECK_THROWS_AS(ops::conv2d<float>(nullptr, x, w2, b, 1, 4, 0), shape_error);
}

TEST_CASE("maxpool2 window max and tie routing") {
    Tensor<float> x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor<float> y = ops::maxpool2<float>(nullptr, x);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.data()[0] == 4.0f);

    // constant input: gradient concentrates on the first element per window
    Tape<float> tape;
    Tensor<float> c = Tensor<float>::full({1, 1, 4, 4}, 2.5f);
    tape.watch(c);
    Tensor<float> p = ops::maxpool2(&tape, c);
    Tensor<float> root = ops::sum(&tape, p);
    tape.backward(root);
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 4; ++j) {
            const float g = c.grad()[i * 4 + j];
            if (i % 2 == 0 && j % 2 == 0)
                CHECK(g == 1.0f);
            else
                CHECK(g == 0.0f);
        }

    Tensor<float> odd(Shape{1, 1, 3, 4});
    CHECK_THROWS_AS(ops::maxpool2<float>(nullptr, odd), shape_error);
}

TEST_CASE("maxpool2 matches brute-force window max on random input") {
    Pcg32 rng(31, 6);
    Tensor<float> x = random_tensor<float>({2, 3, 4, 4}, rng);
    Tensor<float> y = ops::maxpool2<float>(nullptr, x);
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t i = 0; i < 2; ++i)
                for (int64_t j = 0; j < 2; ++j) {
                    float m = std::max(std::max(x.at4(n, c, 2 * i, 2 * j), x.at4(n, c, 2 * i, 2 * j + 1)),
                                       std::max(x.at4(n, c, 2 * i + 1, 2 * j), x.at4(n, c, 2 * i + 1, 2 * j + 1)));
                    CHECK(y.at4(n, c, i, j) == m);
                }
}

TEST_CASE("upsample2 nearest reproduces the 2x2 pattern") {
    Tensor<float> x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor<float> y = ops::upsample2<float>(nullptr, x, ops::Upsample::nearest);
    CHECK(y.values() == std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
}

TEST_CASE("upsample2 bilinear: constant preserved, oracle per pixel") {
    Tensor<float> c = Tensor<float>::full({1, 1, 3, 3}, 7.25f);
    Tensor<float> yc = ops::upsample2<float>(nullptr, c, ops::Upsample::bilinear);
    for (auto v : yc.values()) CHECK(v == doctest::Approx(7.25f));

    // independent per-pixel coordinate-mapping oracle for 2x2 -> 4x4
    Pcg32 rng(41, 7);
    Tensor<double> x = random_tensor<double>({1, 1, 2, 2}, rng);
    Tensor<double> y = ops::upsample2<double>(nullptr, x, ops::Upsample::bilinear);
    auto sample = [&](double i, double j) {
        auto map1 = [](double d, int64_t size) {
            double s = (d + 0.5) / 2.0 - 0.5;
            if (s < 0) s = 0;
            if (s > size - 1) s = static_cast<double>(size - 1);
            return s;
        };
        double si = map1(i, 2), sj = map1(j, 2);
        int64_t i0 = static_cast<int64_t>(si), j0 = static_cast<int64_t>(sj);
        int64_t i1 = std::min<int64_t>(i0 + 1, 1), j1 = std::min<int64_t>(j0 + 1, 1);
        double fi = si - i0, fj = sj - j0;
        return (1 - fi) * ((1 - fj) * x.at4(0, 0, i0, j0) + fj * x.at4(0, 0, i0, j1)) +
               fi * ((1 - fj) * x.at4(0, 0, i1, j0) + fj * x.at4(0, 0, i1, j1));
    };
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 4; ++j)
            CHECK(y.at4(0, 0, i, j) == doctest::Approx(sample(i, j)).epsilon(1e-12));
}

TEST_CASE("upsample2 bilinear gradient matches finite differences") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Pcg32 rng(seed, 77);
        Tensor<double> x = random_tensor<double>({1, 2, 3, 4}, rng);
        Tensor<double> proj = random_tensor<double>({1, 2, 6, 8}, rng);
        double err = testutil::finite_diff_max_rel_err({&x}, [&](Tape<double>* t) {
            return testutil::project_to_scalar(t, ops::upsample2(t, x, ops::Upsample::bilinear), proj);
        });
        CHECK(err < 1e-5);
    }
}

TEST_CASE("concat_channels layout and gradient split") {
    Tensor<float> a(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor<float> b(Shape{1, 2, 2, 2}, {5, 6, 7, 8, 9, 10, 11, 12});
    Tape<float> tape;
    tape.watch(a);
    tape.watch(b);
    Tensor<float> y = ops::concat_channels(&tape, {a, b});
    REQUIRE(y.shape() == Shape{1, 3, 2, 2});
    CHECK(y.values() == std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    Tensor<float> proj(Shape{1, 3, 2, 2});
    for (int64_t i = 0; i < 12; ++i) proj.values()[static_cast<size_t>(i)] = static_cast<float>(i);
    Tensor<float> root = ops::sum(&tape, ops::mul(&tape, y, proj));
    tape.backward(root);
    CHECK(a.grad_values() == std::vector<float>{0, 1, 2, 3});
    CHECK(b.grad_values() == std::vector<float>{4, 5, 6, 7, 8, 9, 10, 11});
}

TEST_CASE("avgpool_to means and divisibility error") {
    Tensor<float> x(Shape{1, 1, 4, 4});
    for (int64_t i = 0; i < 16; ++i) x.values()[static_cast<size_t>(i)] = static_cast<float>(i);
    Tensor<float> y = ops::avgpool_to<float>(nullptr, x, 2, 2);
    CHECK(y.values() == std::vector<float>{2.5f, 4.5f, 10.5f, 12.5f});

    Tensor<float> g = ops::avgpool_to<float>(nullptr, x, 1, 1);
    CHECK(g.data()[0] == doctest::Approx(7.5f));

    CHECK_THROWS_AS(ops::avgpool_to<float>(nullptr, x, 3, 3), shape_error);
}
