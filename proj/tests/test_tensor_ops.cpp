#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "segnet/ops.hpp"
#include "segnet/tape.hpp"
#include "segnet/tensor.hpp"
#include "testutil.hpp"

using namespace segnet;
using testutil::finite_diff_max_rel_err;
using testutil::random_tensor;

TEST_CASE("tensor basics and invariants") {
    Tensor<float> t(Shape{2, 3});
    CHECK(t.numel() == 6);
    CHECK_FALSE(t.has_grad());  // detached tensors never allocate grad

    Tape<float> tape;
    tape.watch(t);
    CHECK(t.has_grad());
    CHECK(t.grad_values() == std::vector<float>(6, 0.0f));

    CHECK_THROWS_AS(Tensor<float>(Shape{2, 2}, std::vector<float>{1.0f}), shape_error);
}

TEST_CASE("relu and sigmoid definitions") {
    Tensor<float> x(Shape{3}, {-1.0f, 0.0f, 2.0f});
    Tensor<float> y = ops::relu<float>(nullptr, x);
    CHECK(y.values() == std::vector<float>{0.0f, 0.0f, 2.0f});

    Tensor<float> z = ops::sigmoid<float>(nullptr, Tensor<float>(Shape{1}, {0.0f}));
    CHECK(z.data()[0] == doctest::Approx(0.5f));
}

TEST_CASE("broadcast multiply matches brute-force loop oracle") {
    Pcg32 rng(7, 1);
    Tensor<double> alpha = random_tensor<double>({2, 1, 4, 4}, rng);
    Tensor<double> x = random_tensor<double>({2, 8, 4, 4}, rng);
    Tensor<double> y = ops::mul<double>(nullptr, alpha, x);
    REQUIRE(y.shape() == Shape{2, 8, 4, 4});
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t c = 0; c < 8; ++c)
            for (int64_t h = 0; h < 4; ++h)
                for (int64_t w = 0; w < 4; ++w)
                    CHECK(y.at4(n, c, h, w) == doctest::Approx(alpha.at4(n, 0, h, w) * x.at4(n, c, h, w)));
}

TEST_CASE("broadcast multiply equals explicit-expansion multiply exactly") {
    Pcg32 rng(11, 1);
    Tensor<float> alpha = random_tensor<float>({2, 1, 3, 3}, rng);
    Tensor<float> x = random_tensor<float>({2, 4, 3, 3}, rng);
    Tensor<float> expanded(Shape{2, 4, 3, 3});
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t c = 0; c < 4; ++c)
            for (int64_t k = 0; k < 9; ++k)
                expanded.values()[static_cast<size_t>((n * 4 + c) * 9 + k)] =
                    alpha.values()[static_cast<size_t>(n * 9 + k)];
    Tensor<float> via_broadcast = ops::mul<float>(nullptr, alpha, x);
    Tensor<float> via_expansion = ops::mul<float>(nullptr, expanded, x);
    CHECK(via_broadcast.values() == via_expansion.values());
}

TEST_CASE("non-broadcastable shapes name both shapes") {
    Tensor<float> a(Shape{2, 3});
    Tensor<float> b(Shape{2, 4});
    try {
        ops::add<float>(nullptr, a, b);
        FAIL("expected shape_error");
    } catch (const shape_error& e) {
        std::string msg = e.what();
        CHECK(msg.find("(2,3)") != std::string::npos);
        CHECK(msg.find("(2,4)") != std::string::npos);
    }
}

TEST_CASE("backward: sum gives ones") {
    Tape<float> tape;
    Tensor<float> x(Shape{3}, {5.0f, -2.0f, 0.5f});
    tape.watch(x);
    Tensor<float> root = ops::sum(&tape, x);
    tape.backward(root);
    CHECK(x.grad_values() == std::vector<float>{1.0f, 1.0f, 1.0f});
}

TEST_CASE("backward: sum of x*x") {
    Tape<double> tape;
    Tensor<double> x(Shape{2}, {2.0, -1.0});
    tape.watch(x);
    Tensor<double> root = ops::sum(&tape, ops::mul(&tape, x, x));
    tape.backward(root);
    CHECK(x.grad()[0] == doctest::Approx(4.0));
    CHECK(x.grad()[1] == doctest::Approx(-2.0));
}

TEST_CASE("backward: diamond fan-out accumulates") {
    Tape<float> tape;
    Tensor<float> a(Shape{1}, {3.0f});
    tape.watch(a);
    Tensor<float> y = ops::add(&tape, a, a);
    tape.backward(y);
    CHECK(a.grad()[0] == doctest::Approx(2.0f));
    CHECK(tape.topology_ok());
}

TEST_CASE("backward: unreachable leaves keep zero grad") {
    Tape<float> tape;
    Tensor<float> a(Shape{1}, {1.0f});
    Tensor<float> b(Shape{1}, {2.0f});
    tape.watch(a);
    tape.watch(b);
    Tensor<float> ya = ops::sum(&tape, a);
    Tensor<float> yb = ops::sum(&tape, b);  // recorded but not reachable from ya
    tape.backward(ya);
    CHECK(a.grad()[0] == doctest::Approx(1.0f));
    CHECK(b.grad()[0] == 0.0f);
    (void)yb;
}

TEST_CASE("backward root errors") {
    Tape<float> tape;
    Tensor<float> x(Shape{2}, {1.0f, 2.0f});
    tape.watch(x);
    CHECK_THROWS_AS(tape.backward(x), shape_error);  // non-scalar

    Tensor<float> detached = Tensor<float>::scalar(1.0f);
    CHECK_THROWS_AS(tape.backward(detached), shape_error);  // never attached
}

TEST_CASE("matmul_1x1 identity and hand case") {
    // identity weight, zero bias -> output equals input
    Pcg32 rng(3, 1);
    Tensor<float> x = random_tensor<float>({2, 3, 4, 4}, rng);
    Tensor<float> w(Shape{3, 3});
    for (int i = 0; i < 3; ++i) w.values()[static_cast<size_t>(i * 3 + i)] = 1.0f;
    Tensor<float> b(Shape{3});
    Tensor<float> y = ops::matmul_1x1<float>(nullptr, x, w, &b);
    CHECK(y.values() == x.values());

    // C_in=2 -> C_out=1, W=[1,1]^T, pixel values (3,4) sum to 7
    Tensor<float> x2(Shape{1, 2, 1, 1}, {3.0f, 4.0f});
    Tensor<float> w2(Shape{2, 1}, {1.0f, 1.0f});
    Tensor<float> b2(Shape{1}, {0.0f});
    Tensor<float> y2 = ops::matmul_1x1<float>(nullptr, x2, w2, &b2);
    CHECK(y2.data()[0] == doctest::Approx(7.0f));

    Tensor<float> wbad(Shape{5, 1});
    CHECK_THROWS_AS(ops::matmul_1x1<float>(nullptr, x2, wbad, &b2), shape_error);
}

TEST_CASE("matmul_1x1 weight gradient matches finite differences") {
    Pcg32 rng(21, 1);
    Tensor<double> x = testutil::random_tensor<double>({1, 2, 2, 2}, rng);
    Tensor<double> w = testutil::random_tensor<double>({2, 3}, rng);
    Tensor<double> b = testutil::random_tensor<double>({3}, rng);
    double err = finite_diff_max_rel_err({&w, &b, &x}, [&](Tape<double>* tape) {
        Tensor<double> y = ops::matmul_1x1(tape, x, w, &b);
        return ops::sum(tape, y);
    });
    CHECK(err < 1e-5);
}

TEST_CASE("elementwise gradients match finite differences across 5 seeds") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Pcg32 rng(seed, 99);
        Tensor<double> a = random_tensor<double>({2, 2, 3, 3}, rng);
        Tensor<double> b = random_tensor<double>({2, 1, 3, 3}, rng);
        Tensor<double> proj = random_tensor<double>({2, 2, 3, 3}, rng);
        // keep relu inputs away from the kink
        for (auto& v : a.values())
            if (std::abs(v) < 5e-3) v += 0.01;

        double err_mul = finite_diff_max_rel_err({&a, &b}, [&](Tape<double>* t) {
            return testutil::project_to_scalar(t, ops::mul(t, a, b), proj);
        });
        CHECK(err_mul < 1e-5);

        double err_add = finite_diff_max_rel_err({&a, &b}, [&](Tape<double>* t) {
            return testutil::project_to_scalar(t, ops::add(t, a, b), proj);
        });
        CHECK(err_add < 1e-5);

        double err_relu = finite_diff_max_rel_err({&a}, [&](Tape<double>* t) {
            return testutil::project_to_scalar(t, ops::relu(t, a), proj);
        });
        CHECK(err_relu < 1e-5);

        double err_sig = finite_diff_max_rel_err({&a}, [&](Tape<double>* t) {
            return testutil::project_to_scalar(t, ops::sigmoid(t, a), proj);
        });
        CHECK(err_sig < 1e-5);
    }
}

TEST_CASE("backward is deterministic: same graph twice gives bit-identical grads") {
    auto run = [](std::vector<float>& grads_out) {
        Pcg32 rng(17, 4);
        Tensor<float> x = random_tensor<float>({2, 4, 4, 4}, rng);
        Tensor<float> w = random_tensor<float>({4, 2}, rng);
        Tape<float> tape;
        tape.watch(x);
        tape.watch(w);
        Tensor<float> y = ops::sigmoid(&tape, ops::matmul_1x1<float>(&tape, x, w));
        Tensor<float> root = ops::sum(&tape, y);
        tape.backward(root);
        grads_out = x.grad_values();
        auto wg = w.grad_values();
        grads_out.insert(grads_out.end(), wg.begin(), wg.end());
    };
    std::vector<float> g1, g2;
    run(g1);
    run(g2);
    CHECK(g1 == g2);
}
