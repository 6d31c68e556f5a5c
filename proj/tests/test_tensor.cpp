#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "physmv/gradcheck.hpp"
#include "physmv/rng.hpp"
#include "physmv/tensor.hpp"
#include "physmv/tensor_io.hpp"

using namespace physmv;

namespace {

using T64 = Tensor<double>;
using T32 = Tensor<float>;

T64 random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    T64 t(shape);
    for (auto& v : t.values()) v = rng.normal() * scale;
    return t;
}

// Independent dense matmul oracle: plain triple loop, no shared code path.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t kk = 0; kk < k; ++kk) out[i * n + j] += a[i * k + kk] * b[kk * n + j];
    return out;
}

}  // namespace

TEST_CASE("elementwise basics") {
    T64 a(Shape{2}, {1, 2});
    T64 b(Shape{2}, {3, 4});
    auto sum = elementwise(EwKind::add, a, b);
    CHECK(sum.values()[0] == 4.0);
    CHECK(sum.values()[1] == 6.0);

    auto e = elementwise(EwKind::exp, T64(Shape{1}, {0.0}));
    CHECK(e.item() == 1.0);

    auto s = elementwise(EwKind::sigmoid, T64(Shape{1}, {0.0}));
    CHECK(s.item() == 0.5);
}

TEST_CASE("elementwise domain errors") {
    T64 a(Shape{2}, {1, 2});
    CHECK_THROWS_AS(div(a, T64(Shape{2}, {1, 0})), DomainError);
    CHECK_THROWS_AS(log(T64(Shape{2}, {1, -1})), DomainError);
    CHECK_THROWS_AS(log(T64(Shape{1}, {0.0})), DomainError);
    CHECK_THROWS_AS(add(a, T64(Shape{3}, {1, 2, 3})), ShapeError);
    // Overflowing exp must not complete silently with inf.
    CHECK_THROWS_AS(exp(T64(Shape{1}, {1e4})), DomainError);
}

TEST_CASE("broadcasting follows trailing alignment") {
    T64 a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    T64 row(Shape{3}, {10, 20, 30});
    auto r = add(a, row);
    CHECK(r.at({1, 2}) == 36.0);

    T64 col(Shape{2, 1}, {100, 200});
    auto c = add(a, col);
    CHECK(c.at({0, 2}) == 103.0);
    CHECK(c.at({1, 0}) == 204.0);

    CHECK_THROWS_AS(add(a, T64(Shape{2}, {1, 2})), ShapeError);
}

TEST_CASE("matmul identity and orthogonal rows") {
    T64 eye(Shape{2, 2}, {1, 0, 0, 1});
    T64 m(Shape{2, 2}, {1, 2, 3, 4});
    auto r = matmul(eye, m);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r.values()[i] == m.values()[i]);

    T64 row(Shape{1, 2}, {1, 0});
    T64 colv(Shape{2, 1}, {0, 1});
    CHECK(matmul(row, colv).item() == 0.0);

    CHECK_THROWS_AS(matmul(T64(Shape{2, 3}), T64(Shape{2, 2})), ShapeError);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Rng rng(42);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    auto got = matmul(a, b);
    auto want = matmul_oracle({a.values().begin(), a.values().end()},
                              {b.values().begin(), b.values().end()}, 3, 4, 2);
    for (std::size_t i = 0; i < want.size(); ++i)
        CHECK_THAT(got.values()[i], Catch::Matchers::WithinAbs(want[i], 1e-12));
}

TEST_CASE("batched matmul broadcasts leading dimensions") {
    Rng rng(7);
    auto a = random_tensor({2, 3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    auto got = matmul(a, b);
    REQUIRE(got.shape() == Shape{2, 3, 2});
    for (std::size_t batch = 0; batch < 2; ++batch) {
        std::vector<double> amat(a.values().begin() + batch * 12,
                                 a.values().begin() + (batch + 1) * 12);
        auto want = matmul_oracle(amat, {b.values().begin(), b.values().end()}, 3, 4, 2);
        for (std::size_t i = 0; i < want.size(); ++i)
            CHECK_THAT(got.values()[batch * 6 + i], Catch::Matchers::WithinAbs(want[i], 1e-12));
    }
}

TEST_CASE("softmax examples") {
    auto sym = softmax_lastdim(T64(Shape{3}, {0, 0, 0}));
    for (double v : sym.values()) CHECK_THAT(v, Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-15));

    auto big = softmax_lastdim(T64(Shape{2}, {1000, 0}));
    CHECK_THAT(big.values()[0], Catch::Matchers::WithinAbs(1.0, 1e-12));
    CHECK_THAT(big.values()[1], Catch::Matchers::WithinAbs(0.0, 1e-12));

    // Frozen from direct evaluation of exp(x_i)/sum exp at high precision.
    auto v = softmax_lastdim(T64(Shape{3}, {1, 2, 3}));
    CHECK_THAT(v.values()[0], Catch::Matchers::WithinAbs(0.09003057317038046, 1e-10));
    CHECK_THAT(v.values()[1], Catch::Matchers::WithinAbs(0.24472847105479767, 1e-10));
    CHECK_THAT(v.values()[2], Catch::Matchers::WithinAbs(0.66524095577482183, 1e-10));
}

TEST_CASE("softmax rows sum to one and lie in [0,1]") {
    Rng rng(123);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = random_tensor({4, 7}, rng, 5.0);
        auto y = softmax_lastdim(x);
        for (std::size_t r = 0; r < 4; ++r) {
            double sum = 0;
            for (std::size_t c = 0; c < 7; ++c) {
                const double v = y.at({r, c});
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
                sum += v;
            }
            CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-6));
        }
    }
}

TEST_CASE("concat and split round trips are bit-exact") {
    Rng rng(5);
    auto a = random_tensor({2, 3, 4}, rng);
    auto b = random_tensor({2, 5, 4}, rng);
    auto joined = concat(a, b, 1);
    REQUIRE(joined.shape() == Shape{2, 8, 4});

    auto back_a = slice(joined, 1, 0, 3);
    auto back_b = slice(joined, 1, 3, 5);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(back_a.values()[i] == a.values()[i]);
    for (std::size_t i = 0; i < b.numel(); ++i) CHECK(back_b.values()[i] == b.values()[i]);

    auto x = random_tensor({3, 8}, rng);
    auto parts = split(x, 1, 4);
    REQUIRE(parts.size() == 4);
    for (const auto& p : parts) CHECK(p.shape() == Shape{3, 2});
    auto rebuilt = concat(parts, 1);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(rebuilt.values()[i] == x.values()[i]);

    CHECK_THROWS_AS(split(random_tensor({3, 7}, rng), 1, 4), ShapeError);
    CHECK_THROWS_AS(concat(a, random_tensor({2, 3, 5}, rng), 1), ShapeError);
}

TEST_CASE("permute round trip") {
    Rng rng(9);
    auto x = random_tensor({2, 3, 4}, rng);
    auto p = permute(x, {2, 0, 1});
    REQUIRE(p.shape() == Shape{4, 2, 3});
    CHECK(p.at({3, 1, 2}) == x.at({1, 2, 3}));
    auto back = permute(p, {1, 2, 0});
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(back.values()[i] == x.values()[i]);
}

TEST_CASE("backward: analytic examples") {
    SECTION("sum of squares") {
        Tape<double> tape;
        T64 x(Shape{2}, {1, 2}, true);
        auto y = sum_all(mul(x, x));
        tape.backward(y);
        CHECK(x.grad()[0] == 2.0);
        CHECK(x.grad()[1] == 4.0);
    }
    SECTION("constant root leaves zero grads") {
        Tape<double> tape;
        T64 x(Shape{2}, {1, 2}, true);
        auto y = sum_all(mul(x, x));
        auto c = T64::scalar(5.0);
        auto root = sum_all(mul(c, c));
        // root does not depend on x
        root.set_requires_grad(true);
        tape.backward(root);
        CHECK(x.grad()[0] == 0.0);
        CHECK(x.grad()[1] == 0.0);
        (void)y;
    }
    SECTION("non-scalar root rejected") {
        Tape<double> tape;
        T64 x(Shape{2}, {1, 2}, true);
        auto y = mul(x, x);
        CHECK_THROWS_AS(tape.backward(y), ShapeError);
    }
    SECTION("repeated backward accumulates") {
        Tape<double> tape;
        T64 x(Shape{1}, {3.0}, true);
        auto y = mul(x, x);
        auto root = sum_all(y);
        tape.backward(root);
        tape.backward(root);
        CHECK(x.grad()[0] == 12.0);
    }
}

TEST_CASE("gradient_check on quadratic and softmax") {
    Rng rng(11);
    auto x = random_tensor({6}, rng);
    auto quad = [](const T64& v) { return sum_all(mul(v, v)); };
    CHECK(gradient_check<double>(quad, x, 1e-4) < 1e-6);

    // sum softmax == 1 identically, so both gradients vanish.
    auto flat = [](const T64& v) { return sum_all(softmax_lastdim(v)); };
    CHECK(gradient_check<double>(flat, x, 1e-4) < 1e-6);
}

TEST_CASE("gradient_check across differentiable ops, 20 seeds") {
    struct Case {
        const char* name;
        std::function<T64(const T64&)> f;
        double scale;
    };
    Rng seed_rng(2024);
    const std::vector<Case> cases = {
        {"add", [](const T64& v) { return sum_all(mul(add(v, scale(v, 0.5)), v)); }, 1.0},
        {"sub", [](const T64& v) { return sum_all(mul(sub(v, scale(v, 2.0)), v)); }, 1.0},
        {"mul", [](const T64& v) { return sum_all(mul(v, mul(v, v))); }, 1.0},
        {"div",
         [](const T64& v) { return sum_all(div(v, add_scalar(mul(v, v), 4.0))); }, 1.0},
        {"exp", [](const T64& v) { return sum_all(exp(scale(v, 0.3))); }, 1.0},
        {"log", [](const T64& v) { return sum_all(log(add_scalar(mul(v, v), 1.0))); }, 1.0},
        {"tanh", [](const T64& v) { return sum_all(tanh(v)); }, 1.0},
        {"sigmoid", [](const T64& v) { return sum_all(sigmoid(v)); }, 1.0},
        {"softplus", [](const T64& v) { return sum_all(softplus(v)); }, 1.0},
        {"matmul",
         [](const T64& v) {
             auto m = reshape(v, Shape{3, 4});
             return sum_all(mul(matmul(m, permute(m, {1, 0})), T64(Shape{3, 3}, 0.7)));
         },
         1.0},
        {"softmax",
         [](const T64& v) {
             auto m = reshape(v, Shape{3, 4});
             T64 w(Shape{3, 4});
             for (std::size_t i = 0; i < 12; ++i) w.values()[i] = 0.1 * double(i) - 0.4;
             return sum_all(mul(softmax_lastdim(m), w));
         },
         1.0},
        {"concat_slice",
         [](const T64& v) {
             auto m = reshape(v, Shape{3, 4});
             auto c = concat(m, scale(m, 2.0), 1);
             return sum_all(mul(slice(c, 1, 2, 4), slice(c, 1, 0, 4)));
         },
         1.0},
        {"permute",
         [](const T64& v) {
             auto m = reshape(v, Shape{3, 4});
             return sum_all(mul(permute(m, {1, 0}), T64(Shape{4, 3}, 1.3)));
         },
         1.0},
        {"pairwise_sqdist",
         [](const T64& v) {
             auto pts = reshape(v, Shape{4, 3});
             return sum_all(mul(pairwise_sqdist(pts, pts), T64(Shape{4, 4}, 0.25)));
         },
         1.0},
    };
    for (const auto& c : cases) {
        double worst = 0;
        for (int s = 0; s < 20; ++s) {
            Rng rng(seed_rng.next_u64());
            auto x = random_tensor({12}, rng, c.scale);
            worst = std::max(worst, gradient_check<double>(c.f, x, 1e-4));
        }
        INFO(c.name);
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("operations are deterministic") {
    Rng rng1(77), rng2(77);
    auto a1 = random_tensor({5, 5}, rng1);
    auto a2 = random_tensor({5, 5}, rng2);
    auto r1 = softmax_lastdim(matmul(a1, a1));
    auto r2 = softmax_lastdim(matmul(a2, a2));
    for (std::size_t i = 0; i < r1.numel(); ++i) CHECK(r1.values()[i] == r2.values()[i]);
}

TEST_CASE("float storage with double accumulation") {
    // A float-precision sum of many small numbers stays accurate because the
    // accumulator is double.
    const std::size_t n = 1 << 20;
    T32 x(Shape{n}, 0.001f);
    const double got = static_cast<double>(sum_all(x).item());
    CHECK_THAT(got / (0.001 * double(n)), Catch::Matchers::WithinAbs(1.0, 1e-4));
}

TEST_CASE("pmv1 round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "physmv_test_io";
    std::filesystem::create_directories(dir);
    Rng rng(31);
    auto t = random_tensor({2, 3, 5}, rng);
    save_pmv(t, dir / "t.pmv");
    auto back = load_pmv<double>(dir / "t.pmv");
    REQUIRE(back.shape() == t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) CHECK(back.values()[i] == t.values()[i]);

    // f32 file read back as f64 converts losslessly from the f32 values.
    T32 f(Shape{4}, {1.5f, -2.25f, 0.125f, 8.0f});
    save_pmv(f, dir / "f.pmv");
    auto fb = load_pmv<double>(dir / "f.pmv");
    for (std::size_t i = 0; i < 4; ++i) CHECK(fb.values()[i] == static_cast<double>(f.values()[i]));

    CHECK_THROWS_AS(load_pmv<double>(dir / "missing.pmv"), IoError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("reshape shares gradients") {
    Tape<double> tape;
    T64 x(Shape{6}, {1, 2, 3, 4, 5, 6}, true);
    auto m = reshape(x, Shape{2, 3});
    auto y = sum_all(mul(m, m));
    tape.backward(y);
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[5] == 12.0);
}
