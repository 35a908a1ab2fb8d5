#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "cect/gradcheck.hpp"
#include "cect/nn.hpp"
#include "cect/tensor.hpp"
#include "oracles.hpp"

using namespace cect;

namespace {

template <typename S>
std::vector<double> to_double(const TensorT<S>& t) {
    std::vector<double> v(t.values().begin(), t.values().end());
    return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace

TEST_CASE("matmul identity and permutation") {
    Rng rng(1);
    auto b = rand_uniform<float>({3, 3}, -1, 1, rng);
    Tensor eye({3, 3});
    for (int i = 0; i < 3; ++i) eye.at({i, i}) = 1.0f;
    auto prod = matmul(eye, b);
    for (std::int64_t i = 0; i < 9; ++i) CHECK(prod.data()[i] == b.data()[i]);

    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor p({2, 2}, {0, 1, 1, 0});
    auto r = matmul(a, p);
    CHECK(r.at({0, 0}) == 2.0f);
    CHECK(r.at({0, 1}) == 1.0f);
    CHECK(r.at({1, 0}) == 4.0f);
    CHECK(r.at({1, 1}) == 3.0f);
}

TEST_CASE("matmul shape errors name both shapes") {
    Tensor a({2, 3});
    Tensor b({4, 2});
    try {
        matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,2]") != std::string::npos);
    }
}

TEST_CASE("matmul vs naive oracle and finite-difference gradient") {
    Rng rng(7);
    auto a = rand_uniform<double>({4, 5}, -1, 1, rng);
    auto b = rand_uniform<double>({5, 3}, -1, 1, rng);
    auto c = matmul(a, b);
    auto ref = oracle::matmul(to_double(a), to_double(b), 4, 5, 3);
    CHECK(max_abs_diff(to_double(c), ref) < 1e-12);

    // weighted-sum scalarization keeps the gradient nondegenerate
    auto w = rand_uniform<double>({4, 3}, -1, 1, rng);
    auto f = [&] { return sum(mul(matmul(a, b), w)); };
    auto report = grad_check<double>(f, {{"a", a}, {"b", b}}, 1e-5);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("conv2d identity kernel") {
    Rng rng(3);
    auto x = rand_uniform<float>({1, 1, 4, 4}, -1, 1, rng);
    Tensor k({1, 1, 1, 1}, {1.0f});
    auto y = conv2d(x, k, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 4, 4});
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d output extent formula") {
    // H=224, k=3, s=2, p=1 -> 112, cross-checked against the oracle's extent
    Rng rng(5);
    auto x = rand_uniform<float>({1, 1, 224, 8}, -1, 1, rng);
    auto k = rand_uniform<float>({1, 1, 3, 3}, -1, 1, rng);
    auto y = conv2d(x, k, 2, 1);
    CHECK(y.dim(2) == 112);
    auto ref = oracle::conv2d(to_double(x), to_double(k), 1, 1, 224, 8, 1, 3, 3, 2, 1);
    CHECK(max_abs_diff(to_double(y), ref) < 1e-6);
}

TEST_CASE("conv2d random vs quadruple-loop oracle") {
    Rng rng(11);
    for (int s = 1; s <= 2; ++s)
        for (int p = 0; p <= 1; ++p) {
            auto x = rand_uniform<float>({1, 2, 6, 6}, -1, 1, rng);
            auto k = rand_uniform<float>({3, 2, 3, 3}, -1, 1, rng);
            auto y = conv2d(x, k, s, p);
            auto ref = oracle::conv2d(to_double(x), to_double(k), 1, 2, 6, 6, 3, 3, 3, s, p);
            CHECK(max_abs_diff(to_double(y), ref) < 1e-6);
        }
}

TEST_CASE("conv2d rejects non-positive output extent") {
    Tensor x({1, 1, 2, 2});
    Tensor k({1, 1, 5, 5});
    CHECK_THROWS_AS(conv2d(x, k, 1, 0), DimensionError);
}

TEST_CASE("conv2d gradients") {
    Rng rng(13);
    auto x = rand_uniform<double>({1, 2, 5, 5}, -1, 1, rng);
    auto k = rand_uniform<double>({2, 2, 3, 3}, -1, 1, rng);
    auto b = rand_uniform<double>({2}, -0.5, 0.5, rng);
    auto w = rand_uniform<double>({1, 2, 3, 3}, -1, 1, rng); // output weighting for s=2,p=1
    auto f = [&] { return sum(mul(conv2d(x, k, b, 2, 1), w)); };
    auto report = grad_check<double>(f, {{"x", x}, {"k", k}, {"b", b}}, 1e-5);
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("transposed_conv2d scale contracts") {
    Rng rng(17);
    // 112 -> 224 with k=4, s=2, p=1
    {
        auto x = rand_uniform<float>({1, 2, 112, 4}, -1, 1, rng);
        auto k = rand_uniform<float>({2, 1, 4, 4}, -1, 1, rng);
        auto y = transposed_conv2d(x, k, 2, 1);
        CHECK(y.dim(2) == 224);
        CHECK(y.dim(3) == 8);
    }
    // 28 -> upsample x2 -> 56 -> 112 -> 224
    {
        auto x = rand_uniform<float>({1, 2, 28, 28}, -1, 1, rng);
        auto k1 = rand_uniform<float>({2, 2, 4, 4}, -0.2, 0.2, rng);
        auto k2 = rand_uniform<float>({2, 1, 4, 4}, -0.2, 0.2, rng);
        auto u = upsample_nearest(x, 2);
        CHECK(u.dim(2) == 56);
        auto h = transposed_conv2d(u, k1, 2, 1);
        CHECK(h.dim(2) == 112);
        auto y = transposed_conv2d(h, k2, 2, 1);
        CHECK(y.dim(2) == 224);
    }
}

TEST_CASE("transposed_conv2d matches naive oracle") {
    Rng rng(19);
    auto x = rand_uniform<float>({1, 2, 5, 5}, -1, 1, rng);
    auto k = rand_uniform<float>({2, 3, 4, 4}, -1, 1, rng);
    auto y = transposed_conv2d(x, k, 2, 1);
    auto ref = oracle::transposed_conv2d(to_double(x), to_double(k), 1, 2, 5, 5, 3, 4, 4, 2, 1);
    CHECK(max_abs_diff(to_double(y), ref) < 1e-6);
}

TEST_CASE("transposed_conv2d is the adjoint of conv2d") {
    Rng rng(23);
    for (int draw = 0; draw < 10; ++draw) {
        const int s = 1 + static_cast<int>(rng.uniform_int(2));
        const int p = static_cast<int>(rng.uniform_int(2));
        const int k = 2 + static_cast<int>(rng.uniform_int(3));
        // choose H so (H + 2p - k) % s == 0 and the adjoint maps back exactly
        int H = k + s * (2 + static_cast<int>(rng.uniform_int(4))) - 2 * p;
        const int C = 1 + static_cast<int>(rng.uniform_int(3));
        const int O = 1 + static_cast<int>(rng.uniform_int(3));
        auto x = rand_uniform<double>({1, C, H, H}, -1, 1, rng);
        auto kern = rand_uniform<double>({O, C, k, k}, -1, 1, rng);
        auto cx = conv2d(x, kern, s, p);
        auto y = rand_uniform<double>({1, O, cx.dim(2), cx.dim(3)}, -1, 1, rng);
        // <conv(x,k), y> vs <x, tconv(y, k)> with the kernel buffer viewed [O,C,kh,kw] -> [C(in)=O, O(out)=C]
        TensorT<double> kt(Shape{O, C, k, k}, kern.values());
        auto ty = transposed_conv2d(y, kt, s, p);
        REQUIRE(ty.shape() == x.shape());
        double lhs = 0.0, rhs = 0.0;
        for (std::int64_t i = 0; i < cx.size(); ++i) lhs += cx.data()[i] * y.data()[i];
        for (std::int64_t i = 0; i < x.size(); ++i) rhs += x.data()[i] * ty.data()[i];
        CHECK(std::abs(lhs - rhs) / std::max({1.0, std::abs(lhs), std::abs(rhs)}) < 1e-5);
    }
}

TEST_CASE("transposed_conv2d gradient") {
    Rng rng(29);
    auto x = rand_uniform<double>({1, 2, 3, 3}, -1, 1, rng);
    auto k = rand_uniform<double>({2, 2, 4, 4}, -1, 1, rng);
    auto b = rand_uniform<double>({2}, -0.5, 0.5, rng);
    auto w = rand_uniform<double>({1, 2, 6, 6}, -1, 1, rng);
    auto f = [&] { return sum(mul(transposed_conv2d(x, k, b, 2, 1), w)); };
    auto report = grad_check<double>(f, {{"x", x}, {"k", k}, {"b", b}}, 1e-5);
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("upsample_nearest definition and gradient") {
    Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
    auto y1 = upsample_nearest(x, 1);
    for (int i = 0; i < 4; ++i) CHECK(y1.data()[i] == x.data()[i]);
    auto y = upsample_nearest(x, 2);
    CHECK(y.shape() == Shape{1, 1, 4, 4});
    const float want[16] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    for (int i = 0; i < 16; ++i) CHECK(y.data()[i] == want[i]);

    CHECK_THROWS_AS(upsample_nearest(x, 0), ContractError);

    Rng rng(31);
    auto xd = rand_uniform<double>({1, 2, 3, 3}, -1, 1, rng);
    auto w = rand_uniform<double>({1, 2, 6, 6}, -1, 1, rng);
    auto f = [&] { return sum(mul(upsample_nearest(xd, 2), w)); };
    auto report = grad_check<double>(f, {{"x", xd}}, 1e-5);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("relu and gelu point values") {
    Tensor x({3}, {-1.0f, 2.0f, 0.0f});
    auto r = relu(x);
    CHECK(r.data()[0] == 0.0f);
    CHECK(r.data()[1] == 2.0f);
    auto g = gelu(x);
    CHECK(g.data()[2] == 0.0f);
    // gelu(1) = 0.5 * (1 + erf(1/sqrt(2))) = Phi(1) ~ 0.841345
    Tensor one({1}, {1.0f});
    CHECK(gelu(one).data()[0] == doctest::Approx(0.8413447).epsilon(1e-5));
}

TEST_CASE("gelu gradient at spec points") {
    TensorT<double> x({4}, {-2.0, -0.1, 0.1, 2.0});
    auto f = [&] { return sum(gelu(x)); };
    auto report = grad_check<double>(f, {{"x", x}}, 1e-5);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("layer_norm definition") {
    Rng rng(37);
    auto gain = full<float>({6}, 1.0f);
    auto bias = full<float>({6}, 0.0f);

    // constant row -> all zeros (eps-regularized)
    auto c = full<float>({2, 6}, 3.25f);
    auto yc = layer_norm(c, gain, bias);
    for (std::int64_t i = 0; i < yc.size(); ++i) CHECK(yc.data()[i] == 0.0f);

    auto x = rand_uniform<float>({4, 6}, -2, 2, rng);
    auto y = layer_norm(x, gain, bias);
    for (int r = 0; r < 4; ++r) {
        double mean = 0, var = 0;
        for (int i = 0; i < 6; ++i) mean += y.at({r, i});
        mean /= 6;
        for (int i = 0; i < 6; ++i) {
            const double d = y.at({r, i}) - mean;
            var += d * d;
        }
        var /= 6;
        CHECK(std::abs(mean) < 1e-5);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    }

    Tensor empty_gain({0});
    CHECK_THROWS_AS(layer_norm(Tensor({2, 0}), empty_gain, empty_gain), DimensionError);
}

TEST_CASE("layer_norm gradient") {
    Rng rng(41);
    auto x = rand_uniform<double>({3, 5}, -1, 1, rng);
    auto g = rand_uniform<double>({5}, 0.5, 1.5, rng);
    auto b = rand_uniform<double>({5}, -0.5, 0.5, rng);
    auto w = rand_uniform<double>({3, 5}, -1, 1, rng);
    auto f = [&] { return sum(mul(layer_norm(x, g, b), w)); };
    auto report = grad_check<double>(f, {{"x", x}, {"gain", g}, {"bias", b}}, 1e-5);
    CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("softmax properties") {
    auto u = full<float>({2, 5}, 0.7f);
    auto yu = softmax(u);
    for (std::int64_t i = 0; i < yu.size(); ++i) CHECK(yu.data()[i] == doctest::Approx(0.2).epsilon(1e-6));

    Tensor x({2}, {0.0f, std::log(3.0f)});
    auto y = softmax(x);
    CHECK(y.data()[0] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(y.data()[1] == doctest::Approx(0.75).epsilon(1e-6));

    Rng rng(43);
    auto z = rand_uniform<float>({4, 7}, -3, 3, rng);
    auto a = softmax(z);
    Tensor shifted(z.shape());
    for (std::int64_t i = 0; i < z.size(); ++i) shifted.data()[i] = z.data()[i] + 4.5f;
    auto b = softmax(shifted);
    for (std::int64_t i = 0; i < a.size(); ++i)
        CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-6);
    // rows sum to 1
    for (int r = 0; r < 4; ++r) {
        double s = 0;
        for (int i = 0; i < 7; ++i) s += a.at({r, i});
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("backward basics") {
    Rng rng(47);
    auto x = rand_uniform<float>({3, 4}, -1, 1, rng);
    x.set_requires_grad(true);

    SUBCASE("sum gives all-ones") {
        auto loss = sum(x);
        backward(loss);
        for (std::int64_t i = 0; i < x.size(); ++i) CHECK(x.grad()[static_cast<std::size_t>(i)] == 1.0f);
    }
    SUBCASE("half square norm gives x") {
        auto loss = scale(sum(mul(x, x)), 0.5);
        backward(loss);
        for (std::int64_t i = 0; i < x.size(); ++i)
            CHECK(x.grad()[static_cast<std::size_t>(i)] == doctest::Approx(x.data()[i]).epsilon(1e-6));
    }
    SUBCASE("non-scalar loss rejected") {
        auto y = mul(x, x);
        CHECK_THROWS_AS(backward(y), ContractError);
    }
    SUBCASE("shared node accumulates along both paths") {
        auto y = add(mul(x, x), x); // d/dx = 2x + 1
        auto loss = sum(y);
        backward(loss);
        for (std::int64_t i = 0; i < x.size(); ++i)
            CHECK(x.grad()[static_cast<std::size_t>(i)] ==
                  doctest::Approx(2.0f * x.data()[i] + 1.0f).epsilon(1e-5));
    }
}

TEST_CASE("two-layer toy net gradient check") {
    Rng rng(53);
    auto w1 = rand_uniform<double>({6, 8}, -0.5, 0.5, rng);
    auto b1 = rand_uniform<double>({8}, -0.1, 0.1, rng);
    auto w2 = rand_uniform<double>({8, 2}, -0.5, 0.5, rng);
    auto b2 = rand_uniform<double>({2}, -0.1, 0.1, rng);
    auto x = rand_uniform<double>({4, 6}, -1, 1, rng);
    std::vector<int> labels{0, 1, 1, 0};
    auto f = [&] {
        auto h = relu(linear(x, w1, b1));
        auto logits = linear(h, w2, b2);
        return cross_entropy(logits, labels);
    };
    auto report = grad_check<double>(f, {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}, {"x", x}}, 1e-5);
    CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("grad_check contract") {
    TensorT<double> x({3}, {1.0, 2.0, 3.0});
    auto f = [&] { return sum(x); };
    auto report = grad_check<double>(f, {{"x", x}}, 1e-5);
    CHECK(report.max_rel_err < 1e-10);
    CHECK(report.coords_checked == 3);

    CHECK_THROWS_AS(grad_check<double>(f, {{"x", x}}, 1.0), ContractError);

    // softmax-then-pick on 5 values
    TensorT<double> z({1, 5}, {0.3, -0.7, 1.2, 0.1, -0.4});
    auto g = [&] { return sum(mul(softmax(z), TensorT<double>({1, 5}, {0, 0, 1, 0, 0}))); };
    auto r2 = grad_check<double>(g, {{"z", z}}, 1e-5);
    CHECK(r2.max_rel_err < 1e-4);
}

TEST_CASE("determinism: same seed reproduces bit-identical forward") {
    auto run = [] {
        Rng rng(99);
        auto x = rand_uniform<float>({2, 3, 8, 8}, -1, 1, rng);
        auto k = rand_uniform<float>({4, 3, 3, 3}, -1, 1, rng);
        auto y = relu(conv2d(x, k, 2, 1));
        return y.values();
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("non-finite forward values are an error") {
    Tensor big({2}, {1e30f, 1e30f});
    // overflows to inf -> must throw, never silent
    CHECK_THROWS_AS(mul(big, big), NumericError);
}

TEST_CASE("cross_entropy values") {
    Tensor logits({2, 2}, {0.5f, 0.5f, 1.25f, 1.25f});
    auto loss = cross_entropy(logits, {0, 1});
    CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));

    Tensor sat({1, 2}, {20.0f, -20.0f});
    CHECK(cross_entropy(sat, {0}).item() < 1e-8);

    CHECK_THROWS_AS(cross_entropy(sat, {2}), ContractError);
    CHECK_THROWS_AS(cross_entropy(sat, {0, 1}), ContractError);
}

TEST_CASE("cross_entropy gradient equals softmax minus one-hot") {
    Rng rng(61);
    auto logits = rand_uniform<double>({3, 2}, -1, 1, rng);
    logits.set_requires_grad(true);
    std::vector<int> labels{1, 0, 1};
    auto loss = cross_entropy(logits, labels);
    backward(loss);
    auto sm = softmax(logits.detach());
    for (int n = 0; n < 3; ++n)
        for (int k = 0; k < 2; ++k) {
            const double want = (sm.at({n, k}) - (labels[static_cast<std::size_t>(n)] == k ? 1.0 : 0.0)) / 3.0;
            CHECK(logits.grad()[static_cast<std::size_t>(n * 2 + k)] == doctest::Approx(want).epsilon(1e-9));
        }

    auto f = [&] { return cross_entropy(logits, labels); };
    auto report = grad_check<double>(f, {{"logits", logits}}, 1e-5);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("gradient soundness of every primitive at random points") {
    Rng rng(67);
    for (int trial = 0; trial < 10; ++trial) {
        auto x = rand_uniform<double>({2, 3, 4, 4}, -1, 1, rng);
        auto k = rand_uniform<double>({2, 3, 3, 3}, -1, 1, rng);
        auto w = rand_uniform<double>({2, 2, 4, 4}, -1, 1, rng);
        auto f = [&] {
            auto c = conv2d(x, k, 1, 1);
            auto g = gelu(c);
            return sum(mul(g, w));
        };
        auto report = grad_check<double>(f, {{"x", x}, {"k", k}}, 1e-5, 24, &rng);
        CHECK(report.max_rel_err < 1e-3);
    }
}
