#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "gevit/rng.hpp"
#include "gevit/tensor.hpp"

using namespace gevit;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true) {
    Tensor t = Tensor::zeros(shape, requires_grad);
    for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
    return t;
}

// Project an expression to a scalar through fixed random weights so upstream
// gradients differ per element.
Tensor weighted_sum(const Tensor& x, const Tensor& w) { return sum(mul(x, w)); }

double check_op(const std::function<Tensor(const Tensor&)>& op, Shape in_shape, uint64_t seed) {
    Rng rng(seed);
    Tensor theta = random_tensor(in_shape, rng);
    Tensor w;
    {
        NoGradGuard ng;
        Tensor probe = op(theta);
        w = random_tensor(probe.shape(), rng, false);
    }
    return finite_diff_check([&] { return weighted_sum(op(theta), w); }, theta);
}

}  // namespace

TEST_CASE("matmul forward fixtures") {
    Tensor I = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor A = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor C = matmul(I, A);
    for (int i = 0; i < 4; ++i) CHECK(C.at(i) == A.at(i));

    Tensor B = Tensor::zeros({3, 2});
    Tensor D = matmul(Tensor::zeros({2, 3}), B);
    CHECK(D.shape() == Shape{2, 2});

    CHECK_THROWS_WITH_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})),
                         doctest::Contains("[2x3]"), std::invalid_argument);
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(42);
    Tensor A = random_tensor({4, 4}, rng);
    Tensor B = random_tensor({4, 4}, rng);
    Tensor w = random_tensor({4, 4}, rng, false);
    CHECK(finite_diff_check([&] { return weighted_sum(matmul(A, B), w); }, A) < 1e-6);
    CHECK(finite_diff_check([&] { return weighted_sum(matmul(A, B), w); }, B) < 1e-6);
}

TEST_CASE("softmax fixtures") {
    Tensor a = softmax(Tensor::from_data({2}, {0.0, 0.0}));
    CHECK(a.at(0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(a.at(1) == doctest::Approx(0.5).epsilon(1e-12));

    Tensor b = softmax(Tensor::from_data({2}, {std::log(1.0), std::log(3.0)}));
    CHECK(b.at(0) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(b.at(1) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax shift invariance and simplex property") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor({5}, rng, false);
        const double c = rng.uniform(-10.0, 10.0);
        Tensor xc = Tensor::zeros({5});
        for (int i = 0; i < 5; ++i) xc.at(i) = x.at(i) + c;
        Tensor s = softmax(x);
        Tensor sc = softmax(xc);
        double total = 0.0;
        for (int i = 0; i < 5; ++i) {
            CHECK(s.at(i) == doctest::Approx(sc.at(i)).epsilon(1e-12));
            CHECK(s.at(i) >= 0.0);
            total += s.at(i);
        }
        CHECK(std::abs(total - 1.0) <= 1e-12);
        double h = entropy(s).value();
        CHECK(h >= 0.0);
        CHECK(h <= std::log(5.0) + 1e-12);
    }
}

TEST_CASE("cross_entropy fixtures") {
    Tensor onehot = Tensor::from_data({4}, {0, 0, 1, 0});
    CHECK(cross_entropy(onehot, 2).value() == doctest::Approx(0.0).epsilon(1e-15));

    Tensor uniform10 = Tensor::full({10}, 0.1);
    CHECK(cross_entropy(uniform10, 3).value() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
    CHECK(cross_entropy(uniform10, 3).value() == doctest::Approx(2.302585).epsilon(1e-6));

    Tensor p = Tensor::from_data({2}, {0.7, 0.3});
    CHECK(cross_entropy(p, 0).value() == doctest::Approx(-std::log(0.7)).epsilon(1e-12));
    CHECK(cross_entropy(p, 0).value() == doctest::Approx(0.356675).epsilon(1e-5));

    CHECK_THROWS_AS(cross_entropy(p, 2), std::invalid_argument);
    CHECK_THROWS_AS(cross_entropy(p, -1), std::invalid_argument);

    // distribution target
    Tensor t = Tensor::from_data({2}, {0.5, 0.5});
    double expect = -0.5 * std::log(0.7) - 0.5 * std::log(0.3);
    CHECK(cross_entropy(p, t).value() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("entropy fixtures") {
    CHECK(entropy(Tensor::full({4}, 0.25)).value() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(entropy(Tensor::from_data({3}, {0, 1, 0})).value() == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(entropy(Tensor::from_data({3}, {0.5, 0.25, 0.25})).value() ==
          doctest::Approx(1.5 * std::log(2.0)).epsilon(1e-12));
    CHECK(entropy(Tensor::from_data({3}, {0.5, 0.25, 0.25})).value() == doctest::Approx(1.039721).epsilon(1e-6));
}

TEST_CASE("l2_normalize and layernorm fixtures") {
    Tensor v = l2_normalize(Tensor::from_data({2}, {3, 4}));
    CHECK(v.at(0) == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(v.at(1) == doctest::Approx(0.8).epsilon(1e-12));

    double n = 0.0;
    Rng rng(3);
    Tensor r = l2_normalize(random_tensor({7}, rng, false));
    for (int i = 0; i < 7; ++i) n += r.at(i) * r.at(i);
    CHECK(std::abs(std::sqrt(n) - 1.0) <= 1e-9);

    CHECK_THROWS_AS(l2_normalize(Tensor::zeros({3})), std::domain_error);

    Tensor ln = layernorm(Tensor::full({5}, 2.5));
    for (int i = 0; i < 5; ++i) CHECK(ln.at(i) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("backward fixtures") {
    // loss = x^2 at x=3 -> grad 6
    Tensor x = Tensor::scalar(3.0, true);
    Tensor loss = mul(x, x);
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));

    // parameter used twice: loss = x + x at x=1 -> grad 2
    Tensor y = Tensor::scalar(1.0, true);
    Tensor loss2 = add(y, y);
    backward(loss2);
    CHECK(y.grad()[0] == doctest::Approx(2.0).epsilon(1e-15));

    // loss = sum(A*B) gradient vs finite differences
    Rng rng(11);
    Tensor A = random_tensor({3, 3}, rng);
    Tensor B = random_tensor({3, 3}, rng);
    CHECK(finite_diff_check([&] { return sum(matmul(A, B)); }, A) < 1e-6);

    CHECK_THROWS_AS(backward(Tensor::zeros({2}, true)), std::invalid_argument);
}

TEST_CASE("backward visits each node once in reverse creation order") {
    Rng rng(5);
    Tensor a = random_tensor({3}, rng);
    Tensor b = random_tensor({3}, rng);
    Tensor c = add(mul(a, b), a);
    Tensor loss = sum(gelu(c));
    BackwardTrace trace;
    backward(loss, &trace);
    REQUIRE(trace.visit_order.size() >= 4);
    for (size_t i = 1; i < trace.visit_order.size(); ++i)
        CHECK(trace.visit_order[i] < trace.visit_order[i - 1]);
}

TEST_CASE("backward is bit-deterministic") {
    auto run = [](std::vector<double>* out) {
        Rng rng(99);
        Tensor A = random_tensor({4, 4}, rng);
        Tensor B = random_tensor({4, 4}, rng);
        Tensor loss = mean(gelu(matmul(softmax(A), layernorm(B))));
        backward(loss);
        *out = A.grad();
        auto g2 = B.grad();
        out->insert(out->end(), g2.begin(), g2.end());
    };
    std::vector<double> g1, g2;
    run(&g1);
    run(&g2);
    REQUIRE(g1.size() == g2.size());
    for (size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("gradient accumulation is linear") {
    Rng rng(13);
    Tensor theta = random_tensor({6}, rng);
    Tensor w1 = random_tensor({6}, rng, false);
    Tensor w2 = random_tensor({6}, rng, false);
    auto l1 = [&] { return sum(mul(gelu(theta), w1)); };
    auto l2 = [&] { return sum(mul(mul(theta, theta), w2)); };
    const double alpha = 0.7, beta = -1.3;

    theta.zero_grad();
    backward(l1());
    auto g1 = theta.grad();
    theta.zero_grad();
    backward(l2());
    auto g2 = theta.grad();
    theta.zero_grad();
    backward(add(scale(l1(), alpha), scale(l2(), beta)));
    auto g = theta.grad();
    for (int i = 0; i < 6; ++i) CHECK(g[i] == doctest::Approx(alpha * g1[i] + beta * g2[i]).epsilon(1e-12));
}

TEST_CASE("finite_diff_check oracle fixtures") {
    // f = sum(theta^2): analytic grad 2*theta
    Rng rng(17);
    Tensor theta = random_tensor({8}, rng);
    CHECK(finite_diff_check([&] { return sum(mul(theta, theta)); }, theta) < 1e-8);

    // f = cross_entropy(softmax(x), j)
    Tensor logits = random_tensor({6}, rng);
    CHECK(finite_diff_check([&] { return cross_entropy(softmax(logits), 2); }, logits) < 1e-6);

    // constant f: both gradients zero
    Tensor c = random_tensor({4}, rng);
    Tensor fixed = Tensor::scalar(1.25);
    CHECK(finite_diff_check([&] { return sum(mul(fixed, fixed)); }, c) == doctest::Approx(0.0));
}

TEST_CASE("per-op gradients match finite differences") {
    Rng rng(23);
    Tensor other = random_tensor({3, 4}, rng, false);
    Tensor vec = random_tensor({4}, rng, false);

    CHECK(check_op([](const Tensor& t) { return gelu(t); }, {3, 4}, 101) < 1e-6);
    CHECK(check_op([](const Tensor& t) { return softmax(t); }, {3, 4}, 102) < 1e-6);
    CHECK(check_op([](const Tensor& t) { return layernorm(t); }, {3, 4}, 103) < 1e-6);
    CHECK(check_op([](const Tensor& t) { return l2_normalize(t); }, {3, 4}, 104) < 1e-6);
    CHECK(check_op([&](const Tensor& t) { return add(t, other); }, {3, 4}, 105) < 1e-6);
    CHECK(check_op([&](const Tensor& t) { return sub(other, t); }, {3, 4}, 106) < 1e-6);
    CHECK(check_op([&](const Tensor& t) { return mul(t, other); }, {3, 4}, 107) < 1e-6);
    CHECK(check_op([](const Tensor& t) { return scale(t, -2.5); }, {3, 4}, 108) < 1e-6);
    CHECK(check_op([&](const Tensor& t) { return add_rowvec(t, vec); }, {3, 4}, 109) < 1e-6);
    CHECK(check_op([&](const Tensor& t) { return mul_rowvec(t, vec); }, {3, 4}, 110) < 1e-6);
    CHECK(check_op([&](const Tensor& t) { return mul_rowvec(other, t); }, {4}, 111) < 1e-6);
    CHECK(check_op([](const Tensor& t) { return transpose(t); }, {3, 4}, 112) < 1e-6);
    CHECK(check_op([](const Tensor& t) { return slice_cols(t, 1, 2); }, {3, 4}, 113) < 1e-6);
    CHECK(check_op([](const Tensor& t) { return take_row(t, 2); }, {3, 4}, 114) < 1e-6);
    CHECK(check_op([&](const Tensor& t) { return concat_cols({t, other}); }, {3, 4}, 115) < 1e-6);
    CHECK(check_op([&](const Tensor& t) { return concat_rows(t, other); }, {2, 4}, 116) < 1e-6);
    CHECK(check_op([&](const Tensor& t) { return matvec(t, vec); }, {3, 4}, 117) < 1e-6);
    CHECK(check_op([&](const Tensor& t) { return matvec(other, t); }, {4}, 118) < 1e-6);
    CHECK(check_op([](const Tensor& t) { return softmax_axis(t, 0); }, {3, 4}, 119) < 1e-6);

    Tensor bias = random_tensor({3}, rng, false);
    CHECK(check_op([&](const Tensor& t) { return affine(other, t, bias); }, {4}, 120) < 1e-6);

    // probability-valued inputs for entropy / cross_entropy
    Rng prng(31);
    Tensor praw = random_tensor({5}, prng);
    CHECK(finite_diff_check([&] { return entropy(softmax(praw)); }, praw) < 1e-6);
    Tensor target = softmax(random_tensor({5}, prng, false)).detach();
    CHECK(finite_diff_check([&] { return cross_entropy(softmax(praw), target); }, praw) < 1e-6);
}

TEST_CASE("grad_reverse semantics") {
    Tensor x = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
    Tensor y = grad_reverse(x, 0.5);
    for (int i = 0; i < 3; ++i) CHECK(y.at(i) == x.at(i));

    // upstream grad 2 with lambda=0.5 -> -1
    Tensor loss = scale(sum(y), 2.0);
    backward(loss);
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(-1.0).epsilon(1e-15));

    Tensor z = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
    backward(sum(grad_reverse(z, 0.0)));
    for (int i = 0; i < 3; ++i) CHECK(z.grad()[i] == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("no-grad mode records nothing") {
    Tensor x = Tensor::scalar(2.0, true);
    NoGradGuard ng;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
}

TEST_CASE("mean and sum") {
    Tensor a = Tensor::from_data({4}, {1, 2, 3, 4});
    CHECK(sum(a).value() == doctest::Approx(10.0));
    CHECK(mean(a).value() == doctest::Approx(2.5));
    CHECK(check_op([](const Tensor& t) { return mean(t); }, {3, 4}, 121) < 1e-6);
    CHECK(check_op([](const Tensor& t) { return sum(t); }, {3, 4}, 122) < 1e-6);
}
