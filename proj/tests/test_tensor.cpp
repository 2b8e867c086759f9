#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "crnn/ops.hpp"
#include "test_helpers.hpp"

using namespace crnn;
using testutil::conv2d_oracle;
using testutil::fill_uniform;
using testutil::max_abs_diff;
using testutil::max_rel_diff;
using testutil::random_tensor;
using testutil::tensor_dot;

namespace {

template <typename T>
Tensor<T> delta_kernel(std::int64_t channels, std::int64_t k) {
    Tensor<T> w({channels, channels, k, k});
    for (std::int64_t c = 0; c < channels; ++c) w.at(c, c, k / 2, k / 2) = T(1);
    return w;
}

}  // namespace

TEST_CASE("conv2d_forward: centered delta kernel is the identity") {
    std::mt19937_64 rng(7);
    auto in = random_tensor<double>({1, 1, 3, 3}, rng);
    auto w = delta_kernel<double>(1, 3);
    Tensor<double> b({1});
    auto out = conv2d_forward(in, w, b);
    CHECK(max_abs_diff(out, in) == doctest::Approx(0.0));
}

TEST_CASE("conv2d_forward: zero weight with constant bias gives a constant field") {
    std::mt19937_64 rng(8);
    auto in = random_tensor<float>({2, 3, 4, 5}, rng);
    Tensor<float> w({4, 3, 3, 3});
    auto b = Tensor<float>::full({4}, 2.5f);
    auto out = conv2d_forward(in, w, b);
    for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == 2.5f);
}

TEST_CASE("conv2d_forward matches the quadruple-loop oracle") {
    std::mt19937_64 rng(9);
    auto in = random_tensor<double>({2, 3, 5, 5}, rng);
    auto w = random_tensor<double>({4, 3, 3, 3}, rng);
    auto b = random_tensor<double>({4}, rng);
    auto out = conv2d_forward(in, w, b);
    auto expect = conv2d_oracle(in, w, b);
    CHECK(max_rel_diff(out, expect) < 1e-6);

    SUBCASE("also for a 5x5 kernel") {
        auto w5 = random_tensor<double>({2, 3, 5, 5}, rng);
        auto b5 = random_tensor<double>({2}, rng);
        CHECK(max_rel_diff(conv2d_forward(in, w5, b5), conv2d_oracle(in, w5, b5)) < 1e-6);
    }
}

TEST_CASE("conv2d_forward rejects channel mismatch naming both shapes") {
    Tensor<float> in({1, 3, 4, 4});
    Tensor<float> w({2, 4, 3, 3});
    Tensor<float> b({2});
    try {
        conv2d_forward(in, w, b);
        FAIL("expected an exception");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[1,3,4,4]") != std::string::npos);
        CHECK(msg.find("[2,4,3,3]") != std::string::npos);
    }
}

TEST_CASE("conv2d_forward is linear in input and weight") {
    std::mt19937_64 rng(10);
    Tensor<double> zero_bias({3});
    const double alpha = 0.7, beta = -1.3;
    auto x1 = random_tensor<double>({2, 2, 6, 6}, rng);
    auto x2 = random_tensor<double>({2, 2, 6, 6}, rng);
    auto w1 = random_tensor<double>({3, 2, 3, 3}, rng);
    auto w2 = random_tensor<double>({3, 2, 3, 3}, rng);

    SUBCASE("input linearity") {
        Tensor<double> mix(x1.shape());
        for (std::int64_t i = 0; i < mix.numel(); ++i)
            mix.data()[i] = alpha * x1.data()[i] + beta * x2.data()[i];
        auto lhs = conv2d_forward(mix, w1, zero_bias);
        auto a = conv2d_forward(x1, w1, zero_bias);
        auto bb = conv2d_forward(x2, w1, zero_bias);
        Tensor<double> rhs(lhs.shape());
        for (std::int64_t i = 0; i < rhs.numel(); ++i) rhs.data()[i] = alpha * a.data()[i] + beta * bb.data()[i];
        CHECK(max_rel_diff(lhs, rhs) < 1e-6);
    }
    SUBCASE("weight linearity") {
        Tensor<double> mix(w1.shape());
        for (std::int64_t i = 0; i < mix.numel(); ++i)
            mix.data()[i] = alpha * w1.data()[i] + beta * w2.data()[i];
        auto lhs = conv2d_forward(x1, mix, zero_bias);
        auto a = conv2d_forward(x1, w1, zero_bias);
        auto bb = conv2d_forward(x1, w2, zero_bias);
        Tensor<double> rhs(lhs.shape());
        for (std::int64_t i = 0; i < rhs.numel(); ++i) rhs.data()[i] = alpha * a.data()[i] + beta * bb.data()[i];
        CHECK(max_rel_diff(lhs, rhs) < 1e-6);
    }
}

TEST_CASE("conv2d_backward: zero upstream gradient gives zero gradients") {
    std::mt19937_64 rng(11);
    auto in = random_tensor<double>({1, 2, 4, 4}, rng);
    auto w = random_tensor<double>({3, 2, 3, 3}, rng);
    Tensor<double> gout({1, 3, 4, 4});
    auto grads = conv2d_backward(gout, in, w);
    CHECK(max_abs_diff(grads.input, Tensor<double>(in.shape())) == 0.0);
    CHECK(max_abs_diff(grads.weight, Tensor<double>(w.shape())) == 0.0);
    CHECK(max_abs_diff(grads.bias, Tensor<double>({3})) == 0.0);
}

TEST_CASE("conv2d_backward: delta kernel passes the gradient through") {
    std::mt19937_64 rng(12);
    auto in = random_tensor<double>({2, 2, 5, 5}, rng);
    auto w = delta_kernel<double>(2, 3);
    auto gout = random_tensor<double>({2, 2, 5, 5}, rng);
    auto grads = conv2d_backward(gout, in, w);
    CHECK(max_abs_diff(grads.input, gout) == doctest::Approx(0.0));
}

TEST_CASE("conv2d adjoint consistency: <g, J v> == <J^T g, v>") {
    std::mt19937_64 rng(13);
    auto in = random_tensor<double>({2, 3, 6, 7}, rng);
    auto w = random_tensor<double>({4, 3, 3, 3}, rng);
    Tensor<double> zero_bias({4});
    auto gout = random_tensor<double>({2, 4, 6, 7}, rng);
    auto grads = conv2d_backward(gout, in, w);

    SUBCASE("input route") {
        auto v = random_tensor<double>({2, 3, 6, 7}, rng);
        auto jv = conv2d_forward(v, w, zero_bias);
        const double lhs = tensor_dot(gout, jv);
        const double rhs = tensor_dot(grads.input, v);
        CHECK(std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-12}) < 1e-6);
    }
    SUBCASE("weight route") {
        auto v = random_tensor<double>({4, 3, 3, 3}, rng);
        auto jv = conv2d_forward(in, v, zero_bias);
        const double lhs = tensor_dot(gout, jv);
        const double rhs = tensor_dot(grads.weight, v);
        CHECK(std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-12}) < 1e-6);
    }
}

TEST_CASE("conv2d_backward matches finite differences of a weighted-sum loss") {
    // loss = sum(r .* conv(x, w, b)) for a fixed random r; central
    // differences in 64-bit against the analytic adjoints.
    std::mt19937_64 rng(14);
    auto in = random_tensor<double>({1, 2, 4, 5}, rng);
    auto w = random_tensor<double>({2, 2, 3, 3}, rng);
    auto b = random_tensor<double>({2}, rng);
    auto r = random_tensor<double>({1, 2, 4, 5}, rng);

    auto loss = [&](const Tensor<double>& xx, const Tensor<double>& ww, const Tensor<double>& bb) {
        auto out = conv2d_forward(xx, ww, bb);
        return tensor_dot(r, out);
    };

    auto grads = conv2d_backward(r, in, w);
    const double eps = 1e-6;

    auto check_fd = [&](Tensor<double>& target, const Tensor<double>& analytic) {
        for (std::int64_t i = 0; i < target.numel(); ++i) {
            const double saved = target.data()[i];
            target.data()[i] = saved + eps;
            const double fp = loss(in, w, b);
            target.data()[i] = saved - eps;
            const double fm = loss(in, w, b);
            target.data()[i] = saved;
            const double num = (fp - fm) / (2 * eps);
            const double a = analytic.data()[i];
            CHECK(std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-4}) < 1e-4);
        }
    };
    check_fd(in, grads.input);
    check_fd(w, grads.weight);
    check_fd(b, grads.bias);
}

TEST_CASE("relu forward") {
    Tensor<double> x({3}, {-1.0, 0.0, 2.0});
    auto y = relu(x);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == 0.0);
    CHECK(y.data()[2] == 2.0);

    SUBCASE("nonnegative input is unchanged") {
        std::mt19937_64 rng(15);
        auto z = random_tensor<double>({2, 3, 4, 4}, rng, 0.0, 2.0);
        CHECK(max_abs_diff(relu(z), z) == 0.0);
    }
}

TEST_CASE("relu backward: finite differences away from the kink") {
    std::mt19937_64 rng(16);
    Tensor<double> x({64});
    fill_uniform(x, rng);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        if (std::abs(x.data()[i]) < 0.05) x.data()[i] = 0.1;  // keep clear of 0
    }
    auto r = random_tensor<double>({64}, rng);
    auto grad = relu_backward(r, x);
    const double eps = 1e-6;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double saved = x.data()[i];
        x.data()[i] = saved + eps;
        const double fp = tensor_dot(r, relu(x));
        x.data()[i] = saved - eps;
        const double fm = tensor_dot(r, relu(x));
        x.data()[i] = saved;
        const double num = (fp - fm) / (2 * eps);
        CHECK(std::abs(grad.data()[i] - num) < 1e-8);
    }

    SUBCASE("subgradient at exactly zero is zero") {
        Tensor<double> z({1}, {0.0});
        Tensor<double> g({1}, {3.0});
        CHECK(relu_backward(g, z).data()[0] == 0.0);
    }
}

TEST_CASE("relu adjoint consistency") {
    std::mt19937_64 rng(17);
    auto x = random_tensor<double>({128}, rng);
    auto g = random_tensor<double>({128}, rng);
    auto v = random_tensor<double>({128}, rng);
    // J is diagonal with the 0/1 activation mask.
    Tensor<double> jv(v.shape());
    for (std::int64_t i = 0; i < v.numel(); ++i) jv.data()[i] = x.data()[i] > 0 ? v.data()[i] : 0.0;
    const double lhs = tensor_dot(g, jv);
    const double rhs = tensor_dot(relu_backward(g, x), v);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("he_init is deterministic under the seed and only depends on shape and seed") {
    auto a = he_init<float>({4, 4, 3, 3}, 36, 42);
    auto b = he_init<float>({4, 4, 3, 3}, 36, 42);
    CHECK(max_abs_diff(a, b) == 0.0);
    auto c = he_init<float>({4, 4, 3, 3}, 36, 43);
    CHECK(max_abs_diff(a, c) > 0.0);
}

TEST_CASE("he_init empirical std matches sqrt(2/fan_in) within 5%") {
    auto w = he_init<double>({64, 64, 3, 3}, 64 * 9, 123);
    double mean = 0.0;
    for (std::int64_t i = 0; i < w.numel(); ++i) mean += w.data()[i];
    mean /= static_cast<double>(w.numel());
    double var = 0.0;
    for (std::int64_t i = 0; i < w.numel(); ++i) {
        const double d = w.data()[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(w.numel());
    const double expected = std::sqrt(2.0 / 576.0);
    CHECK(std::abs(std::sqrt(var) - expected) / expected < 0.05);
}

TEST_CASE("he_init rejects non-positive fan_in") {
    CHECK_THROWS_AS(he_init<float>({2, 2}, 0, 1), std::invalid_argument);
    CHECK_THROWS_AS(he_init<float>({2, 2}, -5, 1), std::invalid_argument);
}

TEST_CASE("grad_check: linear function matches to machine tolerance") {
    std::mt19937_64 rng(18);
    ParameterStore<double> params;
    params.add("theta", random_tensor<double>({10}, rng));
    auto coeffs = random_tensor<double>({10}, rng);

    auto f = [&](const ParameterStore<double>& p) { return tensor_dot(p.get("theta").value, coeffs); };
    params.get("theta").grad = coeffs;  // analytic gradient of a linear map

    auto report = grad_check(f, params, 1e-5);
    CHECK(report.max_rel_error < 1e-9);
}

TEST_CASE("grad_check: conv + relu + sum loss passes at 1e-4") {
    std::mt19937_64 rng(19);
    auto input = random_tensor<double>({1, 2, 6, 6}, rng);

    ParameterStore<double> params;
    params.add("w", random_tensor<double>({3, 2, 3, 3}, rng));
    params.add("b", random_tensor<double>({3}, rng));

    auto f = [&](const ParameterStore<double>& p) {
        auto out = relu(conv2d_forward(input, p.get("w").value, p.get("b").value));
        double s = 0.0;
        for (std::int64_t i = 0; i < out.numel(); ++i) s += out.data()[i];
        return s;
    };

    // Analytic gradients through the same structure.
    auto pre = conv2d_forward(input, params.get("w").value, params.get("b").value);
    Tensor<double> gout(pre.shape());
    gout.fill(1.0);
    relu_mask_inplace(gout, relu(pre));
    auto grads = conv2d_backward(gout, input, params.get("w").value);
    params.get("w").grad = grads.weight;
    params.get("b").grad = grads.bias;

    auto report = grad_check(f, params, 1e-5);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("grad_check probes large tensors on random directions") {
    std::mt19937_64 rng(20);
    ParameterStore<double> params;
    params.add("big", random_tensor<double>({40, 40}, rng));  // 1600 > default coord limit
    auto coeffs = random_tensor<double>({40, 40}, rng);
    auto f = [&](const ParameterStore<double>& p) { return tensor_dot(p.get("big").value, coeffs); };
    params.get("big").grad = coeffs;
    auto report = grad_check(f, params, 1e-5);
    REQUIRE(report.entries.size() == 1);
    CHECK(report.entries[0].checked_coords == 6);  // probe count, not coordinates
    CHECK(report.max_rel_error < 1e-6);            // summation roundoff dominates on 1600 coords
}

TEST_CASE("forward and backward keep finite values on finite inputs") {
    std::mt19937_64 rng(21);
    auto in = random_tensor<float>({2, 3, 8, 8}, rng);
    auto w = random_tensor<float>({5, 3, 3, 3}, rng);
    auto b = random_tensor<float>({5}, rng);
    auto out = conv2d_forward(in, w, b);
    CHECK(out.all_finite());
    auto gout = random_tensor<float>({2, 5, 8, 8}, rng);
    auto grads = conv2d_backward(gout, in, w);
    CHECK(grads.input.all_finite());
    CHECK(grads.weight.all_finite());
    CHECK(grads.bias.all_finite());
}

TEST_CASE("ParameterStore rejects duplicate names and keeps shapes aligned") {
    ParameterStore<float> store;
    store.add("a", Tensor<float>({2, 2}));
    CHECK_THROWS_AS(store.add("a", Tensor<float>({2, 2})), std::invalid_argument);
    CHECK(store.get("a").value.same_shape(store.get("a").grad));
    CHECK_THROWS_AS(store.get("missing"), std::out_of_range);
}
