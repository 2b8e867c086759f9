#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "crnn/kspace.hpp"
#include "test_helpers.hpp"

using namespace crnn;
using testutil::dft2c_oracle;
using testutil::max_abs_diff;
using testutil::random_sequence;
using testutil::seq_norm;

namespace {

template <typename T>
double max_rel_seq(const ComplexSequence<T>& a, const ComplexSequence<T>& b, double floor = 1e-9) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double d = std::abs(std::complex<double>(a.data()[i]) - std::complex<double>(b.data()[i]));
        const double s = std::max({std::abs(std::complex<double>(a.data()[i])),
                                   std::abs(std::complex<double>(b.data()[i])), floor});
        m = std::max(m, d / s);
    }
    return m;
}

}  // namespace

TEST_CASE("fft2c: delta at the spatial center transforms to a flat spectrum") {
    for (auto [H, W] : {std::pair<std::int64_t, std::int64_t>{8, 8}, {9, 7}, {16, 12}}) {
        ComplexSequence<double> x(1, H, W);
        x.at(0, H / 2, W / 2) = {1.0, 0.0};
        auto k = fft2c(x);
        const double expected = 1.0 / std::sqrt(static_cast<double>(H * W));
        for (std::int64_t i = 0; i < k.numel(); ++i) {
            CHECK(k.data()[i].real() == doctest::Approx(expected).epsilon(1e-9));
            CHECK(std::abs(k.data()[i].imag()) < 1e-12);
        }
    }
}

TEST_CASE("fft2c/ifft2c: round trip is the identity to 1e-6") {
    std::mt19937_64 rng(31);
    for (auto [H, W] : {std::pair<std::int64_t, std::int64_t>{16, 16}, {15, 10}, {24, 18}}) {
        auto x = random_sequence<double>(3, H, W, rng);
        auto back = ifft2c(fft2c(x));
        CHECK(max_abs_diff(back, x) / seq_norm(x) < 1e-6);
        auto back2 = fft2c(ifft2c(x));
        CHECK(max_abs_diff(back2, x) / seq_norm(x) < 1e-6);
    }
}

TEST_CASE("fft2c preserves the l2 norm (Parseval)") {
    std::mt19937_64 rng(32);
    auto x = random_sequence<double>(2, 20, 14, rng);
    CHECK(std::abs(seq_norm(fft2c(x)) - seq_norm(x)) / seq_norm(x) < 1e-6);

    auto xf = random_sequence<float>(2, 17, 9, rng);
    CHECK(std::abs(seq_norm(fft2c(xf)) - seq_norm(xf)) / seq_norm(xf) < 1e-5);
}

TEST_CASE("fft2c matches the direct centered DFT oracle") {
    std::mt19937_64 rng(33);
    for (auto [H, W] : {std::pair<std::int64_t, std::int64_t>{8, 6}, {7, 5}}) {
        auto x = random_sequence<double>(2, H, W, rng);
        auto fast = fft2c(x);
        auto direct = dft2c_oracle(x, -1);
        CHECK(max_abs_diff(fast, direct) < 1e-9);
        auto fast_inv = ifft2c(x);
        auto direct_inv = dft2c_oracle(x, +1);
        CHECK(max_abs_diff(fast_inv, direct_inv) < 1e-9);
    }
}

TEST_CASE("generate_mask: the 8 center lines are always acquired") {
    auto mask = generate_mask(64, 32, 5, 4.0, 1.0 / 6.0, 99);
    const auto [lo, hi] = SamplingMask::center_block(64);
    CHECK(lo == 28);
    CHECK(hi == 36);
    for (std::int64_t t = 0; t < mask.frames(); ++t) {
        for (std::int64_t line = lo; line < hi; ++line) {
            CHECK(mask.line_active(t, line));
        }
    }
}

TEST_CASE("generate_mask: deterministic under the seed, varies across frames and seeds") {
    auto a = generate_mask(48, 24, 4, 3.0, 1.0 / 6.0, 7);
    auto b = generate_mask(48, 24, 4, 3.0, 1.0 / 6.0, 7);
    CHECK(std::equal(a.data(), a.data() + a.numel(), b.data()));

    auto c = generate_mask(48, 24, 4, 3.0, 1.0 / 6.0, 8);
    CHECK(!std::equal(a.data(), a.data() + a.numel(), c.data()));

    bool any_frame_differs = false;
    for (std::int64_t t = 1; t < a.frames(); ++t) {
        if (!std::equal(a.data(), a.data() + a.height() * a.width(),
                        a.data() + t * a.height() * a.width())) {
            any_frame_differs = true;
        }
    }
    CHECK(any_frame_differs);
}

TEST_CASE("generate_mask: 192 lines at 4x acceleration gives exactly 48 lines per frame") {
    auto mask = generate_mask(192, 190, 6, 4.0, 1.0 / 6.0, 2024);
    for (std::int64_t t = 0; t < mask.frames(); ++t) {
        CHECK(mask.lines_per_frame(t) == 48);
    }
    // Mask rows are all-or-nothing: constant along frequency encoding.
    for (std::int64_t t = 0; t < mask.frames(); ++t) {
        for (std::int64_t y = 0; y < mask.height(); ++y) {
            const std::uint8_t first = mask.at(t, y, 0);
            for (std::int64_t x = 1; x < mask.width(); ++x) CHECK(mask.at(t, y, x) == first);
        }
    }
}

TEST_CASE("generate_mask rejects invalid requests") {
    CHECK_THROWS_WITH_AS(generate_mask(64, 32, 1, 16.0, 1.0 / 6.0, 1),
                         doctest::Contains("center block"), std::invalid_argument);
    CHECK_THROWS_AS(generate_mask(8, 32, 1, 2.0, 1.0 / 6.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(generate_mask(64, 32, 1, 1.0, 1.0 / 6.0, 1), std::invalid_argument);
}

TEST_CASE("undersample: all-ones mask reproduces the input") {
    std::mt19937_64 rng(34);
    auto x = random_sequence<float>(2, 16, 12, rng);
    SamplingMask mask(2, 16, 12);
    mask.fill(1);
    auto us = undersample(x, mask);
    CHECK(max_abs_diff(us.zero_filled, x) / seq_norm(x) < 1e-6);
}

TEST_CASE("undersample: an all-zero mask frame yields a zero image frame") {
    std::mt19937_64 rng(35);
    auto x = random_sequence<double>(2, 8, 8, rng);
    SamplingMask mask(2, 8, 8);
    mask.fill(0);
    for (std::int64_t y = 0; y < 8; ++y) mask.set_line(1, y);
    auto us = undersample(x, mask);
    for (std::int64_t y = 0; y < 8; ++y)
        for (std::int64_t xx = 0; xx < 8; ++xx) CHECK(std::abs(us.zero_filled.at(0, y, xx)) == 0.0);
    CHECK(max_abs_diff(us.zero_filled, x) > 0.0);  // frame 1 kept
}

TEST_CASE("undersample matches a direct masked-DFT oracle and aliases only along phase encoding") {
    std::mt19937_64 rng(36);
    const std::int64_t H = 16, W = 6;
    auto x = random_sequence<double>(1, H, W, rng);
    auto mask = generate_mask(H, W, 1, 2.0, 1.0 / 6.0, 5);
    auto us = undersample(x, mask);

    // Oracle: naive DFT, zero the unacquired lines, naive inverse.
    auto k = dft2c_oracle(x, -1);
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t f = 0; f < W; ++f)
            if (!mask.at(0, y, f)) k.at(0, y, f) = {0.0, 0.0};
    auto xu_oracle = dft2c_oracle(k, +1);
    CHECK(max_abs_diff(us.zero_filled, xu_oracle) < 1e-9);

    // A line mask acts column by column: energy from one image column never
    // leaks into other columns, so ghosts run along phase encoding only.
    ComplexSequence<double> col(1, H, W);
    for (std::int64_t y = 0; y < H; ++y) col.at(y % 1, y, 2) = x.at(0, y, 2);
    auto us_col = undersample(col, mask);
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t f = 0; f < W; ++f)
            if (f != 2) CHECK(std::abs(us_col.zero_filled.at(0, y, f)) < 1e-12);
}

TEST_CASE("undersample rejects shape mismatch") {
    ComplexSequence<float> x(2, 8, 8);
    SamplingMask mask(2, 8, 10);
    CHECK_THROWS_AS(undersample(x, mask), std::invalid_argument);
}

TEST_CASE("data_consistency: empty acquisition set is the identity") {
    std::mt19937_64 rng(37);
    auto z = random_sequence<double>(2, 12, 10, rng);
    KSpaceData<double> y{ComplexSequence<double>(2, 12, 10), SamplingMask(2, 12, 10), DcMode::exact_mode()};
    auto out = data_consistency(z, y);
    CHECK(max_abs_diff(out, z) / seq_norm(z) < 1e-6);
}

TEST_CASE("data_consistency: exact mode restores acquired samples") {
    std::mt19937_64 rng(38);
    const std::int64_t H = 24, W = 16;
    auto truth = random_sequence<double>(3, H, W, rng);
    auto mask = generate_mask(H, W, 3, 3.0, 1.0 / 6.0, 11);
    auto us = undersample(truth, mask);

    auto z = random_sequence<double>(3, H, W, rng);
    auto out = data_consistency(z, us.kspace);
    auto k_out = fft2c(out);
    for (std::int64_t i = 0; i < k_out.numel(); ++i) {
        if (!us.kspace.mask.data()[i]) continue;
        const double diff = std::abs(k_out.data()[i] - us.kspace.samples.data()[i]);
        CHECK(diff / std::max(std::abs(us.kspace.samples.data()[i]), 1e-6) < 1e-5);
    }

    SUBCASE("idempotence") {
        auto twice = data_consistency(out, us.kspace);
        CHECK(max_abs_diff(twice, out) / std::max(seq_norm(out), 1e-12) < 1e-5);
    }
    SUBCASE("ground truth is a fixed point") {
        auto fixed = data_consistency(truth, us.kspace);
        CHECK(max_abs_diff(fixed, truth) / seq_norm(truth) < 1e-5);
    }
}

TEST_CASE("data_consistency: lambda0 = 1 averages estimate and data on the acquired set") {
    std::mt19937_64 rng(39);
    const std::int64_t H = 16, W = 8;
    auto truth = random_sequence<double>(1, H, W, rng);
    auto mask = generate_mask(H, W, 1, 2.0, 1.0 / 6.0, 3);
    auto us = undersample(truth, mask, DcMode::with_lambda0(1.0));

    auto z = random_sequence<double>(1, H, W, rng);
    auto k_z = fft2c(z);
    auto out = data_consistency(z, us.kspace);
    auto k_out = fft2c(out);
    for (std::int64_t i = 0; i < k_out.numel(); ++i) {
        const std::complex<double> expected =
            us.kspace.mask.data()[i]
                ? (k_z.data()[i] + us.kspace.samples.data()[i]) * 0.5
                : k_z.data()[i];
        CHECK(std::abs(k_out.data()[i] - expected) < 1e-9);
    }
}

TEST_CASE("data_consistency is non-expansive for finite lambda0 and in exact mode") {
    std::mt19937_64 rng(40);
    const std::int64_t H = 16, W = 12;
    auto truth = random_sequence<double>(2, H, W, rng);
    auto mask = generate_mask(H, W, 2, 2.0, 1.0 / 6.0, 21);
    for (double l0 : {-1.0, 0.5, 4.0}) {
        const DcMode dc = l0 < 0 ? DcMode::exact_mode() : DcMode::with_lambda0(l0);
        auto us = undersample(truth, mask, dc);
        for (int rep = 0; rep < 5; ++rep) {
            auto z1 = random_sequence<double>(2, H, W, rng);
            auto z2 = random_sequence<double>(2, H, W, rng);
            auto d1 = data_consistency(z1, us.kspace);
            auto d2 = data_consistency(z2, us.kspace);
            ComplexSequence<double> diff_in(2, H, W), diff_out(2, H, W);
            for (std::int64_t i = 0; i < diff_in.numel(); ++i) {
                diff_in.data()[i] = z1.data()[i] - z2.data()[i];
                diff_out.data()[i] = d1.data()[i] - d2.data()[i];
            }
            CHECK(seq_norm(diff_out) <= seq_norm(diff_in) * (1.0 + 1e-9));
        }
    }
}

TEST_CASE("data_consistency backward is the adjoint of the linear part") {
    std::mt19937_64 rng(41);
    const std::int64_t H = 16, W = 10;
    auto mask = generate_mask(H, W, 1, 2.0, 1.0 / 6.0, 77);
    for (double l0 : {-1.0, 2.0}) {
        const DcMode dc = l0 < 0 ? DcMode::exact_mode() : DcMode::with_lambda0(l0);
        // Linear part = DC with zero acquired samples.
        KSpaceData<double> zero_y{ComplexSequence<double>(1, H, W), mask, dc};
        auto v = random_sequence<double>(1, H, W, rng);
        auto g = random_sequence<double>(1, H, W, rng);
        auto jv = data_consistency(v, zero_y);
        auto jtg = data_consistency_backward(g, mask, dc);
        // Real inner product over the two-channel view.
        double lhs = 0.0, rhs = 0.0;
        for (std::int64_t i = 0; i < v.numel(); ++i) {
            lhs += g.data()[i].real() * jv.data()[i].real() + g.data()[i].imag() * jv.data()[i].imag();
            rhs += jtg.data()[i].real() * v.data()[i].real() + jtg.data()[i].imag() * v.data()[i].imag();
        }
        CHECK(std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-12}) < 1e-9);
    }
}

TEST_CASE("DcMode rejects negative lambda0") {
    CHECK_THROWS_AS(DcMode::with_lambda0(-0.5), std::invalid_argument);
}

TEST_CASE("data_consistency rejects shape mismatches") {
    ComplexSequence<double> z(1, 8, 8);
    KSpaceData<double> y{ComplexSequence<double>(1, 8, 10), SamplingMask(1, 8, 10), DcMode::exact_mode()};
    CHECK_THROWS_AS(data_consistency(z, y), std::invalid_argument);
}
