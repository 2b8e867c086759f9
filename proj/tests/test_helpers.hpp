#pragma once

// Shared test utilities and independent oracles. Everything here is written
// against the mathematical definitions directly (plain nested loops, direct
// DFT sums) so the library implementation can be checked against a second
// route.

#include <cmath>
#include <complex>
#include <random>
#include <vector>

#include "crnn/kspace.hpp"
#include "crnn/tensor.hpp"

namespace testutil {

template <typename T>
void fill_uniform(crnn::Tensor<T>& t, std::mt19937_64& rng, T lo = T(-1), T hi = T(1)) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<T>(dist(rng));
}

template <typename T>
crnn::Tensor<T> random_tensor(std::vector<std::int64_t> shape, std::mt19937_64& rng, T lo = T(-1), T hi = T(1)) {
    crnn::Tensor<T> t(std::move(shape));
    fill_uniform(t, rng, lo, hi);
    return t;
}

template <typename T>
crnn::ComplexSequence<T> random_sequence(std::int64_t frames, std::int64_t h, std::int64_t w,
                                         std::mt19937_64& rng) {
    crnn::ComplexSequence<T> seq(frames, h, w);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (std::int64_t i = 0; i < seq.numel(); ++i) {
        seq.data()[i] = std::complex<T>(static_cast<T>(dist(rng)), static_cast<T>(dist(rng)));
    }
    return seq;
}

template <typename T>
double max_abs_diff(const crnn::Tensor<T>& a, const crnn::Tensor<T>& b) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
    }
    return m;
}

template <typename T>
double max_rel_diff(const crnn::Tensor<T>& a, const crnn::Tensor<T>& b, double floor = 1e-6) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double x = static_cast<double>(a.data()[i]);
        const double y = static_cast<double>(b.data()[i]);
        m = std::max(m, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
    }
    return m;
}

template <typename T>
double max_abs_diff(const crnn::ComplexSequence<T>& a, const crnn::ComplexSequence<T>& b) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(std::complex<double>(a.data()[i]) - std::complex<double>(b.data()[i])));
    }
    return m;
}

template <typename T>
double seq_norm(const crnn::ComplexSequence<T>& a) {
    double s = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) s += std::norm(std::complex<double>(a.data()[i]));
    return std::sqrt(s);
}

/// Brute-force cross-correlation with zero padding: the quadruple-loop sum
/// straight from the definition.
template <typename T>
crnn::Tensor<T> conv2d_oracle(const crnn::Tensor<T>& in, const crnn::Tensor<T>& w, const crnn::Tensor<T>& b) {
    const std::int64_t B = in.dim(0), C_in = in.dim(1), H = in.dim(2), W = in.dim(3);
    const std::int64_t C_out = w.dim(0), k = w.dim(2), p = k / 2;
    crnn::Tensor<T> out({B, C_out, H, W});
    for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t co = 0; co < C_out; ++co)
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t x = 0; x < W; ++x) {
                    double acc = static_cast<double>(b.data()[co]);
                    for (std::int64_t ci = 0; ci < C_in; ++ci)
                        for (std::int64_t ky = 0; ky < k; ++ky)
                            for (std::int64_t kx = 0; kx < k; ++kx) {
                                const std::int64_t yy = y + ky - p;
                                const std::int64_t xx = x + kx - p;
                                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                                acc += static_cast<double>(in.at(n, ci, yy, xx)) *
                                       static_cast<double>(w.at(co, ci, ky, kx));
                            }
                    out.at(n, co, y, x) = static_cast<T>(acc);
                }
    return out;
}

/// Direct centered unitary DFT: X[p,f] = (1/sqrt(HW)) * sum over (y,x) of
/// x[y,x] * exp(-2*pi*i*((p-cH)(y-cH)/H + (f-cW)(x-cW)/W)). sign=+1 gives
/// the inverse.
template <typename T>
crnn::ComplexSequence<double> dft2c_oracle(const crnn::ComplexSequence<T>& x, int sign = -1) {
    const std::int64_t F = x.frames(), H = x.height(), W = x.width();
    const std::int64_t cH = H / 2, cW = W / 2;
    const double scale = 1.0 / std::sqrt(static_cast<double>(H * W));
    crnn::ComplexSequence<double> out(F, H, W);
    for (std::int64_t t = 0; t < F; ++t)
        for (std::int64_t p = 0; p < H; ++p)
            for (std::int64_t f = 0; f < W; ++f) {
                std::complex<double> acc(0.0, 0.0);
                for (std::int64_t y = 0; y < H; ++y)
                    for (std::int64_t xx = 0; xx < W; ++xx) {
                        const double phase =
                            2.0 * M_PI *
                            (static_cast<double>((p - cH) * (y - cH)) / static_cast<double>(H) +
                             static_cast<double>((f - cW) * (xx - cW)) / static_cast<double>(W));
                        const std::complex<double> v(static_cast<double>(x.at(t, y, xx).real()),
                                                     static_cast<double>(x.at(t, y, xx).imag()));
                        acc += v * std::exp(std::complex<double>(0.0, sign * phase));
                    }
                out.at(t, p, f) = acc * scale;
            }
    return out;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

template <typename T>
double tensor_dot(const crnn::Tensor<T>& a, const crnn::Tensor<T>& b) {
    double s = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        s += static_cast<double>(a.data()[i]) * static_cast<double>(b.data()[i]);
    }
    return s;
}

}  // namespace testutil
