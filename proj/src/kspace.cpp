#include "crnn/kspace.hpp"

#include <fftw3.h>

#include <cmath>
#include <mutex>
#include <random>
#include <unordered_map>

namespace crnn {

namespace {

// FFTW plans are cached per (H, W, direction). Planner calls are serialized
// behind a mutex; fftw_execute_dft on distinct arrays is thread-safe.
// FFTW_ESTIMATE keeps planning deterministic, FFTW_UNALIGNED lets the plan
// run on any caller-provided buffers.

struct PlanKey {
    std::int64_t h;
    std::int64_t w;
    int sign;
    bool operator==(const PlanKey& o) const { return h == o.h && w == o.w && sign == o.sign; }
};

struct PlanKeyHash {
    std::size_t operator()(const PlanKey& k) const {
        return std::hash<std::int64_t>()(k.h * 1315423911 + k.w * 2654435761 + k.sign);
    }
};

std::mutex g_plan_mutex;

template <typename T>
struct FftwTraits;

template <>
struct FftwTraits<double> {
    using plan_type = fftw_plan;
    using complex_type = fftw_complex;
    static plan_type make_plan(int h, int w, complex_type* in, complex_type* out, int sign) {
        return fftw_plan_dft_2d(h, w, in, out, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
    }
    static void execute(plan_type p, complex_type* in, complex_type* out) { fftw_execute_dft(p, in, out); }
    static std::unordered_map<PlanKey, plan_type, PlanKeyHash>& cache() {
        static std::unordered_map<PlanKey, plan_type, PlanKeyHash> c;
        return c;
    }
};

template <>
struct FftwTraits<float> {
    using plan_type = fftwf_plan;
    using complex_type = fftwf_complex;
    static plan_type make_plan(int h, int w, complex_type* in, complex_type* out, int sign) {
        return fftwf_plan_dft_2d(h, w, in, out, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
    }
    static void execute(plan_type p, complex_type* in, complex_type* out) { fftwf_execute_dft(p, in, out); }
    static std::unordered_map<PlanKey, plan_type, PlanKeyHash>& cache() {
        static std::unordered_map<PlanKey, plan_type, PlanKeyHash> c;
        return c;
    }
};

template <typename T>
typename FftwTraits<T>::plan_type get_plan(std::int64_t h, std::int64_t w, int sign) {
    std::lock_guard<std::mutex> lock(g_plan_mutex);
    auto& cache = FftwTraits<T>::cache();
    const PlanKey key{h, w, sign};
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    std::vector<std::complex<T>> in(static_cast<std::size_t>(h * w));
    std::vector<std::complex<T>> out(static_cast<std::size_t>(h * w));
    auto plan = FftwTraits<T>::make_plan(static_cast<int>(h), static_cast<int>(w),
                                         reinterpret_cast<typename FftwTraits<T>::complex_type*>(in.data()),
                                         reinterpret_cast<typename FftwTraits<T>::complex_type*>(out.data()), sign);
    cache[key] = plan;
    return plan;
}

/// dst = ifftshift(src): moves DC from the matrix center to index 0.
template <typename T>
void ifftshift_copy(std::complex<T>* dst, const std::complex<T>* src, std::int64_t H, std::int64_t W) {
    const std::int64_t cH = H / 2, cW = W / 2;
    for (std::int64_t y = 0; y < H; ++y) {
        const std::complex<T>* srow = src + ((y + cH) % H) * W;
        std::complex<T>* drow = dst + y * W;
        std::copy(srow + cW, srow + W, drow);
        std::copy(srow, srow + cW, drow + (W - cW));
    }
}

/// dst = fftshift(src) * scale: moves DC back to the matrix center.
template <typename T>
void fftshift_scale_copy(std::complex<T>* dst, const std::complex<T>* src, std::int64_t H, std::int64_t W,
                         T scale) {
    const std::int64_t cH = H / 2, cW = W / 2;
    for (std::int64_t y = 0; y < H; ++y) {
        const std::complex<T>* srow = src + ((y + H - cH) % H) * W;
        std::complex<T>* drow = dst + y * W;
        for (std::int64_t x = 0; x < cW; ++x) drow[x] = srow[W - cW + x] * scale;
        for (std::int64_t x = cW; x < W; ++x) drow[x] = srow[x - cW] * scale;
    }
}

template <typename T>
ComplexSequence<T> centered_transform(const ComplexSequence<T>& x, int sign) {
    const std::int64_t H = x.height(), W = x.width();
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(H) * static_cast<double>(W)));
    auto plan = get_plan<T>(H, W, sign);
    ComplexSequence<T> out(x.frames(), H, W);
    std::vector<std::complex<T>> in_buf(static_cast<std::size_t>(H * W));
    std::vector<std::complex<T>> out_buf(static_cast<std::size_t>(H * W));
    using C = typename FftwTraits<T>::complex_type;
    for (std::int64_t t = 0; t < x.frames(); ++t) {
        ifftshift_copy(in_buf.data(), x.frame(t), H, W);
        FftwTraits<T>::execute(plan, reinterpret_cast<C*>(in_buf.data()), reinterpret_cast<C*>(out_buf.data()));
        fftshift_scale_copy(out.frame(t), out_buf.data(), H, W, scale);
    }
    return out;
}

void check_same_shape(std::int64_t tf, std::int64_t th, std::int64_t tw, std::int64_t of, std::int64_t oh,
                      std::int64_t ow, const char* what) {
    if (tf != of || th != oh || tw != ow) {
        throw std::invalid_argument(std::string(what) + ": shape (" + std::to_string(tf) + "," +
                                    std::to_string(th) + "," + std::to_string(tw) + ") does not match (" +
                                    std::to_string(of) + "," + std::to_string(oh) + "," + std::to_string(ow) + ")");
    }
}

}  // namespace

template <typename T>
ComplexSequence<T> fft2c(const ComplexSequence<T>& x) {
    return centered_transform(x, FFTW_FORWARD);
}

template <typename T>
ComplexSequence<T> ifft2c(const ComplexSequence<T>& k) {
    return centered_transform(k, FFTW_BACKWARD);
}

std::pair<std::int64_t, std::int64_t> SamplingMask::center_block(std::int64_t num_pe_lines, std::int64_t block) {
    const std::int64_t lo = num_pe_lines / 2 - block / 2;
    return {lo, lo + block};
}

SamplingMask generate_mask(std::int64_t num_pe_lines, std::int64_t num_fe_points, std::int64_t num_frames,
                           double acceleration, double sigma_fraction, std::uint64_t seed) {
    if (acceleration <= 1.0) {
        throw std::invalid_argument("generate_mask: acceleration must be > 1, got " + std::to_string(acceleration));
    }
    if (num_pe_lines < 16) {
        throw std::invalid_argument("generate_mask: need at least 16 phase-encode lines, got " +
                                    std::to_string(num_pe_lines));
    }
    if (num_fe_points < 1 || num_frames < 1) {
        throw std::invalid_argument("generate_mask: frame count and frequency-encode size must be >= 1");
    }
    if (sigma_fraction <= 0.0) {
        throw std::invalid_argument("generate_mask: sigma_fraction must be > 0");
    }
    const std::int64_t budget = std::llround(static_cast<double>(num_pe_lines) / acceleration);
    if (budget < 8) {
        throw std::invalid_argument("generate_mask: acceleration too high for the 8-line center block (budget " +
                                    std::to_string(budget) + " lines)");
    }
    const auto [lo, hi] = SamplingMask::center_block(num_pe_lines);
    const double dc = static_cast<double>(num_pe_lines / 2);
    const double sigma = sigma_fraction * static_cast<double>(num_pe_lines);

    SamplingMask mask(num_frames, num_pe_lines, num_fe_points);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    for (std::int64_t t = 0; t < num_frames; ++t) {
        for (std::int64_t line = lo; line < hi; ++line) mask.set_line(t, line);

        std::vector<std::int64_t> candidates;
        std::vector<double> weights;
        candidates.reserve(static_cast<std::size_t>(num_pe_lines - 8));
        for (std::int64_t line = 0; line < num_pe_lines; ++line) {
            if (line >= lo && line < hi) continue;
            const double off = static_cast<double>(line) - dc;
            candidates.push_back(line);
            weights.push_back(std::exp(-(off * off) / (2.0 * sigma * sigma)));
        }

        // Draw without replacement: pick by cumulative weight, then remove.
        for (std::int64_t drawn = 8; drawn < budget; ++drawn) {
            double total = 0.0;
            for (double w : weights) total += w;
            const double u = unit(rng) * total;
            double cum = 0.0;
            std::size_t pick = weights.size() - 1;
            for (std::size_t i = 0; i < weights.size(); ++i) {
                cum += weights[i];
                if (u < cum) {
                    pick = i;
                    break;
                }
            }
            mask.set_line(t, candidates[pick]);
            candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(pick));
            weights.erase(weights.begin() + static_cast<std::ptrdiff_t>(pick));
        }
    }
    return mask;
}

template <typename T>
Undersampled<T> undersample(const ComplexSequence<T>& x, const SamplingMask& mask, DcMode dc) {
    check_same_shape(x.frames(), x.height(), x.width(), mask.frames(), mask.height(), mask.width(),
                     "undersample: image vs mask");
    ComplexSequence<T> k = fft2c(x);
    const std::uint8_t* m = mask.data();
    std::complex<T>* kd = k.data();
    for (std::int64_t i = 0; i < k.numel(); ++i) {
        if (!m[i]) kd[i] = std::complex<T>(0, 0);
    }
    Undersampled<T> out;
    out.zero_filled = ifft2c(k);
    out.kspace = KSpaceData<T>{std::move(k), mask, dc};
    return out;
}

template <typename T>
ComplexSequence<T> data_consistency(const ComplexSequence<T>& z, const KSpaceData<T>& y) {
    check_same_shape(z.frames(), z.height(), z.width(), y.samples.frames(), y.samples.height(),
                     y.samples.width(), "data_consistency: image vs samples");
    check_same_shape(z.frames(), z.height(), z.width(), y.mask.frames(), y.mask.height(), y.mask.width(),
                     "data_consistency: image vs mask");
    if (!y.dc.exact && y.dc.lambda0 < 0.0) {
        throw std::invalid_argument("data_consistency: lambda0 must be nonnegative");
    }
    ComplexSequence<T> k = fft2c(z);
    const std::uint8_t* m = y.mask.data();
    const std::complex<T>* yd = y.samples.data();
    std::complex<T>* kd = k.data();
    if (y.dc.exact) {
        for (std::int64_t i = 0; i < k.numel(); ++i) {
            if (m[i]) kd[i] = yd[i];
        }
    } else {
        const T l0 = static_cast<T>(y.dc.lambda0);
        const T inv = T(1) / (T(1) + l0);
        for (std::int64_t i = 0; i < k.numel(); ++i) {
            if (m[i]) kd[i] = (kd[i] + l0 * yd[i]) * inv;
        }
    }
    return ifft2c(k);
}

template <typename T>
ComplexSequence<T> data_consistency_backward(const ComplexSequence<T>& grad_out, const SamplingMask& mask,
                                             DcMode dc) {
    check_same_shape(grad_out.frames(), grad_out.height(), grad_out.width(), mask.frames(), mask.height(),
                     mask.width(), "data_consistency backward: grad vs mask");
    ComplexSequence<T> k = fft2c(grad_out);
    const std::uint8_t* m = mask.data();
    std::complex<T>* kd = k.data();
    if (dc.exact) {
        for (std::int64_t i = 0; i < k.numel(); ++i) {
            if (m[i]) kd[i] = std::complex<T>(0, 0);
        }
    } else {
        const T inv = T(1) / (T(1) + static_cast<T>(dc.lambda0));
        for (std::int64_t i = 0; i < k.numel(); ++i) {
            if (m[i]) kd[i] *= inv;
        }
    }
    return ifft2c(k);
}

#define CRNN_INSTANTIATE_KSPACE(T)                                                                        \
    template ComplexSequence<T> fft2c<T>(const ComplexSequence<T>&);                                      \
    template ComplexSequence<T> ifft2c<T>(const ComplexSequence<T>&);                                     \
    template Undersampled<T> undersample<T>(const ComplexSequence<T>&, const SamplingMask&, DcMode);      \
    template ComplexSequence<T> data_consistency<T>(const ComplexSequence<T>&, const KSpaceData<T>&);     \
    template ComplexSequence<T> data_consistency_backward<T>(const ComplexSequence<T>&, const SamplingMask&, \
                                                             DcMode);

CRNN_INSTANTIATE_KSPACE(float)
CRNN_INSTANTIATE_KSPACE(double)

#undef CRNN_INSTANTIATE_KSPACE

}  // namespace crnn
