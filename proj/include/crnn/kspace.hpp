#pragma once

#include <complex>
#include <cstdint>
#include <vector>

#include "crnn/tensor.hpp"

namespace crnn {

/// A T-frame complex-valued image sequence. Axis convention throughout the
/// toolkit: height indexes phase-encode lines, width indexes
/// frequency-encode points.
template <typename T>
class ComplexSequence {
public:
    ComplexSequence() = default;

    ComplexSequence(std::int64_t frames, std::int64_t height, std::int64_t width)
        : frames_(frames), height_(height), width_(width) {
        if (frames < 1 || height < 1 || width < 1) {
            throw std::invalid_argument("ComplexSequence: all dimensions must be >= 1, got (" +
                                        std::to_string(frames) + "," + std::to_string(height) + "," +
                                        std::to_string(width) + ")");
        }
        data_.assign(static_cast<std::size_t>(frames * height * width), std::complex<T>(0, 0));
    }

    std::int64_t frames() const { return frames_; }
    std::int64_t height() const { return height_; }
    std::int64_t width() const { return width_; }
    std::int64_t numel() const { return frames_ * height_ * width_; }

    std::complex<T>* data() { return data_.data(); }
    const std::complex<T>* data() const { return data_.data(); }
    std::complex<T>* frame(std::int64_t t) { return data_.data() + t * height_ * width_; }
    const std::complex<T>* frame(std::int64_t t) const { return data_.data() + t * height_ * width_; }

    std::complex<T>& at(std::int64_t t, std::int64_t y, std::int64_t x) {
        return data_[static_cast<std::size_t>((t * height_ + y) * width_ + x)];
    }
    const std::complex<T>& at(std::int64_t t, std::int64_t y, std::int64_t x) const {
        return data_[static_cast<std::size_t>((t * height_ + y) * width_ + x)];
    }

    bool same_shape(const ComplexSequence& o) const {
        return frames_ == o.frames_ && height_ == o.height_ && width_ == o.width_;
    }

    bool all_finite() const {
        for (const auto& v : data_) {
            if (!std::isfinite(static_cast<double>(v.real())) || !std::isfinite(static_cast<double>(v.imag())))
                return false;
        }
        return true;
    }

    /// Per-frame magnitude as a (T, H, W) tensor.
    Tensor<T> magnitude() const {
        Tensor<T> out({frames_, height_, width_});
        T* d = out.data();
        for (std::int64_t i = 0; i < numel(); ++i) d[i] = std::abs(data_[static_cast<std::size_t>(i)]);
        return out;
    }

    /// Network view: (T, 2, H, W) with channel 0 the real part and channel 1
    /// the imaginary part.
    Tensor<T> to_channels() const {
        Tensor<T> out({frames_, 2, height_, width_});
        T* d = out.data();
        const std::int64_t plane = height_ * width_;
        for (std::int64_t t = 0; t < frames_; ++t) {
            const std::complex<T>* src = frame(t);
            T* re = d + (t * 2) * plane;
            T* im = re + plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                re[i] = src[i].real();
                im[i] = src[i].imag();
            }
        }
        return out;
    }

    static ComplexSequence from_channels(const Tensor<T>& channels) {
        if (channels.rank() != 4 || channels.dim(1) != 2) {
            throw std::invalid_argument("ComplexSequence: expected a (T,2,H,W) tensor, got " +
                                        Tensor<T>::shape_string(channels.shape()));
        }
        ComplexSequence seq(channels.dim(0), channels.dim(2), channels.dim(3));
        const std::int64_t plane = seq.height_ * seq.width_;
        const T* d = channels.data();
        for (std::int64_t t = 0; t < seq.frames_; ++t) {
            const T* re = d + (t * 2) * plane;
            const T* im = re + plane;
            std::complex<T>* dst = seq.frame(t);
            for (std::int64_t i = 0; i < plane; ++i) dst[i] = std::complex<T>(re[i], im[i]);
        }
        return seq;
    }

    template <typename U>
    ComplexSequence<U> cast() const {
        ComplexSequence<U> out(frames_, height_, width_);
        for (std::int64_t i = 0; i < numel(); ++i) {
            const auto& v = data_[static_cast<std::size_t>(i)];
            out.data()[i] = std::complex<U>(static_cast<U>(v.real()), static_cast<U>(v.imag()));
        }
        return out;
    }

private:
    std::int64_t frames_ = 0;
    std::int64_t height_ = 0;
    std::int64_t width_ = 0;
    std::vector<std::complex<T>> data_;
};

/// Per-frame binary acquisition pattern over the k-space grid. Generated
/// masks are constant along the frequency-encoding axis within each sampled
/// phase-encode line; hand-built masks may be arbitrary {0,1} patterns.
class SamplingMask {
public:
    SamplingMask() = default;
    SamplingMask(std::int64_t frames, std::int64_t height, std::int64_t width)
        : frames_(frames), height_(height), width_(width),
          data_(static_cast<std::size_t>(frames * height * width), 0) {}

    std::int64_t frames() const { return frames_; }
    std::int64_t height() const { return height_; }
    std::int64_t width() const { return width_; }
    std::int64_t numel() const { return frames_ * height_ * width_; }

    std::uint8_t* data() { return data_.data(); }
    const std::uint8_t* data() const { return data_.data(); }

    std::uint8_t& at(std::int64_t t, std::int64_t y, std::int64_t x) {
        return data_[static_cast<std::size_t>((t * height_ + y) * width_ + x)];
    }
    std::uint8_t at(std::int64_t t, std::int64_t y, std::int64_t x) const {
        return data_[static_cast<std::size_t>((t * height_ + y) * width_ + x)];
    }

    void set_line(std::int64_t t, std::int64_t pe_line) {
        std::uint8_t* row = data_.data() + (t * height_ + pe_line) * width_;
        std::fill(row, row + width_, std::uint8_t(1));
    }
    bool line_active(std::int64_t t, std::int64_t pe_line) const {
        return at(t, pe_line, 0) != 0;
    }

    std::int64_t lines_per_frame(std::int64_t t) const {
        std::int64_t n = 0;
        for (std::int64_t y = 0; y < height_; ++y) n += line_active(t, y) ? 1 : 0;
        return n;
    }

    void fill(std::uint8_t v) { std::fill(data_.begin(), data_.end(), v); }

    /// Index range [lo, hi) of the block of center phase-encode lines.
    static std::pair<std::int64_t, std::int64_t> center_block(std::int64_t num_pe_lines, std::int64_t block = 8);

private:
    std::int64_t frames_ = 0;
    std::int64_t height_ = 0;
    std::int64_t width_ = 0;
    std::vector<std::uint8_t> data_;
};

/// Data-consistency weighting: the noiseless limit replaces acquired
/// samples outright, a finite lambda0 blends them.
struct DcMode {
    bool exact = true;
    double lambda0 = 0.0;

    static DcMode exact_mode() { return DcMode{true, 0.0}; }
    static DcMode with_lambda0(double value) {
        if (value < 0.0) {
            throw std::invalid_argument("DcMode: lambda0 must be nonnegative, got " + std::to_string(value));
        }
        return DcMode{false, value};
    }
};

/// Acquired k-space samples plus the sampling pattern they were taken on.
/// samples are zero outside the acquired set.
template <typename T>
struct KSpaceData {
    ComplexSequence<T> samples;
    SamplingMask mask;
    DcMode dc = DcMode::exact_mode();
};

/// Centered unitary 2D Fourier transform applied per frame: DC sits at
/// (H/2, W/2) and a 1/sqrt(H*W) factor makes the round trip the identity.
template <typename T>
ComplexSequence<T> fft2c(const ComplexSequence<T>& x);
template <typename T>
ComplexSequence<T> ifft2c(const ComplexSequence<T>& k);

/// Cartesian variable-density mask: per frame, the 8 phase-encode lines
/// around DC are always acquired and the remaining budget of
/// round(num_pe_lines/acceleration) lines is drawn without replacement with
/// probability proportional to a zero-mean Gaussian over the signed line
/// offset from DC (std = sigma_fraction * num_pe_lines).
SamplingMask generate_mask(std::int64_t num_pe_lines, std::int64_t num_fe_points, std::int64_t num_frames,
                           double acceleration, double sigma_fraction, std::uint64_t seed);

/// Retrospective undersampling: y = mask .* fft2c(x), x_u = ifft2c(y).
template <typename T>
struct Undersampled {
    ComplexSequence<T> zero_filled;
    KSpaceData<T> kspace;
};
template <typename T>
Undersampled<T> undersample(const ComplexSequence<T>& x, const SamplingMask& mask,
                            DcMode dc = DcMode::exact_mode());

/// Closed-form data-consistency step. In k-space, positions outside the
/// acquired set pass through; acquired positions become
/// (k + lambda0*y)/(1+lambda0), or y outright in exact mode.
template <typename T>
ComplexSequence<T> data_consistency(const ComplexSequence<T>& z, const KSpaceData<T>& y);

/// The map is linear and self-adjoint in z (a real diagonal k-space filter
/// under a unitary transform), so the backward pass is the same filter
/// applied to the incoming gradient with the acquired data dropped.
template <typename T>
ComplexSequence<T> data_consistency_backward(const ComplexSequence<T>& grad_out, const SamplingMask& mask,
                                             DcMode dc);

}  // namespace crnn
