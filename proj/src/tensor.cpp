#include "crnn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace crnn {

namespace {

template <typename T>
void axpy(T* __restrict__ dst, const T* __restrict__ src, T w, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) dst[i] += w * src[i];
}

template <typename T>
T dot(const T* __restrict__ a, const T* __restrict__ b, std::int64_t n) {
    T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    std::int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

template <typename T>
void check_conv_shapes(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias) {
    if (input.rank() != 4 || weight.rank() != 4) {
        throw std::invalid_argument("conv2d: expected input (B,C_in,H,W) and weight (C_out,C_in,k,k), got input " +
                                    Tensor<T>::shape_string(input.shape()) + " and weight " +
                                    Tensor<T>::shape_string(weight.shape()));
    }
    if (input.dim(1) != weight.dim(1)) {
        throw std::invalid_argument("conv2d: input channel count " + std::to_string(input.dim(1)) +
                                    " does not match weight channel count " + std::to_string(weight.dim(1)) +
                                    " (input " + Tensor<T>::shape_string(input.shape()) + ", weight " +
                                    Tensor<T>::shape_string(weight.shape()) + ")");
    }
    if (weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0) {
        throw std::invalid_argument("conv2d: kernel must be square with odd size, got weight " +
                                    Tensor<T>::shape_string(weight.shape()));
    }
    if (bias && (bias->rank() != 1 || bias->dim(0) != weight.dim(0))) {
        throw std::invalid_argument("conv2d: bias shape " + Tensor<T>::shape_string(bias->shape()) +
                                    " does not match output channel count " + std::to_string(weight.dim(0)));
    }
}

/// Core shifted-plane accumulation: for every kernel tap, adds
/// w * (src plane shifted by the tap offset) into the destination plane.
/// Implements cross-correlation with zero padding of floor(k/2).
template <typename T>
void accumulate_taps(T* out_plane, const T* in_plane, const T* w_taps, std::int64_t H, std::int64_t W,
                     std::int64_t k, bool flip) {
    const std::int64_t p = k / 2;
    for (std::int64_t ky = 0; ky < k; ++ky) {
        for (std::int64_t kx = 0; kx < k; ++kx) {
            const T w = flip ? w_taps[(k - 1 - ky) * k + (k - 1 - kx)] : w_taps[ky * k + kx];
            if (w == T(0)) continue;
            const std::int64_t dy = ky - p;
            const std::int64_t dx = kx - p;
            const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
            const std::int64_t y1 = std::min<std::int64_t>(H, H - dy);
            const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
            const std::int64_t x1 = std::min<std::int64_t>(W, W - dx);
            for (std::int64_t y = y0; y < y1; ++y) {
                axpy(out_plane + y * W + x0, in_plane + (y + dy) * W + (x0 + dx), w, x1 - x0);
            }
        }
    }
}

/// One batch entry of the forward map: out_entry += conv(in_entry, weight).
template <typename T>
void conv_entry_forward(T* out_entry, const T* in_entry, const T* wd, std::int64_t C_in, std::int64_t C_out,
                        std::int64_t H, std::int64_t W, std::int64_t k) {
    const std::int64_t plane = H * W;
    for (std::int64_t co = 0; co < C_out; ++co) {
        T* out_plane = out_entry + co * plane;
        for (std::int64_t ci = 0; ci < C_in; ++ci) {
            accumulate_taps(out_plane, in_entry + ci * plane, wd + (co * C_in + ci) * k * k, H, W, k,
                            /*flip=*/false);
        }
    }
}

template <typename T>
void conv_entry_backward_input(T* gin_entry, const T* gout_entry, const T* wd, std::int64_t C_in,
                               std::int64_t C_out, std::int64_t H, std::int64_t W, std::int64_t k) {
    const std::int64_t plane = H * W;
    // The adjoint of cross-correlation is correlation with the flipped kernel.
    for (std::int64_t ci = 0; ci < C_in; ++ci) {
        T* in_plane = gin_entry + ci * plane;
        for (std::int64_t co = 0; co < C_out; ++co) {
            accumulate_taps(in_plane, gout_entry + co * plane, wd + (co * C_in + ci) * k * k, H, W, k,
                            /*flip=*/true);
        }
    }
}

template <typename T>
void conv_entry_backward_weight(T* gw, const T* gout_entry, const T* in_entry, std::int64_t C_in,
                                std::int64_t C_out, std::int64_t H, std::int64_t W, std::int64_t k) {
    const std::int64_t p = k / 2;
    const std::int64_t plane = H * W;
    for (std::int64_t co = 0; co < C_out; ++co) {
        const T* go_plane = gout_entry + co * plane;
        for (std::int64_t ci = 0; ci < C_in; ++ci) {
            const T* in_plane = in_entry + ci * plane;
            T* taps = gw + (co * C_in + ci) * k * k;
            for (std::int64_t ky = 0; ky < k; ++ky) {
                for (std::int64_t kx = 0; kx < k; ++kx) {
                    const std::int64_t dy = ky - p;
                    const std::int64_t dx = kx - p;
                    const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
                    const std::int64_t y1 = std::min<std::int64_t>(H, H - dy);
                    const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
                    const std::int64_t x1 = std::min<std::int64_t>(W, W - dx);
                    T acc = 0;
                    for (std::int64_t y = y0; y < y1; ++y) {
                        acc += dot(go_plane + y * W + x0, in_plane + (y + dy) * W + (x0 + dx), x1 - x0);
                    }
                    taps[ky * k + kx] += acc;
                }
            }
        }
    }
}

template <typename T>
void check_entry_index(const Tensor<T>& t, std::int64_t index, const char* what) {
    if (index < 0 || index >= t.dim(0)) {
        throw std::out_of_range(std::string("conv2d: ") + what + " batch index " + std::to_string(index) +
                                " out of range for shape " + Tensor<T>::shape_string(t.shape()));
    }
}

}  // namespace

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
    check_conv_shapes(input, weight, &bias);
    const std::int64_t B = input.dim(0), C_out = weight.dim(0), H = input.dim(2), W = input.dim(3);
    Tensor<T> out({B, C_out, H, W});
    T* od = out.data();
    const T* bd = bias.data();
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t co = 0; co < C_out; ++co) {
            T* plane = od + (b * C_out + co) * H * W;
            std::fill(plane, plane + H * W, bd[co]);
        }
    }
    conv2d_accumulate(out, input, weight);
    return out;
}

template <typename T>
void conv2d_accumulate(Tensor<T>& out, const Tensor<T>& input, const Tensor<T>& weight) {
    check_conv_shapes(input, weight, static_cast<const Tensor<T>*>(nullptr));
    const std::int64_t B = input.dim(0), C_in = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::int64_t C_out = weight.dim(0), k = weight.dim(2);
    if (out.shape() != std::vector<std::int64_t>{B, C_out, H, W}) {
        throw std::invalid_argument("conv2d: output shape " + Tensor<T>::shape_string(out.shape()) +
                                    " does not match expected " +
                                    Tensor<T>::shape_string({B, C_out, H, W}));
    }
    const T* id = input.data();
    const T* wd = weight.data();
    T* od = out.data();
    const std::int64_t plane = H * W;
    for (std::int64_t b = 0; b < B; ++b) {
        conv_entry_forward(od + b * C_out * plane, id + b * C_in * plane, wd, C_in, C_out, H, W, k);
    }
}

template <typename T>
void conv2d_accumulate_frame(Tensor<T>& out, std::int64_t out_index, const Tensor<T>& input,
                             std::int64_t in_index, const Tensor<T>& weight) {
    check_conv_shapes(input, weight, static_cast<const Tensor<T>*>(nullptr));
    check_entry_index(out, out_index, "output");
    check_entry_index(input, in_index, "input");
    const std::int64_t C_in = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::int64_t C_out = weight.dim(0), k = weight.dim(2);
    const std::int64_t plane = H * W;
    conv_entry_forward(out.data() + out_index * C_out * plane, input.data() + in_index * C_in * plane,
                       weight.data(), C_in, C_out, H, W, k);
}

template <typename T>
void conv2d_backward_input(Tensor<T>& grad_input, const Tensor<T>& grad_out, const Tensor<T>& weight) {
    const std::int64_t B = grad_out.dim(0), C_out = grad_out.dim(1), H = grad_out.dim(2), W = grad_out.dim(3);
    const std::int64_t C_in = weight.dim(1), k = weight.dim(2);
    if (grad_out.dim(1) != weight.dim(0)) {
        throw std::invalid_argument("conv2d backward: grad_out channels " + std::to_string(C_out) +
                                    " do not match weight output channels " + std::to_string(weight.dim(0)));
    }
    if (grad_input.shape() != std::vector<std::int64_t>{B, C_in, H, W}) {
        throw std::invalid_argument("conv2d backward: grad_input shape " +
                                    Tensor<T>::shape_string(grad_input.shape()) + " does not match expected " +
                                    Tensor<T>::shape_string({B, C_in, H, W}));
    }
    const T* gd = grad_out.data();
    const T* wd = weight.data();
    T* gid = grad_input.data();
    const std::int64_t plane = H * W;
    for (std::int64_t b = 0; b < B; ++b) {
        conv_entry_backward_input(gid + b * C_in * plane, gd + b * C_out * plane, wd, C_in, C_out, H, W, k);
    }
}

template <typename T>
void conv2d_backward_input_frame(Tensor<T>& grad_input, std::int64_t gi_index, const Tensor<T>& grad_out,
                                 std::int64_t go_index, const Tensor<T>& weight) {
    check_entry_index(grad_input, gi_index, "grad_input");
    check_entry_index(grad_out, go_index, "grad_out");
    const std::int64_t C_in = weight.dim(1), C_out = weight.dim(0), k = weight.dim(2);
    const std::int64_t H = grad_out.dim(2), W = grad_out.dim(3);
    const std::int64_t plane = H * W;
    conv_entry_backward_input(grad_input.data() + gi_index * C_in * plane,
                              grad_out.data() + go_index * C_out * plane, weight.data(), C_in, C_out, H, W, k);
}

template <typename T>
void conv2d_backward_weight(Tensor<T>& grad_weight, const Tensor<T>& grad_out, const Tensor<T>& saved_input) {
    const std::int64_t B = grad_out.dim(0), C_out = grad_out.dim(1), H = grad_out.dim(2), W = grad_out.dim(3);
    const std::int64_t C_in = saved_input.dim(1), k = grad_weight.dim(2);
    if (saved_input.dim(0) != B || saved_input.dim(2) != H || saved_input.dim(3) != W) {
        throw std::invalid_argument("conv2d backward: saved input shape " +
                                    Tensor<T>::shape_string(saved_input.shape()) +
                                    " is inconsistent with grad_out shape " +
                                    Tensor<T>::shape_string(grad_out.shape()));
    }
    if (grad_weight.shape() != std::vector<std::int64_t>{C_out, C_in, k, k}) {
        throw std::invalid_argument("conv2d backward: grad_weight shape " +
                                    Tensor<T>::shape_string(grad_weight.shape()) + " does not match expected " +
                                    Tensor<T>::shape_string({C_out, C_in, k, k}));
    }
    const std::int64_t plane = H * W;
    const T* gd = grad_out.data();
    const T* id = saved_input.data();
    T* gw = grad_weight.data();
    for (std::int64_t b = 0; b < B; ++b) {
        conv_entry_backward_weight(gw, gd + b * C_out * plane, id + b * C_in * plane, C_in, C_out, H, W, k);
    }
}

template <typename T>
void conv2d_backward_weight_frame(Tensor<T>& grad_weight, const Tensor<T>& grad_out, std::int64_t go_index,
                                  const Tensor<T>& input, std::int64_t in_index) {
    check_entry_index(grad_out, go_index, "grad_out");
    check_entry_index(input, in_index, "input");
    const std::int64_t C_out = grad_weight.dim(0), C_in = grad_weight.dim(1), k = grad_weight.dim(2);
    const std::int64_t H = grad_out.dim(2), W = grad_out.dim(3);
    const std::int64_t plane = H * W;
    conv_entry_backward_weight(grad_weight.data(), grad_out.data() + go_index * C_out * plane,
                               input.data() + in_index * C_in * plane, C_in, C_out, H, W, k);
}

template <typename T>
void conv2d_backward_bias(Tensor<T>& grad_bias, const Tensor<T>& grad_out) {
    const std::int64_t B = grad_out.dim(0), C_out = grad_out.dim(1);
    const std::int64_t plane = grad_out.dim(2) * grad_out.dim(3);
    if (grad_bias.shape() != std::vector<std::int64_t>{C_out}) {
        throw std::invalid_argument("conv2d backward: grad_bias shape " +
                                    Tensor<T>::shape_string(grad_bias.shape()) + " does not match channel count " +
                                    std::to_string(C_out));
    }
    const T* gd = grad_out.data();
    T* gb = grad_bias.data();
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t co = 0; co < C_out; ++co) {
            const T* go_plane = gd + (b * C_out + co) * plane;
            T acc = 0;
            for (std::int64_t i = 0; i < plane; ++i) acc += go_plane[i];
            gb[co] += acc;
        }
    }
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& saved_input, const Tensor<T>& weight) {
    check_conv_shapes(saved_input, weight, static_cast<const Tensor<T>*>(nullptr));
    Conv2dGrads<T> grads{Tensor<T>(saved_input.shape()), Tensor<T>(weight.shape()), Tensor<T>({weight.dim(0)})};
    conv2d_backward_input(grads.input, grad_out, weight);
    conv2d_backward_weight(grads.weight, grad_out, saved_input);
    conv2d_backward_bias(grads.bias, grad_out);
    return grads;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
    Tensor<T> out = input;
    relu_inplace(out);
    return out;
}

template <typename T>
void relu_inplace(Tensor<T>& x) {
    T* d = x.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) d[i] = d[i] > T(0) ? d[i] : T(0);
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& saved_input) {
    if (!grad_out.same_shape(saved_input)) {
        throw std::invalid_argument("relu backward: grad shape " + Tensor<T>::shape_string(grad_out.shape()) +
                                    " does not match input shape " + Tensor<T>::shape_string(saved_input.shape()));
    }
    Tensor<T> out(grad_out.shape());
    const T* g = grad_out.data();
    const T* x = saved_input.data();
    T* o = out.data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) o[i] = x[i] > T(0) ? g[i] : T(0);
    return out;
}

template <typename T>
void relu_mask_inplace(Tensor<T>& grad, const Tensor<T>& saved_output) {
    if (!grad.same_shape(saved_output)) {
        throw std::invalid_argument("relu backward: grad shape " + Tensor<T>::shape_string(grad.shape()) +
                                    " does not match activation shape " +
                                    Tensor<T>::shape_string(saved_output.shape()));
    }
    T* g = grad.data();
    const T* y = saved_output.data();
    const std::int64_t n = grad.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        if (!(y[i] > T(0))) g[i] = T(0);
    }
}

template <typename T>
Tensor<T> he_init(std::vector<std::int64_t> shape, std::int64_t fan_in, std::uint64_t seed) {
    if (fan_in <= 0) {
        throw std::invalid_argument("he_init: fan_in must be positive, got " + std::to_string(fan_in));
    }
    Tensor<T> out(std::move(shape));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, stddev);
    T* d = out.data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) d[i] = static_cast<T>(normal(rng));
    return out;
}

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    for (const auto& e : entries) {
        os << e.name << ": max_rel=" << e.max_rel_error << " max_abs=" << e.max_abs_error << " ("
           << e.checked_coords << " coords)\n";
    }
    os << "overall max_rel=" << max_rel_error << "\n";
    return os.str();
}

GradCheckReport grad_check(const std::function<double(const ParameterStore<double>&)>& f,
                           ParameterStore<double>& params, double epsilon, std::int64_t coord_limit,
                           int num_probes, std::uint64_t probe_seed) {
    GradCheckReport report;
    const double floor = 1e-4;  // rel error below this magnitude degenerates to absolute
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        GradCheckEntry entry;
        entry.name = p.name;
        double* theta = p.value.data();
        const double* analytic = p.grad.data();
        const std::int64_t n = p.value.numel();

        auto record = [&](double a, double num) {
            const double abs_err = std::abs(a - num);
            const double rel = abs_err / std::max({std::abs(a), std::abs(num), floor});
            entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
            entry.max_rel_error = std::max(entry.max_rel_error, rel);
            ++entry.checked_coords;
        };

        if (n <= coord_limit) {
            for (std::int64_t j = 0; j < n; ++j) {
                const double saved = theta[j];
                theta[j] = saved + epsilon;
                const double fp = f(params);
                theta[j] = saved - epsilon;
                const double fm = f(params);
                theta[j] = saved;
                record(analytic[j], (fp - fm) / (2.0 * epsilon));
            }
        } else {
            std::mt19937_64 rng(probe_seed + 0x100000001ull * (pi + 1));
            std::normal_distribution<double> normal(0.0, 1.0);
            std::vector<double> direction(static_cast<std::size_t>(n));
            std::vector<double> saved(theta, theta + n);
            for (int probe = 0; probe < num_probes; ++probe) {
                double norm = 0.0;
                for (auto& v : direction) {
                    v = normal(rng);
                    norm += v * v;
                }
                norm = std::sqrt(norm);
                double analytic_dir = 0.0;
                for (std::int64_t j = 0; j < n; ++j) {
                    direction[j] /= norm;
                    analytic_dir += analytic[j] * direction[j];
                }
                for (std::int64_t j = 0; j < n; ++j) theta[j] = saved[j] + epsilon * direction[j];
                const double fp = f(params);
                for (std::int64_t j = 0; j < n; ++j) theta[j] = saved[j] - epsilon * direction[j];
                const double fm = f(params);
                std::copy(saved.begin(), saved.end(), theta);
                record(analytic_dir, (fp - fm) / (2.0 * epsilon));
            }
        }
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

#define CRNN_INSTANTIATE_OPS(T)                                                                          \
    template Tensor<T> conv2d_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);         \
    template void conv2d_accumulate<T>(Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
    template Conv2dGrads<T> conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);   \
    template void conv2d_backward_input<T>(Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
    template void conv2d_backward_weight<T>(Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
    template void conv2d_backward_bias<T>(Tensor<T>&, const Tensor<T>&);                                 \
    template void conv2d_accumulate_frame<T>(Tensor<T>&, std::int64_t, const Tensor<T>&, std::int64_t,  \
                                             const Tensor<T>&);                                          \
    template void conv2d_backward_input_frame<T>(Tensor<T>&, std::int64_t, const Tensor<T>&,            \
                                                 std::int64_t, const Tensor<T>&);                        \
    template void conv2d_backward_weight_frame<T>(Tensor<T>&, const Tensor<T>&, std::int64_t,           \
                                                  const Tensor<T>&, std::int64_t);                       \
    template Tensor<T> relu<T>(const Tensor<T>&);                                                       \
    template Tensor<T> relu_backward<T>(const Tensor<T>&, const Tensor<T>&);                            \
    template void relu_inplace<T>(Tensor<T>&);                                                          \
    template void relu_mask_inplace<T>(Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> he_init<T>(std::vector<std::int64_t>, std::int64_t, std::uint64_t);

CRNN_INSTANTIATE_OPS(float)
CRNN_INSTANTIATE_OPS(double)

#undef CRNN_INSTANTIATE_OPS

}  // namespace crnn
