#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "crnn/tensor.hpp"

namespace crnn {

/// 2D convolution in the cross-correlation convention (no kernel flip),
/// stride 1, zero padding of floor(k/2) so the spatial size is preserved.
/// input (B, C_in, H, W), weight (C_out, C_in, k, k), bias (C_out).
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

/// Accumulates conv2d(input, weight) into out without touching the bias.
/// out must already have the forward output shape.
template <typename T>
void conv2d_accumulate(Tensor<T>& out, const Tensor<T>& input, const Tensor<T>& weight);

template <typename T>
struct Conv2dGrads {
    Tensor<T> input;
    Tensor<T> weight;
    Tensor<T> bias;
};

/// Exact adjoints of the linear forward map. grad_bias is the per-channel
/// sum of grad_out.
template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& saved_input,
                               const Tensor<T>& weight);

/// Adjoint pieces used by callers that do not need all three gradients.
template <typename T>
void conv2d_backward_input(Tensor<T>& grad_input, const Tensor<T>& grad_out, const Tensor<T>& weight);
template <typename T>
void conv2d_backward_weight(Tensor<T>& grad_weight, const Tensor<T>& grad_out, const Tensor<T>& saved_input);
template <typename T>
void conv2d_backward_bias(Tensor<T>& grad_bias, const Tensor<T>& grad_out);

/// Single-batch-entry variants used by the temporal recursions: they
/// convolve batch entry in_index of input and accumulate into batch entry
/// out_index of out (and analogously for the adjoints), without slicing
/// copies.
template <typename T>
void conv2d_accumulate_frame(Tensor<T>& out, std::int64_t out_index, const Tensor<T>& input,
                             std::int64_t in_index, const Tensor<T>& weight);
template <typename T>
void conv2d_backward_input_frame(Tensor<T>& grad_input, std::int64_t gi_index, const Tensor<T>& grad_out,
                                 std::int64_t go_index, const Tensor<T>& weight);
template <typename T>
void conv2d_backward_weight_frame(Tensor<T>& grad_weight, const Tensor<T>& grad_out, std::int64_t go_index,
                                  const Tensor<T>& input, std::int64_t in_index);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

/// Passes gradient where input > 0. The subgradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& saved_input);

/// In-place variants used by the recurrent layers.
template <typename T>
void relu_inplace(Tensor<T>& x);
/// Zeroes grad wherever the saved activation output is 0 (equivalent to
/// masking on the pre-activation sign since relu output > 0 iff input > 0).
template <typename T>
void relu_mask_inplace(Tensor<T>& grad, const Tensor<T>& saved_output);

/// He-normal initialization: zero-mean normal with std sqrt(2/fan_in),
/// deterministic under the seed. fan_in is C_in*k*k for convolution weights.
template <typename T>
Tensor<T> he_init(std::vector<std::int64_t> shape, std::int64_t fan_in, std::uint64_t seed);

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::int64_t checked_coords = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0.0;
    bool passed(double tolerance) const { return max_rel_error < tolerance; }
    std::string summary() const;
};

/// Compares the analytic gradients stored in params against central finite
/// differences of f, (f(p+eps) - f(p-eps)) / (2 eps), coordinate by
/// coordinate. Parameters with more than coord_limit elements are probed on
/// random directions instead. Evaluation runs in 64-bit.
GradCheckReport grad_check(const std::function<double(const ParameterStore<double>&)>& f,
                           ParameterStore<double>& params, double epsilon,
                           std::int64_t coord_limit = 512, int num_probes = 6,
                           std::uint64_t probe_seed = 0x9e3779b97f4a7c15ull);

}  // namespace crnn
