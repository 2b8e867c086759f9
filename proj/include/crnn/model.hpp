#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "crnn/kspace.hpp"
#include "crnn/ops.hpp"
#include "crnn/tensor.hpp"

namespace crnn {

/// Which recurrences the reconstruction block uses. The full network runs a
/// bidirectional time-and-iteration unit followed by three iteration units;
/// the ablations swap the first layer for an iteration-only unit or the
/// middle layers for plain convolutions.
enum class Variant { full, iteration_only, temporal_only };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct NetworkConfig {
    std::int64_t n_f = 64;        // filters per recurrent layer
    std::int64_t k = 3;           // square kernel size, odd
    std::int64_t iterations = 10; // unrolled iteration count used in training
    Variant variant = Variant::full;
    DcMode dc = DcMode::exact_mode();

    void validate() const;
    bool operator==(const NetworkConfig& o) const {
        return n_f == o.n_f && k == o.k && iterations == o.iterations && variant == o.variant &&
               dc.exact == o.dc.exact && (dc.exact || dc.lambda0 == o.dc.lambda0);
    }
};

enum class LayerKind { bcrnn_time_iter, bcrnn_time, crnn_iter, cnn_relu, cnn_linear };

struct LayerSpec {
    LayerKind kind;
    std::string name;
    std::int64_t in_channels;
    std::int64_t out_channels;
    bool carries_iter_hidden() const {
        return kind == LayerKind::bcrnn_time_iter || kind == LayerKind::crnn_iter;
    }
};

/// The fixed 5-layer layout for a variant.
std::vector<LayerSpec> layer_layout(const NetworkConfig& cfg);

struct ParamSpec {
    std::string name;
    std::vector<std::int64_t> shape;
    std::int64_t fan_in;  // 0 for zero-initialized biases
};

/// Canonical parameter list (names, shapes, init fan-in) in layout order.
std::vector<ParamSpec> parameter_specs(const NetworkConfig& cfg);

/// He-normal weights, zero biases, deterministic under seed.
template <typename T>
ParameterStore<T> init_parameters(const NetworkConfig& cfg, std::uint64_t seed);

/// Throws if params does not carry exactly the names and shapes the config
/// demands.
template <typename T>
void validate_parameters(const NetworkConfig& cfg, const ParameterStore<T>& params);

/// Recurrent activations carried from one unrolled iteration to the next,
/// one tensor per layer that has an iteration-hidden connection (empty
/// tensors elsewhere). Zero at iteration 1.
template <typename T>
struct HiddenState {
    std::vector<Tensor<T>> iter_hidden;

    static HiddenState zeros(const NetworkConfig& cfg, std::int64_t frames, std::int64_t height,
                             std::int64_t width);
};

template <typename T>
struct CrnnIterParams {
    const Tensor<T>* w_input;  // (n_f, c_in, k, k)
    const Tensor<T>* w_iter;   // (n_f, n_f, k, k)
    const Tensor<T>* bias;     // (n_f)
};

/// One iteration-recurrent unit update: ReLU of the input-to-hidden plus
/// iteration-hidden convolutions plus bias, applied framewise with time as
/// the batch axis. input (T, c_in, H, W), hidden_prev_iter (T, n_f, H, W).
template <typename T>
Tensor<T> crnn_i_step(const Tensor<T>& input, const Tensor<T>& hidden_prev_iter, const CrnnIterParams<T>& p);

template <typename T>
struct BcrnnParams {
    const Tensor<T>* w_input;   // (n_f, c_in, k, k), shared between directions
    const Tensor<T>* w_time;    // (n_f, n_f, k, k), shared between directions
    const Tensor<T>* w_iter;    // (n_f, n_f, k, k), shared; nullptr drops iteration recurrence
    const Tensor<T>* bias_fwd;  // (n_f)
    const Tensor<T>* bias_bwd;  // (n_f)
};

/// Bidirectional time-recurrent unit update. Runs the forward recursion
/// t = 1..T and the backward recursion t = T..1 with shared convolution
/// weights and per-direction biases, then sums the directions. Boundary
/// hidden states are zero. save_fwd/save_bwd, when given, receive the
/// directional activations (needed for backprop through time).
template <typename T>
Tensor<T> bcrnn_ti_step(const Tensor<T>& input, const Tensor<T>& hidden_prev_iter, const BcrnnParams<T>& p,
                        Tensor<T>* save_fwd = nullptr, Tensor<T>* save_bwd = nullptr);

/// Optional recordings made during a forward pass.
template <typename T>
struct ForwardTrace {
    bool record_images = false;  // keep x_rec after every iteration
    int record_layer = 0;        // 1..4: keep that layer's activations per iteration

    std::vector<ComplexSequence<T>> per_iteration;
    std::vector<Tensor<T>> layer_activations;
};

/// Runs the unrolled reconstruction: per iteration the 5-layer block is
/// applied to the previous reconstruction (the zero-filled input at
/// iteration 1), the residual is added and the data-consistency step is
/// applied. Hidden states are carried across iterations. n_test overrides
/// the trained iteration count at inference time.
template <typename T>
ComplexSequence<T> crnn_forward(const ComplexSequence<T>& x_u, const KSpaceData<T>& y,
                                const NetworkConfig& cfg, const ParameterStore<T>& params,
                                std::optional<std::int64_t> n_test = std::nullopt,
                                ForwardTrace<T>* trace = nullptr);

namespace detail {
/// Everything a backward pass needs from the forward pass.
template <typename T>
struct TapeData {
    NetworkConfig cfg;
    SamplingMask mask;
    DcMode dc;
    std::int64_t frames = 0, height = 0, width = 0;
    std::vector<Tensor<T>> block_inputs;                // x_rec^(i-1) as channels, per iteration
    std::vector<std::vector<Tensor<T>>> layer_outputs;  // [iteration][layer 0..3]
    std::vector<Tensor<T>> bcrnn_fwd, bcrnn_bwd;        // directional states, per iteration
};
}  // namespace detail

/// Forward pass that keeps every activation needed to run an exact backward
/// pass through all iterations and time steps.
template <typename T>
class CrnnTape {
public:
    const ComplexSequence<T>& output() const { return output_; }

    /// Accumulates d(loss)/d(theta) into params.grad for the loss whose
    /// gradient with respect to the output is grad_output. params must be
    /// the same store the forward pass ran with.
    void backward(const ComplexSequence<T>& grad_output, ParameterStore<T>& params) const;

private:
    template <typename U>
    friend CrnnTape<U> crnn_forward_tape(const ComplexSequence<U>&, const KSpaceData<U>&,
                                         const NetworkConfig&, const ParameterStore<U>&);

    detail::TapeData<T> data_;
    ComplexSequence<T> output_;
};

template <typename T>
CrnnTape<T> crnn_forward_tape(const ComplexSequence<T>& x_u, const KSpaceData<T>& y,
                              const NetworkConfig& cfg, const ParameterStore<T>& params);

struct LayerCapacity {
    std::string name;
    std::string kind;
    std::vector<std::pair<std::string, std::int64_t>> entries;
    std::int64_t total = 0;
};

struct CapacityReport {
    std::vector<LayerCapacity> layers;
    std::int64_t total = 0;
    std::string to_string() const;
};

/// Element counts per parameter and per layer, honoring the bidirectional
/// weight sharing of the first unit.
CapacityReport count_parameters(const NetworkConfig& cfg);

/// Checkpoint container: a 4-byte little-endian header length, a UTF-8 JSON
/// header carrying the schema version, the config and the named parameter
/// shapes, then raw little-endian 32-bit floats per parameter in header
/// order. Round trips are bit exact.
void checkpoint_save(const ParameterStore<float>& params, const NetworkConfig& cfg, const std::string& path);

struct Checkpoint {
    ParameterStore<float> params;
    NetworkConfig config;
};
Checkpoint checkpoint_load(const std::string& path);

/// JSON round trip for the config, used by checkpoints and run records.
std::string network_config_to_json_string(const NetworkConfig& cfg);
NetworkConfig network_config_from_json_string(const std::string& text);

}  // namespace crnn
