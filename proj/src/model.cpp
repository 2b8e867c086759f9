#include "crnn/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace crnn {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint and tensor container I/O assume a little-endian host");

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::iteration_only: return "iteration-only";
        case Variant::temporal_only: return "temporal-only";
    }
    throw std::logic_error("variant_name: unknown variant");
}

Variant variant_from_name(const std::string& name) {
    if (name == "full") return Variant::full;
    if (name == "iteration-only") return Variant::iteration_only;
    if (name == "temporal-only") return Variant::temporal_only;
    throw std::invalid_argument("unknown variant '" + name +
                                "' (expected full, iteration-only or temporal-only)");
}

void NetworkConfig::validate() const {
    if (n_f < 1) throw std::invalid_argument("NetworkConfig: n_f must be >= 1, got " + std::to_string(n_f));
    if (iterations < 1)
        throw std::invalid_argument("NetworkConfig: iteration count must be >= 1, got " +
                                    std::to_string(iterations));
    if (k < 1 || k % 2 == 0)
        throw std::invalid_argument("NetworkConfig: kernel size must be odd and positive, got " +
                                    std::to_string(k));
    if (!dc.exact && dc.lambda0 < 0.0)
        throw std::invalid_argument("NetworkConfig: lambda0 must be nonnegative");
}

namespace {

std::string kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::bcrnn_time_iter: return "bcrnn-t-i";
        case LayerKind::bcrnn_time: return "bcrnn-t";
        case LayerKind::crnn_iter: return "crnn-i";
        case LayerKind::cnn_relu: return "cnn-relu";
        case LayerKind::cnn_linear: return "cnn";
    }
    return "?";
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Resolved parameter pointers for one layer; grad slots are only filled
/// when resolving against a mutable store.
template <typename T>
struct LayerParams {
    const Tensor<T>* w_input = nullptr;
    const Tensor<T>* w_time = nullptr;
    const Tensor<T>* w_iter = nullptr;
    const Tensor<T>* bias = nullptr;
    const Tensor<T>* bias_fwd = nullptr;
    const Tensor<T>* bias_bwd = nullptr;
    Tensor<T>* g_w_input = nullptr;
    Tensor<T>* g_w_time = nullptr;
    Tensor<T>* g_w_iter = nullptr;
    Tensor<T>* g_bias = nullptr;
    Tensor<T>* g_bias_fwd = nullptr;
    Tensor<T>* g_bias_bwd = nullptr;
};

template <typename T>
std::vector<LayerParams<T>> resolve_params(const std::vector<LayerSpec>& layout, const ParameterStore<T>& store) {
    std::vector<LayerParams<T>> out(layout.size());
    for (std::size_t j = 0; j < layout.size(); ++j) {
        const auto& ls = layout[j];
        auto value = [&](const char* role) { return &store.get(ls.name + "." + role).value; };
        auto& lp = out[j];
        lp.w_input = value("w_input");
        switch (ls.kind) {
            case LayerKind::bcrnn_time_iter:
                lp.w_time = value("w_time");
                lp.w_iter = value("w_iter");
                lp.bias_fwd = value("bias_fwd");
                lp.bias_bwd = value("bias_bwd");
                break;
            case LayerKind::bcrnn_time:
                lp.w_time = value("w_time");
                lp.bias_fwd = value("bias_fwd");
                lp.bias_bwd = value("bias_bwd");
                break;
            case LayerKind::crnn_iter:
                lp.w_iter = value("w_iter");
                lp.bias = value("bias");
                break;
            case LayerKind::cnn_relu:
            case LayerKind::cnn_linear:
                lp.bias = value("bias");
                break;
        }
    }
    return out;
}

template <typename T>
void resolve_grads(const std::vector<LayerSpec>& layout, ParameterStore<T>& store,
                   std::vector<LayerParams<T>>& lps) {
    for (std::size_t j = 0; j < layout.size(); ++j) {
        const auto& ls = layout[j];
        auto grad = [&](const char* role) { return &store.get(ls.name + "." + role).grad; };
        auto& lp = lps[j];
        lp.g_w_input = grad("w_input");
        switch (ls.kind) {
            case LayerKind::bcrnn_time_iter:
                lp.g_w_time = grad("w_time");
                lp.g_w_iter = grad("w_iter");
                lp.g_bias_fwd = grad("bias_fwd");
                lp.g_bias_bwd = grad("bias_bwd");
                break;
            case LayerKind::bcrnn_time:
                lp.g_w_time = grad("w_time");
                lp.g_bias_fwd = grad("bias_fwd");
                lp.g_bias_bwd = grad("bias_bwd");
                break;
            case LayerKind::crnn_iter:
                lp.g_w_iter = grad("w_iter");
                lp.g_bias = grad("bias");
                break;
            case LayerKind::cnn_relu:
            case LayerKind::cnn_linear:
                lp.g_bias = grad("bias");
                break;
        }
    }
}

template <typename T>
void add_bias_one_frame(Tensor<T>& x, std::int64_t t, const Tensor<T>& bias) {
    const std::int64_t C = x.dim(1), plane = x.dim(2) * x.dim(3);
    T* d = x.data() + t * C * plane;
    const T* b = bias.data();
    for (std::int64_t c = 0; c < C; ++c) {
        T* p = d + c * plane;
        for (std::int64_t i = 0; i < plane; ++i) p[i] += b[c];
    }
}

template <typename T>
void relu_one_frame(Tensor<T>& x, std::int64_t t) {
    const std::int64_t n = x.dim(1) * x.dim(2) * x.dim(3);
    T* d = x.data() + t * n;
    for (std::int64_t i = 0; i < n; ++i) d[i] = d[i] > T(0) ? d[i] : T(0);
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
    if (!dst.same_shape(src)) {
        throw std::invalid_argument("elementwise add: shape " + Tensor<T>::shape_string(dst.shape()) +
                                    " vs " + Tensor<T>::shape_string(src.shape()));
    }
    T* d = dst.data();
    const T* s = src.data();
    const std::int64_t n = dst.numel();
    for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
}

template <typename T>
void check_step_shapes(const Tensor<T>& input, const Tensor<T>& hidden, const char* what) {
    if (input.rank() != 4 || hidden.rank() != 4) {
        throw std::invalid_argument(std::string(what) + ": expected (T,C,H,W) tensors, got input " +
                                    Tensor<T>::shape_string(input.shape()) + " and hidden " +
                                    Tensor<T>::shape_string(hidden.shape()));
    }
    if (input.dim(0) != hidden.dim(0) || input.dim(2) != hidden.dim(2) || input.dim(3) != hidden.dim(3)) {
        throw std::invalid_argument(std::string(what) + ": input " + Tensor<T>::shape_string(input.shape()) +
                                    " and iteration-hidden " + Tensor<T>::shape_string(hidden.shape()) +
                                    " must share frame count and spatial size");
    }
}

/// hidden == nullptr means a zero hidden state (iteration 1); the w_iter
/// convolution of an all-zero tensor contributes nothing, so it is skipped.
template <typename T>
Tensor<T> bcrnn_apply(const Tensor<T>& input, const Tensor<T>* hidden, const Tensor<T>& w_input,
                      const Tensor<T>& w_time, const Tensor<T>* w_iter, const Tensor<T>& bias_fwd,
                      const Tensor<T>& bias_bwd, Tensor<T>* save_fwd, Tensor<T>* save_bwd) {
    const std::int64_t frames = input.dim(0), H = input.dim(2), W = input.dim(3);
    const std::int64_t n_f = w_input.dim(0);

    // Both directions share the input-to-hidden and iteration-hidden terms.
    Tensor<T> base({frames, n_f, H, W});
    conv2d_accumulate(base, input, w_input);
    if (w_iter && hidden) conv2d_accumulate(base, *hidden, *w_iter);

    Tensor<T> fwd = base;
    for (std::int64_t t = 0; t < frames; ++t) {
        if (t > 0) conv2d_accumulate_frame(fwd, t, fwd, t - 1, w_time);
        add_bias_one_frame(fwd, t, bias_fwd);
        relu_one_frame(fwd, t);
    }

    Tensor<T> bwd = std::move(base);
    for (std::int64_t t = frames - 1; t >= 0; --t) {
        if (t < frames - 1) conv2d_accumulate_frame(bwd, t, bwd, t + 1, w_time);
        add_bias_one_frame(bwd, t, bias_bwd);
        relu_one_frame(bwd, t);
    }

    Tensor<T> out = fwd;
    add_into(out, bwd);
    if (save_fwd) *save_fwd = std::move(fwd);
    if (save_bwd) *save_bwd = std::move(bwd);
    return out;
}

template <typename T>
Tensor<T> crnn_i_apply(const Tensor<T>& input, const Tensor<T>* hidden, const Tensor<T>& w_input,
                       const Tensor<T>* w_iter, const Tensor<T>& bias) {
    Tensor<T> out = conv2d_forward(input, w_input, bias);
    if (w_iter && hidden) conv2d_accumulate(out, *hidden, *w_iter);
    relu_inplace(out);
    return out;
}

template <typename T>
void relu_mask_one_frame(Tensor<T>& grad, const Tensor<T>& saved_output, std::int64_t t) {
    const std::int64_t n = grad.dim(1) * grad.dim(2) * grad.dim(3);
    T* g = grad.data() + t * n;
    const T* y = saved_output.data() + t * n;
    for (std::int64_t i = 0; i < n; ++i) {
        if (!(y[i] > T(0))) g[i] = T(0);
    }
}

/// Backprop through time for one bidirectional unit at one iteration.
/// g_comb is the gradient on the summed directional output; both chains
/// receive it. Accumulates parameter gradients and the gradients flowing to
/// the layer input (g_input) and, when requested, to the previous
/// iteration's combined output (g_hidden_prev).
template <typename T>
void bcrnn_backward(const Tensor<T>& g_comb, const Tensor<T>& fwd, const Tensor<T>& bwd,
                    const Tensor<T>& input, const Tensor<T>* hidden_prev, const LayerParams<T>& lp,
                    Tensor<T>& g_input, Tensor<T>* g_hidden_prev) {
    const std::int64_t frames = g_comb.dim(0);

    auto run_direction = [&](bool forward_dir) {
        const Tensor<T>& dir_act = forward_dir ? fwd : bwd;
        Tensor<T>* g_dir_bias = forward_dir ? lp.g_bias_fwd : lp.g_bias_bwd;

        Tensor<T> gz = g_comb;
        if (forward_dir) {
            // fwd[t] feeds fwd[t+1]; walk time backwards.
            for (std::int64_t t = frames - 1; t >= 0; --t) {
                if (t < frames - 1) conv2d_backward_input_frame(gz, t, gz, t + 1, *lp.w_time);
                relu_mask_one_frame(gz, dir_act, t);
            }
        } else {
            // bwd[t] feeds bwd[t-1]; walk time forwards.
            for (std::int64_t t = 0; t < frames; ++t) {
                if (t > 0) conv2d_backward_input_frame(gz, t, gz, t - 1, *lp.w_time);
                relu_mask_one_frame(gz, dir_act, t);
            }
        }

        conv2d_backward_weight(*lp.g_w_input, gz, input);
        conv2d_backward_bias(*g_dir_bias, gz);
        conv2d_backward_input(g_input, gz, *lp.w_input);
        if (lp.w_iter && hidden_prev) conv2d_backward_weight(*lp.g_w_iter, gz, *hidden_prev);
        if (lp.w_iter && g_hidden_prev) conv2d_backward_input(*g_hidden_prev, gz, *lp.w_iter);
        // Time-recurrent weight: pre-activation at frame t reads the
        // neighboring directional state.
        for (std::int64_t t = 0; t < frames; ++t) {
            const std::int64_t neighbor = forward_dir ? t - 1 : t + 1;
            if (neighbor < 0 || neighbor >= frames) continue;
            conv2d_backward_weight_frame(*lp.g_w_time, gz, t, dir_act, neighbor);
        }
    };

    run_direction(true);
    run_direction(false);
}

}  // namespace

std::vector<LayerSpec> layer_layout(const NetworkConfig& cfg) {
    cfg.validate();
    std::vector<LayerSpec> layout;
    switch (cfg.variant) {
        case Variant::full:
            layout.push_back({LayerKind::bcrnn_time_iter, "layer1", 2, cfg.n_f});
            for (int j = 2; j <= 4; ++j)
                layout.push_back({LayerKind::crnn_iter, "layer" + std::to_string(j), cfg.n_f, cfg.n_f});
            break;
        case Variant::iteration_only:
            layout.push_back({LayerKind::crnn_iter, "layer1", 2, cfg.n_f});
            for (int j = 2; j <= 4; ++j)
                layout.push_back({LayerKind::crnn_iter, "layer" + std::to_string(j), cfg.n_f, cfg.n_f});
            break;
        case Variant::temporal_only:
            layout.push_back({LayerKind::bcrnn_time, "layer1", 2, cfg.n_f});
            for (int j = 2; j <= 4; ++j)
                layout.push_back({LayerKind::cnn_relu, "layer" + std::to_string(j), cfg.n_f, cfg.n_f});
            break;
    }
    layout.push_back({LayerKind::cnn_linear, "layer5", cfg.n_f, 2});
    return layout;
}

std::vector<ParamSpec> parameter_specs(const NetworkConfig& cfg) {
    const auto layout = layer_layout(cfg);
    const std::int64_t k = cfg.k;
    std::vector<ParamSpec> specs;
    for (const auto& ls : layout) {
        const std::int64_t cin = ls.in_channels, cout = ls.out_channels;
        auto add = [&](const char* role, std::vector<std::int64_t> shape, std::int64_t fan_in) {
            specs.push_back({ls.name + "." + role, std::move(shape), fan_in});
        };
        add("w_input", {cout, cin, k, k}, cin * k * k);
        switch (ls.kind) {
            case LayerKind::bcrnn_time_iter:
                add("w_time", {cout, cout, k, k}, cout * k * k);
                add("w_iter", {cout, cout, k, k}, cout * k * k);
                add("bias_fwd", {cout}, 0);
                add("bias_bwd", {cout}, 0);
                break;
            case LayerKind::bcrnn_time:
                add("w_time", {cout, cout, k, k}, cout * k * k);
                add("bias_fwd", {cout}, 0);
                add("bias_bwd", {cout}, 0);
                break;
            case LayerKind::crnn_iter:
                add("w_iter", {cout, cout, k, k}, cout * k * k);
                add("bias", {cout}, 0);
                break;
            case LayerKind::cnn_relu:
            case LayerKind::cnn_linear:
                add("bias", {cout}, 0);
                break;
        }
    }
    return specs;
}

template <typename T>
ParameterStore<T> init_parameters(const NetworkConfig& cfg, std::uint64_t seed) {
    ParameterStore<T> store;
    const auto specs = parameter_specs(cfg);
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& s = specs[i];
        if (s.fan_in > 0) {
            store.add(s.name, he_init<T>(s.shape, s.fan_in, splitmix64(seed ^ (i + 1))));
        } else {
            store.add(s.name, Tensor<T>(s.shape));
        }
    }
    return store;
}

template <typename T>
void validate_parameters(const NetworkConfig& cfg, const ParameterStore<T>& params) {
    const auto specs = parameter_specs(cfg);
    if (params.size() != specs.size()) {
        throw std::invalid_argument("parameters do not match config: expected " + std::to_string(specs.size()) +
                                    " tensors for variant " + variant_name(cfg.variant) + ", got " +
                                    std::to_string(params.size()));
    }
    for (const auto& s : specs) {
        if (!params.contains(s.name)) {
            throw std::invalid_argument("parameters do not match config: missing '" + s.name + "'");
        }
        const auto& p = params.get(s.name);
        if (p.value.shape() != s.shape) {
            throw std::invalid_argument("parameter '" + s.name + "' has shape " +
                                        Tensor<T>::shape_string(p.value.shape()) + ", expected " +
                                        Tensor<T>::shape_string(s.shape));
        }
        if (!p.value.same_shape(p.grad)) {
            throw std::invalid_argument("parameter '" + s.name + "' gradient shape does not match its value");
        }
    }
}

template <typename T>
HiddenState<T> HiddenState<T>::zeros(const NetworkConfig& cfg, std::int64_t frames, std::int64_t height,
                                     std::int64_t width) {
    HiddenState<T> h;
    for (const auto& ls : layer_layout(cfg)) {
        if (ls.carries_iter_hidden()) {
            h.iter_hidden.emplace_back(std::vector<std::int64_t>{frames, ls.out_channels, height, width});
        } else {
            h.iter_hidden.emplace_back();
        }
    }
    return h;
}

template <typename T>
Tensor<T> crnn_i_step(const Tensor<T>& input, const Tensor<T>& hidden_prev_iter, const CrnnIterParams<T>& p) {
    check_step_shapes(input, hidden_prev_iter, "crnn_i_step");
    return crnn_i_apply(input, &hidden_prev_iter, *p.w_input, p.w_iter, *p.bias);
}

template <typename T>
Tensor<T> bcrnn_ti_step(const Tensor<T>& input, const Tensor<T>& hidden_prev_iter, const BcrnnParams<T>& p,
                        Tensor<T>* save_fwd, Tensor<T>* save_bwd) {
    check_step_shapes(input, hidden_prev_iter, "bcrnn_ti_step");
    return bcrnn_apply(input, &hidden_prev_iter, *p.w_input, *p.w_time, p.w_iter, *p.bias_fwd, *p.bias_bwd,
                       save_fwd, save_bwd);
}

namespace {

/// Shared forward driver. When tape is set every activation needed by the
/// backward pass is retained.
template <typename T>
ComplexSequence<T> run_forward(const ComplexSequence<T>& x_u, const KSpaceData<T>& y, const NetworkConfig& cfg,
                               const ParameterStore<T>& params, std::int64_t n_iters, ForwardTrace<T>* trace,
                               detail::TapeData<T>* tape) {
    cfg.validate();
    validate_parameters(cfg, params);
    if (n_iters < 1) {
        throw std::invalid_argument("forward: iteration count must be >= 1, got " + std::to_string(n_iters));
    }
    if (!x_u.same_shape(y.samples)) {
        throw std::invalid_argument("forward: input and k-space sample shapes differ");
    }
    if (trace && (trace->record_layer < 0 || trace->record_layer > 4)) {
        throw std::invalid_argument("forward: record_layer must be in 1..4 (or 0 for none)");
    }

    const auto layout = layer_layout(cfg);
    const auto lps = resolve_params(layout, params);
    const std::int64_t frames = x_u.frames(), H = x_u.height(), W = x_u.width();

    const bool has_bcrnn = layout[0].kind == LayerKind::bcrnn_time_iter || layout[0].kind == LayerKind::bcrnn_time;

    if (tape) {
        tape->cfg = cfg;
        tape->mask = y.mask;
        tape->dc = y.dc;
        tape->frames = frames;
        tape->height = H;
        tape->width = W;
        tape->block_inputs.reserve(static_cast<std::size_t>(n_iters));
        tape->layer_outputs.reserve(static_cast<std::size_t>(n_iters));
        if (has_bcrnn) {
            tape->bcrnn_fwd.reserve(static_cast<std::size_t>(n_iters));
            tape->bcrnn_bwd.reserve(static_cast<std::size_t>(n_iters));
        }
    }

    std::vector<Tensor<T>> hidden(layout.size());  // empty tensors are zero states
    ComplexSequence<T> x_rec = x_u;

    for (std::int64_t it = 0; it < n_iters; ++it) {
        Tensor<T> X = x_rec.to_channels();
        std::vector<Tensor<T>> outs(4);
        Tensor<T> fwd_save, bwd_save;
        Tensor<T> block_out;

        const Tensor<T>* cur = &X;
        for (std::size_t j = 0; j < layout.size(); ++j) {
            const auto& ls = layout[j];
            const auto& lp = lps[j];
            const Tensor<T>* h = hidden[j].empty() ? nullptr : &hidden[j];
            Tensor<T> out;
            switch (ls.kind) {
                case LayerKind::bcrnn_time_iter:
                case LayerKind::bcrnn_time:
                    out = bcrnn_apply(*cur, h, *lp.w_input, *lp.w_time, lp.w_iter, *lp.bias_fwd, *lp.bias_bwd,
                                      tape ? &fwd_save : nullptr, tape ? &bwd_save : nullptr);
                    break;
                case LayerKind::crnn_iter:
                    out = crnn_i_apply(*cur, h, *lp.w_input, lp.w_iter, *lp.bias);
                    break;
                case LayerKind::cnn_relu:
                    out = conv2d_forward(*cur, *lp.w_input, *lp.bias);
                    relu_inplace(out);
                    break;
                case LayerKind::cnn_linear:
                    out = conv2d_forward(*cur, *lp.w_input, *lp.bias);
                    break;
            }
            if (j + 1 < layout.size()) {
                outs[j] = std::move(out);
                cur = &outs[j];
            } else {
                block_out = std::move(out);
            }
        }

        for (std::size_t j = 0; j + 1 < layout.size(); ++j) {
            if (layout[j].carries_iter_hidden()) hidden[j] = outs[j];
        }
        if (trace && trace->record_layer > 0) {
            trace->layer_activations.push_back(outs[static_cast<std::size_t>(trace->record_layer - 1)]);
        }

        add_into(block_out, X);  // residual connection
        if (tape) {
            tape->block_inputs.push_back(std::move(X));
            tape->layer_outputs.push_back(std::move(outs));
            if (has_bcrnn) {
                tape->bcrnn_fwd.push_back(std::move(fwd_save));
                tape->bcrnn_bwd.push_back(std::move(bwd_save));
            }
        }

        x_rec = data_consistency(ComplexSequence<T>::from_channels(block_out), y);
        if (trace && trace->record_images) trace->per_iteration.push_back(x_rec);
    }
    return x_rec;
}

}  // namespace

template <typename T>
ComplexSequence<T> crnn_forward(const ComplexSequence<T>& x_u, const KSpaceData<T>& y, const NetworkConfig& cfg,
                                const ParameterStore<T>& params, std::optional<std::int64_t> n_test,
                                ForwardTrace<T>* trace) {
    const std::int64_t n = n_test.value_or(cfg.iterations);
    return run_forward(x_u, y, cfg, params, n, trace, static_cast<detail::TapeData<T>*>(nullptr));
}

template <typename T>
CrnnTape<T> crnn_forward_tape(const ComplexSequence<T>& x_u, const KSpaceData<T>& y, const NetworkConfig& cfg,
                              const ParameterStore<T>& params) {
    CrnnTape<T> tape;
    tape.output_ = run_forward(x_u, y, cfg, params, cfg.iterations, static_cast<ForwardTrace<T>*>(nullptr),
                               &tape.data_);
    return tape;
}

template <typename T>
void CrnnTape<T>::backward(const ComplexSequence<T>& grad_output, ParameterStore<T>& params) const {
    const auto& d = data_;
    validate_parameters(d.cfg, params);
    if (!grad_output.same_shape(output_)) {
        throw std::invalid_argument("backward: gradient shape does not match the forward output shape");
    }
    const auto layout = layer_layout(d.cfg);
    auto lps = resolve_params(layout, params);
    resolve_grads(layout, params, lps);

    const std::int64_t n_iters = static_cast<std::int64_t>(d.block_inputs.size());
    const std::int64_t frames = d.frames, H = d.height, W = d.width;

    ComplexSequence<T> g_img = grad_output;
    std::vector<Tensor<T>> g_hidden(layout.size());  // empty = no contribution yet

    for (std::int64_t it = n_iters - 1; it >= 0; --it) {
        // Data-consistency and residual are linear; the DC backward drops the
        // acquired-sample term.
        ComplexSequence<T> g_rnn_seq = data_consistency_backward(g_img, d.mask, d.dc);
        Tensor<T> g_cur = g_rnn_seq.to_channels();
        Tensor<T> g_prev_img = g_cur;  // residual path to x_rec^(it-1)

        for (std::int64_t j = static_cast<std::int64_t>(layout.size()) - 1; j >= 0; --j) {
            const auto& ls = layout[static_cast<std::size_t>(j)];
            const auto& lp = lps[static_cast<std::size_t>(j)];
            const Tensor<T>& layer_input =
                (j == 0) ? d.block_inputs[static_cast<std::size_t>(it)]
                         : d.layer_outputs[static_cast<std::size_t>(it)][static_cast<std::size_t>(j - 1)];
            const Tensor<T>* hidden_prev =
                (it > 0 && ls.carries_iter_hidden())
                    ? &d.layer_outputs[static_cast<std::size_t>(it - 1)][static_cast<std::size_t>(j)]
                    : nullptr;

            Tensor<T> g_below({layer_input.dim(0), ls.in_channels, H, W});

            switch (ls.kind) {
                case LayerKind::cnn_linear: {
                    conv2d_backward_weight(*lp.g_w_input, g_cur, layer_input);
                    conv2d_backward_bias(*lp.g_bias, g_cur);
                    conv2d_backward_input(g_below, g_cur, *lp.w_input);
                    break;
                }
                case LayerKind::cnn_relu: {
                    relu_mask_inplace(g_cur,
                                      d.layer_outputs[static_cast<std::size_t>(it)][static_cast<std::size_t>(j)]);
                    conv2d_backward_weight(*lp.g_w_input, g_cur, layer_input);
                    conv2d_backward_bias(*lp.g_bias, g_cur);
                    conv2d_backward_input(g_below, g_cur, *lp.w_input);
                    break;
                }
                case LayerKind::crnn_iter: {
                    if (!g_hidden[static_cast<std::size_t>(j)].empty()) {
                        add_into(g_cur, g_hidden[static_cast<std::size_t>(j)]);
                    }
                    relu_mask_inplace(g_cur,
                                      d.layer_outputs[static_cast<std::size_t>(it)][static_cast<std::size_t>(j)]);
                    conv2d_backward_weight(*lp.g_w_input, g_cur, layer_input);
                    conv2d_backward_bias(*lp.g_bias, g_cur);
                    if (hidden_prev) conv2d_backward_weight(*lp.g_w_iter, g_cur, *hidden_prev);
                    if (it > 0) {
                        Tensor<T> g_h({frames, ls.out_channels, H, W});
                        conv2d_backward_input(g_h, g_cur, *lp.w_iter);
                        g_hidden[static_cast<std::size_t>(j)] = std::move(g_h);
                    } else {
                        g_hidden[static_cast<std::size_t>(j)] = Tensor<T>();
                    }
                    conv2d_backward_input(g_below, g_cur, *lp.w_input);
                    break;
                }
                case LayerKind::bcrnn_time_iter:
                case LayerKind::bcrnn_time: {
                    if (!g_hidden[static_cast<std::size_t>(j)].empty()) {
                        add_into(g_cur, g_hidden[static_cast<std::size_t>(j)]);
                    }
                    Tensor<T>* g_h_out = nullptr;
                    Tensor<T> g_h;
                    if (ls.kind == LayerKind::bcrnn_time_iter && it > 0) {
                        g_h = Tensor<T>({frames, ls.out_channels, H, W});
                        g_h_out = &g_h;
                    }
                    bcrnn_backward(g_cur, d.bcrnn_fwd[static_cast<std::size_t>(it)],
                                   d.bcrnn_bwd[static_cast<std::size_t>(it)], layer_input, hidden_prev, lp,
                                   g_below, g_h_out);
                    g_hidden[static_cast<std::size_t>(j)] = g_h_out ? std::move(g_h) : Tensor<T>();
                    break;
                }
            }
            g_cur = std::move(g_below);
        }

        add_into(g_prev_img, g_cur);  // block-input path joins the residual path
        g_img = ComplexSequence<T>::from_channels(g_prev_img);
    }
}

std::string CapacityReport::to_string() const {
    std::ostringstream os;
    for (const auto& layer : layers) {
        os << layer.name << " (" << layer.kind << "): ";
        bool first = true;
        for (const auto& [role, count] : layer.entries) {
            if (!first) os << " + ";
            os << role << " " << count;
            first = false;
        }
        os << " = " << layer.total << "\n";
    }
    os << "total = " << total << "\n";
    return os.str();
}

CapacityReport count_parameters(const NetworkConfig& cfg) {
    const auto layout = layer_layout(cfg);
    const auto specs = parameter_specs(cfg);
    CapacityReport report;
    for (const auto& ls : layout) {
        LayerCapacity layer;
        layer.name = ls.name;
        layer.kind = kind_name(ls.kind);
        for (const auto& s : specs) {
            if (s.name.rfind(ls.name + ".", 0) != 0) continue;
            std::int64_t n = 1;
            for (auto d : s.shape) n *= d;
            layer.entries.emplace_back(s.name.substr(ls.name.size() + 1), n);
            layer.total += n;
        }
        report.total += layer.total;
        report.layers.push_back(std::move(layer));
    }
    return report;
}

namespace {

json dc_to_json(const DcMode& dc) {
    if (dc.exact) return json("exact");
    return json(dc.lambda0);
}

DcMode dc_from_json(const json& j) {
    if (j.is_string()) {
        if (j.get<std::string>() == "exact") return DcMode::exact_mode();
        throw std::invalid_argument("dc_mode must be \"exact\" or a nonnegative number");
    }
    if (!j.is_number()) throw std::invalid_argument("dc_mode must be \"exact\" or a nonnegative number");
    return DcMode::with_lambda0(j.get<double>());
}

json config_to_json(const NetworkConfig& cfg) {
    return json{{"n_f", cfg.n_f},
                {"k", cfg.k},
                {"iterations", cfg.iterations},
                {"variant", variant_name(cfg.variant)},
                {"dc_mode", dc_to_json(cfg.dc)}};
}

NetworkConfig config_from_json(const json& j) {
    NetworkConfig cfg;
    cfg.n_f = j.at("n_f").get<std::int64_t>();
    cfg.k = j.at("k").get<std::int64_t>();
    cfg.iterations = j.at("iterations").get<std::int64_t>();
    cfg.variant = variant_from_name(j.at("variant").get<std::string>());
    cfg.dc = dc_from_json(j.at("dc_mode"));
    cfg.validate();
    return cfg;
}

}  // namespace

void checkpoint_save(const ParameterStore<float>& params, const NetworkConfig& cfg, const std::string& path) {
    validate_parameters(cfg, params);
    json header;
    header["schema_version"] = 1;
    header["kind"] = "model";
    header["config"] = config_to_json(cfg);
    json plist = json::array();
    for (const auto& p : params) {
        plist.push_back(json{{"name", p.name}, {"shape", p.value.shape()}});
    }
    header["params"] = plist;
    const std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint_save: cannot open '" + path + "' for writing");
    const std::uint32_t len = static_cast<std::uint32_t>(hs.size());
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& p : params) {
        out.write(reinterpret_cast<const char*>(p.value.data()),
                  static_cast<std::streamsize>(p.value.numel() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("checkpoint_save: write to '" + path + "' failed");
}

Checkpoint checkpoint_load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint_load: cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < 4) throw std::runtime_error("checkpoint_load: '" + path + "' is truncated (no header length)");
    std::uint32_t len = 0;
    std::memcpy(&len, bytes.data(), 4);
    if (len == 0 || static_cast<std::size_t>(len) > bytes.size() - 4 || len > (1u << 24)) {
        throw std::runtime_error("checkpoint_load: '" + path + "' has a corrupted header length");
    }

    json header;
    try {
        header = json::parse(bytes.substr(4, len));
    } catch (const json::exception& e) {
        throw std::runtime_error("checkpoint_load: '" + path + "' has a corrupted header: " + e.what());
    }

    Checkpoint ckpt;
    try {
        if (header.at("schema_version").get<int>() != 1) {
            throw std::runtime_error("unsupported schema version " +
                                     std::to_string(header.at("schema_version").get<int>()));
        }
        if (header.at("kind").get<std::string>() != "model") {
            throw std::runtime_error("not a model checkpoint (kind '" +
                                     header.at("kind").get<std::string>() + "')");
        }
        ckpt.config = config_from_json(header.at("config"));

        const auto specs = parameter_specs(ckpt.config);
        const auto& plist = header.at("params");
        if (plist.size() != specs.size()) {
            throw std::runtime_error("parameter list does not match config (expected " +
                                     std::to_string(specs.size()) + " tensors, header has " +
                                     std::to_string(plist.size()) + ")");
        }
        std::size_t offset = 4 + len;
        std::int64_t payload_elems = 0;
        for (std::size_t i = 0; i < specs.size(); ++i) {
            const auto& entry = plist.at(i);
            const std::string name = entry.at("name").get<std::string>();
            const std::vector<std::int64_t> shape = entry.at("shape").get<std::vector<std::int64_t>>();
            if (name != specs[i].name || shape != specs[i].shape) {
                throw std::runtime_error("parameter '" + name + "' does not match the config layout (expected '" +
                                         specs[i].name + "' with shape " +
                                         Tensor<float>::shape_string(specs[i].shape) + ")");
            }
            std::int64_t n = 1;
            for (auto d : shape) n *= d;
            payload_elems += n;
        }
        if (bytes.size() - offset != static_cast<std::size_t>(payload_elems) * sizeof(float)) {
            throw std::runtime_error("payload size " + std::to_string(bytes.size() - offset) +
                                     " bytes does not match the declared shapes (" +
                                     std::to_string(payload_elems * sizeof(float)) + " bytes)");
        }
        for (std::size_t i = 0; i < specs.size(); ++i) {
            Tensor<float> t(specs[i].shape);
            std::memcpy(t.data(), bytes.data() + offset, static_cast<std::size_t>(t.numel()) * sizeof(float));
            offset += static_cast<std::size_t>(t.numel()) * sizeof(float);
            ckpt.params.add(specs[i].name, std::move(t));
        }
    } catch (const json::exception& e) {
        throw std::runtime_error("checkpoint_load: '" + path + "' has a malformed header: " + e.what());
    }
    return ckpt;
}

std::string network_config_to_json_string(const NetworkConfig& cfg) { return config_to_json(cfg).dump(); }

NetworkConfig network_config_from_json_string(const std::string& text) {
    return config_from_json(json::parse(text));
}

#define CRNN_INSTANTIATE_MODEL(T)                                                                            \
    template ParameterStore<T> init_parameters<T>(const NetworkConfig&, std::uint64_t);                     \
    template void validate_parameters<T>(const NetworkConfig&, const ParameterStore<T>&);                   \
    template struct HiddenState<T>;                                                                          \
    template Tensor<T> crnn_i_step<T>(const Tensor<T>&, const Tensor<T>&, const CrnnIterParams<T>&);        \
    template Tensor<T> bcrnn_ti_step<T>(const Tensor<T>&, const Tensor<T>&, const BcrnnParams<T>&,          \
                                        Tensor<T>*, Tensor<T>*);                                             \
    template ComplexSequence<T> crnn_forward<T>(const ComplexSequence<T>&, const KSpaceData<T>&,            \
                                                const NetworkConfig&, const ParameterStore<T>&,             \
                                                std::optional<std::int64_t>, ForwardTrace<T>*);             \
    template CrnnTape<T> crnn_forward_tape<T>(const ComplexSequence<T>&, const KSpaceData<T>&,              \
                                              const NetworkConfig&, const ParameterStore<T>&);              \
    template class CrnnTape<T>;

CRNN_INSTANTIATE_MODEL(float)
CRNN_INSTANTIATE_MODEL(double)

#undef CRNN_INSTANTIATE_MODEL

}  // namespace crnn
