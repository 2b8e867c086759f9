#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace crnn {

/// Dense row-major tensor of real scalars. T is float for training and
/// double for gradient verification; there is no strided or lazy view
/// machinery, every tensor owns its storage.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), T(0)) {}

    Tensor(std::vector<std::int64_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != checked_numel(shape_)) {
            throw std::invalid_argument("Tensor: data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::int64_t> shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    /// Multi-index access, row-major. Intended for tests and setup code;
    /// hot loops index raw data() directly.
    template <typename... Ix>
    T& at(Ix... ix) {
        return data_[flat_index({static_cast<std::int64_t>(ix)...})];
    }
    template <typename... Ix>
    const T& at(Ix... ix) const {
        return data_[flat_index({static_cast<std::int64_t>(ix)...})];
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    bool all_finite() const {
        for (T v : data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    static std::string shape_string(const std::vector<std::int64_t>& shape) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) os << ',';
            os << shape[i];
        }
        os << ']';
        return os.str();
    }

private:
    static std::int64_t checked_numel(const std::vector<std::int64_t>& shape) {
        std::int64_t n = 1;
        for (std::int64_t d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension in " + shape_string(shape));
            n *= d;
        }
        return n;
    }

    std::size_t flat_index(std::initializer_list<std::int64_t> ix) const {
        if (ix.size() != shape_.size()) {
            throw std::out_of_range("Tensor: index rank " + std::to_string(ix.size()) +
                                    " does not match tensor rank " + std::to_string(shape_.size()));
        }
        std::int64_t flat = 0;
        std::size_t k = 0;
        for (std::int64_t i : ix) {
            if (i < 0 || i >= shape_[k]) {
                throw std::out_of_range("Tensor: index " + std::to_string(i) + " out of range for axis " +
                                        std::to_string(k) + " of shape " + shape_string(shape_));
            }
            flat = flat * shape_[k] + i;
            ++k;
        }
        return static_cast<std::size_t>(flat);
    }

    std::vector<std::int64_t> shape_;
    std::vector<T> data_;
};

/// One named learnable tensor with its gradient accumulator.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
};

/// Ordered collection of named parameters. Insertion order is the canonical
/// layout order used for checkpoints and capacity reports. Gradient
/// accumulation and updates require exclusive access (single writer).
template <typename T>
class ParameterStore {
public:
    Parameter<T>& add(const std::string& name, Tensor<T> value) {
        if (index_.count(name)) {
            throw std::invalid_argument("ParameterStore: duplicate parameter name '" + name + "'");
        }
        index_[name] = params_.size();
        Tensor<T> grad(value.shape());
        params_.push_back(Parameter<T>{name, std::move(value), std::move(grad)});
        return params_.back();
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Parameter<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("ParameterStore: no parameter named '" + name + "'");
        return params_[it->second];
    }
    const Parameter<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("ParameterStore: no parameter named '" + name + "'");
        return params_[it->second];
    }

    std::size_t size() const { return params_.size(); }
    Parameter<T>& operator[](std::size_t i) { return params_[i]; }
    const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void zero_grads() {
        for (auto& p : params_) p.grad.fill(T(0));
    }

    std::int64_t total_elements() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

    template <typename U>
    ParameterStore<U> cast() const {
        ParameterStore<U> out;
        for (const auto& p : params_) out.add(p.name, p.value.template cast<U>());
        return out;
    }

private:
    std::vector<Parameter<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace crnn
