// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "elastic/errors.hpp"

namespace elastic {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

/// Dense row-major tensor with an optional gradient buffer.
///
/// Every tensor also exposes a 2-D interpretation: `cols()` is the last
/// dimension and `rows()` the product of the others. All autodiff
/// operations work on that matrix view.
template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, bool requires_grad = false)
        : shape_(std::move(shape)), data_(shape_size(shape_), T{0}) {
        set_requires_grad(requires_grad);
    }

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_size(shape_) != data_.size())
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
        set_requires_grad(requires_grad);
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
    std::size_t rows() const noexcept {
        const auto c = cols();
        return c == 0 ? 0 : data_.size() / c;
    }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::span<T> grad() noexcept { return grad_; }
    std::span<const T> grad() const noexcept { return grad_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    bool requires_grad() const noexcept { return requires_grad_; }
    void set_requires_grad(bool on) {
        requires_grad_ = on;
        if (on)
            grad_.assign(data_.size(), T{0});
        else
            grad_.clear();
    }
    void zero_grad() { std::fill(grad_.begin(), grad_.end(), T{0}); }

    /// Copy of the data converted to another scalar type (no gradient).
    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

   private:
    Shape shape_;
    std::vector<T> data_;
    std::vector<T> grad_;
    bool requires_grad_ = false;
};

}  // namespace elastic
