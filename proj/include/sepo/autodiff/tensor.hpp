#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sepo/core/error.hpp"

namespace sepo::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

/// Dense row-major array with an optional gradient buffer of the same shape.
template <class T>
class Tensor {
  public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(numel(shape_), fill) {
        check_dims();
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_dims();
        if (numel(shape_) != data_.size())
            throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                                 std::to_string(data_.size()) + " values");
    }

    static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t rows() const noexcept { return shape_.empty() ? 0 : size() / shape_.back(); }
    std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }
    T& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    bool has_grad() const noexcept { return !grad_.empty(); }
    std::span<T> grad() {
        if (grad_.empty()) grad_.assign(data_.size(), T{0});
        return grad_;
    }
    std::span<const T> grad() const noexcept { return grad_; }
    void zero_grad() { grad_.assign(data_.size(), T{0}); }
    void drop_grad() { grad_.clear(); }

  private:
    void check_dims() const {
        for (std::size_t d : shape_)
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<T> data_;
    std::vector<T> grad_;
};

} // namespace sepo::ad
