#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sepo/autodiff/tensor.hpp"
#include "sepo/core/error.hpp"

namespace sepo::ad {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are created on the first step
/// and bound positionally to the parameter list passed to step().
template <class T>
class Adam {
  public:
    explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

    const AdamOptions& options() const noexcept { return opts_; }
    void set_lr(double lr) noexcept { opts_.lr = lr; }
    std::size_t steps() const noexcept { return step_; }

    void step(std::span<Tensor<T>* const> params) {
        if (m_.empty()) {
            for (const Tensor<T>* p : params) {
                m_.emplace_back(p->size(), T{0});
                v_.emplace_back(p->size(), T{0});
            }
        }
        if (m_.size() != params.size())
            throw DimensionError("adam: optimizer state holds " + std::to_string(m_.size()) + " tensors, got " +
                                 std::to_string(params.size()));
        for (std::size_t k = 0; k < params.size(); ++k)
            if (m_[k].size() != params[k]->size())
                throw DimensionError("adam: state/parameter size mismatch at tensor " + std::to_string(k) + ": " +
                                     std::to_string(m_[k].size()) + " vs " + shape_str(params[k]->shape()));
        ++step_;
        const T b1 = static_cast<T>(opts_.beta1), b2 = static_cast<T>(opts_.beta2);
        const T c1 = static_cast<T>(1.0 - std::pow(opts_.beta1, static_cast<double>(step_)));
        const T c2 = static_cast<T>(1.0 - std::pow(opts_.beta2, static_cast<double>(step_)));
        const T lr = static_cast<T>(opts_.lr), eps = static_cast<T>(opts_.eps);
        for (std::size_t k = 0; k < params.size(); ++k) {
            Tensor<T>& p = *params[k];
            if (!p.has_grad()) continue;
            std::span<const T> g = std::as_const(p).grad();
            std::vector<T>& m = m_[k];
            std::vector<T>& v = v_[k];
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = b1 * m[i] + (T{1} - b1) * g[i];
                v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
                const T mhat = m[i] / c1;
                const T vhat = v[i] / c2;
                p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    std::span<const std::vector<T>> first_moments() const noexcept { return m_; }
    std::span<const std::vector<T>> second_moments() const noexcept { return v_; }

  private:
    AdamOptions opts_;
    std::size_t step_ = 0;
    std::vector<std::vector<T>> m_;
    std::vector<std::vector<T>> v_;
};

template <class T>
void zero_grads(std::span<Tensor<T>* const> params) {
    for (Tensor<T>* p : params) p->zero_grad();
}

/// Euclidean norm over all parameter gradients.
template <class T>
double grad_norm(std::span<Tensor<T>* const> params) {
    double s = 0.0;
    for (const Tensor<T>* p : params)
        for (T g : p->grad()) s += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(s);
}

/// Rescales gradients so their joint norm is at most max_norm. Returns the
/// norm before clipping.
template <class T>
double clip_grad_norm(std::span<Tensor<T>* const> params, double max_norm) {
    const double n = grad_norm<T>(params);
    if (max_norm > 0.0 && n > max_norm) {
        const T s = static_cast<T>(max_norm / n);
        for (Tensor<T>* p : params)
            for (T& g : p->grad()) g *= s;
    }
    return n;
}

} // namespace sepo::ad
