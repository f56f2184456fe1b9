#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "sepo/autodiff/tensor.hpp"

namespace sepo::ad {

/// Central differences (f(p+eps) - f(p-eps)) / 2eps for every coordinate of
/// every tensor in `params`, in order. `f` must be pure.
template <class T>
std::vector<double> finite_difference_gradient(const std::function<double()>& f,
                                               std::span<Tensor<T>* const> params, double eps = 1e-4) {
    std::vector<double> out;
    for (Tensor<T>* p : params) {
        for (std::size_t i = 0; i < p->size(); ++i) {
            const T saved = (*p)[i];
            (*p)[i] = saved + static_cast<T>(eps);
            const double up = f();
            (*p)[i] = saved - static_cast<T>(eps);
            const double down = f();
            (*p)[i] = saved;
            out.push_back((up - down) / (2.0 * eps));
        }
    }
    return out;
}

/// Scalar convenience overload.
inline double finite_difference_derivative(const std::function<double(double)>& f, double x, double eps = 1e-4) {
    return (f(x + eps) - f(x - eps)) / (2.0 * eps);
}

/// ||a - b|| / max(||a||, ||b||), zero when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::sqrt(std::max(na, nb));
    return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

/// Flattened copy of the analytic gradients, same order as the FD helper.
template <class T>
std::vector<double> flatten_grads(std::span<Tensor<T>* const> params) {
    std::vector<double> out;
    for (const Tensor<T>* p : params)
        for (std::size_t i = 0; i < p->size(); ++i) out.push_back(p->has_grad() ? double(p->grad()[i]) : 0.0);
    return out;
}

} // namespace sepo::ad
