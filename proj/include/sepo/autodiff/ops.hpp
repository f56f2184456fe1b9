#pragma once

// Differentiable primitives recorded on a Tape. Each op computes its forward
// value eagerly and registers an adjoint closure that accumulates into its
// inputs' gradient buffers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "sepo/autodiff/tape.hpp"
#include "sepo/autodiff/tensor.hpp"
#include "sepo/core/error.hpp"

namespace sepo::ad {

// ---------------------------------------------------------------- scalar math

/// log(sigmoid(x)) without overflow for large |x|.
template <class T>
T logsigmoid(T x) {
    if (x >= T{0}) return -std::log1p(std::exp(-x));
    return x - std::log1p(std::exp(x));
}

template <class T>
T sigmoid(T x) {
    if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
    const T e = std::exp(x);
    return e / (T{1} + e);
}

namespace detail {

inline void require(bool ok, const std::string& what) {
    if (!ok) throw DimensionError(what);
}

template <class T>
void check_finite(std::span<const T> xs, const char* op) {
    for (T v : xs)
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
}

// out[B x O] += x[B x I] * w[I x O]
template <class T>
void gemm_nn(std::size_t B, std::size_t I, std::size_t O, const T* x, const T* w, T* out) {
    for (std::size_t b = 0; b < B; ++b) {
        T* o = out + b * O;
        for (std::size_t i = 0; i < I; ++i) {
            const T xv = x[b * I + i];
            const T* wr = w + i * O;
            for (std::size_t j = 0; j < O; ++j) o[j] += xv * wr[j];
        }
    }
}

// dx[B x I] += dy[B x O] * w^T
template <class T>
void gemm_nt(std::size_t B, std::size_t I, std::size_t O, const T* dy, const T* w, T* dx) {
    for (std::size_t b = 0; b < B; ++b) {
        const T* g = dy + b * O;
        for (std::size_t i = 0; i < I; ++i) {
            const T* wr = w + i * O;
            T acc{0};
            for (std::size_t j = 0; j < O; ++j) acc += g[j] * wr[j];
            dx[b * I + i] += acc;
        }
    }
}

// dw[I x O] += x^T * dy
template <class T>
void gemm_tn(std::size_t B, std::size_t I, std::size_t O, const T* x, const T* dy, T* dw) {
    for (std::size_t b = 0; b < B; ++b) {
        const T* g = dy + b * O;
        for (std::size_t i = 0; i < I; ++i) {
            const T xv = x[b * I + i];
            T* d = dw + i * O;
            for (std::size_t j = 0; j < O; ++j) d[j] += xv * g[j];
        }
    }
}

} // namespace detail

// ------------------------------------------------------------------- linear

/// out = x * w + b for x:[B x I], w:[I x O], b:[O].
template <class T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> b) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    const Tensor<T>& bv = b.value();
    if (xv.shape().size() != 2 || wv.shape().size() != 2 || xv.shape()[1] != wv.shape()[0] ||
        bv.size() != wv.shape()[1])
        throw DimensionError("affine: incompatible shapes x" + shape_str(xv.shape()) + " w" + shape_str(wv.shape()) +
                             " b" + shape_str(bv.shape()));
    const std::size_t B = xv.shape()[0], I = xv.shape()[1], O = wv.shape()[1];
    Tensor<T> out({B, O});
    for (std::size_t r = 0; r < B; ++r) std::copy(bv.data().begin(), bv.data().end(), out.data().begin() + r * O);
    detail::gemm_nn(B, I, O, xv.data().data(), wv.data().data(), out.data().data());
    return tape.record(std::move(out), [x, w, b, B, I, O, self = std::size_t{tape.size()}](Tape<T>& t) {
        const Var<T> me{&t, self};
        std::span<T> g = t.grad(me);
        const T* xd = t.value(x).data().data();
        const T* wd = t.value(w).data().data();
        detail::gemm_nt(B, I, O, g.data(), wd, t.grad(x).data());
        detail::gemm_tn(B, I, O, xd, g.data(), t.grad(w).data());
        std::span<T> gb = t.grad(b);
        for (std::size_t r = 0; r < B; ++r)
            for (std::size_t j = 0; j < O; ++j) gb[j] += g[r * O + j];
    });
}

/// out[t] = table[tokens[t]] + positions[t].
template <class T>
Var<T> embed(Var<T> table, Var<T> positions, std::span<const int> tokens) {
    Tape<T>& tape = *table.tape;
    const Tensor<T>& tv = table.value();
    const Tensor<T>& pv = positions.value();
    const std::size_t D = tv.cols(), V = tv.rows(), L = tokens.size();
    detail::require(pv.cols() == D, "embed: width mismatch table" + shape_str(tv.shape()) + " positions" +
                                        shape_str(pv.shape()));
    detail::require(L <= pv.rows(), "embed: sequence length " + std::to_string(L) + " exceeds context " +
                                        std::to_string(pv.rows()));
    Tensor<T> out({L, D});
    for (std::size_t t = 0; t < L; ++t) {
        const int tok = tokens[t];
        if (tok < 0 || static_cast<std::size_t>(tok) >= V)
            throw DimensionError("embed: token id " + std::to_string(tok) + " outside vocabulary of " +
                                 std::to_string(V));
        for (std::size_t d = 0; d < D; ++d) out.at(t, d) = tv.at(tok, d) + pv.at(t, d);
    }
    std::vector<int> toks(tokens.begin(), tokens.end());
    return tape.record(std::move(out), [table, positions, toks = std::move(toks), D,
                                        self = std::size_t{tape.size()}](Tape<T>& t) {
        std::span<T> g = t.grad(Var<T>{&t, self});
        std::span<T> gt = t.grad(table);
        std::span<T> gp = t.grad(positions);
        for (std::size_t p = 0; p < toks.size(); ++p)
            for (std::size_t d = 0; d < D; ++d) {
                gt[static_cast<std::size_t>(toks[p]) * D + d] += g[p * D + d];
                gp[p * D + d] += g[p * D + d];
            }
    });
}

// --------------------------------------------------------------- elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    if (av.shape() != bv.shape())
        throw DimensionError("add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return tape.record(std::move(out), [a, b, self = std::size_t{tape.size()}](Tape<T>& t) {
        std::span<T> g = t.grad(Var<T>{&t, self});
        std::span<T> ga = t.grad(a);
        std::span<T> gb = t.grad(b);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    });
}

template <class T>
Var<T> scale(Var<T> a, T c) {
    Tape<T>& tape = *a.tape;
    Tensor<T> out(a.value().shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.value()[i];
    return tape.record(std::move(out), [a, c, self = std::size_t{tape.size()}](Tape<T>& t) {
        std::span<T> g = t.grad(Var<T>{&t, self});
        std::span<T> ga = t.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
}

/// GELU, tanh approximation.
template <class T>
Var<T> gelu(Var<T> x) {
    constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k = static_cast<T>(0.044715);
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const T v = xv[i];
        out[i] = T{0.5} * v * (T{1} + std::tanh(c * (v + k * v * v * v)));
    }
    return tape.record(std::move(out), [x, self = std::size_t{tape.size()}](Tape<T>& t) {
        std::span<T> g = t.grad(Var<T>{&t, self});
        std::span<T> gx = t.grad(x);
        std::span<const T> xd = t.value(x).data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T v = xd[i];
            const T th = std::tanh(c * (v + k * v * v * v));
            const T d = T{0.5} * (T{1} + th) + T{0.5} * v * (T{1} - th * th) * c * (T{1} + T{3} * k * v * v);
            gx[i] += g[i] * d;
        }
    });
}

/// Elementwise log(sigmoid(x)).
template <class T>
Var<T> logsigmoid(Var<T> x) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = logsigmoid(xv[i]);
    return tape.record(std::move(out), [x, self = std::size_t{tape.size()}](Tape<T>& t) {
        std::span<T> g = t.grad(Var<T>{&t, self});
        std::span<T> gx = t.grad(x);
        std::span<const T> xd = t.value(x).data();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sigmoid(-xd[i]);
    });
}

// ----------------------------------------------------------------- row-wise

/// Layer normalization over the last axis with learned gain and bias.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T{1e-5}) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    const std::size_t R = xv.rows(), D = xv.cols();
    detail::require(gain.value().size() == D && bias.value().size() == D,
                    "layer_norm: gain/bias must match width " + std::to_string(D));
    Tensor<T> out(xv.shape());
    std::vector<T> xhat(xv.size());
    std::vector<T> inv_std(R);
    for (std::size_t r = 0; r < R; ++r) {
        const T* row = xv.data().data() + r * D;
        T mean{0};
        for (std::size_t d = 0; d < D; ++d) mean += row[d];
        mean /= static_cast<T>(D);
        T var{0};
        for (std::size_t d = 0; d < D; ++d) var += (row[d] - mean) * (row[d] - mean);
        var /= static_cast<T>(D);
        inv_std[r] = T{1} / std::sqrt(var + eps);
        for (std::size_t d = 0; d < D; ++d) {
            xhat[r * D + d] = (row[d] - mean) * inv_std[r];
            out[r * D + d] = xhat[r * D + d] * gain.value()[d] + bias.value()[d];
        }
    }
    if (!tape.tracking()) return tape.record(std::move(out), nullptr);
    return tape.record(std::move(out), [x, gain, bias, R, D, xhat = std::move(xhat), inv_std = std::move(inv_std),
                                        self = std::size_t{tape.size()}](Tape<T>& t) {
        std::span<T> g = t.grad(Var<T>{&t, self});
        std::span<T> gx = t.grad(x);
        std::span<T> gg = t.grad(gain);
        std::span<T> gb = t.grad(bias);
        std::span<const T> gv = t.value(gain).data();
        for (std::size_t r = 0; r < R; ++r) {
            T mean_dxh{0}, mean_dxh_xh{0};
            for (std::size_t d = 0; d < D; ++d) {
                const T dy = g[r * D + d];
                gg[d] += dy * xhat[r * D + d];
                gb[d] += dy;
                const T dxh = dy * gv[d];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xhat[r * D + d];
            }
            mean_dxh /= static_cast<T>(D);
            mean_dxh_xh /= static_cast<T>(D);
            for (std::size_t d = 0; d < D; ++d) {
                const T dxh = g[r * D + d] * gv[d];
                gx[r * D + d] += inv_std[r] * (dxh - mean_dxh - xhat[r * D + d] * mean_dxh_xh);
            }
        }
    });
}

/// Row-wise log-softmax over the last axis, max-shifted.
template <class T>
Var<T> log_softmax(Var<T> x) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    detail::check_finite(xv.data(), "log_softmax");
    const std::size_t R = xv.rows(), V = xv.cols();
    Tensor<T> out(xv.shape());
    for (std::size_t r = 0; r < R; ++r) {
        const T* row = xv.data().data() + r * V;
        const T mx = *std::max_element(row, row + V);
        T sum{0};
        for (std::size_t j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
        const T lse = mx + std::log(sum);
        for (std::size_t j = 0; j < V; ++j) out[r * V + j] = row[j] - lse;
    }
    return tape.record(std::move(out), [x, R, V, self = std::size_t{tape.size()}](Tape<T>& t) {
        const Var<T> me{&t, self};
        std::span<T> g = t.grad(me);
        std::span<const T> y = t.value(me).data();
        std::span<T> gx = t.grad(x);
        for (std::size_t r = 0; r < R; ++r) {
            T gsum{0};
            for (std::size_t j = 0; j < V; ++j) gsum += g[r * V + j];
            if (gsum == T{0}) {
                bool any = false;
                for (std::size_t j = 0; j < V && !any; ++j) any = g[r * V + j] != T{0};
                if (!any) continue;
            }
            for (std::size_t j = 0; j < V; ++j) gx[r * V + j] += g[r * V + j] - std::exp(y[r * V + j]) * gsum;
        }
    });
}

/// Causal multi-head self-attention over a fused [T x 3D] query/key/value
/// block laid out as [q | k | v]. Returns [T x D].
template <class T>
Var<T> causal_attention(Var<T> qkv, std::size_t n_heads) {
    Tape<T>& tape = *qkv.tape;
    const Tensor<T>& in = qkv.value();
    detail::require(in.shape().size() == 2 && in.cols() % 3 == 0, "causal_attention: expected [T x 3D], got " +
                                                                       shape_str(in.shape()));
    const std::size_t L = in.rows(), W = in.cols(), D = W / 3;
    detail::require(n_heads > 0 && D % n_heads == 0, "causal_attention: width " + std::to_string(D) +
                                                         " not divisible by " + std::to_string(n_heads) + " heads");
    const std::size_t H = n_heads, dh = D / H;
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
    const T* src = in.data().data();
    Tensor<T> out({L, D});
    std::vector<T> probs(H * L * L, T{0});
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t i = 0; i < L; ++i) {
            const T* q = src + i * W + h * dh;
            T* p = probs.data() + (h * L + i) * L;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j <= i; ++j) {
                const T* k = src + j * W + D + h * dh;
                T s{0};
                for (std::size_t e = 0; e < dh; ++e) s += q[e] * k[e];
                p[j] = s * inv_sqrt;
                mx = std::max(mx, p[j]);
            }
            T sum{0};
            for (std::size_t j = 0; j <= i; ++j) {
                p[j] = std::exp(p[j] - mx);
                sum += p[j];
            }
            T* o = out.data().data() + i * D + h * dh;
            for (std::size_t j = 0; j <= i; ++j) {
                p[j] /= sum;
                const T* v = src + j * W + 2 * D + h * dh;
                for (std::size_t e = 0; e < dh; ++e) o[e] += p[j] * v[e];
            }
        }
    }
    if (!tape.tracking()) return tape.record(std::move(out), nullptr);
    return tape.record(std::move(out), [qkv, L, W, D, H, dh, inv_sqrt, probs = std::move(probs),
                                        self = std::size_t{tape.size()}](Tape<T>& t) {
        std::span<T> g = t.grad(Var<T>{&t, self});
        const T* src = t.value(qkv).data().data();
        T* gs = t.grad(qkv).data();
        std::vector<T> dp(L);
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < L; ++i) {
                const T* p = probs.data() + (h * L + i) * L;
                const T* go = g.data() + i * D + h * dh;
                T dot{0};
                for (std::size_t j = 0; j <= i; ++j) {
                    const T* v = src + j * W + 2 * D + h * dh;
                    T* gv = gs + j * W + 2 * D + h * dh;
                    T acc{0};
                    for (std::size_t e = 0; e < dh; ++e) {
                        gv[e] += p[j] * go[e];
                        acc += go[e] * v[e];
                    }
                    dp[j] = acc;
                    dot += p[j] * acc;
                }
                const T* q = src + i * W + h * dh;
                T* gq = gs + i * W + h * dh;
                for (std::size_t j = 0; j <= i; ++j) {
                    const T ds = p[j] * (dp[j] - dot) * inv_sqrt;
                    const T* k = src + j * W + D + h * dh;
                    T* gk = gs + j * W + D + h * dh;
                    for (std::size_t e = 0; e < dh; ++e) {
                        gq[e] += ds * k[e];
                        gk[e] += ds * q[e];
                    }
                }
            }
        }
    });
}

// ------------------------------------------------------------- reductions

/// out[n] = x[rows[n], cols[n]] for a 2-D x.
template <class T>
Var<T> pick(Var<T> x, std::span<const std::size_t> rows, std::span<const int> cols) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    detail::require(rows.size() == cols.size() && !rows.empty(), "pick: need equal, nonempty index lists");
    const std::size_t C = xv.cols();
    Tensor<T> out({rows.size()});
    std::vector<std::size_t> flat(rows.size());
    for (std::size_t n = 0; n < rows.size(); ++n) {
        if (rows[n] >= xv.rows() || cols[n] < 0 || static_cast<std::size_t>(cols[n]) >= C)
            throw DimensionError("pick: index (" + std::to_string(rows[n]) + "," + std::to_string(cols[n]) +
                                 ") outside " + shape_str(xv.shape()));
        flat[n] = rows[n] * C + static_cast<std::size_t>(cols[n]);
        out[n] = xv[flat[n]];
    }
    return tape.record(std::move(out), [x, flat = std::move(flat), self = std::size_t{tape.size()}](Tape<T>& t) {
        std::span<T> g = t.grad(Var<T>{&t, self});
        std::span<T> gx = t.grad(x);
        for (std::size_t n = 0; n < flat.size(); ++n) gx[flat[n]] += g[n];
    });
}

/// Scalar sum_i weights[i] * x[i].
template <class T>
Var<T> weighted_sum(Var<T> x, std::span<const T> weights) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    detail::require(weights.size() == xv.size(), "weighted_sum: " + std::to_string(weights.size()) +
                                                     " weights for " + shape_str(xv.shape()));
    T acc{0};
    for (std::size_t i = 0; i < xv.size(); ++i) acc += weights[i] * xv[i];
    std::vector<T> w(weights.begin(), weights.end());
    return tape.record(Tensor<T>::scalar(acc), [x, w = std::move(w), self = std::size_t{tape.size()}](Tape<T>& t) {
        const T g = t.grad(Var<T>{&t, self})[0];
        std::span<T> gx = t.grad(x);
        for (std::size_t i = 0; i < w.size(); ++i) gx[i] += w[i] * g;
    });
}

/// Scalar bias + sum_i coeffs[i] * terms[i], each term a scalar.
template <class T>
Var<T> linear_combination(std::span<const Var<T>> terms, std::span<const T> coeffs, T bias = T{0}) {
    detail::require(!terms.empty() && terms.size() == coeffs.size(), "linear_combination: size mismatch");
    Tape<T>& tape = *terms.front().tape;
    T acc = bias;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        detail::require(terms[i].value().size() == 1, "linear_combination: terms must be scalars");
        acc += coeffs[i] * terms[i].item();
    }
    std::vector<Var<T>> ts(terms.begin(), terms.end());
    std::vector<T> cs(coeffs.begin(), coeffs.end());
    return tape.record(Tensor<T>::scalar(acc), [ts = std::move(ts), cs = std::move(cs),
                                                self = std::size_t{tape.size()}](Tape<T>& t) {
        const T g = t.grad(Var<T>{&t, self})[0];
        for (std::size_t i = 0; i < ts.size(); ++i) t.grad(ts[i])[0] += cs[i] * g;
    });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    const Var<T> terms[] = {a, b};
    const T coeffs[] = {T{1}, T{-1}};
    return linear_combination<T>(terms, coeffs);
}

} // namespace sepo::ad
