#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "biax/tensor.hpp"

namespace biax {

namespace detail {

// Null when the input does not take a gradient.
template <class T>
T* grad_ptr(TensorNode<T>& self, std::size_t i) {
    auto& in = *self.inputs[i];
    return in.requires_grad ? in.ensure_grad().data() : nullptr;
}

template <class T>
bool is_suffix_of(const Shape& suffix, const Shape& full) {
    if (suffix.size() > full.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
    }
}

template <class T>
void require_suffix(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
    if (!is_suffix_of<T>(b.shape(), a.shape()) || b.numel() == 0) {
        throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                         shape_str(a.shape()));
    }
}

template <class T>
T gelu_value(T x) {
    const T c = T(std::sqrt(2.0 / std::numbers::pi));
    return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_deriv(T x) {
    const T c = T(std::sqrt(2.0 / std::numbers::pi));
    T u = c * (x + T(0.044715) * x * x * x);
    T th = std::tanh(u);
    T du = c * (T(1) + T(3 * 0.044715) * x * x);
    return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. The right operand may be a trailing-suffix broadcast
// (e.g. a bias of shape [D] against [N, L, D]).
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_suffix(a, b, "add");
    const std::size_t n = a.numel(), nb = b.numel();
    std::vector<T> out(a.values().begin(), a.values().end());
    auto bv = b.values();
    for (std::size_t i = 0; i < n; ++i) out[i] += bv[i % nb];
    return make_result<T>(a.shape(), std::move(out), {a, b}, [n, nb](TensorNode<T>& self) {
        const auto& g = self.grad;
        if (T* ga = detail::grad_ptr(self, 0)) {
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (T* gb = detail::grad_ptr(self, 1)) {
            for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i];
        }
    });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_suffix(a, b, "sub");
    const std::size_t n = a.numel(), nb = b.numel();
    std::vector<T> out(a.values().begin(), a.values().end());
    auto bv = b.values();
    for (std::size_t i = 0; i < n; ++i) out[i] -= bv[i % nb];
    return make_result<T>(a.shape(), std::move(out), {a, b}, [n, nb](TensorNode<T>& self) {
        const auto& g = self.grad;
        if (T* ga = detail::grad_ptr(self, 0)) {
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (T* gb = detail::grad_ptr(self, 1)) {
            for (std::size_t i = 0; i < n; ++i) gb[i % nb] -= g[i];
        }
    });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_suffix(a, b, "mul");
    const std::size_t n = a.numel(), nb = b.numel();
    auto av = a.values();
    auto bv = b.values();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i % nb];
    return make_result<T>(a.shape(), std::move(out), {a, b}, [n, nb](TensorNode<T>& self) {
        const auto& g = self.grad;
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        if (T* ga = detail::grad_ptr(self, 0)) {
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i % nb];
        }
        if (T* gb = detail::grad_ptr(self, 1)) {
            for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i] * av[i];
        }
    });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
    std::vector<T> out(a.values().begin(), a.values().end());
    for (auto& v : out) v *= s;
    return make_result<T>(a.shape(), std::move(out), {a}, [s](TensorNode<T>& self) {
        T* ga = detail::grad_ptr(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += s * self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Unary activations
// ---------------------------------------------------------------------------

template <class T, class F, class DF>
BasicTensor<T> unary_op(const BasicTensor<T>& a, F f, DF df) {
    auto av = a.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    return make_result<T>(a.shape(), std::move(out), {a}, [df](TensorNode<T>& self) {
        T* ga = detail::grad_ptr(self, 0);
        const auto& x = self.inputs[0]->value;
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] += self.grad[i] * df(x[i]);
    });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
    return unary_op(
        a, [](T x) { return x > T(0) ? x : T(0); }, [](T x) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
BasicTensor<T> elu(const BasicTensor<T>& a) {
    return unary_op(
        a, [](T x) { return x > T(0) ? x : std::expm1(x); },
        [](T x) { return x > T(0) ? T(1) : std::exp(x); });
}

/// tanh-approximated GELU.
template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& a) {
    return unary_op(a, [](T x) { return detail::gelu_value(x); },
                    [](T x) { return detail::gelu_deriv(x); });
}

template <class T>
BasicTensor<T> tanh(const BasicTensor<T>& a) {
    return unary_op(
        a, [](T x) { return std::tanh(x); },
        [](T x) {
            T t = std::tanh(x);
            return T(1) - t * t;
        });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
    T s = T(0);
    for (T v : a.values()) s += v;
    return make_result<T>(Shape{}, {s}, {a}, [](TensorNode<T>& self) {
        T* ga = detail::grad_ptr(self, 0);
        const T g = self.grad[0];
        for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) ga[i] += g;
    });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
    return scale(sum(a), T(1) / T(a.numel()));
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// [..., M, K] x [K, N] -> [..., M, N]
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const std::size_t K = b.dim(0), N = b.dim(1), R = a.numel() / K;
    Shape shape = a.shape();
    shape.back() = N;
    std::vector<T> out(R * N, T(0));
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t r = 0; r < R; ++r) {
        T* o = out.data() + r * N;
        for (std::size_t k = 0; k < K; ++k) {
            const T x = av[r * K + k];
            const T* brow = bv.data() + k * N;
            for (std::size_t j = 0; j < N; ++j) o[j] += x * brow[j];
        }
    }
    return make_result<T>(std::move(shape), std::move(out), {a, b}, [R, K, N](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        if (T* ga = detail::grad_ptr(self, 0)) {
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t k = 0; k < K; ++k) {
                    T s = T(0);
                    for (std::size_t j = 0; j < N; ++j) s += g[r * N + j] * bv[k * N + j];
                    ga[r * K + k] += s;
                }
        }
        if (T* gb = detail::grad_ptr(self, 1)) {
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t k = 0; k < K; ++k) {
                    const T x = av[r * K + k];
                    for (std::size_t j = 0; j < N; ++j) gb[k * N + j] += x * g[r * N + j];
                }
        }
    });
}

/// Batched product [B, M, K] x [B, K, N] -> [B, M, N].
template <class T>
BasicTensor<T> bmm(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
    std::vector<T> out(B * M * N, T(0));
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t bb = 0; bb < B; ++bb)
        for (std::size_t i = 0; i < M; ++i) {
            T* o = out.data() + (bb * M + i) * N;
            for (std::size_t k = 0; k < K; ++k) {
                const T x = av[(bb * M + i) * K + k];
                const T* brow = bv.data() + (bb * K + k) * N;
                for (std::size_t j = 0; j < N; ++j) o[j] += x * brow[j];
            }
        }
    return make_result<T>(Shape{B, M, N}, std::move(out), {a, b}, [B, M, K, N](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        T* ga = detail::grad_ptr(self, 0);
        T* gb = detail::grad_ptr(self, 1);
        for (std::size_t bb = 0; bb < B; ++bb)
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t k = 0; k < K; ++k) {
                    const std::size_t ai = (bb * M + i) * K + k;
                    const T* grow = g + (bb * M + i) * N;
                    const std::size_t boff = (bb * K + k) * N;
                    if (ga) {
                        T s = T(0);
                        for (std::size_t j = 0; j < N; ++j) s += grow[j] * bv[boff + j];
                        ga[ai] += s;
                    }
                    if (gb) {
                        for (std::size_t j = 0; j < N; ++j) gb[boff + j] += av[ai] * grow[j];
                    }
                }
    });
}

/// x [..., K] times weight [N, K] transposed, plus optional bias [N].
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias = {}) {
    if (x.rank() < 1 || weight.rank() != 2 || x.shape().back() != weight.dim(1)) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
    }
    const std::size_t K = weight.dim(1), N = weight.dim(0), R = x.numel() / K;
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != N)) {
        throw ShapeError("linear: bias shape " + shape_str(bias.shape()));
    }
    Shape shape = x.shape();
    shape.back() = N;
    std::vector<T> out(R * N);
    auto xv = x.values();
    auto wv = weight.values();
    for (std::size_t r = 0; r < R; ++r) {
        const T* xr = xv.data() + r * K;
        for (std::size_t j = 0; j < N; ++j) {
            const T* wr = wv.data() + j * K;
            T s = has_bias ? bias[j] : T(0);
            for (std::size_t k = 0; k < K; ++k) s += xr[k] * wr[k];
            out[r * N + j] = s;
        }
    }
    std::vector<BasicTensor<T>> inputs{x, weight};
    if (has_bias) inputs.push_back(bias);
    return make_result<T>(std::move(shape), std::move(out), std::move(inputs),
                          [R, K, N, has_bias](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const auto& xv = self.inputs[0]->value;
        const auto& wv = self.inputs[1]->value;
        T* gx = detail::grad_ptr(self, 0);
        T* gw = detail::grad_ptr(self, 1);
        T* gbias = has_bias ? detail::grad_ptr(self, 2) : nullptr;
        for (std::size_t r = 0; r < R; ++r) {
            const T* gr = g + r * N;
            for (std::size_t j = 0; j < N; ++j) {
                const T gj = gr[j];
                if (gj == T(0)) continue;
                if (gx) {
                    T* gxr = gx + r * K;
                    const T* wr = wv.data() + j * K;
                    for (std::size_t k = 0; k < K; ++k) gxr[k] += gj * wr[k];
                }
                if (gw) {
                    T* gwr = gw + j * K;
                    const T* xr = xv.data() + r * K;
                    for (std::size_t k = 0; k < K; ++k) gwr[k] += gj * xr[k];
                }
                if (gbias) gbias[j] += gj;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Softmax over the last axis.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& a) {
    if (a.rank() < 1) throw ShapeError("softmax: scalar input");
    const std::size_t D = a.shape().back(), R = a.numel() / D;
    auto av = a.values();
    std::vector<T> out(a.numel());
    for (std::size_t r = 0; r < R; ++r) {
        const T* x = av.data() + r * D;
        T* y = out.data() + r * D;
        T mx = *std::max_element(x, x + D);
        T s = T(0);
        for (std::size_t j = 0; j < D; ++j) s += (y[j] = std::exp(x[j] - mx));
        for (std::size_t j = 0; j < D; ++j) y[j] /= s;
    }
    auto probs = out;
    return make_result<T>(a.shape(), std::move(out), {a},
                          [R, D, probs = std::move(probs)](TensorNode<T>& self) {
        T* ga = detail::grad_ptr(self, 0);
        for (std::size_t r = 0; r < R; ++r) {
            const T* p = probs.data() + r * D;
            const T* g = self.grad.data() + r * D;
            T dot = T(0);
            for (std::size_t j = 0; j < D; ++j) dot += p[j] * g[j];
            for (std::size_t j = 0; j < D; ++j) ga[r * D + j] += p[j] * (g[j] - dot);
        }
    });
}

/// Standardizes each last-axis vector, then applies gamma/beta.
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-5)) {
    if (x.rank() < 1 || x.shape().back() == 0) throw ShapeError("layer_norm: empty last axis");
    const std::size_t D = x.shape().back(), R = x.numel() / D;
    if (gamma.numel() != D || beta.numel() != D) {
        throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(D) + " entries");
    }
    auto xv = x.values();
    auto gv = gamma.values();
    auto bv = beta.values();
    std::vector<T> out(x.numel()), xhat(x.numel()), inv_std(R);
    for (std::size_t r = 0; r < R; ++r) {
        const T* xr = xv.data() + r * D;
        T mu = T(0);
        for (std::size_t j = 0; j < D; ++j) mu += xr[j];
        mu /= T(D);
        T var = T(0);
        for (std::size_t j = 0; j < D; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= T(D);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < D; ++j) {
            const T h = (xr[j] - mu) * is;
            xhat[r * D + j] = h;
            out[r * D + j] = h * gv[j] + bv[j];
        }
    }
    return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                          [R, D, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const auto& gv = self.inputs[1]->value;
        T* gx = detail::grad_ptr(self, 0);
        T* gg = detail::grad_ptr(self, 1);
        T* gbeta = detail::grad_ptr(self, 2);
        for (std::size_t r = 0; r < R; ++r) {
            const T* gr = g + r * D;
            const T* h = xhat.data() + r * D;
            T sum_dh = T(0), sum_dh_h = T(0);
            for (std::size_t j = 0; j < D; ++j) {
                const T dh = gr[j] * gv[j];
                sum_dh += dh;
                sum_dh_h += dh * h[j];
                if (gg) gg[j] += gr[j] * h[j];
                if (gbeta) gbeta[j] += gr[j];
            }
            if (gx) {
                const T inv_d = T(1) / T(D);
                for (std::size_t j = 0; j < D; ++j) {
                    const T dh = gr[j] * gv[j];
                    gx[r * D + j] += inv_std[r] * (dh - inv_d * sum_dh - h[j] * inv_d * sum_dh_h);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Layout ops
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    std::vector<T> out(a.values().begin(), a.values().end());
    return make_result<T>(std::move(shape), std::move(out), {a}, [](TensorNode<T>& self) {
        T* ga = detail::grad_ptr(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    });
}

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// Maps each output flat index to its source flat index.
inline std::vector<std::size_t> permute_index(const Shape& in, const std::vector<std::size_t>& axes) {
    const std::size_t r = in.size();
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[axes[i]];
    auto in_st = strides_of(in);
    std::vector<std::size_t> idx(shape_numel(in));
    std::vector<std::size_t> counter(r, 0);
    for (std::size_t flat = 0; flat < idx.size(); ++flat) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < r; ++i) src += counter[i] * in_st[axes[i]];
        idx[flat] = src;
        for (std::size_t i = r; i-- > 0;) {
            if (++counter[i] < out_shape[i]) break;
            counter[i] = 0;
        }
    }
    return idx;
}

}  // namespace detail

/// Output axis i is input axis axes[i].
template <class T>
BasicTensor<T> permute(const BasicTensor<T>& a, const std::vector<std::size_t>& axes) {
    const std::size_t r = a.rank();
    std::vector<bool> seen(r, false);
    if (axes.size() != r) throw ShapeError("permute: axis count mismatch");
    for (auto ax : axes) {
        if (ax >= r || seen[ax]) throw ShapeError("permute: axes are not a permutation");
        seen[ax] = true;
    }
    Shape shape(r);
    for (std::size_t i = 0; i < r; ++i) shape[i] = a.dim(axes[i]);
    auto idx = detail::permute_index(a.shape(), axes);
    auto av = a.values();
    std::vector<T> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = av[idx[i]];
    return make_result<T>(std::move(shape), std::move(out), {a}, [idx = std::move(idx)](TensorNode<T>& self) {
        T* ga = detail::grad_ptr(self, 0);
        for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += self.grad[i];
    });
}

/// Half-open range [begin, end) along one axis.
template <class T>
BasicTensor<T> slice(const BasicTensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
    if (axis >= a.rank() || begin > end || end > a.dim(axis)) {
        throw ShapeError("slice: bad range on axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
    }
    const auto& s = a.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t full = s[axis], len = end - begin;
    Shape shape = s;
    shape[axis] = len;
    std::vector<T> out(outer * len * inner);
    auto av = a.values();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(av.data() + (o * full + begin) * inner, len * inner, out.data() + o * len * inner);
    return make_result<T>(std::move(shape), std::move(out), {a},
                          [outer, inner, full, begin, len](TensorNode<T>& self) {
        T* ga = detail::grad_ptr(self, 0);
        for (std::size_t o = 0; o < outer; ++o) {
            T* dst = ga + (o * full + begin) * inner;
            const T* src = self.grad.data() + o * len * inner;
            for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
    });
}

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != axis && s[i] != s0[i]) throw ShapeError("concat: shape mismatch off-axis");
        total += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    Shape shape = s0;
    shape[axis] = total;
    std::vector<T> out(outer * total * inner);
    std::vector<std::size_t> offsets, lens;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t len = p.dim(axis);
        auto pv = p.values();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(pv.data() + o * len * inner, len * inner, out.data() + (o * total + off) * inner);
        offsets.push_back(off);
        lens.push_back(len);
        off += len;
    }
    return make_result<T>(std::move(shape), std::move(out), parts,
                          [outer, inner, total, offsets, lens](TensorNode<T>& self) {
        for (std::size_t k = 0; k < offsets.size(); ++k) {
            T* gp = detail::grad_ptr(self, k);
            if (!gp) continue;
            for (std::size_t o = 0; o < outer; ++o) {
                const T* src = self.grad.data() + (o * total + offsets[k]) * inner;
                T* dst = gp + o * lens[k] * inner;
                for (std::size_t i = 0; i < lens[k] * inner; ++i) dst[i] += src[i];
            }
        }
    });
}

/// Repeats a tensor along a new leading axis of size `count`.
template <class T>
BasicTensor<T> broadcast_leading(const BasicTensor<T>& a, std::size_t count) {
    const std::size_t n = a.numel();
    Shape shape{count};
    shape.insert(shape.end(), a.shape().begin(), a.shape().end());
    std::vector<T> out(count * n);
    for (std::size_t c = 0; c < count; ++c) std::copy(a.values().begin(), a.values().end(), out.begin() + c * n);
    return make_result<T>(std::move(shape), std::move(out), {a}, [count, n](TensorNode<T>& self) {
        T* ga = detail::grad_ptr(self, 0);
        for (std::size_t c = 0; c < count; ++c)
            for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[c * n + i];
    });
}

/// Multiplies each last-axis vector by a constant factor (no gradient to the factors).
template <class T>
BasicTensor<T> scale_rows(const BasicTensor<T>& a, std::vector<T> factors) {
    const std::size_t D = a.shape().back(), R = a.numel() / D;
    if (factors.size() != R) throw ShapeError("scale_rows: factor count mismatch");
    std::vector<T> out(a.values().begin(), a.values().end());
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t j = 0; j < D; ++j) out[r * D + j] *= factors[r];
    return make_result<T>(a.shape(), std::move(out), {a}, [R, D, factors = std::move(factors)](TensorNode<T>& self) {
        T* ga = detail::grad_ptr(self, 0);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t j = 0; j < D; ++j) ga[r * D + j] += factors[r] * self.grad[r * D + j];
    });
}

/// Row lookup: out[i] = table[indices[i]], or zeros where indices[i] < 0.
/// Equivalent to a one-hot encoding followed by a bias-free linear map.
template <class T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::vector<int> indices) {
    if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2");
    const std::size_t V = table.dim(0), D = table.dim(1);
    for (int i : indices)
        if (i >= static_cast<int>(V)) throw ContractError("embedding: index " + std::to_string(i) + " >= " + std::to_string(V));
    std::vector<T> out(indices.size() * D, T(0));
    auto tv = table.values();
    for (std::size_t r = 0; r < indices.size(); ++r)
        if (indices[r] >= 0) std::copy_n(tv.data() + indices[r] * D, D, out.data() + r * D);
    Shape shape{indices.size(), D};
    return make_result<T>(std::move(shape), std::move(out), {table},
                          [D, indices = std::move(indices)](TensorNode<T>& self) {
        T* gt = detail::grad_ptr(self, 0);
        for (std::size_t r = 0; r < indices.size(); ++r) {
            if (indices[r] < 0) continue;
            for (std::size_t j = 0; j < D; ++j) gt[indices[r] * D + j] += self.grad[r * D + j];
        }
    });
}

/// Mean cross-entropy over rows with target >= 0. Row r uses only its first
/// class_counts[r] logits; rows with target < 0 contribute nothing.
template <class T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const std::vector<int>& targets,
                             const std::vector<int>& class_counts) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [N, C]");
    const std::size_t N = logits.dim(0), C = logits.dim(1);
    if (targets.size() != N || class_counts.size() != N) throw ShapeError("cross_entropy: target count mismatch");
    auto lv = logits.values();
    std::vector<T> probs(N * C, T(0));
    T total = T(0);
    std::size_t count = 0;
    for (std::size_t r = 0; r < N; ++r) {
        if (targets[r] < 0) continue;
        const std::size_t c = static_cast<std::size_t>(class_counts[r]);
        if (c < 1 || c > C || targets[r] >= class_counts[r]) {
            throw ContractError("cross_entropy: target outside the row's class range");
        }
        const T* x = lv.data() + r * C;
        T mx = *std::max_element(x, x + c);
        T s = T(0);
        for (std::size_t j = 0; j < c; ++j) s += std::exp(x[j] - mx);
        const T lse = mx + std::log(s);
        total += lse - x[targets[r]];
        for (std::size_t j = 0; j < c; ++j) probs[r * C + j] = std::exp(x[j] - lse);
        ++count;
    }
    if (count == 0) throw ContractError("cross_entropy: no labeled rows");
    const T inv = T(1) / T(count);
    return make_result<T>(Shape{}, {total * inv}, {logits},
                          [N, C, inv, targets, probs = std::move(probs)](TensorNode<T>& self) {
        T* gl = detail::grad_ptr(self, 0);
        const T g = self.grad[0] * inv;
        for (std::size_t r = 0; r < N; ++r) {
            if (targets[r] < 0) continue;
            for (std::size_t j = 0; j < C; ++j) gl[r * C + j] += g * probs[r * C + j];
            gl[r * C + targets[r]] -= g;
        }
    });
}

/// Per-row affine map with row-specific parameters: out[r,:] = s[r] * w[r,:] + b[r,:].
/// `s` is data (no gradient).
template <class T>
BasicTensor<T> scale_rows_add(std::vector<T> s, const BasicTensor<T>& w, const BasicTensor<T>& b) {
    detail::require_same_shape(w, b, "scale_rows_add");
    const std::size_t D = w.shape().back(), R = w.numel() / D;
    if (s.size() != R) throw ShapeError("scale_rows_add: scalar count mismatch");
    auto wv = w.values();
    auto bv = b.values();
    std::vector<T> out(w.numel());
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t j = 0; j < D; ++j) out[r * D + j] = s[r] * wv[r * D + j] + bv[r * D + j];
    return make_result<T>(w.shape(), std::move(out), {w, b}, [R, D, s = std::move(s)](TensorNode<T>& self) {
        T* gw = detail::grad_ptr(self, 0);
        T* gb = detail::grad_ptr(self, 1);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t j = 0; j < D; ++j) {
                const T g = self.grad[r * D + j];
                if (gw) gw[r * D + j] += s[r] * g;
                if (gb) gb[r * D + j] += g;
            }
    });
}

}  // namespace biax
