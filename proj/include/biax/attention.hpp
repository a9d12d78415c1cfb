#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "biax/ops.hpp"

namespace biax {

/// Additive bias used for a masked (query, key) pair. Finite so that softmax
/// never sees inf - inf.
inline constexpr float kMaskedBias = -1e9f;

/// Additive attention bias over (query t, key s), entries 0 or kMaskedBias.
///
/// Holds either one [Lq, Lk] matrix shared across the batch or one matrix per
/// sequence ([batch, Lq, Lk]).
class AttentionMask {
public:
    AttentionMask() = default;

    AttentionMask(std::size_t batch, std::size_t lq, std::size_t lk, bool open = true)
        : batch_(batch), lq_(lq), lk_(lk), bias_(batch * lq * lk, open ? 0.0f : kMaskedBias) {}

    static AttentionMask shared(std::size_t lq, std::size_t lk, bool open = true) {
        return AttentionMask(1, lq, lk, open);
    }

    std::size_t batch() const { return batch_; }
    std::size_t queries() const { return lq_; }
    std::size_t keys() const { return lk_; }

    float bias(std::size_t b, std::size_t t, std::size_t s) const {
        return bias_[((batch_ == 1 ? 0 : b) * lq_ + t) * lk_ + s];
    }
    bool visible(std::size_t b, std::size_t t, std::size_t s) const { return bias(b, t, s) == 0.0f; }

    void allow(std::size_t b, std::size_t t, std::size_t s) { bias_[(b * lq_ + t) * lk_ + s] = 0.0f; }
    void block(std::size_t b, std::size_t t, std::size_t s) { bias_[(b * lq_ + t) * lk_ + s] = kMaskedBias; }

    bool row_empty(std::size_t b, std::size_t t) const {
        for (std::size_t s = 0; s < lk_; ++s)
            if (visible(b, t, s)) return false;
        return true;
    }

private:
    std::size_t batch_ = 0, lq_ = 0, lk_ = 0;
    std::vector<float> bias_;
};

/// What to do with a query row whose keys are all masked.
enum class EmptyRows { reject, zero };

/// Scaled dot-product multi-head attention.
///
/// q: [B, Lq, D], k and v: [B, Lk, D] (rank-2 inputs are treated as B = 1).
/// Head h uses channels [h*D/heads, (h+1)*D/heads) with scale 1/sqrt(D/heads).
/// With EmptyRows::zero, fully masked query rows produce a zero output row.
template <class T>
BasicTensor<T> masked_softmax_attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                        const BasicTensor<T>& v, const AttentionMask* mask,
                                        std::size_t heads, EmptyRows empty = EmptyRows::reject) {
    const bool flat = q.rank() == 2;
    if (q.rank() != k.rank() || q.rank() != v.rank() || (q.rank() != 2 && q.rank() != 3)) {
        throw ShapeError("attention: q/k/v must all be rank 2 or all rank 3");
    }
    const std::size_t B = flat ? 1 : q.dim(0);
    const std::size_t Lq = q.dim(q.rank() - 2), Lk = k.dim(k.rank() - 2), D = q.shape().back();
    if ((!flat && (k.dim(0) != B || v.dim(0) != B)) || k.shape().back() != D || v.shape().back() != D ||
        v.dim(v.rank() - 2) != Lk) {
        throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()) + " do not align");
    }
    if (heads == 0 || D % heads != 0) throw ShapeError("attention: model width not divisible by heads");
    if (mask && (mask->queries() != Lq || mask->keys() != Lk || (mask->batch() != 1 && mask->batch() != B))) {
        throw ShapeError("attention: mask dimensions do not match Lq x Lk");
    }
    if (Lk == 0) throw ShapeError("attention: no keys");
    const std::size_t dh = D / heads;
    const T sc = T(1) / std::sqrt(T(dh));

    std::vector<char> empty_row(B * Lq, 0);
    if (mask) {
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < Lq; ++t)
                if (mask->row_empty(b, t)) {
                    if (empty == EmptyRows::reject) {
                        throw MaskError("attention: query row " + std::to_string(t) + " has every key masked");
                    }
                    empty_row[b * Lq + t] = 1;
                }
    }

    auto qv = q.values();
    auto kv = k.values();
    auto vv = v.values();
    std::vector<T> probs(B * heads * Lq * Lk, T(0));
    std::vector<T> out(B * Lq * D, T(0));
    std::vector<T> scores(Lk);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t t = 0; t < Lq; ++t) {
                if (empty_row[b * Lq + t]) continue;
                const T* qr = qv.data() + (b * Lq + t) * D + h * dh;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t s = 0; s < Lk; ++s) {
                    const T* kr = kv.data() + (b * Lk + s) * D + h * dh;
                    T dot = T(0);
                    for (std::size_t j = 0; j < dh; ++j) dot += qr[j] * kr[j];
                    T sv = dot * sc;
                    if (mask) sv += T(mask->bias(b, t, s));
                    scores[s] = sv;
                    mx = std::max(mx, sv);
                }
                T z = T(0);
                for (std::size_t s = 0; s < Lk; ++s) z += (scores[s] = std::exp(scores[s] - mx));
                T* p = probs.data() + ((b * heads + h) * Lq + t) * Lk;
                T* o = out.data() + (b * Lq + t) * D + h * dh;
                for (std::size_t s = 0; s < Lk; ++s) {
                    p[s] = scores[s] / z;
                    if (p[s] == T(0)) continue;
                    const T* vr = vv.data() + (b * Lk + s) * D + h * dh;
                    for (std::size_t j = 0; j < dh; ++j) o[j] += p[s] * vr[j];
                }
            }

    return make_result<T>(q.shape(), std::move(out), {q, k, v},
                          [B, heads, Lq, Lk, D, dh, sc, probs = std::move(probs)](TensorNode<T>& self) {
        const auto& qv = self.inputs[0]->value;
        const auto& kv = self.inputs[1]->value;
        const auto& vv = self.inputs[2]->value;
        T* gq = detail::grad_ptr(self, 0);
        T* gk = detail::grad_ptr(self, 1);
        T* gv = detail::grad_ptr(self, 2);
        std::vector<T> dp(Lk);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t t = 0; t < Lq; ++t) {
                    const T* p = probs.data() + ((b * heads + h) * Lq + t) * Lk;
                    const T* go = self.grad.data() + (b * Lq + t) * D + h * dh;
                    T dot = T(0);
                    for (std::size_t s = 0; s < Lk; ++s) {
                        if (p[s] == T(0)) {
                            dp[s] = T(0);
                            continue;
                        }
                        const T* vr = vv.data() + (b * Lk + s) * D + h * dh;
                        T d = T(0);
                        for (std::size_t j = 0; j < dh; ++j) d += go[j] * vr[j];
                        dp[s] = d;
                        dot += p[s] * d;
                        if (gv) {
                            T* gvr = gv + (b * Lk + s) * D + h * dh;
                            for (std::size_t j = 0; j < dh; ++j) gvr[j] += p[s] * go[j];
                        }
                    }
                    const T* qr = qv.data() + (b * Lq + t) * D + h * dh;
                    T* gqr = gq ? gq + (b * Lq + t) * D + h * dh : nullptr;
                    for (std::size_t s = 0; s < Lk; ++s) {
                        if (p[s] == T(0)) continue;
                        const T ds = p[s] * (dp[s] - dot) * sc;
                        const T* kr = kv.data() + (b * Lk + s) * D + h * dh;
                        if (gqr)
                            for (std::size_t j = 0; j < dh; ++j) gqr[j] += ds * kr[j];
                        if (gk) {
                            T* gkr = gk + (b * Lk + s) * D + h * dh;
                            for (std::size_t j = 0; j < dh; ++j) gkr[j] += ds * qr[j];
                        }
                    }
                }
    });
}

enum class FeatureMap { elu_plus_one, identity };

/// Kernelized attention in accumulator form:
///   out_t = phi(q_t)^T S / phi(q_t)^T z,  S = sum_s phi(k_s) v_s^T,  z = sum_s phi(k_s)
///
/// q: [B, Lq, D], k: [B, Lk, D], v: [B, Lk, Dv]; heads split D and Dv evenly.
/// `key_weights` ([B*Lk], entries 0/1) optionally drops keys from the sums.
/// A normalizer below 1e-8 throws NumericalError unless `empty` is
/// EmptyRows::zero and every key of that sequence was dropped.
template <class T>
BasicTensor<T> linear_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                FeatureMap fmap, std::size_t heads = 1,
                                const std::vector<T>* key_weights = nullptr,
                                EmptyRows empty = EmptyRows::reject) {
    const bool flat = q.rank() == 2;
    if (q.rank() != k.rank() || q.rank() != v.rank() || (q.rank() != 2 && q.rank() != 3)) {
        throw ShapeError("linear_attention: q/k/v must all be rank 2 or all rank 3");
    }
    const std::size_t B = flat ? 1 : q.dim(0);
    const std::size_t Lq = q.dim(q.rank() - 2), Lk = k.dim(k.rank() - 2);
    const std::size_t D = q.shape().back(), Dv = v.shape().back();
    if ((!flat && (k.dim(0) != B || v.dim(0) != B)) || k.shape().back() != D || v.dim(v.rank() - 2) != Lk) {
        throw ShapeError("linear_attention: q/k/v shapes do not align");
    }
    if (heads == 0 || D % heads != 0 || Dv % heads != 0) throw ShapeError("linear_attention: bad head count");
    if (key_weights && key_weights->size() != B * Lk) throw ShapeError("linear_attention: key weight count");
    const std::size_t dk = D / heads, dv = Dv / heads;

    auto phi = [fmap](T x) { return fmap == FeatureMap::identity ? x : (x > T(0) ? x + T(1) : std::exp(x)); };
    auto dphi = [fmap](T x) { return fmap == FeatureMap::identity ? T(1) : (x > T(0) ? T(1) : std::exp(x)); };

    auto qv = q.values();
    auto kv = k.values();
    auto vv = v.values();
    std::vector<T> fq(qv.size()), fk(kv.size());
    for (std::size_t i = 0; i < qv.size(); ++i) fq[i] = phi(qv[i]);
    for (std::size_t i = 0; i < kv.size(); ++i) fk[i] = phi(kv[i]);

    // Per (b, h): S [dk x dv], z [dk].
    std::vector<T> S(B * heads * dk * dv, T(0)), Z(B * heads * dk, T(0));
    std::vector<T> den(B * heads * Lq, T(0));
    std::vector<char> dead(B, 0);
    std::vector<T> out(B * Lq * Dv, T(0));
    for (std::size_t b = 0; b < B; ++b) {
        bool any_key = false;
        for (std::size_t s = 0; s < Lk; ++s) any_key = any_key || !key_weights || (*key_weights)[b * Lk + s] != T(0);
        if (!any_key) {
            if (empty == EmptyRows::reject) throw NumericalError("linear_attention: no keys contribute");
            dead[b] = 1;
            continue;
        }
        for (std::size_t h = 0; h < heads; ++h) {
            T* Sbh = S.data() + (b * heads + h) * dk * dv;
            T* zbh = Z.data() + (b * heads + h) * dk;
            for (std::size_t s = 0; s < Lk; ++s) {
                const T w = key_weights ? (*key_weights)[b * Lk + s] : T(1);
                if (w == T(0)) continue;
                const T* fks = fk.data() + (b * Lk + s) * D + h * dk;
                const T* vs = vv.data() + (b * Lk + s) * Dv + h * dv;
                for (std::size_t i = 0; i < dk; ++i) {
                    zbh[i] += w * fks[i];
                    for (std::size_t j = 0; j < dv; ++j) Sbh[i * dv + j] += w * fks[i] * vs[j];
                }
            }
            for (std::size_t t = 0; t < Lq; ++t) {
                const T* fqt = fq.data() + (b * Lq + t) * D + h * dk;
                T d = T(0);
                for (std::size_t i = 0; i < dk; ++i) d += fqt[i] * zbh[i];
                if (!(std::abs(d) >= T(1e-8))) {
                    throw NumericalError("linear_attention: normalizer below 1e-8");
                }
                den[(b * heads + h) * Lq + t] = d;
                T* o = out.data() + (b * Lq + t) * Dv + h * dv;
                for (std::size_t i = 0; i < dk; ++i)
                    for (std::size_t j = 0; j < dv; ++j) o[j] += fqt[i] * Sbh[i * dv + j];
                for (std::size_t j = 0; j < dv; ++j) o[j] /= d;
            }
        }
    }

    auto outv = out;
    std::vector<T> kw = key_weights ? *key_weights : std::vector<T>{};
    Shape shape = q.shape();
    shape.back() = Dv;
    return make_result<T>(std::move(shape), std::move(out), {q, k, v},
                          [=, fq = std::move(fq), fk = std::move(fk), S = std::move(S), Z = std::move(Z),
                           den = std::move(den), outv = std::move(outv), kw = std::move(kw),
                           dead = std::move(dead)](TensorNode<T>& self) {
        const auto& qv = self.inputs[0]->value;
        const auto& kv = self.inputs[1]->value;
        const auto& vv = self.inputs[2]->value;
        T* gq = detail::grad_ptr(self, 0);
        T* gk = detail::grad_ptr(self, 1);
        T* gvv = detail::grad_ptr(self, 2);
        std::vector<T> dS(dk * dv), dz(dk), dnum(dv);
        for (std::size_t b = 0; b < B; ++b) {
            if (dead[b]) continue;
            for (std::size_t h = 0; h < heads; ++h) {
                const T* Sbh = S.data() + (b * heads + h) * dk * dv;
                const T* zbh = Z.data() + (b * heads + h) * dk;
                std::fill(dS.begin(), dS.end(), T(0));
                std::fill(dz.begin(), dz.end(), T(0));
                for (std::size_t t = 0; t < Lq; ++t) {
                    const T d = den[(b * heads + h) * Lq + t];
                    const T* go = self.grad.data() + (b * Lq + t) * Dv + h * dv;
                    const T* o = outv.data() + (b * Lq + t) * Dv + h * dv;
                    T dden = T(0);
                    for (std::size_t j = 0; j < dv; ++j) {
                        dnum[j] = go[j] / d;
                        dden -= go[j] * o[j] / d;
                    }
                    const T* fqt = fq.data() + (b * Lq + t) * D + h * dk;
                    for (std::size_t i = 0; i < dk; ++i) {
                        T dfq = dden * zbh[i];
                        for (std::size_t j = 0; j < dv; ++j) {
                            dfq += Sbh[i * dv + j] * dnum[j];
                            dS[i * dv + j] += fqt[i] * dnum[j];
                        }
                        dz[i] += fqt[i] * dden;
                        if (gq) gq[(b * Lq + t) * D + h * dk + i] += dfq * dphi(qv[(b * Lq + t) * D + h * dk + i]);
                    }
                }
                for (std::size_t s = 0; s < Lk; ++s) {
                    const T w = kw.empty() ? T(1) : kw[b * Lk + s];
                    if (w == T(0)) continue;
                    const T* fks = fk.data() + (b * Lk + s) * D + h * dk;
                    const T* vs = vv.data() + (b * Lk + s) * Dv + h * dv;
                    for (std::size_t i = 0; i < dk; ++i) {
                        T dfk = dz[i];
                        for (std::size_t j = 0; j < dv; ++j) dfk += dS[i * dv + j] * vs[j];
                        if (gk) gk[(b * Lk + s) * D + h * dk + i] += w * dfk * dphi(kv[(b * Lk + s) * D + h * dk + i]);
                    }
                    if (gvv) {
                        for (std::size_t j = 0; j < dv; ++j) {
                            T acc = T(0);
                            for (std::size_t i = 0; i < dk; ++i) acc += fks[i] * dS[i * dv + j];
                            gvv[(b * Lk + s) * Dv + h * dv + j] += w * acc;
                        }
                    }
                }
            }
        }
    });
}

}  // namespace biax
