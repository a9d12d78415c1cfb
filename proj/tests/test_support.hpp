#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "biax/ops.hpp"
#include "biax/table_batch.hpp"

namespace biax::testing {

using DTensor = BasicTensor<double>;

template <class T>
BasicTensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = true) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return BasicTensor<T>(std::move(shape), std::move(v), requires_grad);
}

/// Like random_tensor but keeps |x| >= margin (avoids kinks at 0).
inline DTensor random_away_from_zero(Shape shape, std::mt19937_64& rng, double margin = 0.05) {
    std::uniform_real_distribution<double> dist(margin, 1.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = sign(rng) ? dist(rng) : -dist(rng);
    return DTensor(std::move(shape), std::move(v), true);
}

/// Error measure used for gradient checks: |a - b| / max(1, |a|, |b|).
inline double grad_error(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

/// Compares reverse-mode gradients of sum(f(inputs) * W), W random, against
/// central finite differences. Returns the worst error over all input elements.
inline double gradcheck(const std::function<DTensor(const std::vector<DTensor>&)>& f, std::vector<DTensor> inputs,
                        std::mt19937_64& rng, double h = 1e-3) {
    const DTensor probe = f(inputs);
    const DTensor weights = random_tensor<double>(probe.shape(), rng, -1.0, 1.0, false);
    auto loss_of = [&](const std::vector<DTensor>& xs) {
        auto out = f(xs);
        double s = 0.0;
        for (std::size_t i = 0; i < out.numel(); ++i) s += out[i] * weights[i];
        return s;
    };

    for (auto& x : inputs) x.zero_grad();
    auto out = f(inputs);
    double worst = 0.0;
    if (out.requires_grad()) {
        auto loss = biax::sum(biax::mul(out, weights));
        loss.backward();
    }
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        if (!inputs[k].requires_grad()) continue;
        const std::vector<double> analytic(inputs[k].grad().begin(), inputs[k].grad().end());
        for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
            std::vector<DTensor> plus, minus;
            for (const auto& x : inputs) {
                plus.push_back(x.detach());
                minus.push_back(x.detach());
            }
            plus[k].mutable_values()[i] += h;
            minus[k].mutable_values()[i] -= h;
            const double numeric = (loss_of(plus) - loss_of(minus)) / (2 * h);
            worst = std::max(worst, grad_error(analytic[i], numeric));
        }
    }
    return worst;
}

/// Random batch with per-task feature counts in [1, m]; padded cells hold kSkipValue.
inline TableBatch random_batch(std::size_t B, std::size_t n, std::size_t m, std::size_t n_train, std::mt19937_64& rng,
                               bool full_width = false, int classes = 2) {
    TableBatch tb;
    tb.batch = B;
    tb.rows = n;
    tb.features = m;
    tb.n_train = n_train;
    tb.values.assign(B * n * m, kSkipValue);
    tb.labels.assign(B * n, 0);
    tb.num_classes.assign(B, classes);
    std::uniform_int_distribution<std::size_t> dpick(1, m);
    std::normal_distribution<float> val(0.0f, 1.0f);
    std::uniform_int_distribution<int> lab(0, classes - 1);
    for (std::size_t b = 0; b < B; ++b) {
        tb.active_features.push_back(full_width ? m : dpick(rng));
        for (std::size_t t = 0; t < n; ++t) {
            tb.labels[b * n + t] = t < std::size_t(classes) ? int(t) : lab(rng);
            for (std::size_t j = 0; j < tb.active_features[b]; ++j) tb.at(b, t, j) = val(rng);
        }
    }
    return tb;
}

}  // namespace biax::testing
