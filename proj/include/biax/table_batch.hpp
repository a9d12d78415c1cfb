#pragma once

#include <string>
#include <vector>

#include "biax/errors.hpp"

namespace biax {

/// Sentinel for padded or missing cells. Compared exactly, never NaN.
inline constexpr float kSkipValue = -1e10f;

/// B tasks, each an n x m table (row-major per task). Task b uses its first
/// active_features[b] columns; the rest hold padding. The first n_train rows
/// of every task form the support set.
struct TableBatch {
    std::size_t batch = 0;
    std::size_t rows = 0;
    std::size_t features = 0;
    std::vector<float> values;                  // [batch, rows, features]
    std::vector<std::size_t> active_features;   // d, one per task
    std::vector<int> labels;                    // [batch, rows]; query labels only used for loss
    std::vector<int> num_classes;               // C per task
    std::size_t n_train = 0;
    float skip_value = kSkipValue;

    float at(std::size_t b, std::size_t t, std::size_t j) const { return values[(b * rows + t) * features + j]; }
    float& at(std::size_t b, std::size_t t, std::size_t j) { return values[(b * rows + t) * features + j]; }
    int label(std::size_t b, std::size_t t) const { return labels[b * rows + t]; }

    bool is_active(std::size_t b, std::size_t j) const { return j < active_features[b]; }

    void validate() const {
        if (values.size() != batch * rows * features) throw ContractError("TableBatch: value count mismatch");
        if (active_features.size() != batch) throw ContractError("TableBatch: need one feature count per task");
        if (labels.size() != batch * rows) throw ContractError("TableBatch: label count mismatch");
        if (n_train < 1 || n_train >= rows) throw ContractError("TableBatch: need 1 <= n_train < n");
        for (std::size_t b = 0; b < batch; ++b) {
            if (active_features[b] > features) throw ContractError("TableBatch: active feature count exceeds m");
        }
        if (!num_classes.empty() && num_classes.size() != batch) throw ContractError("TableBatch: class count per task");
    }
};

}  // namespace biax
