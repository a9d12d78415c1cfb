#pragma once

#include <vector>

namespace biax {

/// Dense n x m feature matrix with integer labels in [0, num_classes).
struct LabeledTable {
    std::size_t n = 0, m = 0;
    std::vector<float> X;  // [n, m]
    std::vector<int> y;
    std::size_t num_classes = 0;

    std::size_t d() const { return m; }
    float at(std::size_t r, std::size_t j) const { return X[r * m + j]; }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(num_classes, 0);
        for (int v : y) ++counts[v];
        return counts;
    }
};

}  // namespace biax
