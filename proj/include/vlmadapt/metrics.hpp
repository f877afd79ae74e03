#pragma once

#include <cstddef>
#include <vector>

namespace vlmadapt {

// mean of per-class recalls; every class in [0, K) must appear in truth
double balanced_accuracy(const std::vector<std::size_t>& truth,
                         const std::vector<std::size_t>& preds, std::size_t num_classes);

// Cohen's quadratically weighted kappa with w_ij = (i-j)^2 / (K-1)^2.
// A zero weighted-chance denominator is 1.0 when the observed weighted
// disagreement is also zero, an error otherwise.
double quadratic_kappa(const std::vector<std::size_t>& truth,
                       const std::vector<std::size_t>& preds, std::size_t num_classes);

struct RepetitionStats {
    double median;
    double min;
    double max;
};

// lower median for even counts, so the result is always an observed value
RepetitionStats aggregate_repetitions(std::vector<double> values);

}  // namespace vlmadapt
