#include "vlmadapt/metrics.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace vlmadapt {

namespace {

void check_labels(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& preds,
                  std::size_t num_classes) {
    if (truth.size() != preds.size())
        throw std::invalid_argument("metrics: truth/prediction length mismatch");
    if (truth.empty()) throw std::invalid_argument("metrics: empty input");
    for (std::size_t v : truth)
        if (v >= num_classes) throw std::invalid_argument("metrics: truth label out of range");
    for (std::size_t v : preds)
        if (v >= num_classes) throw std::invalid_argument("metrics: predicted label out of range");
}

}  // namespace

double balanced_accuracy(const std::vector<std::size_t>& truth,
                         const std::vector<std::size_t>& preds, std::size_t num_classes) {
    check_labels(truth, preds, num_classes);
    std::vector<std::size_t> support(num_classes, 0), hits(num_classes, 0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        ++support[truth[i]];
        if (preds[i] == truth[i]) ++hits[truth[i]];
    }
    double recall_sum = 0.0;
    for (std::size_t k = 0; k < num_classes; ++k) {
        if (support[k] == 0)
            throw std::invalid_argument("balanced_accuracy: class " + std::to_string(k) +
                                        " absent from truth, recall undefined");
        recall_sum += static_cast<double>(hits[k]) / static_cast<double>(support[k]);
    }
    return recall_sum / static_cast<double>(num_classes);
}

double quadratic_kappa(const std::vector<std::size_t>& truth,
                       const std::vector<std::size_t>& preds, std::size_t num_classes) {
    if (num_classes < 2) throw std::invalid_argument("quadratic_kappa: need at least 2 classes");
    check_labels(truth, preds, num_classes);
    const std::size_t k = num_classes;
    const double n = static_cast<double>(truth.size());

    std::vector<double> observed(k * k, 0.0);
    std::vector<double> truth_marginal(k, 0.0), pred_marginal(k, 0.0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        observed[truth[i] * k + preds[i]] += 1.0;
        truth_marginal[truth[i]] += 1.0;
        pred_marginal[preds[i]] += 1.0;
    }

    const double denom_scale = static_cast<double>((k - 1) * (k - 1));
    double weighted_observed = 0.0, weighted_expected = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            const double d = static_cast<double>(i) - static_cast<double>(j);
            const double w = d * d / denom_scale;
            weighted_observed += w * observed[i * k + j];
            weighted_expected += w * truth_marginal[i] * pred_marginal[j] / n;
        }
    }
    if (weighted_expected == 0.0) {
        if (weighted_observed == 0.0) return 1.0;
        throw std::invalid_argument(
            "quadratic_kappa: degenerate chance agreement with nonzero disagreement");
    }
    return 1.0 - weighted_observed / weighted_expected;
}

RepetitionStats aggregate_repetitions(std::vector<double> values) {
    if (values.empty()) throw std::invalid_argument("aggregate_repetitions: empty input");
    std::sort(values.begin(), values.end());
    RepetitionStats s{};
    s.min = values.front();
    s.max = values.back();
    s.median = values[(values.size() - 1) / 2];
    return s;
}

}  // namespace vlmadapt
