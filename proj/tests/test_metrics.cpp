#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <vector>

#include "vlmadapt/metrics.hpp"
#include "vlmadapt/rng.hpp"

using namespace vlmadapt;

namespace {

// literal translation of the weighted-kappa definition, kept independent of
// the implementation under test
double kappa_brute_force(const std::vector<std::size_t>& truth,
                         const std::vector<std::size_t>& preds, std::size_t k) {
    std::vector<std::vector<double>> w(k, std::vector<double>(k));
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            const double d = static_cast<double>(i) - static_cast<double>(j);
            w[i][j] = d * d / (static_cast<double>(k - 1) * static_cast<double>(k - 1));
        }
    std::vector<std::vector<double>> observed(k, std::vector<double>(k, 0.0));
    for (std::size_t idx = 0; idx < truth.size(); ++idx) observed[truth[idx]][preds[idx]] += 1.0;
    std::vector<double> row(k, 0.0), col(k, 0.0);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            row[i] += observed[i][j];
            col[j] += observed[i][j];
        }
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            num += w[i][j] * observed[i][j];
            den += w[i][j] * row[i] * col[j] / static_cast<double>(truth.size());
        }
    if (den == 0.0) return num == 0.0 ? 1.0 : -2.0;
    return 1.0 - num / den;
}

double accuracy(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& preds) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) hits += truth[i] == preds[i];
    return static_cast<double>(hits) / static_cast<double>(truth.size());
}

}  // namespace

TEST_CASE("balanced accuracy basics") {
    CHECK(balanced_accuracy({0, 1, 2}, {0, 1, 2}, 3) == 1.0);
    CHECK(balanced_accuracy({0, 0, 1, 1}, {0, 0, 0, 0}, 2) == 0.5);
    // per-class recalls 1/2 and 2/3
    CHECK(balanced_accuracy({0, 0, 1, 1, 1}, {0, 1, 1, 1, 0}, 2) ==
          doctest::Approx(7.0 / 12.0).epsilon(1e-12));
}

TEST_CASE("balanced accuracy requires every class in truth") {
    CHECK_THROWS_AS(balanced_accuracy({0, 0}, {0, 1}, 2), std::invalid_argument);
    CHECK_THROWS_AS(balanced_accuracy({0, 1}, {0}, 2), std::invalid_argument);
    CHECK_THROWS_AS(balanced_accuracy({0, 2}, {0, 1}, 2), std::invalid_argument);
}

TEST_CASE("quadratic kappa hand cases") {
    CHECK(quadratic_kappa({0, 1, 2, 1}, {0, 1, 2, 1}, 3) == 1.0);
    CHECK(quadratic_kappa({0, 1, 2, 1}, {0, 2, 2, 1}, 3) == doctest::Approx(0.8).epsilon(1e-12));
    // reversing an ordinal scale on a spread truth set is negative
    const std::vector<std::size_t> truth = {0, 0, 1, 1, 2, 2, 3, 3};
    std::vector<std::size_t> reversed;
    for (std::size_t t : truth) reversed.push_back(3 - t);
    CHECK(quadratic_kappa(truth, reversed, 4) < 0.0);
}

TEST_CASE("quadratic kappa degenerate denominator convention") {
    // all mass on one class: no chance disagreement and no observed one
    CHECK(quadratic_kappa({1, 1, 1}, {1, 1, 1}, 3) == 1.0);
}

TEST_CASE("quadratic kappa matches brute force on random instances") {
    std::size_t cases = 0;
    for (std::uint64_t seed = 0; cases < 600; ++seed) {
        Rng rng(seed);
        const std::size_t k = 2 + rng.index(4);   // K <= 5
        const std::size_t n = 1 + rng.index(20);  // n <= 20
        std::vector<std::size_t> truth(n), preds(n);
        for (std::size_t i = 0; i < n; ++i) {
            truth[i] = rng.index(k);
            preds[i] = rng.index(k);
        }
        const double expected = kappa_brute_force(truth, preds, k);
        if (expected == -2.0) continue;  // degenerate-with-disagreement cannot occur
        CHECK(quadratic_kappa(truth, preds, k) == doctest::Approx(expected).epsilon(1e-12));
        ++cases;
    }
}

TEST_CASE("metrics are invariant under identical permutation") {
    Rng rng(123);
    std::vector<std::size_t> truth, preds;
    for (std::size_t i = 0; i < 40; ++i) {
        truth.push_back(i % 3);  // every class present
        preds.push_back(rng.index(3));
    }
    const double ba = balanced_accuracy(truth, preds, 3);
    const double qk = quadratic_kappa(truth, preds, 3);
    std::vector<std::size_t> order(truth.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<std::size_t> truth_p, preds_p;
    for (std::size_t i : order) {
        truth_p.push_back(truth[i]);
        preds_p.push_back(preds[i]);
    }
    CHECK(balanced_accuracy(truth_p, preds_p, 3) == ba);
    CHECK(quadratic_kappa(truth_p, preds_p, 3) == qk);
}

TEST_CASE("balanced accuracy equals plain accuracy on a uniform truth distribution") {
    Rng rng(77);
    std::vector<std::size_t> truth, preds;
    for (std::size_t i = 0; i < 60; ++i) {
        truth.push_back(i % 4);
        preds.push_back(rng.index(4));
    }
    CHECK(balanced_accuracy(truth, preds, 4) ==
          doctest::Approx(accuracy(truth, preds)).epsilon(1e-12));
}

TEST_CASE("aggregate_repetitions") {
    const RepetitionStats single = aggregate_repetitions({0.5});
    CHECK(single.median == 0.5);
    CHECK(single.min == 0.5);
    CHECK(single.max == 0.5);

    // lower median on even counts
    CHECK(aggregate_repetitions({0.1, 0.2, 0.3, 0.4}).median == 0.2);

    const RepetitionStats odd = aggregate_repetitions({0.3, 0.1, 0.2});
    CHECK(odd.median == 0.2);
    CHECK(odd.min == 0.1);
    CHECK(odd.max == 0.3);

    CHECK_THROWS_AS(aggregate_repetitions({}), std::invalid_argument);
}
