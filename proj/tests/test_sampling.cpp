#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "evrec/rng.hpp"
#include "evrec/sampling.hpp"

using namespace evrec;

TEST_CASE("ppi_select picks the top-K posterior probabilities") {
    CHECK(ppi_select({0.9, 0.1, 0.5, 0.7}, 2) == std::vector<size_t>{0, 3});
    CHECK(ppi_select({0.9, 0.1, 0.5}, 3) == std::vector<size_t>{0, 1, 2});
    CHECK(ppi_select({0.5, 0.5, 0.5}, 1) == std::vector<size_t>{0});
    CHECK(ppi_select({0.2, 0.4}, 10) == std::vector<size_t>{0, 1});  // K > B keeps everything
    CHECK_THROWS_AS(ppi_select({0.5}, 0), std::invalid_argument);
    CHECK_THROWS_AS(ppi_select({1.5}, 1), std::invalid_argument);
}

TEST_CASE("trci_select keeps agreeing predictions") {
    CHECK(trci_select({0, 1, 2}, {0, 2, 2}) == std::vector<size_t>{0, 2});
    CHECK(trci_select({3, 3}, {3, 3}) == std::vector<size_t>{0, 1});
    CHECK(trci_select({0, 1}, {1, 0}).empty());
    CHECK_THROWS_AS(trci_select({0}, {0, 1}), std::invalid_argument);
}

TEST_CASE("rds_intersect is an exact ascending intersection") {
    CHECK(rds_intersect({0, 3}, {0, 2}) == std::vector<size_t>{0});
    CHECK(rds_intersect({1, 4, 7}, {1, 4, 7}) == std::vector<size_t>{1, 4, 7});
    CHECK(rds_intersect({1, 2}, {}).empty());
}

TEST_CASE("reliability set properties hold over random batches") {
    Rng rng(2024);
    for (int trial = 0; trial < 300; ++trial) {
        const size_t batch = 1 + rng.uniform_int(40);
        const size_t k = 1 + rng.uniform_int(batch + 4);
        const size_t classes = 1 + rng.uniform_int(6);
        std::vector<double> probs(batch);
        std::vector<size_t> preds(batch), reversed(batch);
        for (size_t i = 0; i < batch; ++i) {
            probs[i] = rng.uniform();
            preds[i] = rng.uniform_int(classes);
            reversed[i] = rng.uniform_int(classes);
        }
        const ReliabilitySets sets = make_reliability_sets(probs, preds, reversed, k);

        CHECK(sets.s_ppi.size() == std::min(k, batch));
        CHECK(sets.s_rds == rds_intersect(sets.s_ppi, sets.s_trci));
        CHECK(sets.s_rds.size() <= std::min(sets.s_ppi.size(), sets.s_trci.size()));
        for (size_t i : sets.s_rds) CHECK(i < batch);

        // TRCI is symmetric in its two prediction vectors.
        CHECK(trci_select(preds, reversed) == trci_select(reversed, preds));

        // Monotonicity in K under the fixed tie-break.
        if (k > 1) {
            const auto smaller = ppi_select(probs, k - 1);
            CHECK(std::includes(sets.s_ppi.begin(), sets.s_ppi.end(),
                                smaller.begin(), smaller.end()));
        }

        // Permutation equivariance: permuting the batch permutes the sets.
        std::vector<size_t> perm(batch);
        for (size_t i = 0; i < batch; ++i) perm[i] = i;
        rng.shuffle(perm);
        std::vector<double> probs_p(batch);
        std::vector<size_t> preds_p(batch), reversed_p(batch);
        for (size_t i = 0; i < batch; ++i) {
            probs_p[perm[i]] = probs[i];
            preds_p[perm[i]] = preds[i];
            reversed_p[perm[i]] = reversed[i];
        }
        // Ties in probability can legitimately select different indices, so
        // only check equivariance when all probabilities are distinct.
        std::vector<double> sorted_probs = probs;
        std::sort(sorted_probs.begin(), sorted_probs.end());
        const bool distinct =
            std::adjacent_find(sorted_probs.begin(), sorted_probs.end()) == sorted_probs.end();
        if (distinct) {
            const ReliabilitySets permuted =
                make_reliability_sets(probs_p, preds_p, reversed_p, k);
            std::vector<size_t> mapped;
            for (size_t i : sets.s_rds) mapped.push_back(perm[i]);
            std::sort(mapped.begin(), mapped.end());
            CHECK(permuted.s_rds == mapped);
        }
    }
}
