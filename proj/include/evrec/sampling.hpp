#pragma once

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace evrec {

/// Per-batch reliability selections. Index sets are kept in ascending order;
/// s_rds is always the intersection of s_ppi and s_trci.
struct ReliabilitySets {
    std::vector<size_t> s_ppi;
    std::vector<size_t> s_trci;
    std::vector<size_t> s_rds;
    size_t k = 0;
    size_t batch = 0;
};

/// Posterior probability indicator: indices of the K largest per-sample
/// posterior probabilities. Ties break toward the lower index; K > B keeps
/// everything.
inline std::vector<size_t> ppi_select(const std::vector<double>& max_probs, size_t k) {
    if (k < 1) {
        throw std::invalid_argument("ppi_select: K must be >= 1");
    }
    for (double p : max_probs) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw std::invalid_argument("ppi_select: probability outside [0, 1]");
        }
    }
    std::vector<size_t> order(max_probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return max_probs[a] > max_probs[b];
    });
    order.resize(std::min(k, order.size()));
    std::sort(order.begin(), order.end());
    return order;
}

/// Temporally reversed consistency indicator: samples whose reversed stream
/// received the same prediction as the original.
inline std::vector<size_t> trci_select(const std::vector<size_t>& preds,
                                       const std::vector<size_t>& reversed_preds) {
    if (preds.size() != reversed_preds.size()) {
        throw std::invalid_argument("trci_select: prediction vectors differ in length");
    }
    std::vector<size_t> out;
    for (size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == reversed_preds[i]) out.push_back(i);
    }
    return out;
}

inline std::vector<size_t> rds_intersect(const std::vector<size_t>& s_ppi,
                                         const std::vector<size_t>& s_trci) {
    std::vector<size_t> a = s_ppi, b = s_trci, out;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

inline ReliabilitySets make_reliability_sets(const std::vector<double>& max_probs,
                                             const std::vector<size_t>& preds,
                                             const std::vector<size_t>& reversed_preds,
                                             size_t k) {
    ReliabilitySets sets;
    sets.batch = max_probs.size();
    sets.k = k;
    sets.s_ppi = ppi_select(max_probs, k);
    sets.s_trci = trci_select(preds, reversed_preds);
    sets.s_rds = rds_intersect(sets.s_ppi, sets.s_trci);
    return sets;
}

}  // namespace evrec
