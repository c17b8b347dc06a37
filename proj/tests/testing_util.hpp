#pragma once

#include <functional>
#include <vector>

#include "evrec/autograd.hpp"
#include "evrec/rng.hpp"

namespace evrec::testing {

/// Central finite-difference gradient check. `f` rebuilds the scalar loss
/// from the current values of `leaves`; the analytic gradient from one
/// backward pass is compared against (f(x+h) - f(x-h)) / 2h per coordinate.
/// Returns the largest relative error, with |a - n| / max(1, |a|, |n|) as
/// the error measure.
inline double max_gradcheck_error(const std::function<Var()>& f, std::vector<Var> leaves,
                                  double h = 1e-5) {
    for (auto& leaf : leaves) {
        leaf.mutable_grad() = Tensor();  // drop stale gradients
    }
    Var loss = f();
    backward(loss);
    std::vector<Tensor> analytic;
    for (const auto& leaf : leaves) {
        analytic.push_back(leaf.grad().size() ? leaf.grad() : Tensor(leaf.value().shape(), 0.0));
    }
    double worst = 0.0;
    for (size_t l = 0; l < leaves.size(); ++l) {
        Tensor& x = leaves[l].mutable_value();
        for (size_t i = 0; i < x.size(); ++i) {
            const double original = x[i];
            x[i] = original + h;
            const double f_plus = f().scalar();
            x[i] = original - h;
            const double f_minus = f().scalar();
            x[i] = original;
            const double numeric = (f_plus - f_minus) / (2.0 * h);
            const double a = analytic[l][i];
            const double err = std::fabs(a - numeric)
                               / std::max({1.0, std::fabs(a), std::fabs(numeric)});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

inline Tensor random_tensor(std::vector<size_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape), 0.0);
    for (size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

/// Random rows on the unit sphere.
inline Tensor random_unit_rows(size_t rows, size_t dim, Rng& rng) {
    Tensor t({rows, dim}, 0.0);
    for (size_t i = 0; i < rows; ++i) {
        double norm_sq = 1e-24;
        for (size_t j = 0; j < dim; ++j) {
            t(i, j) = rng.normal();
            norm_sq += t(i, j) * t(i, j);
        }
        const double inv = 1.0 / std::sqrt(norm_sq);
        for (size_t j = 0; j < dim; ++j) t(i, j) *= inv;
    }
    return t;
}

}  // namespace evrec::testing
