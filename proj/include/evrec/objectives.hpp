#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "evrec/autograd.hpp"
#include "evrec/prototypes.hpp"
#include "evrec/representation.hpp"

namespace evrec {

struct LossWeights {
    double lambda_att = 1.0;
    double lambda_rep = 0.01;
    double lambda_con = 1.0;

    void validate() const {
        if (!(lambda_att >= 0.0) || !(lambda_rep >= 0.0) || !(lambda_con >= 0.0)
            || !std::isfinite(lambda_att) || !std::isfinite(lambda_rep) || !std::isfinite(lambda_con)) {
            throw std::invalid_argument("LossWeights: weights must be finite and non-negative");
        }
    }
};

namespace detail {

/// Shared InfoNCE core over the selected set:
///   -sum_i log( exp(v_i . t_i / tau) / sum_j exp(v_i . t_j / tau) )
/// where t_i is the per-sample target row (textual or prototype feature).
/// Duplicate targets stay in the denominator as written.
inline Var infonce_over_set(const Var& v_batch, const Tensor& targets,
                            const std::vector<size_t>& selected, double temperature) {
    if (temperature <= 0.0) {
        throw std::invalid_argument("attraction_loss: temperature must be > 0");
    }
    Var v_sel = take_rows(v_batch, selected);
    Var logits = mul_scalar(matmul_nt(v_sel, Var::constant(targets)), 1.0 / temperature);
    Var diag = mul_scalar(rowwise_dot(v_sel, Var::constant(targets)), 1.0 / temperature);
    return sub(sum_all(logsumexp_rows(logits)), sum_all(diag));
}

inline Tensor gather_target_rows(const Tensor& features, const std::vector<size_t>& rows) {
    Tensor out({rows.size(), features.dim(1)}, 0.0);
    for (size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(features.data() + rows[i] * features.dim(1), features.dim(1),
                    out.data() + i * features.dim(1));
    }
    return out;
}

}  // namespace detail

/// Category-guided attraction loss over the reliable set. Returns exactly 0
/// when fewer than two samples are selected; `skipped` reports an empty set.
inline Var attraction_loss(const Var& v_batch, const Tensor& text_features,
                           const std::vector<size_t>& pseudo_labels,
                           const std::vector<size_t>& s_rds, double temperature,
                           bool* skipped = nullptr) {
    if (v_batch.value().dim(1) != text_features.dim(1)) {
        throw std::invalid_argument("attraction_loss: feature dimension mismatch");
    }
    if (pseudo_labels.size() != v_batch.value().dim(0)) {
        throw std::invalid_argument("attraction_loss: one pseudo-label per sample required");
    }
    if (skipped) *skipped = s_rds.empty();
    if (s_rds.size() <= 1) {
        return Var::constant(Tensor({1}, 0.0));
    }
    std::vector<size_t> label_rows;
    label_rows.reserve(s_rds.size());
    for (size_t i : s_rds) {
        if (i >= pseudo_labels.size()) {
            throw std::out_of_range("attraction_loss: selected index out of range");
        }
        if (pseudo_labels[i] >= text_features.dim(0)) {
            throw std::out_of_range("attraction_loss: pseudo-label out of range");
        }
        label_rows.push_back(pseudo_labels[i]);
    }
    return detail::infonce_over_set(v_batch, detail::gather_target_rows(text_features, label_rows),
                                    s_rds, temperature);
}

/// Category-agnostic repulsion loss over the full batch:
///   sum_i log(1 + sum_{j != i} exp(v_i . v_j / tau)).
inline Var repulsion_loss(const Var& v_batch, double temperature = 1.0) {
    if (temperature <= 0.0) {
        throw std::invalid_argument("repulsion_loss: temperature must be > 0");
    }
    const size_t batch = v_batch.value().dim(0);
    if (batch < 1) {
        throw std::invalid_argument("repulsion_loss: empty batch");
    }
    if (batch == 1) {
        return Var::constant(Tensor({1}, 0.0));
    }
    Var sims = mul_scalar(matmul_nt(v_batch, v_batch), 1.0 / temperature);
    // Push the diagonal far negative so exp() vanishes, then prepend a zero
    // column: log(1 + sum exp) == logsumexp([0, offdiag...]).
    Tensor diag_mask({batch, batch}, 0.0);
    Tensor diag_bias({batch, batch}, 0.0);
    for (size_t i = 0; i < batch; ++i) {
        for (size_t j = 0; j < batch; ++j) diag_mask(i, j) = (i == j) ? 0.0 : 1.0;
        diag_bias(i, i) = -1e300;
    }
    Var masked = mul_const(sims, std::move(diag_mask));
    masked = add(masked, Var::constant(std::move(diag_bias)));
    Var padded = concat_cols(Var::constant(Tensor({batch, 1}, 0.0)), masked);
    return sum_all(logsumexp_rows(padded));
}

/// Local-global reconstruction consistency: mean absolute difference between
/// the reconstruction of the cropped input and the identically cropped full
/// reconstruction.
inline Var consistency_loss(const Var& local_recon, const Var& global_recon, const CropRect& rect) {
    if (local_recon.value().ndim() != 2 || global_recon.value().ndim() != 2) {
        throw std::invalid_argument("consistency_loss: expected (H, W) images");
    }
    if (static_cast<int>(local_recon.value().dim(0)) != rect.size
        || static_cast<int>(local_recon.value().dim(1)) != rect.size) {
        throw std::invalid_argument("consistency_loss: local reconstruction size "
                                    + shape_string(local_recon.value()) + " does not match rect size "
                                    + std::to_string(rect.size));
    }
    Var global4 = reshape(global_recon, {1, 1, global_recon.value().dim(0), global_recon.value().dim(1)});
    Var cropped = crop_batch(global4, std::vector<CropRect>{rect});
    Var local4 = reshape(local_recon, {1, 1, local_recon.value().dim(0), local_recon.value().dim(1)});
    return mean_all(abs_of(sub(local4, cropped)));
}

inline double consistency_loss(const IntensityImage& local_recon, const IntensityImage& global_recon,
                               const CropRect& rect) {
    return consistency_loss(Var::constant(local_recon.data), Var::constant(global_recon.data), rect)
        .scalar();
}

/// Batched consistency: mean over all samples and pixels with one rect per
/// sample (crop-size independent scaling).
inline Var consistency_loss_batch(const Var& local_recon, const Var& global_recon,
                                  const std::vector<CropRect>& rects) {
    Var cropped = crop_batch(global_recon, rects);
    if (!local_recon.value().same_shape(cropped.value())) {
        throw std::invalid_argument("consistency_loss_batch: local/global crop shape mismatch");
    }
    return mean_all(abs_of(sub(local_recon, cropped)));
}

/// Attraction with each textual feature replaced by the closest prototype of
/// the pseudo-category (assignments computed without gradients).
inline Var prototype_attraction_loss(const Var& v_batch, const PrototypeBank& bank,
                                     const std::vector<size_t>& pseudo_labels,
                                     const std::vector<std::string>& categories,
                                     const std::vector<size_t>& s_rds, double temperature,
                                     bool* skipped = nullptr) {
    if (pseudo_labels.size() != v_batch.value().dim(0)) {
        throw std::invalid_argument("prototype_attraction_loss: one pseudo-label per sample required");
    }
    if (skipped) *skipped = s_rds.empty();
    if (s_rds.size() <= 1) {
        return Var::constant(Tensor({1}, 0.0));
    }
    const size_t dim = v_batch.value().dim(1);
    if (static_cast<size_t>(bank.dim) != dim) {
        throw std::invalid_argument("prototype_attraction_loss: bank dimension mismatch");
    }
    Tensor targets({s_rds.size(), dim}, 0.0);
    for (size_t row = 0; row < s_rds.size(); ++row) {
        const size_t i = s_rds[row];
        if (i >= pseudo_labels.size() || pseudo_labels[i] >= categories.size()) {
            throw std::out_of_range("prototype_attraction_loss: index out of range");
        }
        const std::string& category = categories[pseudo_labels[i]];
        Tensor v({dim}, 0.0);
        std::copy_n(v_batch.value().data() + i * dim, dim, v.data());
        const size_t cluster = assign_cluster(v, category, bank);
        const Tensor& rows = bank.features.at(category);
        std::copy_n(rows.data() + cluster * dim, dim, targets.data() + row * dim);
    }
    return detail::infonce_over_set(v_batch, targets, s_rds, temperature);
}

/// Weighted total (Eq. of the joint objective). Validates finiteness and
/// names the offending term.
inline double total_loss(double att, double rep, double con, const LossWeights& weights) {
    weights.validate();
    if (!std::isfinite(att)) throw std::runtime_error("total_loss: attraction term is not finite");
    if (!std::isfinite(rep)) throw std::runtime_error("total_loss: repulsion term is not finite");
    if (!std::isfinite(con)) throw std::runtime_error("total_loss: consistency term is not finite");
    return weights.lambda_att * att + weights.lambda_rep * rep + weights.lambda_con * con;
}

}  // namespace evrec
