#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "evrec/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace evrec {

// Reverse-mode autodiff over Tensor. Graphs are built dynamically per step;
// every reduction is computed serially per output element so results are
// bit-identical for any thread count.

struct AdNode {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<AdNode>> parents;
    std::function<void(AdNode&)> backprop;
};

class Var {
public:
    Var() = default;

    explicit Var(Tensor value, bool requires_grad = false)
        : node_(std::make_shared<AdNode>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    static Var constant(Tensor value) { return Var(std::move(value), false); }
    static Var param(Tensor value) { return Var(std::move(value), true); }

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    Tensor& mutable_grad() { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    std::shared_ptr<AdNode> node() const { return node_; }

    double scalar() const {
        if (node_->value.size() != 1) {
            throw std::logic_error("Var::scalar: tensor has " + std::to_string(node_->value.size())
                                   + " elements");
        }
        return node_->value[0];
    }

    Var detach() const { return Var(node_->value, false); }

    void zero_grad() {
        if (node_ && node_->grad.size()) node_->grad.fill(0.0);
    }

private:
    explicit Var(std::shared_ptr<AdNode> node) : node_(std::move(node)) {}
    std::shared_ptr<AdNode> node_;

    friend Var make_op(Tensor, std::vector<Var>, std::function<void(AdNode&)>);
};

inline Var make_op(Tensor value, std::vector<Var> parents, std::function<void(AdNode&)> backprop) {
    bool rg = false;
    for (const Var& p : parents) rg = rg || p.requires_grad();
    auto node = std::make_shared<AdNode>();
    node->value = std::move(value);
    node->requires_grad = rg;
    if (rg) {
        node->parents.reserve(parents.size());
        for (const Var& p : parents) node->parents.push_back(p.node());
        node->backprop = std::move(backprop);
    }
    return Var(std::move(node));
}

namespace detail {

inline Tensor& ensure_grad(AdNode& node) {
    if (node.grad.size() != node.value.size()) {
        node.grad = Tensor(node.value.shape(), 0.0);
    }
    return node.grad;
}

inline void add_into(Tensor& dst, const Tensor& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

/// Backpropagate from a scalar root through every grad-enabled node.
inline void backward(const Var& root) {
    if (!root.requires_grad()) return;
    if (root.value().size() != 1) {
        throw std::logic_error("backward: root must be a scalar");
    }
    // Iterative post-order DFS; reverse gives a valid topological order.
    std::vector<AdNode*> order;
    std::unordered_set<AdNode*> visited;
    std::vector<std::pair<AdNode*, size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            AdNode* parent = node->parents[next++].get();
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    detail::ensure_grad(*root.node()).fill(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backprop) (*it)->backprop(**it);
    }
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

namespace detail {

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.value().same_shape(b.value())) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.value())
                                    + " vs " + shape_string(b.value()));
    }
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out = a.value();
    detail::add_into(out, b.value());
    auto pa = a.node(), pb = b.node();
    return make_op(std::move(out), {a, b}, [pa, pb](AdNode& n) {
        if (pa->requires_grad) detail::add_into(detail::ensure_grad(*pa), n.grad);
        if (pb->requires_grad) detail::add_into(detail::ensure_grad(*pb), n.grad);
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    auto pa = a.node(), pb = b.node();
    return make_op(std::move(out), {a, b}, [pa, pb](AdNode& n) {
        if (pa->requires_grad) detail::add_into(detail::ensure_grad(*pa), n.grad);
        if (pb->requires_grad) {
            Tensor& g = detail::ensure_grad(*pb);
            for (size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    auto pa = a.node(), pb = b.node();
    return make_op(std::move(out), {a, b}, [pa, pb](AdNode& n) {
        if (pa->requires_grad) {
            Tensor& g = detail::ensure_grad(*pa);
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            Tensor& g = detail::ensure_grad(*pb);
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa->value[i];
        }
    });
}

inline Var mul_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= s;
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa, s](AdNode& n) {
        if (!pa->requires_grad) return;
        Tensor& g = detail::ensure_grad(*pa);
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * s;
    });
}

inline Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] += s;
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa](AdNode& n) {
        if (pa->requires_grad) detail::add_into(detail::ensure_grad(*pa), n.grad);
    });
}

/// Elementwise multiply by a constant tensor (no gradient into the mask).
inline Var mul_const(const Var& a, Tensor mask) {
    if (!a.value().same_shape(mask)) {
        throw std::invalid_argument("mul_const: shape mismatch");
    }
    Tensor out = a.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa, mask = std::move(mask)](AdNode& n) {
        if (!pa->requires_grad) return;
        Tensor& g = detail::ensure_grad(*pa);
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * mask[i];
    });
}

inline Var sigmoid(const Var& a) {
    Tensor out = a.value();
    for (size_t i = 0; i < out.size(); ++i) {
        const double x = out[i];
        out[i] = (x >= 0.0) ? 1.0 / (1.0 + std::exp(-x))
                            : std::exp(x) / (1.0 + std::exp(x));
    }
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa](AdNode& n) {
        if (!pa->requires_grad) return;
        Tensor& g = detail::ensure_grad(*pa);
        for (size_t i = 0; i < g.size(); ++i) {
            const double y = n.value[i];
            g[i] += n.grad[i] * y * (1.0 - y);
        }
    });
}

inline Var silu(const Var& a) {
    Tensor out = a.value();
    for (size_t i = 0; i < out.size(); ++i) {
        const double x = out[i];
        const double s = (x >= 0.0) ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        out[i] = x * s;
    }
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa](AdNode& n) {
        if (!pa->requires_grad) return;
        Tensor& g = detail::ensure_grad(*pa);
        for (size_t i = 0; i < g.size(); ++i) {
            const double x = pa->value[i];
            const double s = (x >= 0.0) ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            g[i] += n.grad[i] * s * (1.0 + x * (1.0 - s));
        }
    });
}

inline Var exp_of(const Var& a) {
    Tensor out = a.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa](AdNode& n) {
        if (!pa->requires_grad) return;
        Tensor& g = detail::ensure_grad(*pa);
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * n.value[i];
    });
}

inline Var log_of(const Var& a) {
    Tensor out = a.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa](AdNode& n) {
        if (!pa->requires_grad) return;
        Tensor& g = detail::ensure_grad(*pa);
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / pa->value[i];
    });
}

inline Var abs_of(const Var& a) {
    Tensor out = a.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(out[i]);
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa](AdNode& n) {
        if (!pa->requires_grad) return;
        Tensor& g = detail::ensure_grad(*pa);
        for (size_t i = 0; i < g.size(); ++i) {
            const double x = pa->value[i];
            g[i] += n.grad[i] * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
        }
    });
}

inline Var reshape(const Var& a, std::vector<size_t> shape) {
    Tensor out = a.value().reshaped(shape);
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa](AdNode& n) {
        if (!pa->requires_grad) return;
        Tensor& g = detail::ensure_grad(*pa);
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
    Tensor out({1}, 0.0);
    out[0] = sum(a.value());
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa](AdNode& n) {
        if (!pa->requires_grad) return;
        Tensor& g = detail::ensure_grad(*pa);
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
    });
}

inline Var mean_all(const Var& a) {
    const double inv = 1.0 / static_cast<double>(a.value().size());
    Tensor out({1}, 0.0);
    out[0] = sum(a.value()) * inv;
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa, inv](AdNode& n) {
        if (!pa->requires_grad) return;
        Tensor& g = detail::ensure_grad(*pa);
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * inv;
    });
}

inline Var row_sums(const Var& a) {
    const size_t r = a.value().dim(0), c = a.value().dim(1);
    Tensor out({r}, 0.0);
    for (size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (size_t j = 0; j < c; ++j) s += a.value()(i, j);
        out[i] = s;
    }
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa, r, c](AdNode& n) {
        if (!pa->requires_grad) return;
        Tensor& g = detail::ensure_grad(*pa);
        for (size_t i = 0; i < r; ++i) {
            for (size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[i];
        }
    });
}

inline Var rowwise_dot(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "rowwise_dot");
    const size_t r = a.value().dim(0), c = a.value().dim(1);
    Tensor out({r}, 0.0);
    for (size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (size_t j = 0; j < c; ++j) s += a.value()(i, j) * b.value()(i, j);
        out[i] = s;
    }
    auto pa = a.node(), pb = b.node();
    return make_op(std::move(out), {a, b}, [pa, pb, r, c](AdNode& n) {
        if (pa->requires_grad) {
            Tensor& g = detail::ensure_grad(*pa);
            for (size_t i = 0; i < r; ++i)
                for (size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[i] * pb->value[i * c + j];
        }
        if (pb->requires_grad) {
            Tensor& g = detail::ensure_grad(*pb);
            for (size_t i = 0; i < r; ++i)
                for (size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[i] * pa->value[i * c + j];
        }
    });
}

/// Row-wise log(sum(exp(x))) with the usual max-shift for stability.
inline Var logsumexp_rows(const Var& a) {
    const size_t r = a.value().dim(0), c = a.value().dim(1);
    Tensor out({r}, 0.0);
    for (size_t i = 0; i < r; ++i) {
        double m = a.value()(i, 0);
        for (size_t j = 1; j < c; ++j) m = std::max(m, a.value()(i, j));
        double s = 0.0;
        for (size_t j = 0; j < c; ++j) s += std::exp(a.value()(i, j) - m);
        out[i] = m + std::log(s);
    }
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa, r, c](AdNode& n) {
        if (!pa->requires_grad) return;
        Tensor& g = detail::ensure_grad(*pa);
        for (size_t i = 0; i < r; ++i) {
            for (size_t j = 0; j < c; ++j) {
                g[i * c + j] += n.grad[i] * std::exp(pa->value[i * c + j] - n.value[i]);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    const size_t m = a.value().dim(0), k = a.value().dim(1);
    if (b.value().dim(0) != k) {
        throw std::invalid_argument("matmul: inner dimension mismatch");
    }
    const size_t n_cols = b.value().dim(1);
    Tensor out({m, n_cols}, 0.0);
    const double* A = a.value().data();
    const double* B = b.value().data();
    double* C = out.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (size_t i = 0; i < m; ++i) {
        for (size_t kk = 0; kk < k; ++kk) {
            const double av = A[i * k + kk];
            const double* brow = B + kk * n_cols;
            double* crow = C + i * n_cols;
            for (size_t j = 0; j < n_cols; ++j) crow[j] += av * brow[j];
        }
    }
    auto pa = a.node(), pb = b.node();
    return make_op(std::move(out), {a, b}, [pa, pb, m, k, n_cols](AdNode& n) {
        if (pa->requires_grad) {
            Tensor& g = detail::ensure_grad(*pa);
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n_cols; ++j) {
                    const double gv = n.grad[i * n_cols + j];
                    for (size_t kk = 0; kk < k; ++kk) g[i * k + kk] += gv * pb->value[kk * n_cols + j];
                }
        }
        if (pb->requires_grad) {
            Tensor& g = detail::ensure_grad(*pb);
            for (size_t i = 0; i < m; ++i)
                for (size_t kk = 0; kk < k; ++kk) {
                    const double av = pa->value[i * k + kk];
                    for (size_t j = 0; j < n_cols; ++j) g[kk * n_cols + j] += av * n.grad[i * n_cols + j];
                }
        }
    });
}

/// a (m, k) times b (n, k) transposed -> (m, n). Similarity-matrix shape.
inline Var matmul_nt(const Var& a, const Var& b) {
    const size_t m = a.value().dim(0), k = a.value().dim(1);
    if (b.value().dim(1) != k) {
        throw std::invalid_argument("matmul_nt: inner dimension mismatch");
    }
    const size_t n_rows = b.value().dim(0);
    Tensor out({m, n_rows}, 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n_rows; ++j) {
            double s = 0.0;
            for (size_t kk = 0; kk < k; ++kk) s += a.value()[i * k + kk] * b.value()[j * k + kk];
            out(i, j) = s;
        }
    }
    auto pa = a.node(), pb = b.node();
    return make_op(std::move(out), {a, b}, [pa, pb, m, k, n_rows](AdNode& n) {
        if (pa->requires_grad) {
            Tensor& g = detail::ensure_grad(*pa);
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n_rows; ++j) {
                    const double gv = n.grad[i * n_rows + j];
                    for (size_t kk = 0; kk < k; ++kk) g[i * k + kk] += gv * pb->value[j * k + kk];
                }
        }
        if (pb->requires_grad) {
            Tensor& g = detail::ensure_grad(*pb);
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n_rows; ++j) {
                    const double gv = n.grad[i * n_rows + j];
                    for (size_t kk = 0; kk < k; ++kk) g[j * k + kk] += gv * pa->value[i * k + kk];
                }
        }
    });
}

inline Var take_rows(const Var& a, const std::vector<size_t>& indices) {
    const size_t c = a.value().dim(1);
    Tensor out({indices.size(), c}, 0.0);
    for (size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= a.value().dim(0)) {
            throw std::out_of_range("take_rows: index " + std::to_string(indices[i])
                                    + " out of range");
        }
        std::copy_n(a.value().data() + indices[i] * c, c, out.data() + i * c);
    }
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa, indices, c](AdNode& n) {
        if (!pa->requires_grad) return;
        Tensor& g = detail::ensure_grad(*pa);
        for (size_t i = 0; i < indices.size(); ++i) {
            for (size_t j = 0; j < c; ++j) g[indices[i] * c + j] += n.grad[i * c + j];
        }
    });
}

inline Var concat_cols(const Var& a, const Var& b) {
    const size_t r = a.value().dim(0);
    if (b.value().dim(0) != r) {
        throw std::invalid_argument("concat_cols: row mismatch");
    }
    const size_t ca = a.value().dim(1), cb = b.value().dim(1);
    Tensor out({r, ca + cb}, 0.0);
    for (size_t i = 0; i < r; ++i) {
        std::copy_n(a.value().data() + i * ca, ca, out.data() + i * (ca + cb));
        std::copy_n(b.value().data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
    }
    auto pa = a.node(), pb = b.node();
    return make_op(std::move(out), {a, b}, [pa, pb, r, ca, cb](AdNode& n) {
        if (pa->requires_grad) {
            Tensor& g = detail::ensure_grad(*pa);
            for (size_t i = 0; i < r; ++i)
                for (size_t j = 0; j < ca; ++j) g[i * ca + j] += n.grad[i * (ca + cb) + j];
        }
        if (pb->requires_grad) {
            Tensor& g = detail::ensure_grad(*pb);
            for (size_t i = 0; i < r; ++i)
                for (size_t j = 0; j < cb; ++j) g[i * cb + j] += n.grad[i * (ca + cb) + ca + j];
        }
    });
}

/// Row-wise projection onto the unit sphere.
inline Var l2_normalize_rows(const Var& a, double eps = 1e-24) {
    const size_t r = a.value().dim(0), c = a.value().dim(1);
    Tensor out = a.value();
    Tensor norms({r}, 0.0);
    for (size_t i = 0; i < r; ++i) {
        double s = eps;
        for (size_t j = 0; j < c; ++j) s += a.value()(i, j) * a.value()(i, j);
        norms[i] = std::sqrt(s);
        for (size_t j = 0; j < c; ++j) out(i, j) /= norms[i];
    }
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa, norms = std::move(norms), r, c](AdNode& n) {
        if (!pa->requires_grad) return;
        Tensor& g = detail::ensure_grad(*pa);
        for (size_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (size_t j = 0; j < c; ++j) dot += n.grad[i * c + j] * n.value[i * c + j];
            for (size_t j = 0; j < c; ++j) {
                g[i * c + j] += (n.grad[i * c + j] - n.value[i * c + j] * dot) / norms[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Spatial ops on (N, C, H, W)
// ---------------------------------------------------------------------------

namespace detail {

inline void expect_4d(const Var& v, const char* op) {
    if (v.value().ndim() != 4) {
        throw std::invalid_argument(std::string(op) + ": expected a 4-d (N, C, H, W) tensor");
    }
}

}  // namespace detail

/// 3x3 (any odd k) convolution, stride 1, zero "same" padding.
inline Var conv2d(const Var& x, const Var& weight, const Var& bias) {
    detail::expect_4d(x, "conv2d");
    const size_t batch = x.value().dim(0), ci = x.value().dim(1);
    const size_t h = x.value().dim(2), w = x.value().dim(3);
    const size_t co = weight.value().dim(0), kh = weight.value().dim(2), kw = weight.value().dim(3);
    if (weight.value().dim(1) != ci || kh != kw || kh % 2 == 0) {
        throw std::invalid_argument("conv2d: weight shape incompatible with input");
    }
    if (bias.value().size() != co) {
        throw std::invalid_argument("conv2d: bias size mismatch");
    }
    const long pad = static_cast<long>(kh / 2);
    Tensor out({batch, co, h, w}, 0.0);
    const double* X = x.value().data();
    const double* W = weight.value().data();
    const double* B = bias.value().data();
    double* O = out.data();
    const long lh = static_cast<long>(h), lw = static_cast<long>(w);
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (size_t n = 0; n < batch; ++n) {
        for (size_t oc = 0; oc < co; ++oc) {
            double* plane = O + (n * co + oc) * h * w;
            for (size_t i = 0; i < h * w; ++i) plane[i] = B[oc];
            for (size_t ic = 0; ic < ci; ++ic) {
                const double* src = X + (n * ci + ic) * h * w;
                for (size_t ky = 0; ky < kh; ++ky) {
                    for (size_t kx = 0; kx < kw; ++kx) {
                        const double wv = W[((oc * ci + ic) * kh + ky) * kw + kx];
                        if (wv == 0.0) continue;
                        const long dy = static_cast<long>(ky) - pad;
                        const long dx = static_cast<long>(kx) - pad;
                        const long ys = std::max<long>(0, -dy), ye = std::min<long>(lh, lh - dy);
                        const long xs = std::max<long>(0, -dx), xe = std::min<long>(lw, lw - dx);
                        for (long y = ys; y < ye; ++y) {
                            const double* srow = src + (y + dy) * lw + (xs + dx);
                            double* drow = plane + y * lw + xs;
                            for (long i = 0; i < xe - xs; ++i) drow[i] += wv * srow[i];
                        }
                    }
                }
            }
        }
    }
    auto px = x.node(), pw = weight.node(), pb = bias.node();
    return make_op(std::move(out), {x, weight, bias},
                   [px, pw, pb, batch, ci, co, h, w, kh, kw, pad](AdNode& n) {
        const long lh = static_cast<long>(h), lw = static_cast<long>(w);
        const double* G = n.grad.data();
        if (px->requires_grad) {
            Tensor& gx = detail::ensure_grad(*px);
            double* GX = gx.data();
            const double* W = pw->value.data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
            for (size_t nn = 0; nn < batch; ++nn) {
                for (size_t ic = 0; ic < ci; ++ic) {
                    double* dst = GX + (nn * ci + ic) * h * w;
                    for (size_t oc = 0; oc < co; ++oc) {
                        const double* gsrc = G + (nn * co + oc) * h * w;
                        for (size_t ky = 0; ky < kh; ++ky) {
                            for (size_t kx = 0; kx < kw; ++kx) {
                                const double wv = W[((oc * ci + ic) * kh + ky) * kw + kx];
                                if (wv == 0.0) continue;
                                // x(y, x) fed out(y - dy, x - dx); gather with the opposite shift.
                                const long dy = pad - static_cast<long>(ky);
                                const long dx = pad - static_cast<long>(kx);
                                const long ys = std::max<long>(0, -dy), ye = std::min<long>(lh, lh - dy);
                                const long xs = std::max<long>(0, -dx), xe = std::min<long>(lw, lw - dx);
                                for (long y = ys; y < ye; ++y) {
                                    const double* srow = gsrc + (y + dy) * lw + (xs + dx);
                                    double* drow = dst + y * lw + xs;
                                    for (long i = 0; i < xe - xs; ++i) drow[i] += wv * srow[i];
                                }
                            }
                        }
                    }
                }
            }
        }
        if (pw->requires_grad) {
            Tensor& gw = detail::ensure_grad(*pw);
            double* GW = gw.data();
            const double* X = px->value.data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
            for (size_t oc = 0; oc < co; ++oc) {
                for (size_t ic = 0; ic < ci; ++ic) {
                    for (size_t ky = 0; ky < kh; ++ky) {
                        for (size_t kx = 0; kx < kw; ++kx) {
                            const long dy = static_cast<long>(ky) - pad;
                            const long dx = static_cast<long>(kx) - pad;
                            const long ys = std::max<long>(0, -dy), ye = std::min<long>(lh, lh - dy);
                            const long xs = std::max<long>(0, -dx), xe = std::min<long>(lw, lw - dx);
                            double acc = 0.0;
                            for (size_t nn = 0; nn < batch; ++nn) {
                                const double* gsrc = G + (nn * co + oc) * h * w;
                                const double* xsrc = X + (nn * ci + ic) * h * w;
                                for (long y = ys; y < ye; ++y) {
                                    const double* grow = gsrc + y * lw;
                                    const double* xrow = xsrc + (y + dy) * lw + dx;
                                    for (long xx = xs; xx < xe; ++xx) acc += grow[xx] * xrow[xx];
                                }
                            }
                            GW[((oc * ci + ic) * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        }
        if (pb->requires_grad) {
            Tensor& gb = detail::ensure_grad(*pb);
            for (size_t oc = 0; oc < co; ++oc) {
                double acc = 0.0;
                for (size_t nn = 0; nn < batch; ++nn) {
                    const double* gsrc = G + (nn * co + oc) * h * w;
                    for (size_t i = 0; i < h * w; ++i) acc += gsrc[i];
                }
                gb[oc] += acc;
            }
        }
    });
}

inline Var avg_pool2(const Var& x) {
    detail::expect_4d(x, "avg_pool2");
    const size_t batch = x.value().dim(0), c = x.value().dim(1);
    const size_t h = x.value().dim(2), w = x.value().dim(3);
    if (h % 2 || w % 2) {
        throw std::invalid_argument("avg_pool2: spatial size must be even");
    }
    const size_t oh = h / 2, ow = w / 2;
    Tensor out({batch, c, oh, ow}, 0.0);
    for (size_t nc = 0; nc < batch * c; ++nc) {
        const double* src = x.value().data() + nc * h * w;
        double* dst = out.data() + nc * oh * ow;
        for (size_t y = 0; y < oh; ++y) {
            for (size_t xx = 0; xx < ow; ++xx) {
                dst[y * ow + xx] = 0.25 * (src[(2 * y) * w + 2 * xx] + src[(2 * y) * w + 2 * xx + 1]
                                           + src[(2 * y + 1) * w + 2 * xx]
                                           + src[(2 * y + 1) * w + 2 * xx + 1]);
            }
        }
    }
    auto px = x.node();
    return make_op(std::move(out), {x}, [px, batch, c, h, w, oh, ow](AdNode& n) {
        if (!px->requires_grad) return;
        Tensor& g = detail::ensure_grad(*px);
        for (size_t nc = 0; nc < batch * c; ++nc) {
            const double* gsrc = n.grad.data() + nc * oh * ow;
            double* dst = g.data() + nc * h * w;
            for (size_t y = 0; y < oh; ++y) {
                for (size_t xx = 0; xx < ow; ++xx) {
                    const double gv = 0.25 * gsrc[y * ow + xx];
                    dst[(2 * y) * w + 2 * xx] += gv;
                    dst[(2 * y) * w + 2 * xx + 1] += gv;
                    dst[(2 * y + 1) * w + 2 * xx] += gv;
                    dst[(2 * y + 1) * w + 2 * xx + 1] += gv;
                }
            }
        }
    });
}

inline Var upsample_nearest2(const Var& x) {
    detail::expect_4d(x, "upsample_nearest2");
    const size_t batch = x.value().dim(0), c = x.value().dim(1);
    const size_t h = x.value().dim(2), w = x.value().dim(3);
    const size_t oh = h * 2, ow = w * 2;
    Tensor out({batch, c, oh, ow}, 0.0);
    for (size_t nc = 0; nc < batch * c; ++nc) {
        const double* src = x.value().data() + nc * h * w;
        double* dst = out.data() + nc * oh * ow;
        for (size_t y = 0; y < oh; ++y) {
            for (size_t xx = 0; xx < ow; ++xx) {
                dst[y * ow + xx] = src[(y / 2) * w + (xx / 2)];
            }
        }
    }
    auto px = x.node();
    return make_op(std::move(out), {x}, [px, batch, c, h, w, oh, ow](AdNode& n) {
        if (!px->requires_grad) return;
        Tensor& g = detail::ensure_grad(*px);
        for (size_t nc = 0; nc < batch * c; ++nc) {
            const double* gsrc = n.grad.data() + nc * oh * ow;
            double* dst = g.data() + nc * h * w;
            for (size_t y = 0; y < oh; ++y) {
                for (size_t xx = 0; xx < ow; ++xx) {
                    dst[(y / 2) * w + (xx / 2)] += gsrc[y * ow + xx];
                }
            }
        }
    });
}

inline Var concat_channels(const Var& a, const Var& b) {
    detail::expect_4d(a, "concat_channels");
    detail::expect_4d(b, "concat_channels");
    const size_t batch = a.value().dim(0), ca = a.value().dim(1), cb = b.value().dim(1);
    const size_t h = a.value().dim(2), w = a.value().dim(3);
    if (b.value().dim(0) != batch || b.value().dim(2) != h || b.value().dim(3) != w) {
        throw std::invalid_argument("concat_channels: incompatible shapes");
    }
    Tensor out({batch, ca + cb, h, w}, 0.0);
    const size_t plane = h * w;
    for (size_t n = 0; n < batch; ++n) {
        std::copy_n(a.value().data() + n * ca * plane, ca * plane,
                    out.data() + n * (ca + cb) * plane);
        std::copy_n(b.value().data() + n * cb * plane, cb * plane,
                    out.data() + n * (ca + cb) * plane + ca * plane);
    }
    auto pa = a.node(), pb = b.node();
    return make_op(std::move(out), {a, b}, [pa, pb, batch, ca, cb, plane](AdNode& n) {
        if (pa->requires_grad) {
            Tensor& g = detail::ensure_grad(*pa);
            for (size_t nn = 0; nn < batch; ++nn) {
                const double* src = n.grad.data() + nn * (ca + cb) * plane;
                double* dst = g.data() + nn * ca * plane;
                for (size_t i = 0; i < ca * plane; ++i) dst[i] += src[i];
            }
        }
        if (pb->requires_grad) {
            Tensor& g = detail::ensure_grad(*pb);
            for (size_t nn = 0; nn < batch; ++nn) {
                const double* src = n.grad.data() + nn * (ca + cb) * plane + ca * plane;
                double* dst = g.data() + nn * cb * plane;
                for (size_t i = 0; i < cb * plane; ++i) dst[i] += src[i];
            }
        }
    });
}

inline Var repeat_channels(const Var& x, size_t times) {
    detail::expect_4d(x, "repeat_channels");
    const size_t batch = x.value().dim(0), c = x.value().dim(1);
    const size_t h = x.value().dim(2), w = x.value().dim(3);
    Tensor out({batch, c * times, h, w}, 0.0);
    const size_t plane = h * w;
    for (size_t n = 0; n < batch; ++n) {
        for (size_t t = 0; t < times; ++t) {
            std::copy_n(x.value().data() + n * c * plane, c * plane,
                        out.data() + (n * times + t) * c * plane);
        }
    }
    auto px = x.node();
    return make_op(std::move(out), {x}, [px, batch, c, times, plane](AdNode& n) {
        if (!px->requires_grad) return;
        Tensor& g = detail::ensure_grad(*px);
        for (size_t nn = 0; nn < batch; ++nn) {
            for (size_t t = 0; t < times; ++t) {
                const double* src = n.grad.data() + (nn * times + t) * c * plane;
                double* dst = g.data() + nn * c * plane;
                for (size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
            }
        }
    });
}

/// Spatial crop with one rect per batch element.
template <class RectT>
inline Var crop_batch(const Var& x, const std::vector<RectT>& rects) {
    detail::expect_4d(x, "crop_batch");
    const size_t batch = x.value().dim(0), c = x.value().dim(1);
    const size_t h = x.value().dim(2), w = x.value().dim(3);
    if (rects.size() != batch) {
        throw std::invalid_argument("crop_batch: one rect per batch element required");
    }
    const size_t s = static_cast<size_t>(rects.front().size);
    for (const auto& r : rects) {
        if (r.size != rects.front().size || r.top < 0 || r.left < 0
            || static_cast<size_t>(r.top) + s > h || static_cast<size_t>(r.left) + s > w) {
            throw std::invalid_argument("crop_batch: rect out of bounds");
        }
    }
    Tensor out({batch, c, s, s}, 0.0);
    for (size_t n = 0; n < batch; ++n) {
        for (size_t cc = 0; cc < c; ++cc) {
            const double* src = x.value().data() + (n * c + cc) * h * w;
            double* dst = out.data() + (n * c + cc) * s * s;
            for (size_t y = 0; y < s; ++y) {
                std::copy_n(src + (static_cast<size_t>(rects[n].top) + y) * w
                                + static_cast<size_t>(rects[n].left),
                            s, dst + y * s);
            }
        }
    }
    auto px = x.node();
    std::vector<std::pair<size_t, size_t>> offsets(batch);
    for (size_t n = 0; n < batch; ++n) {
        offsets[n] = {static_cast<size_t>(rects[n].top), static_cast<size_t>(rects[n].left)};
    }
    return make_op(std::move(out), {x}, [px, offsets = std::move(offsets), c, h, w, s](AdNode& n) {
        if (!px->requires_grad) return;
        Tensor& g = detail::ensure_grad(*px);
        for (size_t nn = 0; nn < offsets.size(); ++nn) {
            for (size_t cc = 0; cc < c; ++cc) {
                const double* src = n.grad.data() + (nn * c + cc) * s * s;
                double* dst = g.data() + (nn * c + cc) * h * w;
                for (size_t y = 0; y < s; ++y) {
                    double* drow = dst + (offsets[nn].first + y) * w + offsets[nn].second;
                    for (size_t xx = 0; xx < s; ++xx) drow[xx] += src[y * s + xx];
                }
            }
        }
    });
}

/// PyTorch-style adaptive average pooling; each output cell averages the
/// region [floor(i*H/oh), ceil((i+1)*H/oh)).
inline Var adaptive_avg_pool(const Var& x, size_t oh, size_t ow) {
    detail::expect_4d(x, "adaptive_avg_pool");
    const size_t batch = x.value().dim(0), c = x.value().dim(1);
    const size_t h = x.value().dim(2), w = x.value().dim(3);
    auto region = [](size_t i, size_t in, size_t out) {
        const size_t lo = (i * in) / out;
        const size_t hi = ((i + 1) * in + out - 1) / out;
        return std::pair<size_t, size_t>(lo, hi);
    };
    Tensor out({batch, c, oh, ow}, 0.0);
    for (size_t nc = 0; nc < batch * c; ++nc) {
        const double* src = x.value().data() + nc * h * w;
        double* dst = out.data() + nc * oh * ow;
        for (size_t oy = 0; oy < oh; ++oy) {
            const auto [ys, ye] = region(oy, h, oh);
            for (size_t ox = 0; ox < ow; ++ox) {
                const auto [xs, xe] = region(ox, w, ow);
                double s = 0.0;
                for (size_t y = ys; y < ye; ++y)
                    for (size_t xx = xs; xx < xe; ++xx) s += src[y * w + xx];
                dst[oy * ow + ox] = s / static_cast<double>((ye - ys) * (xe - xs));
            }
        }
    }
    auto px = x.node();
    return make_op(std::move(out), {x}, [px, batch, c, h, w, oh, ow, region](AdNode& n) {
        if (!px->requires_grad) return;
        Tensor& g = detail::ensure_grad(*px);
        for (size_t nc = 0; nc < batch * c; ++nc) {
            const double* gsrc = n.grad.data() + nc * oh * ow;
            double* dst = g.data() + nc * h * w;
            for (size_t oy = 0; oy < oh; ++oy) {
                const auto [ys, ye] = region(oy, h, oh);
                for (size_t ox = 0; ox < ow; ++ox) {
                    const auto [xs, xe] = region(ox, w, ow);
                    const double gv = gsrc[oy * ow + ox]
                                      / static_cast<double>((ye - ys) * (xe - xs));
                    for (size_t y = ys; y < ye; ++y)
                        for (size_t xx = xs; xx < xe; ++xx) dst[y * w + xx] += gv;
                }
            }
        }
    });
}

/// Instance normalization with per-channel affine parameters.
inline Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    detail::expect_4d(x, "instance_norm");
    const size_t batch = x.value().dim(0), c = x.value().dim(1);
    const size_t m = x.value().dim(2) * x.value().dim(3);
    if (gamma.value().size() != c || beta.value().size() != c) {
        throw std::invalid_argument("instance_norm: affine parameter size mismatch");
    }
    Tensor out(x.value().shape(), 0.0);
    Tensor xhat(x.value().shape(), 0.0);
    Tensor inv_std({batch, c}, 0.0);
    for (size_t n = 0; n < batch; ++n) {
        for (size_t cc = 0; cc < c; ++cc) {
            const double* src = x.value().data() + (n * c + cc) * m;
            double mu = 0.0;
            for (size_t i = 0; i < m; ++i) mu += src[i];
            mu /= static_cast<double>(m);
            double var = 0.0;
            for (size_t i = 0; i < m; ++i) var += (src[i] - mu) * (src[i] - mu);
            var /= static_cast<double>(m);
            const double inv = 1.0 / std::sqrt(var + eps);
            inv_std(n, cc) = inv;
            double* xh = xhat.data() + (n * c + cc) * m;
            double* dst = out.data() + (n * c + cc) * m;
            const double gscale = gamma.value()[cc];
            const double bshift = beta.value()[cc];
            for (size_t i = 0; i < m; ++i) {
                xh[i] = (src[i] - mu) * inv;
                dst[i] = gscale * xh[i] + bshift;
            }
        }
    }
    auto px = x.node(), pg = gamma.node(), pb = beta.node();
    return make_op(std::move(out), {x, gamma, beta},
                   [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std),
                    batch, c, m](AdNode& n) {
        if (pg->requires_grad) {
            Tensor& gg = detail::ensure_grad(*pg);
            for (size_t cc = 0; cc < c; ++cc) {
                double acc = 0.0;
                for (size_t nn = 0; nn < batch; ++nn) {
                    const double* gy = n.grad.data() + (nn * c + cc) * m;
                    const double* xh = xhat.data() + (nn * c + cc) * m;
                    for (size_t i = 0; i < m; ++i) acc += gy[i] * xh[i];
                }
                gg[cc] += acc;
            }
        }
        if (pb->requires_grad) {
            Tensor& gb = detail::ensure_grad(*pb);
            for (size_t cc = 0; cc < c; ++cc) {
                double acc = 0.0;
                for (size_t nn = 0; nn < batch; ++nn) {
                    const double* gy = n.grad.data() + (nn * c + cc) * m;
                    for (size_t i = 0; i < m; ++i) acc += gy[i];
                }
                gb[cc] += acc;
            }
        }
        if (px->requires_grad) {
            Tensor& gx = detail::ensure_grad(*px);
            for (size_t nn = 0; nn < batch; ++nn) {
                for (size_t cc = 0; cc < c; ++cc) {
                    const double* gy = n.grad.data() + (nn * c + cc) * m;
                    const double* xh = xhat.data() + (nn * c + cc) * m;
                    double* dst = gx.data() + (nn * c + cc) * m;
                    const double gscale = pg->value[cc];
                    double mean_gy = 0.0, mean_gy_xh = 0.0;
                    for (size_t i = 0; i < m; ++i) {
                        mean_gy += gy[i];
                        mean_gy_xh += gy[i] * xh[i];
                    }
                    mean_gy /= static_cast<double>(m);
                    mean_gy_xh /= static_cast<double>(m);
                    const double inv = inv_std(nn, cc);
                    for (size_t i = 0; i < m; ++i) {
                        dst[i] += gscale * inv * (gy[i] - mean_gy - xh[i] * mean_gy_xh);
                    }
                }
            }
        }
    });
}

}  // namespace evrec
