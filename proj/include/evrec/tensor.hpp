#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace evrec {

/// Dense row-major tensor of doubles. The single value type used for event
/// grids, images, features and network parameters.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<size_t> shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(count(shape_), fill) {}

    Tensor(std::initializer_list<size_t> shape, double fill = 0.0)
        : Tensor(std::vector<size_t>(shape), fill) {}

    static Tensor from(std::vector<size_t> shape, std::vector<double> values) {
        if (count(shape) != values.size()) {
            throw std::invalid_argument("Tensor::from: shape/data size mismatch");
        }
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(values);
        return t;
    }

    const std::vector<size_t>& shape() const { return shape_; }
    size_t ndim() const { return shape_.size(); }
    size_t dim(size_t axis) const { return shape_.at(axis); }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    double& operator()(size_t i, size_t j) { return data_[i * shape_[1] + j]; }
    double operator()(size_t i, size_t j) const { return data_[i * shape_[1] + j]; }

    double& operator()(size_t i, size_t j, size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double operator()(size_t i, size_t j, size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    double& operator()(size_t i, size_t j, size_t k, size_t l) {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    double operator()(size_t i, size_t j, size_t k, size_t l) const {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    Tensor reshaped(std::vector<size_t> shape) const {
        if (count(shape) != data_.size()) {
            throw std::invalid_argument("Tensor::reshaped: element count mismatch");
        }
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    static size_t count(const std::vector<size_t>& shape) {
        size_t n = 1;
        for (size_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

private:
    std::vector<size_t> shape_;
    std::vector<double> data_;
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }

inline double sum(const Tensor& t) {
    double s = 0.0;
    for (size_t i = 0; i < t.size(); ++i) s += t[i];
    return s;
}

inline double min_value(const Tensor& t) {
    double m = t.size() ? t[0] : 0.0;
    for (size_t i = 1; i < t.size(); ++i) m = std::min(m, t[i]);
    return m;
}

inline double max_value(const Tensor& t) {
    double m = t.size() ? t[0] : 0.0;
    for (size_t i = 1; i < t.size(); ++i) m = std::max(m, t[i]);
    return m;
}

inline double l2_norm(const Tensor& t) {
    double s = 0.0;
    for (size_t i = 0; i < t.size(); ++i) s += t[i] * t[i];
    return std::sqrt(s);
}

inline bool all_finite(const Tensor& t) {
    for (size_t i = 0; i < t.size(); ++i) {
        if (!std::isfinite(t[i])) return false;
    }
    return true;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i]) return false;
    }
    return true;
}

inline std::string shape_string(const Tensor& t) {
    std::string s = "(";
    for (size_t i = 0; i < t.ndim(); ++i) {
        if (i) s += ", ";
        s += std::to_string(t.dim(i));
    }
    return s + ")";
}

/// Bilinear resample of a single (h, w) plane with half-pixel sample centers
/// and edge clamping. Preserves constants and is exact for identity sizes.
inline void bilinear_resize_plane(const double* src, size_t ih, size_t iw,
                                  double* dst, size_t oh, size_t ow) {
    const double sy_scale = static_cast<double>(ih) / static_cast<double>(oh);
    const double sx_scale = static_cast<double>(iw) / static_cast<double>(ow);
    for (size_t oy = 0; oy < oh; ++oy) {
        const double sy = (static_cast<double>(oy) + 0.5) * sy_scale - 0.5;
        const auto y0f = std::floor(sy);
        const double fy = sy - y0f;
        const long y0 = static_cast<long>(y0f);
        const size_t y0c = static_cast<size_t>(std::clamp<long>(y0, 0, static_cast<long>(ih) - 1));
        const size_t y1c = static_cast<size_t>(std::clamp<long>(y0 + 1, 0, static_cast<long>(ih) - 1));
        for (size_t ox = 0; ox < ow; ++ox) {
            const double sx = (static_cast<double>(ox) + 0.5) * sx_scale - 0.5;
            const auto x0f = std::floor(sx);
            const double fx = sx - x0f;
            const long x0 = static_cast<long>(x0f);
            const size_t x0c = static_cast<size_t>(std::clamp<long>(x0, 0, static_cast<long>(iw) - 1));
            const size_t x1c = static_cast<size_t>(std::clamp<long>(x0 + 1, 0, static_cast<long>(iw) - 1));
            dst[oy * ow + ox] = src[y0c * iw + x0c] * (1.0 - fy) * (1.0 - fx)
                              + src[y0c * iw + x1c] * (1.0 - fy) * fx
                              + src[y1c * iw + x0c] * fy * (1.0 - fx)
                              + src[y1c * iw + x1c] * fy * fx;
        }
    }
}

}  // namespace evrec
