#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "evrec/events.hpp"
#include "evrec/rng.hpp"
#include "evrec/tensor.hpp"

namespace evrec {

/// Event spike tensor: non-negative (2 polarities, t_bins, height, width)
/// grid. The triangular temporal kernel gives each event unit mass, so the
/// total equals the event count of the source stream.
struct EventTensor {
    Tensor data;  // (2, t_bins, height, width)

    int t_bins() const { return static_cast<int>(data.dim(1)); }
    int height() const { return static_cast<int>(data.dim(2)); }
    int width() const { return static_cast<int>(data.dim(3)); }
};

/// Single-channel reconstructed image with values in [0, 1].
struct IntensityImage {
    Tensor data;  // (height, width)

    int height() const { return static_cast<int>(data.dim(0)); }
    int width() const { return static_cast<int>(data.dim(1)); }
};

/// Square crop window; the same instance is applied to the event tensor and
/// the full-frame reconstruction inside one consistency evaluation.
struct CropRect {
    int top = 0;
    int left = 0;
    int size = 0;
};

inline EventTensor build_est(const EventStream& stream, int t_bins, int height, int width) {
    if (stream.events.empty()) {
        throw std::runtime_error("build_est: degenerate input, empty stream");
    }
    if (t_bins < 1) {
        throw std::invalid_argument("build_est: t_bins must be >= 1");
    }
    EventTensor est;
    est.data = Tensor({2, static_cast<size_t>(t_bins),
                       static_cast<size_t>(height), static_cast<size_t>(width)});
    const int64_t t_min = stream.t_min();
    const int64_t t_max = stream.t_max();
    const double span = static_cast<double>(t_max - t_min);
    size_t index = 0;
    for (const Event& e : stream.events) {
        if (e.x < 0 || e.x >= width || e.y < 0 || e.y >= height) {
            throw std::runtime_error("build_est: event " + std::to_string(index)
                                     + " at (" + std::to_string(e.x) + ", " + std::to_string(e.y)
                                     + ") outside grid " + std::to_string(width) + "x"
                                     + std::to_string(height));
        }
        const size_t pol = static_cast<size_t>(e.p & 1);
        if (t_max == t_min) {
            est.data(pol, 0, static_cast<size_t>(e.y), static_cast<size_t>(e.x)) += 1.0;
        } else {
            const double ts = static_cast<double>(t_bins - 1)
                              * static_cast<double>(e.t - t_min) / span;
            const int b0 = static_cast<int>(std::floor(ts));
            const double frac = ts - static_cast<double>(b0);
            if (b0 >= 0 && b0 < t_bins) {
                est.data(pol, static_cast<size_t>(b0),
                         static_cast<size_t>(e.y), static_cast<size_t>(e.x)) += 1.0 - frac;
            }
            if (frac > 0.0 && b0 + 1 < t_bins) {
                est.data(pol, static_cast<size_t>(b0 + 1),
                         static_cast<size_t>(e.y), static_cast<size_t>(e.x)) += frac;
            }
        }
        ++index;
    }
    return est;
}

/// Per-plane bilinear resampling (half-pixel centers). Output stays
/// non-negative.
inline EventTensor resize_tensor(const EventTensor& est, int out_height, int out_width) {
    if (out_height < 1 || out_width < 1) {
        throw std::invalid_argument("resize_tensor: output sizes must be >= 1");
    }
    const size_t bins = est.data.dim(1);
    const size_t ih = est.data.dim(2);
    const size_t iw = est.data.dim(3);
    EventTensor out;
    out.data = Tensor({2, bins, static_cast<size_t>(out_height), static_cast<size_t>(out_width)});
    for (size_t p = 0; p < 2; ++p) {
        for (size_t b = 0; b < bins; ++b) {
            const double* src = est.data.data() + (p * bins + b) * ih * iw;
            double* dst = out.data.data()
                          + (p * bins + b) * static_cast<size_t>(out_height) * static_cast<size_t>(out_width);
            bilinear_resize_plane(src, ih, iw, dst,
                                  static_cast<size_t>(out_height), static_cast<size_t>(out_width));
        }
    }
    return out;
}

/// Uniform placement of a crop_size x crop_size window inside a square frame.
inline CropRect sample_crop_rect(Rng& rng, int frame_size, int crop_size) {
    if (crop_size > frame_size || crop_size < 1) {
        throw std::invalid_argument("sample_crop_rect: crop size " + std::to_string(crop_size)
                                    + " invalid for frame " + std::to_string(frame_size));
    }
    const uint64_t range = static_cast<uint64_t>(frame_size - crop_size) + 1;
    CropRect rect;
    rect.top = static_cast<int>(rng.uniform_int(range));
    rect.left = static_cast<int>(rng.uniform_int(range));
    rect.size = crop_size;
    return rect;
}

namespace detail {

inline void validate_rect(const CropRect& rect, int height, int width, const char* where) {
    if (rect.size < 1 || rect.top < 0 || rect.left < 0
        || rect.top + rect.size > height || rect.left + rect.size > width) {
        throw std::runtime_error(std::string(where) + ": rect (top=" + std::to_string(rect.top)
                                 + ", left=" + std::to_string(rect.left) + ", size="
                                 + std::to_string(rect.size) + ") out of bounds for "
                                 + std::to_string(height) + "x" + std::to_string(width));
    }
}

}  // namespace detail

/// Exact sub-grid extraction, no resampling.
inline EventTensor crop(const EventTensor& est, const CropRect& rect) {
    detail::validate_rect(rect, est.height(), est.width(), "crop(EventTensor)");
    const size_t bins = est.data.dim(1);
    const size_t iw = est.data.dim(3);
    const size_t s = static_cast<size_t>(rect.size);
    EventTensor out;
    out.data = Tensor({2, bins, s, s});
    for (size_t p = 0; p < 2; ++p) {
        for (size_t b = 0; b < bins; ++b) {
            for (size_t y = 0; y < s; ++y) {
                const double* src = est.data.data()
                                    + ((p * bins + b) * est.data.dim(2)
                                       + static_cast<size_t>(rect.top) + y) * iw
                                    + static_cast<size_t>(rect.left);
                double* dst = out.data.data() + ((p * bins + b) * s + y) * s;
                std::memcpy(dst, src, s * sizeof(double));
            }
        }
    }
    return out;
}

inline IntensityImage crop(const IntensityImage& image, const CropRect& rect) {
    detail::validate_rect(rect, image.height(), image.width(), "crop(IntensityImage)");
    const size_t s = static_cast<size_t>(rect.size);
    const size_t iw = image.data.dim(1);
    IntensityImage out;
    out.data = Tensor({s, s});
    for (size_t y = 0; y < s; ++y) {
        const double* src = image.data.data()
                            + (static_cast<size_t>(rect.top) + y) * iw + static_cast<size_t>(rect.left);
        std::memcpy(out.data.data() + y * s, src, s * sizeof(double));
    }
    return out;
}

// Tensor dump format for golden tests: 5 little-endian int32 header
// (2, t_bins, height, width, n_events) followed by the planes as flat
// little-endian float32.

inline void save_est(const std::string& path, const EventTensor& est, uint32_t n_events) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("save_est: cannot open " + path);
    }
    const int32_t header[5] = {2, est.t_bins(), est.height(), est.width(),
                               static_cast<int32_t>(n_events)};
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    std::vector<float> floats(est.data.size());
    for (size_t i = 0; i < floats.size(); ++i) {
        floats[i] = static_cast<float>(est.data[i]);
    }
    out.write(reinterpret_cast<const char*>(floats.data()),
              static_cast<std::streamsize>(floats.size() * sizeof(float)));
    if (!out) {
        throw std::runtime_error("save_est: write failed for " + path);
    }
}

inline EventTensor load_est(const std::string& path, uint32_t* n_events_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("load_est: cannot open " + path);
    }
    int32_t header[5] = {};
    in.read(reinterpret_cast<char*>(header), sizeof(header));
    if (!in || header[0] != 2 || header[1] < 1 || header[2] < 1 || header[3] < 1) {
        throw std::runtime_error("load_est: malformed header in " + path);
    }
    EventTensor est;
    est.data = Tensor({2, static_cast<size_t>(header[1]),
                       static_cast<size_t>(header[2]), static_cast<size_t>(header[3])});
    std::vector<float> floats(est.data.size());
    in.read(reinterpret_cast<char*>(floats.data()),
            static_cast<std::streamsize>(floats.size() * sizeof(float)));
    if (!in) {
        throw std::runtime_error("load_est: truncated payload in " + path);
    }
    for (size_t i = 0; i < floats.size(); ++i) {
        est.data[i] = static_cast<double>(floats[i]);
    }
    if (n_events_out) *n_events_out = static_cast<uint32_t>(header[4]);
    return est;
}

}  // namespace evrec
