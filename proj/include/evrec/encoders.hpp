#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "evrec/autograd.hpp"
#include "evrec/representation.hpp"
#include "evrec/rng.hpp"

namespace evrec {

/// Image preprocessing applied before the visual encoder: channel
/// replication to `channels`, adaptive-average resize to `input_size` and
/// per-channel standardization.
struct PreprocessSpec {
    int input_size = 8;
    int channels = 3;
    double mean = 0.5;
    double stddev = 0.5;
};

/// Substitute one category name into a prompt template containing exactly
/// one [CLASS] placeholder.
inline std::vector<std::string> build_prompts(const std::vector<std::string>& categories,
                                              const std::string& prompt_template) {
    if (categories.empty()) {
        throw std::invalid_argument("build_prompts: empty category list");
    }
    const std::string placeholder = "[CLASS]";
    const size_t pos = prompt_template.find(placeholder);
    if (pos == std::string::npos) {
        throw std::invalid_argument("build_prompts: template missing [CLASS] placeholder");
    }
    if (prompt_template.find(placeholder, pos + 1) != std::string::npos) {
        throw std::invalid_argument("build_prompts: template has multiple [CLASS] placeholders");
    }
    std::vector<std::string> prompts;
    prompts.reserve(categories.size());
    for (const auto& name : categories) {
        std::string prompt = prompt_template;
        prompt.replace(pos, placeholder.size(), name);
        prompts.push_back(std::move(prompt));
    }
    return prompts;
}

/// Frozen image-text embedding backend. Identical inputs must produce
/// identical outputs for the lifetime of a run, and gradients must flow
/// through encode_images into the image pixels (the reconstruction network
/// trains through this path).
class EncoderBackend {
public:
    virtual ~EncoderBackend() = default;

    virtual std::string identifier() const = 0;
    virtual int dim() const = 0;
    virtual PreprocessSpec preprocess() const = 0;
    virtual bool thread_safe() const = 0;
    virtual uint64_t parameter_checksum() const = 0;

    /// Encode prompts to a (C, D) matrix with unit-norm rows. Every call is
    /// recorded in the text call log so evaluation protocols can be audited.
    Tensor encode_text(const std::vector<std::string>& prompts) {
        for (const auto& p : prompts) text_call_log_.push_back(p);
        return encode_text_impl(prompts);
    }

    /// Encode a batch of images (N, 1, H, W) in [0, 1] to unit-norm features
    /// (N, D). Differentiable w.r.t. the pixels.
    Var encode_images(const Var& images) {
        if (images.value().ndim() != 4 || images.value().dim(1) != 1) {
            throw std::invalid_argument("encode_images: expected a (N, 1, H, W) batch");
        }
        if (!all_finite(images.value())) {
            throw std::runtime_error("encode_images: non-finite pixel values");
        }
        return encode_images_impl(images);
    }

    Var encode_image(const IntensityImage& image) {
        Var in = Var::constant(image.data.reshaped({1, 1, image.data.dim(0), image.data.dim(1)}));
        return encode_images(in);
    }

    Var encode_image(const Var& image_hw) {
        Var in = reshape(image_hw, {1, 1, image_hw.value().dim(0), image_hw.value().dim(1)});
        return encode_images(in);
    }

    const std::vector<std::string>& text_call_log() const { return text_call_log_; }
    void clear_text_call_log() { text_call_log_.clear(); }

protected:
    virtual Tensor encode_text_impl(const std::vector<std::string>& prompts) = 0;
    virtual Var encode_images_impl(const Var& images) = 0;

private:
    std::vector<std::string> text_call_log_;
};

/// Deterministic test backend. Text features come from seeded hashing of the
/// prompt; image features from a fixed random linear map of downsampled
/// pixels. Exact analytic gradients, no pretrained weights.
class StubBackend : public EncoderBackend {
public:
    explicit StubBackend(uint64_t seed = 7, int dim = 32, int input_size = 8)
        : seed_(seed), dim_(dim) {
        spec_.input_size = input_size;
        const size_t flat = static_cast<size_t>(spec_.channels) * input_size * input_size;
        Rng rng(hash_mix(seed, 0x5eedbeefULL));
        projection_ = Tensor({static_cast<size_t>(dim), flat});
        const double stddev = 1.0 / std::sqrt(static_cast<double>(flat));
        for (size_t i = 0; i < projection_.size(); ++i) {
            projection_[i] = rng.normal(0.0, stddev);
        }
    }

    std::string identifier() const override {
        return "stub:seed=" + std::to_string(seed_) + ",dim=" + std::to_string(dim_)
             + ",input=" + std::to_string(spec_.input_size);
    }

    int dim() const override { return dim_; }
    PreprocessSpec preprocess() const override { return spec_; }
    bool thread_safe() const override { return true; }

    uint64_t parameter_checksum() const override {
        return fnv1a64(projection_.data(), projection_.size() * sizeof(double));
    }

protected:
    Tensor encode_text_impl(const std::vector<std::string>& prompts) override {
        Tensor features({prompts.size(), static_cast<size_t>(dim_)});
        for (size_t i = 0; i < prompts.size(); ++i) {
            Rng rng(hash_mix(seed_, fnv1a64(prompts[i])));
            double norm_sq = 1e-24;
            for (int j = 0; j < dim_; ++j) {
                const double v = rng.normal();
                features(i, static_cast<size_t>(j)) = v;
                norm_sq += v * v;
            }
            const double inv = 1.0 / std::sqrt(norm_sq);
            for (int j = 0; j < dim_; ++j) features(i, static_cast<size_t>(j)) *= inv;
        }
        return features;
    }

    Var encode_images_impl(const Var& images) override {
        const size_t batch = images.value().dim(0);
        Var x = repeat_channels(images, static_cast<size_t>(spec_.channels));
        x = adaptive_avg_pool(x, static_cast<size_t>(spec_.input_size),
                              static_cast<size_t>(spec_.input_size));
        x = mul_scalar(add_scalar(x, -spec_.mean), 1.0 / spec_.stddev);
        x = reshape(x, {batch, static_cast<size_t>(spec_.channels * spec_.input_size * spec_.input_size)});
        Var projected = matmul_nt(x, Var::constant(projection_));
        return l2_normalize_rows(projected);
    }

private:
    uint64_t seed_;
    int dim_;
    PreprocessSpec spec_;
    Tensor projection_;  // (D, channels * input_size^2)
};

/// Backend selection by identifier, e.g. "stub:seed=7,dim=32,input=8".
/// Identifiers that are not a stub spec are treated as paths to pretrained
/// weights, which this build does not ship.
inline std::unique_ptr<EncoderBackend> make_backend(const std::string& id) {
    if (id.rfind("stub", 0) == 0) {
        uint64_t seed = 7;
        int dim = 32;
        int input_size = 8;
        if (id.size() > 4) {
            if (id[4] != ':') {
                throw std::invalid_argument("make_backend: malformed stub identifier \"" + id + "\"");
            }
            std::string rest = id.substr(5);
            size_t start = 0;
            while (start < rest.size()) {
                size_t end = rest.find(',', start);
                if (end == std::string::npos) end = rest.size();
                const std::string kv = rest.substr(start, end - start);
                const size_t eq = kv.find('=');
                if (eq == std::string::npos) {
                    throw std::invalid_argument("make_backend: malformed option \"" + kv + "\"");
                }
                const std::string key = kv.substr(0, eq);
                const std::string value = kv.substr(eq + 1);
                if (key == "seed") seed = std::stoull(value);
                else if (key == "dim") dim = std::stoi(value);
                else if (key == "input") input_size = std::stoi(value);
                else throw std::invalid_argument("make_backend: unknown stub option \"" + key + "\"");
                start = end + 1;
            }
        }
        return std::make_unique<StubBackend>(seed, dim, input_size);
    }
    throw std::runtime_error("make_backend: cannot load backend \"" + id
                             + "\": pretrained weight files are not supported by this build; "
                               "use a stub:... identifier");
}

/// Softmax over cosine similarities (Eq. of the recognition head):
/// p_i = softmax_i(v . f_i / temperature).
inline Tensor class_probabilities(const Tensor& v, const Tensor& text_features, double temperature) {
    if (temperature <= 0.0) {
        throw std::invalid_argument("class_probabilities: temperature must be > 0");
    }
    const size_t dim = text_features.dim(1);
    if (v.size() != dim) {
        throw std::invalid_argument("class_probabilities: feature dimension mismatch");
    }
    const size_t classes = text_features.dim(0);
    Tensor logits({classes}, 0.0);
    for (size_t i = 0; i < classes; ++i) {
        double s = 0.0;
        for (size_t j = 0; j < dim; ++j) s += v[j] * text_features(i, j);
        logits[i] = s / temperature;
    }
    double m = logits[0];
    for (size_t i = 1; i < classes; ++i) m = std::max(m, logits[i]);
    double z = 0.0;
    for (size_t i = 0; i < classes; ++i) {
        logits[i] = std::exp(logits[i] - m);
        z += logits[i];
    }
    for (size_t i = 0; i < classes; ++i) logits[i] /= z;
    return logits;
}

/// Row-wise probabilities for a (N, D) feature batch -> (N, C).
inline Tensor class_probabilities_batch(const Tensor& v_batch, const Tensor& text_features,
                                        double temperature) {
    const size_t n = v_batch.dim(0);
    const size_t classes = text_features.dim(0);
    Tensor out({n, classes}, 0.0);
    for (size_t i = 0; i < n; ++i) {
        Tensor row({v_batch.dim(1)}, 0.0);
        std::copy_n(v_batch.data() + i * v_batch.dim(1), v_batch.dim(1), row.data());
        const Tensor p = class_probabilities(row, text_features, temperature);
        std::copy_n(p.data(), classes, out.data() + i * classes);
    }
    return out;
}

/// Argmax with ties broken by the lowest index.
inline size_t predict(const Tensor& probs) {
    if (probs.size() == 0) {
        throw std::invalid_argument("predict: empty probability vector");
    }
    size_t best = 0;
    for (size_t i = 1; i < probs.size(); ++i) {
        if (probs[i] > probs[best]) best = i;
    }
    return best;
}

}  // namespace evrec
