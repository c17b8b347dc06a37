#pragma once

#include <string>
#include <vector>

#include "evrec/autograd.hpp"
#include "evrec/representation.hpp"
#include "evrec/rng.hpp"

namespace evrec {

/// Architecture of the event-to-image network G: a U-shaped fully
/// convolutional net with `depth` resolution levels, channel widths doubling
/// from `base_width`, instance normalization, SiLU activations, skip
/// connections by concatenation, `residual_blocks` residual blocks at the
/// bottleneck and a logistic squashing to [0, 1] at the output.
struct ReconNetConfig {
    int input_channels = 18;  // 2 * t_bins
    int base_width = 32;
    int depth = 3;
    int residual_blocks = 2;
    double norm_eps = 1e-5;

    int downsample_factor() const { return 1 << (depth - 1); }

    void validate() const {
        if (input_channels < 1) throw std::invalid_argument("ReconNetConfig: input_channels < 1");
        if (base_width < 1) throw std::invalid_argument("ReconNetConfig: base_width < 1");
        if (depth < 2) throw std::invalid_argument("ReconNetConfig: depth < 2");
        if (residual_blocks < 0) throw std::invalid_argument("ReconNetConfig: residual_blocks < 0");
    }
};

class ReconNet {
public:
    struct NamedParam {
        std::string name;
        Var var;
    };

    ReconNet() = default;

    ReconNet(const ReconNetConfig& config, uint64_t seed) : config_(config) {
        config_.validate();
        Rng rng(seed);
        int in_ch = config_.input_channels;
        for (int level = 0; level < config_.depth - 1; ++level) {
            const int out_ch = width_at(level);
            add_conv("enc" + std::to_string(level), in_ch, out_ch, rng);
            add_norm("enc" + std::to_string(level), out_ch);
            in_ch = out_ch;
        }
        const int bottom = width_at(config_.depth - 1);
        add_conv("bottom", in_ch, bottom, rng);
        add_norm("bottom", bottom);
        for (int block = 0; block < config_.residual_blocks; ++block) {
            const std::string prefix = "res" + std::to_string(block);
            add_conv(prefix + ".a", bottom, bottom, rng);
            add_norm(prefix + ".a", bottom);
            add_conv(prefix + ".b", bottom, bottom, rng);
            add_norm(prefix + ".b", bottom);
        }
        for (int level = config_.depth - 2; level >= 0; --level) {
            const int skip_ch = width_at(level);
            const int src_ch = width_at(level + 1);
            add_conv("dec" + std::to_string(level), src_ch + skip_ch, skip_ch, rng);
            add_norm("dec" + std::to_string(level), skip_ch);
        }
        add_conv("head", width_at(0), 1, rng);
    }

    const ReconNetConfig& config() const { return config_; }

    /// Forward pass over a batch (N, input_channels, H, W) -> (N, 1, H, W).
    /// With with_grad = false the parameters enter as constants and no tape
    /// is recorded.
    Var forward(const Var& input, bool with_grad = true) const {
        const Tensor& x = input.value();
        if (x.ndim() != 4 || static_cast<int>(x.dim(1)) != config_.input_channels) {
            throw std::runtime_error(
                "ReconNet::forward: expected " + std::to_string(config_.input_channels)
                + " input channels, got " + (x.ndim() == 4 ? std::to_string(x.dim(1)) : shape_string(x)));
        }
        const int factor = config_.downsample_factor();
        if (x.dim(2) % factor || x.dim(3) % factor || x.dim(2) == 0 || x.dim(3) == 0) {
            throw std::runtime_error("ReconNet::forward: spatial size " + std::to_string(x.dim(2))
                                     + "x" + std::to_string(x.dim(3)) + " not divisible by "
                                     + std::to_string(factor));
        }
        auto P = [&](const std::string& name) {
            const Var& v = find(name);
            return with_grad ? v : v.detach();
        };
        auto conv_in_act = [&](const std::string& prefix, const Var& in) {
            Var h = conv2d(in, P(prefix + ".w"), P(prefix + ".b"));
            h = instance_norm(h, P(prefix + ".gamma"), P(prefix + ".beta"), config_.norm_eps);
            return silu(h);
        };

        Var h = input;
        std::vector<Var> skips;
        for (int level = 0; level < config_.depth - 1; ++level) {
            h = conv_in_act("enc" + std::to_string(level), h);
            skips.push_back(h);
            h = avg_pool2(h);
        }
        h = conv_in_act("bottom", h);
        for (int block = 0; block < config_.residual_blocks; ++block) {
            const std::string prefix = "res" + std::to_string(block);
            Var r = conv_in_act(prefix + ".a", h);
            r = conv2d(r, P(prefix + ".b.w"), P(prefix + ".b.b"));
            r = instance_norm(r, P(prefix + ".b.gamma"), P(prefix + ".b.beta"), config_.norm_eps);
            h = silu(add(h, r));
        }
        for (int level = config_.depth - 2; level >= 0; --level) {
            h = upsample_nearest2(h);
            h = concat_channels(h, skips[static_cast<size_t>(level)]);
            h = conv_in_act("dec" + std::to_string(level), h);
        }
        h = conv2d(h, P("head.w"), P("head.b"));
        return sigmoid(h);
    }

    /// Single-sample inference on an event tensor; flattens the polarity and
    /// time axes into network channels.
    IntensityImage reconstruct(const EventTensor& est) const {
        Var in = Var::constant(est.data.reshaped({1, est.data.dim(0) * est.data.dim(1),
                                                  est.data.dim(2), est.data.dim(3)}));
        const Var out = forward(in, /*with_grad=*/false);
        IntensityImage image;
        image.data = out.value().reshaped({out.value().dim(2), out.value().dim(3)});
        return image;
    }

    std::vector<NamedParam>& parameters() { return params_; }
    const std::vector<NamedParam>& parameters() const { return params_; }

    size_t parameter_count() const {
        size_t n = 0;
        for (const auto& p : params_) n += p.var.value().size();
        return n;
    }

    uint64_t checksum() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& p : params_) {
            h = fnv1a64(p.name, h);
            h = fnv1a64(p.var.value().data(), p.var.value().size() * sizeof(double), h);
        }
        return h;
    }

    void zero_grads() {
        for (auto& p : params_) p.var.zero_grad();
    }

private:
    int width_at(int level) const { return config_.base_width << level; }

    void add_conv(const std::string& prefix, int in_ch, int out_ch, Rng& rng) {
        // He-style fan-in scaling.
        const double stddev = std::sqrt(2.0 / (static_cast<double>(in_ch) * 9.0));
        Tensor w({static_cast<size_t>(out_ch), static_cast<size_t>(in_ch), 3, 3});
        for (size_t i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, stddev);
        params_.push_back({prefix + ".w", Var::param(std::move(w))});
        params_.push_back({prefix + ".b", Var::param(Tensor({static_cast<size_t>(out_ch)}, 0.0))});
    }

    void add_norm(const std::string& prefix, int channels) {
        params_.push_back({prefix + ".gamma", Var::param(Tensor({static_cast<size_t>(channels)}, 1.0))});
        params_.push_back({prefix + ".beta", Var::param(Tensor({static_cast<size_t>(channels)}, 0.0))});
    }

    const Var& find(const std::string& name) const {
        for (const auto& p : params_) {
            if (p.name == name) return p.var;
        }
        throw std::logic_error("ReconNet: unknown parameter " + name);
    }

    ReconNetConfig config_;
    std::vector<NamedParam> params_;
};

}  // namespace evrec
