#pragma once

#include <zlib.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evrec/encoders.hpp"
#include "evrec/events.hpp"
#include "evrec/network.hpp"
#include "evrec/objectives.hpp"
#include "evrec/prototypes.hpp"
#include "evrec/representation.hpp"
#include "evrec/sampling.hpp"

namespace evrec {

struct OptimizerSpec {
    std::string family = "lamb";  // "lamb" or "adam"
    double lr = 6e-3;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-6;
};

struct NetSpec {
    int base_width = 32;
    int depth = 3;
    int residual_blocks = 2;
};

struct TrainConfig {
    std::string manifest;
    std::string data_root;  // defaults to the manifest's directory
    std::string backend = "stub:seed=7";
    std::string mode = "text_prompt";  // or "visual_prototype"
    std::string prototype_bank;
    std::string prompt_template = "image of a [CLASS].";
    int batch_size = 32;
    int k = 6;
    int t_bins = 9;
    int resize = 224;
    int crop = 128;
    int sensor_width = 0;
    int sensor_height = 0;
    LossWeights weights;
    double temperature_pred = 100.0;
    double temperature_loss = 1.0;
    OptimizerSpec optimizer;
    NetSpec net;
    long steps = -1;
    long epochs = -1;
    long checkpoint_every = 0;  // 0 = final checkpoint only
    uint64_t seed = 1;
    bool use_ppi = true;
    bool use_trci = true;
    std::string out_dir = "run";

    void validate() const {
        if (manifest.empty()) throw std::invalid_argument("TrainConfig: manifest path required");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size < 1");
        if (k < 1 || k > batch_size) throw std::invalid_argument("TrainConfig: require 1 <= K <= batch_size");
        if (t_bins < 1) throw std::invalid_argument("TrainConfig: t_bins < 1");
        if (crop > resize || crop < 1) throw std::invalid_argument("TrainConfig: require 1 <= crop <= resize");
        if (sensor_width < 1 || sensor_height < 1) {
            throw std::invalid_argument("TrainConfig: sensor dimensions required");
        }
        if (mode != "text_prompt" && mode != "visual_prototype") {
            throw std::invalid_argument("TrainConfig: mode must be text_prompt or visual_prototype");
        }
        if (mode == "visual_prototype" && prototype_bank.empty()) {
            throw std::invalid_argument("TrainConfig: visual_prototype mode needs prototype_bank");
        }
        if (temperature_pred <= 0.0 || temperature_loss <= 0.0) {
            throw std::invalid_argument("TrainConfig: temperatures must be > 0");
        }
        if (optimizer.family != "lamb" && optimizer.family != "adam") {
            throw std::invalid_argument("TrainConfig: optimizer family must be lamb or adam");
        }
        if (steps < 0 && epochs < 0) {
            throw std::invalid_argument("TrainConfig: one of steps/epochs required");
        }
        weights.validate();
    }

    std::string resolved_data_root() const {
        if (!data_root.empty()) return data_root;
        return std::filesystem::path(manifest).parent_path().string();
    }

    ReconNetConfig net_config() const {
        ReconNetConfig c;
        c.input_channels = 2 * t_bins;
        c.base_width = net.base_width;
        c.depth = net.depth;
        c.residual_blocks = net.residual_blocks;
        return c;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["manifest"] = manifest;
        j["data_root"] = data_root;
        j["backend"] = backend;
        j["mode"] = mode;
        j["prototype_bank"] = prototype_bank;
        j["prompt_template"] = prompt_template;
        j["batch_size"] = batch_size;
        j["k"] = k;
        j["t_bins"] = t_bins;
        j["resize"] = resize;
        j["crop"] = crop;
        j["sensor_width"] = sensor_width;
        j["sensor_height"] = sensor_height;
        j["lambda_att"] = weights.lambda_att;
        j["lambda_rep"] = weights.lambda_rep;
        j["lambda_con"] = weights.lambda_con;
        j["temperature_pred"] = temperature_pred;
        j["temperature_loss"] = temperature_loss;
        j["optimizer"] = {{"family", optimizer.family}, {"lr", optimizer.lr},
                          {"weight_decay", optimizer.weight_decay}, {"beta1", optimizer.beta1},
                          {"beta2", optimizer.beta2}, {"eps", optimizer.eps}};
        j["net"] = {{"base_width", net.base_width}, {"depth", net.depth},
                    {"residual_blocks", net.residual_blocks}};
        j["steps"] = steps;
        j["epochs"] = epochs;
        j["checkpoint_every"] = checkpoint_every;
        j["seed"] = seed;
        j["use_ppi"] = use_ppi;
        j["use_trci"] = use_trci;
        j["out_dir"] = out_dir;
        return j;
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.manifest = j.value("manifest", c.manifest);
        c.data_root = j.value("data_root", c.data_root);
        c.backend = j.value("backend", c.backend);
        c.mode = j.value("mode", c.mode);
        c.prototype_bank = j.value("prototype_bank", c.prototype_bank);
        c.prompt_template = j.value("prompt_template", c.prompt_template);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.k = j.value("k", c.k);
        c.t_bins = j.value("t_bins", c.t_bins);
        c.resize = j.value("resize", c.resize);
        c.crop = j.value("crop", c.crop);
        c.sensor_width = j.value("sensor_width", c.sensor_width);
        c.sensor_height = j.value("sensor_height", c.sensor_height);
        c.weights.lambda_att = j.value("lambda_att", c.weights.lambda_att);
        c.weights.lambda_rep = j.value("lambda_rep", c.weights.lambda_rep);
        c.weights.lambda_con = j.value("lambda_con", c.weights.lambda_con);
        c.temperature_pred = j.value("temperature_pred", c.temperature_pred);
        c.temperature_loss = j.value("temperature_loss", c.temperature_loss);
        if (j.contains("optimizer")) {
            const auto& o = j.at("optimizer");
            c.optimizer.family = o.value("family", c.optimizer.family);
            c.optimizer.lr = o.value("lr", c.optimizer.lr);
            c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
            c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
            c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
            c.optimizer.eps = o.value("eps", c.optimizer.eps);
        }
        if (j.contains("net")) {
            const auto& n = j.at("net");
            c.net.base_width = n.value("base_width", c.net.base_width);
            c.net.depth = n.value("depth", c.net.depth);
            c.net.residual_blocks = n.value("residual_blocks", c.net.residual_blocks);
        }
        c.steps = j.value("steps", c.steps);
        c.epochs = j.value("epochs", c.epochs);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        c.seed = j.value("seed", c.seed);
        c.use_ppi = j.value("use_ppi", c.use_ppi);
        c.use_trci = j.value("use_trci", c.use_trci);
        c.out_dir = j.value("out_dir", c.out_dir);
        return c;
    }

    static TrainConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("TrainConfig::load: cannot open " + path);
        nlohmann::json j;
        in >> j;
        return from_json(j);
    }

    std::string fingerprint() const {
        const std::string text = to_json().dump();
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(fnv1a64(text)));
        return std::string(buf);
    }

    long resolved_steps(size_t n_train) const {
        if (steps >= 0) return steps;
        const long per_epoch = static_cast<long>(n_train) / batch_size;
        return epochs * std::max<long>(1, per_epoch);
    }
};

/// Adam-style moments; LAMB additionally rescales each parameter tensor's
/// update by the trust ratio |w| / |update|.
class Optimizer {
public:
    Optimizer() = default;
    explicit Optimizer(const OptimizerSpec& spec) : spec_(spec) {}

    const OptimizerSpec& spec() const { return spec_; }
    uint64_t steps_taken() const { return t_; }

    void step(std::vector<ReconNet::NamedParam>& params) {
        ensure_state(params);
        ++t_;
        const double bc1 = 1.0 - std::pow(spec_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(spec_.beta2, static_cast<double>(t_));
        for (size_t p = 0; p < params.size(); ++p) {
            Tensor& w = params[p].var.mutable_value();
            const Tensor& g = params[p].var.grad();
            if (g.size() != w.size()) continue;  // no gradient reached this tensor
            Tensor& m = m_[p];
            Tensor& v = v_[p];
            Tensor update(w.shape(), 0.0);
            for (size_t i = 0; i < w.size(); ++i) {
                m[i] = spec_.beta1 * m[i] + (1.0 - spec_.beta1) * g[i];
                v[i] = spec_.beta2 * v[i] + (1.0 - spec_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                update[i] = mhat / (std::sqrt(vhat) + spec_.eps) + spec_.weight_decay * w[i];
            }
            double scale = spec_.lr;
            if (spec_.family == "lamb") {
                const double wn = l2_norm(w);
                const double un = l2_norm(update);
                if (wn > 0.0 && un > 0.0) scale *= wn / un;
            }
            for (size_t i = 0; i < w.size(); ++i) w[i] -= scale * update[i];
        }
    }

    std::vector<Tensor>& moment1() { return m_; }
    std::vector<Tensor>& moment2() { return v_; }
    const std::vector<Tensor>& moment1() const { return m_; }
    const std::vector<Tensor>& moment2() const { return v_; }
    void set_steps_taken(uint64_t t) { t_ = t; }

    void ensure_state(const std::vector<ReconNet::NamedParam>& params) {
        if (m_.size() == params.size()) return;
        m_.clear();
        v_.clear();
        for (const auto& p : params) {
            m_.push_back(Tensor(p.var.value().shape(), 0.0));
            v_.push_back(Tensor(p.var.value().shape(), 0.0));
        }
    }

private:
    OptimizerSpec spec_;
    std::vector<Tensor> m_, v_;
    uint64_t t_ = 0;
};

/// Everything observed in one training step; dumped as JSON when a loss goes
/// non-finite.
struct BatchState {
    Tensor global_recon;      // (B, 1, R, R)
    Tensor local_recon;       // (B, 1, S, S), empty when the consistency term is off
    Tensor visual;            // (B, D)
    Tensor visual_reversed;   // (B, D), empty when TRCI is off
    Tensor probabilities;     // (B, C)
    std::vector<size_t> pseudo;
    std::vector<size_t> pseudo_reversed;
    std::vector<double> max_probs;
    std::vector<CropRect> rects;
    ReliabilitySets sets;
    double att = 0.0, rep = 0.0, con = 0.0, total = 0.0;
    bool attraction_skipped = false;
    bool updated = false;

    double pseudo_entropy() const {
        std::map<size_t, size_t> hist;
        for (size_t c : pseudo) ++hist[c];
        double h = 0.0;
        const double n = static_cast<double>(pseudo.size());
        for (const auto& [label, count] : hist) {
            const double f = static_cast<double>(count) / n;
            h -= f * std::log(f);
        }
        return h;
    }

    nlohmann::json dump_json() const {
        nlohmann::json j;
        j["pseudo"] = pseudo;
        j["pseudo_reversed"] = pseudo_reversed;
        j["max_probs"] = max_probs;
        j["s_ppi"] = sets.s_ppi;
        j["s_trci"] = sets.s_trci;
        j["s_rds"] = sets.s_rds;
        j["att"] = att;
        j["rep"] = rep;
        j["con"] = con;
        j["total"] = total;
        j["attraction_skipped"] = attraction_skipped;
        return j;
    }
};

namespace detail {

/// Flatten (2, T, H, W) planes into network channels (2T, H, W).
inline Tensor est_to_channels(const EventTensor& est) {
    return est.data.reshaped({est.data.dim(0) * est.data.dim(1), est.data.dim(2), est.data.dim(3)});
}

inline Tensor stack_samples(const std::vector<Tensor>& chw) {
    const size_t batch = chw.size();
    const size_t c = chw.front().dim(0), h = chw.front().dim(1), w = chw.front().dim(2);
    Tensor out({batch, c, h, w}, 0.0);
    for (size_t n = 0; n < batch; ++n) {
        std::copy_n(chw[n].data(), c * h * w, out.data() + n * c * h * w);
    }
    return out;
}

inline Tensor crop_chw(const Tensor& chw, const CropRect& rect) {
    const size_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    const size_t s = static_cast<size_t>(rect.size);
    (void)h;
    Tensor out({c, s, s}, 0.0);
    for (size_t cc = 0; cc < c; ++cc) {
        for (size_t y = 0; y < s; ++y) {
            std::copy_n(chw.data() + (cc * chw.dim(1) + rect.top + y) * w + rect.left, s,
                        out.data() + (cc * s + y) * s);
        }
    }
    return out;
}

}  // namespace detail

/// One optimization step over a prepared batch. `est_global` holds the
/// resized per-sample event tensors as network channels; `est_reversed` the
/// temporally reversed branch (may be null when TRCI is off).
inline BatchState train_step_prepared(ReconNet& net, Optimizer& optimizer,
                                      const Tensor& est_global, const Tensor* est_reversed,
                                      const Tensor& text_features, const PrototypeBank* bank,
                                      const std::vector<std::string>& categories,
                                      const TrainConfig& config, Rng& step_rng,
                                      EncoderBackend& backend) {
    const size_t batch = est_global.dim(0);
    BatchState state;

    // (1)-(2) global reconstruction, encoding and pseudo-labels (labels carry
    // no gradient).
    Var global = net.forward(Var::constant(est_global), /*with_grad=*/true);
    Var visual = backend.encode_images(global);
    state.global_recon = global.value();
    state.visual = visual.value();
    state.probabilities = class_probabilities_batch(visual.value(), text_features,
                                                    config.temperature_pred);
    const size_t classes = text_features.dim(0);
    state.pseudo.resize(batch);
    state.max_probs.resize(batch);
    for (size_t i = 0; i < batch; ++i) {
        size_t best = 0;
        for (size_t c = 1; c < classes; ++c) {
            if (state.probabilities(i, c) > state.probabilities(i, best)) best = c;
        }
        state.pseudo[i] = best;
        state.max_probs[i] = state.probabilities(i, best);
    }

    // (3) reversed branch, fully gradient-free.
    if (config.use_trci && est_reversed) {
        Var global_rev = net.forward(Var::constant(*est_reversed), /*with_grad=*/false);
        Var visual_rev = backend.encode_images(global_rev);
        state.visual_reversed = visual_rev.value();
        const Tensor probs_rev = class_probabilities_batch(visual_rev.value(), text_features,
                                                           config.temperature_pred);
        state.pseudo_reversed.resize(batch);
        for (size_t i = 0; i < batch; ++i) {
            size_t best = 0;
            for (size_t c = 1; c < classes; ++c) {
                if (probs_rev(i, c) > probs_rev(i, best)) best = c;
            }
            state.pseudo_reversed[i] = best;
        }
    } else {
        state.pseudo_reversed = state.pseudo;  // TRCI disabled: every sample passes
    }

    // (4) reliability sets.
    const size_t k_effective = config.use_ppi ? static_cast<size_t>(config.k) : batch;
    state.sets = make_reliability_sets(state.max_probs, state.pseudo, state.pseudo_reversed,
                                       k_effective);

    std::vector<Var> terms;
    std::vector<double> term_weights;

    // (5) shared-rect local reconstruction and consistency.
    Var con_var;
    if (config.weights.lambda_con > 0.0) {
        state.rects.reserve(batch);
        for (size_t i = 0; i < batch; ++i) {
            state.rects.push_back(sample_crop_rect(step_rng, config.resize, config.crop));
        }
        std::vector<Tensor> local_inputs;
        local_inputs.reserve(batch);
        for (size_t i = 0; i < batch; ++i) {
            Tensor chw({est_global.dim(1), est_global.dim(2), est_global.dim(3)}, 0.0);
            std::copy_n(est_global.data() + i * chw.size(), chw.size(), chw.data());
            local_inputs.push_back(detail::crop_chw(chw, state.rects[i]));
        }
        Var local = net.forward(Var::constant(detail::stack_samples(local_inputs)), true);
        state.local_recon = local.value();
        con_var = consistency_loss_batch(local, global, state.rects);
        state.con = con_var.scalar();
        terms.push_back(con_var);
        term_weights.push_back(config.weights.lambda_con);
    }

    // (6) attraction over the reliable set, repulsion over the full batch.
    if (config.weights.lambda_att > 0.0) {
        Var att_var;
        if (config.mode == "visual_prototype") {
            att_var = prototype_attraction_loss(visual, *bank, state.pseudo, categories,
                                                state.sets.s_rds, config.temperature_loss,
                                                &state.attraction_skipped);
        } else {
            std::vector<size_t> labels = state.pseudo;
            att_var = attraction_loss(visual, text_features, labels, state.sets.s_rds,
                                      config.temperature_loss, &state.attraction_skipped);
        }
        state.att = att_var.scalar();
        if (state.sets.s_rds.size() > 1) {
            terms.push_back(att_var);
            term_weights.push_back(config.weights.lambda_att);
        }
    }
    if (config.weights.lambda_rep > 0.0) {
        Var rep_var = repulsion_loss(visual, config.temperature_loss);
        state.rep = rep_var.scalar();
        terms.push_back(rep_var);
        term_weights.push_back(config.weights.lambda_rep);
    }

    state.total = total_loss(state.att, state.rep, state.con, config.weights);
    if (!std::isfinite(state.total)) {
        throw std::runtime_error("train_step: non-finite loss");
    }

    // (7) one update of G only; a step with no active terms leaves the
    // parameters untouched.
    if (!terms.empty()) {
        Var total = mul_scalar(terms[0], term_weights[0]);
        for (size_t i = 1; i < terms.size(); ++i) {
            total = add(total, mul_scalar(terms[i], term_weights[i]));
        }
        backward(total);
        optimizer.step(net.parameters());
        net.zero_grads();
        state.updated = true;
    }
    return state;
}

/// Spec-shaped step: builds the event tensors from raw streams, then runs
/// the prepared-step path.
inline BatchState train_step(ReconNet& net, Optimizer& optimizer,
                             const std::vector<EventStream>& batch_streams,
                             const Tensor& text_features, const PrototypeBank* bank,
                             const std::vector<std::string>& categories,
                             const TrainConfig& config, Rng& step_rng, EncoderBackend& backend) {
    std::vector<Tensor> global_chw, reversed_chw;
    for (const auto& stream : batch_streams) {
        const EventTensor est = resize_tensor(
            build_est(stream, config.t_bins, config.sensor_height, config.sensor_width),
            config.resize, config.resize);
        global_chw.push_back(detail::est_to_channels(est));
        if (config.use_trci) {
            const EventTensor est_rev = resize_tensor(
                build_est(reverse_time(stream), config.t_bins, config.sensor_height,
                          config.sensor_width),
                config.resize, config.resize);
            reversed_chw.push_back(detail::est_to_channels(est_rev));
        }
    }
    const Tensor est_global = detail::stack_samples(global_chw);
    Tensor est_reversed;
    if (config.use_trci) est_reversed = detail::stack_samples(reversed_chw);
    return train_step_prepared(net, optimizer, est_global,
                               config.use_trci ? &est_reversed : nullptr, text_features, bank,
                               categories, config, step_rng, backend);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
    TrainConfig config;
    ReconNet net;
    Optimizer optimizer;
    uint64_t step = 0;
    std::array<uint64_t, 4> rng_state{};
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    nlohmann::json header;
    header["format_version"] = 1;
    header["step"] = ckpt.step;
    header["config"] = ckpt.config.to_json();
    header["optimizer_steps"] = ckpt.optimizer.steps_taken();
    header["rng_state"] = ckpt.rng_state;
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : ckpt.net.parameters()) {
        params.push_back({{"name", p.name}, {"shape", p.var.value().shape()}});
    }
    header["params"] = params;
    const std::string header_text = header.dump();

    std::vector<double> payload;
    for (const auto& p : ckpt.net.parameters()) {
        payload.insert(payload.end(), p.var.value().data(),
                       p.var.value().data() + p.var.value().size());
    }
    for (const auto& m : ckpt.optimizer.moment1()) {
        payload.insert(payload.end(), m.data(), m.data() + m.size());
    }
    for (const auto& v : ckpt.optimizer.moment2()) {
        payload.insert(payload.end(), v.data(), v.data() + v.size());
    }
    const uint32_t crc = static_cast<uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(payload.data()),
                static_cast<uInt>(payload.size() * sizeof(double))));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    const char magic[8] = {'E', 'V', 'R', 'E', 'C', 'K', 'P', 'T'};
    const uint32_t version = 1;
    const uint64_t header_len = header_text.size();
    const uint64_t payload_len = payload.size() * sizeof(double);
    out.write(magic, 8);
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    out.write(reinterpret_cast<const char*>(&payload_len), sizeof(payload_len));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload_len));
    out.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8] = {};
    uint32_t version = 0;
    in.read(magic, 8);
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (!in || std::string(magic, 8) != "EVRECKPT") {
        throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint file");
    }
    if (version != 1) {
        throw std::runtime_error("load_checkpoint: incompatible checkpoint version "
                                 + std::to_string(version) + " (expected 1)");
    }
    uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_len));
    uint64_t payload_len = 0;
    in.read(reinterpret_cast<char*>(&payload_len), sizeof(payload_len));
    if (!in || payload_len % sizeof(double)) {
        throw std::runtime_error("load_checkpoint: malformed payload in " + path);
    }
    std::vector<double> payload(payload_len / sizeof(double));
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload_len));
    uint32_t crc_stored = 0;
    in.read(reinterpret_cast<char*>(&crc_stored), sizeof(crc_stored));
    if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path);
    const uint32_t crc = static_cast<uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload_len)));
    if (crc != crc_stored) {
        throw std::runtime_error("load_checkpoint: integrity check failed for " + path);
    }

    const nlohmann::json header = nlohmann::json::parse(header_text);
    Checkpoint ckpt;
    ckpt.config = TrainConfig::from_json(header.at("config"));
    ckpt.step = header.at("step").get<uint64_t>();
    const auto rng = header.at("rng_state").get<std::vector<uint64_t>>();
    std::copy_n(rng.begin(), 4, ckpt.rng_state.begin());

    ckpt.net = ReconNet(ckpt.config.net_config(), ckpt.config.seed);
    auto& params = ckpt.net.parameters();
    const auto& header_params = header.at("params");
    if (header_params.size() != params.size()) {
        throw std::runtime_error("load_checkpoint: parameter table mismatch in " + path);
    }
    size_t offset = 0;
    for (size_t i = 0; i < params.size(); ++i) {
        if (header_params[i].at("name").get<std::string>() != params[i].name) {
            throw std::runtime_error("load_checkpoint: parameter name mismatch at index "
                                     + std::to_string(i));
        }
        Tensor& w = params[i].var.mutable_value();
        std::copy_n(payload.data() + offset, w.size(), w.data());
        offset += w.size();
    }
    ckpt.optimizer = Optimizer(ckpt.config.optimizer);
    ckpt.optimizer.ensure_state(params);
    ckpt.optimizer.set_steps_taken(header.at("optimizer_steps").get<uint64_t>());
    if (offset < payload.size()) {
        // Moments are present; a params-only payload leaves them zeroed.
        for (auto& m : ckpt.optimizer.moment1()) {
            std::copy_n(payload.data() + offset, m.size(), m.data());
            offset += m.size();
        }
        for (auto& v : ckpt.optimizer.moment2()) {
            std::copy_n(payload.data() + offset, v.size(), v.data());
            offset += v.size();
        }
    }
    if (offset != payload.size()) {
        throw std::runtime_error("load_checkpoint: payload size mismatch in " + path);
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// In-memory training dataset: preloaded streams and their prepared event
/// tensors (the per-sample tensors are pure functions of the stream and the
/// representation config, so they are built once).
struct PreparedDataset {
    std::vector<std::string> categories;
    std::vector<EventStream> streams;
    std::vector<Tensor> est;           // (2T, R, R) per sample
    std::vector<Tensor> est_reversed;  // empty when TRCI is off
};

inline PreparedDataset prepare_training_data(const TrainConfig& config, const Manifest& manifest) {
    PreparedDataset data;
    data.categories = manifest.categories("train");
    const std::string root = config.resolved_data_root();
    for (const auto& entry : manifest.split_entries("train")) {
        const std::string path = (std::filesystem::path(root) / entry.relative_path).string();
        EventStream stream = load_event_file(path, config.sensor_width, config.sensor_height);
        const EventTensor est = resize_tensor(
            build_est(stream, config.t_bins, config.sensor_height, config.sensor_width),
            config.resize, config.resize);
        data.est.push_back(detail::est_to_channels(est));
        if (config.use_trci) {
            const EventTensor est_rev = resize_tensor(
                build_est(reverse_time(stream), config.t_bins, config.sensor_height,
                          config.sensor_width),
                config.resize, config.resize);
            data.est_reversed.push_back(detail::est_to_channels(est_rev));
        }
        data.streams.push_back(std::move(stream));
    }
    if (data.streams.empty()) {
        throw std::runtime_error("prepare_training_data: manifest has no train entries");
    }
    return data;
}

struct TrainResult {
    std::string final_checkpoint;
    std::string metrics_log;
    std::string reliability_log;
    std::vector<std::string> checkpoints;
};

/// Full training run. The trajectory is a pure function of (config, data):
/// epoch shuffles and per-step randomness are derived from the seed, so a
/// resumed run reproduces the uninterrupted one exactly.
inline TrainResult train(const TrainConfig& config, const std::string& resume_from = "") {
    config.validate();
    const Manifest manifest = load_manifest(config.manifest);
    PreparedDataset data = prepare_training_data(config, manifest);

    auto backend = make_backend(config.backend);
    const Tensor text_features =
        backend->encode_text(build_prompts(data.categories, config.prompt_template));

    PrototypeBank bank;
    const PrototypeBank* bank_ptr = nullptr;
    if (config.mode == "visual_prototype") {
        bank = load_bank(config.prototype_bank);
        for (const auto& category : data.categories) {
            if (!bank.covers(category)) {
                throw std::runtime_error("train: prototype bank missing category \"" + category + "\"");
            }
        }
        bank_ptr = &bank;
    }

    ReconNet net(config.net_config(), config.seed);
    Optimizer optimizer(config.optimizer);
    optimizer.ensure_state(net.parameters());
    uint64_t start_step = 0;
    if (!resume_from.empty()) {
        Checkpoint ckpt = load_checkpoint(resume_from);
        if (ckpt.config.t_bins != config.t_bins) {
            throw std::runtime_error("train: checkpoint has " + std::to_string(2 * ckpt.config.t_bins)
                                     + " input channels, config expects "
                                     + std::to_string(2 * config.t_bins));
        }
        net = std::move(ckpt.net);
        optimizer = std::move(ckpt.optimizer);
        start_step = ckpt.step;
    }

    std::filesystem::create_directories(config.out_dir);
    std::filesystem::create_directories(std::filesystem::path(config.out_dir) / "checkpoints");
    {
        std::ofstream cfg_out(std::filesystem::path(config.out_dir) / "config.json");
        cfg_out << config.to_json().dump(2) << "\n";
    }
    const std::string metrics_path = (std::filesystem::path(config.out_dir) / "metrics.jsonl").string();
    const std::string reliability_path =
        (std::filesystem::path(config.out_dir) / "reliability.jsonl").string();
    std::ofstream metrics(metrics_path, start_step ? std::ios::app : std::ios::trunc);
    std::ofstream reliability(reliability_path, start_step ? std::ios::app : std::ios::trunc);

    const long total_steps = config.resolved_steps(data.streams.size());
    const size_t batch = static_cast<size_t>(config.batch_size);
    const size_t batches_per_epoch = std::max<size_t>(1, data.streams.size() / batch);

    TrainResult result;
    std::vector<size_t> order(data.streams.size());
    Rng main_rng(config.seed);

    for (long step = static_cast<long>(start_step); step < total_steps; ++step) {
        const size_t epoch = static_cast<size_t>(step) / batches_per_epoch;
        const size_t slot = static_cast<size_t>(step) % batches_per_epoch;
        if (slot == 0 || order.empty()) {
            order.resize(data.streams.size());
            for (size_t i = 0; i < order.size(); ++i) order[i] = i;
            Rng epoch_rng(hash_mix(config.seed, 0xe90c + epoch));
            epoch_rng.shuffle(order);
        }
        // Wrap around when the dataset is smaller than a batch.
        std::vector<size_t> index_set(batch);
        for (size_t i = 0; i < batch; ++i) {
            index_set[i] = order[(slot * batch + i) % order.size()];
        }
        std::vector<Tensor> global_chw, reversed_chw;
        for (size_t i : index_set) {
            global_chw.push_back(data.est[i]);
            if (config.use_trci) reversed_chw.push_back(data.est_reversed[i]);
        }
        const Tensor est_global = detail::stack_samples(global_chw);
        Tensor est_reversed;
        if (config.use_trci) est_reversed = detail::stack_samples(reversed_chw);

        Rng step_rng(hash_mix(config.seed, 0x57e9 + static_cast<uint64_t>(step)));
        BatchState state;
        try {
            state = train_step_prepared(net, optimizer, est_global,
                                        config.use_trci ? &est_reversed : nullptr, text_features,
                                        bank_ptr, data.categories, config, step_rng, *backend);
        } catch (const std::exception& err) {
            std::ofstream dump(std::filesystem::path(config.out_dir) / "batch_state_dump.json");
            nlohmann::json j;
            j["step"] = step;
            j["error"] = err.what();
            j["indices"] = index_set;
            dump << j.dump(2) << "\n";
            throw;
        }

        nlohmann::json m;
        m["step"] = step;
        m["att"] = state.att;
        m["rep"] = state.rep;
        m["con"] = state.con;
        m["total"] = state.total;
        m["rds"] = state.sets.s_rds.size();
        m["pseudo_entropy"] = state.pseudo_entropy();
        metrics << m.dump() << "\n";

        nlohmann::json r;
        r["step"] = step;
        r["ppi"] = state.sets.s_ppi.size();
        r["trci"] = state.sets.s_trci.size();
        r["rds"] = state.sets.s_rds.size();
        r["indices"] = {{"ppi", state.sets.s_ppi}, {"trci", state.sets.s_trci},
                        {"rds", state.sets.s_rds}};
        reliability << r.dump() << "\n";

        if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0
            && step + 1 < total_steps) {
            Checkpoint ckpt{config, std::move(net), std::move(optimizer),
                            static_cast<uint64_t>(step + 1), main_rng.state()};
            const std::string path = (std::filesystem::path(config.out_dir) / "checkpoints"
                                      / ("step_" + std::to_string(step + 1) + ".ckpt")).string();
            save_checkpoint(path, ckpt);
            result.checkpoints.push_back(path);
            net = std::move(ckpt.net);
            optimizer = std::move(ckpt.optimizer);
        }
    }

    Checkpoint final_ckpt{config, std::move(net), std::move(optimizer),
                          static_cast<uint64_t>(total_steps), main_rng.state()};
    const std::string final_path =
        (std::filesystem::path(config.out_dir) / "checkpoints" / "final.ckpt").string();
    save_checkpoint(final_path, final_ckpt);
    result.checkpoints.push_back(final_path);
    result.final_checkpoint = final_path;
    result.metrics_log = metrics_path;
    result.reliability_log = reliability_path;
    return result;
}

}  // namespace evrec
