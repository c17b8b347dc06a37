#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evrec/encoders.hpp"
#include "evrec/events.hpp"
#include "evrec/network.hpp"
#include "evrec/pipeline.hpp"
#include "evrec/png_io.hpp"
#include "evrec/representation.hpp"
#include "evrec/rng.hpp"

namespace evrec {

/// Synthetic 3-class event dataset for desk-scale experiments. Each class is
/// a distinct spatial pattern swept over time in a class-specific direction;
/// a fraction of samples carries heavy background noise so that reliability
/// filtering has something to filter.
struct SyntheticSpec {
    int sensor = 32;
    int train_per_class = 60;
    int test_per_class = 25;
    int unpaired_per_class = 8;
    double hard_fraction = 0.55;       // train split
    double test_hard_fraction = 0.2;   // test split
    double glitch_ratio_lo = 1.2;      // burst events per signal event
    double glitch_ratio_hi = 2.0;
    double hard_signal_scale = 0.8;    // pattern events kept in hard samples
    uint64_t seed = 11;
    int64_t duration_us = 100000;
};

namespace detail {

inline std::vector<std::pair<int, int>> pattern_pixels(int pattern, int sensor) {
    std::vector<std::pair<int, int>> pixels;
    const int c = sensor / 2;
    switch (pattern) {
        case 0: {  // filled disk
            const int r = sensor / 4;
            for (int y = 0; y < sensor; ++y)
                for (int x = 0; x < sensor; ++x)
                    if ((x - c) * (x - c) + (y - c) * (y - c) <= r * r) pixels.emplace_back(x, y);
            break;
        }
        case 1: {  // plus sign
            const int arm = sensor * 3 / 8;
            const int half_w = sensor / 8;
            for (int y = c - arm; y <= c + arm; ++y)
                for (int x = c - half_w; x < c + half_w; ++x) pixels.emplace_back(x, y);
            for (int x = c - arm; x <= c + arm; ++x)
                for (int y = c - half_w; y < c + half_w; ++y)
                    if (x < c - half_w || x >= c + half_w) pixels.emplace_back(x, y);
            break;
        }
        case 2: {  // three horizontal bars
            const int bar_h = sensor / 8;
            for (int k = 0; k < 3; ++k) {
                const int y0 = sensor / 6 + k * sensor / 3;
                for (int y = y0; y < y0 + bar_h; ++y)
                    for (int x = sensor / 6; x < sensor - sensor / 6; ++x) pixels.emplace_back(x, y);
            }
            break;
        }
        default:
            throw std::invalid_argument("pattern_pixels: unknown pattern " + std::to_string(pattern));
    }
    return pixels;
}

inline IntensityImage render_pattern(int pattern, int sensor, int dx, int dy, double noise,
                                     Rng& rng) {
    IntensityImage image;
    image.data = Tensor({static_cast<size_t>(sensor), static_cast<size_t>(sensor)}, 0.12);
    for (const auto& [x, y] : pattern_pixels(pattern, sensor)) {
        const int xx = x + dx, yy = y + dy;
        if (xx >= 0 && xx < sensor && yy >= 0 && yy < sensor) {
            image.data(static_cast<size_t>(yy), static_cast<size_t>(xx)) = 0.85;
        }
    }
    if (noise > 0.0) {
        for (size_t i = 0; i < image.data.size(); ++i) {
            image.data[i] = std::clamp(image.data[i] + rng.normal(0.0, noise), 0.0, 1.0);
        }
    }
    return image;
}

/// Sweep phase in [0, 1] for a pixel: each class moves in its own direction,
/// so the temporally reversed stream looks like the same shape swept the
/// opposite way.
inline double sweep_phase(int pattern, int x, int y, int sensor) {
    switch (pattern) {
        case 0: return static_cast<double>(x) / (sensor - 1);
        case 1: return static_cast<double>(y) / (sensor - 1);
        default: return static_cast<double>(sensor - 1 - x) / (sensor - 1);
    }
}

inline EventStream synth_stream(int pattern, const SyntheticSpec& spec, bool hard, Rng& rng) {
    const auto pixels = pattern_pixels(pattern, spec.sensor);
    const int dx = static_cast<int>(rng.uniform_int(7)) - 3;
    const int dy = static_cast<int>(rng.uniform_int(7)) - 3;
    size_t n_signal = 350 + rng.uniform_int(250);
    if (hard) {
        n_signal = static_cast<size_t>(spec.hard_signal_scale * static_cast<double>(n_signal));
    }
    EventStream stream;
    stream.sensor_width = spec.sensor;
    stream.sensor_height = spec.sensor;
    for (size_t i = 0; i < n_signal; ++i) {
        const auto& [px, py] = pixels[rng.uniform_int(pixels.size())];
        const int jx = static_cast<int>(rng.uniform_int(3)) - 1;
        const int jy = static_cast<int>(rng.uniform_int(3)) - 1;
        const int x = std::clamp(px + dx + jx, 0, spec.sensor - 1);
        const int y = std::clamp(py + dy + jy, 0, spec.sensor - 1);
        const double phase = 0.8 * sweep_phase(pattern, px, py, spec.sensor) + 0.2 * rng.uniform();
        Event e;
        e.x = x;
        e.y = y;
        e.t = static_cast<int64_t>(phase * static_cast<double>(spec.duration_us));
        e.p = rng.uniform() < 0.6 ? 1 : 0;
        stream.events.push_back(e);
    }
    if (hard) {
        // Burst glitch: a dense block of events in a fixed corner region,
        // confined to a short random time window. It shares the frame with a
        // real pattern, so its wrong pseudo-label interferes with the clean
        // samples of the same class; the random burst phase makes it
        // temporally asymmetric.
        const size_t n_glitch = static_cast<size_t>(
            rng.uniform(spec.glitch_ratio_lo, spec.glitch_ratio_hi) * static_cast<double>(n_signal));
        const int gx0 = 2 + static_cast<int>(rng.uniform_int(3));
        const int gy0 = 2 + static_cast<int>(rng.uniform_int(3));
        const int gsize = spec.sensor / 5;
        const double burst_center = rng.uniform(0.15, 0.85);
        const double burst_width = 0.08;
        for (size_t i = 0; i < n_glitch; ++i) {
            Event e;
            e.x = gx0 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(gsize)));
            e.y = gy0 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(gsize)));
            const double phase =
                std::clamp(burst_center + burst_width * (rng.uniform() - 0.5), 0.0, 1.0);
            e.t = static_cast<int64_t>(phase * static_cast<double>(spec.duration_us));
            e.p = rng.uniform() < 0.5 ? 1 : 0;
            stream.events.push_back(e);
        }
    }
    const size_t n_noise = static_cast<size_t>(
        rng.uniform(0.05, 0.15) * static_cast<double>(n_signal));
    for (size_t i = 0; i < n_noise; ++i) {
        Event e;
        e.x = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(spec.sensor)));
        e.y = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(spec.sensor)));
        e.t = static_cast<int64_t>(rng.uniform() * static_cast<double>(spec.duration_us));
        e.p = rng.uniform() < 0.5 ? 1 : 0;
        stream.events.push_back(e);
    }
    detail::sort_by_timestamp(stream.events);
    return stream;
}

}  // namespace detail

struct SyntheticMeta {
    std::vector<std::string> categories;  // index == pattern id
    double assignment_margin = 0.0;
    uint64_t seed = 0;
    std::string backend_id;
};

/// Choose which candidate name each pattern gets. Clean prototype streams
/// are pushed through the *initial* reconstruction network and embedded by
/// the frozen backend; the ordered name triple with the largest worst-case
/// margin against the text features wins. This is what makes the frozen
/// encoder "recognize" the synthetic world from step zero, the way a
/// pretrained encoder recognizes natural images.
inline SyntheticMeta assign_category_names(const SyntheticSpec& spec, const TrainConfig& config,
                                           EncoderBackend& backend) {
    static const std::vector<std::string> kNamePool = {
        "wheel", "cross", "ladder", "anchor", "kettle", "maple",
        "quartz", "violin", "walnut", "zephyr", "marble", "falcon"};

    ReconNet net(config.net_config(), config.seed);
    Tensor centroids({3, static_cast<size_t>(backend.dim())}, 0.0);
    for (int pattern = 0; pattern < 3; ++pattern) {
        Rng rng(hash_mix(spec.seed, 0xc1ea0 + static_cast<uint64_t>(pattern)));
        const int reps = 5;
        for (int r = 0; r < reps; ++r) {
            const EventStream stream = detail::synth_stream(pattern, spec, /*hard=*/false, rng);
            const EventTensor est = resize_tensor(
                build_est(stream, config.t_bins, spec.sensor, spec.sensor),
                config.resize, config.resize);
            const IntensityImage image = net.reconstruct(est);
            const Tensor v = backend.encode_image(image).value();
            for (int k = 0; k < backend.dim(); ++k) {
                centroids(static_cast<size_t>(pattern), static_cast<size_t>(k)) +=
                    v[static_cast<size_t>(k)] / reps;
            }
        }
    }
    const Tensor text = backend.encode_text(build_prompts(kNamePool, config.prompt_template));

    // Similarity of each pattern centroid to each candidate name.
    Tensor sim({3, kNamePool.size()}, 0.0);
    for (size_t p = 0; p < 3; ++p) {
        for (size_t n = 0; n < kNamePool.size(); ++n) {
            double s = 0.0;
            for (int k = 0; k < backend.dim(); ++k) {
                s += centroids(p, static_cast<size_t>(k)) * text(n, static_cast<size_t>(k));
            }
            sim(p, n) = s;
        }
    }
    double best_margin = -1e9;
    std::array<size_t, 3> best{0, 1, 2};
    for (size_t a = 0; a < kNamePool.size(); ++a) {
        for (size_t b = 0; b < kNamePool.size(); ++b) {
            for (size_t c = 0; c < kNamePool.size(); ++c) {
                if (a == b || b == c || a == c) continue;
                const std::array<size_t, 3> pick{a, b, c};
                double margin = 1e9;
                for (size_t p = 0; p < 3; ++p) {
                    double own = sim(p, pick[p]);
                    double other = -1e9;
                    for (size_t q = 0; q < 3; ++q) {
                        if (q != p) other = std::max(other, sim(p, pick[q]));
                    }
                    margin = std::min(margin, own - other);
                }
                if (margin > best_margin) {
                    best_margin = margin;
                    best = pick;
                }
            }
        }
    }
    backend.clear_text_call_log();
    SyntheticMeta meta;
    for (size_t p = 0; p < 3; ++p) meta.categories.push_back(kNamePool[best[p]]);
    meta.assignment_margin = best_margin;
    meta.seed = spec.seed;
    meta.backend_id = backend.identifier();
    return meta;
}

/// Generate the committed dataset: event files, manifest, unpaired images
/// and a meta.json describing the name assignment.
inline SyntheticMeta generate_synthetic_dataset(const SyntheticSpec& spec, const TrainConfig& config,
                                                const std::string& out_dir) {
    auto backend = make_backend(config.backend);
    const SyntheticMeta meta = assign_category_names(spec, config, *backend);

    const std::filesystem::path root(out_dir);
    std::filesystem::create_directories(root / "events");
    Manifest manifest;
    for (int pattern = 0; pattern < 3; ++pattern) {
        const std::string& category = meta.categories[static_cast<size_t>(pattern)];
        std::filesystem::create_directories(root / "unpaired" / category);
        Rng rng(hash_mix(spec.seed, 0xda7a + static_cast<uint64_t>(pattern)));
        const int total = spec.train_per_class + spec.test_per_class;
        for (int i = 0; i < total; ++i) {
            const bool is_train = i < spec.train_per_class;
            const bool hard =
                rng.uniform() < (is_train ? spec.hard_fraction : spec.test_hard_fraction);
            const EventStream stream = detail::synth_stream(pattern, spec, hard, rng);
            const std::string name = category + "_" + std::to_string(i) + ".bin";
            save_event_file((root / "events" / name).string(), stream);
            ManifestEntry entry;
            entry.relative_path = "events/" + name;
            entry.category = category;
            entry.split = is_train ? "train" : "test";
            manifest.entries.push_back(entry);
        }
        Rng img_rng(hash_mix(spec.seed, 0x1a6e + static_cast<uint64_t>(pattern)));
        for (int i = 0; i < spec.unpaired_per_class; ++i) {
            const int dx = static_cast<int>(img_rng.uniform_int(7)) - 3;
            const int dy = static_cast<int>(img_rng.uniform_int(7)) - 3;
            const IntensityImage image =
                detail::render_pattern(pattern, spec.sensor, dx, dy, 0.04, img_rng);
            write_image_png((root / "unpaired" / category
                             / ("img_" + std::to_string(i) + ".png")).string(), image);
        }
    }
    save_manifest((root / "manifest.csv").string(), manifest);

    nlohmann::json j;
    j["categories"] = meta.categories;
    j["assignment_margin"] = meta.assignment_margin;
    j["seed"] = meta.seed;
    j["backend"] = meta.backend_id;
    j["sensor"] = spec.sensor;
    j["train_per_class"] = spec.train_per_class;
    j["test_per_class"] = spec.test_per_class;
    j["unpaired_per_class"] = spec.unpaired_per_class;
    j["hard_fraction"] = spec.hard_fraction;
    j["test_hard_fraction"] = spec.test_hard_fraction;
    j["glitch_ratio"] = {spec.glitch_ratio_lo, spec.glitch_ratio_hi};
    j["hard_signal_scale"] = spec.hard_signal_scale;
    std::ofstream out(root / "meta.json", std::ios::trunc);
    out << j.dump(2) << "\n";
    return meta;
}

}  // namespace evrec
