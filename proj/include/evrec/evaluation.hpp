#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evrec/encoders.hpp"
#include "evrec/events.hpp"
#include "evrec/pipeline.hpp"
#include "evrec/png_io.hpp"

namespace evrec {

struct EvalReport {
    std::string protocol;
    std::vector<std::string> prompt_categories;  // prediction is an index into this list
    std::vector<std::string> true_categories;
    std::map<std::string, double> per_category_accuracy;
    size_t correct = 0;
    size_t total = 0;
    double overall = 0.0;
    std::vector<std::vector<size_t>> confusion;  // true x predicted (prompt set)
    std::string config_fingerprint;
    double runtime_seconds = 0.0;
    // Reserved image-quality metrics; populated only by metric plugins.
    std::optional<double> fid;
    std::optional<double> inception_score;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["protocol"] = protocol;
        j["prompt_categories"] = prompt_categories;
        j["true_categories"] = true_categories;
        j["per_category_accuracy"] = per_category_accuracy;
        j["correct"] = correct;
        j["total"] = total;
        j["overall_accuracy"] = overall;
        j["confusion"] = confusion;
        j["config_fingerprint"] = config_fingerprint;
        j["runtime_seconds"] = runtime_seconds;
        if (fid) j["fid"] = *fid;
        if (inception_score) j["inception_score"] = *inception_score;
        return j;
    }
};

/// Hook for optional external metrics (FID / inception score need a
/// pretrained classifier that this build does not ship).
using MetricPlugin = std::function<void(EvalReport&)>;

namespace detail {

struct EvalSample {
    std::string path;
    std::string category;
};

inline EvalReport run_protocol(const std::string& protocol, const Checkpoint& ckpt,
                               const std::vector<EvalSample>& samples,
                               const std::vector<std::string>& prompt_categories,
                               const std::vector<std::string>& true_categories,
                               EncoderBackend& backend,
                               const std::vector<MetricPlugin>& plugins) {
    const auto started = std::chrono::steady_clock::now();
    EvalReport report;
    report.protocol = protocol;
    report.prompt_categories = prompt_categories;
    report.true_categories = true_categories;
    report.config_fingerprint = ckpt.config.fingerprint();

    std::map<std::string, size_t> true_index;
    for (size_t i = 0; i < true_categories.size(); ++i) true_index[true_categories[i]] = i;
    std::vector<std::string> unknown;
    for (const auto& s : samples) {
        if (!true_index.count(s.category)) unknown.push_back(s.category);
    }
    if (!unknown.empty()) {
        std::string list;
        for (const auto& u : unknown) list += (list.empty() ? "" : ", ") + u;
        throw std::runtime_error(protocol + ": sample categories not in the category list: " + list);
    }

    const Tensor text_features =
        backend.encode_text(build_prompts(prompt_categories, ckpt.config.prompt_template));

    report.confusion.assign(true_categories.size(),
                            std::vector<size_t>(prompt_categories.size(), 0));
    std::map<std::string, size_t> per_cat_total, per_cat_correct;
    for (const auto& sample : samples) {
        const EventStream stream =
            load_event_file(sample.path, ckpt.config.sensor_width, ckpt.config.sensor_height);
        const EventTensor est = resize_tensor(
            build_est(stream, ckpt.config.t_bins, ckpt.config.sensor_height,
                      ckpt.config.sensor_width),
            ckpt.config.resize, ckpt.config.resize);
        const IntensityImage image = ckpt.net.reconstruct(est);
        const Tensor v = backend.encode_image(image).value().reshaped(
            {static_cast<size_t>(backend.dim())});
        const Tensor probs = class_probabilities(v, text_features, ckpt.config.temperature_pred);
        const size_t predicted = predict(probs);
        const size_t truth = true_index.at(sample.category);
        report.confusion[truth][predicted] += 1;
        per_cat_total[sample.category] += 1;
        const bool correct = predicted < true_categories.size()
                             && prompt_categories[predicted] == sample.category;
        if (correct) {
            per_cat_correct[sample.category] += 1;
            report.correct += 1;
        }
        report.total += 1;
    }
    for (const auto& [category, count] : per_cat_total) {
        report.per_category_accuracy[category] =
            static_cast<double>(per_cat_correct[category]) / static_cast<double>(count);
    }
    report.overall = report.total
                         ? static_cast<double>(report.correct) / static_cast<double>(report.total)
                         : 0.0;
    report.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    for (const auto& plugin : plugins) plugin(report);
    return report;
}

inline std::vector<EvalSample> test_samples(const Manifest& manifest, const std::string& data_root,
                                            const std::set<std::string>* category_filter = nullptr) {
    std::vector<EvalSample> samples;
    for (const auto& entry : manifest.split_entries("test")) {
        if (category_filter && !category_filter->count(entry.category)) continue;
        samples.push_back({(std::filesystem::path(data_root) / entry.relative_path).string(),
                           entry.category});
    }
    return samples;
}

}  // namespace detail

/// Standard protocol: top-1 accuracy over the manifest's test split. Ground
/// truth labels enter the toolkit only here.
inline EvalReport evaluate(const Checkpoint& ckpt, const Manifest& manifest,
                           const std::string& data_root,
                           const std::vector<std::string>& categories, EncoderBackend& backend,
                           const std::vector<MetricPlugin>& plugins = {}) {
    return detail::run_protocol("standard", ckpt, detail::test_samples(manifest, data_root),
                                categories, categories, backend, plugins);
}

/// Zero-shot protocol: text features are built for the unseen test
/// categories only; training categories are never encoded.
inline EvalReport zero_shot_eval(const Checkpoint& ckpt, const Manifest& manifest,
                                 const std::string& data_root,
                                 const std::vector<std::string>& train_categories,
                                 const std::vector<std::string>& test_categories,
                                 EncoderBackend& backend,
                                 const std::vector<MetricPlugin>& plugins = {}) {
    std::set<std::string> train_set(train_categories.begin(), train_categories.end());
    std::vector<std::string> overlap;
    for (const auto& c : test_categories) {
        if (train_set.count(c)) overlap.push_back(c);
    }
    if (!overlap.empty()) {
        std::string list;
        for (const auto& c : overlap) list += (list.empty() ? "" : ", ") + c;
        throw std::runtime_error("zero_shot_eval: train/test categories overlap: " + list);
    }
    const std::set<std::string> test_set(test_categories.begin(), test_categories.end());
    return detail::run_protocol("zero_shot", ckpt,
                                detail::test_samples(manifest, data_root, &test_set),
                                test_categories, test_categories, backend, plugins);
}

/// Superset protocol: prediction runs over true categories plus extra
/// distractor prompts; predicting any extra counts as wrong.
inline EvalReport superset_eval(const Checkpoint& ckpt, const Manifest& manifest,
                                const std::string& data_root,
                                const std::vector<std::string>& true_categories,
                                const std::vector<std::string>& extra_categories,
                                EncoderBackend& backend,
                                const std::vector<MetricPlugin>& plugins = {}) {
    std::set<std::string> true_set(true_categories.begin(), true_categories.end());
    std::vector<std::string> overlap;
    for (const auto& c : extra_categories) {
        if (true_set.count(c)) overlap.push_back(c);
    }
    if (!overlap.empty()) {
        std::string list;
        for (const auto& c : overlap) list += (list.empty() ? "" : ", ") + c;
        throw std::runtime_error("superset_eval: extras duplicate true categories: " + list);
    }
    std::vector<std::string> prompt_set = true_categories;
    prompt_set.insert(prompt_set.end(), extra_categories.begin(), extra_categories.end());
    EvalReport report = detail::run_protocol("superset", ckpt,
                                             detail::test_samples(manifest, data_root),
                                             prompt_set, true_categories, backend, plugins);
    return report;
}

/// Pseudo-label histogram over the train split with the checkpointed
/// network; the max fraction is the collapse indicator.
inline double max_pseudo_label_fraction(const Checkpoint& ckpt, const Manifest& manifest,
                                        const std::string& data_root,
                                        const std::vector<std::string>& categories,
                                        EncoderBackend& backend) {
    const Tensor text_features =
        backend.encode_text(build_prompts(categories, ckpt.config.prompt_template));
    std::vector<size_t> histogram(categories.size(), 0);
    size_t total = 0;
    for (const auto& entry : manifest.split_entries("train")) {
        const std::string path = (std::filesystem::path(data_root) / entry.relative_path).string();
        const EventStream stream =
            load_event_file(path, ckpt.config.sensor_width, ckpt.config.sensor_height);
        const EventTensor est = resize_tensor(
            build_est(stream, ckpt.config.t_bins, ckpt.config.sensor_height,
                      ckpt.config.sensor_width),
            ckpt.config.resize, ckpt.config.resize);
        const IntensityImage image = ckpt.net.reconstruct(est);
        const Tensor v = backend.encode_image(image).value().reshaped(
            {static_cast<size_t>(backend.dim())});
        const Tensor probs = class_probabilities(v, text_features, ckpt.config.temperature_pred);
        histogram[predict(probs)] += 1;
        ++total;
    }
    size_t max_count = 0;
    for (size_t c : histogram) max_count = std::max(max_count, c);
    return total ? static_cast<double>(max_count) / static_cast<double>(total) : 0.0;
}

// ---------------------------------------------------------------------------
// Sweeps and ablations
// ---------------------------------------------------------------------------

struct SweepRow {
    double x = 0.0;
    double accuracy = 0.0;
    double mean_rds = 0.0;
};

struct SweepTable {
    std::string name;
    std::string x_label;
    std::vector<SweepRow> rows;
};

namespace detail {

inline double mean_rds_from_log(const std::string& reliability_log) {
    std::ifstream in(reliability_log);
    std::string line;
    double total = 0.0;
    size_t lines = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        total += j.value("rds", 0.0);
        ++lines;
    }
    return lines ? total / static_cast<double>(lines) : 0.0;
}

inline double train_and_evaluate(const TrainConfig& config, EncoderBackend& backend,
                                 double* mean_rds = nullptr) {
    const TrainResult result = train(config);
    const Checkpoint ckpt = load_checkpoint(result.final_checkpoint);
    const Manifest manifest = load_manifest(config.manifest);
    const EvalReport report = evaluate(ckpt, manifest, config.resolved_data_root(),
                                       manifest.categories("train"), backend);
    if (mean_rds) *mean_rds = mean_rds_from_log(result.reliability_log);
    return report.overall;
}

}  // namespace detail

/// One full train + evaluate run per K, shared seed.
inline SweepTable k_sweep(const TrainConfig& base, const std::vector<int>& k_values,
                          const std::string& workdir) {
    SweepTable table;
    table.name = "k_sweep";
    table.x_label = "K";
    for (int k : k_values) {
        if (k > base.batch_size) {
            throw std::invalid_argument("k_sweep: K=" + std::to_string(k) + " exceeds batch size");
        }
        TrainConfig config = base;
        config.k = k;
        config.use_ppi = true;
        config.out_dir = (std::filesystem::path(workdir) / ("k_" + std::to_string(k))).string();
        auto backend = make_backend(config.backend);
        SweepRow row;
        row.x = static_cast<double>(k);
        row.accuracy = detail::train_and_evaluate(config, *backend, &row.mean_rds);
        table.rows.push_back(row);
    }
    return table;
}

/// Accuracy over a (lambda_rep, lambda_con) grid with lambda_att = 1.
inline SweepTable lambda_grid(const TrainConfig& base, const std::vector<double>& lambda_rep_values,
                              const std::vector<double>& lambda_con_values,
                              const std::string& workdir) {
    SweepTable table;
    table.name = "lambda_grid";
    table.x_label = "lambda_rep/lambda_con";
    size_t cell = 0;
    for (double l2 : lambda_rep_values) {
        for (double l3 : lambda_con_values) {
            TrainConfig config = base;
            config.weights.lambda_rep = l2;
            config.weights.lambda_con = l3;
            config.out_dir = (std::filesystem::path(workdir) / ("cell_" + std::to_string(cell++))).string();
            auto backend = make_backend(config.backend);
            SweepRow row;
            row.x = l2;
            row.mean_rds = l3;  // second coordinate of the grid cell
            row.accuracy = detail::train_and_evaluate(config, *backend);
            table.rows.push_back(row);
        }
    }
    return table;
}

struct AblationRow {
    std::string label;
    bool rep = false, con = false, ppi = false, trci = false;
    double accuracy = 0.0;
};

/// The seven standard ablation rows: attraction only, plus repulsion,
/// consistency, PPI and TRCI in the usual combinations.
inline std::vector<AblationRow> ablation_rows() {
    return {
        {"(1) att", false, false, false, false, 0.0},
        {"(2) att+rep", true, false, false, false, 0.0},
        {"(3) att+rep+con", true, true, false, false, 0.0},
        {"(4) att+rep+ppi", true, false, true, false, 0.0},
        {"(5) att+rep+con+ppi", true, true, true, false, 0.0},
        {"(6) att+rep+ppi+trci", true, false, true, true, 0.0},
        {"(7) full", true, true, true, true, 0.0},
    };
}

inline TrainConfig apply_ablation_flags(const TrainConfig& base, const AblationRow& row,
                                        const std::string& out_dir) {
    TrainConfig config = base;
    if (!row.rep) config.weights.lambda_rep = 0.0;
    if (!row.con) config.weights.lambda_con = 0.0;
    config.use_ppi = row.ppi;
    config.use_trci = row.trci;
    config.out_dir = out_dir;
    return config;
}

inline std::vector<AblationRow> ablation_harness(const TrainConfig& base, const std::string& workdir) {
    std::vector<AblationRow> rows = ablation_rows();
    for (size_t i = 0; i < rows.size(); ++i) {
        const TrainConfig config = apply_ablation_flags(
            base, rows[i], (std::filesystem::path(workdir) / ("row_" + std::to_string(i + 1))).string());
        auto backend = make_backend(config.backend);
        rows[i].accuracy = detail::train_and_evaluate(config, *backend);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

namespace detail {

/// Minimal grayscale line plot: axes plus one polyline with square markers.
inline std::vector<uint8_t> render_line_plot(const std::vector<std::pair<double, double>>& points,
                                             int width = 480, int height = 320) {
    std::vector<uint8_t> canvas(static_cast<size_t>(width) * height, 255);
    const int margin = 32;
    auto put = [&](int x, int y, uint8_t v) {
        if (x >= 0 && x < width && y >= 0 && y < height) {
            canvas[static_cast<size_t>(y) * width + x] = v;
        }
    };
    for (int x = margin; x < width - margin / 2; ++x) put(x, height - margin, 0);
    for (int y = margin / 2; y <= height - margin; ++y) put(margin, y, 0);
    if (!points.empty()) {
        double xmin = points[0].first, xmax = points[0].first;
        double ymin = points[0].second, ymax = points[0].second;
        for (const auto& [x, y] : points) {
            xmin = std::min(xmin, x); xmax = std::max(xmax, x);
            ymin = std::min(ymin, y); ymax = std::max(ymax, y);
        }
        if (xmax == xmin) { xmax += 1.0; xmin -= 1.0; }
        if (ymax == ymin) { ymax += 1.0; ymin -= 1.0; }
        auto to_px = [&](double x, double y) {
            const int px = margin + static_cast<int>(std::lround(
                (x - xmin) / (xmax - xmin) * (width - 1.5 * margin)));
            const int py = (height - margin) - static_cast<int>(std::lround(
                (y - ymin) / (ymax - ymin) * (height - 1.5 * margin)));
            return std::pair<int, int>(px, py);
        };
        std::pair<int, int> prev{0, 0};
        for (size_t i = 0; i < points.size(); ++i) {
            const auto [px, py] = to_px(points[i].first, points[i].second);
            for (int dy = -2; dy <= 2; ++dy)
                for (int dx = -2; dx <= 2; ++dx) put(px + dx, py + dy, 0);
            if (i > 0) {
                // Bresenham segment from the previous point.
                int x0 = prev.first, y0 = prev.second, x1 = px, y1 = py;
                const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
                const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
                int err = dx + dy;
                while (true) {
                    put(x0, y0, 64);
                    if (x0 == x1 && y0 == y1) break;
                    const int e2 = 2 * err;
                    if (e2 >= dy) { err += dy; x0 += sx; }
                    if (e2 <= dx) { err += dx; y0 += sy; }
                }
            }
            prev = {px, py};
        }
    }
    return encode_png_gray8(canvas.data(), width, height);
}

inline void write_files_manifest(const std::filesystem::path& dir,
                                 const std::vector<std::string>& files) {
    nlohmann::json j;
    j["files"] = files;
    std::ofstream out(dir / "files.json", std::ios::trunc);
    out << j.dump(2) << "\n";
}

}  // namespace detail

/// Write report.json plus CSV tables under `out_dir`, with a manifest of the
/// produced files. Deterministic given the report.
inline std::vector<std::string> emit_report(const EvalReport& report, const std::string& out_dir) {
    const std::filesystem::path dir(out_dir);
    std::filesystem::create_directories(dir);
    std::vector<std::string> files;

    {
        std::ofstream out(dir / "report.json", std::ios::trunc);
        if (!out) throw std::runtime_error("emit_report: cannot write under " + out_dir);
        out << report.to_json().dump(2) << "\n";
        files.push_back("report.json");
    }
    {
        std::ofstream out(dir / "per_category.csv", std::ios::trunc);
        out << "category,accuracy\n";
        for (const auto& [category, acc] : report.per_category_accuracy) {
            out << category << ',' << acc << "\n";
        }
        files.push_back("per_category.csv");
    }
    {
        std::ofstream out(dir / "confusion.csv", std::ios::trunc);
        out << "true\\predicted";
        for (const auto& c : report.prompt_categories) out << ',' << c;
        out << "\n";
        for (size_t i = 0; i < report.confusion.size(); ++i) {
            out << report.true_categories[i];
            for (size_t value : report.confusion[i]) out << ',' << value;
            out << "\n";
        }
        files.push_back("confusion.csv");
    }
    detail::write_files_manifest(dir, files);
    return files;
}

/// Write sweep.json, sweep.csv and a line-plot PNG for the sweep.
inline std::vector<std::string> emit_sweep(const SweepTable& table, const std::string& out_dir) {
    const std::filesystem::path dir(out_dir);
    std::filesystem::create_directories(dir);
    std::vector<std::string> files;
    {
        nlohmann::json j;
        j["name"] = table.name;
        j["x_label"] = table.x_label;
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& r : table.rows) {
            rows.push_back({{"x", r.x}, {"accuracy", r.accuracy}, {"mean_rds", r.mean_rds}});
        }
        j["rows"] = rows;
        std::ofstream out(dir / "sweep.json", std::ios::trunc);
        if (!out) throw std::runtime_error("emit_sweep: cannot write under " + out_dir);
        out << j.dump(2) << "\n";
        files.push_back("sweep.json");
    }
    {
        std::ofstream out(dir / "sweep.csv", std::ios::trunc);
        out << table.x_label << ",accuracy,mean_rds\n";
        for (const auto& r : table.rows) {
            out << r.x << ',' << r.accuracy << ',' << r.mean_rds << "\n";
        }
        files.push_back("sweep.csv");
    }
    {
        std::vector<std::pair<double, double>> points;
        for (const auto& r : table.rows) points.emplace_back(r.x, r.accuracy);
        write_file_bytes((dir / "sweep.png").string(), detail::render_line_plot(points));
        files.push_back("sweep.png");
    }
    detail::write_files_manifest(dir, files);
    return files;
}

inline std::vector<std::string> emit_ablation(const std::vector<AblationRow>& rows,
                                              const std::string& out_dir) {
    const std::filesystem::path dir(out_dir);
    std::filesystem::create_directories(dir);
    std::vector<std::string> files;
    {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& r : rows) {
            j.push_back({{"label", r.label}, {"rep", r.rep}, {"con", r.con}, {"ppi", r.ppi},
                         {"trci", r.trci}, {"accuracy", r.accuracy}});
        }
        std::ofstream out(dir / "ablation.json", std::ios::trunc);
        if (!out) throw std::runtime_error("emit_ablation: cannot write under " + out_dir);
        out << j.dump(2) << "\n";
        files.push_back("ablation.json");
    }
    {
        std::ofstream out(dir / "ablation.csv", std::ios::trunc);
        out << "label,rep,con,ppi,trci,accuracy\n";
        for (const auto& r : rows) {
            out << r.label << ',' << r.rep << ',' << r.con << ',' << r.ppi << ',' << r.trci << ','
                << r.accuracy << "\n";
        }
        files.push_back("ablation.csv");
    }
    detail::write_files_manifest(dir, files);
    return files;
}

}  // namespace evrec
