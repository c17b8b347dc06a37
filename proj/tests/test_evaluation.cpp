#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "evrec/evaluation.hpp"
#include "evrec/synthetic.hpp"

using namespace evrec;

namespace {

struct EvalWorld {
    std::string root;
    TrainConfig config;
    std::string checkpoint;

    EvalWorld() {
        root = (std::filesystem::temp_directory_path() / "evrec_evalworld").string();
        std::filesystem::remove_all(root);

        config.backend = "stub:seed=7,dim=16,input=4";
        config.batch_size = 6;
        config.k = 3;
        config.t_bins = 2;
        config.resize = 16;
        config.crop = 8;
        config.sensor_width = 32;
        config.sensor_height = 32;
        config.net.base_width = 2;
        config.net.depth = 2;
        config.net.residual_blocks = 1;
        config.steps = 2;
        config.seed = 5;
        config.out_dir = root + "/run";

        SyntheticSpec spec;
        spec.train_per_class = 4;
        spec.test_per_class = 3;
        spec.unpaired_per_class = 3;
        spec.seed = 3;
        generate_synthetic_dataset(spec, config, root + "/data");
        config.manifest = root + "/data/manifest.csv";
        checkpoint = train(config).final_checkpoint;
    }

    ~EvalWorld() { std::filesystem::remove_all(root); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("evaluation protocols") {
    EvalWorld world;
    const Checkpoint ckpt = load_checkpoint(world.checkpoint);
    const Manifest manifest = load_manifest(world.config.manifest);
    const std::string data_root = world.config.resolved_data_root();
    const std::vector<std::string> categories = manifest.categories("train");
    auto backend = make_backend(world.config.backend);

    SECTION("standard evaluation is read-only and internally consistent") {
        const uint64_t net_sum = ckpt.net.checksum();
        const uint64_t enc_sum = backend->parameter_checksum();
        const EvalReport report = evaluate(ckpt, manifest, data_root, categories, *backend);
        CHECK(ckpt.net.checksum() == net_sum);
        CHECK(backend->parameter_checksum() == enc_sum);
        CHECK(report.total == 9);  // 3 classes x 3 test samples
        CHECK(report.overall >= 0.0);
        CHECK(report.overall <= 1.0);
        CHECK(report.overall == Catch::Approx(static_cast<double>(report.correct) / report.total));
        // Confusion rows sum to the per-category totals.
        for (size_t i = 0; i < report.confusion.size(); ++i) {
            size_t row_sum = 0;
            for (size_t v : report.confusion[i]) row_sum += v;
            CHECK(row_sum == 3);
        }
        CHECK(report.config_fingerprint == ckpt.config.fingerprint());
    }

    SECTION("category mismatch lists the unknown names") {
        const std::vector<std::string> wrong = {"nothing", "nowhere"};
        CHECK_THROWS_WITH(evaluate(ckpt, manifest, data_root, wrong, *backend),
                          Catch::Matchers::ContainsSubstring(categories[0]));
    }

    SECTION("accuracy is invariant to test-set ordering") {
        const EvalReport a = evaluate(ckpt, manifest, data_root, categories, *backend);
        Manifest shuffled = manifest;
        std::reverse(shuffled.entries.begin(), shuffled.entries.end());
        const EvalReport b = evaluate(ckpt, shuffled, data_root, categories, *backend);
        CHECK(a.overall == b.overall);
        CHECK(a.confusion == b.confusion);
    }

    SECTION("zero-shot requires disjoint category sets") {
        CHECK_THROWS_WITH(zero_shot_eval(ckpt, manifest, data_root, categories, categories,
                                         *backend),
                          Catch::Matchers::ContainsSubstring("overlap"));
    }

    SECTION("zero-shot touches no training-category text features") {
        const std::vector<std::string> train_cats = {categories[0], categories[1]};
        const std::vector<std::string> unseen = {categories[2]};
        backend->clear_text_call_log();
        const EvalReport report =
            zero_shot_eval(ckpt, manifest, data_root, train_cats, unseen, *backend);
        CHECK(report.total == 3);  // only the unseen category's test samples
        // Single unseen category: prediction is trivially correct.
        CHECK(report.overall == 1.0);
        for (const auto& prompt : backend->text_call_log()) {
            for (const auto& trained : train_cats) {
                CHECK(prompt.find(trained) == std::string::npos);
            }
        }
    }

    SECTION("superset with zero extras equals the standard protocol") {
        const EvalReport base = evaluate(ckpt, manifest, data_root, categories, *backend);
        const EvalReport super = superset_eval(ckpt, manifest, data_root, categories, {}, *backend);
        CHECK(super.overall == base.overall);
        CHECK(super.confusion == base.confusion);
        CHECK(super.per_category_accuracy == base.per_category_accuracy);
    }

    SECTION("superset rejects duplicate extras and never helps accuracy") {
        CHECK_THROWS_WITH(superset_eval(ckpt, manifest, data_root, categories,
                                        {categories[0]}, *backend),
                          Catch::Matchers::ContainsSubstring("duplicate"));
        const EvalReport base = evaluate(ckpt, manifest, data_root, categories, *backend);
        const EvalReport super = superset_eval(ckpt, manifest, data_root, categories,
                                               {"asteroid", "bagpipe", "catapult"}, *backend);
        CHECK(super.overall <= base.overall);
        CHECK(super.prompt_categories.size() == categories.size() + 3);
    }
}

TEST_CASE("report emission is deterministic") {
    EvalReport report;
    report.protocol = "standard";
    report.prompt_categories = {"a", "b"};
    report.true_categories = {"a", "b"};
    report.per_category_accuracy = {{"a", 1.0}, {"b", 0.5}};
    report.correct = 3;
    report.total = 4;
    report.overall = 0.75;
    report.confusion = {{2, 0}, {1, 1}};
    report.config_fingerprint = "deadbeef00000000";
    report.runtime_seconds = 1.5;

    const std::string dir1 =
        (std::filesystem::temp_directory_path() / "evrec_report1").string();
    const std::string dir2 =
        (std::filesystem::temp_directory_path() / "evrec_report2").string();
    std::filesystem::remove_all(dir1);
    std::filesystem::remove_all(dir2);
    emit_report(report, dir1);
    emit_report(report, dir2);
    for (const char* name : {"report.json", "per_category.csv", "confusion.csv", "files.json"}) {
        CHECK(slurp(dir1 + "/" + name) == slurp(dir2 + "/" + name));
        CHECK(!slurp(dir1 + "/" + name).empty());
    }
    std::filesystem::remove_all(dir1);
    std::filesystem::remove_all(dir2);
}

TEST_CASE("sweep emission writes CSV, JSON and a plot") {
    const std::string dir = (std::filesystem::temp_directory_path() / "evrec_sweep").string();
    std::filesystem::remove_all(dir);

    SECTION("empty sweep gives a header-only CSV") {
        SweepTable empty;
        empty.name = "k_sweep";
        empty.x_label = "K";
        emit_sweep(empty, dir);
        CHECK(slurp(dir + "/sweep.csv") == "K,accuracy,mean_rds\n");
    }
    SECTION("two rows give a two-point plot") {
        SweepTable table;
        table.name = "k_sweep";
        table.x_label = "K";
        table.rows = {{4.0, 0.5, 3.0}, {8.0, 0.75, 5.0}};
        emit_sweep(table, dir);
        const auto png = read_file_bytes(dir + "/sweep.png");
        const DecodedPng plot = decode_png(png);
        CHECK(plot.width == 480);
        CHECK(plot.height == 320);
        // Emission is deterministic.
        const std::string dir2 = dir + "_again";
        std::filesystem::remove_all(dir2);
        emit_sweep(table, dir2);
        CHECK(slurp(dir + "/sweep.png") == slurp(dir2 + "/sweep.png"));
        CHECK(slurp(dir + "/sweep.csv") == slurp(dir2 + "/sweep.csv"));
        std::filesystem::remove_all(dir2);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("ablation rows map flags onto configs") {
    const auto rows = ablation_rows();
    REQUIRE(rows.size() == 7);
    TrainConfig base;
    base.manifest = "m.csv";
    base.sensor_width = 32;
    base.sensor_height = 32;
    base.steps = 1;

    // Row (1): attraction only.
    const TrainConfig r1 = apply_ablation_flags(base, rows[0], "out1");
    CHECK(r1.weights.lambda_rep == 0.0);
    CHECK(r1.weights.lambda_con == 0.0);
    CHECK_FALSE(r1.use_ppi);
    CHECK_FALSE(r1.use_trci);
    // Row (7): the full method keeps the configured weights.
    const TrainConfig r7 = apply_ablation_flags(base, rows[6], "out7");
    CHECK(r7.weights.lambda_rep == base.weights.lambda_rep);
    CHECK(r7.weights.lambda_con == base.weights.lambda_con);
    CHECK(r7.use_ppi);
    CHECK(r7.use_trci);
}

TEST_CASE("pngs round-trip through the reader") {
    IntensityImage image;
    image.data = Tensor({5, 7}, 0.0);
    for (size_t i = 0; i < image.data.size(); ++i) {
        image.data[i] = static_cast<double>(i) / (image.data.size() - 1);
    }
    const std::string path = (std::filesystem::temp_directory_path() / "evrec_img.png").string();
    write_image_png(path, image);
    const IntensityImage back = read_image_gray(path);
    REQUIRE(back.height() == 5);
    REQUIRE(back.width() == 7);
    for (size_t i = 0; i < image.data.size(); ++i) {
        CHECK(back.data[i] == Catch::Approx(image.data[i]).margin(1.0 / 255.0));
    }
    std::remove(path.c_str());
}
