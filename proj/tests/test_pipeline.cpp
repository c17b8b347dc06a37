#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "evrec/evaluation.hpp"
#include "evrec/pipeline.hpp"
#include "evrec/synthetic.hpp"
#include "testing_util.hpp"

using namespace evrec;

namespace {

/// Tiny on-the-fly dataset + config for fast loop tests.
struct MiniWorld {
    std::string root;
    TrainConfig config;

    explicit MiniWorld(const std::string& name, int steps = 3) {
        root = (std::filesystem::temp_directory_path() / ("evrec_" + name)).string();
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
        config.steps = steps;
        config.seed = 5;
        config.out_dir = root + "/run";

        SyntheticSpec spec;
        spec.train_per_class = 4;
        spec.test_per_class = 2;
        spec.unpaired_per_class = 3;
        spec.seed = 3;
        generate_synthetic_dataset(spec, config, root + "/data");
        config.manifest = root + "/data/manifest.csv";
    }

    ~MiniWorld() { std::filesystem::remove_all(root); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("config JSON round-trips and validates") {
    TrainConfig config;
    config.manifest = "m.csv";
    config.sensor_width = 32;
    config.sensor_height = 32;
    config.steps = 10;
    const TrainConfig back = TrainConfig::from_json(config.to_json());
    CHECK(back.to_json() == config.to_json());
    CHECK(back.fingerprint() == config.fingerprint());

    TrainConfig bad = config;
    bad.k = 64;  // exceeds the default batch size of 32
    CHECK_THROWS_WITH(bad.validate(), Catch::Matchers::ContainsSubstring("K"));
    bad = config;
    bad.crop = 300;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = config;
    bad.mode = "visual_prototype";
    CHECK_THROWS_WITH(bad.validate(), Catch::Matchers::ContainsSubstring("prototype_bank"));
    bad = config;
    bad.steps = -1;
    CHECK_THROWS_WITH(bad.validate(), Catch::Matchers::ContainsSubstring("steps"));
}

TEST_CASE("optimizer updates are deterministic") {
    ReconNetConfig nc;
    nc.input_channels = 2;
    nc.base_width = 2;
    nc.depth = 2;
    nc.residual_blocks = 0;
    auto run_once = [&] {
        ReconNet net(nc, 3);
        Optimizer opt{OptimizerSpec{}};
        Var in = Var::constant(Tensor({1, 2, 4, 4}, 0.5));
        for (int i = 0; i < 3; ++i) {
            Var loss = mean_all(net.forward(in, true));
            backward(loss);
            opt.step(net.parameters());
            net.zero_grads();
        }
        return net.checksum();
    };
    CHECK(run_once() == run_once());
}

TEST_CASE("lamb and adam move parameters against the gradient") {
    for (const std::string family : {"lamb", "adam"}) {
        ReconNetConfig nc;
        nc.input_channels = 2;
        nc.base_width = 2;
        nc.depth = 2;
        nc.residual_blocks = 0;
        ReconNet net(nc, 3);
        const uint64_t before = net.checksum();
        OptimizerSpec spec;
        spec.family = family;
        Optimizer opt(spec);
        Var in = Var::constant(Tensor({1, 2, 4, 4}, 0.5));
        Var loss = mean_all(net.forward(in, true));
        backward(loss);
        opt.step(net.parameters());
        CHECK(net.checksum() != before);
    }
}

TEST_CASE("train_step skips the update when no loss term is active") {
    MiniWorld world("noloss");
    TrainConfig config = world.config;
    config.weights.lambda_rep = 0.0;
    config.weights.lambda_con = 0.0;
    config.k = 1;  // |S_PPI| = 1 so |S_RDS| <= 1 and attraction is zero
    config.validate();

    const Manifest manifest = load_manifest(config.manifest);
    PreparedDataset data = prepare_training_data(config, manifest);
    auto backend = make_backend(config.backend);
    const Tensor text = backend->encode_text(build_prompts(data.categories, config.prompt_template));

    ReconNet net(config.net_config(), config.seed);
    const uint64_t before = net.checksum();
    Optimizer opt(config.optimizer);
    Rng step_rng(1);

    std::vector<EventStream> batch(data.streams.begin(),
                                   data.streams.begin() + config.batch_size);
    const BatchState state = train_step(net, opt, batch, text, nullptr, data.categories, config,
                                        step_rng, *backend);
    CHECK(state.sets.s_rds.size() <= 1);
    CHECK_FALSE(state.updated);
    CHECK(state.total == 0.0);
    CHECK(net.checksum() == before);  // bitwise unchanged
}

TEST_CASE("train_step with empty S_RDS still updates through rep and con") {
    MiniWorld world("emptyrds");
    TrainConfig config = world.config;
    config.validate();
    const Manifest manifest = load_manifest(config.manifest);
    PreparedDataset data = prepare_training_data(config, manifest);
    auto backend = make_backend(config.backend);
    const Tensor text = backend->encode_text(build_prompts(data.categories, config.prompt_template));

    ReconNet net(config.net_config(), config.seed);
    const uint64_t before = net.checksum();
    Optimizer opt(config.optimizer);
    Rng step_rng(1);
    std::vector<EventStream> batch(data.streams.begin(),
                                   data.streams.begin() + config.batch_size);
    BatchState state = train_step(net, opt, batch, text, nullptr, data.categories, config,
                                  step_rng, *backend);
    // Whatever S_RDS turned out to be, the step must have updated G and the
    // bookkeeping must be consistent.
    CHECK(state.updated);
    CHECK(net.checksum() != before);
    CHECK(state.total == total_loss(state.att, state.rep, state.con, config.weights));
    if (state.sets.s_rds.empty()) {
        CHECK(state.att == 0.0);
        CHECK(state.attraction_skipped);
    }
}

TEST_CASE("reversed-branch outputs carry no gradient") {
    MiniWorld world("nograd");
    const TrainConfig config = world.config;
    ReconNet net(config.net_config(), 1);
    Var in = Var::constant(Tensor({1, static_cast<size_t>(2 * config.t_bins), 16, 16}, 0.1));
    const Var out = net.forward(in, /*with_grad=*/false);
    CHECK_FALSE(out.requires_grad());
    auto backend = make_backend(config.backend);
    CHECK_FALSE(backend->encode_images(out).requires_grad());
}

TEST_CASE("checkpoints round-trip bitwise and catch corruption") {
    MiniWorld world("ckpt", 2);
    const TrainResult result = train(world.config);
    const Checkpoint ckpt = load_checkpoint(result.final_checkpoint);
    CHECK(ckpt.step == 2);

    const std::string copy = world.root + "/copy.ckpt";
    save_checkpoint(copy, ckpt);
    const Checkpoint again = load_checkpoint(copy);
    REQUIRE(again.net.parameters().size() == ckpt.net.parameters().size());
    for (size_t i = 0; i < again.net.parameters().size(); ++i) {
        CHECK(bitwise_equal(again.net.parameters()[i].var.value(),
                            ckpt.net.parameters()[i].var.value()));
    }
    CHECK(again.optimizer.steps_taken() == ckpt.optimizer.steps_taken());

    SECTION("corrupted payload fails the integrity check") {
        const auto size = std::filesystem::file_size(copy);
        std::fstream f(copy, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(static_cast<std::streamoff>(size) - 16);
        const char junk = 0x5A;
        f.write(&junk, 1);
        f.close();
        CHECK_THROWS_WITH(load_checkpoint(copy),
                          Catch::Matchers::ContainsSubstring("integrity"));
    }
    SECTION("version mismatch is an explicit incompatibility") {
        std::fstream f(copy, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(8);  // version field follows the magic
        const uint32_t bad_version = 9;
        f.write(reinterpret_cast<const char*>(&bad_version), sizeof(bad_version));
        f.close();
        CHECK_THROWS_WITH(load_checkpoint(copy),
                          Catch::Matchers::ContainsSubstring("version"));
    }
    SECTION("resuming with mismatched t_bins is a channel error") {
        TrainConfig wrong = world.config;
        wrong.t_bins = world.config.t_bins + 1;
        wrong.out_dir = world.root + "/wrong";
        CHECK_THROWS_WITH(train(wrong, result.final_checkpoint),
                          Catch::Matchers::ContainsSubstring("channels"));
    }
}

TEST_CASE("zero steps produce only the initial checkpoint") {
    MiniWorld world("zerosteps", 0);
    const TrainResult result = train(world.config);
    const Checkpoint ckpt = load_checkpoint(result.final_checkpoint);
    CHECK(ckpt.step == 0);
    const ReconNet fresh(world.config.net_config(), world.config.seed);
    CHECK(ckpt.net.checksum() == fresh.checksum());
}

TEST_CASE("same-seed runs are identical and resume matches uninterrupted") {
    MiniWorld world("determinism", 4);

    TrainConfig run_a = world.config;
    run_a.out_dir = world.root + "/a";
    TrainConfig run_b = world.config;
    run_b.out_dir = world.root + "/b";
    const TrainResult a = train(run_a);
    const TrainResult b = train(run_b);
    CHECK(slurp(a.metrics_log) == slurp(b.metrics_log));
    CHECK(load_checkpoint(a.final_checkpoint).net.checksum()
          == load_checkpoint(b.final_checkpoint).net.checksum());

    // Interrupt at step 2, resume to 4: identical parameters.
    TrainConfig run_c = world.config;
    run_c.steps = 2;
    run_c.out_dir = world.root + "/c";
    const TrainResult half = train(run_c);
    run_c.steps = 4;
    const TrainResult resumed = train(run_c, half.final_checkpoint);
    CHECK(load_checkpoint(resumed.final_checkpoint).net.checksum()
          == load_checkpoint(a.final_checkpoint).net.checksum());
}

TEST_CASE("encoder parameters are frozen across training") {
    MiniWorld world("frozen", 3);
    auto backend = make_backend(world.config.backend);
    const uint64_t before = backend->parameter_checksum();
    train(world.config);
    CHECK(backend->parameter_checksum() == before);
    auto fresh = make_backend(world.config.backend);
    CHECK(fresh->parameter_checksum() == before);
}

TEST_CASE("training writes metrics and reliability logs with the expected keys") {
    MiniWorld world("logs", 2);
    const TrainResult result = train(world.config);
    std::ifstream metrics(result.metrics_log);
    std::string line;
    size_t lines = 0;
    while (std::getline(metrics, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j.contains("step"));
        CHECK(j.contains("att"));
        CHECK(j.contains("rep"));
        CHECK(j.contains("con"));
        CHECK(j.contains("total"));
        CHECK(j.contains("rds"));
        CHECK(j.contains("pseudo_entropy"));
        ++lines;
    }
    CHECK(lines == 2);
    std::ifstream reliability(result.reliability_log);
    lines = 0;
    while (std::getline(reliability, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j.contains("ppi"));
        CHECK(j.contains("trci"));
        CHECK(j.contains("rds"));
        CHECK(j.at("indices").contains("rds"));
        ++lines;
    }
    CHECK(lines == 2);
}

TEST_CASE("visual prototype mode trains against a bank") {
    MiniWorld world("proto", 2);
    // Build a bank from the generated unpaired images.
    auto backend = make_backend(world.config.backend);
    std::map<std::string, std::vector<IntensityImage>> images;
    for (const auto& dir :
         std::filesystem::directory_iterator(world.root + "/data/unpaired")) {
        std::vector<std::filesystem::path> paths;
        for (const auto& file : std::filesystem::directory_iterator(dir.path())) {
            paths.push_back(file.path());
        }
        std::sort(paths.begin(), paths.end());
        for (const auto& p : paths) {
            images[dir.path().filename().string()].push_back(read_image_gray(p.string()));
        }
    }
    const PrototypeBank bank = build_prototypes(*backend, images, 2);
    const std::string bank_path = world.root + "/bank.bin";
    save_bank(bank_path, bank);

    TrainConfig config = world.config;
    config.mode = "visual_prototype";
    config.prototype_bank = bank_path;
    config.out_dir = world.root + "/proto_run";
    const TrainResult result = train(config);
    const Checkpoint ckpt = load_checkpoint(result.final_checkpoint);
    CHECK(ckpt.step == 2);
}
