// Command-line front end: training, reconstruction, evaluation protocols,
// sweeps, prototype banks and the synthetic dataset generator.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

#include "evrec/evrec.hpp"

namespace {

struct ConfigOverrides {
    std::string config_path;
    evrec::TrainConfig config;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
        cmd->add_option("--manifest", config.manifest, "dataset manifest (relative_path,category,split)");
        cmd->add_option("--data-root", config.data_root, "root for manifest paths");
        cmd->add_option("--backend", config.backend, "encoder backend id, e.g. stub:seed=7");
        cmd->add_option("--mode", config.mode, "text_prompt or visual_prototype");
        cmd->add_option("--prototype-bank", config.prototype_bank, "prototype bank file");
        cmd->add_option("--prompt-template", config.prompt_template, "prompt with one [CLASS]");
        cmd->add_option("--batch-size", config.batch_size);
        cmd->add_option("--k", config.k, "PPI sample budget");
        cmd->add_option("--t-bins", config.t_bins);
        cmd->add_option("--resize", config.resize);
        cmd->add_option("--crop", config.crop);
        cmd->add_option("--sensor-width", config.sensor_width);
        cmd->add_option("--sensor-height", config.sensor_height);
        cmd->add_option("--lambda-att", config.weights.lambda_att);
        cmd->add_option("--lambda-rep", config.weights.lambda_rep);
        cmd->add_option("--lambda-con", config.weights.lambda_con);
        cmd->add_option("--temperature-pred", config.temperature_pred);
        cmd->add_option("--temperature-loss", config.temperature_loss);
        cmd->add_option("--optimizer", config.optimizer.family, "lamb or adam");
        cmd->add_option("--lr", config.optimizer.lr);
        cmd->add_option("--weight-decay", config.optimizer.weight_decay);
        cmd->add_option("--base-width", config.net.base_width);
        cmd->add_option("--depth", config.net.depth);
        cmd->add_option("--residual-blocks", config.net.residual_blocks);
        cmd->add_option("--steps", config.steps);
        cmd->add_option("--epochs", config.epochs);
        cmd->add_option("--checkpoint-every", config.checkpoint_every);
        cmd->add_option("--seed", config.seed);
        cmd->add_flag("--use-ppi,!--no-ppi", config.use_ppi, "toggle PPI selection");
        cmd->add_flag("--use-trci,!--no-trci", config.use_trci, "toggle TRCI selection");
        cmd->add_option("--out", config.out_dir, "run output directory");
    }

    /// Merge file config with command-line overrides (flags win).
    evrec::TrainConfig resolve(const CLI::App* cmd) {
        if (config_path.empty()) return config;
        evrec::TrainConfig merged = evrec::TrainConfig::load(config_path);
        const evrec::TrainConfig defaults;
        auto taken = [&](const std::string& flag) { return cmd->count(flag) > 0; };
        if (taken("--manifest")) merged.manifest = config.manifest;
        if (taken("--data-root")) merged.data_root = config.data_root;
        if (taken("--backend")) merged.backend = config.backend;
        if (taken("--mode")) merged.mode = config.mode;
        if (taken("--prototype-bank")) merged.prototype_bank = config.prototype_bank;
        if (taken("--prompt-template")) merged.prompt_template = config.prompt_template;
        if (taken("--batch-size")) merged.batch_size = config.batch_size;
        if (taken("--k")) merged.k = config.k;
        if (taken("--t-bins")) merged.t_bins = config.t_bins;
        if (taken("--resize")) merged.resize = config.resize;
        if (taken("--crop")) merged.crop = config.crop;
        if (taken("--sensor-width")) merged.sensor_width = config.sensor_width;
        if (taken("--sensor-height")) merged.sensor_height = config.sensor_height;
        if (taken("--lambda-att")) merged.weights.lambda_att = config.weights.lambda_att;
        if (taken("--lambda-rep")) merged.weights.lambda_rep = config.weights.lambda_rep;
        if (taken("--lambda-con")) merged.weights.lambda_con = config.weights.lambda_con;
        if (taken("--temperature-pred")) merged.temperature_pred = config.temperature_pred;
        if (taken("--temperature-loss")) merged.temperature_loss = config.temperature_loss;
        if (taken("--optimizer")) merged.optimizer.family = config.optimizer.family;
        if (taken("--lr")) merged.optimizer.lr = config.optimizer.lr;
        if (taken("--weight-decay")) merged.optimizer.weight_decay = config.optimizer.weight_decay;
        if (taken("--base-width")) merged.net.base_width = config.net.base_width;
        if (taken("--depth")) merged.net.depth = config.net.depth;
        if (taken("--residual-blocks")) merged.net.residual_blocks = config.net.residual_blocks;
        if (taken("--steps")) merged.steps = config.steps;
        if (taken("--epochs")) merged.epochs = config.epochs;
        if (taken("--checkpoint-every")) merged.checkpoint_every = config.checkpoint_every;
        if (taken("--seed")) merged.seed = config.seed;
        if (taken("--use-ppi") || taken("--no-ppi")) merged.use_ppi = config.use_ppi;
        if (taken("--use-trci") || taken("--no-trci")) merged.use_trci = config.use_trci;
        if (taken("--out")) merged.out_dir = config.out_dir;
        return merged;
    }
};

std::vector<std::string> read_name_list(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open name list " + path);
    std::vector<std::string> names;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        names.push_back(line);
    }
    return names;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"label-free event recognition via joint event-to-image reconstruction"};
    app.require_subcommand(1);

    ConfigOverrides train_opts;
    auto* cmd_train = app.add_subcommand("train", "run the joint training loop");
    train_opts.attach(cmd_train);
    std::string resume_path;
    cmd_train->add_option("--resume", resume_path, "checkpoint to resume from");

    auto* cmd_recon = app.add_subcommand("reconstruct", "reconstruct one event file to a PNG");
    std::string recon_ckpt, recon_events, recon_out;
    cmd_recon->add_option("--checkpoint", recon_ckpt)->required()->check(CLI::ExistingFile);
    cmd_recon->add_option("--events", recon_events)->required()->check(CLI::ExistingFile);
    cmd_recon->add_option("--out", recon_out)->required();

    ConfigOverrides eval_opts;
    auto* cmd_eval = app.add_subcommand("eval", "standard accuracy over the test split");
    eval_opts.attach(cmd_eval);
    std::string eval_ckpt, eval_out;
    cmd_eval->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
    cmd_eval->add_option("--report-out", eval_out, "report directory");

    ConfigOverrides zs_opts;
    auto* cmd_zs = app.add_subcommand("zero-shot", "zero-shot protocol over unseen categories");
    zs_opts.attach(cmd_zs);
    std::string zs_ckpt, zs_train_list, zs_test_list, zs_out;
    cmd_zs->add_option("--checkpoint", zs_ckpt)->required()->check(CLI::ExistingFile);
    cmd_zs->add_option("--train-categories", zs_train_list, "file with one training category per line")
        ->required()->check(CLI::ExistingFile);
    cmd_zs->add_option("--test-categories", zs_test_list, "file with one unseen category per line")
        ->required()->check(CLI::ExistingFile);
    cmd_zs->add_option("--report-out", zs_out);

    ConfigOverrides ss_opts;
    auto* cmd_ss = app.add_subcommand("superset", "evaluation with extra distractor prompts");
    ss_opts.attach(cmd_ss);
    std::string ss_ckpt, ss_extras, ss_out;
    cmd_ss->add_option("--checkpoint", ss_ckpt)->required()->check(CLI::ExistingFile);
    cmd_ss->add_option("--extras", ss_extras, "file with one extra category per line")
        ->required()->check(CLI::ExistingFile);
    cmd_ss->add_option("--report-out", ss_out);

    ConfigOverrides sweep_opts;
    auto* cmd_sweep = app.add_subcommand("sweep-k", "train+evaluate per K value");
    sweep_opts.attach(cmd_sweep);
    std::string sweep_values = "2,4,6,8,16,32";
    std::string sweep_out;
    cmd_sweep->add_option("--values", sweep_values, "comma-separated K values");
    cmd_sweep->add_option("--report-out", sweep_out);

    ConfigOverrides grid_opts;
    auto* cmd_grid = app.add_subcommand("sweep-lambda", "accuracy over a (lambda_rep, lambda_con) grid");
    grid_opts.attach(cmd_grid);
    std::string grid_l2 = "0.001,0.01,0.1";
    std::string grid_l3 = "0.5,1,2";
    std::string grid_out;
    cmd_grid->add_option("--l2", grid_l2, "comma-separated lambda_rep values");
    cmd_grid->add_option("--l3", grid_l3, "comma-separated lambda_con values");
    cmd_grid->add_option("--report-out", grid_out);

    ConfigOverrides ablate_opts;
    auto* cmd_ablate = app.add_subcommand("ablate", "run the seven standard ablation rows");
    ablate_opts.attach(cmd_ablate);
    std::string ablate_out;
    cmd_ablate->add_option("--report-out", ablate_out);

    auto* cmd_bank = app.add_subcommand("build-prototypes", "cluster unpaired images into a bank");
    std::string bank_images, bank_out, bank_backend = "stub:seed=7";
    int bank_clusters = 3;
    cmd_bank->add_option("--images", bank_images, "directory with one subdirectory per category")
        ->required()->check(CLI::ExistingDirectory);
    cmd_bank->add_option("--clusters", bank_clusters, "clusters per category (L)");
    cmd_bank->add_option("--backend", bank_backend);
    cmd_bank->add_option("--out", bank_out)->required();

    ConfigOverrides synth_opts;
    auto* cmd_synth = app.add_subcommand("make-synthetic", "generate the synthetic 3-class dataset");
    synth_opts.attach(cmd_synth);
    std::string synth_out;
    uint64_t synth_seed = 11;
    int synth_train = 60, synth_test = 25, synth_unpaired = 8;
    double synth_hard = 0.35;
    cmd_synth->add_option("--dataset-out", synth_out)->required();
    cmd_synth->add_option("--dataset-seed", synth_seed);
    cmd_synth->add_option("--train-per-class", synth_train);
    cmd_synth->add_option("--test-per-class", synth_test);
    cmd_synth->add_option("--unpaired-per-class", synth_unpaired);
    cmd_synth->add_option("--hard-fraction", synth_hard);

    CLI11_PARSE(app, argc, argv);

    try {
        if (cmd_train->parsed()) {
            const evrec::TrainConfig config = train_opts.resolve(cmd_train);
            const evrec::TrainResult result = evrec::train(config, resume_path);
            std::cout << "final checkpoint: " << result.final_checkpoint << "\n";
            std::cout << "metrics log:      " << result.metrics_log << "\n";
            return 0;
        }
        if (cmd_recon->parsed()) {
            const evrec::Checkpoint ckpt = evrec::load_checkpoint(recon_ckpt);
            const evrec::EventStream stream = evrec::load_event_file(
                recon_events, ckpt.config.sensor_width, ckpt.config.sensor_height);
            const evrec::EventTensor est = evrec::resize_tensor(
                evrec::build_est(stream, ckpt.config.t_bins, ckpt.config.sensor_height,
                                 ckpt.config.sensor_width),
                ckpt.config.resize, ckpt.config.resize);
            evrec::write_image_png(recon_out, ckpt.net.reconstruct(est));
            std::cout << "wrote " << recon_out << "\n";
            return 0;
        }
        if (cmd_eval->parsed()) {
            const evrec::TrainConfig config = eval_opts.resolve(cmd_eval);
            const evrec::Checkpoint ckpt = evrec::load_checkpoint(eval_ckpt);
            const evrec::Manifest manifest = evrec::load_manifest(config.manifest);
            auto backend = evrec::make_backend(ckpt.config.backend);
            const evrec::EvalReport report = evrec::evaluate(
                ckpt, manifest, config.resolved_data_root(), manifest.categories("train"), *backend);
            std::cout << "accuracy: " << report.overall << " (" << report.correct << "/"
                      << report.total << ")\n";
            if (!eval_out.empty()) evrec::emit_report(report, eval_out);
            return 0;
        }
        if (cmd_zs->parsed()) {
            const evrec::TrainConfig config = zs_opts.resolve(cmd_zs);
            const evrec::Checkpoint ckpt = evrec::load_checkpoint(zs_ckpt);
            const evrec::Manifest manifest = evrec::load_manifest(config.manifest);
            auto backend = evrec::make_backend(ckpt.config.backend);
            const evrec::EvalReport report = evrec::zero_shot_eval(
                ckpt, manifest, config.resolved_data_root(), read_name_list(zs_train_list),
                read_name_list(zs_test_list), *backend);
            std::cout << "zero-shot accuracy: " << report.overall << "\n";
            if (!zs_out.empty()) evrec::emit_report(report, zs_out);
            return 0;
        }
        if (cmd_ss->parsed()) {
            const evrec::TrainConfig config = ss_opts.resolve(cmd_ss);
            const evrec::Checkpoint ckpt = evrec::load_checkpoint(ss_ckpt);
            const evrec::Manifest manifest = evrec::load_manifest(config.manifest);
            auto backend = evrec::make_backend(ckpt.config.backend);
            const evrec::EvalReport report = evrec::superset_eval(
                ckpt, manifest, config.resolved_data_root(), manifest.categories("train"),
                read_name_list(ss_extras), *backend);
            std::cout << "superset accuracy: " << report.overall << "\n";
            if (!ss_out.empty()) evrec::emit_report(report, ss_out);
            return 0;
        }
        if (cmd_sweep->parsed()) {
            const evrec::TrainConfig config = sweep_opts.resolve(cmd_sweep);
            std::vector<int> ks;
            std::stringstream ss(sweep_values);
            for (std::string item; std::getline(ss, item, ',');) ks.push_back(std::stoi(item));
            const std::string workdir = sweep_out.empty() ? config.out_dir : sweep_out;
            const evrec::SweepTable table = evrec::k_sweep(config, ks, workdir);
            for (const auto& row : table.rows) {
                std::cout << "K=" << row.x << " accuracy=" << row.accuracy
                          << " mean|S_RDS|=" << row.mean_rds << "\n";
            }
            evrec::emit_sweep(table, workdir);
            return 0;
        }
        if (cmd_grid->parsed()) {
            const evrec::TrainConfig config = grid_opts.resolve(cmd_grid);
            auto parse_doubles = [](const std::string& text) {
                std::vector<double> out;
                std::stringstream ss(text);
                for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stod(item));
                return out;
            };
            const std::string workdir = grid_out.empty() ? config.out_dir : grid_out;
            const evrec::SweepTable table =
                evrec::lambda_grid(config, parse_doubles(grid_l2), parse_doubles(grid_l3), workdir);
            for (const auto& row : table.rows) {
                std::cout << "lambda_rep=" << row.x << " lambda_con=" << row.mean_rds
                          << " accuracy=" << row.accuracy << "\n";
            }
            evrec::emit_sweep(table, workdir);
            return 0;
        }
        if (cmd_ablate->parsed()) {
            const evrec::TrainConfig config = ablate_opts.resolve(cmd_ablate);
            const std::string workdir = ablate_out.empty() ? config.out_dir : ablate_out;
            const auto rows = evrec::ablation_harness(config, workdir);
            for (const auto& row : rows) {
                std::cout << row.label << ": " << row.accuracy << "\n";
            }
            evrec::emit_ablation(rows, workdir);
            return 0;
        }
        if (cmd_bank->parsed()) {
            auto backend = evrec::make_backend(bank_backend);
            std::map<std::string, std::vector<evrec::IntensityImage>> images;
            for (const auto& dir : std::filesystem::directory_iterator(bank_images)) {
                if (!dir.is_directory()) continue;
                std::vector<std::filesystem::path> paths;
                for (const auto& file : std::filesystem::directory_iterator(dir.path())) {
                    const auto ext = file.path().extension();
                    if (ext == ".png" || ext == ".pgm") paths.push_back(file.path());
                }
                std::sort(paths.begin(), paths.end());
                for (const auto& p : paths) {
                    images[dir.path().filename().string()].push_back(evrec::read_image_gray(p.string()));
                }
            }
            const evrec::PrototypeBank bank = evrec::build_prototypes(*backend, images, bank_clusters);
            evrec::save_bank(bank_out, bank);
            std::cout << "wrote bank with " << bank.categories.size() << " categories, L="
                      << bank.clusters << ", D=" << bank.dim << "\n";
            return 0;
        }
        if (cmd_synth->parsed()) {
            const evrec::TrainConfig config = synth_opts.resolve(cmd_synth);
            evrec::SyntheticSpec spec;
            spec.seed = synth_seed;
            spec.train_per_class = synth_train;
            spec.test_per_class = synth_test;
            spec.unpaired_per_class = synth_unpaired;
            spec.hard_fraction = synth_hard;
            const evrec::SyntheticMeta meta =
                evrec::generate_synthetic_dataset(spec, config, synth_out);
            std::cout << "categories:";
            for (const auto& c : meta.categories) std::cout << " " << c;
            std::cout << "\nassignment margin: " << meta.assignment_margin << "\n";
            return 0;
        }
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }
    return 0;
}
