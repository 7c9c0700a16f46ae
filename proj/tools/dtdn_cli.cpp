// dtdn train | eval | sweep
//
// Exit status: 0 success, 2 configuration error, 3 numeric abort, 1 other failure.

#include <CLI11.hpp>

#include <boost/property_tree/ini_parser.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "dtdn/config.hpp"

namespace fs = std::filesystem;
using namespace dtdn;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct TrainArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> ablate;
    std::optional<double> fixed_mask_ratio;
    std::string out;
};

ExperimentConfig train_config(const TrainArgs& a) {
    ExperimentConfig cfg = load_config(a.config);
    if (a.seed) cfg.seed = *a.seed;
    for (const auto& name : a.ablate) {
        if (name == "l_task")
            cfg.ablation.disable_l_task = true;
        else if (name == "l_neighbor")
            cfg.ablation.disable_l_neighbor = true;
        else if (name == "l_agree")
            cfg.ablation.disable_l_agree = true;
        else
            throw ConfigError("--ablate expects l_task, l_neighbor or l_agree, got '" + name + "'");
    }
    if (a.fixed_mask_ratio) cfg.ablation.fixed_mask_ratio = *a.fixed_mask_ratio;
    if (!a.out.empty()) cfg.out_dir = a.out;
    if (cfg.out_dir.empty()) cfg.out_dir = "runs/" + cfg.run_id;
    cfg.validate();
    return cfg;
}

void print_summary(const fs::path& dir) {
    std::ifstream in(dir / "summary.txt");
    std::cout << in.rdbuf();
}

int cmd_train(const TrainArgs& a) {
    const ExperimentConfig cfg = train_config(a);
    run_experiment(cfg);
    print_summary(cfg.out_dir);
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_spec) {
    // The data spec is an experiment config ("default" = built-in defaults);
    // its data, mode and evaluation settings select what is scored.
    ExperimentConfig cfg = data_spec == "default" ? ExperimentConfig{} : load_config(data_spec);
    const TwoDomainData data = load_data(cfg);
    const auto entries = read_checkpoint(checkpoint);
    TrainState st;
    st.model = model_from_checkpoint(entries, data.source_test.image_shape().back());
    apply_checkpoint_settings(entries, cfg);
    const auto metrics = evaluate(st, data, cfg);
    std::cout << "run_id,epoch,metric,value\n";
    const std::size_t epoch =
        entries.count("state.epoch") ? static_cast<std::size_t>(entries.at("state.epoch").values.at(0)) : 0;
    for (const auto& [k, v] : metrics) write_metric_row(std::cout, cfg.run_id, epoch, k, v);
    return 0;
}

// Grid file: the same INI layout as a config, each value a comma-separated
// list. Every combination of the listed values is run once.
int cmd_sweep(const std::string& config_path, const std::string& grid_path, const std::string& out_root) {
    const ExperimentConfig base = load_config(config_path);
    boost::property_tree::ptree grid;
    try {
        boost::property_tree::ini_parser::read_ini(grid_path, grid);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("grid syntax: ") + e.what());
    }
    std::vector<std::pair<std::string, std::vector<std::string>>> axes;
    for (const auto& [section, body] : grid)
        for (const auto& [key, value] : body) {
            auto values = detail::split_list(value.data());
            if (values.empty()) throw ConfigError("grid axis " + section + "." + key + " has no values");
            axes.emplace_back(section + "." + key, std::move(values));
        }
    if (axes.empty()) throw ConfigError("grid file defines no axes");

    const fs::path root = out_root.empty() ? fs::path(base.out_dir.empty() ? "runs/sweep" : base.out_dir) : fs::path(out_root);
    fs::create_directories(root);
    std::ofstream index(root / "sweep.csv");
    index << "run_id";
    for (auto& [k, v] : axes) index << ',' << k;
    index << ",metrics_csv\n";

    // Validate every combination before running any.
    std::vector<std::vector<std::size_t>> combos{{}};
    for (auto& [k, values] : axes) {
        std::vector<std::vector<std::size_t>> next;
        for (auto& c : combos)
            for (std::size_t i = 0; i < values.size(); ++i) {
                next.push_back(c);
                next.back().push_back(i);
            }
        combos = std::move(next);
    }
    std::vector<ExperimentConfig> configs;
    for (auto& combo : combos) {
        ExperimentConfig cfg = base;
        std::string id;
        for (std::size_t a = 0; a < axes.size(); ++a) {
            const auto& value = axes[a].second[combo[a]];
            if (axes[a].first == "ablation.preset") cfg.ablation = ExperimentConfig{}.ablation;
            set_config_value(cfg, axes[a].first, value);
            std::string tag = axes[a].first.substr(axes[a].first.find('.') + 1) + "=" + value;
            for (char& ch : tag)
                if (ch == ':' || ch == '/' || ch == ' ') ch = '_';
            id += (id.empty() ? "" : "__") + tag;
        }
        cfg.run_id = id;
        cfg.out_dir = (root / id).string();
        cfg.validate();
        configs.push_back(std::move(cfg));
    }
    for (std::size_t c = 0; c < configs.size(); ++c) {
        std::cerr << "[" << (c + 1) << "/" << configs.size() << "] " << configs[c].run_id << '\n';
        run_experiment(configs[c]);
        index << configs[c].run_id;
        for (std::size_t a = 0; a < axes.size(); ++a) index << ',' << axes[a].second[combos[c][a]];
        index << ',' << (fs::path(configs[c].out_dir) / "metrics.csv").string() << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dynamic task-oriented disentangling network: training and evaluation"};
    app.require_subcommand(1);

    TrainArgs targs;
    auto* train = app.add_subcommand("train", "Train one configuration and write its reports");
    train->add_option("--config", targs.config, "Experiment config file")->required()->check(CLI::ExistingFile);
    train->add_option("--seed", targs.seed, "Override the experiment seed");
    train->add_option("--ablate", targs.ablate, "Disable a loss: l_task, l_neighbor or l_agree (repeatable)");
    train->add_option("--fixed-mask-ratio", targs.fixed_mask_ratio, "Replace the dynamic mask by a fixed ratio");
    train->add_option("--out", targs.out, "Output directory");

    std::string checkpoint, data_spec = "default";
    auto* eval = app.add_subcommand("eval", "Score a checkpoint on held-out data");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    eval->add_option("--data", data_spec, "Config file describing the data, or 'default'");

    std::string sweep_config, grid, sweep_out;
    auto* sweep = app.add_subcommand("sweep", "Run every combination of a parameter grid");
    sweep->add_option("--config", sweep_config, "Base experiment config")->required()->check(CLI::ExistingFile);
    sweep->add_option("--grid", grid, "Grid file")->required()->check(CLI::ExistingFile);
    sweep->add_option("--out", sweep_out, "Root output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (*train) return cmd_train(targs);
        if (*eval) return cmd_eval(checkpoint, data_spec);
        if (*sweep) return cmd_sweep(sweep_config, grid, sweep_out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const TrainingAborted& e) {
        std::cerr << "numeric abort: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
