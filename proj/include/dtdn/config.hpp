#pragma once

// Experiment configuration files: INI-style sections of key = value lines.
//
//   [experiment] seed epochs run_id out_dir mode eval_input bank_init
//                query_per_class openset_threshold require_derangement
//   [model]      encoder conv1_channels conv2_channels mlp_hidden first_activation
//                standardize_input hidden_dim embedding_dim num_classes mask_bias_init
//   [losses]     w lambda1 lambda2 tau k reduction eta
//   [schedule]   lr momentum batch lr_milestones lr_decay
//   [data]       n_classes per_class test_per_class image_size channels
//                target_class_offset noise_std intensity_invert channel_permute
//                translation idx_source_images idx_source_labels
//                idx_target_images idx_target_labels
//   [ablation]   preset disable_l_task disable_l_neighbor disable_l_agree
//                fixed_mask_ratio use_memory_bank
//
// Unknown sections or keys are errors. Lists are comma-separated.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dtdn/trainer.hpp"

namespace dtdn {

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
    const std::string t = trim(v);
    double out = 0.0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    if (ec != std::errc() || p != t.data() + t.size() || t.empty())
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    const std::string t = trim(v);
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    if (ec != std::errc() || p != t.data() + t.size() || t.empty())
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    const std::string t = trim(v);
    if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
    if (t == "false" || t == "0" || t == "no" || t == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!trim(item).empty()) out.push_back(trim(item));
    return out;
}

template <class E>
E parse_enum(const std::string& key, const std::string& v, std::initializer_list<std::pair<const char*, E>> options) {
    const std::string t = trim(v);
    std::string names;
    for (auto& [name, e] : options) {
        if (t == name) return e;
        names += std::string(names.empty() ? "" : "|") + name;
    }
    throw ConfigError(key + ": expected one of " + names + ", got '" + v + "'");
}

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

inline const std::map<std::string, Setter>& config_setters() {
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
        auto num = [](auto member) {
            return [member](const std::string& k) {
                return Setter([member, k](ExperimentConfig& c, const std::string& v) { member(c) = parse_double(k, v); });
            };
        };
        auto uint = [](auto member) {
            return [member](const std::string& k) {
                return Setter([member, k](ExperimentConfig& c, const std::string& v) {
                    member(c) = static_cast<std::remove_reference_t<decltype(member(c))>>(parse_uint(k, v));
                });
            };
        };
        auto flag = [](auto member) {
            return [member](const std::string& k) {
                return Setter([member, k](ExperimentConfig& c, const std::string& v) { member(c) = parse_bool(k, v); });
            };
        };
        auto str = [](auto member) {
            return [member](const std::string&) {
                return Setter([member](ExperimentConfig& c, const std::string& v) { member(c) = trim(v); });
            };
        };
        auto add = [&t](const std::string& key, auto make) { t.emplace(key, make(key)); };

        add("experiment.seed", uint([](ExperimentConfig& c) -> std::uint64_t& { return c.seed; }));
        add("experiment.epochs", uint([](ExperimentConfig& c) -> std::size_t& { return c.epochs; }));
        add("experiment.run_id", str([](ExperimentConfig& c) -> std::string& { return c.run_id; }));
        add("experiment.out_dir", str([](ExperimentConfig& c) -> std::string& { return c.out_dir; }));
        add("experiment.query_per_class", uint([](ExperimentConfig& c) -> std::size_t& { return c.query_per_class; }));
        add("experiment.openset_threshold", num([](ExperimentConfig& c) -> double& { return c.openset_threshold; }));
        add("experiment.require_derangement", flag([](ExperimentConfig& c) -> bool& { return c.require_derangement; }));
        t.emplace("experiment.mode", [](ExperimentConfig& c, const std::string& v) {
            c.mode = parse_enum<TaskMode>("experiment.mode", v,
                                          {{"close_set", TaskMode::close_set}, {"open_set", TaskMode::open_set}});
        });
        t.emplace("experiment.eval_input", [](ExperimentConfig& c, const std::string& v) {
            c.eval_input = parse_enum<EvalInput>("experiment.eval_input", v,
                                                 {{"task_relevant", EvalInput::task_relevant}, {"full", EvalInput::full}});
        });
        t.emplace("experiment.bank_init", [](ExperimentConfig& c, const std::string& v) {
            c.bank_init = parse_enum<BankInit>("experiment.bank_init", v,
                                               {{"gaussian", BankInit::gaussian}, {"features", BankInit::features}});
        });

        t.emplace("model.encoder", [](ExperimentConfig& c, const std::string& v) {
            c.model.encoder.kind =
                parse_enum<EncoderKind>("model.encoder", v, {{"conv", EncoderKind::conv}, {"mlp", EncoderKind::mlp}});
        });
        t.emplace("model.first_activation", [](ExperimentConfig& c, const std::string& v) {
            c.model.encoder.first_activation = parse_enum<FirstActivation>(
                "model.first_activation", v, {{"abs", FirstActivation::abs}, {"relu", FirstActivation::relu}});
        });
        t.emplace("model.mlp_hidden", [](ExperimentConfig& c, const std::string& v) {
            c.model.encoder.mlp_hidden.clear();
            for (auto& item : split_list(v))
                c.model.encoder.mlp_hidden.push_back(static_cast<std::size_t>(parse_uint("model.mlp_hidden", item)));
        });
        add("model.conv1_channels", uint([](ExperimentConfig& c) -> std::size_t& { return c.model.encoder.conv1_channels; }));
        add("model.conv2_channels", uint([](ExperimentConfig& c) -> std::size_t& { return c.model.encoder.conv2_channels; }));
        add("model.standardize_input", flag([](ExperimentConfig& c) -> bool& { return c.model.encoder.standardize_input; }));
        add("model.hidden_dim", uint([](ExperimentConfig& c) -> std::size_t& { return c.model.hidden_dim; }));
        add("model.embedding_dim", uint([](ExperimentConfig& c) -> std::size_t& { return c.model.embedding_dim; }));
        add("model.num_classes", uint([](ExperimentConfig& c) -> std::size_t& { return c.model.num_classes; }));
        add("model.mask_bias_init", num([](ExperimentConfig& c) -> double& { return c.model.mask_bias_init; }));

        add("losses.w", num([](ExperimentConfig& c) -> double& { return c.losses.w; }));
        add("losses.lambda1", num([](ExperimentConfig& c) -> double& { return c.losses.lambda1; }));
        add("losses.lambda2", num([](ExperimentConfig& c) -> double& { return c.losses.lambda2; }));
        add("losses.tau", num([](ExperimentConfig& c) -> double& { return c.losses.tau; }));
        add("losses.k", uint([](ExperimentConfig& c) -> std::size_t& { return c.losses.k; }));
        add("losses.eta", num([](ExperimentConfig& c) -> double& { return c.eta; }));
        t.emplace("losses.reduction", [](ExperimentConfig& c, const std::string& v) {
            c.losses.reduction =
                parse_enum<Reduction>("losses.reduction", v, {{"sum", Reduction::sum}, {"mean", Reduction::mean}});
        });

        add("schedule.lr", num([](ExperimentConfig& c) -> double& { return c.lr; }));
        add("schedule.momentum", num([](ExperimentConfig& c) -> double& { return c.momentum; }));
        add("schedule.batch", uint([](ExperimentConfig& c) -> std::size_t& { return c.batch; }));
        add("schedule.lr_decay", num([](ExperimentConfig& c) -> double& { return c.lr_decay; }));
        t.emplace("schedule.lr_milestones", [](ExperimentConfig& c, const std::string& v) {
            c.lr_milestones.clear();
            for (auto& item : split_list(v)) c.lr_milestones.push_back(parse_double("schedule.lr_milestones", item));
        });

        add("data.n_classes", uint([](ExperimentConfig& c) -> std::size_t& { return c.data.n_classes; }));
        add("data.per_class", uint([](ExperimentConfig& c) -> std::size_t& { return c.data.per_class; }));
        add("data.test_per_class", uint([](ExperimentConfig& c) -> std::size_t& { return c.data.test_per_class; }));
        add("data.image_size", uint([](ExperimentConfig& c) -> std::size_t& { return c.data.image_size; }));
        add("data.channels", uint([](ExperimentConfig& c) -> std::size_t& { return c.data.channels; }));
        add("data.target_class_offset",
            uint([](ExperimentConfig& c) -> std::size_t& { return c.data.target_class_offset; }));
        add("data.noise_std", num([](ExperimentConfig& c) -> double& { return c.data.shift.noise_std; }));
        add("data.intensity_invert", flag([](ExperimentConfig& c) -> bool& { return c.data.shift.intensity_invert; }));
        add("data.channel_permute", flag([](ExperimentConfig& c) -> bool& { return c.data.shift.channel_permute; }));
        t.emplace("data.translation", [](ExperimentConfig& c, const std::string& v) {
            c.data.shift.translation = static_cast<int>(parse_uint("data.translation", v));
        });
        add("data.idx_source_images", str([](ExperimentConfig& c) -> std::string& { return c.idx_source_images; }));
        add("data.idx_source_labels", str([](ExperimentConfig& c) -> std::string& { return c.idx_source_labels; }));
        add("data.idx_target_images", str([](ExperimentConfig& c) -> std::string& { return c.idx_target_images; }));
        add("data.idx_target_labels", str([](ExperimentConfig& c) -> std::string& { return c.idx_target_labels; }));

        t.emplace("ablation.preset", [](ExperimentConfig& c, const std::string& v) { apply_preset(c, trim(v)); });
        add("ablation.disable_l_task", flag([](ExperimentConfig& c) -> bool& { return c.ablation.disable_l_task; }));
        add("ablation.disable_l_neighbor",
            flag([](ExperimentConfig& c) -> bool& { return c.ablation.disable_l_neighbor; }));
        add("ablation.disable_l_agree", flag([](ExperimentConfig& c) -> bool& { return c.ablation.disable_l_agree; }));
        add("ablation.use_memory_bank", flag([](ExperimentConfig& c) -> bool& { return c.ablation.use_memory_bank; }));
        t.emplace("ablation.fixed_mask_ratio", [](ExperimentConfig& c, const std::string& v) {
            if (trim(v) == "none" || trim(v).empty())
                c.ablation.fixed_mask_ratio.reset();
            else
                c.ablation.fixed_mask_ratio = parse_double("ablation.fixed_mask_ratio", v);
        });
        return t;
    }();
    return table;
}

}  // namespace detail

/// Applies one dotted "section.key" assignment.
inline void set_config_value(ExperimentConfig& cfg, const std::string& dotted_key, const std::string& value) {
    const auto& table = detail::config_setters();
    auto it = table.find(dotted_key);
    if (it == table.end()) throw ConfigError("unknown config key: " + dotted_key);
    it->second(cfg, value);
}

/// Applies every assignment of a parsed tree, in file order. An
/// `ablation.preset` line is applied before the other keys of the file so
/// explicit settings can refine a preset.
inline void apply_config_tree(ExperimentConfig& cfg, const boost::property_tree::ptree& tree) {
    std::vector<std::pair<std::string, std::string>> assignments;
    for (const auto& [section, body] : tree) {
        if (body.empty()) {
            if (!body.data().empty()) throw ConfigError("config key '" + section + "' must appear inside a [section]");
            continue;
        }
        for (const auto& [key, value] : body) {
            const std::string dotted = section + "." + key;
            if (dotted == "ablation.preset")
                assignments.insert(assignments.begin(), {dotted, value.data()});
            else
                assignments.emplace_back(dotted, value.data());
        }
    }
    for (auto& [k, v] : assignments) set_config_value(cfg, k, v);
}

inline ExperimentConfig parse_config(std::istream& in, ExperimentConfig base = {}) {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("config syntax: ") + e.what());
    }
    apply_config_tree(base, tree);
    base.validate();
    try {
        base.losses.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return base;
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    return parse_config(in, std::move(base));
}

}  // namespace dtdn
