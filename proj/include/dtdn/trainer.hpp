#pragma once

// End-to-end training: encode both domains, split with the mask, rearrange,
// run the task network on all four recombinations, combine the three
// objectives, step the optimizer, then refresh the memory bank.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtdn/checkpoint.hpp"
#include "dtdn/data.hpp"
#include "dtdn/eval.hpp"
#include "dtdn/losses.hpp"
#include "dtdn/membank.hpp"
#include "dtdn/model.hpp"
#include "dtdn/optim.hpp"
#include "dtdn/rearrange.hpp"

namespace dtdn {

class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// A non-finite value appeared during a step; carries the partial breakdown.
class TrainingAborted : public std::runtime_error {
  public:
    TrainingAborted(const std::string& what, std::size_t step, LossBreakdown partial)
        : std::runtime_error(what), step(step), partial(partial) {}
    std::size_t step;
    LossBreakdown partial;
};

enum class TaskMode { open_set, close_set };

/// Which representation the task network sees at evaluation time.
enum class EvalInput { task_relevant, full };

/// Memory bank start: Gaussian rows, or the initial model's target embeddings.
enum class BankInit { gaussian, features };

struct AblationFlags {
    bool disable_l_task = false;
    bool disable_l_neighbor = false;
    bool disable_l_agree = false;
    std::optional<double> fixed_mask_ratio;
    bool use_memory_bank = true;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    ModelSpec model;
    // Batch-mean target terms keep them on the scale of the mean cross-entropy.
    LossConfig losses{.reduction = Reduction::mean};
    double eta = 0.2;
    std::size_t batch = 32;
    std::size_t epochs = 15;
    double lr = 0.01;
    double momentum = 0.9;
    std::vector<double> lr_milestones{0.6, 0.8};  // fractions of the run
    double lr_decay = 0.1;
    TaskMode mode = TaskMode::close_set;
    AblationFlags ablation;
    bool require_derangement = false;
    EvalInput eval_input = EvalInput::task_relevant;
    BankInit bank_init = BankInit::features;
    SynthSpec data;
    // Optional IDX ingestion instead of the synthetic generator.
    std::string idx_source_images, idx_source_labels, idx_target_images, idx_target_labels;
    std::size_t query_per_class = 2;
    double openset_threshold = 0.3;
    std::string run_id = "run";
    std::string out_dir;

    void validate() const {
        if (losses.lambda1 < 0 || losses.lambda2 < 0) throw ConfigError("lambda1/lambda2 must be >= 0");
        if (!(losses.tau > 0)) throw ConfigError("tau must be > 0");
        if (!(losses.w > 0)) throw ConfigError("w must be > 0");
        if (losses.k < 1) throw ConfigError("k must be >= 1");
        if (eta < 0 || eta > 1) throw ConfigError("eta must lie in [0,1]");
        if (batch == 0) throw ConfigError("batch must be >= 1");
        if (!(lr > 0)) throw ConfigError("lr must be > 0");
        if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0,1)");
        if (ablation.fixed_mask_ratio) {
            const double r = *ablation.fixed_mask_ratio;
            if (!(r > 0) || r > 1) throw ConfigError("fixed_mask_ratio must lie in (0,1]");
        }
        if (!ablation.use_memory_bank && (!ablation.disable_l_neighbor || !ablation.disable_l_agree))
            throw ConfigError("the neighbor and agreement losses need the memory bank");
        if (openset_threshold < 0 || openset_threshold >= 1) throw ConfigError("openset_threshold must lie in [0,1)");
    }
};

/// Named ablation presets: full, no_l_task, no_l_neighbor, no_l_agree,
/// source_only, fixed:<ratio>.
inline void apply_preset(ExperimentConfig& cfg, const std::string& preset) {
    auto& a = cfg.ablation;
    if (preset == "full") {
    } else if (preset == "no_l_task") {
        a.disable_l_task = true;
    } else if (preset == "no_l_neighbor") {
        a.disable_l_neighbor = true;
    } else if (preset == "no_l_agree") {
        a.disable_l_agree = true;
    } else if (preset == "source_only") {
        cfg.losses.lambda1 = 0.0;
        cfg.losses.lambda2 = 0.0;
        a.disable_l_neighbor = true;
        a.disable_l_agree = true;
        a.fixed_mask_ratio = 1.0;
        a.use_memory_bank = false;
    } else if (preset.rfind("fixed:", 0) == 0) {
        try {
            a.fixed_mask_ratio = std::stod(preset.substr(6));
        } catch (const std::exception&) {
            throw ConfigError("bad fixed mask ratio in preset: " + preset);
        }
        if (!(*a.fixed_mask_ratio > 0) || *a.fixed_mask_ratio > 1)
            throw ConfigError("fixed mask ratio must lie in (0,1]: " + preset);
    } else {
        throw ConfigError("unknown ablation preset: " + preset);
    }
}

/// Constant binary mask: the first floor(ratio * D_h) channels are 1.
inline Tensor apply_fixed_mask(double ratio, std::size_t hidden_dim) {
    if (!(ratio > 0) || ratio > 1)
        throw ConfigError("fixed mask ratio must lie in (0,1]; an all-zero mask removes every feature");
    const auto ones = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(hidden_dim)));
    std::vector<double> m(hidden_dim, 0.0);
    std::fill_n(m.begin(), ones, 1.0);
    return Tensor({hidden_dim}, std::move(m));
}

struct TrainState {
    Model model;
    std::optional<NesterovSGD> optimizer;
    std::optional<MemoryBank> bank;
    std::vector<int> predicted_labels;  // per target training sample, refreshed each epoch
    std::size_t epoch = 0;              // completed epochs
    std::size_t step_in_epoch = 0;      // completed steps within the current epoch
    std::size_t global_step = 0;

    std::vector<Tensor> trainable(const AblationFlags& ablation) const {
        std::vector<Tensor> out;
        for (auto& [name, t] : model.named_parameters())
            if (!(ablation.fixed_mask_ratio && name.rfind("mask.", 0) == 0)) out.push_back(t);
        return out;
    }
};

/// Encoder input shape follows the data.
inline void fit_model_to_data(ExperimentConfig& cfg, const Dataset& source) {
    const auto& s = source.image_shape();
    auto& e = cfg.model.encoder;
    if (e.kind == EncoderKind::conv) {
        if (s.size() != 3 || s[1] != s[2]) throw ConfigError("conv encoder needs square C x S x S images");
        e.in_channels = s[0];
        e.image_size = s[1];
    } else {
        e.input_dim = source.image_size();
    }
}

inline TrainState init_state(const ExperimentConfig& cfg, std::size_t n_target) {
    TrainState st;
    Rng model_rng = derive_rng(cfg.seed, 0x30DE1);
    st.model = make_model(cfg.model, model_rng);
    st.optimizer.emplace(st.trainable(cfg.ablation), cfg.momentum);
    if (cfg.ablation.use_memory_bank) {
        Rng bank_rng = derive_rng(cfg.seed, 0xBA4C);
        st.bank = init_bank(n_target, cfg.model.embedding_dim, cfg.eta, cfg.losses.tau, bank_rng);
    }
    st.predicted_labels.assign(n_target, 0);
    return st;
}

inline double learning_rate(const ExperimentConfig& cfg, std::size_t epoch) {
    double lr = cfg.lr;
    for (double m : cfg.lr_milestones)
        if (static_cast<double>(epoch) >= m * static_cast<double>(cfg.epochs)) lr *= cfg.lr_decay;
    return lr;
}

namespace detail {

inline Tensor mask_for(const Tensor& h, const Model& model, const AblationFlags& ablation) {
    if (ablation.fixed_mask_ratio)
        return tile_rows(apply_fixed_mask(*ablation.fixed_mask_ratio, h.dim(1)), h.dim(0));
    return compute_mask(h, model.mask_net);
}

inline double mean_value(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v;
    return s / static_cast<double>(t.size());
}

}  // namespace detail

/// Neighbor sets for the bank rows addressed by a batch.
inline std::vector<std::vector<std::size_t>> neighbor_sets(const MemoryBank& bank,
                                                           std::span<const std::size_t> target_indices,
                                                           std::size_t k, TaskMode mode,
                                                           std::span<const int> predicted_labels) {
    std::vector<std::vector<std::size_t>> sets;
    sets.reserve(target_indices.size());
    const std::size_t kk = std::min(k, bank.rows() - 1);
    for (auto t : target_indices) {
        if (kk == 0) {
            sets.push_back({t});  // a one-row bank has no other anchors
        } else if (mode == TaskMode::open_set) {
            sets.push_back(topk_neighbors_openset(bank, t, kk));
        } else {
            sets.push_back(topk_neighbors_closeset(bank, t, kk, predicted_labels));
        }
    }
    return sets;
}

/// The differentiable part of one step: every loss term on one batch, with
/// the bank treated as constant. `rng` draws the two shuffle permutations.
struct StepGraph {
    LossBreakdown parts;
    Tensor total;
    Tensor emb_tt_normalized;
    Tensor logits_tt;
};

inline StepGraph forward_step(const TrainState& st, const DomainBatch& batch, const ExperimentConfig& cfg, Rng& rng) {
    const auto& ab = cfg.ablation;
    StepGraph g;
    auto& bd = g.parts;

    const Tensor h_s = encode(batch.x_source, st.model.encoder);
    const Tensor h_t = encode(batch.x_target, st.model.encoder);
    const Tensor m_s = detail::mask_for(h_s, st.model, ab);
    const Tensor m_t = detail::mask_for(h_t, st.model, ab);
    const DisentangledPair pair_s = disentangle(h_s, m_s);
    const DisentangledPair pair_t = disentangle(h_t, m_t);

    std::vector<std::size_t> pseudo;
    pseudo.reserve(batch.target_indices.size());
    for (auto t : batch.target_indices)
        pseudo.push_back(st.bank ? pseudo_label(t, st.bank->rows()) : t);
    const RearrangedBatch rb =
        build_rearranged_batch(pair_s, batch.y_source, pair_t, std::move(pseudo), rng, cfg.require_derangement);

    const TaskOutput out_ss = task_forward(rb.r_ss, st.model.task_net);
    const TaskOutput out_st = task_forward(rb.r_st, st.model.task_net);
    const TaskOutput out_ts = task_forward(rb.r_ts, st.model.task_net);
    const TaskOutput out_tt = task_forward(rb.r_tt, st.model.task_net);
    g.emb_tt_normalized = out_tt.normalized;
    g.logits_tt = out_tt.logits;

    const Tensor l1_s = mask_l1(m_s);
    const Tensor l1_t = mask_l1(m_t);
    bd.mask_l1_source = l1_s.item();
    bd.mask_l1_target = l1_t.item();
    bd.mean_mask_source = detail::mean_value(m_s);
    bd.mean_mask_target = detail::mean_value(m_t);

    Tensor task = Tensor::scalar(0.0);
    if (!ab.disable_l_task) {
        task = l_task(out_ss.logits, out_st.logits, rb.labels_source, m_s, cfg.losses.w);
        bd.l_task = task.item();
    }
    Tensor agree = Tensor::scalar(0.0);
    if (!ab.disable_l_agree) {
        agree = l_agree(out_ts.normalized, out_tt.normalized, rb.pseudo_labels_target, *st.bank, m_t, cfg.losses.w,
                         cfg.losses.reduction);
        bd.l_agree = agree.item();
    }
    Tensor neighbor = Tensor::scalar(0.0);
    if (!ab.disable_l_neighbor) {
        auto sets = neighbor_sets(*st.bank, batch.target_indices, cfg.losses.k, cfg.mode, st.predicted_labels);
        neighbor = l_neighbor(out_tt.normalized, *st.bank, sets, cfg.losses.reduction);
        bd.l_neighbor = neighbor.item();
    }
    g.total = total_loss(task, neighbor, agree, cfg.losses.lambda1, cfg.losses.lambda2);
    bd.total = g.total.item();
    return g;
}

/// One optimization step; the bank is refreshed after the parameter update
/// with the r_tt embeddings from this step's forward pass.
inline LossBreakdown train_step(TrainState& st, const DomainBatch& batch, const ExperimentConfig& cfg) {
    Rng rng = derive_rng(cfg.seed, 0x57E9, st.global_step);
    StepGraph g;
    try {
        g = forward_step(st, batch, cfg, rng);
        if (!std::isfinite(g.parts.total)) throw NumericError("non-finite total loss");
        st.optimizer->zero_grad();
        backward(g.total);
        st.optimizer->step(learning_rate(cfg, st.epoch));
        st.optimizer->zero_grad();
    } catch (const NumericError& e) {
        std::ostringstream os;
        os << "numeric failure at step " << st.global_step << ": " << e.what() << " (l_task=" << g.parts.l_task
           << " l_agree=" << g.parts.l_agree << " l_neighbor=" << g.parts.l_neighbor
           << " mean_mask_S=" << g.parts.mean_mask_source << " mean_mask_T=" << g.parts.mean_mask_target << ")";
        throw TrainingAborted(os.str(), st.global_step, g.parts);
    }
    if (st.bank) {
        const std::size_t D = st.bank->dim();
        auto e = g.emb_tt_normalized.data();
        for (std::size_t i = 0; i < batch.target_indices.size(); ++i)
            st.bank->update_row(batch.target_indices[i], e.subspan(i * D, D));
    }
    ++st.global_step;
    ++st.step_in_epoch;
    return g.parts;
}

// ---------------------------------------------------------------------------
// Inference

struct Inference {
    Tensor embedding;  // L2-normalized
    Tensor logits;
};

/// Task network outputs for a whole dataset, without recording a tape.
inline Inference infer(const Model& model, const Dataset& data, const AblationFlags& ablation, EvalInput input,
                       std::size_t chunk = 256) {
    NoGradGuard no_grad;
    std::vector<double> emb, logits;
    for (std::size_t start = 0; start < data.size(); start += chunk) {
        const std::size_t end = std::min(data.size(), start + chunk);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const Tensor h = encode(data.gather(idx), model.encoder);
        Tensor r = h;
        if (input == EvalInput::task_relevant) r = disentangle(h, detail::mask_for(h, model, ablation)).h_tr;
        const TaskOutput out = task_forward(r, model.task_net);
        emb.insert(emb.end(), out.normalized.data().begin(), out.normalized.data().end());
        logits.insert(logits.end(), out.logits.data().begin(), out.logits.data().end());
    }
    const std::size_t n = data.size();
    return {Tensor({n, model.spec.embedding_dim}, std::move(emb)),
            Tensor({n, model.spec.num_classes}, std::move(logits))};
}

/// Predicted source class of every target training sample, used to restrict
/// close-set neighborhoods.
inline void refresh_predictions(TrainState& st, const Dataset& target_train, const ExperimentConfig& cfg) {
    const Inference inf = infer(st.model, target_train, cfg.ablation, cfg.eval_input);
    const std::size_t C = st.model.spec.num_classes;
    st.predicted_labels.resize(target_train.size());
    for (std::size_t i = 0; i < target_train.size(); ++i)
        st.predicted_labels[i] = static_cast<int>(detail::argmax_row(inf.logits.data().subspan(i * C, C)));
}

/// Overwrites every bank row with the current model's normalized embedding
/// of the corresponding target training sample.
inline void seed_bank_from_model(TrainState& st, const Dataset& target_train, const ExperimentConfig& cfg) {
    const Inference inf = infer(st.model, target_train, cfg.ablation, EvalInput::full);
    std::vector<double> a(inf.embedding.data().begin(), inf.embedding.data().end());
    const std::size_t D = st.bank->dim();
    // Rows that are all zero (dead ReLU embedding) keep their Gaussian start.
    for (std::size_t i = 0; i < st.bank->rows(); ++i) {
        double ss = 0.0;
        for (std::size_t d = 0; d < D; ++d) ss += a[i * D + d] * a[i * D + d];
        if (ss == 0.0) std::copy_n(st.bank->row(i).begin(), D, a.begin() + static_cast<std::ptrdiff_t>(i * D));
    }
    st.bank = MemoryBank(st.bank->rows(), D, st.bank->eta(), st.bank->tau(), std::move(a));
}

/// Metric name -> value for one evaluation pass.
inline std::map<std::string, double> evaluate(const TrainState& st, const TwoDomainData& data,
                                              const ExperimentConfig& cfg) {
    std::map<std::string, double> m;
    const Inference src = infer(st.model, data.source_test, cfg.ablation, cfg.eval_input);
    m["source_acc"] = classification_accuracy(src.logits, EvalAccess::labels(data.source_test));
    const Inference tgt = infer(st.model, data.target_test, cfg.ablation, cfg.eval_input);
    auto truth = EvalAccess::labels(data.target_test);
    if (cfg.mode == TaskMode::close_set) {
        m["target_acc"] = classification_accuracy(tgt.logits, truth);
        m["target_class_acc"] = mean_class_accuracy(tgt.logits, truth);
    } else {
        // The first query_per_class samples of each identity are queries, the rest the gallery.
        std::map<int, std::size_t> seen;
        std::vector<std::size_t> qi, gi;
        std::vector<int> qid, gid;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (seen[truth[i]]++ < cfg.query_per_class) {
                qi.push_back(i);
                qid.push_back(truth[i]);
            } else {
                gi.push_back(i);
                gid.push_back(truth[i]);
            }
        }
        std::vector<std::size_t> q_ok;
        std::vector<int> q_ok_id;
        for (std::size_t j = 0; j < qi.size(); ++j)
            if (std::find(gid.begin(), gid.end(), qid[j]) != gid.end()) {
                q_ok.push_back(qi[j]);
                q_ok_id.push_back(qid[j]);
            }
        if (!q_ok.empty()) {
            const Tensor q = gather_rows(tgt.embedding, q_ok);
            const Tensor g = gather_rows(tgt.embedding, gi);
            const RetrievalResult r = evaluate_retrieval(q, q_ok_id, g, gid);
            for (auto& [k, v] : r.rank_k) m["rank" + std::to_string(k)] = v;
            m["mAP"] = r.mAP;
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Checkpointing

inline std::vector<NamedArray> state_arrays(const TrainState& st, const ExperimentConfig& cfg) {
    std::vector<NamedArray> out;
    for (auto& [name, t] : st.model.named_parameters()) out.push_back({name, t.shape(), t.values()});
    const auto& enc = st.model.spec.encoder;
    out.push_back({"model.first_activation", {}, {enc.first_activation == FirstActivation::abs ? 1.0 : 0.0}});
    out.push_back({"model.standardize_input", {}, {enc.standardize_input ? 1.0 : 0.0}});
    if (cfg.ablation.fixed_mask_ratio) out.push_back({"ablation.fixed_mask_ratio", {}, {*cfg.ablation.fixed_mask_ratio}});
    const auto& params = st.optimizer->params();
    const auto& vel = st.optimizer->velocities();
    auto named = st.model.named_parameters();
    for (std::size_t i = 0; i < params.size(); ++i)
        for (auto& [name, t] : named)
            if (t.same_node(params[i])) out.push_back({"optim.velocity." + name, t.shape(), vel[i]});
    if (st.bank) {
        out.push_back({"membank.A", {st.bank->rows(), st.bank->dim()},
                       std::vector<double>(st.bank->anchors().begin(), st.bank->anchors().end())});
        out.push_back({"membank.eta", {}, {st.bank->eta()}});
        out.push_back({"membank.tau", {}, {st.bank->tau()}});
    }
    out.push_back({"state.predicted_labels",
                   {st.predicted_labels.size()},
                   std::vector<double>(st.predicted_labels.begin(), st.predicted_labels.end())});
    out.push_back({"state.epoch", {}, {static_cast<double>(st.epoch)}});
    out.push_back({"state.step_in_epoch", {}, {static_cast<double>(st.step_in_epoch)}});
    out.push_back({"state.global_step", {}, {static_cast<double>(st.global_step)}});
    return out;
}

inline void save_checkpoint(const std::string& path, const TrainState& st, const ExperimentConfig& cfg) {
    write_checkpoint(path, state_arrays(st, cfg));
}

/// Inference-relevant settings recorded in a checkpoint override `cfg`.
inline void apply_checkpoint_settings(const std::map<std::string, NamedArray>& entries, ExperimentConfig& cfg) {
    if (auto it = entries.find("ablation.fixed_mask_ratio"); it != entries.end())
        cfg.ablation.fixed_mask_ratio = it->second.values.at(0);
    else
        cfg.ablation.fixed_mask_ratio.reset();
}

/// Restores into a state built by init_state() with the same config.
inline void load_checkpoint(const std::string& path, TrainState& st) {
    auto entries = read_checkpoint(path);
    auto fetch = [&](const std::string& name) -> const NamedArray& {
        auto it = entries.find(name);
        if (it == entries.end()) throw CheckpointError("checkpoint lacks entry " + name);
        return it->second;
    };
    auto named = st.model.named_parameters();
    for (auto& [name, t] : named) {
        const auto& a = fetch(name);
        if (a.shape != t.shape()) throw CheckpointError("shape mismatch for " + name);
        std::copy(a.values.begin(), a.values.end(), t.mutable_data().begin());
    }
    if (st.optimizer) {
        const auto& params = st.optimizer->params();
        auto& vel = st.optimizer->velocities();
        for (std::size_t i = 0; i < params.size(); ++i)
            for (auto& [name, t] : named)
                if (t.same_node(params[i])) {
                    auto it = entries.find("optim.velocity." + name);
                    if (it != entries.end() && it->second.values.size() == vel[i].size()) vel[i] = it->second.values;
                }
    }
    if (st.bank) {
        const auto& a = fetch("membank.A");
        st.bank = MemoryBank(a.shape.at(0), a.shape.at(1), fetch("membank.eta").values.at(0),
                             fetch("membank.tau").values.at(0), a.values);
    }
    if (auto it = entries.find("state.predicted_labels"); it != entries.end())
        st.predicted_labels.assign(it->second.values.begin(), it->second.values.end());
    if (auto it = entries.find("state.epoch"); it != entries.end())
        st.epoch = static_cast<std::size_t>(it->second.values.at(0));
    if (auto it = entries.find("state.step_in_epoch"); it != entries.end())
        st.step_in_epoch = static_cast<std::size_t>(it->second.values.at(0));
    if (auto it = entries.find("state.global_step"); it != entries.end())
        st.global_step = static_cast<std::size_t>(it->second.values.at(0));
}

/// Rebuilds a model whose layer sizes are read from a checkpoint.
inline Model model_from_checkpoint(const std::map<std::string, NamedArray>& entries, std::size_t image_size) {
    ModelSpec spec;
    auto get = [&](const std::string& n) -> const NamedArray& {
        auto it = entries.find(n);
        if (it == entries.end()) throw CheckpointError("checkpoint lacks entry " + n);
        return it->second;
    };
    if (entries.count("encoder.conv0.weight")) {
        spec.encoder.kind = EncoderKind::conv;
        spec.encoder.conv1_channels = get("encoder.conv0.weight").shape.at(0);
        spec.encoder.in_channels = get("encoder.conv0.weight").shape.at(1);
        spec.encoder.conv2_channels = get("encoder.conv1.weight").shape.at(0);
        spec.encoder.image_size = image_size;
    } else {
        spec.encoder.kind = EncoderKind::mlp;
        spec.encoder.input_dim = get("encoder.fc0.weight").shape.at(0);
        for (std::size_t i = 0; entries.count("encoder.fc" + std::to_string(i + 1) + ".weight"); ++i)
            spec.encoder.mlp_hidden.push_back(get("encoder.fc" + std::to_string(i) + ".weight").shape.at(1));
    }
    if (auto it = entries.find("model.first_activation"); it != entries.end())
        spec.encoder.first_activation = it->second.values.at(0) != 0.0 ? FirstActivation::abs : FirstActivation::relu;
    if (auto it = entries.find("model.standardize_input"); it != entries.end())
        spec.encoder.standardize_input = it->second.values.at(0) != 0.0;
    spec.hidden_dim = get("mask.fc0.weight").shape.at(0);
    spec.embedding_dim = get("task.embed.weight").shape.at(1);
    spec.num_classes = get("task.head.weight").shape.at(1);
    Rng rng(0);
    Model m = make_model(spec, rng);
    for (auto& [name, t] : m.named_parameters()) {
        const auto& a = get(name);
        if (a.shape != t.shape()) throw CheckpointError("shape mismatch for " + name);
        std::copy(a.values.begin(), a.values.end(), t.mutable_data().begin());
    }
    return m;
}

// ---------------------------------------------------------------------------
// Experiment driver

inline TwoDomainData load_data(const ExperimentConfig& cfg) {
    if (cfg.idx_source_images.empty()) return synth_two_domain(cfg.data, cfg.seed);
    if (cfg.idx_target_images.empty()) throw ConfigError("IDX mode needs both source and target image files");
    // IDX mode: training and evaluation share the files; target labels stay sealed.
    TwoDomainData d;
    d.source_train = load_idx(cfg.idx_source_images, cfg.idx_source_labels, Domain::source);
    d.target_train = load_idx(cfg.idx_target_images, cfg.idx_target_labels, Domain::target);
    d.source_test = d.source_train;
    d.target_test = d.target_train;
    return d;
}

struct RunResult {
    std::vector<LossBreakdown> losses;                           // one per step
    std::vector<std::map<std::string, double>> metrics;          // index = epoch (0 = before training)
    std::vector<double> epoch_mean_mask;                         // mean target-side mask per epoch
    TrainState state;
};

struct RunOptions {
    std::ostream* losses_csv = nullptr;  // receives the header and one row per step
    std::ostream* metrics_csv = nullptr;
    // Stop after this many global steps (for checkpoint/resume tests).
    std::optional<std::size_t> stop_after_steps;
    // Resume from an existing state instead of initializing.
    TrainState* resume = nullptr;
    // When false, only the final model is evaluated.
    bool evaluate_each_epoch = true;
};

inline void emit_metrics(std::ostream* os, const ExperimentConfig& cfg, std::size_t epoch,
                         const std::map<std::string, double>& m) {
    if (!os) return;
    for (auto& [k, v] : m) write_metric_row(*os, cfg.run_id, epoch, k, v);
}

inline RunResult train_and_evaluate(ExperimentConfig cfg, const RunOptions& opt = {}) {
    cfg.validate();
    cfg.losses.validate();
    TwoDomainData data = load_data(cfg);
    fit_model_to_data(cfg, data.source_train);
    if (cfg.model.num_classes < 2) throw ConfigError("need at least two source classes");
    for (int y : data.source_train.labels())
        if (y < 0 || static_cast<std::size_t>(y) >= cfg.model.num_classes)
            throw ConfigError("source label " + std::to_string(y) + " exceeds the configured class count");

    RunResult res;
    res.state = opt.resume ? std::move(*opt.resume) : init_state(cfg, data.target_train.size());
    TrainState& st = res.state;
    if (!opt.resume && st.bank && cfg.bank_init == BankInit::features) seed_bank_from_model(st, data.target_train, cfg);

    if (opt.losses_csv) *opt.losses_csv << LossBreakdown::csv_header << '\n';
    if (opt.evaluate_each_epoch && st.global_step == 0) {
        res.metrics.push_back(evaluate(st, data, cfg));
        emit_metrics(opt.metrics_csv, cfg, 0, res.metrics.back());
    }

    while (st.epoch < cfg.epochs) {
        if (st.step_in_epoch == 0) refresh_predictions(st, data.target_train, cfg);
        const auto plan = plan_epoch(data.source_train.size(), data.target_train.size(), cfg.batch, cfg.seed, st.epoch);
        double mask_sum = 0.0;
        std::size_t mask_n = 0;
        while (st.step_in_epoch < plan.size()) {
            if (opt.stop_after_steps && st.global_step >= *opt.stop_after_steps) return res;
            const DomainBatch batch = materialize(plan[st.step_in_epoch], data.source_train, data.target_train);
            const LossBreakdown bd = train_step(st, batch, cfg);
            if (opt.losses_csv) bd.write_csv_row(*opt.losses_csv, st.global_step);
            res.losses.push_back(bd);
            mask_sum += bd.mean_mask_target;
            ++mask_n;
        }
        res.epoch_mean_mask.push_back(mask_n ? mask_sum / static_cast<double>(mask_n) : 0.0);
        st.step_in_epoch = 0;
        ++st.epoch;
        if (opt.evaluate_each_epoch) {
            res.metrics.push_back(evaluate(st, data, cfg));
            emit_metrics(opt.metrics_csv, cfg, st.epoch, res.metrics.back());
        }
    }
    if (!opt.evaluate_each_epoch) {
        res.metrics.push_back(evaluate(st, data, cfg));
        emit_metrics(opt.metrics_csv, cfg, st.epoch, res.metrics.back());
    }
    return res;
}

/// Trains and writes losses.csv, metrics.csv, checkpoint.bin and summary.txt
/// into cfg.out_dir.
inline RunResult run_experiment(const ExperimentConfig& cfg) {
    namespace fs = std::filesystem;
    if (cfg.out_dir.empty()) throw ConfigError("run_experiment needs an output directory");
    fs::create_directories(cfg.out_dir);
    std::ofstream losses(fs::path(cfg.out_dir) / "losses.csv");
    std::ofstream metrics(fs::path(cfg.out_dir) / "metrics.csv");
    if (!losses || !metrics) throw std::runtime_error("cannot write into " + cfg.out_dir);
    metrics << "run_id,epoch,metric,value\n";
    RunOptions opt;
    opt.losses_csv = &losses;
    opt.metrics_csv = &metrics;
    RunResult res = train_and_evaluate(cfg, opt);
    save_checkpoint((fs::path(cfg.out_dir) / "checkpoint.bin").string(), res.state, cfg);

    std::ofstream summary(fs::path(cfg.out_dir) / "summary.txt");
    summary << "run_id: " << cfg.run_id << "\nseed: " << cfg.seed << "\nepochs: " << cfg.epochs
            << "\nsteps: " << res.state.global_step << '\n';
    if (!res.losses.empty()) {
        const auto& last = res.losses.back();
        summary << "final_total_loss: " << last.total << "\nfinal_mean_mask_T: " << last.mean_mask_target << '\n';
    }
    if (!res.metrics.empty())
        for (auto& [k, v] : res.metrics.back()) summary << "final_" << k << ": " << v << '\n';
    return res;
}

}  // namespace dtdn
