#include "hierprobe/training.hpp"

#include <cmath>
#include <ostream>
#include <sstream>

#include "hierprobe/util.hpp"

namespace hierprobe {

Regime parse_regime(const std::string& name) {
    if (name == "std") return Regime::STD;
    if (name == "at") return Regime::AT;
    if (name == "at_c" || name == "atc") return Regime::ATC;
    throw UsageError("unknown regime '" + name + "' (expected std, at or at_c)");
}

std::string regime_name(Regime r) {
    switch (r) {
        case Regime::STD: return "std";
        case Regime::AT: return "at";
        case Regime::ATC: return "at_c";
    }
    return "?";
}

void TrainConfig::validate() const {
    if (epochs < 0) throw ContractError("epochs must be >= 0");
    if (batch_size < 1) throw ContractError("batch size must be >= 1");
    if (lr <= 0.0) throw ContractError("learning rate must be > 0");
    if (momentum < 0.0 || weight_decay < 0.0)
        throw ContractError("momentum and weight decay must be >= 0");
    if (lambda_reg < 0.0) throw ContractError("lambda must be >= 0");
    for (std::size_t i = 1; i < lr_decay_epochs.size(); ++i)
        if (lr_decay_epochs[i] <= lr_decay_epochs[i - 1])
            throw ContractError("lr decay epochs must be strictly increasing");
    if (regime != Regime::STD) inner_attack.validate();
    eval_attack.validate();
}

void RunManifest::add_header(const std::string& key, const std::string& value) {
    header.push_back(key + "=" + value);
}

std::string RunManifest::epoch_line(const EpochStats& s) {
    std::ostringstream os;
    os << "epoch=" << s.epoch << " lr=" << format_g17(s.lr) << " loss=" << format_g17(s.loss)
       << " l_reg=" << format_g17(s.l_reg) << " clean_acc=" << format_g17(s.clean_acc)
       << " robust_acc=" << format_g17(s.robust_acc);
    return os.str();
}

std::string RunManifest::to_text() const {
    std::string out;
    for (const auto& h : header) out += h + "\n";
    out += "---\n";
    for (const auto& e : epochs) out += epoch_line(e) + "\n";
    return out;
}

void sgd_step(std::vector<Parameter>& params, SgdState& state, double lr, double momentum,
              double weight_decay) {
    if (state.velocity.empty()) {
        state.velocity.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i)
            state.velocity[i].assign(params[i].tensor.size(), 0.0);
    }
    if (state.velocity.size() != params.size())
        throw ContractError("sgd state does not match parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        const auto g = p.tensor.grad();
        if (g.empty())
            throw ContractError("parameter " + p.name + " has no gradient for sgd step");
        auto theta = p.tensor.mutable_data();
        auto& v = state.velocity[i];
        for (std::size_t k = 0; k < theta.size(); ++k) {
            if (!std::isfinite(g[k]))
                throw NumericError("non-finite gradient in parameter " + p.name);
            v[k] = momentum * v[k] + g[k] + weight_decay * theta[k];
            theta[k] -= lr * v[k];
        }
    }
}

Tensor clustering_regularization_loss(const Tensor& logits, const HierarchyPartition& partition,
                                      bool per_example_mean) {
    return group_deviation_loss(logits, partition.groups, per_example_mean);
}

namespace {

double epoch_lr(const TrainConfig& cfg, int epoch) {
    double lr = cfg.lr;
    for (int d : cfg.lr_decay_epochs)
        if (epoch > d) lr *= cfg.lr_decay_factor;
    return lr;
}

void flush_live(std::ostream* live, const std::string& line) {
    if (live) {
        (*live) << line << "\n";
        live->flush();
    }
}

std::string attack_echo(const AttackConfig& a) {
    std::ostringstream os;
    os << "eps=" << format_g17(a.epsilon) << " alpha=" << format_g17(a.step_size)
       << " steps=" << a.steps << " random_start=" << (a.random_start ? 1 : 0);
    return os.str();
}

// Labels are fine labels except when coarse_labels is set (finetuning).
TrainResult run_training(Network net, const DatasetPair& data, const TrainConfig& cfg,
                         const HierarchyPartition* reg_partition, bool coarse_labels,
                         const std::vector<std::string>& extra_header, std::ostream* live) {
    cfg.validate();
    data.train.validate();
    const int expected_classes = coarse_labels ? data.train.hierarchy.num_superclasses()
                                               : data.train.hierarchy.num_fine();
    if (net.num_classes() != expected_classes)
        throw ContractError("network has " + std::to_string(net.num_classes()) +
                            " outputs but the task has " + std::to_string(expected_classes) +
                            " classes");
    if (net.input_dims() != data.train.dims())
        throw DimensionError("network input dims do not match dataset dims");

    const bool attack_inner = cfg.regime != Regime::STD;
    const bool use_reg = cfg.regime == Regime::ATC && cfg.lambda_reg > 0.0 && reg_partition;

    Rng shuffle_rng(split_seed(cfg.seed, 11));
    Rng attack_rng(split_seed(cfg.seed, 12));
    SgdState sgd;

    RunManifest manifest;
    manifest.add_header("seed", std::to_string(cfg.seed));
    manifest.add_header("regime", regime_name(cfg.regime));
    manifest.add_header("epochs", std::to_string(cfg.epochs));
    manifest.add_header("batch_size", std::to_string(cfg.batch_size));
    manifest.add_header("lr", format_g17(cfg.lr));
    manifest.add_header("momentum", format_g17(cfg.momentum));
    manifest.add_header("weight_decay", format_g17(cfg.weight_decay));
    {
        std::string d;
        for (int e : cfg.lr_decay_epochs) d += (d.empty() ? "" : ",") + std::to_string(e);
        manifest.add_header("lr_decay_epochs", d.empty() ? "none" : d);
        manifest.add_header("lr_decay_factor", format_g17(cfg.lr_decay_factor));
    }
    if (attack_inner) manifest.add_header("inner_attack", attack_echo(cfg.inner_attack));
    manifest.add_header("eval_attack", attack_echo(cfg.eval_attack));
    if (cfg.regime == Regime::ATC) {
        manifest.add_header("lambda", format_g17(cfg.lambda_reg));
        manifest.add_header("reg_per_example_mean", cfg.reg_per_example_mean ? "1" : "0");
    }
    manifest.add_header("dataset_fingerprint", hex64(dataset_fingerprint(data)));
    manifest.add_header("labels", coarse_labels ? "coarse" : "fine");
    for (const auto& line : extra_header) manifest.header.push_back(line);

    if (live) {
        for (const auto& h : manifest.header) (*live) << h << "\n";
        (*live) << "---\n";
        live->flush();
    }

    const HierarchicalDataset& eval_split = data.test.size() ? data.test : data.train;

    Network best_net;
    int best_epoch = 0;
    double best_robust = -1.0;

    Tape& tape = Tape::active();
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const double lr = epoch_lr(cfg, epoch);
        const auto batches = make_batches(data.train.size(), cfg.batch_size, shuffle_rng);

        double loss_sum = 0.0, reg_sum = 0.0;
        for (const auto& idx : batches) {
            Tensor x = data.train.batch(idx);
            const std::vector<int> y =
                coarse_labels ? data.train.batch_coarse(idx) : data.train.batch_fine(idx);

            if (attack_inner) {
                auto adv = cfg.inner_attack.steps >= 1
                               ? pgd(net, x, y, cfg.inner_attack, attack_rng)
                               : fgsm(net, x, y, cfg.inner_attack);
                x = adv.perturbed;
            }

            tape.reset();
            net.zero_grads();
            net.set_mode(Mode::Train);
            Tensor logits = net.forward(x);
            Tensor ce = softmax_cross_entropy(logits, y);
            Tensor loss = ce;
            double reg_value = 0.0;
            if (use_reg) {
                Tensor reg = clustering_regularization_loss(logits, *reg_partition,
                                                            cfg.reg_per_example_mean);
                reg_value = reg.value();
                loss = add(ce, scale(reg, cfg.lambda_reg));
            }
            const double loss_value = loss.value();
            if (!std::isfinite(loss_value)) {
                flush_live(live, "error=training diverged: non-finite loss at epoch " +
                                     std::to_string(epoch));
                throw NumericError("training diverged: non-finite loss at epoch " +
                                   std::to_string(epoch));
            }
            tape.backward(loss);
            tape.reset();
            sgd_step(net.parameters(), sgd, lr, cfg.momentum, cfg.weight_decay);

            loss_sum += loss_value;
            reg_sum += reg_value;
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = lr;
        stats.loss = loss_sum / static_cast<double>(batches.size());
        stats.l_reg = reg_sum / static_cast<double>(batches.size());
        {
            net.set_mode(Mode::Eval);
            if (coarse_labels) {
                stats.clean_acc = evaluate(net, eval_split, LabelKind::Coarse, nullptr, cfg.batch_size);
                stats.robust_acc = stats.clean_acc; // attacks target fine-label training only
            } else {
                stats.clean_acc = clean_accuracy(net, eval_split, cfg.batch_size);
                Rng eval_rng(split_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
                stats.robust_acc = cfg.eval_attack.epsilon > 0.0
                                       ? robust_accuracy(net, eval_split, cfg.eval_attack, eval_rng,
                                                         cfg.batch_size)
                                       : stats.clean_acc;
            }
        }
        manifest.epochs.push_back(stats);
        flush_live(live, RunManifest::epoch_line(stats));

        if (stats.robust_acc > best_robust) {
            best_robust = stats.robust_acc;
            best_epoch = epoch;
            best_net = clone_network(net);
            best_net.set_mode(Mode::Eval);
            best_net.meta().epoch = epoch;
            best_net.meta().seed = cfg.seed;
        }
    }

    net.set_mode(Mode::Eval);
    net.meta().epoch = cfg.epochs;
    net.meta().seed = cfg.seed;
    if (best_epoch == 0) { // zero-epoch runs have no snapshot
        best_net = clone_network(net);
        best_epoch = cfg.epochs;
    }
    TrainResult out;
    out.net = std::move(net);
    out.best_net = std::move(best_net);
    out.best_epoch = best_epoch;
    out.manifest = std::move(manifest);
    return out;
}

} // namespace

TrainResult train_standard(Network net, const DatasetPair& data, const TrainConfig& cfg,
                           std::ostream* live) {
    if (cfg.regime != Regime::STD) throw ContractError("train_standard needs regime std");
    return run_training(std::move(net), data, cfg, nullptr, false, {}, live);
}

TrainResult train_adversarial(Network net, const DatasetPair& data, const TrainConfig& cfg,
                              std::ostream* live) {
    if (cfg.regime != Regime::AT) throw ContractError("train_adversarial needs regime at");
    return run_training(std::move(net), data, cfg, nullptr, false, {}, live);
}

ClusteredTrainResult train_clustered(const Network& pretrained_robust, const DatasetPair& data,
                                     const TrainConfig& cfg, std::ostream* live) {
    if (cfg.regime != Regime::ATC) throw ContractError("train_clustered needs regime at_c");
    cfg.validate();

    ClusteredTrainResult out;

    // hierarchy extraction from the pretrained robust model
    {
        Network linear = linearize(pretrained_robust);
        Rng probe_rng(split_seed(cfg.seed, 31));
        const auto dims = pretrained_robust.input_dims();
        Tensor probe = Tensor::zeros({1, dims[0], dims[1], dims[2]});
        for (auto& v : probe.mutable_data()) v = probe_rng.uniform();
        auto [w, b] = extract_weight_matrix(linear, probe);
        (void)b;
        const CorrelationMatrix c = correlation_matrix(w);
        const SignMatrix c_op = sign_approximation(c);
        out.partition = extract_hierarchy(c_op);
        out.inconsistencies = partition_inconsistency_count(c_op, out.partition);
        out.degenerate_hierarchy = out.partition.groups.size() <= 1 ||
                                   out.partition.groups.size() ==
                                       static_cast<std::size_t>(c_op.n);
    }

    std::ostringstream part;
    for (std::size_t g = 0; g < out.partition.groups.size(); ++g) {
        if (g) part << " | ";
        for (std::size_t i = 0; i < out.partition.groups[g].size(); ++i) {
            if (i) part << " ";
            part << out.partition.groups[g][i];
        }
    }
    std::vector<std::string> extra{
        "extracted_hierarchy=" + part.str(),
        "hierarchy_inconsistencies=" + std::to_string(out.inconsistencies)};
    if (out.degenerate_hierarchy) extra.push_back("degenerate_hierarchy=true");

    Network fresh = reinitialized_like(pretrained_robust, split_seed(cfg.seed, 41));
    TrainResult r = run_training(std::move(fresh), data, cfg, &out.partition, false, extra, live);

    out.net = std::move(r.net);
    out.best_net = std::move(r.best_net);
    out.best_epoch = r.best_epoch;
    out.manifest = std::move(r.manifest);
    return out;
}

TrainResult finetune(const Network& net, const DatasetPair& target_data, int epochs, double lr,
                     const TrainConfig& base_cfg, std::ostream* live) {
    const int coarse = target_data.train.hierarchy.num_superclasses();
    Network head = with_fresh_head(net, coarse, split_seed(base_cfg.seed, 21));
    if (epochs == 0) {
        RunManifest manifest;
        manifest.add_header("seed", std::to_string(base_cfg.seed));
        manifest.add_header("finetune_epochs", "0");
        head.set_mode(Mode::Eval);
        TrainResult out;
        out.best_net = clone_network(head);
        out.net = std::move(head);
        out.manifest = std::move(manifest);
        return out;
    }
    TrainConfig cfg = base_cfg;
    cfg.regime = Regime::STD;
    cfg.epochs = epochs;
    cfg.lr = lr;
    cfg.lr_decay_epochs.clear();
    cfg.eval_attack = AttackConfig{}; // epsilon 0: clean metric only
    cfg.seed = split_seed(base_cfg.seed, 22);
    return run_training(std::move(head), target_data, cfg, nullptr, true,
                        {"finetune_epochs=" + std::to_string(epochs)}, live);
}

double evaluate(Network& net, const HierarchicalDataset& data, LabelKind kind,
                const HierarchySpec* hierarchy, int batch_size) {
    if (data.size() == 0) throw ContractError("evaluate on empty dataset");
    Tape::NoGradGuard off;
    const Mode saved = net.mode();
    net.set_mode(Mode::Eval);

    const bool coarse_net =
        kind == LabelKind::Coarse && net.num_classes() == data.hierarchy.num_superclasses() &&
        !hierarchy;
    if (kind == LabelKind::Coarse && !coarse_net) {
        if (!hierarchy)
            throw ContractError("coarse evaluation of a fine classifier needs a hierarchy");
        if (hierarchy->num_fine() != net.num_classes())
            throw ContractError("hierarchy maps " + std::to_string(hierarchy->num_fine()) +
                                " fine classes but network outputs " +
                                std::to_string(net.num_classes()));
    }

    std::size_t correct = 0;
    std::vector<int> idx;
    for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(batch_size)) {
        idx.clear();
        for (std::size_t j = i; j < std::min(data.size(), i + static_cast<std::size_t>(batch_size)); ++j)
            idx.push_back(static_cast<int>(j));
        const auto preds = argmax_rows(net.forward(data.batch(idx)));
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const std::size_t rec = static_cast<std::size_t>(idx[r]);
            if (kind == LabelKind::Fine) {
                if (preds[r] == data.fine_labels[rec]) ++correct;
            } else {
                const int pred_coarse =
                    coarse_net ? preds[r]
                               : hierarchy->fine_to_coarse[static_cast<std::size_t>(preds[r])];
                if (pred_coarse == data.coarse_labels[rec]) ++correct;
            }
        }
    }
    net.set_mode(saved);
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

} // namespace hierprobe
