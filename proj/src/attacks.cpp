#include "hierprobe/attacks.hpp"

#include <algorithm>
#include <cmath>

namespace hierprobe {

void AttackConfig::validate() const {
    if (epsilon < 0.0) throw ContractError("attack epsilon must be >= 0");
    if (steps < 0) throw ContractError("attack steps must be >= 0");
    if (steps >= 1 && step_size <= 0.0)
        throw ContractError("attack step_size must be > 0 when steps >= 1");
    if (lo >= hi) throw ContractError("attack pixel bounds must satisfy lo < hi");
}

AttackConfig attack_preset(const std::string& name) {
    AttackConfig c;
    if (name == "fgsm") {
        c.epsilon = 8.0 / 255.0;
        c.step_size = 8.0 / 255.0;
        c.steps = 0;
    } else if (name == "pgd10") {
        c.epsilon = 8.0 / 255.0;
        c.step_size = 2.0 / 255.0;
        c.steps = 10;
        c.random_start = true;
    } else if (name == "pgd20") {
        c.epsilon = 8.0 / 255.0;
        c.step_size = 0.003;
        c.steps = 20;
    } else if (name == "pgd7_3") {
        c.epsilon = 3.0 / 255.0;
        c.step_size = 1.0 / 255.0;
        c.steps = 7;
    } else if (name == "pgd5_2") {
        c.epsilon = 2.0 / 255.0;
        c.step_size = 1.0 / 255.0;
        c.steps = 5;
    } else if (name == "pgd5_1.5") {
        c.epsilon = 1.5 / 255.0;
        c.step_size = 0.5 / 255.0;
        c.steps = 5;
    } else if (name == "pgd3_1") {
        c.epsilon = 1.0 / 255.0;
        c.step_size = 0.5 / 255.0;
        c.steps = 3;
    } else if (name == "pgd1_0.5") {
        c.epsilon = 0.5 / 255.0;
        c.step_size = 0.5 / 255.0;
        c.steps = 1;
    } else if (name == "desk_train") {
        // scaled-epsilon settings for the synthetic desk tasks
        c.epsilon = 0.025;
        c.step_size = 0.00625;
        c.steps = 7;
        c.random_start = true;
    } else if (name == "desk_eval") {
        c.epsilon = 0.025;
        c.step_size = 0.00625;
        c.steps = 20;
    } else {
        throw UsageError("unknown attack preset '" + name + "'");
    }
    return c;
}

std::vector<std::string> attack_preset_names() {
    return {"fgsm",   "pgd10",  "pgd20", "pgd7_3",     "pgd5_2",
            "pgd5_1.5", "pgd3_1", "pgd1_0.5", "desk_train", "desk_eval"};
}

namespace {

double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// gradient of the cross-entropy at x w.r.t. x, eval-mode forward
std::vector<double> input_gradient(Network& net, const Tensor& x, const std::vector<int>& labels) {
    Tape& tape = Tape::active();
    tape.reset();
    Tensor input = x.detach();
    input.set_requires_grad(true);
    Tensor logits = net.forward(input);
    Tensor loss = softmax_cross_entropy(logits, labels);
    tape.backward(loss);
    tape.reset();
    std::vector<double> g(input.grad().begin(), input.grad().end());
    for (double v : g)
        if (!std::isfinite(v)) throw NumericError("non-finite input gradient during attack");
    return g;
}

std::vector<int> predict(Network& net, const Tensor& x) {
    Tape::NoGradGuard off;
    return argmax_rows(net.forward(x));
}

} // namespace

void check_perturbation_feasible(const AdversarialBatch& batch, const AttackConfig& cfg) {
    const auto orig = batch.original.data();
    const auto pert = batch.perturbed.data();
    for (std::size_t i = 0; i < orig.size(); ++i) {
        if (std::abs(pert[i] - orig[i]) > cfg.epsilon + 1e-9)
            throw ContractError("adversarial example leaves the epsilon ball at pixel " +
                                std::to_string(i));
        if (pert[i] < cfg.lo - 1e-12 || pert[i] > cfg.hi + 1e-12)
            throw ContractError("adversarial pixel out of bounds at " + std::to_string(i));
    }
}

AdversarialBatch fgsm(Network& net, const Tensor& x, const std::vector<int>& labels,
                      const AttackConfig& cfg) {
    cfg.validate();
    const Mode saved = net.mode();
    net.set_mode(Mode::Eval);

    AdversarialBatch out;
    out.original = x.detach();
    out.labels = labels;
    out.pred_before = predict(net, out.original);

    const auto g = input_gradient(net, out.original, labels);
    Tensor adv = out.original.detach();
    auto pa = adv.mutable_data();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        double v = pa[i] + cfg.epsilon * sign0(g[i]);
        v = std::min(std::max(v, cfg.lo), cfg.hi);
        pa[i] = v;
    }
    out.perturbed = adv;
    out.pred_after = predict(net, adv);

    net.set_mode(saved);
    check_perturbation_feasible(out, cfg);
    return out;
}

AdversarialBatch pgd(Network& net, const Tensor& x, const std::vector<int>& labels,
                     const AttackConfig& cfg, Rng& rng, const std::vector<int>& targets) {
    cfg.validate();
    if (cfg.steps < 1) throw ContractError("pgd needs steps >= 1");
    if (cfg.targeted && targets.size() != labels.size())
        throw ContractError("targeted pgd needs one target per example");

    const Mode saved = net.mode();
    net.set_mode(Mode::Eval);

    AdversarialBatch out;
    out.original = x.detach();
    out.labels = labels;
    if (cfg.targeted) out.targets = targets;
    out.pred_before = predict(net, out.original);

    const auto orig = out.original.data();
    Tensor cur = out.original.detach();
    if (cfg.random_start) {
        auto pc = cur.mutable_data();
        for (std::size_t i = 0; i < pc.size(); ++i) {
            double v = pc[i] + rng.uniform(-cfg.epsilon, cfg.epsilon);
            pc[i] = std::min(std::max(v, cfg.lo), cfg.hi);
        }
    }

    const std::vector<int>& loss_labels = cfg.targeted ? targets : labels;
    const double dir = cfg.targeted ? -1.0 : 1.0;
    for (int k = 0; k < cfg.steps; ++k) {
        const auto g = input_gradient(net, cur, loss_labels);
        auto pc = cur.mutable_data();
        for (std::size_t i = 0; i < pc.size(); ++i) {
            double v = pc[i] + dir * cfg.step_size * sign0(g[i]);
            const double lo_i = std::max(cfg.lo, orig[i] - cfg.epsilon);
            const double hi_i = std::min(cfg.hi, orig[i] + cfg.epsilon);
            pc[i] = std::min(std::max(v, lo_i), hi_i);
        }
    }

    out.perturbed = cur;
    out.pred_after = predict(net, cur);
    net.set_mode(saved);
    check_perturbation_feasible(out, cfg);
    return out;
}

namespace {

AdversarialBatch run_attack(Network& net, const Tensor& x, const std::vector<int>& labels,
                            const AttackConfig& cfg, Rng& rng, const std::vector<int>& targets = {}) {
    if (cfg.steps < 1) {
        if (cfg.targeted) throw ContractError("targeted attack needs steps >= 1");
        return fgsm(net, x, labels, cfg);
    }
    return pgd(net, x, labels, cfg, rng, targets);
}

} // namespace

double clean_accuracy(Network& net, const HierarchicalDataset& data, int batch_size) {
    if (data.size() == 0) throw ContractError("accuracy on empty dataset");
    Tape::NoGradGuard off;
    const Mode saved = net.mode();
    net.set_mode(Mode::Eval);
    std::size_t correct = 0;
    std::vector<int> idx;
    for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(batch_size)) {
        idx.clear();
        for (std::size_t j = i; j < std::min(data.size(), i + static_cast<std::size_t>(batch_size)); ++j)
            idx.push_back(static_cast<int>(j));
        const auto preds = argmax_rows(net.forward(data.batch(idx)));
        for (std::size_t r = 0; r < idx.size(); ++r)
            if (preds[r] == data.fine_labels[static_cast<std::size_t>(idx[r])]) ++correct;
    }
    net.set_mode(saved);
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

double robust_accuracy(Network& net, const HierarchicalDataset& data, const AttackConfig& cfg,
                       Rng& rng, int batch_size) {
    if (data.size() == 0) throw ContractError("robust accuracy on empty dataset");
    std::size_t correct = 0;
    std::vector<int> idx;
    for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(batch_size)) {
        idx.clear();
        for (std::size_t j = i; j < std::min(data.size(), i + static_cast<std::size_t>(batch_size)); ++j)
            idx.push_back(static_cast<int>(j));
        const auto labels = data.batch_fine(idx);
        const auto batch = run_attack(net, data.batch(idx), labels, cfg, rng);
        for (std::size_t r = 0; r < idx.size(); ++r)
            if (batch.pred_after[r] == labels[r]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

AttackConfusionMatrix attack_confusion_matrix(Network& net, const HierarchicalDataset& data,
                                              const AttackConfig& cfg, Rng& rng, int batch_size) {
    if (data.size() == 0) throw ContractError("confusion matrix on empty dataset");
    const int K = data.hierarchy.num_fine();

    AttackConfusionMatrix m;
    m.mode = cfg.targeted ? AttackConfusionMatrix::Kind::Targeted
                          : AttackConfusionMatrix::Kind::Untargeted;
    m.n = K;
    m.values.assign(static_cast<std::size_t>(K) * K, 0.0);
    m.class_counts.assign(static_cast<std::size_t>(K), 0);

    for (int y : data.fine_labels) ++m.class_counts[static_cast<std::size_t>(y)];
    std::string missing;
    for (int k = 0; k < K; ++k)
        if (m.class_counts[static_cast<std::size_t>(k)] == 0) missing += " " + std::to_string(k);
    if (!missing.empty())
        throw ContractError("confusion matrix needs every class represented; missing:" + missing);

    // clean error rate is recorded, misclassified examples are not excluded
    m.clean_error_rate = 1.0 - clean_accuracy(net, data, batch_size);

    std::vector<int> idx;
    if (!cfg.targeted) {
        for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(batch_size)) {
            idx.clear();
            for (std::size_t j = i; j < std::min(data.size(), i + static_cast<std::size_t>(batch_size)); ++j)
                idx.push_back(static_cast<int>(j));
            const auto labels = data.batch_fine(idx);
            const auto batch = run_attack(net, data.batch(idx), labels, cfg, rng);
            for (std::size_t r = 0; r < idx.size(); ++r)
                m.values[static_cast<std::size_t>(labels[r]) * K + batch.pred_after[r]] += 1.0;
        }
        for (int i = 0; i < K; ++i)
            for (int j = 0; j < K; ++j)
                m.values[static_cast<std::size_t>(i) * K + j] /=
                    static_cast<double>(m.class_counts[static_cast<std::size_t>(i)]);
    } else {
        // group example indices by true class once
        std::vector<std::vector<int>> by_class(static_cast<std::size_t>(K));
        for (std::size_t i = 0; i < data.size(); ++i)
            by_class[static_cast<std::size_t>(data.fine_labels[i])].push_back(static_cast<int>(i));
        for (int i = 0; i < K; ++i) {
            for (int j = 0; j < K; ++j) {
                if (j == i) continue;
                int successes = 0;
                const auto& rows = by_class[static_cast<std::size_t>(i)];
                for (std::size_t start = 0; start < rows.size();
                     start += static_cast<std::size_t>(batch_size)) {
                    idx.assign(rows.begin() + static_cast<std::ptrdiff_t>(start),
                               rows.begin() + static_cast<std::ptrdiff_t>(
                                                  std::min(rows.size(),
                                                           start + static_cast<std::size_t>(batch_size))));
                    const auto labels = data.batch_fine(idx);
                    const std::vector<int> targets(idx.size(), j);
                    const auto batch = pgd(net, data.batch(idx), labels, cfg, rng, targets);
                    for (int p : batch.pred_after)
                        if (p == j) ++successes;
                }
                m.values[static_cast<std::size_t>(i) * K + j] =
                    static_cast<double>(successes) /
                    static_cast<double>(m.class_counts[static_cast<std::size_t>(i)]);
            }
        }
    }
    return m;
}

} // namespace hierprobe
