#ifndef HIERPROBE_TRAINING_HPP
#define HIERPROBE_TRAINING_HPP

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "hierprobe/attacks.hpp"
#include "hierprobe/data.hpp"
#include "hierprobe/network.hpp"
#include "hierprobe/probe.hpp"

namespace hierprobe {

enum class Regime { STD, AT, ATC };

Regime parse_regime(const std::string& name);
std::string regime_name(Regime r);

struct TrainConfig {
    Regime regime = Regime::STD;
    int epochs = 24;
    int batch_size = 64;
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 2e-4;
    std::vector<int> lr_decay_epochs{16, 20};
    double lr_decay_factor = 0.1;
    AttackConfig inner_attack;          // AT / AT+C inner maximization
    AttackConfig eval_attack;           // per-epoch robust accuracy metric
    double lambda_reg = 0.002;          // AT+C regularization weight
    bool reg_per_example_mean = true;   // per-example group means in the penalty
    std::uint64_t seed = 0;

    void validate() const;
};

struct EpochStats {
    int epoch = 0;
    double lr = 0.0;
    double loss = 0.0;     // mean total training loss over batches
    double l_reg = 0.0;    // mean regularization term (0 unless AT+C)
    double clean_acc = 0.0;
    double robust_acc = 0.0;
};

struct RunManifest {
    std::vector<std::string> header; // key=value lines echoing config and data
    std::vector<EpochStats> epochs;

    void add_header(const std::string& key, const std::string& value);
    std::string to_text() const;
    static std::string epoch_line(const EpochStats& s);
};

struct SgdState {
    std::vector<std::vector<double>> velocity; // one block per parameter
};

// v <- momentum*v + g + weight_decay*theta; theta <- theta - lr*v
void sgd_step(std::vector<Parameter>& params, SgdState& state, double lr, double momentum,
              double weight_decay);

struct TrainResult {
    Network net;       // final-epoch model
    Network best_net;  // snapshot at the epoch with the highest robust accuracy
    int best_epoch = 0;
    RunManifest manifest;
};

// Cross-entropy on clean data.
TrainResult train_standard(Network net, const DatasetPair& data, const TrainConfig& cfg,
                           std::ostream* live_log = nullptr);

// Min-max training: each step attacks the current model (eval-mode forward
// inside the attack) and minimizes the loss on the perturbed batch.
TrainResult train_adversarial(Network net, const DatasetPair& data, const TrainConfig& cfg,
                              std::ostream* live_log = nullptr);

Tensor clustering_regularization_loss(const Tensor& logits, const HierarchyPartition& partition,
                                      bool per_example_mean = false);

struct ClusteredTrainResult {
    Network net;
    Network best_net;
    int best_epoch = 0;
    RunManifest manifest;
    HierarchyPartition partition;   // extracted from the pretrained model
    int inconsistencies = 0;        // non-block-consistent sign pairs
    bool degenerate_hierarchy = false;
};

// Probes the pretrained robust model for its class hierarchy, then retrains a
// freshly initialized network with the adversarial loss plus
// lambda * clustering regularization on the adversarial logits.
ClusteredTrainResult train_clustered(const Network& pretrained_robust, const DatasetPair& data,
                                     const TrainConfig& cfg, std::ostream* live_log = nullptr);

// Replaces the head with a coarse-class head and trains all parameters on the
// target training split with cross-entropy on coarse labels.
TrainResult finetune(const Network& net, const DatasetPair& target_data, int epochs, double lr,
                     const TrainConfig& base_cfg, std::ostream* live_log = nullptr);

enum class LabelKind { Fine, Coarse };

// Coarse evaluation maps the fine argmax through the hierarchy before
// comparing, unless the network already outputs coarse logits.
double evaluate(Network& net, const HierarchicalDataset& data, LabelKind kind,
                const HierarchySpec* hierarchy = nullptr, int batch_size = 64);

} // namespace hierprobe

#endif
