#ifndef HIERPROBE_ATTACKS_HPP
#define HIERPROBE_ATTACKS_HPP

#include <optional>
#include <string>
#include <vector>

#include "hierprobe/data.hpp"
#include "hierprobe/network.hpp"
#include "hierprobe/rng.hpp"

namespace hierprobe {

struct AttackConfig {
    double epsilon = 0.0;   // L-inf radius in raw pixel units
    double step_size = 0.0; // alpha
    int steps = 0;          // K
    bool random_start = false;
    bool targeted = false;
    double lo = 0.0, hi = 1.0; // pixel bounds

    void validate() const;
};

// Named presets. pgd10/pgd20 are the training and evaluation settings, the
// pgd*_* family is the attack-strength grid.
AttackConfig attack_preset(const std::string& name);
std::vector<std::string> attack_preset_names();

struct AdversarialBatch {
    Tensor original;
    Tensor perturbed;
    std::vector<int> labels;
    std::vector<int> targets; // empty unless targeted
    std::vector<int> pred_before;
    std::vector<int> pred_after;
};

struct AttackConfusionMatrix {
    enum class Kind { Untargeted, Targeted };
    Kind mode = Kind::Untargeted;
    int n = 0;
    std::vector<double> values; // n x n rates in [0, 1]
    std::vector<int> class_counts;
    double clean_error_rate = 0.0; // recorded because pre-attack errors are not excluded

    double at(int i, int j) const { return values[static_cast<std::size_t>(i) * n + j]; }
};

// Single signed-gradient step of size epsilon, then clip to pixel bounds.
AdversarialBatch fgsm(Network& net, const Tensor& x, const std::vector<int>& labels,
                      const AttackConfig& cfg);

// K steps of size alpha, each followed by projection onto the epsilon ball
// intersected with the pixel box. Targeted mode descends toward the target
// label. With K=1, alpha=epsilon and no random start this is exactly fgsm.
AdversarialBatch pgd(Network& net, const Tensor& x, const std::vector<int>& labels,
                     const AttackConfig& cfg, Rng& rng,
                     const std::vector<int>& targets = {});

double robust_accuracy(Network& net, const HierarchicalDataset& data, const AttackConfig& cfg,
                       Rng& rng, int batch_size = 64);

double clean_accuracy(Network& net, const HierarchicalDataset& data, int batch_size = 64);

AttackConfusionMatrix attack_confusion_matrix(Network& net, const HierarchicalDataset& data,
                                              const AttackConfig& cfg, Rng& rng,
                                              int batch_size = 64);

// Feasibility check used by tests and asserted after every attack: every
// perturbed pixel within bounds and within epsilon of the original.
void check_perturbation_feasible(const AdversarialBatch& batch, const AttackConfig& cfg);

} // namespace hierprobe

#endif
