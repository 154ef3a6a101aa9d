#ifndef HIERPROBE_PROBE_HPP
#define HIERPROBE_PROBE_HPP

#include <string>
#include <vector>

#include "hierprobe/network.hpp"

namespace hierprobe {
class HierarchicalDataset;

// Implicit input-to-logit weights of an affine network: column i holds the
// input gradient of logit i, so forward(x) = W^T x + b for every x.
struct WeightMatrix {
    int input_size = 0;
    int num_classes = 0;
    std::array<int, 3> input_dims{0, 0, 0};
    std::vector<double> values; // row-major input_size x num_classes
    std::vector<std::string> class_labels;

    double at(int d, int i) const {
        return values[static_cast<std::size_t>(d) * num_classes + i];
    }
    std::vector<double> column(int i) const;
};

struct BiasVector {
    std::vector<double> values;
};

struct CorrelationMatrix {
    int n = 0;
    std::vector<double> values; // n x n, symmetric, entries in [-1, 1]
    std::vector<std::string> class_labels;
    double at(int i, int j) const { return values[static_cast<std::size_t>(i) * n + j]; }
};

struct SignMatrix {
    int n = 0;
    std::vector<int> values; // entries in {-1, +1}, diagonal +1
    int at(int i, int j) const { return values[static_cast<std::size_t>(i) * n + j]; }
};

struct HierarchyPartition {
    std::vector<std::vector<int>> groups; // disjoint, sorted, ordered by smallest member

    int group_of(int cls) const;
    std::vector<int> class_to_group(int num_classes) const;
};

struct FeatureCenters {
    int num_classes = 0;
    int feature_dim = 0;
    std::vector<double> values; // num_classes x feature_dim
    std::vector<int> counts;
};

struct FeatureDistanceMatrix {
    int n = 0;
    std::vector<double> values; // diagonal 0, rows normalized to max 1
    double at(int i, int j) const { return values[static_cast<std::size_t>(i) * n + j]; }
};

// Algorithm: forward the probe once per class, backpropagate from that logit,
// store the input gradient as the class column. Bias is the forward value at
// the zero input. Refuses networks that still contain ReLU, BatchNorm or
// MaxPool layers.
std::pair<WeightMatrix, BiasVector> extract_weight_matrix(Network& net_linear, const Tensor& probe);

CorrelationMatrix correlation_matrix(const WeightMatrix& w);

// +1 where the correlation is strictly positive, -1 otherwise; diagonal +1.
SignMatrix sign_approximation(const CorrelationMatrix& c);

// Connected components of the +1 graph.
HierarchyPartition extract_hierarchy(const SignMatrix& c_op);

// Number of same-component pairs whose sign entry is -1 (0 when the sign
// matrix is block-consistent).
int partition_inconsistency_count(const SignMatrix& c_op, const HierarchyPartition& partition);

// Per-class mean of the activation entering the final Dense layer, eval mode,
// clean inputs.
FeatureCenters feature_centers(Network& net, const HierarchicalDataset& data, int batch_size = 64);

FeatureDistanceMatrix feature_distance_matrix(const FeatureCenters& z);

// Gap between mean within-group and mean across-group correlation; the
// clustering-effect summary statistic.
double correlation_gap(const CorrelationMatrix& c, const HierarchyPartition& partition);

} // namespace hierprobe

#endif
