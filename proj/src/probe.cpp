#include "hierprobe/probe.hpp"

#include <algorithm>
#include <cmath>

#include "hierprobe/data.hpp"

namespace hierprobe {

std::vector<double> WeightMatrix::column(int i) const {
    std::vector<double> col(static_cast<std::size_t>(input_size));
    for (int d = 0; d < input_size; ++d) col[static_cast<std::size_t>(d)] = at(d, i);
    return col;
}

int HierarchyPartition::group_of(int cls) const {
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (int c : groups[g])
            if (c == cls) return static_cast<int>(g);
    return -1;
}

std::vector<int> HierarchyPartition::class_to_group(int num_classes) const {
    std::vector<int> map(static_cast<std::size_t>(num_classes), -1);
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (int c : groups[g]) {
            if (c < 0 || c >= num_classes)
                throw ContractError("partition class " + std::to_string(c) + " out of range");
            map[static_cast<std::size_t>(c)] = static_cast<int>(g);
        }
    for (int c = 0; c < num_classes; ++c)
        if (map[static_cast<std::size_t>(c)] < 0)
            throw ContractError("partition does not cover class " + std::to_string(c));
    return map;
}

std::pair<WeightMatrix, BiasVector> extract_weight_matrix(Network& net_linear, const Tensor& probe) {
    for (const auto& l : net_linear.layers())
        if (l.kind == LayerKind::ReLU || l.kind == LayerKind::BatchNorm ||
            l.kind == LayerKind::MaxPool)
            throw ContractError("weight extraction on non-linear network: contains " +
                                layer_kind_name(l.kind) + " layer");

    const auto dims = net_linear.input_dims();
    Tensor x = probe;
    if (x.rank() == 3) x = reshape(probe.detach(), {1, dims[0], dims[1], dims[2]});
    if (x.rank() != 4 || x.dim(0) != 1 || x.dim(1) != dims[0] || x.dim(2) != dims[1] ||
        x.dim(3) != dims[2])
        throw DimensionError("probe shape " + shape_str(probe.shape()) +
                             " is not a single input of the network's dims");

    const Mode saved = net_linear.mode();
    net_linear.set_mode(Mode::Eval);

    const int K = net_linear.num_classes();
    const std::size_t D = net_linear.input_size();

    WeightMatrix w;
    w.input_size = static_cast<int>(D);
    w.num_classes = K;
    w.input_dims = dims;
    w.values.assign(D * static_cast<std::size_t>(K), 0.0);
    for (int i = 0; i < K; ++i) w.class_labels.push_back(std::to_string(i));

    Tape& tape = Tape::active();
    for (int i = 0; i < K; ++i) {
        tape.reset();
        Tensor input = x.detach();
        input.set_requires_grad(true);
        Tensor logits = net_linear.forward(input);
        Tensor yi = select(logits, static_cast<std::size_t>(i));
        tape.backward(yi);
        const auto grad = input.grad();
        for (std::size_t d = 0; d < D; ++d) w.values[d * static_cast<std::size_t>(K) + i] = grad[d];
    }
    tape.reset();

    BiasVector b;
    {
        Tape::NoGradGuard off;
        Tensor zero = Tensor::zeros({1, dims[0], dims[1], dims[2]});
        Tensor logits = net_linear.forward(zero);
        b.values.assign(logits.data().begin(), logits.data().end());
    }

    net_linear.set_mode(saved);
    for (double v : w.values)
        if (!std::isfinite(v)) throw NumericError("non-finite entry in extracted weight matrix");
    return {std::move(w), std::move(b)};
}

CorrelationMatrix correlation_matrix(const WeightMatrix& w) {
    const int K = w.num_classes;
    const std::size_t D = static_cast<std::size_t>(w.input_size);

    std::vector<double> norms(static_cast<std::size_t>(K), 0.0);
    for (int i = 0; i < K; ++i) {
        double sq = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
            const double v = w.values[d * static_cast<std::size_t>(K) + i];
            sq += v * v;
        }
        norms[static_cast<std::size_t>(i)] = std::sqrt(sq);
        if (norms[static_cast<std::size_t>(i)] <= 1e-12)
            throw NumericError("degenerate class " + std::to_string(i) +
                               ": weight column norm below 1e-12");
    }

    CorrelationMatrix c;
    c.n = K;
    c.class_labels = w.class_labels;
    c.values.assign(static_cast<std::size_t>(K) * K, 0.0);
    for (int i = 0; i < K; ++i)
        for (int j = 0; j < K; ++j) {
            double dot = 0.0;
            for (std::size_t d = 0; d < D; ++d)
                dot += w.values[d * static_cast<std::size_t>(K) + i] *
                       w.values[d * static_cast<std::size_t>(K) + j];
            c.values[static_cast<std::size_t>(i) * K + j] =
                dot / (norms[static_cast<std::size_t>(i)] * norms[static_cast<std::size_t>(j)]);
        }
    return c;
}

SignMatrix sign_approximation(const CorrelationMatrix& c) {
    SignMatrix s;
    s.n = c.n;
    s.values.assign(static_cast<std::size_t>(c.n) * c.n, -1);
    for (int i = 0; i < c.n; ++i)
        for (int j = 0; j < c.n; ++j)
            s.values[static_cast<std::size_t>(i) * c.n + j] =
                (i == j || c.at(i, j) > 0.0) ? 1 : -1;
    return s;
}

HierarchyPartition extract_hierarchy(const SignMatrix& c_op) {
    const int n = c_op.n;
    std::vector<int> comp(static_cast<std::size_t>(n), -1);
    int n_comp = 0;
    for (int start = 0; start < n; ++start) {
        if (comp[static_cast<std::size_t>(start)] >= 0) continue;
        std::vector<int> stack{start};
        comp[static_cast<std::size_t>(start)] = n_comp;
        while (!stack.empty()) {
            const int u = stack.back();
            stack.pop_back();
            for (int v = 0; v < n; ++v)
                if (v != u && comp[static_cast<std::size_t>(v)] < 0 && c_op.at(u, v) > 0) {
                    comp[static_cast<std::size_t>(v)] = n_comp;
                    stack.push_back(v);
                }
        }
        ++n_comp;
    }
    HierarchyPartition p;
    p.groups.assign(static_cast<std::size_t>(n_comp), {});
    for (int v = 0; v < n; ++v) p.groups[static_cast<std::size_t>(comp[static_cast<std::size_t>(v)])].push_back(v);
    for (auto& g : p.groups) std::sort(g.begin(), g.end());
    std::sort(p.groups.begin(), p.groups.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
    return p;
}

int partition_inconsistency_count(const SignMatrix& c_op, const HierarchyPartition& partition) {
    int count = 0;
    for (const auto& g : partition.groups)
        for (std::size_t a = 0; a < g.size(); ++a)
            for (std::size_t b = a + 1; b < g.size(); ++b)
                if (c_op.at(g[a], g[b]) < 0) ++count;
    return count;
}

FeatureCenters feature_centers(Network& net, const HierarchicalDataset& data, int batch_size) {
    if (data.size() == 0) throw ContractError("feature_centers on empty dataset");
    const int K = data.hierarchy.num_fine();

    Tape::NoGradGuard off;
    const Mode saved = net.mode();
    net.set_mode(Mode::Eval);

    FeatureCenters z;
    z.num_classes = K;
    z.counts.assign(static_cast<std::size_t>(K), 0);

    std::vector<int> indices;
    for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(batch_size)) {
        indices.clear();
        for (std::size_t j = i; j < std::min(data.size(), i + static_cast<std::size_t>(batch_size)); ++j)
            indices.push_back(static_cast<int>(j));
        Tensor batch = data.batch(indices);
        auto [logits, features] = net.forward_with_features(batch);
        (void)logits;
        const int fd = features.dim(1);
        if (z.feature_dim == 0) {
            z.feature_dim = fd;
            z.values.assign(static_cast<std::size_t>(K) * fd, 0.0);
        }
        for (std::size_t r = 0; r < indices.size(); ++r) {
            const int y = data.fine_labels[static_cast<std::size_t>(indices[r])];
            ++z.counts[static_cast<std::size_t>(y)];
            for (int d = 0; d < fd; ++d)
                z.values[static_cast<std::size_t>(y) * fd + d] +=
                    features.data()[r * static_cast<std::size_t>(fd) + d];
        }
    }
    net.set_mode(saved);

    std::string missing;
    for (int k = 0; k < K; ++k)
        if (z.counts[static_cast<std::size_t>(k)] == 0) missing += " " + std::to_string(k);
    if (!missing.empty()) throw ContractError("classes with zero examples:" + missing);

    for (int k = 0; k < K; ++k)
        for (int d = 0; d < z.feature_dim; ++d)
            z.values[static_cast<std::size_t>(k) * z.feature_dim + d] /=
                static_cast<double>(z.counts[static_cast<std::size_t>(k)]);
    return z;
}

FeatureDistanceMatrix feature_distance_matrix(const FeatureCenters& z) {
    const int K = z.num_classes;
    if (K < 2) throw ContractError("feature distance matrix needs at least 2 classes");

    std::vector<double> dist(static_cast<std::size_t>(K) * K, 0.0);
    for (int a = 0; a < K; ++a)
        for (int b = 0; b < K; ++b) {
            double sq = 0.0;
            for (int d = 0; d < z.feature_dim; ++d) {
                const double diff = z.values[static_cast<std::size_t>(a) * z.feature_dim + d] -
                                    z.values[static_cast<std::size_t>(b) * z.feature_dim + d];
                sq += diff * diff;
            }
            dist[static_cast<std::size_t>(a) * K + b] = std::sqrt(sq);
        }

    FeatureDistanceMatrix f;
    f.n = K;
    f.values.assign(static_cast<std::size_t>(K) * K, 0.0);
    for (int a = 0; a < K; ++a) {
        double mx = 0.0;
        for (int c = 0; c < K; ++c)
            if (c != a) mx = std::max(mx, dist[static_cast<std::size_t>(a) * K + c]);
        if (mx <= 1e-12)
            throw NumericError("degenerate feature centers: row " + std::to_string(a) +
                               " has max distance below 1e-12");
        for (int b = 0; b < K; ++b)
            if (b != a)
                f.values[static_cast<std::size_t>(a) * K + b] =
                    dist[static_cast<std::size_t>(a) * K + b] / mx;
    }
    return f;
}

double correlation_gap(const CorrelationMatrix& c, const HierarchyPartition& partition) {
    const auto map = partition.class_to_group(c.n);
    double within = 0.0, across = 0.0;
    int n_within = 0, n_across = 0;
    for (int i = 0; i < c.n; ++i)
        for (int j = i + 1; j < c.n; ++j) {
            if (map[static_cast<std::size_t>(i)] == map[static_cast<std::size_t>(j)]) {
                within += c.at(i, j);
                ++n_within;
            } else {
                across += c.at(i, j);
                ++n_across;
            }
        }
    if (n_within == 0 || n_across == 0)
        throw ContractError("correlation gap undefined: partition has no within or no across pairs");
    return within / n_within - across / n_across;
}

} // namespace hierprobe
