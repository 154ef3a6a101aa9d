#ifndef HIERPROBE_NETWORK_HPP
#define HIERPROBE_NETWORK_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hierprobe/rng.hpp"
#include "hierprobe/tensor.hpp"

namespace hierprobe {

enum class LayerKind {
    Dense,
    Conv,
    BatchNorm,
    ReLU,
    MaxPool,
    AvgPool,
    Flatten,
    ResidualBlockStart,
    ResidualBlockEnd,
};

std::string layer_kind_name(LayerKind kind);

struct LayerSpec {
    LayerKind kind{};
    int units = 0;                    // Dense
    int filters = 0, kernel = 0, stride = 1, padding = 0; // Conv
    int window = 0, pool_stride = 0;  // MaxPool / AvgPool (0 stride = window)

    bool operator==(const LayerSpec&) const = default;
};

struct Parameter {
    std::string name;
    Tensor tensor; // requires_grad always true
};

enum class Mode { Train, Eval };

struct CheckpointMeta {
    int epoch = 0;
    std::uint64_t seed = 0;
    std::string config_hash; // hex digest of the resolved config echo
};

// Sequential layer-graph classifier over C x H x W inputs. Residual blocks
// are expressed as Start/End markers with an identity skip; the branch output
// shape must equal the block input shape.
class Network {
public:
    Network() = default;

    const std::vector<LayerSpec>& layers() const { return layers_; }
    std::vector<Parameter>& parameters() { return params_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    Parameter& parameter(const std::string& name);

    std::array<int, 3> input_dims() const { return input_dims_; }
    int num_classes() const { return num_classes_; }
    std::size_t input_size() const {
        return static_cast<std::size_t>(input_dims_[0]) * input_dims_[1] * input_dims_[2];
    }

    Mode mode() const { return mode_; }
    void set_mode(Mode m) { mode_ = m; }

    Tensor forward(const Tensor& batch);
    // logits plus the activation entering the last Dense layer
    std::pair<Tensor, Tensor> forward_with_features(const Tensor& batch);

    void zero_grads();

    std::vector<BatchNormState>& batch_norm_states() { return bn_states_; }
    const std::vector<BatchNormState>& batch_norm_states() const { return bn_states_; }

    std::string architecture_text() const;
    CheckpointMeta& meta() { return meta_; }
    const CheckpointMeta& meta() const { return meta_; }

    bool has_nonlinear_layers() const;

    friend class NetworkBuilder;
    friend Network linearize(const Network& net);

private:
    std::array<int, 3> input_dims_{0, 0, 0};
    int num_classes_ = 0;
    Mode mode_ = Mode::Train;
    std::vector<LayerSpec> layers_;
    std::vector<Parameter> params_;
    std::vector<std::array<int, 2>> layer_params_; // {-1,-1} for parameterless layers
    std::vector<int> layer_bn_state_;              // index into bn_states_, -1 otherwise
    std::vector<BatchNormState> bn_states_;
    CheckpointMeta meta_;

    Tensor run(const Tensor& batch, Tensor* features_out);
};

class NetworkBuilder {
public:
    NetworkBuilder(std::array<int, 3> input_dims, int num_classes);

    NetworkBuilder& dense(int units);
    NetworkBuilder& conv(int filters, int kernel, int stride = 1, int padding = 0);
    NetworkBuilder& batch_norm();
    NetworkBuilder& relu();
    NetworkBuilder& max_pool(int window, int stride = 0);
    NetworkBuilder& avg_pool(int window, int stride = 0);
    NetworkBuilder& flatten();
    NetworkBuilder& residual_start();
    NetworkBuilder& residual_end();
    NetworkBuilder& add(const LayerSpec& spec);

    // Validates shape composition, creates and initializes parameters.
    Network build(Rng& init_rng) const;
    Network build(std::uint64_t init_seed) const;

private:
    std::array<int, 3> input_dims_;
    int num_classes_;
    std::vector<LayerSpec> layers_;
};

// The linear sub-network: ReLU and BatchNorm layers deleted, MaxPool replaced
// by AvgPool of equal window and stride. Parameters are deep-copied so probing
// never touches the trained model. Result is in eval mode.
Network linearize(const Network& net);

// Model zoo used throughout the experiments.
Network make_model(const std::string& name, std::array<int, 3> input_dims, int num_classes,
                   std::uint64_t init_seed);

void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

// Rebuild an uninitialized network with the same architecture but fresh
// parameters drawn from init_seed.
Network reinitialized_like(const Network& net, std::uint64_t init_seed);

// Deep copy: fresh parameter storage with identical values, batch-norm state
// and metadata.
Network clone_network(const Network& net);

// Same architecture and copied parameters except the final Dense layer, which
// is replaced by a freshly initialized head with new_classes outputs.
Network with_fresh_head(const Network& net, int new_classes, std::uint64_t init_seed);

} // namespace hierprobe

#endif
