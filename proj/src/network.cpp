#include "hierprobe/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hierprobe/util.hpp"

namespace hierprobe {

std::string layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::Dense: return "dense";
        case LayerKind::Conv: return "conv";
        case LayerKind::BatchNorm: return "batchnorm";
        case LayerKind::ReLU: return "relu";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::AvgPool: return "avgpool";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::ResidualBlockStart: return "res_start";
        case LayerKind::ResidualBlockEnd: return "res_end";
    }
    return "?";
}

Parameter& Network::parameter(const std::string& name) {
    for (auto& p : params_)
        if (p.name == name) return p;
    throw ContractError("no parameter named " + name);
}

bool Network::has_nonlinear_layers() const {
    for (const auto& l : layers_)
        if (l.kind == LayerKind::ReLU || l.kind == LayerKind::BatchNorm ||
            l.kind == LayerKind::MaxPool)
            return true;
    return false;
}

void Network::zero_grads() {
    for (auto& p : params_) p.tensor.zero_grad();
}

Tensor Network::run(const Tensor& batch, Tensor* features_out) {
    if (batch.rank() != 4 || batch.dim(1) != input_dims_[0] || batch.dim(2) != input_dims_[1] ||
        batch.dim(3) != input_dims_[2])
        throw DimensionError("batch shape " + shape_str(batch.shape()) +
                             " does not match input dims [" + std::to_string(input_dims_[0]) + "x" +
                             std::to_string(input_dims_[1]) + "x" + std::to_string(input_dims_[2]) +
                             "]");
    if (Tape::active().recording()) Tape::active().begin_pass();

    int last_dense = -1;
    if (features_out) {
        for (std::size_t i = 0; i < layers_.size(); ++i)
            if (layers_[i].kind == LayerKind::Dense) last_dense = static_cast<int>(i);
        if (last_dense < 0)
            throw ContractError("feature tap requested but network has no Dense layer");
    }

    Tensor a = batch;
    std::vector<Tensor> skips;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& l = layers_[i];
        if (features_out && static_cast<int>(i) == last_dense) *features_out = a;
        switch (l.kind) {
            case LayerKind::Dense: {
                const auto& w = params_[static_cast<std::size_t>(layer_params_[i][0])].tensor;
                const auto& b = params_[static_cast<std::size_t>(layer_params_[i][1])].tensor;
                a = add_rowwise(matmul(a, w), b);
                break;
            }
            case LayerKind::Conv: {
                const auto& w = params_[static_cast<std::size_t>(layer_params_[i][0])].tensor;
                const auto& b = params_[static_cast<std::size_t>(layer_params_[i][1])].tensor;
                a = add_channelwise(conv2d(a, w, l.stride, l.padding), b);
                break;
            }
            case LayerKind::BatchNorm: {
                const auto& g = params_[static_cast<std::size_t>(layer_params_[i][0])].tensor;
                const auto& b = params_[static_cast<std::size_t>(layer_params_[i][1])].tensor;
                a = batch_norm(a, g, b, bn_states_[static_cast<std::size_t>(layer_bn_state_[i])],
                               mode_ == Mode::Train);
                break;
            }
            case LayerKind::ReLU: a = relu(a); break;
            case LayerKind::MaxPool: a = max_pool2d(a, l.window, l.pool_stride); break;
            case LayerKind::AvgPool: a = avg_pool2d(a, l.window, l.pool_stride); break;
            case LayerKind::Flatten: a = flatten(a); break;
            case LayerKind::ResidualBlockStart: skips.push_back(a); break;
            case LayerKind::ResidualBlockEnd:
                a = add(a, skips.back());
                skips.pop_back();
                break;
        }
    }
    return a;
}

Tensor Network::forward(const Tensor& batch) { return run(batch, nullptr); }

std::pair<Tensor, Tensor> Network::forward_with_features(const Tensor& batch) {
    Tensor features;
    Tensor logits = run(batch, &features);
    return {logits, features};
}

// ---- builder ----

NetworkBuilder::NetworkBuilder(std::array<int, 3> input_dims, int num_classes)
    : input_dims_(input_dims), num_classes_(num_classes) {
    if (input_dims[0] < 1 || input_dims[1] < 1 || input_dims[2] < 1 || num_classes < 2)
        throw ContractError("network needs positive input dims and at least 2 classes");
}

NetworkBuilder& NetworkBuilder::dense(int units) {
    layers_.push_back({.kind = LayerKind::Dense, .units = units});
    return *this;
}
NetworkBuilder& NetworkBuilder::conv(int filters, int kernel, int stride, int padding) {
    layers_.push_back(
        {.kind = LayerKind::Conv, .filters = filters, .kernel = kernel, .stride = stride, .padding = padding});
    return *this;
}
NetworkBuilder& NetworkBuilder::batch_norm() {
    layers_.push_back({.kind = LayerKind::BatchNorm});
    return *this;
}
NetworkBuilder& NetworkBuilder::relu() {
    layers_.push_back({.kind = LayerKind::ReLU});
    return *this;
}
NetworkBuilder& NetworkBuilder::max_pool(int window, int stride) {
    layers_.push_back({.kind = LayerKind::MaxPool, .window = window, .pool_stride = stride});
    return *this;
}
NetworkBuilder& NetworkBuilder::avg_pool(int window, int stride) {
    layers_.push_back({.kind = LayerKind::AvgPool, .window = window, .pool_stride = stride});
    return *this;
}
NetworkBuilder& NetworkBuilder::flatten() {
    layers_.push_back({.kind = LayerKind::Flatten});
    return *this;
}
NetworkBuilder& NetworkBuilder::residual_start() {
    layers_.push_back({.kind = LayerKind::ResidualBlockStart});
    return *this;
}
NetworkBuilder& NetworkBuilder::residual_end() {
    layers_.push_back({.kind = LayerKind::ResidualBlockEnd});
    return *this;
}
NetworkBuilder& NetworkBuilder::add(const LayerSpec& spec) {
    layers_.push_back(spec);
    return *this;
}

namespace {

struct ShapeState {
    bool flat = false;
    int c = 0, h = 0, w = 0;
    int d = 0;
    std::string str() const {
        return flat ? "[" + std::to_string(d) + "]"
                    : "[" + std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w) + "]";
    }
};

Tensor glorot_uniform(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.mutable_data()) v = rng.uniform(-limit, limit);
    return t;
}

} // namespace

Network NetworkBuilder::build(Rng& rng) const {
    Network net;
    net.input_dims_ = input_dims_;
    net.num_classes_ = num_classes_;
    net.layers_ = layers_;
    net.layer_params_.assign(layers_.size(), {-1, -1});
    net.layer_bn_state_.assign(layers_.size(), -1);

    ShapeState s{.flat = false, .c = input_dims_[0], .h = input_dims_[1], .w = input_dims_[2]};
    std::vector<ShapeState> skips;
    int n_conv = 0, n_dense = 0, n_bn = 0;

    auto pool_out = [&](const LayerSpec& l, const std::string& what) {
        if (s.flat) throw DimensionError(what + " needs spatial input, have " + s.str());
        int stride = l.pool_stride == 0 ? l.window : l.pool_stride;
        if (l.window < 1 || stride < 1)
            throw ContractError(what + " window and stride must be positive");
        if (s.h < l.window || s.w < l.window || (s.h - l.window) % stride != 0 ||
            (s.w - l.window) % stride != 0)
            throw DimensionError(what + " window " + std::to_string(l.window) + " stride " +
                                 std::to_string(stride) + " does not tile " + s.str());
        s.h = (s.h - l.window) / stride + 1;
        s.w = (s.w - l.window) / stride + 1;
    };

    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& l = layers_[i];
        switch (l.kind) {
            case LayerKind::Dense: {
                if (!s.flat)
                    throw DimensionError("dense layer needs flattened input, have " + s.str());
                if (l.units < 1) throw ContractError("dense units must be positive");
                ++n_dense;
                const std::string base = "dense" + std::to_string(n_dense);
                net.layer_params_[i][0] = static_cast<int>(net.params_.size());
                net.params_.push_back(
                    {base + ".weight",
                     glorot_uniform({s.d, l.units}, s.d, l.units, rng).set_requires_grad(true)});
                net.layer_params_[i][1] = static_cast<int>(net.params_.size());
                net.params_.push_back({base + ".bias", Tensor::zeros({l.units}).set_requires_grad(true)});
                s.d = l.units;
                break;
            }
            case LayerKind::Conv: {
                if (s.flat) throw DimensionError("conv layer needs spatial input, have " + s.str());
                if (l.filters < 1 || l.kernel < 1 || l.stride < 1 || l.padding < 0)
                    throw ContractError("conv hyperparameters out of range");
                if (l.kernel > s.h + 2 * l.padding || l.kernel > s.w + 2 * l.padding)
                    throw DimensionError("conv kernel " + std::to_string(l.kernel) +
                                         " larger than padded input " + s.str());
                ++n_conv;
                const std::string base = "conv" + std::to_string(n_conv);
                const int fan_in = s.c * l.kernel * l.kernel;
                const int fan_out = l.filters * l.kernel * l.kernel;
                net.layer_params_[i][0] = static_cast<int>(net.params_.size());
                net.params_.push_back({base + ".weight",
                                       glorot_uniform({l.filters, s.c, l.kernel, l.kernel}, fan_in,
                                                      fan_out, rng)
                                           .set_requires_grad(true)});
                net.layer_params_[i][1] = static_cast<int>(net.params_.size());
                net.params_.push_back({base + ".bias", Tensor::zeros({l.filters}).set_requires_grad(true)});
                s.h = (s.h + 2 * l.padding - l.kernel) / l.stride + 1;
                s.w = (s.w + 2 * l.padding - l.kernel) / l.stride + 1;
                s.c = l.filters;
                break;
            }
            case LayerKind::BatchNorm: {
                if (s.flat)
                    throw DimensionError("batchnorm layer needs spatial input, have " + s.str());
                ++n_bn;
                const std::string base = "bn" + std::to_string(n_bn);
                net.layer_params_[i][0] = static_cast<int>(net.params_.size());
                net.params_.push_back({base + ".gamma", Tensor::full({s.c}, 1.0).set_requires_grad(true)});
                net.layer_params_[i][1] = static_cast<int>(net.params_.size());
                net.params_.push_back({base + ".beta", Tensor::zeros({s.c}).set_requires_grad(true)});
                net.layer_bn_state_[i] = static_cast<int>(net.bn_states_.size());
                net.bn_states_.push_back(
                    {std::vector<double>(static_cast<std::size_t>(s.c), 0.0),
                     std::vector<double>(static_cast<std::size_t>(s.c), 1.0)});
                break;
            }
            case LayerKind::ReLU: break;
            case LayerKind::MaxPool: pool_out(l, "maxpool"); break;
            case LayerKind::AvgPool: pool_out(l, "avgpool"); break;
            case LayerKind::Flatten:
                if (s.flat) throw DimensionError("flatten on already-flat activation");
                s = ShapeState{.flat = true, .d = s.c * s.h * s.w};
                break;
            case LayerKind::ResidualBlockStart: skips.push_back(s); break;
            case LayerKind::ResidualBlockEnd: {
                if (skips.empty()) throw ContractError("residual block end without start");
                const ShapeState& in = skips.back();
                if (in.flat != s.flat || in.c != s.c || in.h != s.h || in.w != s.w || in.d != s.d)
                    throw DimensionError("residual branch output " + s.str() +
                                         " does not match block input " + in.str());
                skips.pop_back();
                break;
            }
        }
    }
    if (!skips.empty()) throw ContractError("unterminated residual block");
    if (!s.flat || s.d != num_classes_)
        throw DimensionError("network output " + s.str() + " is not [" +
                             std::to_string(num_classes_) + "] logits");
    return net;
}

Network NetworkBuilder::build(std::uint64_t init_seed) const {
    Rng rng(init_seed);
    return build(rng);
}

Network linearize(const Network& net) {
    NetworkBuilder b(net.input_dims(), net.num_classes());
    for (const auto& l : net.layers()) {
        switch (l.kind) {
            case LayerKind::ReLU:
            case LayerKind::BatchNorm: break; // deleted
            case LayerKind::MaxPool:
                b.avg_pool(l.window, l.pool_stride);
                break;
            case LayerKind::Dense:
            case LayerKind::Conv:
            case LayerKind::AvgPool:
            case LayerKind::Flatten:
            case LayerKind::ResidualBlockStart:
            case LayerKind::ResidualBlockEnd: b.add(l); break;
        }
    }
    Network out = b.build(0);
    // deep-copy parameters of retained layers; ordinals line up because every
    // parameterized layer other than batchnorm is kept
    std::size_t src_i = 0;
    for (auto& dst : out.params_) {
        while (src_i < net.parameters().size() &&
               net.parameters()[src_i].name.rfind("bn", 0) == 0)
            ++src_i;
        const Parameter& src = net.parameters()[src_i];
        if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape())
            throw ContractError("linearize parameter mapping mismatch: " + src.name + " vs " +
                                dst.name);
        std::copy(src.tensor.data().begin(), src.tensor.data().end(),
                  dst.tensor.mutable_data().begin());
        ++src_i;
    }
    out.set_mode(Mode::Eval);
    return out;
}

Network make_model(const std::string& name, std::array<int, 3> input_dims, int num_classes,
                   std::uint64_t init_seed) {
    NetworkBuilder b(input_dims, num_classes);
    if (name == "mlp3") {
        b.flatten().dense(64).dense(32).dense(num_classes);
    } else if (name == "cnn4") {
        b.conv(8, 3, 1, 1).relu().max_pool(2).conv(16, 3, 1, 1).relu().max_pool(2).flatten().dense(
            num_classes);
    } else if (name == "rescnn6") {
        b.conv(16, 3, 1, 1).batch_norm().relu();
        b.residual_start().conv(16, 3, 1, 1).batch_norm().relu().conv(16, 3, 1, 1).batch_norm().residual_end();
        b.relu().max_pool(2);
        b.residual_start().conv(16, 3, 1, 1).batch_norm().relu().conv(16, 3, 1, 1).batch_norm().residual_end();
        b.relu().avg_pool(2);
        b.flatten().dense(num_classes);
    } else {
        throw UsageError("unknown model '" + name + "' (expected mlp3, cnn4 or rescnn6)");
    }
    return b.build(init_seed);
}

std::string Network::architecture_text() const {
    std::ostringstream os;
    os << "hierprobe-net 1\n";
    os << "input " << input_dims_[0] << " " << input_dims_[1] << " " << input_dims_[2] << "\n";
    os << "classes " << num_classes_ << "\n";
    for (const auto& l : layers_) {
        os << "layer " << layer_kind_name(l.kind);
        switch (l.kind) {
            case LayerKind::Dense: os << " " << l.units; break;
            case LayerKind::Conv:
                os << " " << l.filters << " " << l.kernel << " " << l.stride << " " << l.padding;
                break;
            case LayerKind::MaxPool:
            case LayerKind::AvgPool: os << " " << l.window << " " << l.pool_stride; break;
            default: break;
        }
        os << "\n";
    }
    return os.str();
}

namespace {

NetworkBuilder parse_architecture(const std::string& text, CheckpointMeta& meta) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "hierprobe-net 1")
        throw FormatError("unrecognized architecture descriptor header");
    std::array<int, 3> dims{};
    int classes = 0;
    std::vector<LayerSpec> layers;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "input") {
            ls >> dims[0] >> dims[1] >> dims[2];
        } else if (tag == "classes") {
            ls >> classes;
        } else if (tag == "meta") {
            std::string key;
            ls >> key;
            if (key == "epoch") ls >> meta.epoch;
            else if (key == "seed") ls >> meta.seed;
            else if (key == "config") ls >> meta.config_hash;
        } else if (tag == "layer") {
            std::string kind;
            ls >> kind;
            LayerSpec l;
            if (kind == "dense") { l.kind = LayerKind::Dense; ls >> l.units; }
            else if (kind == "conv") { l.kind = LayerKind::Conv; ls >> l.filters >> l.kernel >> l.stride >> l.padding; }
            else if (kind == "batchnorm") l.kind = LayerKind::BatchNorm;
            else if (kind == "relu") l.kind = LayerKind::ReLU;
            else if (kind == "maxpool") { l.kind = LayerKind::MaxPool; ls >> l.window >> l.pool_stride; }
            else if (kind == "avgpool") { l.kind = LayerKind::AvgPool; ls >> l.window >> l.pool_stride; }
            else if (kind == "flatten") l.kind = LayerKind::Flatten;
            else if (kind == "res_start") l.kind = LayerKind::ResidualBlockStart;
            else if (kind == "res_end") l.kind = LayerKind::ResidualBlockEnd;
            else throw FormatError("unknown layer kind '" + kind + "' in descriptor");
            if (ls.fail()) throw FormatError("malformed layer line '" + line + "'");
            layers.push_back(l);
        } else {
            throw FormatError("unknown descriptor line '" + line + "'");
        }
    }
    NetworkBuilder b(dims, classes);
    for (const auto& l : layers) b.add(l);
    return b;
}

constexpr char kCheckpointMagic[4] = {'H', 'P', 'R', 'B'};
constexpr std::uint32_t kCheckpointVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is, std::size_t& offset) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (is.gcount() != 4)
        throw FormatError("checkpoint truncated at byte " + std::to_string(offset));
    offset += 4;
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");

    std::string descriptor = net.architecture_text();
    descriptor += "meta epoch " + std::to_string(net.meta().epoch) + "\n";
    descriptor += "meta seed " + std::to_string(net.meta().seed) + "\n";
    if (!net.meta().config_hash.empty())
        descriptor += "meta config " + net.meta().config_hash + "\n";

    os.write(kCheckpointMagic, 4);
    write_u32(os, kCheckpointVersion);
    write_u32(os, static_cast<std::uint32_t>(descriptor.size()));
    os.write(descriptor.data(), static_cast<std::streamsize>(descriptor.size()));

    auto write_record = [&os](const std::string& name, const std::vector<int>& shape,
                              const std::vector<double>& values) {
        write_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(os, static_cast<std::uint32_t>(shape.size()));
        for (int d : shape) write_u32(os, static_cast<std::uint32_t>(d));
        os.write(reinterpret_cast<const char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(double)));
    };

    for (const auto& p : net.parameters()) {
        write_record(p.name, p.tensor.shape(),
                     {p.tensor.data().begin(), p.tensor.data().end()});
    }
    int bn = 0;
    for (const auto& st : net.batch_norm_states()) {
        ++bn;
        const int c = static_cast<int>(st.running_mean.size());
        write_record("bn" + std::to_string(bn) + ".running_mean", {c}, st.running_mean);
        write_record("bn" + std::to_string(bn) + ".running_var", {c}, st.running_var);
    }
    os.flush();
    if (!os) throw FormatError("write failure on " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    std::size_t offset = 0;

    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw FormatError(path.string() + ": bad checkpoint magic at byte 0");
    offset += 4;

    const std::uint32_t version = read_u32(is, offset);
    if (version != kCheckpointVersion)
        throw FormatError(path.string() + ": unsupported checkpoint schema version " +
                          std::to_string(version));

    const std::uint32_t desc_len = read_u32(is, offset);
    std::string descriptor(desc_len, '\0');
    is.read(descriptor.data(), desc_len);
    if (is.gcount() != static_cast<std::streamsize>(desc_len))
        throw FormatError(path.string() + ": checkpoint truncated at byte " + std::to_string(offset));
    offset += desc_len;

    CheckpointMeta meta;
    Network net = parse_architecture(descriptor, meta).build(0);
    net.meta() = meta;

    std::vector<bool> filled(net.parameters().size(), false);
    std::vector<bool> bn_filled(net.batch_norm_states().size() * 2, false);

    while (true) {
        is.peek();
        if (is.eof()) break;
        const std::uint32_t name_len = read_u32(is, offset);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (is.gcount() != static_cast<std::streamsize>(name_len))
            throw FormatError(path.string() + ": checkpoint truncated at byte " + std::to_string(offset));
        offset += name_len;
        const std::uint32_t rank = read_u32(is, offset);
        std::vector<int> shape;
        std::size_t numel = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            const std::uint32_t d = read_u32(is, offset);
            shape.push_back(static_cast<int>(d));
            numel *= d;
        }
        std::vector<double> values(numel);
        is.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(numel * sizeof(double)));
        if (is.gcount() != static_cast<std::streamsize>(numel * sizeof(double)))
            throw FormatError(path.string() + ": checkpoint truncated at byte " + std::to_string(offset));
        offset += numel * sizeof(double);

        bool matched = false;
        for (std::size_t i = 0; i < net.parameters().size(); ++i) {
            if (net.parameters()[i].name != name) continue;
            if (net.parameters()[i].tensor.shape() != shape)
                throw FormatError(path.string() + ": shape mismatch for parameter " + name);
            std::copy(values.begin(), values.end(),
                      net.parameters()[i].tensor.mutable_data().begin());
            filled[i] = true;
            matched = true;
            break;
        }
        if (!matched) {
            for (std::size_t b = 0; b < net.batch_norm_states().size(); ++b) {
                const std::string base = "bn" + std::to_string(b + 1);
                if (name == base + ".running_mean") {
                    net.batch_norm_states()[b].running_mean = values;
                    bn_filled[b * 2] = true;
                    matched = true;
                } else if (name == base + ".running_var") {
                    net.batch_norm_states()[b].running_var = values;
                    bn_filled[b * 2 + 1] = true;
                    matched = true;
                }
                if (matched) break;
            }
        }
        if (!matched)
            throw FormatError(path.string() + ": unexpected record '" + name + "'");
    }

    for (std::size_t i = 0; i < filled.size(); ++i)
        if (!filled[i])
            throw FormatError(path.string() + ": missing parameter record " +
                              net.parameters()[i].name);
    for (std::size_t i = 0; i < bn_filled.size(); ++i)
        if (!bn_filled[i])
            throw FormatError(path.string() + ": missing batchnorm running statistics");

    net.set_mode(Mode::Eval);
    return net;
}

Network reinitialized_like(const Network& net, std::uint64_t init_seed) {
    NetworkBuilder b(net.input_dims(), net.num_classes());
    for (const auto& l : net.layers()) b.add(l);
    return b.build(init_seed);
}

Network clone_network(const Network& net) {
    Network out = reinitialized_like(net, 0);
    for (std::size_t i = 0; i < net.parameters().size(); ++i)
        std::copy(net.parameters()[i].tensor.data().begin(),
                  net.parameters()[i].tensor.data().end(),
                  out.parameters()[i].tensor.mutable_data().begin());
    out.batch_norm_states() = net.batch_norm_states();
    out.meta() = net.meta();
    out.set_mode(net.mode());
    return out;
}

Network with_fresh_head(const Network& net, int new_classes, std::uint64_t init_seed) {
    int last_dense = -1;
    for (std::size_t i = 0; i < net.layers().size(); ++i)
        if (net.layers()[i].kind == LayerKind::Dense) last_dense = static_cast<int>(i);
    if (last_dense < 0) throw ContractError("cannot replace head: network has no Dense layer");

    NetworkBuilder b(net.input_dims(), new_classes);
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
        LayerSpec l = net.layers()[i];
        if (static_cast<int>(i) == last_dense) l.units = new_classes;
        b.add(l);
    }
    Network out = b.build(init_seed);

    // copy everything except the replaced head weight/bias (names match by ordinal)
    int n_dense = 0;
    for (const auto& l : net.layers())
        if (l.kind == LayerKind::Dense) ++n_dense;
    const std::string head_base = "dense" + std::to_string(n_dense);
    for (std::size_t i = 0; i < out.parameters().size(); ++i) {
        auto& dst = out.parameters()[i];
        if (dst.name == head_base + ".weight" || dst.name == head_base + ".bias") continue;
        const auto& src = net.parameters()[i];
        if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape())
            throw ContractError("head replacement mapping mismatch at " + dst.name);
        std::copy(src.tensor.data().begin(), src.tensor.data().end(),
                  dst.tensor.mutable_data().begin());
    }
    out.batch_norm_states() = net.batch_norm_states();
    return out;
}

} // namespace hierprobe
