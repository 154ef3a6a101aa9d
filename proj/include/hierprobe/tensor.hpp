#ifndef HIERPROBE_TENSOR_HPP
#define HIERPROBE_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hierprobe/errors.hpp"

namespace hierprobe {

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

struct TensorImpl {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad; // persistent, leaves with requires_grad only
    bool requires_grad = false;
    long node = -1; // producing tape node, -1 for leaves
};

// Shared-ownership handle over a dense double tensor. Scalars have an empty
// shape. Values written by ops are treated as immutable; leaves (parameters,
// inputs) may be mutated in place between passes.
class Tensor {
public:
    Tensor() : impl_(std::make_shared<TensorImpl>()) {}
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor from(std::vector<int> shape, std::vector<double> data);
    static Tensor scalar(double value);

    const std::vector<int>& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    std::size_t size() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    std::span<double> mutable_data() { return impl_->data; }
    double value() const; // scalar only

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on);
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    void zero_grad();

    // deep copy with no graph attachment and no grad
    Tensor detach() const;

    bool all_finite() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
    bool tracked() const { return impl_->requires_grad || impl_->node >= 0; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Per-thread record of executed ops. Reverse iteration from a root node is a
// valid reverse topological order because ops append in execution order.
class Tape {
public:
    static Tape& active();

    bool recording() const { return enabled_; }
    long record(const std::shared_ptr<TensorImpl>& out,
                std::function<void(Tape&, const std::vector<double>&)> backward_fn);

    // Accumulates into every tracked tensor reachable from root. Repeated
    // calls accumulate again (leaf grads double). Root must be scalar.
    void backward(const Tensor& root);

    void reset();
    void begin_pass(); // a backward over more than one un-reset pass is an error
    std::size_t size() const { return nodes_.size(); }

    // Grad buffer for an input during backward; nullptr when the tensor
    // needs no gradient. Intermediates live in scratch storage that is
    // discarded when backward returns.
    std::vector<double>* grad_sink(const std::shared_ptr<TensorImpl>& t);

    class NoGradGuard {
    public:
        NoGradGuard();
        ~NoGradGuard();
        NoGradGuard(const NoGradGuard&) = delete;
        NoGradGuard& operator=(const NoGradGuard&) = delete;

    private:
        bool saved_;
    };

private:
    struct Node {
        std::shared_ptr<TensorImpl> out;
        std::function<void(Tape&, const std::vector<double>&)> fn;
    };
    std::vector<Node> nodes_;
    std::unordered_map<const TensorImpl*, std::vector<double>> scratch_;
    int passes_ = 0;
    bool enabled_ = true;
};

void backward(const Tensor& loss);

// ---- differentiable ops ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding);
Tensor add(const Tensor& a, const Tensor& b);           // same shape
Tensor add_rowwise(const Tensor& m, const Tensor& v);   // [N x D] + [D]
Tensor add_channelwise(const Tensor& x, const Tensor& b); // [N,C,H,W] + [C]
Tensor relu(const Tensor& x);
Tensor max_pool2d(const Tensor& x, int window, int stride = 0);
Tensor avg_pool2d(const Tensor& x, int window, int stride = 0);

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
};

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool training,
                  double eps = 1e-5, double momentum = 0.1);

Tensor flatten(const Tensor& x);                 // [N, ...] -> [N, rest]
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor sum(const Tensor& x);                     // scalar
Tensor select(const Tensor& x, std::size_t flat_index); // scalar
Tensor scale(const Tensor& x, double c);

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Row-wise softmax probabilities and argmax, computed off-tape.
std::vector<double> softmax_rows(const Tensor& logits);
std::vector<int> argmax_rows(const Tensor& logits);

// Clustering penalty over logits [N x K]: for each group g the mean F_g is
// taken over the mini-batch and the group's class indices, and each member
// class contributes the Euclidean norm over the batch of (logit_i - F_g).
// With per_example_mean, F_g is instead computed per example.
Tensor group_deviation_loss(const Tensor& logits,
                            const std::vector<std::vector<int>>& groups,
                            bool per_example_mean = false);

} // namespace hierprobe

#endif
