#include "hierprobe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace hierprobe {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(shape_numel(shape), 0.0);
    impl->shape = std::move(shape);
    return Tensor(impl);
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.impl()->data.begin(), t.impl()->data.end(), value);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size())
        throw DimensionError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return Tensor(impl);
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

double Tensor::value() const {
    if (size() != 1)
        throw ContractError("value() on non-scalar tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
    if (on && impl_->node >= 0)
        throw ContractError("requires_grad can only be set on leaf tensors");
    impl_->requires_grad = on;
    if (!on) impl_->grad.clear();
    return *this;
}

void Tensor::zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(impl);
}

bool Tensor::all_finite() const {
    for (double v : impl_->data)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---- Tape ----

Tape& Tape::active() {
    thread_local Tape tape;
    return tape;
}

long Tape::record(const std::shared_ptr<TensorImpl>& out,
                  std::function<void(Tape&, const std::vector<double>&)> backward_fn) {
    nodes_.push_back(Node{out, std::move(backward_fn)});
    long id = static_cast<long>(nodes_.size()) - 1;
    out->node = id;
    return id;
}

void Tape::reset() {
    nodes_.clear();
    scratch_.clear();
    passes_ = 0;
}

void Tape::begin_pass() { ++passes_; }

std::vector<double>* Tape::grad_sink(const std::shared_ptr<TensorImpl>& t) {
    if (t->node >= 0) {
        auto& buf = scratch_[t.get()];
        if (buf.empty()) buf.assign(t->data.size(), 0.0);
        return &buf;
    }
    if (t->requires_grad) {
        if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
        return &t->grad;
    }
    return nullptr;
}

void Tape::backward(const Tensor& root) {
    if (root.size() != 1)
        throw ContractError("backward root must be scalar, got shape " + shape_str(root.shape()));
    if (root.impl()->node < 0)
        throw ContractError("backward root is not attached to the tape");
    if (passes_ > 1)
        throw ContractError("backward after " + std::to_string(passes_) +
                            " forward passes without tape reset");

    scratch_.clear();
    scratch_[root.impl().get()] = {1.0};

    for (long k = root.impl()->node; k >= 0; --k) {
        const Node& node = nodes_[static_cast<std::size_t>(k)];
        auto it = scratch_.find(node.out.get());
        if (it == scratch_.end()) continue; // not reachable from root
        node.fn(*this, it->second);
    }
    scratch_.clear();
}

Tape::NoGradGuard::NoGradGuard() {
    Tape& t = Tape::active();
    saved_ = t.enabled_;
    t.enabled_ = false;
}

Tape::NoGradGuard::~NoGradGuard() { Tape::active().enabled_ = saved_; }

void backward(const Tensor& loss) { Tape::active().backward(loss); }

namespace {

bool should_record(const Tensor& a) { return Tape::active().recording() && a.tracked(); }
bool should_record(const Tensor& a, const Tensor& b) {
    return Tape::active().recording() && (a.tracked() || b.tracked());
}

void axpy(std::vector<double>& dst, const std::vector<double>& src, double c = 1.0) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += c * src[i];
}

} // namespace

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.mutable_data().data();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            for (int j = 0; j < n; ++j) po[i * n + j] += av * pb[p * n + j];
        }

    if (should_record(a, b)) {
        auto ai = a.impl(), bi = b.impl();
        Tape::active().record(out.impl(), [ai, bi, m, k, n](Tape& t, const std::vector<double>& dout) {
            if (auto* ga = t.grad_sink(ai)) {
                // dA = dOut * B^T
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j) acc += dout[i * n + j] * bi->data[p * n + j];
                        (*ga)[i * k + p] += acc;
                    }
            }
            if (auto* gb = t.grad_sink(bi)) {
                // dB = A^T * dOut
                for (int p = 0; p < k; ++p)
                    for (int j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i) acc += ai->data[i * k + p] * dout[i * n + j];
                        (*gb)[p * n + j] += acc;
                    }
            }
        });
    }
    return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
    if (x.rank() != 4 || w.rank() != 4)
        throw DimensionError("conv2d expects 4-d input and kernel, got " + shape_str(x.shape()) +
                             " and " + shape_str(w.shape()));
    if (x.dim(1) != w.dim(1))
        throw DimensionError("conv2d channel mismatch: input " + shape_str(x.shape()) +
                             " kernel " + shape_str(w.shape()));
    if (stride < 1) throw ContractError("conv2d stride must be >= 1");
    if (padding < 0) throw ContractError("conv2d padding must be >= 0");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int F = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    if (KH > H + 2 * padding || KW > W + 2 * padding)
        throw DimensionError("conv2d kernel " + shape_str(w.shape()) +
                             " larger than padded input " + shape_str(x.shape()));
    const int HO = (H + 2 * padding - KH) / stride + 1;
    const int WO = (W + 2 * padding - KW) / stride + 1;

    Tensor out = Tensor::zeros({N, F, HO, WO});
    const double* px = x.data().data();
    const double* pw = w.data().data();
    double* po = out.mutable_data().data();

    for (int n = 0; n < N; ++n)
        for (int f = 0; f < F; ++f)
            for (int oh = 0; oh < HO; ++oh)
                for (int ow = 0; ow < WO; ++ow) {
                    double acc = 0.0;
                    const int ih0 = oh * stride - padding;
                    const int iw0 = ow * stride - padding;
                    for (int c = 0; c < C; ++c)
                        for (int i = 0; i < KH; ++i) {
                            const int ih = ih0 + i;
                            if (ih < 0 || ih >= H) continue;
                            for (int j = 0; j < KW; ++j) {
                                const int iw = iw0 + j;
                                if (iw < 0 || iw >= W) continue;
                                acc += px[((n * C + c) * H + ih) * W + iw] *
                                       pw[((f * C + c) * KH + i) * KW + j];
                            }
                        }
                    po[((n * F + f) * HO + oh) * WO + ow] = acc;
                }

    if (should_record(x, w)) {
        auto xi = x.impl(), wi = w.impl();
        Tape::active().record(out.impl(), [xi, wi, N, C, H, W, F, KH, KW, HO, WO, stride,
                                           padding](Tape& t, const std::vector<double>& dout) {
            auto* gx = t.grad_sink(xi);
            auto* gw = t.grad_sink(wi);
            if (!gx && !gw) return;
            for (int n = 0; n < N; ++n)
                for (int f = 0; f < F; ++f)
                    for (int oh = 0; oh < HO; ++oh)
                        for (int ow = 0; ow < WO; ++ow) {
                            const double g = dout[((n * F + f) * HO + oh) * WO + ow];
                            if (g == 0.0) continue;
                            const int ih0 = oh * stride - padding;
                            const int iw0 = ow * stride - padding;
                            for (int c = 0; c < C; ++c)
                                for (int i = 0; i < KH; ++i) {
                                    const int ih = ih0 + i;
                                    if (ih < 0 || ih >= H) continue;
                                    for (int j = 0; j < KW; ++j) {
                                        const int iw = iw0 + j;
                                        if (iw < 0 || iw >= W) continue;
                                        const std::size_t xo = ((static_cast<std::size_t>(n) * C + c) * H + ih) * W + iw;
                                        const std::size_t wo = ((static_cast<std::size_t>(f) * C + c) * KH + i) * KW + j;
                                        if (gx) (*gx)[xo] += g * wi->data[wo];
                                        if (gw) (*gw)[wo] += g * xi->data[xo];
                                    }
                                }
                        }
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i)
        out.mutable_data()[i] = a.data()[i] + b.data()[i];
    if (should_record(a, b)) {
        auto ai = a.impl(), bi = b.impl();
        Tape::active().record(out.impl(), [ai, bi](Tape& t, const std::vector<double>& dout) {
            if (auto* ga = t.grad_sink(ai)) axpy(*ga, dout);
            if (auto* gb = t.grad_sink(bi)) axpy(*gb, dout);
        });
    }
    return out;
}

Tensor add_rowwise(const Tensor& m, const Tensor& v) {
    if (m.rank() != 2 || v.rank() != 1 || m.dim(1) != v.dim(0))
        throw DimensionError("add_rowwise shape mismatch: " + shape_str(m.shape()) + " vs " +
                             shape_str(v.shape()));
    const int N = m.dim(0), D = m.dim(1);
    Tensor out = Tensor::zeros(m.shape());
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < D; ++j)
            out.mutable_data()[static_cast<std::size_t>(i) * D + j] =
                m.data()[static_cast<std::size_t>(i) * D + j] + v.data()[static_cast<std::size_t>(j)];
    if (should_record(m, v)) {
        auto mi = m.impl(), vi = v.impl();
        Tape::active().record(out.impl(), [mi, vi, N, D](Tape& t, const std::vector<double>& dout) {
            if (auto* gm = t.grad_sink(mi)) axpy(*gm, dout);
            if (auto* gv = t.grad_sink(vi)) {
                for (int i = 0; i < N; ++i)
                    for (int j = 0; j < D; ++j)
                        (*gv)[static_cast<std::size_t>(j)] += dout[static_cast<std::size_t>(i) * D + j];
            }
        });
    }
    return out;
}

Tensor add_channelwise(const Tensor& x, const Tensor& b) {
    if (x.rank() != 4 || b.rank() != 1 || x.dim(1) != b.dim(0))
        throw DimensionError("add_channelwise shape mismatch: " + shape_str(x.shape()) + " vs " +
                             shape_str(b.shape()));
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out = Tensor::zeros(x.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double bv = b.data()[static_cast<std::size_t>(c)];
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
            for (int k = 0; k < HW; ++k) out.mutable_data()[base + k] = x.data()[base + k] + bv;
        }
    if (should_record(x, b)) {
        auto xi = x.impl(), bi = b.impl();
        Tape::active().record(out.impl(), [xi, bi, N, C, HW](Tape& t, const std::vector<double>& dout) {
            if (auto* gx = t.grad_sink(xi)) axpy(*gx, dout);
            if (auto* gb = t.grad_sink(bi)) {
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                        double acc = 0.0;
                        for (int k = 0; k < HW; ++k) acc += dout[base + k];
                        (*gb)[static_cast<std::size_t>(c)] += acc;
                    }
            }
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
        out.mutable_data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    if (should_record(x)) {
        auto xi = x.impl();
        Tape::active().record(out.impl(), [xi](Tape& t, const std::vector<double>& dout) {
            if (auto* gx = t.grad_sink(xi)) {
                for (std::size_t i = 0; i < dout.size(); ++i)
                    if (xi->data[i] > 0.0) (*gx)[i] += dout[i];
            }
        });
    }
    return out;
}

namespace {

void check_pool(const Tensor& x, int window, int& stride) {
    if (x.rank() != 4)
        throw DimensionError("pooling expects 4-d input, got " + shape_str(x.shape()));
    if (window < 1) throw ContractError("pooling window must be >= 1");
    if (stride == 0) stride = window;
    if (stride < 1) throw ContractError("pooling stride must be >= 1");
    const int H = x.dim(2), W = x.dim(3);
    if (H < window || W < window || (H - window) % stride != 0 || (W - window) % stride != 0)
        throw DimensionError("pooling window " + std::to_string(window) + " stride " +
                             std::to_string(stride) + " does not tile input " +
                             shape_str(x.shape()));
}

} // namespace

Tensor max_pool2d(const Tensor& x, int window, int stride) {
    check_pool(x, window, stride);
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int HO = (H - window) / stride + 1, WO = (W - window) / stride + 1;
    Tensor out = Tensor::zeros({N, C, HO, WO});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    std::size_t o = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < HO; ++oh)
                for (int ow = 0; ow < WO; ++ow, ++o) {
                    double best = -HUGE_VAL;
                    std::size_t best_idx = 0;
                    for (int i = 0; i < window; ++i)
                        for (int j = 0; j < window; ++j) {
                            const std::size_t idx =
                                ((static_cast<std::size_t>(n) * C + c) * H + oh * stride + i) * W +
                                ow * stride + j;
                            // strict > keeps the first maximal element on ties
                            if (px[idx] > best) {
                                best = px[idx];
                                best_idx = idx;
                            }
                        }
                    po[o] = best;
                    (*argmax)[o] = best_idx;
                }
    if (should_record(x)) {
        auto xi = x.impl();
        Tape::active().record(out.impl(), [xi, argmax](Tape& t, const std::vector<double>& dout) {
            if (auto* gx = t.grad_sink(xi))
                for (std::size_t i = 0; i < dout.size(); ++i) (*gx)[(*argmax)[i]] += dout[i];
        });
    }
    return out;
}

Tensor avg_pool2d(const Tensor& x, int window, int stride) {
    check_pool(x, window, stride);
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int HO = (H - window) / stride + 1, WO = (W - window) / stride + 1;
    const double inv = 1.0 / (static_cast<double>(window) * window);
    Tensor out = Tensor::zeros({N, C, HO, WO});
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    std::size_t o = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < HO; ++oh)
                for (int ow = 0; ow < WO; ++ow, ++o) {
                    double acc = 0.0;
                    for (int i = 0; i < window; ++i)
                        for (int j = 0; j < window; ++j)
                            acc += px[((static_cast<std::size_t>(n) * C + c) * H + oh * stride + i) * W +
                                      ow * stride + j];
                    po[o] = acc * inv;
                }
    if (should_record(x)) {
        auto xi = x.impl();
        const int ho = HO, wo = WO;
        Tape::active().record(out.impl(), [xi, N, C, H, W, ho, wo, window, stride,
                                           inv](Tape& t, const std::vector<double>& dout) {
            if (auto* gx = t.grad_sink(xi)) {
                std::size_t o = 0;
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c)
                        for (int oh = 0; oh < ho; ++oh)
                            for (int ow = 0; ow < wo; ++ow, ++o) {
                                const double g = dout[o] * inv;
                                for (int i = 0; i < window; ++i)
                                    for (int j = 0; j < window; ++j)
                                        (*gx)[((static_cast<std::size_t>(n) * C + c) * H + oh * stride + i) * W +
                                              ow * stride + j] += g;
                            }
            }
        });
    }
    return out;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool training, double eps, double momentum) {
    if (x.rank() != 4)
        throw DimensionError("batch_norm expects 4-d input, got " + shape_str(x.shape()));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C)
        throw DimensionError("batch_norm parameter shape mismatch for input " + shape_str(x.shape()));
    if (static_cast<int>(state.running_mean.size()) != C ||
        static_cast<int>(state.running_var.size()) != C)
        throw ContractError("batch_norm running statistics not sized to channel count");
    if (training && N < 2)
        throw NumericError("batch_norm train mode on degenerate batch of " + std::to_string(N));

    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t m = static_cast<std::size_t>(N) * plane;
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data().data();
    double* po = out.mutable_data().data();

    std::vector<double> mean(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
    auto xhat = training ? std::make_shared<std::vector<double>>(x.size()) : nullptr;

    for (int c = 0; c < C; ++c) {
        double mu, var;
        if (training) {
            double s = 0.0;
            for (int n = 0; n < N; ++n) {
                const double* p = px + (static_cast<std::size_t>(n) * C + c) * plane;
                for (std::size_t k = 0; k < plane; ++k) s += p[k];
            }
            mu = s / static_cast<double>(m);
            double sq = 0.0;
            for (int n = 0; n < N; ++n) {
                const double* p = px + (static_cast<std::size_t>(n) * C + c) * plane;
                for (std::size_t k = 0; k < plane; ++k) {
                    const double d = p[k] - mu;
                    sq += d * d;
                }
            }
            var = sq / static_cast<double>(m); // biased, used for normalization
            const double var_unbiased = sq / static_cast<double>(m - 1);
            state.running_mean[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * state.running_mean[static_cast<std::size_t>(c)] + momentum * mu;
            state.running_var[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * state.running_var[static_cast<std::size_t>(c)] + momentum * var_unbiased;
        } else {
            mu = state.running_mean[static_cast<std::size_t>(c)];
            var = state.running_var[static_cast<std::size_t>(c)];
        }
        mean[static_cast<std::size_t>(c)] = mu;
        inv_std[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + eps);
    }

    const double* pg = gamma.data().data();
    const double* pb = beta.data().data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
            const double mu = mean[static_cast<std::size_t>(c)];
            const double is = inv_std[static_cast<std::size_t>(c)];
            for (std::size_t k = 0; k < plane; ++k) {
                const double xh = (px[base + k] - mu) * is;
                if (xhat) (*xhat)[base + k] = xh;
                po[base + k] = pg[c] * xh + pb[c];
            }
        }

    if (should_record(x) || (Tape::active().recording() && (gamma.tracked() || beta.tracked()))) {
        auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
        if (training) {
            Tape::active().record(out.impl(), [xi, gi, bi, xhat, inv_std, N, C, plane,
                                               m](Tape& t, const std::vector<double>& dout) {
                auto* gx = t.grad_sink(xi);
                auto* gg = t.grad_sink(gi);
                auto* gb = t.grad_sink(bi);
                for (int c = 0; c < C; ++c) {
                    double sum_dy = 0.0, sum_dy_xh = 0.0;
                    for (int n = 0; n < N; ++n) {
                        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
                        for (std::size_t k = 0; k < plane; ++k) {
                            sum_dy += dout[base + k];
                            sum_dy_xh += dout[base + k] * (*xhat)[base + k];
                        }
                    }
                    if (gb) (*gb)[static_cast<std::size_t>(c)] += sum_dy;
                    if (gg) (*gg)[static_cast<std::size_t>(c)] += sum_dy_xh;
                    if (gx) {
                        const double g = gi->data[static_cast<std::size_t>(c)];
                        const double is = inv_std[static_cast<std::size_t>(c)];
                        const double inv_m = 1.0 / static_cast<double>(m);
                        for (int n = 0; n < N; ++n) {
                            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
                            for (std::size_t k = 0; k < plane; ++k)
                                (*gx)[base + k] += g * is *
                                                   (dout[base + k] - inv_m * sum_dy -
                                                    (*xhat)[base + k] * inv_m * sum_dy_xh);
                        }
                    }
                }
            });
        } else {
            // eval mode is an affine per-channel map through the running stats
            Tape::active().record(out.impl(), [xi, gi, bi, mean, inv_std, N, C,
                                               plane](Tape& t, const std::vector<double>& dout) {
                auto* gx = t.grad_sink(xi);
                auto* gg = t.grad_sink(gi);
                auto* gb = t.grad_sink(bi);
                for (int c = 0; c < C; ++c) {
                    const double g = gi->data[static_cast<std::size_t>(c)];
                    const double is = inv_std[static_cast<std::size_t>(c)];
                    const double mu = mean[static_cast<std::size_t>(c)];
                    double sum_dy = 0.0, sum_dy_xh = 0.0;
                    for (int n = 0; n < N; ++n) {
                        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
                        for (std::size_t k = 0; k < plane; ++k) {
                            const double dy = dout[base + k];
                            sum_dy += dy;
                            sum_dy_xh += dy * (xi->data[base + k] - mu) * is;
                            if (gx) (*gx)[base + k] += dy * g * is;
                        }
                    }
                    if (gb) (*gb)[static_cast<std::size_t>(c)] += sum_dy;
                    if (gg) (*gg)[static_cast<std::size_t>(c)] += sum_dy_xh;
                }
            });
        }
    }
    return out;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    if (shape_numel(shape) != x.size())
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                             " changes element count");
    Tensor out = Tensor::from(std::move(shape), {x.data().begin(), x.data().end()});
    if (should_record(x)) {
        auto xi = x.impl();
        Tape::active().record(out.impl(), [xi](Tape& t, const std::vector<double>& dout) {
            if (auto* gx = t.grad_sink(xi)) axpy(*gx, dout);
        });
    }
    return out;
}

Tensor flatten(const Tensor& x) {
    if (x.rank() < 2)
        throw DimensionError("flatten expects rank >= 2, got " + shape_str(x.shape()));
    int rest = 1;
    for (int i = 1; i < x.rank(); ++i) rest *= x.dim(i);
    return reshape(x, {x.dim(0), rest});
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (should_record(x)) {
        auto xi = x.impl();
        Tape::active().record(out.impl(), [xi](Tape& t, const std::vector<double>& dout) {
            if (auto* gx = t.grad_sink(xi))
                for (auto& g : *gx) g += dout[0];
        });
    }
    return out;
}

Tensor select(const Tensor& x, std::size_t flat_index) {
    if (flat_index >= x.size())
        throw ContractError("select index " + std::to_string(flat_index) +
                            " out of range for shape " + shape_str(x.shape()));
    Tensor out = Tensor::scalar(x.data()[flat_index]);
    if (should_record(x)) {
        auto xi = x.impl();
        Tape::active().record(out.impl(), [xi, flat_index](Tape& t, const std::vector<double>& dout) {
            if (auto* gx = t.grad_sink(xi)) (*gx)[flat_index] += dout[0];
        });
    }
    return out;
}

Tensor scale(const Tensor& x, double c) {
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.mutable_data()[i] = c * x.data()[i];
    if (should_record(x)) {
        auto xi = x.impl();
        Tape::active().record(out.impl(), [xi, c](Tape& t, const std::vector<double>& dout) {
            if (auto* gx = t.grad_sink(xi)) axpy(*gx, dout, c);
        });
    }
    return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2)
        throw DimensionError("softmax_cross_entropy expects [N x K] logits, got " +
                             shape_str(logits.shape()));
    const int N = logits.dim(0), K = logits.dim(1);
    if (static_cast<int>(labels.size()) != N)
        throw DimensionError("label count " + std::to_string(labels.size()) +
                             " does not match batch " + std::to_string(N));
    for (int n = 0; n < N; ++n)
        if (labels[static_cast<std::size_t>(n)] < 0 || labels[static_cast<std::size_t>(n)] >= K)
            throw ContractError("label " + std::to_string(labels[static_cast<std::size_t>(n)]) +
                                " out of range [0, " + std::to_string(K) + ")");

    auto probs = std::make_shared<std::vector<double>>(logits.size());
    const double* pz = logits.data().data();
    double loss = 0.0;
    for (int n = 0; n < N; ++n) {
        const double* z = pz + static_cast<std::size_t>(n) * K;
        double mx = z[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, z[k]);
        double se = 0.0;
        for (int k = 0; k < K; ++k) se += std::exp(z[k] - mx);
        const double lse = mx + std::log(se);
        for (int k = 0; k < K; ++k)
            (*probs)[static_cast<std::size_t>(n) * K + k] = std::exp(z[k] - mx) / se;
        loss += lse - z[labels[static_cast<std::size_t>(n)]];
    }
    loss /= static_cast<double>(N);

    Tensor out = Tensor::scalar(loss);
    if (should_record(logits)) {
        auto zi = logits.impl();
        auto lab = std::make_shared<std::vector<int>>(labels);
        Tape::active().record(out.impl(), [zi, probs, lab, N, K](Tape& t, const std::vector<double>& dout) {
            if (auto* gz = t.grad_sink(zi)) {
                const double c = dout[0] / static_cast<double>(N);
                for (int n = 0; n < N; ++n)
                    for (int k = 0; k < K; ++k) {
                        double g = (*probs)[static_cast<std::size_t>(n) * K + k];
                        if (k == (*lab)[static_cast<std::size_t>(n)]) g -= 1.0;
                        (*gz)[static_cast<std::size_t>(n) * K + k] += c * g;
                    }
            }
        });
    }
    return out;
}

std::vector<double> softmax_rows(const Tensor& logits) {
    const int N = logits.dim(0), K = logits.dim(1);
    std::vector<double> out(logits.size());
    for (int n = 0; n < N; ++n) {
        const double* z = logits.data().data() + static_cast<std::size_t>(n) * K;
        double mx = z[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, z[k]);
        double se = 0.0;
        for (int k = 0; k < K; ++k) se += std::exp(z[k] - mx);
        for (int k = 0; k < K; ++k) out[static_cast<std::size_t>(n) * K + k] = std::exp(z[k] - mx) / se;
    }
    return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
    if (logits.rank() != 2)
        throw DimensionError("argmax_rows expects [N x K], got " + shape_str(logits.shape()));
    const int N = logits.dim(0), K = logits.dim(1);
    std::vector<int> out(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) {
        const double* z = logits.data().data() + static_cast<std::size_t>(n) * K;
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (z[k] > z[best]) best = k;
        out[static_cast<std::size_t>(n)] = best;
    }
    return out;
}

Tensor group_deviation_loss(const Tensor& logits, const std::vector<std::vector<int>>& groups,
                            bool per_example_mean) {
    if (logits.rank() != 2)
        throw DimensionError("group_deviation_loss expects [N x K] logits, got " +
                             shape_str(logits.shape()));
    const int N = logits.dim(0), K = logits.dim(1);
    std::vector<bool> seen(static_cast<std::size_t>(K), false);
    int covered = 0;
    for (const auto& g : groups) {
        if (g.empty()) throw ContractError("empty group in partition");
        for (int i : g) {
            if (i < 0 || i >= K || seen[static_cast<std::size_t>(i)])
                throw ContractError("partition does not cover classes 0.." + std::to_string(K - 1) +
                                    " exactly (class " + std::to_string(i) + ")");
            seen[static_cast<std::size_t>(i)] = true;
            ++covered;
        }
    }
    if (covered != K)
        throw ContractError("partition covers " + std::to_string(covered) + " of " +
                            std::to_string(K) + " classes");

    const double* z = logits.data().data();
    const double tiny = 1e-300;

    double loss = 0.0;
    struct GroupCache {
        std::vector<double> mean;  // size 1 (shared) or N (per-example)
        std::vector<double> norms; // |g|
    };
    auto cache = std::make_shared<std::vector<GroupCache>>();
    cache->reserve(groups.size());

    for (const auto& g : groups) {
        GroupCache gc;
        const double gsz = static_cast<double>(g.size());
        if (per_example_mean) {
            gc.mean.resize(static_cast<std::size_t>(N));
            for (int n = 0; n < N; ++n) {
                double s = 0.0;
                for (int i : g) s += z[static_cast<std::size_t>(n) * K + i];
                gc.mean[static_cast<std::size_t>(n)] = s / gsz;
            }
        } else {
            double s = 0.0;
            for (int n = 0; n < N; ++n)
                for (int i : g) s += z[static_cast<std::size_t>(n) * K + i];
            gc.mean.assign(1, s / (gsz * static_cast<double>(N)));
        }
        for (int i : g) {
            double sq = 0.0;
            for (int n = 0; n < N; ++n) {
                const double m = per_example_mean ? gc.mean[static_cast<std::size_t>(n)] : gc.mean[0];
                const double d = z[static_cast<std::size_t>(n) * K + i] - m;
                sq += d * d;
            }
            const double r = std::sqrt(sq);
            gc.norms.push_back(r);
            loss += r;
        }
        cache->push_back(std::move(gc));
    }

    Tensor out = Tensor::scalar(loss);
    if (should_record(logits)) {
        auto zi = logits.impl();
        auto grp = std::make_shared<std::vector<std::vector<int>>>(groups);
        Tape::active().record(out.impl(), [zi, grp, cache, N, K, per_example_mean,
                                           tiny](Tape& t, const std::vector<double>& dout) {
            auto* gz = t.grad_sink(zi);
            if (!gz) return;
            const double* z = zi->data.data();
            for (std::size_t gi = 0; gi < grp->size(); ++gi) {
                const auto& g = (*grp)[gi];
                const auto& gc = (*cache)[gi];
                const double gsz = static_cast<double>(g.size());
                if (per_example_mean) {
                    // dL/dz[n,j] = d_j[n]/r_j - (1/|g|) sum_i d_i[n]/r_i
                    for (int n = 0; n < N; ++n) {
                        const double m = gc.mean[static_cast<std::size_t>(n)];
                        double tsum = 0.0;
                        for (std::size_t a = 0; a < g.size(); ++a) {
                            const double r = gc.norms[a];
                            if (r > tiny)
                                tsum += (z[static_cast<std::size_t>(n) * K + g[a]] - m) / r;
                        }
                        for (std::size_t a = 0; a < g.size(); ++a) {
                            const double r = gc.norms[a];
                            const double dn =
                                r > tiny ? (z[static_cast<std::size_t>(n) * K + g[a]] - m) / r : 0.0;
                            (*gz)[static_cast<std::size_t>(n) * K + g[a]] +=
                                dout[0] * (dn - tsum / gsz);
                        }
                    }
                } else {
                    // dL/dz[n,j] = d_j[n]/r_j - (1/(N|g|)) sum_i S_i/r_i
                    const double m = gc.mean[0];
                    double tsum = 0.0;
                    for (std::size_t a = 0; a < g.size(); ++a) {
                        const double r = gc.norms[a];
                        if (r <= tiny) continue;
                        double s = 0.0;
                        for (int n = 0; n < N; ++n) s += z[static_cast<std::size_t>(n) * K + g[a]] - m;
                        tsum += s / r;
                    }
                    const double shift = tsum / (static_cast<double>(N) * gsz);
                    for (std::size_t a = 0; a < g.size(); ++a) {
                        const double r = gc.norms[a];
                        for (int n = 0; n < N; ++n) {
                            const double dn =
                                r > tiny ? (z[static_cast<std::size_t>(n) * K + g[a]] - m) / r : 0.0;
                            (*gz)[static_cast<std::size_t>(n) * K + g[a]] += dout[0] * (dn - shift);
                        }
                    }
                }
            }
        });
    }
    return out;
}

} // namespace hierprobe
