#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cxr/errors.hpp"

namespace cxr {

class Tensor;
struct TensorImpl;

/// One node of the reverse-mode computation graph. Ops subclass this, save
/// whatever context their backward rule needs, and accumulate into the input
/// gradients when invoked. The graph is a DAG; backward() visits each node
/// exactly once in reverse topological order.
struct OpNode {
    virtual ~OpNode() = default;
    virtual const char* name() const = 0;

    /// Reads `out.grad` and accumulates into the grads of `inputs` that need
    /// one. Must not touch inputs that neither require grad nor carry a graph.
    virtual void backward(const TensorImpl& out) = 0;

    std::vector<Tensor> inputs;
};

struct TensorImpl {
    std::vector<int> shape;
    std::vector<float> values;
    std::vector<float> grad; // empty until populated by backward()
    std::shared_ptr<OpNode> producer;
    bool requires_grad = false;
    bool retain_grad = false;
};

/// Dense row-major float32 tensor with optional gradient tracking. Cheap to
/// copy (shared storage). Leaf tensors own parameters and inputs; results of
/// ops carry the producer node that links them into the graph.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<float> values, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->values.size()); }
    int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }

    std::span<const float> values() const { return impl_->values; }
    /// Mutable view of the raw values. Only meaningful on leaves between
    /// steps (parameter updates); results of ops must not be mutated.
    std::span<float> values_mut() { return impl_->values; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }
    /// Keep this tensor's grad after backward even though it is not a leaf.
    void set_retain_grad(bool v) { impl_->retain_grad = v; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const float> grad() const { return impl_->grad; }
    void zero_grad();

    /// True if backward must propagate through this tensor.
    bool needs_grad() const { return impl_->requires_grad || impl_->producer != nullptr; }

    float item() const;

    /// Reverse-mode differentiation from a scalar root (seed gradient 1).
    /// Repeated calls accumulate into existing grads.
    void backward() const;
    /// Same, from an arbitrary-shaped root with an explicit output gradient.
    void backward(std::span<const float> seed) const;

    TensorImpl& impl() { return *impl_; }
    const TensorImpl& impl() const { return *impl_; }
    const std::shared_ptr<TensorImpl>& handle() const { return impl_; }

    /// Builds an op result and attaches the node when gradients are needed.
    static Tensor make_result(std::vector<int> shape, std::vector<float> values,
                              std::shared_ptr<OpNode> node);

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
};

/// Disables graph construction in scope (pure inference).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool grad_enabled();

private:
    bool previous_;
};

/// Pads with floor(kernel/2) per side so stride-1 convolutions preserve the
/// spatial size; kValid applies no padding.
enum class Padding { kSame, kValid };

std::int64_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// ---- Layer primitives -------------------------------------------------

/// 2-D convolution, NCHW input, KCkhkw weight, optional bias of length K.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, Padding padding);

/// Max pooling; gradient routes to the first (row-major) maximum of each window.
Tensor maxpool2d(const Tensor& input, int k, int stride, Padding padding);

/// Mean over the spatial dims: [N,C,H,W] -> [N,C].
Tensor global_avgpool(const Tensor& input);

/// Running statistics and step count for one batch-norm layer.
struct BatchNormState {
    std::vector<float> running_mean;
    std::vector<float> running_var;
    std::int64_t batches_seen = 0;
    float momentum = 0.1f;
    float eps = 1e-5f;

    explicit BatchNormState(int channels = 0)
        : running_mean(static_cast<std::size_t>(channels), 0.0f),
          running_var(static_cast<std::size_t>(channels), 1.0f) {}
    bool initialized() const { return batches_seen > 0; }
};

enum class BatchNormMode { kTrain, kEval };

/// Per-channel batch normalization. Train mode normalizes by batch moments and
/// updates `state` by exponential moving average; eval mode uses the running
/// stats (error if none recorded yet). Differentiable in both modes.
Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, BatchNormMode mode);

/// Affine map: [N,D] x [D,O] + [O].
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& input);
Tensor sigmoid(const Tensor& input);

/// Concatenate along the feature axis: [N,D1] + [N,D2] -> [N,D1+D2].
Tensor concat(const Tensor& a, const Tensor& b);

/// Elementwise same-shape addition (residual connections).
Tensor add(const Tensor& a, const Tensor& b);

/// Sum of all elements -> scalar.
Tensor sum(const Tensor& input);

/// Mean of all elements -> scalar.
Tensor mean(const Tensor& input);

// ---- Gradient checking -------------------------------------------------

struct GradCheckReport {
    double max_rel_dev = 0.0;
    bool pass = false;
    double tol = 0.0;
    std::string worst_tensor;
    std::int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Compares analytic gradients of the scalar-valued `f` against central
/// finite differences on every element of `inputs`. The deviation is
/// |analytic - numeric| / max(1, |analytic|, |numeric|); passes iff the max
/// over all elements is <= tol. `f` must be deterministic.
GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& inputs,
                           double tol, float step = 1e-3f);

} // namespace cxr
