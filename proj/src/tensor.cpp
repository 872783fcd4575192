#include "cxr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace cxr {

namespace {

// C[M,N] += A[M,K] * B[K,N]
void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        float* crow = c + static_cast<std::size_t>(i) * n;
        const float* arow = a + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const float av = arow[p];
            if (av == 0.0f) continue;
            const float* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A[M,P] * B[N,P]^T
void gemm_nt(const float* a, const float* b, float* c, int m, int p, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<std::size_t>(i) * p;
        float* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const float* brow = b + static_cast<std::size_t>(j) * p;
            float acc = 0.0f;
            for (int q = 0; q < p; ++q) acc += arow[q] * brow[q];
            crow[j] += acc;
        }
    }
}

// C[K,N] += A[M,K]^T * B[M,N]
void gemm_tn(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<std::size_t>(i) * k;
        const float* brow = b + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const float av = arow[p];
            if (av == 0.0f) continue;
            float* crow = c + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void ensure_grad(TensorImpl& t) {
    if (t.grad.empty()) t.grad.assign(t.values.size(), 0.0f);
}

bool input_wants_grad(const Tensor& t) { return t.defined() && t.needs_grad(); }

struct ConvGeom {
    int batch, in_ch, in_h, in_w;
    int out_ch, kh, kw;
    int stride, pad_h, pad_w;
    int out_h, out_w;
    int pad_full_h, pad_full_w;
};

ConvGeom conv_geometry(const std::vector<int>& in, const std::vector<int>& w, int stride,
                       Padding padding) {
    ConvGeom g{};
    g.batch = in[0];
    g.in_ch = in[1];
    g.in_h = in[2];
    g.in_w = in[3];
    g.out_ch = w[0];
    g.kh = w[2];
    g.kw = w[3];
    g.stride = stride;
    g.pad_h = padding == Padding::kSame ? g.kh / 2 : 0;
    g.pad_w = padding == Padding::kSame ? g.kw / 2 : 0;
    g.pad_full_h = g.in_h + 2 * g.pad_h;
    g.pad_full_w = g.in_w + 2 * g.pad_w;
    g.out_h = (g.pad_full_h - g.kh) / stride + 1;
    g.out_w = (g.pad_full_w - g.kw) / stride + 1;
    return g;
}

// Zero-padded copy of one image plane set: [C,H,W] -> [C,H+2p,W+2p].
void pad_plane(const float* src, float* dst, int c, int h, int w, int ph, int pw, float fill) {
    const int fh = h + 2 * ph;
    const int fw = w + 2 * pw;
    std::fill(dst, dst + static_cast<std::size_t>(c) * fh * fw, fill);
    for (int ci = 0; ci < c; ++ci) {
        for (int y = 0; y < h; ++y) {
            const float* s = src + (static_cast<std::size_t>(ci) * h + y) * w;
            float* d = dst + (static_cast<std::size_t>(ci) * fh + y + ph) * fw + pw;
            std::memcpy(d, s, sizeof(float) * static_cast<std::size_t>(w));
        }
    }
}

// Col[(c,ki,kj),(oy,ox)] from a padded [C,FH,FW] plane.
void im2col(const float* padded, float* col, const ConvGeom& g) {
    const int cols = g.out_h * g.out_w;
    for (int c = 0; c < g.in_ch; ++c) {
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                float* dst = col + (static_cast<std::size_t>(c) * g.kh * g.kw +
                                    static_cast<std::size_t>(ki) * g.kw + kj) *
                                       cols;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const float* src = padded +
                        (static_cast<std::size_t>(c) * g.pad_full_h + oy * g.stride + ki) *
                            g.pad_full_w +
                        kj;
                    for (int ox = 0; ox < g.out_w; ++ox) dst[ox] = src[static_cast<std::size_t>(ox) * g.stride];
                    dst += g.out_w;
                }
            }
        }
    }
}

// Scatter-add of the column gradient back into a padded [C,FH,FW] buffer.
void col2im_acc(const float* col, float* padded, const ConvGeom& g) {
    const int cols = g.out_h * g.out_w;
    for (int c = 0; c < g.in_ch; ++c) {
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                const float* src = col + (static_cast<std::size_t>(c) * g.kh * g.kw +
                                          static_cast<std::size_t>(ki) * g.kw + kj) *
                                             cols;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    float* dst = padded +
                        (static_cast<std::size_t>(c) * g.pad_full_h + oy * g.stride + ki) *
                            g.pad_full_w +
                        kj;
                    for (int ox = 0; ox < g.out_w; ++ox) dst[static_cast<std::size_t>(ox) * g.stride] += src[ox];
                    src += g.out_w;
                }
            }
        }
    }
}

} // namespace

std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (const int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
    for (const int d : shape)
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->values.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> values, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->values = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

void Tensor::zero_grad() { impl_->grad.clear(); }

float Tensor::item() const {
    if (numel() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->values[0];
}

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool NoGradGuard::grad_enabled() { return g_grad_enabled; }

Tensor Tensor::make_result(std::vector<int> shape, std::vector<float> values,
                           std::shared_ptr<OpNode> node) {
    Tensor out = Tensor::from(std::move(shape), std::move(values), false);
    bool track = false;
    if (g_grad_enabled)
        for (const Tensor& in : node->inputs)
            if (in.defined() && in.needs_grad()) track = true;
    if (track) out.impl_->producer = std::move(node);
    return out;
}

void Tensor::backward() const {
    if (numel() != 1)
        throw UsageError("backward() root must be scalar, got shape " + shape_str(shape()));
    const float one = 1.0f;
    backward(std::span<const float>(&one, 1));
}

void Tensor::backward(std::span<const float> seed) const {
    if (static_cast<std::int64_t>(seed.size()) != numel())
        throw ShapeError("backward seed size mismatch");
    if (!impl_->producer && !impl_->requires_grad)
        throw UsageError("backward() on a tensor with no graph and no requires_grad leaves");

    // Topological order over producer nodes (iterative DFS, visit-once).
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    if (impl_->producer) {
        stack.emplace_back(impl_.get(), 0);
        seen.insert(impl_.get());
    }
    while (!stack.empty()) {
        auto& [node, child] = stack.back();
        const auto& ins = node->producer->inputs;
        bool descended = false;
        while (child < ins.size()) {
            const Tensor& in = ins[child++];
            if (!in.defined() || !in.impl().producer) continue;
            TensorImpl* raw = const_cast<TensorImpl*>(&in.impl());
            if (seen.insert(raw).second) {
                stack.emplace_back(raw, 0);
                descended = true;
                break;
            }
        }
        if (!descended && child >= ins.size()) {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // The seed is transient: each backward() call propagates exactly `seed`,
    // so repeated calls accumulate leaf grads linearly.
    const bool root_keeps_grad = impl_->requires_grad || impl_->retain_grad;
    if (impl_->producer && !root_keeps_grad) impl_->grad.clear();
    ensure_grad(*impl_);
    for (std::size_t i = 0; i < seed.size(); ++i) impl_->grad[i] += seed[i];

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* t = *it;
        if (t->grad.empty()) ensure_grad(*t); // unreached outputs contribute zero
        t->producer->backward(*t);
        if (!t->retain_grad && !t->requires_grad && t != impl_.get())
            t->grad.clear(); // intermediate grads are transient
    }
    if (impl_->producer && !root_keeps_grad) impl_->grad.clear();
}

// ---- Ops ----------------------------------------------------------------

namespace {

struct AddOp final : OpNode {
    const char* name() const override { return "add"; }
    void backward(const TensorImpl& out) override {
        for (int i = 0; i < 2; ++i) {
            Tensor in = inputs[static_cast<std::size_t>(i)];
            if (!input_wants_grad(in)) continue;
            ensure_grad(in.impl());
            auto& g = in.impl().grad;
            for (std::size_t j = 0; j < g.size(); ++j) g[j] += out.grad[j];
        }
    }
};

struct ConcatOp final : OpNode {
    int d1 = 0, d2 = 0;
    const char* name() const override { return "concat"; }
    void backward(const TensorImpl& out) override {
        const int n = out.shape[0];
        const int d = d1 + d2;
        for (int which = 0; which < 2; ++which) {
            Tensor in = inputs[static_cast<std::size_t>(which)];
            if (!input_wants_grad(in)) continue;
            ensure_grad(in.impl());
            auto& g = in.impl().grad;
            const int width = which == 0 ? d1 : d2;
            const int offset = which == 0 ? 0 : d1;
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < width; ++c)
                    g[static_cast<std::size_t>(r) * width + c] +=
                        out.grad[static_cast<std::size_t>(r) * d + offset + c];
        }
    }
};

struct ReluOp final : OpNode {
    const char* name() const override { return "relu"; }
    void backward(const TensorImpl& out) override {
        Tensor in = inputs[0];
        if (!input_wants_grad(in)) return;
        ensure_grad(in.impl());
        auto& g = in.impl().grad;
        const auto& x = in.impl().values;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > 0.0f) g[i] += out.grad[i];
    }
};

struct SigmoidOp final : OpNode {
    const char* name() const override { return "sigmoid"; }
    void backward(const TensorImpl& out) override {
        Tensor in = inputs[0];
        if (!input_wants_grad(in)) return;
        ensure_grad(in.impl());
        auto& g = in.impl().grad;
        const auto& s = out.values;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * s[i] * (1.0f - s[i]);
    }
};

struct DenseOp final : OpNode {
    int n = 0, d = 0, o = 0;
    const char* name() const override { return "dense"; }
    void backward(const TensorImpl& out) override {
        Tensor in = inputs[0], w = inputs[1], b = inputs[2];
        if (input_wants_grad(in)) {
            ensure_grad(in.impl());
            gemm_nt(out.grad.data(), w.values().data(), in.impl().grad.data(), n, o, d);
        }
        if (input_wants_grad(w)) {
            ensure_grad(w.impl());
            gemm_tn(in.values().data(), out.grad.data(), w.impl().grad.data(), n, d, o);
        }
        if (b.defined() && input_wants_grad(b)) {
            ensure_grad(b.impl());
            auto& g = b.impl().grad;
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < o; ++c) g[static_cast<std::size_t>(c)] += out.grad[static_cast<std::size_t>(r) * o + c];
        }
    }
};

struct Conv2dOp final : OpNode {
    ConvGeom g{};
    const char* name() const override { return "conv2d"; }
    void backward(const TensorImpl& out) override {
        Tensor in = inputs[0], w = inputs[1], b = inputs[2];
        const int ckk = g.in_ch * g.kh * g.kw;
        const int cols = g.out_h * g.out_w;
        const std::size_t plane = static_cast<std::size_t>(g.in_ch) * g.pad_full_h * g.pad_full_w;

        const bool want_in = input_wants_grad(in);
        const bool want_w = input_wants_grad(w);
        std::vector<float> padded(plane);
        std::vector<float> col(static_cast<std::size_t>(ckk) * cols);
        std::vector<float> dcol(want_in ? col.size() : 0);
        std::vector<float> dpad(want_in ? plane : 0);

        if (want_w) ensure_grad(w.impl());
        if (want_in) ensure_grad(in.impl());

        for (int ni = 0; ni < g.batch; ++ni) {
            const float* x = in.values().data() +
                             static_cast<std::size_t>(ni) * g.in_ch * g.in_h * g.in_w;
            const float* dy = out.grad.data() +
                              static_cast<std::size_t>(ni) * g.out_ch * cols;
            if (want_w || want_in) {
                pad_plane(x, padded.data(), g.in_ch, g.in_h, g.in_w, g.pad_h, g.pad_w, 0.0f);
                im2col(padded.data(), col.data(), g);
            }
            if (want_w) {
                gemm_nt(dy, col.data(), w.impl().grad.data(), g.out_ch, cols, ckk);
            }
            if (want_in) {
                std::fill(dcol.begin(), dcol.end(), 0.0f);
                gemm_tn(w.values().data(), dy, dcol.data(), g.out_ch, ckk, cols);
                std::fill(dpad.begin(), dpad.end(), 0.0f);
                col2im_acc(dcol.data(), dpad.data(), g);
                float* dx = in.impl().grad.data() +
                            static_cast<std::size_t>(ni) * g.in_ch * g.in_h * g.in_w;
                for (int c = 0; c < g.in_ch; ++c)
                    for (int y = 0; y < g.in_h; ++y) {
                        const float* s = dpad.data() +
                            (static_cast<std::size_t>(c) * g.pad_full_h + y + g.pad_h) *
                                g.pad_full_w +
                            g.pad_w;
                        float* dd = dx + (static_cast<std::size_t>(c) * g.in_h + y) * g.in_w;
                        for (int xw = 0; xw < g.in_w; ++xw) dd[xw] += s[xw];
                    }
            }
        }
        if (b.defined() && input_wants_grad(b)) {
            ensure_grad(b.impl());
            auto& gb = b.impl().grad;
            for (int ni = 0; ni < g.batch; ++ni)
                for (int kc = 0; kc < g.out_ch; ++kc) {
                    const float* dy = out.grad.data() +
                        (static_cast<std::size_t>(ni) * g.out_ch + kc) * cols;
                    float acc = 0.0f;
                    for (int i = 0; i < cols; ++i) acc += dy[i];
                    gb[static_cast<std::size_t>(kc)] += acc;
                }
        }
    }
};

struct MaxPoolOp final : OpNode {
    std::vector<std::int64_t> argmax; // flat index into the input, per output element
    const char* name() const override { return "maxpool2d"; }
    void backward(const TensorImpl& out) override {
        Tensor in = inputs[0];
        if (!input_wants_grad(in)) return;
        ensure_grad(in.impl());
        auto& g = in.impl().grad;
        for (std::size_t i = 0; i < argmax.size(); ++i)
            g[static_cast<std::size_t>(argmax[i])] += out.grad[i];
    }
};

struct GlobalAvgPoolOp final : OpNode {
    int h = 0, w = 0;
    const char* name() const override { return "global_avgpool"; }
    void backward(const TensorImpl& out) override {
        Tensor in = inputs[0];
        if (!input_wants_grad(in)) return;
        ensure_grad(in.impl());
        auto& g = in.impl().grad;
        const float inv = 1.0f / static_cast<float>(h * w);
        const std::size_t spatial = static_cast<std::size_t>(h) * w;
        for (std::size_t nc = 0; nc < out.grad.size(); ++nc) {
            const float go = out.grad[nc] * inv;
            float* dst = g.data() + nc * spatial;
            for (std::size_t i = 0; i < spatial; ++i) dst[i] += go;
        }
    }
};

struct BatchNormOp final : OpNode {
    int n = 0, c = 0, h = 0, w = 0;
    bool train = false;
    std::vector<float> xhat;   // train mode
    std::vector<float> invstd; // per channel
    const char* name() const override { return "batchnorm2d"; }

    void backward(const TensorImpl& out) override {
        Tensor in = inputs[0], gamma = inputs[1], beta = inputs[2];
        const std::size_t spatial = static_cast<std::size_t>(h) * w;
        const std::int64_t per_ch = static_cast<std::int64_t>(n) * h * w;

        const bool want_in = input_wants_grad(in);
        const bool want_gamma = input_wants_grad(gamma);
        const bool want_beta = input_wants_grad(beta);
        if (want_in) ensure_grad(in.impl());
        if (want_gamma) ensure_grad(gamma.impl());
        if (want_beta) ensure_grad(beta.impl());

        for (int ci = 0; ci < c; ++ci) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int ni = 0; ni < n; ++ni) {
                const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * spatial;
                for (std::size_t s = 0; s < spatial; ++s) {
                    const double dy = out.grad[base + s];
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat[base + s];
                }
            }
            if (want_beta) beta.impl().grad[static_cast<std::size_t>(ci)] += static_cast<float>(sum_dy);
            if (want_gamma) gamma.impl().grad[static_cast<std::size_t>(ci)] += static_cast<float>(sum_dy_xhat);
            if (!want_in) continue;

            const float gm = gamma.values()[static_cast<std::size_t>(ci)];
            const float scale = gm * invstd[static_cast<std::size_t>(ci)];
            if (train) {
                const float mean_dy = static_cast<float>(sum_dy / static_cast<double>(per_ch));
                const float mean_dy_xhat = static_cast<float>(sum_dy_xhat / static_cast<double>(per_ch));
                for (int ni = 0; ni < n; ++ni) {
                    const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * spatial;
                    float* gx = in.impl().grad.data() + base;
                    for (std::size_t s = 0; s < spatial; ++s)
                        gx[s] += scale * (out.grad[base + s] - mean_dy - xhat[base + s] * mean_dy_xhat);
                }
            } else {
                for (int ni = 0; ni < n; ++ni) {
                    const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * spatial;
                    float* gx = in.impl().grad.data() + base;
                    for (std::size_t s = 0; s < spatial; ++s) gx[s] += scale * out.grad[base + s];
                }
            }
        }
    }
};

struct SumOp final : OpNode {
    float scale = 1.0f; // 1/N for mean
    const char* name() const override { return scale == 1.0f ? "sum" : "mean"; }
    void backward(const TensorImpl& out) override {
        Tensor in = inputs[0];
        if (!input_wants_grad(in)) return;
        ensure_grad(in.impl());
        auto& g = in.impl().grad;
        const float go = out.grad[0] * scale;
        for (auto& v : g) v += go;
    }
};

} // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              Padding padding) {
    if (input.ndim() != 4) throw ShapeError("conv2d input must be NCHW, got " + shape_str(input.shape()));
    if (weight.ndim() != 4) throw ShapeError("conv2d weight must be KCkhkw, got " + shape_str(weight.shape()));
    if (stride < 1) throw ValueError("conv2d stride must be >= 1");
    if (input.dim(1) != weight.dim(1))
        throw ShapeError("conv2d channel mismatch: input C=" + std::to_string(input.dim(1)) +
                         ", weight C=" + std::to_string(weight.dim(1)));
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != weight.dim(0)))
        throw ShapeError("conv2d bias must be [K]");

    const ConvGeom g = conv_geometry(input.shape(), weight.shape(), stride, padding);
    if (g.kh > g.pad_full_h || g.kw > g.pad_full_w)
        throw ShapeError("conv2d kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                         " does not fit padded input");

    const int ckk = g.in_ch * g.kh * g.kw;
    const int cols = g.out_h * g.out_w;
    std::vector<float> out(static_cast<std::size_t>(g.batch) * g.out_ch * cols, 0.0f);
    std::vector<float> padded(static_cast<std::size_t>(g.in_ch) * g.pad_full_h * g.pad_full_w);
    std::vector<float> col(static_cast<std::size_t>(ckk) * cols);

    for (int ni = 0; ni < g.batch; ++ni) {
        const float* x = input.values().data() +
                         static_cast<std::size_t>(ni) * g.in_ch * g.in_h * g.in_w;
        pad_plane(x, padded.data(), g.in_ch, g.in_h, g.in_w, g.pad_h, g.pad_w, 0.0f);
        im2col(padded.data(), col.data(), g);
        float* y = out.data() + static_cast<std::size_t>(ni) * g.out_ch * cols;
        gemm_nn(weight.values().data(), col.data(), y, g.out_ch, ckk, cols);
        if (bias.defined()) {
            for (int kc = 0; kc < g.out_ch; ++kc) {
                const float bv = bias.values()[static_cast<std::size_t>(kc)];
                float* row = y + static_cast<std::size_t>(kc) * cols;
                for (int i = 0; i < cols; ++i) row[i] += bv;
            }
        }
    }

    auto node = std::make_shared<Conv2dOp>();
    node->g = g;
    node->inputs = {input, weight, bias};
    return Tensor::make_result({g.batch, g.out_ch, g.out_h, g.out_w}, std::move(out), std::move(node));
}

Tensor maxpool2d(const Tensor& input, int k, int stride, Padding padding) {
    if (input.ndim() != 4) throw ShapeError("maxpool2d input must be NCHW");
    if (k < 1) throw ValueError("maxpool2d kernel must be >= 1");
    if (stride < 1) throw ValueError("maxpool2d stride must be >= 1");

    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int p = padding == Padding::kSame ? k / 2 : 0;
    const int fh = h + 2 * p, fw = w + 2 * p;
    if (k > fh || k > fw)
        throw ShapeError("maxpool2d window " + std::to_string(k) + " larger than padded input " +
                         std::to_string(fh) + "x" + std::to_string(fw));
    const int oh = (fh - k) / stride + 1;
    const int ow = (fw - k) / stride + 1;

    auto node = std::make_shared<MaxPoolOp>();
    node->inputs = {input};
    node->argmax.resize(static_cast<std::size_t>(n) * c * oh * ow);
    std::vector<float> out(node->argmax.size());

    const float* x = input.values().data();
    std::size_t oi = 0;
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
            const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * h * w;
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    float best = -std::numeric_limits<float>::infinity();
                    std::int64_t best_idx = -1;
                    const int y0 = oy * stride - p;
                    const int x0 = ox * stride - p;
                    for (int ky = 0; ky < k; ++ky) {
                        const int y = y0 + ky;
                        if (y < 0 || y >= h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int xx = x0 + kx;
                            if (xx < 0 || xx >= w) continue;
                            const float v = x[base + static_cast<std::size_t>(y) * w + xx];
                            if (v > best) {
                                best = v;
                                best_idx = static_cast<std::int64_t>(base) + static_cast<std::int64_t>(y) * w + xx;
                            }
                        }
                    }
                    out[oi] = best;
                    node->argmax[oi] = best_idx;
                    ++oi;
                }
        }

    return Tensor::make_result({n, c, oh, ow}, std::move(out), std::move(node));
}

Tensor global_avgpool(const Tensor& input) {
    if (input.ndim() != 4) throw ShapeError("global_avgpool input must be NCHW");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h < 1 || w < 1) throw ShapeError("global_avgpool needs H,W >= 1");

    const std::size_t spatial = static_cast<std::size_t>(h) * w;
    std::vector<float> out(static_cast<std::size_t>(n) * c);
    const float* x = input.values().data();
    for (std::size_t nc = 0; nc < out.size(); ++nc) {
        double acc = 0.0;
        const float* src = x + nc * spatial;
        for (std::size_t i = 0; i < spatial; ++i) acc += src[i];
        out[nc] = static_cast<float>(acc / static_cast<double>(spatial));
    }

    auto node = std::make_shared<GlobalAvgPoolOp>();
    node->h = h;
    node->w = w;
    node->inputs = {input};
    return Tensor::make_result({n, c}, std::move(out), std::move(node));
}

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, BatchNormMode mode) {
    if (input.ndim() != 4) throw ShapeError("batchnorm2d input must be NCHW");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (gamma.numel() != c || beta.numel() != c)
        throw ShapeError("batchnorm2d gamma/beta must have C elements");
    if (static_cast<int>(state.running_mean.size()) != c)
        throw ShapeError("batchnorm2d state channel mismatch");
    const std::int64_t per_ch = static_cast<std::int64_t>(n) * h * w;
    if (per_ch < 1) throw ShapeError("batchnorm2d needs N*H*W >= 1");
    if (mode == BatchNormMode::kEval && !state.initialized())
        throw StateError("batchnorm2d eval requested before any running stats were recorded");

    const std::size_t spatial = static_cast<std::size_t>(h) * w;
    const float* x = input.values().data();

    auto node = std::make_shared<BatchNormOp>();
    node->n = n;
    node->c = c;
    node->h = h;
    node->w = w;
    node->train = mode == BatchNormMode::kTrain;
    node->invstd.resize(static_cast<std::size_t>(c));
    node->xhat.resize(input.values().size());

    std::vector<float> out(input.values().size());
    for (int ci = 0; ci < c; ++ci) {
        float mean, var;
        if (mode == BatchNormMode::kTrain) {
            double acc = 0.0;
            for (int ni = 0; ni < n; ++ni) {
                const float* src = x + (static_cast<std::size_t>(ni) * c + ci) * spatial;
                for (std::size_t s = 0; s < spatial; ++s) acc += src[s];
            }
            mean = static_cast<float>(acc / static_cast<double>(per_ch));
            double vacc = 0.0;
            for (int ni = 0; ni < n; ++ni) {
                const float* src = x + (static_cast<std::size_t>(ni) * c + ci) * spatial;
                for (std::size_t s = 0; s < spatial; ++s) {
                    const double d = static_cast<double>(src[s]) - mean;
                    vacc += d * d;
                }
            }
            var = static_cast<float>(vacc / static_cast<double>(per_ch));
            state.running_mean[static_cast<std::size_t>(ci)] =
                (1.0f - state.momentum) * state.running_mean[static_cast<std::size_t>(ci)] + state.momentum * mean;
            state.running_var[static_cast<std::size_t>(ci)] =
                (1.0f - state.momentum) * state.running_var[static_cast<std::size_t>(ci)] + state.momentum * var;
        } else {
            mean = state.running_mean[static_cast<std::size_t>(ci)];
            var = state.running_var[static_cast<std::size_t>(ci)];
        }
        const float inv = 1.0f / std::sqrt(var + state.eps);
        node->invstd[static_cast<std::size_t>(ci)] = inv;
        const float gm = gamma.values()[static_cast<std::size_t>(ci)];
        const float bt = beta.values()[static_cast<std::size_t>(ci)];
        for (int ni = 0; ni < n; ++ni) {
            const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) {
                const float xh = (x[base + s] - mean) * inv;
                node->xhat[base + s] = xh;
                out[base + s] = gm * xh + bt;
            }
        }
    }
    if (mode == BatchNormMode::kTrain) ++state.batches_seen;

    node->inputs = {input, gamma, beta};
    return Tensor::make_result(input.shape(), std::move(out), std::move(node));
}

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.ndim() != 2 || weight.ndim() != 2)
        throw ShapeError("dense expects [N,D] x [D,O]");
    const int n = input.dim(0), d = input.dim(1), o = weight.dim(1);
    if (weight.dim(0) != d)
        throw ShapeError("dense dim mismatch: input D=" + std::to_string(d) + ", weight D=" +
                         std::to_string(weight.dim(0)));
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != o))
        throw ShapeError("dense bias must be [O]");

    std::vector<float> out(static_cast<std::size_t>(n) * o, 0.0f);
    gemm_nn(input.values().data(), weight.values().data(), out.data(), n, d, o);
    if (bias.defined())
        for (int r = 0; r < n; ++r)
            for (int cidx = 0; cidx < o; ++cidx)
                out[static_cast<std::size_t>(r) * o + cidx] += bias.values()[static_cast<std::size_t>(cidx)];

    auto node = std::make_shared<DenseOp>();
    node->n = n;
    node->d = d;
    node->o = o;
    node->inputs = {input, weight, bias};
    return Tensor::make_result({n, o}, std::move(out), std::move(node));
}

Tensor relu(const Tensor& input) {
    std::vector<float> out(input.values().begin(), input.values().end());
    for (auto& v : out) v = v > 0.0f ? v : 0.0f;
    auto node = std::make_shared<ReluOp>();
    node->inputs = {input};
    return Tensor::make_result(input.shape(), std::move(out), std::move(node));
}

Tensor sigmoid(const Tensor& input) {
    std::vector<float> out(input.values().begin(), input.values().end());
    for (auto& v : out) v = 1.0f / (1.0f + std::exp(-v));
    auto node = std::make_shared<SigmoidOp>();
    node->inputs = {input};
    return Tensor::make_result(input.shape(), std::move(out), std::move(node));
}

Tensor concat(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("concat expects two [N,D] tensors");
    if (a.dim(0) != b.dim(0))
        throw ShapeError("concat leading-dim mismatch: " + std::to_string(a.dim(0)) + " vs " +
                         std::to_string(b.dim(0)));
    const int n = a.dim(0), d1 = a.dim(1), d2 = b.dim(1);
    std::vector<float> out(static_cast<std::size_t>(n) * (d1 + d2));
    for (int r = 0; r < n; ++r) {
        std::memcpy(out.data() + static_cast<std::size_t>(r) * (d1 + d2),
                    a.values().data() + static_cast<std::size_t>(r) * d1,
                    sizeof(float) * static_cast<std::size_t>(d1));
        std::memcpy(out.data() + static_cast<std::size_t>(r) * (d1 + d2) + d1,
                    b.values().data() + static_cast<std::size_t>(r) * d2,
                    sizeof(float) * static_cast<std::size_t>(d2));
    }
    auto node = std::make_shared<ConcatOp>();
    node->d1 = d1;
    node->d2 = d2;
    node->inputs = {a, b};
    return Tensor::make_result({n, d1 + d2}, std::move(out), std::move(node));
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<float> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    auto node = std::make_shared<AddOp>();
    node->inputs = {a, b};
    return Tensor::make_result(a.shape(), std::move(out), std::move(node));
}

Tensor sum(const Tensor& input) {
    double acc = 0.0;
    for (const float v : input.values()) acc += v;
    auto node = std::make_shared<SumOp>();
    node->inputs = {input};
    return Tensor::make_result({1}, {static_cast<float>(acc)}, std::move(node));
}

Tensor mean(const Tensor& input) {
    if (input.numel() == 0) throw ShapeError("mean of empty tensor");
    double acc = 0.0;
    for (const float v : input.values()) acc += v;
    auto node = std::make_shared<SumOp>();
    node->scale = 1.0f / static_cast<float>(input.numel());
    node->inputs = {input};
    return Tensor::make_result(
        {1}, {static_cast<float>(acc / static_cast<double>(input.numel()))}, std::move(node));
}

// ---- Gradient checking ----------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& inputs,
                           double tol, float step) {
    GradCheckReport report;
    report.tol = tol;

    for (auto [name, t] : inputs) t.zero_grad();
    Tensor loss = f();
    if (loss.numel() != 1) throw UsageError("grad_check: function must be scalar-valued");
    loss.backward();

    std::vector<std::vector<float>> analytic;
    for (const auto& [name, t] : inputs) {
        if (!t.requires_grad())
            throw UsageError("grad_check: input '" + name + "' does not require grad");
        if (t.has_grad())
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        else
            analytic.emplace_back(t.numel(), 0.0f);
    }

    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor t = inputs[ti].second;
        auto vals = t.values_mut();
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const float orig = vals[static_cast<std::size_t>(i)];
            const float xp = orig + step;
            const float xm = orig - step;

            vals[static_cast<std::size_t>(i)] = xp;
            const double fp = static_cast<double>(f().item());
            vals[static_cast<std::size_t>(i)] = xm;
            const double fm = static_cast<double>(f().item());
            vals[static_cast<std::size_t>(i)] = orig;

            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("grad_check: non-finite forward value at '" + inputs[ti].first +
                                   "' index " + std::to_string(i));

            // Use the actually-representable step width.
            const double h2 = static_cast<double>(xp) - static_cast<double>(xm);
            const double numeric = (fp - fm) / h2;
            const double ga = analytic[ti][static_cast<std::size_t>(i)];
            if (!std::isfinite(ga))
                throw NumericError("grad_check: non-finite analytic gradient at '" +
                                   inputs[ti].first + "' index " + std::to_string(i));
            const double denom = std::max({1.0, std::abs(ga), std::abs(numeric)});
            const double rel = std::abs(ga - numeric) / denom;
            if (rel > report.max_rel_dev) {
                report.max_rel_dev = rel;
                report.worst_tensor = inputs[ti].first;
                report.worst_index = i;
                report.analytic = ga;
                report.numeric = numeric;
            }
        }
    }
    report.pass = report.max_rel_dev <= tol;
    return report;
}

} // namespace cxr
