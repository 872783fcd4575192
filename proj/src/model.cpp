#include "cxr/model.hpp"

#include <cmath>
#include <utility>

#include "cxr/rng.hpp"

namespace cxr {

const char* to_string(FreezePolicy p) {
    switch (p) {
    case FreezePolicy::kNone: return "none";
    case FreezePolicy::kOffTheShelf: return "off_the_shelf";
    case FreezePolicy::kFineTune: return "fine_tune";
    }
    return "?";
}

const char* to_string(ModelKind k) {
    switch (k) {
    case ModelKind::kResNet: return "resnet";
    case ModelKind::kMetaMlp: return "meta_mlp";
    case ModelKind::kProbe: return "probe";
    }
    return "?";
}

const char* to_string(ProbeTarget t) {
    switch (t) {
    case ProbeTarget::kAge: return "age";
    case ProbeTarget::kGender: return "gender";
    case ProbeTarget::kView: return "view";
    }
    return "?";
}

FreezePolicy freeze_from_string(const std::string& s) {
    if (s == "none") return FreezePolicy::kNone;
    if (s == "off_the_shelf" || s == "ots") return FreezePolicy::kOffTheShelf;
    if (s == "fine_tune" || s == "ft") return FreezePolicy::kFineTune;
    throw ValueError("unknown freeze policy '" + s + "'");
}

ProbeTarget probe_target_from_string(const std::string& s) {
    if (s == "age") return ProbeTarget::kAge;
    if (s == "gender") return ProbeTarget::kGender;
    if (s == "view") return ProbeTarget::kView;
    throw ValueError("unknown probe target '" + s + "'");
}

void ModelConfig::validate() const {
    if (depth != 38 && depth != 50 && depth != 101)
        throw ValueError("ModelConfig: depth must be 38, 50 or 101, got " + std::to_string(depth));
    if (input_channels != 1 && input_channels != 3)
        throw ValueError("ModelConfig: input_channels must be 1 or 3");
    if (input_size < 16)
        throw ValueError("ModelConfig: input_size must be >= 16");
    if (input_size == 448 && !extra_pool_after_conv2)
        throw ValueError("ModelConfig: input_size 448 requires extra_pool_after_conv2 (the -large variant)");
    if (num_labels != 15)
        throw ValueError("ModelConfig: num_labels is fixed to 15, got " + std::to_string(num_labels));
    if (width_div < 1 || 64 % width_div != 0)
        throw ValueError("ModelConfig: width_div must divide 64");
}

std::array<int, 4> ModelConfig::stage_blocks() const {
    switch (depth) {
    case 38: return {2, 2, 3, 3};
    case 50: return {3, 4, 6, 3};
    case 101: return {3, 4, 23, 3};
    default: throw ValueError("ModelConfig: bad depth");
    }
}

Tensor make_meta_tensor(std::span<const MetaFeatures> metas) {
    std::vector<float> v;
    v.reserve(metas.size() * 3);
    for (const auto& m : metas) {
        if (m.age_scaled < 0.0f || m.age_scaled > 1.0f)
            throw ValueError("MetaFeatures: age_scaled must be in [0,1]");
        if (m.gender != 0.0f && m.gender != 1.0f)
            throw ValueError("MetaFeatures: gender must be 0 or 1");
        if (m.view != 0.0f && m.view != 1.0f)
            throw ValueError("MetaFeatures: view must be 0 or 1");
        v.push_back(m.age_scaled);
        v.push_back(m.gender);
        v.push_back(m.view);
    }
    return Tensor::from({static_cast<int>(metas.size()), 3}, std::move(v));
}

namespace {

Tensor he_init(std::vector<int> shape, int fan_in, Rng& rng) {
    const float std = std::sqrt(2.0f / static_cast<float>(fan_in));
    std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.normal_f(0.0f, std);
    return Tensor::from(std::move(shape), std::move(v), true);
}

ConvBnLayer make_conv_bn(int in_ch, int out_ch, int k, int stride, Rng& rng) {
    ConvBnLayer l;
    l.weight = he_init({out_ch, in_ch, k, k}, in_ch * k * k, rng);
    l.gamma = Tensor::full({out_ch}, 1.0f, true);
    l.beta = Tensor::zeros({out_ch}, true);
    l.bn = BatchNormState(out_ch);
    l.stride = stride;
    return l;
}

} // namespace

Model build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(Rng::mix(seed, "model-init"));

    Model m;
    m.kind_ = ModelKind::kResNet;
    m.config_ = config;

    const int div = config.width_div;
    const int stem_ch = 64 / div;
    m.stem_ = make_conv_bn(config.input_channels, stem_ch, 7, 2, rng);

    const std::array<int, 4> blocks = config.stage_blocks();
    const std::array<int, 4> mids = {64 / div, 128 / div, 256 / div, 512 / div};
    int in_ch = stem_ch;
    for (int s = 0; s < 4; ++s) {
        std::vector<Bottleneck> stage;
        const int mid = mids[static_cast<std::size_t>(s)];
        const int out = mid * 4;
        for (int b = 0; b < blocks[static_cast<std::size_t>(s)]; ++b) {
            const int stride = (s > 0 && b == 0) ? 2 : 1;
            Bottleneck blk;
            blk.reduce = make_conv_bn(in_ch, mid, 1, stride, rng);
            blk.spatial = make_conv_bn(mid, mid, 3, 1, rng);
            blk.expand = make_conv_bn(mid, out, 1, 1, rng);
            if (stride != 1 || in_ch != out)
                blk.projection = make_conv_bn(in_ch, out, 1, stride, rng);
            stage.push_back(std::move(blk));
            in_ch = out;
        }
        m.stages_.push_back(std::move(stage));
    }

    const int head_in = config.head_input_dim();
    m.head_weight_ = he_init({head_in, config.num_labels}, head_in, rng);
    m.head_bias_ = Tensor::zeros({config.num_labels}, true);

    // Apply the freeze policy to the autograd flags.
    for (auto& [name, t] : m.all_params())
        t.set_requires_grad(m.param_trainable(name));
    return m;
}

Model build_meta_mlp(std::uint64_t seed) {
    Rng rng(Rng::mix(seed, "meta-mlp-init"));
    Model m;
    m.kind_ = ModelKind::kMetaMlp;
    m.config_ = ModelConfig{};
    m.config_.use_meta = true;
    m.mlp_w1_ = he_init({3, 32}, 3, rng);
    m.mlp_b1_ = Tensor::zeros({32}, true);
    m.mlp_w2_ = he_init({32, 15}, 32, rng);
    m.mlp_b2_ = Tensor::zeros({15}, true);
    return m;
}

Model build_probe(const Model& base, ProbeTarget target, std::uint64_t seed) {
    if (base.kind_ != ModelKind::kResNet)
        throw UsageError("build_probe requires a ResNet base with a pooled feature layer");
    Rng rng(Rng::mix(seed, "probe-init"));
    Model m = base.clone();
    m.kind_ = ModelKind::kProbe;
    m.probe_target_ = target;
    m.config_.use_meta = false;
    const int feat = m.config_.feature_dim();
    m.probe_weight_ = he_init({feat, 1}, feat, rng);
    m.probe_bias_ = Tensor::zeros({1}, true);
    for (auto& [name, t] : m.all_params())
        t.set_requires_grad(m.param_trainable(name));
    return m;
}

bool Model::param_trainable(const std::string& name) const {
    switch (kind_) {
    case ModelKind::kMetaMlp: return true;
    case ModelKind::kProbe: return name.starts_with("probe.");
    case ModelKind::kResNet:
        if (config_.freeze == FreezePolicy::kOffTheShelf) return name.starts_with("head.");
        return true; // none and fine_tune train everything
    }
    return true;
}

namespace {

Tensor conv_bn_forward(const ConvBnLayer& l, const Tensor& x, BatchNormMode mode, bool trainable) {
    // A frozen layer behaves as a fixed feature extractor: eval statistics.
    const BatchNormMode eff =
        (mode == BatchNormMode::kTrain && trainable) ? BatchNormMode::kTrain : BatchNormMode::kEval;
    Tensor y = conv2d(x, l.weight, Tensor(), l.stride, Padding::kSame);
    return batchnorm2d(y, l.gamma, l.beta, const_cast<BatchNormState&>(l.bn), eff);
}

} // namespace

Tensor Model::trunk_forward(const Tensor& images, BatchNormMode mode, ForwardResult& out) const {
    const bool trunk_trainable =
        kind_ == ModelKind::kResNet && config_.freeze != FreezePolicy::kOffTheShelf;

    Tensor x = relu(conv_bn_forward(stem_, images, mode, trunk_trainable));
    out.stage_shapes.emplace_back("conv1", x.shape());
    x = maxpool2d(x, 3, 2, Padding::kSame);
    out.stage_shapes.emplace_back("pooling1", x.shape());

    for (int s = 0; s < 4; ++s) {
        const auto& stage = stages_[static_cast<std::size_t>(s)];
        const std::string stage_name = "conv" + std::to_string(s + 2);
        for (std::size_t b = 0; b < stage.size(); ++b) {
            const Bottleneck& blk = stage[b];
            Tensor y = relu(conv_bn_forward(blk.reduce, x, mode, trunk_trainable));
            y = relu(conv_bn_forward(blk.spatial, y, mode, trunk_trainable));
            y = conv_bn_forward(blk.expand, y, mode, trunk_trainable);
            Tensor shortcut = blk.projection
                ? conv_bn_forward(*blk.projection, x, mode, trunk_trainable)
                : x;
            x = relu(add(y, shortcut));
            // The stride-2 entry block is traced separately from the rest of
            // the stage (conv3_0 vs conv3_x).
            if (s > 0 && b == 0)
                out.stage_shapes.emplace_back(stage_name + "_0", x.shape());
            else if (b + 1 == stage.size())
                out.stage_shapes.emplace_back(stage_name + "_x", x.shape());
        }
        if (s == 0 && config_.extra_pool_after_conv2) {
            x = maxpool2d(x, 3, 2, Padding::kSame);
            out.stage_shapes.emplace_back("pooling_extra", x.shape());
        }
    }
    out.final_conv = x;
    Tensor pooled = global_avgpool(x);
    out.stage_shapes.emplace_back("pooling2", pooled.shape());
    return pooled;
}

ForwardResult Model::forward(const Tensor& images, const Tensor& meta, BatchNormMode mode) const {
    ForwardResult out;
    const bool wants_meta = kind_ == ModelKind::kMetaMlp ||
                            (kind_ == ModelKind::kResNet && config_.use_meta);
    if (wants_meta && !meta.defined())
        throw UsageError("forward: model consumes non-image features but none were provided");
    if (!wants_meta && meta.defined())
        throw UsageError("forward: model does not take non-image features");
    if (meta.defined() && (meta.ndim() != 2 || meta.dim(1) != 3))
        throw ShapeError("forward: meta must be [N,3]");

    if (kind_ == ModelKind::kMetaMlp) {
        Tensor h = relu(dense(meta, mlp_w1_, mlp_b1_));
        out.logits = dense(h, mlp_w2_, mlp_b2_);
        out.probs = sigmoid(out.logits);
        return out;
    }

    if (!images.defined() || images.ndim() != 4)
        throw ShapeError("forward: images must be [N,C,S,S]");
    if (images.dim(1) != config_.input_channels || images.dim(2) != config_.input_size ||
        images.dim(3) != config_.input_size)
        throw ShapeError("forward: image shape " + shape_str(images.shape()) +
                         " does not match config (C=" + std::to_string(config_.input_channels) +
                         ", S=" + std::to_string(config_.input_size) + ")");
    if (meta.defined() && meta.dim(0) != images.dim(0))
        throw ShapeError("forward: meta batch size mismatch");

    Tensor pooled = trunk_forward(images, mode, out);
    out.pooled = pooled;

    if (kind_ == ModelKind::kProbe) {
        out.logits = dense(pooled, probe_weight_, probe_bias_);
        out.probs = probe_target_ == ProbeTarget::kAge ? out.logits : sigmoid(out.logits);
        return out;
    }

    Tensor head_in = config_.use_meta ? concat(pooled, meta) : pooled;
    out.logits = dense(head_in, head_weight_, head_bias_);
    out.stage_shapes.emplace_back("dense", out.logits.shape());
    out.probs = sigmoid(out.logits);
    return out;
}

void Model::visit_state(const std::function<void(const StateEntry&)>& fn) const {
    auto emit_tensor = [&](const std::string& name, const Tensor& t, bool is_param) {
        StateEntry e;
        e.name = name;
        e.shape = t.shape();
        e.data = const_cast<float*>(t.values().data());
        e.size = t.values().size();
        e.is_param = is_param;
        e.trainable = is_param && param_trainable(name);
        fn(e);
    };
    auto emit_buffer = [&](const std::string& name, const std::vector<float>& v) {
        StateEntry e;
        e.name = name;
        e.shape = {static_cast<int>(v.size())};
        e.data = const_cast<float*>(v.data());
        e.size = v.size();
        e.is_param = false;
        e.trainable = false;
        fn(e);
    };
    auto emit_conv_bn = [&](const std::string& conv_name, const std::string& bn_name,
                            const ConvBnLayer& l) {
        emit_tensor(conv_name + ".weight", l.weight, true);
        emit_tensor(bn_name + ".gamma", l.gamma, true);
        emit_tensor(bn_name + ".beta", l.beta, true);
        emit_buffer(bn_name + ".running_mean", l.bn.running_mean);
        emit_buffer(bn_name + ".running_var", l.bn.running_var);
    };

    if (kind_ == ModelKind::kMetaMlp) {
        emit_tensor("mlp.fc1.weight", mlp_w1_, true);
        emit_tensor("mlp.fc1.bias", mlp_b1_, true);
        emit_tensor("mlp.fc2.weight", mlp_w2_, true);
        emit_tensor("mlp.fc2.bias", mlp_b2_, true);
        return;
    }

    emit_conv_bn("conv1", "bn1", stem_);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        const std::string stage = "conv" + std::to_string(s + 2);
        for (std::size_t b = 0; b < stages_[s].size(); ++b) {
            const std::string p = stage + "." + std::to_string(b);
            const Bottleneck& blk = stages_[s][b];
            emit_conv_bn(p + ".conv1", p + ".bn1", blk.reduce);
            emit_conv_bn(p + ".conv2", p + ".bn2", blk.spatial);
            emit_conv_bn(p + ".conv3", p + ".bn3", blk.expand);
            if (blk.projection)
                emit_conv_bn(p + ".shortcut.conv", p + ".shortcut.bn", *blk.projection);
        }
    }
    if (kind_ == ModelKind::kProbe) {
        emit_tensor("probe.weight", probe_weight_, true);
        emit_tensor("probe.bias", probe_bias_, true);
    } else {
        emit_tensor("head.weight", head_weight_, true);
        emit_tensor("head.bias", head_bias_, true);
    }
}

std::vector<std::pair<std::string, Tensor>> Model::all_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto add_cb = [&](const std::string& conv, const std::string& bn, const ConvBnLayer& l) {
        out.emplace_back(conv + ".weight", l.weight);
        out.emplace_back(bn + ".gamma", l.gamma);
        out.emplace_back(bn + ".beta", l.beta);
    };
    if (kind_ == ModelKind::kMetaMlp) {
        out = {{"mlp.fc1.weight", mlp_w1_}, {"mlp.fc1.bias", mlp_b1_},
               {"mlp.fc2.weight", mlp_w2_}, {"mlp.fc2.bias", mlp_b2_}};
        return out;
    }
    add_cb("conv1", "bn1", stem_);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        const std::string stage = "conv" + std::to_string(s + 2);
        for (std::size_t b = 0; b < stages_[s].size(); ++b) {
            const std::string p = stage + "." + std::to_string(b);
            const Bottleneck& blk = stages_[s][b];
            add_cb(p + ".conv1", p + ".bn1", blk.reduce);
            add_cb(p + ".conv2", p + ".bn2", blk.spatial);
            add_cb(p + ".conv3", p + ".bn3", blk.expand);
            if (blk.projection) add_cb(p + ".shortcut.conv", p + ".shortcut.bn", *blk.projection);
        }
    }
    if (kind_ == ModelKind::kProbe) {
        out.emplace_back("probe.weight", probe_weight_);
        out.emplace_back("probe.bias", probe_bias_);
    } else {
        out.emplace_back("head.weight", head_weight_);
        out.emplace_back("head.bias", head_bias_);
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> Model::trainable_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& [name, t] : all_params())
        if (param_trainable(name)) out.emplace_back(name, t);
    return out;
}

void Model::for_each_bn(const std::function<void(const std::string&, BatchNormState&)>& fn) {
    auto visit_layer = [&](const std::string& bn, ConvBnLayer& l) { fn(bn, l.bn); };
    if (kind_ == ModelKind::kMetaMlp) return;
    visit_layer("bn1", stem_);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        const std::string stage = "conv" + std::to_string(s + 2);
        for (std::size_t b = 0; b < stages_[s].size(); ++b) {
            const std::string p = stage + "." + std::to_string(b);
            Bottleneck& blk = stages_[s][b];
            visit_layer(p + ".bn1", blk.reduce);
            visit_layer(p + ".bn2", blk.spatial);
            visit_layer(p + ".bn3", blk.expand);
            if (blk.projection) visit_layer(p + ".shortcut.bn", *blk.projection);
        }
    }
}

void Model::for_each_bn(
    const std::function<void(const std::string&, const BatchNormState&)>& fn) const {
    const_cast<Model*>(this)->for_each_bn(
        [&](const std::string& n, BatchNormState& s) { fn(n, s); });
}

std::array<int, 4> Model::bottleneck_counts() const {
    std::array<int, 4> c{};
    for (std::size_t s = 0; s < stages_.size(); ++s)
        c[s] = static_cast<int>(stages_[s].size());
    return c;
}

int Model::total_bottlenecks() const {
    int t = 0;
    for (const int c : bottleneck_counts()) t += c;
    return t;
}

Model::Snapshot Model::snapshot() const {
    Snapshot s;
    visit_state([&](const StateEntry& e) {
        s.values.emplace_back(e.data, e.data + e.size);
    });
    for_each_bn([&](const std::string&, const BatchNormState& bn) {
        s.bn_batches.push_back(bn.batches_seen);
    });
    return s;
}

void Model::restore(const Snapshot& s) {
    std::size_t i = 0;
    visit_state([&](const StateEntry& e) {
        const auto& src = s.values.at(i++);
        if (src.size() != e.size) throw ShapeError("snapshot restore size mismatch at " + e.name);
        std::copy(src.begin(), src.end(), e.data);
    });
    std::size_t b = 0;
    for_each_bn([&](const std::string&, BatchNormState& bn) {
        bn.batches_seen = s.bn_batches.at(b++);
    });
}

Model Model::clone() const {
    Model m;
    m.kind_ = kind_;
    m.config_ = config_;
    m.probe_target_ = probe_target_;
    auto copy_tensor = [](const Tensor& t) {
        if (!t.defined()) return Tensor();
        Tensor c = Tensor::from(t.shape(), std::vector<float>(t.values().begin(), t.values().end()),
                                t.requires_grad());
        return c;
    };
    auto copy_layer = [&](const ConvBnLayer& l) {
        ConvBnLayer c;
        c.weight = copy_tensor(l.weight);
        c.gamma = copy_tensor(l.gamma);
        c.beta = copy_tensor(l.beta);
        c.bn = l.bn;
        c.stride = l.stride;
        return c;
    };
    m.stem_ = copy_layer(stem_);
    for (const auto& stage : stages_) {
        std::vector<Bottleneck> cs;
        for (const auto& blk : stage) {
            Bottleneck c;
            c.reduce = copy_layer(blk.reduce);
            c.spatial = copy_layer(blk.spatial);
            c.expand = copy_layer(blk.expand);
            if (blk.projection) c.projection = copy_layer(*blk.projection);
            cs.push_back(std::move(c));
        }
        m.stages_.push_back(std::move(cs));
    }
    m.head_weight_ = copy_tensor(head_weight_);
    m.head_bias_ = copy_tensor(head_bias_);
    m.mlp_w1_ = copy_tensor(mlp_w1_);
    m.mlp_b1_ = copy_tensor(mlp_b1_);
    m.mlp_w2_ = copy_tensor(mlp_w2_);
    m.mlp_b2_ = copy_tensor(mlp_b2_);
    m.probe_weight_ = copy_tensor(probe_weight_);
    m.probe_bias_ = copy_tensor(probe_bias_);
    return m;
}

} // namespace cxr
