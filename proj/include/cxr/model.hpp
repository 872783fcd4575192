#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cxr/tensor.hpp"

namespace cxr {

enum class FreezePolicy { kNone, kOffTheShelf, kFineTune };
enum class ModelKind { kResNet, kMetaMlp, kProbe };
enum class ProbeTarget { kAge, kGender, kView };

const char* to_string(FreezePolicy p);
const char* to_string(ModelKind k);
const char* to_string(ProbeTarget t);
FreezePolicy freeze_from_string(const std::string& s);
ProbeTarget probe_target_from_string(const std::string& s);

/// Declarative architecture description. 224/448 are the full-scale input
/// sizes; smaller sizes (and width_div > 1) exist for desk-scale runs.
struct ModelConfig {
    int depth = 50; // 38 | 50 | 101
    int input_channels = 1;
    int input_size = 224;
    bool extra_pool_after_conv2 = false; // the "-large" variant; required when input_size == 448
    bool use_meta = false;
    int num_labels = 15;
    FreezePolicy freeze = FreezePolicy::kNone;
    int width_div = 1; // divides every channel width

    void validate() const;
    /// Bottleneck blocks per stage, entry block included.
    std::array<int, 4> stage_blocks() const;
    /// Width of the pooled image feature vector (2048 at full width).
    int feature_dim() const { return 2048 / width_div; }
    int head_input_dim() const { return feature_dim() + (use_meta ? 3 : 0); }
};

/// Age scaled to [0,1] on the training subset; gender and view position in {0,1}.
struct MetaFeatures {
    float age_scaled = 0.0f;
    float gender = 0.0f;
    float view = 0.0f;
};

/// [N,3] tensor in (age_scaled, gender, view) order; validates field ranges.
Tensor make_meta_tensor(std::span<const MetaFeatures> metas);

struct ForwardResult {
    Tensor logits;     // pre-sigmoid head output
    Tensor probs;      // sigmoid(logits); equals logits for the age probe
    Tensor pooled;     // [N, feature_dim] pooled image features
    Tensor final_conv; // output of the last conv stage (Grad-CAM target)
    std::vector<std::pair<std::string, std::vector<int>>> stage_shapes;
};

struct ConvBnLayer {
    Tensor weight; // [K,C,kh,kw], no bias (batch norm follows)
    Tensor gamma, beta;
    BatchNormState bn;
    int stride = 1;
};

struct Bottleneck {
    ConvBnLayer reduce;  // 1x1, carries the stage stride at entry blocks
    ConvBnLayer spatial; // 3x3
    ConvBnLayer expand;  // 1x1 to 4x mid width
    std::optional<ConvBnLayer> projection; // 1x1 shortcut when shape changes
};

struct StateEntry {
    std::string name;
    std::vector<int> shape;
    float* data = nullptr;
    std::size_t size = 0;
    bool is_param = false; // false: batch-norm running stat buffer
    bool trainable = false;
};

/// A realized network: parameter tensors plus the forward graph builder.
/// Exclusively owned while training; read-only sharing is fine for inference.
class Model {
public:
    Model() = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;

    ModelKind kind() const { return kind_; }
    const ModelConfig& config() const { return config_; }
    ProbeTarget probe_target() const { return probe_target_; }

    /// images: [N,C,S,S] (ignored by the meta MLP); meta: [N,3] iff the model
    /// fuses or consumes non-image features. Frozen trunks run their batch
    /// norms in eval statistics even while training.
    ForwardResult forward(const Tensor& images, const Tensor& meta, BatchNormMode mode) const;

    /// Enumerates parameters and running-stat buffers in canonical order
    /// (stage.block.layer.kind naming, stable across runs).
    void visit_state(const std::function<void(const StateEntry&)>& fn) const;
    std::vector<std::pair<std::string, Tensor>> trainable_params() const;
    std::vector<std::pair<std::string, Tensor>> all_params() const;
    void for_each_bn(const std::function<void(const std::string&, BatchNormState&)>& fn);
    void for_each_bn(const std::function<void(const std::string&, const BatchNormState&)>& fn) const;

    std::array<int, 4> bottleneck_counts() const;
    int total_bottlenecks() const;

    /// Deep copy of values and running stats.
    Model clone() const;

    /// Full value snapshot (params + buffers + bn step counts), for
    /// best-epoch checkpointing inside the training loop.
    struct Snapshot {
        std::vector<std::vector<float>> values;
        std::vector<std::int64_t> bn_batches;
    };
    Snapshot snapshot() const;
    void restore(const Snapshot& s);

    friend Model build_model(const ModelConfig& config, std::uint64_t seed);
    friend Model build_meta_mlp(std::uint64_t seed);
    friend Model build_probe(const Model& base, ProbeTarget target, std::uint64_t seed);

private:
    bool param_trainable(const std::string& name) const;
    Tensor trunk_forward(const Tensor& images, BatchNormMode mode, ForwardResult& out) const;

    ModelKind kind_ = ModelKind::kResNet;
    ModelConfig config_;
    ProbeTarget probe_target_ = ProbeTarget::kView;

    // ResNet trunk (also used by probes)
    ConvBnLayer stem_;
    std::vector<std::vector<Bottleneck>> stages_;
    Tensor head_weight_, head_bias_;

    // Meta-only MLP
    Tensor mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;

    // Probe head
    Tensor probe_weight_, probe_bias_;
};

/// Realizes the configured architecture with fan-in-scaled random init.
Model build_model(const ModelConfig& config, std::uint64_t seed);

/// 3 -> 32 (relu) -> 15 (sigmoid) baseline over the non-image features only.
Model build_meta_mlp(std::uint64_t seed);

/// Frozen copy of `base` with a fresh 1-unit head on the pooled features
/// (sigmoid for gender/view, linear for age).
Model build_probe(const Model& base, ProbeTarget target, std::uint64_t seed);

} // namespace cxr
