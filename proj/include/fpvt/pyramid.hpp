#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fpvt/attention.hpp"
#include "fpvt/patch_embed.hpp"
#include "fpvt/registry.hpp"

namespace fpvt {

struct StageConfig {
    int stride = 4;
    int pad = 3;  // IPE kernel = 2 * pad + 1
    int channels = 64;
    int layers = 1;
    int reduction = 1;
    int heads = 1;
    int expand = 4;
};

struct ModelConfig {
    int input_h = 112;
    int input_w = 112;
    int in_channels = 3;
    std::vector<StageConfig> stages;
    int embed_dim = 512;
    int pool_out = 7;
    std::uint64_t seed = 0;
    Precision precision = Precision::f32;

    // Four-stage schedule on 112x112 faces, depth 6 as (2,2,1,1).
    static ModelConfig fpvt_default();
    // Two-stage desk-scale model on 32x32 inputs.
    static ModelConfig toy();

    // Throws ConfigError naming the offending stage.
    void validate() const;
    // Token grid (h, w) of every stage for a given input resolution. The
    // first stage must divide the input exactly; later stages round up.
    std::vector<std::pair<int, int>> stage_grids(int input_h, int input_w) const;
    std::vector<std::pair<int, int>> stage_grids() const { return stage_grids(input_h, input_w); }
};

struct MultiScaleFeatures {
    std::vector<TokenSequence> stages;
    Tensor embedding;  // [B, embed_dim]
};

class Model {
public:
    explicit Model(const ModelConfig& cfg);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;

    const ModelConfig& config() const { return cfg_; }
    const ParamRegistry& registry() const { return registry_; }

    void set_training(bool on) { training_ = on; }
    bool training() const { return training_; }

    // images [B, in_channels, H, W]; shapes are checked for the whole
    // pyramid before any compute.
    MultiScaleFeatures forward_features(const Tensor& images);
    Tensor embed(const Tensor& images) { return forward_features(images).embedding; }

    std::size_t num_stages() const { return stages_.size(); }

private:
    struct Stage {
        IpeConfig ipe;
        IpeWeights embed;
        Tensor pos;  // [grid_h * grid_w at the configured resolution, c]
        EncoderLayerConfig layer_cfg;
        std::vector<EncoderLayerWeights> layers;
    };

    ModelConfig cfg_;
    std::vector<Stage> stages_;
    Tensor head_weight;  // [c_last, embed_dim]
    Tensor head_bias;
    ParamRegistry registry_;
    bool training_ = true;
};

struct StageAudit {
    int grid_h = 0, grid_w = 0;
    std::int64_t tokens = 0;
    std::int64_t kv_length = 0;
    int heads = 0;
    int layers = 0;
    std::int64_t score_entries = 0;  // tokens * kv_length, per head and layer
    std::int64_t macs = 0;
    std::int64_t lightweight_weights = 0;  // live registry count, per stage
    std::int64_t standard_weights = 0;     // equivalent dense k x k conv
};

struct AuditReport {
    std::int64_t total_params = 0;
    std::vector<std::pair<std::string, std::int64_t>> modules;
    std::vector<StageAudit> stages;
    std::int64_t total_macs = 0;
};

// Exact parameter accounting from the live registry plus analytic
// attention-memory and multiply-accumulate estimates per forward image.
AuditReport audit(const Model& model);

}  // namespace fpvt
