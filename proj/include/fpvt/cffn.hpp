#pragma once

#include <cstdint>
#include <string>

#include "fpvt/ops.hpp"
#include "fpvt/patch_embed.hpp"
#include "fpvt/registry.hpp"

namespace fpvt {

struct CffnConfig {
    int channels = 64;
    int expand = 8;
    int kernel = 3;

    int hidden() const { return channels * expand; }
    void validate() const;
};

// Convolutional feed-forward block. The light-weight conv is a k x k
// depthwise filter per hidden channel followed by a 1x1 pointwise mix.
struct CffnWeights {
    Tensor fc1_weight;  // [c, hidden]
    Tensor fc1_bias;    // [hidden]
    Tensor dw_weight;   // [hidden, k, k]
    Tensor pw_weight;   // [hidden, hidden]
    Tensor pw_bias;     // [hidden]
    Tensor bn_gain;
    Tensor bn_bias;
    ops::BatchNormState bn;
    Tensor fc2_weight;  // [hidden, c]
    Tensor fc2_bias;    // [c]

    static CffnWeights init(const CffnConfig& cfg, Rng& rng, Precision precision);
    void collect(const std::string& prefix, ParamRegistry& reg) const;
};

// linear -> depthwise k x k -> pointwise -> batch norm -> GELU -> linear.
// Output has the same token count and channels as the input.
TokenSequence cffn_forward(const TokenSequence& x, const CffnConfig& cfg, CffnWeights& weights, bool training);

struct DepthwiseParamCount {
    std::int64_t lightweight = 0;  // k^2 * n_in + n_in * n_out
    std::int64_t standard = 0;     // k^2 * n_in * n_out
};

DepthwiseParamCount depthwise_param_count(std::int64_t k, std::int64_t n_in, std::int64_t n_out);

// Sum of depthwise + pointwise filter weights (no biases) found in the
// registry under `prefix`.
std::int64_t count_lightweight_weights(const ParamRegistry& reg, const std::string& prefix);

}  // namespace fpvt
