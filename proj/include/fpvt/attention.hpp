#pragma once

#include <cstdint>
#include <string>

#include "fpvt/cffn.hpp"
#include "fpvt/patch_embed.hpp"
#include "fpvt/registry.hpp"

namespace fpvt {

struct AttnConfig {
    int channels = 64;
    int heads = 1;
    int reduction = 1;  // 1 disables the spatial reduction
    int pool_out = 7;
    double dropout = 0.0;  // hook only; must stay 0

    int head_dim() const { return channels / heads; }
    void validate() const;
};

// Head j uses columns [j*d_h, (j+1)*d_h) of the query/key/value matrices,
// i.e. w_q = [w_0^q | w_1^q | ...].
struct AttnWeights {
    Tensor wq, bq;  // [c, c], [c]
    Tensor wk, bk;
    Tensor wv, bv;
    Tensor wo, bo;
    // Present only when reduction > 1.
    Tensor ws, bs;  // [r^2 c, c], [c]
    Tensor sr_gain, sr_bias;

    static AttnWeights init(const AttnConfig& cfg, Rng& rng, Precision precision);
    void collect(const std::string& prefix, ParamRegistry& reg) const;
};

// Shape facts from one attention call, for audits and tests.
struct AttentionTrace {
    std::int64_t query_length = 0;
    std::int64_t kv_length = 0;
    std::int64_t score_entries = 0;  // per head and image: query_length * kv_length
    Tensor probs;                    // [B*heads, N, M]
};

// Groups r x r blocks of the grid into single tokens of width r^2 c
// (row-major inside a block), projects back to c and layer-normalizes.
TokenSequence spatial_reduce(const TokenSequence& x, int r, const Tensor& ws, const Tensor& bs, const Tensor& gain,
                             const Tensor& bias);

// Adaptive max pool of the token grid to at most out_size x out_size.
// Grids already within out_size pass through unchanged.
TokenSequence pool_kv(const TokenSequence& x, int out_size);

TokenSequence multi_head_attention(const TokenSequence& q, const TokenSequence& kv, int heads, const AttnWeights& w,
                                   AttentionTrace* trace = nullptr);

// Keys/values are spatially reduced, then pooled, before the projections;
// queries keep full resolution so the output has the input's length.
TokenSequence fsra_forward(const TokenSequence& x, const AttnConfig& cfg, const AttnWeights& w,
                           AttentionTrace* trace = nullptr);

struct EncoderLayerConfig {
    AttnConfig attn;
    CffnConfig cffn;
};

struct EncoderLayerWeights {
    Tensor norm1_gain, norm1_bias;
    AttnWeights attn;
    Tensor norm2_gain, norm2_bias;
    CffnWeights cffn;

    static EncoderLayerWeights init(const EncoderLayerConfig& cfg, Rng& rng, Precision precision);
    void collect(const std::string& prefix, ParamRegistry& reg) const;
};

// Pre-norm residual layer: x + F-SRA(LN(x)), then y + CFFN(LN(y)).
TokenSequence encoder_layer(const TokenSequence& x, const EncoderLayerConfig& cfg, EncoderLayerWeights& w,
                            bool training, AttentionTrace* trace = nullptr);

}  // namespace fpvt
