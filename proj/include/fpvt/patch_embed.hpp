#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fpvt/registry.hpp"
#include "fpvt/tensor.hpp"

namespace fpvt {

// Tokens [B, N, C] with their 2-D provenance; N == grid_h * grid_w.
struct TokenSequence {
    Tensor tokens;
    int grid_h = 0;
    int grid_w = 0;

    TokenSequence() = default;
    TokenSequence(Tensor t, int h, int w);

    std::int64_t batch() const { return tokens.dim(0); }
    std::int64_t length() const { return tokens.dim(1); }
    std::int64_t channels() const { return tokens.dim(2); }
};

// [B, C, H, W] -> tokens in row-major grid order, and back.
TokenSequence map_to_tokens(const Tensor& map);
Tensor tokens_to_map(const TokenSequence& seq);

struct IpeConfig {
    int stride = 4;
    int pad = 3;  // kernel = 2 * pad + 1
    int out_channels = 64;
    // Accept strides that do not divide the input; the grid is then
    // ceil(H / stride), which is what a 2f+1 kernel with padding f yields.
    bool allow_ceil = false;

    int kernel() const { return 2 * pad + 1; }
    bool overlapping() const { return kernel() > stride; }
};

struct PatchCount {
    std::int64_t count = 0;
    bool non_overlapping = false;  // overlap == 0: plain ViT tiling
};

// Sliding-window patch count for patches of `patch` pixels overlapping by
// `overlap` pixels: (w/(patch-overlap) - 1) * (h/(patch-overlap) - 1).
PatchCount patch_count(std::int64_t w, std::int64_t h, std::int64_t patch, std::int64_t overlap);

// Output grid side of an IPE on an input side, honoring allow_ceil.
int ipe_output_side(int input_side, const IpeConfig& cfg);

struct IpeWeights {
    Tensor conv_weight;  // [p, C_in, k, k]
    Tensor conv_bias;    // [p]
    Tensor norm_gain;    // [p]
    Tensor norm_bias;    // [p]

    static IpeWeights init(int in_channels, const IpeConfig& cfg, Rng& rng, Precision precision);
    void collect(const std::string& prefix, ParamRegistry& reg) const;
};

// Overlapping convolutional tokenizer: conv (kernel 2f+1, stride s,
// padding f), flatten to tokens, layer norm over channels.
TokenSequence embed(const Tensor& input, const IpeConfig& cfg, const IpeWeights& weights);

// Adds a positional table [N_ref, C] laid out on a square grid. When the
// sequence grid differs, the table is bilinearly resampled first.
TokenSequence add_positional(const TokenSequence& seq, const Tensor& table);

// Bilinear resampling matrix [dst_h*dst_w, src_h*src_w] with aligned corners.
Tensor bilinear_resample_matrix(int src_h, int src_w, int dst_h, int dst_w, Precision precision);

}  // namespace fpvt
