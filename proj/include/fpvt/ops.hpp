#pragma once

#include <cstdint>
#include <vector>

#include "fpvt/tensor.hpp"

// Differentiable tensor operations. Every op validates shapes up front,
// records a backward rule on the current tape when an input requires grad,
// and rejects non-finite outputs.
namespace fpvt::ops {

// -- structure -------------------------------------------------------------
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& dims);
// Swaps the last two axes of a rank-2 or rank-3 tensor.
Tensor transpose(const Tensor& x);

// -- elementwise -----------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// b's shape must equal a trailing suffix of a's shape; b is broadcast over
// the leading axes.
Tensor add_broadcast(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor gelu(const Tensor& x);
// Exact erf form, for reference.
double gelu_exact(double x);
double gelu_tanh(double x);

// -- reductions ------------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Mean over one axis; the axis is removed.
Tensor mean_axis(const Tensor& x, int axis);

// -- linear algebra --------------------------------------------------------
// [M,K]x[K,N], [B,M,K]x[B,K,N] or [B,M,K]x[K,N].
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] * w[in, out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// -- normalization and activations ----------------------------------------
Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Rows of the last axis scaled to unit L2 norm.
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);

struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    static BatchNormState init(std::int64_t channels, Precision precision);
};

// x: [B,C,H,W]. Training mode normalizes with batch statistics and updates
// the running averages (unbiased variance); inference uses running stats.
Tensor batch_norm(const Tensor& x, BatchNormState& state, const Tensor& gain, const Tensor& bias,
                  bool training);

// -- convolution and pooling ----------------------------------------------
// input [B,C,H,W], weight [P,C,K,K], bias [P] or undefined.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding);
// input [B,C,H,W], weight [C,K,K]; K odd, padding (K-1)/2.
Tensor depthwise_conv2d(const Tensor& input, const Tensor& weight, int padding);
// input [B,Cin,H,W], mix [Cout,Cin], bias [Cout] or undefined.
Tensor pointwise_conv(const Tensor& input, const Tensor& mix, const Tensor& bias = {});
Tensor adaptive_max_pool2d(const Tensor& input, int out_h, int out_w);
inline Tensor adaptive_max_pool2d(const Tensor& input, int out_size) {
    return adaptive_max_pool2d(input, out_size, out_size);
}

// -- losses ----------------------------------------------------------------
// Mean cross-entropy of logits [B,M] against integer targets.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);

}  // namespace fpvt::ops
