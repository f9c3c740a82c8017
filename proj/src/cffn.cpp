#include "fpvt/cffn.hpp"

#include <cmath>

namespace fpvt {

void CffnConfig::validate() const {
    if (channels < 1 || expand < 1) throw ConfigError("cffn: channels and expand ratio must be positive");
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("cffn: kernel must be odd, got " + std::to_string(kernel));
}

CffnWeights CffnWeights::init(const CffnConfig& cfg, Rng& rng, Precision precision) {
    cfg.validate();
    const int c = cfg.channels, h = cfg.hidden(), k = cfg.kernel;
    CffnWeights w;
    w.fc1_weight = trunc_normal({c, h}, 0.02, rng, precision);
    w.fc1_bias = Tensor::zeros({h}, precision);
    // conv fan-out init: depthwise fan_out = k*k, pointwise fan_out = hidden
    w.dw_weight = normal_init({h, k, k}, std::sqrt(2.0 / (k * k)), rng, precision);
    w.pw_weight = normal_init({h, h}, std::sqrt(2.0 / h), rng, precision);
    w.pw_bias = Tensor::zeros({h}, precision);
    w.bn_gain = Tensor::full({h}, 1.0, precision);
    w.bn_bias = Tensor::zeros({h}, precision);
    w.bn = ops::BatchNormState::init(h, precision);
    w.fc2_weight = trunc_normal({h, c}, 0.02, rng, precision);
    w.fc2_bias = Tensor::zeros({c}, precision);
    return w;
}

void CffnWeights::collect(const std::string& prefix, ParamRegistry& reg) const {
    reg.add_param(prefix + "fc1.weight", fc1_weight);
    reg.add_param(prefix + "fc1.bias", fc1_bias);
    reg.add_param(prefix + "dw.weight", dw_weight);
    reg.add_param(prefix + "pw.weight", pw_weight);
    reg.add_param(prefix + "pw.bias", pw_bias);
    reg.add_param(prefix + "bn.gain", bn_gain);
    reg.add_param(prefix + "bn.bias", bn_bias);
    reg.add_buffer(prefix + "bn.running_mean", bn.running_mean);
    reg.add_buffer(prefix + "bn.running_var", bn.running_var);
    reg.add_param(prefix + "fc2.weight", fc2_weight);
    reg.add_param(prefix + "fc2.bias", fc2_bias);
}

TokenSequence cffn_forward(const TokenSequence& x, const CffnConfig& cfg, CffnWeights& weights, bool training) {
    if (x.channels() != cfg.channels) {
        throw ShapeError("cffn: tokens have " + std::to_string(x.channels()) + " channels, config expects " +
                         std::to_string(cfg.channels));
    }
    auto hidden = TokenSequence(ops::linear(x.tokens, weights.fc1_weight, weights.fc1_bias), x.grid_h, x.grid_w);
    auto map = tokens_to_map(hidden);
    map = ops::depthwise_conv2d(map, weights.dw_weight, (cfg.kernel - 1) / 2);
    map = ops::pointwise_conv(map, weights.pw_weight, weights.pw_bias);
    map = ops::batch_norm(map, weights.bn, weights.bn_gain, weights.bn_bias, training);
    map = ops::gelu(map);
    auto back = map_to_tokens(map);
    return TokenSequence(ops::linear(back.tokens, weights.fc2_weight, weights.fc2_bias), x.grid_h, x.grid_w);
}

DepthwiseParamCount depthwise_param_count(std::int64_t k, std::int64_t n_in, std::int64_t n_out) {
    if (k < 1 || n_in < 1 || n_out < 1) throw ConfigError("depthwise_param_count: arguments must be positive");
    return {k * k * n_in + n_in * n_out, k * k * n_in * n_out};
}

std::int64_t count_lightweight_weights(const ParamRegistry& reg, const std::string& prefix) {
    std::int64_t n = 0;
    for (const auto& e : reg.entries()) {
        if (!e.trainable || e.name.compare(0, prefix.size(), prefix) != 0) continue;
        const auto tail = e.name.substr(prefix.size());
        if (tail == "dw.weight" || tail == "pw.weight") n += e.tensor.numel();
    }
    return n;
}

}  // namespace fpvt
