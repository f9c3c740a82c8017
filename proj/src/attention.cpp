#include "fpvt/attention.hpp"

#include <algorithm>
#include <cmath>

#include "fpvt/ops.hpp"

namespace fpvt {

void AttnConfig::validate() const {
    if (channels < 1 || heads < 1) throw ConfigError("attention: channels and heads must be positive");
    if (channels % heads != 0) {
        throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide " + std::to_string(channels) +
                          " channels");
    }
    if (reduction < 1) throw ConfigError("attention: reduction ratio must be >= 1");
    if (pool_out < 1) throw ConfigError("attention: pool output size must be >= 1");
    if (dropout != 0.0) throw ConfigError("attention: dropout is not supported (must be 0)");
}

AttnWeights AttnWeights::init(const AttnConfig& cfg, Rng& rng, Precision precision) {
    cfg.validate();
    const int c = cfg.channels, r = cfg.reduction;
    AttnWeights w;
    auto proj = [&](Tensor& wt, Tensor& b, std::int64_t in) {
        wt = trunc_normal({in, c}, 0.02, rng, precision);
        b = Tensor::zeros({c}, precision);
    };
    proj(w.wq, w.bq, c);
    proj(w.wk, w.bk, c);
    proj(w.wv, w.bv, c);
    proj(w.wo, w.bo, c);
    if (r > 1) {
        proj(w.ws, w.bs, static_cast<std::int64_t>(r) * r * c);
        w.sr_gain = Tensor::full({c}, 1.0, precision);
        w.sr_bias = Tensor::zeros({c}, precision);
    }
    return w;
}

void AttnWeights::collect(const std::string& prefix, ParamRegistry& reg) const {
    reg.add_param(prefix + "q.weight", wq);
    reg.add_param(prefix + "q.bias", bq);
    reg.add_param(prefix + "k.weight", wk);
    reg.add_param(prefix + "k.bias", bk);
    reg.add_param(prefix + "v.weight", wv);
    reg.add_param(prefix + "v.bias", bv);
    reg.add_param(prefix + "o.weight", wo);
    reg.add_param(prefix + "o.bias", bo);
    if (ws.defined()) {
        reg.add_param(prefix + "sr.weight", ws);
        reg.add_param(prefix + "sr.bias", bs);
        reg.add_param(prefix + "sr_norm.gain", sr_gain);
        reg.add_param(prefix + "sr_norm.bias", sr_bias);
    }
}

TokenSequence spatial_reduce(const TokenSequence& x, int r, const Tensor& ws, const Tensor& bs, const Tensor& gain,
                             const Tensor& bias) {
    if (r < 1 || x.grid_h % r != 0 || x.grid_w % r != 0) {
        throw ShapeError("spatial_reduce: ratio " + std::to_string(r) + " does not divide grid " +
                         std::to_string(x.grid_h) + "x" + std::to_string(x.grid_w));
    }
    const auto B = x.batch(), C = x.channels();
    const int gh = x.grid_h / r, gw = x.grid_w / r;
    if (ws.dim(0) != static_cast<std::int64_t>(r) * r * C) {
        throw ShapeError("spatial_reduce: projection " + shape_str(ws.shape()) + " expects input width " +
                         std::to_string(ws.dim(0)) + ", blocks have " + std::to_string(r * r * C));
    }
    auto blocks = ops::reshape(x.tokens, {B, gh, r, gw, r, C});
    blocks = ops::permute(blocks, {0, 1, 3, 2, 4, 5});
    blocks = ops::reshape(blocks, {B, static_cast<std::int64_t>(gh) * gw, static_cast<std::int64_t>(r) * r * C});
    auto projected = ops::linear(blocks, ws, bs);
    return TokenSequence(ops::layer_norm(projected, gain, bias), gh, gw);
}

TokenSequence pool_kv(const TokenSequence& x, int out_size) {
    if (x.grid_h <= out_size && x.grid_w <= out_size) return x;
    const int oh = std::min(out_size, x.grid_h), ow = std::min(out_size, x.grid_w);
    return map_to_tokens(ops::adaptive_max_pool2d(tokens_to_map(x), oh, ow));
}

namespace {

// [B, N, C] -> [B*h, N, d]
Tensor split_heads(const Tensor& t, int heads) {
    const auto B = t.dim(0), N = t.dim(1), C = t.dim(2), d = C / heads;
    auto r = ops::reshape(t, {B, N, heads, d});
    return ops::reshape(ops::permute(r, {0, 2, 1, 3}), {B * heads, N, d});
}

Tensor merge_heads(const Tensor& t, std::int64_t batch, int heads) {
    const auto N = t.dim(1), d = t.dim(2);
    auto r = ops::reshape(t, {batch, heads, N, d});
    return ops::reshape(ops::permute(r, {0, 2, 1, 3}), {batch, N, heads * d});
}

}  // namespace

TokenSequence multi_head_attention(const TokenSequence& q, const TokenSequence& kv, int heads, const AttnWeights& w,
                                   AttentionTrace* trace) {
    if (q.channels() != kv.channels() || q.channels() != w.wq.dim(0)) {
        throw ShapeError("attention: query channels " + std::to_string(q.channels()) + " vs key/value channels " +
                         std::to_string(kv.channels()) + " vs projection " + shape_str(w.wq.shape()));
    }
    if (q.batch() != kv.batch()) throw ShapeError("attention: query and key/value batch sizes differ");
    if (heads < 1 || q.channels() % heads != 0) throw ConfigError("attention: heads must divide channels");
    const auto B = q.batch();
    const auto d = q.channels() / heads;

    auto Q = split_heads(ops::linear(q.tokens, w.wq, w.bq), heads);
    auto K = split_heads(ops::linear(kv.tokens, w.wk, w.bk), heads);
    auto V = split_heads(ops::linear(kv.tokens, w.wv, w.bv), heads);
    auto scores = ops::scale(ops::matmul(Q, ops::transpose(K)), 1.0 / std::sqrt(static_cast<double>(d)));
    auto probs = ops::softmax_rows(scores);
    auto ctx = merge_heads(ops::matmul(probs, V), B, heads);
    if (trace) {
        trace->query_length = q.length();
        trace->kv_length = kv.length();
        trace->score_entries = q.length() * kv.length();
        trace->probs = probs;
    }
    return TokenSequence(ops::linear(ctx, w.wo, w.bo), q.grid_h, q.grid_w);
}

TokenSequence fsra_forward(const TokenSequence& x, const AttnConfig& cfg, const AttnWeights& w, AttentionTrace* trace) {
    cfg.validate();
    if (x.channels() != cfg.channels) {
        throw ShapeError("F-SRA: tokens have " + std::to_string(x.channels()) + " channels, config expects " +
                         std::to_string(cfg.channels));
    }
    TokenSequence kv = x;
    if (cfg.reduction > 1) kv = spatial_reduce(x, cfg.reduction, w.ws, w.bs, w.sr_gain, w.sr_bias);
    kv = pool_kv(kv, cfg.pool_out);
    return multi_head_attention(x, kv, cfg.heads, w, trace);
}

EncoderLayerWeights EncoderLayerWeights::init(const EncoderLayerConfig& cfg, Rng& rng, Precision precision) {
    if (cfg.attn.channels != cfg.cffn.channels) throw ConfigError("encoder layer: attention and CFFN widths differ");
    const int c = cfg.attn.channels;
    EncoderLayerWeights w;
    w.norm1_gain = Tensor::full({c}, 1.0, precision);
    w.norm1_bias = Tensor::zeros({c}, precision);
    w.attn = AttnWeights::init(cfg.attn, rng, precision);
    w.norm2_gain = Tensor::full({c}, 1.0, precision);
    w.norm2_bias = Tensor::zeros({c}, precision);
    w.cffn = CffnWeights::init(cfg.cffn, rng, precision);
    return w;
}

void EncoderLayerWeights::collect(const std::string& prefix, ParamRegistry& reg) const {
    reg.add_param(prefix + "norm1.gain", norm1_gain);
    reg.add_param(prefix + "norm1.bias", norm1_bias);
    attn.collect(prefix + "attn.", reg);
    reg.add_param(prefix + "norm2.gain", norm2_gain);
    reg.add_param(prefix + "norm2.bias", norm2_bias);
    cffn.collect(prefix + "cffn.", reg);
}

TokenSequence encoder_layer(const TokenSequence& x, const EncoderLayerConfig& cfg, EncoderLayerWeights& w,
                            bool training, AttentionTrace* trace) {
    auto normed = TokenSequence(ops::layer_norm(x.tokens, w.norm1_gain, w.norm1_bias), x.grid_h, x.grid_w);
    auto attended = fsra_forward(normed, cfg.attn, w.attn, trace);
    auto y = TokenSequence(ops::add(x.tokens, attended.tokens), x.grid_h, x.grid_w);
    auto normed2 = TokenSequence(ops::layer_norm(y.tokens, w.norm2_gain, w.norm2_bias), y.grid_h, y.grid_w);
    auto ff = cffn_forward(normed2, cfg.cffn, w.cffn, training);
    return TokenSequence(ops::add(y.tokens, ff.tokens), y.grid_h, y.grid_w);
}

}  // namespace fpvt
