#include "fpvt/patch_embed.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "fpvt/ops.hpp"

namespace fpvt {

TokenSequence::TokenSequence(Tensor t, int h, int w) : tokens(std::move(t)), grid_h(h), grid_w(w) {
    if (tokens.rank() != 3) throw ShapeError("token sequence must be [B,N,C], got " + shape_str(tokens.shape()));
    if (tokens.dim(1) != static_cast<std::int64_t>(h) * w) {
        throw ShapeError("token count " + std::to_string(tokens.dim(1)) + " does not match grid " + std::to_string(h) +
                         "x" + std::to_string(w));
    }
}

TokenSequence map_to_tokens(const Tensor& map) {
    if (map.rank() != 4) throw ShapeError("map_to_tokens expects [B,C,H,W], got " + shape_str(map.shape()));
    const auto B = map.dim(0), C = map.dim(1), H = map.dim(2), W = map.dim(3);
    auto t = ops::reshape(ops::permute(map, {0, 2, 3, 1}), {B, H * W, C});
    return TokenSequence(std::move(t), static_cast<int>(H), static_cast<int>(W));
}

Tensor tokens_to_map(const TokenSequence& seq) {
    const auto B = seq.batch(), C = seq.channels();
    auto grid = ops::reshape(seq.tokens, {B, seq.grid_h, seq.grid_w, C});
    return ops::permute(grid, {0, 3, 1, 2});
}

PatchCount patch_count(std::int64_t w, std::int64_t h, std::int64_t patch, std::int64_t overlap) {
    if (patch <= 0 || overlap < 0 || overlap >= patch) {
        throw ConfigError("patch_count: need patch > overlap >= 0, got patch " + std::to_string(patch) + ", overlap " +
                          std::to_string(overlap));
    }
    const auto step = patch - overlap;
    if (w % step != 0 || h % step != 0) {
        std::ostringstream os;
        os << "patch_count: patch - overlap = " << step << " must divide " << w << "x" << h << "; valid strides:";
        const auto g = std::gcd(w, h);
        for (std::int64_t d = 1; d <= g; ++d) {
            if (g % d == 0) os << ' ' << d;
        }
        throw ConfigError(os.str());
    }
    return {(w / step - 1) * (h / step - 1), overlap == 0};
}

int ipe_output_side(int input_side, const IpeConfig& cfg) {
    if (cfg.stride < 1 || cfg.pad < 0) throw ConfigError("IPE stride must be >= 1 and pad >= 0");
    if (input_side % cfg.stride != 0 && !cfg.allow_ceil) {
        throw ShapeError("IPE stride " + std::to_string(cfg.stride) + " does not divide input side " +
                         std::to_string(input_side));
    }
    // floor((H + 2f - (2f+1)) / s) + 1 == ceil(H / s)
    return (input_side - 1) / cfg.stride + 1;
}

IpeWeights IpeWeights::init(int in_channels, const IpeConfig& cfg, Rng& rng, Precision precision) {
    const int k = cfg.kernel();
    const double fan_out = static_cast<double>(k) * k * cfg.out_channels;
    IpeWeights w;
    w.conv_weight = normal_init({cfg.out_channels, in_channels, k, k}, std::sqrt(2.0 / fan_out), rng, precision);
    w.conv_bias = Tensor::zeros({cfg.out_channels}, precision);
    w.norm_gain = Tensor::full({cfg.out_channels}, 1.0, precision);
    w.norm_bias = Tensor::zeros({cfg.out_channels}, precision);
    return w;
}

void IpeWeights::collect(const std::string& prefix, ParamRegistry& reg) const {
    reg.add_param(prefix + "conv.weight", conv_weight);
    reg.add_param(prefix + "conv.bias", conv_bias);
    reg.add_param(prefix + "norm.gain", norm_gain);
    reg.add_param(prefix + "norm.bias", norm_bias);
}

TokenSequence embed(const Tensor& input, const IpeConfig& cfg, const IpeWeights& weights) {
    if (input.rank() != 4) throw ShapeError("embed expects [B,C,H,W], got " + shape_str(input.shape()));
    const int H = static_cast<int>(input.dim(2)), W = static_cast<int>(input.dim(3));
    const int gh = ipe_output_side(H, cfg), gw = ipe_output_side(W, cfg);
    if (weights.conv_weight.dim(2) != cfg.kernel() || weights.conv_weight.dim(0) != cfg.out_channels) {
        throw ShapeError("embed: conv weight " + shape_str(weights.conv_weight.shape()) + " does not match config");
    }
    auto map = ops::conv2d(input, weights.conv_weight, weights.conv_bias, cfg.stride, cfg.pad);
    auto seq = map_to_tokens(map);
    if (seq.grid_h != gh || seq.grid_w != gw) throw std::logic_error("embed: unexpected grid size");
    seq.tokens = ops::layer_norm(seq.tokens, weights.norm_gain, weights.norm_bias);
    return seq;
}

Tensor bilinear_resample_matrix(int src_h, int src_w, int dst_h, int dst_w, Precision precision) {
    const auto rows = static_cast<std::size_t>(dst_h) * dst_w, cols = static_cast<std::size_t>(src_h) * src_w;
    std::vector<double> m(rows * cols, 0.0);
    auto coord = [](int i, int dst, int src) {
        return dst == 1 ? 0.0 : static_cast<double>(i) * (src - 1) / (dst - 1);
    };
    for (int y = 0; y < dst_h; ++y) {
        const double sy = coord(y, dst_h, src_h);
        const int y0 = static_cast<int>(std::floor(sy));
        const int y1 = std::min(y0 + 1, src_h - 1);
        const double fy = sy - y0;
        for (int x = 0; x < dst_w; ++x) {
            const double sx = coord(x, dst_w, src_w);
            const int x0 = static_cast<int>(std::floor(sx));
            const int x1 = std::min(x0 + 1, src_w - 1);
            const double fx = sx - x0;
            double* row = m.data() + (static_cast<std::size_t>(y) * dst_w + x) * cols;
            row[static_cast<std::size_t>(y0) * src_w + x0] += (1 - fy) * (1 - fx);
            row[static_cast<std::size_t>(y0) * src_w + x1] += (1 - fy) * fx;
            row[static_cast<std::size_t>(y1) * src_w + x0] += fy * (1 - fx);
            row[static_cast<std::size_t>(y1) * src_w + x1] += fy * fx;
        }
    }
    return Tensor({static_cast<std::int64_t>(rows), static_cast<std::int64_t>(cols)}, std::move(m), precision);
}

TokenSequence add_positional(const TokenSequence& seq, const Tensor& table) {
    if (table.rank() != 2) throw ShapeError("positional table must be [N,C], got " + shape_str(table.shape()));
    if (table.dim(1) != seq.channels()) {
        throw ShapeError("positional table channels " + std::to_string(table.dim(1)) + " do not match tokens " +
                         shape_str(seq.tokens.shape()));
    }
    const auto n_ref = table.dim(0);
    const auto side = static_cast<int>(std::llround(std::sqrt(static_cast<double>(n_ref))));
    if (static_cast<std::int64_t>(side) * side != n_ref) {
        throw ShapeError("positional table length " + std::to_string(n_ref) + " is not a square grid");
    }
    Tensor pos = table;
    if (side != seq.grid_h || side != seq.grid_w) {
        pos = ops::matmul(bilinear_resample_matrix(side, side, seq.grid_h, seq.grid_w, table.precision()), table);
    }
    return TokenSequence(ops::add_broadcast(seq.tokens, pos), seq.grid_h, seq.grid_w);
}

}  // namespace fpvt
