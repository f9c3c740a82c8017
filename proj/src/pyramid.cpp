#include "fpvt/pyramid.hpp"

#include <algorithm>
#include <map>

#include "fpvt/ops.hpp"

namespace fpvt {

ModelConfig ModelConfig::fpvt_default() {
    ModelConfig c;
    c.input_h = c.input_w = 112;
    c.stages = {
        {4, 3, 64, 2, 4, 1, 8},
        {2, 1, 128, 2, 2, 2, 8},
        {2, 1, 320, 1, 1, 5, 4},
        {2, 1, 512, 1, 1, 8, 4},
    };
    c.embed_dim = 512;
    return c;
}

ModelConfig ModelConfig::toy() {
    ModelConfig c;
    c.input_h = c.input_w = 32;
    c.stages = {
        {4, 3, 32, 1, 2, 1, 4},
        {2, 1, 64, 1, 1, 2, 4},
    };
    c.embed_dim = 64;
    return c;
}

std::vector<std::pair<int, int>> ModelConfig::stage_grids(int h, int w) const {
    std::vector<std::pair<int, int>> grids;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const auto& s = stages[i];
        IpeConfig ipe{s.stride, s.pad, s.channels, i > 0};
        try {
            h = ipe_output_side(h, ipe);
            w = ipe_output_side(w, ipe);
        } catch (const std::exception& e) {
            throw ShapeError("stage " + std::to_string(i + 1) + ": " + e.what());
        }
        grids.emplace_back(h, w);
    }
    return grids;
}

void ModelConfig::validate() const {
    if (stages.empty()) throw ConfigError("model needs at least one stage");
    if (input_h < 1 || input_w < 1 || in_channels < 1 || embed_dim < 1) {
        throw ConfigError("model: input size, channels and embedding dim must be positive");
    }
    std::vector<std::pair<int, int>> grids;
    try {
        grids = stage_grids();
    } catch (const ShapeError& e) {
        throw ConfigError(e.what());
    }
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const auto& s = stages[i];
        const std::string tag = "stage " + std::to_string(i + 1) + ": ";
        if (s.channels < 1 || s.layers < 0 || s.heads < 1 || s.expand < 1 || s.reduction < 1) {
            throw ConfigError(tag + "channels, heads, expand and reduction must be positive, layers >= 0");
        }
        if (s.channels % s.heads != 0) {
            throw ConfigError(tag + std::to_string(s.heads) + " heads do not divide " + std::to_string(s.channels) +
                              " channels");
        }
        if (i > 0 && s.channels < stages[i - 1].channels) throw ConfigError(tag + "channels must not decrease");
        const auto [gh, gw] = grids[i];
        if (i > 0 && (gh >= grids[i - 1].first || gw >= grids[i - 1].second)) {
            throw ConfigError(tag + "token grid does not shrink (stride must be >= 2)");
        }
        if (gh % s.reduction != 0 || gw % s.reduction != 0) {
            throw ConfigError(tag + "reduction ratio " + std::to_string(s.reduction) + " does not divide the " +
                              std::to_string(gh) + "x" + std::to_string(gw) + " token grid");
        }
    }
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const auto grids = cfg_.stage_grids();
    int in_ch = cfg_.in_channels;
    for (std::size_t i = 0; i < cfg_.stages.size(); ++i) {
        const auto& s = cfg_.stages[i];
        Stage st;
        st.ipe = IpeConfig{s.stride, s.pad, s.channels, i > 0};
        st.embed = IpeWeights::init(in_ch, st.ipe, rng, cfg_.precision);
        const auto [gh, gw] = grids[i];
        if (gh != gw) throw ConfigError("stage " + std::to_string(i + 1) + ": positional grid must be square");
        st.pos = trunc_normal({static_cast<std::int64_t>(gh) * gw, s.channels}, 0.02, rng, cfg_.precision);
        st.layer_cfg.attn = AttnConfig{s.channels, s.heads, s.reduction, cfg_.pool_out, 0.0};
        st.layer_cfg.cffn = CffnConfig{s.channels, s.expand, 3};
        for (int l = 0; l < s.layers; ++l) st.layers.push_back(EncoderLayerWeights::init(st.layer_cfg, rng, cfg_.precision));
        stages_.push_back(std::move(st));
        in_ch = s.channels;
    }
    head_weight = trunc_normal({in_ch, cfg_.embed_dim}, 0.02, rng, cfg_.precision);
    head_bias = Tensor::zeros({cfg_.embed_dim}, cfg_.precision);

    for (std::size_t i = 0; i < stages_.size(); ++i) {
        const std::string prefix = "stage" + std::to_string(i + 1) + ".";
        stages_[i].embed.collect(prefix + "embed.", registry_);
        registry_.add_param(prefix + "pos", stages_[i].pos);
        for (std::size_t l = 0; l < stages_[i].layers.size(); ++l) {
            stages_[i].layers[l].collect(prefix + "layer" + std::to_string(l) + ".", registry_);
        }
    }
    registry_.add_param("head.weight", head_weight);
    registry_.add_param("head.bias", head_bias);
}

MultiScaleFeatures Model::forward_features(const Tensor& images) {
    if (images.rank() != 4 || images.dim(1) != cfg_.in_channels) {
        throw ShapeError("model expects [B," + std::to_string(cfg_.in_channels) + ",H,W] images, got " +
                         shape_str(images.shape()));
    }
    const int H = static_cast<int>(images.dim(2)), W = static_cast<int>(images.dim(3));
    const auto grids = cfg_.stage_grids(H, W);
    for (std::size_t i = 0; i < grids.size(); ++i) {
        const int r = cfg_.stages[i].reduction;
        if (grids[i].first % r != 0 || grids[i].second % r != 0) {
            throw ShapeError("stage " + std::to_string(i + 1) + ": reduction " + std::to_string(r) +
                             " does not divide the " + std::to_string(grids[i].first) + "x" +
                             std::to_string(grids[i].second) + " grid of a " + std::to_string(H) + "x" +
                             std::to_string(W) + " input");
        }
    }

    MultiScaleFeatures out;
    Tensor map = images;
    for (auto& st : stages_) {
        auto seq = add_positional(fpvt::embed(map, st.ipe, st.embed), st.pos);
        for (auto& layer : st.layers) seq = encoder_layer(seq, st.layer_cfg, layer, training_);
        map = tokens_to_map(seq);
        out.stages.push_back(std::move(seq));
    }
    auto pooled = ops::mean_axis(out.stages.back().tokens, 1);
    out.embedding = ops::linear(pooled, head_weight, head_bias);
    return out;
}

namespace {

std::string module_key(const std::string& name) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        auto dot = name.find('.', start);
        parts.push_back(name.substr(start, dot - start));
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    if (parts.size() >= 3 && parts[1].rfind("layer", 0) == 0) {
        std::string part = parts[2].rfind("norm", 0) == 0 ? "norm" : parts[2];
        return parts[0] + "." + parts[1] + "." + part;
    }
    if (parts.size() >= 2 && parts[0] != "head") return parts[0] + "." + parts[1];
    return parts[0];
}

}  // namespace

AuditReport audit(const Model& model) {
    const auto& cfg = model.config();
    const auto& reg = model.registry();
    AuditReport rep;
    rep.total_params = reg.param_count();

    std::map<std::string, std::int64_t> counts;
    std::vector<std::string> order;
    for (const auto& e : reg.entries()) {
        if (!e.trainable) continue;
        auto key = module_key(e.name);
        if (!counts.count(key)) order.push_back(key);
        counts[key] += e.tensor.numel();
    }
    for (const auto& k : order) rep.modules.emplace_back(k, counts[k]);

    const auto grids = cfg.stage_grids();
    std::int64_t in_ch = cfg.in_channels;
    for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
        const auto& s = cfg.stages[i];
        StageAudit a;
        a.grid_h = grids[i].first;
        a.grid_w = grids[i].second;
        a.tokens = static_cast<std::int64_t>(a.grid_h) * a.grid_w;
        const std::int64_t kh = std::min(a.grid_h / s.reduction, cfg.pool_out);
        const std::int64_t kw = std::min(a.grid_w / s.reduction, cfg.pool_out);
        a.kv_length = kh * kw;
        a.heads = s.heads;
        a.layers = s.layers;
        a.score_entries = a.tokens * a.kv_length;

        const std::int64_t c = s.channels, hid = static_cast<std::int64_t>(s.channels) * s.expand, k = 2 * s.pad + 1;
        const std::int64_t N = a.tokens, M = a.kv_length;
        std::int64_t macs = N * c * in_ch * k * k;  // IPE
        std::int64_t per_layer = 0;
        per_layer += N * c * c;                      // q
        if (s.reduction > 1) per_layer += N * c * c; // (N/r^2) tokens of width r^2 c -> c
        per_layer += 2 * M * c * c;                  // k, v
        per_layer += 2 * N * M * c;                  // scores and weighted values, all heads
        per_layer += N * c * c;                      // output projection
        per_layer += N * c * hid + N * hid * 9 + N * hid * hid + N * hid * c;  // CFFN
        macs += per_layer * s.layers;
        a.macs = macs;

        const std::string prefix = "stage" + std::to_string(i + 1) + ".";
        a.lightweight_weights = 0;
        for (int l = 0; l < s.layers; ++l) {
            a.lightweight_weights += count_lightweight_weights(reg, prefix + "layer" + std::to_string(l) + ".cffn.");
        }
        a.standard_weights = depthwise_param_count(3, hid, hid).standard * s.layers;
        rep.total_macs += macs;
        rep.stages.push_back(a);
        in_ch = c;
    }
    rep.total_macs += in_ch * cfg.embed_dim;
    return rep;
}

}  // namespace fpvt
