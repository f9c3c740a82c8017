#include "fpvt/gradcheck_suite.hpp"

#include <algorithm>

#include "fpvt/attention.hpp"
#include "fpvt/cffn.hpp"
#include "fpvt/fdr_head.hpp"
#include "fpvt/ops.hpp"
#include "fpvt/patch_embed.hpp"

namespace fpvt {

namespace {

Tensor random(Shape shape, Rng& rng, bool grad = true, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& e : v) e = rng.uniform(lo, hi);
    Tensor t(std::move(shape), std::move(v), Precision::f64);
    if (grad) t.requires_grad_(true);
    return t;
}

// sum(y * w) for a fixed random w, so every output entry carries gradient.
Tensor probe(const Tensor& y, std::uint64_t seed) {
    Rng rng(seed);
    return ops::sum(ops::mul(y, random(y.shape(), rng, false)));
}

// Forward is the identity; the recorded backward scales the gradient by 1.5.
Tensor corrupted_identity(const Tensor& x) {
    auto out = make_result(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), x.precision());
    auto& tape = Tape::current();
    if (tape.needs({&x})) {
        tape.record("corrupted_identity", {x}, out, [x](std::span<const double> g) {
            std::vector<double> bad(g.begin(), g.end());
            for (auto& v : bad) v *= 1.5;
            accumulate_grad(x, bad);
        });
    }
    return out;
}

std::vector<Tensor> perturbed_params(const ParamRegistry& reg, Rng& rng) {
    std::vector<Tensor> out;
    for (auto& p : reg.params()) {
        for (auto& v : p.tensor.mutable_data()) v += rng.uniform(-0.2, 0.2);
        out.push_back(p.tensor);
    }
    return out;
}

}  // namespace

ModelConfig gradcheck_model(const ModelConfig& model) {
    ModelConfig cfg = model;
    if (cfg.stages.size() > 2) cfg.stages.resize(2);
    cfg.input_h = cfg.input_w = 16;
    cfg.precision = Precision::f64;
    for (auto& s : cfg.stages) {
        s.channels = std::max(s.heads, 8 / s.heads * s.heads);
        s.expand = std::min(s.expand, 2);
        s.layers = std::min(s.layers, 1);
    }
    cfg.embed_dim = std::min(cfg.embed_dim, 8);
    cfg.validate();
    return cfg;
}

std::vector<GradCheckReport> run_gradcheck_suite(const ModelConfig& model, const GradCheckOptions& opts,
                                                 bool inject_fault) {
    std::vector<GradCheckReport> reports;
    Rng rng(Rng::mix(model.seed, 0x67726164ULL));
    auto run = [&](const std::string& name, const std::function<Tensor()>& f, const std::vector<Tensor>& in) {
        reports.push_back(check_gradients(name, f, in, opts));
    };
    std::uint64_t k = 0;
    auto seed = [&] { return ++k; };

    {
        auto x = random({2, 3, 4}, rng);
        auto s = seed();
        run("reshape", [=] { return probe(ops::reshape(x, {6, 4}), s); }, {x});
        run("permute", [=] { return probe(ops::permute(x, {2, 0, 1}), s); }, {x});
        run("transpose", [=] { return probe(ops::transpose(x), s); }, {x});
        run("scale", [=] { return probe(ops::scale(x, -2.5), s); }, {x});
        run("add_scalar", [=] { return probe(ops::add_scalar(x, 0.7), s); }, {x});
        run("gelu", [=] { return probe(ops::gelu(x), s); }, {x});
        run("sum", [=] { return ops::sum(ops::mul(x, x)); }, {x});
        run("mean", [=] { return ops::mean(ops::mul(x, x)); }, {x});
        run("mean_axis", [=] { return probe(ops::mean_axis(x, 1), s); }, {x});
        run("softmax_rows", [=] { return probe(ops::softmax_rows(x), s); }, {x});
        run("l2_normalize_rows", [=] { return probe(ops::l2_normalize_rows(x), s); }, {x});
    }
    {
        auto a = random({3, 4}, rng), b = random({3, 4}, rng), c = random({4}, rng);
        auto s = seed();
        run("add", [=] { return probe(ops::add(a, b), s); }, {a, b});
        run("sub", [=] { return probe(ops::sub(a, b), s); }, {a, b});
        run("mul", [=] { return probe(ops::mul(a, b), s); }, {a, b});
        run("add_broadcast", [=] { return probe(ops::add_broadcast(a, c), s); }, {a, c});
    }
    {
        auto a = random({3, 5}, rng), b = random({5, 2}, rng);
        auto a3 = random({2, 3, 5}, rng), b3 = random({2, 5, 2}, rng), bias = random({2}, rng);
        auto s = seed();
        run("matmul", [=] { return probe(ops::matmul(a, b), s); }, {a, b});
        run("matmul_batched", [=] { return probe(ops::matmul(a3, b3), s); }, {a3, b3});
        run("matmul_shared", [=] { return probe(ops::matmul(a3, b), s); }, {a3, b});
        run("linear", [=] { return probe(ops::linear(a3, b, bias), s); }, {a3, b, bias});
    }
    {
        auto x = random({2, 3, 6}, rng), g = random({6}, rng), b = random({6}, rng);
        auto s = seed();
        run("layer_norm", [=] { return probe(ops::layer_norm(x, g, b), s); }, {x, g, b});
    }
    {
        auto x = random({3, 2, 3, 3}, rng), g = random({2}, rng), b = random({2}, rng);
        auto s = seed();
        auto state = std::make_shared<ops::BatchNormState>(ops::BatchNormState::init(2, Precision::f64));
        run("batch_norm_train", [=] { return probe(ops::batch_norm(x, *state, g, b, true), s); }, {x, g, b});
        run("batch_norm_eval", [=] { return probe(ops::batch_norm(x, *state, g, b, false), s); }, {x, g, b});
    }
    {
        auto x = random({2, 2, 5, 5}, rng), w = random({3, 2, 3, 3}, rng), b = random({3}, rng);
        auto dw = random({2, 3, 3}, rng), mix = random({3, 2}, rng), pb = random({3}, rng);
        auto s = seed();
        run("conv2d", [=] { return probe(ops::conv2d(x, w, b, 2, 1), s); }, {x, w, b});
        run("depthwise_conv2d", [=] { return probe(ops::depthwise_conv2d(x, dw, 1), s); }, {x, dw});
        run("pointwise_conv", [=] { return probe(ops::pointwise_conv(x, mix, pb), s); }, {x, mix, pb});
        run("adaptive_max_pool2d", [=] { return probe(ops::adaptive_max_pool2d(x, 2, 3), s); }, {x});
    }
    {
        auto logits = random({4, 5}, rng);
        run("cross_entropy", [=] { return ops::cross_entropy(logits, {0, 4, 2, 2}); }, {logits});
        run("margin_softmax_loss", [=] { return margin_softmax_loss(logits, {1, 3, 0, 2}, 0.5, 4.0); }, {logits});
    }
    if (inject_fault) {
        auto x = random({3, 3}, rng);
        auto s = seed();
        run("corrupted_identity", [=] { return probe(corrupted_identity(x), s); }, {x});
    }

    // Modules.
    {
        IpeConfig cfg{2, 1, 4};
        auto w = IpeWeights::init(2, cfg, rng, Precision::f64);
        ParamRegistry reg;
        w.collect("", reg);
        auto in = perturbed_params(reg, rng);
        auto x = random({1, 2, 6, 6}, rng), table = random({4, 4}, rng);
        in.push_back(x);
        in.push_back(table);
        auto s = seed();
        run("patch_embed", [=] { return probe(add_positional(embed(x, cfg, w), table).tokens, s); }, in);
    }
    {
        AttnConfig cfg{4, 2, 2, 2};
        auto w = AttnWeights::init(cfg, rng, Precision::f64);
        ParamRegistry reg;
        w.collect("", reg);
        auto in = perturbed_params(reg, rng);
        auto x = random({2, 16, 4}, rng);
        in.push_back(x);
        auto s = seed();
        run("fsra", [=] { return probe(fsra_forward(TokenSequence(x, 4, 4), cfg, w).tokens, s); }, in);
    }
    {
        CffnConfig cfg{3, 2};
        auto w = std::make_shared<CffnWeights>(CffnWeights::init(cfg, rng, Precision::f64));
        ParamRegistry reg;
        w->collect("", reg);
        auto in = perturbed_params(reg, rng);
        auto x = random({2, 6, 3}, rng);
        in.push_back(x);
        auto s = seed();
        run("cffn", [=] { return probe(cffn_forward(TokenSequence(x, 2, 3), cfg, *w, true).tokens, s); }, in);
    }
    {
        EncoderLayerConfig cfg{AttnConfig{4, 2, 2, 2}, CffnConfig{4, 2}};
        auto w = std::make_shared<EncoderLayerWeights>(EncoderLayerWeights::init(cfg, rng, Precision::f64));
        ParamRegistry reg;
        w->collect("", reg);
        auto in = perturbed_params(reg, rng);
        auto x = random({2, 16, 4}, rng);
        in.push_back(x);
        auto s = seed();
        run("encoder_layer", [=] { return probe(encoder_layer(TokenSequence(x, 4, 4), cfg, *w, true).tokens, s); }, in);
    }
    {
        FdrConfig cfg;
        cfg.identities = 6;
        cfg.groups = 3;
        cfg.dim = 4;
        auto head = std::make_shared<FdrState>(cfg, Precision::f64);
        std::vector<int> ids;
        for (int id = 0; id < 6; ++id) {
            if (head->group_of(id) != 1) ids.push_back(id);
        }
        auto f = random({static_cast<std::int64_t>(ids.size()), 4}, rng);
        run("fdr_head", [=] {
            auto out = fdr_forward(f, *head, ids);
            return margin_softmax_loss(cosine_logits(f, out.effective), out.targets, 0.5, 4.0);
        }, {f, head->anchors});
    }
    {
        auto cfg = gradcheck_model(model);
        auto net = std::make_shared<Model>(cfg);
        auto in = perturbed_params(net->registry(), rng);
        auto x = random({2, cfg.in_channels, cfg.input_h, cfg.input_w}, rng);
        in.push_back(x);
        auto s = seed();
        GradCheckOptions model_opts = opts;
        if (model_opts.max_entries <= 0) model_opts.max_entries = 16;
        reports.push_back(check_gradients("model", [=] { return probe(net->embed(x), s); }, in, model_opts));
    }
    return reports;
}

}  // namespace fpvt
