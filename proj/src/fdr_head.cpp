#include "fpvt/fdr_head.hpp"

#include <numeric>

#include "fpvt/ops.hpp"
#include "fpvt/rng.hpp"

namespace fpvt {

std::vector<int> assign_groups(int identities, int groups, std::uint64_t seed) {
    if (groups < 1 || groups >= identities) {
        throw ConfigError("FDR: group count m=" + std::to_string(groups) + " must satisfy 1 <= m < n=" +
                          std::to_string(identities));
    }
    Rng rng(Rng::mix(seed, 0x46445230ULL));
    std::vector<int> order(static_cast<std::size_t>(identities));
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size() - 1; i > 0; --i) {
        std::swap(order[i], order[static_cast<std::size_t>(rng.below(i + 1))]);
    }
    std::vector<int> assignment(static_cast<std::size_t>(identities));
    for (std::size_t i = 0; i < order.size(); ++i) {
        const int g = i < static_cast<std::size_t>(groups) ? static_cast<int>(i)
                                                           : static_cast<int>(rng.below(static_cast<std::uint64_t>(groups)));
        assignment[static_cast<std::size_t>(order[i])] = g;
    }
    return assignment;
}

FdrState::FdrState(const FdrConfig& cfg, Precision precision) : cfg_(cfg) {
    assignment_ = assign_groups(cfg.identities, cfg.groups, cfg.seed);
    if (cfg.dim < 1) throw ConfigError("FDR: feature dimension must be positive");
    Rng rng(Rng::mix(cfg.seed, 0x616e63ULL));
    anchors = trunc_normal({cfg.dim, cfg.groups}, 0.02, rng, precision);
    anchors.requires_grad_(true).set_name("fdr.anchors");
    bias = Tensor::zeros({cfg.groups}, precision);
}

int FdrState::group_of(int identity) const {
    if (identity < 0 || static_cast<std::size_t>(identity) >= assignment_.size()) {
        throw std::out_of_range("FDR: unknown identity " + std::to_string(identity));
    }
    return assignment_[static_cast<std::size_t>(identity)];
}

void FdrState::collect(const std::string& prefix, ParamRegistry& reg) const {
    reg.add_param(prefix + "anchors", anchors);
    reg.add_buffer(prefix + "bias", bias);
}

Tensor corresponding_anchor(const Tensor& features, const std::vector<int>& batch_groups, int group,
                            const std::vector<double>& alphas) {
    const auto B = features.dim(0);
    if (static_cast<std::int64_t>(batch_groups.size()) != B || static_cast<std::int64_t>(alphas.size()) != B) {
        throw ShapeError("corresponding_anchor: group/alpha lists must have one entry per sample");
    }
    std::vector<double> weights(static_cast<std::size_t>(B), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (batch_groups[i] == group) total += (weights[i] = alphas[i]);
    }
    if (total <= 0.0) throw std::invalid_argument("corresponding_anchor: group " + std::to_string(group) + " has no member in batch");
    for (auto& w : weights) w /= total;
    auto a = Tensor({1, B}, std::move(weights), features.precision());
    return ops::reshape(ops::matmul(a, features), {features.dim(1)});
}

FdrOutput fdr_forward(const Tensor& features, const FdrState& state, const std::vector<int>& batch_identities) {
    const auto& cfg = state.config();
    if (features.rank() != 2 || features.dim(1) != cfg.dim) {
        throw ShapeError("FDR: features must be [B," + std::to_string(cfg.dim) + "], got " + shape_str(features.shape()));
    }
    const auto B = features.dim(0), d = features.dim(1);
    const auto m = static_cast<std::int64_t>(cfg.groups);
    const bool labeled = !batch_identities.empty();
    if (labeled && static_cast<std::int64_t>(batch_identities.size()) != B) {
        throw ShapeError("FDR: one identity per sample required");
    }

    FdrOutput out;
    for (int id : batch_identities) out.targets.push_back(state.group_of(id));
    std::vector<double> alphas = state.alpha ? state.alpha(features) : std::vector<double>(static_cast<std::size_t>(B), 1.0);
    if (static_cast<std::int64_t>(alphas.size()) != B) throw ShapeError("FDR: alpha hook returned wrong length");

    // w_eff = w * free_mask + F^T A, where A[i, l] = alpha_i / sum_{j in l} alpha_j for i in group l.
    std::vector<double> totals(static_cast<std::size_t>(m), 0.0);
    for (std::size_t i = 0; i < out.targets.size(); ++i) totals[static_cast<std::size_t>(out.targets[i])] += alphas[i];
    out.corresponding.assign(static_cast<std::size_t>(m), false);
    std::vector<double> assign(static_cast<std::size_t>(B * m), 0.0), mask(static_cast<std::size_t>(d * m), 1.0);
    for (std::int64_t l = 0; l < m; ++l) out.corresponding[static_cast<std::size_t>(l)] = totals[static_cast<std::size_t>(l)] > 0.0;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(out.targets.size()); ++i) {
        const auto l = out.targets[static_cast<std::size_t>(i)];
        if (totals[static_cast<std::size_t>(l)] > 0.0) {
            assign[static_cast<std::size_t>(i * m + l)] = alphas[static_cast<std::size_t>(i)] / totals[static_cast<std::size_t>(l)];
        }
    }
    for (std::int64_t r = 0; r < d; ++r)
        for (std::int64_t l = 0; l < m; ++l)
            if (out.corresponding[static_cast<std::size_t>(l)]) mask[static_cast<std::size_t>(r * m + l)] = 0.0;

    const Precision p = promote(features.precision(), state.anchors.precision());
    auto free_part = ops::mul(state.anchors, Tensor({d, m}, std::move(mask), p));
    auto corr_part = ops::matmul(ops::transpose(features), Tensor({B, m}, std::move(assign), p));
    out.effective = ops::add(free_part, corr_part);
    out.logits = ops::add_broadcast(ops::matmul(features, out.effective), state.bias);
    return out;
}

void write_back(FdrState& state, const FdrOutput& out) {
    const double rate = state.config().writeback;
    auto w = state.anchors.mutable_data();
    auto eff = out.effective.data();
    const auto m = static_cast<std::size_t>(state.config().groups);
    const Precision p = state.anchors.precision();
    for (std::size_t r = 0; r < w.size() / m; ++r)
        for (std::size_t l = 0; l < m; ++l) {
            if (!out.corresponding[l]) continue;
            w[r * m + l] = round_to(p, (1.0 - rate) * w[r * m + l] + rate * eff[r * m + l]);
        }
}

Tensor cosine_logits(const Tensor& features, const Tensor& anchors) {
    auto f = ops::l2_normalize_rows(features);
    auto cols = ops::l2_normalize_rows(ops::transpose(anchors));  // [m, d]
    return ops::matmul(f, ops::transpose(cols));
}

Tensor margin_softmax_loss(const Tensor& cosines, const std::vector<int>& targets, double margin, double scale) {
    if (cosines.rank() != 2) throw ShapeError("margin_softmax_loss: logits must be [B,m]");
    const auto B = cosines.dim(0), m = cosines.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != B) throw ShapeError("margin_softmax_loss: one target per row required");
    std::vector<double> shift(static_cast<std::size_t>(B * m), 0.0);
    for (std::int64_t i = 0; i < B; ++i) {
        const int t = targets[static_cast<std::size_t>(i)];
        if (t < 0 || t >= m) throw std::out_of_range("margin_softmax_loss: target " + std::to_string(t) + " out of range");
        shift[static_cast<std::size_t>(i * m + t)] = -margin;
    }
    auto adjusted = ops::add(cosines, Tensor({B, m}, std::move(shift), cosines.precision()));
    return ops::cross_entropy(ops::scale(adjusted, scale), targets);
}

std::int64_t fdr_parameter_saving(std::int64_t n, std::int64_t m, std::int64_t d) { return (n - m) * d; }

}  // namespace fpvt
