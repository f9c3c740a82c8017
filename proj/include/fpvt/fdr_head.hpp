#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fpvt/registry.hpp"
#include "fpvt/tensor.hpp"

namespace fpvt {

struct FdrConfig {
    int identities = 10;  // n
    int groups = 5;       // m, must be < n
    int dim = 64;         // d
    std::uint64_t seed = 0;
    double margin = 0.5;
    double scale = 64.0;
    double writeback = 0.1;  // column <- (1 - writeback) * column + writeback * anchor
};

// Seeded surjection identity -> group in [0, m). Every group receives at
// least one identity. Throws ConfigError unless 1 <= m < n.
std::vector<int> assign_groups(int identities, int groups, std::uint64_t seed);

// Per-sample attention factors alpha_i from the batch features [B, d].
using AlphaFn = std::function<std::vector<double>(const Tensor& features)>;

// Anchor matrix w [d, m] whose columns are shared by identity groups.
class FdrState {
public:
    FdrState(const FdrConfig& cfg, Precision precision);

    const FdrConfig& config() const { return cfg_; }
    const std::vector<int>& assignment() const { return assignment_; }
    int group_of(int identity) const;

    Tensor anchors;  // [d, m], learnable
    Tensor bias;     // [m], zero and not trained
    // Constant 1.0 when empty.
    AlphaFn alpha;

    void collect(const std::string& prefix, ParamRegistry& reg) const;

private:
    FdrConfig cfg_;
    std::vector<int> assignment_;
};

// Weighted mean of the features of samples in group l (gradient flows into
// the features). Throws std::invalid_argument when no sample belongs to l.
Tensor corresponding_anchor(const Tensor& features, const std::vector<int>& batch_groups, int group,
                            const std::vector<double>& alphas);

struct FdrOutput {
    Tensor logits;     // [B, m] = w_eff^T f + b
    Tensor effective;  // [d, m] columns used this step
    std::vector<int> targets;
    std::vector<bool> corresponding;  // per column
};

// Columns of groups present in the batch are replaced by their corresponding
// anchors; the rest stay free (the stored, learnable columns). An empty
// identity list marks an unlabeled batch: every column is free and the head
// is a plain linear layer.
FdrOutput fdr_forward(const Tensor& features, const FdrState& state, const std::vector<int>& batch_identities);

// Moves each corresponding column toward the anchor it was replaced with.
void write_back(FdrState& state, const FdrOutput& out);

// Cross-entropy over scale * (cos - margin * [col == target]).
Tensor margin_softmax_loss(const Tensor& cosines, const std::vector<int>& targets, double margin, double scale);
// Cosines between rows of features [B, d] and columns of anchors [d, m].
Tensor cosine_logits(const Tensor& features, const Tensor& anchors);

// Parameters saved by an m-column head over an n-way classifier of width d.
std::int64_t fdr_parameter_saving(std::int64_t n, std::int64_t m, std::int64_t d);

}  // namespace fpvt
