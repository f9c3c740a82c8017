#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fpvt/registry.hpp"

namespace fpvt {

enum class OptimizerKind { adamw, sgd };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adamw;
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
    double momentum = 0.9;  // sgd only
};

// AdamW (decoupled weight decay) or SGD with momentum over a fixed
// parameter list. Moment buffers are shape-matched to their parameters.
class Optimizer {
public:
    Optimizer(OptimizerConfig cfg, std::vector<NamedTensor> params);

    // Throws std::logic_error naming the first parameter without a gradient.
    void step();
    void zero_grad();

    std::int64_t step_count() const { return steps_; }
    const OptimizerConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }

    // Moment buffers named "optim.<slot>.<param>", for checkpointing.
    std::vector<NamedTensor> state_tensors() const;
    void load_state(std::int64_t steps, const std::function<const Tensor*(const std::string&)>& lookup);

private:
    OptimizerConfig cfg_;
    std::vector<NamedTensor> params_;
    std::vector<Tensor> first_;   // adamw m, or sgd velocity
    std::vector<Tensor> second_;  // adamw v
    std::int64_t steps_ = 0;
};

}  // namespace fpvt
