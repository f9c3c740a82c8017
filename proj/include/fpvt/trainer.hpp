#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "fpvt/checkpoint.hpp"
#include "fpvt/dataset.hpp"
#include "fpvt/fdr_head.hpp"
#include "fpvt/optim.hpp"
#include "fpvt/pyramid.hpp"
#include "fpvt/rng.hpp"

namespace fpvt {

class DivergenceError : public NumericError {
public:
    DivergenceError(std::int64_t step, const std::string& what)
        : NumericError("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
    std::int64_t step() const { return step_; }

private:
    std::int64_t step_;
};

struct TrainConfig {
    std::int64_t steps = 500;
    int batch = 32;
    std::uint64_t seed = 0;
    bool augment = true;
    AugmentConfig augment_cfg;
    std::int64_t checkpoint_every = 0;  // 0: only initial and final
    // When non-empty every step trains on exactly these dataset indices.
    std::vector<std::int64_t> fixed_batch;
};

struct StepLog {
    std::int64_t step = 0;  // 1-based index of the finished step
    double loss = 0.0;
    double acc = 0.0;  // in-batch group accuracy
    double lr = 0.0;
    double elapsed_ms = 0.0;

    // "step loss acc lr elapsed_ms"
    std::string line() const;
};

// One optimizer step per call over a batch drawn with replacement.
// Model, head and dataset are borrowed and must outlive the trainer.
class Trainer {
public:
    Trainer(Model& model, FdrState& head, const Dataset& data, const TrainConfig& cfg, const OptimizerConfig& optim);

    StepLog step();
    std::int64_t steps_done() const { return step_; }

    // Fraction of training images whose nearest stored anchor (cosine, eval
    // mode, no augmentation) is the group of their identity.
    double evaluate_accuracy();

    Checkpoint checkpoint(const std::string& config_text) const;
    // Restores every tensor, optimizer moment, the RNG and the step counter.
    void restore(const Checkpoint& ckpt);

    // Named view of everything a checkpoint stores except optimizer moments.
    std::vector<NamedTensor> state_tensors() const;

private:
    Tensor make_batch(const std::vector<std::int64_t>& index);

    Model& model_;
    FdrState& head_;
    const Dataset& data_;
    TrainConfig cfg_;
    Optimizer optim_;
    Rng rng_;
    std::int64_t step_ = 0;
    std::chrono::steady_clock::time_point start_;
};

}  // namespace fpvt
