#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fpvt/tensor.hpp"

namespace fpvt {

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    // Denominator floor of the relative error, so entries whose true gradient
    // is ~0 are judged on absolute error step * floor-sized noise.
    double floor = 1e-3;
    // Probe at most this many entries per tensor (evenly strided); <= 0 means all.
    std::int64_t max_entries = 0;
};

struct GradCheckReport {
    std::string name;
    double max_rel_error = 0.0;
    std::string worst_tensor;
    std::int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    std::int64_t checked = 0;
    bool passed = true;
};

// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor);

// Compares tape gradients of `loss_fn` with respect to `inputs` against
// central finite differences. Inputs must be 64-bit leaves requiring grad;
// `loss_fn` must recompute the loss from their current values.
GradCheckReport check_gradients(const std::string& name, const std::function<Tensor()>& loss_fn,
                                const std::vector<Tensor>& inputs, const GradCheckOptions& opts = {});

}  // namespace fpvt
