#pragma once

#include <vector>

#include "fpvt/gradcheck.hpp"
#include "fpvt/pyramid.hpp"

namespace fpvt {

// 64-bit finite-difference checks of every differentiable op, each module
// and a full model built from the first two stages of `model` on a 16x16
// input. `inject_fault` adds an identity op with a deliberately wrong
// backward rule ("corrupted_identity") so the harness can be tested.
std::vector<GradCheckReport> run_gradcheck_suite(const ModelConfig& model, const GradCheckOptions& opts,
                                                 bool inject_fault = false);

// The model actually checked: two stages, 16x16, 64-bit, narrow widths.
ModelConfig gradcheck_model(const ModelConfig& model);

}  // namespace fpvt
