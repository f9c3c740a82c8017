#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "fpvt/dataset.hpp"
#include "fpvt/fdr_head.hpp"
#include "fpvt/optim.hpp"
#include "fpvt/pyramid.hpp"
#include "fpvt/trainer.hpp"

namespace fpvt {

// Everything a run needs. `seed` feeds every generator: the model, the FDR
// grouping, the dataset and the trainer each derive their own stream from it.
struct RunConfig {
    std::uint64_t seed = 0;
    ModelConfig model = ModelConfig::toy();
    SyntheticFaceSpec data;
    FdrConfig fdr;
    OptimizerConfig optim;
    TrainConfig train;

    // Propagates the global seed and the shared sizes into the parts.
    RunConfig resolved() const;
};

// Grammar: one "section.key = value" per line, '#' comments, blank lines
// ignored. Unknown or repeated keys are errors. model.preset and
// model.stages are applied before the other keys regardless of order.
// Errors are ConfigError("<source>:<line>: ...").
RunConfig parse_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);

// Canonical text form; parse_config(to_text(c)) == c.
std::string to_text(const RunConfig& cfg);

}  // namespace fpvt
