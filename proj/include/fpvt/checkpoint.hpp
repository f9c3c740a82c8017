#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fpvt/tensor.hpp"

namespace fpvt {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Binary layout, all integers little-endian:
//   "FPVT" | u32 version | u32 n + config text | u32 n + rng state text
//   | u64 optimizer step | u64 trainer step | u32 count | records
// record: u32 n + name | u8 dtype (0 f32, 1 f64) | u32 rank | u32 dims[rank]
//   | values (4 or 8 bytes each)
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::string config_text;
    std::string rng_state;
    std::uint64_t optimizer_step = 0;
    std::uint64_t trainer_step = 0;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const;
};

std::string serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fpvt
