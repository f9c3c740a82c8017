#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fpvt/rng.hpp"
#include "fpvt/tensor.hpp"

namespace fpvt {

struct NamedTensor {
    std::string name;
    Tensor tensor;
    bool trainable = true;  // false for buffers such as batch-norm running stats
};

// Ordered name -> tensor table. Entries alias the module's tensors, so
// writes through the registry are visible to the owning module.
class ParamRegistry {
public:
    void add_param(const std::string& name, Tensor t);
    void add_buffer(const std::string& name, Tensor t);

    const std::vector<NamedTensor>& entries() const { return entries_; }
    std::vector<NamedTensor> params() const;
    const NamedTensor* find(const std::string& name) const;

    // Number of trainable scalars, optionally restricted to names with `prefix`.
    std::int64_t param_count(const std::string& prefix = "") const;

private:
    std::vector<NamedTensor> entries_;
};

Tensor trunc_normal(Shape shape, double std, Rng& rng, Precision precision);
Tensor normal_init(Shape shape, double std, Rng& rng, Precision precision);

}  // namespace fpvt
