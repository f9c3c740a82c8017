#include "fpvt/registry.hpp"

#include <algorithm>

namespace fpvt {

void ParamRegistry::add_param(const std::string& name, Tensor t) {
    if (find(name)) throw std::logic_error("duplicate parameter name '" + name + "'");
    t.requires_grad_(true);
    t.set_name(name);
    entries_.push_back({name, std::move(t), true});
}

void ParamRegistry::add_buffer(const std::string& name, Tensor t) {
    if (find(name)) throw std::logic_error("duplicate buffer name '" + name + "'");
    t.set_name(name);
    entries_.push_back({name, std::move(t), false});
}

std::vector<NamedTensor> ParamRegistry::params() const {
    std::vector<NamedTensor> out;
    std::copy_if(entries_.begin(), entries_.end(), std::back_inserter(out),
                 [](const NamedTensor& e) { return e.trainable; });
    return out;
}

const NamedTensor* ParamRegistry::find(const std::string& name) const {
    auto it = std::find_if(entries_.begin(), entries_.end(), [&](const NamedTensor& e) { return e.name == name; });
    return it == entries_.end() ? nullptr : &*it;
}

std::int64_t ParamRegistry::param_count(const std::string& prefix) const {
    std::int64_t n = 0;
    for (const auto& e : entries_) {
        if (e.trainable && e.name.compare(0, prefix.size(), prefix) == 0) n += e.tensor.numel();
    }
    return n;
}

Tensor trunc_normal(Shape shape, double std, Rng& rng, Precision precision) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& e : v) e = rng.truncated_normal(std);
    return Tensor(std::move(shape), std::move(v), precision);
}

Tensor normal_init(Shape shape, double std, Rng& rng, Precision precision) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& e : v) e = rng.normal() * std;
    return Tensor(std::move(shape), std::move(v), precision);
}

}  // namespace fpvt
