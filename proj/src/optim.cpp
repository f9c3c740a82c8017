#include "fpvt/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace fpvt {

Optimizer::Optimizer(OptimizerConfig cfg, std::vector<NamedTensor> params) : cfg_(cfg), params_(std::move(params)) {
    for (const auto& p : params_) {
        first_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.precision()));
        if (cfg_.kind == OptimizerKind::adamw) second_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.precision()));
    }
}

void Optimizer::step() {
    for (const auto& p : params_) {
        if (!p.tensor.has_grad()) throw std::logic_error("optimizer: parameter '" + p.name + "' has no gradient");
    }
    ++steps_;
    const double lr = cfg_.lr;
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor w = params_[k].tensor;
        const Precision prec = w.precision();
        auto wd = w.mutable_data();
        auto g = w.grad();
        auto m = first_[k].mutable_data();
        if (cfg_.kind == OptimizerKind::adamw) {
            auto v = second_[k].mutable_data();
            const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
            const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
            for (std::size_t i = 0; i < wd.size(); ++i) {
                double x = wd[i] * (1.0 - lr * cfg_.weight_decay);
                m[i] = round_to(prec, cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i]);
                v[i] = round_to(prec, cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i]);
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                x -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                wd[i] = round_to(prec, x);
            }
        } else {
            for (std::size_t i = 0; i < wd.size(); ++i) {
                const double gi = g[i] + cfg_.weight_decay * wd[i];
                m[i] = round_to(prec, cfg_.momentum * m[i] + gi);
                wd[i] = round_to(prec, wd[i] - lr * m[i]);
            }
        }
    }
}

void Optimizer::zero_grad() {
    for (auto& p : params_) p.tensor.clear_grad();
}

std::vector<NamedTensor> Optimizer::state_tensors() const {
    std::vector<NamedTensor> out;
    for (std::size_t k = 0; k < params_.size(); ++k) {
        out.push_back({"optim.m." + params_[k].name, first_[k], false});
        if (!second_.empty()) out.push_back({"optim.v." + params_[k].name, second_[k], false});
    }
    return out;
}

void Optimizer::load_state(std::int64_t steps, const std::function<const Tensor*(const std::string&)>& lookup) {
    auto restore = [&](Tensor& dst, const std::string& name) {
        const Tensor* src = lookup(name);
        if (!src) throw std::runtime_error("optimizer state missing '" + name + "'");
        if (src->shape() != dst.shape()) throw ShapeError("optimizer state '" + name + "' has wrong shape");
        auto d = dst.mutable_data();
        auto s = src->data();
        std::copy(s.begin(), s.end(), d.begin());
    };
    for (std::size_t k = 0; k < params_.size(); ++k) {
        restore(first_[k], "optim.m." + params_[k].name);
        if (!second_.empty()) restore(second_[k], "optim.v." + params_[k].name);
    }
    steps_ = steps;
}

}  // namespace fpvt
