#include "fpvt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace fpvt {

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

GradCheckReport check_gradients(const std::string& name, const std::function<Tensor()>& loss_fn,
                                const std::vector<Tensor>& inputs, const GradCheckOptions& opts) {
    for (const auto& t : inputs) {
        if (t.precision() != Precision::f64) throw std::invalid_argument("gradcheck '" + name + "': inputs must be 64-bit");
        if (!t.requires_grad()) throw std::invalid_argument("gradcheck '" + name + "': input does not require grad");
    }
    Tape::current().clear();
    for (auto t : inputs) t.clear_grad();
    backward(loss_fn());

    std::vector<std::vector<double>> analytic;
    for (const auto& t : inputs) {
        if (t.has_grad()) {
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        } else {
            analytic.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
        }
    }

    GradCheckReport rep;
    rep.name = name;
    NoGradGuard no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor t = inputs[k];
        auto data = t.mutable_data();
        const auto n = static_cast<std::int64_t>(data.size());
        const std::int64_t stride = (opts.max_entries > 0 && n > opts.max_entries) ? (n + opts.max_entries - 1) / opts.max_entries : 1;
        for (std::int64_t i = 0; i < n; i += stride) {
            auto idx = static_cast<std::size_t>(i);
            const double orig = data[idx];
            data[idx] = orig + opts.step;
            const double fp = loss_fn().item();
            data[idx] = orig - opts.step;
            const double fm = loss_fn().item();
            data[idx] = orig;
            const double numeric = (fp - fm) / (2.0 * opts.step);
            const double err = relative_error(analytic[k][idx], numeric, opts.floor);
            ++rep.checked;
            if (rep.worst_index < 0 || err > rep.max_rel_error) {
                rep.max_rel_error = err;
                rep.worst_tensor = t.name().empty() ? "input" + std::to_string(k) : t.name();
                rep.worst_index = i;
                rep.analytic = analytic[k][idx];
                rep.numeric = numeric;
            }
        }
    }
    rep.passed = rep.max_rel_error <= opts.tolerance;
    return rep;
}

}  // namespace fpvt
