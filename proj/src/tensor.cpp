#include "fpvt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fpvt {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Precision promote(Precision a, Precision b) {
    return (a == Precision::f64 || b == Precision::f64) ? Precision::f64 : Precision::f32;
}

double round_to(Precision p, double v) {
    return p == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

namespace {

void validate_shape(const Shape& shape) {
    for (auto d : shape) {
        if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
}

const TensorImpl& require(const std::shared_ptr<TensorImpl>& p) {
    if (!p) throw std::logic_error("use of undefined tensor");
    return *p;
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<double> values, Precision precision) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("tensor of shape " + shape_str(shape) + " given " +
                         std::to_string(values.size()) + " values");
    }
    impl_ = std::make_shared<TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->precision = precision;
    if (precision == Precision::f32) {
        for (auto& v : values) v = round_to(precision, v);
    }
    impl_->data = std::move(values);
}

Tensor Tensor::zeros(Shape shape, Precision precision) { return full(std::move(shape), 0.0, precision); }

Tensor Tensor::full(Shape shape, double value, Precision precision) {
    validate_shape(shape);
    auto n = static_cast<std::size_t>(shape_numel(shape));
    return Tensor(std::move(shape), std::vector<double>(n, value), precision);
}

Tensor Tensor::scalar(double value, Precision precision) { return Tensor({1}, {value}, precision); }

const Shape& Tensor::shape() const { return require(impl_).shape; }

std::int64_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    return s[axis];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(require(impl_).data.size()); }
Precision Tensor::precision() const { return require(impl_).precision; }
std::span<const double> Tensor::data() const { return require(impl_).data; }
std::span<double> Tensor::mutable_data() {
    require(impl_);
    return impl_->data;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return data()[0];
}

bool Tensor::requires_grad() const { return require(impl_).requires_grad; }
Tensor& Tensor::requires_grad_(bool on) {
    require(impl_);
    if (!impl_->is_leaf) throw std::logic_error("requires_grad_ on a non-leaf tensor");
    impl_->requires_grad = on;
    return *this;
}
bool Tensor::is_leaf() const { return require(impl_).is_leaf; }
bool Tensor::has_grad() const { return !require(impl_).grad.empty(); }
std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw std::logic_error("tensor '" + impl_->name + "' has no gradient");
    return impl_->grad;
}
std::span<double> Tensor::mutable_grad() {
    if (!has_grad()) throw std::logic_error("tensor '" + impl_->name + "' has no gradient");
    return impl_->grad;
}
void Tensor::zero_grad() {
    require(impl_);
    impl_->grad.assign(impl_->data.size(), 0.0);
}
void Tensor::clear_grad() {
    require(impl_);
    impl_->grad.clear();
}

const std::string& Tensor::name() const { return require(impl_).name; }
Tensor& Tensor::set_name(std::string name) {
    require(impl_);
    impl_->name = std::move(name);
    return *this;
}

Tensor Tensor::detach() const {
    const auto& src = require(impl_);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = src.shape;
    impl->data = src.data;
    impl->precision = src.precision;
    impl->name = src.name;
    return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::to(Precision precision) const {
    auto out = detach();
    out.impl_->precision = precision;
    if (precision == Precision::f32) {
        for (auto& v : out.impl_->data) v = round_to(precision, v);
    }
    return out;
}

Tensor make_result(Shape shape, std::vector<double> values, Precision precision) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->precision = precision;
    impl->data = std::move(values);
    if (precision == Precision::f32) {
        for (auto& v : impl->data) v = round_to(precision, v);
    }
    return Tensor(std::move(impl));
}

void check_finite(const Tensor& t, const char* op) {
    auto d = t.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!std::isfinite(d[i])) {
            throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
        }
    }
}

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

bool Tape::needs(std::initializer_list<const Tensor*> inputs) const {
    if (!recording()) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
}

void Tape::record(std::string op, std::vector<Tensor> inputs, Tensor& output, BackwardFn fn) {
    output.impl_->requires_grad = true;
    output.impl_->is_leaf = false;
    nodes_.push_back(Node{std::move(op), std::move(inputs), output, std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward() needs a scalar loss, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    if (!loss.requires_grad()) throw std::logic_error("backward(): loss does not depend on any parameter");

    std::vector<double> seed{1.0};
    accumulate_grad(loss, seed);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        auto* out = it->output.impl();
        if (out->grad.empty()) continue;  // not reachable from loss
        it->backward(out->grad);
    }
    for (auto& node : nodes_) node.output.clear_grad();
    clear();
}

void Tape::clear() { nodes_.clear(); }

void backward(const Tensor& loss) { Tape::current().backward(loss); }

void accumulate_grad(const Tensor& t, std::span<const double> g) {
    if (!t.defined() || !t.requires_grad()) return;
    auto* impl = t.impl();
    if (g.size() != impl->data.size()) {
        throw ShapeError("gradient size " + std::to_string(g.size()) + " does not match tensor " +
                         shape_str(impl->shape));
    }
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
    const bool round = impl->precision == Precision::f32;
    for (std::size_t i = 0; i < g.size(); ++i) {
        double v = impl->grad[i] + g[i];
        impl->grad[i] = round ? round_to(Precision::f32, v) : v;
    }
}

}  // namespace fpvt
