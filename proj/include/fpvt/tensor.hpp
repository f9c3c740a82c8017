#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fpvt {

using Shape = std::vector<std::int64_t>;

// Storage precision of a tensor. Values are always computed in double; an
// f32 tensor rounds every stored value (and gradient) to binary32.
enum class Precision : std::uint8_t { f32 = 0, f64 = 1 };

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

std::string shape_str(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);
Precision promote(Precision a, Precision b);
double round_to(Precision p, double v);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    Precision precision = Precision::f32;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<double> grad;  // empty until a backward pass reaches this tensor
    std::string name;
};

// Shared handle to a dense row-major array. Copies alias the same storage;
// use clone() for an independent copy.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, Precision precision = Precision::f32);

    static Tensor zeros(Shape shape, Precision precision = Precision::f32);
    static Tensor full(Shape shape, double value, Precision precision = Precision::f32);
    static Tensor scalar(double value, Precision precision = Precision::f32);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::int64_t dim(std::size_t axis) const;
    std::int64_t numel() const;
    Precision precision() const;

    std::span<const double> data() const;
    // Direct write access, outside the tape. Used by initializers, the
    // optimizer and finite-difference probes.
    std::span<double> mutable_data();
    double item() const;
    double operator[](std::int64_t flat) const { return data()[static_cast<std::size_t>(flat)]; }

    bool requires_grad() const;
    Tensor& requires_grad_(bool on = true);
    bool is_leaf() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();
    void clear_grad();

    const std::string& name() const;
    Tensor& set_name(std::string name);

    Tensor detach() const;
    Tensor clone() const;
    // Same values converted to another storage precision, detached.
    Tensor to(Precision precision) const;

    TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    friend class Tape;
    friend Tensor make_result(Shape, std::vector<double>, Precision);

    std::shared_ptr<TensorImpl> impl_;
};

// Builds an op output: rounds to the storage precision and rejects any
// non-finite value, naming the op.
Tensor make_result(Shape shape, std::vector<double> values, Precision precision);
void check_finite(const Tensor& t, const char* op);

// Reverse-mode tape. Nodes are appended in evaluation order, which is a
// topological order of the graph. One tape per thread.
class Tape {
public:
    using BackwardFn = std::function<void(std::span<const double> out_grad)>;

    struct Node {
        std::string op;
        std::vector<Tensor> inputs;
        Tensor output;
        BackwardFn backward;
    };

    static Tape& current();

    bool recording() const { return enabled_ > 0; }
    // True when the op over `inputs` must be recorded.
    bool needs(std::initializer_list<const Tensor*> inputs) const;
    void record(std::string op, std::vector<Tensor> inputs, Tensor& output, BackwardFn fn);

    // Populates grad on every requires_grad leaf reachable from `loss`, then
    // clears the tape. Leaf gradients accumulate across calls.
    void backward(const Tensor& loss);
    void clear();
    std::size_t size() const { return nodes_.size(); }
    const std::vector<Node>& nodes() const { return nodes_; }

private:
    friend class NoGradGuard;
    std::vector<Node> nodes_;
    int enabled_ = 1;
};

class NoGradGuard {
public:
    NoGradGuard() { --Tape::current().enabled_; }
    ~NoGradGuard() { ++Tape::current().enabled_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

void backward(const Tensor& loss);

// Adds `g` into the gradient buffer of `t` if it takes part in differentiation.
void accumulate_grad(const Tensor& t, std::span<const double> g);

}  // namespace fpvt
