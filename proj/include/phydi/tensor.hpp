#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace phydi {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {
struct Node;
using NodePtr = std::shared_ptr<Node>;
}  // namespace detail

/// Gives a backward rule write access to the gradient buffers of the op's
/// inputs. Buffers are allocated (zero-filled) on first access; rules add
/// into them so that tensors used more than once accumulate.
class GradSinks {
public:
    explicit GradSinks(std::span<const detail::NodePtr> inputs) : inputs_(inputs) {}

    bool wants(std::size_t i) const;
    std::span<double> operator[](std::size_t i) const;
    std::span<const double> input(std::size_t i) const;
    const Shape& input_shape(std::size_t i) const;
    std::size_t size() const { return inputs_.size(); }

private:
    std::span<const detail::NodePtr> inputs_;
};

using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<const double> out_value,
                                      const GradSinks& sinks)>;

/// Dense row-major f64 tensor with optional participation in reverse-mode
/// differentiation. Copies share the underlying node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    /// Records an op result. The backward rule is kept only when grad mode is
    /// on and some input requires grad; otherwise the result is a constant.
    static Tensor make_op(std::string op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> inputs, BackwardFn backward);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    /// In-place access for parameter initialisation and optimiser updates.
    /// Only leaves may be mutated.
    std::span<double> mutable_data();
    double item() const;

    bool requires_grad() const;
    bool is_leaf() const;
    const std::string& op() const;

    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    /// Reverse sweep from this scalar. Leaf gradients accumulate across calls.
    void backward() const;

    /// Same values, cut from the graph.
    Tensor detach() const;

    bool same_node(const Tensor& other) const { return node_ == other.node_; }
    /// Address identifying the underlying node; stable for the node's lifetime.
    const void* identity() const { return node_.get(); }

private:
    explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
    friend class Tape;

    detail::NodePtr node_;
};

/// Ordered record of the ops reachable from a root. Inputs always precede
/// the ops that consume them; each node appears once.
class Tape {
public:
    static Tape from(const Tensor& root);

    std::size_t size() const { return nodes_.size(); }
    std::vector<std::string> op_names() const;
    bool topologically_ordered() const;

private:
    friend class Tensor;
    std::vector<detail::Node*> nodes_;
};

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

}  // namespace phydi
