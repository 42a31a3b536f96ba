#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace moelab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// One executed operation (or a leaf). Parents are the operands the value was
// computed from; backward_fn reads this node's grad and accumulates into the
// parents' grads.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    const char* op = "leaf";

    bool is_leaf() const { return !backward_fn; }
    std::vector<double>& ensure_grad();
};

// Dense row-major array of 64-bit reals with an optional gradient slot.
//
// A Tensor is a shared handle: copies alias the same storage. Operations in
// ops.hpp produce new tensors and, when any operand requires a gradient and
// recording is enabled, link the result into the autodiff graph.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    // 2-D from nested rows; rows must be equal length.
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad = false);
    static Tensor row(std::vector<double> values, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    // Leading extent; 1 for scalars.
    std::size_t rows() const;
    // Trailing extent; 1 for scalars.
    std::size_t cols() const;

    std::span<const double> data() const { return node_->data; }
    // Direct write access, for optimizer updates and test fixtures. Must not be
    // used on a tensor whose graph is still awaiting backward().
    std::span<double> mutable_data() { return node_->data; }
    double item() const;
    double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on);
    bool has_grad() const { return !node_->grad.empty(); }
    // Zeros when no gradient has been accumulated yet.
    std::vector<double> grad() const;
    std::span<double> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad();

    // Reverse pass from this scalar. Interior nodes are reset first; leaf
    // gradients accumulate across calls.
    void backward() const;

    // Same values, cut from the graph, no gradient.
    Tensor detach() const;
    Tensor clone() const;

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

// Nodes reachable from root, every node after all of its parents.
std::vector<Node*> topological_order(const Tensor& root);

// Whether newly created op results record graph edges on this thread.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

}  // namespace moelab
