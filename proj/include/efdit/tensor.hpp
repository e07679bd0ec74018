#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "efdit/errors.hpp"
#include "efdit/rng.hpp"

namespace efdit {

class GradTape;

// Dense row-major tensor of 64-bit reals. A tensor is a plain value unless
// it carries a (tape, node) pair, in which case arithmetic on it records
// nodes for reverse-mode differentiation on that tape.
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<double> data;
    GradTape* tape = nullptr;
    std::int64_t node = -1;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> s);
    Tensor(std::vector<std::int64_t> s, std::vector<double> d);

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    bool tracked() const { return tape != nullptr; }
    bool is_scalar() const { return numel() == 1; }
    double scalar() const;

    double& at(std::initializer_list<std::int64_t> idx);
    double at(std::initializer_list<std::int64_t> idx) const;

    // Detached value copy (drops tape association).
    Tensor detached() const;

    static Tensor zeros(std::vector<std::int64_t> s);
    static Tensor ones(std::vector<std::int64_t> s);
    static Tensor full(std::vector<std::int64_t> s, double v);
    static Tensor scalar_of(double v);
    static Tensor randn(std::vector<std::int64_t> s, Rng& rng);
    static Tensor uniform(std::vector<std::int64_t> s, double lo, double hi, Rng& rng);
};

std::string shape_str(const std::vector<std::int64_t>& s);
std::int64_t numel_of(const std::vector<std::int64_t>& s);

// Reverse-mode tape. Nodes are appended in execution order; backward walks
// them once in reverse. Each node's pull closure receives the node's output
// gradient and accumulates into its inputs' buffers via grad_buffer().
class GradTape {
public:
    using PullFn = std::function<void(const std::vector<double>& out_grad, GradTape& tape)>;

    // Registers a leaf and returns a tracked copy of t.
    Tensor watch(const Tensor& t);

    // Records a node; returns its handle. Inputs must belong to this tape.
    std::int64_t push(const char* tag, std::vector<std::int64_t> input_nodes,
                      std::int64_t out_numel, PullFn pull);

    // Generic custom differentiable op: wraps an externally computed value.
    Tensor track_custom(const char* tag, const std::vector<const Tensor*>& inputs,
                        Tensor value, PullFn pull);

    void backward(const Tensor& loss);

    // Gradient buffer for a node, created zero-filled on first use.
    std::vector<double>& grad_buffer(std::int64_t node);

    // Gradient of a watched (or any tracked) tensor after backward();
    // zeros if the node was never touched.
    Tensor grad(const Tensor& t) const;

    std::size_t size() const { return nodes_.size(); }
    bool backward_done() const { return backward_done_; }

private:
    struct Node {
        const char* tag;
        std::vector<std::int64_t> inputs;
        std::int64_t numel;
        PullFn pull;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    bool backward_done_ = false;
};

// ---- differentiable operations ------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax(const Tensor& x, int axis);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor scale(const Tensor& x, double s);
Tensor silu(const Tensor& x);

enum class Reduce { mean, sum, max };
Tensor reduce(Reduce op, const Tensor& x, int axis);
Tensor reduce_all(Reduce op, const Tensor& x);  // rank-0 result

Tensor reshape(const Tensor& x, std::vector<std::int64_t> new_shape);
Tensor transpose(const Tensor& x, int axis_a = -2, int axis_b = -1);

// Row-level plumbing for batched models (x is rank 2 unless noted).
Tensor take_rows(const Tensor& x, const std::vector<int>& rows);
Tensor slice_cols(const Tensor& x, std::int64_t start, std::int64_t len);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor repeat_rows(const Tensor& x, std::int64_t times);  // each row repeated consecutively
Tensor scatter_rows_replace(const Tensor& base, const std::vector<int>& rows, const Tensor& repl);
Tensor scale_rows(const Tensor& x, const std::vector<double>& per_row);  // constant coefficients

Tensor mse(const Tensor& pred, const Tensor& target);  // mean squared error, rank-0
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Populates gradients on the tape of `loss`. Mirrors tape->backward(loss).
void backward(const Tensor& loss);

}  // namespace efdit
