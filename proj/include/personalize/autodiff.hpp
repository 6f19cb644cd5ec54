#pragma once

#include <functional>
#include <vector>

#include "personalize/tensor.hpp"

namespace personalize::ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
    int id = -1;
    Tape* tape = nullptr;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& value() const;
    const Tensor& grad() const;
};

// Reverse-mode tape over Tensors. Ops record a backward closure when
// grad_enabled; backward() walks nodes in reverse creation order, which is a
// valid topological order by construction. Construction order is fixed by the
// caller, so gradient accumulation order (and hence floating point results)
// is deterministic.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }
    size_t node_count() const { return nodes_.size(); }

    Var constant(Tensor v);
    Var leaf(Tensor v);  // differentiable input (learnable parameter)

    // --- elementwise ---
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var square(Var a);
    Var scale(Var a, double c);
    Var add_const(Var a, double c);
    Var silu(Var a);

    // --- shape ---
    Var reshape(Var a, std::vector<int> shape);
    Var transpose2d(Var a);
    Var concat_rows(const std::vector<Var>& rows);  // n vectors (d) -> (n,d)
    Var row(Var a, int r);                          // (n,d) -> (d)

    // --- linear algebra ---
    Var matmul(Var a, Var b);     // (m,k) x (k,n) -> (m,n)
    Var matmul_nt(Var a, Var b);  // (m,k) x (n,k) -> (m,n), i.e. a * b^T
    Var softmax_rows(Var a);      // rowwise softmax of (m,n)
    Var dot(Var a, Var b);        // vectors -> scalar
    Var normalize(Var a);         // vector -> unit vector

    // --- convolution (3x3, same padding) ---
    Var conv2d(Var x, Var w, Var b);  // (Cin,H,W),(Cout,Cin,3,3),(Cout) -> (Cout,H,W)
    Var add_channel_bias(Var x, Var b);

    // --- reductions & scalars ---
    Var sum(Var a);
    Var mean(Var a);
    Var mul_mask(Var a, const Mask& mask);  // (C,H,W) or (H,W); broadcasts over channels
    Var stack_scalars(const std::vector<Var>& xs);
    Var logsumexp(Var v);  // vector -> scalar, numerically stable
    Var add_scalars(const std::vector<Var>& xs);

    // Seeds d(root)/d(root)=1 and accumulates grads for every differentiable
    // ancestor. root must be scalar.
    void backward(Var root);

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    const Tensor& grad(Var v) const;
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

private:
    struct Node {
        Tensor value;
        bool requires_grad = false;
        std::function<void(Tape&)> back;  // empty for constants/leaves
    };

    Var emit(Tensor value, bool requires_grad, std::function<void(Tape&)> back);
    void accumulate(int id, const Tensor& g);
    Tensor& grad_buffer(int id);

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    bool grad_enabled_;
};

// Central finite difference of f at x, perturbing one flat element.
double finite_difference(const std::function<double(const Tensor&)>& f, const Tensor& x,
                         int64_t flat_index, double step = 1e-5);

}  // namespace personalize::ad
