#ifndef NRSEG_AUTODIFF_HPP
#define NRSEG_AUTODIFF_HPP

#include <functional>
#include <memory>
#include <vector>

#include "nrseg/tensor.hpp"

namespace nrseg::ad {

class Node;
using Var = std::shared_ptr<Node>;

// One node of a dynamically built computation graph. Graphs are rebuilt per
// forward pass; backward() walks nodes in reverse creation order, which is a
// valid reverse-topological order because parents are always created first.
class Node {
public:
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;
    int64_t seq = 0;

    void ensure_grad() {
        if (grad.numel() != value.numel()) grad = Tensor::zeros(value.shape());
    }
};

Var constant(Tensor t);
Var parameter(Tensor t);

// Elementwise (same-shape) arithmetic.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var neg(const Var& a);

// Elementwise nonlinearities.
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var log_op(const Var& a);
Var exp_op(const Var& a);
Var abs_op(const Var& a);
Var lgamma_op(const Var& a);
Var digamma_op(const Var& a);

// Reductions and channel plumbing for CHW tensors.
Var sum(const Var& a);
Var mean(const Var& a);
Var channel_sum(const Var& a);                       // [C,H,W] -> [1,H,W]
Var repeat_channel(const Var& a, int c);             // [1,H,W] -> [C,H,W]
Var gather_channels(const Var& a, const std::vector<int>& idx);
Var concat_channels(const Var& a, const Var& b);

// y = W x for a fixed sparse W; used for IPM sampling, bilinear upsampling
// and other fixed resamplings that must stay differentiable in x.
struct SparseLinear {
    std::vector<int64_t> row_offsets;  // out_numel + 1
    std::vector<int64_t> col_idx;
    std::vector<double> weights;
    int64_t in_numel = 0;
    std::vector<int> out_shape;
};
Var linear_map(const Var& x, std::shared_ptr<const SparseLinear> m);

// x: [C,H,W], w: [O,C,kh,kw], b: [O]; zero padding.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

// Per-channel spatial standardization: (x - mean_c) / sqrt(var_c + eps).
Var instance_norm(const Var& x, double eps = 1e-5);

Var detach(const Var& a);

// Accumulates gradients of every reachable requires_grad node; root must be
// scalar. Gradients are added, not overwritten; zero them between steps.
void backward(const Var& root);

inline double scalar_value(const Var& v) { return v->value[0]; }

}  // namespace nrseg::ad

#endif  // NRSEG_AUTODIFF_HPP
