#pragma once

#include <span>
#include <vector>

#include "phd/core/autograd.hpp"

// Differentiable primitives. Every op records its backward closure through
// make_node, and skips work for parents that do not require gradients.
namespace phd::ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, Real s);

// x [N,C,H,W] plus v [N,C] broadcast over the spatial extent.
Var add_channel(const Var& x, const Var& v);

// x [N,C,H,W], w [O,C,k,k], b [O] or null.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, Real eps = Real(1e-5));
Var silu(const Var& x);

// Affine map over the last axis: x [..., in], w [out, in], b [out] or null.
Var linear(const Var& x, const Var& w, const Var& b);

Var upsample2x(const Var& x);
Var concat_channels(const Var& a, const Var& b);

// [N,C,H,W] <-> [N,H*W,C]
Var to_tokens(const Var& x);
Var from_tokens(const Var& x, int height, int width);

// Batched matmul: a [N,M,K] times b [N,K,P], or b [N,P,K] transposed.
Var bmm(const Var& a, const Var& b, bool transpose_b);
Var softmax_last(const Var& x);

// Rows of table [V,D] selected by index -> [rows.size(), D].
Var gather_rows(const Var& table, std::span<const int> rows);

// Concatenates along axis 0. All items share trailing extents.
Var concat0(const std::vector<Var>& items);
Var reshape(const Var& x, Shape shape);

Var global_avg_pool(const Var& x);
Var l2_normalize_rows(const Var& x, Real eps = Real(1e-8));

// Mean squared error against a constant target; returns a scalar node.
Var mse(const Var& pred, const Tensor& target);

// Mean softmax cross-entropy of logits [N,M] against integer labels.
Var cross_entropy(const Var& logits, std::span<const int> labels);

}  // namespace phd::ops
