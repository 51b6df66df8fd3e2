#pragma once

#include "attnflow/linalg.hpp"
#include "attnflow/tape.hpp"
#include "attnflow/tensor.hpp"

namespace attnflow {

// Pointwise operation kinds. Binary kinds accept an equal-shaped tensor, a
// one-element tensor (scalar broadcast), or a plain double on the right.
enum class EwKind { Add, Sub, Mul, Div, Exp, Log, Sigmoid, Softplus, Negate };

Tensor elementwise(EwKind k, const Tensor& a, const Tensor& b);
Tensor elementwise(EwKind k, const Tensor& a, double b);
Tensor elementwise(EwKind k, const Tensor& a);

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Add, a, b); }
inline Tensor add(const Tensor& a, double b) { return elementwise(EwKind::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Sub, a, b); }
inline Tensor sub(const Tensor& a, double b) { return elementwise(EwKind::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Mul, a, b); }
inline Tensor mul(const Tensor& a, double b) { return elementwise(EwKind::Mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Div, a, b); }
inline Tensor div(const Tensor& a, double b) { return elementwise(EwKind::Div, a, b); }
inline Tensor exp(const Tensor& a) { return elementwise(EwKind::Exp, a); }
inline Tensor log(const Tensor& a) { return elementwise(EwKind::Log, a); }
inline Tensor sigmoid(const Tensor& a) { return elementwise(EwKind::Sigmoid, a); }
inline Tensor softplus(const Tensor& a) { return elementwise(EwKind::Softplus, a); }
inline Tensor neg(const Tensor& a) { return elementwise(EwKind::Negate, a); }

// scalar-on-the-left forms
Tensor sub(double a, const Tensor& b);
Tensor div(double a, const Tensor& b);

// log(sigmoid(x)) as -softplus(-x); stable for large negative x.
inline Tensor log_sigmoid(const Tensor& x) { return neg(softplus(neg(x))); }

// bound * tanh(x), composed from sigmoid: tanh(x) = 2*sigmoid(2x) - 1.
inline Tensor scaled_tanh(const Tensor& x, double bound) {
    return sub(mul(sigmoid(mul(x, 2.0)), 2.0 * bound), bound);
}

// logit(p) = log p - log(1-p)
inline Tensor logit(const Tensor& p) { return sub(log(p), log(sub(1.0, p))); }

// Per-position channel mixing: y[b,:,i,j] = W x[b,:,i,j] (+ bias).
// Weight shape (1,1,C_out,C_in); bias shape (1,C_out,1,1).
Tensor conv1x1(const Tensor& x, const Tensor& weight, const Tensor* bias = nullptr);
Tensor conv1x1(const Tensor& x, const SquareMatrix& weight);

// 3x3 same-padded convolution; weight shape (C_out,C_in,3,3), bias (1,C_out,1,1).
Tensor conv3x3(const Tensor& x, const Tensor& weight, const Tensor* bias = nullptr);

// out[b,0,i,j] = mean over channels of x[b,:,i,j].
Tensor channel_mean(const Tensor& x);

// y[b,c,i,j] = scale[c] * x[b,c,i,j] + bias[c]; scale/bias shape (1,C,1,1).
Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& bias);

Tensor channel_slice(const Tensor& x, std::int64_t c0, std::int64_t c1);
Tensor channel_concat(const Tensor& a, const Tensor& b);

// y[b,c,i,j] = s[b,0,i,j] * x[b,c,i,j]; a per-position scale shared by channels.
Tensor spatial_scale(const Tensor& x, const Tensor& s);

// Repeats a batch-1 tensor B times along the batch axis.
Tensor broadcast_batch(const Tensor& x, std::int64_t batch);

// Matrix product on (B,1,m,n)-shaped tensors; a batch-1 operand broadcasts.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
              bool transpose_b = false);

// Softmax over the last axis of a (B,1,m,n) tensor.
Tensor row_softmax(const Tensor& x);

// log|det| of each (m,m) block of a (B,1,m,m) tensor -> (B,1,1,1).
// Backward uses d log|det W| / dW = (W^-1)^T.
Tensor logabsdet_batched(const Tensor& w);

Tensor sum_all(const Tensor& x);             // -> (1,1,1,1)
Tensor sum_per_sample(const Tensor& x);      // -> (B,1,1,1)

// 2x2 space-to-channel rearrangement: (B,C,H,W) -> (B,4C,H/2,W/2) and back.
Tensor squeeze2x2(const Tensor& x);
Tensor unsqueeze2x2(const Tensor& x);

// Embeds a (1,1,1,C) vector on the diagonal of a (1,1,C,C) matrix.
Tensor diag_embed(const Tensor& v);

// Copy with no tape linkage.
Tensor detach(const Tensor& x);

}  // namespace attnflow
