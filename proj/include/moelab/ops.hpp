#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "moelab/tensor.hpp"

// Differentiable tensor operations. Tensors are treated as 2-D (rows x cols)
// unless noted; 1-D tensors behave as a single row. The only broadcast is
// along the leading axis: a 1 x C operand may be combined with an R x C one.
namespace moelab::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise. b must match a's shape or be a single row of a's width.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation

// axis 1 (default) normalizes each row, axis 0 each column. -inf entries
// map to exactly 0; a slice without a finite entry is an error.
Tensor softmax(const Tensor& a, std::size_t axis = 1);
Tensor log_softmax(const Tensor& a);  // along rows

Tensor sum(const Tensor& a);   // scalar
Tensor mean(const Tensor& a);  // scalar
Tensor sum_rows(const Tensor& a);  // 1 x C column totals

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);
// Rows of src added into a zero R x C tensor at the given row positions.
Tensor scatter_rows(const Tensor& src, std::span<const std::size_t> index, std::size_t out_rows);
// Column vector (len x 1) of a[index[i], column].
Tensor select_column(const Tensor& a, std::span<const std::size_t> index, std::size_t column);
// Multiply row i of a by w[i]; w is R x 1.
Tensor scale_rows(const Tensor& a, const Tensor& w);
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Fused multi-head causal self-attention over `batch` right-padded
// sequences of `seq` rows each. q, k, v are (batch*seq) x d_model.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t batch, std::size_t seq, std::size_t heads);

// Mean over rows with mask[r] set of -log softmax(logits[r])[target[r]].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask);

// Mean over rows with mask[r] set of sum_v exp(lp[r,v]) * (lp[r,v] - lq[r,v]),
// i.e. KL(p || q) given log-probabilities. Terms with p == 0 contribute 0.
// Differentiable in both arguments.
Tensor kl_rows(const Tensor& log_p, const Tensor& log_q, std::span<const std::uint8_t> mask);

// Squared coefficient of variation of all entries: population variance over
// max(mean, 1e-10)^2.
Tensor cv_squared(const Tensor& v);

inline constexpr double kCvMeanFloor = 1e-10;

}  // namespace moelab::ops
