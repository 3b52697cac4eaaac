#pragma once

#include "phydi/tensor.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace phydi {

// Elementwise, identical shapes only.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

/// x * alpha for a single-element alpha; the only broadcast the core allows.
Tensor scale(const Tensor& x, const Tensor& alpha);
Tensor mul_scalar(const Tensor& x, double c);

/// Adds a vector along the last axis.
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// Adds one value per channel of an N x C x H x W tensor.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Batched product of B x m x k and B x k x p.
Tensor bmm(const Tensor& a, const Tensor& b);
/// Swaps the last two axes of a rank-3 tensor.
Tensor transpose_last(const Tensor& a);
Tensor reshape(const Tensor& x, Shape shape);

Tensor relu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor softmax(const Tensor& x, std::size_t axis);

/// Sets entries above the diagonal of each trailing T x T block to -1e30.
Tensor causal_mask(const Tensor& scores);

/// Mean token cross-entropy of N x V logits against class indices.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Kronecker product of two matrices.
Tensor kron(const Tensor& a, const Tensor& b);

/// Cross-correlation of N x C x H x W input with O x C x k x k filters.
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding);

Tensor global_avg_pool(const Tensor& x);
/// Zero-pads the channel axis of an N x C x H x W tensor up to `channels`.
Tensor pad_channels(const Tensor& x, std::size_t channels);
/// Keeps the first `count` entries of the last axis.
Tensor slice_last(const Tensor& x, std::size_t count);

/// Row lookup into a V x d table; result is ids.size() x d.
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);

/// B x T x d  ->  (B*heads) x T x (d/heads), and back.
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x, std::size_t heads);

}  // namespace phydi
