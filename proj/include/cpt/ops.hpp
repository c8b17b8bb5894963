#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "cpt/tensor.hpp"

namespace cpt::ops {

// Elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);

// Reductions to a scalar
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Matrix products on 2-D tensors.
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T
Tensor transpose(const Tensor& a);

/// Adds a length-n vector to every row of an [m,n] matrix.
Tensor add_row(const Tensor& a, const Tensor& bias);

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> ids);
Tensor reshape(const Tensor& a, Shape shape);

/// Numerically stabilized softmax along `axis`. Rejects non-finite input.
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax_rows(const Tensor& x);

/// Row softmax restricted to allowed[r * cols + c]; disallowed entries are
/// exactly zero. A row with nothing allowed becomes all zeros.
Tensor masked_softmax_rows(const Tensor& x, const std::vector<char>& allowed);

/// Normalizes over the last dimension, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Inverted dropout. p == 0 returns the input unchanged.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

struct LossResult {
  Tensor value;           // scalar
  std::size_t counted = 0;  // targets that contributed
  bool degenerate() const { return counted == 0; }
};

enum class Reduction { mean, sum };

/// Negative log-likelihood of `targets` under row-wise softmax of `logits`.
/// A target equal to the number of classes (logits.cols()) is ignored.
/// When every target is ignored the loss is a constant zero and
/// `degenerate()` is true.
LossResult cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                         Reduction reduction = Reduction::mean);

}  // namespace cpt::ops
