#pragma once

// Graph-free numeric kernels. Every reduction accumulates in ascending
// row-major index order so results equal a naive loop bit for bit.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "sbc/tensor.hpp"

namespace sbc::kernels {

/// C[m×n] += A[m×k] · B[k×n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
/// C[m×n] += A[k×m]ᵀ · B[k×n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
/// C[m×n] += A[m×k] · B[n×k]ᵀ
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);

Tensor matmul(const Tensor& a, const Tensor& b);

struct ConvGeometry {
  std::size_t batch = 1, c_in = 0, h = 0, w = 0;
  std::size_t c_out = 0, kh = 0, kw = 0, stride = 1;
  std::size_t out_h() const { return (h - kh) / stride + 1; }
  std::size_t out_w() const { return (w - kw) / stride + 1; }
};

/// Validates shapes; x is [c×h×w] or [n×c×h×w], k is [c_out×c_in×kh×kw].
ConvGeometry conv_geometry(const Shape& x, const Shape& k, std::size_t stride);

/// Unfolds one image [c×h×w] into columns [(c·kh·kw) × (h'·w')].
void im2col(const ConvGeometry& g, const double* image, double* cols);
/// Adjoint of im2col: scatters columns back into an image gradient (accumulating).
void col2im(const ConvGeometry& g, const double* cols, double* image);

/// Valid cross-correlation. Output keeps the input's rank.
Tensor conv2d(const Tensor& x, const Tensor& k, std::size_t stride);

/// 2×2 non-overlapping max pooling over the last two axes. `argmax` (optional)
/// receives, per output element, the flat input index of the selected maximum.
Tensor max_pool2(const Tensor& x, std::vector<std::uint32_t>* argmax = nullptr);

Tensor relu(const Tensor& x);

/// Mean negative log-likelihood of integer labels under softmax(logits).
/// `probs` (optional) receives the row-wise softmax.
double softmax_xent(const Tensor& logits, std::span<const int> labels, Tensor* probs = nullptr);

/// Row-wise argmax of a [batch×classes] matrix.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace sbc::kernels
