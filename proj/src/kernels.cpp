#include "sbc/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "sbc/errors.hpp"

namespace sbc::kernels {

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  // Four output rows share each streamed row of B. Every c[i][j] still
  // accumulates over p in ascending order.
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    const double* a0 = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
      if (v0 == 0.0 && v1 == 0.0 && v2 == 0.0 && v3 == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = brow[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double v = ai[p];
      if (v == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += v * brow[j];
    }
  }
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double v = arow[i];
      if (v == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += v * brow[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, k, n, a, bt.data(), c);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Tensor c({a.dim(0), b.dim(1)});
  gemm_nn(a.dim(0), a.dim(1), b.dim(1), a.data().data(), b.data().data(), c.data().data());
  return c;
}

ConvGeometry conv_geometry(const Shape& x, const Shape& k, std::size_t stride) {
  if (k.size() != 4 || (x.size() != 3 && x.size() != 4)) {
    throw DimensionError("conv2d: expected x [c,h,w] or [n,c,h,w] and k [co,ci,kh,kw], got " + shape_str(x) +
                         " and " + shape_str(k));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  ConvGeometry g;
  const std::size_t off = x.size() == 4 ? 1 : 0;
  g.batch = x.size() == 4 ? x[0] : 1;
  g.c_in = x[off];
  g.h = x[off + 1];
  g.w = x[off + 2];
  g.c_out = k[0];
  g.kh = k[2];
  g.kw = k[3];
  g.stride = stride;
  if (k[1] != g.c_in) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(k[1]) + " input channels, input has " +
                         std::to_string(g.c_in));
  }
  if (g.kh > g.h || g.kw > g.w || g.kh == 0 || g.kw == 0) {
    throw DimensionError("conv2d: kernel " + shape_str(k) + " larger than input " + shape_str(x));
  }
  return g;
}

void im2col(const ConvGeometry& g, const double* image, double* cols) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), npix = oh * ow;
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    const double* plane = image + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj, ++row) {
        double* dst = cols + row * npix;
        for (std::size_t y = 0; y < oh; ++y) {
          const double* src = plane + (y * g.stride + ki) * g.w + kj;
          if (g.stride == 1) {
            std::copy(src, src + ow, dst + y * ow);
          } else {
            for (std::size_t x = 0; x < ow; ++x) dst[y * ow + x] = src[x * g.stride];
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* cols, double* image) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), npix = oh * ow;
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    double* plane = image + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj, ++row) {
        const double* src = cols + row * npix;
        for (std::size_t y = 0; y < oh; ++y) {
          double* dst = plane + (y * g.stride + ki) * g.w + kj;
          for (std::size_t x = 0; x < ow; ++x) dst[x * g.stride] += src[y * ow + x];
        }
      }
    }
  }
}

Tensor conv2d(const Tensor& x, const Tensor& k, std::size_t stride) {
  const ConvGeometry g = conv_geometry(x.shape(), k.shape(), stride);
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const std::size_t krows = g.c_in * g.kh * g.kw, npix = oh * ow;
  Shape out_shape = x.rank() == 4 ? Shape{g.batch, g.c_out, oh, ow} : Shape{g.c_out, oh, ow};
  Tensor out(out_shape);
  std::vector<double> cols(krows * npix);
  const std::size_t in_stride = g.c_in * g.h * g.w, out_stride = g.c_out * npix;
  for (std::size_t n = 0; n < g.batch; ++n) {
    im2col(g, x.data().data() + n * in_stride, cols.data());
    gemm_nn(g.c_out, krows, npix, k.data().data(), cols.data(), out.data().data() + n * out_stride);
  }
  return out;
}

Tensor max_pool2(const Tensor& x, std::vector<std::uint32_t>* argmax) {
  if (x.rank() < 2) throw DimensionError("max_pool2: input needs at least 2 axes");
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  if (h % 2 != 0 || w % 2 != 0) {
    throw DimensionError("max_pool2: spatial dims must be even, got " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = h / 2;
  out_shape[out_shape.size() - 1] = w / 2;
  Tensor out(out_shape);
  if (argmax) argmax->assign(out.size(), 0);
  const std::size_t planes = x.size() / (h * w), oh = h / 2, ow = w / 2;
  const auto& xd = x.values();
  auto& od = out.values();
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        std::size_t best = base + (2 * y) * w + 2 * xx;
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t c : cand)
          if (xd[c] > xd[best]) best = c;
        const std::size_t o = p * oh * ow + y * ow + xx;
        od[o] = xd[best];
        if (argmax) (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  auto& o = out.values();
  const auto& v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) o[i] = v[i] > 0.0 ? v[i] : 0.0;
  return out;
}

double softmax_xent(const Tensor& logits, std::span<const int> labels, Tensor* probs) {
  if (logits.rank() != 2) throw DimensionError("softmax_xent: logits must be [batch×classes]");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw DimensionError("softmax_xent: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  }
  if (probs) *probs = Tensor({batch, classes});
  double total = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    const int label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw IndexError("softmax_xent: label " + std::to_string(label) + " outside [0, " + std::to_string(classes) +
                       ")");
    }
    const double* row = logits.data().data() + r * classes;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(row[c] - mx);
    const double lse = mx + std::log(sum);
    total += lse - row[label];
    if (probs) {
      for (std::size_t c = 0; c < classes; ++c) probs->at(r, c) = std::exp(row[c] - lse);
    }
  }
  return total / static_cast<double>(batch);
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  std::vector<int> out(batch);
  for (std::size_t r = 0; r < batch; ++r) {
    const double* row = logits.data().data() + r * classes;
    out[r] = static_cast<int>(std::max_element(row, row + classes) - row);
  }
  return out;
}

}  // namespace sbc::kernels
