#include "sbc/graph.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sbc/errors.hpp"
#include "sbc/kernels.hpp"

namespace sbc {

Var Graph::param(Tensor& t) {
  Node n;
  n.external = &t;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::constant(Tensor t) {
  Node n;
  n.value = std::move(t);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::record(std::vector<Var> inputs, ForwardFn forward, BackwardFn backward) {
  Node n;
  std::vector<const Tensor*> in;
  in.reserve(inputs.size());
  for (Var v : inputs) {
    n.inputs.push_back(v.id);
    in.push_back(&value(v));
    n.requires_grad = n.requires_grad || nodes_.at(v.id).requires_grad;
  }
  n.value = forward(in);
  n.forward = std::move(forward);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Tensor& Graph::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.external ? *n.external : n.value;
}

std::span<const double> Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.external) return n.external->grad();
  return n.grad;
}

double Graph::replay_deviation() const {
  double worst = 0.0;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (!n.forward) continue;
    std::vector<const Tensor*> in;
    for (std::size_t i : n.inputs) in.push_back(&value(Var{i}));
    const Tensor again = n.forward(in);
    if (again.shape() != n.value.shape()) return std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < again.size(); ++i) {
      worst = std::max(worst, std::abs(again[i] - n.value[i]));
      if (std::isnan(again[i]) != std::isnan(n.value[i])) return std::numeric_limits<double>::infinity();
    }
  }
  return worst;
}

void Graph::backward(Var loss) {
  Node& root = nodes_.at(loss.id);
  if (value(loss).size() != 1) {
    throw ContractError("gradients: loss must be a scalar, got shape " + shape_str(value(loss).shape()));
  }
  for (Node& n : nodes_) {
    n.grad.clear();
    if (n.external) n.external->zero_grad();
  }
  if (!root.requires_grad) return;
  if (root.external) {
    root.external->grad()[0] = 1.0;
    return;
  }
  root.grad.assign(1, 1.0);

  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.empty() || !n.requires_grad) continue;
    std::vector<const Tensor*> in;
    std::vector<double*> in_grads;
    for (std::size_t i : n.inputs) {
      Node& src = nodes_[i];
      in.push_back(&value(Var{i}));
      if (!src.requires_grad) {
        in_grads.push_back(nullptr);
      } else if (src.external) {
        in_grads.push_back(src.external->grad().data());
      } else {
        if (src.grad.empty()) src.grad.assign(src.value.size(), 0.0);
        in_grads.push_back(src.grad.data());
      }
    }
    n.backward(in, n.value, n.grad, in_grads);
    if (!n.external) {
      n.grad.clear();
      n.grad.shrink_to_fit();
    }
  }
}

void gradients(Graph& g, Var loss) { g.backward(loss); }

namespace {

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) throw DimensionError(std::string(op) + ": axis out of range for " + shape_str(s));
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
}

}  // namespace

Var matmul(Graph& g, Var a, Var b) {
  return g.record(
      {a, b}, [](Graph::Inputs in) { return kernels::matmul(*in[0], *in[1]); },
      [](Graph::Inputs in, const Tensor&, std::span<const double> dc, std::span<double* const> d) {
        const Tensor& A = *in[0];
        const Tensor& B = *in[1];
        const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
        if (d[0]) kernels::gemm_nt(m, n, k, dc.data(), B.data().data(), d[0]);
        if (d[1]) kernels::gemm_tn(k, m, n, A.data().data(), dc.data(), d[1]);
      });
}

Var conv2d(Graph& g, Var x, Var k, std::size_t stride) {
  return g.record(
      {x, k}, [stride](Graph::Inputs in) { return kernels::conv2d(*in[0], *in[1], stride); },
      [stride](Graph::Inputs in, const Tensor&, std::span<const double> dout, std::span<double* const> d) {
        const Tensor& X = *in[0];
        const Tensor& K = *in[1];
        const kernels::ConvGeometry geo = kernels::conv_geometry(X.shape(), K.shape(), stride);
        const std::size_t npix = geo.out_h() * geo.out_w(), krows = geo.c_in * geo.kh * geo.kw;
        const std::size_t in_stride = geo.c_in * geo.h * geo.w, out_stride = geo.c_out * npix;
        std::vector<double> cols(krows * npix), dcols;
        if (d[0]) dcols.resize(krows * npix);
        for (std::size_t n = 0; n < geo.batch; ++n) {
          const double* dn = dout.data() + n * out_stride;
          if (d[1]) {
            kernels::im2col(geo, X.data().data() + n * in_stride, cols.data());
            kernels::gemm_nt(geo.c_out, npix, krows, dn, cols.data(), d[1]);
          }
          if (d[0]) {
            std::fill(dcols.begin(), dcols.end(), 0.0);
            kernels::gemm_tn(krows, geo.c_out, npix, K.data().data(), dn, dcols.data());
            kernels::col2im(geo, dcols.data(), d[0] + n * in_stride);
          }
        }
      });
}

Var max_pool2(Graph& g, Var x) {
  return g.record(
      {x}, [](Graph::Inputs in) { return kernels::max_pool2(*in[0]); },
      [](Graph::Inputs in, const Tensor&, std::span<const double> dout, std::span<double* const> d) {
        if (!d[0]) return;
        std::vector<std::uint32_t> arg;
        kernels::max_pool2(*in[0], &arg);
        for (std::size_t i = 0; i < arg.size(); ++i) d[0][arg[i]] += dout[i];
      });
}

Var relu(Graph& g, Var x) {
  return g.record(
      {x}, [](Graph::Inputs in) { return kernels::relu(*in[0]); },
      [](Graph::Inputs in, const Tensor&, std::span<const double> dout, std::span<double* const> d) {
        if (!d[0]) return;
        const auto& v = in[0]->values();
        for (std::size_t i = 0; i < v.size(); ++i)
          if (v[i] > 0.0) d[0][i] += dout[i];
      });
}

Var softmax_xent(Graph& g, Var logits, std::span<const int> labels) {
  std::vector<int> lab(labels.begin(), labels.end());
  return g.record(
      {logits}, [lab](Graph::Inputs in) { return Tensor::scalar(kernels::softmax_xent(*in[0], lab)); },
      [lab](Graph::Inputs in, const Tensor&, std::span<const double> dout, std::span<double* const> d) {
        if (!d[0]) return;
        Tensor probs;
        kernels::softmax_xent(*in[0], lab, &probs);
        const std::size_t batch = probs.dim(0), classes = probs.dim(1);
        const double s = dout[0] / static_cast<double>(batch);
        for (std::size_t r = 0; r < batch; ++r) {
          for (std::size_t c = 0; c < classes; ++c) {
            const double y = static_cast<int>(c) == lab[r] ? 1.0 : 0.0;
            d[0][r * classes + c] += s * (probs.at(r, c) - y);
          }
        }
      });
}

Var add(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "add");
  return g.record(
      {a, b},
      [](Graph::Inputs in) {
        Tensor out = *in[0];
        const auto& bv = in[1]->values();
        auto& o = out.values();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
        return out;
      },
      [](Graph::Inputs, const Tensor&, std::span<const double> dout, std::span<double* const> d) {
        for (double* dp : d)
          if (dp)
            for (std::size_t i = 0; i < dout.size(); ++i) dp[i] += dout[i];
      });
}

Var mul(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "mul");
  return g.record(
      {a, b},
      [](Graph::Inputs in) {
        Tensor out = *in[0];
        const auto& bv = in[1]->values();
        auto& o = out.values();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
        return out;
      },
      [](Graph::Inputs in, const Tensor&, std::span<const double> dout, std::span<double* const> d) {
        const auto& av = in[0]->values();
        const auto& bv = in[1]->values();
        if (d[0])
          for (std::size_t i = 0; i < dout.size(); ++i) d[0][i] += dout[i] * bv[i];
        if (d[1])
          for (std::size_t i = 0; i < dout.size(); ++i) d[1][i] += dout[i] * av[i];
      });
}

Var scale(Graph& g, Var a, double s) {
  return g.record(
      {a},
      [s](Graph::Inputs in) {
        Tensor out = *in[0];
        for (double& v : out.values()) v *= s;
        return out;
      },
      [s](Graph::Inputs, const Tensor&, std::span<const double> dout, std::span<double* const> d) {
        if (d[0])
          for (std::size_t i = 0; i < dout.size(); ++i) d[0][i] += s * dout[i];
      });
}

Var add_scalar(Graph& g, Var a, double s) {
  return g.record(
      {a},
      [s](Graph::Inputs in) {
        Tensor out = *in[0];
        for (double& v : out.values()) v += s;
        return out;
      },
      [](Graph::Inputs, const Tensor&, std::span<const double> dout, std::span<double* const> d) {
        if (d[0])
          for (std::size_t i = 0; i < dout.size(); ++i) d[0][i] += dout[i];
      });
}

Var exp(Graph& g, Var a) {
  return g.record(
      {a},
      [](Graph::Inputs in) {
        Tensor out = *in[0];
        for (double& v : out.values()) v = std::exp(v);
        return out;
      },
      [](Graph::Inputs, const Tensor& out, std::span<const double> dout, std::span<double* const> d) {
        if (d[0])
          for (std::size_t i = 0; i < dout.size(); ++i) d[0][i] += dout[i] * out[i];
      });
}

Var square(Graph& g, Var a) {
  return g.record(
      {a},
      [](Graph::Inputs in) {
        Tensor out = *in[0];
        for (double& v : out.values()) v *= v;
        return out;
      },
      [](Graph::Inputs in, const Tensor&, std::span<const double> dout, std::span<double* const> d) {
        const auto& av = in[0]->values();
        if (d[0])
          for (std::size_t i = 0; i < dout.size(); ++i) d[0][i] += 2.0 * av[i] * dout[i];
      });
}

Var sum(Graph& g, Var a) {
  return g.record(
      {a},
      [](Graph::Inputs in) {
        double s = 0.0;
        for (double v : in[0]->values()) s += v;
        return Tensor::scalar(s);
      },
      [](Graph::Inputs in, const Tensor&, std::span<const double> dout, std::span<double* const> d) {
        if (d[0])
          for (std::size_t i = 0; i < in[0]->size(); ++i) d[0][i] += dout[0];
      });
}

Var add_along(Graph& g, Var x, Var b, std::size_t axis) {
  const AxisSplit s = split_axis(g.value(x).shape(), axis, "add_along");
  if (g.value(b).size() != s.len) throw DimensionError("add_along: bias length does not match axis");
  return g.record(
      {x, b},
      [s](Graph::Inputs in) {
        Tensor out = *in[0];
        const auto& bv = in[1]->values();
        auto& o = out.values();
        for (std::size_t a = 0; a < s.outer; ++a)
          for (std::size_t c = 0; c < s.len; ++c) {
            double* p = o.data() + (a * s.len + c) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) p[i] += bv[c];
          }
        return out;
      },
      [s](Graph::Inputs, const Tensor&, std::span<const double> dout, std::span<double* const> d) {
        if (d[0])
          for (std::size_t i = 0; i < dout.size(); ++i) d[0][i] += dout[i];
        if (d[1])
          for (std::size_t a = 0; a < s.outer; ++a)
            for (std::size_t c = 0; c < s.len; ++c) {
              const double* p = dout.data() + (a * s.len + c) * s.inner;
              double acc = 0.0;
              for (std::size_t i = 0; i < s.inner; ++i) acc += p[i];
              d[1][c] += acc;
            }
      });
}

Var scale_along(Graph& g, Var x, Var sv, std::size_t axis) {
  const AxisSplit s = split_axis(g.value(x).shape(), axis, "scale_along");
  if (g.value(sv).size() != s.len) throw DimensionError("scale_along: scale length does not match axis");
  return g.record(
      {x, sv},
      [s](Graph::Inputs in) {
        Tensor out = *in[0];
        const auto& f = in[1]->values();
        auto& o = out.values();
        for (std::size_t a = 0; a < s.outer; ++a)
          for (std::size_t c = 0; c < s.len; ++c) {
            double* p = o.data() + (a * s.len + c) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) p[i] *= f[c];
          }
        return out;
      },
      [s](Graph::Inputs in, const Tensor&, std::span<const double> dout, std::span<double* const> d) {
        const auto& xv = in[0]->values();
        const auto& f = in[1]->values();
        for (std::size_t a = 0; a < s.outer; ++a)
          for (std::size_t c = 0; c < s.len; ++c) {
            const std::size_t base = (a * s.len + c) * s.inner;
            double acc = 0.0;
            for (std::size_t i = 0; i < s.inner; ++i) {
              if (d[0]) d[0][base + i] += dout[base + i] * f[c];
              acc += dout[base + i] * xv[base + i];
            }
            if (d[1]) d[1][c] += acc;
          }
      });
}

Var reshape(Graph& g, Var x, Shape shape) {
  if (shape_numel(shape) != g.value(x).size()) {
    throw DimensionError("reshape: " + shape_str(g.value(x).shape()) + " to " + shape_str(shape));
  }
  return g.record(
      {x}, [shape](Graph::Inputs in) { return in[0]->reshaped(shape); },
      [](Graph::Inputs, const Tensor&, std::span<const double> dout, std::span<double* const> d) {
        if (d[0])
          for (std::size_t i = 0; i < dout.size(); ++i) d[0][i] += dout[i];
      });
}

Var gaussian_sample(Graph& g, Var mean, Var var, Var noise) {
  require_same_shape(g.value(mean), g.value(var), "gaussian_sample");
  require_same_shape(g.value(mean), g.value(noise), "gaussian_sample");
  return g.record(
      {mean, var, noise},
      [](Graph::Inputs in) {
        Tensor out = *in[0];
        const auto& v = in[1]->values();
        const auto& e = in[2]->values();
        auto& o = out.values();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] += std::sqrt(std::max(v[i], 0.0)) * e[i];
        return out;
      },
      [](Graph::Inputs in, const Tensor&, std::span<const double> dout, std::span<double* const> d) {
        const auto& v = in[1]->values();
        const auto& e = in[2]->values();
        for (std::size_t i = 0; i < dout.size(); ++i) {
          const double sd = std::sqrt(std::max(v[i], 0.0));
          if (d[0]) d[0][i] += dout[i];
          if (d[1] && sd > 0.0) d[1][i] += dout[i] * e[i] / (2.0 * sd);
          if (d[2]) d[2][i] += dout[i] * sd;
        }
      });
}

}  // namespace sbc
