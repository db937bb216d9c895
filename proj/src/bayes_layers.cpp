#include "sbc/bayes_layers.hpp"

#include <algorithm>
#include <limits>
#include <random>

#include "sbc/errors.hpp"
#include "sbc/kernels.hpp"

namespace sbc {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct ScaleMoments {
  double ez, ez2, varz;
};

ScaleMoments scale_moments(double m, double log_v) {
  const double v = std::exp(log_v);
  const double ez = std::exp(m + 0.5 * v);
  return {ez, std::exp(2.0 * m + 2.0 * v), ez * ez * std::expm1(v)};
}

// Var[z] for a log-normal q(z) as its own node so Var[z] is exactly 0 at zero variance.
Var lognormal_variance(Graph& g, Var m, Var log_v) {
  return g.record(
      {m, log_v},
      [](Graph::Inputs in) {
        Tensor out(in[0]->shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale_moments((*in[0])[i], (*in[1])[i]).varz;
        return out;
      },
      [](Graph::Inputs in, const Tensor& out, std::span<const double> dout, std::span<double* const> d) {
        for (std::size_t i = 0; i < out.size(); ++i) {
          const ScaleMoments s = scale_moments((*in[0])[i], (*in[1])[i]);
          const double v = std::exp((*in[1])[i]);
          if (d[0]) d[0][i] += dout[i] * 2.0 * s.varz;
          if (d[1]) d[1][i] += dout[i] * (2.0 * s.ez2 - s.ez * s.ez) * v;
        }
      });
}

struct WeightTerm {
  double value = 0.0, d_mu = 0.0, d_var = 0.0, d_ez = 0.0, d_ez2 = 0.0, d_varz = 0.0;
};

// KL of one weight against one component, with partials through the
// moment-matched effective weight N(E[z]μ, E[z²]σ² + Var[z]μ²).
WeightTerm component_term(priors::PriorKind kind, double hyper, double mu, double var, const ScaleMoments& s) {
  WeightTerm t;
  if (kind == priors::PriorKind::horseshoe) {
    const auto k = priors::kl_std_normal_grad(mu, var);
    t.value = k.value;
    t.d_mu = k.d_mu;
    t.d_var = k.d_var;
    return t;
  }
  const double me = s.ez * mu;
  const double ve = s.ez2 * var + s.varz * mu * mu;
  const auto k = kind == priors::PriorKind::laplace ? priors::kl_laplace_grad(me, ve, hyper)
                                                    : priors::kl_jeffreys_grad(me, ve);
  t.value = k.value;
  t.d_mu = k.d_mu * s.ez + k.d_var * 2.0 * s.varz * mu;
  t.d_var = k.d_var * s.ez2;
  t.d_ez = k.d_mu * mu;
  t.d_ez2 = k.d_var * var;
  t.d_varz = k.d_var * mu * mu;
  return t;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

Shape LayerShape::weight_shape() const {
  return kind == LayerKind::dense ? Shape{in, out} : Shape{out, in, kh, kw};
}

GroupIndexing::GroupIndexing(const LayerShape& s) {
  if (s.kind == LayerKind::dense) {
    outer = 1;
    groups = s.in;
    inner = s.out;
  } else {
    outer = s.out;
    groups = s.in;
    inner = s.kh * s.kw;
  }
}

std::vector<Tensor*> BayesLayer::parameters() {
  return {&w_mu, &w_logvar, &bias_mu, &bias_logvar, &scale_mu, &scale_logvar, &aux_mu, &aux_logvar};
}

void BayesLayer::refresh_mask_flag() {
  masked = std::any_of(mask.values().begin(), mask.values().end(), [](double v) { return v == 0.0; });
}

BayesLayer init_layer(const LayerShape& shape, const Tensor* warm_start, std::uint64_t seed, const InitOptions& opts,
                      const Tensor* warm_bias) {
  BayesLayer layer;
  layer.shape = shape;
  const Shape ws = shape.weight_shape();
  if (warm_start) {
    if (warm_start->shape() != ws) {
      throw DimensionError("init_layer: warm start shape " + shape_str(warm_start->shape()) + " != " + shape_str(ws));
    }
    layer.w_mu = *warm_start;
    layer.w_mu.drop_grad();
  } else {
    layer.w_mu = Tensor(ws);
    std::mt19937_64 rng(splitmix(seed));
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(shape.fan_in())));
    for (double& v : layer.w_mu.values()) v = normal(rng);
  }
  layer.w_logvar = Tensor(ws, opts.w_log_var);
  layer.bias_mu = Tensor({shape.out}, 0.0);
  if (warm_bias) {
    if (warm_bias->size() != shape.out) throw DimensionError("init_layer: warm start bias has wrong length");
    layer.bias_mu = Tensor({shape.out}, warm_bias->values());
  }
  layer.bias_logvar = Tensor({shape.out}, opts.w_log_var);
  const double v0 = std::exp(opts.scale_log_var);
  layer.scale_mu = Tensor({shape.in}, -0.5 * v0);
  layer.scale_logvar = Tensor({shape.in}, opts.scale_log_var);
  // q(λ) starts where the horseshoe scale KL is stationary in its mean.
  const double inv_z2 = std::exp(2.0 * (0.5 * v0) + 2.0 * v0);  // E[1/z²]
  const double aux_v = std::exp(opts.aux_log_var);
  layer.aux_mu = Tensor({shape.in}, std::log(inv_z2 + 1.0 / (opts.tau * opts.tau)) + 0.5 * aux_v);
  layer.aux_logvar = Tensor({shape.in}, opts.aux_log_var);
  layer.mask = Tensor(ws, 1.0);
  if (opts.with_blocks) {
    const std::size_t n = shape.weight_count();
    const std::size_t b = std::min(opts.block_size, n);
    layer.block_layout = make_layout(n, b, std::min(opts.block_stride, b));
  }
  return layer;
}

Var forward(BayesLayer& layer, Graph& g, Var x, ForwardMode mode, std::uint64_t seed) {
  if (mode != ForwardMode::stochastic && mode != ForwardMode::posterior_mean) {
    throw ContractError("forward: unknown forward mode");
  }
  const bool dense = layer.shape.kind == LayerKind::dense;
  const Shape& xs = g.value(x).shape();
  if (dense ? (xs.size() != 2 || xs[1] != layer.shape.in) : (xs.size() != 4 || xs[1] != layer.shape.in)) {
    throw DimensionError("forward: input " + shape_str(xs) + " does not match layer input " +
                         std::to_string(layer.shape.in));
  }
  const std::size_t axis = layer.shape.group_axis();
  auto linear = [&](Var in, Var w) { return dense ? matmul(g, in, w) : conv2d(g, in, w, layer.shape.stride); };
  const std::size_t out_axis = 1;

  Var m = g.param(layer.scale_mu);
  Var log_v = g.param(layer.scale_logvar);
  Var v = exp(g, log_v);
  Var ez = exp(g, add(g, m, scale(g, v, 0.5)));
  Var w_mu = g.param(layer.w_mu);
  Var mask = layer.masked ? g.constant(layer.mask) : Var{};
  if (layer.masked) w_mu = mul(g, w_mu, mask);
  Var w_mean = scale_along(g, w_mu, ez, axis);
  Var mean = add_along(g, linear(x, w_mean), g.param(layer.bias_mu), out_axis);
  if (mode == ForwardMode::posterior_mean) return mean;

  Var ez2 = exp(g, scale(g, add(g, m, v), 2.0));
  Var varz = lognormal_variance(g, m, log_v);
  Var w_var = exp(g, g.param(layer.w_logvar));
  if (layer.masked) w_var = mul(g, w_var, mask);
  Var total_w_var = add(g, scale_along(g, w_var, ez2, axis), scale_along(g, square(g, w_mu), varz, axis));
  Var var = add_along(g, linear(square(g, x), total_w_var), exp(g, g.param(layer.bias_logvar)), out_axis);

  Tensor noise(g.value(mean).shape());
  std::mt19937_64 rng(splitmix(seed));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& e : noise.values()) e = normal(rng);
  return gaussian_sample(g, mean, var, g.constant(std::move(noise)));
}

EffectiveWeights effective_weights(const BayesLayer& layer) {
  const GroupIndexing gi(layer.shape);
  EffectiveWeights out{Tensor(layer.w_mu.shape()), Tensor(layer.w_mu.shape())};
  for (std::size_t g = 0; g < gi.groups; ++g) {
    const ScaleMoments s = scale_moments(layer.scale_mu[g], layer.scale_logvar[g]);
    for (std::size_t o = 0; o < gi.outer; ++o) {
      for (std::size_t i = 0; i < gi.inner; ++i) {
        const std::size_t k = gi.index(o, g, i);
        if (layer.mask[k] == 0.0) continue;
        const double mu = layer.w_mu[k];
        out.mean[k] = s.ez * mu;
        out.var[k] = s.ez2 * std::exp(layer.w_logvar[k]) + s.varz * mu * mu;
      }
    }
  }
  return out;
}

Tensor forward_with_weights(const BayesLayer& layer, const Tensor& weights, const Tensor& bias, const Tensor& x) {
  Tensor out;
  std::size_t inner = 1;
  if (layer.shape.kind == LayerKind::dense) {
    out = kernels::matmul(x, weights);
  } else {
    out = kernels::conv2d(x, weights, layer.shape.stride);
    inner = out.dim(2) * out.dim(3);
  }
  const std::size_t rows = out.size() / (layer.shape.out * inner);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < layer.shape.out; ++c) {
      double* p = out.data().data() + (r * layer.shape.out + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += bias[c];
    }
  return out;
}

Tensor forward_posterior_mean(const BayesLayer& layer, const Tensor& x) {
  return forward_with_weights(layer, effective_weights(layer).mean, layer.bias_mu, x);
}

LayerKl layer_kl(const BayesLayer& layer, const priors::PriorMixtureSpec& mixture) {
  return layer_kl(const_cast<BayesLayer&>(layer), mixture, 0.0, nullptr);
}

LayerKl layer_kl(BayesLayer& layer, const priors::PriorMixtureSpec& mixture, double grad_scale, MixtureGrad* mix) {
  mixture.validate();
  const bool grads = grad_scale != 0.0;
  const std::size_t K = mixture.size();
  const std::vector<double> elogpi = priors::dirichlet_elogpi(mixture.alpha);
  const int hs = mixture.index_of(priors::PriorKind::horseshoe);
  const double tau = mixture.global_sigma;
  const GroupIndexing gi(layer.shape);

  LayerKl out;
  out.components = K;
  out.responsibilities.assign(gi.groups * K, 0.0);
  out.group_kl.assign(gi.groups * K, 0.0);

  std::span<double> g_mu, g_lv, g_smu, g_slv, g_amu, g_alv;
  if (grads) {
    g_mu = layer.w_mu.grad();
    g_lv = layer.w_logvar.grad();
    g_smu = layer.scale_mu.grad();
    g_slv = layer.scale_logvar.grad();
    g_amu = layer.aux_mu.grad();
    g_alv = layer.aux_logvar.grad();
    if (mix && mix->d_elogpi.size() != K) mix->d_elogpi.assign(K, 0.0);
  }

  const std::size_t gsize = gi.group_size();
  std::vector<WeightTerm> scratch(grads ? gsize * K : 0);
  std::vector<std::size_t> kept_idx;
  kept_idx.reserve(gsize);
  std::vector<double> kl(K), r(K);

  for (std::size_t g = 0; g < gi.groups; ++g) {
    const ScaleMoments s = scale_moments(layer.scale_mu[g], layer.scale_logvar[g]);
    kept_idx.clear();
    for (std::size_t o = 0; o < gi.outer; ++o)
      for (std::size_t i = 0; i < gi.inner; ++i) {
        const std::size_t idx = gi.index(o, g, i);
        if (layer.mask[idx] != 0.0) kept_idx.push_back(idx);
      }
    std::fill(kl.begin(), kl.end(), 0.0);
    for (std::size_t j = 0; j < kept_idx.size(); ++j) {
      const std::size_t idx = kept_idx[j];
      const double mu = layer.w_mu[idx];
      const double var = std::exp(layer.w_logvar[idx]);
      for (std::size_t k = 0; k < K; ++k) {
        const WeightTerm t = component_term(mixture.components[k].kind, mixture.components[k].scale_hyper, mu, var, s);
        kl[k] += t.value;
        if (grads) scratch[j * K + k] = t;
      }
    }
    priors::ScaleKl hs_scale;
    if (hs >= 0) {
      hs_scale = priors::kl_horseshoe_scale(
          {{layer.scale_mu[g], layer.scale_logvar[g]}, {layer.aux_mu[g], layer.aux_logvar[g]}}, tau);
      kl[hs] += hs_scale.value;
    }
    r = priors::mixture_responsibilities(kl, elogpi);
    out.bound += priors::mixture_kl_bound(kl, r, elogpi);
    for (std::size_t k = 0; k < K; ++k) {
      out.responsibilities[g * K + k] = r[k];
      out.group_kl[g * K + k] = kl[k];
    }
    if (!grads) continue;

    // The bound is minimised in r, so ∂bound/∂KL_k = r_k and ∂bound/∂E[ln π_k] = −r_k.
    double d_ez = 0.0, d_ez2 = 0.0, d_varz = 0.0;
    for (std::size_t j = 0; j < kept_idx.size(); ++j) {
      const std::size_t idx = kept_idx[j];
      double dmu = 0.0, dvar = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const WeightTerm& t = scratch[j * K + k];
        dmu += r[k] * t.d_mu;
        dvar += r[k] * t.d_var;
        d_ez += r[k] * t.d_ez;
        d_ez2 += r[k] * t.d_ez2;
        d_varz += r[k] * t.d_varz;
      }
      g_mu[idx] += grad_scale * dmu;
      g_lv[idx] += grad_scale * dvar * std::exp(layer.w_logvar[idx]);
    }
    const double v = std::exp(layer.scale_logvar[g]);
    double dm = d_ez * s.ez + d_ez2 * 2.0 * s.ez2 + d_varz * 2.0 * s.varz;
    double dv = d_ez * 0.5 * s.ez + d_ez2 * 2.0 * s.ez2 + d_varz * (2.0 * s.ez2 - s.ez * s.ez);
    double dlv = dv * v;
    if (hs >= 0) {
      dm += r[hs] * hs_scale.d_scale_mu;
      dlv += r[hs] * hs_scale.d_scale_log_var;
      g_amu[g] += grad_scale * r[hs] * hs_scale.d_aux_mu;
      g_alv[g] += grad_scale * r[hs] * hs_scale.d_aux_log_var;
      if (mix) mix->d_log_tau += grad_scale * r[hs] * hs_scale.d_log_tau;
    }
    g_smu[g] += grad_scale * dm;
    g_slv[g] += grad_scale * dlv;
    if (mix)
      for (std::size_t k = 0; k < K; ++k) mix->d_elogpi[k] -= grad_scale * r[k];
  }

  std::span<double> g_bmu, g_blv;
  if (grads) {
    g_bmu = layer.bias_mu.grad();
    g_blv = layer.bias_logvar.grad();
  }
  for (std::size_t c = 0; c < layer.shape.out; ++c) {
    const double var = std::exp(layer.bias_logvar[c]);
    const auto k = priors::kl_std_normal_grad(layer.bias_mu[c], var);
    out.bias_kl += k.value;
    if (grads) {
      g_bmu[c] += grad_scale * k.d_mu;
      g_blv[c] += grad_scale * k.d_var * var;
    }
  }
  out.total = out.bound + out.bias_kl;
  return out;
}

std::vector<double> group_scores(const BayesLayer& layer) {
  const GroupIndexing gi(layer.shape);
  std::vector<double> scores(gi.groups, -kInf);
  for (std::size_t g = 0; g < gi.groups; ++g) {
    double best = kInf;
    for (std::size_t o = 0; o < gi.outer; ++o)
      for (std::size_t i = 0; i < gi.inner; ++i) {
        const std::size_t k = gi.index(o, g, i);
        if (layer.mask[k] == 0.0) continue;
        const double mu = layer.w_mu[k];
        const double ratio = mu == 0.0 ? kInf : std::exp(layer.w_logvar[k]) / (mu * mu);
        best = std::min(best, std::log(ratio + kScoreEpsilon));
      }
    if (best < kInf) scores[g] = layer.scale_mu[g] - 0.5 * best;
  }
  return scores;
}

std::vector<double> log_alpha(const BayesLayer& layer) {
  const EffectiveWeights ew = effective_weights(layer);
  std::vector<double> out(ew.mean.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double m = ew.mean[k];
    out[k] = m == 0.0 ? kInf : std::log(ew.var[k]) - std::log(m * m);
  }
  return out;
}

}  // namespace sbc
