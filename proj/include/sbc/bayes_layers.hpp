#pragma once

// Variational dense and convolutional layers. Each weight carries a Gaussian
// posterior; each group (input unit of a dense layer, input feature map of a
// conv layer) carries a shared log-normal scale z_g, so the effective weight
// is z_g · w. Group scales couple a whole unit's outgoing weights, which is
// what lets the mixture prior switch units off as a block.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "sbc/block_structure.hpp"
#include "sbc/graph.hpp"
#include "sbc/priors.hpp"
#include "sbc/tensor.hpp"

namespace sbc {

enum class LayerKind { dense, conv };
enum class ForwardMode { stochastic, posterior_mean };

struct LayerShape {
  LayerKind kind = LayerKind::dense;
  std::size_t in = 0;   // input units / input channels (one group each)
  std::size_t out = 0;  // output units / output channels
  std::size_t kh = 1, kw = 1, stride = 1;

  static LayerShape dense(std::size_t in, std::size_t out) { return {LayerKind::dense, in, out, 1, 1, 1}; }
  static LayerShape conv(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride = 1) {
    return {LayerKind::conv, c_in, c_out, k, k, stride};
  }

  Shape weight_shape() const;
  std::size_t weight_count() const { return in * out * kh * kw; }
  std::size_t group_axis() const { return kind == LayerKind::dense ? 0 : 1; }
  std::size_t fan_in() const { return in * kh * kw; }
};

/// Flat weight index = (outer·groups + g)·inner + i.
struct GroupIndexing {
  std::size_t outer = 1, groups = 0, inner = 1;
  explicit GroupIndexing(const LayerShape& s);
  std::size_t index(std::size_t o, std::size_t g, std::size_t i) const { return (o * groups + g) * inner + i; }
  std::size_t group_size() const { return outer * inner; }
};

struct BayesLayer {
  LayerShape shape;
  Tensor w_mu, w_logvar;         // weight_shape()
  Tensor bias_mu, bias_logvar;   // [out]
  Tensor scale_mu, scale_logvar; // [in], log-normal q(z_g)
  Tensor aux_mu, aux_logvar;     // [in], log-normal q(λ_g) of the horseshoe hierarchy
  Tensor mask;                   // weight_shape(), 1 = kept
  bool masked = false;           // any mask entry is 0
  std::optional<BlockLayout> block_layout;

  std::size_t groups() const { return shape.in; }
  std::vector<Tensor*> parameters();
  void refresh_mask_flag();
};

// Dense and conv layers share one representation; `shape.kind` tells them apart.
using BayesDense = BayesLayer;
using BayesConv = BayesLayer;

struct InitOptions {
  double w_log_var = std::log(1e-8);
  double scale_log_var = std::log(1e-8);
  double aux_log_var = std::log(1e-2);
  double tau = priors::kDefaultComponentScale;
  std::size_t block_size = kDefaultBlockSize;
  std::size_t block_stride = kDefaultBlockStride;
  bool with_blocks = true;
};

/// He-scaled random means unless `warm_start` is given (copied exactly).
/// Scale posteriors start at E[z] = 1 so a warm-started layer reproduces the
/// pretrained network in posterior-mean mode.
BayesLayer init_layer(const LayerShape& shape, const Tensor* warm_start, std::uint64_t seed,
                      const InitOptions& opts = {}, const Tensor* warm_bias = nullptr);

/// Records the layer on `g`. Stochastic mode samples pre-activations from
/// N(x·(E[z]⊙μ), x²·(E[z²]⊙σ² + Var[z]⊙μ²)) with noise drawn from `seed`.
Var forward(BayesLayer& layer, Graph& g, Var x, ForwardMode mode, std::uint64_t seed);

/// Masked effective weights E[z]·μ and their variances E[z²]σ² + Var[z]μ².
struct EffectiveWeights {
  Tensor mean;
  Tensor var;
};
EffectiveWeights effective_weights(const BayesLayer& layer);

/// Posterior-mean pre-activation without recording a graph.
Tensor forward_posterior_mean(const BayesLayer& layer, const Tensor& x);
Tensor forward_with_weights(const BayesLayer& layer, const Tensor& weights, const Tensor& bias, const Tensor& x);

struct LayerKl {
  double total = 0.0;    // bound + bias_kl
  double bound = 0.0;    // Σ_g mixture bound
  double bias_kl = 0.0;  // biases against N(0, 1)
  std::size_t components = 0;
  std::vector<double> responsibilities;  // groups × components, row-major
  std::vector<double> group_kl;          // groups × components, aggregated component KLs
};

/// Gradient sink for the mixture-level parameters shared across layers.
struct MixtureGrad {
  std::vector<double> d_elogpi;  // ∂/∂E[ln π_k]
  double d_log_tau = 0.0;
};

LayerKl layer_kl(const BayesLayer& layer, const priors::PriorMixtureSpec& mixture);
/// Same value; adds grad_scale·∂KL into the layer's grad buffers and `mix`.
LayerKl layer_kl(BayesLayer& layer, const priors::PriorMixtureSpec& mixture, double grad_scale, MixtureGrad* mix);

inline constexpr double kScoreEpsilon = 1e-12;

/// s_g = E[ln z_g] − ½·min_{kept j in g} ln(σ²_j/μ²_j + ε); −∞ for groups with
/// no kept weight or only zero means.
std::vector<double> group_scores(const BayesLayer& layer);

/// ln(σ²/μ²) of each effective weight (+∞ where the mean is 0).
std::vector<double> log_alpha(const BayesLayer& layer);

}  // namespace sbc
