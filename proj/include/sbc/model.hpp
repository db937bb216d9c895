#pragma once

// Feed-forward stacks of Bayesian layers: the benchmark architectures, graph
// and graph-free forward passes, and the checkpoint format.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sbc/bayes_layers.hpp"
#include "sbc/graph.hpp"
#include "sbc/priors.hpp"
#include "sbc/tensor.hpp"

namespace sbc {

struct LayerSpec {
  LayerShape shape;
  bool relu = false;
  bool pool = false;  // 2×2 max pool after the activation (conv only)
};

struct Architecture {
  std::string name;
  Shape input;  // {d} or {c, h, w}
  std::vector<LayerSpec> layers;

  /// 784-300-100-10 with ReLU.
  static Architecture lenet300();
  /// conv 20@5×5 + pool, conv 50@5×5 + pool, dense 500 + ReLU, dense 10.
  static Architecture lenet5();
  /// [(16,3)×3 − 32 − classes] on 1×size×size inputs, pools after conv 2 and 3.
  static Architecture synth_conv(std::size_t size = 32, std::size_t classes = 10);
  /// Dense stack over widths[0] inputs, ReLU between layers.
  static Architecture mlp(const std::vector<std::size_t>& widths, const std::string& name = "mlp");
  static Architecture by_name(const std::string& name, std::size_t classes = 10);

  /// Throws DimensionError when consecutive layers do not chain.
  void validate() const;
  std::size_t input_size() const { return shape_numel(input); }
  std::size_t classes() const { return layers.back().shape.out; }
  /// Per layer, the number of consecutive groups fed by one output unit of the
  /// previous layer (spatial size after a conv→dense flatten, else 1).
  std::vector<std::size_t> group_span() const;
  /// Output shape (without batch) of every layer after activation and pooling.
  std::vector<Shape> activation_shapes() const;
};

struct Model {
  Architecture arch;
  std::vector<BayesLayer> layers;
  priors::PriorMixtureSpec prior;  // components and initial hyperparameters
  Tensor alpha_raw;                // [K], α = softplus(alpha_raw)
  Tensor log_tau;                  // [1], horseshoe global scale
  bool bayesian = true;

  /// Current mixture: learned α and τ.
  priors::PriorMixtureSpec mixture() const;
  std::vector<Tensor*> layer_parameters();
  std::size_t weight_count() const;
  std::size_t kept_weight_count() const;
};

struct ModelInit {
  InitOptions layer;
  bool bayesian = true;
  const Model* warm_start = nullptr;  // copies effective means and biases
};

Model init_model(const Architecture& arch, const priors::PriorMixtureSpec& prior, std::uint64_t seed,
                 const ModelInit& opts = {});

double softplus(double x);
double softplus_inverse(double y);

/// Flattened [n × d] input batch to the architecture's input layout.
Tensor to_input_layout(const Architecture& arch, const Tensor& x);

/// Logits on the graph. Hidden layers apply ReLU/pooling per the architecture.
Var forward(Model& model, Graph& g, const Tensor& x, ForwardMode mode, std::uint64_t seed);

/// Deterministic logits from explicit per-layer weights and biases.
Tensor forward_weights(const Architecture& arch, std::span<const Tensor> weights, std::span<const Tensor> biases,
                       const Tensor& x);
/// Posterior-mean logits (masked effective means), no graph.
Tensor predict(const Model& model, const Tensor& x);
std::vector<int> predict_labels(const Model& model, const Tensor& x, std::size_t chunk = 1000);

/// Effective weights and biases in the form forward_weights() expects.
std::vector<Tensor> effective_means(const Model& model);
std::vector<Tensor> bias_means(const Model& model);

// Checkpoint: "SBCK", u16 version, architecture, prior, all tensors, CRC32.
std::vector<std::uint8_t> serialize_model(const Model& model);
Model deserialize_model(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace sbc
