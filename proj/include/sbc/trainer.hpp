#pragma once

// Training objective (NLL + KL/N + block penalties), optimizers and the
// epoch loop with optional pruning and fine-tuning.

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "sbc/compressor.hpp"
#include "sbc/dataio.hpp"
#include "sbc/model.hpp"

namespace sbc {

enum class Optimizer { sgd, adam };
Optimizer optimizer_from_string(const std::string& s);
std::string to_string(Optimizer o);

// How survivors are trained after pruning: posterior means only (plain
// retraining of the masked network) or the full variational objective.
enum class FinetuneMode { mean, bayesian };
FinetuneMode finetune_mode_from_string(const std::string& s);
std::string to_string(FinetuneMode m);

struct TrainConfig {
  std::string arch = "lenet300";
  int epochs = 20;
  std::size_t batch_size = 128;
  Optimizer optimizer = Optimizer::adam;
  double learning_rate = 1e-3;
  double kl_scale_N = 0.0;  // 0: size of the training set
  double lambda_cluster = 1e-4;
  double lambda_skew = 1e-4;
  std::uint64_t seed = 1;
  std::string warm_start;  // checkpoint path
  int prune_epoch = 20;    // <= 0 disables pruning
  bool finetune = true;
  FinetuneMode finetune_mode = FinetuneMode::mean;
  int finetune_epochs = 5;  // epochs after prune_epoch
  int pretrain_epochs = 0;  // deterministic epochs before the variational run (no warm_start)
  PruneThresholds thresholds;
  bool bayesian = true;    // false: deterministic network on w_mu and b_mu only
  bool learn_alpha = true;
  bool learn_tau = false;
  double clip_norm = 10.0;
  double logvar_lr_scale = 30.0;  // learning-rate multiplier for log-variance tensors
  double scale_lr_scale = 10.0;   // multiplier for the group scale (and auxiliary) means
  int checkpoint_every = 0;
  std::string checkpoint_path;  // written every checkpoint_every epochs and on divergence

  void validate() const;
};

struct ObjectiveTerms {
  double total = 0.0, nll = 0.0, kl = 0.0, cluster = 0.0, skew = 0.0;
};

/// total = mean NLL + (1/N)·Σ layer_kl + λ_c·Σ cluster + λ_s·Σ skew. With
/// `grads`, fills the grad buffers of every model parameter.
ObjectiveTerms objective(Model& model, const Batch& batch, const TrainConfig& config, double n_data,
                         std::uint64_t seed, bool grads = true);

/// Trainable tensors for the configuration (layer parameters, then α and τ when learned).
std::vector<Tensor*> trainable_parameters(Model& model, const TrainConfig& config);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long step = 0;
};

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// Per-tensor learning-rate multipliers matching trainable_parameters().
std::vector<double> learning_rate_scales(Model& model, const TrainConfig& config);

/// One bias-corrected Adam step using each tensor's grad buffer; `lr_scale`
/// (empty or one per tensor) multiplies the step. Throws DivergenceError
/// naming the tensor and element on a non-finite gradient.
void adam_step(std::span<Tensor* const> params, AdamState& state, double lr, const AdamConfig& cfg = {},
               std::span<const double> lr_scale = {});
void sgd_step(std::span<Tensor* const> params, double lr, std::span<const double> lr_scale = {});

/// Scales all grads so their global L2 norm is at most `max_norm`; returns the norm before clipping.
double clip_gradients(std::span<Tensor* const> params, double max_norm);

/// Posterior-mean error% on the dataset.
double evaluate(const Model& model, const Dataset& data);

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0, nll = 0.0, kl = 0.0, cluster = 0.0, skew = 0.0;
  double test_error = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  /// CSV `epoch,loss,nll,kl,cluster,skew,test_error,seconds`; wall time is
  /// written as 0 when `wall_time` is false so runs compare byte for byte.
  void write_csv(std::ostream& os, bool wall_time = true) const;
};

struct TrainResult {
  Model model;
  TrainHistory history;
  TrainHistory pretraining;
  std::optional<Model> pre_prune;  // snapshot just before pruning
  std::optional<PruneResult> pruning;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Shuffled index batches used for `epoch` (1-based) of a training run.
std::vector<std::vector<std::size_t>> epoch_batches(const TrainConfig& config, std::size_t n, int epoch);

/// Initial model for a config: architecture, default mixture, optional warm start.
Model initial_model(const TrainConfig& config, std::size_t classes = 10);

TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset* test_set, Model model,
                  const EpochCallback& on_epoch = {});
/// Builds the initial model itself; with pretrain_epochs > 0 (and no
/// warm_start) the plain network is trained first and used as warm start.
TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset* test_set = nullptr,
                  const EpochCallback& on_epoch = {});

/// Deterministic training of a plain network: means only, no penalties, no pruning.
TrainResult pretrain(const TrainConfig& config, const Dataset& train_set, const Dataset* test_set = nullptr,
                     const EpochCallback& on_epoch = {});
/// Variational model whose means and biases are copied from `plain`.
Model warm_started(const TrainConfig& config, const Model& plain, std::size_t classes = 10);

// ---- block-sparse regression ----------------------------------------------

struct BlockFitConfig {
  std::size_t block_size = kDefaultBlockSize;
  std::size_t stride = kDefaultBlockStride;
  double lambda_cluster = 0.05;
  double lambda_skew = 0.01;
  double learning_rate = 1e-2;
  int steps = 4000;
};

/// Least squares (½·mean squared residual) with the cluster and skew penalties
/// on overlapping blocks, optimised by Adam from zero.
std::vector<double> fit_block_regression(const BlockSparseProblem& p, const BlockFitConfig& cfg);

/// Aligned blocks of `block_size` whose energy is at least `rel_threshold` of the largest.
std::vector<std::size_t> detect_blocks(std::span<const double> w, std::size_t block_size, double rel_threshold = 0.05);
double block_f1(std::span<const std::size_t> predicted, std::span<const std::size_t> truth);

}  // namespace sbc
