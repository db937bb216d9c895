#include "sbc/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>

#include "sbc/errors.hpp"
#include "sbc/kernels.hpp"

namespace sbc {

Optimizer optimizer_from_string(const std::string& s) {
  if (s == "adam") return Optimizer::adam;
  if (s == "sgd") return Optimizer::sgd;
  throw DomainError("unknown optimizer '" + s + "' (expected adam or sgd)");
}

std::string to_string(Optimizer o) { return o == Optimizer::adam ? "adam" : "sgd"; }

FinetuneMode finetune_mode_from_string(const std::string& s) {
  if (s == "mean") return FinetuneMode::mean;
  if (s == "bayesian") return FinetuneMode::bayesian;
  throw DomainError("unknown finetune mode '" + s + "' (expected mean or bayesian)");
}

std::string to_string(FinetuneMode m) { return m == FinetuneMode::mean ? "mean" : "bayesian"; }

void TrainConfig::validate() const {
  if (epochs < 0) throw DomainError("epochs must be >= 0");
  if (batch_size < 1) throw DomainError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw DomainError("learning_rate must be > 0");
  if (kl_scale_N != 0.0 && !(kl_scale_N >= 1.0)) throw DomainError("kl_scale_N must be >= 1");
  if (!(lambda_cluster >= 0.0) || !(lambda_skew >= 0.0)) throw DomainError("penalty weights must be >= 0");
  if (!(clip_norm > 0.0)) throw DomainError("clip_norm must be > 0");
  if (!(logvar_lr_scale > 0.0)) throw DomainError("logvar_lr_scale must be > 0");
  if (!(scale_lr_scale > 0.0)) throw DomainError("scale_lr_scale must be > 0");
  if (finetune_epochs < 0) throw DomainError("finetune_epochs must be >= 0");
  if (pretrain_epochs < 0) throw DomainError("pretrain_epochs must be >= 0");
}

std::vector<Tensor*> trainable_parameters(Model& model, const TrainConfig& config) {
  std::vector<Tensor*> p;
  for (auto& l : model.layers) {
    if (config.bayesian) {
      for (Tensor* t : l.parameters()) p.push_back(t);
    } else {
      p.push_back(&l.w_mu);
      p.push_back(&l.bias_mu);
    }
  }
  if (config.bayesian && config.learn_alpha) p.push_back(&model.alpha_raw);
  if (config.bayesian && config.learn_tau) p.push_back(&model.log_tau);
  return p;
}

std::vector<double> learning_rate_scales(Model& model, const TrainConfig& config) {
  std::vector<double> s;
  for (auto& l : model.layers) {
    if (config.bayesian) {
      for (Tensor* t : l.parameters()) {
        const bool logvar = t == &l.w_logvar || t == &l.bias_logvar || t == &l.scale_logvar || t == &l.aux_logvar;
        const bool scale = t == &l.scale_mu || t == &l.aux_mu;
        s.push_back(logvar ? config.logvar_lr_scale : scale ? config.scale_lr_scale : 1.0);
      }
    } else {
      s.insert(s.end(), {1.0, 1.0});
    }
  }
  if (config.bayesian && config.learn_alpha) s.push_back(1.0);
  if (config.bayesian && config.learn_tau) s.push_back(1.0);
  return s;
}

ObjectiveTerms objective(Model& model, const Batch& batch, const TrainConfig& config, double n_data,
                         std::uint64_t seed, bool grads) {
  if (batch.y.empty()) throw ContractError("objective: empty batch");
  if (!(n_data >= 1.0)) throw DomainError("objective: dataset size must be >= 1");
  ObjectiveTerms t;
  if (grads) {
    for (auto& l : model.layers)
      for (Tensor* p : l.parameters()) p->zero_grad();
    model.alpha_raw.zero_grad();
    model.log_tau.zero_grad();
  }
  {
    Graph g;
    const ForwardMode mode = config.bayesian ? ForwardMode::stochastic : ForwardMode::posterior_mean;
    Var logits = forward(model, g, batch.x, mode, seed);
    Var loss = softmax_xent(g, logits, batch.y);
    t.nll = g.value(loss)[0];
    if (grads) gradients(g, loss);
  }

  if (config.bayesian) {
    const priors::PriorMixtureSpec mix = model.mixture();
    MixtureGrad mg;
    const double scale = 1.0 / n_data;
    double kl = 0.0;
    for (auto& l : model.layers) kl += layer_kl(l, mix, grads ? scale : 0.0, grads ? &mg : nullptr).total;
    t.kl = kl * scale;
    if (grads && !mg.d_elogpi.empty()) {
      const auto d_alpha = priors::dirichlet_elogpi_vjp(mix.alpha, mg.d_elogpi);
      auto ga = model.alpha_raw.grad();
      for (std::size_t k = 0; k < d_alpha.size(); ++k)
        ga[k] += d_alpha[k] / (1.0 + std::exp(-model.alpha_raw[k]));  // softplus' = sigmoid
      model.log_tau.grad()[0] += mg.d_log_tau;
    }
  }

  for (auto& l : model.layers) {
    if (!l.block_layout) continue;
    if (config.lambda_cluster > 0.0) {
      t.cluster += grads ? cluster_sparsity_penalty(*l.block_layout, l.w_mu.data(), l.w_mu.grad(), config.lambda_cluster)
                         : cluster_sparsity_penalty(*l.block_layout, l.w_mu.data());
    }
    if (config.lambda_skew > 0.0) {
      if (grads) {
        t.skew += skew_penalty(*l.block_layout, l.w_mu.data(), l.w_mu.grad(), config.lambda_skew);
      } else {
        t.skew += skew_penalty(block_energies(*l.block_layout, l.w_mu.data()));
      }
    }
  }

  if (grads) {
    for (auto& l : model.layers) {
      if (!l.masked) continue;
      auto gm = l.w_mu.grad();
      auto gv = l.w_logvar.grad();
      for (std::size_t k = 0; k < gm.size(); ++k)
        if (l.mask[k] == 0.0) gm[k] = gv[k] = 0.0;
    }
  }
  t.total = t.nll + t.kl + config.lambda_cluster * t.cluster + config.lambda_skew * t.skew;
  return t;
}

void adam_step(std::span<Tensor* const> params, AdamState& s, double lr, const AdamConfig& cfg,
               std::span<const double> lr_scale) {
  if (!lr_scale.empty() && lr_scale.size() != params.size())
    throw DimensionError("adam_step: one learning-rate scale per tensor required");
  if (s.m.empty()) {
    for (Tensor* p : params) {
      s.m.emplace_back(p->size(), 0.0);
      s.v.emplace_back(p->size(), 0.0);
    }
  }
  if (s.m.size() != params.size()) throw DimensionError("adam_step: state has a different number of tensors");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (s.m[i].size() != params[i]->size()) throw DimensionError("adam_step: state shape mismatch at tensor " + std::to_string(i));
    if (!params[i]->has_grad()) continue;
    for (std::size_t k = 0; k < params[i]->size(); ++k) {
      const double gk = params[i]->grad()[k];
      if (!std::isfinite(gk)) {
        throw DivergenceError("non-finite gradient in parameter tensor " + std::to_string(i) + " at element " +
                              std::to_string(k) + " (step " + std::to_string(s.step + 1) + ")");
      }
    }
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (!p.has_grad()) continue;
    auto g = std::as_const(p).grad();
    auto& m = s.m[i];
    auto& v = s.v[i];
    const double step = lr_scale.empty() ? lr : lr * lr_scale[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      p[k] -= step * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
    }
  }
}

void sgd_step(std::span<Tensor* const> params, double lr, std::span<const double> lr_scale) {
  if (!lr_scale.empty() && lr_scale.size() != params.size())
    throw DimensionError("sgd_step: one learning-rate scale per tensor required");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor* p = params[i];
    if (!p->has_grad()) continue;
    auto g = std::as_const(*p).grad();
    const double step = lr_scale.empty() ? lr : lr * lr_scale[i];
    for (std::size_t k = 0; k < p->size(); ++k) {
      if (!std::isfinite(g[k])) throw DivergenceError("non-finite gradient at element " + std::to_string(k));
      (*p)[k] -= step * g[k];
    }
  }
}

double clip_gradients(std::span<Tensor* const> params, double max_norm) {
  double sq = 0.0;
  for (Tensor* p : params)
    for (double g : std::as_const(*p).grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && std::isfinite(norm)) {
    const double f = max_norm / norm;
    for (Tensor* p : params)
      if (p->has_grad())
        for (double& g : p->grad()) g *= f;
  }
  return norm;
}

double evaluate(const Model& model, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  const auto pred = predict_labels(model, data.images);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != data.labels[i];
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(data.size());
}

void TrainHistory::write_csv(std::ostream& os, bool wall_time) const {
  os << "epoch,loss,nll,kl,cluster,skew,test_error,seconds\n";
  char buf[320];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.6f\n", e.epoch, e.loss, e.nll, e.kl,
                  e.cluster, e.skew, e.test_error, wall_time ? e.seconds : 0.0);
    os << buf;
  }
}

Model initial_model(const TrainConfig& config, std::size_t classes) {
  const Architecture arch = Architecture::by_name(config.arch, classes);
  if (!config.warm_start.empty()) return warm_started(config, load_checkpoint(config.warm_start), classes);
  ModelInit init;
  init.bayesian = config.bayesian;
  return init_model(arch, priors::PriorMixtureSpec::defaults(), config.seed, init);
}

Model warm_started(const TrainConfig& config, const Model& plain, std::size_t classes) {
  ModelInit init;
  init.bayesian = config.bayesian;
  init.warm_start = &plain;
  return init_model(Architecture::by_name(config.arch, classes), priors::PriorMixtureSpec::defaults(), config.seed,
                    init);
}

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a * 0x9e3779b97f4a7c15ULL + b + 0x632be59bd9b4e019ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void reset_masked_moments(Model& model, std::span<Tensor* const> params, AdamState& s) {
  if (s.m.empty()) return;
  for (std::size_t i = 0; i < params.size(); ++i)
    for (auto& l : model.layers)
      if (params[i] == &l.w_mu || params[i] == &l.w_logvar)
        for (std::size_t k = 0; k < l.mask.size(); ++k)
          if (l.mask[k] == 0.0) s.m[i][k] = s.v[i][k] = 0.0;
}

}  // namespace

std::vector<std::vector<std::size_t>> epoch_batches(const TrainConfig& config, std::size_t n, int epoch) {
  return batches(n, config.batch_size, mix_seed(config.seed, static_cast<std::uint64_t>(epoch)));
}

TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset* test_set, Model model,
                  const EpochCallback& on_epoch) {
  config.validate();
  if (train_set.size() == 0) throw ContractError("train: empty training set");
  TrainResult res;
  const double n_data = config.kl_scale_N > 0.0 ? config.kl_scale_N : static_cast<double>(train_set.size());
  TrainConfig active = config;
  AdamState adam;
  std::vector<Tensor*> params = trainable_parameters(model, active);
  std::vector<double> lr_scale = learning_rate_scales(model, active);
  Model last_good = model;
  std::uint64_t step = 0;
  int last_epoch = config.epochs;
  if (config.prune_epoch > 0 && config.prune_epoch <= config.epochs)
    last_epoch = config.prune_epoch + (config.finetune ? config.finetune_epochs : 0);

  for (int epoch = 1; epoch <= last_epoch; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t seen = 0;
    try {
      for (const auto& idx : epoch_batches(config, train_set.size(), epoch)) {
        const Batch b = gather(train_set, idx);
        ObjectiveTerms t;
        try {
          t = objective(model, b, active, n_data, mix_seed(config.seed ^ 0xabcdefULL, ++step));
        } catch (const DomainError& e) {
          // parameters went non-finite somewhere in the KL terms
          throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + " step " +
                                std::to_string(step));
        }
        if (!std::isfinite(t.total)) {
          throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
        }
        clip_gradients(params, active.clip_norm);
        if (active.optimizer == Optimizer::adam) {
          adam_step(params, adam, active.learning_rate, {}, lr_scale);
        } else {
          sgd_step(params, active.learning_rate, lr_scale);
        }
        const double w = static_cast<double>(idx.size());
        rec.loss += t.total * w;
        rec.nll += t.nll * w;
        rec.kl += t.kl * w;
        rec.cluster += t.cluster * w;
        rec.skew += t.skew * w;
        seen += idx.size();
      }
    } catch (const DivergenceError& e) {
      std::string msg = e.what();
      if (!config.checkpoint_path.empty()) {
        save_checkpoint(last_good, config.checkpoint_path);
        msg += "; last good model (end of epoch " + std::to_string(epoch - 1) + ") saved to " + config.checkpoint_path;
      }
      throw DivergenceError(msg);
    }
    const double inv = 1.0 / static_cast<double>(seen);
    rec.loss *= inv;
    rec.nll *= inv;
    rec.kl *= inv;
    rec.cluster *= inv;
    rec.skew *= inv;

    bool stop = false;
    if (config.prune_epoch > 0 && epoch == config.prune_epoch) {
      res.pre_prune = model;
      PruneResult pr = prune(model, config.thresholds);
      model = pr.model;
      res.pruning = std::move(pr);
      if (config.finetune_mode == FinetuneMode::mean && active.bayesian) {
        // plain retraining of the surviving posterior means
        active.bayesian = false;
        active.lambda_cluster = active.lambda_skew = 0.0;
        adam = AdamState{};
      }
      params = trainable_parameters(model, active);
      lr_scale = learning_rate_scales(model, active);
      reset_masked_moments(model, params, adam);
      stop = !config.finetune || config.finetune_epochs == 0;
    }
    rec.test_error = test_set ? evaluate(model, *test_set) : std::nan("");
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    last_good = model;
    if (config.checkpoint_every > 0 && !config.checkpoint_path.empty() && epoch % config.checkpoint_every == 0)
      save_checkpoint(model, config.checkpoint_path);
    if (stop) break;
  }
  for (auto& l : model.layers)
    for (Tensor* p : l.parameters()) p->drop_grad();
  model.alpha_raw.drop_grad();
  model.log_tau.drop_grad();
  res.model = std::move(model);
  return res;
}

TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset* test_set,
                  const EpochCallback& on_epoch) {
  if (config.pretrain_epochs == 0 || !config.warm_start.empty() || !config.bayesian)
    return train(config, train_set, test_set, initial_model(config, train_set.classes), on_epoch);
  TrainResult pre = pretrain(config, train_set, test_set);
  TrainResult res = train(config, train_set, test_set, warm_started(config, pre.model, train_set.classes), on_epoch);
  res.pretraining = std::move(pre.history);
  return res;
}

TrainResult pretrain(const TrainConfig& config, const Dataset& train_set, const Dataset* test_set,
                     const EpochCallback& on_epoch) {
  TrainConfig p = config;
  p.bayesian = false;
  p.epochs = config.pretrain_epochs;
  p.prune_epoch = 0;
  p.lambda_cluster = p.lambda_skew = 0.0;
  p.checkpoint_every = 0;
  ModelInit init;
  init.bayesian = false;
  const Architecture arch = Architecture::by_name(config.arch, train_set.classes);
  return train(p, train_set, test_set, init_model(arch, priors::PriorMixtureSpec::defaults(), config.seed, init),
               on_epoch);
}

// ---- block-sparse regression ----------------------------------------------

std::vector<double> fit_block_regression(const BlockSparseProblem& p, const BlockFitConfig& cfg) {
  const std::size_t n = p.x.dim(0), d = p.x.dim(1);
  const BlockLayout layout = make_layout(d, cfg.block_size, cfg.stride);
  Tensor w({d}, 0.0);
  std::vector<Tensor*> params{&w};
  AdamState adam;
  std::vector<double> resid(n);
  for (int it = 0; it < cfg.steps; ++it) {
    w.zero_grad();
    auto g = w.grad();
    for (std::size_t s = 0; s < n; ++s) {
      double acc = 0.0;
      for (std::size_t i = 0; i < d; ++i) acc += p.x.at(s, i) * w[i];
      resid[s] = acc - p.y[s];
    }
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t i = 0; i < d; ++i) g[i] += resid[s] * p.x.at(s, i) / static_cast<double>(n);
    cluster_sparsity_penalty(layout, w.data(), g, cfg.lambda_cluster);
    skew_penalty(layout, w.data(), g, cfg.lambda_skew);
    adam_step(params, adam, cfg.learning_rate);
  }
  return w.values();
}

std::vector<std::size_t> detect_blocks(std::span<const double> w, std::size_t block_size, double rel_threshold) {
  const std::size_t nb = w.size() / block_size;
  std::vector<double> e(nb, 0.0);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = b * block_size; i < (b + 1) * block_size; ++i) e[b] += w[i] * w[i];
  const double top = nb ? *std::max_element(e.begin(), e.end()) : 0.0;
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < nb; ++b)
    if (top > 0.0 && e[b] >= rel_threshold * top) out.push_back(b);
  return out;
}

double block_f1(std::span<const std::size_t> predicted, std::span<const std::size_t> truth) {
  const std::set<std::size_t> t(truth.begin(), truth.end());
  std::size_t tp = 0;
  for (auto b : std::set<std::size_t>(predicted.begin(), predicted.end())) tp += t.count(b);
  if (predicted.empty() && truth.empty()) return 1.0;
  const double prec = predicted.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(predicted.size());
  const double rec = truth.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(truth.size());
  return prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
}

}  // namespace sbc
