#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "../support/oracles.hpp"
#include "sbc/errors.hpp"
#include "sbc/graph.hpp"
#include "sbc/model.hpp"
#include "sbc/trainer.hpp"

using namespace sbc;

namespace {

Dataset toy_data(std::size_t n, std::uint64_t seed) { return synth_classification(n, 4, 8, seed); }

Model toy_model(std::uint64_t seed, bool bayesian = true) {
  ModelInit init;
  init.bayesian = bayesian;
  return init_model(Architecture::mlp({64, 12, 4}), priors::PriorMixtureSpec::defaults(), seed, init);
}

Batch head_batch(const Dataset& d, std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return gather(d, idx);
}

std::string history_csv(const TrainHistory& h) {
  std::ostringstream os;
  h.write_csv(os, false);
  return os.str();
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("objective without priors is the plain cross-entropy") {
  const Dataset d = toy_data(40, 1);
  Model m = toy_model(2, false);
  TrainConfig cfg;
  cfg.bayesian = false;
  cfg.lambda_cluster = cfg.lambda_skew = 0.0;
  const Batch b = head_batch(d, 40);
  const ObjectiveTerms t = objective(m, b, cfg, 40.0, 3, false);
  CHECK(t.kl == 0.0);
  const Tensor logits = predict(m, b.x);
  CHECK(t.total == doctest::Approx(oracle::xent(logits.values(), b.y, 4)).epsilon(1e-12));
}

TEST_CASE("objective scaling and component identity") {
  const Dataset d = toy_data(40, 4);
  Model m = toy_model(5);
  TrainConfig cfg;
  cfg.lambda_cluster = 0.3;
  cfg.lambda_skew = 0.2;
  const Batch b = head_batch(d, 24);
  const ObjectiveTerms a = objective(m, b, cfg, 1000.0, 6, false);
  const ObjectiveTerms c = objective(m, b, cfg, 2000.0, 6, false);
  CHECK(c.kl == a.kl / 2.0);
  CHECK(c.nll == a.nll);
  CHECK(a.kl > 0.0);
  CHECK(a.cluster > 0.0);
  CHECK(a.skew > 0.0);
  CHECK(a.nll + a.kl + cfg.lambda_cluster * a.cluster + cfg.lambda_skew * a.skew ==
        doctest::Approx(a.total).epsilon(1e-12));
  const ObjectiveTerms g = objective(m, b, cfg, 1000.0, 6, true);
  CHECK(g.total == a.total);
  CHECK_THROWS_AS(objective(m, Batch{}, cfg, 10.0, 1, false), ContractError);
}

TEST_CASE("objective gradient matches finite differences") {
  const Dataset d = synth_classification(12, 3, 4, 7);
  ModelInit init;
  init.layer.w_log_var = std::log(1e-2);
  init.layer.scale_log_var = std::log(1e-2);
  init.layer.tau = 0.1;
  auto prior = priors::PriorMixtureSpec::defaults();
  prior.global_sigma = 0.1;
  Model m = init_model(Architecture::mlp({16, 5, 3}), prior, 8, init);
  TrainConfig cfg;
  cfg.lambda_cluster = 0.05;
  cfg.lambda_skew = 0.03;
  cfg.learn_tau = true;
  const Batch b = head_batch(d, 12);
  objective(m, b, cfg, 20.0, 9, true);
  auto params = trainable_parameters(m, cfg);
  std::vector<std::vector<double>> analytic;
  for (Tensor* p : params) analytic.emplace_back(p->grad().begin(), p->grad().end());
  for (std::size_t i = 0; i < params.size(); ++i) {
    CAPTURE(i);
    const double err = oracle::fd_max_rel_error(*params[i], analytic[i],
                                                [&] { return objective(m, b, cfg, 20.0, 9, false).total; });
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("shrinking the weight means lowers the KL term") {
  Model a = toy_model(10);
  Model b = a;
  for (auto& l : b.layers)
    for (double& v : l.w_mu.values()) v *= 0.5;
  const Dataset d = toy_data(8, 11);
  TrainConfig cfg;
  const Batch bt = head_batch(d, 8);
  CHECK(objective(b, bt, cfg, 100.0, 1, false).kl <= objective(a, bt, cfg, 100.0, 1, false).kl);
}

TEST_CASE("Adam") {
  Tensor x({3}, {1.0, -2.0, 0.5});
  std::vector<Tensor*> ps{&x};
  AdamState s;
  x.zero_grad();
  adam_step(ps, s, 0.1);
  CHECK(x.values() == std::vector<double>{1.0, -2.0, 0.5});

  Tensor y({3}, {1.0, -2.0, 0.5});
  std::vector<Tensor*> py{&y};
  AdamState s2;
  y.zero_grad();
  y.grad()[0] = 3.0;
  y.grad()[1] = -1e-3;
  adam_step(py, s2, 0.01);
  CHECK(y[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
  CHECK(y[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-4));
  CHECK(y[2] == 0.5);

  // convex quadratic ½ Σ a_i (x_i − c_i)²
  const std::vector<double> a{1.0, 4.0, 0.5, 2.0}, c{0.3, -0.7, 1.1, 0.0};
  Tensor q({4}, {-1.0, 1.0, 0.0, 0.8});
  std::vector<Tensor*> pq{&q};
  AdamState s3;
  for (int it = 0; it < 1000; ++it) {
    q.zero_grad();
    for (int i = 0; i < 4; ++i) q.grad()[i] = a[i] * (q[i] - c[i]);
    adam_step(pq, s3, 0.05);
  }
  for (int i = 0; i < 4; ++i) CHECK(std::abs(q[i] - c[i]) <= 1e-4);

  Tensor z({2}, 0.0);
  std::vector<Tensor*> pz{&z};
  AdamState s4;
  z.zero_grad();
  z.grad()[1] = std::nan("");
  CHECK_THROWS_AS(adam_step(pz, s4, 0.1), DivergenceError);
}

TEST_CASE("SGD and clipping") {
  Tensor x({2}, {1.0, 1.0});
  std::vector<Tensor*> ps{&x};
  x.zero_grad();
  x.grad()[0] = 3.0;
  x.grad()[1] = 4.0;
  CHECK(clip_gradients(ps, 10.0) == doctest::Approx(5.0));
  CHECK(x.grad()[0] == 3.0);
  CHECK(clip_gradients(ps, 1.0) == doctest::Approx(5.0));
  CHECK(x.grad()[0] == doctest::Approx(0.6));
  CHECK(x.grad()[1] == doctest::Approx(0.8));
  sgd_step(ps, 0.5);
  CHECK(x[0] == doctest::Approx(0.7));
  CHECK(x[1] == doctest::Approx(0.6));
}

TEST_CASE("evaluate") {
  Dataset d;
  d.classes = 10;
  d.image_shape = {4};
  d.images = Tensor({20, 4});
  std::mt19937_64 rng(12);
  for (double& v : d.images.values()) v = std::uniform_real_distribution<double>(0, 1)(rng);
  for (int i = 0; i < 20; ++i) d.labels.push_back(i % 10);
  Model m = init_model(Architecture::mlp({4, 10}), priors::PriorMixtureSpec::defaults(), 1);
  for (double& v : m.layers[0].w_mu.values()) v = 0.0;
  m.layers[0].bias_mu[3] = 1.0;
  CHECK(evaluate(m, d) == doctest::Approx(90.0));

  // logits (x0, x1, −x0 − x1); predictions counted by hand
  Model h = init_model(Architecture::mlp({2, 3}), priors::PriorMixtureSpec::defaults(), 1);
  h.layers[0].w_mu = Tensor({2, 3}, {1.0, 0.0, -1.0, 0.0, 1.0, -1.0});
  Dataset f;
  f.classes = 3;
  f.image_shape = {2};
  const std::vector<std::array<double, 3>> rows{
      // x0, x1, label
      {2, 0, 0},  {3, 1, 0},    {1, 0.5, 0},  {0.9, 0.1, 1}, {5, -1, 0},   {2, 1.5, 2},   {1.2, 0.2, 0},  // pred 0
      {0, 2, 1},  {0.5, 1, 1},  {-1, 3, 1},   {0.1, 0.9, 0}, {1, 4, 1},    {2, 2.5, 2},   {0.2, 0.6, 1},  // pred 1
      {-1, -1, 2}, {-2, -0.5, 2}, {-3, -3, 2}, {-0.5, -2, 1}, {-1, -4, 2}, {-2, -2, 0}};                // pred 2
  f.images = Tensor({rows.size(), 2});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    f.images[i * 2] = rows[i][0];
    f.images[i * 2 + 1] = rows[i][1];
    f.labels.push_back(static_cast<int>(rows[i][2]));
  }
  // wrong: {0.9,0.1,1} {2,1.5,2} {0.1,0.9,0} {2,2.5,2} {−0.5,−2,1} {−2,−2,0}
  CHECK(evaluate(h, f) == doctest::Approx(100.0 * 6.0 / 20.0));
}

TEST_CASE("zero epochs") {
  const Dataset d = toy_data(40, 13);
  TrainConfig cfg;
  cfg.epochs = 0;
  Model m = toy_model(14);
  const TrainResult r = train(cfg, d, nullptr, m);
  CHECK(r.history.epochs.empty());
  CHECK(r.model.layers[0].w_mu.values() == m.layers[0].w_mu.values());
  CHECK(!r.pruning);
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), DomainError);
  cfg = TrainConfig{};
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(cfg.validate(), DomainError);
  cfg = TrainConfig{};
  cfg.kl_scale_N = 0.5;
  CHECK_THROWS_AS(cfg.validate(), DomainError);
  cfg = TrainConfig{};
  cfg.logvar_lr_scale = 0.0;
  CHECK_THROWS_AS(cfg.validate(), DomainError);
  cfg = TrainConfig{};
  cfg.scale_lr_scale = -1.0;
  CHECK_THROWS_AS(cfg.validate(), DomainError);
  cfg = TrainConfig{};
  cfg.finetune_epochs = -1;
  CHECK_THROWS_AS(cfg.validate(), DomainError);
  CHECK(optimizer_from_string("sgd") == Optimizer::sgd);
  CHECK(to_string(Optimizer::adam) == "adam");
  CHECK_THROWS(optimizer_from_string("rmsprop"));
}

TEST_CASE("learning-rate multipliers follow the tensor roles") {
  TrainConfig cfg;
  cfg.logvar_lr_scale = 7.0;
  cfg.scale_lr_scale = 3.0;
  Model m = toy_model(4);
  const auto params = trainable_parameters(m, cfg);
  const auto scales = learning_rate_scales(m, cfg);
  REQUIRE(params.size() == scales.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    double want = 1.0;
    for (auto& l : m.layers) {
      if (params[i] == &l.w_logvar || params[i] == &l.bias_logvar || params[i] == &l.scale_logvar ||
          params[i] == &l.aux_logvar)
        want = 7.0;
      if (params[i] == &l.scale_mu || params[i] == &l.aux_mu) want = 3.0;
    }
    CHECK(scales[i] == want);
  }
  cfg.bayesian = false;
  const auto plain = learning_rate_scales(m, cfg);
  CHECK(plain.size() == trainable_parameters(m, cfg).size());
  CHECK(std::all_of(plain.begin(), plain.end(), [](double v) { return v == 1.0; }));
}

TEST_CASE("training is deterministic and logs one record per epoch") {
  const Dataset d = toy_data(120, 15), t = toy_data(40, 16);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 32;
  cfg.prune_epoch = 0;
  cfg.seed = 17;
  const TrainResult a = train(cfg, d, &t, toy_model(18));
  const TrainResult b = train(cfg, d, &t, toy_model(18));
  CHECK(a.history.epochs.size() == 3);
  CHECK(history_csv(a.history) == history_csv(b.history));
  for (std::size_t l = 0; l < a.model.layers.size(); ++l)
    CHECK(a.model.layers[l].w_mu.values() == b.model.layers[l].w_mu.values());
  for (const auto& e : a.history.epochs) {
    CHECK(std::isfinite(e.loss));
    CHECK(std::isfinite(e.kl));
    CHECK(std::isfinite(e.nll));
    CHECK(std::isfinite(e.test_error));
  }
  const auto lines = history_csv(a.history);
  CHECK(lines.rfind("epoch,loss,nll,kl,cluster,skew,test_error,seconds\n", 0) == 0);
  cfg.seed = 18;
  CHECK(history_csv(train(cfg, d, &t, toy_model(18)).history) != lines);
}

TEST_CASE("without priors training equals a plain network loop") {
  const Dataset d = toy_data(96, 19);
  TrainConfig cfg;
  cfg.bayesian = false;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.lambda_cluster = cfg.lambda_skew = 0.0;
  cfg.clip_norm = 1e300;
  cfg.prune_epoch = 0;
  cfg.seed = 20;
  const Model start = toy_model(21, false);
  const TrainResult r = train(cfg, d, nullptr, start);

  std::vector<Tensor> w{start.layers[0].w_mu, start.layers[1].w_mu};
  std::vector<Tensor> b{start.layers[0].bias_mu, start.layers[1].bias_mu};
  std::vector<std::vector<double>> m1(4), m2(4);
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (const auto& idx : epoch_batches(cfg, d.size(), epoch)) {
      const Batch bt = gather(d, idx);
      Graph g;
      Var h = relu(g, add_along(g, matmul(g, g.constant(bt.x), g.param(w[0])), g.param(b[0]), 1));
      Var z = add_along(g, matmul(g, h, g.param(w[1])), g.param(b[1]), 1);
      gradients(g, softmax_xent(g, z, bt.y));
      ++step;
      Tensor* ps[4] = {&w[0], &b[0], &w[1], &b[1]};
      for (int p = 0; p < 4; ++p) {
        auto& t = *ps[p];
        if (m1[p].empty()) m1[p].assign(t.size(), 0.0), m2[p].assign(t.size(), 0.0);
        const double c1 = 1.0 - std::pow(0.9, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(0.999, static_cast<double>(step));
        for (std::size_t k = 0; k < t.size(); ++k) {
          const double gk = std::as_const(t).grad()[k];
          m1[p][k] = 0.9 * m1[p][k] + (1.0 - 0.9) * gk;
          m2[p][k] = 0.999 * m2[p][k] + (1.0 - 0.999) * gk * gk;
          t[k] -= cfg.learning_rate * (m1[p][k] / c1) / (std::sqrt(m2[p][k] / c2) + 1e-8);
        }
      }
    }
  }
  CHECK(r.model.layers[0].w_mu.values() == w[0].values());
  CHECK(r.model.layers[1].w_mu.values() == w[1].values());
  CHECK(r.model.layers[0].bias_mu.values() == b[0].values());
  CHECK(r.model.layers[1].bias_mu.values() == b[1].values());
}

TEST_CASE("pruning epoch and fine-tuning") {
  const Dataset d = toy_data(80, 22);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 20;
  cfg.prune_epoch = 2;
  cfg.finetune_epochs = 1;
  cfg.thresholds.weight_log_alpha_tau = -8.0;  // prunes a visible share of weights
  const TrainResult r = train(cfg, d, nullptr, toy_model(23));
  REQUIRE(r.pruning);
  REQUIRE(r.pre_prune);
  CHECK(r.history.epochs.size() == 3);
  CHECK(r.pruning->kept_weights < r.pruning->total_weights);
  for (std::size_t i = 0; i < r.model.layers.size(); ++i) {
    const auto& l = r.model.layers[i];
    const auto& p = r.pruning->model.layers[i];
    CHECK(l.mask.values() == p.mask.values());
    for (std::size_t k = 0; k < l.mask.size(); ++k)
      if (l.mask[k] == 0.0) CHECK(l.w_mu[k] == 0.0);
    // mean-only retraining leaves the variances alone
    CHECK(l.w_logvar.values() == p.w_logvar.values());
    CHECK(l.scale_mu.values() == p.scale_mu.values());
    CHECK(l.w_mu.values() != p.w_mu.values());
  }

  cfg.finetune_mode = FinetuneMode::bayesian;
  const TrainResult b = train(cfg, d, nullptr, toy_model(23));
  CHECK(b.model.layers[0].w_logvar.values() != b.pruning->model.layers[0].w_logvar.values());

  cfg.finetune_epochs = 4;
  CHECK(train(cfg, d, nullptr, toy_model(23)).history.epochs.size() == 6);

  cfg.finetune = false;
  const TrainResult s = train(cfg, d, nullptr, toy_model(23));
  CHECK(s.history.epochs.size() == 2);
}

TEST_CASE("pretraining then warm start") {
  const Dataset d = toy_data(80, 26);
  TrainConfig cfg;
  cfg.arch = "mlp:64-12-4";
  cfg.epochs = 1;
  cfg.batch_size = 20;
  cfg.prune_epoch = 0;
  cfg.pretrain_epochs = 3;
  const TrainResult p = pretrain(cfg, d, &d);
  CHECK(p.history.epochs.size() == 3);
  CHECK_FALSE(p.model.bayesian);
  const Model w = warm_started(cfg, p.model);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    CHECK(w.layers[i].w_mu.values() == p.model.layers[i].w_mu.values());
    CHECK(w.layers[i].bias_mu.values() == p.model.layers[i].bias_mu.values());
  }
  CHECK(evaluate(w, d) == evaluate(p.model, d));
  const TrainResult r = train(cfg, d, &d);
  CHECK(r.pretraining.epochs.size() == 3);
  CHECK(r.history.epochs.size() == 1);
  CHECK_THROWS_AS(Architecture::by_name("mlp:64-x-4"), DomainError);
  CHECK_THROWS_AS(Architecture::by_name("mlp:64"), DomainError);
}

TEST_CASE("divergence saves the last good model") {
  const Dataset d = toy_data(40, 24);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 10;
  const auto path = std::filesystem::temp_directory_path() / "sbc_divergence_test.sbck";
  std::filesystem::remove(path);
  cfg.checkpoint_path = path.string();
  Model m = toy_model(25);
  m.layers[0].w_mu[0] = std::nan("");
  CHECK_THROWS_AS(train(cfg, d, nullptr, m), DivergenceError);
  CHECK(std::filesystem::exists(path));
  CHECK_NOTHROW(load_checkpoint(path.string()));
  std::filesystem::remove(path);
}

TEST_CASE("block detection and F1") {
  std::vector<double> w(64, 0.0);
  for (std::size_t i = 16; i < 32; ++i) w[i] = 1.0;
  w[50] = 0.01;
  CHECK(detect_blocks(w, 16) == std::vector<std::size_t>{1});
  w[50] = 2.0;
  CHECK(detect_blocks(w, 16) == std::vector<std::size_t>{1, 3});
  const std::vector<std::size_t> t{1, 3}, p{1, 2};
  CHECK(block_f1(t, t) == 1.0);
  CHECK(block_f1(p, t) == doctest::Approx(0.5));
  CHECK(block_f1(std::vector<std::size_t>{0}, t) == 0.0);
}

}  // TEST_SUITE
