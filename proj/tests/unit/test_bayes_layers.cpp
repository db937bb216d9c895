#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "../support/oracles.hpp"
#include "sbc/bayes_layers.hpp"
#include "sbc/errors.hpp"
#include "sbc/kernels.hpp"
#include "sbc/model.hpp"
#include "sbc/trainer.hpp"

using namespace sbc;
using priors::PriorKind;
using priors::PriorMixtureSpec;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void randomise(BayesLayer& l, std::mt19937_64& rng, double lv_lo = -4.0, double lv_hi = -1.0) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), lv(lv_lo, lv_hi);
  for (double& v : l.w_mu.values()) v = u(rng);
  for (double& v : l.w_logvar.values()) v = lv(rng);
  for (double& v : l.bias_mu.values()) v = 0.3 * u(rng);
  for (double& v : l.bias_logvar.values()) v = lv(rng);
  for (double& v : l.scale_mu.values()) v = 0.3 * u(rng);
  for (double& v : l.scale_logvar.values()) v = lv(rng);
  for (double& v : l.aux_mu.values()) v = 2.0 * u(rng);
  for (double& v : l.aux_logvar.values()) v = lv(rng);
}

struct Moments {
  double ez, ez2, varz;
};
Moments moments(double m, double lv) {
  const double v = std::exp(lv);
  const double ez = std::exp(m + v / 2.0);
  const double ez2 = std::exp(2.0 * m + 2.0 * v);
  return {ez, ez2, ez2 - ez * ez};
}

double normal_kl(double mu, double var) { return 0.5 * (var + mu * mu - 1.0 - std::log(var)); }

// Hand-composed layer KL: per group, component KLs summed over its weights,
// horseshoe scale term, responsibilities and the bound.
double composed_kl(const BayesLayer& l, const PriorMixtureSpec& mix) {
  const GroupIndexing gi(l.shape);
  const auto el = priors::dirichlet_elogpi(mix.alpha);
  double total = 0.0;
  for (std::size_t g = 0; g < gi.groups; ++g) {
    const Moments s = moments(l.scale_mu[g], l.scale_logvar[g]);
    std::vector<double> kls(mix.size(), 0.0);
    for (std::size_t o = 0; o < gi.outer; ++o)
      for (std::size_t i = 0; i < gi.inner; ++i) {
        const std::size_t k = gi.index(o, g, i);
        if (l.mask[k] == 0.0) continue;
        const double mu = l.w_mu[k], var = std::exp(l.w_logvar[k]);
        const double me = s.ez * mu, ve = s.ez2 * var + s.varz * mu * mu;
        for (std::size_t c = 0; c < mix.size(); ++c) {
          const auto& comp = mix.components[c];
          if (comp.kind == PriorKind::horseshoe) kls[c] += normal_kl(mu, var);
          else if (comp.kind == PriorKind::laplace) kls[c] += priors::kl_laplace({me, std::log(ve)}, comp.scale_hyper);
          else kls[c] += priors::kl_jeffreys({me, std::log(ve)});
        }
      }
    const int hs = mix.index_of(PriorKind::horseshoe);
    if (hs >= 0)
      kls[hs] += priors::kl_horseshoe_scale(
                     {{l.scale_mu[g], l.scale_logvar[g]}, {l.aux_mu[g], l.aux_logvar[g]}}, mix.global_sigma)
                     .value;
    total += priors::mixture_kl_bound(kls, priors::mixture_responsibilities(kls, el), el);
  }
  for (std::size_t c = 0; c < l.shape.out; ++c) total += normal_kl(l.bias_mu[c], std::exp(l.bias_logvar[c]));
  return total;
}

Tensor run(BayesLayer& l, const Tensor& x, ForwardMode mode, std::uint64_t seed) {
  Graph g;
  Var xv = g.constant(x);
  return g.value(forward(l, g, xv, mode, seed));
}

double spearman(std::vector<double> a, std::vector<double> b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto i, auto j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t k = 0; k < idx.size(); ++k) r[idx[k]] = static_cast<double>(k);
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

}  // namespace

TEST_SUITE("bayes_layers") {

TEST_CASE("init") {
  const auto shape = LayerShape::dense(300, 100);
  const BayesLayer a = init_layer(shape, nullptr, 5), b = init_layer(shape, nullptr, 5);
  CHECK(a.w_mu.values() == b.w_mu.values());
  CHECK(init_layer(shape, nullptr, 6).w_mu.values() != a.w_mu.values());
  double mean = 0.0, sq = 0.0;
  for (double v : a.w_mu.values()) mean += v;
  mean /= a.w_mu.size();
  for (double v : a.w_mu.values()) sq += (v - mean) * (v - mean);
  const double var = sq / (a.w_mu.size() - 1);
  CHECK(std::abs(mean) < 0.05 * std::sqrt(2.0 / 300.0));
  CHECK(var == doctest::Approx(2.0 / 300.0).epsilon(0.1));
  for (double v : a.w_logvar.values()) CHECK(v == std::log(1e-8));
  CHECK(a.scale_mu.size() == 300);
  for (std::size_t g = 0; g < 300; ++g) CHECK(moments(a.scale_mu[g], a.scale_logvar[g]).ez == doctest::Approx(1.0));

  const auto cs = LayerShape::conv(20, 50, 5);
  const BayesLayer c = init_layer(cs, nullptr, 7);
  CHECK(c.scale_mu.size() == 20);
  CHECK(c.w_mu.shape() == Shape{50, 20, 5, 5});
  double cv = 0.0;
  for (double v : c.w_mu.values()) cv += v * v;
  CHECK(cv / c.w_mu.size() == doctest::Approx(2.0 / 500.0).epsilon(0.1));

  std::mt19937_64 rng(8);
  const Tensor warm = oracle::random_tensor({4, 3}, rng);
  const BayesLayer w = init_layer(LayerShape::dense(4, 3), &warm, 1);
  CHECK(w.w_mu.values() == warm.values());
  const Tensor bad({3, 4});
  CHECK_THROWS_AS(init_layer(LayerShape::dense(4, 3), &bad, 1), DimensionError);
}

TEST_CASE("posterior mean at unit scales equals the plain layer") {
  std::mt19937_64 rng(9);
  BayesLayer l = init_layer(LayerShape::dense(7, 5), nullptr, 3);
  randomise(l, rng);
  for (std::size_t g = 0; g < 7; ++g) {
    l.scale_mu[g] = 0.0;
    l.scale_logvar[g] = kNegInf;
  }
  const Tensor x = oracle::random_tensor({4, 7}, rng);
  const Tensor y = run(l, x, ForwardMode::posterior_mean, 1);
  auto ref = oracle::matmul(x.values(), l.w_mu.values(), 4, 7, 5);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 5; ++c) ref[r * 5 + c] += l.bias_mu[c];
  CHECK(y.values() == ref);
  CHECK(run(l, x, ForwardMode::posterior_mean, 2).values() == y.values());

  // default init also has E[z] = 1 exactly
  BayesLayer d = init_layer(LayerShape::dense(7, 5), nullptr, 3);
  auto ref2 = oracle::matmul(x.values(), d.w_mu.values(), 4, 7, 5);
  CHECK(run(d, x, ForwardMode::posterior_mean, 1).values() == ref2);
  CHECK(forward_posterior_mean(d, x).values() == ref2);
}

TEST_CASE("zero-noise limit") {
  std::mt19937_64 rng(10);
  for (auto shape : {LayerShape::dense(6, 4), LayerShape::conv(2, 3, 3)}) {
    BayesLayer l = init_layer(shape, nullptr, 4);
    randomise(l, rng);
    for (double& v : l.w_logvar.values()) v = kNegInf;
    for (double& v : l.bias_logvar.values()) v = kNegInf;
    for (double& v : l.scale_logvar.values()) v = kNegInf;
    const Tensor x = shape.kind == LayerKind::dense ? oracle::random_tensor({3, 6}, rng)
                                                    : oracle::random_tensor({2, 2, 6, 6}, rng);
    CHECK(run(l, x, ForwardMode::stochastic, 11).values() == run(l, x, ForwardMode::posterior_mean, 0).values());
    CHECK(run(l, x, ForwardMode::posterior_mean, 0).values() == forward_posterior_mean(l, x).values());
  }
}

TEST_CASE("stochastic pre-activations follow the induced Gaussian") {
  std::mt19937_64 rng(12);
  BayesLayer l = init_layer(LayerShape::dense(3, 2), nullptr, 1);
  l.w_mu = Tensor({3, 2}, {0.8, -0.5, 1.2, 0.3, -0.4, 0.9});
  l.w_logvar = Tensor({3, 2}, {std::log(0.04), std::log(0.09), std::log(0.01), std::log(0.05), std::log(0.02),
                               std::log(0.03)});
  l.bias_mu = Tensor({2}, {0.5, -0.2});
  l.bias_logvar = Tensor({2}, std::log(0.01));
  l.scale_mu = Tensor({3}, {0.1, -0.2, 0.05});
  l.scale_logvar = Tensor({3}, {std::log(0.05), std::log(0.1), std::log(0.02)});
  const std::vector<double> xr{1.0, 0.7, -1.3};
  const std::size_t n = 100'000;
  Tensor x({n, 3});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < 3; ++i) x[r * 3 + i] = xr[i];
  const Tensor y = run(l, x, ForwardMode::stochastic, 13);
  for (std::size_t c = 0; c < 2; ++c) {
    double am = l.bias_mu[c], av = std::exp(l.bias_logvar[c]);
    for (std::size_t i = 0; i < 3; ++i) {
      const Moments s = moments(l.scale_mu[i], l.scale_logvar[i]);
      const double mu = l.w_mu[i * 2 + c], var = std::exp(l.w_logvar[i * 2 + c]);
      am += xr[i] * s.ez * mu;
      av += xr[i] * xr[i] * (s.ez2 * var + s.varz * mu * mu);
    }
    double m = 0.0, q = 0.0;
    for (std::size_t r = 0; r < n; ++r) m += y[r * 2 + c];
    m /= n;
    for (std::size_t r = 0; r < n; ++r) q += (y[r * 2 + c] - m) * (y[r * 2 + c] - m);
    q /= (n - 1);
    CHECK(m == doctest::Approx(am).epsilon(0.01));
    CHECK(q == doctest::Approx(av).epsilon(0.01));
  }
}

TEST_CASE("layer KL degenerate groups") {
  std::mt19937_64 rng(14);
  BayesLayer l = init_layer(LayerShape::dense(6, 1), nullptr, 2);
  randomise(l, rng);
  double bias = normal_kl(l.bias_mu[0], std::exp(l.bias_logvar[0]));
  const double tau = 0.3;
  for (auto kind : {PriorKind::laplace, PriorKind::normal_jeffreys, PriorKind::horseshoe}) {
    auto mix = PriorMixtureSpec::single({kind, 0.7});
    mix.global_sigma = tau;
    double want = bias;
    for (std::size_t g = 0; g < 6; ++g) {
      const Moments s = moments(l.scale_mu[g], l.scale_logvar[g]);
      const double mu = l.w_mu[g], var = std::exp(l.w_logvar[g]);
      const priors::GaussianPosterior eff{s.ez * mu, std::log(s.ez2 * var + s.varz * mu * mu)};
      if (kind == PriorKind::laplace) want += priors::kl_laplace(eff, 0.7);
      else if (kind == PriorKind::normal_jeffreys) want += priors::kl_jeffreys(eff);
      else
        want += priors::kl_horseshoe({mu, l.w_logvar[g]},
                                     {{l.scale_mu[g], l.scale_logvar[g]}, {l.aux_mu[g], l.aux_logvar[g]}}, tau);
    }
    CHECK(layer_kl(l, mix).total == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("layer KL additivity, composition and permutation") {
  std::mt19937_64 rng(15);
  const auto mix = PriorMixtureSpec::defaults();
  BayesLayer l = init_layer(LayerShape::dense(2, 3), nullptr, 3);
  randomise(l, rng);
  const LayerKl kl = layer_kl(l, mix);
  CHECK(kl.total == doctest::Approx(composed_kl(l, mix)).epsilon(1e-12));
  CHECK(kl.responsibilities.size() == 2 * mix.size());

  // duplicate every input unit
  BayesLayer d = init_layer(LayerShape::dense(4, 3), nullptr, 3);
  for (std::size_t g = 0; g < 4; ++g) {
    const std::size_t s = g % 2;
    for (std::size_t o = 0; o < 3; ++o) {
      d.w_mu[g * 3 + o] = l.w_mu[s * 3 + o];
      d.w_logvar[g * 3 + o] = l.w_logvar[s * 3 + o];
    }
    d.scale_mu[g] = l.scale_mu[s];
    d.scale_logvar[g] = l.scale_logvar[s];
    d.aux_mu[g] = l.aux_mu[s];
    d.aux_logvar[g] = l.aux_logvar[s];
  }
  CHECK(layer_kl(d, mix).bound == doctest::Approx(2.0 * kl.bound).epsilon(1e-12));

  // permuting units (dense) and input channels (conv) leaves the KL unchanged
  BayesLayer big = init_layer(LayerShape::dense(9, 4), nullptr, 4);
  randomise(big, rng);
  std::vector<std::size_t> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  BayesLayer p = big;
  for (std::size_t g = 0; g < 9; ++g) {
    for (std::size_t o = 0; o < 4; ++o) {
      p.w_mu[perm[g] * 4 + o] = big.w_mu[g * 4 + o];
      p.w_logvar[perm[g] * 4 + o] = big.w_logvar[g * 4 + o];
    }
    p.scale_mu[perm[g]] = big.scale_mu[g];
    p.scale_logvar[perm[g]] = big.scale_logvar[g];
    p.aux_mu[perm[g]] = big.aux_mu[g];
    p.aux_logvar[perm[g]] = big.aux_logvar[g];
  }
  CHECK(layer_kl(p, mix).total == doctest::Approx(layer_kl(big, mix).total).epsilon(1e-12));

  BayesLayer conv = init_layer(LayerShape::conv(3, 2, 2), nullptr, 5);
  randomise(conv, rng);
  CHECK(layer_kl(conv, mix).total == doctest::Approx(composed_kl(conv, mix)).epsilon(1e-12));
  BayesLayer cp = conv;
  const std::vector<std::size_t> cperm{2, 0, 1};
  const GroupIndexing gi(conv.shape);
  for (std::size_t g = 0; g < 3; ++g) {
    for (std::size_t o = 0; o < gi.outer; ++o)
      for (std::size_t i = 0; i < gi.inner; ++i) {
        cp.w_mu[gi.index(o, cperm[g], i)] = conv.w_mu[gi.index(o, g, i)];
        cp.w_logvar[gi.index(o, cperm[g], i)] = conv.w_logvar[gi.index(o, g, i)];
      }
    cp.scale_mu[cperm[g]] = conv.scale_mu[g];
    cp.scale_logvar[cperm[g]] = conv.scale_logvar[g];
    cp.aux_mu[cperm[g]] = conv.aux_mu[g];
    cp.aux_logvar[cperm[g]] = conv.aux_logvar[g];
  }
  CHECK(layer_kl(cp, mix).total == doctest::Approx(layer_kl(conv, mix).total).epsilon(1e-12));

  // masked weights drop out of the KL
  BayesLayer m = l;
  m.mask[1] = 0.0;
  m.refresh_mask_flag();
  CHECK(layer_kl(m, mix).total == doctest::Approx(composed_kl(m, mix)).epsilon(1e-12));
  CHECK(layer_kl(m, mix).total != doctest::Approx(kl.total));
}

TEST_CASE("forward plus KL gradients match finite differences") {
  std::mt19937_64 rng(16);
  auto mix = PriorMixtureSpec::defaults();
  mix.global_sigma = 0.2;
  for (int variant = 0; variant < 3; ++variant) {
    const bool conv = variant == 1;
    BayesLayer l = init_layer(conv ? LayerShape::conv(2, 3, 3) : LayerShape::dense(5, 4), nullptr, 6);
    randomise(l, rng);
    if (variant == 2) {
      l.mask[3] = 0.0;
      l.mask[10] = 0.0;
      l.refresh_mask_flag();
    }
    const Tensor x = conv ? oracle::random_tensor({2, 2, 5, 5}, rng) : oracle::random_tensor({3, 5}, rng);
    const double inv_n = 1.0 / 50.0;
    auto loss = [&](bool grads) {
      Graph g;
      Var y = forward(l, g, g.constant(x), ForwardMode::stochastic, 17);
      Var s = sum(g, square(g, y));
      double v = g.value(s)[0];
      if (grads) {
        gradients(g, s);
        v += layer_kl(l, mix, inv_n, nullptr).total * inv_n;
      } else {
        v += layer_kl(l, mix).total * inv_n;
      }
      return v;
    };
    for (Tensor* t : l.parameters()) t->zero_grad();
    loss(true);
    std::vector<std::vector<double>> analytic;
    for (Tensor* t : l.parameters()) analytic.emplace_back(t->grad().begin(), t->grad().end());
    auto params = l.parameters();
    for (std::size_t p = 0; p < params.size(); ++p) {
      CAPTURE(p);
      CAPTURE(variant);
      CHECK(oracle::fd_max_rel_error(*params[p], analytic[p], [&] { return loss(false); }, 1e-5, 1e-6) <= 1e-4);
    }
  }
}

TEST_CASE("group scores") {
  std::mt19937_64 rng(18);
  BayesLayer l = init_layer(LayerShape::dense(4, 3), nullptr, 1);
  randomise(l, rng);
  for (std::size_t o = 0; o < 3; ++o) l.w_mu[2 * 3 + o] = 0.0;
  auto s = group_scores(l);
  CHECK(s[2] == kNegInf);
  CHECK(s[2] < -1e300);
  BayesLayer b = l;
  for (std::size_t o = 0; o < 3; ++o) b.w_mu[1 * 3 + o] *= 10.0;
  const auto sb = group_scores(b);
  CHECK(sb[1] > s[1]);
  CHECK(sb[0] == s[0]);
  CHECK(group_scores(l) == s);
  // oracle
  for (std::size_t g : {0u, 1u, 3u}) {
    double best = 1e300;
    for (std::size_t o = 0; o < 3; ++o) {
      const double mu = l.w_mu[g * 3 + o];
      best = std::min(best, std::log(std::exp(l.w_logvar[g * 3 + o]) / (mu * mu) + 1e-12));
    }
    CHECK(s[g] == doctest::Approx(l.scale_mu[g] - 0.5 * best).epsilon(1e-14));
  }
}

TEST_CASE("group scores track ablation loss on a trained toy net") {
  // 8 input features with graded relevance, 3 classes.
  const std::size_t n = 3000, d = 8;
  std::mt19937_64 rng(19);
  std::normal_distribution<double> nrm(0.0, 1.0);
  std::vector<std::vector<double>> teacher(3, std::vector<double>(d));
  for (std::size_t j = 0; j < d; ++j) {
    const double strength = 3.0 * std::pow(0.55, static_cast<double>(j));
    for (auto& row : teacher) row[j] = strength * nrm(rng);
  }
  Dataset ds;
  ds.images = Tensor({n, d});
  ds.image_shape = {d};
  ds.classes = 3;
  for (std::size_t i = 0; i < n; ++i) {
    double best = -1e300;
    int arg = 0;
    for (std::size_t j = 0; j < d; ++j) ds.images[i * d + j] = nrm(rng);
    for (int c = 0; c < 3; ++c) {
      double z = 0.0;
      for (std::size_t j = 0; j < d; ++j) z += teacher[c][j] * ds.images[i * d + j];
      if (z > best) {
        best = z;
        arg = c;
      }
    }
    ds.labels.push_back(arg);
  }
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 100;
  cfg.learning_rate = 1e-2;
  cfg.prune_epoch = 0;
  cfg.lambda_cluster = cfg.lambda_skew = 0.0;
  Model model = init_model(Architecture::mlp({d, 16, 3}), PriorMixtureSpec::defaults(), 20);
  const TrainResult res = train(cfg, ds, nullptr, std::move(model));

  auto nll = [&](const Model& m) {
    const Tensor logits = predict(m, ds.images);
    return oracle::xent(logits.values(), ds.labels, 3);
  };
  const double base = nll(res.model);
  std::vector<double> increase, scores = group_scores(res.model.layers[0]);
  for (std::size_t g = 0; g < d; ++g) {
    Model ablated = res.model;
    for (std::size_t o = 0; o < 16; ++o) ablated.layers[0].mask[g * 16 + o] = 0.0;
    ablated.layers[0].refresh_mask_flag();
    increase.push_back(nll(ablated) - base);
  }
  CAPTURE(scores);
  CAPTURE(increase);
  CHECK(spearman(scores, increase) >= 0.9);
}

}  // TEST_SUITE
