#include <doctest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "../support/oracles.hpp"
#include "sbc/errors.hpp"
#include "sbc/priors.hpp"

using namespace sbc;
using namespace sbc::priors;

namespace {

double log_normal_pdf(double w, double mu, double var) {
  return -0.5 * std::log(2.0 * std::numbers::pi * var) - (w - mu) * (w - mu) / (2.0 * var);
}

// ∫ q ln(q/p) for q = N(mu, var) and p = Laplace(0, b), split at the kink.
double laplace_kl_quadrature(double mu, double var, double b) {
  const double sd = std::sqrt(var);
  auto f = [&](double w) {
    const double lq = log_normal_pdf(w, mu, var);
    const double lp = -std::log(2.0 * b) - std::abs(w) / b;
    return std::exp(lq) * (lq - lp);
  };
  const double lo = mu - 40.0 * sd, hi = mu + 40.0 * sd;
  using GK = boost::math::quadrature::gauss_kronrod<double, 61>;
  if (lo < 0.0 && hi > 0.0) return GK::integrate(f, lo, 0.0, 20, 1e-13) + GK::integrate(f, 0.0, hi, 20, 1e-13);
  return GK::integrate(f, lo, hi, 20, 1e-13);
}

// Defining expectation of the log-uniform regulariser, anchored so it vanishes as α → ∞.
double jeffreys_kl_mc(double alpha, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> eps(1.0, std::sqrt(alpha));
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::log(std::abs(eps(rng)));
  return -0.5 * std::log(alpha) + acc / static_cast<double>(n) + kJeffreysK1;
}

}  // namespace

TEST_SUITE("priors") {

TEST_CASE("Laplace KL closed form") {
  CHECK(kl_laplace({0.0, 0.0}, 1.0) == doctest::Approx(0.0721).epsilon(1e-3));
  CHECK(kl_laplace({0.0, 0.0}, 1.0) == doctest::Approx(laplace_kl_quadrature(0.0, 1.0, 1.0)).epsilon(1e-9));
  CHECK_THROWS_AS(kl_laplace({0.0, 0.0}, 0.0), DomainError);
  CHECK_THROWS_AS(kl_laplace({0.0, 0.0}, -1.0), DomainError);
  // Shrinking σ below 1e-3 grows the KL without bound.
  double prev = kl_laplace({0.0, std::log(1e-6)}, 1.0);
  for (double sd = 1e-4; sd > 1e-12; sd /= 10.0) {
    const double v = kl_laplace({0.0, std::log(sd * sd)}, 1.0);
    CHECK(v > prev);
    prev = v;
  }
}

TEST_CASE("Laplace KL vs quadrature on random triples") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> mu(-2.0, 2.0), ls(-3.0, 1.0), lb(-3.0, 1.0);
  for (int i = 0; i < 10; ++i) {
    const double m = mu(rng), sd = std::exp(ls(rng)), b = std::exp(lb(rng));
    const double q = laplace_kl_quadrature(m, sd * sd, b);
    CHECK(kl_laplace({m, std::log(sd * sd)}, b) == doctest::Approx(q).epsilon(1e-6));
  }
}

TEST_CASE("Jeffreys regulariser") {
  CHECK(kl_jeffreys({0.0, 0.0}) == 0.0);
  CHECK(kl_jeffreys_alpha(40.0) == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
  // α = σ²/μ² = 1
  const double mc = jeffreys_kl_mc(1.0, 10'000'000, 22);
  CHECK(std::abs(kl_jeffreys({1.0, 0.0}) - mc) <= 1e-2);
  double prev = kl_jeffreys_alpha(-10.0);
  for (double la = -9.5; la <= 10.0; la += 0.5) {
    const double v = kl_jeffreys_alpha(la);
    CHECK(v <= prev);
    CHECK(v >= -0.7);
    prev = v;
  }
}

TEST_CASE("Laplace and Jeffreys gradients match finite differences") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> mu(-1.5, 1.5), lv(-4.0, 0.5), lb(-2.0, 0.5);
  for (int i = 0; i < 20; ++i) {
    double m = mu(rng), v = std::exp(lv(rng));
    const double b = std::exp(lb(rng));
    const double h = 1e-6;
    const auto gl = kl_laplace_grad(m, v, b);
    CHECK(gl.value == doctest::Approx(kl_laplace({m, std::log(v)}, b)).epsilon(1e-12));
    const double nm = (kl_laplace_grad(m + h, v, b).value - kl_laplace_grad(m - h, v, b).value) / (2 * h);
    const double nv = (kl_laplace_grad(m, v + h * v, b).value - kl_laplace_grad(m, v - h * v, b).value) / (2 * h * v);
    const double nb = (kl_laplace_grad(m, v, b + h * b).value - kl_laplace_grad(m, v, b - h * b).value) / (2 * h * b);
    CHECK(gl.d_mu == doctest::Approx(nm).epsilon(1e-5));
    CHECK(gl.d_var == doctest::Approx(nv).epsilon(1e-5));
    CHECK(gl.d_scale == doctest::Approx(nb).epsilon(1e-5));
    const auto gj = kl_jeffreys_grad(m, v);
    const double jm = (kl_jeffreys_grad(m + h, v).value - kl_jeffreys_grad(m - h, v).value) / (2 * h);
    const double jv = (kl_jeffreys_grad(m, v + h * v).value - kl_jeffreys_grad(m, v - h * v).value) / (2 * h * v);
    CHECK(gj.d_mu == doctest::Approx(jm).epsilon(1e-5));
    CHECK(gj.d_var == doctest::Approx(jv).epsilon(1e-5));
  }
}

TEST_CASE("horseshoe KL is nonnegative") {
  std::mt19937_64 rng(24);
  std::uniform_real_distribution<double> u(-3.0, 3.0), lv(-6.0, 1.0), lt(-8.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const GaussianPosterior qw{u(rng), lv(rng)};
    const HorseshoeScalePosterior qs{{u(rng), lv(rng)}, {u(rng) * 3.0, lv(rng)}};
    CHECK(kl_horseshoe(qw, qs, std::exp(lt(rng))) >= -1e-9);
  }
  CHECK_THROWS_AS(kl_horseshoe({0, 0}, {{0, 0}, {0, 0}}, 0.0), DomainError);
  CHECK_THROWS_AS(kl_horseshoe({0, std::nan("")}, {{0, 0}, {0, 0}}, 1.0), DomainError);
}

TEST_CASE("horseshoe KL vs Monte Carlo") {
  struct Case {
    double mu, lv, zm, zlv, lm, llv, tau;
  };
  for (const Case c : {Case{0.3, std::log(0.2), -0.5, std::log(0.3), 0.2, std::log(0.4), 0.8},
                       Case{-1.0, std::log(0.05), 0.4, std::log(0.1), 1.5, std::log(0.2), 0.3}}) {
    const GaussianPosterior qw{c.mu, c.lv};
    const HorseshoeScalePosterior qs{{c.zm, c.zlv}, {c.lm, c.llv}};
    const double closed = kl_horseshoe(qw, qs, c.tau);
    std::mt19937_64 rng(25);
    std::normal_distribution<double> n01(0.0, 1.0);
    const double vw = std::exp(c.lv), vz = std::exp(c.zlv), vl = std::exp(c.llv);
    const double half_gamma = std::lgamma(0.5);
    double acc = 0.0;
    const int n = 1'000'000;
    for (int i = 0; i < n; ++i) {
      const double w = c.mu + std::sqrt(vw) * n01(rng);
      const double lz = c.zm + std::sqrt(vz) * n01(rng), z = std::exp(lz);
      const double ll = c.lm + std::sqrt(vl) * n01(rng), lam = std::exp(ll);
      const double log_q = log_normal_pdf(w, c.mu, vw) + log_normal_pdf(lz, c.zm, vz) - lz +
                           log_normal_pdf(ll, c.lm, vl) - ll;
      // z² | λ ~ IG(½, 1/λ) expressed as a density in z, λ ~ IG(½, 1/τ²).
      const double s = z * z;
      const double log_ps = 0.5 * std::log(1.0 / lam) - half_gamma - 1.5 * std::log(s) - 1.0 / (lam * s);
      const double log_pz = log_ps + std::log(2.0 * z);
      const double log_pl =
          0.5 * std::log(1.0 / (c.tau * c.tau)) - half_gamma - 1.5 * ll - 1.0 / (c.tau * c.tau * lam);
      const double log_p = log_normal_pdf(w, 0.0, 1.0) + log_pz + log_pl;
      acc += log_q - log_p;
    }
    CHECK(closed == doctest::Approx(acc / n).epsilon(2e-2));
  }
}

TEST_CASE("horseshoe KL minimised over a mean grid at zero") {
  const HorseshoeScalePosterior qs{{std::log(0.01), std::log(1e-2)}, {0.0, std::log(1e-2)}};
  double best = 1e300, arg = 1e300;
  for (double mu = -2.0; mu <= 2.0 + 1e-12; mu += 0.05) {
    const double v = kl_horseshoe({mu, std::log(1e-2)}, qs, 0.01);
    if (v < best) {
      best = v;
      arg = mu;
    }
  }
  CHECK(std::abs(arg) < 1e-9);
}

TEST_CASE("horseshoe scale KL gradients match finite differences") {
  std::mt19937_64 rng(26);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 10; ++i) {
    HorseshoeScalePosterior q{{u(rng), u(rng) - 1.0}, {u(rng) * 2.0, u(rng) - 1.0}};
    const double tau = std::exp(u(rng) - 2.0);
    const ScaleKl g = kl_horseshoe_scale(q, tau);
    const double h = 1e-6;
    auto num = [&](double& p, bool log_tau = false) {
      double t = tau;
      const double saved = p;
      if (log_tau) t = tau * std::exp(h); else p = saved + h;
      const double up = kl_horseshoe_scale(q, t).value;
      if (log_tau) t = tau * std::exp(-h); else p = saved - h;
      const double down = kl_horseshoe_scale(q, t).value;
      p = saved;
      return (up - down) / (2 * h);
    };
    double dummy = 0.0;
    CHECK(g.d_scale_mu == doctest::Approx(num(q.scale.mu)).epsilon(1e-5));
    CHECK(g.d_scale_log_var == doctest::Approx(num(q.scale.log_var)).epsilon(1e-5));
    CHECK(g.d_aux_mu == doctest::Approx(num(q.aux.mu)).epsilon(1e-5));
    CHECK(g.d_aux_log_var == doctest::Approx(num(q.aux.log_var)).epsilon(1e-5));
    CHECK(g.d_log_tau == doctest::Approx(num(dummy, true)).epsilon(1e-5));
  }
}

TEST_CASE("Dirichlet expected log weights") {
  const auto e = dirichlet_elogpi(std::vector<double>{1, 1, 1});
  CHECK(e[0] == e[1]);
  CHECK(e[1] == e[2]);
  const auto f = dirichlet_elogpi(std::vector<double>{10, 1, 1});
  CHECK(f[0] > f[1]);
  CHECK(f[0] > f[2]);
  CHECK_THROWS_AS(dirichlet_elogpi(std::vector<double>{1, 0}), DomainError);
  CHECK_THROWS_AS(dirichlet_elogpi(std::vector<double>{1, -2}), DomainError);

  std::mt19937_64 rng(27);
  std::gamma_distribution<double> g2(2.0, 1.0), g3(3.0, 1.0);
  double s0 = 0.0, s1 = 0.0;
  const int n = 1'000'000;
  for (int i = 0; i < n; ++i) {
    const double a = g2(rng), b = g3(rng);
    s0 += std::log(a / (a + b));
    s1 += std::log(b / (a + b));
  }
  const auto d = dirichlet_elogpi(std::vector<double>{2, 3});
  CHECK(std::abs(d[0] - s0 / n) <= 1e-2);
  CHECK(std::abs(d[1] - s1 / n) <= 1e-2);
}

TEST_CASE("Dirichlet vector-Jacobian product matches finite differences") {
  const std::vector<double> alpha{0.7, 2.0, 5.0}, up{0.3, -1.0, 0.5};
  const auto vjp = dirichlet_elogpi_vjp(alpha, up);
  for (std::size_t j = 0; j < alpha.size(); ++j) {
    auto a1 = alpha, a2 = alpha;
    const double h = 1e-6;
    a1[j] += h;
    a2[j] -= h;
    const auto e1 = dirichlet_elogpi(a1), e2 = dirichlet_elogpi(a2);
    double num = 0.0;
    for (std::size_t k = 0; k < alpha.size(); ++k) num += up[k] * (e1[k] - e2[k]) / (2 * h);
    CHECK(vjp[j] == doctest::Approx(num).epsilon(1e-6));
  }
}

TEST_CASE("responsibilities") {
  const std::vector<double> eq{2.0, 2.0, 2.0}, flat(3, std::log(1.0 / 3.0));
  for (double r : mixture_responsibilities(eq, flat)) CHECK(r == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  const auto dom = mixture_responsibilities(std::vector<double>{0.0, 500.0, 800.0}, flat);
  CHECK(dom[0] == doctest::Approx(1.0).epsilon(1e-15));

  std::mt19937_64 rng(28);
  std::uniform_real_distribution<double> kl(0.0, 5.0), lp(-3.0, 0.0), u(0.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> kls(3), el(3);
    for (auto& v : kls) v = kl(rng);
    for (auto& v : el) v = lp(rng);
    const auto r = mixture_responsibilities(kls, el);
    CHECK(r[0] + r[1] + r[2] == doctest::Approx(1.0).epsilon(1e-12));
    auto shifted = kls;
    for (auto& v : shifted) v += 123.0;
    const auto rs = mixture_responsibilities(shifted, el);
    for (int k = 0; k < 3; ++k) CHECK(rs[k] == doctest::Approx(r[k]).epsilon(1e-12));
    const double best = mixture_kl_bound(kls, r, el);
    for (int i = 0; i < 10'000; ++i) {
      // Uniform point on the simplex.
      double a = -std::log(u(rng)), b = -std::log(u(rng)), c = -std::log(u(rng));
      const double s = a + b + c;
      const std::vector<double> p{a / s, b / s, c / s};
      CHECK(best <= mixture_kl_bound(kls, p, el) + 1e-12);
    }
  }
}

TEST_CASE("mixture bound") {
  CHECK(mixture_kl_bound(std::vector<double>{1.7}, std::vector<double>{1.0}, std::vector<double>{0.0}) == 1.7);
  const std::vector<double> u3(3, 1.0 / 3.0), el(3, std::log(1.0 / 3.0)), c3(3, 0.9);
  CHECK(mixture_kl_bound(c3, u3, el) == doctest::Approx(0.9).epsilon(1e-14));
  CHECK(mixture_kl_bound(std::vector<double>{1, 2}, std::vector<double>{0.0, 1.0}, std::vector<double>{0, 0}) == 2.0);
  CHECK_THROWS_AS(mixture_kl_bound(c3, std::vector<double>{0.5, 0.5, 0.1}, el), ContractError);
  CHECK_THROWS_AS(mixture_kl_bound(c3, std::vector<double>{1.2, -0.1, -0.1}, el), ContractError);
}

TEST_CASE("mixture bound dominates the Monte Carlo mixture KL") {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (int pair = 0; pair < 20; ++pair) {
    const double mu = 2.0 * u(rng) - 1.0, sd = 0.05 + u(rng);
    std::vector<double> b(3), pi(3), kls(3), el(3);
    double tot = 0.0;
    for (int k = 0; k < 3; ++k) {
      b[k] = std::exp(-3.0 + 3.0 * u(rng));
      pi[k] = 0.1 + u(rng);
      tot += pi[k];
    }
    for (int k = 0; k < 3; ++k) {
      pi[k] /= tot;
      el[k] = std::log(pi[k]);
      kls[k] = kl_laplace({mu, std::log(sd * sd)}, b[k]);
    }
    const double bound = mixture_kl_bound(kls, mixture_responsibilities(kls, el), el);
    double acc = 0.0, acc2 = 0.0;
    const int n = 200'000;
    for (int i = 0; i < n; ++i) {
      const double w = mu + sd * n01(rng);
      double mix = 0.0;
      for (int k = 0; k < 3; ++k) mix += pi[k] * std::exp(-std::abs(w) / b[k]) / (2.0 * b[k]);
      const double v = log_normal_pdf(w, mu, sd * sd) - std::log(mix);
      acc += v;
      acc2 += v * v;
    }
    const double mean = acc / n, se = std::sqrt((acc2 / n - mean * mean) / n);
    CHECK(bound >= mean - 4.0 * se);
  }
}

TEST_CASE("density profiles") {
  CHECK(prior_logpdf({PriorKind::laplace, 1.0}, 0.0) == doctest::Approx(std::log(0.5)).epsilon(1e-15));
  const PriorComponent hs{PriorKind::horseshoe, 1.0};
  CHECK(prior_logpdf(hs, 1e-6) > prior_logpdf(hs, 1e-3));
  const PriorComponent nj{PriorKind::normal_jeffreys, 1.0};
  for (double w : {1e-5, 3e-3, 0.2, 4.0})
    CHECK(prior_logpdf(nj, w) - prior_logpdf(nj, 2.0 * w) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  for (double w : {-7.0, -0.5, 1e-3, 0.05, 0.8, 3.0, 9.5}) {
    for (double s : {1.0, 0.3}) {
      const double q = oracle::horseshoe_pdf_quadrature(w, s);
      CHECK(std::exp(prior_logpdf({PriorKind::horseshoe, s}, w)) == doctest::Approx(q).epsilon(1e-4));
    }
  }
}

TEST_CASE("profile grid and CSV") {
  const auto grid = profile_grid();
  CHECK(grid.front() == doctest::Approx(-10.0));
  CHECK(grid.back() == doctest::Approx(10.0));
  double min_abs = 1e300;
  for (double w : grid) min_abs = std::min(min_abs, std::abs(w));
  CHECK(min_abs == doctest::Approx(1e-6));
  for (std::size_t i = 0; i < grid.size(); ++i) CHECK(grid[i] == doctest::Approx(-grid[grid.size() - 1 - i]));
  std::ostringstream os;
  const auto comps = profiled_components();
  write_density_profile(os, comps, grid);
  std::istringstream in(os.str());
  std::string header, line;
  std::getline(in, header);
  CHECK(header.rfind("w,", 0) == 0);
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == grid.size());
}

TEST_CASE("mixture spec validation") {
  PriorMixtureSpec s = PriorMixtureSpec::defaults();
  CHECK_NOTHROW(s.validate());
  CHECK(s.size() == 3);
  s.alpha[1] = 0.0;
  CHECK_THROWS(s.validate());
  PriorMixtureSpec dup = PriorMixtureSpec::defaults();
  dup.components[1].kind = PriorKind::horseshoe;
  CHECK_THROWS(dup.validate());
}

}  // TEST_SUITE
