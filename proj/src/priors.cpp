#include "sbc/priors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/expint.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include "sbc/errors.hpp"

namespace sbc::priors {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kLn2PiE = 2.8378770664093453;  // ln(2πe)

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double normal_pdf(double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi); }

void require_finite_variance(double log_var, const char* what) {
  if (!std::isfinite(log_var)) throw DomainError(std::string(what) + ": variational variance must be positive and finite");
}

// ln(e^x E1(x)) for x > 0.
double log_scaled_expint(double x) {
  if (x < 50.0) return x + std::log(boost::math::expint(1, x));
  // Asymptotic series e^x E1(x) ~ (1/x) Σ (-1)^n n! / x^n; 12 terms are exact to double precision here.
  double term = 1.0, acc = 1.0;
  for (int n = 1; n < 12; ++n) {
    term *= -static_cast<double>(n) / x;
    acc += term;
  }
  return std::log(acc / x);
}

}  // namespace

std::string to_string(PriorKind k) {
  switch (k) {
    case PriorKind::horseshoe: return "horseshoe";
    case PriorKind::laplace: return "laplace";
    case PriorKind::normal_jeffreys: return "normal_jeffreys";
    case PriorKind::cauchy: return "cauchy";
    case PriorKind::spike_and_slab: return "spike_and_slab";
  }
  return "unknown";
}

PriorKind prior_kind_from_string(const std::string& s) {
  for (PriorKind k : {PriorKind::horseshoe, PriorKind::laplace, PriorKind::normal_jeffreys, PriorKind::cauchy,
                      PriorKind::spike_and_slab}) {
    if (to_string(k) == s) return k;
  }
  if (s == "jeffreys") return PriorKind::normal_jeffreys;
  throw DomainError("unknown prior kind '" + s + "'");
}

PriorMixtureSpec PriorMixtureSpec::defaults() {
  PriorMixtureSpec spec;
  spec.components = {{PriorKind::horseshoe, kDefaultComponentScale},
                     {PriorKind::laplace, kDefaultComponentScale},
                     {PriorKind::normal_jeffreys, 1.0}};
  spec.alpha = {1.0, 1.0, 1.0};
  spec.global_sigma = kDefaultComponentScale;
  return spec;
}

PriorMixtureSpec PriorMixtureSpec::single(PriorComponent c) {
  PriorMixtureSpec spec;
  spec.components = {c};
  spec.alpha = {1.0};
  spec.global_sigma = c.kind == PriorKind::horseshoe ? c.scale_hyper : kDefaultComponentScale;
  return spec;
}

void PriorMixtureSpec::validate() const {
  if (components.empty()) throw DomainError("prior mixture needs at least one component");
  if (alpha.size() != components.size()) throw DimensionError("prior mixture: one alpha per component required");
  for (std::size_t i = 0; i < components.size(); ++i) {
    const PriorKind k = components[i].kind;
    if (k == PriorKind::cauchy || k == PriorKind::spike_and_slab) {
      throw DomainError(to_string(k) + " is profiled only and cannot be a mixture component");
    }
    for (std::size_t j = 0; j < i; ++j)
      if (components[j].kind == k) throw DomainError("duplicate prior component " + to_string(k));
    if (k != PriorKind::normal_jeffreys && !(components[i].scale_hyper > 0.0)) {
      throw DomainError(to_string(k) + " scale must be positive");
    }
    if (!(alpha[i] > 0.0)) throw DomainError("Dirichlet alpha must be positive");
  }
  if (index_of(PriorKind::horseshoe) >= 0 && !(global_sigma > 0.0)) throw DomainError("horseshoe tau must be positive");
}

int PriorMixtureSpec::index_of(PriorKind k) const {
  for (std::size_t i = 0; i < components.size(); ++i)
    if (components[i].kind == k) return static_cast<int>(i);
  return -1;
}

double GaussianPosterior::var() const { return std::exp(log_var); }
double GaussianPosterior::sd() const { return std::exp(0.5 * log_var); }

double LogNormalPosterior::mean() const { return std::exp(mu + 0.5 * std::exp(log_var)); }
double LogNormalPosterior::second_moment() const { return std::exp(2.0 * mu + 2.0 * std::exp(log_var)); }
double LogNormalPosterior::variance() const {
  const double m = mean();
  return m * m * std::expm1(std::exp(log_var));
}

GaussianKl kl_laplace_grad(double mu, double var, double b) {
  if (!(b > 0.0)) throw DomainError("kl_laplace: scale b must be positive");
  if (!(var > 0.0) || !std::isfinite(var)) throw DomainError("kl_laplace: variance must be positive");
  const double s = std::sqrt(var);
  const double t = mu / s;
  const double phi = normal_pdf(t);
  const double erf_t = std::erf(t / std::numbers::sqrt2);
  const double abs_mean = 2.0 * s * phi + mu * erf_t;
  GaussianKl out;
  out.value = -0.5 * (kLn2PiE + std::log(var)) + std::log(2.0 * b) + abs_mean / b;
  out.d_mu = erf_t / b;
  out.d_var = -0.5 / var + phi / (b * s);
  out.d_scale = 1.0 / b - abs_mean / (b * b);
  return out;
}

double kl_laplace(const GaussianPosterior& q, double b) {
  require_finite_variance(q.log_var, "kl_laplace");
  return kl_laplace_grad(q.mu, q.var(), b).value;
}

double kl_jeffreys_alpha(double log_alpha) {
  if (log_alpha == kInf) return 0.0;
  return kJeffreysK1 - kJeffreysK1 * sigmoid(kJeffreysK2 + kJeffreysK3 * log_alpha) + 0.5 * softplus(-log_alpha);
}

GaussianKl kl_jeffreys_grad(double mu, double var) {
  GaussianKl out;
  if (mu == 0.0) return out;
  const double log_alpha = std::log(var) - std::log(mu * mu);
  const double s = sigmoid(kJeffreysK2 + kJeffreysK3 * log_alpha);
  out.value = kl_jeffreys_alpha(log_alpha);
  const double d_log_alpha = -kJeffreysK1 * kJeffreysK3 * s * (1.0 - s) - 0.5 * sigmoid(-log_alpha);
  out.d_mu = d_log_alpha * (-2.0 / mu);
  out.d_var = d_log_alpha / var;
  return out;
}

double kl_jeffreys(const GaussianPosterior& q) {
  if (q.mu == 0.0) return 0.0;
  require_finite_variance(q.log_var, "kl_jeffreys");
  return kl_jeffreys_alpha(q.log_var - std::log(q.mu * q.mu));
}

GaussianKl kl_std_normal_grad(double mu, double var) {
  GaussianKl out;
  out.value = 0.5 * (var + mu * mu - 1.0 - std::log(var));
  out.d_mu = mu;
  out.d_var = 0.5 * (1.0 - 1.0 / var);
  return out;
}

ScaleKl kl_horseshoe_scale(const HorseshoeScalePosterior& q, double tau) {
  if (!(tau > 0.0)) throw DomainError("kl_horseshoe: tau must be positive");
  require_finite_variance(q.scale.log_var, "kl_horseshoe");
  require_finite_variance(q.aux.log_var, "kl_horseshoe");
  const double m = q.scale.mu, vz = std::exp(q.scale.log_var);
  const double ml = q.aux.mu, vl = std::exp(q.aux.log_var);
  const double log_tau = std::log(tau);
  // E1 = E[1/λ]·E[1/z²], E2 = E[1/λ]/τ²
  const double e1 = std::exp(-ml + 0.5 * vl - 2.0 * m + 2.0 * vz);
  const double e2 = std::exp(-ml + 0.5 * vl - 2.0 * log_tau);
  ScaleKl out;
  out.value = m + ml - 0.5 * (kLn2PiE + std::log(4.0) + q.scale.log_var) - 0.5 * (kLn2PiE + q.aux.log_var) +
              std::log(std::numbers::pi) + log_tau + e1 + e2;
  out.d_scale_mu = 1.0 - 2.0 * e1;
  out.d_scale_log_var = -0.5 + 2.0 * vz * e1;
  out.d_aux_mu = 1.0 - e1 - e2;
  out.d_aux_log_var = -0.5 + 0.5 * vl * (e1 + e2);
  out.d_log_tau = 1.0 - 2.0 * e2;
  return out;
}

double kl_horseshoe(const GaussianPosterior& q_weight, const HorseshoeScalePosterior& q_scale, double tau) {
  require_finite_variance(q_weight.log_var, "kl_horseshoe");
  return kl_std_normal_grad(q_weight.mu, q_weight.var()).value + kl_horseshoe_scale(q_scale, tau).value;
}

std::vector<double> dirichlet_elogpi(std::span<const double> alpha) {
  double total = 0.0;
  for (double a : alpha) {
    if (!(a > 0.0)) throw DomainError("dirichlet_elogpi: alpha must be positive");
    total += a;
  }
  const double psi_total = boost::math::digamma(total);
  std::vector<double> out;
  out.reserve(alpha.size());
  for (double a : alpha) out.push_back(boost::math::digamma(a) - psi_total);
  return out;
}

std::vector<double> dirichlet_elogpi_vjp(std::span<const double> alpha, std::span<const double> upstream) {
  double total = 0.0, up_total = 0.0;
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    total += alpha[k];
    up_total += upstream[k];
  }
  const double tri_total = boost::math::trigamma(total);
  std::vector<double> out(alpha.size());
  for (std::size_t j = 0; j < alpha.size(); ++j) out[j] = upstream[j] * boost::math::trigamma(alpha[j]) - tri_total * up_total;
  return out;
}

std::vector<double> mixture_responsibilities(std::span<const double> kls, std::span<const double> e_log_pi) {
  if (kls.size() != e_log_pi.size()) throw DimensionError("mixture_responsibilities: length mismatch");
  std::vector<double> r(kls.size());
  double mx = -kInf;
  for (std::size_t k = 0; k < kls.size(); ++k) {
    r[k] = e_log_pi[k] - kls[k];
    mx = std::max(mx, r[k]);
  }
  double total = 0.0;
  for (double& v : r) {
    v = std::exp(v - mx);
    total += v;
  }
  for (double& v : r) v /= total;
  return r;
}

double mixture_kl_bound(std::span<const double> kls, std::span<const double> r, std::span<const double> e_log_pi) {
  if (kls.size() != r.size() || kls.size() != e_log_pi.size()) throw DimensionError("mixture_kl_bound: length mismatch");
  double total = 0.0;
  for (double v : r) {
    if (v < -1e-9) throw ContractError("mixture_kl_bound: responsibilities must be nonnegative");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ContractError("mixture_kl_bound: responsibilities must sum to 1");
  double bound = 0.0;
  for (std::size_t k = 0; k < r.size(); ++k) {
    if (r[k] <= 0.0) continue;
    bound += r[k] * (kls[k] - e_log_pi[k] + std::log(r[k]));
  }
  return bound;
}

double prior_logpdf(const PriorComponent& c, double w) {
  const double s = c.scale_hyper;
  const double aw = std::abs(w);
  switch (c.kind) {
    case PriorKind::laplace: return -std::log(2.0 * s) - aw / s;
    case PriorKind::normal_jeffreys: return -std::log(aw);
    case PriorKind::cauchy: return -std::log(std::numbers::pi * s * (1.0 + (w / s) * (w / s)));
    case PriorKind::horseshoe: {
      if (aw == 0.0) return kInf;
      const double x = w * w / (2.0 * s * s);
      return -std::log(s) - 0.5 * std::log(2.0 * std::pow(std::numbers::pi, 3)) + log_scaled_expint(x);
    }
    case PriorKind::spike_and_slab: {
      const double spike = 0.01 * s, slab = s;
      const double a = -0.5 * (w / spike) * (w / spike) - std::log(spike);
      const double b = -0.5 * (w / slab) * (w / slab) - std::log(slab);
      const double mx = std::max(a, b);
      return mx + std::log(0.5 * std::exp(a - mx) + 0.5 * std::exp(b - mx)) - 0.5 * std::log(2.0 * std::numbers::pi);
    }
  }
  return std::numeric_limits<double>::quiet_NaN();
}

std::vector<double> profile_grid(double lo, double hi, int per_decade) {
  const double l0 = std::log10(lo), l1 = std::log10(hi);
  const int steps = static_cast<int>(std::lround((l1 - l0) * per_decade));
  std::vector<double> pos;
  for (int i = 0; i <= steps; ++i) pos.push_back(std::pow(10.0, l0 + (l1 - l0) * i / steps));
  pos.front() = lo;
  pos.back() = hi;
  std::vector<double> grid;
  for (auto it = pos.rbegin(); it != pos.rend(); ++it) grid.push_back(-*it);
  grid.insert(grid.end(), pos.begin(), pos.end());
  return grid;
}

std::vector<PriorComponent> profiled_components() {
  return {{PriorKind::horseshoe, 1.0},
          {PriorKind::laplace, 1.0},
          {PriorKind::normal_jeffreys, 1.0},
          {PriorKind::cauchy, 1.0},
          {PriorKind::spike_and_slab, 1.0}};
}

void write_density_profile(std::ostream& os, std::span<const PriorComponent> components, std::span<const double> grid) {
  os << "w";
  for (const auto& c : components) os << ',' << to_string(c.kind);
  os << '\n';
  char buf[64];
  for (double w : grid) {
    std::snprintf(buf, sizeof buf, "%.17g", w);
    os << buf;
    for (const auto& c : components) {
      std::snprintf(buf, sizeof buf, "%.17g", prior_logpdf(c, w));
      os << ',' << buf;
    }
    os << '\n';
  }
}

}  // namespace sbc::priors
