#pragma once

// Scale-mixture-of-normals sparsity priors, their KL divergences against
// Gaussian / log-normal variational posteriors, and the Dirichlet-weighted
// mixture bound that combines them.

#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace sbc::priors {

enum class PriorKind {
  horseshoe,
  laplace,
  normal_jeffreys,
  // Profiled for density plots only; not accepted as mixture components.
  cauchy,
  spike_and_slab,
};

std::string to_string(PriorKind k);
PriorKind prior_kind_from_string(const std::string& s);

struct PriorComponent {
  PriorKind kind = PriorKind::laplace;
  double scale_hyper = 1.0;  // tau (horseshoe), b (Laplace); ignored for normal-Jeffreys
};

/// Default component scale: below e^-6 to put pressure towards sparsity.
inline constexpr double kDefaultComponentScale = 0.000911881965554516;  // e^-7

struct PriorMixtureSpec {
  std::vector<PriorComponent> components;
  std::vector<double> alpha;  // Dirichlet parameters, one per component
  double global_sigma = kDefaultComponentScale;  // horseshoe global scale tau

  static PriorMixtureSpec defaults();
  /// Single-component mixture (alpha = 1).
  static PriorMixtureSpec single(PriorComponent c);
  void validate() const;
  std::size_t size() const { return components.size(); }
  int index_of(PriorKind k) const;
};

struct GaussianPosterior {
  double mu = 0.0;
  double log_var = 0.0;
  double var() const;
  double sd() const;
};

/// Log-normal posterior: ln x ~ N(mu, exp(log_var)).
struct LogNormalPosterior {
  double mu = 0.0;
  double log_var = 0.0;
  double mean() const;
  double second_moment() const;
  double variance() const;
};

/// Posterior over one horseshoe scale z (z² | λ ~ IG(½, 1/λ), λ ~ IG(½, 1/τ²)).
struct HorseshoeScalePosterior {
  LogNormalPosterior scale;  // q(z)
  LogNormalPosterior aux;    // q(λ)
};

// ---- closed-form KL terms with partial derivatives ------------------------

struct GaussianKl {
  double value = 0.0;
  double d_mu = 0.0;
  double d_var = 0.0;    // w.r.t. σ²
  double d_scale = 0.0;  // w.r.t. the prior scale hyperparameter (b)
};

/// KL(N(μ,σ²) ‖ Laplace(0,b)). Throws DomainError for b <= 0.
double kl_laplace(const GaussianPosterior& q, double b);
GaussianKl kl_laplace_grad(double mu, double var, double b);

inline constexpr double kJeffreysK1 = 0.63576;
inline constexpr double kJeffreysK2 = 1.87320;
inline constexpr double kJeffreysK3 = 1.48695;

/// Sigmoid approximation of KL(N(μ,σ²) ‖ log-uniform) as a function of
/// α = σ²/μ². Zero as α → ∞ (μ = 0), decreasing in α.
double kl_jeffreys(const GaussianPosterior& q);
double kl_jeffreys_alpha(double log_alpha);
/// Returns value, d/dμ and d/dσ².
GaussianKl kl_jeffreys_grad(double mu, double var);

/// KL(N(μ,σ²) ‖ N(0,1)), the non-centred weight part of the horseshoe.
GaussianKl kl_std_normal_grad(double mu, double var);

struct ScaleKl {
  double value = 0.0;
  double d_scale_mu = 0.0, d_scale_log_var = 0.0;
  double d_aux_mu = 0.0, d_aux_log_var = 0.0;
  double d_log_tau = 0.0;
};

/// KL(q(z)q(λ) ‖ p(z|λ)p(λ)) for the half-Cauchy(τ) scale hierarchy.
ScaleKl kl_horseshoe_scale(const HorseshoeScalePosterior& q, double tau);

/// Total horseshoe KL of one weight plus its scale auxiliaries.
/// Throws DomainError for non-finite variances or tau <= 0.
double kl_horseshoe(const GaussianPosterior& q_weight, const HorseshoeScalePosterior& q_scale, double tau);

// ---- Dirichlet mixture --------------------------------------------------

/// E[ln π_k] = ψ(α_k) − ψ(Σα) under Dirichlet(α). Throws DomainError for α_k <= 0.
std::vector<double> dirichlet_elogpi(std::span<const double> alpha);
/// ∂E[ln π_k]/∂α_j contracted with `upstream` (one value per k), giving one value per j.
std::vector<double> dirichlet_elogpi_vjp(std::span<const double> alpha, std::span<const double> upstream);

/// r_k ∝ exp(E[ln π_k] − KL_k); minimises mixture_kl_bound over the simplex.
std::vector<double> mixture_responsibilities(std::span<const double> kls, std::span<const double> e_log_pi);

/// Σ_k r_k (KL_k − E[ln π_k] + ln r_k) with 0·ln 0 = 0. Throws ContractError
/// when r is off the simplex by more than 1e-9.
double mixture_kl_bound(std::span<const double> kls, std::span<const double> r, std::span<const double> e_log_pi);

// ---- densities for profiling --------------------------------------------

/// Marginal log-density of w. Horseshoe uses the exponential-integral closed
/// form; normal-Jeffreys is the improper −ln|w|; spike-and-slab mixes
/// N(0, 0.01²) and N(0, 1) equally with its scale multiplying both.
double prior_logpdf(const PriorComponent& c, double w);

/// Symmetric log-spaced grid over ±[lo, hi] with `per_decade` points per decade.
std::vector<double> profile_grid(double lo = 1e-6, double hi = 10.0, int per_decade = 10);

/// CSV with header `w,<kind>...` and one logpdf column per component.
void write_density_profile(std::ostream& os, std::span<const PriorComponent> components, std::span<const double> grid);

/// Components profiled by the `priors` command (unit scales).
std::vector<PriorComponent> profiled_components();

}  // namespace sbc::priors
