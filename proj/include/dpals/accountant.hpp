#pragma once

// Renyi-DP accounting for Gaussian mechanisms.
//
// Every mechanism in this library has an RDP curve of the form
// eps(alpha) = alpha * rho^2, so composition is the sum of the rho^2
// coefficients and the (eps, delta) conversion optimizes alpha in closed
// form.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "dpals/common.hpp"

namespace dpals {

inline constexpr double kDefaultDelta = 1e-5;
inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

namespace detail {
inline void require_delta(double delta) {
  require(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1)");
}
inline void require_sigma(double sigma) {
  if (sigma == 0.0) throw Error("infinite privacy loss");
  require(sigma > 0.0, "noise multiplier must be positive");
}
}  // namespace detail

/// rho^2 of T private item steps with per-user cap k: kT / (2 sigma^2).
inline double dpals_rho_sq(double k, double steps, double sigma) {
  require(k >= 1.0 && steps >= 1.0, "k and T must be at least 1");
  detail::require_sigma(sigma);
  return k * steps / (2.0 * sigma * sigma);
}

/// Two noisy count releases plus the noisy mean: (2k + 2) / (2 sigma_p^2).
inline double preprocessing_rho_sq(double k, double sigma_p) {
  require(k >= 1.0, "k must be at least 1");
  detail::require_sigma(sigma_p);
  return (k + 1.0) / (sigma_p * sigma_p);
}

/// One release of the shared global Gramian per step: T / (2 sigma_G^2).
inline double gramian_rho_sq(double steps, double sigma_G) {
  require(steps >= 0.0, "T must be nonnegative");
  detail::require_sigma(sigma_G);
  return steps / (2.0 * sigma_G * sigma_G);
}

/// Noisy power iteration: T s^3 Gamma_M^4 nu^2 / (2 m sigma^2).
inline double power_iteration_rho_sq(double steps, double s, double gamma_M, double nu_incoh, double m,
                                     double sigma_init) {
  require(steps > 0.0 && s > 0.0 && nu_incoh > 0.0 && m > 0.0 && gamma_M >= 0.0,
          "power iteration parameters must be positive");
  detail::require_sigma(sigma_init);
  return steps * s * s * s * std::pow(gamma_M, 4) * nu_incoh * nu_incoh / (2.0 * m * sigma_init * sigma_init);
}

/// Smallest eps over alpha > 1 of alpha rho^2 + ln(1/delta) / (alpha - 1),
/// i.e. 2 sqrt(ln(1/delta)) rho + rho^2, reached at alpha = 1 + sqrt(ln(1/delta)) / rho.
inline double rdp_to_dp(double total_rho_sq, double delta) {
  require(total_rho_sq >= 0.0, "rho^2 must be nonnegative");
  detail::require_delta(delta);
  if (std::isinf(total_rho_sq)) return kInfinity;
  const double rho = std::sqrt(total_rho_sq);
  return 2.0 * std::sqrt(std::log(1.0 / delta)) * rho + total_rho_sq;
}

/// The Renyi order at which rdp_to_dp's minimum is attained.
inline double optimal_rdp_order(double total_rho_sq, double delta) {
  detail::require_delta(delta);
  if (total_rho_sq <= 0.0) return kInfinity;
  return 1.0 + std::sqrt(std::log(1.0 / delta)) / std::sqrt(total_rho_sq);
}

/// Sufficient sigma for (eps, delta) over T steps with per-user cap k:
/// sqrt(2kT (eps + ln(1/delta))) / eps.
inline double sigma_for_epsilon_closed_form(double k, double steps, double epsilon, double delta) {
  require(epsilon > 0.0, "epsilon must be positive");
  require(k >= 1.0 && steps >= 1.0, "k and T must be at least 1");
  detail::require_delta(delta);
  return std::sqrt(2.0 * k * steps * (epsilon + std::log(1.0 / delta))) / epsilon;
}

struct LedgerEntry {
  std::string label;
  double rho_sq = 0.0;
  std::string run_token;  // empty for entries not tied to a training run
};

/// Append-only list of Gaussian-mechanism charges.
class RdpLedger {
 public:
  explicit RdpLedger(double delta = kDefaultDelta) : delta_(delta) { detail::require_delta(delta); }

  void append(std::string label, double rho_sq, std::string run_token = {}) {
    require(rho_sq >= 0.0, "rho^2 must be nonnegative");
    entries_.push_back({std::move(label), rho_sq, std::move(run_token)});
  }

  bool has_token(const std::string& run_token) const {
    return !run_token.empty() && std::any_of(entries_.begin(), entries_.end(),
                                             [&](const LedgerEntry& e) { return e.run_token == run_token; });
  }

  const std::vector<LedgerEntry>& entries() const { return entries_; }
  double delta() const { return delta_; }

  double total_rho_sq() const {
    double total = 0.0;
    for (const auto& e : entries_) total += e.rho_sq;
    return total;
  }
  double epsilon() const { return rdp_to_dp(total_rho_sq(), delta_); }

 private:
  std::vector<LedgerEntry> entries_;
  double delta_;
};

/// A ledger in which some entries scale as coefficient / sigma^2 in one
/// shared noise multiplier and the rest are fixed.
class LedgerTemplate {
 public:
  struct Term {
    std::string label;
    double coefficient = 0.0;
    bool scales_with_sigma = true;
  };

  void add_scaled(std::string label, double coefficient) {
    require(coefficient >= 0.0, "coefficient must be nonnegative");
    terms_.push_back({std::move(label), coefficient, true});
  }
  void add_fixed(std::string label, double rho_sq) {
    require(rho_sq >= 0.0, "rho^2 must be nonnegative");
    terms_.push_back({std::move(label), rho_sq, false});
  }

  const std::vector<Term>& terms() const { return terms_; }

  double fixed_rho_sq() const {
    double total = 0.0;
    for (const auto& t : terms_)
      if (!t.scales_with_sigma) total += t.coefficient;
    return total;
  }
  double scaled_coefficient() const {
    double total = 0.0;
    for (const auto& t : terms_)
      if (t.scales_with_sigma) total += t.coefficient;
    return total;
  }
  double total_rho_sq(double sigma) const { return fixed_rho_sq() + scaled_coefficient() / (sigma * sigma); }

  RdpLedger instantiate(double sigma, double delta) const {
    RdpLedger ledger(delta);
    for (const auto& t : terms_)
      ledger.append(t.label, t.scales_with_sigma ? t.coefficient / (sigma * sigma) : t.coefficient);
    return ledger;
  }

 private:
  std::vector<Term> terms_;
};

/// Binary search for the smallest sigma whose composed epsilon stays within
/// the target. The returned sigma always satisfies eps(sigma) <= target and
/// |eps(sigma) - target| <= 1e-6 * target.
inline double solve_sigma_for_budget(const LedgerTemplate& ledger, double target_epsilon, double delta) {
  require(target_epsilon > 0.0, "epsilon must be positive");
  detail::require_delta(delta);
  const double coefficient = ledger.scaled_coefficient();
  require(coefficient > 0.0, "ledger template has no sigma-dependent entry");
  if (rdp_to_dp(ledger.fixed_rho_sq(), delta) >= target_epsilon) {
    throw Error("budget exhausted by fixed mechanisms");
  }
  auto eps_at = [&](double sigma) { return rdp_to_dp(ledger.total_rho_sq(sigma), delta); };

  // Geometric bracketing: eps(lo) > target >= eps(hi).
  double lo = 1.0, hi = 1.0;
  while (eps_at(hi) > target_epsilon) hi *= 2.0;
  lo = hi;
  while (eps_at(lo) <= target_epsilon) lo /= 2.0;

  for (int iter = 0; iter < 200; ++iter) {
    const double mid = std::sqrt(lo * hi);
    if (eps_at(mid) > target_epsilon) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (target_epsilon - eps_at(hi) <= 1e-7 * target_epsilon) break;
  }
  return hi;
}

}  // namespace dpals
