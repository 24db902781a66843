#pragma once

// Initial item factors: random orthonormal and private noisy power iteration
// (rank 1 and a block variant for rank r).

#include <cmath>
#include <string>

#include "dpals/accountant.hpp"
#include "dpals/dataset.hpp"
#include "dpals/linalg.hpp"

namespace dpals {

/// Gaussian m x r matrix, then orthonormalized.
inline FactorMatrix random_orthonormal_init(std::size_t m, std::size_t r, std::uint64_t seed) {
  require(r >= 1 && r <= m, "rank must lie in [1, m]");
  const FactorMatrix g =
      random_gaussian_matrix(RngStream(seed).with(Phase::kRandomInit), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(r));
  return orthonormalize_columns(g);
}

/// ||w||_inf <= nu / sqrt(m), inclusive.
inline bool incoherence_check(const Eigen::Ref<const Vector>& w, double nu) {
  const double m = static_cast<double>(w.size());
  return w.cwiseAbs().maxCoeff() <= nu / std::sqrt(m);
}

struct PowerIterConfig {
  std::size_t T_init = 1;
  double nu_incoh = 1.0;
  std::size_t s = 1;  // per-user cap the sensitivity is computed for
  double gamma_M = 1.0;
  double sigma_init = 0.0;  // absolute noise std per coordinate
  std::uint64_t seed = 0;

  void validate() const {
    require(T_init >= 1 && s >= 1, "T and s must be at least 1");
    require(nu_incoh >= 1.0, "nu must be at least 1");
    require(gamma_M > 0.0 && sigma_init >= 0.0, "Gamma_M must be positive and sigma nonnegative");
  }
};

struct PowerIterResult {
  bool success = false;
  FactorMatrix V;                   // m x r, orthonormal columns on success
  std::size_t failed_iteration = 0; // 1-based step that failed the check
  double rho_sq = 0.0;              // charged for the configured T regardless of failure
  std::string message;
};

/// y = P(M) x and z = P(M)^T y, two sparse passes.
inline Matrix gram_apply(const RatingsDataset& ds, const Matrix& x) {
  Matrix y = Matrix::Zero(static_cast<Eigen::Index>(ds.n()), x.cols());
  for (std::size_t i = 0; i < ds.n(); ++i)
    for (const auto& r : ds.user_row(i)) y.row(static_cast<Eigen::Index>(i)) += r.value * x.row(r.item);
  Matrix z = Matrix::Zero(x.rows(), x.cols());
  for (const auto& r : ds.observations()) z.row(r.item) += r.value * y.row(r.user);
  return z;
}

namespace detail {

inline void check_power_input(const RatingsDataset& ds, const PowerIterConfig& cfg) {
  cfg.validate();
  require(ds.max_user_count() <= cfg.s, "per-user observations exceed s");
  for (const auto& r : ds.observations())
    require(std::abs(r.value) <= cfg.gamma_M, "entries exceed Gamma_M");
}

}  // namespace detail

/// Block orthogonal iteration with Gaussian noise on every step. Column c
/// draws its start and noise from entity c, so r = 1 reproduces the rank-1
/// procedure. Charges r rank-1 budgets.
inline PowerIterResult noisy_subspace_init(const RatingsDataset& ds, std::size_t r, const PowerIterConfig& cfg) {
  detail::check_power_input(ds, cfg);
  require(r >= 1 && r <= ds.m(), "rank must lie in [1, m]");
  const RngStream base(cfg.seed);
  const auto m = static_cast<Eigen::Index>(ds.m());
  const auto cols = static_cast<Eigen::Index>(r);

  PowerIterResult out;
  out.rho_sq = cfg.sigma_init > 0.0
                   ? static_cast<double>(r) * power_iteration_rho_sq(static_cast<double>(cfg.T_init), static_cast<double>(cfg.s),
                                                                       cfg.gamma_M, cfg.nu_incoh, static_cast<double>(ds.m()), cfg.sigma_init)
                   : kInfinity;

  Matrix w = random_gaussian_matrix(base.with(Phase::kPowerIterationStart), m, cols);
  for (Eigen::Index c = 0; c < cols; ++c) w.col(c).normalize();
  if (r > 1) w = orthonormalize_columns(w);

  for (std::size_t t = 1; t <= cfg.T_init; ++t) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      if (!incoherence_check(w.col(c), cfg.nu_incoh)) {
        out.failed_iteration = t;
        out.message = "incoherence check failed at step " + std::to_string(t) + ", column " + std::to_string(c);
        return out;
      }
    }
    Matrix z = gram_apply(ds, w);
    if (cfg.sigma_init > 0.0) {
      const RngStream noise = base.with(Phase::kPowerIteration, static_cast<std::uint32_t>(t));
      for (Eigen::Index c = 0; c < cols; ++c)
        z.col(c) += sample_gaussian_vector(noise.with_entity(static_cast<std::uint32_t>(c)), m, cfg.sigma_init);
    }
    if (r == 1) {
      const double norm = z.col(0).norm();
      if (!(norm > 0.0)) throw Error("zero-norm iterate at step " + std::to_string(t));
      w = z / norm;
    } else {
      try {
        w = orthonormalize_columns(z);
      } catch (const Error&) {
        throw Error("zero-norm iterate at step " + std::to_string(t));
      }
    }
  }
  out.success = true;
  out.V = w;
  return out;
}

/// Rank-1 noisy power iteration; the result's V has a single column.
inline PowerIterResult noisy_power_iteration(const RatingsDataset& ds, const PowerIterConfig& cfg) {
  return noisy_subspace_init(ds, 1, cfg);
}

}  // namespace dpals
