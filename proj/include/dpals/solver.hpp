#pragma once

// Alternating least squares: the exact solver, the private variant in which
// the item step is released through the Gaussian mechanism, and test-time
// fold-in of new users.
//
// Loss (weights w_i, w_j normalized to mean one over users / items):
//   sum_{(i,j) in Omega} (M_ij - U_i.V_j)^2 + lambda0 ||U V^T||_F^2
//     + lambda sum_i w_i ||U_i||^2 + lambda sum_j w_j ||V_j||^2

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpals/accountant.hpp"
#include "dpals/dataset.hpp"
#include "dpals/factors.hpp"
#include "dpals/linalg.hpp"
#include "dpals/preprocess.hpp"

namespace dpals {

struct LossHyperParams {
  double lambda = 0.0;
  double lambda0 = 0.0;
  double mu_exp = 0.0;  // item regularization exponent
  double nu_exp = 0.0;  // user regularization exponent
  std::size_t steps = 1;

  void validate() const {
    require(lambda >= 0.0 && lambda0 >= 0.0, "regularization coefficients must be nonnegative");
    require(mu_exp >= 0.0 && nu_exp >= 0.0, "regularization exponents must be nonnegative");
  }
};

struct NoiseParams {
  double gamma_u = 1.0;        // row clip for user embeddings
  double gamma_M = 1.0;        // entry clip
  std::size_t k = kUnlimited;  // per-user cap in the item step
  double sigma_G = 0.0;        // Gramian noise multiplier
  double sigma_g = 0.0;        // right-hand-side noise multiplier
  bool user_subsample = false;           // 1/T subsample inside the user step
  bool resample_each_iteration = false;  // redraw the k-per-user sample every step

  void validate() const {
    require(gamma_u > 0.0 && gamma_M > 0.0, "clip parameters must be positive");
    require(k >= 1, "k must be at least 1");
    require(sigma_G >= 0.0 && sigma_g >= 0.0, "noise multipliers must be nonnegative");
  }
};

/// w_j = max(c_j, 1)^e / ((1/m) sum_l max(c_l, 1)^e). Counts are clamped at 1
/// because noisy counts can be zero or negative.
inline std::vector<double> regularization_weights(std::span<const double> counts, double exponent) {
  std::vector<double> w(counts.size(), 1.0);
  if (counts.empty() || exponent == 0.0) return w;
  double total = 0.0;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    w[j] = std::pow(std::max(counts[j], 1.0), exponent);
    total += w[j];
  }
  const double normalizer = total / static_cast<double>(counts.size());
  for (double& x : w) x /= normalizer;
  return w;
}

/// The shared lambda0 * F^T F term.
inline SymMatrix global_gram(const FactorMatrix& f, double lambda0) {
  SymMatrix g(f.cols());
  if (lambda0 == 0.0) return g;
  return SymMatrix::from_upper(lambda0 * (f.transpose() * f));
}

namespace detail {

/// Solves (lambda_eff I + global + sum_k f_k f_k^T) x = sum_k y_k f_k where
/// visit(sink) calls sink(row_index, y) once per observation.
template <class Visit>
Vector solve_normal_equations(const FactorMatrix& f, Visit&& visit, double lambda_eff, const SymMatrix& global) {
  const Eigen::Index r = f.cols();
  Matrix a = global.order() == r ? global.matrix() : Matrix::Zero(r, r);
  Vector b = Vector::Zero(r);
  visit([&](std::size_t index, double y) {
    const auto row = f.row(static_cast<Eigen::Index>(index)).transpose();
    a.selfadjointView<Eigen::Lower>().rankUpdate(row);
    b.noalias() += y * row;
  });
  a.diagonal().array() += lambda_eff;
  a.triangularView<Eigen::StrictlyUpper>() = a.transpose();
  Eigen::LDLT<Matrix> ldlt(a);
  const double cutoff = static_cast<double>(r) * std::numeric_limits<double>::epsilon();
  const Vector d = ldlt.vectorD();
  if (ldlt.info() != Eigen::Success || !(d.minCoeff() > cutoff * d.maxCoeff()) || !(ldlt.rcond() > cutoff)) {
    throw Error("ill-posed user solve");
  }
  return ldlt.solve(b);
}

}  // namespace detail

/// argmin_u sum_{j in row} (M_ij - u.V_j)^2 + lambda0 ||u V^T||^2 + lambda_eff ||u||^2,
/// with `global` holding lambda0 V^T V.
inline Vector solve_user_embedding(const FactorMatrix& V, std::span<const Rating> row, double lambda_eff,
                                   const SymMatrix& global) {
  require(lambda_eff >= 0.0, "effective lambda must be nonnegative");
  return detail::solve_normal_equations(
      V, [&](auto&& sink) { for (const auto& r : row) sink(r.item, r.value); }, lambda_eff, global);
}

/// Unclipped test-time embedding for a user from their query ratings.
inline Vector fold_in_user(const FactorMatrix& V, std::span<const Rating> query, double lambda_eff,
                           const SymMatrix& global) {
  if (query.empty() && lambda_eff > 0.0) return Vector::Zero(V.cols());
  if (query.empty() && global.order() == 0) throw Error("ill-posed user solve");
  return solve_user_embedding(V, query, lambda_eff, global);
}

/// The private user step: optional 1/T subsample, exact solve, clip to Gamma_u.
inline Vector a_user(const FactorMatrix& V, std::span<const Rating> row, double lambda_eff, const SymMatrix& global,
                     const NoiseParams& noise, std::size_t steps, const RngStream& stream) {
  if (noise.user_subsample && steps > 1 && row.size() > 1) {
    const std::size_t keep = (row.size() + steps - 1) / steps;
    CounterRng rng = stream.generator();
    std::vector<Rating> sub;
    for (auto p : detail::sample_without_replacement(rng, row.size(), keep)) sub.push_back(row[p]);
    return clip_vector(solve_user_embedding(V, sub, lambda_eff, global), noise.gamma_u);
  }
  return clip_vector(solve_user_embedding(V, row, lambda_eff, global), noise.gamma_u);
}

/// Solves every user against fixed V. With `noise`, this is the private
/// user step (clipped); without, the exact / privileged solve.
inline FactorMatrix user_sweep(const RatingsDataset& ds, const FactorMatrix& V, const LossHyperParams& hyper,
                               std::span<const double> user_weights, const NoiseParams* noise = nullptr,
                               const RngStream& stream = {}) {
  const SymMatrix global = global_gram(V, hyper.lambda0);
  FactorMatrix U(static_cast<Eigen::Index>(ds.n()), V.cols());
  const auto n = static_cast<std::ptrdiff_t>(ds.n());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto user = static_cast<std::size_t>(i);
    const double lambda_eff = hyper.lambda * user_weights[user];
    if (noise) {
      U.row(i) = a_user(V, ds.user_row(user), lambda_eff, global, *noise, hyper.steps,
                        stream.with_entity(static_cast<std::uint32_t>(user)))
                     .transpose();
    } else {
      U.row(i) = fold_in_user(V, ds.user_row(user), lambda_eff, global).transpose();
    }
  }
  return U;
}

/// Exact item step: argmin over V with U fixed (no orthonormalization).
inline FactorMatrix item_sweep_exact(const RatingsDataset& ds, const FactorMatrix& U, const LossHyperParams& hyper,
                                     std::span<const double> item_weights) {
  const SymMatrix global = global_gram(U, hyper.lambda0);
  FactorMatrix V(static_cast<Eigen::Index>(ds.m()), U.cols());
  const auto obs = ds.observations();
  const auto m = static_cast<std::ptrdiff_t>(ds.m());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t j = 0; j < m; ++j) {
    const auto item = static_cast<std::size_t>(j);
    const double lambda_eff = hyper.lambda * item_weights[item];
    const auto column = ds.item_column(item);
    if (column.empty() && lambda_eff > 0.0) {
      V.row(j).setZero();
      continue;
    }
    V.row(j) = detail::solve_normal_equations(
                   U, [&](auto&& sink) { for (auto k : column) sink(obs[k].user, obs[k].value); }, lambda_eff, global)
                   .transpose();
  }
  return V;
}

/// K~ = lambda0 sum_i U_i U_i^T + N_sym(0, (lambda0 Gamma_u^2 sigma_G)^2); one
/// draw per step, shared by every item.
inline SymMatrix noisy_gramian_term(const FactorMatrix& U, double lambda0, double gamma_u, double sigma_G,
                                    const RngStream& stream) {
  SymMatrix k = global_gram(U, lambda0);
  if (lambda0 == 0.0) return k;
  k += sample_symmetric_gaussian(stream, U.cols(), lambda0 * gamma_u * gamma_u * sigma_G);
  return k;
}

/// The private item step. For each item j:
///   X_j = lambda_j I + K~ + sum_{i in Omega'_j} U_i U_i^T + G_j
///   V_j = PSD(X_j)^+ (sum_{i in Omega'_j} M_ij U_i + g_j)
/// then V = V~ (V~^T V~)^{-1/2}. G_j and g_j come from streams keyed by
/// (iteration, j, attempt), so the result does not depend on item order.
/// Items outside `active` (when given) get a zero row and no noise.
inline FactorMatrix a_item(const FactorMatrix& U, const RatingsDataset& ds_capped, std::span<const double> item_lambdas,
                           const SymMatrix& k_tilde, const NoiseParams& noise, const RngStream& stream,
                           std::uint32_t iteration, std::uint32_t attempt = 0,
                           const std::vector<bool>* active = nullptr,
                           std::span<const std::uint32_t> item_order = {}) {
  const Eigen::Index r = U.cols();
  const std::size_t m = ds_capped.m();
  require(item_lambdas.size() == m, "item lambdas must have length m");
  const double std_G = noise.gamma_u * noise.gamma_u * noise.sigma_G;
  const double std_g = noise.gamma_u * noise.gamma_M * noise.sigma_g;
  const auto obs = ds_capped.observations();
  FactorMatrix v_tilde = FactorMatrix::Zero(static_cast<Eigen::Index>(m), r);
  const auto count = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pos = 0; pos < count; ++pos) {
    const std::size_t j = item_order.empty() ? static_cast<std::size_t>(pos) : item_order[static_cast<std::size_t>(pos)];
    if (active && !(*active)[j]) continue;
    const auto entity = static_cast<std::uint32_t>(j);
    Matrix x = k_tilde.order() == r ? k_tilde.matrix() : Matrix::Zero(r, r);
    Vector b = Vector::Zero(r);
    for (auto idx : ds_capped.item_column(j)) {
      const auto row = U.row(obs[idx].user).transpose();
      x.selfadjointView<Eigen::Lower>().rankUpdate(row);
      b.noalias() += obs[idx].value * row;
    }
    x.triangularView<Eigen::StrictlyUpper>() = x.transpose();
    x.diagonal().array() += item_lambdas[j];
    SymMatrix xs = SymMatrix::from_upper(x);
    xs += sample_symmetric_gaussian(stream.with(Phase::kGramian, iteration, entity, attempt), r, std_G);
    b += sample_gaussian_vector(stream.with(Phase::kRhsNoise, iteration, entity, attempt), r, std_g);
    v_tilde.row(static_cast<Eigen::Index>(j)) = projected_pseudo_solve(xs, b).transpose();
  }
  return orthonormalize_columns(v_tilde);
}

/// Training objective under the weighted loss.
inline double objective(const RatingsDataset& ds, const FactorPair& f, const LossHyperParams& hyper,
                        std::span<const double> user_weights, std::span<const double> item_weights) {
  double loss = 0.0;
  for (const auto& r : ds.observations()) {
    const double e = r.value - f.predict(r.user, r.item);
    loss += e * e;
  }
  if (hyper.lambda0 > 0.0) {
    loss += hyper.lambda0 * ((f.U.transpose() * f.U) * (f.V.transpose() * f.V)).trace();
  }
  if (hyper.lambda > 0.0) {
    for (Eigen::Index i = 0; i < f.U.rows(); ++i) loss += hyper.lambda * user_weights[i] * f.U.row(i).squaredNorm();
    for (Eigen::Index j = 0; j < f.V.rows(); ++j) loss += hyper.lambda * item_weights[j] * f.V.row(j).squaredNorm();
  }
  return loss;
}

/// Called after each completed alternating step with the step index and
/// the current item factors.
using IterationObserver = std::function<void(std::size_t, const FactorMatrix&)>;

struct AlsOptions {
  std::optional<std::vector<double>> item_counts;  // default: exact counts of ds
  bool record_objective = false;
  IterationObserver on_iteration;
};

struct AlsResult {
  FactorPair factors;
  std::vector<double> objective_trace;  // after every half step when recorded
};

/// Exact alternating least squares: `steps` rounds of {user solve, item
/// solve} from init_V, followed by a final user solve. steps == 0 returns
/// init_V and a zero U.
inline AlsResult train_als(const RatingsDataset& ds, const LossHyperParams& hyper, const FactorMatrix& init_V,
                           const AlsOptions& options = {}) {
  hyper.validate();
  require(static_cast<std::size_t>(init_V.rows()) == ds.m(), "init V must have m rows");
  const auto user_w = regularization_weights(ds.user_counts(), hyper.nu_exp);
  const auto item_w = regularization_weights(options.item_counts ? *options.item_counts : ds.item_counts(), hyper.mu_exp);
  AlsResult out;
  out.factors.V = init_V;
  out.factors.U = FactorMatrix::Zero(static_cast<Eigen::Index>(ds.n()), init_V.cols());
  if (hyper.steps == 0) return out;
  auto record = [&] {
    if (options.record_objective) out.objective_trace.push_back(objective(ds, out.factors, hyper, user_w, item_w));
  };
  for (std::size_t t = 0; t < hyper.steps; ++t) {
    out.factors.U = user_sweep(ds, out.factors.V, hyper, user_w);
    record();
    out.factors.V = item_sweep_exact(ds, out.factors.U, hyper, item_w);
    record();
    if (options.on_iteration) options.on_iteration(t, out.factors.V);
  }
  out.factors.U = user_sweep(ds, out.factors.V, hyper, user_w);
  record();
  return out;
}

struct DpalsOptions {
  std::optional<std::vector<double>> item_counts;  // private counts c~ (required when mu_exp > 0)
  const std::vector<bool>* active_items = nullptr; // Frequent items; others keep a zero row
  std::string run_token;                           // default derived from the seed
  std::size_t first_iteration = 0;                 // > 0 when resuming from a checkpoint
  bool resume = false;                             // ledger already holds this run's charge
  int max_retries = 2;
  IterationObserver on_iteration;
  std::span<const std::uint32_t> item_order;       // processing order override (testing)
};

struct DpalsRunReport {
  std::string run_token;
  std::size_t iterations_completed = 0;
  std::size_t retries = 0;
  double rho_sq_training = 0.0;  // charged for the alternating steps
  double rho_sq_gramian = 0.0;   // charged for the shared noisy Gramian
  double epsilon = 0.0;          // of the whole ledger after charging
  double delta = kDefaultDelta;
  bool sampled_once = true;
  std::vector<double> orthonormality_residual;  // ||V^T V - I||_F after each item step
  std::vector<double> max_clipped_norm;         // max_i ||U_i|| after each user step
};

struct DpalsResult {
  FactorPair factors;  // U is the unclipped (privileged) solve against the final V
  FactorMatrix clipped_U;
  DpalsRunReport report;
};

/// Privacy charge of one private item step under the split noise scales:
/// k / (2 min(sigma_G, sigma_g)^2), +inf without noise.
inline double dpals_step_rho_sq(const NoiseParams& noise, double k) {
  const double sigma = std::min(noise.sigma_G, noise.sigma_g);
  if (sigma == 0.0) return kInfinity;
  return dpals_rho_sq(k, 1.0, sigma);
}

inline double gramian_step_rho_sq(const LossHyperParams& hyper, const NoiseParams& noise) {
  if (hyper.lambda0 == 0.0) return 0.0;
  if (noise.sigma_G == 0.0) return kInfinity;
  return gramian_rho_sq(1.0, noise.sigma_G);
}

/// Private alternating least squares. `ds` must already be entry-clipped;
/// the item step samples up to k ratings per user from it. Charges the
/// ledger once per run token.
inline DpalsResult train_dpals(const RatingsDataset& ds, const LossHyperParams& hyper, const NoiseParams& noise,
                               RdpLedger* ledger, std::uint64_t seed, const FactorMatrix& init_V,
                               const DpalsOptions& options = {}) {
  hyper.validate();
  noise.validate();
  require(static_cast<std::size_t>(init_V.rows()) == ds.m(), "init V must have m rows");
  require(options.item_counts || hyper.mu_exp == 0.0, "item regularization weights require private counts");
  const RngStream base(seed);
  const double k_real =
      noise.k == kUnlimited ? static_cast<double>(std::max<std::size_t>(1, ds.max_user_count())) : static_cast<double>(noise.k);

  DpalsResult out;
  out.report.run_token = options.run_token.empty() ? "dpals-seed-" + std::to_string(seed) : options.run_token;
  out.report.sampled_once = !noise.resample_each_iteration;
  const double step_rho = dpals_step_rho_sq(noise, k_real);
  const double gram_rho = gramian_step_rho_sq(hyper, noise);
  const auto steps = static_cast<double>(hyper.steps);
  out.report.rho_sq_training = step_rho * steps;
  out.report.rho_sq_gramian = gram_rho * steps;
  if (ledger) {
    if (ledger->has_token(out.report.run_token)) {
      if (!options.resume) throw Error("ledger already charged for run " + out.report.run_token);
    } else if (hyper.steps > 0) {
      ledger->append("dpals_training", out.report.rho_sq_training, out.report.run_token);
      if (hyper.lambda0 > 0.0) ledger->append("global_gramian", out.report.rho_sq_gramian, out.report.run_token);
    }
    out.report.delta = ledger->delta();
  }

  const auto user_w = regularization_weights(ds.user_counts(), hyper.nu_exp);
  const auto item_w = regularization_weights(options.item_counts ? *options.item_counts : ds.item_counts(), hyper.mu_exp);
  std::vector<double> item_lambdas(ds.m());
  for (std::size_t j = 0; j < ds.m(); ++j) item_lambdas[j] = hyper.lambda * item_w[j];

  std::optional<RatingsDataset> sampled_once;
  auto item_data = [&](std::size_t t) -> const RatingsDataset& {
    if (noise.k >= ds.max_user_count()) return ds;
    if (!noise.resample_each_iteration) {
      if (!sampled_once) sampled_once = uniform_sample_per_user(ds, noise.k, base.with(Phase::kItemSample, 0));
      return *sampled_once;
    }
    sampled_once = uniform_sample_per_user(ds, noise.k, base.with(Phase::kItemSample, static_cast<std::uint32_t>(t)));
    return *sampled_once;
  };

  FactorMatrix V = init_V;
  FactorMatrix U_clipped = FactorMatrix::Zero(static_cast<Eigen::Index>(ds.n()), init_V.cols());
  for (std::size_t t = options.first_iteration; t < hyper.steps; ++t) {
    const auto iter = static_cast<std::uint32_t>(t);
    U_clipped = user_sweep(ds, V, hyper, user_w, &noise, base.with(Phase::kUserSubsample, iter));
    out.report.max_clipped_norm.push_back(U_clipped.rowwise().norm().maxCoeff());
    const RatingsDataset& capped = item_data(t);
    for (int attempt = 0;; ++attempt) {
      try {
        const SymMatrix k_tilde = noisy_gramian_term(U_clipped, hyper.lambda0, noise.gamma_u, noise.sigma_G,
                                                     base.with(Phase::kGlobalGramian, iter, 0, static_cast<std::uint32_t>(attempt)));
        V = a_item(U_clipped, capped, item_lambdas, k_tilde, noise, base, iter, static_cast<std::uint32_t>(attempt),
                   options.active_items, options.item_order);
        break;
      } catch (const Error& e) {
        if (std::string(e.what()) != "degenerate factor matrix" || attempt >= options.max_retries) {
          throw Error(std::string(e.what()) + " at iteration " + std::to_string(t) + " after " +
                      std::to_string(attempt) + " retries");
        }
        ++out.report.retries;
        // The discarded attempt still touched private data: charge it as an extra step.
        if (ledger) {
          ledger->append("dpals_retry", step_rho, out.report.run_token);
          if (hyper.lambda0 > 0.0) ledger->append("global_gramian_retry", gram_rho, out.report.run_token);
        }
      }
    }
    const Matrix gram = V.transpose() * V;
    out.report.orthonormality_residual.push_back((gram - Matrix::Identity(V.cols(), V.cols())).norm());
    out.report.iterations_completed = t + 1;
    if (options.on_iteration) options.on_iteration(t, V);
  }
  if (ledger) out.report.epsilon = ledger->epsilon();
  out.factors.V = V;
  out.factors.U = user_sweep(ds, V, hyper, user_w);
  out.clipped_U = std::move(U_clipped);
  return out;
}

}  // namespace dpals
