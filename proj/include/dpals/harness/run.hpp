#pragma once

// One experiment cell: load, split, pre-process, initialize, train,
// evaluate and account, for a given target epsilon and seed.

#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dpals/accountant.hpp"
#include "dpals/checkpoint.hpp"
#include "dpals/dataset.hpp"
#include "dpals/harness/config.hpp"
#include "dpals/metrics.hpp"
#include "dpals/preprocess.hpp"
#include "dpals/solver.hpp"
#include "dpals/spectral_init.hpp"

namespace dpals::harness {

struct RunReport {
  std::string dataset;
  std::string mode;  // private | nonprivate
  double epsilon_target = kInfinity;
  double delta = kDefaultDelta;
  std::uint64_t seed = 0;
  double sigma_G = 0.0, sigma_g = 0.0;
  std::vector<LedgerEntry> ledger;
  double epsilon = kInfinity;  // composed over the ledger
  bool ledger_audit_ok = true;
  std::vector<std::pair<std::string, double>> metrics;
  nlohmann::json trace = nlohmann::json::array();
  std::vector<std::string> notes;
  double wall_seconds = 0.0;
  std::string failed_stage;  // empty on success
  std::string error;
  nlohmann::json config;
  FactorPair factors;  // trained model (not serialized)
  double offset = 0.0;

  bool failed() const { return !failed_stage.empty(); }

  /// The epsilon label used for grouping: the target, or the composed value
  /// when noise was given explicitly.
  std::string epsilon_label() const {
    return format_epsilon(std::isinf(epsilon_target) && mode == "private" ? epsilon : epsilon_target);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["config"] = config;
    j["dataset"] = dataset;
    j["mode"] = mode;
    j["seed"] = seed;
    j["epsilon_target"] = format_epsilon(epsilon_target);
    j["epsilon"] = format_epsilon(epsilon);
    j["delta"] = delta;
    j["sigma_G"] = sigma_G;
    j["sigma_g"] = sigma_g;
    auto& l = j["ledger"] = nlohmann::json::array();
    for (const auto& e : ledger)
      l.push_back({{"label", e.label}, {"rho_sq", std::isinf(e.rho_sq) ? nlohmann::json("inf") : nlohmann::json(e.rho_sq)},
                   {"run_token", e.run_token}});
    j["ledger_audit_ok"] = ledger_audit_ok;
    auto& m = j["metrics"] = nlohmann::json::object();
    for (const auto& [name, value] : metrics) m[name] = value;
    j["trace"] = trace;
    j["notes"] = notes;
    j["wall_seconds"] = wall_seconds;
    j["failed_stage"] = failed_stage.empty() ? nlohmann::json(nullptr) : nlohmann::json(failed_stage);
    j["error"] = error.empty() ? nlohmann::json(nullptr) : nlohmann::json(error);
    return j;
  }
};

struct RunHooks {
  std::string checkpoint_path;            // written after every completed item step
  std::optional<Checkpoint> resume_from;  // continue a previous run
  std::optional<std::size_t> stop_after;  // stop training after this many steps (testing)
};

inline RatingsDataset load_dataset(const ExperimentConfig& c, std::uint64_t seed) {
  const auto& d = c.dataset;
  if (d.source == "csv") return ingest_csv(d.path).dataset;
  const double p = d.p ? *d.p : std::min(1.0, 20.0 * std::log(static_cast<double>(d.n)) / static_cast<double>(d.m));
  return generate_synthetic(d.n, d.m, d.rank, p, d.seed ? *d.seed : seed).dataset;
}

namespace detail {

struct Splits {
  RatingsDataset train;
  std::optional<RatingsDataset> valid, test;
  std::optional<HeldOutUsers> valid_users, test_users;
};

inline Splits make_splits(const ExperimentConfig& c, const RatingsDataset& raw, std::uint64_t seed) {
  Splits s;
  if (c.split.protocol == "random") {
    auto r = split_random(raw, c.split.fractions, seed);
    s.train = std::move(r.train);
    if (!r.valid.empty()) s.valid = std::move(r.valid);
    s.test = std::move(r.test);
  } else {
    auto u = split_by_users(raw, c.split.valid_users, c.split.test_users, c.split.query_fraction, seed);
    s.train = std::move(u.train);
    if (!u.valid.users.empty()) s.valid_users = std::move(u.valid);
    s.test_users = std::move(u.test);
  }
  return s;
}

inline bool same_rho(double a, double b) {
  if (std::isinf(a) || std::isinf(b)) return a == b;
  return std::abs(a - b) <= 1e-12 * std::max({1.0, std::abs(a), std::abs(b)});
}

}  // namespace detail

inline std::string run_token(const ExperimentConfig& c, double epsilon, std::uint64_t seed) {
  return config_digest(c) + "-eps-" + format_epsilon(epsilon) + "-seed-" + std::to_string(seed);
}

/// Runs one (epsilon, seed) cell. Stage failures are recorded in the report
/// rather than thrown. `preloaded` skips dataset loading.
inline RunReport run_experiment(const ExperimentConfig& c, double epsilon, std::uint64_t seed,
                                const RatingsDataset* preloaded = nullptr, const RunHooks& hooks = {}) {
  const auto start = std::chrono::steady_clock::now();
  RunReport rep;
  rep.config = c.raw;
  rep.dataset = c.dataset.name;
  rep.epsilon_target = epsilon;
  rep.delta = c.privacy.delta;
  rep.seed = seed;
  const bool is_private = !std::isinf(epsilon) || c.explicit_sigma();
  rep.mode = is_private ? "private" : "nonprivate";
  std::string stage = "load";
  try {
    std::optional<RatingsDataset> loaded;
    if (!preloaded) loaded = load_dataset(c, seed);
    const RatingsDataset& raw = preloaded ? *preloaded : *loaded;

    stage = "split";
    const auto splits = detail::make_splits(c, raw, seed);
    const RatingsDataset& train_raw = splits.train;

    LossHyperParams hyper;
    hyper.lambda = c.model.lambda;
    hyper.lambda0 = c.model.lambda0;
    hyper.mu_exp = c.model.mu;
    hyper.nu_exp = c.model.nu;
    hyper.steps = c.model.T;

    RatingsDataset train;
    double offset = 0.0;
    std::optional<InfrequentFallback> fallback;
    FactorPair factors;
    const auto r = c.model.r;

    // Validation RMSE of the privileged user solve against the current V.
    auto trace_observer = [&](const RatingsDataset& fit) -> IterationObserver {
      if (!c.output.trace) return {};
      const RatingsDataset* eval = splits.valid ? &*splits.valid : (splits.test ? &*splits.test : nullptr);
      if (!eval) return {};
      return [&, eval](std::size_t t, const FactorMatrix& V) {
        const auto w = regularization_weights(fit.user_counts(), hyper.nu_exp);
        const FactorPair f{user_sweep(fit, V, hyper, w), V};
        rep.trace.push_back({{"iteration", t + 1}, {"rmse", rmse(f, *eval, offset, fallback ? &*fallback : nullptr)}});
      };
    };

    if (!is_private) {
      stage = "train";
      offset = c.privacy.center ? train_raw.mean() : 0.0;
      train = train_raw.mapped([offset](const Rating& x) { return x.value - offset; });
      AlsOptions opts;
      opts.on_iteration = trace_observer(train);
      const FactorMatrix V0 = random_orthonormal_init(train.m(), r, seed);
      factors = train_als(train, hyper, V0, opts).factors;
    } else {
      const RngStream base(seed);
      RdpLedger ledger(c.privacy.delta);
      std::optional<PreprocessReport> pre;
      stage = "preprocess";
      if (c.privacy.preprocess) {
        pre = preprocess(train_raw, {c.privacy.gamma_M, c.privacy.k, c.privacy.sigma_p, c.privacy.beta}, base);
        train = pre->sampled_dataset;
        offset = pre->global_mean;
        ledger.append("preprocessing", pre->rho_sq_charged);
        fallback = make_fallback(train_raw, pre->partition.is_frequent, offset);
        if (pre->users_without_frequent > 0)
          rep.notes.push_back(std::to_string(pre->users_without_frequent) + " users have no frequent items");
      } else {
        require(hyper.mu_exp == 0.0, "model.mu > 0 needs private item counts (privacy.preprocess)");
        train = clip_ratings(train_raw, c.privacy.gamma_M);
      }

      stage = "init";
      FactorMatrix V0;
      if (c.init.mode == "power_iteration") {
        PowerIterConfig pc{c.init.T, c.init.nu, c.init.s, c.privacy.gamma_M, c.init.sigma, seed};
        const RatingsDataset capped = uniform_sample_per_user(train, c.init.s, base.with(Phase::kPowerIterationStart, 0, 0, 1));
        auto res = noisy_subspace_init(capped, r, pc);
        ledger.append("power_iteration", res.rho_sq);
        if (res.success) {
          V0 = std::move(res.V);
        } else {
          rep.notes.push_back("power iteration failed (" + res.message + "); using random init");
          V0 = random_orthonormal_init(train.m(), r, seed);
        }
      } else {
        V0 = random_orthonormal_init(train.m(), r, seed);
      }

      stage = "calibrate";
      NoiseParams noise;
      noise.gamma_u = c.privacy.gamma_u;
      noise.gamma_M = c.privacy.gamma_M;
      noise.k = c.privacy.k;
      noise.user_subsample = c.model.user_subsample;
      noise.resample_each_iteration = c.model.resample_each_iteration;
      const double k_real = noise.k == kUnlimited ? static_cast<double>(std::max<std::size_t>(1, train.max_user_count()))
                                                  : static_cast<double>(noise.k);
      if (c.explicit_sigma()) {
        noise.sigma_G = *c.privacy.sigma_G;
        noise.sigma_g = *c.privacy.sigma_g;
      } else {
        LedgerTemplate tmpl;
        tmpl.add_fixed("pre-training", ledger.total_rho_sq());
        tmpl.add_scaled("dpals_training", k_real * static_cast<double>(hyper.steps) / 2.0);
        if (hyper.lambda0 > 0.0) tmpl.add_scaled("global_gramian", static_cast<double>(hyper.steps) / 2.0);
        const double sigma = solve_sigma_for_budget(tmpl, epsilon, c.privacy.delta);
        noise.sigma_G = noise.sigma_g = sigma;
      }
      rep.sigma_G = noise.sigma_G;
      rep.sigma_g = noise.sigma_g;
      const double pre_training_rho = ledger.total_rho_sq();

      stage = "train";
      DpalsOptions opts;
      if (pre) {
        opts.item_counts = pre->noisy_counts;
        opts.active_items = &pre->partition.is_frequent;
      }
      opts.run_token = run_token(c, epsilon, seed);
      if (hooks.resume_from) {
        const Checkpoint& ck = *hooks.resume_from;
        require(ck.config_digest == config_digest(c) && ck.seed == seed && ck.run_token == opts.run_token,
                "checkpoint does not belong to this configuration and seed");
        ledger = ledger_from_entries(ck.ledger, ck.delta);
        V0 = ck.V;
        opts.first_iteration = ck.iterations_completed;
        opts.resume = true;
      }
      const auto trace = trace_observer(train);
      const std::string digest = config_digest(c);
      struct StopTraining {};
      opts.on_iteration = [&](std::size_t t, const FactorMatrix& V) {
        if (trace) trace(t, V);
        if (!hooks.checkpoint_path.empty()) {
          save_checkpoint({train.n(), train.m(), seed, t + 1, opts.run_token, digest, V, offset, ledger.delta(), ledger.entries()},
                          hooks.checkpoint_path);
        }
        if (hooks.stop_after && t + 1 >= *hooks.stop_after) throw StopTraining{};
      };
      DpalsResult result;
      try {
        result = train_dpals(train, hyper, noise, &ledger, seed, V0, opts);
      } catch (const StopTraining&) {
        rep.notes.push_back("stopped after " + std::to_string(*hooks.stop_after) + " steps");
        rep.ledger = ledger.entries();
        rep.epsilon = ledger.epsilon();
        rep.failed_stage = "train";
        rep.error = "interrupted";
        return rep;
      }
      factors = std::move(result.factors);
      for (std::size_t t = 0; t < result.report.orthonormality_residual.size(); ++t) {
        rep.notes.push_back("step " + std::to_string(opts.first_iteration + t + 1) +
                            ": ||V^T V - I|| = " + format_epsilon(result.report.orthonormality_residual[t]));
      }
      if (result.report.retries > 0) rep.notes.push_back(std::to_string(result.report.retries) + " degenerate item steps retried");
      if (result.report.sampled_once && hyper.steps > 1 && noise.k < train.max_user_count())
        rep.notes.push_back("per-user sample drawn once and reused for all " + std::to_string(hyper.steps) +
                            " steps; charged kT/(2 sigma^2) as if resampled");

      stage = "account";
      // Retries before a checkpoint are only visible in the restored ledger.
      std::size_t retry_steps = 0;
      for (const auto& e : ledger.entries()) retry_steps += e.label == "dpals_retry" ? 1 : 0;
      const double step = dpals_step_rho_sq(noise, k_real) + gramian_step_rho_sq(hyper, noise);
      const double expected = pre_training_rho + result.report.rho_sq_training + result.report.rho_sq_gramian +
                              static_cast<double>(retry_steps) * step;
      rep.ledger = ledger.entries();
      rep.epsilon = ledger.epsilon();
      rep.ledger_audit_ok = detail::same_rho(expected, ledger.total_rho_sq());
      if (!rep.ledger_audit_ok) throw Error("ledger audit mismatch");
    }

    stage = "evaluate";
    rep.offset = offset;
    const InfrequentFallback* fb = fallback ? &*fallback : nullptr;
    if (splits.valid) rep.metrics.emplace_back("valid_rmse", rmse(factors, *splits.valid, offset, fb));
    if (splits.test) rep.metrics.emplace_back("test_rmse", rmse(factors, *splits.test, offset, fb));
    if (splits.test_users) {
      const FoldInParams fp = fold_in_params(hyper, train, offset);
      auto add_recall = [&](const char* prefix, const HeldOutUsers& held) {
        const auto res = recall_at_k(factors.V, held, c.recall_k, fp);
        for (const auto& [k, v] : res.mean_recall) rep.metrics.emplace_back(std::string(prefix) + "_recall@" + std::to_string(k), v);
        rep.metrics.emplace_back(std::string(prefix) + "_users", static_cast<double>(res.n_users));
      };
      if (splits.valid_users) add_recall("valid", *splits.valid_users);
      add_recall("test", *splits.test_users);
    }
    rep.factors = std::move(factors);
  } catch (const std::exception& e) {
    rep.failed_stage = stage;
    rep.error = e.what();
  }
  if (c.output.record_wall_clock)
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

}  // namespace dpals::harness
