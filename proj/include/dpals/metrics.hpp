#pragma once

// RMSE on held-out entries and Recall@k for held-out users.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include <json.hpp>

#include "dpals/dataset.hpp"
#include "dpals/factors.hpp"
#include "dpals/solver.hpp"

namespace dpals {

/// Prediction rule for items outside the trained set: the user's average
/// training rating (raw scale). Users without training ratings use the offset.
struct InfrequentFallback {
  std::vector<bool> is_frequent;
  std::vector<double> user_mean;
};

inline InfrequentFallback make_fallback(const RatingsDataset& raw_train, std::vector<bool> is_frequent, double offset) {
  InfrequentFallback out{std::move(is_frequent), std::vector<double>(raw_train.n(), offset)};
  for (std::size_t i = 0; i < raw_train.n(); ++i) {
    const auto row = raw_train.user_row(i);
    if (row.empty()) continue;
    double sum = 0.0;
    for (const auto& r : row) sum += r.value;
    out.user_mean[i] = sum / static_cast<double>(row.size());
  }
  return out;
}

/// sqrt(mean over test of (U_i.V_j + offset - M_ij)^2).
inline double rmse(const FactorPair& f, const RatingsDataset& test, double offset = 0.0,
                   const InfrequentFallback* fallback = nullptr) {
  if (test.empty()) throw Error("empty test set");
  double sq = 0.0;
  for (const auto& r : test.observations()) {
    const bool fall_back = fallback && !fallback->is_frequent[r.item];
    const double pred = fall_back ? fallback->user_mean[r.user] : f.predict(r.user, r.item) + offset;
    const double e = pred - r.value;
    sq += e * e;
  }
  return std::sqrt(sq / static_cast<double>(test.size()));
}

/// The k highest-scoring non-excluded items, descending, ties by index.
inline std::vector<std::uint32_t> top_k_items(const Eigen::Ref<const Vector>& u, const FactorMatrix& V, std::size_t k,
                                              const std::vector<bool>& excluded = {}) {
  require(k >= 1, "k must be at least 1");
  const Vector scores = V * u;
  std::vector<std::uint32_t> candidates;
  candidates.reserve(static_cast<std::size_t>(V.rows()));
  for (Eigen::Index j = 0; j < V.rows(); ++j)
    if (excluded.empty() || !excluded[static_cast<std::size_t>(j)]) candidates.push_back(static_cast<std::uint32_t>(j));
  auto better = [&](std::uint32_t a, std::uint32_t b) { return scores[a] != scores[b] ? scores[a] > scores[b] : a < b; };
  const std::size_t take = std::min(k, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end(), better);
  candidates.resize(take);
  return candidates;
}

/// Regularization used when folding in a user unseen at training time.
struct FoldInParams {
  double lambda = 0.0;
  double lambda0 = 0.0;
  double nu_exp = 0.0;
  double weight_normalizer = 1.0;  // mean of max(c_i, 1)^nu over training users
  double offset = 0.0;             // subtracted from query ratings before the solve

  double lambda_eff(std::size_t count) const {
    if (nu_exp == 0.0) return lambda;
    return lambda * std::pow(std::max<double>(static_cast<double>(count), 1.0), nu_exp) / weight_normalizer;
  }
};

inline FoldInParams fold_in_params(const LossHyperParams& hyper, const RatingsDataset& train, double offset) {
  FoldInParams p{hyper.lambda, hyper.lambda0, hyper.nu_exp, 1.0, offset};
  if (hyper.nu_exp != 0.0 && train.n() > 0) {
    double total = 0.0;
    for (std::size_t i = 0; i < train.n(); ++i)
      total += std::pow(std::max<double>(static_cast<double>(train.user_count(i)), 1.0), hyper.nu_exp);
    p.weight_normalizer = total / static_cast<double>(train.n());
  }
  return p;
}

struct RecallResult {
  std::map<std::size_t, double> mean_recall;  // keyed by k
  std::vector<double> per_user;               // for the largest k, in held.users order (scored users only)
  std::size_t n_users = 0;
  std::size_t skipped_users = 0;  // empty target
};

/// Mean over held-out users of |top_k(fold_in(query)) cap target| / min(k, |target|),
/// with query items excluded from the ranking.
inline RecallResult recall_at_k(const FactorMatrix& V, const HeldOutUsers& held, std::vector<std::size_t> ks,
                                const FoldInParams& params) {
  require(!ks.empty(), "at least one k is required");
  std::sort(ks.begin(), ks.end());
  const std::size_t k_max = ks.back();
  const SymMatrix global = global_gram(V, params.lambda0);
  RecallResult out;
  std::map<std::size_t, double> sums;
  std::vector<bool> excluded(static_cast<std::size_t>(V.rows()), false);
  std::vector<bool> is_target(static_cast<std::size_t>(V.rows()), false);
  std::vector<Rating> centered;
  for (const auto user : held.users) {
    const auto target = held.target.user_row(user);
    if (target.empty()) {
      ++out.skipped_users;
      continue;
    }
    const auto query = held.query.user_row(user);
    centered.assign(query.begin(), query.end());
    for (auto& r : centered) r.value -= params.offset;
    const Vector u = fold_in_user(V, centered, params.lambda_eff(query.size()), global);
    for (const auto& r : query) excluded[r.item] = true;
    for (const auto& r : target) is_target[r.item] = true;
    const auto ranked = top_k_items(u, V, k_max, excluded);
    double last = 0.0;
    for (const std::size_t k : ks) {
      std::size_t hits = 0;
      for (std::size_t a = 0; a < std::min(k, ranked.size()); ++a) hits += is_target[ranked[a]] ? 1 : 0;
      last = static_cast<double>(hits) / static_cast<double>(std::min(k, target.size()));
      sums[k] += last;
    }
    out.per_user.push_back(last);
    for (const auto& r : query) excluded[r.item] = false;
    for (const auto& r : target) is_target[r.item] = false;
    ++out.n_users;
  }
  if (out.n_users == 0) throw Error("no scorable users");
  for (const auto& [k, s] : sums) out.mean_recall[k] = s / static_cast<double>(out.n_users);
  return out;
}

struct EvalReport {
  std::optional<double> rmse;
  std::map<std::size_t, double> recall;
  std::size_t n_eval_entries = 0;
  std::size_t n_eval_users = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["rmse"] = rmse ? nlohmann::json(*rmse) : nlohmann::json(nullptr);
    nlohmann::json rec = nlohmann::json::object();
    nlohmann::json ks = nlohmann::json::array();
    for (const auto& [k, v] : recall) {
      rec[std::to_string(k)] = v;
      ks.push_back(k);
    }
    j["recall"] = rec;
    j["k"] = ks;
    j["n_eval_entries"] = n_eval_entries;
    j["n_eval_users"] = n_eval_users;
    return j;
  }
};

}  // namespace dpals
