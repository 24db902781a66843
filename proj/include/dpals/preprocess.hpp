#pragma once

// Private pre-processing of the training ratings: entry clipping, per-user
// sampling, noisy item counts, the Frequent / Infrequent item partition,
// adaptive sampling towards rarely rated items and private centering.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "dpals/accountant.hpp"
#include "dpals/dataset.hpp"

namespace dpals {

inline constexpr std::size_t kUnlimited = std::numeric_limits<std::size_t>::max();

/// c~_j = |Omega_j| + N(0, sigma_p^2), one independent draw per item (entity j).
inline std::vector<double> noisy_item_counts(const RatingsDataset& ds, double sigma_p, const RngStream& stream) {
  require(sigma_p >= 0.0, "sigma_p must be nonnegative");
  std::vector<double> counts(ds.m());
  for (std::size_t j = 0; j < ds.m(); ++j) {
    counts[j] = static_cast<double>(ds.item_count(j));
    if (sigma_p > 0.0) counts[j] += sigma_p * stream.with_entity(static_cast<std::uint32_t>(j)).generator().normal();
  }
  return counts;
}

/// Ranks items by (-count, index).
inline std::vector<std::uint32_t> items_by_count_desc(std::span<const double> counts) {
  std::vector<std::uint32_t> order(counts.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) { return counts[a] > counts[b]; });
  return order;
}

struct ItemPartition {
  std::vector<std::uint32_t> frequent;    // ascending item indices
  std::vector<std::uint32_t> infrequent;  // ascending item indices
  std::vector<bool> is_frequent;          // indexed by item
};

/// Frequent = the ceil(beta * m) items with the largest counts, ties broken
/// by smaller item index.
inline ItemPartition partition_frequent(std::span<const double> counts, double beta) {
  require(beta > 0.0 && beta <= 1.0, "beta must lie in (0, 1]");
  const std::size_t m = counts.size();
  const auto top = std::min(m, static_cast<std::size_t>(std::ceil(beta * static_cast<double>(m) - 1e-9)));
  const auto order = items_by_count_desc(counts);
  ItemPartition out;
  out.is_frequent.assign(m, false);
  for (std::size_t k = 0; k < top; ++k) out.is_frequent[order[k]] = true;
  for (std::uint32_t j = 0; j < m; ++j) (out.is_frequent[j] ? out.frequent : out.infrequent).push_back(j);
  return out;
}

/// For each user keeps up to k frequent items with the smallest counts
/// (ties by smaller item index). Users without frequent items drop out.
inline RatingsDataset adaptive_sample_per_user(const RatingsDataset& ds, const std::vector<bool>& is_frequent,
                                               std::span<const double> counts, std::size_t k) {
  require(k >= 1, "k must be at least 1");
  require(is_frequent.size() == ds.m() && counts.size() == ds.m(), "item vectors must have length m");
  std::vector<Rating> out;
  std::vector<Rating> candidates;
  for (std::size_t i = 0; i < ds.n(); ++i) {
    candidates.clear();
    for (const auto& r : ds.user_row(i))
      if (is_frequent[r.item]) candidates.push_back(r);
    if (candidates.size() > k) {
      std::nth_element(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(),
                       [&](const Rating& a, const Rating& b) {
                         return counts[a.item] != counts[b.item] ? counts[a.item] < counts[b.item] : a.item < b.item;
                       });
      candidates.resize(k);
      std::sort(candidates.begin(), candidates.end(), [](const Rating& a, const Rating& b) { return a.item < b.item; });
    }
    out.insert(out.end(), candidates.begin(), candidates.end());
  }
  return RatingsDataset(ds.n(), ds.m(), std::move(out));
}

/// (sum M_ij + N(0, k Gamma_M^2 sigma_p^2)) / (|Omega| + N(0, k sigma_p^2)).
inline double noisy_global_mean(const RatingsDataset& ds, double gamma_M, double k, double sigma_p,
                                const RngStream& stream) {
  require(sigma_p >= 0.0 && gamma_M >= 0.0, "noise parameters must be nonnegative");
  double sum = 0.0;
  for (const auto& r : ds.observations()) sum += r.value;
  double count = static_cast<double>(ds.size());
  if (sigma_p > 0.0) {
    const double scale = std::sqrt(k) * sigma_p;
    CounterRng rng = stream.generator();
    sum += gamma_M * scale * rng.normal();
    count += scale * rng.normal();
  }
  if (!(count > 0.0)) throw Error("mean estimate degenerate");
  return sum / count;
}

struct PreprocessParams {
  double gamma_M = 5.0;
  std::size_t k = kUnlimited;
  double sigma_p = 0.0;
  double beta = 1.0;
};

struct PreprocessReport {
  std::vector<double> noisy_counts;  // released on the final sample
  ItemPartition partition;
  double global_mean = 0.0;
  RatingsDataset sampled_dataset;    // clipped, sampled, centered, re-clamped
  double rho_sq_charged = 0.0;       // +inf when sigma_p == 0
  std::size_t users_without_frequent = 0;
};

/// The full pre-processing pipeline. `stream` seeds the phase streams; the
/// two count releases use sub indices 0 and 1.
inline PreprocessReport preprocess(const RatingsDataset& ds, const PreprocessParams& params, const RngStream& stream) {
  require(params.gamma_M > 0.0, "Gamma_M must be positive");
  require(params.k >= 1, "k must be at least 1");
  const RatingsDataset clipped = clip_ratings(ds, params.gamma_M);
  const RatingsDataset uniform =
      uniform_sample_per_user(clipped, params.k, stream.with(Phase::kPreprocessSample));
  const auto first_counts = noisy_item_counts(uniform, params.sigma_p, stream.with(Phase::kCounts, 0, 0, 0));

  PreprocessReport report;
  report.partition = partition_frequent(first_counts, params.beta);
  const RatingsDataset adaptive =
      adaptive_sample_per_user(clipped, report.partition.is_frequent, first_counts, params.k);
  for (std::size_t i = 0; i < adaptive.n(); ++i)
    if (clipped.user_count(i) > 0 && adaptive.user_count(i) == 0) ++report.users_without_frequent;
  report.noisy_counts = noisy_item_counts(adaptive, params.sigma_p, stream.with(Phase::kCounts, 0, 0, 1));

  const double k_real = params.k == kUnlimited ? static_cast<double>(std::max<std::size_t>(1, ds.max_user_count()))
                                               : static_cast<double>(params.k);
  report.global_mean = noisy_global_mean(adaptive, params.gamma_M, k_real, params.sigma_p, stream.with(Phase::kGlobalMean));
  const double offset = report.global_mean, bound = params.gamma_M;
  report.sampled_dataset =
      adaptive.mapped([offset, bound](const Rating& r) { return std::clamp(r.value - offset, -bound, bound); });
  report.rho_sq_charged =
      params.sigma_p > 0.0 && params.k != kUnlimited ? preprocessing_rho_sq(k_real, params.sigma_p) : kInfinity;
  return report;
}

}  // namespace dpals
