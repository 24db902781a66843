#pragma once

// Sparse ratings storage with per-user and per-item indexes, CSV ingestion,
// synthetic low-rank generation and train/validation/test splitting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dpals/common.hpp"
#include "dpals/factors.hpp"
#include "dpals/linalg.hpp"
#include "dpals/rng.hpp"

namespace dpals {

struct Rating {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  double value = 0.0;

  friend bool operator==(const Rating&, const Rating&) = default;
};

/// Immutable set of observed (user, item, value) triples. Observations are
/// kept sorted by (user, item), so each user's ratings form a contiguous
/// row; the item index lists observation positions per item.
class RatingsDataset {
 public:
  RatingsDataset() = default;

  RatingsDataset(std::size_t n, std::size_t m, std::vector<Rating> observations)
      : n_(n), m_(m), obs_(std::move(observations)) {
    require(obs_.size() < std::numeric_limits<std::uint32_t>::max(), "too many observations");
    for (const auto& r : obs_) {
      require(r.user < n_ && r.item < m_, "observation index out of range");
      require(std::isfinite(r.value), "non-finite rating");
    }
    const auto by_user_item = [](const Rating& a, const Rating& b) {
      return a.user != b.user ? a.user < b.user : a.item < b.item;
    };
    if (!std::is_sorted(obs_.begin(), obs_.end(), by_user_item)) sort_by_user(by_user_item);
    for (std::size_t k = 1; k < obs_.size(); ++k) {
      require(obs_[k - 1].user != obs_[k].user || obs_[k - 1].item != obs_[k].item,
              "duplicate (user, item) observation");
    }
    build_indexes();
  }

  std::size_t n() const { return n_; }
  std::size_t m() const { return m_; }
  std::size_t size() const { return obs_.size(); }
  bool empty() const { return obs_.empty(); }

  std::span<const Rating> observations() const { return obs_; }
  std::span<const Rating> user_row(std::size_t user) const {
    return std::span<const Rating>(obs_).subspan(user_offsets_[user], user_offsets_[user + 1] - user_offsets_[user]);
  }
  /// Positions in observations() of the ratings of `item`, in user order.
  std::span<const std::uint32_t> item_column(std::size_t item) const {
    return std::span<const std::uint32_t>(item_index_)
        .subspan(item_offsets_[item], item_offsets_[item + 1] - item_offsets_[item]);
  }
  std::size_t user_count(std::size_t user) const { return user_offsets_[user + 1] - user_offsets_[user]; }
  std::size_t item_count(std::size_t item) const { return item_offsets_[item + 1] - item_offsets_[item]; }

  std::size_t max_user_count() const {
    std::size_t best = 0;
    for (std::size_t i = 0; i < n_; ++i) best = std::max(best, user_count(i));
    return best;
  }

  std::vector<double> user_counts() const {
    std::vector<double> c(n_);
    for (std::size_t i = 0; i < n_; ++i) c[i] = static_cast<double>(user_count(i));
    return c;
  }
  std::vector<double> item_counts() const {
    std::vector<double> c(m_);
    for (std::size_t j = 0; j < m_; ++j) c[j] = static_cast<double>(item_count(j));
    return c;
  }

  double mean() const {
    require(!obs_.empty(), "mean of empty dataset");
    double total = 0.0;
    for (const auto& r : obs_) total += r.value;
    return total / static_cast<double>(obs_.size());
  }

  /// New dataset with the same shape and the observations satisfying `keep`.
  template <class Predicate>
  RatingsDataset filtered(Predicate keep) const {
    std::vector<Rating> out;
    for (const auto& r : obs_)
      if (keep(r)) out.push_back(r);
    return RatingsDataset(n_, m_, std::move(out));
  }

  /// New dataset with every value replaced by f(rating).
  template <class Transform>
  RatingsDataset mapped(Transform f) const {
    std::vector<Rating> out(obs_);
    for (auto& r : out) r.value = f(r);
    return RatingsDataset(n_, m_, std::move(out));
  }

 private:
  template <class Less>
  void sort_by_user(Less less) {
    // Bucket by user, then order each row by item.
    std::vector<std::size_t> offsets(n_ + 1, 0);
    for (const auto& r : obs_) ++offsets[r.user + 1];
    std::partial_sum(offsets.begin(), offsets.end(), offsets.begin());
    std::vector<Rating> sorted(obs_.size());
    std::vector<std::size_t> cursor(offsets.begin(), offsets.end() - 1);
    for (const auto& r : obs_) sorted[cursor[r.user]++] = r;
    for (std::size_t i = 0; i < n_; ++i) {
      std::sort(sorted.begin() + static_cast<std::ptrdiff_t>(offsets[i]),
                sorted.begin() + static_cast<std::ptrdiff_t>(offsets[i + 1]), less);
    }
    obs_ = std::move(sorted);
  }

  void build_indexes() {
    user_offsets_.assign(n_ + 1, 0);
    item_offsets_.assign(m_ + 1, 0);
    for (const auto& r : obs_) {
      ++user_offsets_[r.user + 1];
      ++item_offsets_[r.item + 1];
    }
    std::partial_sum(user_offsets_.begin(), user_offsets_.end(), user_offsets_.begin());
    std::partial_sum(item_offsets_.begin(), item_offsets_.end(), item_offsets_.begin());
    item_index_.resize(obs_.size());
    std::vector<std::size_t> cursor(item_offsets_.begin(), item_offsets_.end() - 1);
    for (std::size_t k = 0; k < obs_.size(); ++k) item_index_[cursor[obs_[k].item]++] = static_cast<std::uint32_t>(k);
  }

  std::size_t n_ = 0;
  std::size_t m_ = 0;
  std::vector<Rating> obs_;
  std::vector<std::size_t> user_offsets_{0};
  std::vector<std::size_t> item_offsets_{0};
  std::vector<std::uint32_t> item_index_;
};

// ---------------------------------------------------------------------------
// CSV ingestion

struct IngestResult {
  RatingsDataset dataset;
  std::vector<std::string> user_ids;  // dense index -> original id
  std::vector<std::string> item_ids;
  std::size_t duplicate_rows = 0;     // rows that overwrote an earlier (user, item)
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    fields.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

}  // namespace detail

/// Reads `user_id,item_id,rating[,timestamp]` rows after a header line.
/// Ids are re-indexed densely in first-appearance order; a repeated
/// (user, item) keeps the last value.
inline IngestResult ingest_csv(std::istream& in) {
  IngestResult result;
  std::string line;
  if (!std::getline(in, line)) throw Error("empty file");
  std::unordered_map<std::string, std::uint32_t> users, items;
  std::unordered_map<std::uint64_t, std::size_t> position;  // (user, item) -> row in `rows`
  std::vector<Rating> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_fields(line);
    if (fields.size() < 3 || fields.size() > 4 || fields[0].empty() || fields[1].empty()) {
      throw Error("malformed row at line " + std::to_string(line_no));
    }
    double value = 0.0;
    try {
      std::size_t used = 0;
      const std::string text(fields[2]);
      value = std::stod(text, &used);
      if (used != text.size() || !std::isfinite(value)) throw std::invalid_argument("rating");
    } catch (const std::exception&) {
      throw Error("malformed row at line " + std::to_string(line_no));
    }
    const auto intern = [](auto& table, auto& ids, std::string_view key) {
      auto [it, inserted] = table.try_emplace(std::string(key), static_cast<std::uint32_t>(table.size()));
      if (inserted) ids.emplace_back(key);
      return it->second;
    };
    const std::uint32_t u = intern(users, result.user_ids, fields[0]);
    const std::uint32_t j = intern(items, result.item_ids, fields[1]);
    const std::uint64_t pair = (std::uint64_t{u} << 32) | j;
    if (auto it = position.find(pair); it != position.end()) {
      rows[it->second].value = value;
      ++result.duplicate_rows;
    } else {
      position.emplace(pair, rows.size());
      rows.push_back({u, j, value});
    }
  }
  if (rows.empty()) throw Error("empty file");
  result.dataset = RatingsDataset(users.size(), items.size(), std::move(rows));
  return result;
}

inline IngestResult ingest_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return ingest_csv(in);
}

/// Reads rows whose ids are already 0-based indices (as written by
/// write_csv). Dimensions default to max index + 1.
inline RatingsDataset read_indexed_csv(std::istream& in, std::size_t n = 0, std::size_t m = 0) {
  std::string line;
  if (!std::getline(in, line)) throw Error("empty file");
  std::vector<Rating> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_fields(line);
    Rating r{};
    try {
      if (fields.size() < 3 || fields.size() > 4) throw std::invalid_argument("fields");
      std::size_t used = 0;
      const std::string u(fields[0]), j(fields[1]), v(fields[2]);
      const unsigned long uu = std::stoul(u, &used);
      if (used != u.size()) throw std::invalid_argument("user");
      const unsigned long jj = std::stoul(j, &used);
      if (used != j.size()) throw std::invalid_argument("item");
      r.value = std::stod(v, &used);
      if (used != v.size() || !std::isfinite(r.value) || uu > UINT32_MAX || jj > UINT32_MAX)
        throw std::invalid_argument("value");
      r.user = static_cast<std::uint32_t>(uu);
      r.item = static_cast<std::uint32_t>(jj);
    } catch (const std::exception&) {
      throw Error("malformed row at line " + std::to_string(line_no));
    }
    rows.push_back(r);
  }
  if (rows.empty()) throw Error("empty file");
  for (const auto& r : rows) {
    n = std::max<std::size_t>(n, std::size_t{r.user} + 1);
    m = std::max<std::size_t>(m, std::size_t{r.item} + 1);
  }
  return RatingsDataset(n, m, std::move(rows));
}

inline RatingsDataset read_indexed_csv(const std::string& path, std::size_t n = 0, std::size_t m = 0) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return read_indexed_csv(in, n, m);
}

inline void write_csv(const RatingsDataset& ds, std::ostream& out) {
  out << "user_id,item_id,rating\n";
  char buffer[64];
  for (const auto& r : ds.observations()) {
    std::snprintf(buffer, sizeof buffer, "%.17g", r.value);
    out << r.user << ',' << r.item << ',' << buffer << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticData {
  RatingsDataset dataset;
  FactorPair truth;   // M = truth.U * truth.V^T, with truth.V orthonormal
  double scale = 1.0; // factor applied to U* V*^T so the dense entries have std 1
};

/// M = scale * U* V*^T with random orthonormal U*, V*; every entry is
/// observed independently with probability p.
inline SyntheticData generate_synthetic(std::size_t n, std::size_t m, std::size_t r, double p, std::uint64_t seed) {
  require(p > 0.0 && p <= 1.0, "observation probability must lie in (0, 1]");
  require(r >= 1 && r <= std::min(n, m), "rank exceeds matrix dimensions");
  const RngStream base(seed);
  const auto ni = static_cast<Eigen::Index>(n), mi = static_cast<Eigen::Index>(m), ri = static_cast<Eigen::Index>(r);
  FactorMatrix u_star = orthonormalize_columns(random_gaussian_matrix(base.with(Phase::kSyntheticFactors, 0), ni, ri));
  FactorMatrix v_star = orthonormalize_columns(random_gaussian_matrix(base.with(Phase::kSyntheticFactors, 1), mi, ri));

  // Exact moments of the dense matrix: sum of squares is ||U* V*^T||_F^2 = r,
  // the sum of entries is (1^T U*)(V*^T 1).
  const double count = static_cast<double>(n) * static_cast<double>(m);
  const double mean = u_star.colwise().sum().dot(v_star.colwise().sum()) / count;
  const double variance = static_cast<double>(r) / count - mean * mean;
  require(variance > 0.0, "degenerate synthetic matrix");
  const double scale = 1.0 / std::sqrt(variance);

  SyntheticData out;
  out.scale = scale;
  out.truth.U = u_star * scale;
  out.truth.V = std::move(v_star);

  std::vector<Rating> obs;
  obs.reserve(static_cast<std::size_t>(count * p * 1.01) + 16);
  const double log_miss = std::log1p(-p);
  for (std::size_t i = 0; i < n; ++i) {
    const auto add = [&](std::size_t j) {
      obs.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j),
                     out.truth.U.row(static_cast<Eigen::Index>(i)).dot(out.truth.V.row(static_cast<Eigen::Index>(j)))});
    };
    if (p >= 1.0) {
      for (std::size_t j = 0; j < m; ++j) add(j);
      continue;
    }
    // Geometric skipping over the row: gaps between successes are Geometric(p).
    CounterRng rng = base.with(Phase::kSyntheticMask, 0, static_cast<std::uint32_t>(i)).generator();
    double j = -1.0;
    for (;;) {
      const double u = 1.0 - rng.uniform();  // (0, 1]
      j += 1.0 + std::floor(std::log(u) / log_miss);
      if (j >= static_cast<double>(m)) break;
      add(static_cast<std::size_t>(j));
    }
  }
  out.dataset = RatingsDataset(n, m, std::move(obs));
  return out;
}

/// Power-law item popularity: each user rates a uniform number of items in
/// [min_per_user, max_per_user], drawn without replacement with probability
/// proportional to (j + 1)^(-exponent). Ratings are uniform integers 1..5.
inline RatingsDataset generate_zipf(std::size_t n, std::size_t m, std::size_t min_per_user, std::size_t max_per_user,
                                    double exponent, std::uint64_t seed) {
  require(min_per_user >= 1 && min_per_user <= max_per_user && max_per_user <= m, "per-user counts must lie in [1, m]");
  require(exponent >= 0.0, "Zipf exponent must be nonnegative");
  std::vector<double> cdf(m);
  double total = 0.0;
  for (std::size_t j = 0; j < m; ++j) cdf[j] = total += std::pow(static_cast<double>(j + 1), -exponent);
  const RngStream base(seed);
  std::vector<Rating> obs;
  std::vector<bool> taken(m, false);
  std::vector<std::uint32_t> row;
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng = base.with(Phase::kSyntheticMask, 0, static_cast<std::uint32_t>(i), 1).generator();
    const std::size_t count = min_per_user + static_cast<std::size_t>(rng.bounded(max_per_user - min_per_user + 1));
    row.clear();
    while (row.size() < count) {
      const double u = rng.uniform() * total;
      auto j = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
      j = std::min(j, m - 1);
      if (taken[j]) continue;
      taken[j] = true;
      row.push_back(static_cast<std::uint32_t>(j));
    }
    for (auto j : row) {
      taken[j] = false;
      obs.push_back({static_cast<std::uint32_t>(i), j, static_cast<double>(1 + rng.bounded(5))});
    }
  }
  return RatingsDataset(n, m, std::move(obs));
}

// ---------------------------------------------------------------------------
// Splits

struct RandomSplit {
  RatingsDataset train;
  RatingsDataset valid;
  RatingsDataset test;
};

/// Each observation independently lands in train / valid / test with the
/// given probabilities.
inline RandomSplit split_random(const RatingsDataset& ds, std::array<double, 3> fractions, std::uint64_t seed) {
  for (double f : fractions) require(f >= 0.0, "split fractions must be nonnegative");
  require(std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) <= 1e-9, "split fractions must sum to 1");
  std::vector<Rating> parts[3];
  CounterRng rng = RngStream(seed).with(Phase::kSplit).generator();
  const double cut0 = fractions[0], cut1 = fractions[0] + fractions[1];
  for (const auto& r : ds.observations()) {
    const double u = rng.uniform();
    int part = u < cut0 ? 0 : (u < cut1 ? 1 : 2);
    // Round-off in the cumulative cuts must not route into an empty part.
    while (fractions[part] == 0.0) part = (part + 2) % 3;
    parts[part].push_back(r);
  }
  return {RatingsDataset(ds.n(), ds.m(), std::move(parts[0])), RatingsDataset(ds.n(), ds.m(), std::move(parts[1])),
          RatingsDataset(ds.n(), ds.m(), std::move(parts[2]))};
}

/// Held-out users' ratings, split into a query part (visible at fold-in
/// time) and a target part (scored).
struct HeldOutUsers {
  std::vector<std::uint32_t> users;
  RatingsDataset query;
  RatingsDataset target;
};

struct UserSplit {
  RatingsDataset train;
  HeldOutUsers valid;
  HeldOutUsers test;
  std::size_t degenerate_users = 0;  // held out with fewer than 2 ratings: all query, empty target
};

namespace detail {

/// Partial Fisher-Yates: the first `k` entries of the result are a uniform
/// k-subset of [0, total), returned in ascending order.
inline std::vector<std::size_t> sample_without_replacement(CounterRng& rng, std::size_t total, std::size_t k) {
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, total);
  for (std::size_t a = 0; a < k; ++a) {
    const std::size_t b = a + static_cast<std::size_t>(rng.bounded(total - a));
    std::swap(idx[a], idx[b]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

inline UserSplit split_by_users(const RatingsDataset& ds, std::size_t holdout_valid, std::size_t holdout_test,
                                double query_fraction, std::uint64_t seed) {
  require(holdout_valid + holdout_test < ds.n() || (holdout_valid + holdout_test == 0),
          "too many held-out users");
  require(query_fraction > 0.0 && query_fraction < 1.0, "query fraction must lie in (0, 1)");
  const RngStream base(seed);
  CounterRng rng = base.with(Phase::kUserHoldout).generator();
  std::vector<std::uint32_t> perm(ds.n());
  std::iota(perm.begin(), perm.end(), 0u);
  for (std::size_t a = 0; a < holdout_valid + holdout_test; ++a) {
    const std::size_t b = a + static_cast<std::size_t>(rng.bounded(ds.n() - a));
    std::swap(perm[a], perm[b]);
  }
  std::vector<int> role(ds.n(), 0);  // 0 train, 1 valid, 2 test
  UserSplit out;
  for (std::size_t a = 0; a < holdout_valid + holdout_test; ++a) {
    const std::uint32_t u = perm[a];
    role[u] = a < holdout_valid ? 1 : 2;
    (a < holdout_valid ? out.valid.users : out.test.users).push_back(u);
  }
  std::sort(out.valid.users.begin(), out.valid.users.end());
  std::sort(out.test.users.begin(), out.test.users.end());

  std::vector<Rating> train, vq, vt, tq, tt;
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto row = ds.user_row(i);
    if (role[i] == 0) {
      train.insert(train.end(), row.begin(), row.end());
      continue;
    }
    auto& query = role[i] == 1 ? vq : tq;
    auto& target = role[i] == 1 ? vt : tt;
    if (row.size() < 2) {
      query.insert(query.end(), row.begin(), row.end());
      ++out.degenerate_users;
      continue;
    }
    const auto n_query = static_cast<std::size_t>(std::clamp<long>(
        std::lround(query_fraction * static_cast<double>(row.size())), 1L, static_cast<long>(row.size()) - 1));
    CounterRng user_rng = base.with(Phase::kUserHoldout, 1, static_cast<std::uint32_t>(i)).generator();
    const auto picked = detail::sample_without_replacement(user_rng, row.size(), n_query);
    std::vector<bool> in_query(row.size(), false);
    for (auto p : picked) in_query[p] = true;
    for (std::size_t k = 0; k < row.size(); ++k) (in_query[k] ? query : target).push_back(row[k]);
  }
  out.train = RatingsDataset(ds.n(), ds.m(), std::move(train));
  out.valid.query = RatingsDataset(ds.n(), ds.m(), std::move(vq));
  out.valid.target = RatingsDataset(ds.n(), ds.m(), std::move(vt));
  out.test.query = RatingsDataset(ds.n(), ds.m(), std::move(tq));
  out.test.target = RatingsDataset(ds.n(), ds.m(), std::move(tt));
  return out;
}

// ---------------------------------------------------------------------------
// Per-user sampling

/// Keeps min(k, |Omega_i|) uniformly chosen ratings per user. The draw for
/// user i comes from `stream` with entity i.
inline RatingsDataset uniform_sample_per_user(const RatingsDataset& ds, std::size_t k, const RngStream& stream) {
  require(k >= 1, "k must be at least 1");
  std::vector<Rating> out;
  out.reserve(std::min(ds.size(), ds.n() * k));
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto row = ds.user_row(i);
    if (row.size() <= k) {
      out.insert(out.end(), row.begin(), row.end());
      continue;
    }
    CounterRng rng = stream.with_entity(static_cast<std::uint32_t>(i)).generator();
    for (auto p : detail::sample_without_replacement(rng, row.size(), k)) out.push_back(row[p]);
  }
  return RatingsDataset(ds.n(), ds.m(), std::move(out));
}

inline RatingsDataset clip_ratings(const RatingsDataset& ds, double gamma_M) {
  require(gamma_M >= 0.0, "entry clip bound must be nonnegative");
  return ds.mapped([gamma_M](const Rating& r) { return std::clamp(r.value, -gamma_M, gamma_M); });
}

// ---------------------------------------------------------------------------
// Popularity skew diagnostics

/// Share of observations held by the top ceil(f * m) items, items ranked by
/// their count in `ds` (ties by smaller index), for each fraction f.
inline std::vector<double> top_item_share(const RatingsDataset& ds, std::span<const double> fractions) {
  std::vector<std::size_t> counts(ds.m());
  for (std::size_t j = 0; j < ds.m(); ++j) counts[j] = ds.item_count(j);
  std::sort(counts.begin(), counts.end(), std::greater<>());
  std::vector<double> prefix(ds.m() + 1, 0.0);
  for (std::size_t j = 0; j < ds.m(); ++j) prefix[j + 1] = prefix[j] + static_cast<double>(counts[j]);
  std::vector<double> shares;
  for (double f : fractions) {
    const auto top = std::min<std::size_t>(ds.m(), static_cast<std::size_t>(std::ceil(f * static_cast<double>(ds.m()) - 1e-9)));
    shares.push_back(ds.empty() ? 0.0 : prefix[top] / prefix[ds.m()]);
  }
  return shares;
}

/// Gini coefficient of the item counts.
inline double item_count_gini(const RatingsDataset& ds) {
  std::vector<double> c = ds.item_counts();
  std::sort(c.begin(), c.end());
  const double total = std::accumulate(c.begin(), c.end(), 0.0);
  if (total == 0.0 || c.empty()) return 0.0;
  double weighted = 0.0;
  for (std::size_t k = 0; k < c.size(); ++k) weighted += static_cast<double>(k + 1) * c[k];
  const double n = static_cast<double>(c.size());
  return 2.0 * weighted / (n * total) - (n + 1.0) / n;
}

}  // namespace dpals
