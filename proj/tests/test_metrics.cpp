#include <gtest/gtest.h>

#include <cmath>

#include "dpals/metrics.hpp"
#include "test_util.hpp"

using namespace dpals;

namespace {

FactorPair rank_one(std::vector<double> u, std::vector<double> v) {
  FactorPair f;
  f.U = Eigen::Map<Vector>(u.data(), static_cast<Eigen::Index>(u.size()));
  f.V = Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
  return f;
}

FactorMatrix scores_as_V(std::vector<double> s) { return Eigen::Map<Vector>(s.data(), static_cast<Eigen::Index>(s.size())); }

}  // namespace

TEST(Rmse, Examples) {
  const auto f = rank_one({1.0, 2.0}, {1.0, 3.0});
  EXPECT_EQ(rmse(f, RatingsDataset(2, 2, {{0, 0, 1}, {1, 1, 6}, {0, 1, 3}})), 0.0);
  const auto one = rank_one({1.0}, {1.0});
  EXPECT_EQ(rmse(one, RatingsDataset(1, 1, {{0, 0, 0.0}})), 1.0);
  const auto zero = rank_one({0.0, 0.0}, {0.0});
  EXPECT_NEAR(rmse(zero, RatingsDataset(2, 1, {{0, 0, 3.0}, {1, 0, -4.0}})), 5 / std::sqrt(2.0), 1e-15);
  EXPECT_THROW(rmse(f, RatingsDataset(2, 2, {})), Error);
}

TEST(Rmse, OffsetAndFallback) {
  const auto f = rank_one({1.0}, {1.0, 1.0});
  const RatingsDataset test(1, 2, {{0, 0, 4.0}, {0, 1, 2.0}});
  EXPECT_NEAR(rmse(f, test, 3.0), std::sqrt(2.0), 1e-15);
  const RatingsDataset train(1, 2, {{0, 0, 1.0}, {0, 1, 2.0}});
  const auto fb = make_fallback(train, {true, false}, 3.0);
  // Item 1 predicts the user's training mean 1.5: residuals 0 and 0.5.
  EXPECT_NEAR(rmse(f, test, 3.0, &fb), std::sqrt(0.125), 1e-15);
}

TEST(Rmse, UserPermutationInvariance) {
  const auto ds = test::random_dataset(1, 20, 10, 0.5);
  FactorPair f{test::random_matrix(1, 20, 2), test::random_matrix(2, 10, 2)};
  std::vector<std::uint32_t> perm(20);
  for (std::uint32_t i = 0; i < 20; ++i) perm[i] = (i * 7 + 3) % 20;
  FactorPair g{FactorMatrix(20, 2), f.V};
  std::vector<Rating> obs;
  for (const auto& r : ds.observations()) obs.push_back({perm[r.user], r.item, r.value});
  for (std::uint32_t i = 0; i < 20; ++i) g.U.row(perm[i]) = f.U.row(i);
  EXPECT_NEAR(rmse(f, ds), rmse(g, RatingsDataset(20, 10, obs)), 1e-12);
}

TEST(TopK, Examples) {
  const Vector u = Vector::Ones(1);
  const auto V = scores_as_V({0.9, 0.1, 0.5});
  EXPECT_EQ(top_k_items(u, V, 2), (std::vector<std::uint32_t>{0, 2}));
  EXPECT_EQ(top_k_items(u, V, 2, {true, false, false}), (std::vector<std::uint32_t>{2, 1}));
  EXPECT_EQ(top_k_items(u, scores_as_V({1, 1, 1}), 2), (std::vector<std::uint32_t>{0, 1}));
  EXPECT_EQ(top_k_items(u, V, 10).size(), 3u);
  EXPECT_THROW(top_k_items(u, V, 0), Error);
}

TEST(TopK, ScaleInvariance) {
  const FactorMatrix V = test::random_matrix(3, 50, 3);
  for (std::uint64_t t = 0; t < 50; ++t) {
    const Vector u = test::random_matrix(t, 3, 1).col(0);
    EXPECT_EQ(top_k_items(u, V, 10), top_k_items(Vector(3.7 * u), V, 10));
  }
}

TEST(Recall, HandCase) {
  // One user, query on item 0 only, scores ranking items 3, 0(excluded), 1, 2.
  FactorMatrix V(4, 1);
  V << 0.8, 0.5, 0.2, 1.0;
  HeldOutUsers held{{0}, RatingsDataset(1, 4, {{0, 0, 1.0}}), RatingsDataset(1, 4, {{0, 2, 1.0}})};
  const FoldInParams p{1.0, 0.0, 0.0, 1.0, 0.0};
  const auto r = recall_at_k(V, held, {1, 2, 3}, p);
  // After excluding item 0 the ranking is 3, 1, 2.
  EXPECT_EQ(r.mean_recall.at(1), 0.0);
  EXPECT_EQ(r.mean_recall.at(2), 0.0);
  EXPECT_EQ(r.mean_recall.at(3), 1.0);
}

TEST(Recall, PerfectAndZero) {
  FactorMatrix V(5, 1);
  V << 0.1, 0.9, 0.8, 0.0, -1.0;
  HeldOutUsers held{{0}, RatingsDataset(1, 5, {{0, 0, 1.0}}), RatingsDataset(1, 5, {{0, 1, 1.0}, {0, 2, 1.0}})};
  const FoldInParams p{1.0, 0.0, 0.0, 1.0, 0.0};
  EXPECT_EQ(recall_at_k(V, held, {2, 4}, p).mean_recall.at(2), 1.0);
  HeldOutUsers bad{{0}, RatingsDataset(1, 5, {{0, 0, 1.0}}), RatingsDataset(1, 5, {{0, 3, 1.0}, {0, 4, 1.0}})};
  EXPECT_EQ(recall_at_k(V, bad, {2}, p).mean_recall.at(2), 0.0);
}

TEST(Recall, SkipsEmptyTargetsAndErrors) {
  FactorMatrix V = FactorMatrix::Identity(3, 3);
  HeldOutUsers held{{0, 1}, RatingsDataset(2, 3, {{0, 0, 1.0}, {1, 0, 1.0}}), RatingsDataset(2, 3, {{0, 1, 1.0}})};
  const FoldInParams p{1.0, 0.0, 0.0, 1.0, 0.0};
  const auto r = recall_at_k(V, held, {1}, p);
  EXPECT_EQ(r.n_users, 1u);
  EXPECT_EQ(r.skipped_users, 1u);
  HeldOutUsers none{{0}, RatingsDataset(1, 3, {{0, 0, 1.0}}), RatingsDataset(1, 3, {})};
  EXPECT_THROW(recall_at_k(V, none, {1}, p), Error);
}

TEST(Recall, BoundedAndMonotoneInKProperty) {
  for (std::uint64_t t = 0; t < 20; ++t) {
    const auto ds = test::random_dataset(t, 40, 30, 0.3);
    const auto split = split_by_users(ds, 0, 20, 0.5, t);
    const FactorMatrix V = test::random_matrix(t, 30, 3);
    const FoldInParams p{0.5, 0.1, 0.0, 1.0, 0.0};
    const auto r = recall_at_k(V, split.test, {1, 5, 10, 20}, p);
    for (const auto& [k, v] : r.mean_recall) {
      EXPECT_GE(v, 0.0) << k;
      EXPECT_LE(v, 1.0) << k;
    }
    // Hits are non-decreasing in k.
    for (auto u : split.test.users) {
      const auto target = split.test.target.user_row(u);
      if (target.empty()) continue;
      const auto q = split.test.query.user_row(u);
      const Vector emb = fold_in_user(V, q, p.lambda, global_gram(V, p.lambda0));
      std::vector<bool> ex(30, false);
      for (const auto& x : q) ex[x.item] = true;
      std::size_t last_hits = 0;
      for (std::size_t k = 1; k <= 30; ++k) {
        const auto top = top_k_items(emb, V, k, ex);
        std::size_t hits = 0;
        for (auto j : top)
          for (const auto& x : target) hits += x.item == j;
        EXPECT_GE(hits, last_hits);
        last_hits = hits;
      }
    }
  }
}

TEST(FoldInParams, WeightNormalizer) {
  const RatingsDataset train(2, 4, {{0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {1, 2, 1}, {1, 3, 1}});
  LossHyperParams h;
  h.lambda = 2.0;
  h.nu_exp = 1.0;
  const auto p = fold_in_params(h, train, 0.5);
  EXPECT_DOUBLE_EQ(p.weight_normalizer, 2.5);
  EXPECT_DOUBLE_EQ(p.lambda_eff(5), 2.0 * 5 / 2.5);
  EXPECT_DOUBLE_EQ(p.lambda_eff(0), 2.0 / 2.5);
}

TEST(EvalReport, JsonFields) {
  EvalReport r;
  r.rmse = 0.5;
  r.recall[20] = 0.3;
  r.n_eval_entries = 10;
  r.n_eval_users = 2;
  const auto j = r.to_json();
  for (const char* key : {"rmse", "recall", "k", "n_eval_entries", "n_eval_users"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j["k"][0], 20);
  EXPECT_TRUE(EvalReport{}.to_json()["rmse"].is_null());
}
