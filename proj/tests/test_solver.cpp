#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "dpals/solver.hpp"
#include "test_util.hpp"

using namespace dpals;

namespace {

std::vector<std::vector<double>> to_rows(const Matrix& a) {
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(a.rows()), std::vector<double>(a.cols()));
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index c = 0; c < a.cols(); ++c) rows[i][c] = a(i, c);
  return rows;
}

// Builds the normal equations of one user by hand and solves them with the
// pivoting eliminator.
Vector brute_force_user(const FactorMatrix& V, const std::vector<Rating>& row, double lambda_eff, double lambda0) {
  const auto r = V.cols();
  Matrix a = lambda_eff * Matrix::Identity(r, r);
  for (Eigen::Index j = 0; j < V.rows(); ++j)
    for (Eigen::Index p = 0; p < r; ++p)
      for (Eigen::Index q = 0; q < r; ++q) a(p, q) += lambda0 * V(j, p) * V(j, q);
  std::vector<double> b(static_cast<std::size_t>(r), 0.0);
  for (const auto& o : row)
    for (Eigen::Index p = 0; p < r; ++p) {
      b[p] += o.value * V(o.item, p);
      for (Eigen::Index q = 0; q < r; ++q) a(p, q) += V(o.item, p) * V(o.item, q);
    }
  const auto x = test::gauss_solve(to_rows(a), b);
  return Eigen::Map<const Vector>(x.data(), r);
}

double max_prediction_gap(const FactorPair& a, const FactorPair& b) {
  return (Matrix(a.U * a.V.transpose()) - Matrix(b.U * b.V.transpose())).cwiseAbs().maxCoeff();
}

NoiseParams noiseless() {
  NoiseParams n;
  n.gamma_u = 1e12;
  n.gamma_M = 1e12;
  return n;
}

}  // namespace

TEST(SolveUserEmbedding, SingleObservation) {
  const FactorMatrix V = test::random_matrix(1, 4, 3);
  const std::vector<Rating> row{{0, 2, 1.7}};
  const double lambda = 0.3;
  const Vector u = solve_user_embedding(V, row, lambda, SymMatrix(3));
  const Vector expected = 1.7 * V.row(2).transpose() / (lambda + V.row(2).squaredNorm());
  EXPECT_LE((u - expected).norm(), 1e-14);
}

TEST(SolveUserEmbedding, ZeroRatingsGiveZero) {
  const FactorMatrix V = test::random_matrix(2, 5, 2);
  const std::vector<Rating> row{{0, 0, 0.0}, {0, 3, 0.0}};
  EXPECT_EQ(solve_user_embedding(V, row, 0.1, SymMatrix(2)), Vector::Zero(2));
}

TEST(SolveUserEmbedding, MatchesBruteForceOracle) {
  const FactorMatrix V = test::random_matrix(3, 5, 3);
  const std::vector<Rating> row{{0, 0, 1.0}, {0, 1, -2.0}, {0, 3, 0.5}, {0, 4, 3.0}};
  const Vector u = solve_user_embedding(V, row, 0.1, SymMatrix(3));
  EXPECT_LE((u - brute_force_user(V, row, 0.1, 0.0)).norm(), 1e-9);
}

TEST(SolveUserEmbedding, ResidualAndOracleProperty) {
  for (std::uint64_t t = 0; t < 150; ++t) {
    const Eigen::Index r = 1 + static_cast<Eigen::Index>(t % 4);
    const FactorMatrix V = test::random_matrix(t, 12, r);
    auto rng = RngStream(t).with(Phase::kGeneric, 5).generator();
    std::vector<Rating> row;
    for (std::uint32_t j = 0; j < 12; ++j)
      if (rng.uniform() < 0.5) row.push_back({0, j, rng.normal()});
    const double lambda_eff = 0.05 * static_cast<double>(t % 3);
    const double lambda0 = t % 2 ? 0.2 : 0.0;
    if (lambda_eff == 0.0 && lambda0 == 0.0 && row.size() < static_cast<std::size_t>(r)) continue;
    const Vector u = solve_user_embedding(V, row, lambda_eff, global_gram(V, lambda0));
    const Vector oracle = brute_force_user(V, row, lambda_eff, lambda0);
    EXPECT_LE((u - oracle).norm(), 1e-8 * std::max(1.0, oracle.norm()));
    Matrix a = lambda_eff * Matrix::Identity(r, r) + lambda0 * V.transpose() * V;
    Vector b = Vector::Zero(r);
    for (const auto& o : row) {
      a += V.row(o.item).transpose() * V.row(o.item);
      b += o.value * V.row(o.item).transpose();
    }
    EXPECT_LE((a * u - b).norm(), 1e-8 * (b.norm() + lambda_eff * u.norm()) + 1e-300);
  }
}

TEST(SolveUserEmbedding, IllPosed) {
  const FactorMatrix V = test::random_matrix(4, 5, 3);
  const std::vector<Rating> row{{0, 1, 1.0}};
  try {
    solve_user_embedding(V, row, 0.0, SymMatrix(3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "ill-posed user solve");
  }
}

TEST(AUser, ClipBehaviour) {
  const FactorMatrix V = test::random_matrix(5, 6, 2);
  const std::vector<Rating> row{{0, 0, 2.0}, {0, 2, -1.0}, {0, 5, 3.0}};
  const Vector exact = solve_user_embedding(V, row, 0.1, SymMatrix(2));
  NoiseParams n;
  n.gamma_u = exact.norm() + 1.0;
  EXPECT_EQ(a_user(V, row, 0.1, SymMatrix(2), n, 3, RngStream(1)), exact);
  n.gamma_u = 1e-300;
  EXPECT_LE(a_user(V, row, 0.1, SymMatrix(2), n, 3, RngStream(1)).norm(), 1e-300 * (1 + 1e-12));
  n.gamma_u = 0.5 * exact.norm();
  EXPECT_NEAR(a_user(V, row, 0.1, SymMatrix(2), n, 3, RngStream(1)).norm(), 0.5 * exact.norm(), 1e-12);
  n.gamma_u = exact.norm() + 1.0;
  n.user_subsample = true;
  EXPECT_EQ(a_user(V, row, 0.1, SymMatrix(2), n, 1, RngStream(1)), exact);
}

TEST(AUser, SubsampleUsesFraction) {
  const FactorMatrix V = test::random_matrix(6, 10, 2);
  std::vector<Rating> row;
  for (std::uint32_t j = 0; j < 10; ++j) row.push_back({0, j, 1.0 + j});
  NoiseParams n;
  n.gamma_u = 1e12;
  n.user_subsample = true;
  const Vector sub = a_user(V, row, 0.1, SymMatrix(2), n, 2, RngStream(9));
  // Some 5-subset must reproduce the result exactly.
  bool found = false;
  std::vector<int> pick(10, 0);
  std::fill(pick.begin() + 5, pick.end(), 1);
  do {
    std::vector<Rating> s;
    for (std::size_t a = 0; a < 10; ++a)
      if (pick[a]) s.push_back(row[a]);
    if ((solve_user_embedding(V, s, 0.1, SymMatrix(2)) - sub).norm() < 1e-12) found = true;
  } while (!found && std::next_permutation(pick.begin(), pick.end()));
  EXPECT_TRUE(found);
}

TEST(FoldIn, Examples) {
  FactorMatrix V = FactorMatrix::Identity(2, 2);
  const std::vector<Rating> query{{0, 0, 1.0}};
  const Vector u = fold_in_user(V, query, 1.0, SymMatrix(2));
  EXPECT_NEAR(u[0], 0.5, 1e-15);
  EXPECT_NEAR(u[1], 0.0, 1e-15);
  EXPECT_EQ(fold_in_user(V, {}, 1.0, SymMatrix(2)), Vector::Zero(2));
  EXPECT_THROW(fold_in_user(V, {}, 0.0, SymMatrix(2)), Error);
}

TEST(FoldIn, EqualsUnclippedUserStep) {
  const auto ds = test::random_dataset(7, 10, 8, 0.5);
  const FactorMatrix V = test::random_matrix(7, 8, 3);
  NoiseParams n;
  n.gamma_u = 1e12;
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto row = ds.user_row(i);
    EXPECT_LE((fold_in_user(V, row, 0.2, SymMatrix(3)) - a_user(V, row, 0.2, SymMatrix(3), n, 1, RngStream(1))).norm(),
              1e-9);
  }
}

TEST(RegularizationWeights, MeanOneAndClamp) {
  const std::vector<double> counts{4, 1, -3, 0, 9};
  const auto w = regularization_weights(counts, 0.5);
  EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0) / 5.0, 1.0, 1e-15);
  EXPECT_EQ(w[1], w[2]);
  EXPECT_EQ(w[2], w[3]);
  EXPECT_NEAR(w[4] / w[0], 1.5, 1e-15);
  EXPECT_EQ(regularization_weights(counts, 0.0), std::vector<double>(5, 1.0));
}

TEST(NoisyGramian, Examples) {
  const FactorMatrix U = test::random_matrix(8, 6, 3);
  EXPECT_EQ(noisy_gramian_term(U, 0.0, 1.0, 5.0, RngStream(1)).matrix(), Matrix::Zero(3, 3));
  FactorMatrix I = FactorMatrix::Zero(6, 3);
  I.topRows(3) = Matrix::Identity(3, 3);
  EXPECT_EQ(noisy_gramian_term(I, 2.0, 1.0, 0.0, RngStream(1)).matrix(), 2.0 * Matrix::Identity(3, 3));
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto k = noisy_gramian_term(U, 0.7, 2.0, 3.0, RngStream(s));
    EXPECT_EQ(k.matrix(), k.matrix().transpose());
  }
}

TEST(AItem, ZeroNoiseEqualsExactItemStep) {
  for (std::uint64_t t = 0; t < 30; ++t) {
    const auto ds = test::random_dataset(t, 30, 12, 0.7);
    const Eigen::Index r = 1 + static_cast<Eigen::Index>(t % 3);
    const FactorMatrix U = test::random_matrix(t + 100, 30, r);
    const std::vector<double> w(12, 1.0);
    const std::vector<double> lambdas(12, 0.0);
    const LossHyperParams hyper{};
    FactorMatrix exact;
    try {
      exact = item_sweep_exact(ds, U, hyper, w);
    } catch (const Error&) {
      continue;  // some item has fewer than r ratings
    }
    const FactorMatrix v = a_item(U, ds, lambdas, SymMatrix(r), noiseless(), RngStream(t), 0);
    EXPECT_LE((v - orthonormalize_columns(exact)).norm(), 1e-9);
  }
}

TEST(AItem, EmptyItemIsZeroBeforeOrthonormalization) {
  std::vector<Rating> obs;
  for (std::uint32_t i = 0; i < 10; ++i)
    for (std::uint32_t j = 0; j < 3; ++j) obs.push_back({i, j, 1.0 + i * j});
  const RatingsDataset ds(10, 4, obs);  // item 3 unobserved
  const FactorMatrix U = test::random_matrix(9, 10, 2);
  NoiseParams n = noiseless();
  n.sigma_G = 0.5;
  const FactorMatrix v = a_item(U, ds, std::vector<double>(4, 0.5), SymMatrix(2), n, RngStream(2), 0);
  EXPECT_LE(v.row(3).norm(), 1e-15);
}

TEST(AItem, OrderIndependentBitIdentical) {
  const auto ds = test::random_dataset(11, 40, 25, 0.4);
  FactorMatrix U = test::random_matrix(11, 40, 3);
  for (Eigen::Index i = 0; i < U.rows(); ++i) U.row(i) = clip_vector(U.row(i).transpose(), 1.0).transpose();
  NoiseParams n;
  n.sigma_G = 2.0;
  n.sigma_g = 3.0;
  const std::vector<double> lambdas(25, 1.0);
  std::vector<std::uint32_t> reversed(25);
  std::iota(reversed.rbegin(), reversed.rend(), 0u);
  const auto k = noisy_gramian_term(U, 0.5, 1.0, 2.0, RngStream(4));
  const FactorMatrix a = a_item(U, ds, lambdas, k, n, RngStream(4), 3);
  const FactorMatrix b = a_item(U, ds, lambdas, k, n, RngStream(4), 3, 0, nullptr, reversed);
  EXPECT_EQ(a, b);
  EXPECT_LE((a.transpose() * a - Matrix::Identity(3, 3)).norm(), 1e-8);
}

TEST(AItem, DegenerateFactorMatrix) {
  const RatingsDataset ds(2, 3, {{0, 0, 1.0}, {1, 0, 2.0}});
  const FactorMatrix U = FactorMatrix::Ones(2, 2);
  try {
    a_item(U, ds, std::vector<double>(3, 1.0), SymMatrix(2), noiseless(), RngStream(1), 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "degenerate factor matrix");
  }
}

TEST(TrainAls, StepsZeroReturnsInit) {
  const auto ds = test::random_dataset(1, 10, 8, 0.5);
  const FactorMatrix v0 = test::random_matrix(1, 8, 2);
  LossHyperParams h;
  h.steps = 0;
  EXPECT_EQ(train_als(ds, h, v0).factors.V, v0);
}

TEST(TrainAls, RankOneExactRecovery) {
  const FactorMatrix u = test::random_matrix(2, 20, 1);
  const FactorMatrix v = test::random_matrix(3, 15, 1);
  std::vector<Rating> obs;
  for (std::uint32_t i = 0; i < 20; ++i)
    for (std::uint32_t j = 0; j < 15; ++j) obs.push_back({i, j, u(i, 0) * v(j, 0)});
  const RatingsDataset ds(20, 15, obs);
  LossHyperParams h;
  h.steps = 1;
  const auto res = train_als(ds, h, FactorMatrix(2.5 * v));
  double sq = 0;
  for (const auto& o : obs) sq += std::pow(o.value - res.factors.predict(o.user, o.item), 2);
  EXPECT_LE(std::sqrt(sq / static_cast<double>(obs.size())), 1e-8);
}

TEST(TrainAls, ObjectiveNonIncreasingProperty) {
  for (std::uint64_t t = 0; t < 30; ++t) {
    const auto ds = test::random_dataset(t, 30, 20, 0.4);
    LossHyperParams h;
    h.lambda = 0.1 + 0.1 * static_cast<double>(t % 3);
    h.lambda0 = t % 2 ? 0.05 : 0.0;
    h.mu_exp = t % 4 == 0 ? 0.5 : 0.0;
    h.nu_exp = t % 5 == 0 ? 1.0 : 0.0;
    h.steps = 6;
    AlsOptions o;
    o.record_objective = true;
    const auto res = train_als(ds, h, test::random_matrix(t, 20, 1 + static_cast<Eigen::Index>(t % 4)), o);
    ASSERT_EQ(res.objective_trace.size(), 2 * h.steps + 1);
    for (std::size_t s = 1; s < res.objective_trace.size(); ++s)
      EXPECT_LE(res.objective_trace[s], res.objective_trace[s - 1] * (1 + 1e-8));
  }
}

TEST(TrainDpals, ZeroNoiseMatchesExactAls) {
  int checked = 0;
  for (std::uint64_t t = 0; t < 50; ++t) {
    auto rng = RngStream(t).with(Phase::kGeneric, 1).generator();
    const std::size_t n = 5 + static_cast<std::size_t>(rng.uniform() * 45);
    const std::size_t m = 5 + static_cast<std::size_t>(rng.uniform() * 45);
    const Eigen::Index r = 1 + static_cast<Eigen::Index>(rng.uniform() * 4);
    const double p = 0.3 + 0.7 * rng.uniform();
    const auto ds = test::random_dataset(t, n, m, p);
    LossHyperParams h;
    h.lambda0 = 0.1;
    h.steps = 3;
    const FactorMatrix v0 = test::gram_schmidt(test::random_matrix(t + 7, static_cast<Eigen::Index>(m), r));
    const auto exact = train_als(ds, h, v0);
    const auto priv = train_dpals(ds, h, noiseless(), nullptr, t, v0);
    EXPECT_LE(max_prediction_gap(exact.factors, priv.factors), 1e-6) << "instance " << t;
    ++checked;
  }
  EXPECT_EQ(checked, 50);
}

TEST(TrainDpals, DeterministicAndOrthonormal) {
  const auto ds = test::random_dataset(3, 60, 30, 0.3);
  LossHyperParams h;
  h.lambda = 1.0;
  h.lambda0 = 0.1;
  h.steps = 3;
  NoiseParams n;
  n.sigma_G = 1.5;
  n.sigma_g = 2.5;
  n.k = 5;
  const FactorMatrix v0 = test::gram_schmidt(test::random_matrix(5, 30, 3));
  RdpLedger l1(1e-5), l2(1e-5);
  const auto a = train_dpals(ds, h, n, &l1, 42, v0);
  const auto b = train_dpals(ds, h, n, &l2, 42, v0);
  EXPECT_EQ(a.factors.U, b.factors.U);
  EXPECT_EQ(a.factors.V, b.factors.V);
  EXPECT_EQ(a.report.epsilon, b.report.epsilon);
  for (double res : a.report.orthonormality_residual) EXPECT_LE(res, 1e-8);
  for (double c : a.report.max_clipped_norm) EXPECT_LE(c, n.gamma_u * (1 + 1e-12));
  const auto c = train_dpals(ds, h, n, nullptr, 43, v0);
  EXPECT_NE(a.factors.V, c.factors.V);
}

TEST(TrainDpals, LedgerChargedOnceWithToken) {
  const auto ds = test::random_dataset(4, 30, 20, 0.4);
  LossHyperParams h;
  h.lambda = 1.0;
  h.lambda0 = 0.2;
  h.steps = 4;
  NoiseParams n;
  n.sigma_G = 5.0;
  n.sigma_g = 3.0;
  n.k = 6;
  const FactorMatrix v0 = test::gram_schmidt(test::random_matrix(6, 20, 2));
  RdpLedger ledger(1e-5);
  const auto res = train_dpals(ds, h, n, &ledger, 1, v0);
  ASSERT_EQ(ledger.entries().size(), 2u);
  EXPECT_DOUBLE_EQ(ledger.entries()[0].rho_sq, 6.0 * 4.0 / (2.0 * 9.0));
  EXPECT_DOUBLE_EQ(ledger.entries()[1].rho_sq, 4.0 / (2.0 * 25.0));
  EXPECT_DOUBLE_EQ(res.report.epsilon, rdp_to_dp(6.0 * 4.0 / 18.0 + 4.0 / 50.0, 1e-5));
  EXPECT_THROW(train_dpals(ds, h, n, &ledger, 1, v0), Error);
  EXPECT_EQ(ledger.entries().size(), 2u);

  h.lambda0 = 0.0;
  RdpLedger plain(1e-5);
  train_dpals(ds, h, n, &plain, 1, v0);
  EXPECT_EQ(plain.entries().size(), 1u);
}

TEST(TrainDpals, RetriesExhaustOnPersistentDegeneracy) {
  // One observed item: V~ has a single nonzero row, so r = 2 is always degenerate.
  const RatingsDataset ds(3, 4, {{0, 0, 1.0}, {1, 0, 2.0}, {2, 0, -1.0}});
  LossHyperParams h;
  h.lambda = 1.0;
  h.steps = 1;
  NoiseParams n;
  n.sigma_G = 1.0;
  n.sigma_g = 0.0;
  RdpLedger ledger(1e-5);
  FactorMatrix v0 = FactorMatrix::Zero(4, 2);
  v0(0, 0) = 1;
  v0(1, 1) = 1;
  try {
    train_dpals(ds, h, n, &ledger, 1, v0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("degenerate factor matrix"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("after 2 retries"), std::string::npos);
  }
  // Initial charge plus two retries.
  EXPECT_EQ(ledger.entries().size(), 3u);
}

TEST(TrainDpals, PermutingItemsPermutesPredictions) {
  const auto ds = test::random_dataset(12, 25, 15, 0.5);
  std::vector<std::uint32_t> perm(15);
  std::iota(perm.begin(), perm.end(), 0u);
  std::reverse(perm.begin(), perm.end());
  std::vector<Rating> relabeled;
  for (const auto& o : ds.observations()) relabeled.push_back({o.user, perm[o.item], o.value});
  const RatingsDataset ds2(25, 15, relabeled);
  LossHyperParams h;
  h.lambda = 0.5;
  h.steps = 3;
  const FactorMatrix v0 = test::gram_schmidt(test::random_matrix(1, 15, 2));
  FactorMatrix v0p(15, 2);
  for (std::uint32_t j = 0; j < 15; ++j) v0p.row(perm[j]) = v0.row(j);
  const auto a = train_dpals(ds, h, noiseless(), nullptr, 3, v0);
  const auto b = train_dpals(ds2, h, noiseless(), nullptr, 3, v0p);
  for (std::size_t i = 0; i < 25; ++i)
    for (std::uint32_t j = 0; j < 15; ++j) EXPECT_NEAR(a.factors.predict(i, j), b.factors.predict(i, perm[j]), 1e-9);
}
