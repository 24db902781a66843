#include <gtest/gtest.h>

#include <cmath>

#include "dpals/accountant.hpp"
#include "dpals/spectral_init.hpp"
#include "test_util.hpp"

using namespace dpals;

namespace {

RatingsDataset from_dense(const Matrix& M, double p = 1.0, std::uint64_t seed = 0) {
  auto rng = RngStream(seed).with(Phase::kGeneric, 3).generator();
  std::vector<Rating> obs;
  for (Eigen::Index i = 0; i < M.rows(); ++i)
    for (Eigen::Index j = 0; j < M.cols(); ++j)
      if (p >= 1.0 || rng.uniform() < p)
        obs.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j), M(i, j)});
  return RatingsDataset(static_cast<std::size_t>(M.rows()), static_cast<std::size_t>(M.cols()), std::move(obs));
}

Matrix to_dense(const RatingsDataset& ds) {
  Matrix M = Matrix::Zero(static_cast<Eigen::Index>(ds.n()), static_cast<Eigen::Index>(ds.m()));
  for (const auto& r : ds.observations()) M(r.user, r.item) = r.value;
  return M;
}

PowerIterConfig exact_config(const RatingsDataset& ds, std::size_t T) {
  PowerIterConfig c;
  c.T_init = T;
  c.nu_incoh = std::sqrt(static_cast<double>(ds.m()));
  c.s = std::max<std::size_t>(1, ds.max_user_count());
  c.gamma_M = 1e12;
  c.sigma_init = 0.0;
  c.seed = 5;
  return c;
}

}  // namespace

TEST(RandomInit, Orthonormal) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const FactorMatrix v = random_orthonormal_init(40, 1 + s % 5, s);
    EXPECT_LE((v.transpose() * v - Matrix::Identity(v.cols(), v.cols())).norm(), 1e-10);
  }
  const FactorMatrix q = random_orthonormal_init(6, 6, 3);
  EXPECT_NEAR(std::abs(q.determinant()), 1.0, 1e-8);
  const FactorMatrix a = random_orthonormal_init(30, 1, 1), b = random_orthonormal_init(30, 1, 2);
  EXPECT_LT(std::abs(a.col(0).dot(b.col(0))), 1 - 1e-6);
  EXPECT_THROW(random_orthonormal_init(3, 4, 0), Error);
}

TEST(Incoherence, Examples) {
  Vector e1 = Vector::Zero(100);
  e1[0] = 1;
  EXPECT_FALSE(incoherence_check(e1, 5));
  EXPECT_TRUE(incoherence_check(Vector::Constant(100, 0.1), 1));
  Vector w = Vector::Zero(100);
  w[0] = 0.3;
  w.tail(99).setConstant(std::sqrt((1 - 0.09) / 99));
  EXPECT_TRUE(incoherence_check(w, 3));
}

TEST(GramApply, MatchesDense) {
  const auto ds = test::random_dataset(2, 30, 20, 0.3);
  const Matrix x = test::random_matrix(3, 20, 2);
  const Matrix M = to_dense(ds);
  EXPECT_LE((gram_apply(ds, x) - M.transpose() * (M * x)).norm(), 1e-12);
}

TEST(PowerIteration, RankOneExact) {
  const Matrix u = test::random_matrix(1, 60, 1), v = test::random_matrix(2, 40, 1);
  const auto ds = from_dense(u * v.transpose());
  const auto res = noisy_power_iteration(ds, exact_config(ds, 20));
  ASSERT_TRUE(res.success);
  EXPECT_GE(std::abs(res.V.col(0).dot(v.col(0).normalized())), 1 - 1e-6);
}

TEST(PowerIteration, ZeroMatrixFails) {
  const auto ds = from_dense(Matrix::Zero(5, 4));
  try {
    noisy_power_iteration(ds, exact_config(ds, 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "zero-norm iterate at step 1");
  }
}

TEST(PowerIteration, IncoherenceFailureReported) {
  // A single spike makes the iterate concentrate on one item.
  Matrix M = Matrix::Zero(10, 50);
  M(0, 7) = 1.0;
  const auto ds = from_dense(M);
  auto cfg = exact_config(ds, 5);
  cfg.nu_incoh = 4.0;
  const auto res = noisy_power_iteration(ds, cfg);
  EXPECT_FALSE(res.success);
  EXPECT_EQ(res.failed_iteration, 2u);
}

TEST(PowerIteration, InputPreconditions) {
  const auto ds = test::random_dataset(3, 10, 10, 0.8, 2.0);
  auto cfg = exact_config(ds, 2);
  cfg.s = 1;
  EXPECT_THROW(noisy_power_iteration(ds, cfg), Error);
  cfg = exact_config(ds, 2);
  cfg.gamma_M = 0.01;
  EXPECT_THROW(noisy_power_iteration(ds, cfg), Error);
}

TEST(PowerIteration, RayleighQuotientMonotone) {
  const Matrix M = test::random_matrix(4, 40, 25);
  const auto ds = from_dense(M);
  const Matrix A = M.transpose() * M;
  double prev = -1;
  for (std::size_t T = 1; T <= 12; ++T) {
    const auto res = noisy_power_iteration(ds, exact_config(ds, T));
    ASSERT_TRUE(res.success);
    EXPECT_NEAR(res.V.col(0).norm(), 1.0, 1e-8);
    const double q = res.V.col(0).dot(A * res.V.col(0));
    EXPECT_GE(q, prev * (1 - 1e-12));
    prev = q;
  }
}

TEST(SubspaceInit, RankOneCoincidesWithPowerIteration) {
  const auto ds = test::random_dataset(5, 50, 30, 0.5);
  auto cfg = exact_config(ds, 6);
  cfg.sigma_init = 0.3;
  EXPECT_EQ(noisy_subspace_init(ds, 1, cfg).V, noisy_power_iteration(ds, cfg).V);
}

TEST(SubspaceInit, ConvergesToDenseEigenspace) {
  // Exactly rank-3 500 x 200 matrix, partially observed.
  const Matrix M = test::random_matrix(6, 500, 3) * test::random_matrix(7, 3, 200);
  const auto ds = from_dense(M, 0.5, 1);
  const auto res = noisy_subspace_init(ds, 3, exact_config(ds, 50));
  ASSERT_TRUE(res.success);
  EXPECT_LE((res.V.transpose() * res.V - Matrix::Identity(3, 3)).norm(), 1e-8);
  const Matrix P = to_dense(ds);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(P.transpose() * P);
  const Matrix top = eig.eigenvectors().rightCols(3);
  const Matrix residual = res.V - top * (top.transpose() * res.V);
  EXPECT_LE(Eigen::JacobiSVD<Matrix>(residual).singularValues()(0), 1e-3);
}

TEST(SubspaceInit, FullObservationMatchesSvdProjector) {
  const Matrix M = test::random_matrix(8, 80, 2) * test::random_matrix(9, 2, 30);
  const auto ds = from_dense(M);
  const auto res = noisy_subspace_init(ds, 2, exact_config(ds, 30));
  ASSERT_TRUE(res.success);
  Eigen::JacobiSVD<Matrix> svd(M, Eigen::ComputeThinV);
  const Matrix top = svd.matrixV().leftCols(2);
  EXPECT_LE((res.V * res.V.transpose() - top * top.transpose()).norm(), 1e-6);
}

TEST(SubspaceInit, ChargeIsRTimesRankOne) {
  const auto ds = test::random_dataset(10, 40, 30, 0.3);
  auto cfg = exact_config(ds, 4);
  cfg.gamma_M = 5.0;
  cfg.nu_incoh = 3.0;
  cfg.sigma_init = 7.0;
  const auto res = noisy_subspace_init(ds, 3, cfg);
  const double one = power_iteration_rho_sq(cfg.T_init, static_cast<double>(cfg.s), cfg.gamma_M, cfg.nu_incoh, 30, cfg.sigma_init);
  EXPECT_DOUBLE_EQ(res.rho_sq, 3.0 * one);
  EXPECT_TRUE(std::isinf(noisy_subspace_init(ds, 1, exact_config(ds, 2)).rho_sq));
}

TEST(SubspaceInit, NoisyIteratesOrthonormalAndDeterministic) {
  const auto ds = test::random_dataset(11, 60, 40, 0.4);
  auto cfg = exact_config(ds, 5);
  cfg.sigma_init = 1.0;
  const auto a = noisy_subspace_init(ds, 3, cfg);
  const auto b = noisy_subspace_init(ds, 3, cfg);
  ASSERT_TRUE(a.success);
  EXPECT_EQ(a.V, b.V);
  EXPECT_LE((a.V.transpose() * a.V - Matrix::Identity(3, 3)).norm(), 1e-8);
}
