#include <gtest/gtest.h>

#include <cmath>

#include "dpals/preprocess.hpp"
#include "test_util.hpp"

using namespace dpals;

TEST(NoisyCounts, ExactWithoutNoise) {
  const RatingsDataset ds(3, 3, {{0, 0, 1}, {1, 0, 1}, {2, 1, 1}});
  EXPECT_EQ(noisy_item_counts(ds, 0.0, RngStream(1)), (std::vector<double>{2, 1, 0}));
}

TEST(NoisyCounts, MeanOfRepeatedDraws) {
  std::vector<Rating> obs;
  for (std::uint32_t i = 0; i < 100; ++i) obs.push_back({i, 0, 1.0});
  const RatingsDataset ds(100, 1, obs);
  double sum = 0;
  const int draws = 10000;
  for (int d = 0; d < draws; ++d) sum += noisy_item_counts(ds, 10.0, RngStream(static_cast<std::uint64_t>(d)))[0];
  EXPECT_NEAR(sum / draws, 100.0, 0.4);
}

TEST(PartitionFrequent, Examples) {
  EXPECT_EQ(partition_frequent(std::vector<double>{3, 1, 2}, 1.0).frequent.size(), 3u);
  EXPECT_EQ(partition_frequent(std::vector<double>{5, 9, 9, 1}, 0.5).frequent, (std::vector<std::uint32_t>{1, 2}));
  EXPECT_EQ(partition_frequent(std::vector<double>{7, 7, 7}, 1.0 / 3.0).frequent, (std::vector<std::uint32_t>{0}));
  const auto p = partition_frequent(std::vector<double>{4, 3, 2, 1, 0}, 0.3);
  EXPECT_EQ(p.frequent.size(), 2u);  // ceil(1.5)
  EXPECT_EQ(p.infrequent, (std::vector<std::uint32_t>{2, 3, 4}));
  EXPECT_THROW(partition_frequent(std::vector<double>{1}, 0.0), Error);
}

TEST(AdaptiveSample, Examples) {
  const RatingsDataset ds(1, 3, {{0, 0, 1}, {0, 1, 2}, {0, 2, 3}});
  const std::vector<bool> all(3, true);
  const auto kept = adaptive_sample_per_user(ds, all, std::vector<double>{10, 2, 5}, 2);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept.observations()[0].item, 1u);
  EXPECT_EQ(kept.observations()[1].item, 2u);
  EXPECT_EQ(adaptive_sample_per_user(ds, all, std::vector<double>{1, 1, 1}, 5).size(), 3u);
  // Ties by smaller index.
  const auto tie = adaptive_sample_per_user(ds, all, std::vector<double>{4, 4, 4}, 1);
  EXPECT_EQ(tie.observations()[0].item, 0u);
  // Users without frequent items drop out.
  const auto none = adaptive_sample_per_user(ds, std::vector<bool>{false, false, true}, std::vector<double>{1, 1, 1}, 2);
  EXPECT_EQ(none.size(), 1u);
}

TEST(NoisyGlobalMean, Examples) {
  const RatingsDataset ds(1, 3, {{0, 0, 1}, {0, 1, 2}, {0, 2, 3}});
  EXPECT_DOUBLE_EQ(noisy_global_mean(ds, 5, 3, 0.0, RngStream(1)), 2.0);
  EXPECT_THROW(noisy_global_mean(RatingsDataset(1, 1, {}), 5, 1, 0.0, RngStream(1)), Error);
}

TEST(NoisyGlobalMean, Concentration) {
  // |Omega| = 10^6 with true mean 3.5; k = 50, sigma_p = 10, Gamma_M = 5.
  std::vector<Rating> obs;
  obs.reserve(1000000);
  for (std::uint32_t i = 0; i < 20000; ++i)
    for (std::uint32_t j = 0; j < 50; ++j) obs.push_back({i, j, (j % 2) ? 3.0 : 4.0});
  const RatingsDataset ds(20000, 50, std::move(obs));
  int within = 0;
  for (std::uint64_t s = 0; s < 200; ++s) within += std::abs(noisy_global_mean(ds, 5, 50, 10, RngStream(s)) - 3.5) <= 0.01;
  EXPECT_EQ(within, 200);
}

TEST(Preprocess, DegeneratesToCentering) {
  const auto ds = test::random_dataset(1, 30, 20, 0.4);
  const auto rep = preprocess(ds, {100.0, kUnlimited, 0.0, 1.0}, RngStream(3));
  ASSERT_EQ(rep.sampled_dataset.size(), ds.size());
  const double mean = ds.mean();
  EXPECT_NEAR(rep.global_mean, mean, 1e-14);
  double centered_sum = 0;
  for (std::size_t a = 0; a < ds.size(); ++a) {
    EXPECT_NEAR(rep.sampled_dataset.observations()[a].value, ds.observations()[a].value - mean, 1e-14);
    centered_sum += rep.sampled_dataset.observations()[a].value;
  }
  EXPECT_LE(std::abs(centered_sum / static_cast<double>(ds.size())), 1e-10 * 100.0);
  EXPECT_TRUE(std::isinf(rep.rho_sq_charged));
}

TEST(Preprocess, PostconditionsProperty) {
  for (std::uint64_t t = 0; t < 100; ++t) {
    const auto ds = test::random_dataset(t, 40, 30, 0.3, 3.0);
    const std::size_t k = 2 + t % 6;
    const double beta = 0.2 + 0.8 * static_cast<double>(t % 5) / 4.0;
    const PreprocessParams params{2.0, k, 1.0 + static_cast<double>(t % 3), beta};
    const auto rep = preprocess(ds, params, RngStream(t));
    const auto expected_frequent = static_cast<std::size_t>(std::ceil(beta * 30 - 1e-9));
    EXPECT_EQ(rep.partition.frequent.size(), expected_frequent);
    for (const auto& r : rep.sampled_dataset.observations()) {
      EXPECT_TRUE(rep.partition.is_frequent[r.item]);
      EXPECT_LE(std::abs(r.value), 2.0);
    }
    EXPECT_LE(rep.sampled_dataset.max_user_count(), k);
    EXPECT_DOUBLE_EQ(rep.rho_sq_charged, static_cast<double>(k + 1) / (params.sigma_p * params.sigma_p));
    // Determinism.
    const auto again = preprocess(ds, params, RngStream(t));
    EXPECT_EQ(again.noisy_counts, rep.noisy_counts);
    EXPECT_EQ(again.global_mean, rep.global_mean);
  }
}
