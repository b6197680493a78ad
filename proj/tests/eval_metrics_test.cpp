#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "anrot/eval_metrics.hpp"
#include "test_support.hpp"

namespace anrot {
namespace {

using test::micro_arch;

FeatureStats stats(std::vector<double> mu, std::vector<std::vector<double>> cov) {
  FeatureStats s;
  const auto d = static_cast<Eigen::Index>(mu.size());
  s.mu = Eigen::Map<Eigen::VectorXd>(mu.data(), d);
  s.cov.resize(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) s.cov(i, j) = cov[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  s.n = 100;
  return s;
}

Dataset small_dataset(int classes = 6, int per_class = 8, int hw = 8) {
  SyntheticSpec s;
  s.classes = classes;
  s.per_class = per_class;
  s.height = s.width = hw;
  s.noise = 0.1;
  s.seed = 5;
  return make_synthetic(s);
}

// ---------------------------------------------------------------------------
// feature statistics and FID

TEST(FeatureStats, TwoPointHandCase) {
  const auto s = feature_stats({{0.0}, {2.0}});
  EXPECT_DOUBLE_EQ(s.mu(0), 1.0);
  EXPECT_DOUBLE_EQ(s.cov(0, 0), 2.0);
  EXPECT_EQ(s.n, 2u);
}

TEST(FeatureStats, IdenticalVectorsHaveZeroCovariance) {
  const auto s = feature_stats({{1.0, -2.0}, {1.0, -2.0}, {1.0, -2.0}});
  EXPECT_EQ(s.cov.norm(), 0.0);
  EXPECT_DOUBLE_EQ(s.mu(1), -2.0);
}

TEST(FeatureStats, MatchesDrawnDistribution) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::vector<double>> f;
  for (int i = 0; i < 10000; ++i) {
    const double a = n(rng), b = n(rng);
    f.push_back({3.0 + a, -1.0 + 2.0 * b + a});
  }
  const auto s = feature_stats(f);
  // tolerances are about 4 standard errors at n = 1e4
  EXPECT_NEAR(s.mu(0), 3.0, 0.05);
  EXPECT_NEAR(s.mu(1), -1.0, 0.1);
  EXPECT_NEAR(s.cov(0, 0), 1.0, 0.05);
  EXPECT_NEAR(s.cov(0, 1), 1.0, 0.1);
  EXPECT_NEAR(s.cov(1, 1), 5.0, 0.3);
  EXPECT_EQ(s.cov(0, 1), s.cov(1, 0));
}

TEST(FeatureStats, RejectsBadInput) {
  EXPECT_THROW(feature_stats({{1.0}}), std::exception);
  EXPECT_THROW(feature_stats({{1.0}, {1.0, 2.0}}), std::exception);
}

TEST(Fid, SelfDistanceIsZero) {
  const auto a = stats({0.5, -1.0}, {{2.0, 0.3}, {0.3, 1.0}});
  EXPECT_NEAR(fid(a, a), 0.0, 1e-10);
}

TEST(Fid, MeanShiftWithIdentityCovariance) {
  const auto a = stats({0.0, 0.0}, {{1.0, 0.0}, {0.0, 1.0}});
  const auto b = stats({1.0, 0.0}, {{1.0, 0.0}, {0.0, 1.0}});
  EXPECT_NEAR(fid(a, b), 1.0, 1e-12);
}

TEST(Fid, SwappedDiagonalCovariances) {
  const auto a = stats({0.0, 0.0}, {{1.0, 0.0}, {0.0, 4.0}});
  const auto b = stats({0.0, 0.0}, {{4.0, 0.0}, {0.0, 1.0}});
  EXPECT_NEAR(fid(a, b), 2.0, 1e-12);
}

TEST(Fid, OneDimensionalClosedForm) {
  // (m1 - m2)^2 + (s1 - s2)^2 with s the standard deviation
  const auto a = stats({1.5}, {{0.25}});
  const auto b = stats({-0.5}, {{9.0}});
  EXPECT_NEAR(fid(a, b), 4.0 + 2.5 * 2.5, 1e-12);
}

TEST(Fid, NonCommutingTwoByTwoClosedForm) {
  // for 2x2 PSD M, tr sqrt(M) = sqrt(tr M + 2 sqrt(det M))
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int rep = 0; rep < 50; ++rep) {
    Eigen::Matrix2d L1, L2;
    L1 << u(rng), u(rng), u(rng), u(rng);
    L2 << u(rng), u(rng), u(rng), u(rng);
    const Eigen::Matrix2d A = L1 * L1.transpose() + 0.1 * Eigen::Matrix2d::Identity();
    const Eigen::Matrix2d B = L2 * L2.transpose() + 0.1 * Eigen::Matrix2d::Identity();
    const Eigen::Vector2d ma(u(rng), u(rng)), mb(u(rng), u(rng));
    FeatureStats a{ma, A, 10}, b{mb, B, 10};
    const double tr_sqrt = std::sqrt((A * B).trace() + 2.0 * std::sqrt(A.determinant() * B.determinant()));
    const double expect = (ma - mb).squaredNorm() + A.trace() + B.trace() - 2.0 * tr_sqrt;
    EXPECT_NEAR(fid(a, b), expect, 1e-9);
    EXPECT_NEAR(fid(a, b), fid(b, a), 1e-9);
  }
}

TEST(Fid, MonotoneInMeanShift) {
  const auto a = stats({0.0, 0.0}, {{1.0, 0.2}, {0.2, 2.0}});
  double prev = -1.0;
  for (double s : {0.0, 0.25, 0.5, 1.0, 2.0}) {
    const auto b = stats({s, -s}, {{1.0, 0.2}, {0.2, 2.0}});
    const double f = fid(a, b);
    EXPECT_GT(f, prev);
    prev = f;
  }
}

TEST(Fid, DimensionMismatchThrows) {
  EXPECT_THROW(fid(stats({0.0}, {{1.0}}), stats({0.0, 0.0}, {{1.0, 0.0}, {0.0, 1.0}})), std::exception);
}

TEST(Fid, ReconstructionPipeline) {
  const auto arch = micro_arch(true, 4, 8);
  const auto model = init_model<float>(arch, 4);
  const auto extractor = init_model<float>(arch, 9);
  const auto ds = small_dataset(4, 6, 8);
  std::vector<Tensor<float>> images;
  for (int i = 0; i < 3; ++i)
    images.push_back(concat_batch(std::vector<Tensor<float>>(ds.images.begin() + i * 4, ds.images.begin() + i * 4 + 4)));
  const auto rec = reconstruct(model, images);
  ASSERT_EQ(rec.size(), 3u);
  EXPECT_EQ(rec[0].dims(), images[0].dims());
  const auto feats = pooled_features(extractor, images);
  EXPECT_EQ(feats.size(), 12u);
  EXPECT_EQ(feats[0].size(), static_cast<std::size_t>(arch.widths.back()));
  const double f = reconstruction_fid(model, extractor, images);
  EXPECT_TRUE(std::isfinite(f));
  EXPECT_GE(f, 0.0);
  EXPECT_EQ(f, reconstruction_fid(model, extractor, images));
}

// ---------------------------------------------------------------------------
// GRAD-CAM

TEST(GradCam, ZeroActivationsGiveZeroMap) {
  const Tensor<double> a({1, 3, 2, 2}, 0.0), g({1, 3, 2, 2}, 1.0);
  const auto m = cam_from(a, g);
  for (double v : m.storage()) EXPECT_EQ(v, 0.0);
}

TEST(GradCam, HandCase) {
  // weights (1, 0.5): raw map (3, 3.5, 4, 4.5) -> (0, 1/3, 2/3, 1)
  const Tensor<double> a({1, 2, 2, 2}, std::vector<double>{1, 2, 3, 4, 4, 3, 2, 1});
  const Tensor<double> g({1, 2, 2, 2}, std::vector<double>{1, 1, 1, 1, 0.5, 0.5, 0.5, 0.5});
  const auto m = cam_from(a, g);
  EXPECT_DOUBLE_EQ(m[0], 0.0);
  EXPECT_NEAR(m[1], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(m[2], 2.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(m[3], 1.0);
}

TEST(GradCam, ReluDropsNegativeEvidence) {
  // weights (1, -1): raw (-3, -1, 1, 3) -> relu (0, 0, 1, 3) -> (0, 0, 1/3, 1)
  const Tensor<double> a({1, 2, 2, 2}, std::vector<double>{1, 2, 3, 4, 4, 3, 2, 1});
  const Tensor<double> g({1, 2, 2, 2}, std::vector<double>{1, 1, 1, 1, -1, -1, -1, -1});
  const auto m = cam_from(a, g);
  EXPECT_EQ(m[0], 0.0);
  EXPECT_EQ(m[1], 0.0);
  EXPECT_NEAR(m[2], 1.0 / 3.0, 1e-15);
  EXPECT_EQ(m[3], 1.0);
}

TEST(GradCam, InvariantToPositiveGradientScale) {
  std::mt19937_64 rng(8);
  const auto a = test::random_tensor(rng, {2, 3, 4, 4}, 0.0, 1.0);
  const auto g = test::random_tensor(rng, {2, 3, 4, 4});
  Tensor<double> g2 = g;
  for (auto& v : g2.storage()) v *= 7.5;
  const auto m1 = cam_from(a, g), m2 = cam_from(a, g2);
  for (std::size_t i = 0; i < m1.size(); ++i) EXPECT_NEAR(m1[i], m2[i], 1e-12);
}

TEST(GradCam, ShapeMismatchThrows) {
  EXPECT_THROW(cam_from(Tensor<double>({1, 2, 2, 2}), Tensor<double>({1, 2, 2, 3})), std::exception);
}

TEST(Upsample, HalfPixelHandCase) {
  const Tensor<double> m({1, 1, 1, 2}, std::vector<double>{0.0, 1.0});
  const auto u = upsample_bilinear(m, 1, 4);
  EXPECT_DOUBLE_EQ(u[0], 0.0);
  EXPECT_DOUBLE_EQ(u[1], 0.25);
  EXPECT_DOUBLE_EQ(u[2], 0.75);
  EXPECT_DOUBLE_EQ(u[3], 1.0);
}

TEST(Upsample, ConstantStaysConstantAndSameSizeIsIdentity) {
  const auto c = upsample_bilinear(Tensor<double>({1, 1, 2, 3}, 0.4), 7, 5);
  EXPECT_EQ(c.dims(), (std::vector<int>{1, 1, 7, 5}));
  for (double v : c.storage()) EXPECT_NEAR(v, 0.4, 1e-15);
  std::mt19937_64 rng(2);
  const auto m = test::random_tensor(rng, {1, 1, 3, 3}, 0.0, 1.0);
  EXPECT_EQ(upsample_bilinear(m, 3, 3), m);
}

TEST(GradCam, ModelHeatmapsAreNormalizedAtInputSize) {
  const auto arch = micro_arch(true, 4, 8);
  const auto st = init_model<double>(arch, 6);
  std::mt19937_64 rng(4);
  const auto x = test::random_tensor(rng, {3, 1, 8, 8}, 0.0, 1.0);
  const auto target = test::random_gaussian(rng, 4);
  const auto maps = grad_cam(st, x, target);
  EXPECT_EQ(maps.dims(), (std::vector<int>{3, 1, 8, 8}));
  for (double v : maps.storage()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(maps, grad_cam(st, x, target));
  EXPECT_THROW(grad_cam(st, x, test::random_gaussian(rng, 5)), std::exception);
}

TEST(Pgm, BinaryLayout) {
  const Tensor<double> m({1, 1, 2, 3}, std::vector<double>{0.0, 0.5, 1.0, -1.0, 2.0, 0.2});
  std::ostringstream os;
  write_pgm(os, m);
  const std::string s = os.str();
  const std::string head = "P5\n3 2\n255\n";
  ASSERT_EQ(s.size(), head.size() + 6);
  EXPECT_EQ(s.substr(0, head.size()), head);
  const auto* px = reinterpret_cast<const unsigned char*>(s.data() + head.size());
  EXPECT_EQ(px[0], 0);
  EXPECT_EQ(px[1], 128);
  EXPECT_EQ(px[2], 255);
  EXPECT_EQ(px[3], 0);
  EXPECT_EQ(px[4], 255);
  EXPECT_EQ(px[5], 51);
  std::ostringstream bad;
  EXPECT_THROW(write_pgm(bad, Tensor<double>({2, 1, 2, 2})), std::exception);
}

// ---------------------------------------------------------------------------
// sweeps

TEST(Sweep, ZeroLevelMatchesCleanEvaluation) {
  const auto ds = small_dataset();
  const auto st = init_model<float>(micro_arch(), 2);
  EvalConfig c;
  c.episodes = 6;
  const auto clean = evaluate(st, ds, c);
  for (auto kind : {SweepKind::Adversarial, SweepKind::Gaussian}) {
    const auto curve = robustness_sweep(st, ds, kind, {0.0, 0.1}, c);
    ASSERT_EQ(curve.accuracy.size(), 2u);
    EXPECT_EQ(curve.accuracy[0].per_episode, clean.per_episode);
    EXPECT_EQ(curve.episodes, 6);
  }
}

TEST(Sweep, DeterministicCsv) {
  const auto ds = small_dataset();
  const auto st = init_model<float>(micro_arch(), 3);
  EvalConfig c;
  c.episodes = 4;
  std::ostringstream a, b;
  write_sweep_csv(a, robustness_sweep(st, ds, SweepKind::Adversarial, {0.0, 0.05, 0.2}, c));
  write_sweep_csv(b, robustness_sweep(st, ds, SweepKind::Adversarial, {0.0, 0.05, 0.2}, c));
  EXPECT_EQ(a.str(), b.str());
  std::istringstream in(a.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, kSweepHeader);
  int rows = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(line.rfind("adversarial,", 0), 0u);
    ++rows;
  }
  EXPECT_EQ(rows, 3);
}

TEST(Sweep, InvalidLevelsRejected) {
  const auto ds = small_dataset();
  const auto st = init_model<float>(micro_arch(), 3);
  EvalConfig c;
  c.episodes = 2;
  EXPECT_THROW(robustness_sweep(st, ds, SweepKind::Gaussian, {}, c), std::exception);
  EXPECT_THROW(robustness_sweep(st, ds, SweepKind::Gaussian, {0.1, 0.1}, c), ConfigError);
  EXPECT_THROW(robustness_sweep(st, ds, SweepKind::Gaussian, {-0.1}, c), ConfigError);
  EXPECT_THROW(parse_sweep_kind("uniform"), ConfigError);
}

TEST(Sweep, AttackStaysWithinEpsilon) {
  const auto ds = small_dataset();
  const auto st = init_model<float>(micro_arch(), 5);
  const auto ep = sample_episode(ds, 3, 1, 2, 17);
  const auto adv = attack_queries(st, ep, 0.1, PrototypeMode::Mean);
  ASSERT_EQ(adv.dims(), ep.query.dims());
  for (std::size_t i = 0; i < adv.size(); ++i) {
    EXPECT_LE(std::abs(adv[i] - ep.query[i]), 0.1f + 1e-6f);
    EXPECT_GE(adv[i], 0.0f);
    EXPECT_LE(adv[i], 1.0f);
  }
}

}  // namespace
}  // namespace anrot
