#include <occloc/occnet.hpp>

#include <gtest/gtest.h>

#include <tuple>

namespace occloc {
namespace {

NetworkShape small_shape(int classes = 3) {
  NetworkShape s;
  s.num_classes = classes;
  s.latent = 24;
  s.encoder_hidden = {8, 16};
  s.decoder_width = 16;
  return s;
}

std::vector<Vec3> random_cloud(Rng& rng, int n) {
  std::vector<Vec3> pts;
  for (int i = 0; i < n; ++i) pts.push_back(uniform(rng, Vec3::Constant(-1), Vec3::Constant(1)));
  return pts;
}

/// Queries labelled by a sphere/slab rule so the task is learnable.
TrainExample synthetic_example(Rng& rng, int points, int queries, int classes) {
  TrainExample ex;
  ex.cloud = random_cloud(rng, points);
  for (int i = 0; i < queries; ++i) {
    const Vec3 q = uniform(rng, Vec3::Constant(-1), Vec3::Constant(1));
    ex.queries.push_back(q);
    const double r = q.norm();
    ex.labels.push_back(r < 0.5 ? 1 : (q.z() > 0.3 ? std::min(2, classes) : 0));
    ex.distances.push_back(r - 0.5);
  }
  return ex;
}

TEST(Encoder, PermutationGivesBitIdenticalLatent) {
  Rng rng(1);
  const auto model = OccupancyModel<float>::initialized(NetworkShape{}, 3);
  auto cloud = random_cloud(rng, 300);
  const auto ref = model.encode(cloud);
  for (int t = 0; t < 10; ++t) {
    for (std::size_t i = cloud.size(); i > 1; --i) std::swap(cloud[i - 1], cloud[uniform_index(rng, i)]);
    const auto l = model.encode(cloud);
    ASSERT_EQ(l.size(), 1024);
    EXPECT_TRUE((l.array() == ref.array()).all());
  }
}

TEST(Encoder, RepeatedPointEqualsSinglePoint) {
  const auto model = OccupancyModel<double>::initialized(small_shape(), 4);
  const Vec3 p(0.1, -0.4, 0.7);
  const std::vector<Vec3> many(100, p);
  EXPECT_TRUE((model.encode(many).array() == model.encode({p}).array()).all());
}

TEST(Encoder, FarPointChangesLatent) {
  Rng rng(5);
  const auto model = OccupancyModel<double>::initialized(NetworkShape{}, 6);
  auto cloud = random_cloud(rng, 200);
  const auto a = model.encode(cloud);
  cloud.push_back(Vec3(3.0, 3.0, 3.0));
  const auto b = model.encode(cloud);
  EXPECT_GT((a - b).norm(), 0.0);
}

TEST(Encoder, EmptyCloudFails) {
  const auto model = OccupancyModel<double>::initialized(small_shape(), 1);
  EXPECT_THROW(model.encode({}), Error);
}

TEST(Decoder, ZeroHeadGivesUniformLogits) {
  Rng rng(7);
  const auto model = OccupancyModel<double>::initialized(small_shape(5), 8, true);
  const auto out = model.predict(model.encode(random_cloud(rng, 50)), random_cloud(rng, 20));
  ASSERT_EQ(out.rows(), 7);
  EXPECT_EQ(out.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Decoder, EvalModeIsDeterministic) {
  Rng rng(9);
  const auto model = OccupancyModel<float>::initialized(NetworkShape{}, 10);
  const auto latent = model.encode(random_cloud(rng, 100));
  const auto q = random_cloud(rng, 64);
  const auto a = model.predict(latent, q);
  const auto b = model.predict(latent, q);
  EXPECT_TRUE((a.array() == b.array()).all());
  EXPECT_TRUE(a.allFinite());
}

TEST(Decoder, ChunkedPredictionMatchesSinglePass) {
  Rng rng(11);
  const auto model = OccupancyModel<double>::initialized(small_shape(), 12);
  const auto latent = model.encode(random_cloud(rng, 40));
  const auto q = random_cloud(rng, 100);
  EXPECT_LT((model.predict(latent, q, 7) - model.predict(latent, q)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Loss, PerfectPredictionIsNearZero) {
  std::vector<double> logits(6, 0.0);
  logits[2] = 20.0;
  const auto l = sample_loss(logits, 0.3, 2, 0.3, 100.0);
  EXPECT_LT(l.total(), 1e-6);
  EXPECT_GE(l.total(), 0.0);
}

TEST(Loss, DistanceTermUsesLambda) {
  std::vector<double> logits(6, 0.0);
  logits[0] = 50.0;
  const auto l = sample_loss(logits, 0.2, 0, 0.1, 100.0);
  EXPECT_NEAR(l.sdf, 1.0, 1e-12);
  EXPECT_NEAR(l.total(), 1.0, 1e-12);
}

TEST(Loss, UniformLogitsGiveLogSix) {
  const std::vector<double> logits(6, 0.7);
  EXPECT_NEAR(sample_loss(logits, 0.0, 4, 0.0, 100.0).total(), std::log(6.0), 1e-15);
}

TEST(Loss, AffineInLambda) {
  Rng rng(13);
  auto model = OccupancyModel<double>::initialized(small_shape(), 14);
  const auto ex = synthetic_example(rng, 30, 40, 3);
  const auto l0 = model.loss_and_gradient({&ex}, 0.0, nullptr);
  const auto l1 = model.loss_and_gradient({&ex}, 1.0, nullptr);
  const auto l100 = model.loss_and_gradient({&ex}, 100.0, nullptr);
  EXPECT_EQ(l0.sdf, 0.0);
  EXPECT_EQ(l0.ce, l100.ce);
  EXPECT_NEAR(l100.total() - l0.total(), 100.0 * l1.sdf, 1e-12 * l100.total());
}

TEST(Gradient, MatchesCentralDifferences) {
  Rng rng(15);
  auto model = OccupancyModel<double>::initialized(small_shape(), 16);
  const auto a = synthetic_example(rng, 25, 30, 3);
  const auto b = synthetic_example(rng, 35, 20, 3);
  const auto probes = check_gradients(model, {&a, &b}, 100.0, 60, 17);
  int encoder = 0;
  for (const auto& p : probes) {
    encoder += p.encoder;
    EXPECT_LT(p.relative_error, 1e-3) << "param " << p.index << " analytic " << p.analytic << " numeric " << p.numeric;
  }
  EXPECT_EQ(encoder, 30);
}

TEST(Gradient, EveryBlockMatchesOnFullCheck) {
  Rng rng(18);
  auto model = OccupancyModel<double>::initialized(small_shape(2), 19);
  const auto a = synthetic_example(rng, 12, 10, 2);
  const auto b = synthetic_example(rng, 9, 14, 2);
  std::vector<const TrainExample*> batch{&a, &b};
  AlignedVector<double> grad;
  model.loss_and_gradient(batch, 10.0, &grad);
  const double h = 1e-5;
  for (const auto& blk : model.layout().blocks) {
    double worst = 0.0;
    for (std::size_t i = blk.offset; i < blk.offset + blk.size(); i += 1 + blk.size() / 40) {
      double& t = model.params()[i];
      const double keep = t;
      t = keep + h;
      const double up = model.loss_and_gradient(batch, 10.0, nullptr).total();
      t = keep - h;
      const double down = model.loss_and_gradient(batch, 10.0, nullptr).total();
      t = keep;
      const double num = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(num - grad[i]) / std::max({std::abs(num), std::abs(grad[i]), 1e-6}));
    }
    EXPECT_LT(worst, 1e-3) << blk.name;
  }
}

TEST(Training, ZeroLearningRateLeavesParameters) {
  Rng rng(20);
  auto model = OccupancyModel<double>::initialized(small_shape(), 21);
  const auto before = model.params();
  const auto ex = synthetic_example(rng, 20, 30, 3);
  TrainConfig cfg;
  cfg.adam.lr = 0.0;
  AdamState<double> adam;
  for (int s = 0; s < 3; ++s) train_step(model, adam, {&ex}, cfg);
  EXPECT_EQ(model.params(), before);
  EXPECT_EQ(adam.step, 3u);
}

TEST(Training, SingleExampleLossDropsTenfold) {
  Rng rng(22);
  auto model = OccupancyModel<float>::initialized(small_shape(), 23);
  const auto ex = synthetic_example(rng, 50, 64, 3);
  TrainConfig cfg;
  AdamState<float> adam;
  const double first = train_step(model, adam, {&ex}, cfg).total();
  double last = first;
  for (int s = 1; s < 200; ++s) last = train_step(model, adam, {&ex}, cfg).total();
  EXPECT_LT(last, first / 10.0) << "first " << first << " last " << last;
}

TEST(Training, ZeroLambdaStillReducesCrossEntropy) {
  Rng rng(24);
  auto model = OccupancyModel<float>::initialized(small_shape(), 25);
  const auto ex = synthetic_example(rng, 50, 64, 3);
  TrainConfig cfg;
  cfg.lambda = 0.0;
  cfg.adam.lr = 5e-3;
  AdamState<float> adam;
  const auto first = train_step(model, adam, {&ex}, cfg);
  LossTerms last;
  for (int s = 1; s < 100; ++s) last = train_step(model, adam, {&ex}, cfg);
  EXPECT_EQ(last.sdf, 0.0);
  EXPECT_LT(last.ce, 0.5 * first.ce);
}

TEST(Training, RunningStatisticsOnlyMoveInTrainMode) {
  Rng rng(26);
  auto model = OccupancyModel<double>::initialized(small_shape(), 27);
  const auto ex = synthetic_example(rng, 20, 30, 3);
  const auto mean0 = model.running_mean();
  model.predict(model.encode(ex.cloud), ex.queries);
  model.loss_and_gradient({&ex}, 100.0, nullptr);
  EXPECT_EQ(model.running_mean()[0], mean0[0]);
  model.loss_and_gradient({&ex}, 100.0, nullptr, true);
  EXPECT_NE(model.running_mean()[0], mean0[0]);
}

TEST(Training, BadLabelIsDataError) {
  Rng rng(28);
  auto model = OccupancyModel<double>::initialized(small_shape(), 29);
  auto ex = synthetic_example(rng, 10, 5, 3);
  ex.labels[0] = 9;
  EXPECT_THROW(model.loss_and_gradient({&ex}, 100.0, nullptr), Error);
}

std::vector<TrainingPair> toy_pairs(int count) {
  // Clouds and samples in "camera" space: a jittered plane of points and a labelled sphere.
  std::vector<TrainingPair> pairs;
  Rng rng(30);
  for (int i = 0; i < count; ++i) {
    TrainingPair p;
    const Vec3 shift = uniform(rng, Vec3::Constant(-0.1), Vec3::Constant(0.1));
    for (int u = 0; u < 12; ++u)
      for (int v = 0; v < 12; ++v) p.cloud.points.push_back(shift + Vec3(0.05 * u, 0.05 * v, 2.0 + 0.01 * std::sin(u + v)));
    StructureSamples s;
    s.class_id = 1;
    for (int k = 0; k < 16; ++k) {
      const Vec3 q = shift + Vec3(0.3, 0.3, 2.1) + uniform(rng, Vec3::Constant(-0.2), Vec3::Constant(0.2));
      const double d = (q - shift - Vec3(0.3, 0.3, 2.1)).norm() - 0.1;
      (d < 0 ? s.inside : s.outside).push_back({q, static_cast<Label>(d < 0 ? 1 : 0), d});
    }
    p.samples.structures.push_back(s);
    pairs.push_back(p);
  }
  return pairs;
}

TEST(TrainLoop, TraceIsReproducible) {
  const auto pairs = toy_pairs(6);
  for (bool augment : {false, true}) {
    TrainConfig cfg;
    cfg.shape = small_shape(1);
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.sample_chunks = 1;
    cfg.point_drop = augment;
    cfg.rotation = augment;
    auto a = start_training<double>(cfg);
    auto b = start_training<double>(cfg);
    train_loop(a, pairs, cfg);
    train_loop(b, pairs, cfg);
    ASSERT_EQ(a.trace.size(), 9u);
    for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(a.trace[i].loss.total(), b.trace[i].loss.total());
    EXPECT_EQ(a.model.params(), b.model.params());
  }
}

TEST(TrainLoop, ResumingContinuesTheSameTrace) {
  const auto pairs = toy_pairs(5);
  TrainConfig cfg;
  cfg.shape = small_shape(1);
  cfg.epochs = 4;
  cfg.batch_size = 2;
  auto full = start_training<double>(cfg);
  train_loop(full, pairs, cfg);
  TrainConfig half = cfg;
  half.epochs = 2;
  auto part = start_training<double>(half);
  train_loop(part, pairs, half);
  train_loop(part, pairs, cfg);
  ASSERT_EQ(part.trace.size(), full.trace.size());
  for (std::size_t i = 0; i < full.trace.size(); ++i) EXPECT_EQ(part.trace[i].loss.total(), full.trace[i].loss.total());
  EXPECT_EQ(part.model.params(), full.model.params());
}

TEST(TrainLoop, SampleChunksMultiplyTheSteps) {
  const auto pairs = toy_pairs(6);
  TrainConfig cfg;
  cfg.shape = small_shape(1);
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.sample_chunks = 4;
  auto s = start_training<double>(cfg);
  train_loop(s, pairs, cfg);
  EXPECT_EQ(s.trace.size(), 2u * 2u * 4u);  // two cloud groups per epoch, four steps each
  cfg.sample_chunks = 0;
  EXPECT_THROW(train_loop(s, pairs, cfg), Error);
}

TEST(SplitSamples, PartitionsEveryExample) {
  Rng rng(40);
  std::vector<TrainExample> exs{synthetic_example(rng, 10, 23, 2), synthetic_example(rng, 7, 5, 2)};
  const auto parts = split_samples(exs, 4, rng);
  ASSERT_EQ(parts.size(), 4u);
  for (std::size_t e = 0; e < exs.size(); ++e) {
    std::vector<std::tuple<double, double, double, int, double>> seen, want;
    for (std::size_t i = 0; i < exs[e].queries.size(); ++i) {
      const Vec3& q = exs[e].queries[i];
      want.emplace_back(q.x(), q.y(), q.z(), exs[e].labels[i], exs[e].distances[i]);
    }
    std::size_t smallest = SIZE_MAX, largest = 0;
    for (const auto& part : parts) {
      const TrainExample& ex = part[e];
      EXPECT_EQ(ex.cloud, exs[e].cloud);
      smallest = std::min(smallest, ex.queries.size());
      largest = std::max(largest, ex.queries.size());
      for (std::size_t i = 0; i < ex.queries.size(); ++i)
        seen.emplace_back(ex.queries[i].x(), ex.queries[i].y(), ex.queries[i].z(), ex.labels[i], ex.distances[i]);
    }
    EXPECT_LE(largest - smallest, 1u);
    std::sort(seen.begin(), seen.end());
    std::sort(want.begin(), want.end());
    EXPECT_EQ(seen, want);
  }
  EXPECT_EQ(split_samples(exs, 1, rng)[0][0].queries, exs[0].queries);
}

TEST(BatchNormCalibration, FirstLayerMatchesPopulationStatistics) {
  const auto pairs = toy_pairs(5);
  auto model = OccupancyModel<double>::initialized(small_shape(1), 41);
  calibrate_batchnorm(model, pairs, 1000, 3);  // more than any pair holds: every sample is used
  TrainConfig plain;
  plain.point_drop = false;
  plain.rotation = false;
  Rng unused(0);
  const Eigen::MatrixXd W = model.block(model.layout().dec_w[0]);
  const Eigen::Index L = small_shape(1).latent;
  std::vector<Eigen::VectorXd> z;
  for (const auto& p : pairs) {
    const TrainExample ex = prepare_example(p.cloud, p.samples, unused, plain);
    const Eigen::VectorXd latent = model.encode(ex.cloud);
    for (const Vec3& q : ex.queries) z.push_back(W.leftCols(L) * latent + W.rightCols(3) * q);
  }
  const double n = static_cast<double>(z.size());
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(W.rows()), var = Eigen::VectorXd::Zero(W.rows());
  for (const auto& v : z) mean += v / n;
  for (const auto& v : z) var += (v - mean).cwiseAbs2() / (n - 1.0);
  EXPECT_LT((model.running_mean()[0] - mean).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((model.running_var()[0] - var).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(BatchNormCalibration, ParametersUntouched) {
  const auto pairs = toy_pairs(3);
  auto model = OccupancyModel<double>::initialized(small_shape(1), 42);
  const auto before = model.params();
  calibrate_batchnorm(model, pairs, 4, 1);
  EXPECT_EQ(model.params(), before);
}

TEST(TrainLoop, EmptyDatasetFails) {
  TrainConfig cfg;
  cfg.shape = small_shape(1);
  auto s = start_training<double>(cfg);
  EXPECT_THROW(train_loop(s, {}, cfg), Error);
}

TEST(Augmentation, RotationKeepsLabelsWithGeometry) {
  auto pairs = toy_pairs(1);
  TrainConfig cfg;
  cfg.point_drop = false;
  Rng rng(31);
  const TrainExample ex = prepare_example(pairs[0].cloud, pairs[0].samples, rng, cfg);
  // Pairwise distances between queries and cloud points scale uniformly; labels are untouched.
  const auto flat = pairs[0].samples.flatten();
  ASSERT_EQ(ex.labels.size(), flat.size());
  const double scale = (ex.queries[0] - ex.cloud[0]).norm() / (flat[0].position - pairs[0].cloud.points[0]).norm();
  for (std::size_t i = 0; i < flat.size(); ++i) {
    EXPECT_EQ(ex.labels[i], flat[i].label);
    EXPECT_NEAR(ex.distances[i], scale * flat[i].signed_distance, 1e-12);
    EXPECT_NEAR((ex.queries[i] - ex.cloud[5]).norm(), scale * (flat[i].position - pairs[0].cloud.points[5]).norm(), 1e-9);
  }
  double maxabs = 0;
  for (const Vec3& p : ex.cloud) maxabs = std::max(maxabs, p.cwiseAbs().maxCoeff());
  EXPECT_NEAR(maxabs, 1.0, 1e-12);
}

}  // namespace
}  // namespace occloc
