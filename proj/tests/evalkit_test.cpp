#include <occloc/evalkit.hpp>

#include <gtest/gtest.h>

namespace occloc {
namespace {

constexpr double kCm = 0.01;

/// 2 x 2 cm square in the xy plane, shifted diagonally by `offset_cm`.
AxisAlignedBox square(double offset_cm) {
  const Vec3 lo(offset_cm * kCm, offset_cm * kCm, 0.0);
  return {lo, lo + Vec3(2 * kCm, 2 * kCm, 0.0)};
}

AxisAlignedBox random_box(Rng& rng) {
  const Vec3 lo = uniform(rng, Vec3::Constant(-0.2), Vec3::Constant(0.2));
  return {lo, lo + uniform(rng, Vec3::Constant(0.01), Vec3::Constant(0.15))};
}

struct Fig6 {
  double offset, cd, iou, esf;
};

TEST(Figure6, PublishedTriples) {
  const std::vector<Fig6> rows{{0.25, 0.35, 0.62, 1.25}, {0.5, 0.71, 0.39, 1.50}, {0.75, 1.06, 0.24, 1.75}, {1.0, 1.41, 0.14, 2.00}};
  for (const auto& r : rows) {
    const AxisAlignedBox ref = square(0.0), est = square(r.offset);
    EXPECT_NEAR(center_distance_cm(est, ref), r.cd, 0.01) << r.offset;
    EXPECT_NEAR(iou(est, ref).value, r.iou, 0.01) << r.offset;
    ASSERT_TRUE(esf(est, ref).has_value());
    EXPECT_NEAR(*esf(est, ref), r.esf, 0.01) << r.offset;
  }
}

TEST(Figure6, ClosedForms) {
  // Diagonal shift d of a side-2 square: CD = d sqrt 2, overlap (2 - d)^2, ESF = (1 + d) / 1.
  for (double d : {0.1, 0.25, 0.6, 1.0, 1.7}) {
    const AxisAlignedBox ref = square(0.0), est = square(d);
    const double overlap = (2 - d) * (2 - d);
    EXPECT_NEAR(center_distance_cm(est, ref), d * std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(iou(est, ref).value, overlap / (8.0 - overlap), 1e-12);
    EXPECT_NEAR(*esf(est, ref), 1.0 + d, 1e-12);
  }
  EXPECT_NEAR(iou(square(0.25), square(0.0)).value, 3.0625 / 4.9375, 1e-12);
}

TEST(Metrics, IdenticalBoxes) {
  const AxisAlignedBox b{Vec3(0, 0, 0), Vec3(0.1, 0.2, 0.3)};
  EXPECT_EQ(center_distance_cm(b, b), 0.0);
  EXPECT_DOUBLE_EQ(iou(b, b).value, 1.0);
  EXPECT_DOUBLE_EQ(*esf(b, b), 1.0);
}

TEST(Metrics, DisjointBoxesHaveZeroIou) {
  const AxisAlignedBox a{Vec3(0, 0, 0), Vec3(1, 1, 1)}, b{Vec3(2, 0, 0), Vec3(3, 1, 1)};
  const IouResult r = iou(a, b);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_FALSE(r.degenerate);
}

TEST(Metrics, ZeroVolumeBoxesAreDegenerate) {
  const AxisAlignedBox p{Vec3(1, 2, 3), Vec3(1, 2, 3)};
  const IouResult r = iou(p, p);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_TRUE(r.degenerate);
}

TEST(Metrics, EsfIsOneOnContainment) {
  const AxisAlignedBox est{Vec3(0, 0, 0), Vec3(1, 1, 1)}, ref{Vec3(0.2, 0.3, 0.1), Vec3(0.9, 0.5, 0.4)};
  EXPECT_DOUBLE_EQ(*esf(est, ref), 1.0);
}

TEST(Metrics, EsfIsAsymmetric) {
  const AxisAlignedBox big{Vec3(0, 0, 0), Vec3(1, 1, 1)}, small{Vec3(0.4, 0.4, 0.4), Vec3(0.6, 0.6, 0.6)};
  EXPECT_DOUBLE_EQ(*esf(big, small), 1.0);
  EXPECT_DOUBLE_EQ(*esf(small, big), 5.0);
}

TEST(Metrics, FlatEstimateNeedingGrowthIsInfinite) {
  const AxisAlignedBox est{Vec3(0, 0, 0.5), Vec3(1, 1, 0.5)}, ref{Vec3(0, 0, 0), Vec3(1, 1, 1)};
  EXPECT_FALSE(esf(est, ref).has_value());
  const MetricRecord r = evaluate_boxes("a", 1, est, ref);
  EXPECT_TRUE(r.esf_infinite);
  EXPECT_TRUE(r.cd_cm.has_value());
}

TEST(Metrics, MissingBoxGivesMissingRecord) {
  const AxisAlignedBox b{Vec3(0, 0, 0), Vec3(1, 1, 1)};
  const MetricRecord r = evaluate_boxes("a", 3, std::nullopt, b);
  EXPECT_FALSE(r.complete());
  EXPECT_FALSE(r.cd_cm || r.iou || r.esf);
}

TEST(MetricProperties, RandomPairs) {
  Rng rng(17);
  for (int t = 0; t < 1000; ++t) {
    const AxisAlignedBox a = random_box(rng), b = random_box(rng);
    const Vec3 shift = uniform(rng, Vec3::Constant(-1), Vec3::Constant(1));
    const AxisAlignedBox as{a.min_corner + shift, a.max_corner + shift}, bs{b.min_corner + shift, b.max_corner + shift};
    EXPECT_NEAR(center_distance_cm(as, bs), center_distance_cm(a, b), 1e-9);
    EXPECT_NEAR(iou(as, bs).value, iou(a, b).value, 1e-9);
    EXPECT_NEAR(*esf(as, bs), *esf(a, b), 1e-9);

    const double k = uniform(rng, 0.2, 5.0);
    const Vec3 p = uniform(rng, Vec3::Constant(-1), Vec3::Constant(1));
    auto scaled = [&](const AxisAlignedBox& x) { return AxisAlignedBox{p + k * (x.min_corner - p), p + k * (x.max_corner - p)}; };
    EXPECT_NEAR(center_distance_cm(scaled(a), scaled(b)), k * center_distance_cm(a, b), 1e-9);
    EXPECT_NEAR(iou(scaled(a), scaled(b)).value, iou(a, b).value, 1e-9);
    EXPECT_NEAR(*esf(scaled(a), scaled(b)), *esf(a, b), 1e-9);

    EXPECT_EQ(iou(a, b).value, iou(b, a).value);
    EXPECT_EQ(center_distance_cm(a, b), center_distance_cm(b, a));
    EXPECT_DOUBLE_EQ(*esf(a.enlarged(0.0), AxisAlignedBox{a.center(), a.center()}), 1.0);
  }
}

TEST(Aggregate, SingleRecord) {
  const MetricTable t = aggregate({evaluate_boxes("a", 1, square(0.5), square(0.0))}, Metric::cd);
  EXPECT_NEAR(t.per_structure.at(1).mean, 0.5 * std::sqrt(2.0), 1e-12);
  EXPECT_EQ(t.per_structure.at(1).std, 0.0);
}

TEST(Aggregate, TwoValues) {
  const Moments m = moments({1.0, 3.0});
  EXPECT_DOUBLE_EQ(m.mean, 2.0);
  EXPECT_DOUBLE_EQ(m.std, 1.0);
}

TEST(Aggregate, MatchesWelfordOracle) {
  Rng rng(4);
  std::vector<double> xs;
  for (int i = 0; i < 50; ++i) xs.push_back(uniform(rng, -3.0, 10.0));
  double mean = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double delta = xs[i] - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (xs[i] - mean);
  }
  const Moments m = moments(xs);
  EXPECT_NEAR(m.mean, mean, 1e-12);
  EXPECT_NEAR(m.std, std::sqrt(m2 / 50.0), 1e-12);
}

TEST(Aggregate, MissingRecordsAreCountedNotAveraged) {
  const AxisAlignedBox b{Vec3(0, 0, 0), Vec3(0.1, 0.1, 0.1)};
  std::vector<MetricRecord> recs{evaluate_boxes("a", 1, b, b), evaluate_boxes("b", 1, std::nullopt, b),
                                 evaluate_boxes("a", 2, b, b)};
  const MetricTable t = aggregate(recs, Metric::iou);
  EXPECT_EQ(t.per_structure.at(1).count, 1u);
  EXPECT_EQ(t.per_structure.at(1).missing, 1u);
  EXPECT_DOUBLE_EQ(t.per_structure.at(1).mean, 1.0);
  EXPECT_EQ(t.overall.count, 2u);
  EXPECT_EQ(t.overall.missing, 1u);
}

TEST(Aggregate, EmptyFails) { EXPECT_THROW(aggregate({}, Metric::cd), Error); }

TEST(Csv, HeaderAndRows) {
  const AxisAlignedBox b{Vec3(0, 0, 0), Vec3(0.1, 0.1, 0.1)};
  const std::string csv = metric_csv(aggregate({evaluate_boxes("a", 1, b, b), evaluate_boxes("a", 2, std::nullopt, b)}, Metric::esf),
                                     {"liver"});
  EXPECT_EQ(csv, "ValueNumber,Structure,Mean,Std,Count,Missing\n0,liver,1,0,1,0\n1,structure_2,0,0,0,1\n2,all,1,0,1,1\n");
}

}  // namespace
}  // namespace occloc
