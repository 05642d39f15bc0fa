#include <occloc/sortsample.hpp>

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace occloc {
namespace {

/// Ellipsoid alone in free space.
VoxelLabelVolume isolated_ellipsoid() {
  VoxelLabelVolume v({30, 30, 30}, 0.01, Vec3::Zero(), 2);
  const Vec3 c(0.15, 0.15, 0.15), axes(0.06, 0.045, 0.08);
  for (int k = 0; k < 30; ++k)
    for (int j = 0; j < 30; ++j)
      for (int i = 0; i < 30; ++i)
        if (((v.voxel_center(i, j, k) - c).array() / axes.array()).square().sum() <= 1.0) v.set(i, j, k, 1);
  return v;
}

/// Sphere (class 1) inside a shell (class 2) inside a filler (class 3).
VoxelLabelVolume embedded_phantom() {
  PhantomSpec spec;
  spec.num_structures = 3;
  spec.structures = {{Primitive::ellipsoid, Vec3::Constant(0.03), Vec3::Constant(0.03), 0.0, Vec3(0, 0, 0.05)},
                     {Primitive::ellipsoid, Vec3::Constant(0.06), Vec3::Constant(0.06), 0.0, Vec3(0, 0, 0.05)}};
  return generate_phantom(spec);
}

void expect_consistent(const VoxelLabelVolume& v, const StructureSamples& s) {
  for (const auto& p : s.inside) {
    EXPECT_EQ(p.label, s.class_id);
    EXPECT_EQ(v.label_at_point(p.position), s.class_id);
    EXPECT_LE(p.signed_distance, 0.0);
  }
  for (const auto& p : s.outside) {
    EXPECT_EQ(p.label, v.label_at_point(p.position));
    EXPECT_NE(p.label, s.class_id);
    EXPECT_GE(p.signed_distance, 0.0);
  }
  for (const auto* side : {&s.inside, &s.outside})
    for (const auto& p : *side) EXPECT_NEAR(p.signed_distance, *signed_distance_oracle(v, p.position, s.class_id), 1e-12);
}

TEST(SurfaceDistance, MatchesExhaustiveOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 4; ++trial) {
    const auto v = test::random_volume(rng, {10, 12, 9}, 3, 0.3);
    for (Label c = 1; c <= 3; ++c) {
      const SurfaceDistanceField field(v, c);
      const AxisAlignedBox region = v.bounds().enlarged(0.6);
      for (int n = 0; n < 200; ++n) {
        const Vec3 p = uniform(rng, region.min_corner, region.max_corner);
        EXPECT_NEAR(field.signed_distance(p), *signed_distance_oracle(v, p, c), 1e-15);
      }
    }
  }
}

TEST(SurfaceDistance, SphereFieldAgreesOnSmoothShape) {
  const auto v = test::sphere_labels({24, 24, 24}, 0.01, Vec3::Constant(0.12), 0.08, 1);
  const SurfaceDistanceField field(v, 1);
  Rng rng(2);
  for (int n = 0; n < 300; ++n) {
    const Vec3 p = uniform(rng, Vec3::Zero(), Vec3::Constant(0.24));
    EXPECT_NEAR(field.signed_distance(p), *signed_distance_oracle(v, p, 1), 1e-15);
  }
}

TEST(SortSampleOriginal, IsolatedEllipsoidTerminatesWithFreeSpaceOutside) {
  const auto v = isolated_ellipsoid();
  Rng rng(3);
  SortSampleOptions opt;
  opt.samples_per_side = 32;
  const auto r = sort_sample_original(v, 1, rng, opt);
  ASSERT_TRUE(r.terminated);
  EXPECT_EQ(r.samples.inside.size(), 32u);
  EXPECT_EQ(r.samples.outside.size(), 32u);
  for (const auto& p : r.samples.outside) EXPECT_EQ(v.label_at_point(p.position), 0);
  expect_consistent(v, r.samples);
}

TEST(SortSampleOriginal, EmbeddedStructureNeverFillsOutside) {
  const auto v = embedded_phantom();
  ASSERT_EQ(free_voxels_near(v, 1), 0u);
  Rng rng(4);
  SortSampleOptions opt;
  opt.samples_per_side = 32;
  opt.max_draws = 1'000'000;
  const auto r = sort_sample_original(v, 1, rng, opt);
  EXPECT_FALSE(r.terminated);
  EXPECT_EQ(r.draws, 1'000'000u);
  EXPECT_EQ(r.outside_candidates, 0u);
  EXPECT_TRUE(r.samples.outside.empty());
  EXPECT_GE(r.inside_candidates, 32u);
}

TEST(SortSampleOriginal, ZeroSamplesTerminatesImmediately) {
  const auto v = isolated_ellipsoid();
  Rng rng(5);
  SortSampleOptions opt;
  opt.samples_per_side = 0;
  const auto r = sort_sample_original(v, 1, rng, opt);
  EXPECT_TRUE(r.terminated);
  EXPECT_TRUE(r.samples.inside.empty());
  EXPECT_TRUE(r.samples.outside.empty());
  EXPECT_EQ(r.draws, 0u);
}

TEST(SortSampleRevised, EmbeddedStructureCarriesEnclosingLabels) {
  const auto v = embedded_phantom();
  Rng rng(6);
  const auto r = sort_sample_revised(v, 1, rng);
  ASSERT_TRUE(r.terminated);
  EXPECT_EQ(r.samples.inside.size(), 32u);
  EXPECT_EQ(r.samples.outside.size(), 32u);
  for (const auto& p : r.samples.outside) EXPECT_EQ(p.label, 2);
  expect_consistent(v, r.samples);
}

TEST(SortSampleRevised, IsolatedMatchesOriginalWithSameSeed) {
  const auto v = isolated_ellipsoid();
  Rng a(7), b(7);
  const auto orig = sort_sample_original(v, 1, a);
  const auto rev = sort_sample_revised(v, 1, b);
  ASSERT_TRUE(orig.terminated);
  ASSERT_EQ(orig.samples.outside.size(), rev.samples.outside.size());
  EXPECT_EQ(orig.draws, rev.draws);
  for (std::size_t i = 0; i < rev.samples.outside.size(); ++i) {
    EXPECT_EQ(rev.samples.outside[i].position, orig.samples.outside[i].position);
    EXPECT_EQ(rev.samples.outside[i].label, 0);
    EXPECT_EQ(rev.samples.inside[i].position, orig.samples.inside[i].position);
  }
}

TEST(SortSampleRevised, SingleVoxelStructure) {
  VoxelLabelVolume v({5, 5, 5}, 0.01, Vec3::Zero(), 1);
  v.set(2, 2, 2, 1);
  Rng rng(8);
  SortSampleOptions opt;
  opt.samples_per_side = 1;
  const auto r = sort_sample_revised(v, 1, rng, opt);
  ASSERT_EQ(r.samples.inside.size(), 1u);
  ASSERT_EQ(r.samples.outside.size(), 1u);
  const AxisAlignedBox voxel{v.voxel_min_corner(2, 2, 2), v.voxel_min_corner(3, 3, 3)};
  EXPECT_TRUE(voxel.contains(r.samples.inside[0].position));
  EXPECT_LE(r.samples.outside[0].signed_distance, 0.01);
  EXPECT_TRUE(voxel.enlarged(2.0).contains(r.samples.outside[0].position));
}

TEST(SortSampleRevised, AbsentStructureFails) {
  const auto v = isolated_ellipsoid();
  Rng rng(9);
  EXPECT_THROW(sort_sample_revised(v, 2, rng), Error);
}

TEST(SortSampleRevised, KeptOutsidePointsAreNearestOfAllCandidates) {
  const auto v = embedded_phantom();
  for (Label c = 1; c <= 3; ++c) {
    Rng rng(10 + c);
    SortSampleOptions opt;
    opt.keep_discarded = true;
    const auto r = sort_sample_revised(v, c, rng, opt);
    expect_consistent(v, r.samples);
    EXPECT_EQ(r.samples.outside.size() + r.discarded_outside.size(), r.outside_candidates);
    EXPECT_EQ(r.samples.inside.size() + r.discarded_inside.size(), r.inside_candidates);
    double kept_out = 0.0, kept_in = 0.0;
    for (const auto& p : r.samples.outside) kept_out = std::max(kept_out, std::abs(p.signed_distance));
    for (const auto& p : r.samples.inside) kept_in = std::max(kept_in, std::abs(p.signed_distance));
    for (const auto& p : r.discarded_outside) EXPECT_LE(kept_out, std::abs(p.signed_distance));
    for (const auto& p : r.discarded_inside) EXPECT_LE(kept_in, std::abs(p.signed_distance));
    // Stopping rule: exactly one side reached N on the final draw.
    EXPECT_EQ(std::min(r.inside_candidates, r.outside_candidates), 32u);
  }
}

TEST(SortSampleRevised, NearSurfaceDensityIsSymmetric) {
  const auto v = embedded_phantom();
  const double s = v.spacing();
  std::size_t in_shell = 0, out_shell = 0;
  Rng rng(12);
  for (int run = 0; run < 40; ++run) {
    const auto r = sort_sample_revised(v, 1, rng);
    for (const auto& p : r.samples.inside) in_shell += p.signed_distance >= -s;
    for (const auto& p : r.samples.outside) out_shell += p.signed_distance <= s;
  }
  ASSERT_GT(in_shell, 0u);
  ASSERT_GT(out_shell, 0u);
  const double ratio = static_cast<double>(out_shell) / static_cast<double>(in_shell);
  EXPECT_GT(ratio, 0.5);
  EXPECT_LT(ratio, 2.0);
}

TEST(TrainingPair, IdentityDeformationFixedCameraMatchesVolumeSamples) {
  PhantomSpec spec;
  spec.seed = 3;
  const auto v = generate_phantom(spec);
  PairOptions opt;
  opt.fixed_pose = CameraPose{2.0, 0.1, 0.05, v.bounds().center(), {}};
  const auto out = build_training_pair(v, LatticeDeformation(v.bounds()), 99, opt);
  ASSERT_TRUE(out.pair);
  const auto reference = sample_structures(v, 99, 32);
  const RigidTransform t = opt.fixed_pose->world_to_camera();
  ASSERT_EQ(out.pair->samples.structures.size(), reference.structures.size());
  for (std::size_t c = 0; c < reference.structures.size(); ++c) {
    const auto& a = out.pair->samples.structures[c];
    const auto& b = reference.structures[c];
    ASSERT_EQ(a.inside.size(), b.inside.size());
    for (std::size_t i = 0; i < a.inside.size(); ++i) {
      EXPECT_LT((a.inside[i].position - t.apply(b.inside[i].position)).norm(), 1e-9);
      EXPECT_LT((a.outside[i].position - t.apply(b.outside[i].position)).norm(), 1e-9);
      EXPECT_EQ(a.outside[i].label, b.outside[i].label);
    }
  }
  EXPECT_EQ(out.pair->cloud.size(), render_depth(extract_skin(v), *opt.fixed_pose).valid_count());
}

TEST(TrainingPair, SizesAndSeedDistinctness) {
  PhantomSpec spec;
  spec.seed = 4;
  const auto v = generate_phantom(spec);
  Rng rng(5);
  const auto lattice = sample_lattice(rng, v.bounds());
  const auto a = build_training_pair(v, lattice, 1);
  const auto b = build_training_pair(v, lattice, 2);
  ASSERT_TRUE(a.pair && b.pair);
  EXPECT_EQ(a.pair->samples.size(), 5u * 64u);
  for (const auto& s : a.pair->samples.structures) {
    EXPECT_EQ(s.inside.size(), 32u);
    EXPECT_EQ(s.outside.size(), 32u);
  }
  EXPECT_NE(a.pair->pose.distance, b.pair->pose.distance);
  EXPECT_NE(a.pair->pose.lateral, b.pair->pose.lateral);
  EXPECT_NE(a.pair->pose.vertical, b.pair->pose.vertical);
  const auto again = build_training_pair(v, lattice, 1);
  EXPECT_EQ(again.pair->cloud.points, a.pair->cloud.points);
  EXPECT_EQ(again.pair->samples.flatten().front().position, a.pair->samples.flatten().front().position);
}

TEST(TrainingPair, SamplesLabelledByDeformedVolume) {
  PhantomSpec spec;
  spec.seed = 5;
  const auto v = generate_phantom(spec);
  Rng rng(6);
  const auto lattice = sample_lattice(rng, v.bounds());
  const auto out = build_training_pair(v, lattice, 7);
  ASSERT_TRUE(out.pair);
  const auto body = deform_volume(v, lattice);
  const RigidTransform to_world = out.pair->pose.world_to_camera().inverse();
  for (const auto& s : out.pair->samples.structures) {
    for (const auto& p : s.inside) EXPECT_EQ(body.label_at_point(to_world.apply(p.position)), s.class_id);
    for (const auto& p : s.outside) EXPECT_EQ(body.label_at_point(to_world.apply(p.position)), p.label);
  }
}

}  // namespace
}  // namespace occloc
