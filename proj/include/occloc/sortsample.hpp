#pragma once

// Occupancy / signed-distance training targets: the original SortSample and the revision that
// admits outside samples lying inside neighbouring structures.

#include <occloc/deform.hpp>
#include <occloc/phantom.hpp>
#include <occloc/sensor.hpp>

#include <optional>
#include <string>

namespace occloc {

struct OccupancySample {
  Vec3 position;
  Label label = 0;
  double signed_distance = 0.0;  // to the sampled structure's surface, negative inside it
};

struct StructureSamples {
  Label class_id = 0;
  std::vector<OccupancySample> inside;
  std::vector<OccupancySample> outside;
};

struct OccupancySampleSet {
  int samples_per_side = 0;
  int num_classes = 0;
  std::uint64_t seed = 0;
  std::vector<StructureSamples> structures;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& s : structures) n += s.inside.size() + s.outside.size();
    return n;
  }
  std::vector<OccupancySample> flatten() const {
    std::vector<OccupancySample> all;
    all.reserve(size());
    for (const auto& s : structures) {
      all.insert(all.end(), s.inside.begin(), s.inside.end());
      all.insert(all.end(), s.outside.begin(), s.outside.end());
    }
    return all;
  }
  void transform(const RigidTransform& t) {
    for (auto& s : structures) {
      for (auto& p : s.inside) p.position = t.apply(p.position);
      for (auto& p : s.outside) p.position = t.apply(p.position);
    }
  }
};

/// Exact distance to the boundary faces of one class, with faces bucketed per voxel so queries
/// only visit nearby cells.
class SurfaceDistanceField {
 public:
  SurfaceDistanceField(const VoxelLabelVolume& v, Label class_id) : volume_(&v), class_id_(class_id) {
    const Index3& d = v.dims();
    const double s = v.spacing();
    bucket_start_.assign(v.size() + 1, 0);
    for (int k = 0; k < d[2]; ++k)
      for (int j = 0; j < d[1]; ++j)
        for (int i = 0; i < d[0]; ++i) {
          if (v.at(i, j, k) != class_id) continue;
          for (const Index3& o : kFaceNeighbors) {
            if (v.at_or_zero(i + o[0], j + o[1], k + o[2]) == class_id) continue;
            const int axis = o[0] != 0 ? 0 : (o[1] != 0 ? 1 : 2);
            Vec3 corner = v.voxel_min_corner(i, j, k);
            if (o[axis] > 0) corner[axis] += s;
            faces_.push_back({axis, corner[axis], corner});
            ++bucket_start_[v.linear(i, j, k) + 1];
          }
        }
    // Faces were appended in voxel order, so the prefix sum yields the bucket ranges directly.
    for (std::size_t i = 1; i < bucket_start_.size(); ++i) bucket_start_[i] += bucket_start_[i - 1];
  }

  bool empty() const { return faces_.empty(); }
  Label class_id() const { return class_id_; }

  double unsigned_distance(const Vec3& p) const {
    const VoxelLabelVolume& v = *volume_;
    const Index3& d = v.dims();
    const double s = v.spacing();
    Index3 c;
    for (int a = 0; a < 3; ++a) c[a] = std::clamp(static_cast<int>(std::floor((p[a] - v.origin()[a]) / s)), 0, d[a] - 1);
    const int max_r = std::max({d[0], d[1], d[2]});
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r <= max_r; ++r) {
      // Cells at Chebyshev ring r are at least (r - 1) * s away from p.
      if (best <= (r - 1) * s) break;
      for (int k = c[2] - r; k <= c[2] + r; ++k) {
        if (k < 0 || k >= d[2]) continue;
        for (int j = c[1] - r; j <= c[1] + r; ++j) {
          if (j < 0 || j >= d[1]) continue;
          const bool edge_jk = std::abs(k - c[2]) == r || std::abs(j - c[1]) == r;
          for (int i = c[0] - r; i <= c[0] + r; i += (edge_jk ? 1 : std::max(1, 2 * r))) {
            if (i < 0 || i >= d[0]) continue;
            const std::size_t cell = v.linear(i, j, k);
            for (std::size_t f = bucket_start_[cell]; f < bucket_start_[cell + 1]; ++f)
              best = std::min(best, distance_to_face(p, faces_[f], s));
          }
        }
      }
    }
    return best;
  }

  double signed_distance(const Vec3& p) const {
    const double d = unsigned_distance(p);
    return volume_->label_at_point(p) == class_id_ ? -d : d;
  }

 private:
  const VoxelLabelVolume* volume_;
  Label class_id_;
  std::vector<std::size_t> bucket_start_;
  std::vector<VoxelFace> faces_;
};

struct SortSampleOptions {
  int samples_per_side = 32;
  std::size_t max_draws = 1'000'000;
  std::size_t batch_size = 4096;
  bool keep_discarded = false;  // retain the truncated candidates for inspection
};

struct SortSampleResult {
  bool terminated = false;
  StructureSamples samples;
  std::size_t draws = 0;
  std::size_t inside_candidates = 0;
  std::size_t outside_candidates = 0;
  std::vector<OccupancySample> discarded_inside;
  std::vector<OccupancySample> discarded_outside;
};

namespace detail {

/// Shared draw/sort/truncate loop. `admit_outside(label)` decides whether a non-class draw joins S_o.
template <typename AdmitOutside>
SortSampleResult sort_sample(const VoxelLabelVolume& v, Label class_id, Rng& rng, const SortSampleOptions& opt,
                             AdmitOutside admit_outside) {
  SortSampleResult result;
  result.samples.class_id = class_id;
  const auto box = aabb_of_class(v, class_id);
  if (!box) fail_data("structure " + std::to_string(class_id) + " is absent from the volume");
  const std::size_t n = static_cast<std::size_t>(std::max(opt.samples_per_side, 0));
  const AxisAlignedBox region = box->enlarged(0.5);

  std::vector<Vec3> inside, outside;
  std::vector<Vec3> batch(opt.batch_size);
  auto satisfied = [&] { return std::min(inside.size(), outside.size()) >= n; };
  while (!satisfied() && result.draws < opt.max_draws) {
    for (Vec3& p : batch)
      p = uniform(rng, region.min_corner, region.max_corner);
    for (const Vec3& p : batch) {
      ++result.draws;
      const Label l = v.label_at_point(p);
      if (l == class_id) {
        inside.push_back(p);
      } else if (admit_outside(l)) {
        outside.push_back(p);
      }
      if (satisfied() || result.draws >= opt.max_draws) break;
    }
  }
  result.inside_candidates = inside.size();
  result.outside_candidates = outside.size();
  result.terminated = satisfied();
  if (!result.terminated || n == 0) {
    result.terminated = result.terminated || n == 0;
    return result;
  }

  const SurfaceDistanceField field(v, class_id);
  auto keep_closest = [&](const std::vector<Vec3>& pts, std::vector<OccupancySample>& kept, std::vector<OccupancySample>& dropped) {
    std::vector<OccupancySample> all;
    all.reserve(pts.size());
    for (const Vec3& p : pts) all.push_back({p, v.label_at_point(p), field.signed_distance(p)});
    std::stable_sort(all.begin(), all.end(), [](const OccupancySample& a, const OccupancySample& b) {
      return std::abs(a.signed_distance) < std::abs(b.signed_distance);
    });
    kept.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
    if (opt.keep_discarded) dropped.assign(all.begin() + static_cast<std::ptrdiff_t>(n), all.end());
  };
  keep_closest(inside, result.samples.inside, result.discarded_inside);
  keep_closest(outside, result.samples.outside, result.discarded_outside);
  return result;
}

}  // namespace detail

/// Original algorithm: outside candidates must lie in free space. On tightly packed structures S_o
/// never fills; the loop stops at `max_draws` and reports terminated = false.
inline SortSampleResult sort_sample_original(const VoxelLabelVolume& v, Label class_id, Rng& rng, SortSampleOptions opt = {}) {
  return detail::sort_sample(v, class_id, rng, opt, [](Label l) { return l == 0; });
}

/// Revised algorithm: every non-class draw is an outside candidate and keeps the label of the
/// structure it falls in (0 in free space).
inline SortSampleResult sort_sample_revised(const VoxelLabelVolume& v, Label class_id, Rng& rng, SortSampleOptions opt = {}) {
  opt.max_draws = std::max<std::size_t>(opt.max_draws, 10'000'000);
  auto result = detail::sort_sample(v, class_id, rng, opt, [](Label) { return true; });
  if (!result.terminated) fail_numeric("revised SortSample did not terminate for structure " + std::to_string(class_id));
  return result;
}

/// Labels present in the volume (1..C).
inline std::vector<Label> present_classes(const VoxelLabelVolume& v) {
  const auto h = v.histogram();
  std::vector<Label> out;
  for (std::size_t c = 1; c < h.size(); ++c)
    if (h[c] > 0) out.push_back(static_cast<Label>(c));
  return out;
}

/// Revised SortSample for every present structure, in the volume's frame. The sampling stream is
/// derived from `seed` alone.
inline OccupancySampleSet sample_structures(const VoxelLabelVolume& v, std::uint64_t seed, int samples_per_side) {
  OccupancySampleSet set;
  set.samples_per_side = samples_per_side;
  set.num_classes = v.num_classes();
  set.seed = seed;
  Rng rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
  SortSampleOptions opt;
  opt.samples_per_side = samples_per_side;
  for (Label c : present_classes(v)) set.structures.push_back(sort_sample_revised(v, c, rng, opt).samples);
  return set;
}

/// A sensor cloud plus its occupancy samples, both in the camera frame.
struct TrainingPair {
  SensorPointCloud cloud;
  OccupancySampleSet samples;
  CameraPose pose;
  std::uint64_t seed = 0;
};

struct PairOptions {
  int samples_per_side = 32;
  CameraSampling camera;
  Intrinsics intrinsics;
  std::optional<CameraPose> fixed_pose;  // overrides camera sampling (pose target is kept as given)
};

struct PairOutcome {
  std::optional<TrainingPair> pair;
  std::string discard_reason;
};

/// Deform, render the skin, backproject, sample every structure with the revised SortSample, and
/// express the samples in the camera frame. Deterministic in `seed`.
inline PairOutcome build_training_pair(const VoxelLabelVolume& v, const LatticeDeformation& lattice, std::uint64_t seed,
                                       const PairOptions& opt = {}) {
  PairOutcome out;
  Rng camera_rng(seed);
  const VoxelLabelVolume body = deform_volume(v, lattice);
  const TriMesh skin = extract_skin(body);
  if (skin.empty()) {
    out.discard_reason = "empty skin";
    return out;
  }
  const AxisAlignedBox labelled = AxisAlignedBox::of_points(skin.vertices);
  const CameraPose pose = opt.fixed_pose ? *opt.fixed_pose : sample_camera_pose(camera_rng, labelled.center(), opt.camera, opt.intrinsics);
  const DepthImage depth = render_depth(skin, pose);
  if (depth.valid_count() < 2) {
    out.discard_reason = "degenerate render";
    return out;
  }
  TrainingPair pair;
  pair.seed = seed;
  pair.pose = pose;
  pair.cloud = backproject(depth);
  pair.cloud.seed = seed;
  pair.cloud.pose = pose;
  pair.samples = sample_structures(body, seed, opt.samples_per_side);
  pair.samples.transform(pose.world_to_camera());
  out.pair = std::move(pair);
  return out;
}

}  // namespace occloc
