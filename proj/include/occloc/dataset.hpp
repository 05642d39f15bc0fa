#pragma once

// Training-set and evaluation-render assembly on top of the phantom, deformation, sensor and
// sampling modules.

#include <occloc/sortsample.hpp>

#include <map>

namespace occloc {

/// Stable 64-bit seed for item (a, b) of a run seeded with `base`.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32), static_cast<std::uint32_t>(a),
                    static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

struct DatasetOptions {
  int augmentations = 8;  // deformed renders per volume
  PairOptions pair;
  LatticeSampling lattice;
};

inline void to_json(nlohmann::json& j, const DatasetOptions& o) {
  j = {{"augmentations", o.augmentations},
       {"samples_per_side", o.pair.samples_per_side},
       {"camera",
        {{"min_distance", o.pair.camera.min_distance},
         {"max_distance", o.pair.camera.max_distance},
         {"min_lateral", o.pair.camera.min_lateral},
         {"max_lateral", o.pair.camera.max_lateral},
         {"min_vertical", o.pair.camera.min_vertical},
         {"max_vertical", o.pair.camera.max_vertical}}},
       {"lattice",
        {{"outer_rotation_deg", o.lattice.outer_rotation_deg},
         {"middle_rotation_deg", o.lattice.middle_rotation_deg},
         {"min_scale", o.lattice.min_scale},
         {"max_scale", o.lattice.max_scale}}}};
}
inline void from_json(const nlohmann::json& j, DatasetOptions& o) {
  o = DatasetOptions{};
  o.augmentations = j.value("augmentations", o.augmentations);
  o.pair.samples_per_side = j.value("samples_per_side", o.pair.samples_per_side);
  if (j.contains("camera")) {
    const auto& c = j.at("camera");
    auto& r = o.pair.camera;
    r.min_distance = c.value("min_distance", r.min_distance);
    r.max_distance = c.value("max_distance", r.max_distance);
    r.min_lateral = c.value("min_lateral", r.min_lateral);
    r.max_lateral = c.value("max_lateral", r.max_lateral);
    r.min_vertical = c.value("min_vertical", r.min_vertical);
    r.max_vertical = c.value("max_vertical", r.max_vertical);
  }
  if (j.contains("lattice")) {
    const auto& l = j.at("lattice");
    auto& r = o.lattice;
    r.outer_rotation_deg = l.value("outer_rotation_deg", r.outer_rotation_deg);
    r.middle_rotation_deg = l.value("middle_rotation_deg", r.middle_rotation_deg);
    r.min_scale = l.value("min_scale", r.min_scale);
    r.max_scale = l.value("max_scale", r.max_scale);
  }
  if (o.augmentations < 1) fail_usage("augmentations must be positive");
  if (o.pair.samples_per_side < 1) fail_usage("samples_per_side must be positive");
}

struct DatasetResult {
  std::vector<TrainingPair> pairs;
  std::vector<std::size_t> source;  // volume index of each pair
  std::map<std::string, std::size_t> discarded;
};

/// `augmentations` deformed renders of every volume, in volume-major order.
inline DatasetResult build_dataset(const std::vector<VoxelLabelVolume>& volumes, std::uint64_t seed,
                                   const DatasetOptions& opt = {}) {
  if (volumes.empty()) fail_data("no volumes to build a dataset from");
  DatasetResult out;
  for (std::size_t vi = 0; vi < volumes.size(); ++vi)
    for (int a = 0; a < opt.augmentations; ++a) {
      const std::uint64_t s = derive_seed(seed, vi, static_cast<std::uint64_t>(a));
      Rng lattice_rng(s ^ 0x1A771CEULL);
      const LatticeDeformation lattice = sample_lattice(lattice_rng, volumes[vi].bounds(), opt.lattice);
      PairOutcome r = build_training_pair(volumes[vi], lattice, s, opt.pair);
      if (r.pair) {
        out.pairs.push_back(std::move(*r.pair));
        out.source.push_back(vi);
      } else {
        ++out.discarded[r.discard_reason];
      }
    }
  return out;
}

/// Undeformed render from the fixed evaluation camera with reference boxes in the camera frame.
struct EvalRender {
  SensorPointCloud cloud;
  CameraPose pose;
  std::vector<std::optional<AxisAlignedBox>> reference;  // index c - 1
  std::vector<std::size_t> voxel_counts;                // index c - 1
};

inline EvalRender render_evaluation(const VoxelLabelVolume& v, const EvalConditioning& conditioning = {},
                                    Intrinsics intrinsics = {}) {
  const TriMesh skin = extract_skin(v);
  if (skin.empty()) fail_data("volume has no skin to render");
  EvalRender out;
  out.pose = evaluation_camera(AxisAlignedBox::of_points(skin.vertices).center(), intrinsics);
  const ConditionedCloud c = condition_eval_cloud(backproject(render_depth(skin, out.pose)), conditioning);
  if (c.empty_after_cull) fail_data("evaluation render is empty after conditioning");
  out.cloud = c.cloud;
  const RigidTransform to_camera = out.pose.world_to_camera();
  const auto h = v.histogram();
  for (int cls = 1; cls <= v.num_classes(); ++cls) {
    out.reference.push_back(aabb_of_class_in_frame(v, static_cast<Label>(cls), to_camera));
    out.voxel_counts.push_back(h[static_cast<std::size_t>(cls)]);
  }
  return out;
}

}  // namespace occloc
