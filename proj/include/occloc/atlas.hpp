#pragma once

// Two-stage volumetric inference: random probes over the normalized cube, then a dense grid over
// the enlarged box of the inside probes.

#include <occloc/occnet.hpp>

namespace occloc {

/// Anything that labels normalized query points with a class in [0, num_classes()].
template <typename F>
concept OccupancyField = requires(const F& f, const std::vector<Vec3>& pts) {
  { f.classify(pts) } -> std::convertible_to<std::vector<int>>;
  { f.num_classes() } -> std::convertible_to<int>;
};

/// A trained model conditioned on one normalized cloud.
template <typename T>
class ModelField {
 public:
  ModelField(const OccupancyModel<T>& model, const std::vector<Vec3>& normalized_cloud)
      : model_(&model), latent_(model.encode(normalized_cloud)) {}
  std::vector<int> classify(const std::vector<Vec3>& pts) const { return model_->classify(latent_, pts); }
  int num_classes() const { return model_->shape().num_classes; }

 private:
  const OccupancyModel<T>* model_;
  typename OccupancyModel<T>::Vec latent_;
};

/// Analytic field made of labelled boxes (later entries win where they overlap).
struct BoxOracleField {
  int classes = 1;
  std::vector<std::pair<int, AxisAlignedBox>> boxes;

  std::vector<int> classify(const std::vector<Vec3>& pts) const {
    std::vector<int> out(pts.size(), 0);
    for (std::size_t i = 0; i < pts.size(); ++i)
      for (const auto& [c, b] : boxes)
        if (b.contains(pts[i], 0.0)) out[i] = c;
    return out;
  }
  int num_classes() const { return classes; }
};

/// Analytic labelled spheres.
struct SphereOracleField {
  int classes = 1;
  std::vector<std::tuple<int, Vec3, double>> spheres;

  std::vector<int> classify(const std::vector<Vec3>& pts) const {
    std::vector<int> out(pts.size(), 0);
    for (std::size_t i = 0; i < pts.size(); ++i)
      for (const auto& [c, center, r] : spheres)
        if ((pts[i] - center).norm() <= r) out[i] = c;
    return out;
  }
  int num_classes() const { return classes; }
};

struct ProbeResult {
  std::vector<Vec3> points;  // normalized, argmax class != none
  std::vector<int> classes;
  std::size_t drawn = 0;

  bool empty() const { return points.empty(); }
};

template <OccupancyField F>
ProbeResult coarse_probe(const F& field, std::size_t count, Rng& rng) {
  std::vector<Vec3> pts(count);
  for (Vec3& p : pts) p = uniform(rng, Vec3::Constant(-1.0), Vec3::Constant(1.0));
  const std::vector<int> cls = field.classify(pts);
  ProbeResult r;
  r.drawn = count;
  for (std::size_t i = 0; i < count; ++i)
    if (cls[i] != 0) {
      r.points.push_back(pts[i]);
      r.classes.push_back(cls[i]);
    }
  return r;
}

struct AtlasPrediction {
  VoxelLabelVolume volume;                    // metric, in the frame the cloud was given in
  std::vector<std::optional<AxisAlignedBox>> boxes;  // index c - 1
  double pitch_normalized = 0.0;

  bool present(int c) const { return boxes[static_cast<std::size_t>(c - 1)].has_value(); }
  std::size_t present_count() const {
    return static_cast<std::size_t>(std::count_if(boxes.begin(), boxes.end(), [](const auto& b) { return b.has_value(); }));
  }
};

/// Dense argmax grid over the probe box enlarged by `margin` of its extent (split evenly per side).
/// The longest axis gets `resolution` voxels; pitch is isotropic. The result is denormalized.
template <OccupancyField F>
AtlasPrediction dense_reconstruct(const F& field, const ProbeResult& probe, int resolution, double margin,
                                  const IsoNormalization& norm) {
  const int C = field.num_classes();
  AtlasPrediction pred{VoxelLabelVolume({1, 1, 1}, 1.0 / norm.scale, norm.denormalize(Vec3::Zero()), C), {}, 0.0};
  pred.boxes.assign(static_cast<std::size_t>(C), std::nullopt);
  if (probe.empty()) return pred;
  if (resolution < 1) fail_usage("resolution must be positive");
  const AxisAlignedBox region = AxisAlignedBox::of_points(probe.points).enlarged(margin);
  double pitch = region.extent().maxCoeff() / resolution;
  if (!(pitch > 0.0)) pitch = 2.0 / resolution;  // a single probe point
  Index3 dims;
  for (int a = 0; a < 3; ++a) dims[a] = std::max(1, static_cast<int>(std::ceil(region.extent()[a] / pitch - 1e-9)));
  // Center the grid on the region.
  const Vec3 span = pitch * Vec3(dims[0], dims[1], dims[2]);
  const Vec3 lo = region.center() - 0.5 * span;

  std::vector<Vec3> centers;
  centers.reserve(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2]);
  for (int k = 0; k < dims[2]; ++k)
    for (int j = 0; j < dims[1]; ++j)
      for (int i = 0; i < dims[0]; ++i) centers.push_back(lo + pitch * Vec3(i + 0.5, j + 0.5, k + 0.5));
  const std::vector<int> cls = field.classify(centers);

  VoxelLabelVolume v(dims, pitch / norm.scale, norm.denormalize(lo), C);
  for (std::size_t idx = 0; idx < cls.size(); ++idx) v.set(idx, static_cast<Label>(cls[idx]));
  pred.volume = std::move(v);
  pred.pitch_normalized = pitch;
  for (int c = 1; c <= C; ++c) pred.boxes[static_cast<std::size_t>(c - 1)] = aabb_of_class(pred.volume, static_cast<Label>(c));
  return pred;
}

struct InferenceParams {
  std::size_t probes = 40000;
  int resolution = 64;
  double margin = 0.15;
  std::uint64_t seed = 1;
};

/// Normalize the metric cloud, probe, densely reconstruct, and return metric results.
template <typename T>
AtlasPrediction infer_atlas(const OccupancyModel<T>& model, const std::vector<Vec3>& cloud, const InferenceParams& params = {}) {
  const auto [normalized, norm] = normalize_iso(cloud);
  const ModelField<T> field(model, normalized);
  Rng rng(params.seed);
  const ProbeResult probe = coarse_probe(field, params.probes, rng);
  return dense_reconstruct(field, probe, params.resolution, params.margin, norm);
}

/// Closed per-class meshes of the predicted volume; absent classes are skipped.
inline std::vector<TriMesh> extract_atlas_meshes(const AtlasPrediction& pred) {
  std::vector<TriMesh> meshes;
  const VoxelLabelVolume padded = pad_boundary(pred.volume);
  for (int c = 1; c <= static_cast<int>(pred.boxes.size()); ++c)
    if (pred.present(c)) meshes.push_back(extract_mesh(padded, static_cast<Label>(c)));
  return meshes;
}

}  // namespace occloc
