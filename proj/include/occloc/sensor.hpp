#pragma once

// Virtual depth camera, backprojection and point-cloud conditioning.

#include <occloc/volume.hpp>

#include <numeric>
#include <optional>

namespace occloc {

/// Square pinhole camera. Pixel (u, v) has its centre at integer coordinates; the principal point
/// is (width / 2, height / 2), so pixel (32, 32) of a 64x64 image looks down the optical axis.
struct Intrinsics {
  int width = 64;
  int height = 64;
  double fov_y_deg = 60.0;

  double focal() const { return 0.5 * height / std::tan(0.5 * deg2rad(fov_y_deg)); }
  double cx() const { return 0.5 * width; }
  double cy() const { return 0.5 * height; }

  /// Unit ray through pixel (u, v) in camera coordinates (x right, y down, z forward).
  Vec3 ray(int u, int v) const { return Vec3((u - cx()) / focal(), (v - cy()) / focal(), 1.0).normalized(); }
};

/// Camera placed `distance` in front of `target` (along world -y), shifted by `lateral` and
/// `vertical` in the view plane, then aimed back at `target`. World +z is "up".
struct CameraPose {
  double distance = 2.0;
  double lateral = 0.0;
  double vertical = 0.0;
  Vec3 target = Vec3::Zero();
  Intrinsics intrinsics;

  Vec3 eye() const { return target + Vec3(lateral, -distance, vertical); }

  /// World -> camera frame.
  RigidTransform world_to_camera() const {
    const Vec3 forward = (target - eye()).normalized();
    Vec3 up = Vec3::UnitZ() - Vec3::UnitZ().dot(forward) * forward;
    up.normalize();
    const Vec3 down = -up;
    const Vec3 right = down.cross(forward);
    RigidTransform t;
    t.rotation.row(0) = right.transpose();
    t.rotation.row(1) = down.transpose();
    t.rotation.row(2) = forward.transpose();
    t.translation = -(t.rotation * eye());
    return t;
  }
};

struct CameraSampling {
  double min_distance = 1.4, max_distance = 2.6;
  double min_lateral = -0.7, max_lateral = 0.7;
  double min_vertical = -0.1, max_vertical = 0.3;
};

inline CameraPose sample_camera_pose(Rng& rng, const Vec3& target, const CameraSampling& ranges = {}, Intrinsics intrinsics = {}) {
  CameraPose pose;
  pose.distance = uniform(rng, ranges.min_distance, ranges.max_distance);
  pose.lateral = uniform(rng, ranges.min_lateral, ranges.max_lateral);
  pose.vertical = uniform(rng, ranges.min_vertical, ranges.max_vertical);
  pose.target = target;
  pose.intrinsics = intrinsics;
  return pose;
}

/// The fixed frontal camera used for evaluation clouds and templates.
inline CameraPose evaluation_camera(const Vec3& target, Intrinsics intrinsics = {}) {
  return CameraPose{2.0, 0.0, 0.0, target, intrinsics};
}

/// Range along each pixel ray; 0 marks "no depth".
struct DepthImage {
  Intrinsics intrinsics;
  std::vector<double> depth;

  explicit DepthImage(Intrinsics in = {}) : intrinsics(in), depth(static_cast<std::size_t>(in.width) * in.height, 0.0) {}

  double& at(int u, int v) { return depth[static_cast<std::size_t>(v) * intrinsics.width + u]; }
  double at(int u, int v) const { return depth[static_cast<std::size_t>(v) * intrinsics.width + u]; }
  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count_if(depth.begin(), depth.end(), [](double d) { return d > 0.0; }));
  }
};

namespace detail {

/// Moller-Trumbore from the camera origin; returns the ray parameter of a front or back hit.
inline std::optional<double> ray_triangle(const Vec3& dir, const Vec3& a, const Vec3& b, const Vec3& c) {
  constexpr double eps = 1e-12;
  const Vec3 e1 = b - a, e2 = c - a;
  const Vec3 p = dir.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < eps) return std::nullopt;
  const double inv = 1.0 / det;
  const Vec3 s = -a;
  const double u = s.dot(p) * inv;
  if (u < -1e-12 || u > 1.0 + 1e-12) return std::nullopt;
  const Vec3 q = s.cross(e1);
  const double v = dir.dot(q) * inv;
  if (v < -1e-12 || u + v > 1.0 + 1e-12) return std::nullopt;
  const double t = e2.dot(q) * inv;
  if (t <= 1e-9) return std::nullopt;
  return t;
}

}  // namespace detail

/// Nearest hit distance along each pixel ray. Triangles in front of the camera only test the
/// pixels inside their projected bounding rectangle.
inline DepthImage render_depth(const TriMesh& skin, const CameraPose& pose) {
  const Intrinsics& in = pose.intrinsics;
  DepthImage image(in);
  if (skin.empty()) return image;
  const RigidTransform to_cam = pose.world_to_camera();
  std::vector<Vec3> verts = to_cam.apply(skin.vertices);
  std::vector<Vec3> rays(static_cast<std::size_t>(in.width) * in.height);
  for (int v = 0; v < in.height; ++v)
    for (int u = 0; u < in.width; ++u) rays[static_cast<std::size_t>(v) * in.width + u] = in.ray(u, v);

  const double f = in.focal();
  for (const auto& tri : skin.triangles) {
    const Vec3 &a = verts[tri[0]], &b = verts[tri[1]], &c = verts[tri[2]];
    int u0 = 0, u1 = in.width - 1, v0 = 0, v1 = in.height - 1;
    if (a.z() > 1e-6 && b.z() > 1e-6 && c.z() > 1e-6) {
      double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
      for (const Vec3* p : {&a, &b, &c}) {
        const double pu = in.cx() + f * p->x() / p->z(), pv = in.cy() + f * p->y() / p->z();
        umin = std::min(umin, pu), umax = std::max(umax, pu), vmin = std::min(vmin, pv), vmax = std::max(vmax, pv);
      }
      u0 = std::max(u0, static_cast<int>(std::floor(umin)));
      u1 = std::min(u1, static_cast<int>(std::ceil(umax)));
      v0 = std::max(v0, static_cast<int>(std::floor(vmin)));
      v1 = std::min(v1, static_cast<int>(std::ceil(vmax)));
    } else if (a.z() <= 0 && b.z() <= 0 && c.z() <= 0) {
      continue;
    }
    for (int v = v0; v <= v1; ++v)
      for (int u = u0; u <= u1; ++u) {
        const auto t = detail::ray_triangle(rays[static_cast<std::size_t>(v) * in.width + u], a, b, c);
        if (!t) continue;
        double& d = image.at(u, v);
        if (d == 0.0 || *t < d) d = *t;
      }
  }
  return image;
}

struct SensorPointCloud {
  std::vector<Vec3> points;  // camera frame, meters
  std::uint64_t seed = 0;
  std::optional<CameraPose> pose;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

/// One point per valid pixel: unit ray times depth.
inline SensorPointCloud backproject(const DepthImage& image) {
  SensorPointCloud cloud;
  const Intrinsics& in = image.intrinsics;
  for (int v = 0; v < in.height; ++v)
    for (int u = 0; u < in.width; ++u)
      if (const double d = image.at(u, v); d > 0.0) cloud.points.push_back(d * in.ray(u, v));
  return cloud;
}

/// Rasterizes camera-frame points back into a depth image (nearest pixel, nearest range wins).
inline DepthImage project(const std::vector<Vec3>& points, const Intrinsics& in) {
  DepthImage image(in);
  for (const Vec3& p : points) {
    if (p.z() <= 0) continue;
    const int u = static_cast<int>(std::lround(in.cx() + in.focal() * p.x() / p.z()));
    const int v = static_cast<int>(std::lround(in.cy() + in.focal() * p.y() / p.z()));
    if (u < 0 || v < 0 || u >= in.width || v >= in.height) continue;
    double& d = image.at(u, v);
    const double r = p.norm();
    if (d == 0.0 || r < d) d = r;
  }
  return image;
}

/// Uniformly random subset of `keep` indices, returned in ascending order.
inline std::vector<std::size_t> random_subset(Rng& rng, std::size_t n, std::size_t keep) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  keep = std::min(keep, n);
  for (std::size_t i = 0; i < keep; ++i) {
    std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
  }
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct EvalConditioning {
  double max_range = 2.5;                 // meters from the camera
  std::optional<AxisAlignedBox> crop;     // camera frame; none keeps everything
  std::size_t target_points = 1000;
  std::uint64_t seed = 0;
};

struct ConditionedCloud {
  SensorPointCloud cloud;
  bool empty_after_cull = false;
};

/// Background cull, crop, then seeded random subsample down to `target_points`.
inline ConditionedCloud condition_eval_cloud(const SensorPointCloud& input, const EvalConditioning& params = {}) {
  ConditionedCloud out;
  out.cloud.seed = params.seed;
  out.cloud.pose = input.pose;
  std::vector<Vec3> kept;
  for (const Vec3& p : input.points) {
    if (p.norm() > params.max_range) continue;
    if (params.crop && !params.crop->contains(p)) continue;
    kept.push_back(p);
  }
  if (kept.empty()) {
    out.empty_after_cull = true;
    return out;
  }
  if (kept.size() <= params.target_points) {
    out.cloud.points = std::move(kept);
    return out;
  }
  Rng rng(params.seed);
  for (std::size_t i : random_subset(rng, kept.size(), params.target_points)) out.cloud.points.push_back(kept[i]);
  return out;
}

/// Aspect-preserving map into [-1, 1]^3: normalized = scale * (p - center).
struct IsoNormalization {
  double scale = 1.0;
  Vec3 center = Vec3::Zero();

  Vec3 normalize(const Vec3& p) const { return scale * (p - center); }
  Vec3 denormalize(const Vec3& q) const { return q / scale + center; }
  double normalize_distance(double d) const { return scale * d; }
  double denormalize_distance(double d) const { return d / scale; }
  std::vector<Vec3> normalize(const std::vector<Vec3>& pts) const {
    std::vector<Vec3> out;
    out.reserve(pts.size());
    for (const Vec3& p : pts) out.push_back(normalize(p));
    return out;
  }
  std::vector<Vec3> denormalize(const std::vector<Vec3>& pts) const {
    std::vector<Vec3> out;
    out.reserve(pts.size());
    for (const Vec3& p : pts) out.push_back(denormalize(p));
    return out;
  }
  AxisAlignedBox denormalize(const AxisAlignedBox& b) const { return {denormalize(b.min_corner), denormalize(b.max_corner)}; }
};

/// Center = AABB midpoint, scale = 2 / longest extent.
inline IsoNormalization fit_normalization(const std::vector<Vec3>& points) {
  if (points.size() < 2) fail_numeric("normalization needs at least two points");
  const AxisAlignedBox box = AxisAlignedBox::of_points(points);
  const double extent = box.extent().maxCoeff();
  if (!(extent > 0.0) || !std::isfinite(extent)) fail_numeric("degenerate cloud: zero extent");
  return {2.0 / extent, box.center()};
}

inline std::pair<std::vector<Vec3>, IsoNormalization> normalize_iso(const std::vector<Vec3>& points) {
  const IsoNormalization n = fit_normalization(points);
  return {n.normalize(points), n};
}

/// Drops a fraction f ~ U(0, max_fraction) of the points (or exactly `forced_fraction`), keeping
/// a uniformly random subset of at least one point in the original order.
inline std::vector<Vec3> point_drop(const std::vector<Vec3>& points, Rng& rng, double max_fraction = 0.7,
                                    std::optional<double> forced_fraction = std::nullopt) {
  if (points.empty()) return {};
  const double f = forced_fraction ? *forced_fraction : uniform(rng, 0.0, max_fraction);
  const auto n = points.size();
  const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround((1.0 - f) * static_cast<double>(n))));
  if (keep >= n) return points;
  std::vector<Vec3> out;
  out.reserve(keep);
  for (std::size_t i : random_subset(rng, n, keep)) out.push_back(points[i]);
  return out;
}

}  // namespace occloc
