#pragma once

// 4x4x4 lattice free-form deformation (body-pose augmentation) and global rotation augmentation.

#include <occloc/json.hpp>
#include <occloc/volume.hpp>

namespace occloc {

/// Control lattice over a box. The third axis is the body's longitudinal axis; its four levels sit at
/// `level_fractions` of the box height, the in-plane 4x4 grid is uniform.
class LatticeDeformation {
 public:
  static constexpr int kSide = 4;
  static constexpr std::array<double, kSide> kDefaultLevels{0.0, 0.4, 0.7, 1.0};

  LatticeDeformation() : LatticeDeformation(AxisAlignedBox{Vec3::Zero(), Vec3::Ones()}) {}

  explicit LatticeDeformation(const AxisAlignedBox& box, std::array<double, kSide> level_fractions = kDefaultLevels)
      : box_(box), levels_(level_fractions) {
    for (int k = 0; k < kSide; ++k)
      for (int j = 0; j < kSide; ++j)
        for (int i = 0; i < kSide; ++i) rest_[index(i, j, k)] = rest_position(i, j, k);
    deformed_ = rest_;
    level_rotation_deg_.fill(Vec3::Zero());
    level_scale_.fill(1.0);
  }

  static constexpr int index(int i, int j, int k) { return i + kSide * (j + kSide * k); }

  const AxisAlignedBox& box() const { return box_; }
  const std::array<double, kSide>& level_fractions() const { return levels_; }
  const std::array<Vec3, 64>& rest() const { return rest_; }
  const std::array<Vec3, 64>& control_points() const { return deformed_; }
  std::array<Vec3, 64>& control_points() { return deformed_; }
  const std::array<Vec3, kSide>& level_rotations_deg() const { return level_rotation_deg_; }
  const std::array<double, kSide>& level_scales() const { return level_scale_; }

  Vec3 level_center(int k) const {
    Vec3 c = box_.center();
    c.z() = box_.min_corner.z() + levels_[k] * box_.extent().z();
    return c;
  }

  /// Scales then rotates (extrinsic X-Y-Z, degrees) the 16 control points of level k about the
  /// level's geometric center. Replaces any previous transform of that level.
  void set_level_transform(int k, const Vec3& rotation_deg, double scale) {
    level_rotation_deg_[k] = rotation_deg;
    level_scale_[k] = scale;
    const Mat3 r = rotation_xyz(rotation_deg);
    const Vec3 c = level_center(k);
    for (int j = 0; j < kSide; ++j)
      for (int i = 0; i < kSide; ++i) {
        const int idx = index(i, j, k);
        deformed_[idx] = c + r * (scale * (rest_[idx] - c));
      }
  }

  bool is_identity() const { return deformed_ == rest_; }

  /// Trilinear interpolation of control-point displacements. Points outside the lattice use the
  /// displacement at their clamped lattice coordinates.
  Vec3 apply(const Vec3& p) const { return p + displacement(p); }

  std::vector<Vec3> apply(const std::vector<Vec3>& points) const {
    std::vector<Vec3> out;
    out.reserve(points.size());
    for (const Vec3& p : points) out.push_back(apply(p));
    return out;
  }

  Vec3 displacement(const Vec3& p) const {
    const Cell c = locate(p);
    Vec3 d = Vec3::Zero();
    for (int dk = 0; dk < 2; ++dk)
      for (int dj = 0; dj < 2; ++dj)
        for (int di = 0; di < 2; ++di) {
          const double w = (di ? c.t[0] : 1.0 - c.t[0]) * (dj ? c.t[1] : 1.0 - c.t[1]) * (dk ? c.t[2] : 1.0 - c.t[2]);
          const int idx = index(c.cell[0] + di, c.cell[1] + dj, c.cell[2] + dk);
          d += w * (deformed_[idx] - rest_[idx]);
        }
    return d;
  }

  /// Solves apply(p) = q by Newton iteration with a finite-difference Jacobian.
  Vec3 inverse(const Vec3& q, int max_iters = 20, double tol = 1e-10) const {
    Vec3 p = q - displacement(q);
    const double h = 1e-6 * std::max(box_.extent().maxCoeff(), 1e-9);
    for (int it = 0; it < max_iters; ++it) {
      const Vec3 r = apply(p) - q;
      if (r.norm() < tol) break;
      Mat3 jac;
      for (int a = 0; a < 3; ++a) {
        Vec3 e = Vec3::Zero();
        e[a] = h;
        jac.col(a) = (apply(p + e) - apply(p - e)) / (2.0 * h);
      }
      p -= jac.partialPivLu().solve(r);
    }
    return p;
  }

 private:
  struct Cell {
    std::array<int, 3> cell;
    std::array<double, 3> t;
  };

  Vec3 rest_position(int i, int j, int k) const {
    const Vec3 e = box_.extent();
    return Vec3(box_.min_corner.x() + e.x() * i / 3.0, box_.min_corner.y() + e.y() * j / 3.0,
                box_.min_corner.z() + e.z() * levels_[k]);
  }

  Cell locate(const Vec3& p) const {
    Cell c;
    const Vec3 e = box_.extent();
    for (int a = 0; a < 2; ++a) {
      const double u = e[a] > 0 ? std::clamp(3.0 * (p[a] - box_.min_corner[a]) / e[a], 0.0, 3.0) : 0.0;
      c.cell[a] = std::min(static_cast<int>(u), 2);
      c.t[a] = u - c.cell[a];
    }
    const double f = e.z() > 0 ? std::clamp((p.z() - box_.min_corner.z()) / e.z(), 0.0, 1.0) : 0.0;
    int k = 0;
    while (k < 2 && f > levels_[k + 1]) ++k;
    c.cell[2] = k;
    const double span = levels_[k + 1] - levels_[k];
    c.t[2] = span > 0 ? std::clamp((f - levels_[k]) / span, 0.0, 1.0) : 0.0;
    return c;
  }

  AxisAlignedBox box_;
  std::array<double, kSide> levels_;
  std::array<Vec3, 64> rest_;
  std::array<Vec3, 64> deformed_;
  std::array<Vec3, kSide> level_rotation_deg_;
  std::array<double, kSide> level_scale_;
};

/// Per-axis rotation bounds (degrees) for the outer and middle lattice levels, and the scale range.
struct LatticeSampling {
  Vec3 outer_rotation_deg = Vec3(15.0, 10.0, 15.0);
  Vec3 middle_rotation_deg = Vec3(5.0, 5.0, 2.5);
  double min_scale = 0.85;
  double max_scale = 1.15;
};

inline LatticeDeformation sample_lattice(Rng& rng, const AxisAlignedBox& box, const LatticeSampling& ranges = {}) {
  LatticeDeformation lattice(box);
  for (int k = 0; k < LatticeDeformation::kSide; ++k) {
    const bool outer = k == 0 || k == LatticeDeformation::kSide - 1;
    const Vec3& bound = outer ? ranges.outer_rotation_deg : ranges.middle_rotation_deg;
    const Vec3 angles = uniform(rng, Vec3(-bound), bound);
    const double scale = uniform(rng, ranges.min_scale, ranges.max_scale);
    lattice.set_level_transform(k, angles, scale);
  }
  return lattice;
}

/// Resamples labels through the inverse deformation (nearest-neighbour lookup), on a grid with the
/// same spacing that covers the deformed structures plus a two-voxel margin.
inline VoxelLabelVolume deform_volume(const VoxelLabelVolume& v, const LatticeDeformation& lattice) {
  if (lattice.is_identity()) return v;
  AxisAlignedBox reach = AxisAlignedBox::empty();
  bool any = false;
  const Index3& d = v.dims();
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i)
        if (v.at(i, j, k) != 0) {
          any = true;
          reach.expand(lattice.apply(v.voxel_center(i, j, k)));
        }
  if (!any) return v;
  const double s = v.spacing();
  const Vec3 lo = reach.min_corner - Vec3::Constant(2.5 * s);
  const Vec3 hi = reach.max_corner + Vec3::Constant(2.5 * s);
  // Snap the new origin onto the source lattice so undeformed regions resample exactly.
  const Vec3 origin = v.origin() + s * ((lo - v.origin()) / s).array().floor().matrix();
  Index3 dims;
  for (int a = 0; a < 3; ++a) dims[a] = static_cast<int>(std::ceil((hi[a] - origin[a]) / s));
  VoxelLabelVolume out(dims, s, origin, v.num_classes());
  out.class_names = v.class_names;
  for (int k = 0; k < dims[2]; ++k)
    for (int j = 0; j < dims[1]; ++j)
      for (int i = 0; i < dims[0]; ++i) out.set(i, j, k, v.label_at_point(lattice.inverse(out.voxel_center(i, j, k))));
  return out;
}

/// Angles (degrees) for the global augmentation rotation, each uniform in [-max_deg, max_deg].
inline Vec3 sample_rotation_angles(Rng& rng, double max_deg = 30.0) {
  return uniform(rng, Vec3::Constant(-max_deg), Vec3::Constant(max_deg));
}

/// One rigid rotation (about `pivot`) applied to every point.
inline std::vector<Vec3> rotate_points(const std::vector<Vec3>& points, const Vec3& angles_deg, const Vec3& pivot = Vec3::Zero()) {
  const Mat3 r = rotation_xyz(angles_deg);
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const Vec3& p : points) out.push_back(pivot + r * (p - pivot));
  return out;
}

inline std::vector<Vec3> random_rotation(Rng& rng, const std::vector<Vec3>& points, const Vec3& pivot = Vec3::Zero()) {
  return rotate_points(points, sample_rotation_angles(rng), pivot);
}

inline void to_json(nlohmann::json& j, const LatticeDeformation& d) {
  nlohmann::json levels = nlohmann::json::array();
  for (int k = 0; k < LatticeDeformation::kSide; ++k) {
    const Vec3& r = d.level_rotations_deg()[k];
    levels.push_back({{"rotation_deg", r}, {"scale", d.level_scales()[k]}});
  }
  nlohmann::json points = nlohmann::json::array();
  for (const Vec3& p : d.control_points()) points.push_back(p);
  const auto& b = d.box();
  j = {{"box_min", b.min_corner},
       {"box_max", b.max_corner},
       {"level_fractions", d.level_fractions()},
       {"levels", levels},
       {"control_points", points}};
}

inline void from_json(const nlohmann::json& j, LatticeDeformation& d) {
  auto vec = [](const nlohmann::json& a) { return a.get<Vec3>(); };
  d = LatticeDeformation({vec(j.at("box_min")), vec(j.at("box_max"))},
                         j.at("level_fractions").get<std::array<double, LatticeDeformation::kSide>>());
  const auto& levels = j.at("levels");
  for (int k = 0; k < LatticeDeformation::kSide; ++k)
    d.set_level_transform(k, vec(levels.at(k).at("rotation_deg")), levels.at(k).at("scale").get<double>());
  const auto& pts = j.at("control_points");
  for (int idx = 0; idx < 64; ++idx) d.control_points()[idx] = vec(pts.at(idx));
}

}  // namespace occloc
