#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace occloc {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Rng = std::mt19937_64;

/// Error categories; the CLI maps them onto process exit codes.
enum class ErrorKind { usage = 1, data = 2, numeric = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail_data(const std::string& what) { throw Error(ErrorKind::data, what); }
[[noreturn]] inline void fail_numeric(const std::string& what) { throw Error(ErrorKind::numeric, what); }
[[noreturn]] inline void fail_usage(const std::string& what) { throw Error(ErrorKind::usage, what); }

/// Uniform double in [lo, hi) from the top 53 bits of one draw (same stream on every platform).
inline double uniform(Rng& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

/// Uniform integer in [0, n) by rejection; n > 0.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do x = rng();
  while (x >= limit);
  return x % n;
}

/// Componentwise uniform point; x, y, z drawn in that order.
inline Vec3 uniform(Rng& rng, const Vec3& lo, const Vec3& hi) {
  const double x = uniform(rng, lo.x(), hi.x());
  const double y = uniform(rng, lo.y(), hi.y());
  const double z = uniform(rng, lo.z(), hi.z());
  return Vec3(x, y, z);
}

/// Axis-aligned box in meters. Invariant: min_corner <= max_corner componentwise.
struct AxisAlignedBox {
  Vec3 min_corner = Vec3::Zero();
  Vec3 max_corner = Vec3::Zero();

  Vec3 center() const { return 0.5 * (min_corner + max_corner); }
  Vec3 extent() const { return max_corner - min_corner; }
  double volume() const {
    const Vec3 e = extent();
    return e.x() * e.y() * e.z();
  }
  bool contains(const Vec3& p, double tol = 0.0) const {
    return (p.array() >= min_corner.array() - tol).all() && (p.array() <= max_corner.array() + tol).all();
  }
  bool contains(const AxisAlignedBox& b, double tol = 0.0) const {
    return contains(b.min_corner, tol) && contains(b.max_corner, tol);
  }
  bool valid() const { return (min_corner.array() <= max_corner.array()).all(); }

  void expand(const Vec3& p) {
    min_corner = min_corner.cwiseMin(p);
    max_corner = max_corner.cwiseMax(p);
  }

  /// Grows every extent by `fraction` of itself, split evenly on both sides.
  AxisAlignedBox enlarged(double fraction) const {
    const Vec3 pad = 0.5 * fraction * extent();
    return {min_corner - pad, max_corner + pad};
  }

  std::array<Vec3, 8> corners() const {
    std::array<Vec3, 8> out;
    for (int k = 0; k < 8; ++k) {
      out[k] = Vec3((k & 1) ? max_corner.x() : min_corner.x(), (k & 2) ? max_corner.y() : min_corner.y(),
                    (k & 4) ? max_corner.z() : min_corner.z());
    }
    return out;
  }

  static AxisAlignedBox empty() {
    constexpr double inf = std::numeric_limits<double>::infinity();
    return {Vec3::Constant(inf), Vec3::Constant(-inf)};
  }

  template <typename Range>
  static AxisAlignedBox of_points(const Range& points) {
    AxisAlignedBox box = empty();
    for (const Vec3& p : points) box.expand(p);
    return box;
  }

  friend bool operator==(const AxisAlignedBox& a, const AxisAlignedBox& b) {
    return a.min_corner == b.min_corner && a.max_corner == b.max_corner;
  }
};

/// Rigid map x -> rotation * x + translation.
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  RigidTransform inverse() const {
    RigidTransform inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }
  /// (a * b)(x) = a(b(x))
  friend RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
    return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
  }
  std::vector<Vec3> apply(const std::vector<Vec3>& points) const {
    std::vector<Vec3> out;
    out.reserve(points.size());
    for (const Vec3& p : points) out.push_back(apply(p));
    return out;
  }
};

/// Axis-aligned box around the 8 transformed corners of `box`. Never smaller than the rotated box.
inline AxisAlignedBox transform_box(const RigidTransform& t, const AxisAlignedBox& box) {
  AxisAlignedBox out = AxisAlignedBox::empty();
  for (const Vec3& c : box.corners()) out.expand(t.apply(c));
  return out;
}

inline constexpr double kPi = 3.14159265358979323846;
inline double deg2rad(double deg) { return deg * kPi / 180.0; }

/// Extrinsic X, then Y, then Z rotation (degrees): R = Rz * Ry * Rx.
inline Mat3 rotation_xyz(const Vec3& degrees) {
  return (Eigen::AngleAxisd(deg2rad(degrees.z()), Vec3::UnitZ()) *
          Eigen::AngleAxisd(deg2rad(degrees.y()), Vec3::UnitY()) *
          Eigen::AngleAxisd(deg2rad(degrees.x()), Vec3::UnitX()))
      .toRotationMatrix();
}

}  // namespace occloc
