#pragma once

// Template matching: rigid ICP of the patient cloud onto every template, chamfer-based selection,
// and transfer of the winning template's boxes back into patient space.

#include <occloc/core.hpp>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <optional>
#include <unordered_map>

namespace occloc {

/// Exact nearest-neighbour queries on a uniform hash grid.
class NearestNeighborGrid {
 public:
  explicit NearestNeighborGrid(std::vector<Vec3> points) : points_(std::move(points)) {
    if (points_.empty()) fail_data("nearest-neighbour grid needs at least one point");
    bounds_ = AxisAlignedBox::of_points(points_);
    cell_ = median_spacing();
    const Vec3 cells = bounds_.extent() / cell_;
    max_ring_ = static_cast<int>(std::ceil(cells.maxCoeff())) + 2;
    for (std::size_t i = 0; i < points_.size(); ++i) cells_[key(cell_of(points_[i]))].push_back(static_cast<std::uint32_t>(i));
  }

  const std::vector<Vec3>& points() const { return points_; }
  double cell_size() const { return cell_; }

  /// Index of the closest point (lowest index on ties) and its distance.
  std::pair<std::size_t, double> nearest(const Vec3& q) const {
    const std::array<int, 3> c = cell_of(q);
    double best2 = std::numeric_limits<double>::infinity();
    std::size_t best = 0;
    for (int r = 0; r <= max_ring_ + distance_to_grid(c); ++r) {
      const double shell = std::pow(2.0 * r + 1.0, 3) - std::pow(2.0 * r - 1.0, 3);
      if (shell > static_cast<double>(points_.size())) return brute_force(q);  // far from the cloud
      for (int dz = -r; dz <= r; ++dz)
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r) continue;
            const auto it = cells_.find(key({c[0] + dx, c[1] + dy, c[2] + dz}));
            if (it == cells_.end()) continue;
            for (std::uint32_t i : it->second) {
              const double d2 = (points_[i] - q).squaredNorm();
              if (d2 < best2 || (d2 == best2 && i < best)) best2 = d2, best = i;
            }
          }
      // Anything in ring r + 1 or beyond is at least r cells away.
      if (std::isfinite(best2) && std::sqrt(best2) <= r * cell_) break;
    }
    return {best, std::sqrt(best2)};
  }

 private:
  std::pair<std::size_t, double> brute_force(const Vec3& q) const {
    double best2 = std::numeric_limits<double>::infinity();
    std::size_t best = 0;
    for (std::size_t i = 0; i < points_.size(); ++i) {
      const double d2 = (points_[i] - q).squaredNorm();
      if (d2 < best2) best2 = d2, best = i;
    }
    return {best, std::sqrt(best2)};
  }

  /// Median nearest-neighbour spacing over up to 256 evenly strided points (brute force).
  double median_spacing() const {
    const std::size_t n = points_.size();
    const std::size_t stride = std::max<std::size_t>(1, n / 256);
    std::vector<double> d;
    for (std::size_t i = 0; i < n; i += stride) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) best = std::min(best, (points_[j] - points_[i]).norm());
      if (std::isfinite(best) && best > 0.0) d.push_back(best);
    }
    if (d.empty()) return std::max(bounds_.extent().maxCoeff(), 1e-6);
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
    return d[d.size() / 2];
  }

  std::array<int, 3> cell_of(const Vec3& p) const {
    const Vec3 g = (p - bounds_.min_corner) / cell_;
    return {static_cast<int>(std::floor(g.x())), static_cast<int>(std::floor(g.y())), static_cast<int>(std::floor(g.z()))};
  }
  int distance_to_grid(const std::array<int, 3>& c) const {
    const Vec3 g = (bounds_.max_corner - bounds_.min_corner) / cell_;
    int d = 0;
    for (int a = 0; a < 3; ++a) d = std::max({d, -c[a], c[a] - static_cast<int>(std::ceil(g[a]))});
    return d;
  }
  static std::int64_t key(const std::array<int, 3>& c) {
    return (static_cast<std::int64_t>(c[0]) & 0x1FFFFF) | ((static_cast<std::int64_t>(c[1]) & 0x1FFFFF) << 21) |
           ((static_cast<std::int64_t>(c[2]) & 0x1FFFFF) << 42);
  }

  std::vector<Vec3> points_;
  AxisAlignedBox bounds_;
  double cell_ = 1.0;
  int max_ring_ = 0;
  std::unordered_map<std::int64_t, std::vector<std::uint32_t>> cells_;
};

inline Vec3 centroid(const std::vector<Vec3>& pts) {
  Vec3 c = Vec3::Zero();
  for (const Vec3& p : pts) c += p;
  return c / static_cast<double>(pts.size());
}

/// Least-squares rigid map taking src[i] onto dst[i] (Kabsch, reflection-corrected).
inline RigidTransform fit_rigid(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  const Vec3 cs = centroid(src), cd = centroid(dst);
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) h += (src[i] - cs) * (dst[i] - cd).transpose();
  const Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  RigidTransform t;
  t.rotation = svd.matrixV() * d * svd.matrixU().transpose();
  t.translation = cd - t.rotation * cs;
  return t;
}

/// Rejects clouds with fewer than three points or all points on a line.
inline void require_nondegenerate(const std::vector<Vec3>& pts, const char* what) {
  if (pts.size() < 3) fail_data(std::string(what) + " needs at least three points");
  const Vec3 c = centroid(pts);
  Mat3 cov = Mat3::Zero();
  for (const Vec3& p : pts) cov += (p - c) * (p - c).transpose();
  const Vec3 ev = Eigen::SelfAdjointEigenSolver<Mat3>(cov).eigenvalues();  // ascending
  if (!(ev[1] > 1e-12 * std::max(ev[2], 1e-300))) fail_data(std::string(what) + " is collinear");
}

struct IcpOptions {
  int max_iters = 50;
  double tol = 1e-6;  // meters of RMS improvement
};

struct IcpResult {
  RigidTransform transform;       // source -> target
  double residual = 0.0;          // RMS nearest-neighbour distance after the final transform
  std::vector<double> history;    // residual after initialization and after every iteration
  int iterations = 0;
  bool converged = false;
};

/// Point-to-point ICP, initialized by centroid alignment. Each iteration refits the full
/// transform from the original source onto the current correspondences.
inline IcpResult icp_register(const std::vector<Vec3>& source, const NearestNeighborGrid& target, const IcpOptions& opt = {}) {
  require_nondegenerate(source, "ICP source");
  require_nondegenerate(target.points(), "ICP target");
  IcpResult r;
  r.transform.translation = centroid(target.points()) - centroid(source);

  std::vector<Vec3> matched(source.size());
  auto correspond = [&](const RigidTransform& t) {
    double ss = 0.0;
    for (std::size_t i = 0; i < source.size(); ++i) {
      const auto [j, d] = target.nearest(t.apply(source[i]));
      matched[i] = target.points()[j];
      ss += d * d;
    }
    return std::sqrt(ss / static_cast<double>(source.size()));
  };
  r.residual = correspond(r.transform);
  r.history.push_back(r.residual);
  std::vector<Vec3> best_matched = matched;
  for (int it = 0; it < opt.max_iters; ++it) {
    const RigidTransform next = fit_rigid(source, best_matched);
    const double e = correspond(next);
    ++r.iterations;
    if (e > r.residual) {  // only roundoff can get here; keep the better transform
      r.history.push_back(r.residual);
      r.converged = true;
      break;
    }
    const double gain = r.residual - e;
    r.transform = next;
    r.residual = e;
    r.history.push_back(e);
    best_matched = matched;
    if (gain < opt.tol) {
      r.converged = true;
      break;
    }
  }
  return r;
}

inline IcpResult icp_register(const std::vector<Vec3>& source, const std::vector<Vec3>& target, const IcpOptions& opt = {}) {
  return icp_register(source, NearestNeighborGrid(target), opt);
}

inline double mean_nearest(const std::vector<Vec3>& from, const NearestNeighborGrid& to) {
  double s = 0.0;
  for (const Vec3& p : from) s += to.nearest(p).second;
  return s / static_cast<double>(from.size());
}

/// Symmetric chamfer distance: the two mean nearest distances, averaged.
inline double chamfer(const std::vector<Vec3>& a, const NearestNeighborGrid& a_grid, const std::vector<Vec3>& b,
                      const NearestNeighborGrid& b_grid) {
  const double ab = mean_nearest(a, b_grid), ba = mean_nearest(b, a_grid);
  return 0.5 * (std::min(ab, ba) + std::max(ab, ba));
}

inline double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  if (a.empty() || b.empty()) fail_data("chamfer distance needs two nonempty clouds");
  return chamfer(a, NearestNeighborGrid(a), b, NearestNeighborGrid(b));
}

struct Template {
  std::string id;
  std::vector<Vec3> cloud;
  std::vector<std::optional<AxisAlignedBox>> boxes;  // index c - 1, template frame
};

struct MatchResult {
  std::size_t selected = 0;
  std::vector<double> chamfer;        // per template, after registration
  std::vector<IcpResult> registration;
  std::vector<std::optional<AxisAlignedBox>> boxes;  // patient frame
};

/// Registers the patient onto every template, keeps the lowest chamfer (first on ties) and pulls
/// its boxes back into patient space, re-tightened around the 8 mapped corners.
inline MatchResult match_and_transfer(const std::vector<Vec3>& patient, const std::vector<Template>& templates,
                                      const IcpOptions& opt = {}) {
  if (templates.empty()) fail_data("empty template library");
  MatchResult m;
  for (const Template& t : templates) {
    const NearestNeighborGrid grid(t.cloud);
    IcpResult reg = icp_register(patient, grid, opt);
    std::vector<Vec3> moved;
    moved.reserve(patient.size());
    for (const Vec3& p : patient) moved.push_back(reg.transform.apply(p));
    m.chamfer.push_back(chamfer(moved, NearestNeighborGrid(moved), t.cloud, grid));
    m.registration.push_back(std::move(reg));
  }
  m.selected = static_cast<std::size_t>(std::min_element(m.chamfer.begin(), m.chamfer.end()) - m.chamfer.begin());
  const RigidTransform back = m.registration[m.selected].transform.inverse();
  for (const auto& b : templates[m.selected].boxes)
    m.boxes.push_back(b ? std::optional<AxisAlignedBox>(transform_box(back, *b)) : std::nullopt);
  return m;
}

}  // namespace occloc
