#pragma once

#include <occloc/core.hpp>
#include <occloc/detail/mc_table.hpp>

#include <cstddef>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace occloc {

using Label = std::uint16_t;
using Index3 = std::array<int, 3>;

/// Dense grid of class labels (0 = no structure) on an isotropic lattice.
/// Voxel (i, j, k) covers [origin + (i, j, k) * spacing, origin + (i + 1, j + 1, k + 1) * spacing).
class VoxelLabelVolume {
 public:
  VoxelLabelVolume() = default;

  VoxelLabelVolume(Index3 dims, double spacing, Vec3 origin, int num_classes)
      : dims_(dims), spacing_(spacing), origin_(std::move(origin)), num_classes_(num_classes) {
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1) fail_data("volume dims must be >= 1");
    if (!(spacing > 0.0)) fail_data("volume spacing must be positive");
    if (num_classes < 0 || num_classes > 65535) fail_data("class count out of range");
    labels_.assign(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2], 0);
  }

  const Index3& dims() const { return dims_; }
  double spacing() const { return spacing_; }
  const Vec3& origin() const { return origin_; }
  int num_classes() const { return num_classes_; }
  std::size_t size() const { return labels_.size(); }
  std::span<const Label> labels() const { return labels_; }

  std::size_t linear(int i, int j, int k) const {
    return static_cast<std::size_t>(i) + static_cast<std::size_t>(dims_[0]) *
                                             (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims_[1]) * k);
  }
  Index3 unlinear(std::size_t idx) const {
    const int i = static_cast<int>(idx % dims_[0]);
    idx /= dims_[0];
    return {i, static_cast<int>(idx % dims_[1]), static_cast<int>(idx / dims_[1])};
  }
  bool in_bounds(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims_[0] && j < dims_[1] && k < dims_[2];
  }

  Label at(int i, int j, int k) const { return labels_[linear(i, j, k)]; }
  Label at(std::size_t idx) const { return labels_[idx]; }
  /// Label lookup that treats everything outside the grid as free space.
  Label at_or_zero(int i, int j, int k) const { return in_bounds(i, j, k) ? at(i, j, k) : Label{0}; }

  void set(int i, int j, int k, Label value) { set(linear(i, j, k), value); }
  void set(std::size_t idx, Label value) {
    if (value > num_classes_) fail_data("label " + std::to_string(value) + " exceeds class count");
    labels_[idx] = value;
  }

  Vec3 voxel_min_corner(int i, int j, int k) const { return origin_ + spacing_ * Vec3(i, j, k); }
  Vec3 voxel_center(int i, int j, int k) const { return origin_ + spacing_ * Vec3(i + 0.5, j + 0.5, k + 0.5); }

  /// Containing voxel by floor indexing; nullopt outside the grid.
  std::optional<Index3> voxel_of(const Vec3& p) const {
    const Vec3 g = (p - origin_) / spacing_;
    const Index3 idx{static_cast<int>(std::floor(g.x())), static_cast<int>(std::floor(g.y())),
                     static_cast<int>(std::floor(g.z()))};
    if (!in_bounds(idx[0], idx[1], idx[2])) return std::nullopt;
    return idx;
  }
  Label label_at_point(const Vec3& p) const {
    const auto idx = voxel_of(p);
    return idx ? at((*idx)[0], (*idx)[1], (*idx)[2]) : Label{0};
  }

  /// World box covered by the whole grid.
  AxisAlignedBox bounds() const {
    return {origin_, origin_ + spacing_ * Vec3(dims_[0], dims_[1], dims_[2])};
  }

  std::size_t count(Label c) const { return static_cast<std::size_t>(std::count(labels_.begin(), labels_.end(), c)); }
  std::vector<std::size_t> histogram() const {
    std::vector<std::size_t> h(static_cast<std::size_t>(num_classes_) + 1, 0);
    for (Label l : labels_) ++h[l];
    return h;
  }

  std::vector<std::string> class_names;

  friend bool operator==(const VoxelLabelVolume& a, const VoxelLabelVolume& b) {
    return a.dims_ == b.dims_ && a.spacing_ == b.spacing_ && a.origin_ == b.origin_ &&
           a.num_classes_ == b.num_classes_ && a.labels_ == b.labels_;
  }

 private:
  Index3 dims_{0, 0, 0};
  double spacing_ = 1.0;
  Vec3 origin_ = Vec3::Zero();
  int num_classes_ = 0;
  std::vector<Label> labels_;
};

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;
  int class_id = 0;

  bool empty() const { return triangles.empty(); }
};

// ---------------------------------------------------------------------------
// Operations

/// Adds a one-voxel ring of label 0 around the grid.
inline VoxelLabelVolume pad_boundary(const VoxelLabelVolume& v) {
  const Index3& d = v.dims();
  VoxelLabelVolume out({d[0] + 2, d[1] + 2, d[2] + 2}, v.spacing(), v.origin() - Vec3::Constant(v.spacing()),
                       v.num_classes());
  out.class_names = v.class_names;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) out.set(i + 1, j + 1, k + 1, v.at(i, j, k));
  return out;
}

inline constexpr std::array<Index3, 6> kFaceNeighbors{{{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}}};

struct ComponentFilterResult {
  VoxelLabelVolume volume;
  bool class_present = false;
  std::size_t kept = 0;
  std::size_t removed = 0;
};

/// Keeps only the largest 6-connected component of `class_id`; ties go to the component
/// whose lowest linear index comes first.
inline ComponentFilterResult largest_component(const VoxelLabelVolume& v, Label class_id) {
  ComponentFilterResult result{v, false, 0, 0};
  const std::size_t n = v.size();
  std::vector<int> component(n, -1);
  std::vector<std::size_t> sizes;
  std::deque<std::size_t> queue;
  for (std::size_t seed = 0; seed < n; ++seed) {
    if (v.at(seed) != class_id || component[seed] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    sizes.push_back(0);
    component[seed] = id;
    queue.push_back(seed);
    while (!queue.empty()) {
      const std::size_t cur = queue.front();
      queue.pop_front();
      ++sizes[id];
      const Index3 c = v.unlinear(cur);
      for (const Index3& o : kFaceNeighbors) {
        const int i = c[0] + o[0], j = c[1] + o[1], k = c[2] + o[2];
        if (!v.in_bounds(i, j, k)) continue;
        const std::size_t nb = v.linear(i, j, k);
        if (v.at(nb) == class_id && component[nb] < 0) {
          component[nb] = id;
          queue.push_back(nb);
        }
      }
    }
  }
  if (sizes.empty()) return result;
  result.class_present = true;
  int best = 0;
  for (int id = 1; id < static_cast<int>(sizes.size()); ++id)
    if (sizes[id] > sizes[best]) best = id;
  for (std::size_t idx = 0; idx < n; ++idx) {
    if (component[idx] >= 0 && component[idx] != best) {
      result.volume.set(idx, 0);
      ++result.removed;
    }
  }
  result.kept = sizes[best];
  return result;
}

/// Marching cubes over the binary field `inside(label)` sampled at voxel centers, iso-level 0.5.
/// Vertices are welded per lattice edge; triangles are wound counter-clockwise seen from outside.
template <typename InsidePredicate>
TriMesh extract_isosurface(const VoxelLabelVolume& v, InsidePredicate inside, int class_id = 0) {
  TriMesh mesh;
  mesh.class_id = class_id;
  const Index3& d = v.dims();
  if (d[0] < 2 || d[1] < 2 || d[2] < 2) return mesh;

  std::vector<std::uint8_t> field(v.size());
  for (std::size_t idx = 0; idx < v.size(); ++idx) field[idx] = inside(v.at(idx)) ? 1 : 0;

  std::unordered_map<std::size_t, int> edge_vertex;
  auto vertex_on_edge = [&](const Index3& a, const Index3& b) {
    int axis = 0;
    while (a[axis] == b[axis]) ++axis;
    const Index3& lo = a[axis] < b[axis] ? a : b;
    const std::size_t key = v.linear(lo[0], lo[1], lo[2]) * 3 + static_cast<std::size_t>(axis);
    auto [it, inserted] = edge_vertex.try_emplace(key, static_cast<int>(mesh.vertices.size()));
    if (inserted) {
      const double fa = field[v.linear(a[0], a[1], a[2])];
      const double fb = field[v.linear(b[0], b[1], b[2])];
      const double t = (0.5 - fa) / (fb - fa);
      const Vec3 pa = v.voxel_center(a[0], a[1], a[2]);
      const Vec3 pb = v.voxel_center(b[0], b[1], b[2]);
      mesh.vertices.push_back(pa + t * (pb - pa));
    }
    return it->second;
  };

  for (int k = 0; k + 1 < d[2]; ++k) {
    for (int j = 0; j + 1 < d[1]; ++j) {
      for (int i = 0; i + 1 < d[0]; ++i) {
        std::array<Index3, 8> corner;
        int config = 0;
        for (int c = 0; c < 8; ++c) {
          const auto& off = detail::kCellCorner[c];
          corner[c] = {i + off[0], j + off[1], k + off[2]};
          if (!field[v.linear(corner[c][0], corner[c][1], corner[c][2])]) config |= 1 << c;
        }
        if (config == 0 || config == 255) continue;
        const auto& row = detail::kTriTable[config];
        for (int t = 0; row[t] >= 0; t += 3) {
          std::array<int, 3> tri;
          for (int s = 0; s < 3; ++s) {
            const auto& e = detail::kCellEdge[row[t + s]];
            tri[s] = vertex_on_edge(corner[e[0]], corner[e[1]]);
          }
          mesh.triangles.push_back(tri);
        }
      }
    }
  }
  return mesh;
}

/// Closed surface of one class. Pad the volume first when the class touches the grid border.
inline TriMesh extract_mesh(const VoxelLabelVolume& v, Label class_id) {
  return extract_isosurface(v, [class_id](Label l) { return l == class_id; }, class_id);
}

/// Tight world box over the outer corners of all `class_id` voxels, or nullopt if absent.
inline std::optional<AxisAlignedBox> aabb_of_class(const VoxelLabelVolume& v, Label class_id) {
  Index3 lo{std::numeric_limits<int>::max(), std::numeric_limits<int>::max(), std::numeric_limits<int>::max()};
  Index3 hi{-1, -1, -1};
  const Index3& d = v.dims();
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        if (v.at(i, j, k) != class_id) continue;
        lo = {std::min(lo[0], i), std::min(lo[1], j), std::min(lo[2], k)};
        hi = {std::max(hi[0], i), std::max(hi[1], j), std::max(hi[2], k)};
      }
  if (hi[0] < 0) return std::nullopt;
  return AxisAlignedBox{v.voxel_min_corner(lo[0], lo[1], lo[2]), v.voxel_min_corner(hi[0] + 1, hi[1] + 1, hi[2] + 1)};
}

/// Same as aabb_of_class but measured in another frame: the tight box over every transformed
/// voxel corner of the class.
inline std::optional<AxisAlignedBox> aabb_of_class_in_frame(const VoxelLabelVolume& v, Label class_id,
                                                            const RigidTransform& to_frame) {
  AxisAlignedBox box = AxisAlignedBox::empty();
  bool any = false;
  const Index3& d = v.dims();
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        if (v.at(i, j, k) != class_id) continue;
        any = true;
        const AxisAlignedBox cell{v.voxel_min_corner(i, j, k), v.voxel_min_corner(i + 1, j + 1, k + 1)};
        for (const Vec3& c : cell.corners()) box.expand(to_frame.apply(c));
      }
  if (!any) return std::nullopt;
  return box;
}

/// Boundary face of a class region: axis-aligned square of side `spacing`.
struct VoxelFace {
  int axis;        // normal axis
  double level;    // coordinate along the normal axis
  Vec3 min_corner; // minimum corner of the square (its `axis` component equals `level`)
};

inline double distance_to_face(const Vec3& p, const VoxelFace& f, double spacing) {
  double sq = 0.0;
  for (int a = 0; a < 3; ++a) {
    double delta;
    if (a == f.axis) {
      delta = p[a] - f.level;
    } else {
      const double lo = f.min_corner[a], hi = lo + spacing;
      delta = p[a] < lo ? lo - p[a] : (p[a] > hi ? p[a] - hi : 0.0);
    }
    sq += delta * delta;
  }
  return std::sqrt(sq);
}

/// Every face between a `class_id` voxel and a non-class voxel (or the grid border).
inline std::vector<VoxelFace> boundary_faces(const VoxelLabelVolume& v, Label class_id) {
  std::vector<VoxelFace> faces;
  const Index3& d = v.dims();
  const double s = v.spacing();
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        if (v.at(i, j, k) != class_id) continue;
        for (const Index3& o : kFaceNeighbors) {
          if (v.at_or_zero(i + o[0], j + o[1], k + o[2]) == class_id) continue;
          const int axis = o[0] != 0 ? 0 : (o[1] != 0 ? 1 : 2);
          Vec3 corner = v.voxel_min_corner(i, j, k);
          if (o[axis] > 0) corner[axis] += s;
          faces.push_back({axis, corner[axis], corner});
        }
      }
  return faces;
}

/// Exhaustive-scan signed distance to the voxelized surface of `class_id`, negative inside.
/// O(voxels) per query; intended as a reference.
inline std::optional<double> signed_distance_oracle(const VoxelLabelVolume& v, const Vec3& p, Label class_id) {
  const auto faces = boundary_faces(v, class_id);
  if (faces.empty()) return std::nullopt;
  double best = std::numeric_limits<double>::infinity();
  for (const VoxelFace& f : faces) best = std::min(best, distance_to_face(p, f, v.spacing()));
  return v.label_at_point(p) == class_id ? -best : best;
}

// ---------------------------------------------------------------------------
// Mesh measures

/// Number of undirected edges used by exactly one triangle.
inline std::size_t boundary_edge_count(const TriMesh& mesh) {
  std::unordered_map<std::uint64_t, int> uses;
  for (const auto& t : mesh.triangles) {
    for (int s = 0; s < 3; ++s) {
      const auto a = static_cast<std::uint64_t>(t[s]), b = static_cast<std::uint64_t>(t[(s + 1) % 3]);
      ++uses[std::min(a, b) << 32 | std::max(a, b)];
    }
  }
  return static_cast<std::size_t>(std::count_if(uses.begin(), uses.end(), [](const auto& kv) { return kv.second == 1; }));
}

/// True iff every edge is shared by exactly two triangles, once in each direction.
inline bool is_closed(const TriMesh& mesh) {
  std::unordered_map<std::uint64_t, int> directed;
  for (const auto& t : mesh.triangles)
    for (int s = 0; s < 3; ++s)
      ++directed[static_cast<std::uint64_t>(t[s]) << 32 | static_cast<std::uint64_t>(t[(s + 1) % 3])];
  for (const auto& [key, n] : directed) {
    if (n != 1) return false;
    const std::uint64_t reverse = (key & 0xffffffffULL) << 32 | key >> 32;
    const auto it = directed.find(reverse);
    if (it == directed.end() || it->second != 1) return false;
  }
  return true;
}

/// Divergence-theorem volume; positive for outward-facing closed meshes.
inline double signed_volume(const TriMesh& mesh) {
  double vol = 0.0;
  for (const auto& t : mesh.triangles)
    vol += mesh.vertices[t[0]].dot(mesh.vertices[t[1]].cross(mesh.vertices[t[2]]));
  return vol / 6.0;
}

}  // namespace occloc
