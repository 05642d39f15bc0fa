#pragma once

// Procedural labelled "bodies": a superellipsoid envelope holding K structures.

#include <occloc/json.hpp>
#include <occloc/volume.hpp>

#include <optional>
#include <string>
#include <vector>

namespace occloc {

enum class Primitive { ellipsoid, capsule, tube };
enum class PackingMode { touching, separated };

NLOHMANN_JSON_SERIALIZE_ENUM(Primitive, {{Primitive::ellipsoid, "ellipsoid"},
                                         {Primitive::capsule, "capsule"},
                                         {Primitive::tube, "tube"}})
NLOHMANN_JSON_SERIALIZE_ENUM(PackingMode, {{PackingMode::touching, "touching"}, {PackingMode::separated, "separated"}})

/// One organ-like structure. Sizes are semi-axes in meters; for capsule and tube the first two
/// components give the cross-section radius (their minimum) and the third the half length.
struct StructureSpec {
  Primitive kind = Primitive::ellipsoid;
  Vec3 min_semi_axes = Vec3(0.035, 0.03, 0.04);
  Vec3 max_semi_axes = Vec3(0.06, 0.05, 0.07);
  double max_tilt_deg = 20.0;
  std::optional<Vec3> center;  // fixed placement (body frame); random when unset
};

struct PhantomSpec {
  std::uint64_t seed = 1;
  int num_structures = 5;
  double spacing = 0.0125;
  std::optional<Index3> dims;                 // derived from the envelope when unset
  Vec3 envelope_semi_axes = Vec3(0.17, 0.10, 0.40);
  double envelope_exponent = 2.5;
  /// Per-phantom body shape variation: each semi-axis is scaled by U(1 - j, 1 + j) and the
  /// exponent shifted by U(-e, e), drawn from the seed.
  double envelope_jitter = 0.2;
  double exponent_jitter = 0.5;
  PackingMode packing = PackingMode::touching;
  /// Per-structure primitives; cycled when shorter than the number of organs.
  std::vector<StructureSpec> structures = default_structures();
  int max_retries = 200;

  static std::vector<StructureSpec> default_structures() {
    StructureSpec organ;
    StructureSpec vessel{Primitive::tube, Vec3(0.018, 0.018, 0.10), Vec3(0.025, 0.025, 0.16), 10.0, std::nullopt};
    StructureSpec lobe{Primitive::capsule, Vec3(0.03, 0.03, 0.05), Vec3(0.04, 0.04, 0.08), 25.0, std::nullopt};
    StructureSpec big{Primitive::ellipsoid, Vec3(0.05, 0.04, 0.06), Vec3(0.07, 0.05, 0.09), 15.0, std::nullopt};
    return {big, organ, vessel, lobe};
  }

  /// In touching mode the last label is the body filler; the rest are organs.
  int organ_count() const { return packing == PackingMode::touching && num_structures > 1 ? num_structures - 1 : num_structures; }
  bool has_filler() const { return packing == PackingMode::touching && num_structures > 1; }
};

inline void to_json(nlohmann::json& j, const StructureSpec& s) {
  j = {{"kind", s.kind}, {"min_semi_axes", s.min_semi_axes}, {"max_semi_axes", s.max_semi_axes}, {"max_tilt_deg", s.max_tilt_deg}};
  if (s.center) j["center"] = *s.center;
}
inline void from_json(const nlohmann::json& j, StructureSpec& s) {
  s = StructureSpec{};
  s.kind = j.value("kind", s.kind);
  if (j.contains("min_semi_axes")) s.min_semi_axes = j.at("min_semi_axes").get<Vec3>();
  if (j.contains("max_semi_axes")) s.max_semi_axes = j.at("max_semi_axes").get<Vec3>();
  s.max_tilt_deg = j.value("max_tilt_deg", s.max_tilt_deg);
  if (j.contains("center") && !j.at("center").is_null()) s.center = j.at("center").get<Vec3>();
}

inline void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j = {{"seed", s.seed},
       {"num_structures", s.num_structures},
       {"spacing", s.spacing},
       {"envelope_semi_axes", s.envelope_semi_axes},
       {"envelope_exponent", s.envelope_exponent},
       {"envelope_jitter", s.envelope_jitter},
       {"exponent_jitter", s.exponent_jitter},
       {"packing", s.packing},
       {"structures", s.structures},
       {"max_retries", s.max_retries}};
  if (s.dims) j["dims"] = *s.dims;
}
inline void from_json(const nlohmann::json& j, PhantomSpec& s) {
  s = PhantomSpec{};
  s.seed = j.value("seed", s.seed);
  s.num_structures = j.value("num_structures", s.num_structures);
  s.spacing = j.value("spacing", s.spacing);
  if (j.contains("dims") && !j.at("dims").is_null()) s.dims = j.at("dims").get<Index3>();
  if (j.contains("envelope_semi_axes")) s.envelope_semi_axes = j.at("envelope_semi_axes").get<Vec3>();
  s.envelope_exponent = j.value("envelope_exponent", s.envelope_exponent);
  s.envelope_jitter = j.value("envelope_jitter", s.envelope_jitter);
  s.exponent_jitter = j.value("exponent_jitter", s.exponent_jitter);
  s.packing = j.value("packing", s.packing);
  if (j.contains("structures")) s.structures = j.at("structures").get<std::vector<StructureSpec>>();
  s.max_retries = j.value("max_retries", s.max_retries);
}

namespace detail {

struct PlacedShape {
  Primitive kind;
  Vec3 center;
  Mat3 rotation;  // body-from-local
  Vec3 semi_axes;

  bool contains(const Vec3& p) const {
    const Vec3 q = rotation.transpose() * (p - center);
    const double r = std::min(semi_axes.x(), semi_axes.y());
    switch (kind) {
      case Primitive::ellipsoid:
        return (q.array() / semi_axes.array()).square().sum() <= 1.0;
      case Primitive::capsule: {
        const double half = std::max(semi_axes.z() - r, 0.0);
        const double z = std::clamp(q.z(), -half, half);
        return (q - Vec3(0, 0, z)).squaredNorm() <= r * r;
      }
      case Primitive::tube:
        return std::abs(q.z()) <= semi_axes.z() && q.x() * q.x() + q.y() * q.y() <= r * r;
    }
    return false;
  }

  /// Conservative world box: the local bounding box rotated into the body frame.
  AxisAlignedBox bounds() const {
    Vec3 half = semi_axes;
    if (kind != Primitive::ellipsoid) half.x() = half.y() = std::min(semi_axes.x(), semi_axes.y());
    const Vec3 ext = rotation.cwiseAbs() * half;
    return {center - ext, center + ext};
  }

  double analytic_volume() const {
    const double r = std::min(semi_axes.x(), semi_axes.y());
    switch (kind) {
      case Primitive::ellipsoid:
        return 4.0 / 3.0 * kPi * semi_axes.prod();
      case Primitive::capsule: {
        const double half = std::max(semi_axes.z() - r, 0.0);
        return kPi * r * r * 2.0 * half + 4.0 / 3.0 * kPi * r * r * r;
      }
      case Primitive::tube:
        return kPi * r * r * 2.0 * semi_axes.z();
    }
    return 0.0;
  }
};

inline bool inside_envelope(const Vec3& p, const PhantomSpec& spec) {
  const double e = spec.envelope_exponent;
  return (p.array().abs() / spec.envelope_semi_axes.array()).pow(e).sum() <= 1.0;
}

inline Vec3 random_in(Rng& rng, const Vec3& lo, const Vec3& hi) {
  return uniform(rng, lo, hi);
}

}  // namespace detail

/// Voxel count of `c` inside the 50%-enlarged voxel AABB of `c` that carry label 0.
inline std::size_t free_voxels_near(const VoxelLabelVolume& v, Label c) {
  const auto box = aabb_of_class(v, c);
  if (!box) return 0;
  const AxisAlignedBox big = box->enlarged(0.5);
  std::size_t free = 0;
  const Index3& d = v.dims();
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        if (v.at(i, j, k) != 0) continue;
        const Vec3 lo = v.voxel_min_corner(i, j, k), hi = v.voxel_min_corner(i + 1, j + 1, k + 1);
        const bool overlaps = (lo.array() < big.max_corner.array()).all() && (hi.array() > big.min_corner.array()).all();
        if (overlaps) ++free;
      }
  // The region outside the grid counts as free space as well.
  if (!v.bounds().contains(big)) ++free;
  return free;
}

/// The envelope actually used for `spec.seed` (jitter applied, jitter fields zeroed).
inline PhantomSpec realized_envelope(const PhantomSpec& spec) {
  PhantomSpec out = spec;
  Rng rng(spec.seed ^ 0x5EEDB0D7ULL);
  const double j = spec.envelope_jitter;
  out.envelope_semi_axes = spec.envelope_semi_axes.cwiseProduct(uniform(rng, Vec3::Constant(1.0 - j), Vec3::Constant(1.0 + j)));
  out.envelope_exponent = spec.envelope_exponent + uniform(rng, -spec.exponent_jitter, spec.exponent_jitter);
  out.envelope_jitter = 0.0;
  out.exponent_jitter = 0.0;
  return out;
}

/// Deterministic in `spec`. Throws a data error if the structures cannot be placed.
inline VoxelLabelVolume generate_phantom(const PhantomSpec& requested) {
  if (requested.num_structures < 1 || requested.num_structures > 67) fail_usage("num_structures must be in [1, 67]");
  if (!(requested.spacing > 0.0)) fail_usage("spacing must be positive");
  if (requested.structures.empty()) fail_usage("at least one structure primitive is required");
  if (requested.envelope_jitter < 0.0 || requested.envelope_jitter >= 1.0) fail_usage("envelope_jitter must be in [0, 1)");
  if (requested.exponent_jitter < 0.0 || requested.envelope_exponent - requested.exponent_jitter <= 0.0)
    fail_usage("exponent_jitter must keep the exponent positive");
  const PhantomSpec spec = realized_envelope(requested);

  // Grid size covers the largest envelope any seed can draw, so all phantoms of a spec share it.
  Index3 dims;
  if (spec.dims) {
    dims = *spec.dims;
  } else {
    const double grow = 1.0 + requested.envelope_jitter;
    for (int a = 0; a < 3; ++a)
      dims[a] = static_cast<int>(std::ceil(2.0 * grow * requested.envelope_semi_axes[a] / spec.spacing)) + 2;
  }
  const Vec3 origin = -0.5 * spec.spacing * Vec3(dims[0], dims[1], dims[2]);
  const int organs = spec.organ_count();

  for (int attempt = 0; attempt < spec.max_retries; ++attempt) {
    Rng rng(spec.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(attempt));
    VoxelLabelVolume v(dims, spec.spacing, origin, spec.num_structures);
    for (int c = 1; c <= spec.num_structures; ++c)
      v.class_names.push_back(spec.has_filler() && c == spec.num_structures ? "body" : "structure_" + std::to_string(c));

    std::vector<detail::PlacedShape> shapes;
    bool ok = true;
    for (int c = 1; c <= organs && ok; ++c) {
      const StructureSpec& s = spec.structures[(c - 1) % spec.structures.size()];
      bool placed = false;
      for (int tries = 0; tries < 50 && !placed; ++tries) {
        detail::PlacedShape shape;
        shape.kind = s.kind;
        shape.semi_axes = detail::random_in(rng, s.min_semi_axes, s.max_semi_axes);
        shape.rotation = rotation_xyz(detail::random_in(rng, Vec3::Constant(-s.max_tilt_deg), Vec3::Constant(s.max_tilt_deg)));
        const AxisAlignedBox local = detail::PlacedShape{shape.kind, Vec3::Zero(), shape.rotation, shape.semi_axes}.bounds();
        const Vec3 reach = 0.5 * local.extent() + Vec3::Constant(spec.spacing);
        if (s.center) {
          shape.center = *s.center;
        } else {
          const Vec3 room = spec.envelope_semi_axes - reach;
          if ((room.array() <= 0.0).any()) break;
          shape.center = detail::random_in(rng, -room, room);
        }

        // Rasterize with first-writer-wins, then keep the largest connected piece.
        VoxelLabelVolume trial = v;
        std::size_t written = 0;
        bool escaped = false;
        const AxisAlignedBox b = shape.bounds();
        for (int k = 0; k < dims[2]; ++k)
          for (int j = 0; j < dims[1]; ++j)
            for (int i = 0; i < dims[0]; ++i) {
              const Vec3 p = v.voxel_center(i, j, k);
              if (!b.contains(p) || !shape.contains(p)) continue;
              // Organs must lie strictly inside the body envelope.
              if (!detail::inside_envelope(p, spec)) {
                escaped = true;
                continue;
              }
              if (trial.at(i, j, k) != 0) continue;
              if (spec.packing == PackingMode::separated) {
                bool clear = true;
                for (const Index3& o : kFaceNeighbors) {
                  const Label nb = v.at_or_zero(i + o[0], j + o[1], k + o[2]);
                  clear = clear && (nb == 0 || nb == c);
                }
                if (!clear) continue;
              }
              trial.set(i, j, k, static_cast<Label>(c));
              ++written;
            }
        if (written == 0 || (escaped && !s.center)) continue;
        const double expected = shape.analytic_volume() / std::pow(spec.spacing, 3);
        auto filtered = largest_component(trial, static_cast<Label>(c));
        if (static_cast<double>(filtered.kept) < 0.5 * expected) continue;
        v = std::move(filtered.volume);
        shapes.push_back(shape);
        placed = true;
      }
      ok = placed;
    }
    if (!ok) continue;

    if (spec.has_filler()) {
      const Label body = static_cast<Label>(spec.num_structures);
      for (int k = 0; k < dims[2]; ++k)
        for (int j = 0; j < dims[1]; ++j)
          for (int i = 0; i < dims[0]; ++i)
            if (v.at(i, j, k) == 0 && detail::inside_envelope(v.voxel_center(i, j, k), spec)) v.set(i, j, k, body);
      v = largest_component(v, body).volume;
      // Require at least one organ with no free space anywhere in its enlarged box.
      bool embedded = false;
      for (int c = 1; c <= organs && !embedded; ++c) embedded = free_voxels_near(v, static_cast<Label>(c)) == 0;
      if (!embedded) continue;
    }
    return v;
  }
  fail_data("phantom spec infeasible: structures could not be placed after " + std::to_string(spec.max_retries) + " attempts");
}

/// Outer surface of the union of all structures (its largest connected component), padded to close it.
inline TriMesh extract_skin(const VoxelLabelVolume& v) {
  VoxelLabelVolume body(v.dims(), v.spacing(), v.origin(), 1);
  for (std::size_t idx = 0; idx < v.size(); ++idx)
    if (v.at(idx) != 0) body.set(idx, 1);
  body = largest_component(body, 1).volume;
  return extract_mesh(pad_boundary(body), 1);
}

}  // namespace occloc
