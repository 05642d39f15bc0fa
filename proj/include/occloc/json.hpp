#pragma once

#include <occloc/core.hpp>

#include <nlohmann/json.hpp>

namespace nlohmann {

template <>
struct adl_serializer<occloc::Vec3> {
  static void to_json(json& j, const occloc::Vec3& v) { j = json::array({v.x(), v.y(), v.z()}); }
  static void from_json(const json& j, occloc::Vec3& v) {
    v = occloc::Vec3(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>());
  }
};

}  // namespace nlohmann

namespace occloc {

inline void to_json(nlohmann::json& j, const AxisAlignedBox& b) {
  j = {{"min", b.min_corner}, {"max", b.max_corner}};
}
inline void from_json(const nlohmann::json& j, AxisAlignedBox& b) {
  b.min_corner = j.at("min").get<Vec3>();
  b.max_corner = j.at("max").get<Vec3>();
}

}  // namespace occloc
