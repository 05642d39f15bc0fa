#pragma once

// File formats: label volumes, occupancy samples, point clouds, depth images, meshes, boxes,
// loss traces and model checkpoints.

#include <occloc/atlas.hpp>
#include <occloc/dataset.hpp>
#include <occloc/evalkit.hpp>

#include <bit>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <variant>

namespace occloc {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------- bytes

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> b;
  std::memcpy(b.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  out.append(b.data(), b.size());
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) fail_data("truncated binary payload");
  std::array<char, sizeof(T)> b;
  std::memcpy(b.data(), in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  pos += sizeof(T);
  T value;
  std::memcpy(&value, b.data(), sizeof(T));
  return value;
}

/// Shortest text that parses back to the same double.
inline std::string fmt(double x) {
  std::array<char, 32> buf;
  const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), x);
  return std::string(buf.data(), r.ptr);
}

}  // namespace detail

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_data("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_data("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail_data("write failed for " + path.string());
}

inline nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail_data(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_file(path, j.dump(2) + "\n"); }

/// Container: 4-byte magic, uint32 LE header length, JSON header, binary payload.
inline std::string pack_container(std::string_view magic, const nlohmann::json& header, const std::string& payload) {
  const std::string h = header.dump();
  std::string out(magic);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(h.size()));
  return out + h + payload;
}

inline std::pair<nlohmann::json, std::size_t> unpack_container(std::string_view magic, const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 4, magic) != 0) fail_data("not a " + std::string(magic) + " file");
  std::size_t pos = 4;
  const auto len = detail::get_le<std::uint32_t>(bytes, pos);
  if (pos + len > bytes.size()) fail_data("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, len));
  } catch (const nlohmann::json::exception& e) {
    fail_data(std::string("bad header: ") + e.what());
  }
  return {header, pos + len};
}

// ---------------------------------------------------------------------- volumes (.olv)

inline std::string encode_volume(const VoxelLabelVolume& v) {
  nlohmann::json h = {{"dims", v.dims()}, {"spacing", v.spacing()}, {"origin", v.origin()},
                      {"num_classes", v.num_classes()}, {"class_names", v.class_names}};
  std::string payload;
  payload.reserve(2 * v.size());
  for (Label l : v.labels()) detail::put_le<std::uint16_t>(payload, l);
  return pack_container("OLV1", h, payload);
}

inline VoxelLabelVolume decode_volume(const std::string& bytes) {
  auto [h, pos] = unpack_container("OLV1", bytes);
  try {
    VoxelLabelVolume v(h.at("dims").get<Index3>(), h.at("spacing").get<double>(), h.at("origin").get<Vec3>(),
                       h.at("num_classes").get<int>());
    v.class_names = h.value("class_names", std::vector<std::string>{});
    if (bytes.size() - pos != 2 * v.size()) fail_data("label payload size does not match dims");
    for (std::size_t i = 0; i < v.size(); ++i) v.set(i, detail::get_le<std::uint16_t>(bytes, pos));
    return v;
  } catch (const nlohmann::json::exception& e) {
    fail_data(std::string("bad volume header: ") + e.what());
  }
}

inline void save_volume(const fs::path& p, const VoxelLabelVolume& v) { write_file(p, encode_volume(v)); }
inline VoxelLabelVolume load_volume(const fs::path& p) { return decode_volume(read_file(p)); }

// ---------------------------------------------------------------------- samples (.oss)

/// Records: float32 x, y, z, uint16 label, float32 signed distance. Inside then outside per structure.
inline std::string encode_samples(const OccupancySampleSet& s) {
  nlohmann::json h = {{"samples_per_side", s.samples_per_side}, {"num_classes", s.num_classes}, {"seed", s.seed}};
  nlohmann::json structs = nlohmann::json::array();
  std::string payload;
  auto put = [&](const OccupancySample& x) {
    for (int a = 0; a < 3; ++a) detail::put_le<float>(payload, static_cast<float>(x.position[a]));
    detail::put_le<std::uint16_t>(payload, static_cast<std::uint16_t>(x.label));
    detail::put_le<float>(payload, static_cast<float>(x.signed_distance));
  };
  for (const auto& st : s.structures) {
    structs.push_back({{"class_id", st.class_id}, {"inside", st.inside.size()}, {"outside", st.outside.size()}});
    for (const auto& x : st.inside) put(x);
    for (const auto& x : st.outside) put(x);
  }
  h["structures"] = structs;
  return pack_container("OSS1", h, payload);
}

inline OccupancySampleSet decode_samples(const std::string& bytes) {
  auto [h, pos] = unpack_container("OSS1", bytes);
  OccupancySampleSet s;
  try {
    s.samples_per_side = h.at("samples_per_side").get<int>();
    s.num_classes = h.at("num_classes").get<int>();
    s.seed = h.at("seed").get<std::uint64_t>();
    auto get = [&] {
      OccupancySample x;
      for (int a = 0; a < 3; ++a) x.position[a] = detail::get_le<float>(bytes, pos);
      x.label = detail::get_le<std::uint16_t>(bytes, pos);
      x.signed_distance = detail::get_le<float>(bytes, pos);
      return x;
    };
    for (const auto& js : h.at("structures")) {
      StructureSamples st;
      st.class_id = js.at("class_id").get<Label>();
      const auto ni = js.at("inside").get<std::size_t>(), no = js.at("outside").get<std::size_t>();
      for (std::size_t i = 0; i < ni; ++i) st.inside.push_back(get());
      for (std::size_t i = 0; i < no; ++i) st.outside.push_back(get());
      s.structures.push_back(std::move(st));
    }
  } catch (const nlohmann::json::exception& e) {
    fail_data(std::string("bad samples header: ") + e.what());
  }
  if (pos != bytes.size()) fail_data("trailing bytes in samples file");
  return s;
}

inline void save_samples(const fs::path& p, const OccupancySampleSet& s) { write_file(p, encode_samples(s)); }
inline OccupancySampleSet load_samples(const fs::path& p) { return decode_samples(read_file(p)); }

// ---------------------------------------------------------------------- clouds

/// One "x y z" line per point, shortest round-trip formatting.
inline std::string encode_xyz(const std::vector<Vec3>& pts) {
  std::string out;
  for (const Vec3& p : pts) out += detail::fmt(p.x()) + ' ' + detail::fmt(p.y()) + ' ' + detail::fmt(p.z()) + '\n';
  return out;
}

inline std::vector<Vec3> decode_xyz(const std::string& text) {
  std::vector<Vec3> pts;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[line.find_first_not_of(" \t")] == '#') continue;
    std::istringstream ls(line);
    Vec3 p;
    if (!(ls >> p.x() >> p.y() >> p.z()) || !p.allFinite()) fail_data("bad point on line " + std::to_string(lineno));
    pts.push_back(p);
  }
  return pts;
}

/// Raw little-endian float32 triples.
inline std::string encode_cloud_f32(const std::vector<Vec3>& pts) {
  std::string out;
  for (const Vec3& p : pts)
    for (int a = 0; a < 3; ++a) detail::put_le<float>(out, static_cast<float>(p[a]));
  return out;
}

inline std::vector<Vec3> decode_cloud_f32(const std::string& bytes) {
  if (bytes.size() % 12 != 0) fail_data("raw cloud size is not a multiple of 12 bytes");
  std::vector<Vec3> pts(bytes.size() / 12);
  std::size_t pos = 0;
  for (Vec3& p : pts)
    for (int a = 0; a < 3; ++a) p[a] = detail::get_le<float>(bytes, pos);
  return pts;
}

/// `.xyz` text or `.f32` raw, by extension.
inline std::vector<Vec3> load_cloud(const fs::path& p) {
  if (!fs::exists(p)) fail_data("missing cloud file " + p.string());
  return p.extension() == ".f32" ? decode_cloud_f32(read_file(p)) : decode_xyz(read_file(p));
}

inline void save_cloud(const fs::path& p, const std::vector<Vec3>& pts) {
  write_file(p, p.extension() == ".f32" ? encode_cloud_f32(pts) : encode_xyz(pts));
}

inline nlohmann::json pose_json(const CameraPose& pose) {
  return {{"distance", pose.distance},
          {"lateral", pose.lateral},
          {"vertical", pose.vertical},
          {"target", pose.target},
          {"intrinsics", {{"width", pose.intrinsics.width}, {"height", pose.intrinsics.height}, {"fov_y_deg", pose.intrinsics.fov_y_deg}}}};
}

inline CameraPose pose_from_json(const nlohmann::json& j) {
  CameraPose p;
  p.distance = j.at("distance").get<double>();
  p.lateral = j.at("lateral").get<double>();
  p.vertical = j.at("vertical").get<double>();
  p.target = j.at("target").get<Vec3>();
  const auto& in = j.at("intrinsics");
  p.intrinsics.width = in.at("width").get<int>();
  p.intrinsics.height = in.at("height").get<int>();
  p.intrinsics.fov_y_deg = in.at("fov_y_deg").get<double>();
  return p;
}

/// Depth as raw float32 (row-major) plus a JSON sidecar with the intrinsics.
inline void save_depth(const fs::path& raw, const DepthImage& d) {
  std::string bytes;
  for (double x : d.depth) detail::put_le<float>(bytes, static_cast<float>(x));
  write_file(raw, bytes);
  write_json(fs::path(raw).replace_extension(".json"),
             {{"width", d.intrinsics.width}, {"height", d.intrinsics.height}, {"fov_y_deg", d.intrinsics.fov_y_deg}});
}

// ---------------------------------------------------------------------- meshes

inline std::string encode_obj(const TriMesh& m) {
  std::string out;
  for (const Vec3& v : m.vertices) out += "v " + detail::fmt(v.x()) + ' ' + detail::fmt(v.y()) + ' ' + detail::fmt(v.z()) + '\n';
  for (const auto& t : m.triangles)
    out += "f " + std::to_string(t[0] + 1) + ' ' + std::to_string(t[1] + 1) + ' ' + std::to_string(t[2] + 1) + '\n';
  return out;
}

inline std::string encode_stl(const TriMesh& m, const std::string& name = "mesh") {
  std::string out = "solid " + name + "\n";
  for (const auto& t : m.triangles) {
    const Vec3 &a = m.vertices[t[0]], &b = m.vertices[t[1]], &c = m.vertices[t[2]];
    Vec3 n = (b - a).cross(c - a);
    if (n.norm() > 0.0) n.normalize();
    out += "  facet normal " + detail::fmt(n.x()) + ' ' + detail::fmt(n.y()) + ' ' + detail::fmt(n.z()) + "\n    outer loop\n";
    for (const Vec3* v : {&a, &b, &c}) out += "      vertex " + detail::fmt(v->x()) + ' ' + detail::fmt(v->y()) + ' ' + detail::fmt(v->z()) + '\n';
    out += "    endloop\n  endfacet\n";
  }
  return out + "endsolid " + name + "\n";
}

/// Minimal OBJ reader (vertices and triangular faces).
inline TriMesh decode_obj(const std::string& text) {
  TriMesh m;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      Vec3 v;
      ls >> v.x() >> v.y() >> v.z();
      m.vertices.push_back(v);
    } else if (tag == "f") {
      std::array<int, 3> t;
      ls >> t[0] >> t[1] >> t[2];
      m.triangles.push_back({t[0] - 1, t[1] - 1, t[2] - 1});
    }
  }
  return m;
}

// ---------------------------------------------------------------------- boxes

inline std::string class_label(const std::vector<std::string>& names, int c) {
  const auto i = static_cast<std::size_t>(c - 1);
  return i < names.size() && !names[i].empty() ? names[i] : "structure_" + std::to_string(c);
}

/// {"<name>": {"class": c, "min": [...], "max": [...]} | {"class": c, "box": null}} in class order.
inline std::string boxes_text(const std::vector<std::optional<AxisAlignedBox>>& boxes, const std::vector<std::string>& names = {}) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const int c = static_cast<int>(i) + 1;
    nlohmann::ordered_json e = {{"class", c}};
    if (boxes[i]) {
      e["min"] = {boxes[i]->min_corner.x(), boxes[i]->min_corner.y(), boxes[i]->min_corner.z()};
      e["max"] = {boxes[i]->max_corner.x(), boxes[i]->max_corner.y(), boxes[i]->max_corner.z()};
    } else {
      e["box"] = nullptr;
    }
    j[class_label(names, c)] = e;
  }
  return j.dump(2) + "\n";
}

inline std::vector<std::optional<AxisAlignedBox>> boxes_from_json(const nlohmann::json& j) {
  std::vector<std::optional<AxisAlignedBox>> out;
  try {
    for (const auto& [name, e] : j.items()) {
      const int c = e.at("class").get<int>();
      if (c < 1 || c > 65535) fail_data("bad class id for " + name);
      if (out.size() < static_cast<std::size_t>(c)) out.resize(static_cast<std::size_t>(c));
      if (e.contains("min")) out[static_cast<std::size_t>(c - 1)] = AxisAlignedBox{e.at("min").get<Vec3>(), e.at("max").get<Vec3>()};
    }
  } catch (const nlohmann::json::exception& ex) {
    fail_data(std::string("bad boxes file: ") + ex.what());
  }
  return out;
}

/// Structure names by class (index c - 1) as keyed in a boxes file; gaps stay empty.
inline std::vector<std::string> box_names_from_json(const nlohmann::json& j) {
  std::vector<std::string> names;
  for (const auto& [name, e] : j.items()) {
    const int c = e.value("class", 0);
    if (c < 1 || c > 65535) continue;
    if (names.size() < static_cast<std::size_t>(c)) names.resize(static_cast<std::size_t>(c));
    names[static_cast<std::size_t>(c - 1)] = name;
  }
  return names;
}

inline void save_boxes(const fs::path& p, const std::vector<std::optional<AxisAlignedBox>>& boxes, const std::vector<std::string>& names = {}) {
  write_file(p, boxes_text(boxes, names));
}
inline std::vector<std::optional<AxisAlignedBox>> load_boxes(const fs::path& p) { return boxes_from_json(read_json(p)); }

// ---------------------------------------------------------------------- training pairs

/// pair_<n>.xyz (camera-frame cloud), pair_<n>.oss (samples), pair_<n>.json (pose, seed).
inline void save_pair(const fs::path& dir, const std::string& stem, const TrainingPair& p) {
  save_cloud(dir / (stem + ".xyz"), p.cloud.points);
  save_samples(dir / (stem + ".oss"), p.samples);
  write_json(dir / (stem + ".json"), {{"seed", p.seed}, {"pose", pose_json(p.pose)}});
}

inline TrainingPair load_pair(const fs::path& dir, const std::string& stem) {
  TrainingPair p;
  p.cloud.points = load_cloud(dir / (stem + ".xyz"));
  p.samples = load_samples(dir / (stem + ".oss"));
  const auto meta = read_json(dir / (stem + ".json"));
  try {
    p.seed = meta.at("seed").get<std::uint64_t>();
    p.pose = pose_from_json(meta.at("pose"));
  } catch (const nlohmann::json::exception& e) {
    fail_data(std::string("bad pair metadata: ") + e.what());
  }
  p.cloud.seed = p.seed;
  p.cloud.pose = p.pose;
  return p;
}

// ---------------------------------------------------------------------- loss trace

inline std::string trace_csv(const std::vector<TraceRow>& rows) {
  std::string out = "step,epoch,ce,sdf,total\n";
  for (const auto& r : rows)
    out += std::to_string(r.step) + ',' + std::to_string(r.epoch) + ',' + detail::fmt(r.loss.ce) + ',' + detail::fmt(r.loss.sdf) + ',' +
           detail::fmt(r.loss.total()) + '\n';
  return out;
}

inline std::vector<TraceRow> parse_trace_csv(const std::string& text) {
  std::vector<TraceRow> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "step,epoch,ce,sdf,total") fail_data("not a loss trace");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    TraceRow r;
    char c1, c2, c3, c4;
    double total;
    std::istringstream ls(line);
    if (!(ls >> r.step >> c1 >> r.epoch >> c2 >> r.loss.ce >> c3 >> r.loss.sdf >> c4 >> total)) fail_data("bad trace row: " + line);
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------- checkpoints

namespace detail {

template <typename Range>
std::string f64_blob(const Range& values) {
  std::string out;
  for (const auto& x : values) put_le<double>(out, static_cast<double>(x));
  return out;
}

inline std::vector<double> f64_values(const std::string& bytes) {
  if (bytes.size() % 8 != 0) fail_data("float64 blob has a partial value");
  std::vector<double> out(bytes.size() / 8);
  std::size_t pos = 0;
  for (double& x : out) x = get_le<double>(bytes, pos);
  return out;
}

}  // namespace detail

/// Directory with manifest.json and float64 blobs for parameters, Adam moments and BN statistics.
template <typename T>
void save_checkpoint(const fs::path& dir, const TrainState<T>& state, const TrainConfig& cfg) {
  fs::create_directories(dir);
  const auto& m = state.model;
  nlohmann::json manifest = {{"kind", "occnet"},
                             {"format", 1},
                             {"config", cfg},
                             {"shape", m.shape()},
                             {"epochs_done", state.epochs_done},
                             {"adam_step", state.adam.step},
                             {"parameters", m.params().size()}};
  write_json(dir / "manifest.json", manifest);
  write_file(dir / "params.f64", detail::f64_blob(m.params()));
  write_file(dir / "adam_m.f64", detail::f64_blob(state.adam.m));
  write_file(dir / "adam_v.f64", detail::f64_blob(state.adam.v));
  std::string bn;
  for (int l = 0; l < m.shape().decoder_layers(); ++l) {
    bn += detail::f64_blob(m.running_mean()[static_cast<std::size_t>(l)]);
    bn += detail::f64_blob(m.running_var()[static_cast<std::size_t>(l)]);
  }
  write_file(dir / "batchnorm.f64", bn);
  write_file(dir / "loss_trace.csv", trace_csv(state.trace));
}

struct LoadedCheckpoint {
  TrainConfig config;
  TrainState<float> state;
};

template <typename T>
void load_blob_into(const fs::path& p, AlignedVector<T>& dst, std::size_t expected, bool allow_empty) {
  const auto v = detail::f64_values(read_file(p));
  if (v.empty() && allow_empty) {
    dst.clear();
    return;
  }
  if (v.size() != expected) fail_data(p.string() + " has " + std::to_string(v.size()) + " values, expected " + std::to_string(expected));
  dst.assign(v.size(), T(0));
  for (std::size_t i = 0; i < v.size(); ++i) dst[i] = static_cast<T>(v[i]);
}

inline LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  const auto manifest = read_json(dir / "manifest.json");
  if (manifest.value("kind", "") != "occnet") fail_data(dir.string() + " is not a trained-model checkpoint");
  LoadedCheckpoint ck;
  try {
    ck.config = manifest.at("config").get<TrainConfig>();
    ck.state.model = OccupancyModel<float>(manifest.at("shape").get<NetworkShape>());
    ck.state.epochs_done = manifest.at("epochs_done").get<int>();
    ck.state.adam.step = manifest.at("adam_step").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail_data(std::string("bad checkpoint manifest: ") + e.what());
  }
  auto& m = ck.state.model;
  const std::size_t n = m.params().size();
  load_blob_into(dir / "params.f64", m.params(), n, false);
  load_blob_into(dir / "adam_m.f64", ck.state.adam.m, n, true);
  load_blob_into(dir / "adam_v.f64", ck.state.adam.v, n, true);
  const auto bn = detail::f64_values(read_file(dir / "batchnorm.f64"));
  const int L = m.shape().decoder_layers(), W = m.shape().decoder_width;
  if (bn.size() != static_cast<std::size_t>(2 * L * W)) fail_data("batch-norm statistics do not match the network shape");
  for (int l = 0; l < L; ++l)
    for (int i = 0; i < W; ++i) {
      m.running_mean()[static_cast<std::size_t>(l)][i] = static_cast<float>(bn[static_cast<std::size_t>((2 * l) * W + i)]);
      m.running_var()[static_cast<std::size_t>(l)][i] = static_cast<float>(bn[static_cast<std::size_t>((2 * l + 1) * W + i)]);
    }
  if (fs::exists(dir / "loss_trace.csv")) {
    for (const auto& r : parse_trace_csv(read_file(dir / "loss_trace.csv"))) ck.state.trace.push_back(r);
  }
  return ck;
}

/// An analytic stand-in for a trained model: labelled boxes in normalized coordinates.
inline void save_oracle_checkpoint(const fs::path& dir, const BoxOracleField& field) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& [c, b] : field.boxes) boxes.push_back({{"class", c}, {"min", b.min_corner}, {"max", b.max_corner}});
  write_json(dir / "manifest.json", {{"kind", "box_oracle"}, {"format", 1}, {"num_classes", field.classes}, {"boxes", boxes}});
}

using AnyModel = std::variant<OccupancyModel<float>, BoxOracleField>;

inline AnyModel load_any_model(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) fail_data("no checkpoint manifest in " + dir.string());
  const auto manifest = read_json(dir / "manifest.json");
  const std::string kind = manifest.value("kind", "");
  if (kind == "occnet") return load_checkpoint(dir).state.model;
  if (kind == "box_oracle") {
    BoxOracleField f;
    try {
      f.classes = manifest.at("num_classes").get<int>();
      for (const auto& b : manifest.at("boxes"))
        f.boxes.emplace_back(b.at("class").get<int>(), AxisAlignedBox{b.at("min").get<Vec3>(), b.at("max").get<Vec3>()});
    } catch (const nlohmann::json::exception& e) {
      fail_data(std::string("bad oracle manifest: ") + e.what());
    }
    return f;
  }
  fail_data("unknown checkpoint kind '" + kind + "'");
}

inline int model_classes(const AnyModel& m) {
  return std::visit([](const auto& x) {
    if constexpr (std::is_same_v<std::decay_t<decltype(x)>, BoxOracleField>) return x.num_classes();
    else return x.shape().num_classes;
  }, m);
}

/// Hierarchical inference with either model kind on a metric cloud.
inline AtlasPrediction infer_any(const AnyModel& model, const std::vector<Vec3>& cloud, const InferenceParams& params) {
  return std::visit([&](const auto& m) {
    if constexpr (std::is_same_v<std::decay_t<decltype(m)>, BoxOracleField>) {
      const auto [normalized, norm] = normalize_iso(cloud);
      Rng rng(params.seed);
      return dense_reconstruct(m, coarse_probe(m, params.probes, rng), params.resolution, params.margin, norm);
    } else {
      return infer_atlas(m, cloud, params);
    }
  }, model);
}

}  // namespace occloc
