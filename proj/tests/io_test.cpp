#include <occloc/io.hpp>

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace occloc {
namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(testing::TempDir()) / ("occloc_io_" + name);
  fs::remove_all(p);
  return p;
}

double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

OccupancySampleSet sample_set(Rng& rng) {
  OccupancySampleSet s;
  s.samples_per_side = 3;
  s.num_classes = 2;
  s.seed = 0xFEEDFACECAFEull;
  for (Label c : {Label(1), Label(2)}) {
    StructureSamples st;
    st.class_id = c;
    for (int i = 0; i < 3; ++i) {
      const Vec3 p = uniform(rng, Vec3::Constant(-1), Vec3::Constant(1));
      st.inside.push_back({p.unaryExpr(&to_f32), c, to_f32(-uniform(rng, 0.0, 0.1))});
      st.outside.push_back({p.unaryExpr(&to_f32), static_cast<Label>(c == 1 ? 2 : 0), to_f32(uniform(rng, 0.0, 0.1))});
    }
    s.structures.push_back(st);
  }
  return s;
}

void expect_same_samples(const OccupancySampleSet& a, const OccupancySampleSet& b) {
  EXPECT_EQ(a.samples_per_side, b.samples_per_side);
  EXPECT_EQ(a.num_classes, b.num_classes);
  EXPECT_EQ(a.seed, b.seed);
  ASSERT_EQ(a.structures.size(), b.structures.size());
  for (std::size_t s = 0; s < a.structures.size(); ++s) {
    EXPECT_EQ(a.structures[s].class_id, b.structures[s].class_id);
    for (auto side : {&StructureSamples::inside, &StructureSamples::outside}) {
      const auto &x = a.structures[s].*side, &y = b.structures[s].*side;
      ASSERT_EQ(x.size(), y.size());
      for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_EQ(x[i].position, y[i].position);
        EXPECT_EQ(x[i].label, y[i].label);
        EXPECT_EQ(x[i].signed_distance, y[i].signed_distance);
      }
    }
  }
}

TEST(VolumeFile, RoundTripIsExact) {
  Rng rng(1);
  VoxelLabelVolume v = test::random_volume(rng, {7, 5, 3}, 300, 0.6);
  v = VoxelLabelVolume(v.dims(), 0.0125, Vec3(-0.1, 0.2, 1.0 / 3.0), 300);
  for (std::size_t i = 0; i < v.size(); ++i) v.set(i, static_cast<Label>(i * 37 % 301));
  v.class_names = {"a", "b"};
  const VoxelLabelVolume w = decode_volume(encode_volume(v));
  EXPECT_EQ(w.dims(), v.dims());
  EXPECT_EQ(w.spacing(), v.spacing());
  EXPECT_EQ(w.origin(), v.origin());
  EXPECT_EQ(w.num_classes(), v.num_classes());
  EXPECT_EQ(w.class_names, v.class_names);
  EXPECT_TRUE(std::equal(v.labels().begin(), v.labels().end(), w.labels().begin(), w.labels().end()));
}

TEST(VolumeFile, PayloadIsLittleEndian) {
  VoxelLabelVolume v({2, 1, 1}, 1.0, Vec3::Zero(), 600);
  v.set(0, 0x0102);
  v.set(1, 0x0201);
  const std::string bytes = encode_volume(v);
  EXPECT_EQ(bytes.substr(0, 4), "OLV1");
  EXPECT_EQ(bytes.substr(bytes.size() - 4), std::string("\x02\x01\x01\x02", 4));
}

TEST(VolumeFile, CorruptInputsFail) {
  VoxelLabelVolume v({2, 2, 2}, 1.0, Vec3::Zero(), 1);
  const std::string good = encode_volume(v);
  EXPECT_THROW(decode_volume("XXXX" + good.substr(4)), Error);
  EXPECT_THROW(decode_volume(good.substr(0, good.size() - 1)), Error);
  EXPECT_THROW(decode_volume(good.substr(0, 6)), Error);
}

TEST(SampleFile, RoundTripKeepsEverySide) {
  Rng rng(2);
  const OccupancySampleSet s = sample_set(rng);
  expect_same_samples(decode_samples(encode_samples(s)), s);
}

TEST(SampleFile, RecordIsEighteenBytes) {
  Rng rng(3);
  const OccupancySampleSet s = sample_set(rng);
  const std::string bytes = encode_samples(s);
  const auto [header, pos] = unpack_container("OSS1", bytes);
  EXPECT_EQ(bytes.size() - pos, s.size() * (3 * 4 + 2 + 4));
  EXPECT_EQ(header.at("samples_per_side"), 3);
}

TEST(SampleFile, TrailingBytesFail) {
  Rng rng(4);
  EXPECT_THROW(decode_samples(encode_samples(sample_set(rng)) + "x"), Error);
}

TEST(CloudFile, XyzRoundTripIsExact) {
  Rng rng(5);
  std::vector<Vec3> pts;
  for (int i = 0; i < 50; ++i) pts.push_back(uniform(rng, Vec3::Constant(-3), Vec3::Constant(3)));
  pts.push_back(Vec3(1e-300, -0.1, 1.0 / 3.0));
  EXPECT_EQ(decode_xyz(encode_xyz(pts)), pts);
}

TEST(CloudFile, XyzSkipsBlankAndCommentLines) {
  const auto pts = decode_xyz("# header\n\n1 2 3\n  \n4 5 6\r\n");
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_EQ(pts[1], Vec3(4, 5, 6));
  EXPECT_THROW(decode_xyz("1 2\n"), Error);
  EXPECT_THROW(decode_xyz("1 2 nan\n"), Error);
}

TEST(CloudFile, F32RoundTripAndExtensionDispatch) {
  const std::vector<Vec3> pts{Vec3(0.5, -1.25, 2.0), Vec3(3, 4, 5)};
  EXPECT_EQ(decode_cloud_f32(encode_cloud_f32(pts)), pts);
  EXPECT_THROW(decode_cloud_f32("12345"), Error);
  const fs::path dir = scratch("clouds");
  save_cloud(dir / "a.f32", pts);
  save_cloud(dir / "a.xyz", pts);
  EXPECT_EQ(fs::file_size(dir / "a.f32"), 24u);
  EXPECT_EQ(load_cloud(dir / "a.f32"), pts);
  EXPECT_EQ(load_cloud(dir / "a.xyz"), pts);
  EXPECT_THROW(load_cloud(dir / "missing.xyz"), Error);
}

TEST(MeshFile, ObjRoundTrip) {
  TriMesh m;
  m.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0.1), Vec3(0, 0, 1)};
  m.triangles = {{0, 2, 1}, {0, 1, 3}, {1, 2, 3}, {0, 3, 2}};
  const TriMesh r = decode_obj(encode_obj(m));
  EXPECT_EQ(r.vertices, m.vertices);
  EXPECT_EQ(r.triangles, m.triangles);
}

TEST(MeshFile, StlHasOneFacetPerTriangleWithUnitNormals) {
  TriMesh m;
  m.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)};
  m.triangles = {{0, 1, 2}, {0, 2, 1}};
  const std::string stl = encode_stl(m, "x");
  std::size_t facets = 0;
  for (std::size_t p = stl.find("facet normal"); p != std::string::npos; p = stl.find("facet normal", p + 1)) ++facets;
  EXPECT_EQ(facets, 2u);
  EXPECT_NE(stl.find("facet normal 0 0 1"), std::string::npos);
  EXPECT_NE(stl.find("facet normal 0 0 -1"), std::string::npos);
  EXPECT_EQ(stl.rfind("endsolid x\n"), stl.size() - 11);
}

TEST(BoxFile, RoundTripWithAbsentClasses) {
  const std::vector<std::optional<AxisAlignedBox>> boxes{AxisAlignedBox{Vec3(0, 0, 0), Vec3(1, 2, 3)}, std::nullopt,
                                                         AxisAlignedBox{Vec3(-0.1, 0.2, 1.0 / 3.0), Vec3(0.5, 0.6, 0.7)}};
  const std::vector<std::string> names{"liver", "", "body"};
  const nlohmann::json j = nlohmann::json::parse(boxes_text(boxes, names));
  EXPECT_EQ(boxes_from_json(j), boxes);
  EXPECT_EQ(box_names_from_json(j), (std::vector<std::string>{"liver", "structure_2", "body"}));
  EXPECT_TRUE(j.at("structure_2").at("box").is_null());
}

TEST(BoxFile, KeysKeepClassOrder) {
  const std::vector<std::optional<AxisAlignedBox>> boxes(3, AxisAlignedBox{Vec3::Zero(), Vec3::Ones()});
  const std::string text = boxes_text(boxes, {"zeta", "alpha", "mid"});
  EXPECT_LT(text.find("zeta"), text.find("alpha"));
  EXPECT_LT(text.find("alpha"), text.find("mid"));
}

TEST(BoxFile, MalformedFails) {
  EXPECT_THROW(boxes_from_json(nlohmann::json::parse(R"({"a": {"min": [0,0,0]}})")), Error);
  EXPECT_THROW(boxes_from_json(nlohmann::json::parse(R"({"a": {"class": 0}})")), Error);
}

TEST(TraceFile, RoundTripIsExact) {
  std::vector<TraceRow> rows;
  for (int i = 0; i < 5; ++i) rows.push_back({static_cast<std::uint64_t>(i + 1), i / 2, {1.0 / (i + 3), 0.1 * i}});
  const auto back = parse_trace_csv(trace_csv(rows));
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].step, rows[i].step);
    EXPECT_EQ(back[i].epoch, rows[i].epoch);
    EXPECT_EQ(back[i].loss.ce, rows[i].loss.ce);
    EXPECT_EQ(back[i].loss.sdf, rows[i].loss.sdf);
  }
  EXPECT_THROW(parse_trace_csv("a,b\n"), Error);
}

TEST(PairFiles, RoundTrip) {
  Rng rng(6);
  TrainingPair p;
  p.seed = 77;
  p.samples = sample_set(rng);
  p.cloud.points = {Vec3(0.1, 0.2, 2.0), Vec3(-0.3, 0.25, 2.1), Vec3(0.0, -0.2, 1.9)};
  p.pose.distance = 2.5;
  p.pose.lateral = 0.1;
  p.pose.vertical = -0.05;
  p.pose.target = Vec3(0.01, 0.02, 0.03);
  const fs::path dir = scratch("pair");
  save_pair(dir, "pair_0000", p);
  const TrainingPair q = load_pair(dir, "pair_0000");
  EXPECT_EQ(q.seed, p.seed);
  EXPECT_EQ(q.cloud.points, p.cloud.points);
  EXPECT_EQ(q.pose.distance, p.pose.distance);
  EXPECT_EQ(q.pose.target, p.pose.target);
  EXPECT_EQ(q.pose.intrinsics.width, p.pose.intrinsics.width);
  expect_same_samples(q.samples, p.samples);
}

std::vector<TrainingPair> toy_pairs(int n) {
  Rng rng(99);
  std::vector<TrainingPair> pairs;
  for (int k = 0; k < n; ++k) {
    TrainingPair p;
    for (int i = 0; i < 30; ++i) p.cloud.points.push_back(uniform(rng, Vec3(-0.3, -0.3, 1.8), Vec3(0.3, 0.3, 2.2)));
    p.samples.num_classes = 1;
    StructureSamples s;
    s.class_id = 1;
    for (int i = 0; i < 12; ++i) {
      const Vec3 q = uniform(rng, Vec3(-0.2, -0.2, 1.9), Vec3(0.2, 0.2, 2.1));
      const double d = (q - Vec3(0.0, 0.0, 2.0)).norm() - 0.1;
      (d < 0 ? s.inside : s.outside).push_back({q, static_cast<Label>(d < 0), d});
    }
    p.samples.structures.push_back(s);
    pairs.push_back(p);
  }
  return pairs;
}

TrainConfig tiny_config(int epochs) {
  TrainConfig cfg;
  cfg.shape.num_classes = 1;
  cfg.shape.latent = 16;
  cfg.shape.encoder_hidden = {8, 8};
  cfg.shape.decoder_width = 8;
  cfg.epochs = epochs;
  cfg.batch_size = 2;
  cfg.sample_chunks = 2;
  return cfg;
}

TEST(Checkpoint, RoundTripRestoresModelAndOptimizer) {
  const auto pairs = toy_pairs(4);
  const TrainConfig cfg = tiny_config(2);
  auto st = start_training<float>(cfg);
  train_loop(st, pairs, cfg);
  const fs::path dir = scratch("ckpt");
  save_checkpoint(dir, st, cfg);
  const LoadedCheckpoint ck = load_checkpoint(dir);
  EXPECT_EQ(ck.state.model.params(), st.model.params());
  EXPECT_EQ(ck.state.adam.m, st.adam.m);
  EXPECT_EQ(ck.state.adam.v, st.adam.v);
  EXPECT_EQ(ck.state.adam.step, st.adam.step);
  EXPECT_EQ(ck.state.epochs_done, 2);
  for (std::size_t l = 0; l < st.model.running_mean().size(); ++l) {
    EXPECT_EQ(ck.state.model.running_mean()[l], st.model.running_mean()[l]);
    EXPECT_EQ(ck.state.model.running_var()[l], st.model.running_var()[l]);
  }
  EXPECT_EQ(nlohmann::json(ck.config), nlohmann::json(cfg));
  ASSERT_EQ(ck.state.trace.size(), st.trace.size());
  EXPECT_EQ(ck.state.trace.back().loss.total(), st.trace.back().loss.total());
}

TEST(Checkpoint, ResumedRunMatchesUninterruptedRun) {
  const auto pairs = toy_pairs(5);
  auto full = start_training<float>(tiny_config(4));
  train_loop(full, pairs, tiny_config(4));

  auto first = start_training<float>(tiny_config(2));
  train_loop(first, pairs, tiny_config(2));
  const fs::path dir = scratch("resume");
  save_checkpoint(dir, first, tiny_config(2));
  TrainState<float> resumed = load_checkpoint(dir).state;
  train_loop(resumed, pairs, tiny_config(4));

  ASSERT_EQ(resumed.trace.size(), full.trace.size());
  for (std::size_t i = 0; i < full.trace.size(); ++i) {
    EXPECT_EQ(resumed.trace[i].step, full.trace[i].step);
    EXPECT_EQ(resumed.trace[i].loss.total(), full.trace[i].loss.total());
  }
  EXPECT_EQ(resumed.model.params(), full.model.params());
  EXPECT_EQ(trace_csv(resumed.trace), trace_csv(full.trace));
}

TEST(Checkpoint, WrongKindOrShapeFails) {
  const fs::path dir = scratch("oracle");
  save_oracle_checkpoint(dir, BoxOracleField{2, {{1, AxisAlignedBox{Vec3::Zero(), Vec3::Ones()}}}});
  EXPECT_THROW(load_checkpoint(dir), Error);
  const AnyModel any = load_any_model(dir);
  ASSERT_TRUE(std::holds_alternative<BoxOracleField>(any));
  EXPECT_EQ(model_classes(any), 2);
  EXPECT_EQ(std::get<BoxOracleField>(any).boxes.front().second.max_corner, Vec3::Ones());

  const auto pairs = toy_pairs(2);
  auto st = start_training<float>(tiny_config(1));
  train_loop(st, pairs, tiny_config(1));
  const fs::path bad = scratch("truncated");
  save_checkpoint(bad, st, tiny_config(1));
  const std::string params = read_file(bad / "params.f64");
  write_file(bad / "params.f64", params.substr(0, params.size() - 8));
  EXPECT_THROW(load_checkpoint(bad), Error);
  EXPECT_THROW(load_any_model(scratch("empty")), Error);
}

}  // namespace
}  // namespace occloc
