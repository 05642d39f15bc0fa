#pragma once

// Bounding-box localization metrics and their per-structure aggregation.

#include <occloc/core.hpp>

#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace occloc {

/// Center distance in centimeters (boxes are stored in meters).
inline double center_distance_cm(const AxisAlignedBox& a, const AxisAlignedBox& b) {
  return 100.0 * (a.center() - b.center()).norm();
}

struct IouResult {
  double value = 0.0;
  bool degenerate = false;  // empty union
};

/// Volume(A ∩ B) / Volume(A ∪ B). Axes where both boxes have zero extent are dropped, so flat
/// boxes are compared as areas (and coincident points as lengths).
inline IouResult iou(const AxisAlignedBox& a, const AxisAlignedBox& b) {
  double inter = 1.0, va = 1.0, vb = 1.0;
  bool any_axis = false;
  for (int k = 0; k < 3; ++k) {
    const double ea = a.max_corner[k] - a.min_corner[k], eb = b.max_corner[k] - b.min_corner[k];
    if (ea == 0.0 && eb == 0.0) {
      if (a.min_corner[k] != b.min_corner[k]) return {0.0, false};  // parallel flat boxes never meet
      continue;
    }
    any_axis = true;
    inter *= std::max(0.0, std::min(a.max_corner[k], b.max_corner[k]) - std::max(a.min_corner[k], b.min_corner[k]));
    va *= ea;
    vb *= eb;
  }
  const double uni = std::min(va, vb) + std::max(va, vb) - inter;  // order-free, so iou(a, b) == iou(b, a) exactly
  if (!any_axis || !(uni > 0.0)) return {0.0, true};
  return {std::clamp(inter / uni, 0.0, 1.0), false};
}

/// Smallest uniform scale s >= 1 of `estimate` about its own center that contains `reference`.
/// nullopt when the estimate is flat on an axis the reference extends beyond.
inline std::optional<double> esf(const AxisAlignedBox& estimate, const AxisAlignedBox& reference) {
  const Vec3 c = estimate.center();
  const Vec3 half = 0.5 * estimate.extent();
  double s = 1.0;
  for (int k = 0; k < 3; ++k) {
    if (reference.min_corner[k] >= estimate.min_corner[k] && reference.max_corner[k] <= estimate.max_corner[k]) continue;
    const double reach = std::max(std::abs(reference.min_corner[k] - c[k]), std::abs(reference.max_corner[k] - c[k]));
    if (half[k] > 0.0) {
      s = std::max(s, reach / half[k]);
    } else if (reach > 0.0) {
      return std::nullopt;
    }
  }
  return s;
}

/// Metrics of one structure in one case. Missing boxes leave the metrics unset.
struct MetricRecord {
  std::string case_id;
  int structure = 0;
  bool has_estimate = false;
  bool has_reference = false;
  std::optional<double> cd_cm;
  std::optional<double> iou;
  std::optional<double> esf;
  bool iou_degenerate = false;
  bool esf_infinite = false;

  bool complete() const { return has_estimate && has_reference; }
};

inline MetricRecord evaluate_boxes(const std::string& case_id, int structure, const std::optional<AxisAlignedBox>& estimate,
                                   const std::optional<AxisAlignedBox>& reference) {
  MetricRecord r;
  r.case_id = case_id;
  r.structure = structure;
  r.has_estimate = estimate.has_value();
  r.has_reference = reference.has_value();
  if (!r.complete()) return r;
  r.cd_cm = center_distance_cm(*estimate, *reference);
  const IouResult i = iou(*estimate, *reference);
  r.iou = i.value;
  r.iou_degenerate = i.degenerate;
  r.esf = esf(*estimate, *reference);
  r.esf_infinite = !r.esf.has_value();
  return r;
}

enum class Metric { cd, iou, esf };

inline const char* metric_name(Metric m) {
  switch (m) {
    case Metric::cd: return "CD";
    case Metric::iou: return "IoU";
    case Metric::esf: return "ESF";
  }
  return "?";
}

inline std::optional<double> metric_value(const MetricRecord& r, Metric m) {
  switch (m) {
    case Metric::cd: return r.cd_cm;
    case Metric::iou: return r.iou;
    case Metric::esf: return r.esf;
  }
  return std::nullopt;
}

struct Moments {
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t count = 0;
  std::size_t missing = 0;
};

/// Population mean and standard deviation, two-pass.
inline Moments moments(const std::vector<double>& xs) {
  Moments m;
  m.count = xs.size();
  if (xs.empty()) return m;
  double sum = 0.0;
  for (double x : xs) sum += x;
  m.mean = sum / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(ss / static_cast<double>(xs.size()));
  return m;
}

struct MetricTable {
  std::map<int, Moments> per_structure;
  Moments overall;  // over all complete records
};

/// Per-structure moments of one metric. Records without a value count as missing.
inline MetricTable aggregate(const std::vector<MetricRecord>& records, Metric m) {
  if (records.empty()) fail_data("cannot aggregate an empty evaluation set");
  std::map<int, std::vector<double>> values;
  std::map<int, std::size_t> missing;
  std::vector<double> all;
  for (const auto& r : records) {
    values[r.structure];
    if (const auto v = metric_value(r, m)) {
      values[r.structure].push_back(*v);
      all.push_back(*v);
    } else {
      ++missing[r.structure];
    }
  }
  MetricTable t;
  std::size_t total_missing = 0;
  for (const auto& [s, xs] : values) {
    Moments mo = moments(xs);
    mo.missing = missing[s];
    total_missing += mo.missing;
    t.per_structure[s] = mo;
  }
  t.overall = moments(all);
  t.overall.missing = total_missing;
  return t;
}

/// One row per structure plus a final "all" row.
inline void write_metric_csv(std::ostream& os, const MetricTable& t, const std::vector<std::string>& names = {}) {
  os << "ValueNumber,Structure,Mean,Std,Count,Missing\n";
  os << std::setprecision(17);
  int row = 0;
  auto line = [&](const std::string& name, const Moments& m) {
    os << row++ << ',' << name << ',' << m.mean << ',' << m.std << ',' << m.count << ',' << m.missing << '\n';
  };
  for (const auto& [s, m] : t.per_structure) {
    const auto idx = static_cast<std::size_t>(s - 1);
    line(idx < names.size() && !names[idx].empty() ? names[idx] : "structure_" + std::to_string(s), m);
  }
  line("all", t.overall);
}

inline std::string metric_csv(const MetricTable& t, const std::vector<std::string>& names = {}) {
  std::ostringstream os;
  write_metric_csv(os, t, names);
  return os.str();
}

}  // namespace occloc
