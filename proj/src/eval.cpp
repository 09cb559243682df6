#include "votelab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "votelab/common.hpp"

namespace votelab {

void ClassPartition::validate() const {
  if (classes.empty()) fail(ErrorKind::config, "class partition is empty");
  std::set<int> seen;
  for (const ClassInfo& c : classes) {
    if (c.id < 0) fail(ErrorKind::config, "class id must be >= 0");
    if (!seen.insert(c.id).second) {
      fail(ErrorKind::config, "duplicate class id " + std::to_string(c.id));
    }
    if (c.name.empty()) fail(ErrorKind::config, "class name must be non-empty");
  }
}

std::vector<int> ClassPartition::base_ids() const {
  std::vector<int> out;
  for (const ClassInfo& c : classes) {
    if (c.is_base) out.push_back(c.id);
  }
  return out;
}

std::vector<int> ClassPartition::novel_ids() const {
  std::vector<int> out;
  for (const ClassInfo& c : classes) {
    if (!c.is_base) out.push_back(c.id);
  }
  return out;
}

std::vector<int> ClassPartition::all_ids() const {
  std::vector<int> out;
  for (const ClassInfo& c : classes) out.push_back(c.id);
  return out;
}

const ClassInfo* ClassPartition::find(int id) const {
  for (const ClassInfo& c : classes) {
    if (c.id == id) return &c;
  }
  return nullptr;
}

void save_classes(const ClassPartition& partition, const std::filesystem::path& path) {
  partition.validate();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write classes file: " + path.string());
  for (const ClassInfo& c : partition.classes) {
    out << c.id << ' ' << c.name << ' ' << (c.is_base ? "base" : "novel") << '\n';
  }
  out.flush();
  if (!out) fail(ErrorKind::io, "write failed: " + path.string());
}

ClassPartition load_classes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open classes file: " + path.string());
  ClassPartition p;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    ClassInfo c;
    std::string kind;
    if (!(row >> c.id >> c.name >> kind) || (kind != "base" && kind != "novel")) {
      fail(ErrorKind::corrupt_file, "bad classes line: " + line);
    }
    c.is_base = kind == "base";
    p.classes.push_back(std::move(c));
  }
  p.validate();
  return p;
}

std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                   const std::vector<GtBox>& gts, double iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].confidence != dets[b].confidence) {
      return dets[a].confidence > dets[b].confidence;
    }
    if (dets[a].scene_id != dets[b].scene_id) return dets[a].scene_id < dets[b].scene_id;
    return a < b;
  });

  std::vector<bool> gt_used(gts.size(), false);
  std::vector<bool> flags;
  flags.reserve(dets.size());
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const Detection& det = dets[order[rank]];
    int best_gt = -1;
    double best_iou = iou_threshold;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[g] || gts[g].scene_id != det.scene_id) continue;
      const double iou = box_iou(det.box, gts[g].box);
      if (iou > best_iou || (iou == best_iou && iou >= iou_threshold && best_gt < 0)) {
        best_iou = iou;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      gt_used[static_cast<std::size_t>(best_gt)] = true;
      flags.push_back(true);
    } else {
      flags.push_back(false);
    }
  }
  return flags;
}

double average_precision(const std::vector<bool>& flags, std::size_t num_gt) {
  if (num_gt == 0 || flags.empty()) return 0.0;
  std::vector<double> precision(flags.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (flags[i]) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  // Precision envelope: monotone non-increasing from the right.
  for (std::size_t i = flags.size() - 1; i-- > 0;) {
    precision[i] = std::max(precision[i], precision[i + 1]);
  }
  double ap = 0.0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (flags[i]) ap += precision[i] / static_cast<double>(num_gt);
  }
  return ap;
}

EvalReport evaluate(const std::vector<Detection>& detections,
                    const std::vector<Scene>& gt_scenes, const ClassPartition& partition,
                    double iou_threshold) {
  partition.validate();
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
    fail(ErrorKind::config, "evaluate: iou_threshold must be in (0,1]");
  }
  for (const Detection& d : detections) {
    if (!partition.find(d.class_id)) {
      fail(ErrorKind::unknown_class,
           "evaluate: detection with unknown class id " + std::to_string(d.class_id));
    }
    if (d.confidence < 0.0 || d.confidence > 1.0) {
      fail(ErrorKind::config, "evaluate: confidence must lie in [0,1]");
    }
  }

  EvalReport report;
  report.iou_threshold = iou_threshold;
  report.num_detections = detections.size();

  std::map<int, std::vector<GtBox>> gt_by_class;
  for (const Scene& scene : gt_scenes) {
    for (const BoundingBox3D& box : scene.boxes) {
      if (!partition.find(box.class_id)) {
        fail(ErrorKind::unknown_class,
             "evaluate: gt box with unknown class id " + std::to_string(box.class_id));
      }
      gt_by_class[box.class_id].push_back({scene.id, box});
      ++report.num_gt;
    }
  }

  auto mean_over = [&](const std::vector<int>& ids) {
    double sum = 0.0;
    std::size_t n = 0;
    for (int id : ids) {
      auto it = report.class_ap.find(id);
      if (it == report.class_ap.end()) continue;  // class excluded
      sum += it->second;
      ++n;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
  };

  for (int id : partition.all_ids()) {
    std::vector<Detection> dets_c;
    for (const Detection& d : detections) {
      if (d.class_id == id) dets_c.push_back(d);
    }
    const std::vector<GtBox>& gts_c =
        gt_by_class.count(id) ? gt_by_class[id] : std::vector<GtBox>{};
    report.class_gt[id] = gts_c.size();
    report.class_det[id] = dets_c.size();
    if (gts_c.empty() && dets_c.empty()) continue;  // undefined: skip from means
    const std::vector<bool> flags = match_detections(dets_c, gts_c, iou_threshold);
    report.class_ap[id] = average_precision(flags, gts_c.size());
  }

  report.map_base = mean_over(partition.base_ids());
  report.map_novel = mean_over(partition.novel_ids());
  report.map_all = mean_over(partition.all_ids());
  return report;
}

std::vector<Detection> detect(DetectorState& state, const Scene& scene) {
  ForwardResult res = forward(state, scene.cloud, ForwardMode::eval);
  std::vector<Detection> out;
  out.reserve(res.proposals.size());
  for (const Proposal& p : res.proposals) {
    Detection d;
    d.scene_id = scene.id;
    std::size_t best = 0;
    for (std::size_t c = 1; c < p.class_probs.size(); ++c) {
      if (p.class_probs[c] > p.class_probs[best]) best = c;
    }
    d.class_id = static_cast<int>(best);
    d.confidence = p.objectness * p.class_probs[best];
    d.box.center = p.center;
    d.box.size = p.size;
    d.box.heading = 0.0;
    d.box.class_id = d.class_id;
    out.push_back(d);
  }
  return out;
}

std::vector<Detection> detect_all(DetectorState& state, const std::vector<Scene>& scenes) {
  std::vector<Detection> out;
  for (const Scene& scene : scenes) {
    const std::vector<Detection> dets = detect(state, scene);
    out.insert(out.end(), dets.begin(), dets.end());
  }
  return out;
}

std::string format_eval_report(const EvalReport& report, const ClassPartition& partition) {
  char buf[64];
  auto fmt = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return std::string(buf);
  };
  std::string out;
  out += "iou_threshold " + fmt(report.iou_threshold) + '\n';
  out += "num_gt " + std::to_string(report.num_gt) + '\n';
  out += "num_detections " + std::to_string(report.num_detections) + '\n';
  for (const ClassInfo& c : partition.classes) {
    auto it = report.class_ap.find(c.id);
    out += "class_ap." + c.name + ' ' +
           (it == report.class_ap.end() ? "excluded" : fmt(it->second)) + '\n';
  }
  out += "map.base " + fmt(report.map_base) + '\n';
  out += "map.novel " + fmt(report.map_novel) + '\n';
  out += "map.all " + fmt(report.map_all) + '\n';
  return out;
}

void write_report(const EvalReport& report, const ClassPartition& partition,
                  const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write eval report: " + path.string());
  out << format_eval_report(report, partition);
  out.flush();
  if (!out) fail(ErrorKind::io, "write failed: " + path.string());
}

}  // namespace votelab
