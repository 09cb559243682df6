#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "votelab/detector.hpp"
#include "votelab/scene.hpp"

namespace votelab {

struct ClassInfo {
  int id = 0;
  std::string name;
  bool is_base = true;

  bool operator==(const ClassInfo& o) const = default;
};

/// Disjoint base/novel class split with display names.
struct ClassPartition {
  std::vector<ClassInfo> classes;  // ascending id

  void validate() const;
  std::vector<int> base_ids() const;
  std::vector<int> novel_ids() const;
  std::vector<int> all_ids() const;
  const ClassInfo* find(int id) const;
};

/// classes.txt: one "id name base|novel" line per class.
void save_classes(const ClassPartition& partition, const std::filesystem::path& path);
ClassPartition load_classes(const std::filesystem::path& path);

struct Detection {
  std::uint64_t scene_id = 0;
  BoundingBox3D box;
  double confidence = 0.0;  // objectness * max class prob
  int class_id = 0;
};

struct GtBox {
  std::uint64_t scene_id = 0;
  BoundingBox3D box;
};

struct EvalReport {
  double iou_threshold = 0.25;
  std::map<int, double> class_ap;  // classes with gt or detections only
  std::map<int, std::size_t> class_gt;
  std::map<int, std::size_t> class_det;
  double map_base = 0.0;
  double map_novel = 0.0;
  double map_all = 0.0;
  std::size_t num_gt = 0;
  std::size_t num_detections = 0;
};

/// TP/FP flags for one class, ordered by confidence descending (ties: lower
/// scene_id, then input order). Greedy: each detection takes the unmatched
/// same-scene gt of highest IoU >= threshold.
std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                   const std::vector<GtBox>& gts, double iou_threshold);

/// All-point AP with the precision envelope. 0 when num_gt is 0.
double average_precision(const std::vector<bool>& flags, std::size_t num_gt);

/// Per-class AP and base/novel/all means. Classes with neither gt nor
/// detections are excluded from the means.
EvalReport evaluate(const std::vector<Detection>& detections,
                    const std::vector<Scene>& gt_scenes, const ClassPartition& partition,
                    double iou_threshold);

/// Eval-mode forward; every proposal becomes a detection with class = argmax
/// over all class probabilities. No NMS.
std::vector<Detection> detect(DetectorState& state, const Scene& scene);
std::vector<Detection> detect_all(DetectorState& state, const std::vector<Scene>& scenes);

/// Structured text report: class_ap.<name>, map.base, map.novel, map.all.
std::string format_eval_report(const EvalReport& report, const ClassPartition& partition);
void write_report(const EvalReport& report, const ClassPartition& partition,
                  const std::filesystem::path& path);

}  // namespace votelab
