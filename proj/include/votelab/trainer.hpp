#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "votelab/augment.hpp"
#include "votelab/detector.hpp"
#include "votelab/losses.hpp"
#include "votelab/rng.hpp"
#include "votelab/scene.hpp"

namespace votelab {

struct TrainConfig {
  int epochs_base = 30;
  int epochs_finetune_in = 5;
  int epochs_finetune_cross = 5;
  int epochs_dual = 20;
  int epochs_baseline = 20;
  int batch_size = 4;              // supervised-only stages
  int dual_in_target_per_batch = 3;
  int dual_cross_per_batch = 1;
  double lr = 0.001;
  std::vector<int> lr_decay_epochs = {16, 24};  // base stage only
  double lr_decay_factor = 0.1;
  double ema_alpha = 0.999;
  double pseudo_threshold = 0.9;
  double assignment_radius = 0.3;
  double flip_prob = 0.5;                       // scene-level augmentation
  double rot_range = 5.0 * M_PI / 180.0;
  double scale_min = 0.95;
  double scale_max = 1.05;
  std::uint64_t seed = 1;
  LossWeights weights;

  void validate() const;
};

struct EpochMetrics {
  std::string stage;
  int epoch = 0;
  double l_sup = 0.0;
  double l_dis = 0.0;
  double l_con = 0.0;
  double l_total = 0.0;
  double lr = 0.0;
};

using StageLog = std::vector<EpochMetrics>;

/// Appends "stage epoch l_sup l_dis l_con l_total lr" lines.
void append_stage_log(const StageLog& log, const std::filesystem::path& path);

/// Adam with (beta1, beta2, eps) = (0.9, 0.999, 1e-8). Stepping a frozen
/// state raises a frozen-state error.
class Adam {
 public:
  Adam(const DetectorState& state, double lr);

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  void step(DetectorState& state, const DetectorParams& grads);

 private:
  double lr_;
  long t_ = 0;
  DetectorParams m_, v_;
};

/// alpha * teacher + (1 - alpha) * student, elementwise over every parameter
/// tensor and every BN running statistic.
void ema_update(DetectorState& teacher, const DetectorState& student, double alpha);

/// Supervised-only base training on source scenes.
DetectorState pretrain_base(const std::vector<Scene>& scenes, const DetectorConfig& dcfg,
                            const TrainConfig& tcfg, StageLog* log = nullptr);

/// X_in(source) for epochs_finetune_in epochs, then X_cross.
DetectorState finetune_sequential(const DetectorState& state,
                                  const std::vector<Scene>& in_source_scenes,
                                  const std::vector<Scene>& cross_scenes,
                                  const TrainConfig& tcfg, StageLog* log = nullptr);

/// Supervised-only training on novel-class targets; the forgetting baseline.
DetectorState finetune_baseline(const DetectorState& state,
                                const std::vector<Scene>& target_scenes,
                                const TrainConfig& tcfg, StageLog* log = nullptr);

/// Eval-mode teacher forward; proposals with objectness >= threshold become
/// boxes classed by argmax over base-class probabilities.
std::vector<BoundingBox3D> generate_pseudo_labels(DetectorState& cross_teacher,
                                                  const Scene& scene, double threshold,
                                                  const std::vector<int>& base_class_ids);

struct MixedLabels {
  std::vector<BoundingBox3D> boxes;      // pseudo first, then novel gt
  std::vector<std::uint8_t> is_pseudo;   // provenance per box
};

/// Applies one scene transform to the cloud and to every label box so the
/// student's input and supervision stay consistent.
std::pair<PointCloud, MixedLabels> make_mixed_labels(const std::vector<BoundingBox3D>& pseudo,
                                                     const std::vector<BoundingBox3D>& novel_gt,
                                                     const SceneTransform& t,
                                                     const PointCloud& cloud);

struct DualBatch {
  std::vector<const Scene*> in_target;
  std::vector<const Scene*> cross;
};

struct LossBreakdown {
  double l_sup = 0.0;
  double l_dis = 0.0;
  double l_con = 0.0;
  double l_total = 0.0;
};

/// One dual-teacher optimization step; updates student in place, then EMAs
/// the in-domain teacher. The cross-domain teacher never changes.
LossBreakdown dual_teacher_step(DetectorState& student, DetectorState& in_teacher,
                                DetectorState& cross_teacher, Adam& optimizer,
                                const DualBatch& batch,
                                const std::vector<int>& base_class_ids,
                                const TrainConfig& tcfg, Rng& rng);

struct DualResult {
  DetectorState student;
  DetectorState in_teacher;
  DetectorState cross_teacher;
};

/// Full dual-teacher stage starting from the fine-tuned model.
DualResult train_dual_teacher(const DetectorState& ft_state,
                              const std::vector<Scene>& in_target_scenes,
                              const std::vector<Scene>& cross_scenes,
                              const std::vector<int>& base_class_ids,
                              const TrainConfig& tcfg, StageLog* log = nullptr);

}  // namespace votelab
