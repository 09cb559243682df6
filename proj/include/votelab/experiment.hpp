#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "votelab/augment.hpp"
#include "votelab/config.hpp"
#include "votelab/detector.hpp"
#include "votelab/eval.hpp"
#include "votelab/synth.hpp"
#include "votelab/trainer.hpp"

namespace votelab {

/// Pipeline stages; enum values double as process exit codes.
enum class Stage : int {
  config = 2,
  synth = 3,
  gtdb = 4,
  augment = 5,
  pretrain = 6,
  finetune = 7,
  train = 8,
  baseline = 9,
  eval = 10,
  gradcheck = 11,
  report = 12,
};

const char* stage_name(Stage stage);

/// Any stage failure aborts the experiment with the stage attached, so the
/// CLI can exit with the stage-tagged code.
class StageError : public std::runtime_error {
 public:
  StageError(Stage stage, const std::string& message)
      : std::runtime_error(std::string(stage_name(stage)) + ": " + message), stage_(stage) {}

  Stage stage() const noexcept { return stage_; }

 private:
  Stage stage_;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::size_t num_source_scenes = 100;
  std::size_t num_target_scenes = 100;
  std::size_t num_eval_scenes = 30;
  double eval_iou = 0.25;
  int gtdb_min_points = 5;
  bool run_ablations = false;
  bool save_artifacts = true;
  std::filesystem::path out_dir = "out";
  DomainSpec source_spec = default_source_spec();
  DomainSpec target_spec = default_target_spec();
  PasteConfig paste;
  DetectorConfig detector;
  TrainConfig train;

  void validate() const;
};

/// Fills cfg from dotted keys (experiment.*, detector.*, paste.*, train.*);
/// any key the schema does not recognize raises a config error.
void apply_config(const Config& source, ExperimentConfig& cfg);

struct VariantMetrics {
  double map_base = 0.0;
  double map_novel = 0.0;
  double map_all = 0.0;
  EvalReport report;
};

struct ExperimentResult {
  VariantMetrics finetuned;  // base model after sequential fine-tuning, pre-incremental
  VariantMetrics baseline;   // supervised fine-tune on novel targets (forgetting)
  VariantMetrics dacil;      // dual-teacher student
  std::optional<VariantMetrics> ablation_no_cross;
  std::optional<VariantMetrics> ablation_no_in;
};

/// synth -> gtdb -> copy-paste augment -> pretrain -> sequential fine-tune ->
/// {forgetting baseline, dual-teacher} -> evaluate on held-out target scenes.
/// Writes report.txt, loss_curves.csv, pr_curves.csv (and artifacts) under
/// cfg.out_dir. Deterministic per seed; timing goes to stdout only.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

/// The deterministic report body written to report.txt.
std::string format_report(const ExperimentConfig& cfg, const ExperimentResult& result,
                          const ClassPartition& partition);

}  // namespace votelab
