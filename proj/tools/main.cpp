#include <cstdio>
#include <fstream>
#include <functional>
#include <string>

#include "CLI11.hpp"
#include "votelab/common.hpp"
#include "votelab/experiment.hpp"
#include "votelab/gradcheck.hpp"
#include "votelab/gtdb.hpp"
#include "votelab/scene_io.hpp"

namespace {

using namespace votelab;

struct CliOptions {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir;
  bool seed_set = false;
  bool out_set = false;
};

ExperimentConfig load_experiment_config(const CliOptions& opts) {
  try {
    ExperimentConfig cfg;
    Config c;
    if (!opts.config_path.empty()) c = Config::from_file(opts.config_path);
    c.apply_env_overrides();
    apply_config(c, cfg);
    if (opts.seed_set) cfg.seed = opts.seed;
    if (opts.out_set) cfg.out_dir = opts.out_dir;
    cfg.validate();
    return cfg;
  } catch (const std::exception& e) {
    throw StageError(Stage::config, e.what());
  }
}

TrainConfig train_config(const ExperimentConfig& cfg) {
  TrainConfig tcfg = cfg.train;
  tcfg.seed = cfg.seed;
  return tcfg;
}

int run_tagged(Stage stage, const std::function<void()>& fn) {
  try {
    fn();
    return 0;
  } catch (const StageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(e.stage());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s: %s\n", stage_name(stage), e.what());
    return static_cast<int>(stage);
  }
}

void cmd_synth(const ExperimentConfig& cfg) {
  const Rng master(cfg.seed);
  save_scenes(synth_domain(cfg.source_spec, cfg.num_source_scenes,
                           master.fork("synth_source"), 0),
              cfg.out_dir / "scenes" / "source");
  save_scenes(synth_domain(cfg.target_spec, cfg.num_target_scenes,
                           master.fork("synth_target"), 10000),
              cfg.out_dir / "scenes" / "target");
  save_scenes(synth_domain(cfg.target_spec, cfg.num_eval_scenes,
                           master.fork("synth_eval"), 20000),
              cfg.out_dir / "scenes" / "eval");
  save_classes(make_partition(cfg.target_spec), cfg.out_dir / "classes.txt");
  std::printf("synth: wrote %zu source, %zu target, %zu eval scenes\n",
              cfg.num_source_scenes, cfg.num_target_scenes, cfg.num_eval_scenes);
}

void cmd_gtdb(const ExperimentConfig& cfg) {
  const ClassPartition partition = load_classes(cfg.out_dir / "classes.txt");
  const auto base = partition.base_ids();
  const auto novel = partition.novel_ids();
  const GtDatabase source_db =
      build_database(load_scenes(cfg.out_dir / "scenes" / "source"),
                     std::set<int>(base.begin(), base.end()), cfg.gtdb_min_points);
  const GtDatabase target_db =
      build_database(load_scenes(cfg.out_dir / "scenes" / "target"),
                     std::set<int>(novel.begin(), novel.end()), cfg.gtdb_min_points);
  save_database(source_db, cfg.out_dir / "gtdb" / "source");
  save_database(target_db, cfg.out_dir / "gtdb" / "target");
  std::printf("gtdb: %zu source objects, %zu target objects\n", source_db.size(),
              target_db.size());
}

void cmd_augment(const ExperimentConfig& cfg) {
  const ClassPartition partition = load_classes(cfg.out_dir / "classes.txt");
  const auto novel = partition.novel_ids();
  const std::set<int> novel_set(novel.begin(), novel.end());
  const auto source = load_scenes(cfg.out_dir / "scenes" / "source");
  const auto target = load_scenes(cfg.out_dir / "scenes" / "target");
  const GtDatabase source_db = load_database(cfg.out_dir / "gtdb" / "source");
  const GtDatabase target_db = load_database(cfg.out_dir / "gtdb" / "target");
  const Rng master(cfg.seed);

  auto save_batch = [&](const std::vector<Scene>& scenes,
                        const std::vector<TransformRecord>& recs, const char* name) {
    const auto dir = cfg.out_dir / "aug" / name;
    save_scenes(scenes, dir);
    char file[32];
    for (std::size_t i = 0; i < recs.size(); ++i) {
      std::snprintf(file, sizeof(file), "record_%05zu.json", i);
      save_record(recs[i], dir / file);
    }
  };

  std::vector<Scene> scenes;
  std::vector<TransformRecord> recs;
  const Rng cross_rng = master.fork("augment_cross");
  for (std::size_t i = 0; i < target.size(); ++i) {
    Rng r = cross_rng.fork(static_cast<std::uint64_t>(i));
    auto [scene, rec] = cross_domain_cp(target[i], source_db, cfg.paste, r);
    scene.boxes.erase(scene.boxes.begin(),
                      scene.boxes.begin() + static_cast<std::ptrdiff_t>(target[i].boxes.size()));
    scenes.push_back(std::move(scene));
    recs.push_back(std::move(rec));
  }
  save_batch(scenes, recs, "cross");

  scenes.clear();
  recs.clear();
  const Rng in_src_rng = master.fork("augment_in_source");
  for (std::size_t i = 0; i < source.size(); ++i) {
    Rng r = in_src_rng.fork(static_cast<std::uint64_t>(i));
    auto [scene, rec] = in_domain_cp(source[i], source_db, cfg.paste, r);
    scenes.push_back(std::move(scene));
    recs.push_back(std::move(rec));
  }
  save_batch(scenes, recs, "in_source");

  scenes.clear();
  recs.clear();
  const Rng in_tgt_rng = master.fork("augment_in_target");
  for (std::size_t i = 0; i < target.size(); ++i) {
    Rng r = in_tgt_rng.fork(static_cast<std::uint64_t>(i));
    auto [scene, rec] = in_domain_cp(target[i], target_db, cfg.paste, r);
    std::vector<BoundingBox3D> kept;
    for (const BoundingBox3D& b : scene.boxes) {
      if (novel_set.count(b.class_id) != 0) kept.push_back(b);
    }
    scene.boxes = std::move(kept);
    scenes.push_back(std::move(scene));
    recs.push_back(std::move(rec));
  }
  save_batch(scenes, recs, "in_target");
  std::printf("augment: wrote cross, in_source, in_target corpora\n");
}

void cmd_pretrain(const ExperimentConfig& cfg) {
  StageLog log;
  const DetectorState state = pretrain_base(load_scenes(cfg.out_dir / "scenes" / "source"),
                                            cfg.detector, train_config(cfg), &log);
  save_checkpoint(state, cfg.out_dir / "checkpoints" / "pretrained.bin");
  append_stage_log(log, cfg.out_dir / "train_log.txt");
  std::printf("pretrain: saved checkpoints/pretrained.bin\n");
}

void cmd_finetune(const ExperimentConfig& cfg) {
  StageLog log;
  const DetectorState state = finetune_sequential(
      load_checkpoint(cfg.out_dir / "checkpoints" / "pretrained.bin"),
      load_scenes(cfg.out_dir / "aug" / "in_source"), load_scenes(cfg.out_dir / "aug" / "cross"),
      train_config(cfg), &log);
  save_checkpoint(state, cfg.out_dir / "checkpoints" / "finetuned.bin");
  append_stage_log(log, cfg.out_dir / "train_log.txt");
  std::printf("finetune: saved checkpoints/finetuned.bin\n");
}

void cmd_train(const ExperimentConfig& cfg) {
  const ClassPartition partition = load_classes(cfg.out_dir / "classes.txt");
  StageLog log;
  const DualResult result = train_dual_teacher(
      load_checkpoint(cfg.out_dir / "checkpoints" / "finetuned.bin"),
      load_scenes(cfg.out_dir / "aug" / "in_target"), load_scenes(cfg.out_dir / "aug" / "cross"),
      partition.base_ids(), train_config(cfg), &log);
  const auto ck = cfg.out_dir / "checkpoints";
  save_checkpoint(result.student, ck / "dacil_student.bin");
  save_checkpoint(result.in_teacher, ck / "dacil_in_teacher.bin");
  save_checkpoint(result.cross_teacher, ck / "cross_teacher.bin");
  append_stage_log(log, cfg.out_dir / "train_log.txt");
  std::printf("train: saved dacil_student, dacil_in_teacher, cross_teacher\n");
}

void cmd_baseline(const ExperimentConfig& cfg) {
  StageLog log;
  const DetectorState state = finetune_baseline(
      load_checkpoint(cfg.out_dir / "checkpoints" / "finetuned.bin"),
      load_scenes(cfg.out_dir / "aug" / "in_target"), train_config(cfg), &log);
  save_checkpoint(state, cfg.out_dir / "checkpoints" / "baseline.bin");
  append_stage_log(log, cfg.out_dir / "train_log.txt");
  std::printf("baseline: saved checkpoints/baseline.bin\n");
}

void cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint,
              const std::string& report_out) {
  const ClassPartition partition = load_classes(cfg.out_dir / "classes.txt");
  std::filesystem::path ck_path = checkpoint;
  if (ck_path.is_relative()) ck_path = cfg.out_dir / ck_path;
  DetectorState state = load_checkpoint(ck_path);
  const auto eval_scenes = load_scenes(cfg.out_dir / "scenes" / "eval");
  const EvalReport report =
      evaluate(detect_all(state, eval_scenes), eval_scenes, partition, cfg.eval_iou);
  std::fputs(format_eval_report(report, partition).c_str(), stdout);
  if (!report_out.empty()) write_report(report, partition, report_out);
}

void cmd_report(const ExperimentConfig& cfg) {
  const ClassPartition partition = load_classes(cfg.out_dir / "classes.txt");
  const auto eval_scenes = load_scenes(cfg.out_dir / "scenes" / "eval");
  auto eval_checkpoint = [&](const char* name) {
    DetectorState state = load_checkpoint(cfg.out_dir / "checkpoints" / name);
    VariantMetrics m;
    m.report = evaluate(detect_all(state, eval_scenes), eval_scenes, partition, cfg.eval_iou);
    m.map_base = m.report.map_base;
    m.map_novel = m.report.map_novel;
    m.map_all = m.report.map_all;
    return m;
  };
  ExperimentResult result;
  result.finetuned = eval_checkpoint("finetuned.bin");
  result.baseline = eval_checkpoint("baseline.bin");
  result.dacil = eval_checkpoint("dacil_student.bin");
  const std::string body = format_report(cfg, result, partition);
  std::ofstream out(cfg.out_dir / "report.txt", std::ios::trunc | std::ios::binary);
  out << body;
  std::fputs(body.c_str(), stdout);
}

void cmd_gradcheck(std::uint64_t seed, int n_seeds) {
  const auto results = run_gradcheck(n_seeds, seed);
  bool all_pass = true;
  for (const GradCheckResult& r : results) {
    std::printf("seed=%llu detector_max_rel=%.3e loss_max_rel=%.3e %s\n",
                static_cast<unsigned long long>(r.seed), r.max_rel_detector, r.max_rel_loss,
                r.pass ? "pass" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  if (!all_pass) fail(ErrorKind::config, "gradient check failed");
}

void cmd_run_experiment(const ExperimentConfig& cfg) {
  const ExperimentResult result = run_experiment(cfg);
  auto row = [](const char* name, const VariantMetrics& m) {
    std::printf("%-10s map.base=%.4f map.novel=%.4f map.all=%.4f\n", name, m.map_base,
                m.map_novel, m.map_all);
  };
  row("finetuned", result.finetuned);
  row("baseline", result.baseline);
  row("dacil", result.dacil);
  if (result.ablation_no_cross) row("no_cross", *result.ablation_no_cross);
  if (result.ablation_no_in) row("no_in", *result.ablation_no_in);
  std::printf("report: %s\n", (cfg.out_dir / "report.txt").string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"votelab: dual-teacher class-incremental 3D detection workbench"};
  app.require_subcommand(1);

  CliOptions opts;
  app.add_option("--config", opts.config_path, "key=value config file")->expected(1);
  auto* seed_opt = app.add_option("--seed", opts.seed, "master seed");
  auto* out_opt = app.add_option("--out-dir", opts.out_dir, "artifact directory");

  std::string eval_checkpoint = "checkpoints/dacil_student.bin";
  std::string eval_report_out;
  int gradcheck_seeds = 3;
  bool ablations = false;

  auto* c_synth = app.add_subcommand("synth", "generate source/target/eval scene corpora");
  auto* c_gtdb = app.add_subcommand("gtdb", "build ground-truth object databases");
  auto* c_augment = app.add_subcommand("augment", "cross- and in-domain copy-paste corpora");
  auto* c_pretrain = app.add_subcommand("pretrain", "base training on source scenes");
  auto* c_finetune = app.add_subcommand("finetune", "sequential fine-tuning (in-domain, cross)");
  auto* c_train = app.add_subcommand("train", "dual-teacher incremental training");
  auto* c_baseline = app.add_subcommand("baseline", "supervised fine-tune forgetting baseline");
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on the eval split");
  c_eval->add_option("--checkpoint", eval_checkpoint,
                     "checkpoint path (relative to --out-dir)");
  c_eval->add_option("--report-out", eval_report_out, "also write the report to this path");
  auto* c_gradcheck = app.add_subcommand("grad-check", "finite-difference gradient check");
  c_gradcheck->add_option("--seeds", gradcheck_seeds, "number of seeds");
  auto* c_report = app.add_subcommand("report", "re-emit report.txt from saved checkpoints");
  auto* c_run = app.add_subcommand("run-experiment", "full pipeline, synth through report");
  c_run->add_flag("--ablations", ablations, "also run no-cross / no-in ablations");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(Stage::config);
  }
  opts.seed_set = seed_opt->count() > 0;
  opts.out_set = out_opt->count() > 0;

  if (c_gradcheck->parsed()) {
    return run_tagged(Stage::gradcheck,
                      [&] { cmd_gradcheck(opts.seed_set ? opts.seed : 1, gradcheck_seeds); });
  }

  ExperimentConfig cfg;
  try {
    cfg = load_experiment_config(opts);
  } catch (const StageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(e.stage());
  }

  if (c_synth->parsed()) return run_tagged(Stage::synth, [&] { cmd_synth(cfg); });
  if (c_gtdb->parsed()) return run_tagged(Stage::gtdb, [&] { cmd_gtdb(cfg); });
  if (c_augment->parsed()) return run_tagged(Stage::augment, [&] { cmd_augment(cfg); });
  if (c_pretrain->parsed()) return run_tagged(Stage::pretrain, [&] { cmd_pretrain(cfg); });
  if (c_finetune->parsed()) return run_tagged(Stage::finetune, [&] { cmd_finetune(cfg); });
  if (c_train->parsed()) return run_tagged(Stage::train, [&] { cmd_train(cfg); });
  if (c_baseline->parsed()) return run_tagged(Stage::baseline, [&] { cmd_baseline(cfg); });
  if (c_eval->parsed()) {
    return run_tagged(Stage::eval, [&] { cmd_eval(cfg, eval_checkpoint, eval_report_out); });
  }
  if (c_report->parsed()) return run_tagged(Stage::report, [&] { cmd_report(cfg); });
  if (c_run->parsed()) {
    cfg.run_ablations = cfg.run_ablations || ablations;
    return run_tagged(Stage::report, [&] { cmd_run_experiment(cfg); });
  }
  return static_cast<int>(Stage::config);
}
