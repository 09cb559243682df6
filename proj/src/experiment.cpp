#include "votelab/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "votelab/common.hpp"
#include "votelab/scene_io.hpp"

namespace votelab {
namespace {

using Clock = std::chrono::steady_clock;

// Wraps one pipeline stage: failures become StageError, wall time goes
// to stdout (never into any artifact, which must stay byte-deterministic).
template <typename Fn>
auto run_stage(Stage stage, Fn&& fn) {
  const auto t0 = Clock::now();
  try {
    auto result = fn();
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    std::printf("[stage] %-10s %6.2fs\n", stage_name(stage), secs);
    std::fflush(stdout);
    return result;
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::vector<Scene> filter_classes(const std::vector<Scene>& scenes, const std::set<int>& keep) {
  std::vector<Scene> out = scenes;
  for (Scene& s : out) {
    std::vector<BoundingBox3D> kept;
    for (const BoundingBox3D& b : s.boxes) {
      if (keep.count(b.class_id) != 0) kept.push_back(b);
    }
    s.boxes = std::move(kept);
  }
  return out;
}

struct Corpora {
  std::vector<Scene> source, target, eval_scenes;
  std::vector<Scene> x_cross, x_in_source, x_in_target;
  std::vector<Scene> raw_target_novel;
  std::vector<TransformRecord> rec_cross, rec_in_source, rec_in_target;
};

struct Evaluated {
  VariantMetrics metrics;
  std::vector<Detection> detections;
};

Evaluated eval_variant(DetectorState& state, const std::vector<Scene>& eval_scenes,
                       const ClassPartition& partition, double iou) {
  Evaluated out;
  out.detections = detect_all(state, eval_scenes);
  out.metrics.report = evaluate(out.detections, eval_scenes, partition, iou);
  out.metrics.map_base = out.metrics.report.map_base;
  out.metrics.map_novel = out.metrics.report.map_novel;
  out.metrics.map_all = out.metrics.report.map_all;
  return out;
}

void append_pr_rows(std::string& csv, const std::string& method,
                    const std::vector<Detection>& detections,
                    const std::vector<Scene>& eval_scenes, const ClassPartition& partition,
                    double iou) {
  for (const ClassInfo& cls : partition.classes) {
    std::vector<Detection> dets;
    for (const Detection& d : detections) {
      if (d.class_id == cls.id) dets.push_back(d);
    }
    std::vector<GtBox> gts;
    for (const Scene& s : eval_scenes) {
      for (const BoundingBox3D& b : s.boxes) {
        if (b.class_id == cls.id) gts.push_back({s.id, b});
      }
    }
    if (gts.empty() || dets.empty()) continue;
    const std::vector<bool> flags = match_detections(dets, gts, iou);
    std::size_t tp = 0;
    for (std::size_t i = 0; i < flags.size(); ++i) {
      if (flags[i]) ++tp;
      const double recall = static_cast<double>(tp) / static_cast<double>(gts.size());
      const double precision = static_cast<double>(tp) / static_cast<double>(i + 1);
      csv += method + ',' + cls.name + ',' + std::to_string(i + 1) + ',' + fmt6(recall) +
             ',' + fmt6(precision) + '\n';
    }
  }
}

struct VariantOutput {
  DetectorState finetuned;
  DualResult dual;
  StageLog log;
};

VariantOutput run_incremental(const DetectorState& pretrained,
                              const std::vector<Scene>& ft_in_domain,
                              const std::vector<Scene>& ft_cross,
                              const std::vector<Scene>& dual_in_target,
                              const std::vector<Scene>& dual_cross,
                              const std::vector<int>& base_ids, const TrainConfig& tcfg) {
  VariantOutput out;
  out.finetuned = run_stage(Stage::finetune, [&] {
    return finetune_sequential(pretrained, ft_in_domain, ft_cross, tcfg, &out.log);
  });
  out.dual = run_stage(Stage::train, [&] {
    return train_dual_teacher(out.finetuned, dual_in_target, dual_cross, base_ids, tcfg,
                              &out.log);
  });
  return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& body) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write: " + path.string());
  out << body;
  out.flush();
  if (!out) fail(ErrorKind::io, "write failed: " + path.string());
}

void save_records(const std::vector<TransformRecord>& recs, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  char name[32];
  for (std::size_t i = 0; i < recs.size(); ++i) {
    std::snprintf(name, sizeof(name), "record_%05zu.json", i);
    save_record(recs[i], dir / name);
  }
}

}  // namespace

const char* stage_name(Stage stage) {
  switch (stage) {
    case Stage::config: return "config";
    case Stage::synth: return "synth";
    case Stage::gtdb: return "gtdb";
    case Stage::augment: return "augment";
    case Stage::pretrain: return "pretrain";
    case Stage::finetune: return "finetune";
    case Stage::train: return "train";
    case Stage::baseline: return "baseline";
    case Stage::eval: return "eval";
    case Stage::gradcheck: return "gradcheck";
    case Stage::report: return "report";
  }
  return "unknown";
}

void ExperimentConfig::validate() const {
  if (num_source_scenes == 0 || num_target_scenes == 0 || num_eval_scenes == 0) {
    fail(ErrorKind::config, "experiment: scene counts must be positive");
  }
  if (!(eval_iou > 0.0 && eval_iou <= 1.0)) {
    fail(ErrorKind::config, "experiment: eval_iou must be in (0, 1]");
  }
  if (gtdb_min_points < 1) fail(ErrorKind::config, "experiment: gtdb_min_points must be >= 1");
  if (out_dir.empty()) fail(ErrorKind::config, "experiment: out_dir is empty");
  source_spec.validate();
  target_spec.validate();
  paste.validate();
  detector.validate();
  train.validate();

  bool any_base = false, any_novel = false;
  for (const ClassSpec& c : target_spec.classes) {
    (c.is_base ? any_base : any_novel) = true;
    if (c.id >= detector.num_classes) {
      fail(ErrorKind::config, "experiment: class id exceeds detector.num_classes");
    }
  }
  if (!any_base || !any_novel) {
    fail(ErrorKind::config, "experiment: target domain needs base and novel classes");
  }
  for (const ClassSpec& c : source_spec.classes) {
    const auto it =
        std::find_if(target_spec.classes.begin(), target_spec.classes.end(),
                     [&](const ClassSpec& t) { return t.id == c.id && t.name == c.name; });
    if (it == target_spec.classes.end()) {
      fail(ErrorKind::config, "experiment: source class missing from target class list");
    }
  }
}

void apply_config(const Config& c, ExperimentConfig& cfg) {
  cfg.seed = c.get_u64("experiment.seed", cfg.seed);
  cfg.num_source_scenes = static_cast<std::size_t>(
      c.get_int("experiment.num_source_scenes", static_cast<int>(cfg.num_source_scenes)));
  cfg.num_target_scenes = static_cast<std::size_t>(
      c.get_int("experiment.num_target_scenes", static_cast<int>(cfg.num_target_scenes)));
  cfg.num_eval_scenes = static_cast<std::size_t>(
      c.get_int("experiment.num_eval_scenes", static_cast<int>(cfg.num_eval_scenes)));
  cfg.eval_iou = c.get_double("experiment.eval_iou", cfg.eval_iou);
  cfg.gtdb_min_points = c.get_int("experiment.gtdb_min_points", cfg.gtdb_min_points);
  cfg.run_ablations = c.get_bool("experiment.run_ablations", cfg.run_ablations);
  cfg.save_artifacts = c.get_bool("experiment.save_artifacts", cfg.save_artifacts);
  cfg.out_dir = c.get_string("experiment.out_dir", cfg.out_dir.string());

  DetectorConfig& d = cfg.detector;
  d.num_seeds = c.get_int("detector.num_seeds", d.num_seeds);
  d.knn = c.get_int("detector.knn", d.knn);
  d.hidden = c.get_int("detector.hidden", d.hidden);
  d.num_proposals = c.get_int("detector.num_proposals", d.num_proposals);
  d.radius = c.get_double("detector.radius", d.radius);
  d.num_classes = c.get_int("detector.num_classes", d.num_classes);
  d.bn_momentum = c.get_double("detector.bn_momentum", d.bn_momentum);
  d.bn_eps = c.get_double("detector.bn_eps", d.bn_eps);

  PasteConfig& p = cfg.paste;
  p.n_objects_min = c.get_int("paste.n_objects_min", p.n_objects_min);
  p.n_objects_max = c.get_int("paste.n_objects_max", p.n_objects_max);
  p.scale_min = c.get_double("paste.scale_min", p.scale_min);
  p.scale_max = c.get_double("paste.scale_max", p.scale_max);
  p.rot_range = c.get_double("paste.rot_range", p.rot_range);
  p.max_rejections = c.get_int("paste.max_rejections", p.max_rejections);
  p.remove_occluded = c.get_bool("paste.remove_occluded", p.remove_occluded);

  TrainConfig& t = cfg.train;
  t.epochs_base = c.get_int("train.epochs_base", t.epochs_base);
  t.epochs_finetune_in = c.get_int("train.epochs_finetune_in", t.epochs_finetune_in);
  t.epochs_finetune_cross = c.get_int("train.epochs_finetune_cross", t.epochs_finetune_cross);
  t.epochs_dual = c.get_int("train.epochs_dual", t.epochs_dual);
  t.epochs_baseline = c.get_int("train.epochs_baseline", t.epochs_baseline);
  t.batch_size = c.get_int("train.batch_size", t.batch_size);
  t.dual_in_target_per_batch =
      c.get_int("train.dual_in_target_per_batch", t.dual_in_target_per_batch);
  t.dual_cross_per_batch = c.get_int("train.dual_cross_per_batch", t.dual_cross_per_batch);
  t.lr = c.get_double("train.lr", t.lr);
  t.lr_decay_factor = c.get_double("train.lr_decay_factor", t.lr_decay_factor);
  t.ema_alpha = c.get_double("train.ema_alpha", t.ema_alpha);
  t.pseudo_threshold = c.get_double("train.pseudo_threshold", t.pseudo_threshold);
  t.assignment_radius = c.get_double("train.assignment_radius", t.assignment_radius);
  t.flip_prob = c.get_double("train.flip_prob", t.flip_prob);
  t.rot_range = c.get_double("train.rot_range", t.rot_range);
  t.scale_min = c.get_double("train.scale_min", t.scale_min);
  t.scale_max = c.get_double("train.scale_max", t.scale_max);
  t.weights.lambda_sup = c.get_double("train.lambda_sup", t.weights.lambda_sup);
  t.weights.lambda_dis = c.get_double("train.lambda_dis", t.weights.lambda_dis);
  t.weights.lambda_con = c.get_double("train.lambda_con", t.weights.lambda_con);
  t.weights.lambda_class = c.get_double("train.lambda_class", t.weights.lambda_class);
  t.weights.lambda_size = c.get_double("train.lambda_size", t.weights.lambda_size);
  if (c.has("train.lr_decay_epochs")) {
    const std::string raw = c.get_string("train.lr_decay_epochs", "");
    std::vector<int> epochs;
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      try {
        epochs.push_back(std::stoi(item));
      } catch (const std::exception&) {
        fail(ErrorKind::config, "train.lr_decay_epochs: not an integer list: " + raw);
      }
    }
    t.lr_decay_epochs = std::move(epochs);
  }

  auto both = [&](auto setter) {
    setter(cfg.source_spec);
    setter(cfg.target_spec);
  };
  both([&](DomainSpec& s) {
    s.floor_half_extent = c.get_double("synth.floor_half_extent", s.floor_half_extent);
    s.floor_points = c.get_int("synth.floor_points", s.floor_points);
    s.clutter_points = c.get_int("synth.clutter_points", s.clutter_points);
    s.clutter_height = c.get_double("synth.clutter_height", s.clutter_height);
    s.min_objects = c.get_int("synth.min_objects", s.min_objects);
    s.max_objects = c.get_int("synth.max_objects", s.max_objects);
    s.noise_sigma = c.get_double("synth.noise_sigma", s.noise_sigma);
  });
  cfg.source_spec.size_multiplier =
      c.get_double("synth.source_size_multiplier", cfg.source_spec.size_multiplier);
  cfg.source_spec.density_multiplier =
      c.get_double("synth.source_density_multiplier", cfg.source_spec.density_multiplier);
  cfg.target_spec.size_multiplier =
      c.get_double("synth.target_size_multiplier", cfg.target_spec.size_multiplier);
  cfg.target_spec.density_multiplier =
      c.get_double("synth.target_density_multiplier", cfg.target_spec.density_multiplier);

  const auto leftover = c.unused();
  if (!leftover.empty()) {
    std::string keys;
    for (const auto& [key, value] : leftover) {
      if (!keys.empty()) keys += ", ";
      keys += key;
    }
    fail(ErrorKind::config, "unknown config keys: " + keys);
  }
}

std::string format_report(const ExperimentConfig& cfg, const ExperimentResult& result,
                          const ClassPartition& partition) {
  std::string out;
  out += "votelab experiment report\n";
  out += "seed " + std::to_string(cfg.seed) + '\n';
  out += "scenes.source " + std::to_string(cfg.num_source_scenes) + '\n';
  out += "scenes.target " + std::to_string(cfg.num_target_scenes) + '\n';
  out += "scenes.eval " + std::to_string(cfg.num_eval_scenes) + '\n';

  auto block = [&](const std::string& name, const VariantMetrics& m) {
    out += "\n[" + name + "]\n";
    out += format_eval_report(m.report, partition);
  };
  block("finetuned", result.finetuned);
  block("baseline", result.baseline);
  block("dacil", result.dacil);
  if (result.ablation_no_cross) block("ablation.no_cross", *result.ablation_no_cross);
  if (result.ablation_no_in) block("ablation.no_in", *result.ablation_no_in);

  out += "\n[comparison]\n";
  const double ft_base = result.finetuned.map_base;
  const double drop =
      ft_base > 0.0 ? (ft_base - result.baseline.map_base) / ft_base * 100.0 : 0.0;
  out += "baseline.base_drop_pct " + fmt6(drop) + '\n';
  out += "dacil.base_gain " + fmt6(result.dacil.map_base - result.baseline.map_base) + '\n';
  out += "dacil.novel_gap " + fmt6(result.dacil.map_novel - result.baseline.map_novel) + '\n';
  out += "dacil.all_gain " + fmt6(result.dacil.map_all - result.baseline.map_all) + '\n';
  return out;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw StageError(Stage::config, e.what());
  }

  const ClassPartition partition = make_partition(cfg.target_spec);
  const std::vector<int> base_ids = partition.base_ids();
  const std::vector<int> novel_ids = partition.novel_ids();
  const std::set<int> base_set(base_ids.begin(), base_ids.end());
  const std::set<int> novel_set(novel_ids.begin(), novel_ids.end());

  const Rng master(cfg.seed);
  TrainConfig tcfg = cfg.train;
  tcfg.seed = cfg.seed;

  Corpora corp;
  run_stage(Stage::synth, [&] {
    corp.source = synth_domain(cfg.source_spec, cfg.num_source_scenes,
                               master.fork("synth_source"), 0);
    corp.target = synth_domain(cfg.target_spec, cfg.num_target_scenes,
                               master.fork("synth_target"), 10000);
    corp.eval_scenes = synth_domain(cfg.target_spec, cfg.num_eval_scenes,
                                    master.fork("synth_eval"), 20000);
    return 0;
  });

  GtDatabase source_db, target_db;
  run_stage(Stage::gtdb, [&] {
    source_db = build_database(corp.source, base_set, cfg.gtdb_min_points);
    target_db = build_database(corp.target, novel_set, cfg.gtdb_min_points);
    return 0;
  });

  run_stage(Stage::augment, [&] {
    const Rng cross_rng = master.fork("augment_cross");
    const Rng in_src_rng = master.fork("augment_in_source");
    const Rng in_tgt_rng = master.fork("augment_in_target");
    for (std::size_t i = 0; i < corp.target.size(); ++i) {
      Rng r = cross_rng.fork(static_cast<std::uint64_t>(i));
      auto [scene, rec] = cross_domain_cp(corp.target[i], source_db, cfg.paste, r);
      // Target labels are unavailable for training in the incremental
      // setting: the intermediate domain keeps only the pasted base boxes.
      scene.boxes.erase(scene.boxes.begin(),
                        scene.boxes.begin() +
                            static_cast<std::ptrdiff_t>(corp.target[i].boxes.size()));
      corp.x_cross.push_back(std::move(scene));
      corp.rec_cross.push_back(std::move(rec));
    }
    for (std::size_t i = 0; i < corp.source.size(); ++i) {
      Rng r = in_src_rng.fork(static_cast<std::uint64_t>(i));
      auto [scene, rec] = in_domain_cp(corp.source[i], source_db, cfg.paste, r);
      corp.x_in_source.push_back(std::move(scene));
      corp.rec_in_source.push_back(std::move(rec));
    }
    for (std::size_t i = 0; i < corp.target.size(); ++i) {
      Rng r = in_tgt_rng.fork(static_cast<std::uint64_t>(i));
      auto [scene, rec] = in_domain_cp(corp.target[i], target_db, cfg.paste, r);
      // Same setting: drop unavailable base labels, keep novel gt + pastes.
      std::vector<BoundingBox3D> kept;
      for (const BoundingBox3D& b : scene.boxes) {
        if (novel_set.count(b.class_id) != 0) kept.push_back(b);
      }
      scene.boxes = std::move(kept);
      corp.x_in_target.push_back(std::move(scene));
      corp.rec_in_target.push_back(std::move(rec));
    }
    corp.raw_target_novel = filter_classes(corp.target, novel_set);
    return 0;
  });

  StageLog full_log;
  DetectorState pretrained = run_stage(Stage::pretrain, [&] {
    return pretrain_base(corp.source, cfg.detector, tcfg, &full_log);
  });

  VariantOutput main_var = run_incremental(pretrained, corp.x_in_source, corp.x_cross,
                                           corp.x_in_target, corp.x_cross, base_ids, tcfg);
  for (const EpochMetrics& m : main_var.log) full_log.push_back(m);

  DetectorState baseline_state = run_stage(Stage::baseline, [&] {
    return finetune_baseline(main_var.finetuned, corp.x_in_target, tcfg, &full_log);
  });

  ExperimentResult result;
  Evaluated ev_ft, ev_bl, ev_da;
  run_stage(Stage::eval, [&] {
    ev_ft = eval_variant(main_var.finetuned, corp.eval_scenes, partition, cfg.eval_iou);
    ev_bl = eval_variant(baseline_state, corp.eval_scenes, partition, cfg.eval_iou);
    ev_da = eval_variant(main_var.dual.student, corp.eval_scenes, partition, cfg.eval_iou);
    result.finetuned = ev_ft.metrics;
    result.baseline = ev_bl.metrics;
    result.dacil = ev_da.metrics;
    return 0;
  });

  VariantOutput no_cross_var, no_in_var;
  if (cfg.run_ablations) {
    no_cross_var = run_incremental(pretrained, corp.x_in_source, corp.x_in_source,
                                   corp.x_in_target, corp.x_in_source, base_ids, tcfg);
    for (EpochMetrics m : no_cross_var.log) {
      m.stage = "no_cross." + m.stage;
      full_log.push_back(std::move(m));
    }
    no_in_var = run_incremental(pretrained, corp.source, corp.x_cross,
                                corp.raw_target_novel, corp.x_cross, base_ids, tcfg);
    for (EpochMetrics m : no_in_var.log) {
      m.stage = "no_in." + m.stage;
      full_log.push_back(std::move(m));
    }
    run_stage(Stage::eval, [&] {
      result.ablation_no_cross =
          eval_variant(no_cross_var.dual.student, corp.eval_scenes, partition, cfg.eval_iou)
              .metrics;
      result.ablation_no_in =
          eval_variant(no_in_var.dual.student, corp.eval_scenes, partition, cfg.eval_iou)
              .metrics;
      return 0;
    });
  }

  run_stage(Stage::report, [&] {
    std::filesystem::create_directories(cfg.out_dir);
    write_text_file(cfg.out_dir / "report.txt", format_report(cfg, result, partition));
    save_classes(partition, cfg.out_dir / "classes.txt");

    std::string loss_csv = "stage,epoch,l_sup,l_dis,l_con,l_total,lr\n";
    for (const EpochMetrics& m : full_log) {
      loss_csv += m.stage + ',' + std::to_string(m.epoch) + ',' + fmt6(m.l_sup) + ',' +
                  fmt6(m.l_dis) + ',' + fmt6(m.l_con) + ',' + fmt6(m.l_total) + ',' +
                  fmt6(m.lr) + '\n';
    }
    write_text_file(cfg.out_dir / "loss_curves.csv", loss_csv);

    std::string pr_csv = "method,class,rank,recall,precision\n";
    append_pr_rows(pr_csv, "finetuned", ev_ft.detections, corp.eval_scenes, partition,
                   cfg.eval_iou);
    append_pr_rows(pr_csv, "baseline", ev_bl.detections, corp.eval_scenes, partition,
                   cfg.eval_iou);
    append_pr_rows(pr_csv, "dacil", ev_da.detections, corp.eval_scenes, partition,
                   cfg.eval_iou);
    write_text_file(cfg.out_dir / "pr_curves.csv", pr_csv);

    if (cfg.save_artifacts) {
      save_scenes(corp.source, cfg.out_dir / "scenes" / "source");
      save_scenes(corp.target, cfg.out_dir / "scenes" / "target");
      save_scenes(corp.eval_scenes, cfg.out_dir / "scenes" / "eval");
      save_database(source_db, cfg.out_dir / "gtdb" / "source");
      save_database(target_db, cfg.out_dir / "gtdb" / "target");
      save_scenes(corp.x_cross, cfg.out_dir / "aug" / "cross");
      save_scenes(corp.x_in_source, cfg.out_dir / "aug" / "in_source");
      save_scenes(corp.x_in_target, cfg.out_dir / "aug" / "in_target");
      save_records(corp.rec_cross, cfg.out_dir / "aug" / "cross");
      save_records(corp.rec_in_source, cfg.out_dir / "aug" / "in_source");
      save_records(corp.rec_in_target, cfg.out_dir / "aug" / "in_target");
      const auto ck = cfg.out_dir / "checkpoints";
      save_checkpoint(pretrained, ck / "pretrained.bin");
      save_checkpoint(main_var.finetuned, ck / "finetuned.bin");
      save_checkpoint(baseline_state, ck / "baseline.bin");
      save_checkpoint(main_var.dual.student, ck / "dacil_student.bin");
      save_checkpoint(main_var.dual.in_teacher, ck / "dacil_in_teacher.bin");
      save_checkpoint(main_var.dual.cross_teacher, ck / "cross_teacher.bin");
    }
    return 0;
  });

  return result;
}

}  // namespace votelab
