#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "votelab/common.hpp"
#include "votelab/experiment.hpp"
#include "votelab/scene_io.hpp"
#include "votelab/synth.hpp"

using namespace votelab;

namespace {

std::filesystem::path temp_dir(const char* name) {
  const auto dir = std::filesystem::temp_directory_path() / "votelab_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << bytes;
}

double mean_box_volume(const std::vector<Scene>& scenes) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const Scene& s : scenes) {
    for (const BoundingBox3D& b : s.boxes) {
      sum += b.volume();
      ++n;
    }
  }
  REQUIRE(n > 0);
  return sum / static_cast<double>(n);
}

DomainSpec lean_spec(double size_multiplier) {
  DomainSpec spec = default_source_spec();
  spec.floor_points = 80;
  spec.clutter_points = 40;
  spec.size_multiplier = size_multiplier;
  return spec;
}

ExperimentConfig tiny_experiment(const std::filesystem::path& out) {
  ExperimentConfig cfg;
  cfg.seed = 5;
  cfg.num_source_scenes = 6;
  cfg.num_target_scenes = 6;
  cfg.num_eval_scenes = 3;
  cfg.save_artifacts = false;
  cfg.out_dir = out;
  for (DomainSpec* spec : {&cfg.source_spec, &cfg.target_spec}) {
    spec->floor_points = 60;
    spec->clutter_points = 20;
    spec->min_objects = 1;
    spec->max_objects = 2;
  }
  cfg.detector.num_seeds = 12;
  cfg.detector.knn = 6;
  cfg.detector.hidden = 8;
  cfg.detector.num_proposals = 3;
  cfg.train.epochs_base = 2;
  cfg.train.epochs_finetune_in = 1;
  cfg.train.epochs_finetune_cross = 1;
  cfg.train.epochs_dual = 1;
  cfg.train.epochs_baseline = 1;
  cfg.train.batch_size = 2;
  cfg.train.dual_in_target_per_batch = 2;
  return cfg;
}

}  // namespace

TEST_CASE("domain spec validation") {
  DomainSpec bad = default_source_spec();
  bad.classes.clear();
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = default_source_spec();
  bad.classes[0].size_spread = bad.classes[0].mean_size.x;  // spread >= mean
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = default_source_spec();
  bad.classes.push_back(bad.classes[0]);  // duplicate id
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = default_source_spec();
  bad.size_multiplier = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = default_source_spec();
  bad.min_objects = 3;
  bad.max_objects = 2;
  CHECK_THROWS_AS(bad.validate(), Error);
  default_source_spec().validate();
  default_target_spec().validate();
}

TEST_CASE("default specs encode the base/novel split") {
  const ClassPartition p = make_partition(default_target_spec());
  p.validate();
  CHECK(p.base_ids().size() == 3);
  CHECK(p.novel_ids().size() == 2);
  // The source domain trains on base classes only.
  for (const ClassSpec& c : default_source_spec().classes) CHECK(c.is_base);
}

TEST_CASE("synthesis is deterministic and collision-free") {
  const DomainSpec spec = lean_spec(1.0);
  const std::vector<Scene> a = synth_domain(spec, 10, Rng(7), 0);
  const std::vector<Scene> b = synth_domain(spec, 10, Rng(7), 0);
  REQUIRE(a.size() == 10);
  CHECK(a == b);
  CHECK(a[0].id == 0);
  CHECK(a[9].id == 9);
  CHECK(a[0].tag == DomainTag::source);

  for (const Scene& s : a) {
    CHECK(s.boxes.size() >= static_cast<std::size_t>(spec.min_objects));
    CHECK(s.boxes.size() <= static_cast<std::size_t>(spec.max_objects));
    CHECK(s.cloud.size() > s.boxes.size() * 10);
    for (std::size_t i = 0; i < s.boxes.size(); ++i) {
      for (std::size_t j = i + 1; j < s.boxes.size(); ++j) {
        CHECK(box_iou(s.boxes[i], s.boxes[j]) == 0.0);
      }
    }
  }

  const std::vector<Scene> offset = synth_domain(spec, 2, Rng(7), 50);
  CHECK(offset[0].id == 50);
}

TEST_CASE("zero spread gives exactly the requested box dimensions") {
  DomainSpec spec = lean_spec(1.0);
  spec.classes = {{0, "crate", PrimitiveKind::box_shell, {0.42, 0.42, 0.38}, 0.0, 150.0, true}};
  spec.min_objects = 1;
  spec.max_objects = 1;
  const std::vector<Scene> scenes = synth_domain(spec, 1, Rng(3), 0);
  REQUIRE(scenes[0].boxes.size() == 1);
  CHECK((scenes[0].boxes[0].size == Vec3{0.42, 0.42, 0.38}));
  CHECK(scenes[0].boxes[0].heading == 0.0);
  CHECK(scenes[0].boxes[0].center.z == doctest::Approx(0.19));
}

TEST_CASE("size multiplier shifts mean box volume accordingly") {
  // Roomy floor so enlarged objects always place within the retry budget.
  auto spec_with = [](double multiplier) {
    DomainSpec spec = lean_spec(multiplier);
    spec.floor_half_extent = 1.5;
    return spec;
  };
  const std::vector<Scene> s10 = synth_domain(spec_with(1.0), 200, Rng(55), 0);
  const std::vector<Scene> s115 = synth_domain(spec_with(1.15), 200, Rng(56), 0);
  const std::vector<Scene> s130 = synth_domain(spec_with(1.3), 200, Rng(57), 0);
  const double v10 = mean_box_volume(s10);
  const double v115 = mean_box_volume(s115);
  const double v130 = mean_box_volume(s130);

  // Empirical ratio tracks the cube of the multiplier.
  const double want = 1.3 * 1.3 * 1.3;
  CHECK(v130 / v10 == doctest::Approx(want).epsilon(0.10));
  // Monotone in the knob.
  CHECK(v10 < v115);
  CHECK(v115 < v130);
}

TEST_CASE("infeasible placement raises a generation error") {
  DomainSpec spec = lean_spec(1.0);
  spec.classes = {{0, "crate", PrimitiveKind::box_shell, {0.42, 0.42, 0.38}, 0.0, 150.0, true}};
  spec.floor_half_extent = 0.2;  // smaller than the crate footprint
  try {
    synth_domain(spec, 1, Rng(1), 0);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::generation);
  }
}

TEST_CASE("scene file round trip") {
  const auto dir = temp_dir("scene_io");
  const std::vector<Scene> scenes = synth_domain(lean_spec(1.0), 3, Rng(9), 7);

  SUBCASE("single scene, bit-exact bytes") {
    save_scene(scenes[0], dir / "one.bin");
    const Scene back = load_scene(dir / "one.bin");
    CHECK(back == scenes[0]);
    save_scene(back, dir / "two.bin");
    CHECK(slurp(dir / "one.bin") == slurp(dir / "two.bin"));
  }

  SUBCASE("empty scene") {
    Scene empty;
    empty.id = 3;
    empty.tag = DomainTag::in_target;
    save_scene(empty, dir / "empty.bin");
    CHECK(load_scene(dir / "empty.bin") == empty);
  }

  SUBCASE("directory save and sorted load") {
    const auto paths = save_scenes(scenes, dir / "corpus");
    REQUIRE(paths.size() == 3);
    CHECK(paths[0].filename() == "scene_00000.bin");
    const std::vector<Scene> back = load_scenes(dir / "corpus");
    CHECK(back == scenes);
    CHECK_THROWS_AS(load_scenes(dir / "absent"), Error);
  }

  SUBCASE("corruption") {
    save_scene(scenes[0], dir / "base.bin");
    const std::string bytes = slurp(dir / "base.bin");

    std::string magic = bytes;
    magic[0] = 'Q';
    spit(dir / "magic.bin", magic);
    try {
      load_scene(dir / "magic.bin");
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::corrupt_file);
    }

    std::string version = bytes;
    version[4] = 7;  // version follows the 4-byte magic
    spit(dir / "version.bin", version);
    try {
      load_scene(dir / "version.bin");
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::version_mismatch);
    }

    spit(dir / "short.bin", bytes.substr(0, bytes.size() / 3));
    try {
      load_scene(dir / "short.bin");
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::corrupt_file);
    }
  }
}

TEST_CASE("config parsing") {
  const auto dir = temp_dir("config");

  SUBCASE("file format") {
    {
      std::ofstream f(dir / "good.cfg");
      f << "# a comment\n";
      f << "train.lr = 0.005\n";
      f << "  experiment.seed=9   # trailing comment\n";
      f << "\n";
      f << "detector.hidden = 24\n";
    }
    const Config c = Config::from_file(dir / "good.cfg");
    CHECK(c.get_double("train.lr", 0.0) == 0.005);
    CHECK(c.get_u64("experiment.seed", 0) == 9);
    CHECK(c.get_int("detector.hidden", 0) == 24);
    CHECK(c.get_int("absent.key", 77) == 77);
    CHECK(c.unused().empty());

    {
      std::ofstream f(dir / "bad.cfg");
      f << "this line has no equals sign\n";
    }
    CHECK_THROWS_AS(Config::from_file(dir / "bad.cfg"), Error);
    CHECK_THROWS_AS(Config::from_file(dir / "missing.cfg"), Error);
  }

  SUBCASE("typed getter failures") {
    Config c;
    c.set("k", "12abc");
    CHECK_THROWS_AS(c.get_int("k", 0), Error);
    c.set("k", "not_a_number");
    CHECK_THROWS_AS(c.get_double("k", 0.0), Error);
    c.set("k", "maybe");
    CHECK_THROWS_AS(c.get_bool("k", false), Error);
    c.set("k", "on");
    CHECK(c.get_bool("k", false));
    c.set("k", "0");
    CHECK_FALSE(c.get_bool("k", true));
  }

  SUBCASE("environment overrides") {
    setenv("VOTELAB_TRAIN_LR", "0.5", 1);
    setenv("VOTELAB_EXPERIMENT_NUM_EVAL_SCENES", "4", 1);
    Config c;
    c.set("train.lr", "0.001");
    c.apply_env_overrides();
    unsetenv("VOTELAB_TRAIN_LR");
    unsetenv("VOTELAB_EXPERIMENT_NUM_EVAL_SCENES");
    CHECK(c.get_double("train.lr", 0.0) == 0.5);
    CHECK(c.get_int("experiment.num_eval_scenes", 0) == 4);
  }

  SUBCASE("unused keys are reported") {
    Config c;
    c.set("train.lr", "0.001");
    c.set("train.typo_key", "1");
    CHECK(c.get_double("train.lr", 0.0) == 0.001);
    const auto leftover = c.unused();
    REQUIRE(leftover.size() == 1);
    CHECK(leftover.count("train.typo_key") == 1);
  }
}

TEST_CASE("apply_config maps keys onto the experiment config") {
  Config c;
  c.set("experiment.seed", "11");
  c.set("experiment.num_source_scenes", "8");
  c.set("experiment.eval_iou", "0.5");
  c.set("detector.hidden", "24");
  c.set("paste.scale_max", "1.2");
  c.set("train.lr", "0.002");
  c.set("train.lambda_con", "5");
  c.set("train.lr_decay_epochs", "2,4");
  c.set("synth.floor_points", "90");
  c.set("synth.target_size_multiplier", "1.4");

  ExperimentConfig cfg;
  apply_config(c, cfg);
  CHECK(cfg.seed == 11);
  CHECK(cfg.num_source_scenes == 8);
  CHECK(cfg.eval_iou == 0.5);
  CHECK(cfg.detector.hidden == 24);
  CHECK(cfg.paste.scale_max == 1.2);
  CHECK(cfg.train.lr == 0.002);
  CHECK(cfg.train.weights.lambda_con == 5.0);
  CHECK((cfg.train.lr_decay_epochs == std::vector<int>{2, 4}));
  CHECK(cfg.source_spec.floor_points == 90);
  CHECK(cfg.target_spec.floor_points == 90);
  CHECK(cfg.source_spec.size_multiplier == 1.0);
  CHECK(cfg.target_spec.size_multiplier == 1.4);

  Config unknown;
  unknown.set("experiment.seeed", "1");
  ExperimentConfig cfg2;
  CHECK_THROWS_AS(apply_config(unknown, cfg2), Error);
}

TEST_CASE("stage names and exit codes") {
  CHECK(static_cast<int>(Stage::config) == 2);
  CHECK(static_cast<int>(Stage::synth) == 3);
  CHECK(static_cast<int>(Stage::report) == 12);
  CHECK(std::string(stage_name(Stage::gradcheck)) == "gradcheck");
  CHECK(std::string(stage_name(Stage::augment)) == "augment");
  const StageError err(Stage::train, "boom");
  CHECK(err.stage() == Stage::train);
  CHECK(std::string(err.what()).find("boom") != std::string::npos);
}

TEST_CASE("experiment smoke run") {
  const auto dir_a = temp_dir("exp_a");
  const auto dir_b = temp_dir("exp_b");

  const ExperimentConfig cfg_a = tiny_experiment(dir_a);
  const ExperimentResult res = run_experiment(cfg_a);

  for (const VariantMetrics* v : {&res.finetuned, &res.baseline, &res.dacil}) {
    CHECK(v->map_base >= 0.0);
    CHECK(v->map_base <= 1.0);
    CHECK(v->map_novel >= 0.0);
    CHECK(v->map_novel <= 1.0);
    CHECK(v->report.num_gt > 0);
  }
  CHECK_FALSE(res.ablation_no_cross.has_value());

  const std::string report = slurp(dir_a / "report.txt");
  for (const char* token :
       {"[finetuned]", "[baseline]", "[dacil]", "[comparison]", "map.base", "map.novel",
        "map.all", "seed 5"}) {
    INFO("missing token: ", token);
    CHECK(report.find(token) != std::string::npos);
  }
  const std::string curves = slurp(dir_a / "loss_curves.csv");
  CHECK(curves.rfind("stage,epoch,l_sup,l_dis,l_con,l_total,lr", 0) == 0);
  CHECK(curves.find("pretrain") != std::string::npos);
  CHECK(curves.find("dual") != std::string::npos);
  const std::string pr = slurp(dir_a / "pr_curves.csv");
  CHECK(pr.rfind("method,class,rank,recall,precision", 0) == 0);

  // No artifact directories when save_artifacts is off.
  CHECK_FALSE(std::filesystem::exists(dir_a / "checkpoints"));
  CHECK_FALSE(std::filesystem::exists(dir_a / "scenes"));

  // Same seed, fresh directory: byte-identical outputs.
  ExperimentConfig cfg_b = tiny_experiment(dir_b);
  run_experiment(cfg_b);
  CHECK(slurp(dir_b / "report.txt") == report);
  CHECK(slurp(dir_b / "loss_curves.csv") == curves);
  CHECK(slurp(dir_b / "pr_curves.csv") == pr);
}

TEST_CASE("experiment config failures carry the config stage") {
  ExperimentConfig cfg = tiny_experiment(temp_dir("exp_bad"));
  cfg.num_eval_scenes = 0;
  try {
    run_experiment(cfg);
    CHECK(false);
  } catch (const StageError& e) {
    CHECK(e.stage() == Stage::config);
  }
}

TEST_CASE("artifacts are written when requested") {
  const auto dir = temp_dir("exp_artifacts");
  ExperimentConfig cfg = tiny_experiment(dir);
  cfg.save_artifacts = true;
  run_experiment(cfg);
  CHECK(std::filesystem::exists(dir / "checkpoints" / "pretrained.bin"));
  CHECK(std::filesystem::exists(dir / "checkpoints" / "dacil_student.bin"));
  CHECK(std::filesystem::exists(dir / "checkpoints" / "baseline.bin"));
  CHECK(std::filesystem::exists(dir / "scenes" / "eval"));
  CHECK(std::filesystem::exists(dir / "gtdb" / "source" / "index.txt"));
  CHECK(std::filesystem::exists(dir / "aug" / "cross"));
  CHECK(std::filesystem::exists(dir / "classes.txt"));

  // Saved checkpoints load and carry the tiny detector shape.
  const DetectorState student = load_checkpoint(dir / "checkpoints" / "dacil_student.bin");
  CHECK(student.config.hidden == cfg.detector.hidden);
  const std::vector<Scene> eval_scenes = load_scenes(dir / "scenes" / "eval");
  CHECK(eval_scenes.size() == cfg.num_eval_scenes);
}
