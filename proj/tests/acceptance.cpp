// Acceptance gate: one [PASS]/[FAIL] line per criterion, nonzero exit when
// any criterion fails. Every tolerance is pinned here, next to its check.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "oracles.hpp"
#include "votelab/common.hpp"
#include "votelab/experiment.hpp"
#include "votelab/gradcheck.hpp"
#include "votelab/scene_io.hpp"

using namespace votelab;
namespace fs = std::filesystem;

namespace {

// ----- pinned tolerances and workloads -----
constexpr int kGradSeeds = 3;
constexpr double kDetectorGradTol = 1e-4;   // relative, eps = 1e-3
constexpr double kLossGradTol = 1e-6;
constexpr double kGradBudgetSeconds = 60.0;
constexpr int kKlPairs = 1000;
constexpr std::size_t kPairSizeMax = 16;
constexpr int kMapFixtures = 30;            // <= 5 scenes, <= 10 detections each
constexpr double kMapOracleTol = 1e-12;
constexpr int kIouPairs = 25;
constexpr std::size_t kIouMcSamples = 200000;
constexpr double kIouMcTol = 0.02;          // absolute
constexpr std::size_t kAugScenes = 200;
constexpr int kRunSeeds = 3;
constexpr double kForgetDropMin = 0.50;     // relative base-mAP drop
constexpr double kDacilBaseGainMin = 0.20;  // >= 20 absolute mAP points
constexpr double kDacilNovelSlack = 0.10;   // within 10 absolute points
constexpr double kAblationBand = 0.01;      // 1-point non-strict tolerance
constexpr double kRunBudgetSeconds = 600.0;

using Clock = std::chrono::steady_clock;

double secs_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

int g_failed = 0;

void criterion(int id, const char* label,
               const std::function<std::pair<bool, std::string>()>& body) {
  bool ok = false;
  std::string detail;
  try {
    std::tie(ok, detail) = body();
  } catch (const std::exception& e) {
    ok = false;
    detail = std::string("exception: ") + e.what();
  }
  std::printf("[%s] criterion %d: %s%s%s\n", ok ? "PASS" : "FAIL", id, label,
              detail.empty() ? "" : " -- ", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failed;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "acceptance: cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ----- criterion 1: gradients -----
std::pair<bool, std::string> check_gradients() {
  const auto t0 = Clock::now();
  const std::vector<GradCheckResult> results = run_gradcheck(kGradSeeds, 101);
  const double secs = secs_since(t0);
  double worst_detector = 0.0, worst_loss = 0.0;
  bool all_pass = true;
  for (const GradCheckResult& r : results) {
    worst_detector = std::max(worst_detector, r.max_rel_detector);
    worst_loss = std::max(worst_loss, r.max_rel_loss);
    all_pass = all_pass && r.pass;
  }
  const bool ok = all_pass && worst_detector < kDetectorGradTol && worst_loss < kLossGradTol &&
                  secs < kGradBudgetSeconds;
  return {ok, "max rel detector " + num(worst_detector) + ", loss " + num(worst_loss) + ", " +
                  num(secs) + " s over " + std::to_string(kGradSeeds) + " seeds"};
}

// ----- criterion 2: loss identities -----
std::pair<bool, std::string> check_loss_identities() {
  Rng rng(42);
  bool ok = true;
  std::string detail;

  // Coincident student/teacher: every consistency term and the distillation
  // loss must be exactly zero.
  const std::vector<Proposal> props = oracles::random_proposals(6, 5, rng);
  const std::vector<Proposal> teacher = props;
  const PairSet pair_m = pair_proposals(props, teacher, PairSet::Direction::teacher_to_student);
  const double lc = center_loss(props, teacher);
  const double lk = class_kl_loss(props, teacher, pair_m);
  const double ls = size_consistency_loss(props, teacher, pair_m);
  const double ld = distillation_loss(props, teacher, {0, 1, 2});
  if (lc != 0.0 || lk != 0.0 || ls != 0.0 || ld != 0.0) {
    ok = false;
    detail += "coincidence losses nonzero; ";
  }

  double min_kl = 0.0;
  for (int i = 0; i < kKlPairs; ++i) {
    const std::vector<Proposal> s = oracles::random_proposals(1, 5, rng);
    const std::vector<Proposal> t = oracles::random_proposals(1, 5, rng);
    const PairSet p = pair_proposals(s, t, PairSet::Direction::teacher_to_student);
    min_kl = std::min(min_kl, class_kl_loss(s, t, p));
  }
  if (min_kl < 0.0) {
    ok = false;
    detail += "KL went negative; ";
  }

  // total_loss is linear in the lambdas, exactly: it must equal the weighted
  // sum evaluated in the same operation order, and scaling every lambda by a
  // power of two must scale the total by the same factor bit-exactly.
  for (int i = 0; i < 200 && ok; ++i) {
    const double sup = rng.uniform(0.0, 5.0);
    const double dis = rng.uniform(0.0, 5.0);
    const double con = rng.uniform(0.0, 5.0);
    LossWeights w;
    w.lambda_sup = rng.uniform(0.0, 4.0);
    w.lambda_dis = rng.uniform(0.0, 4.0);
    w.lambda_con = rng.uniform(0.0, 4.0);
    const double expected = w.lambda_sup * sup + w.lambda_dis * dis + w.lambda_con * con;
    LossWeights w2 = w;
    w2.lambda_sup *= 2.0;
    w2.lambda_dis *= 2.0;
    w2.lambda_con *= 2.0;
    const double t1 = total_loss(sup, dis, con, w);
    if (t1 != expected || total_loss(sup, dis, con, w2) != 2.0 * t1) {
      ok = false;
      detail += "lambda linearity broken; ";
    }
  }
  return {ok, ok ? "coincidence zero, min KL " + num(min_kl) + ", linearity exact" : detail};
}

// ----- criterion 3: oracle equivalence -----
std::pair<bool, std::string> check_oracles() {
  Rng rng(7);
  bool ok = true;
  std::string detail;

  for (std::size_t ns = 1; ns <= kPairSizeMax && ok; ++ns) {
    for (std::size_t nt = 1; nt <= kPairSizeMax && ok; ++nt) {
      const std::vector<Proposal> student = oracles::random_proposals(ns, 5, rng);
      const std::vector<Proposal> teacher = oracles::random_proposals(nt, 5, rng);
      const PairSet pm =
          pair_proposals(student, teacher, PairSet::Direction::teacher_to_student);
      const PairSet pn =
          pair_proposals(student, teacher, PairSet::Direction::student_to_teacher);
      if (pm.pairs != oracles::brute_force_pairs(student, teacher, true) ||
          pn.pairs != oracles::brute_force_pairs(student, teacher, false)) {
        ok = false;
        detail = "pairing mismatch at ns=" + std::to_string(ns) + " nt=" + std::to_string(nt);
      }
    }
  }

  ClassPartition part;
  part.classes = {{0, "crate", true}, {1, "slab", true}, {2, "drum", false}};
  double worst_map = 0.0;
  for (int f = 0; f < kMapFixtures && ok; ++f) {
    const std::size_t n_scenes = 1 + rng.uniform_index(5);
    std::vector<Scene> scenes(n_scenes);
    for (std::size_t s = 0; s < n_scenes; ++s) {
      scenes[s].id = s;
      const std::size_t n_boxes = rng.uniform_index(4);
      for (std::size_t b = 0; b < n_boxes; ++b) {
        BoundingBox3D box;
        box.center = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(0.0, 1.0)};
        box.size = {rng.uniform(0.3, 0.8), rng.uniform(0.3, 0.8), rng.uniform(0.3, 0.8)};
        box.class_id = static_cast<int>(rng.uniform_index(3));
        scenes[s].boxes.push_back(box);
      }
    }
    std::vector<Detection> dets(rng.uniform_index(11));
    for (Detection& d : dets) {
      d.scene_id = rng.uniform_index(n_scenes);
      d.box.center = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(0.0, 1.0)};
      d.box.size = {rng.uniform(0.3, 0.8), rng.uniform(0.3, 0.8), rng.uniform(0.3, 0.8)};
      d.class_id = static_cast<int>(rng.uniform_index(3));
      d.confidence = rng.uniform(0.0, 1.0);
    }
    const EvalReport rep = evaluate(dets, scenes, part, 0.25);
    const oracles::NaiveEval naive = oracles::naive_evaluate(dets, scenes, part, 0.25);
    double diff = std::abs(rep.map_base - naive.map_base);
    diff = std::max(diff, std::abs(rep.map_novel - naive.map_novel));
    diff = std::max(diff, std::abs(rep.map_all - naive.map_all));
    if (rep.class_ap.size() != naive.class_ap.size()) diff = 1.0;
    for (const auto& [id, ap] : naive.class_ap) {
      const auto it = rep.class_ap.find(id);
      diff = std::max(diff, it == rep.class_ap.end() ? 1.0 : std::abs(it->second - ap));
    }
    worst_map = std::max(worst_map, diff);
    if (diff > kMapOracleTol) {
      ok = false;
      detail = "mAP oracle gap " + num(diff);
    }
  }

  Rng mc_rng(99);
  double worst_iou = 0.0;
  for (int i = 0; i < kIouPairs && ok; ++i) {
    BoundingBox3D a, b;
    a.center = {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
    a.size = {rng.uniform(0.2, 1.2), rng.uniform(0.2, 1.2), rng.uniform(0.2, 1.2)};
    b.center = a.center +
               Vec3{rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6)};
    b.size = {rng.uniform(0.2, 1.2), rng.uniform(0.2, 1.2), rng.uniform(0.2, 1.2)};
    const double gap = std::abs(box_iou(a, b) - oracles::mc_iou(a, b, kIouMcSamples, mc_rng));
    worst_iou = std::max(worst_iou, gap);
    if (gap >= kIouMcTol) {
      ok = false;
      detail = "IoU vs Monte-Carlo gap " + num(gap);
    }
  }

  return {ok, ok ? "pairing exact to 16x16, mAP gap " + num(worst_map) + ", IoU gap " +
                       num(worst_iou)
                 : detail};
}

// ----- criterion 4: EMA contract -----
std::pair<bool, std::string> check_ema() {
  Rng rng(5);
  const DetectorConfig dcfg;
  DetectorState student = init_detector(dcfg, rng);
  DetectorState teacher = copy_state(student);
  ema_update(teacher, student, 0.999);
  const bool fixed_point = teacher == student;

  // student all zeros, teacher all ones: after one update every element is
  // exactly alpha, after two exactly fl(alpha * alpha).
  DetectorState zero = init_detector(dcfg, rng);
  DetectorState one = copy_state(zero);
  for_each_tensor(zero.params, [](std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); });
  for_each_bn(zero.params, [](BatchNorm& bn) {
    std::fill(bn.running_mean.begin(), bn.running_mean.end(), 0.0);
    std::fill(bn.running_var.begin(), bn.running_var.end(), 0.0);
  });
  for_each_tensor(one.params, [](std::vector<double>& v) { std::fill(v.begin(), v.end(), 1.0); });
  for_each_bn(one.params, [](BatchNorm& bn) {
    std::fill(bn.running_mean.begin(), bn.running_mean.end(), 1.0);
    std::fill(bn.running_var.begin(), bn.running_var.end(), 1.0);
  });

  const double alpha = TrainConfig{}.ema_alpha;
  const bool default_alpha = alpha == 0.999;

  auto all_equal = [](DetectorParams& p, double expected) {
    bool equal = true;
    for_each_tensor(p, [&](std::vector<double>& v) {
      for (double x : v) equal = equal && x == expected;
    });
    for_each_bn(p, [&](BatchNorm& bn) {
      for (double x : bn.running_mean) equal = equal && x == expected;
      for (double x : bn.running_var) equal = equal && x == expected;
    });
    return equal;
  };

  ema_update(one, zero, alpha);
  const bool step1 = all_equal(one.params, alpha);
  ema_update(one, zero, alpha);
  const bool step2 = all_equal(one.params, alpha * alpha);

  const bool ok = fixed_point && default_alpha && step1 && step2;
  std::string detail = "fixed point " + std::string(fixed_point ? "yes" : "NO") +
                       ", contraction exact " + (step1 && step2 ? "yes" : "NO") +
                       ", default alpha " + num(alpha);
  return {ok, detail};
}

// ----- criterion 5: augmentation invariants -----
std::pair<bool, std::string> check_augmentation() {
  const Rng master(2025);
  const std::vector<Scene> source = synth_domain(default_source_spec(), 30, master.fork("src"));
  const std::vector<Scene> target =
      synth_domain(default_target_spec(), kAugScenes, master.fork("tgt"), 1000);
  const GtDatabase db = build_database(source, {0, 1, 2}, 5);

  const PasteConfig pcfg;  // defaults: scale [0.9, 1.1], rotation +-10 deg
  PasteConfig keep_cfg = pcfg;
  keep_cfg.remove_occluded = false;
  const double rot_limit = 10.0 * M_PI / 180.0 + 1e-12;

  bool ok = true;
  std::string detail;
  std::size_t total_pastes = 0;
  const Rng aug_rng = master.fork("aug");
  for (std::size_t i = 0; i < target.size() && ok; ++i) {
    Rng r1 = aug_rng.fork(i);
    Rng r2 = aug_rng.fork(i);
    const auto [aug, rec] = cross_domain_cp(target[i], db, pcfg, r1);
    const auto [aug_keep, rec_keep] = cross_domain_cp(target[i], db, keep_cfg, r2);

    const std::size_t n0 = target[i].boxes.size();
    if (rec.pastes != rec_keep.pastes || aug.boxes.size() != n0 + rec.pastes.size()) {
      ok = false;
      detail = "record mismatch at scene " + std::to_string(i);
      break;
    }
    total_pastes += rec.pastes.size();

    std::size_t pasted_points = 0;
    for (std::size_t k = 0; k < rec.pastes.size(); ++k) {
      const PasteEntry& e = rec.pastes[k];
      if (e.scale < 0.9 || e.scale > 1.1 || std::abs(e.rot_z) > rot_limit) {
        ok = false;
        detail = "jitter out of range at scene " + std::to_string(i);
      }
      const BoundingBox3D& pasted = aug.boxes[n0 + k];
      const bool left = k % 2 == 0;
      if (left ? !(pasted.center.x < 0.0) : !(pasted.center.x > 0.0)) {
        ok = false;
        detail = "x-half rule violated at scene " + std::to_string(i);
      }
      for (std::size_t j = 0; j < n0; ++j) {
        if (box_iou(pasted, aug.boxes[j]) != 0.0) {
          ok = false;
          detail = "paste overlaps pre-existing box at scene " + std::to_string(i);
        }
      }
      pasted_points += db.objects()[e.object_index].points.size();
    }

    // Without occlusion removal the cloud grows by exactly the pasted crop
    // sizes; removal can only shrink that.
    if (aug_keep.cloud.size() != target[i].cloud.size() + pasted_points ||
        aug.cloud.size() > aug_keep.cloud.size()) {
      ok = false;
      detail = "point-count conservation broken at scene " + std::to_string(i);
    }

    if (!(replay_paste(target[i], db, rec, DomainTag::cross) == aug)) {
      ok = false;
      detail = "replay not bit-exact at scene " + std::to_string(i);
    }
  }
  return {ok, ok ? std::to_string(target.size()) + " scenes, " + std::to_string(total_pastes) +
                       " pastes, replay bit-exact"
                 : detail};
}

// ----- criteria 6-8 share three seeded experiment runs -----
struct RunAverages {
  bool ok = false;
  std::string error;
  double ft_base = 0.0;
  double bl_base = 0.0, bl_novel = 0.0, bl_all = 0.0;
  double da_base = 0.0, da_novel = 0.0, da_all = 0.0;
  double nc_base = 0.0;  // ablation: no cross-domain copy-paste
  double ni_novel = 0.0; // ablation: no in-domain copy-paste
  double first_run_secs = 0.0;
  ExperimentConfig seed1_cfg;
  std::string seed1_report, seed1_losses, seed1_pr;
};

ExperimentConfig run_config(std::uint64_t seed, const fs::path& out_dir) {
  ExperimentConfig cfg;
  cfg.seed = seed;
  cfg.run_ablations = true;
  cfg.save_artifacts = false;
  cfg.out_dir = out_dir;
  return cfg;
}

RunAverages run_experiments(const fs::path& root) {
  RunAverages avg;
  try {
    for (int s = 1; s <= kRunSeeds; ++s) {
      const ExperimentConfig cfg =
          run_config(static_cast<std::uint64_t>(s), root / ("seed" + std::to_string(s)));
      const auto t0 = Clock::now();
      const ExperimentResult res = run_experiment(cfg);
      const double secs = secs_since(t0);
      if (!res.ablation_no_cross || !res.ablation_no_in) {
        avg.error = "ablation results missing";
        return avg;
      }
      if (s == 1) {
        avg.first_run_secs = secs;
        avg.seed1_cfg = cfg;
        avg.seed1_report = slurp(cfg.out_dir / "report.txt");
        avg.seed1_losses = slurp(cfg.out_dir / "loss_curves.csv");
        avg.seed1_pr = slurp(cfg.out_dir / "pr_curves.csv");
      }
      avg.ft_base += res.finetuned.map_base;
      avg.bl_base += res.baseline.map_base;
      avg.bl_novel += res.baseline.map_novel;
      avg.bl_all += res.baseline.map_all;
      avg.da_base += res.dacil.map_base;
      avg.da_novel += res.dacil.map_novel;
      avg.da_all += res.dacil.map_all;
      avg.nc_base += res.ablation_no_cross->map_base;
      avg.ni_novel += res.ablation_no_in->map_novel;
    }
    for (double* v : {&avg.ft_base, &avg.bl_base, &avg.bl_novel, &avg.bl_all, &avg.da_base,
                      &avg.da_novel, &avg.da_all, &avg.nc_base, &avg.ni_novel}) {
      *v /= kRunSeeds;
    }
    avg.ok = true;
  } catch (const std::exception& e) {
    avg.error = e.what();
  }
  return avg;
}

std::pair<bool, std::string> check_forgetting(const RunAverages& avg) {
  if (!avg.ok) return {false, "experiment runs failed: " + avg.error};
  const double drop = avg.ft_base > 0.0 ? (avg.ft_base - avg.bl_base) / avg.ft_base : 0.0;
  const bool ok = avg.ft_base > 0.0 && drop >= kForgetDropMin && avg.bl_novel > avg.bl_base;
  return {ok, "ft base " + num(avg.ft_base) + " -> baseline base " + num(avg.bl_base) +
                  " (drop " + num(drop * 100.0) + "%), baseline novel " + num(avg.bl_novel)};
}

std::pair<bool, std::string> check_dacil_benefit(const RunAverages& avg) {
  if (!avg.ok) return {false, "experiment runs failed: " + avg.error};
  const bool base_gain = avg.da_base - avg.bl_base >= kDacilBaseGainMin;
  const bool novel_close = avg.da_novel >= avg.bl_novel - kDacilNovelSlack;
  const bool all_higher = avg.da_all > avg.bl_all;
  const bool in_time = avg.first_run_secs < kRunBudgetSeconds;
  const bool ok = base_gain && novel_close && all_higher && in_time;
  return {ok, "base " + num(avg.bl_base) + " -> " + num(avg.da_base) + ", novel " +
                  num(avg.bl_novel) + " -> " + num(avg.da_novel) + ", all " + num(avg.bl_all) +
                  " -> " + num(avg.da_all) + ", run " + num(avg.first_run_secs) + " s"};
}

std::pair<bool, std::string> check_ablations(const RunAverages& avg) {
  if (!avg.ok) return {false, "experiment runs failed: " + avg.error};
  const bool cross_matters = avg.nc_base <= avg.da_base + kAblationBand;
  const bool in_matters = avg.ni_novel <= avg.da_novel + kAblationBand;
  return {cross_matters && in_matters,
          "no-cross base " + num(avg.nc_base) + " vs full " + num(avg.da_base) +
              ", no-in novel " + num(avg.ni_novel) + " vs full " + num(avg.da_novel)};
}

// ----- criterion 9: determinism and serialization -----
std::pair<bool, std::string> check_determinism(const RunAverages& avg, const fs::path& root) {
  if (!avg.ok) return {false, "experiment runs failed: " + avg.error};

  ExperimentConfig cfg = avg.seed1_cfg;
  cfg.out_dir = root / "seed1_repeat";
  cfg.save_artifacts = true;  // artifacts only add files, never change reports
  run_experiment(cfg);
  const bool reports_equal = slurp(cfg.out_dir / "report.txt") == avg.seed1_report &&
                             slurp(cfg.out_dir / "loss_curves.csv") == avg.seed1_losses &&
                             slurp(cfg.out_dir / "pr_curves.csv") == avg.seed1_pr;

  // A trained checkpoint survives load -> save byte-for-byte.
  const fs::path ck = cfg.out_dir / "checkpoints" / "dacil_student.bin";
  const DetectorState state = load_checkpoint(ck);
  const fs::path ck2 = root / "roundtrip_checkpoint.bin";
  save_checkpoint(state, ck2);
  const bool checkpoint_exact = slurp(ck) == slurp(ck2) && load_checkpoint(ck2) == state;

  const fs::path sc = cfg.out_dir / "scenes" / "eval" / "scene_00000.bin";
  const Scene scene = load_scene(sc);
  const fs::path sc2 = root / "roundtrip_scene.bin";
  save_scene(scene, sc2);
  const bool scene_exact = slurp(sc) == slurp(sc2) && load_scene(sc2) == scene;

  const bool ok = reports_equal && checkpoint_exact && scene_exact;
  return {ok, std::string("reports ") + (reports_equal ? "byte-identical" : "DIFFER") +
                  ", checkpoint round trip " + (checkpoint_exact ? "exact" : "BROKEN") +
                  ", scene round trip " + (scene_exact ? "exact" : "BROKEN")};
}

}  // namespace

int main() {
  const fs::path root = fs::temp_directory_path() / "votelab_acceptance";
  std::error_code ec;
  fs::remove_all(root, ec);
  fs::create_directories(root);

  criterion(1, "detector and loss gradients match finite differences", check_gradients);
  criterion(2, "loss identities, KL nonnegativity, lambda linearity", check_loss_identities);
  criterion(3, "pairing, mAP and IoU match independent oracles", check_oracles);
  criterion(4, "EMA fixed point and exact contraction", check_ema);
  criterion(5, "copy-paste invariants on 200 seeded scenes", check_augmentation);

  const RunAverages avg = run_experiments(root);
  criterion(6, "fine-tune baseline forgets base classes",
            [&] { return check_forgetting(avg); });
  criterion(7, "dual-teacher student recovers base classes",
            [&] { return check_dacil_benefit(avg); });
  criterion(8, "removing either copy-paste hurts its metric",
            [&] { return check_ablations(avg); });
  criterion(9, "deterministic reports and bit-exact round trips",
            [&] { return check_determinism(avg, root); });

  if (g_failed == 0) {
    std::printf("acceptance: all 9 criteria passed\n");
  } else {
    std::printf("acceptance: %d of 9 criteria failed\n", g_failed);
  }
  return g_failed == 0 ? 0 : 1;
}
