#include "votelab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "votelab/common.hpp"

namespace votelab {
namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

std::vector<std::vector<double>*> tensor_ptrs(DetectorParams& p) {
  std::vector<std::vector<double>*> out;
  for_each_tensor(p, [&](std::vector<double>& t) { out.push_back(&t); });
  return out;
}

std::vector<const std::vector<double>*> tensor_ptrs(const DetectorParams& p) {
  std::vector<const std::vector<double>*> out;
  for_each_tensor(p, [&](const std::vector<double>& t) { out.push_back(&t); });
  return out;
}

void add_params(DetectorParams& dst, const DetectorParams& src, double s) {
  auto d = tensor_ptrs(dst);
  auto r = tensor_ptrs(src);
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i]->size() != r[i]->size()) {
      fail(ErrorKind::shape_mismatch, "parameter accumulation: tensor size mismatch");
    }
    for (std::size_t j = 0; j < d[i]->size(); ++j) (*d[i])[j] += s * (*r[i])[j];
  }
}

template <typename T>
void shuffle_vec(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[rng.uniform_index(i)]);
  }
}

SceneTransform draw_scene_transform(const TrainConfig& tcfg, Rng& rng) {
  SceneTransform t;
  t.flip = rng.bernoulli(tcfg.flip_prob);
  t.rot_z = rng.uniform(-tcfg.rot_range, tcfg.rot_range);
  t.scale = rng.uniform(tcfg.scale_min, tcfg.scale_max);
  return t;
}

double decayed_lr(const TrainConfig& tcfg, int epoch, bool use_decay) {
  double lr = tcfg.lr;
  if (!use_decay) return lr;
  for (int e : tcfg.lr_decay_epochs) {
    if (epoch >= e) lr *= tcfg.lr_decay_factor;
  }
  return lr;
}

// Shared loop for the supervised-only stages: per-epoch shuffled batches,
// scene-level augmentation, supervised loss, one Adam step per batch.
DetectorState run_supervised_stage(DetectorState state, const std::vector<Scene>& scenes,
                                   const TrainConfig& tcfg, int epochs, bool use_decay,
                                   const std::string& stage, Rng rng, StageLog* log) {
  if (scenes.empty()) fail(ErrorKind::empty_corpus, stage + ": no training scenes");
  if (epochs == 0) return state;

  Adam opt(state, tcfg.lr);
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng erng = rng.fork(static_cast<std::uint64_t>(epoch));
    opt.set_lr(decayed_lr(tcfg, epoch, use_decay));
    shuffle_vec(order, erng);

    double epoch_sup = 0.0;
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(tcfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(tcfg.batch_size));
      const double inv_b = 1.0 / static_cast<double>(end - begin);
      DetectorParams grads = zeros_like(state.params);
      for (std::size_t i = begin; i < end; ++i) {
        const Scene aug = apply_scene_transform(draw_scene_transform(tcfg, erng),
                                                scenes[order[i]]);
        ForwardResult fwd = forward(state, aug.cloud, ForwardMode::train);
        std::vector<ProposalGrad> pg;
        epoch_sup += supervised_loss(fwd.proposals, aug.boxes, tcfg.assignment_radius, &pg);
        std::vector<ProposalGrad> scaled;
        ensure_grads(scaled, pg.size(), fwd.proposals[0].class_probs.size());
        add_scaled(scaled, pg, inv_b);
        add_params(grads, backward(state, fwd.cache, scaled), 1.0);
      }
      opt.step(state, grads);
    }
    if (log) {
      const double mean_sup = epoch_sup / static_cast<double>(scenes.size());
      log->push_back({stage, epoch, mean_sup, 0.0, 0.0, mean_sup, opt.lr()});
    }
  }
  return state;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs_base < 0 || epochs_finetune_in < 0 || epochs_finetune_cross < 0 ||
      epochs_dual < 0 || epochs_baseline < 0) {
    fail(ErrorKind::config, "train config: epochs must be >= 0");
  }
  if (batch_size < 1 || dual_in_target_per_batch < 1 || dual_cross_per_batch < 0) {
    fail(ErrorKind::config, "train config: bad batch composition");
  }
  if (!(lr > 0.0) || !(lr_decay_factor > 0.0)) {
    fail(ErrorKind::config, "train config: learning rates must be positive");
  }
  if (!(ema_alpha >= 0.0 && ema_alpha <= 1.0)) {
    fail(ErrorKind::config, "train config: ema_alpha must be in [0,1]");
  }
  if (!(pseudo_threshold > 0.0 && pseudo_threshold < 1.0)) {
    fail(ErrorKind::config, "train config: pseudo_threshold must be in (0,1)");
  }
  if (!(assignment_radius > 0.0)) {
    fail(ErrorKind::config, "train config: assignment_radius must be > 0");
  }
  if (flip_prob < 0.0 || flip_prob > 1.0 || rot_range < 0.0 || !(scale_min > 0.0) ||
      scale_max < scale_min) {
    fail(ErrorKind::config, "train config: bad scene augmentation ranges");
  }
  weights.validate();
}

void append_stage_log(const StageLog& log, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) fail(ErrorKind::io, "cannot open stage log: " + path.string());
  char buf[256];
  for (const EpochMetrics& m : log) {
    std::snprintf(buf, sizeof(buf), "%s %d %.6f %.6f %.6f %.6f %.6g\n", m.stage.c_str(),
                  m.epoch, m.l_sup, m.l_dis, m.l_con, m.l_total, m.lr);
    out << buf;
  }
  out.flush();
  if (!out) fail(ErrorKind::io, "write failed: " + path.string());
}

Adam::Adam(const DetectorState& state, double lr)
    : lr_(lr), m_(zeros_like(state.params)), v_(zeros_like(state.params)) {}

void Adam::step(DetectorState& state, const DetectorParams& grads) {
  if (state.frozen) fail(ErrorKind::frozen_state, "Adam: cannot step a frozen state");
  ++t_;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  auto p = tensor_ptrs(state.params);
  auto g = tensor_ptrs(grads);
  auto m = tensor_ptrs(m_);
  auto v = tensor_ptrs(v_);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i]->size() != g[i]->size()) {
      fail(ErrorKind::shape_mismatch, "Adam: gradient shape mismatch");
    }
    for (std::size_t j = 0; j < p[i]->size(); ++j) {
      const double gj = (*g[i])[j];
      double& mj = (*m[i])[j];
      double& vj = (*v[i])[j];
      mj = kBeta1 * mj + (1.0 - kBeta1) * gj;
      vj = kBeta2 * vj + (1.0 - kBeta2) * gj * gj;
      (*p[i])[j] -= lr_ * (mj / bc1) / (std::sqrt(vj / bc2) + kAdamEps);
    }
  }
}

void ema_update(DetectorState& teacher, const DetectorState& student, double alpha) {
  if (teacher.config != student.config) {
    fail(ErrorKind::shape_mismatch, "ema_update: config mismatch");
  }
  auto t = tensor_ptrs(teacher.params);
  auto s = tensor_ptrs(student.params);
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (std::size_t j = 0; j < t[i]->size(); ++j) {
      (*t[i])[j] = alpha * (*t[i])[j] + (1.0 - alpha) * (*s[i])[j];
    }
  }
  std::vector<BatchNorm*> tb;
  std::vector<const BatchNorm*> sb;
  for_each_bn(teacher.params, [&](BatchNorm& bn) { tb.push_back(&bn); });
  for_each_bn(student.params, [&](const BatchNorm& bn) { sb.push_back(&bn); });
  for (std::size_t i = 0; i < tb.size(); ++i) {
    for (std::size_t j = 0; j < tb[i]->running_mean.size(); ++j) {
      tb[i]->running_mean[j] =
          alpha * tb[i]->running_mean[j] + (1.0 - alpha) * sb[i]->running_mean[j];
      tb[i]->running_var[j] =
          alpha * tb[i]->running_var[j] + (1.0 - alpha) * sb[i]->running_var[j];
    }
  }
}

DetectorState pretrain_base(const std::vector<Scene>& scenes, const DetectorConfig& dcfg,
                            const TrainConfig& tcfg, StageLog* log) {
  tcfg.validate();
  Rng rng = Rng(tcfg.seed).fork("pretrain");
  Rng init_rng = rng.fork("init");
  DetectorState state = init_detector(dcfg, init_rng);
  return run_supervised_stage(std::move(state), scenes, tcfg, tcfg.epochs_base,
                              /*use_decay=*/true, "pretrain", rng.fork("loop"), log);
}

DetectorState finetune_sequential(const DetectorState& state,
                                  const std::vector<Scene>& in_source_scenes,
                                  const std::vector<Scene>& cross_scenes,
                                  const TrainConfig& tcfg, StageLog* log) {
  tcfg.validate();
  Rng rng = Rng(tcfg.seed).fork("finetune");
  DetectorState out = run_supervised_stage(copy_state(state), in_source_scenes, tcfg,
                                           tcfg.epochs_finetune_in, /*use_decay=*/false,
                                           "finetune_in_source", rng.fork("in_source"), log);
  return run_supervised_stage(std::move(out), cross_scenes, tcfg, tcfg.epochs_finetune_cross,
                              /*use_decay=*/false, "finetune_cross", rng.fork("cross"), log);
}

DetectorState finetune_baseline(const DetectorState& state,
                                const std::vector<Scene>& target_scenes,
                                const TrainConfig& tcfg, StageLog* log) {
  tcfg.validate();
  Rng rng = Rng(tcfg.seed).fork("baseline");
  return run_supervised_stage(copy_state(state), target_scenes, tcfg, tcfg.epochs_baseline,
                              /*use_decay=*/false, "baseline", rng.fork("loop"), log);
}

std::vector<BoundingBox3D> generate_pseudo_labels(DetectorState& cross_teacher,
                                                  const Scene& scene, double threshold,
                                                  const std::vector<int>& base_class_ids) {
  if (base_class_ids.empty()) {
    fail(ErrorKind::config, "generate_pseudo_labels: no base classes");
  }
  ForwardResult fwd = forward(cross_teacher, scene.cloud, ForwardMode::eval);
  std::vector<BoundingBox3D> out;
  for (const Proposal& p : fwd.proposals) {
    if (p.objectness < threshold) continue;
    int best = base_class_ids[0];
    for (int id : base_class_ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= p.class_probs.size()) {
        fail(ErrorKind::unknown_class, "generate_pseudo_labels: base id out of range");
      }
      if (p.class_probs[static_cast<std::size_t>(id)] >
          p.class_probs[static_cast<std::size_t>(best)]) {
        best = id;
      }
    }
    BoundingBox3D box;
    box.center = p.center;
    box.size = p.size;
    box.heading = 0.0;
    box.class_id = best;
    out.push_back(box);
  }
  return out;
}

std::pair<PointCloud, MixedLabels> make_mixed_labels(const std::vector<BoundingBox3D>& pseudo,
                                                     const std::vector<BoundingBox3D>& novel_gt,
                                                     const SceneTransform& t,
                                                     const PointCloud& cloud) {
  PointCloud out_cloud;
  out_cloud.reserve(cloud.size());
  for (const Vec3& p : cloud) out_cloud.push_back(apply_scene_transform(t, p));

  MixedLabels labels;
  labels.boxes.reserve(pseudo.size() + novel_gt.size());
  for (const BoundingBox3D& b : pseudo) {
    labels.boxes.push_back(apply_scene_transform(t, b));
    labels.is_pseudo.push_back(1);
  }
  for (const BoundingBox3D& b : novel_gt) {
    labels.boxes.push_back(apply_scene_transform(t, b));
    labels.is_pseudo.push_back(0);
  }
  return {std::move(out_cloud), std::move(labels)};
}

LossBreakdown dual_teacher_step(DetectorState& student, DetectorState& in_teacher,
                                DetectorState& cross_teacher, Adam& optimizer,
                                const DualBatch& batch,
                                const std::vector<int>& base_class_ids,
                                const TrainConfig& tcfg, Rng& rng) {
  if (batch.in_target.empty() && batch.cross.empty()) {
    fail(ErrorKind::batch, "dual_teacher_step: empty batch");
  }
  for (const Scene* s : batch.in_target) {
    if (!s || s->tag == DomainTag::cross) {
      fail(ErrorKind::batch, "dual_teacher_step: bad in_target slot");
    }
  }
  for (const Scene* s : batch.cross) {
    if (!s) fail(ErrorKind::batch, "dual_teacher_step: bad cross slot");
  }

  const LossWeights& w = tcfg.weights;
  const bool use_con = w.lambda_con != 0.0;
  const bool use_dis = w.lambda_dis != 0.0;
  const double n_all = static_cast<double>(batch.in_target.size() + batch.cross.size());
  const double n_in = static_cast<double>(batch.in_target.size());

  const BnStats bn = export_bn_stats(in_teacher);
  DetectorParams grads = zeros_like(student.params);
  LossBreakdown sums;

  for (const Scene* scene : batch.in_target) {
    const std::vector<BoundingBox3D> pseudo =
        generate_pseudo_labels(cross_teacher, *scene, tcfg.pseudo_threshold, base_class_ids);
    const SceneTransform t = draw_scene_transform(tcfg, rng);
    auto [cloud_t, mixed] = make_mixed_labels(pseudo, scene->boxes, t, scene->cloud);

    ForwardResult sfwd = forward(student, cloud_t, ForwardMode::train, nullptr, &bn);
    const std::size_t classes = sfwd.proposals[0].class_probs.size();
    std::vector<ProposalGrad> merged;
    ensure_grads(merged, sfwd.proposals.size(), classes);

    std::vector<ProposalGrad> g;
    sums.l_sup += supervised_loss(sfwd.proposals, mixed.boxes, tcfg.assignment_radius, &g);
    add_scaled(merged, g, w.lambda_sup / n_all);

    if (use_con) {
      ForwardResult tfwd = forward(in_teacher, scene->cloud, ForwardMode::eval);
      std::vector<Proposal> mapped = tfwd.proposals;
      for (Proposal& p : mapped) {
        p.center = apply_scene_transform(t, p.center);
        p.size = p.size * t.scale;
      }
      g.clear();
      sums.l_con += consistency_loss(sfwd.proposals, mapped, w, &g);
      add_scaled(merged, g, w.lambda_con / n_in);
    }
    if (use_dis) {
      ForwardResult cfwd =
          forward(cross_teacher, cloud_t, ForwardMode::eval, &sfwd.trace, &bn);
      g.clear();
      sums.l_dis += distillation_loss(sfwd.proposals, cfwd.proposals, base_class_ids, &g);
      add_scaled(merged, g, w.lambda_dis / n_all);
    }
    add_params(grads, backward(student, sfwd.cache, merged), 1.0);
  }

  for (const Scene* scene : batch.cross) {
    const SceneTransform t = draw_scene_transform(tcfg, rng);
    const Scene aug = apply_scene_transform(t, *scene);

    ForwardResult sfwd = forward(student, aug.cloud, ForwardMode::train, nullptr, &bn);
    const std::size_t classes = sfwd.proposals[0].class_probs.size();
    std::vector<ProposalGrad> merged;
    ensure_grads(merged, sfwd.proposals.size(), classes);

    std::vector<ProposalGrad> g;
    sums.l_sup += supervised_loss(sfwd.proposals, aug.boxes, tcfg.assignment_radius, &g);
    add_scaled(merged, g, w.lambda_sup / n_all);

    if (use_dis) {
      ForwardResult cfwd =
          forward(cross_teacher, aug.cloud, ForwardMode::eval, &sfwd.trace, &bn);
      g.clear();
      sums.l_dis += distillation_loss(sfwd.proposals, cfwd.proposals, base_class_ids, &g);
      add_scaled(merged, g, w.lambda_dis / n_all);
    }
    add_params(grads, backward(student, sfwd.cache, merged), 1.0);
  }

  LossBreakdown out;
  out.l_sup = sums.l_sup / n_all;
  out.l_dis = use_dis ? sums.l_dis / n_all : 0.0;
  out.l_con = use_con && n_in > 0.0 ? sums.l_con / n_in : 0.0;
  out.l_total = total_loss(out.l_sup, out.l_dis, out.l_con, w);

  optimizer.step(student, grads);
  ema_update(in_teacher, student, tcfg.ema_alpha);
  return out;
}

DualResult train_dual_teacher(const DetectorState& ft_state,
                              const std::vector<Scene>& in_target_scenes,
                              const std::vector<Scene>& cross_scenes,
                              const std::vector<int>& base_class_ids,
                              const TrainConfig& tcfg, StageLog* log) {
  tcfg.validate();
  if (in_target_scenes.empty()) {
    fail(ErrorKind::empty_corpus, "train_dual_teacher: no in-target scenes");
  }
  if (cross_scenes.empty() && tcfg.dual_cross_per_batch > 0) {
    fail(ErrorKind::empty_corpus, "train_dual_teacher: no cross scenes");
  }

  DualResult result{copy_state(ft_state), copy_state(ft_state), freeze(ft_state)};
  result.student.frozen = false;
  result.in_teacher.frozen = false;
  Adam opt(result.student, tcfg.lr);
  Rng rng = Rng(tcfg.seed).fork("dual");

  std::vector<std::size_t> in_order(in_target_scenes.size());
  std::iota(in_order.begin(), in_order.end(), std::size_t{0});
  std::vector<std::size_t> cross_order(cross_scenes.size());
  std::iota(cross_order.begin(), cross_order.end(), std::size_t{0});
  std::size_t cross_cursor = 0;
  Rng cross_rng = rng.fork("cross_cycle");
  if (!cross_order.empty()) shuffle_vec(cross_order, cross_rng);

  for (int epoch = 0; epoch < tcfg.epochs_dual; ++epoch) {
    Rng erng = rng.fork(static_cast<std::uint64_t>(epoch));
    shuffle_vec(in_order, erng);

    LossBreakdown epoch_sums;
    int steps = 0;
    for (std::size_t begin = 0; begin < in_order.size();
         begin += static_cast<std::size_t>(tcfg.dual_in_target_per_batch)) {
      const std::size_t end = std::min(
          in_order.size(), begin + static_cast<std::size_t>(tcfg.dual_in_target_per_batch));
      DualBatch batch;
      for (std::size_t i = begin; i < end; ++i) {
        batch.in_target.push_back(&in_target_scenes[in_order[i]]);
      }
      for (int c = 0; c < tcfg.dual_cross_per_batch && !cross_order.empty(); ++c) {
        if (cross_cursor == cross_order.size()) {
          shuffle_vec(cross_order, cross_rng);
          cross_cursor = 0;
        }
        batch.cross.push_back(&cross_scenes[cross_order[cross_cursor++]]);
      }
      const LossBreakdown b = dual_teacher_step(result.student, result.in_teacher,
                                                result.cross_teacher, opt, batch,
                                                base_class_ids, tcfg, erng);
      epoch_sums.l_sup += b.l_sup;
      epoch_sums.l_dis += b.l_dis;
      epoch_sums.l_con += b.l_con;
      epoch_sums.l_total += b.l_total;
      ++steps;
    }
    if (log && steps > 0) {
      const double inv = 1.0 / static_cast<double>(steps);
      log->push_back({"dual", epoch, epoch_sums.l_sup * inv, epoch_sums.l_dis * inv,
                      epoch_sums.l_con * inv, epoch_sums.l_total * inv, tcfg.lr});
    }
  }
  return result;
}

}  // namespace votelab
