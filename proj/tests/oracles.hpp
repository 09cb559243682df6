// Independent reference implementations used to cross-check the library.
// Everything here is deliberately naive: plain loops, no shared code with
// the implementations under test.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "votelab/eval.hpp"
#include "votelab/geometry.hpp"
#include "votelab/losses.hpp"
#include "votelab/rng.hpp"

namespace oracles {

using votelab::BoundingBox3D;
using votelab::Detection;
using votelab::GtBox;
using votelab::Proposal;
using votelab::Rng;
using votelab::Vec3;

// Monte-Carlo estimate of axis-aligned IoU: sample the covering AABB of
// both boxes, count membership.
inline double mc_iou(const BoundingBox3D& a, const BoundingBox3D& b, std::size_t samples,
                     Rng& rng) {
  auto lo = [](const BoundingBox3D& x, int d) {
    return (&x.center.x)[d] - (&x.size.x)[d] / 2.0;
  };
  auto hi = [](const BoundingBox3D& x, int d) {
    return (&x.center.x)[d] + (&x.size.x)[d] / 2.0;
  };
  double cover_lo[3], cover_hi[3], cover_vol = 1.0;
  for (int d = 0; d < 3; ++d) {
    cover_lo[d] = std::min(lo(a, d), lo(b, d));
    cover_hi[d] = std::max(hi(a, d), hi(b, d));
    cover_vol *= cover_hi[d] - cover_lo[d];
  }
  std::size_t both = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    double p[3];
    for (int d = 0; d < 3; ++d) p[d] = rng.uniform(cover_lo[d], cover_hi[d]);
    bool in_a = true, in_b = true;
    for (int d = 0; d < 3; ++d) {
      in_a = in_a && p[d] >= lo(a, d) && p[d] <= hi(a, d);
      in_b = in_b && p[d] >= lo(b, d) && p[d] <= hi(b, d);
    }
    if (in_a && in_b) ++both;
  }
  const double inter = cover_vol * static_cast<double>(both) / static_cast<double>(samples);
  const double va = a.size.x * a.size.y * a.size.z;
  const double vb = b.size.x * b.size.y * b.size.z;
  const double uni = va + vb - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Exhaustive argmin pairing. Pairs are (teacher_index, student_index); ties
// go to the lower candidate index.
inline std::vector<std::pair<std::size_t, std::size_t>> brute_force_pairs(
    const std::vector<Proposal>& student, const std::vector<Proposal>& teacher,
    bool teacher_anchored) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (teacher_anchored) {
    for (std::size_t t = 0; t < teacher.size(); ++t) {
      std::size_t best = 0;
      double best_d = (student[0].center - teacher[t].center).norm_sq();
      for (std::size_t s = 1; s < student.size(); ++s) {
        const double d = (student[s].center - teacher[t].center).norm_sq();
        if (d < best_d) {
          best_d = d;
          best = s;
        }
      }
      out.emplace_back(t, best);
    }
  } else {
    for (std::size_t s = 0; s < student.size(); ++s) {
      std::size_t best = 0;
      double best_d = (teacher[0].center - student[s].center).norm_sq();
      for (std::size_t t = 1; t < teacher.size(); ++t) {
        const double d = (teacher[t].center - student[s].center).norm_sq();
        if (d < best_d) {
          best_d = d;
          best = t;
        }
      }
      out.emplace_back(best, s);
    }
  }
  return out;
}

// Step-integral average precision over explicit (recall, precision) points.
inline double naive_ap(std::vector<bool> tp_flags, std::size_t num_gt) {
  if (num_gt == 0 || tp_flags.empty()) return 0.0;
  std::vector<double> recall, precision;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < tp_flags.size(); ++i) {
    if (tp_flags[i]) ++tp;
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    // Envelope by naive scan: best precision at any rank from i onward.
    double env = 0.0;
    for (std::size_t j = i; j < precision.size(); ++j) env = std::max(env, precision[j]);
    ap += (recall[i] - prev_recall) * env;
    prev_recall = recall[i];
  }
  return ap;
}

// Greedy matcher re-implemented from the rules: confidence descending (ties:
// lower scene id, then input order); each detection takes the unmatched
// same-scene gt with the highest IoU >= threshold (gt ties: lower index).
inline std::vector<bool> naive_match(const std::vector<Detection>& dets,
                                     const std::vector<GtBox>& gts, double threshold) {
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (dets[x].confidence != dets[y].confidence) {
      return dets[x].confidence > dets[y].confidence;
    }
    if (dets[x].scene_id != dets[y].scene_id) return dets[x].scene_id < dets[y].scene_id;
    return x < y;
  });
  std::vector<bool> gt_used(gts.size(), false);
  std::vector<bool> flags(dets.size(), false);
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const Detection& d = dets[order[rank]];
    double best_iou = -1.0;
    std::size_t best_gt = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[g] || gts[g].scene_id != d.scene_id) continue;
      const double iou = votelab::box_iou(d.box, gts[g].box);
      if (iou >= threshold && iou > best_iou) {
        best_iou = iou;
        best_gt = g;
      }
    }
    if (best_gt < gts.size()) {
      gt_used[best_gt] = true;
      flags[rank] = true;
    }
  }
  return flags;
}

// Full naive evaluator: per-class AP via naive_match + naive_ap, means over
// base/novel/all with the exclusion rule (no gt and no dets -> skipped).
struct NaiveEval {
  std::map<int, double> class_ap;
  double map_base = 0.0, map_novel = 0.0, map_all = 0.0;
};

inline NaiveEval naive_evaluate(const std::vector<Detection>& dets,
                                const std::vector<votelab::Scene>& scenes,
                                const votelab::ClassPartition& partition, double threshold) {
  NaiveEval out;
  for (const votelab::ClassInfo& cls : partition.classes) {
    std::vector<Detection> class_dets;
    for (const Detection& d : dets) {
      if (d.class_id == cls.id) class_dets.push_back(d);
    }
    std::vector<GtBox> class_gts;
    for (const votelab::Scene& s : scenes) {
      for (const BoundingBox3D& b : s.boxes) {
        if (b.class_id == cls.id) class_gts.push_back({s.id, b});
      }
    }
    if (class_dets.empty() && class_gts.empty()) continue;
    out.class_ap[cls.id] =
        naive_ap(naive_match(class_dets, class_gts, threshold), class_gts.size());
  }
  auto mean_over = [&](const std::vector<int>& ids) {
    double sum = 0.0;
    std::size_t n = 0;
    for (int id : ids) {
      auto it = out.class_ap.find(id);
      if (it == out.class_ap.end()) continue;
      sum += it->second;
      ++n;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
  };
  out.map_base = mean_over(partition.base_ids());
  out.map_novel = mean_over(partition.novel_ids());
  out.map_all = mean_over(partition.all_ids());
  return out;
}

// Central finite difference of a scalar function of one double.
template <typename Fn>
double central_diff(Fn&& fn, double& param, double eps) {
  const double saved = param;
  param = saved + eps;
  const double plus = fn();
  param = saved - eps;
  const double minus = fn();
  param = saved;
  return (plus - minus) / (2.0 * eps);
}

inline std::vector<Proposal> random_proposals(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<Proposal> out(n);
  for (Proposal& p : out) {
    p.center = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    p.size = {rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0)};
    p.class_logits.resize(classes);
    for (double& z : p.class_logits) z = rng.uniform(-2.0, 2.0);
    const double m = *std::max_element(p.class_logits.begin(), p.class_logits.end());
    double sum = 0.0;
    p.class_probs.resize(classes);
    for (std::size_t c = 0; c < classes; ++c) {
      sum += p.class_probs[c] = std::exp(p.class_logits[c] - m);
    }
    for (double& v : p.class_probs) v /= sum;
    p.objectness_logit = rng.uniform(-2.0, 2.0);
    p.objectness = 1.0 / (1.0 + std::exp(-p.objectness_logit));
  }
  return out;
}

}  // namespace oracles
