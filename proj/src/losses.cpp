#include "votelab/losses.hpp"

#include <algorithm>
#include <cmath>

#include "votelab/common.hpp"

namespace votelab {
namespace {

constexpr double kTeacherProbFloor = 1e-8;
constexpr double kClassProbFloor = 1e-12;

void check_simplex(const std::vector<Proposal>& proposals, const char* who) {
  for (const Proposal& p : proposals) {
    double sum = 0.0;
    for (double v : p.class_probs) {
      if (v < 0.0) fail(ErrorKind::invalid_distribution, std::string(who) + ": negative class probability");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      fail(ErrorKind::invalid_distribution, std::string(who) + ": class probabilities must sum to 1");
    }
  }
}

// BCE from the logit: softplus(z) - y*z, numerically stable for large |z|.
double bce_with_logit(double z, double y) {
  return std::max(z, 0.0) - y * z + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace

void LossWeights::validate() const {
  if (lambda_sup < 0.0 || lambda_dis < 0.0 || lambda_con < 0.0 || lambda_class < 0.0 ||
      lambda_size < 0.0) {
    fail(ErrorKind::config, "loss weights must be nonnegative");
  }
}

void ensure_grads(std::vector<ProposalGrad>& grads, std::size_t n, std::size_t num_classes) {
  if (grads.size() != n) grads.assign(n, ProposalGrad{});
  for (ProposalGrad& g : grads) {
    if (g.d_class_probs.size() != num_classes) g.d_class_probs.assign(num_classes, 0.0);
    if (g.d_class_logits.size() != num_classes) g.d_class_logits.assign(num_classes, 0.0);
  }
}

void add_scaled(std::vector<ProposalGrad>& dst, const std::vector<ProposalGrad>& src,
                double s) {
  if (dst.size() != src.size()) fail(ErrorKind::shape_mismatch, "add_scaled: size mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i].d_center += src[i].d_center * s;
    dst[i].d_size += src[i].d_size * s;
    dst[i].d_objectness += s * src[i].d_objectness;
    dst[i].d_objectness_logit += s * src[i].d_objectness_logit;
    for (std::size_t c = 0; c < src[i].d_class_probs.size(); ++c) {
      dst[i].d_class_probs[c] += s * src[i].d_class_probs[c];
    }
    for (std::size_t c = 0; c < src[i].d_class_logits.size(); ++c) {
      dst[i].d_class_logits[c] += s * src[i].d_class_logits[c];
    }
  }
}

PairSet pair_proposals(const std::vector<Proposal>& student,
                       const std::vector<Proposal>& teacher, PairSet::Direction direction) {
  if (student.empty() || teacher.empty()) {
    fail(ErrorKind::empty_proposals, "pair_proposals: both sets must be non-empty");
  }
  PairSet out;
  out.direction = direction;
  const bool teacher_anchors = direction == PairSet::Direction::teacher_to_student;
  const std::vector<Proposal>& anchors = teacher_anchors ? teacher : student;
  const std::vector<Proposal>& cands = teacher_anchors ? student : teacher;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    std::size_t best = 0;
    double best_d = (anchors[a].center - cands[0].center).norm_sq();
    for (std::size_t c = 1; c < cands.size(); ++c) {
      const double d = (anchors[a].center - cands[c].center).norm_sq();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    if (teacher_anchors) {
      out.pairs.emplace_back(a, best);
    } else {
      out.pairs.emplace_back(best, a);
    }
  }
  return out;
}

double center_loss(const std::vector<Proposal>& student, const std::vector<Proposal>& teacher,
                   std::vector<ProposalGrad>* grads) {
  const PairSet pair_n =
      pair_proposals(student, teacher, PairSet::Direction::student_to_teacher);
  const PairSet pair_m =
      pair_proposals(student, teacher, PairSet::Direction::teacher_to_student);
  if (grads) ensure_grads(*grads, student.size(), student[0].class_probs.size());
  const double inv_n = 1.0 / static_cast<double>(pair_n.pairs.size());
  const double inv_m = 1.0 / static_cast<double>(pair_m.pairs.size());

  double loss = 0.0;
  for (const auto& [t, s] : pair_n.pairs) {
    const Vec3 d = student[s].center - teacher[t].center;
    loss += d.norm_sq() * inv_n;
    if (grads) (*grads)[s].d_center += d * (2.0 * inv_n);
  }
  for (const auto& [t, s] : pair_m.pairs) {
    const Vec3 d = student[s].center - teacher[t].center;
    loss += d.norm_sq() * inv_m;
    if (grads) (*grads)[s].d_center += d * (2.0 * inv_m);
  }
  return loss;
}

double class_kl_loss(const std::vector<Proposal>& student,
                     const std::vector<Proposal>& teacher, const PairSet& pair_m,
                     std::vector<ProposalGrad>* grads) {
  check_simplex(student, "class_kl_loss(student)");
  check_simplex(teacher, "class_kl_loss(teacher)");
  if (pair_m.pairs.empty()) fail(ErrorKind::empty_proposals, "class_kl_loss: no pairs");
  if (grads) ensure_grads(*grads, student.size(), student[0].class_probs.size());
  const double inv_m = 1.0 / static_cast<double>(pair_m.pairs.size());

  double loss = 0.0;
  for (const auto& [t, s] : pair_m.pairs) {
    const std::vector<double>& ps = student[s].class_probs;
    const std::vector<double>& pd = teacher[t].class_probs;
    if (ps.size() != pd.size()) {
      fail(ErrorKind::shape_mismatch, "class_kl_loss: class count mismatch");
    }
    for (std::size_t c = 0; c < ps.size(); ++c) {
      if (ps[c] <= 0.0) continue;  // lim p->0 of p*ln(p/q) = 0
      const double ratio = std::log(ps[c] / std::max(pd[c], kTeacherProbFloor));
      loss += inv_m * ps[c] * ratio;
      if (grads) (*grads)[s].d_class_probs[c] += inv_m * (ratio + 1.0);
    }
  }
  return loss;
}

double size_consistency_loss(const std::vector<Proposal>& student,
                             const std::vector<Proposal>& teacher, const PairSet& pair_m,
                             std::vector<ProposalGrad>* grads) {
  if (pair_m.pairs.empty()) fail(ErrorKind::empty_proposals, "size_consistency_loss: no pairs");
  if (grads) ensure_grads(*grads, student.size(), student[0].class_probs.size());
  const double inv_m = 1.0 / static_cast<double>(pair_m.pairs.size());

  double loss = 0.0;
  for (const auto& [t, s] : pair_m.pairs) {
    const Vec3 d = student[s].size - teacher[t].size;
    loss += inv_m * d.norm_sq() / 3.0;
    if (grads) (*grads)[s].d_size += d * (2.0 * inv_m / 3.0);
  }
  return loss;
}

double consistency_loss(const std::vector<Proposal>& student,
                        const std::vector<Proposal>& teacher, const LossWeights& weights,
                        std::vector<ProposalGrad>* grads) {
  weights.validate();
  const PairSet pair_m =
      pair_proposals(student, teacher, PairSet::Direction::teacher_to_student);
  const std::size_t classes = student[0].class_probs.size();
  if (grads) ensure_grads(*grads, student.size(), classes);

  auto weighted = [&](double lambda, auto&& fn) {
    if (lambda == 0.0) return 0.0;
    if (!grads) return lambda * fn(static_cast<std::vector<ProposalGrad>*>(nullptr));
    std::vector<ProposalGrad> local;
    const double v = fn(&local);
    add_scaled(*grads, local, lambda);
    return lambda * v;
  };

  double loss = weighted(
      1.0, [&](std::vector<ProposalGrad>* g) { return center_loss(student, teacher, g); });
  loss += weighted(weights.lambda_class, [&](std::vector<ProposalGrad>* g) {
    return class_kl_loss(student, teacher, pair_m, g);
  });
  loss += weighted(weights.lambda_size, [&](std::vector<ProposalGrad>* g) {
    return size_consistency_loss(student, teacher, pair_m, g);
  });
  return loss;
}

double distillation_loss(const std::vector<Proposal>& student,
                         const std::vector<Proposal>& teacher,
                         const std::vector<int>& base_class_ids,
                         std::vector<ProposalGrad>* grads) {
  if (student.size() != teacher.size() || student.empty()) {
    fail(ErrorKind::alignment, "distillation_loss: proposal sets must align one-to-one");
  }
  if (grads) ensure_grads(*grads, student.size(), student[0].class_logits.size());
  const double inv_m = 1.0 / static_cast<double>(student.size());

  double loss = 0.0;
  for (std::size_t i = 0; i < student.size(); ++i) {
    const std::vector<double>& ls = student[i].class_logits;
    const std::vector<double>& lt = teacher[i].class_logits;
    if (ls.size() != lt.size()) {
      fail(ErrorKind::shape_mismatch, "distillation_loss: logit width mismatch");
    }
    for (int c : base_class_ids) {
      if (c < 0 || static_cast<std::size_t>(c) >= ls.size()) {
        fail(ErrorKind::unknown_class, "distillation_loss: base class id out of range");
      }
      const double d = ls[static_cast<std::size_t>(c)] - lt[static_cast<std::size_t>(c)];
      loss += inv_m * d * d;
      if (grads) {
        (*grads)[i].d_class_logits[static_cast<std::size_t>(c)] += 2.0 * inv_m * d;
      }
    }
  }
  return loss;
}

double supervised_loss(const std::vector<Proposal>& proposals,
                       const std::vector<BoundingBox3D>& labels, double assignment_radius,
                       std::vector<ProposalGrad>* grads) {
  if (proposals.empty()) fail(ErrorKind::empty_proposals, "supervised_loss: no proposals");
  if (!(assignment_radius > 0.0)) {
    fail(ErrorKind::config, "supervised_loss: assignment_radius must be > 0");
  }
  if (grads) ensure_grads(*grads, proposals.size(), proposals[0].class_probs.size());
  const std::size_t m = proposals.size();
  const double inv_m = 1.0 / static_cast<double>(m);
  const double r2 = assignment_radius * assignment_radius;

  // Nearest label per proposal; ties go to the lower label index.
  std::vector<int> assigned(m, -1);
  std::size_t positives = 0;
  for (std::size_t i = 0; i < m; ++i) {
    double best_d = r2;
    for (std::size_t l = 0; l < labels.size(); ++l) {
      const double d = (proposals[i].center - labels[l].center).norm_sq();
      if (d < best_d || (d == best_d && assigned[i] < 0)) {
        best_d = d;
        assigned[i] = static_cast<int>(l);
      }
    }
    if (assigned[i] >= 0) ++positives;
  }

  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double y = assigned[i] >= 0 ? 1.0 : 0.0;
    const double z = proposals[i].objectness_logit;
    loss += inv_m * bce_with_logit(z, y);
    if (grads) {
      const double sig = 1.0 / (1.0 + std::exp(-std::abs(z)));
      const double p = z >= 0.0 ? sig : 1.0 - sig;
      (*grads)[i].d_objectness_logit += inv_m * (p - y);
    }
  }
  if (positives == 0) return loss;

  const double inv_p = 1.0 / static_cast<double>(positives);
  for (std::size_t i = 0; i < m; ++i) {
    if (assigned[i] < 0) continue;
    const BoundingBox3D& label = labels[static_cast<std::size_t>(assigned[i])];
    const Proposal& p = proposals[i];

    const Vec3 dc = p.center - label.center;
    const Vec3 ds = p.size - label.size;
    loss += inv_p * (dc.norm_sq() + ds.norm_sq());

    const std::size_t cls = static_cast<std::size_t>(label.class_id);
    if (cls >= p.class_probs.size()) {
      fail(ErrorKind::unknown_class, "supervised_loss: label class id out of range");
    }
    const double prob = std::max(p.class_probs[cls], kClassProbFloor);
    loss += inv_p * -std::log(prob);

    if (grads) {
      (*grads)[i].d_center += dc * (2.0 * inv_p);
      (*grads)[i].d_size += ds * (2.0 * inv_p);
      if (p.class_probs[cls] > kClassProbFloor) {
        (*grads)[i].d_class_probs[cls] += -inv_p / prob;
      }
    }
  }
  return loss;
}

double total_loss(double l_sup, double l_dis, double l_con, const LossWeights& weights) {
  weights.validate();
  return weights.lambda_sup * l_sup + weights.lambda_dis * l_dis + weights.lambda_con * l_con;
}

}  // namespace votelab
