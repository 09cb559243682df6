#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "votelab/detector.hpp"
#include "votelab/geometry.hpp"

namespace votelab {

/// Nearest-center proposal pairing. Pairs are stored as (teacher_index,
/// student_index) regardless of which side anchored the match; many-to-one
/// on the matched side is allowed.
struct PairSet {
  enum class Direction {
    teacher_to_student,  // Pair_M: one pair per teacher proposal
    student_to_teacher,  // Pair_N: one pair per student proposal
  };

  Direction direction = Direction::teacher_to_student;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
};

PairSet pair_proposals(const std::vector<Proposal>& student,
                       const std::vector<Proposal>& teacher, PairSet::Direction direction);

struct LossWeights {
  double lambda_sup = 10.0;
  double lambda_dis = 1.0;
  double lambda_con = 10.0;
  double lambda_class = 1.0;
  double lambda_size = 1.0;

  void validate() const;
};

/// Resizes grads to n zero entries if needed (class slots allocated).
void ensure_grads(std::vector<ProposalGrad>& grads, std::size_t n, std::size_t num_classes);

/// Adds src gradients into dst, scaled by s.
void add_scaled(std::vector<ProposalGrad>& dst, const std::vector<ProposalGrad>& src, double s);

/// Mean squared center distance over Pair_N plus mean over Pair_M. Teacher
/// proposals are constants; gradients land on student centers.
double center_loss(const std::vector<Proposal>& student, const std::vector<Proposal>& teacher,
                   std::vector<ProposalGrad>* grads = nullptr);

/// Mean over Pair_M of KL(student || teacher) on class probabilities, with
/// the teacher side clamped below at 1e-8. Gradients on student probs.
double class_kl_loss(const std::vector<Proposal>& student,
                     const std::vector<Proposal>& teacher, const PairSet& pair_m,
                     std::vector<ProposalGrad>* grads = nullptr);

/// Mean over Pair_M of the per-dimension mean squared size difference.
double size_consistency_loss(const std::vector<Proposal>& student,
                             const std::vector<Proposal>& teacher, const PairSet& pair_m,
                             std::vector<ProposalGrad>* grads = nullptr);

/// L_con = L_center + lambda_class * L_class + lambda_size * L_size.
double consistency_loss(const std::vector<Proposal>& student,
                        const std::vector<Proposal>& teacher, const LossWeights& weights,
                        std::vector<ProposalGrad>* grads = nullptr);

/// Mean over trace-aligned proposals of the squared logit gap, restricted to
/// base-class dimensions.
double distillation_loss(const std::vector<Proposal>& student,
                         const std::vector<Proposal>& teacher,
                         const std::vector<int>& base_class_ids,
                         std::vector<ProposalGrad>* grads = nullptr);

/// Objectness BCE over all proposals (positives = within assignment_radius
/// of a label center) plus, averaged over positives, squared center error +
/// squared size error + class cross-entropy against the nearest label.
double supervised_loss(const std::vector<Proposal>& proposals,
                       const std::vector<BoundingBox3D>& labels, double assignment_radius,
                       std::vector<ProposalGrad>* grads = nullptr);

/// L = lambda_sup * L_sup + lambda_dis * L_dis + lambda_con * L_con.
double total_loss(double l_sup, double l_dis, double l_con, const LossWeights& weights);

}  // namespace votelab
