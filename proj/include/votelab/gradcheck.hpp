#pragma once

#include <cstdint>
#include <vector>

namespace votelab {

struct GradCheckResult {
  std::uint64_t seed = 0;
  double max_rel_detector = 0.0;  // worst case over all parameters, both BN modes
  double max_rel_loss = 0.0;      // worst case over all loss inputs
  bool pass = false;
};

/// Central finite differences against the analytic backward pass, on a small
/// randomly initialized detector and a random cloud. The sampling trace of
/// the base forward is replayed for every perturbed forward so index
/// selections cannot drift. eps = 1e-3, relative tolerance 1e-4, where
/// rel(a, b) = |a - b| / max(1, |a|, |b|).
GradCheckResult check_detector_gradients(std::uint64_t seed);

/// Same scheme at the loss level: losses as functions of proposal centers,
/// sizes, logits (probabilities reparameterized through softmax so simplex
/// validation holds), and objectness logits. eps = 1e-5, tolerance 1e-6.
GradCheckResult check_loss_gradients(std::uint64_t seed);

/// Runs both checks on seeds seed0, seed0+1, ... One combined result per
/// seed; pass requires both checks under their tolerances.
std::vector<GradCheckResult> run_gradcheck(int n_seeds, std::uint64_t seed0);

}  // namespace votelab
