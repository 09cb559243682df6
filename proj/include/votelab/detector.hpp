#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "votelab/geometry.hpp"
#include "votelab/rng.hpp"

namespace votelab {

struct DetectorConfig {
  int num_seeds = 32;      // S: FPS seeds over the input cloud
  int knn = 16;            // k: neighbors gathered per seed
  int hidden = 32;         // H: feature width
  int num_proposals = 8;   // M: FPS proposals over the votes, M <= S
  double radius = 0.5;     // vote grouping radius
  int num_classes = 5;     // C: base + novel
  double bn_momentum = 0.9;  // running = m*running + (1-m)*batch
  double bn_eps = 1e-5;

  bool operator==(const DetectorConfig& o) const = default;

  void validate() const;
  int out_dim() const { return 7 + num_classes; }  // objectness + center + log-size + logits
};

/// y = W x + b with W stored row-major as out x in.
struct Linear {
  int in = 0;
  int out = 0;
  std::vector<double> w;
  std::vector<double> b;

  bool operator==(const Linear& o) const = default;
};

struct BatchNorm {
  int dim = 0;
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;

  bool operator==(const BatchNorm& o) const = default;
};

/// All learnable tensors. BN running stats live here too but are buffers,
/// not parameters; for_each_tensor visits parameters only.
struct DetectorParams {
  Linear enc1, enc2;    // per-point encoder 3 -> H -> H
  BatchNorm bn_enc1, bn_enc2;
  Linear vote1, vote2;  // vote head H -> H -> 3
  BatchNorm bn_vote1;
  Linear prop1, prop2;  // proposal head H -> H -> out_dim
  BatchNorm bn_prop1;

  bool operator==(const DetectorParams& o) const = default;
};

/// Visits the 20 parameter tensors in declared order. Grads, EMA, the
/// optimizer and the checkpoint writer all rely on this single ordering.
template <typename Params, typename Fn>
void for_each_tensor(Params& p, Fn&& fn) {
  fn(p.enc1.w), fn(p.enc1.b), fn(p.bn_enc1.gamma), fn(p.bn_enc1.beta);
  fn(p.enc2.w), fn(p.enc2.b), fn(p.bn_enc2.gamma), fn(p.bn_enc2.beta);
  fn(p.vote1.w), fn(p.vote1.b), fn(p.bn_vote1.gamma), fn(p.bn_vote1.beta);
  fn(p.vote2.w), fn(p.vote2.b);
  fn(p.prop1.w), fn(p.prop1.b), fn(p.bn_prop1.gamma), fn(p.bn_prop1.beta);
  fn(p.prop2.w), fn(p.prop2.b);
}

/// Visits the 4 BN layers in declared order.
template <typename Params, typename Fn>
void for_each_bn(Params& p, Fn&& fn) {
  fn(p.bn_enc1), fn(p.bn_enc2), fn(p.bn_vote1), fn(p.bn_prop1);
}

struct DetectorState {
  DetectorConfig config;
  DetectorParams params;
  bool frozen = false;

  bool operator==(const DetectorState& o) const = default;
};

DetectorState init_detector(const DetectorConfig& config, Rng& rng);
DetectorState copy_state(const DetectorState& state);
DetectorState freeze(const DetectorState& state);

/// Zero tensors shaped like the given parameters (for gradients).
DetectorParams zeros_like(const DetectorParams& params);

/// Per-layer running statistics, exportable from one model and usable as the
/// normalization source in another model's forward pass.
struct BnStats {
  std::vector<std::vector<double>> mean;  // one entry per BN layer
  std::vector<std::vector<double>> var;

  bool operator==(const BnStats& o) const = default;
};

BnStats export_bn_stats(const DetectorState& state);

/// Index selections of one forward pass. Replaying a trace routes another
/// model's forward through identical gather/group decisions, aligning its
/// proposals one-to-one with the trace producer's.
struct SamplingTrace {
  std::size_t cloud_size = 0;
  std::vector<int> seed_indices;                    // S, into cloud
  std::vector<std::vector<int>> knn_indices;        // S x k, into cloud
  std::vector<int> proposal_vote_indices;           // M, into votes (= seeds)
  std::vector<std::vector<int>> group_vote_indices; // M groups, into votes

  bool operator==(const SamplingTrace& o) const = default;
};

struct Proposal {
  Vec3 center;
  Vec3 size;                        // exp of predicted log-size, > 0
  std::vector<double> class_probs;  // softmax, sums to 1
  double objectness = 0.0;          // sigmoid, in [0,1]
  std::vector<double> class_logits; // pre-softmax (distillation operates here)
  double objectness_logit = 0.0;
};

/// Upstream gradients on one proposal. Probability-space and logit-space
/// slots may both be set; backward merges the chains.
struct ProposalGrad {
  Vec3 d_center;
  Vec3 d_size;                          // w.r.t. exp'd size
  std::vector<double> d_class_probs;    // w.r.t. softmax probs (empty = zero)
  std::vector<double> d_class_logits;   // w.r.t. logits directly (empty = zero)
  double d_objectness = 0.0;            // w.r.t. sigmoid output
  double d_objectness_logit = 0.0;      // w.r.t. logit directly
};

enum class ForwardMode { train, eval };

namespace detail {
struct BnLayerCache {
  bool batch_stats = false;   // true: normalized with this batch's stats
  std::vector<double> istd;   // dim
  std::vector<double> xhat;   // rows x dim
};
}  // namespace detail

/// Opaque record of a forward pass, consumed by backward. Only train-mode
/// forwards produce a cache valid for backward.
struct ForwardCache {
  bool valid = false;
  bool used_bn_source = false;
  DetectorConfig config;
  SamplingTrace trace;
  std::vector<Vec3> seed_pos;        // S
  std::vector<double> enc_x0;        // (S*k) x 3 centered neighbor coords
  std::vector<double> enc_a1;        // (S*k) x H post-BN pre-ReLU
  std::vector<double> enc_r1;        // (S*k) x H post-ReLU
  std::vector<double> enc_a2;        // (S*k) x H
  std::vector<double> enc_r2;        // (S*k) x H
  detail::BnLayerCache bn_enc1, bn_enc2;
  std::vector<int> pool_arg;         // S*H winning neighbor slot
  std::vector<double> seed_feat;     // S x H
  std::vector<double> vote_a1;       // S x H
  std::vector<double> vote_r1;       // S x H
  detail::BnLayerCache bn_vote1;
  std::vector<Vec3> votes;           // S
  std::vector<int> gpool_arg;        // M*H winning slot within group list
  std::vector<double> group_feat;    // M x H
  std::vector<double> prop_a1;       // M x H
  std::vector<double> prop_r1;       // M x H
  detail::BnLayerCache bn_prop1;
  std::vector<double> head_out;      // M x out_dim
  std::vector<Proposal> proposals;
};

struct ForwardResult {
  std::vector<Proposal> proposals;  // exactly M
  SamplingTrace trace;
  ForwardCache cache;
};

/// Runs the voting pipeline. trace_in (if given) replaces every index
/// selection; bn_source (if given) replaces the normalization statistics and
/// suppresses running-stat updates. Train mode without bn_source normalizes
/// with batch statistics and updates running stats in place.
///
/// routing (if given) additionally pins the discrete routing of a previous
/// train-mode forward: max-pool winners are taken from its pool_arg /
/// gpool_arg and each ReLU passes or blocks according to the recorded
/// pre-activation signs. With both a trace and a routing cache the network
/// is a smooth function of its parameters, which is what backward
/// differentiates; finite-difference checks perturb that function, not the
/// piecewise one. Batch statistics are still recomputed.
ForwardResult forward(DetectorState& state, const PointCloud& cloud, ForwardMode mode,
                      const SamplingTrace* trace_in = nullptr,
                      const BnStats* bn_source = nullptr,
                      const ForwardCache* routing = nullptr);

/// Exact parameter gradients; FPS/kNN/grouping selections are constant
/// routing. Requires a train-mode cache.
DetectorParams backward(const DetectorState& state, const ForwardCache& cache,
                        const std::vector<ProposalGrad>& grads);

/// Versioned binary checkpoint; round trip is byte-exact.
void save_checkpoint(const DetectorState& state, const std::filesystem::path& path);
DetectorState load_checkpoint(const std::filesystem::path& path);

}  // namespace votelab
