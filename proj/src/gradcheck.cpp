#include "votelab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "votelab/detector.hpp"
#include "votelab/losses.hpp"
#include "votelab/rng.hpp"

namespace votelab {
namespace {

constexpr double kDetectorEps = 1e-3;
constexpr double kDetectorTol = 1e-4;
constexpr double kLossEps = 1e-5;
constexpr double kLossTol = 1e-6;

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

std::vector<double> softmax(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) sum += p[i] = std::exp(z[i] - m);
  for (double& v : p) v /= sum;
  return p;
}

// Per-proposal random linear functional over every output field; exercises
// both probability-space and logit-space gradient slots at once.
struct Functional {
  std::vector<ProposalGrad> weights;

  static Functional draw(std::size_t m, std::size_t classes, Rng& rng) {
    Functional f;
    ensure_grads(f.weights, m, classes);
    for (ProposalGrad& w : f.weights) {
      w.d_center = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
      w.d_size = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
      for (double& v : w.d_class_probs) v = rng.uniform(-1.0, 1.0);
      for (double& v : w.d_class_logits) v = rng.uniform(-1.0, 1.0);
      w.d_objectness = rng.uniform(-1.0, 1.0);
      w.d_objectness_logit = rng.uniform(-1.0, 1.0);
    }
    return f;
  }

  double value(const std::vector<Proposal>& proposals) const {
    double f = 0.0;
    for (std::size_t m = 0; m < proposals.size(); ++m) {
      const Proposal& p = proposals[m];
      const ProposalGrad& w = weights[m];
      f += w.d_center.dot(p.center) + w.d_size.dot(p.size);
      for (std::size_t c = 0; c < p.class_probs.size(); ++c) {
        f += w.d_class_probs[c] * p.class_probs[c] + w.d_class_logits[c] * p.class_logits[c];
      }
      f += w.d_objectness * p.objectness + w.d_objectness_logit * p.objectness_logit;
    }
    return f;
  }
};

}  // namespace

GradCheckResult check_detector_gradients(std::uint64_t seed) {
  GradCheckResult result;
  result.seed = seed;
  Rng rng(seed);

  DetectorConfig cfg;
  cfg.num_seeds = 16;
  cfg.knn = 8;
  cfg.hidden = 16;
  cfg.num_proposals = 4;
  cfg.num_classes = 4;

  Rng init_rng = rng.fork("init");
  // Frozen so the finite-difference forwards never mutate running stats.
  DetectorState state = freeze(init_detector(cfg, init_rng));
  // The default init zeroes the output heads and leaves BN at identity; the
  // check wants every tensor off its trivial value so each gradient path
  // carries signal. The test point must also be well conditioned for the
  // pinned step size: trunk magnitudes are bounded away from zero so no
  // normalization channel's batch variance collapses (tiny variances inflate
  // 1/sigma and with it the truncation error), while the output heads stay
  // small so exp(log-size) stays in the range a trained detector emits
  // rather than amplifying the quotient's cubic term.
  auto fill_signed = [&](std::vector<double>& t, double lo, double hi) {
    for (double& v : t) {
      const double mag = init_rng.uniform(lo, hi);
      v = init_rng.uniform(0.0, 1.0) < 0.5 ? -mag : mag;
    }
  };
  for (Linear* lin : {&state.params.enc1, &state.params.enc2, &state.params.vote1,
                      &state.params.prop1}) {
    fill_signed(lin->w, 0.4, 0.9);
    fill_signed(lin->b, 0.4, 0.9);
  }
  fill_signed(state.params.vote2.w, 0.1, 0.3);
  fill_signed(state.params.vote2.b, 0.1, 0.3);
  fill_signed(state.params.prop2.w, 0.03, 0.1);
  fill_signed(state.params.prop2.b, 0.03, 0.1);
  for_each_bn(state.params, [&](BatchNorm& b) {
    fill_signed(b.gamma, 0.5, 1.0);
    fill_signed(b.beta, 0.2, 0.6);
    for (double& v : b.running_mean) v = init_rng.uniform(-0.5, 0.5);
    for (double& v : b.running_var) v = init_rng.uniform(0.5, 1.5);
  });

  PointCloud cloud;
  Rng cloud_rng = rng.fork("cloud");
  for (int i = 0; i < 64; ++i) {
    cloud.push_back({cloud_rng.uniform(-1.0, 1.0), cloud_rng.uniform(-1.0, 1.0),
                     cloud_rng.uniform(-1.0, 1.0)});
  }

  Rng w_rng = rng.fork("weights");
  const Functional functional = Functional::draw(static_cast<std::size_t>(cfg.num_proposals),
                                                 static_cast<std::size_t>(cfg.num_classes),
                                                 w_rng);

  const BnStats stats = export_bn_stats(state);
  for (const BnStats* bn : {static_cast<const BnStats*>(nullptr), &stats}) {
    const ForwardResult base = forward(state, cloud, ForwardMode::train, nullptr, bn);
    const DetectorParams analytic = backward(state, base.cache, functional.weights);

    std::vector<std::vector<double>*> tensors;
    for_each_tensor(state.params, [&](std::vector<double>& t) { tensors.push_back(&t); });
    std::vector<const std::vector<double>*> grads;
    for_each_tensor(analytic, [&](const std::vector<double>& t) { grads.push_back(&t); });

    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
      for (std::size_t j = 0; j < tensors[ti]->size(); ++j) {
        double& param = (*tensors[ti])[j];
        const double saved = param;
        // Routing pinned to the base pass: backward differentiates the
        // network with max-pool winners and ReLU gates held fixed, so the
        // difference quotient must probe that same smooth function.
        param = saved + kDetectorEps;
        const double f_plus = functional.value(
            forward(state, cloud, ForwardMode::train, &base.trace, bn, &base.cache).proposals);
        param = saved - kDetectorEps;
        const double f_minus = functional.value(
            forward(state, cloud, ForwardMode::train, &base.trace, bn, &base.cache).proposals);
        param = saved;
        const double fd = (f_plus - f_minus) / (2.0 * kDetectorEps);
        result.max_rel_detector =
            std::max(result.max_rel_detector, rel_err((*grads[ti])[j], fd));
      }
    }
  }
  result.pass = result.max_rel_detector < kDetectorTol;
  return result;
}

namespace {

// Free parameterization of a proposal set: probabilities live behind a
// softmax and objectness behind a sigmoid, so every perturbed configuration
// is a valid input to the losses.
struct FreeProposals {
  std::vector<Vec3> centers;
  std::vector<Vec3> sizes;
  std::vector<std::vector<double>> logits;
  std::vector<double> obj_logits;

  std::size_t count() const { return centers.size(); }
  std::size_t classes() const { return logits.empty() ? 0 : logits[0].size(); }

  static FreeProposals draw(std::size_t n, std::size_t c, Rng& rng) {
    FreeProposals f;
    for (std::size_t i = 0; i < n; ++i) {
      f.centers.push_back(
          {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)});
      f.sizes.push_back(
          {rng.uniform(0.2, 1.2), rng.uniform(0.2, 1.2), rng.uniform(0.2, 1.2)});
      std::vector<double> z(c);
      for (double& v : z) v = rng.uniform(-1.0, 1.0);
      f.logits.push_back(std::move(z));
      f.obj_logits.push_back(rng.uniform(-2.0, 2.0));
    }
    return f;
  }

  std::vector<Proposal> realize() const {
    std::vector<Proposal> out(count());
    for (std::size_t i = 0; i < count(); ++i) {
      out[i].center = centers[i];
      out[i].size = sizes[i];
      out[i].class_logits = logits[i];
      out[i].class_probs = softmax(logits[i]);
      out[i].objectness_logit = obj_logits[i];
      out[i].objectness = sigmoid(obj_logits[i]);
    }
    return out;
  }

  double* nth(std::size_t flat) {
    const std::size_t per = 7 + classes();
    const std::size_t i = flat / per, d = flat % per;
    if (d < 3) return &(&centers[i].x)[d];
    if (d < 6) return &(&sizes[i].x)[d - 3];
    if (d < 6 + classes()) return &logits[i][d - 6];
    return &obj_logits[i];
  }
  std::size_t dims() const { return count() * (7 + classes()); }

  // Chains ProposalGrads back to the free parameters (softmax Jacobian for
  // the probability slot, sigmoid for objectness).
  std::vector<double> chain(const std::vector<ProposalGrad>& grads) const {
    std::vector<double> out(dims(), 0.0);
    const std::size_t per = 7 + classes();
    for (std::size_t i = 0; i < count(); ++i) {
      const ProposalGrad& g = grads[i];
      const std::vector<double> p = softmax(logits[i]);
      double* base = &out[i * per];
      base[0] = g.d_center.x;
      base[1] = g.d_center.y;
      base[2] = g.d_center.z;
      base[3] = g.d_size.x;
      base[4] = g.d_size.y;
      base[5] = g.d_size.z;
      double dot = 0.0;
      if (!g.d_class_probs.empty()) {
        for (std::size_t c = 0; c < p.size(); ++c) dot += g.d_class_probs[c] * p[c];
      }
      for (std::size_t c = 0; c < p.size(); ++c) {
        double v = g.d_class_logits.empty() ? 0.0 : g.d_class_logits[c];
        if (!g.d_class_probs.empty()) v += p[c] * (g.d_class_probs[c] - dot);
        base[6 + c] = v;
      }
      const double s = sigmoid(obj_logits[i]);
      base[6 + p.size()] = g.d_objectness * s * (1.0 - s) + g.d_objectness_logit;
    }
    return out;
  }
};

}  // namespace

GradCheckResult check_loss_gradients(std::uint64_t seed) {
  GradCheckResult result;
  result.seed = seed;
  Rng rng(seed);

  constexpr std::size_t kClasses = 5;
  constexpr std::size_t kN = 5;
  const std::vector<int> base_ids = {0, 1, 2};

  Rng srng = rng.fork("student");
  FreeProposals free = FreeProposals::draw(kN, kClasses, srng);
  Rng trng = rng.fork("teacher");
  const std::vector<Proposal> teacher = FreeProposals::draw(kN, kClasses, trng).realize();

  Rng lrng = rng.fork("labels");
  std::vector<BoundingBox3D> labels;
  for (int i = 0; i < 3; ++i) {
    BoundingBox3D b;
    b.center = {lrng.uniform(-1.0, 1.0), lrng.uniform(-1.0, 1.0), lrng.uniform(-1.0, 1.0)};
    b.size = {lrng.uniform(0.2, 0.8), lrng.uniform(0.2, 0.8), lrng.uniform(0.2, 0.8)};
    b.class_id = lrng.uniform_int(0, static_cast<int>(kClasses) - 1);
    labels.push_back(b);
  }
  // Guarantee positives for the supervised loss: park the first proposals
  // near label centers.
  for (std::size_t i = 0; i < labels.size() && i < kN; ++i) {
    free.centers[i] = labels[i].center + Vec3{lrng.uniform(-0.2, 0.2),
                                              lrng.uniform(-0.2, 0.2),
                                              lrng.uniform(-0.2, 0.2)};
  }

  const std::vector<Proposal> student0 = free.realize();
  const PairSet pair_m = pair_proposals(student0, teacher, PairSet::Direction::teacher_to_student);
  const LossWeights weights;
  const double radius = 0.6;

  using LossFn = std::function<double(const std::vector<Proposal>&, std::vector<ProposalGrad>*)>;
  const std::vector<LossFn> losses = {
      [&](const std::vector<Proposal>& s, std::vector<ProposalGrad>* g) {
        return center_loss(s, teacher, g);
      },
      [&](const std::vector<Proposal>& s, std::vector<ProposalGrad>* g) {
        return class_kl_loss(s, teacher, pair_m, g);
      },
      [&](const std::vector<Proposal>& s, std::vector<ProposalGrad>* g) {
        return size_consistency_loss(s, teacher, pair_m, g);
      },
      [&](const std::vector<Proposal>& s, std::vector<ProposalGrad>* g) {
        return consistency_loss(s, teacher, weights, g);
      },
      [&](const std::vector<Proposal>& s, std::vector<ProposalGrad>* g) {
        return distillation_loss(s, teacher, base_ids, g);
      },
      [&](const std::vector<Proposal>& s, std::vector<ProposalGrad>* g) {
        return supervised_loss(s, labels, radius, g);
      },
  };

  for (const LossFn& loss : losses) {
    std::vector<ProposalGrad> grads;
    loss(free.realize(), &grads);
    const std::vector<double> analytic = free.chain(grads);
    for (std::size_t d = 0; d < free.dims(); ++d) {
      double* param = free.nth(d);
      const double saved = *param;
      *param = saved + kLossEps;
      const double f_plus = loss(free.realize(), nullptr);
      *param = saved - kLossEps;
      const double f_minus = loss(free.realize(), nullptr);
      *param = saved;
      const double fd = (f_plus - f_minus) / (2.0 * kLossEps);
      result.max_rel_loss = std::max(result.max_rel_loss, rel_err(analytic[d], fd));
    }
  }
  result.pass = result.max_rel_loss < kLossTol;
  return result;
}

std::vector<GradCheckResult> run_gradcheck(int n_seeds, std::uint64_t seed0) {
  std::vector<GradCheckResult> results;
  for (int i = 0; i < n_seeds; ++i) {
    const std::uint64_t seed = seed0 + static_cast<std::uint64_t>(i);
    GradCheckResult detector = check_detector_gradients(seed);
    const GradCheckResult loss = check_loss_gradients(seed);
    detector.max_rel_loss = loss.max_rel_loss;
    detector.pass = detector.pass && loss.pass;
    results.push_back(detector);
  }
  return results;
}

}  // namespace votelab
