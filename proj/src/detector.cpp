#include "votelab/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "votelab/common.hpp"

namespace votelab {
namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// y (n x out) = x (n x in) W^T + b
void linear_forward(const Linear& lin, const std::vector<double>& x, std::size_t n,
                    std::vector<double>& y) {
  y.assign(n * static_cast<std::size_t>(lin.out), 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = &x[r * static_cast<std::size_t>(lin.in)];
    double* yr = &y[r * static_cast<std::size_t>(lin.out)];
    for (int o = 0; o < lin.out; ++o) {
      const double* wo = &lin.w[static_cast<std::size_t>(o) * lin.in];
      double acc = lin.b[static_cast<std::size_t>(o)];
      for (int i = 0; i < lin.in; ++i) acc += wo[i] * xr[i];
      yr[o] = acc;
    }
  }
}

// Accumulates dW, db; writes dx if requested.
void linear_backward(const Linear& lin, const std::vector<double>& x,
                     const std::vector<double>& dy, std::size_t n, Linear& grad,
                     std::vector<double>* dx) {
  if (dx) dx->assign(n * static_cast<std::size_t>(lin.in), 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = &x[r * static_cast<std::size_t>(lin.in)];
    const double* gyr = &dy[r * static_cast<std::size_t>(lin.out)];
    double* gxr = dx ? &(*dx)[r * static_cast<std::size_t>(lin.in)] : nullptr;
    for (int o = 0; o < lin.out; ++o) {
      const double g = gyr[o];
      if (g == 0.0) continue;
      double* gwo = &grad.w[static_cast<std::size_t>(o) * lin.in];
      const double* wo = &lin.w[static_cast<std::size_t>(o) * lin.in];
      grad.b[static_cast<std::size_t>(o)] += g;
      for (int i = 0; i < lin.in; ++i) {
        gwo[i] += g * xr[i];
        if (gxr) gxr[i] += g * wo[i];
      }
    }
  }
}

// Normalizes x in place. batch_stats: normalize with this batch's biased
// mean/variance (optionally folding them into the running stats); otherwise
// normalize with the supplied fixed statistics.
void bn_forward(BatchNorm& bn, std::vector<double>& x, std::size_t n, bool batch_stats,
                const std::vector<double>* fixed_mean, const std::vector<double>* fixed_var,
                double momentum, double eps, bool update_running,
                detail::BnLayerCache& cache) {
  const int d = bn.dim;
  cache.batch_stats = batch_stats;
  cache.istd.assign(static_cast<std::size_t>(d), 0.0);
  cache.xhat.assign(x.size(), 0.0);

  std::vector<double> mean, var;
  if (batch_stats) {
    mean.assign(static_cast<std::size_t>(d), 0.0);
    var.assign(static_cast<std::size_t>(d), 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += x[r * d + j];
    }
    for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
      for (int j = 0; j < d; ++j) {
        const double c = x[r * d + j] - mean[static_cast<std::size_t>(j)];
        var[static_cast<std::size_t>(j)] += c * c;
      }
    }
    for (int j = 0; j < d; ++j) var[static_cast<std::size_t>(j)] /= static_cast<double>(n);
    if (update_running) {
      for (int j = 0; j < d; ++j) {
        bn.running_mean[static_cast<std::size_t>(j)] =
            momentum * bn.running_mean[static_cast<std::size_t>(j)] +
            (1.0 - momentum) * mean[static_cast<std::size_t>(j)];
        bn.running_var[static_cast<std::size_t>(j)] =
            momentum * bn.running_var[static_cast<std::size_t>(j)] +
            (1.0 - momentum) * var[static_cast<std::size_t>(j)];
      }
    }
  } else {
    mean = *fixed_mean;
    var = *fixed_var;
  }

  for (int j = 0; j < d; ++j) {
    cache.istd[static_cast<std::size_t>(j)] =
        1.0 / std::sqrt(var[static_cast<std::size_t>(j)] + eps);
  }
  for (std::size_t r = 0; r < n; ++r) {
    for (int j = 0; j < d; ++j) {
      const double xh = (x[r * d + j] - mean[static_cast<std::size_t>(j)]) *
                        cache.istd[static_cast<std::size_t>(j)];
      cache.xhat[r * d + j] = xh;
      x[r * d + j] = bn.gamma[static_cast<std::size_t>(j)] * xh +
                     bn.beta[static_cast<std::size_t>(j)];
    }
  }
}

void bn_backward(const BatchNorm& bn, const detail::BnLayerCache& cache,
                 const std::vector<double>& dy, std::size_t n, BatchNorm& grad,
                 std::vector<double>& dx) {
  const int d = bn.dim;
  dx.assign(dy.size(), 0.0);
  std::vector<double> sum_dy(static_cast<std::size_t>(d), 0.0);
  std::vector<double> sum_dy_xhat(static_cast<std::size_t>(d), 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (int j = 0; j < d; ++j) {
      sum_dy[static_cast<std::size_t>(j)] += dy[r * d + j];
      sum_dy_xhat[static_cast<std::size_t>(j)] += dy[r * d + j] * cache.xhat[r * d + j];
    }
  }
  for (int j = 0; j < d; ++j) {
    grad.gamma[static_cast<std::size_t>(j)] += sum_dy_xhat[static_cast<std::size_t>(j)];
    grad.beta[static_cast<std::size_t>(j)] += sum_dy[static_cast<std::size_t>(j)];
  }
  if (cache.batch_stats) {
    // Batch mean/variance depend on every row.
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
      for (int j = 0; j < d; ++j) {
        const std::size_t js = static_cast<std::size_t>(j);
        dx[r * d + j] = bn.gamma[js] * cache.istd[js] *
                        (dy[r * d + j] - sum_dy[js] * inv_n -
                         cache.xhat[r * d + j] * sum_dy_xhat[js] * inv_n);
      }
    }
  } else {
    for (std::size_t r = 0; r < n; ++r) {
      for (int j = 0; j < d; ++j) {
        const std::size_t js = static_cast<std::size_t>(j);
        dx[r * d + j] = dy[r * d + j] * bn.gamma[js] * cache.istd[js];
      }
    }
  }
}

void relu_forward(const std::vector<double>& a, std::vector<double>& r) {
  r.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] > 0.0 ? a[i] : 0.0;
}

// ReLU whose pass/block pattern comes from reference pre-activations.
void relu_replay(const std::vector<double>& a, const std::vector<double>& ref,
                 std::vector<double>& r) {
  r.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = ref[i] > 0.0 ? a[i] : 0.0;
}

void relu_backward(const std::vector<double>& a, std::vector<double>& d) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] <= 0.0) d[i] = 0.0;
  }
}

// Greedy farthest-point sampling starting from the lowest index; ties go to
// the lower index.
std::vector<int> fps(const std::vector<Vec3>& pts, int n) {
  std::vector<int> picked;
  picked.reserve(static_cast<std::size_t>(n));
  picked.push_back(0);
  std::vector<double> dist(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) dist[i] = (pts[i] - pts[0]).norm_sq();
  while (static_cast<int>(picked.size()) < n) {
    int best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (dist[i] > best_d) {
        best_d = dist[i];
        best = static_cast<int>(i);
      }
    }
    picked.push_back(best);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      dist[i] = std::min(dist[i], (pts[i] - pts[best]).norm_sq());
    }
  }
  return picked;
}

// k nearest points to center, ordered by (distance, index).
std::vector<int> knn(const PointCloud& cloud, const Vec3& center, int k) {
  std::vector<std::pair<double, int>> d;
  d.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    d.emplace_back((cloud[i] - center).norm_sq(), static_cast<int>(i));
  }
  std::partial_sort(d.begin(), d.begin() + k, d.end());
  std::vector<int> out(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) out[static_cast<std::size_t>(i)] = d[static_cast<std::size_t>(i)].second;
  return out;
}

void validate_trace(const SamplingTrace& t, std::size_t cloud_size,
                    const DetectorConfig& cfg) {
  const auto s = static_cast<std::size_t>(cfg.num_seeds);
  const auto k = static_cast<std::size_t>(cfg.knn);
  const auto m = static_cast<std::size_t>(cfg.num_proposals);
  if (t.cloud_size != cloud_size) {
    fail(ErrorKind::trace_mismatch, "trace was produced on a cloud of different size");
  }
  if (t.seed_indices.size() != s || t.knn_indices.size() != s ||
      t.proposal_vote_indices.size() != m || t.group_vote_indices.size() != m) {
    fail(ErrorKind::trace_mismatch, "trace shape disagrees with detector config");
  }
  for (int i : t.seed_indices) {
    if (i < 0 || static_cast<std::size_t>(i) >= cloud_size) {
      fail(ErrorKind::trace_mismatch, "trace seed index out of range");
    }
  }
  for (const auto& row : t.knn_indices) {
    if (row.size() != k) fail(ErrorKind::trace_mismatch, "trace knn row of wrong size");
    for (int i : row) {
      if (i < 0 || static_cast<std::size_t>(i) >= cloud_size) {
        fail(ErrorKind::trace_mismatch, "trace knn index out of range");
      }
    }
  }
  for (int i : t.proposal_vote_indices) {
    if (i < 0 || i >= cfg.num_seeds) {
      fail(ErrorKind::trace_mismatch, "trace proposal index out of range");
    }
  }
  for (const auto& g : t.group_vote_indices) {
    if (g.empty()) fail(ErrorKind::trace_mismatch, "trace group is empty");
    for (int i : g) {
      if (i < 0 || i >= cfg.num_seeds) {
        fail(ErrorKind::trace_mismatch, "trace group index out of range");
      }
    }
  }
}

Linear make_linear(int in, int out) {
  Linear lin;
  lin.in = in;
  lin.out = out;
  lin.w.assign(static_cast<std::size_t>(in) * out, 0.0);
  lin.b.assign(static_cast<std::size_t>(out), 0.0);
  return lin;
}

BatchNorm make_bn(int dim) {
  BatchNorm bn;
  bn.dim = dim;
  bn.gamma.assign(static_cast<std::size_t>(dim), 1.0);
  bn.beta.assign(static_cast<std::size_t>(dim), 0.0);
  bn.running_mean.assign(static_cast<std::size_t>(dim), 0.0);
  bn.running_var.assign(static_cast<std::size_t>(dim), 1.0);
  return bn;
}

DetectorParams make_params(const DetectorConfig& cfg) {
  DetectorParams p;
  p.enc1 = make_linear(3, cfg.hidden);
  p.enc2 = make_linear(cfg.hidden, cfg.hidden);
  p.bn_enc1 = make_bn(cfg.hidden);
  p.bn_enc2 = make_bn(cfg.hidden);
  p.vote1 = make_linear(cfg.hidden, cfg.hidden);
  p.vote2 = make_linear(cfg.hidden, 3);
  p.bn_vote1 = make_bn(cfg.hidden);
  p.prop1 = make_linear(cfg.hidden, cfg.hidden);
  p.prop2 = make_linear(cfg.hidden, cfg.out_dim());
  p.bn_prop1 = make_bn(cfg.hidden);
  return p;
}

void xavier_init(Linear& lin, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(lin.in + lin.out));
  for (double& w : lin.w) w = rng.uniform(-a, a);
}

}  // namespace

void DetectorConfig::validate() const {
  if (num_seeds < 1 || knn < 1 || hidden < 1 || num_proposals < 1 || num_classes < 1) {
    fail(ErrorKind::config, "detector config: counts must be positive");
  }
  if (num_proposals > num_seeds) {
    fail(ErrorKind::config, "detector config: num_proposals must be <= num_seeds");
  }
  if (!(radius > 0.0)) fail(ErrorKind::config, "detector config: radius must be > 0");
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) {
    fail(ErrorKind::config, "detector config: bn_momentum must be in [0,1)");
  }
  if (!(bn_eps > 0.0)) fail(ErrorKind::config, "detector config: bn_eps must be > 0");
}

DetectorState init_detector(const DetectorConfig& config, Rng& rng) {
  config.validate();
  DetectorState state;
  state.config = config;
  state.params = make_params(config);
  xavier_init(state.params.enc1, rng);
  xavier_init(state.params.enc2, rng);
  xavier_init(state.params.vote1, rng);
  xavier_init(state.params.prop1, rng);
  // vote2 and prop2 stay zero: initial votes coincide with their seeds and
  // proposals start as unit boxes centered on votes. Seeds lie on object
  // surfaces, so center assignment finds positives from the first step;
  // random output layers would scatter centers ~1 unit away and leave the
  // supervised loss with nothing but negatives at this scene scale.
  return state;
}

DetectorState copy_state(const DetectorState& state) { return state; }

DetectorState freeze(const DetectorState& state) {
  DetectorState out = state;
  out.frozen = true;
  return out;
}

DetectorParams zeros_like(const DetectorParams& params) {
  DetectorParams z = params;
  for_each_tensor(z, [](std::vector<double>& t) { std::fill(t.begin(), t.end(), 0.0); });
  for_each_bn(z, [](BatchNorm& bn) {
    std::fill(bn.running_mean.begin(), bn.running_mean.end(), 0.0);
    std::fill(bn.running_var.begin(), bn.running_var.end(), 0.0);
  });
  return z;
}

BnStats export_bn_stats(const DetectorState& state) {
  BnStats stats;
  for_each_bn(state.params, [&](const BatchNorm& bn) {
    stats.mean.push_back(bn.running_mean);
    stats.var.push_back(bn.running_var);
  });
  return stats;
}

ForwardResult forward(DetectorState& state, const PointCloud& cloud, ForwardMode mode,
                      const SamplingTrace* trace_in, const BnStats* bn_source,
                      const ForwardCache* routing) {
  const DetectorConfig& cfg = state.config;
  cfg.validate();
  const std::size_t S = static_cast<std::size_t>(cfg.num_seeds);
  const std::size_t K = static_cast<std::size_t>(cfg.knn);
  const std::size_t H = static_cast<std::size_t>(cfg.hidden);
  const std::size_t M = static_cast<std::size_t>(cfg.num_proposals);
  const std::size_t C = static_cast<std::size_t>(cfg.num_classes);
  const std::size_t D = static_cast<std::size_t>(cfg.out_dim());

  if (cloud.size() < std::max(S, K)) {
    fail(ErrorKind::insufficient_points,
         "forward: cloud has " + std::to_string(cloud.size()) + " points, needs >= " +
             std::to_string(std::max(S, K)));
  }
  if (bn_source) {
    if (bn_source->mean.size() != 4 || bn_source->var.size() != 4) {
      fail(ErrorKind::shape_mismatch, "bn_source: expected stats for 4 layers");
    }
    for (int l = 0; l < 4; ++l) {
      if (bn_source->mean[static_cast<std::size_t>(l)].size() != H ||
          bn_source->var[static_cast<std::size_t>(l)].size() != H) {
        fail(ErrorKind::shape_mismatch, "bn_source: layer width mismatch");
      }
    }
  }
  if (routing) {
    // A routing cache only describes the same network routed over the same
    // index selections, so the paired trace is mandatory.
    if (!routing->valid || !trace_in) {
      fail(ErrorKind::invalid_cache,
           "routing: needs a train-mode cache and its sampling trace");
    }
    if (routing->enc_a1.size() != S * K * H || routing->enc_a2.size() != S * K * H ||
        routing->vote_a1.size() != S * H || routing->prop_a1.size() != M * H ||
        routing->pool_arg.size() != S * H || routing->gpool_arg.size() != M * H) {
      fail(ErrorKind::invalid_cache, "routing: cache shaped for a different config");
    }
  }

  ForwardResult res;
  ForwardCache& cc = res.cache;
  cc.valid = mode == ForwardMode::train;
  cc.used_bn_source = bn_source != nullptr;
  cc.config = cfg;

  // Index selections: fresh, or replayed from the supplied trace.
  SamplingTrace& trace = cc.trace;
  if (trace_in) {
    validate_trace(*trace_in, cloud.size(), cfg);
    trace = *trace_in;
  } else {
    trace.cloud_size = cloud.size();
    trace.seed_indices = fps(cloud, cfg.num_seeds);
    trace.knn_indices.reserve(S);
    for (int si : trace.seed_indices) {
      trace.knn_indices.push_back(knn(cloud, cloud[static_cast<std::size_t>(si)], cfg.knn));
    }
  }

  cc.seed_pos.resize(S);
  for (std::size_t s = 0; s < S; ++s) {
    cc.seed_pos[s] = cloud[static_cast<std::size_t>(trace.seed_indices[s])];
  }

  // Per-point encoder over seed-centered neighbors.
  cc.enc_x0.resize(S * K * 3);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t j = 0; j < K; ++j) {
      const Vec3 d = cloud[static_cast<std::size_t>(trace.knn_indices[s][j])] - cc.seed_pos[s];
      const std::size_t r = (s * K + j) * 3;
      cc.enc_x0[r] = d.x;
      cc.enc_x0[r + 1] = d.y;
      cc.enc_x0[r + 2] = d.z;
    }
  }

  const bool batch_stats = mode == ForwardMode::train && !bn_source;
  const bool update_running = batch_stats && !state.frozen;
  auto bn_args = [&](BatchNorm& bn, int layer) {
    const std::vector<double>* m = nullptr;
    const std::vector<double>* v = nullptr;
    if (!batch_stats) {
      m = bn_source ? &bn_source->mean[static_cast<std::size_t>(layer)] : &bn.running_mean;
      v = bn_source ? &bn_source->var[static_cast<std::size_t>(layer)] : &bn.running_var;
    }
    return std::pair(m, v);
  };

  const std::size_t n_enc = S * K;
  linear_forward(state.params.enc1, cc.enc_x0, n_enc, cc.enc_a1);
  {
    auto [m, v] = bn_args(state.params.bn_enc1, 0);
    bn_forward(state.params.bn_enc1, cc.enc_a1, n_enc, batch_stats, m, v, cfg.bn_momentum,
               cfg.bn_eps, update_running, cc.bn_enc1);
  }
  if (routing) relu_replay(cc.enc_a1, routing->enc_a1, cc.enc_r1);
  else relu_forward(cc.enc_a1, cc.enc_r1);
  linear_forward(state.params.enc2, cc.enc_r1, n_enc, cc.enc_a2);
  {
    auto [m, v] = bn_args(state.params.bn_enc2, 1);
    bn_forward(state.params.bn_enc2, cc.enc_a2, n_enc, batch_stats, m, v, cfg.bn_momentum,
               cfg.bn_eps, update_running, cc.bn_enc2);
  }
  if (routing) relu_replay(cc.enc_a2, routing->enc_a2, cc.enc_r2);
  else relu_forward(cc.enc_a2, cc.enc_r2);

  // Max-pool neighbors into one feature per seed.
  cc.pool_arg.assign(S * H, 0);
  cc.seed_feat.assign(S * H, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t h = 0; h < H; ++h) {
      int best_j = 0;
      if (routing) {
        best_j = routing->pool_arg[s * H + h];
      } else {
        double best = cc.enc_r2[(s * K) * H + h];
        for (std::size_t j = 1; j < K; ++j) {
          const double v = cc.enc_r2[(s * K + j) * H + h];
          if (v > best) {
            best = v;
            best_j = static_cast<int>(j);
          }
        }
      }
      cc.seed_feat[s * H + h] = cc.enc_r2[(s * K + static_cast<std::size_t>(best_j)) * H + h];
      cc.pool_arg[s * H + h] = best_j;
    }
  }

  // Vote head: seed position + predicted offset.
  linear_forward(state.params.vote1, cc.seed_feat, S, cc.vote_a1);
  {
    auto [m, v] = bn_args(state.params.bn_vote1, 2);
    bn_forward(state.params.bn_vote1, cc.vote_a1, S, batch_stats, m, v, cfg.bn_momentum,
               cfg.bn_eps, update_running, cc.bn_vote1);
  }
  if (routing) relu_replay(cc.vote_a1, routing->vote_a1, cc.vote_r1);
  else relu_forward(cc.vote_a1, cc.vote_r1);
  std::vector<double> offsets;
  linear_forward(state.params.vote2, cc.vote_r1, S, offsets);
  cc.votes.resize(S);
  for (std::size_t s = 0; s < S; ++s) {
    cc.votes[s] = cc.seed_pos[s] + Vec3{offsets[s * 3], offsets[s * 3 + 1], offsets[s * 3 + 2]};
  }

  if (!trace_in) {
    trace.proposal_vote_indices = fps(cc.votes, cfg.num_proposals);
    trace.group_vote_indices.clear();
    trace.group_vote_indices.reserve(M);
    const double r2 = cfg.radius * cfg.radius;
    for (int pv : trace.proposal_vote_indices) {
      std::vector<int> group;
      const Vec3& c = cc.votes[static_cast<std::size_t>(pv)];
      for (std::size_t v = 0; v < S; ++v) {
        if ((cc.votes[v] - c).norm_sq() <= r2) group.push_back(static_cast<int>(v));
      }
      if (group.empty()) {
        // Unreachable when grouping around an own vote; kept for replayed
        // centers: fall back to the nearest vote.
        int best = 0;
        double bd = (cc.votes[0] - c).norm_sq();
        for (std::size_t v = 1; v < S; ++v) {
          const double d = (cc.votes[v] - c).norm_sq();
          if (d < bd) {
            bd = d;
            best = static_cast<int>(v);
          }
        }
        group.push_back(best);
      }
      trace.group_vote_indices.push_back(std::move(group));
    }
  }

  // Max-pool vote (= seed) features over each group.
  cc.gpool_arg.assign(M * H, 0);
  cc.group_feat.assign(M * H, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    const auto& group = trace.group_vote_indices[m];
    for (std::size_t h = 0; h < H; ++h) {
      int best_t = 0;
      if (routing) {
        best_t = routing->gpool_arg[m * H + h];
        if (static_cast<std::size_t>(best_t) >= group.size()) {
          fail(ErrorKind::invalid_cache, "routing: group winner outside the trace's group");
        }
      } else {
        double best = cc.seed_feat[static_cast<std::size_t>(group[0]) * H + h];
        for (std::size_t t = 1; t < group.size(); ++t) {
          const double v = cc.seed_feat[static_cast<std::size_t>(group[t]) * H + h];
          if (v > best) {
            best = v;
            best_t = static_cast<int>(t);
          }
        }
      }
      cc.group_feat[m * H + h] =
          cc.seed_feat[static_cast<std::size_t>(group[static_cast<std::size_t>(best_t)]) * H + h];
      cc.gpool_arg[m * H + h] = best_t;
    }
  }

  // Proposal head.
  linear_forward(state.params.prop1, cc.group_feat, M, cc.prop_a1);
  {
    auto [m, v] = bn_args(state.params.bn_prop1, 3);
    bn_forward(state.params.bn_prop1, cc.prop_a1, M, batch_stats, m, v, cfg.bn_momentum,
               cfg.bn_eps, update_running, cc.bn_prop1);
  }
  if (routing) relu_replay(cc.prop_a1, routing->prop_a1, cc.prop_r1);
  else relu_forward(cc.prop_a1, cc.prop_r1);
  linear_forward(state.params.prop2, cc.prop_r1, M, cc.head_out);

  res.proposals.resize(M);
  for (std::size_t m = 0; m < M; ++m) {
    const double* o = &cc.head_out[m * D];
    Proposal& p = res.proposals[m];
    p.objectness_logit = o[0];
    p.objectness = sigmoid(o[0]);
    const Vec3& vote = cc.votes[static_cast<std::size_t>(trace.proposal_vote_indices[m])];
    p.center = vote + Vec3{o[1], o[2], o[3]};
    p.size = {std::exp(o[4]), std::exp(o[5]), std::exp(o[6])};
    p.class_logits.assign(o + 7, o + 7 + C);
    double mx = p.class_logits[0];
    for (double l : p.class_logits) mx = std::max(mx, l);
    p.class_probs.resize(C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      p.class_probs[c] = std::exp(p.class_logits[c] - mx);
      z += p.class_probs[c];
    }
    for (std::size_t c = 0; c < C; ++c) p.class_probs[c] /= z;
  }
  cc.proposals = res.proposals;
  res.trace = trace;
  return res;
}

DetectorParams backward(const DetectorState& state, const ForwardCache& cc,
                        const std::vector<ProposalGrad>& grads) {
  if (!cc.valid) {
    fail(ErrorKind::invalid_cache, "backward: cache must come from a train-mode forward");
  }
  const DetectorConfig& cfg = cc.config;
  const std::size_t S = static_cast<std::size_t>(cfg.num_seeds);
  const std::size_t K = static_cast<std::size_t>(cfg.knn);
  const std::size_t H = static_cast<std::size_t>(cfg.hidden);
  const std::size_t M = static_cast<std::size_t>(cfg.num_proposals);
  const std::size_t C = static_cast<std::size_t>(cfg.num_classes);
  const std::size_t D = static_cast<std::size_t>(cfg.out_dim());
  if (grads.size() != M) {
    fail(ErrorKind::shape_mismatch, "backward: need one ProposalGrad per proposal");
  }

  DetectorParams g = zeros_like(state.params);

  // Head outputs and vote positions.
  std::vector<double> d_out(M * D, 0.0);
  std::vector<Vec3> d_votes(S, Vec3{});
  for (std::size_t m = 0; m < M; ++m) {
    const ProposalGrad& pg = grads[m];
    const Proposal& p = cc.proposals[m];
    if ((!pg.d_class_probs.empty() && pg.d_class_probs.size() != C) ||
        (!pg.d_class_logits.empty() && pg.d_class_logits.size() != C)) {
      fail(ErrorKind::shape_mismatch, "backward: class gradient width mismatch");
    }
    double* o = &d_out[m * D];
    o[0] = pg.d_objectness * p.objectness * (1.0 - p.objectness) + pg.d_objectness_logit;
    o[1] = pg.d_center.x;
    o[2] = pg.d_center.y;
    o[3] = pg.d_center.z;
    d_votes[static_cast<std::size_t>(cc.trace.proposal_vote_indices[m])] += pg.d_center;
    o[4] = pg.d_size.x * p.size.x;
    o[5] = pg.d_size.y * p.size.y;
    o[6] = pg.d_size.z * p.size.z;
    if (!pg.d_class_probs.empty()) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += pg.d_class_probs[c] * p.class_probs[c];
      for (std::size_t c = 0; c < C; ++c) {
        o[7 + c] = p.class_probs[c] * (pg.d_class_probs[c] - dot);
      }
    }
    if (!pg.d_class_logits.empty()) {
      for (std::size_t c = 0; c < C; ++c) o[7 + c] += pg.d_class_logits[c];
    }
  }

  // Proposal head back to group features.
  std::vector<double> d_prop_r1;
  linear_backward(state.params.prop2, cc.prop_r1, d_out, M, g.prop2, &d_prop_r1);
  relu_backward(cc.prop_a1, d_prop_r1);
  std::vector<double> d_prop_z1;
  bn_backward(state.params.bn_prop1, cc.bn_prop1, d_prop_r1, M, g.bn_prop1, d_prop_z1);
  std::vector<double> d_group_feat;
  linear_backward(state.params.prop1, cc.group_feat, d_prop_z1, M, g.prop1, &d_group_feat);

  // Scatter group max-pool back to seed features.
  std::vector<double> d_seed_feat(S * H, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    const auto& group = cc.trace.group_vote_indices[m];
    for (std::size_t h = 0; h < H; ++h) {
      const int slot = cc.gpool_arg[m * H + h];
      const std::size_t v = static_cast<std::size_t>(group[static_cast<std::size_t>(slot)]);
      d_seed_feat[v * H + h] += d_group_feat[m * H + h];
    }
  }

  // Vote head: votes = seed_pos + offset, seed positions are inputs.
  std::vector<double> d_offsets(S * 3);
  for (std::size_t s = 0; s < S; ++s) {
    d_offsets[s * 3] = d_votes[s].x;
    d_offsets[s * 3 + 1] = d_votes[s].y;
    d_offsets[s * 3 + 2] = d_votes[s].z;
  }
  std::vector<double> d_vote_r1;
  linear_backward(state.params.vote2, cc.vote_r1, d_offsets, S, g.vote2, &d_vote_r1);
  relu_backward(cc.vote_a1, d_vote_r1);
  std::vector<double> d_vote_z1;
  bn_backward(state.params.bn_vote1, cc.bn_vote1, d_vote_r1, S, g.bn_vote1, d_vote_z1);
  std::vector<double> d_from_vote;
  linear_backward(state.params.vote1, cc.seed_feat, d_vote_z1, S, g.vote1, &d_from_vote);
  for (std::size_t i = 0; i < d_seed_feat.size(); ++i) d_seed_feat[i] += d_from_vote[i];

  // Scatter seed max-pool back to per-point features.
  const std::size_t n_enc = S * K;
  std::vector<double> d_enc_r2(n_enc * H, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t j = static_cast<std::size_t>(cc.pool_arg[s * H + h]);
      d_enc_r2[(s * K + j) * H + h] += d_seed_feat[s * H + h];
    }
  }

  relu_backward(cc.enc_a2, d_enc_r2);
  std::vector<double> d_enc_z2;
  bn_backward(state.params.bn_enc2, cc.bn_enc2, d_enc_r2, n_enc, g.bn_enc2, d_enc_z2);
  std::vector<double> d_enc_r1;
  linear_backward(state.params.enc2, cc.enc_r1, d_enc_z2, n_enc, g.enc2, &d_enc_r1);
  relu_backward(cc.enc_a1, d_enc_r1);
  std::vector<double> d_enc_z1;
  bn_backward(state.params.bn_enc1, cc.bn_enc1, d_enc_r1, n_enc, g.bn_enc1, d_enc_z1);
  linear_backward(state.params.enc1, cc.enc_x0, d_enc_z1, n_enc, g.enc1, nullptr);

  return g;
}

}  // namespace votelab
