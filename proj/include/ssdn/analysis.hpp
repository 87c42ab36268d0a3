#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ssdn/model.hpp"
#include "ssdn/regimes.hpp"
#include "ssdn/shifts.hpp"

namespace ssdn {

// Rows are probe samples, columns are flattened features of one block.
struct ActivationMatrix {
  Tensor<double> m;  // [n, d]
  bool centered = false;
};

namespace detail {

inline void center_columns(Tensor<double>& x) {
  const int n = x.dim(0), d = x.dim(1);
  for (int j = 0; j < d; ++j) {
    double mean = 0;
    for (int i = 0; i < n; ++i) mean += x(i, j);
    mean /= n;
    for (int i = 0; i < n; ++i) x(i, j) -= mean;
  }
}

inline Tensor<double> gram(const Tensor<double>& x) {
  const int n = x.dim(0), d = x.dim(1);
  Tensor<double> g({n, n});
  gemm_nt(x.data(), x.data(), g.data(), n, d, n, false);
  return g;
}

}  // namespace detail

// Linear CKA between two activation matrices with matching rows:
// ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) after column centering, computed
// through the n x n Gram matrices.
inline double linear_cka(const ActivationMatrix& xa, const ActivationMatrix& ya) {
  if (xa.m.rank() != 2 || ya.m.rank() != 2) {
    throw ContractViolation("linear_cka: expected [n,d] matrices");
  }
  if (xa.m.dim(0) != ya.m.dim(0)) {
    throw ContractViolation("linear_cka: row counts differ: " + std::to_string(xa.m.dim(0)) +
                            " vs " + std::to_string(ya.m.dim(0)));
  }
  if (xa.m.dim(0) < 2) throw ContractViolation("linear_cka: need at least 2 rows");
  Tensor<double> x = xa.m;
  Tensor<double> y = ya.m;
  if (!xa.centered) detail::center_columns(x);
  if (!ya.centered) detail::center_columns(y);
  const Tensor<double> gx = detail::gram(x);
  const Tensor<double> gy = detail::gram(y);
  double num = 0, nx = 0, ny = 0;
  for (int64_t i = 0; i < gx.size(); ++i) {
    num += gx[i] * gy[i];
    nx += gx[i] * gx[i];
    ny += gy[i] * gy[i];
  }
  if (nx == 0.0 || ny == 0.0) {
    throw DegenerateInput("linear_cka: zero-variance activation matrix");
  }
  return num / std::sqrt(nx * ny);
}

inline double linear_cka(const Tensor<double>& x, const Tensor<double>& y) {
  return linear_cka(ActivationMatrix{x, false}, ActivationMatrix{y, false});
}

// ---------------------------------------------------------------------------
// Block activations.

inline int block_stage_index(const std::string& block_id, int num_groups) {
  if (block_id == "c0") return 0;
  for (int g = 1; g <= num_groups; ++g) {
    if (block_id == "g" + std::to_string(g)) return g;
  }
  throw ContractViolation("unknown block id '" + block_id + "'");
}

// Flattened post-block activations over a probe set. Columns above max_cols
// are subsampled with a seeded choice, so two models probed with the same
// seed keep comparable columns.
template <typename T>
ActivationMatrix collect_activations(const Model<T>& m, const std::string& block_id,
                                     const ImageDataset& probe, int max_samples, int batch = 64,
                                     int max_cols = 4096, uint64_t col_seed = 17) {
  const int stage = block_stage_index(block_id, m.arch.num_groups);
  const int n = max_samples > 0 ? std::min<int>(max_samples, static_cast<int>(probe.size()))
                                : static_cast<int>(probe.size());
  if (n < 2) throw ContractViolation("collect_activations: need at least 2 probe samples");

  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<size_t>(n));
  int64_t cols = -1;
  for (int at = 0; at < n; at += batch) {
    const int bs = std::min(batch, n - at);
    std::vector<int> idx(static_cast<size_t>(bs));
    for (int i = 0; i < bs; ++i) idx[static_cast<size_t>(i)] = at + i;
    const std::vector<Tensor<T>> stages =
        stage_activations(m, to_input_batch<T>(probe, idx));
    const Tensor<T>& act = stages[static_cast<size_t>(stage)];
    const int64_t chw = act.size() / bs;
    cols = chw;
    for (int i = 0; i < bs; ++i) {
      std::vector<double> row(static_cast<size_t>(chw));
      for (int64_t k = 0; k < chw; ++k) row[static_cast<size_t>(k)] = act[i * chw + k];
      rows.push_back(std::move(row));
    }
  }

  std::vector<int64_t> keep;
  if (cols > max_cols) {
    std::vector<int64_t> perm(static_cast<size_t>(cols));
    for (int64_t i = 0; i < cols; ++i) perm[static_cast<size_t>(i)] = i;
    Rng rng(mix64(col_seed, fnv1a64(block_id)));
    for (int64_t i = cols - 1; i > 0; --i) {
      const int64_t j = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(i + 1)));
      std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
    }
    keep.assign(perm.begin(), perm.begin() + max_cols);
    std::sort(keep.begin(), keep.end());
  } else {
    for (int64_t i = 0; i < cols; ++i) keep.push_back(i);
  }

  ActivationMatrix out;
  out.m = Tensor<double>({n, static_cast<int>(keep.size())});
  for (int i = 0; i < n; ++i) {
    for (size_t k = 0; k < keep.size(); ++k) {
      out.m(i, static_cast<int>(k)) = rows[static_cast<size_t>(i)][static_cast<size_t>(keep[k])];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Block-freeze sensitivity.

struct FineTuneOpts {
  int steps = 500;
  int batch = 8;
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int probe_samples = 256;
};

// Clone the reference, fine-tune only the named block on shifted data with
// the supervised loss, then compare the block's representations on the probe
// set. Low similarity means the block had to change to absorb the shift.
template <typename T>
double block_sensitivity(const Model<T>& reference, const ImageDataset& shifted,
                         const std::string& block_id, const ImageDataset& probe,
                         const FineTuneOpts& opts, uint64_t seed) {
  block_stage_index(block_id, reference.arch.num_groups);  // validates the id
  Model<T> tuned = reference;
  const std::string prefix = block_id + ".";
  TrainOpts topts;
  topts.steps = opts.steps;
  topts.batch = opts.batch;
  topts.lr = opts.lr;
  topts.momentum = opts.momentum;
  topts.weight_decay = opts.weight_decay;
  topts.lambda = 0.0;
  topts.cosine = false;
  topts.seed = seed;
  topts.update_filter = [prefix](const std::string& name, ParamGroup) {
    return name.rfind(prefix, 0) == 0;
  };
  train_supervised(tuned, shifted, topts);

  const ActivationMatrix x =
      collect_activations(reference, block_id, probe, opts.probe_samples);
  const ActivationMatrix y = collect_activations(tuned, block_id, probe, opts.probe_samples);
  return linear_cka(x, y);
}

// Pairwise per-block CKA between independently trained reference models: the
// band against which shift-induced dissimilarity is judged.
template <typename T>
std::map<std::string, std::vector<double>> control_similarity(const ArchConfig& arch,
                                                              const ImageDataset& dataset,
                                                              const std::vector<uint64_t>& seeds,
                                                              const TrainOpts& train_opts,
                                                              int probe_samples = 256) {
  if (seeds.size() < 2) throw ContractViolation("control_similarity: need at least 2 seeds");
  std::vector<Model<T>> models;
  for (uint64_t s : seeds) {
    Model<T> m = build_model<T>(arch, BridgeConfig::none(), s);
    TrainOpts o = train_opts;
    o.seed = s;
    train_supervised(m, dataset, o);
    models.push_back(std::move(m));
  }
  std::vector<std::string> blocks = {"c0"};
  for (int g = 1; g <= arch.num_groups; ++g) blocks.push_back("g" + std::to_string(g));

  std::map<std::string, std::vector<double>> out;
  for (const auto& b : blocks) {
    std::vector<ActivationMatrix> acts;
    for (auto& m : models) acts.push_back(collect_activations(m, b, dataset, probe_samples));
    for (size_t i = 0; i < acts.size(); ++i) {
      for (size_t j = i + 1; j < acts.size(); ++j) {
        out[b].push_back(linear_cka(acts[i], acts[j]));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Alpha clustering: PCA to two components plus silhouette scores.

struct AlphaRecord {
  std::vector<double> alpha;
  std::string shift;
};

struct ClusterPoint {
  double pc1 = 0, pc2 = 0;
  std::string shift;
  double silhouette = 0;
};

struct ClusterReport {
  std::vector<ClusterPoint> points;
  std::map<std::string, double> shift_silhouette;
  double mean_silhouette = 0;

  std::pair<double, double> centroid(const std::string& shift) const {
    double cx = 0, cy = 0;
    int n = 0;
    for (const auto& p : points) {
      if (p.shift == shift) {
        cx += p.pc1;
        cy += p.pc2;
        ++n;
      }
    }
    if (n == 0) throw ContractViolation("ClusterReport: no points for shift '" + shift + "'");
    return {cx / n, cy / n};
  }

  double centroid_distance(const std::string& a, const std::string& b) const {
    auto [ax, ay] = centroid(a);
    auto [bx, by] = centroid(b);
    return std::hypot(ax - bx, ay - by);
  }
};

namespace detail {

// Cyclic Jacobi for symmetric matrices; returns eigenvalues descending with
// column eigenvectors.
inline std::pair<std::vector<double>, Tensor<double>> jacobi_eigh(Tensor<double> a) {
  const int n = a.dim(0);
  Tensor<double> v({n, n});
  for (int i = 0; i < n; ++i) v(i, i) = 1.0;
  double fro2 = 0;
  for (int64_t i = 0; i < a.size(); ++i) fro2 += a[i] * a[i];
  const double tol = 1e-24 * std::max(1.0, fro2);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    }
    if (off < tol) break;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int x, int y) { return a(x, x) > a(y, y); });
  std::vector<double> evals;
  Tensor<double> evecs({n, n});
  for (int k = 0; k < n; ++k) {
    evals.push_back(a(order[static_cast<size_t>(k)], order[static_cast<size_t>(k)]));
    for (int i = 0; i < n; ++i) evecs(i, k) = v(i, order[static_cast<size_t>(k)]);
  }
  return {std::move(evals), std::move(evecs)};
}

// Top-2 principal directions of a centered [n,d] matrix; the dual (Gram)
// problem is solved when d > n. Component signs are fixed by the largest
// coordinate.
inline Tensor<double> pca2(const Tensor<double>& xc) {
  const int n = xc.dim(0), d = xc.dim(1);
  std::vector<std::vector<double>> dirs;
  if (d <= n) {
    Tensor<double> cov({d, d});
    gemm_tn(xc.data(), xc.data(), cov.data(), d, n, d, false);
    for (int64_t i = 0; i < cov.size(); ++i) cov[i] /= (n - 1);
    auto [evals, evecs] = jacobi_eigh(cov);
    for (int k = 0; k < 2; ++k) {
      std::vector<double> dir(static_cast<size_t>(d));
      for (int i = 0; i < d; ++i) dir[static_cast<size_t>(i)] = evecs(i, k);
      dirs.push_back(std::move(dir));
    }
  } else {
    Tensor<double> g = gram(xc);
    for (int64_t i = 0; i < g.size(); ++i) g[i] /= (n - 1);
    auto [evals, evecs] = jacobi_eigh(g);
    for (int k = 0; k < 2; ++k) {
      std::vector<double> dir(static_cast<size_t>(d), 0.0);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) dir[static_cast<size_t>(j)] += xc(i, j) * evecs(i, k);
      }
      double norm = 0;
      for (double x : dir) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 0) {
        for (double& x : dir) x /= norm;
      }
      dirs.push_back(std::move(dir));
    }
  }
  for (auto& dir : dirs) {
    size_t arg = 0;
    for (size_t i = 1; i < dir.size(); ++i) {
      if (std::abs(dir[i]) > std::abs(dir[arg])) arg = i;
    }
    if (dir[arg] < 0) {
      for (double& x : dir) x = -x;
    }
  }
  Tensor<double> proj({n, 2});
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < 2; ++k) {
      double acc = 0;
      for (int j = 0; j < d; ++j) acc += xc(i, j) * dirs[static_cast<size_t>(k)][static_cast<size_t>(j)];
      proj(i, k) = acc;
    }
  }
  return proj;
}

}  // namespace detail

// Standardize, project to two components, and score per-shift cohesion with
// the Euclidean silhouette in the projection plane.
inline ClusterReport alpha_projection(const std::vector<AlphaRecord>& records) {
  std::map<std::string, int> group_counts;
  for (const auto& r : records) ++group_counts[r.shift];
  if (group_counts.size() < 2) {
    throw ContractViolation("alpha_projection: need at least 2 shift groups, got " +
                            std::to_string(group_counts.size()));
  }
  for (const auto& [shift, cnt] : group_counts) {
    if (cnt < 10) {
      throw ContractViolation("alpha_projection: shift '" + shift + "' has only " +
                              std::to_string(cnt) + " records (need >= 10)");
    }
  }
  const int n = static_cast<int>(records.size());
  const int d = static_cast<int>(records[0].alpha.size());
  for (const auto& r : records) {
    if (static_cast<int>(r.alpha.size()) != d) {
      throw ContractViolation("alpha_projection: inconsistent record widths");
    }
  }

  Tensor<double> x({n, d});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) x(i, j) = records[static_cast<size_t>(i)].alpha[static_cast<size_t>(j)];
  }
  detail::center_columns(x);
  bool any_variance = false;
  for (int j = 0; j < d; ++j) {
    double var = 0;
    for (int i = 0; i < n; ++i) var += x(i, j) * x(i, j);
    var /= n;
    if (var > 0) {
      any_variance = true;
      const double inv = 1.0 / std::sqrt(var);
      for (int i = 0; i < n; ++i) x(i, j) *= inv;
    }
  }
  if (!any_variance) throw DegenerateInput("alpha_projection: all records identical");

  const Tensor<double> proj = detail::pca2(x);

  ClusterReport rep;
  rep.points.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    rep.points[static_cast<size_t>(i)] =
        ClusterPoint{proj(i, 0), proj(i, 1), records[static_cast<size_t>(i)].shift, 0.0};
  }
  // silhouette in the 2-d projection
  std::map<std::string, std::vector<int>> members;
  for (int i = 0; i < n; ++i) members[rep.points[static_cast<size_t>(i)].shift].push_back(i);
  auto dist = [&](int i, int j) {
    return std::hypot(proj(i, 0) - proj(j, 0), proj(i, 1) - proj(j, 1));
  };
  double total = 0;
  std::map<std::string, double> per_shift_sum;
  for (int i = 0; i < n; ++i) {
    const std::string& own = rep.points[static_cast<size_t>(i)].shift;
    double a = 0;
    const auto& own_members = members[own];
    for (int j : own_members) {
      if (j != i) a += dist(i, j);
    }
    a /= static_cast<double>(own_members.size() - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [shift, mem] : members) {
      if (shift == own) continue;
      double s = 0;
      for (int j : mem) s += dist(i, j);
      b = std::min(b, s / static_cast<double>(mem.size()));
    }
    const double denom = std::max(a, b);
    const double sil = denom > 0 ? (b - a) / denom : 0.0;
    rep.points[static_cast<size_t>(i)].silhouette = sil;
    per_shift_sum[own] += sil;
    total += sil;
  }
  for (const auto& [shift, mem] : members) {
    rep.shift_silhouette[shift] = per_shift_sum[shift] / static_cast<double>(mem.size());
  }
  rep.mean_silhouette = total / n;
  return rep;
}

// Per-input bridge coefficients predicted for each image of a dataset.
template <typename T>
std::vector<AlphaRecord> collect_alpha_records(Model<T>& m, const ImageDataset& ds,
                                               const std::string& shift_name, int max_samples,
                                               int batch = 64) {
  if (!(m.bridge.enabled() && m.bridge.signal_bridge)) {
    throw ContractViolation("collect_alpha_records: model has no signal bridge");
  }
  const int n = max_samples > 0 ? std::min<int>(max_samples, static_cast<int>(ds.size()))
                                : static_cast<int>(ds.size());
  std::vector<AlphaRecord> out;
  out.reserve(static_cast<size_t>(n));
  for (int at = 0; at < n; at += batch) {
    const int bs = std::min(batch, n - at);
    std::vector<int> idx(static_cast<size_t>(bs));
    for (int i = 0; i < bs; ++i) idx[static_cast<size_t>(i)] = at + i;
    Tape<T> tape;
    TapeBinding<T> bind(tape, m.reg);
    Var x = tape.constant(to_input_batch<T>(ds, idx));
    const Tensor<T>& alpha = tape.value(forward_ss(tape, m, bind, x).alpha);
    for (int i = 0; i < bs; ++i) {
      AlphaRecord r;
      r.shift = shift_name;
      r.alpha.resize(static_cast<size_t>(alpha.dim(1)));
      for (int j = 0; j < alpha.dim(1); ++j) r.alpha[static_cast<size_t>(j)] = alpha(i, j);
      out.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace ssdn
