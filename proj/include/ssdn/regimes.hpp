#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ssdn/model.hpp"
#include "ssdn/nn.hpp"
#include "ssdn/shifts.hpp"

namespace ssdn {

enum class RegimeKind { Standard, JointTraining, OriginalTTT, SSDNOnePass, SSDNPlusTTT };

inline const char* regime_name(RegimeKind k) {
  switch (k) {
    case RegimeKind::Standard: return "Standard";
    case RegimeKind::JointTraining: return "JointTraining";
    case RegimeKind::OriginalTTT: return "OriginalTTT";
    case RegimeKind::SSDNOnePass: return "SSDNOnePass";
    case RegimeKind::SSDNPlusTTT: return "SSDNPlusTTT";
  }
  return "?";
}

inline RegimeKind parse_regime(const std::string& s) {
  for (RegimeKind k : {RegimeKind::Standard, RegimeKind::JointTraining, RegimeKind::OriginalTTT,
                       RegimeKind::SSDNOnePass, RegimeKind::SSDNPlusTTT}) {
    if (s == regime_name(k)) return k;
  }
  throw FormatError("unknown regime '" + s + "'");
}

inline bool regime_uses_bridges(RegimeKind k) {
  return k == RegimeKind::SSDNOnePass || k == RegimeKind::SSDNPlusTTT;
}

inline bool regime_runs_ttt(RegimeKind k) {
  return k == RegimeKind::OriginalTTT || k == RegimeKind::SSDNPlusTTT;
}

// ---------------------------------------------------------------------------
// Rotation pretext task. Angle index k means k * 90 degrees counter-clockwise:
// out[c][i][j] = in[c][j][S-1-i]; an exact pixel permutation.

template <typename U>
Tensor<U> rotate_image(const Tensor<U>& x, int angle_idx) {
  if (x.rank() != 3) {
    throw ContractViolation("rotate_image: expected [C,H,W], got " + shape_str(x.shape()));
  }
  if (x.dim(1) != x.dim(2)) {
    throw ContractViolation("rotate_image: input must be square, got " + shape_str(x.shape()));
  }
  if (angle_idx < 0 || angle_idx > 3) {
    throw ContractViolation("rotate_image: angle index " + std::to_string(angle_idx) +
                            " outside {0,1,2,3}");
  }
  const int c = x.dim(0), s = x.dim(1);
  Tensor<U> cur = x;
  for (int t = 0; t < angle_idx; ++t) {
    Tensor<U> next(x.shape());
    for (int ch = 0; ch < c; ++ch) {
      for (int i = 0; i < s; ++i) {
        for (int j = 0; j < s; ++j) next(ch, i, j) = cur(ch, j, s - 1 - i);
      }
    }
    cur = std::move(next);
  }
  return cur;
}

// The four rotations of one image, in fixed label order 0,1,2,3.
template <typename U>
std::pair<Tensor<U>, std::array<int, 4>> make_rotation_batch(const Tensor<U>& x) {
  const int c = x.dim(0), s = x.dim(1);
  Tensor<U> batch({4, c, s, s});
  for (int k = 0; k < 4; ++k) {
    Tensor<U> r = rotate_image(x, k);
    std::copy(r.data(), r.data() + r.size(), batch.data() + static_cast<int64_t>(k) * r.size());
  }
  return {std::move(batch), {0, 1, 2, 3}};
}

// ---------------------------------------------------------------------------
// Model input assembly: bytes -> [-1, 1].

template <typename T>
T normalize_pixel(uint8_t p) {
  return (static_cast<T>(p) / T(255) - T(0.5)) / T(0.5);
}

template <typename T>
Tensor<T> to_input(const Tensor<uint8_t>& img) {
  Tensor<T> out({1, img.dim(0), img.dim(1), img.dim(2)});
  for (int64_t i = 0; i < img.size(); ++i) out[i] = normalize_pixel<T>(img[i]);
  return out;
}

template <typename T>
Tensor<T> to_input_batch(const ImageDataset& ds, const std::vector<int>& indices) {
  if (indices.empty()) throw ContractViolation("to_input_batch: empty index list");
  const auto& first = ds.images[static_cast<size_t>(indices[0])];
  Tensor<T> out({static_cast<int>(indices.size()), first.dim(0), first.dim(1), first.dim(2)});
  int64_t off = 0;
  for (int idx : indices) {
    const auto& img = ds.images[static_cast<size_t>(idx)];
    for (int64_t i = 0; i < img.size(); ++i) out[off + i] = normalize_pixel<T>(img[i]);
    off += img.size();
  }
  return out;
}

// All four rotations of each selected image, grouped per image.
template <typename T>
std::pair<Tensor<T>, std::vector<int>> to_rotation_input_batch(const ImageDataset& ds,
                                                               const std::vector<int>& indices) {
  if (indices.empty()) throw ContractViolation("to_rotation_input_batch: empty index list");
  const auto& first = ds.images[static_cast<size_t>(indices[0])];
  Tensor<T> out(
      {static_cast<int>(indices.size()) * 4, first.dim(0), first.dim(1), first.dim(2)});
  std::vector<int> labels;
  labels.reserve(indices.size() * 4);
  int64_t off = 0;
  for (int idx : indices) {
    for (int k = 0; k < 4; ++k) {
      Tensor<uint8_t> r = rotate_image(ds.images[static_cast<size_t>(idx)], k);
      for (int64_t i = 0; i < r.size(); ++i) out[off + i] = normalize_pixel<T>(r[i]);
      off += r.size();
      labels.push_back(k);
    }
  }
  return {std::move(out), std::move(labels)};
}

// ---------------------------------------------------------------------------
// Joint training.

struct TrainOpts {
  int steps = 2000;
  int batch = 8;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lambda = 1.0;  // weight of the self-supervised term
  bool cosine = true;
  uint64_t seed = 1;
  // test hook: evaluate the self-supervised loss even when lambda == 0
  bool compute_ss_when_unweighted = false;
  // restrict updates; empty means all groups
  std::function<bool(const std::string&, ParamGroup)> update_filter;
  int log_every = 0;  // 0 silences progress
};

struct TrainResult {
  std::vector<double> loss_main;
  std::vector<double> loss_ss;  // NaN entries when the ss pass was skipped
  int steps_run = 0;
};

inline double cosine_lr(double lr0, int step, int total) {
  if (total <= 1) return lr0;
  return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * step / total));
}

// One summed objective per step: main loss on the clean minibatch plus
// lambda times the rotation loss on the four rotations of the same images.
template <typename T>
TrainResult joint_train(Model<T>& m, const ImageDataset& train, const TrainOpts& opts) {
  if (train.images.empty()) throw ContractViolation("joint_train: empty dataset");
  train.validate();
  TrainResult res;
  if (opts.steps == 0) return res;
  if (opts.steps < 0) throw ContractViolation("joint_train: negative step count");

  Rng rng(mix64(opts.seed, fnv1a64("train")));
  SGDState<T> st;
  st.lr = static_cast<T>(opts.lr);
  st.momentum = static_cast<T>(opts.momentum);
  st.weight_decay = static_cast<T>(opts.weight_decay);
  std::function<bool(const std::string&, ParamGroup)> filter = opts.update_filter;
  if (!filter) filter = [](const std::string&, ParamGroup) { return true; };

  for (int step = 0; step < opts.steps; ++step) {
    st.lr = static_cast<T>(opts.cosine ? cosine_lr(opts.lr, step, opts.steps) : opts.lr);
    std::vector<int> idx(static_cast<size_t>(opts.batch));
    std::vector<int> labels(static_cast<size_t>(opts.batch));
    for (int i = 0; i < opts.batch; ++i) {
      idx[static_cast<size_t>(i)] =
          static_cast<int>(rng.uniform_int(static_cast<uint64_t>(train.images.size())));
      labels[static_cast<size_t>(i)] = train.labels[static_cast<size_t>(idx[i])];
    }

    Tape<T> tape;
    TapeBinding<T> bind(tape, m.reg);
    Var x = tape.constant(to_input_batch<T>(train, idx));
    Var lm = softmax_cross_entropy(tape, forward_main(tape, m, bind, x), labels);
    Var total = lm;
    double ls_val = std::nan("");
    if (opts.lambda != 0.0 || opts.compute_ss_when_unweighted) {
      auto [rx, rlabels] = to_rotation_input_batch<T>(train, idx);
      Var xr = tape.constant(std::move(rx));
      SsOutput<T> ss = forward_ss(tape, m, bind, xr);
      Var ls = softmax_cross_entropy(tape, ss.rotation_logits, rlabels);
      ls_val = tape.value(ls)[0];
      total = add(tape, lm, scale(tape, ls, static_cast<T>(opts.lambda)));
    }
    res.loss_main.push_back(tape.value(lm)[0]);
    res.loss_ss.push_back(ls_val);

    NamedGrads<T> grads = named_grads(tape.backward(total), bind);
    sgd_step_filtered(m.reg, grads, st, filter);
    ++res.steps_run;
    if (opts.log_every > 0 && (step + 1) % opts.log_every == 0) {
      std::fprintf(stderr, "  step %d/%d  l_m %.4f  l_s %.4f\n", step + 1, opts.steps,
                   res.loss_main.back(), res.loss_ss.back());
    }
  }
  return res;
}

// Supervised-only training: the same loop with the rotation term absent.
template <typename T>
TrainResult train_supervised(Model<T>& m, const ImageDataset& train, TrainOpts opts) {
  opts.lambda = 0.0;
  opts.compute_ss_when_unweighted = false;
  return joint_train(m, train, opts);
}

// ---------------------------------------------------------------------------
// Test-time training.

struct TTTConfig {
  enum class Mode { Single, Online };
  int k = 16;
  double lr = 0.001;
  double momentum = 0.0;
  double weight_decay = 0.0;
  Mode mode = Mode::Single;
  std::set<ParamGroup> update_groups = {ParamGroup::encoder_shared, ParamGroup::encoder_ss,
                                        ParamGroup::ss_head};
};

template <typename T>
struct TTTResult {
  int predicted = -1;
  double ss_loss_before = 0.0;
  double ss_loss_after = 0.0;
  Tensor<T> logits;
};

// K gradient steps on the rotation loss of this one image, then a prediction
// with the updated parameters. Single mode puts every touched parameter and
// optimizer buffer back afterwards; Online keeps the updates.
template <typename T>
TTTResult<T> ttt_adapt(Model<T>& m, const Tensor<uint8_t>& image, const TTTConfig& cfg,
                       SGDState<T>* persistent_state = nullptr) {
  if (cfg.k < 0) throw ContractViolation("ttt_adapt: negative step count");
  TTTResult<T> res;

  auto [rx_bytes, rlabels] = make_rotation_batch(image);
  Tensor<T> rx({4, image.dim(0), image.dim(1), image.dim(2)});
  for (int64_t i = 0; i < rx_bytes.size(); ++i) rx[i] = normalize_pixel<T>(rx_bytes[i]);
  const std::vector<int> labels(rlabels.begin(), rlabels.end());

  auto ss_loss = [&](bool with_grads, NamedGrads<T>* out_grads) {
    Tape<T> tape;
    TapeBinding<T> bind(tape, m.reg);
    Var xr = tape.constant(rx);
    SsOutput<T> ss = forward_ss(tape, m, bind, xr);
    Var ls = softmax_cross_entropy(tape, ss.rotation_logits, labels);
    const double v = tape.value(ls)[0];
    if (with_grads) *out_grads = named_grads(tape.backward(ls), bind);
    return v;
  };

  SGDState<T> local;
  local.lr = static_cast<T>(cfg.lr);
  local.momentum = static_cast<T>(cfg.momentum);
  local.weight_decay = static_cast<T>(cfg.weight_decay);
  SGDState<T>& st = persistent_state ? *persistent_state : local;

  Snapshot<T> snap;
  const bool restore_after = cfg.k > 0 && cfg.mode == TTTConfig::Mode::Single;
  if (restore_after) snap = snapshot(m.reg, cfg.update_groups, &st);

  if (cfg.k > 0) {
    for (int i = 0; i < cfg.k; ++i) {
      NamedGrads<T> grads;
      const double v = ss_loss(true, &grads);
      if (i == 0) res.ss_loss_before = v;
      sgd_step(m.reg, grads, st, cfg.update_groups);
    }
    res.ss_loss_after = ss_loss(false, nullptr);
  } else {
    res.ss_loss_before = res.ss_loss_after = ss_loss(false, nullptr);
  }

  {
    Tape<T> tape;
    TapeBinding<T> bind(tape, m.reg);
    Var x = tape.constant(to_input<T>(image));
    Var logits = forward_main(tape, m, bind, x);
    res.logits = tape.value(logits);
    int best = 0;
    for (int c = 1; c < res.logits.dim(1); ++c) {
      if (res.logits(0, c) > res.logits(0, best)) best = c;
    }
    res.predicted = best;
  }

  if (restore_after) restore(m.reg, snap, &st);
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalOpts {
  TTTConfig ttt;
  int max_samples = 0;  // 0 = whole set
  int batch = 64;
  uint64_t shuffle_seed = 7;  // Online-mode stream order
  bool compute_ss_error = true;
};

struct Metrics {
  double main_error_pct = 0.0;
  double ss_error_pct = 0.0;
  int samples = 0;
};

// Aggregation core, separated so prediction sources can be stubbed.
template <typename Pred>
double error_percent(const ImageDataset& ds, int max_samples, Pred&& predict) {
  const int n = max_samples > 0 ? std::min<int>(max_samples, static_cast<int>(ds.size()))
                                : static_cast<int>(ds.size());
  if (n == 0) throw ContractViolation("error_percent: empty dataset");
  int wrong = 0;
  for (int i = 0; i < n; ++i) {
    if (predict(i) != ds.labels[static_cast<size_t>(i)]) ++wrong;
  }
  return 100.0 * wrong / n;
}

template <typename T>
std::vector<int> predict_main_batched(Model<T>& m, const ImageDataset& ds, int max_samples,
                                      int batch) {
  const int n = max_samples > 0 ? std::min<int>(max_samples, static_cast<int>(ds.size()))
                                : static_cast<int>(ds.size());
  std::vector<int> preds(static_cast<size_t>(n));
  for (int at = 0; at < n; at += batch) {
    const int bs = std::min(batch, n - at);
    std::vector<int> idx(static_cast<size_t>(bs));
    for (int i = 0; i < bs; ++i) idx[static_cast<size_t>(i)] = at + i;
    Tape<T> tape;
    TapeBinding<T> bind(tape, m.reg);
    Var x = tape.constant(to_input_batch<T>(ds, idx));
    const Tensor<T>& logits = tape.value(forward_main(tape, m, bind, x));
    for (int i = 0; i < bs; ++i) {
      int best = 0;
      for (int c = 1; c < logits.dim(1); ++c) {
        if (logits(i, c) > logits(i, best)) best = c;
      }
      preds[static_cast<size_t>(at + i)] = best;
    }
  }
  return preds;
}

// Rotation error over the four rotations of each image, with the current
// parameters.
template <typename T>
double rotation_error_percent(Model<T>& m, const ImageDataset& ds, int max_samples, int batch) {
  const int n = max_samples > 0 ? std::min<int>(max_samples, static_cast<int>(ds.size()))
                                : static_cast<int>(ds.size());
  if (n == 0) throw ContractViolation("rotation_error_percent: empty dataset");
  int wrong = 0, total = 0;
  const int per = std::max(1, batch / 4);
  for (int at = 0; at < n; at += per) {
    const int bs = std::min(per, n - at);
    std::vector<int> idx(static_cast<size_t>(bs));
    for (int i = 0; i < bs; ++i) idx[static_cast<size_t>(i)] = at + i;
    auto [rx, rlabels] = to_rotation_input_batch<T>(ds, idx);
    Tape<T> tape;
    TapeBinding<T> bind(tape, m.reg);
    Var x = tape.constant(std::move(rx));
    const Tensor<T>& logits = tape.value(forward_ss(tape, m, bind, x).rotation_logits);
    for (int i = 0; i < logits.dim(0); ++i) {
      int best = 0;
      for (int c = 1; c < logits.dim(1); ++c) {
        if (logits(i, c) > logits(i, best)) best = c;
      }
      if (best != rlabels[static_cast<size_t>(i)]) ++wrong;
      ++total;
    }
  }
  return 100.0 * wrong / total;
}

// Per-sample loop over the test set; regimes that adapt run ttt_adapt with
// the configured mode. Online order is a fixed seeded shuffle of the set.
template <typename T>
Metrics evaluate(Model<T>& m, const ImageDataset& ds, RegimeKind regime, const EvalOpts& opts) {
  ds.validate();
  if (regime_uses_bridges(regime) != m.bridge.enabled()) {
    throw ContractViolation(std::string("evaluate: regime ") + regime_name(regime) +
                            (m.bridge.enabled() ? " on a bridged model" : " without bridges"));
  }
  Metrics out;
  const int n = opts.max_samples > 0 ? std::min<int>(opts.max_samples, static_cast<int>(ds.size()))
                                     : static_cast<int>(ds.size());
  out.samples = n;
  if (opts.compute_ss_error) {
    out.ss_error_pct = rotation_error_percent(m, ds, n, opts.batch);
  }

  if (!regime_runs_ttt(regime)) {
    std::vector<int> preds = predict_main_batched(m, ds, n, opts.batch);
    out.main_error_pct = error_percent(ds, n, [&](int i) { return preds[static_cast<size_t>(i)]; });
    return out;
  }

  if (opts.ttt.mode == TTTConfig::Mode::Single) {
    out.main_error_pct = error_percent(ds, n, [&](int i) {
      return ttt_adapt(m, ds.images[static_cast<size_t>(i)], opts.ttt).predicted;
    });
    return out;
  }

  // Online: persistent adaptation along a seeded stream.
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(opts.shuffle_seed);
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(i + 1)));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  SGDState<T> stream_state;
  stream_state.lr = static_cast<T>(opts.ttt.lr);
  stream_state.momentum = static_cast<T>(opts.ttt.momentum);
  stream_state.weight_decay = static_cast<T>(opts.ttt.weight_decay);
  std::vector<int> preds(static_cast<size_t>(n));
  for (int i : order) {
    preds[static_cast<size_t>(i)] =
        ttt_adapt(m, ds.images[static_cast<size_t>(i)], opts.ttt, &stream_state).predicted;
  }
  out.main_error_pct = error_percent(ds, n, [&](int i) { return preds[static_cast<size_t>(i)]; });
  return out;
}

}  // namespace ssdn
