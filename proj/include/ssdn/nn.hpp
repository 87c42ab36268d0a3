#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ssdn/ops.hpp"
#include "ssdn/rng.hpp"
#include "ssdn/tape.hpp"

namespace ssdn {

enum class ParamGroup {
  encoder_shared,
  encoder_ss,
  encoder_main_derived,
  ss_head,
  main_head,
  bridge_data,
  bridge_predictor,
};

inline const char* param_group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::encoder_shared: return "encoder_shared";
    case ParamGroup::encoder_ss: return "encoder_ss";
    case ParamGroup::encoder_main_derived: return "encoder_main_derived";
    case ParamGroup::ss_head: return "ss_head";
    case ParamGroup::main_head: return "main_head";
    case ParamGroup::bridge_data: return "bridge_data";
    case ParamGroup::bridge_predictor: return "bridge_predictor";
  }
  return "?";
}

inline ParamGroup parse_param_group(const std::string& s) {
  for (ParamGroup g : {ParamGroup::encoder_shared, ParamGroup::encoder_ss,
                       ParamGroup::encoder_main_derived, ParamGroup::ss_head,
                       ParamGroup::main_head, ParamGroup::bridge_data,
                       ParamGroup::bridge_predictor}) {
    if (s == param_group_name(g)) return g;
  }
  throw FormatError("unknown parameter group '" + s + "'");
}

// Ordered, name-unique store of trainable tensors, each tagged with the
// group it belongs to.
template <typename T>
class ParamRegistry {
 public:
  struct Param {
    std::string name;
    Tensor<T> value;
    ParamGroup group;
  };

  void add(const std::string& name, Tensor<T> value, ParamGroup group) {
    if (index_.count(name)) {
      throw ContractViolation("ParamRegistry: duplicate parameter '" + name + "'");
    }
    index_[name] = static_cast<int>(params_.size());
    params_.push_back(Param{name, std::move(value), group});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& value(const std::string& name) { return params_[idx(name)].value; }
  const Tensor<T>& value(const std::string& name) const { return params_[idx(name)].value; }
  ParamGroup group(const std::string& name) const { return params_[idx(name)].group; }

  const std::vector<Param>& params() const { return params_; }
  std::vector<Param>& params() { return params_; }
  size_t count() const { return params_.size(); }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  size_t idx(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw ContractViolation("ParamRegistry: unknown parameter '" + name + "'");
    }
    return static_cast<size_t>(it->second);
  }

  std::vector<Param> params_;
  std::unordered_map<std::string, int> index_;
};

// Lazily binds registry entries as leaves on one tape, so gradients can be
// keyed back by name afterwards.
template <typename T>
class TapeBinding {
 public:
  TapeBinding(Tape<T>& tape, const ParamRegistry<T>& reg) : tape_(&tape), reg_(&reg) {}

  Var get(const std::string& name) {
    auto it = map_.find(name);
    if (it != map_.end()) return it->second;
    Var v = tape_->leaf(reg_->value(name), true);
    map_[name] = v;
    return v;
  }

  const std::unordered_map<std::string, Var>& bound() const { return map_; }

 private:
  Tape<T>* tape_;
  const ParamRegistry<T>* reg_;
  std::unordered_map<std::string, Var> map_;
};

template <typename T>
using NamedGrads = std::unordered_map<std::string, Tensor<T>>;

template <typename T>
NamedGrads<T> named_grads(const Gradients<T>& grads, const TapeBinding<T>& binding) {
  NamedGrads<T> out;
  for (const auto& [name, var] : binding.bound()) {
    const Tensor<T>* g = grads.find(var);
    if (g) out.emplace(name, *g);
  }
  return out;
}

// Per-sample, per-group standardization followed by a per-channel affine.
template <typename T>
Var group_norm(Tape<T>& tape, Var x, int num_groups, Var gamma, Var beta, T eps = T(1e-5)) {
  const Tensor<T>& xv = tape.value(x);
  if (xv.rank() != 4) {
    throw ContractViolation("group_norm: expected [N,C,H,W], got " + shape_str(xv.shape()));
  }
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (num_groups < 1 || c % num_groups != 0) {
    throw ContractViolation("group_norm: " + std::to_string(c) + " channels not divisible into " +
                            std::to_string(num_groups) + " groups");
  }
  const Tensor<T>& gv = tape.value(gamma);
  const Tensor<T>& bv = tape.value(beta);
  if (gv.rank() != 1 || gv.dim(0) != c || bv.rank() != 1 || bv.dim(0) != c) {
    throw ContractViolation("group_norm: gamma/beta must be [C]");
  }
  const int cg = c / num_groups;
  const int64_t spatial = static_cast<int64_t>(h) * w;
  const int64_t gsize = cg * spatial;

  Tensor<T> xhat(xv.shape());
  Tensor<T> inv_std({n, num_groups});
  Tensor<T> out(xv.shape());
  for (int i = 0; i < n; ++i) {
    for (int g = 0; g < num_groups; ++g) {
      const T* src = xv.data() + (static_cast<size_t>(i) * c + g * cg) * spatial;
      T mean = 0;
      for (int64_t k = 0; k < gsize; ++k) mean += src[k];
      mean /= static_cast<T>(gsize);
      T var = 0;
      for (int64_t k = 0; k < gsize; ++k) {
        const T d = src[k] - mean;
        var += d * d;
      }
      var /= static_cast<T>(gsize);
      const T istd = T(1) / std::sqrt(var + eps);
      inv_std(i, g) = istd;
      T* xh = xhat.data() + (static_cast<size_t>(i) * c + g * cg) * spatial;
      T* dst = out.data() + (static_cast<size_t>(i) * c + g * cg) * spatial;
      for (int cc = 0; cc < cg; ++cc) {
        const int ch = g * cg + cc;
        const T ga = gv(ch), be = bv(ch);
        for (int64_t k = 0; k < spatial; ++k) {
          const T v = (src[cc * spatial + k] - mean) * istd;
          xh[cc * spatial + k] = v;
          dst[cc * spatial + k] = ga * v + be;
        }
      }
    }
  }

  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return tape.make_node(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, n, c, num_groups, cg, spatial, gsize, xhat,
       inv_std](Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& gv = t.value(Var{ig});
        if (t.requires_grad(Var{ig}) || t.requires_grad(Var{ib})) {
          Tensor<T> dgamma({c});
          Tensor<T> dbeta({c});
          for (int i = 0; i < n; ++i) {
            for (int ch = 0; ch < c; ++ch) {
              const T* gp = g.data() + (static_cast<size_t>(i) * c + ch) * spatial;
              const T* xh = xhat.data() + (static_cast<size_t>(i) * c + ch) * spatial;
              T sg = 0, sb = 0;
              for (int64_t k = 0; k < spatial; ++k) {
                sg += gp[k] * xh[k];
                sb += gp[k];
              }
              dgamma(ch) += sg;
              dbeta(ch) += sb;
            }
          }
          t.accumulate(ig, dgamma);
          t.accumulate(ib, dbeta);
        }
        if (t.requires_grad(Var{ix})) {
          Tensor<T> dx(xhat.shape());
          for (int i = 0; i < n; ++i) {
            for (int grp = 0; grp < num_groups; ++grp) {
              const T istd = inv_std(i, grp);
              const T* gp = g.data() + (static_cast<size_t>(i) * c + grp * cg) * spatial;
              const T* xh = xhat.data() + (static_cast<size_t>(i) * c + grp * cg) * spatial;
              T mean_u = 0, mean_ux = 0;
              for (int cc = 0; cc < cg; ++cc) {
                const T ga = gv(grp * cg + cc);
                for (int64_t k = 0; k < spatial; ++k) {
                  const T u = gp[cc * spatial + k] * ga;
                  mean_u += u;
                  mean_ux += u * xh[cc * spatial + k];
                }
              }
              mean_u /= static_cast<T>(gsize);
              mean_ux /= static_cast<T>(gsize);
              T* dst = dx.data() + (static_cast<size_t>(i) * c + grp * cg) * spatial;
              for (int cc = 0; cc < cg; ++cc) {
                const T ga = gv(grp * cg + cc);
                for (int64_t k = 0; k < spatial; ++k) {
                  const T u = gp[cc * spatial + k] * ga;
                  dst[cc * spatial + k] = istd * (u - mean_u - xh[cc * spatial + k] * mean_ux);
                }
              }
            }
          }
          t.accumulate(ix, dx);
        }
      });
}

// Parameter handles for one pre-activation residual block.
struct BlockVars {
  Var gn1_gamma, gn1_beta;
  Var conv1_w;
  Var gn2_gamma, gn2_beta;
  Var conv2_w;
  Var skip_w;  // invalid when the skip is an identity
};

// norm -> relu -> conv3x3(stride) -> norm -> relu -> conv3x3, plus the skip.
// A 1x1 projection (applied to the pre-activated input) carries the skip
// whenever the caller supplies one.
template <typename T>
Var residual_block_forward(Tape<T>& tape, Var x, const BlockVars& p, int stride, int norm_groups,
                           T eps = T(1e-5)) {
  Var h = group_norm(tape, x, norm_groups, p.gn1_gamma, p.gn1_beta, eps);
  h = relu(tape, h);
  Var skip = p.skip_w.valid() ? conv2d(tape, h, p.skip_w, stride, 0) : x;
  Var y = conv2d(tape, h, p.conv1_w, stride, 1);
  y = group_norm(tape, y, norm_groups, p.gn2_gamma, p.gn2_beta, eps);
  y = relu(tape, y);
  y = conv2d(tape, y, p.conv2_w, 1, 1);
  return add(tape, y, skip);
}

template <typename T>
struct SGDState {
  T lr = T(0.01);
  T momentum = T(0.9);
  T weight_decay = T(5e-4);
  std::unordered_map<std::string, Tensor<T>> velocity;
};

// v <- mu*v + g + wd*p ; p <- p - lr*v, applied in registry order. A selected
// parameter with no gradient entry is treated as having a zero gradient.
template <typename T, typename Pred>
void sgd_step_filtered(ParamRegistry<T>& reg, const NamedGrads<T>& grads, SGDState<T>& st,
                       Pred&& selected) {
  for (auto& p : reg.params()) {
    if (!selected(p.name, p.group)) continue;
    auto git = grads.find(p.name);
    Tensor<T>& v = st.velocity.try_emplace(p.name, Tensor<T>(p.value.shape())).first->second;
    if (!v.same_shape(p.value)) {
      throw ContractViolation("sgd_step: velocity shape mismatch for '" + p.name + "'");
    }
    const Tensor<T>* g = git == grads.end() ? nullptr : &git->second;
    if (g && !g->same_shape(p.value)) {
      throw ContractViolation("sgd_step: gradient shape mismatch for '" + p.name + "'");
    }
    for (int64_t i = 0; i < p.value.size(); ++i) {
      const T gi = (g ? (*g)[i] : T(0)) + st.weight_decay * p.value[i];
      v[i] = st.momentum * v[i] + gi;
      p.value[i] -= st.lr * v[i];
    }
  }
}

template <typename T>
void sgd_step(ParamRegistry<T>& reg, const NamedGrads<T>& grads, SGDState<T>& st,
              const std::set<ParamGroup>& groups) {
  sgd_step_filtered(reg, grads, st,
                    [&](const std::string&, ParamGroup g) { return groups.count(g) != 0; });
}

inline std::set<ParamGroup> all_param_groups() {
  return {ParamGroup::encoder_shared, ParamGroup::encoder_ss, ParamGroup::encoder_main_derived,
          ParamGroup::ss_head,        ParamGroup::main_head,  ParamGroup::bridge_data,
          ParamGroup::bridge_predictor};
}

// Deep copy of selected registry entries; restore is bitwise. Velocity
// buffers are captured alongside when an optimizer state is supplied.
template <typename T>
struct Snapshot {
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool has_velocity = false;
    Tensor<T> velocity;
  };
  std::vector<Entry> entries;
  bool captured_optimizer = false;
};

template <typename T>
Snapshot<T> snapshot(const ParamRegistry<T>& reg, const std::set<ParamGroup>& groups,
                     const SGDState<T>* opt = nullptr) {
  Snapshot<T> snap;
  snap.captured_optimizer = opt != nullptr;
  for (const auto& p : reg.params()) {
    if (!groups.count(p.group)) continue;
    typename Snapshot<T>::Entry e;
    e.name = p.name;
    e.value = p.value;
    if (opt) {
      auto it = opt->velocity.find(p.name);
      if (it != opt->velocity.end()) {
        e.has_velocity = true;
        e.velocity = it->second;
      }
    }
    snap.entries.push_back(std::move(e));
  }
  return snap;
}

template <typename T>
void restore(ParamRegistry<T>& reg, const Snapshot<T>& snap, SGDState<T>* opt = nullptr) {
  for (const auto& e : snap.entries) {
    if (!reg.contains(e.name)) {
      throw ContractViolation("restore: snapshot entry '" + e.name + "' missing from registry");
    }
    reg.value(e.name) = e.value;
    if (snap.captured_optimizer && opt) {
      if (e.has_velocity) {
        opt->velocity[e.name] = e.velocity;
      } else {
        opt->velocity.erase(e.name);
      }
    }
  }
}

struct ArchConfig {
  int in_channels = 1;
  int c0_channels = 8;
  int num_groups = 4;
  int blocks_per_group = 1;
  std::vector<int> group_widths = {8, 16, 16, 32};
  int num_classes = 4;
  int num_rotation_classes = 4;
  int norm_groups = 4;

  void validate() const {
    if (static_cast<int>(group_widths.size()) != num_groups) {
      throw ContractViolation("ArchConfig: " + std::to_string(group_widths.size()) +
                              " widths for " + std::to_string(num_groups) + " groups");
    }
    for (int v : {in_channels, c0_channels, num_groups, blocks_per_group, num_classes,
                  num_rotation_classes, norm_groups}) {
      if (v <= 0) throw ContractViolation("ArchConfig: all fields must be positive");
    }
    for (int w : group_widths) {
      if (w <= 0) throw ContractViolation("ArchConfig: widths must be positive");
      if (w % norm_groups != 0) {
        throw ContractViolation("ArchConfig: width " + std::to_string(w) +
                                " not divisible by norm_groups " + std::to_string(norm_groups));
      }
    }
    if (c0_channels % norm_groups != 0) {
      throw ContractViolation("ArchConfig: c0_channels not divisible by norm_groups");
    }
  }
};

template <typename T>
void fill_normal_scaled(Tensor<T>& t, double stddev, Rng& rng) {
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal() * stddev);
}

template <typename T>
void fill_kaiming(Tensor<T>& t, int fan_in, Rng& rng) {
  fill_normal_scaled(t, std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

template <typename T>
void fill_identity(Tensor<T>& t) {
  if (t.rank() != 2 || t.dim(0) != t.dim(1)) {
    throw ContractViolation("fill_identity: expected square matrix, got " + shape_str(t.shape()));
  }
  for (int i = 0; i < t.dim(0); ++i) {
    for (int j = 0; j < t.dim(1); ++j) t(i, j) = i == j ? T(1) : T(0);
  }
}

}  // namespace ssdn
