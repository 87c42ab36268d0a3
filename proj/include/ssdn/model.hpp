#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ssdn/checkpoint.hpp"
#include "ssdn/nn.hpp"

namespace ssdn {

// Which encoder parts get a split (self-supervised source + synthesized main
// copy), and which bridge terms are active.
struct BridgeConfig {
  bool bridge_c0 = false;
  bool bridge_g1 = true;
  bool bridge_g2 = false;
  bool data_bridge = true;
  bool signal_bridge = true;

  bool any_part() const { return bridge_c0 || bridge_g1 || bridge_g2; }
  bool enabled() const { return (data_bridge || signal_bridge) && any_part(); }

  static BridgeConfig none() { return BridgeConfig{false, false, false, false, false}; }

  void validate() const {
    if ((data_bridge || signal_bridge) && !any_part()) {
      throw ContractViolation("BridgeConfig: a bridge is enabled but no part is flagged");
    }
  }
};

// One synthesized conv: its source filters, its alpha matrix size, and where
// its per-input alpha block lives in the predictor output.
struct BridgedConvInfo {
  std::string conv_name;
  int filters = 0;
  int alpha_offset = 0;
};

namespace plan {

struct BlockPlan {
  std::string prefix;  // e.g. "g1.b0"
  int group_index = 0;
  int in_w = 0, out_w = 0, stride = 1;
  bool proj = false;
  bool bridged = false;
};

struct ModelPlan {
  bool c0_bridged = false;
  std::vector<BlockPlan> blocks;
  int final_width = 0;
};

inline ModelPlan make_plan(const ArchConfig& arch, const BridgeConfig& bridge) {
  ModelPlan p;
  p.c0_bridged = bridge.enabled() && bridge.bridge_c0;
  int in_w = arch.c0_channels;
  for (int g = 0; g < arch.num_groups; ++g) {
    const int out_w = arch.group_widths[static_cast<size_t>(g)];
    const bool part_bridged =
        bridge.enabled() && ((g == 0 && bridge.bridge_g1) || (g == 1 && bridge.bridge_g2));
    for (int b = 0; b < arch.blocks_per_group; ++b) {
      BlockPlan bp;
      bp.prefix = "g" + std::to_string(g + 1) + ".b" + std::to_string(b);
      bp.group_index = g;
      bp.in_w = b == 0 ? in_w : out_w;
      bp.out_w = out_w;
      bp.stride = (b == 0 && g > 0) ? 2 : 1;
      bp.proj = bp.stride > 1 || bp.in_w != bp.out_w;
      bp.bridged = part_bridged;
      p.blocks.push_back(std::move(bp));
    }
    in_w = out_w;
  }
  p.final_width = in_w;
  return p;
}

}  // namespace plan

template <typename T>
struct Model {
  ArchConfig arch;
  BridgeConfig bridge;
  ParamRegistry<T> reg;
  std::vector<BridgedConvInfo> bridged;  // forward order
  int alpha_dim = 0;
};

namespace detail {

inline std::string alpha_name(const std::string& conv_name) {
  return "bridge." + conv_name + ".alpha";
}

template <typename T>
void add_conv_param(Model<T>& m, const std::string& name, int out_ch, int in_ch, int k,
                    bool part_bridged, uint64_t seed, int* alpha_offset) {
  Tensor<T> w({out_ch, in_ch, k, k});
  Rng rng(mix64(seed, fnv1a64(name)));
  fill_kaiming(w, in_ch * k * k, rng);
  m.reg.add(name, std::move(w), part_bridged ? ParamGroup::encoder_ss : ParamGroup::encoder_shared);
  if (part_bridged) {
    if (m.bridge.data_bridge) {
      Tensor<T> a({out_ch, out_ch});
      fill_identity(a);
      m.reg.add(alpha_name(name), std::move(a), ParamGroup::bridge_data);
    }
    m.bridged.push_back(BridgedConvInfo{name, out_ch, *alpha_offset});
    *alpha_offset += out_ch * out_ch;
  }
}

template <typename T>
void add_gn_params(Model<T>& m, const std::string& prefix, int channels) {
  m.reg.add(prefix + ".g", Tensor<T>::full({channels}, T(1)), ParamGroup::encoder_shared);
  m.reg.add(prefix + ".b", Tensor<T>({channels}), ParamGroup::encoder_shared);
}

template <typename T>
void add_linear_params(Model<T>& m, const std::string& prefix, int out, int in, ParamGroup group,
                       bool zero_init, uint64_t seed) {
  Tensor<T> w({out, in});
  if (!zero_init) {
    Rng rng(mix64(seed, fnv1a64(prefix + ".w")));
    fill_kaiming(w, in, rng);
  }
  m.reg.add(prefix + ".w", std::move(w), group);
  m.reg.add(prefix + ".b", Tensor<T>({out}), group);
}

}  // namespace detail

// Deterministic in (configs, seed); each tensor draws from a substream keyed
// by its name, so parameters shared between configurations initialize
// identically. Bridge matrices start at the identity and the alpha predictor
// at zero: the bridged model's first forward is exactly the shared-encoder
// forward.
template <typename T>
Model<T> build_model(const ArchConfig& arch, const BridgeConfig& bridge, uint64_t seed) {
  arch.validate();
  bridge.validate();
  Model<T> m;
  m.arch = arch;
  m.bridge = bridge;
  const plan::ModelPlan pl = plan::make_plan(arch, bridge);

  int alpha_offset = 0;
  detail::add_conv_param(m, "c0.w", arch.c0_channels, arch.in_channels, 3, pl.c0_bridged, seed,
                         &alpha_offset);
  for (const auto& bp : pl.blocks) {
    detail::add_gn_params(m, bp.prefix + ".gn1", bp.in_w);
    detail::add_conv_param(m, bp.prefix + ".conv1.w", bp.out_w, bp.in_w, 3, bp.bridged, seed,
                           &alpha_offset);
    detail::add_gn_params(m, bp.prefix + ".gn2", bp.out_w);
    detail::add_conv_param(m, bp.prefix + ".conv2.w", bp.out_w, bp.out_w, 3, bp.bridged, seed,
                           &alpha_offset);
    if (bp.proj) {
      detail::add_conv_param(m, bp.prefix + ".skip.w", bp.out_w, bp.in_w, 1, bp.bridged, seed,
                             &alpha_offset);
    }
  }
  detail::add_gn_params(m, "final.gn", pl.final_width);
  detail::add_linear_params(m, "head.main", arch.num_classes, pl.final_width,
                            ParamGroup::main_head, false, seed);
  detail::add_linear_params(m, "head.rot", arch.num_rotation_classes, pl.final_width,
                            ParamGroup::ss_head, false, seed);
  m.alpha_dim = alpha_offset;
  if (bridge.enabled() && bridge.signal_bridge) {
    detail::add_linear_params(m, "head.alpha", m.alpha_dim, pl.final_width,
                              ParamGroup::bridge_predictor, true, seed);
  }
  return m;
}

// derived[i] = sum_j alpha[i,j] * source[j], as one differentiable node
// chain; gradient reaches both the alpha matrix and the source filters.
template <typename T>
Var bridge_weights(Tape<T>& tape, Var alpha_total, Var source_filters) {
  const Tensor<T>& a = tape.value(alpha_total);
  const Tensor<T>& s = tape.value(source_filters);
  if (a.rank() != 2 || s.rank() != 4 || a.dim(1) != s.dim(0)) {
    throw ContractViolation("bridge_weights: alpha " + shape_str(a.shape()) +
                            " incompatible with source filters " + shape_str(s.shape()));
  }
  const int j = s.dim(0);
  const int rest = static_cast<int>(s.size() / j);
  Var src2d = reshape(tape, source_filters, {j, rest});
  Var der = matmul(tape, alpha_total, src2d);
  return reshape(tape, der, {a.dim(0), s.dim(1), s.dim(2), s.dim(3)});
}

using WeightOverride = std::unordered_map<std::string, Var>;

namespace detail {

template <typename T>
Var conv_weight(const Model<T>&, TapeBinding<T>& bind, const WeightOverride& ovr,
                const std::string& name) {
  auto it = ovr.find(name);
  return it == ovr.end() ? bind.get(name) : it->second;
}

template <typename T>
BlockVars block_vars(const Model<T>& m, TapeBinding<T>& bind, const WeightOverride& ovr,
                     const plan::BlockPlan& bp) {
  BlockVars v;
  v.gn1_gamma = bind.get(bp.prefix + ".gn1.g");
  v.gn1_beta = bind.get(bp.prefix + ".gn1.b");
  v.conv1_w = conv_weight(m, bind, ovr, bp.prefix + ".conv1.w");
  v.gn2_gamma = bind.get(bp.prefix + ".gn2.g");
  v.gn2_beta = bind.get(bp.prefix + ".gn2.b");
  v.conv2_w = conv_weight(m, bind, ovr, bp.prefix + ".conv2.w");
  if (bp.proj) v.skip_w = conv_weight(m, bind, ovr, bp.prefix + ".skip.w");
  return v;
}

}  // namespace detail

// C0 plus the first two groups: the region a bridge may rewrite. Runs
// per-sample when the signal bridge is active.
template <typename T>
Var encoder_prefix(Tape<T>& tape, const Model<T>& m, TapeBinding<T>& bind, Var x,
                   const WeightOverride& ovr, std::vector<Var>* stage_out = nullptr) {
  const plan::ModelPlan pl = plan::make_plan(m.arch, m.bridge);
  Var h = conv2d(tape, x, detail::conv_weight(m, bind, ovr, "c0.w"), 1, 1);
  if (stage_out) stage_out->push_back(h);
  for (const auto& bp : pl.blocks) {
    if (bp.group_index > 1) break;
    h = residual_block_forward(tape, h, detail::block_vars(m, bind, ovr, bp), bp.stride,
                               m.arch.norm_groups, T(1e-5));
    if (stage_out && (&bp == &pl.blocks.back() || (&bp + 1)->group_index != bp.group_index)) {
      stage_out->push_back(h);
    }
  }
  return h;
}

// The always-shared remainder: later groups, final norm, pooling.
template <typename T>
Var encoder_suffix(Tape<T>& tape, const Model<T>& m, TapeBinding<T>& bind, Var h,
                   std::vector<Var>* stage_out = nullptr) {
  const plan::ModelPlan pl = plan::make_plan(m.arch, m.bridge);
  for (const auto& bp : pl.blocks) {
    if (bp.group_index <= 1) continue;
    h = residual_block_forward(tape, h, detail::block_vars(m, bind, WeightOverride{}, bp),
                               bp.stride, m.arch.norm_groups, T(1e-5));
    if (stage_out && (&bp == &pl.blocks.back() || (&bp + 1)->group_index != bp.group_index)) {
      stage_out->push_back(h);
    }
  }
  h = group_norm(tape, h, m.arch.norm_groups, bind.get("final.gn.g"), bind.get("final.gn.b"),
                 T(1e-5));
  h = relu(tape, h);
  return global_avg_pool(tape, h);
}

// Pooled features [N, final_width] with optional per-conv weight overrides.
template <typename T>
Var encoder_forward(Tape<T>& tape, const Model<T>& m, TapeBinding<T>& bind, Var x,
                    const WeightOverride& ovr, std::vector<Var>* stage_out = nullptr) {
  Var h = encoder_prefix(tape, m, bind, x, ovr, stage_out);
  return encoder_suffix(tape, m, bind, h, stage_out);
}

template <typename T>
struct SsOutput {
  Var rotation_logits;  // [N, 4]
  Var alpha;            // [N, D]; invalid when the signal bridge is off
  Var features;         // [N, final_width]
};

// Self-supervised pass: source weights end to end, rotation logits plus (when
// configured) the per-input bridge coefficients.
template <typename T>
SsOutput<T> forward_ss(Tape<T>& tape, const Model<T>& m, TapeBinding<T>& bind, Var x) {
  SsOutput<T> out;
  out.features = encoder_forward(tape, m, bind, x, WeightOverride{});
  out.rotation_logits =
      affine(tape, out.features, bind.get("head.rot.w"), bind.get("head.rot.b"));
  if (m.bridge.enabled() && m.bridge.signal_bridge) {
    out.alpha = affine(tape, out.features, bind.get("head.alpha.w"), bind.get("head.alpha.b"));
  }
  return out;
}

// Per-conv derived weights for one total-alpha assignment. alpha_row, when
// valid, is a [1, D] slice of the predictor output for a single sample.
template <typename T>
WeightOverride derived_weights(Tape<T>& tape, const Model<T>& m, TapeBinding<T>& bind,
                               Var alpha_row) {
  WeightOverride ovr;
  for (const auto& bc : m.bridged) {
    Var total;
    if (m.bridge.data_bridge) {
      total = bind.get(detail::alpha_name(bc.conv_name));
    } else {
      Tensor<T> ident({bc.filters, bc.filters});
      fill_identity(ident);
      total = tape.constant(std::move(ident));
    }
    if (alpha_row.valid()) {
      Var chunk = slice(tape, alpha_row, 1, bc.alpha_offset,
                        bc.alpha_offset + bc.filters * bc.filters);
      chunk = reshape(tape, chunk, {bc.filters, bc.filters});
      total = add(tape, total, chunk);
    }
    ovr[bc.conv_name] = bridge_weights(tape, total, bind.get(bc.conv_name));
  }
  return ovr;
}

// Main-task logits. With the signal bridge on, the input first runs through
// the self-supervised encoder to predict its own bridge coefficients, then
// the bridged region runs per sample on the synthesized filters; everything
// stays on one tape, so the main loss reaches the alpha predictor and the
// source filters.
template <typename T>
Var forward_main(Tape<T>& tape, const Model<T>& m, TapeBinding<T>& bind, Var x) {
  Var feat;
  if (!m.bridge.enabled()) {
    feat = encoder_forward(tape, m, bind, x, WeightOverride{});
  } else if (!m.bridge.signal_bridge) {
    const WeightOverride ovr = derived_weights(tape, m, bind, Var{});
    feat = encoder_forward(tape, m, bind, x, ovr);
  } else {
    Var ss_feat = encoder_forward(tape, m, bind, x, WeightOverride{});
    Var alpha = affine(tape, ss_feat, bind.get("head.alpha.w"), bind.get("head.alpha.b"));
    const int n = tape.value(x).dim(0);
    std::vector<Var> parts;
    parts.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      Var xi = slice(tape, x, 0, i, i + 1);
      Var ai = slice(tape, alpha, 0, i, i + 1);
      const WeightOverride ovr = derived_weights(tape, m, bind, ai);
      parts.push_back(encoder_prefix(tape, m, bind, xi, ovr));
    }
    Var h = n == 1 ? parts[0] : concat0(tape, parts);
    feat = encoder_suffix(tape, m, bind, h);
  }
  return affine(tape, feat, bind.get("head.main.w"), bind.get("head.main.b"));
}

// Stage activations (c0 output, then each group's output) of the shared /
// source path, for representation analysis.
template <typename T>
std::vector<Tensor<T>> stage_activations(const Model<T>& m, const Tensor<T>& input) {
  Tape<T> tape;
  TapeBinding<T> bind(tape, m.reg);
  Var x = tape.constant(input);
  std::vector<Var> stages;
  Var h = encoder_prefix(tape, m, bind, x, WeightOverride{}, &stages);
  encoder_suffix(tape, m, bind, h, &stages);
  std::vector<Tensor<T>> out;
  out.reserve(stages.size());
  for (Var v : stages) out.push_back(tape.value(v));
  return out;
}

template <typename T>
void save_model(const std::string& path, const Model<T>& m) {
  nlohmann::json meta;
  meta["arch"] = {{"in_channels", m.arch.in_channels},
                  {"c0_channels", m.arch.c0_channels},
                  {"num_groups", m.arch.num_groups},
                  {"blocks_per_group", m.arch.blocks_per_group},
                  {"group_widths", m.arch.group_widths},
                  {"num_classes", m.arch.num_classes},
                  {"num_rotation_classes", m.arch.num_rotation_classes},
                  {"norm_groups", m.arch.norm_groups}};
  meta["bridge"] = {{"c0", m.bridge.bridge_c0},
                    {"g1", m.bridge.bridge_g1},
                    {"g2", m.bridge.bridge_g2},
                    {"data", m.bridge.data_bridge},
                    {"signal", m.bridge.signal_bridge}};
  save_checkpoint(path, m.reg, meta);
}

template <typename T>
Model<T> load_model(const std::string& path) {
  auto [reg, meta] = load_checkpoint<T>(path);
  ArchConfig arch;
  const auto& a = meta.at("arch");
  arch.in_channels = a.at("in_channels").get<int>();
  arch.c0_channels = a.at("c0_channels").get<int>();
  arch.num_groups = a.at("num_groups").get<int>();
  arch.blocks_per_group = a.at("blocks_per_group").get<int>();
  arch.group_widths = a.at("group_widths").get<std::vector<int>>();
  arch.num_classes = a.at("num_classes").get<int>();
  arch.num_rotation_classes = a.at("num_rotation_classes").get<int>();
  arch.norm_groups = a.at("norm_groups").get<int>();
  const auto& b = meta.at("bridge");
  BridgeConfig bridge;
  bridge.bridge_c0 = b.at("c0").get<bool>();
  bridge.bridge_g1 = b.at("g1").get<bool>();
  bridge.bridge_g2 = b.at("g2").get<bool>();
  bridge.data_bridge = b.at("data").get<bool>();
  bridge.signal_bridge = b.at("signal").get<bool>();

  Model<T> fresh = build_model<T>(arch, bridge, 0);
  if (fresh.reg.count() != reg.count()) {
    throw FormatError("load_model: checkpoint parameter set does not match architecture");
  }
  for (const auto& p : fresh.reg.params()) {
    if (!reg.contains(p.name) || !reg.value(p.name).same_shape(p.value)) {
      throw FormatError("load_model: checkpoint is missing or misshapes '" + p.name + "'");
    }
  }
  Model<T> m;
  m.arch = arch;
  m.bridge = bridge;
  m.reg = std::move(reg);
  m.bridged = std::move(fresh.bridged);
  m.alpha_dim = fresh.alpha_dim;
  return m;
}

}  // namespace ssdn
