#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssdn/model.hpp"
#include "ssdn/regimes.hpp"
#include "ssdn/shifts.hpp"

namespace ssdn {

struct DatasetConfig {
  enum class Type { synthetic, cifar10, mnist };
  Type type = Type::synthetic;
  SyntheticSpec synth;
  int synth_test_per_class = 250;
  uint64_t synth_seed = 4242;
  std::string cifar_train, cifar_test;
  std::string mnist_train_images, mnist_train_labels, mnist_test_images, mnist_test_labels;
};

struct TrainConfig {
  int steps = 2000;
  int batch = 8;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lambda = 1.0;
  bool cosine = true;
};

struct EvalConfig {
  int max_samples = 0;  // 0 = all
  int batch = 64;
};

struct TTTSettings {
  int k = 16;
  double lr = 0.001;
  std::string mode = "Single";  // Single | Online
};

struct ExperimentConfig {
  std::string kind;  // train | eval | sensitivity | ablation | alphas
  ArchConfig arch;
  BridgeConfig bridge;
  RegimeKind regime = RegimeKind::JointTraining;
  TTTSettings ttt;
  DatasetConfig dataset;
  std::vector<CorruptionSpec> corruptions;
  std::vector<uint64_t> seeds = {1, 2, 3};
  std::string output_dir;
  std::string checkpoint;  // optional pre-trained model for eval
  TrainConfig train;
  EvalConfig eval;
  bool record_wall_time = false;
};

namespace cfg_detail {

using nlohmann::json;

inline void check_keys(const json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  if (!j.is_object()) throw FormatError("config: '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw FormatError("config: unknown key '" + it.key() + "' in " + where);
    }
  }
}

template <typename T>
void opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline ArchConfig parse_arch(const json& j) {
  check_keys(j,
             {"in_channels", "c0_channels", "num_groups", "blocks_per_group", "group_widths",
              "num_classes", "num_rotation_classes", "norm_groups"},
             "arch");
  ArchConfig a;
  opt(j, "in_channels", a.in_channels);
  opt(j, "c0_channels", a.c0_channels);
  opt(j, "num_groups", a.num_groups);
  opt(j, "blocks_per_group", a.blocks_per_group);
  opt(j, "group_widths", a.group_widths);
  opt(j, "num_classes", a.num_classes);
  opt(j, "num_rotation_classes", a.num_rotation_classes);
  opt(j, "norm_groups", a.norm_groups);
  return a;
}

inline BridgeConfig parse_bridge(const json& j) {
  check_keys(j, {"c0", "g1", "g2", "data", "signal"}, "bridge");
  BridgeConfig b;
  opt(j, "c0", b.bridge_c0);
  opt(j, "g1", b.bridge_g1);
  opt(j, "g2", b.bridge_g2);
  opt(j, "data", b.data_bridge);
  opt(j, "signal", b.signal_bridge);
  return b;
}

inline DatasetConfig parse_dataset(const json& j) {
  check_keys(j,
             {"type", "image_side", "class_count", "train_per_class", "test_per_class", "seed",
              "cifar_train", "cifar_test", "mnist_train_images", "mnist_train_labels",
              "mnist_test_images", "mnist_test_labels"},
             "dataset");
  DatasetConfig d;
  std::string type = "synthetic";
  opt(j, "type", type);
  if (type == "synthetic") {
    d.type = DatasetConfig::Type::synthetic;
  } else if (type == "cifar10") {
    d.type = DatasetConfig::Type::cifar10;
  } else if (type == "mnist") {
    d.type = DatasetConfig::Type::mnist;
  } else {
    throw FormatError("config: unknown dataset type '" + type + "'");
  }
  opt(j, "image_side", d.synth.image_side);
  opt(j, "class_count", d.synth.class_count);
  opt(j, "train_per_class", d.synth.samples_per_class);
  opt(j, "test_per_class", d.synth_test_per_class);
  opt(j, "seed", d.synth_seed);
  opt(j, "cifar_train", d.cifar_train);
  opt(j, "cifar_test", d.cifar_test);
  opt(j, "mnist_train_images", d.mnist_train_images);
  opt(j, "mnist_train_labels", d.mnist_train_labels);
  opt(j, "mnist_test_images", d.mnist_test_images);
  opt(j, "mnist_test_labels", d.mnist_test_labels);
  return d;
}

inline std::vector<CorruptionSpec> parse_corruptions(const json& j) {
  if (!j.is_array()) throw FormatError("config: 'corruptions' must be an array");
  std::vector<CorruptionSpec> out;
  for (const auto& e : j) {
    check_keys(e, {"kind", "severity", "seed"}, "corruptions[]");
    CorruptionSpec s;
    if (!e.contains("kind")) throw FormatError("config: corruption entry missing 'kind'");
    s.kind = parse_corruption(e.at("kind").get<std::string>());
    opt(e, "severity", s.severity);
    opt(e, "seed", s.seed);
    s.validate();
    out.push_back(s);
  }
  return out;
}

}  // namespace cfg_detail

inline ExperimentConfig parse_config(const std::string& text) {
  using nlohmann::json;
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw FormatError("config: not valid json");
  cfg_detail::check_keys(j,
                         {"kind", "arch", "bridge", "regime", "ttt", "dataset", "corruptions",
                          "seeds", "output_dir", "checkpoint", "train", "eval",
                          "record_wall_time"},
                         "(top level)");
  ExperimentConfig c;
  cfg_detail::opt(j, "kind", c.kind);
  if (j.contains("arch")) c.arch = cfg_detail::parse_arch(j.at("arch"));
  if (j.contains("bridge")) c.bridge = cfg_detail::parse_bridge(j.at("bridge"));
  if (j.contains("regime")) c.regime = parse_regime(j.at("regime").get<std::string>());
  if (j.contains("ttt")) {
    const auto& t = j.at("ttt");
    cfg_detail::check_keys(t, {"k", "lr", "mode"}, "ttt");
    cfg_detail::opt(t, "k", c.ttt.k);
    cfg_detail::opt(t, "lr", c.ttt.lr);
    cfg_detail::opt(t, "mode", c.ttt.mode);
    if (c.ttt.mode != "Single" && c.ttt.mode != "Online") {
      throw FormatError("config: ttt.mode must be Single or Online");
    }
  }
  if (j.contains("dataset")) c.dataset = cfg_detail::parse_dataset(j.at("dataset"));
  if (j.contains("corruptions")) c.corruptions = cfg_detail::parse_corruptions(j.at("corruptions"));
  cfg_detail::opt(j, "seeds", c.seeds);
  cfg_detail::opt(j, "output_dir", c.output_dir);
  cfg_detail::opt(j, "checkpoint", c.checkpoint);
  if (j.contains("train")) {
    const auto& t = j.at("train");
    cfg_detail::check_keys(
        t, {"steps", "batch", "lr", "momentum", "weight_decay", "lambda", "cosine"}, "train");
    cfg_detail::opt(t, "steps", c.train.steps);
    cfg_detail::opt(t, "batch", c.train.batch);
    cfg_detail::opt(t, "lr", c.train.lr);
    cfg_detail::opt(t, "momentum", c.train.momentum);
    cfg_detail::opt(t, "weight_decay", c.train.weight_decay);
    cfg_detail::opt(t, "lambda", c.train.lambda);
    cfg_detail::opt(t, "cosine", c.train.cosine);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    cfg_detail::check_keys(e, {"max_samples", "batch"}, "eval");
    cfg_detail::opt(e, "max_samples", c.eval.max_samples);
    cfg_detail::opt(e, "batch", c.eval.batch);
  }
  cfg_detail::opt(j, "record_wall_time", c.record_wall_time);
  return c;
}

inline nlohmann::ordered_json serialize(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["kind"] = c.kind;
  j["arch"] = {{"in_channels", c.arch.in_channels},
               {"c0_channels", c.arch.c0_channels},
               {"num_groups", c.arch.num_groups},
               {"blocks_per_group", c.arch.blocks_per_group},
               {"group_widths", c.arch.group_widths},
               {"num_classes", c.arch.num_classes},
               {"num_rotation_classes", c.arch.num_rotation_classes},
               {"norm_groups", c.arch.norm_groups}};
  j["bridge"] = {{"c0", c.bridge.bridge_c0},
                 {"g1", c.bridge.bridge_g1},
                 {"g2", c.bridge.bridge_g2},
                 {"data", c.bridge.data_bridge},
                 {"signal", c.bridge.signal_bridge}};
  j["regime"] = regime_name(c.regime);
  j["ttt"] = {{"k", c.ttt.k}, {"lr", c.ttt.lr}, {"mode", c.ttt.mode}};
  nlohmann::ordered_json d;
  switch (c.dataset.type) {
    case DatasetConfig::Type::synthetic: d["type"] = "synthetic"; break;
    case DatasetConfig::Type::cifar10: d["type"] = "cifar10"; break;
    case DatasetConfig::Type::mnist: d["type"] = "mnist"; break;
  }
  d["image_side"] = c.dataset.synth.image_side;
  d["class_count"] = c.dataset.synth.class_count;
  d["train_per_class"] = c.dataset.synth.samples_per_class;
  d["test_per_class"] = c.dataset.synth_test_per_class;
  d["seed"] = c.dataset.synth_seed;
  if (!c.dataset.cifar_train.empty()) d["cifar_train"] = c.dataset.cifar_train;
  if (!c.dataset.cifar_test.empty()) d["cifar_test"] = c.dataset.cifar_test;
  if (!c.dataset.mnist_train_images.empty()) {
    d["mnist_train_images"] = c.dataset.mnist_train_images;
    d["mnist_train_labels"] = c.dataset.mnist_train_labels;
    d["mnist_test_images"] = c.dataset.mnist_test_images;
    d["mnist_test_labels"] = c.dataset.mnist_test_labels;
  }
  j["dataset"] = std::move(d);
  j["corruptions"] = nlohmann::ordered_json::array();
  for (const auto& s : c.corruptions) {
    j["corruptions"].push_back(
        {{"kind", corruption_name(s.kind)}, {"severity", s.severity}, {"seed", s.seed}});
  }
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  if (!c.checkpoint.empty()) j["checkpoint"] = c.checkpoint;
  j["train"] = {{"steps", c.train.steps},
                {"batch", c.train.batch},
                {"lr", c.train.lr},
                {"momentum", c.train.momentum},
                {"weight_decay", c.train.weight_decay},
                {"lambda", c.train.lambda},
                {"cosine", c.train.cosine}};
  j["eval"] = {{"max_samples", c.eval.max_samples}, {"batch", c.eval.batch}};
  j["record_wall_time"] = c.record_wall_time;
  return j;
}

// Structural checks beyond parsing: referenced paths must exist, the regime
// must match the bridge flags, and the experiment kind must be one the
// runner knows.
inline void validate(const ExperimentConfig& c) {
  static const std::set<std::string> kinds = {"train", "eval", "sensitivity", "ablation",
                                              "alphas"};
  if (!kinds.count(c.kind)) throw FormatError("config: unknown kind '" + c.kind + "'");
  c.arch.validate();
  c.bridge.validate();
  if (c.seeds.empty()) throw FormatError("config: 'seeds' must be non-empty");
  if (c.train.steps < 0 || c.train.batch < 1) throw FormatError("config: bad train section");
  if (c.ttt.k < 0) throw FormatError("config: ttt.k must be >= 0");

  namespace fs = std::filesystem;
  auto need = [](const std::string& p, const char* what) {
    if (p.empty()) throw FormatError(std::string("config: dataset requires ") + what);
    if (!fs::exists(p)) throw FormatError("config: path does not exist: " + p);
  };
  switch (c.dataset.type) {
    case DatasetConfig::Type::synthetic:
      c.dataset.synth.validate();
      break;
    case DatasetConfig::Type::cifar10:
      need(c.dataset.cifar_train, "cifar_train");
      need(c.dataset.cifar_test, "cifar_test");
      break;
    case DatasetConfig::Type::mnist:
      need(c.dataset.mnist_train_images, "mnist_train_images");
      need(c.dataset.mnist_train_labels, "mnist_train_labels");
      need(c.dataset.mnist_test_images, "mnist_test_images");
      need(c.dataset.mnist_test_labels, "mnist_test_labels");
      break;
  }
  if (!c.checkpoint.empty() && !fs::exists(c.checkpoint)) {
    throw FormatError("config: checkpoint does not exist: " + c.checkpoint);
  }

  if (c.kind == "train" || c.kind == "eval") {
    if (regime_uses_bridges(c.regime) != c.bridge.enabled()) {
      throw FormatError(std::string("config: regime ") + regime_name(c.regime) +
                        (c.bridge.enabled() ? " does not use bridges but bridge flags are set"
                                            : " requires bridge flags"));
    }
  }
  if (c.kind == "sensitivity" && c.regime != RegimeKind::Standard) {
    throw FormatError("config: sensitivity runs use regime Standard");
  }
  if (c.kind == "alphas" && c.regime != RegimeKind::SSDNOnePass) {
    throw FormatError("config: alphas runs use regime SSDNOnePass");
  }
  if (c.kind == "ablation" &&
      !(c.regime == RegimeKind::SSDNOnePass || c.regime == RegimeKind::SSDNPlusTTT)) {
    throw FormatError("config: ablation runs use regime SSDNOnePass or SSDNPlusTTT");
  }
}

}  // namespace ssdn
