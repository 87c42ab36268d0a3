#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ssdn/analysis.hpp"
#include "ssdn/config.hpp"
#include "ssdn/metrics_csv.hpp"
#include "ssdn/model.hpp"
#include "ssdn/regimes.hpp"

namespace ssdn {

inline constexpr const char* kVersion = "0.1.0";

namespace run_detail {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Datasets {
  ImageDataset train;
  ImageDataset test;
};

inline Datasets load_datasets(const ExperimentConfig& cfg) {
  Datasets d;
  switch (cfg.dataset.type) {
    case DatasetConfig::Type::synthetic: {
      SyntheticSpec train_spec = cfg.dataset.synth;
      SyntheticSpec test_spec = cfg.dataset.synth;
      test_spec.samples_per_class = cfg.dataset.synth_test_per_class;
      d.train = gen_synthetic(train_spec, cfg.dataset.synth_seed);
      d.test = gen_synthetic(test_spec, cfg.dataset.synth_seed + 1);
      break;
    }
    case DatasetConfig::Type::cifar10:
      d.train = load_cifar10_binary(cfg.dataset.cifar_train);
      d.test = load_cifar10_binary(cfg.dataset.cifar_test);
      break;
    case DatasetConfig::Type::mnist:
      d.train = load_mnist_idx(cfg.dataset.mnist_train_images, cfg.dataset.mnist_train_labels);
      d.test = load_mnist_idx(cfg.dataset.mnist_test_images, cfg.dataset.mnist_test_labels);
      break;
  }
  return d;
}

inline void check_dataset_arch(const ImageDataset& ds, const ArchConfig& arch) {
  if (ds.images.empty()) throw ContractViolation("runner: empty dataset");
  if (ds.images[0].dim(0) != arch.in_channels) {
    throw ContractViolation("runner: dataset has " + std::to_string(ds.images[0].dim(0)) +
                            " channels, arch.in_channels is " +
                            std::to_string(arch.in_channels));
  }
  if (ds.class_count != arch.num_classes) {
    throw ContractViolation("runner: dataset has " + std::to_string(ds.class_count) +
                            " classes, arch.num_classes is " + std::to_string(arch.num_classes));
  }
}

inline BridgeConfig bridge_for_regime(const ExperimentConfig& cfg, RegimeKind regime) {
  return regime_uses_bridges(regime) ? cfg.bridge : BridgeConfig::none();
}

inline TrainOpts train_opts_for(const ExperimentConfig& cfg, RegimeKind regime, uint64_t seed,
                                bool quiet) {
  TrainOpts o;
  o.steps = cfg.train.steps;
  o.batch = cfg.train.batch;
  o.lr = cfg.train.lr;
  o.momentum = cfg.train.momentum;
  o.weight_decay = cfg.train.weight_decay;
  o.lambda = regime == RegimeKind::Standard ? 0.0 : cfg.train.lambda;
  o.cosine = cfg.train.cosine;
  o.seed = seed;
  o.log_every = quiet ? 0 : 500;
  return o;
}

inline TTTConfig ttt_config_for(const ExperimentConfig& cfg) {
  TTTConfig t;
  t.k = cfg.ttt.k;
  t.lr = cfg.ttt.lr;
  t.mode = cfg.ttt.mode == "Online" ? TTTConfig::Mode::Online : TTTConfig::Mode::Single;
  return t;
}

inline EvalOpts eval_opts_for(const ExperimentConfig& cfg) {
  EvalOpts e;
  e.ttt = ttt_config_for(cfg);
  e.max_samples = cfg.eval.max_samples;
  e.batch = cfg.eval.batch;
  return e;
}

inline CorruptionSpec with_derived_seed(const CorruptionSpec& s, uint64_t run_seed, size_t index) {
  CorruptionSpec out = s;
  if (out.seed == 0) out.seed = mix64(run_seed, 7700 + static_cast<uint64_t>(index));
  return out;
}

inline int64_t elapsed_ms(Clock::time_point t0) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - t0).count();
}

inline void note(bool quiet, const std::string& msg) {
  if (!quiet) std::fprintf(stderr, "%s\n", msg.c_str());
}

// Shared by the train / eval / ablation kinds: one trained (or loaded) model
// evaluated on the clean test set and on every configured corruption.
template <typename T>
std::vector<MetricsRow> train_and_eval_rows(const ExperimentConfig& cfg, RegimeKind regime,
                                            const BridgeConfig& bridge, const Datasets& data,
                                            uint64_t seed, const std::string& regime_cell,
                                            bool train_model, const std::string& ckpt_out,
                                            bool quiet) {
  Model<T> model;
  if (!train_model && !cfg.checkpoint.empty()) {
    model = load_model<T>(cfg.checkpoint);
  } else {
    model = build_model<T>(cfg.arch, bridge, seed);
    const Clock::time_point t0 = Clock::now();
    joint_train(model, data.train, train_opts_for(cfg, regime, seed, quiet));
    note(quiet, "  trained " + regime_cell + " seed " + std::to_string(seed) + " in " +
                    std::to_string(elapsed_ms(t0)) + " ms");
  }
  if (!ckpt_out.empty()) save_model(ckpt_out, model);

  std::vector<MetricsRow> rows;
  const EvalOpts eopts = eval_opts_for(cfg);
  auto eval_one = [&](const ImageDataset& ds, const std::string& shift, int severity) {
    const Clock::time_point t0 = Clock::now();
    const Metrics m = evaluate(model, ds, regime, eopts);
    MetricsRow r;
    r.regime = regime_cell;
    r.shift = shift;
    r.severity = severity;
    r.seed = seed;
    r.main_error_pct = m.main_error_pct;
    r.ss_error_pct = m.ss_error_pct;
    r.wall_ms = cfg.record_wall_time ? elapsed_ms(t0) : 0;
    rows.push_back(std::move(r));
  };
  eval_one(data.test, "clean", 0);
  for (size_t i = 0; i < cfg.corruptions.size(); ++i) {
    const CorruptionSpec spec = with_derived_seed(cfg.corruptions[i], seed, i);
    eval_one(corrupt_dataset(data.test, spec), corruption_name(spec.kind), spec.severity);
  }
  return rows;
}

}  // namespace run_detail

// Executes one experiment described by a validated config. Writes
// metrics.csv, manifest.json and kind-specific reports into a fresh output
// directory; refuses to reuse an existing one.
inline void run_experiment(const ExperimentConfig& cfg, bool quiet = false) {
  namespace fs = std::filesystem;
  using run_detail::note;
  validate(cfg);
  if (cfg.output_dir.empty()) throw FormatError("runner: output_dir is required");
  const fs::path out(cfg.output_dir);
  if (fs::exists(out)) {
    throw FormatError("runner: output directory already exists: " + cfg.output_dir);
  }
  fs::create_directories(out);

  using T = float;
  const run_detail::Datasets data = run_detail::load_datasets(cfg);
  run_detail::check_dataset_arch(data.train, cfg.arch);

  std::vector<MetricsRow> rows;

  if (cfg.kind == "train" || cfg.kind == "eval") {
    const BridgeConfig bridge = run_detail::bridge_for_regime(cfg, cfg.regime);
    for (uint64_t seed : cfg.seeds) {
      const bool train_model = cfg.kind == "train" || cfg.checkpoint.empty();
      const std::string ckpt =
          cfg.kind == "train" ? (out / ("model_seed" + std::to_string(seed) + ".ckpt")).string()
                              : "";
      auto r = run_detail::train_and_eval_rows<T>(cfg, cfg.regime, bridge, data, seed,
                                                  regime_name(cfg.regime), train_model, ckpt,
                                                  quiet);
      rows.insert(rows.end(), r.begin(), r.end());
    }
  } else if (cfg.kind == "ablation") {
    // every split-region assignment over (C0, G1, G2)
    static const int kFlagRows[7][3] = {{0, 0, 1}, {0, 1, 0}, {0, 1, 1}, {1, 0, 0},
                                        {1, 0, 1}, {1, 1, 0}, {1, 1, 1}};
    for (const auto& f : kFlagRows) {
      BridgeConfig b = cfg.bridge;
      b.bridge_c0 = f[0] != 0;
      b.bridge_g1 = f[1] != 0;
      b.bridge_g2 = f[2] != 0;
      const std::string cell = std::string(regime_name(cfg.regime)) + "[" +
                               std::to_string(f[0]) + std::to_string(f[1]) +
                               std::to_string(f[2]) + "]";
      note(quiet, "ablation " + cell);
      for (uint64_t seed : cfg.seeds) {
        auto r = run_detail::train_and_eval_rows<T>(cfg, cfg.regime, b, data, seed, cell, true,
                                                    "", quiet);
        rows.insert(rows.end(), r.begin(), r.end());
      }
    }
  } else if (cfg.kind == "sensitivity") {
    note(quiet, "sensitivity: training " + std::to_string(cfg.seeds.size()) +
                    " reference models");
    std::vector<Model<T>> refs;
    for (uint64_t seed : cfg.seeds) {
      Model<T> reference = build_model<T>(cfg.arch, BridgeConfig::none(), seed);
      joint_train(reference, data.train,
                  run_detail::train_opts_for(cfg, RegimeKind::Standard, seed, quiet));
      const Metrics clean = evaluate(reference, data.test, RegimeKind::Standard,
                                     run_detail::eval_opts_for(cfg));
      rows.push_back(MetricsRow{"Standard", "clean", 0, seed, clean.main_error_pct,
                                clean.ss_error_pct, 0});
      refs.push_back(std::move(reference));
    }
    std::vector<std::string> blocks = {"c0"};
    for (int g = 1; g <= cfg.arch.num_groups; ++g) blocks.push_back("g" + std::to_string(g));
    std::string report = "block,corruption,score\n";
    for (const auto& block : blocks) {
      std::vector<ActivationMatrix> acts;
      for (auto& m : refs) acts.push_back(collect_activations(m, block, data.train, 256));
      for (size_t i = 0; i < acts.size(); ++i) {
        for (size_t j = i + 1; j < acts.size(); ++j) {
          report += block + ",control," + std::to_string(linear_cka(acts[i], acts[j])) + "\n";
        }
      }
    }
    for (size_t si = 0; si < cfg.seeds.size(); ++si) {
      const uint64_t seed = cfg.seeds[si];
      for (size_t ci = 0; ci < cfg.corruptions.size(); ++ci) {
        const CorruptionSpec spec = run_detail::with_derived_seed(cfg.corruptions[ci], seed, ci);
        const ImageDataset shifted = corrupt_dataset(data.train, spec);
        for (const auto& block : blocks) {
          const double score =
              block_sensitivity(refs[si], shifted, block, data.train, FineTuneOpts{}, seed);
          report += block + "," + spec.label() + "," + std::to_string(score) + "\n";
          note(quiet, "  seed " + std::to_string(seed) + " " + spec.label() + " " + block +
                          " cka " + std::to_string(score));
        }
      }
    }
    std::ofstream(out / "sensitivity.csv") << report;
  } else if (cfg.kind == "alphas") {
    for (uint64_t seed : cfg.seeds) {
      Model<T> model = build_model<T>(cfg.arch, cfg.bridge, seed);
      joint_train(model, data.train, run_detail::train_opts_for(cfg, cfg.regime, seed, quiet));
      const int cap = cfg.eval.max_samples;
      std::vector<AlphaRecord> records = collect_alpha_records(model, data.test, "clean", cap);
      const Metrics clean =
          evaluate(model, data.test, cfg.regime, run_detail::eval_opts_for(cfg));
      rows.push_back(MetricsRow{regime_name(cfg.regime), "clean", 0, seed, clean.main_error_pct,
                                clean.ss_error_pct, 0});
      for (size_t ci = 0; ci < cfg.corruptions.size(); ++ci) {
        const CorruptionSpec spec = run_detail::with_derived_seed(cfg.corruptions[ci], seed, ci);
        const ImageDataset shifted = corrupt_dataset(data.test, spec);
        auto rec = collect_alpha_records(model, shifted, spec.label(), cap);
        records.insert(records.end(), rec.begin(), rec.end());
        const Metrics m = evaluate(model, shifted, cfg.regime, run_detail::eval_opts_for(cfg));
        rows.push_back(MetricsRow{regime_name(cfg.regime), corruption_name(spec.kind),
                                  spec.severity, seed, m.main_error_pct, m.ss_error_pct, 0});
      }
      const ClusterReport rep = alpha_projection(records);
      std::string report = "sample,pc1,pc2,shift,silhouette\n";
      for (size_t i = 0; i < rep.points.size(); ++i) {
        const auto& p = rep.points[i];
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%s,%.6f\n", i, p.pc1, p.pc2,
                      p.shift.c_str(), p.silhouette);
        report += buf;
      }
      std::ofstream(out / ("alphas_seed" + std::to_string(seed) + ".csv")) << report;
      note(quiet, "  seed " + std::to_string(seed) + " mean silhouette " +
                      std::to_string(rep.mean_silhouette));
    }
  }

  std::ofstream(out / "metrics.csv") << metrics_to_csv(rows);
  nlohmann::ordered_json manifest;
  manifest["version"] = kVersion;
  manifest["kind"] = cfg.kind;
  manifest["seeds"] = cfg.seeds;
  manifest["config"] = serialize(cfg);
  std::ofstream(out / "manifest.json") << manifest.dump(2) << "\n";
  note(quiet, "wrote " + (out / "metrics.csv").string());
}

}  // namespace ssdn
