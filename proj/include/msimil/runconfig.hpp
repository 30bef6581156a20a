#pragma once

#include <optional>
#include <string>
#include <vector>

#include "msimil/colorlab.hpp"
#include "msimil/experiments.hpp"
#include "msimil/slideio.hpp"
#include "msimil/trainer.hpp"

namespace msimil::cli {

/// Flat key=value run configuration. Every field defaults to the paper's
/// selected value where one exists; unknown keys are rejected.
struct RunConfig {
  train::TrainConfig train;
  mil::ModelShape shape;
  slideio::MaskParams mask;
  double min_tissue_fraction = 0.5;
  std::string profile_registry_path;  // empty: identity profile only
  std::string target_profile = "identity";
  std::string profile_internal = "identity";
  std::string profile_external = "identity";
  std::optional<colorlab::NormalizationStats> norm_override;
  std::string dtype = "f32";  // f32 | f64
  int workers = 0;            // 0: hardware concurrency
  int heatmap_top_n = 8;
  std::vector<double> eval_target_sensitivities = {0.5, 0.7, 0.9};
  int bootstrap_resamples = 1000;

  exp::SyntheticCohortSpec synth;       // datagen
  colorlab::JitterParams pair_noise{0.05, 0.05, 0.05, 0.01, colorlab::JitterScope::SLIDE};
  std::vector<int> bagsim_sizes = {3, 6, 12, 25, 50, 100, 200, 400, 800};
  int bagsim_seeds = 10;
  std::vector<double> titrate_fractions = {0.2, 0.4, 0.6, 0.8, 1.0};
  train::GridSpec grid;

  /// Parses "key = value" lines ('#' comments). Unknown or malformed keys
  /// throw UsageError.
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);

  /// Applies "key=value" command-line overrides on top of this config.
  void apply_override(const std::string& assignment);

  /// Round-trippable config-file form (every key, current values).
  std::string serialize() const;

  int effective_workers() const;
};

}  // namespace msimil::cli
