#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "msimil/trainer.hpp"

namespace msimil::exp {

/// Planted-signal stand-in for the clinical cohort: H&E-like blob background,
/// positives carry a high-frequency texture on a fraction of tile positions.
struct SyntheticCohortSpec {
  int n_slides = 200;
  double positive_prevalence = 0.2;
  int slide_width = 1280;
  int slide_height = 1024;
  double signal_tile_fraction = 0.05;  // of the native 20x tile grid
  double signal_strength = 1.0;        // 0 disables the signal entirely
  std::string profile_internal = "identity";
  std::string profile_external = "identity";
  double microns_per_pixel = 0.5;
  std::string image_format = "raw";  // "raw" | "png"
  uint64_t seed = 1;

  void validate() const;
};

using SignalMap = std::map<std::string, std::set<std::pair<int, int>>>;

struct CohortFiles {
  std::vector<slideio::SlideRecord> records;
  SignalMap signal_tiles;  // ground truth: slide_id -> planted grid positions
  std::string manifest_path;
  std::string signal_path;
};

/// Renders the cohort under out_dir/slides, writes manifest.csv and the
/// signal_tiles.csv ground-truth sidecar. Bitwise deterministic in the spec.
CohortFiles generate_synthetic_cohort(const SyntheticCohortSpec& spec,
                                      const std::string& out_dir);

/// Renders one synthetic slide; exposed for tests. signal_tiles uses the
/// native 256px grid.
ImageU8 render_synthetic_slide(const SyntheticCohortSpec& spec, uint64_t slide_seed,
                               const std::set<std::pair<int, int>>& signal_tiles);

struct PairedSections {
  std::vector<slideio::SlideRecord> internal_records;  // paired_id filled in
  std::vector<slideio::SlideRecord> external_records;
  std::string external_manifest_path;
  std::string paired_manifest_path;  // both arms, cross-linked
};

/// Re-renders each slide through the external scanner profile plus a small
/// per-slide stain perturbation; serial-section pairs share morphology and
/// are linked via paired_id.
PairedSections synthesize_paired_sections(const std::vector<slideio::SlideRecord>& records,
                                          const colorlab::ProfileRegistry& registry,
                                          const std::string& profile_internal,
                                          const std::string& profile_external,
                                          const colorlab::JitterParams& jitter_noise,
                                          uint64_t seed, const std::string& out_dir);

struct BagSizeResult {
  std::vector<int> sizes;
  std::map<int, std::vector<double>> auc_per_size;  // size -> one AUC per seed
  std::map<int, double> implied_tissue_area_mm2;    // size -> bag area
};

/// Ensemble inference at each bag size with OVERSAMPLE bags, repeated over
/// n_seeds; per-tile features are computed once per (slide, model) and
/// reused across sizes and seeds.
template <class S>
BagSizeResult simulate_bag_size(const train::EnsembleModel<S>& ensemble,
                                const train::SlideDataset& data, const std::vector<int>& sizes,
                                int n_seeds, uint64_t seed, int workers);

struct TitrationResult {
  std::vector<double> fractions;
  std::map<double, double> auc_per_fraction;  // ensemble validation AUC
  std::map<double, size_t> n_slides;
  std::map<double, std::vector<std::string>> subset_ids;
  double slope = 0.0;  // OLS of AUC on ln(fraction)
  double intercept = 0.0;
};

/// Nested label-stratified subsets (the 20% set is contained in the 40% set,
/// and so on); full cross-validated training per subset.
template <class S>
TitrationResult titrate(const std::vector<slideio::SlideRecord>& records,
                        const std::vector<double>& fractions, const train::TrainConfig& cfg,
                        const train::PipelineConfig& pipe, const mil::ModelShape& shape,
                        uint64_t seed, int workers);

/// Closed-form simple linear regression y = slope*x + intercept.
std::pair<double, double> ols_fit(const std::vector<double>& x, const std::vector<double>& y);

struct HeatmapOutput {
  std::string heatmap_png;
  std::string attention_csv;
  std::vector<std::string> high_tiles;
  std::vector<std::string> low_tiles;
  std::map<std::pair<int, int>, double> attention;  // normalized per slide
};

/// Ensemble attention per tile (mean across models, aligned by tile
/// identity), min-max normalized per slide (all 1.0 when min == max);
/// writes the overlay PNG, the per-tile CSV and the top/bottom-N crops.
template <class S>
HeatmapOutput attention_heatmap(const train::EnsembleModel<S>& ensemble,
                                const train::SlideDataset& data, size_t entry_index,
                                const std::string& out_dir, int top_n, uint64_t seed,
                                int workers);

}  // namespace msimil::exp
