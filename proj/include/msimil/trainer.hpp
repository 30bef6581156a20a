#pragma once

#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "msimil/colorlab.hpp"
#include "msimil/eval.hpp"
#include "msimil/milcore.hpp"
#include "msimil/slideio.hpp"

namespace msimil::train {

/// Defaults are the paper-selected hyperparameters.
struct TrainConfig {
  int magnification = 20;
  double learning_rate = 1e-6;
  double weight_decay = 1e-4;
  double dropout_rate = 0.1;
  int patience = 10;
  double min_delta = 0.00025;
  int bag_size_train = 200;
  int bag_size_infer = 1600;
  int batch_size = 32;
  int max_epochs = 200;
  colorlab::JitterParams jitter;  // slide scope, 0.25/0.5/0.25/0.04
  uint64_t seed = 1;
  bool decoupled_weight_decay = false;
  bool per_model_bags = false;

  void validate() const;
};

/// Everything needed to turn a manifest row into normalized model inputs.
struct PipelineConfig {
  slideio::MaskParams mask;
  colorlab::ProfileRegistry registry;
  std::string target_profile = "identity";
  colorlab::NormalizationStats stats;
  double min_tissue_fraction = 0.5;
};

struct FoldAssignment {
  std::map<std::string, int> fold_of;  // slide_id -> fold index
  int k = 5;
  std::vector<std::string> keys_used = {"label", "scanner_profile", "procedure",
                                        "gleason_total"};
};

/// Groups records by the joint stratum of (label, scanner, procedure,
/// gleason); shuffles each stratum by seed and deals round-robin, rotating
/// the starting fold between strata so overall fold sizes stay balanced.
FoldAssignment stratified_folds(const std::vector<slideio::SlideRecord>& records, int k,
                                uint64_t seed);

enum class BagMode { CAP, OVERSAMPLE };

/// n >= B: B distinct refs drawn uniformly without replacement (the full set,
/// in input order, when n == B). n < B: CAP returns all n; OVERSAMPLE returns
/// all n plus B-n uniform draws with replacement.
std::vector<slideio::TileRef> sample_bag(const std::vector<slideio::TileRef>& refs, int bag_size,
                                         BagMode mode, RandomStream& rng);

template <class S>
struct AdamState {
  mil::MilModel<S> m, v;
  int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool decoupled_weight_decay = false;

  static AdamState init(const mil::MilModel<S>& model);
};

/// One Adam update. Weight decay is coupled L2 added to the gradient unless
/// the state asks for the decoupled variant. Throws on non-finite gradients,
/// naming the offending tensor.
template <class S>
void adam_step(mil::MilModel<S>& params, const mil::MilModel<S>& grads, AdamState<S>& state,
               double lr, double weight_decay);

/// Per-slide pipeline state computed once per run.
struct SlideEntry {
  slideio::SlideRecord record;
  std::vector<slideio::TileRef> tiles;
  std::optional<double> tissue_area_mm2;
  bool from_features = false;
  Eigen::MatrixXf features;  // cached rows for .milf slides
};

/// Tiles every usable slide of a manifest up front. Slides with label UNKNOWN
/// (when labels are required) and slides with zero tiles are excluded with a
/// warning. Images are re-read from disk on each visit; only tile grids stay
/// resident.
class SlideDataset {
 public:
  SlideDataset(std::vector<slideio::SlideRecord> records, const PipelineConfig& pipe,
               int magnification, bool require_label,
               std::vector<std::string>* warnings = nullptr, int workers = 1);

  const std::vector<SlideEntry>& entries() const { return entries_; }
  const SlideEntry& entry(size_t i) const { return entries_.at(i); }
  size_t size() const { return entries_.size(); }
  int magnification() const { return magnification_; }
  const PipelineConfig& pipeline() const { return *pipe_; }

  slideio::SlideImage load_slide(size_t i) const;

  /// Bag of augmented, normalized tiles for one training visit. Draw order:
  /// bag sampling, jitter factors, per-tile geometric, then (inside forward)
  /// dropout — all from the caller's stream.
  template <class S>
  mil::Bag<S> make_training_bag(size_t i, const TrainConfig& cfg, RandomStream& rng) const;

  /// Evaluation bag: CAP sampling, profile correction, center crop, no jitter.
  template <class S>
  mil::Bag<S> make_eval_bag(size_t i, int bag_size, RandomStream& rng) const;

  /// Evaluation-mode inputs for an explicit list of refs (heatmaps, bag-size
  /// simulation). Refs must belong to slide i.
  template <class S>
  mil::Bag<S> make_bag_from_refs(size_t i, const std::vector<slideio::TileRef>& refs) const;

 private:
  std::vector<SlideEntry> entries_;
  const PipelineConfig* pipe_;
  int magnification_;
};

/// Reference normalization stats from a seeded sample of training tiles.
colorlab::NormalizationStats sample_normalization_stats(const SlideDataset& data,
                                                        uint64_t seed, size_t max_slides = 64,
                                                        size_t tiles_per_slide = 8);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

/// Early-stopping bookkeeping. The returned snapshot is the strictly best
/// validation loss seen so far; the stop counter only resets on improvements
/// of at least min_delta.
class EarlyStopper {
 public:
  EarlyStopper(int patience, double min_delta) : patience_(patience), min_delta_(min_delta) {}

  struct Update {
    bool new_best = false;  // caller should snapshot the model
    bool stop = false;
  };

  Update update(double val_loss) {
    Update u;
    if (val_loss < best_) {
      best_ = val_loss;
      u.new_best = true;
    }
    if (val_loss < delta_ref_ && delta_ref_ - val_loss >= min_delta_) {
      delta_ref_ = val_loss;
      stall_ = 0;
    } else if (++stall_ >= patience_) {
      u.stop = true;
    }
    return u;
  }

  double best() const { return best_; }

 private:
  int patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  double delta_ref_ = std::numeric_limits<double>::infinity();
  int stall_ = 0;
};

template <class S>
struct FoldOutcome {
  mil::MilModel<S> model;  // checkpoint with the best validation loss
  std::vector<EpochStats> history;
  int best_epoch = 0;
  double best_val_loss = 0.0;
};

/// One cross-validation fold: batched Adam training with slide-level bags,
/// per-epoch validation loss, early stopping on (patience, min_delta).
template <class S>
FoldOutcome<S> train_fold(const SlideDataset& data, const std::vector<size_t>& train_idx,
                          const std::vector<size_t>& val_idx, const TrainConfig& cfg,
                          const mil::ModelShape& shape, int fold_index, int workers);

template <class S>
struct EnsembleModel {
  std::vector<mil::MilModel<S>> models;  // one per fold
  TrainConfig config;
  mil::ModelShape shape;
  colorlab::NormalizationStats stats;
};

template <class S>
struct EnsembleOutcome {
  EnsembleModel<S> ensemble;
  FoldAssignment folds;
  std::vector<eval::ScoredCase> oof_scores;  // each slide scored by its held-out fold
  double oof_auc = 0.0;                      // "ensemble validation AUC"
  std::vector<std::vector<EpochStats>> histories;
};

/// Five-fold stratified CV: trains one model per fold and scores every slide
/// with the model that held it out.
template <class S>
EnsembleOutcome<S> train_ensemble(const SlideDataset& data, const TrainConfig& cfg,
                                  const mil::ModelShape& shape, int workers);

template <class S>
struct PredictionDetail {
  eval::ScoredCase scored;
  std::vector<double> model_scores;
  std::vector<std::vector<slideio::TileRef>> model_bags;  // one per model
  std::vector<mil::Vec<S>> model_attention;               // aligned with model_bags[m]
};

/// Ensemble inference: one CAP bag (shared across the five models unless
/// per_model_bags is set), score = mean of the per-model probabilities.
template <class S>
PredictionDetail<S> ensemble_predict(const EnsembleModel<S>& ensemble, const SlideDataset& data,
                                     size_t entry_index, uint64_t seed, int workers);

eval::ScoredCase make_scored_case(const SlideEntry& entry, double score);

/// Hyperparameter grid; empty lists inherit the base config value.
struct GridSpec {
  std::vector<int> magnification;
  std::vector<double> learning_rate;
  std::vector<double> weight_decay;
  std::vector<double> dropout_rate;
  std::vector<int> patience;
  std::vector<double> min_delta;
  std::vector<double> jitter_brightness;
  std::vector<double> jitter_contrast;
  std::vector<double> jitter_saturation;
  std::vector<double> jitter_hue;

  bool empty() const;
  std::vector<TrainConfig> expand(const TrainConfig& base) const;
};

struct GridPointResult {
  TrainConfig config;
  double ensemble_val_auc = 0.0;
  bool failed = false;
  std::string error;
};

template <class S>
struct GridSearchResult {
  std::vector<GridPointResult> table;
  size_t best_index = 0;  // ties resolved toward the earlier grid point
};

/// Full CV per grid point on a shared fold assignment; a failing point is
/// recorded and skipped rather than aborting the sweep.
template <class S>
GridSearchResult<S> grid_search(const GridSpec& grid, std::vector<slideio::SlideRecord> records,
                                const PipelineConfig& pipe, const TrainConfig& base,
                                const mil::ModelShape& shape, uint64_t seed, int workers);

using KeyValueMap = std::map<std::string, std::string>;

/// Checkpoint file: "MILH" magic, format version, key=value config block,
/// tensor table (name, dtype, shape, little-endian data), trailing CRC32.
/// Round-trips are bitwise exact.
template <class S>
void save_checkpoint(const std::string& path, const mil::MilModel<S>& model,
                     const KeyValueMap& config);

template <class S>
struct Checkpoint {
  mil::MilModel<S> model;
  KeyValueMap config;
};

template <class S>
Checkpoint<S> load_checkpoint(const std::string& path);

}  // namespace msimil::train
