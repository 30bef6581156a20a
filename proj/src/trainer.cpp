#include "msimil/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>

#include "msimil/common.hpp"
#include "msimil/ioutil.hpp"

namespace msimil::train {

namespace {

bool is_positive(const slideio::SlideRecord& rec) { return rec.label == slideio::Label::MSI_H; }

bool is_feature_path(const std::string& path) {
  return path.size() > 5 && path.substr(path.size() - 5) == ".milf";
}

std::string stratum_key(const slideio::SlideRecord& r) {
  std::string key = slideio::to_string(r.label);
  key += '|';
  key += r.scanner_profile.empty() ? "ABSENT" : r.scanner_profile;
  key += '|';
  key += r.procedure ? slideio::to_string(*r.procedure) : "ABSENT";
  key += '|';
  key += r.gleason_total ? std::to_string(*r.gleason_total) : "ABSENT";
  return key;
}

template <class S>
std::vector<mil::ParamRef<S>> const_param_refs(const mil::MilModel<S>& model) {
  return mil::param_refs(const_cast<mil::MilModel<S>&>(model));
}

template <class S>
void accumulate(mil::MilModel<S>& dst, const mil::MilModel<S>& src) {
  auto d = mil::param_refs(dst);
  auto s = const_param_refs(src);
  for (size_t i = 0; i < d.size(); ++i)
    for (size_t j = 0; j < d[i].size; ++j) d[i].data[j] += s[i].data[j];
}

template <class S>
void scale_params(mil::MilModel<S>& m, double factor) {
  for (auto& ref : mil::param_refs(m))
    for (size_t j = 0; j < ref.size; ++j) ref.data[j] = static_cast<S>(ref.data[j] * factor);
}

double mean_of_sorted(std::vector<double> values) {
  std::sort(values.begin(), values.end());  // order-independent sum
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

}  // namespace

void TrainConfig::validate() const {
  if (magnification != 5 && magnification != 10 && magnification != 20)
    throw DataError("magnification must be 5, 10 or 20");
  if (learning_rate <= 0) throw DataError("learning_rate must be positive");
  if (weight_decay < 0) throw DataError("weight_decay must be >= 0");
  if (dropout_rate < 0 || dropout_rate >= 1) throw DataError("dropout_rate must be in [0,1)");
  if (patience < 1) throw DataError("patience must be >= 1");
  if (min_delta < 0) throw DataError("min_delta must be >= 0");
  if (bag_size_train < 1 || bag_size_infer < 1) throw DataError("bag sizes must be >= 1");
  if (batch_size < 1) throw DataError("batch_size must be >= 1");
  if (max_epochs < 1) throw DataError("max_epochs must be >= 1");
  jitter.validate();
}

FoldAssignment stratified_folds(const std::vector<slideio::SlideRecord>& records, int k,
                                uint64_t seed) {
  if (k < 2) throw DataError("stratified_folds: k must be >= 2");
  if (records.empty()) throw DataError("stratified_folds: no records");

  FoldAssignment out;
  out.k = k;
  std::map<std::string, std::vector<size_t>> strata;  // sorted key order
  for (size_t i = 0; i < records.size(); ++i)
    strata[stratum_key(records[i])].push_back(i);

  int offset = 0;
  size_t stratum_index = 0;
  for (auto& [key, members] : strata) {
    RandomStream rng(derive_seed(seed, "stratified_folds", stratum_index++));
    rng.shuffle(members);
    for (size_t i = 0; i < members.size(); ++i)
      out.fold_of[records[members[i]].slide_id] = (offset + static_cast<int>(i)) % k;
    offset = (offset + static_cast<int>(members.size())) % k;
  }
  return out;
}

std::vector<slideio::TileRef> sample_bag(const std::vector<slideio::TileRef>& refs, int bag_size,
                                         BagMode mode, RandomStream& rng) {
  if (refs.empty()) throw DataError("sample_bag: slide has no tiles");
  if (bag_size < 1) throw DataError("sample_bag: bag size must be >= 1");
  const size_t n = refs.size();
  const size_t b = static_cast<size_t>(bag_size);

  if (n > b) {
    std::vector<slideio::TileRef> out;
    out.reserve(b);
    for (size_t idx : rng.sample_without_replacement(n, b)) out.push_back(refs[idx]);
    return out;
  }
  std::vector<slideio::TileRef> out = refs;  // n <= b: use every tile
  if (mode == BagMode::OVERSAMPLE) {
    out.reserve(b);
    while (out.size() < b) out.push_back(refs[rng.below(n)]);
  }
  return out;
}

template <class S>
AdamState<S> AdamState<S>::init(const mil::MilModel<S>& model) {
  AdamState<S> st;
  st.m = mil::zeros_like(model);
  st.v = mil::zeros_like(model);
  return st;
}

template <class S>
void adam_step(mil::MilModel<S>& params, const mil::MilModel<S>& grads, AdamState<S>& state,
               double lr, double weight_decay) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));

  auto p = mil::param_refs(params);
  auto g = const_param_refs(grads);
  auto m = mil::param_refs(state.m);
  auto v = mil::param_refs(state.v);
  for (size_t i = 0; i < p.size(); ++i) {
    for (size_t j = 0; j < p[i].size; ++j) {
      const double gj = static_cast<double>(g[i].data[j]);
      if (!std::isfinite(gj))
        throw DataError("non-finite gradient in tensor " + g[i].name);
      const double pj = static_cast<double>(p[i].data[j]);
      const double geff = state.decoupled_weight_decay ? gj : gj + weight_decay * pj;
      const double mj = state.beta1 * static_cast<double>(m[i].data[j]) + (1.0 - state.beta1) * geff;
      const double vj =
          state.beta2 * static_cast<double>(v[i].data[j]) + (1.0 - state.beta2) * geff * geff;
      m[i].data[j] = static_cast<S>(mj);
      v[i].data[j] = static_cast<S>(vj);
      double updated = pj - lr * (mj / bc1) / (std::sqrt(vj / bc2) + state.eps);
      if (state.decoupled_weight_decay) updated -= lr * weight_decay * pj;
      p[i].data[j] = static_cast<S>(updated);
    }
  }
}

SlideDataset::SlideDataset(std::vector<slideio::SlideRecord> records, const PipelineConfig& pipe,
                           int magnification, bool require_label,
                           std::vector<std::string>* warnings, int workers)
    : pipe_(&pipe), magnification_(magnification) {
  struct Built {
    bool keep = false;
    SlideEntry entry;
    std::string warning;
  };
  std::vector<Built> built(records.size());

  for (const auto& rec : records)
    if (!rec.scanner_profile.empty() && !pipe.registry.contains(rec.scanner_profile))
      throw DataError("slide " + rec.slide_id + ": scanner profile '" + rec.scanner_profile +
                      "' not in the profile registry");

  parallel_for(records.size(), workers, [&](size_t i) {
    auto& b = built[i];
    b.entry.record = records[i];
    const auto& rec = b.entry.record;
    if (require_label && rec.label == slideio::Label::UNKNOWN) {
      b.warning = rec.slide_id + ": label UNKNOWN, excluded";
      return;
    }
    if (is_feature_path(rec.image_path)) {
      b.entry.from_features = true;
      b.entry.features = mil::load_features(rec.image_path);
      const int k = static_cast<int>(b.entry.features.rows());
      if (k == 0) {
        b.warning = rec.slide_id + ": empty feature file, excluded";
        return;
      }
      b.entry.tiles.reserve(k);
      for (int t = 0; t < k; ++t)
        b.entry.tiles.push_back({rec.slide_id, t, 0, magnification_});
      b.keep = true;
      return;
    }
    slideio::SlideImage img{load_image(rec.image_path), rec.microns_per_pixel};
    const auto mask = slideio::compute_tissue_mask(img, pipe_->mask);
    b.entry.tissue_area_mm2 = slideio::tissue_area_mm2(mask, rec.microns_per_pixel);
    b.entry.tiles =
        slideio::extract_tiles(img, mask, magnification_, pipe_->min_tissue_fraction);
    for (auto& t : b.entry.tiles) t.slide_id = rec.slide_id;
    if (b.entry.tiles.empty()) {
      b.warning = rec.slide_id + ": no usable tiles, excluded";
      return;
    }
    b.keep = true;
  });

  for (auto& b : built) {
    if (!b.warning.empty() && warnings) warnings->push_back(b.warning);
    if (b.keep) entries_.push_back(std::move(b.entry));
  }
  if (entries_.empty()) throw DataError("dataset is empty after exclusions");
}

slideio::SlideImage SlideDataset::load_slide(size_t i) const {
  const auto& rec = entries_.at(i).record;
  return slideio::SlideImage{load_image(rec.image_path), rec.microns_per_pixel};
}

namespace {

/// Pixels for one bag in evaluation layout (no augmentation): profile-correct
/// and center-crop each tile.
template <class S>
mil::Bag<S> tiles_to_eval_bag(const SlideDataset& data, const SlideEntry& entry,
                              const slideio::SlideImage& img,
                              const std::vector<slideio::TileRef>& refs) {
  const auto& pipe = data.pipeline();
  const auto& source = pipe.registry.get(
      entry.record.scanner_profile.empty() ? "identity" : entry.record.scanner_profile);
  const auto& target = pipe.registry.get(pipe.target_profile);
  mil::Bag<S> bag;
  bag.tiles.reserve(refs.size());
  RandomStream unused(0);
  for (const auto& ref : refs) {
    ImageU8 px = slideio::load_tile(img, ref);
    px = colorlab::apply_profile_transform(px, source, target);
    px = colorlab::geometric_augment(px, unused, /*training=*/false);
    bag.tiles.push_back(colorlab::normalize<S>(px, pipe.stats));
  }
  return bag;
}

template <class S>
mil::Bag<S> features_to_bag(const SlideEntry& entry, const std::vector<slideio::TileRef>& refs) {
  mil::Bag<S> bag;
  bag.from_features = true;
  bag.features.resize(static_cast<Eigen::Index>(refs.size()), entry.features.cols());
  for (size_t r = 0; r < refs.size(); ++r)
    bag.features.row(static_cast<Eigen::Index>(r)) =
        entry.features.row(refs[r].grid_x).template cast<S>();
  return bag;
}

}  // namespace

template <class S>
mil::Bag<S> SlideDataset::make_training_bag(size_t i, const TrainConfig& cfg,
                                            RandomStream& rng) const {
  const auto& entry = entries_.at(i);
  const auto refs = sample_bag(entry.tiles, cfg.bag_size_train, BagMode::CAP, rng);
  if (entry.from_features) return features_to_bag<S>(entry, refs);

  const auto img = load_slide(i);
  const auto& source = pipe_->registry.get(
      entry.record.scanner_profile.empty() ? "identity" : entry.record.scanner_profile);
  const auto& target = pipe_->registry.get(pipe_->target_profile);

  std::vector<ImageU8> raw;
  raw.reserve(refs.size());
  for (const auto& ref : refs)
    raw.push_back(colorlab::apply_profile_transform(slideio::load_tile(img, ref), source, target));
  raw = colorlab::color_jitter(raw, cfg.jitter, rng);

  mil::Bag<S> bag;
  bag.tiles.reserve(raw.size());
  for (auto& px : raw) {
    const ImageU8 cropped = colorlab::geometric_augment(px, rng, /*training=*/true);
    bag.tiles.push_back(colorlab::normalize<S>(cropped, pipe_->stats));
  }
  return bag;
}

template <class S>
mil::Bag<S> SlideDataset::make_eval_bag(size_t i, int bag_size, RandomStream& rng) const {
  const auto& entry = entries_.at(i);
  const auto refs = sample_bag(entry.tiles, bag_size, BagMode::CAP, rng);
  if (entry.from_features) return features_to_bag<S>(entry, refs);
  const auto img = load_slide(i);
  return tiles_to_eval_bag<S>(*this, entry, img, refs);
}

template <class S>
mil::Bag<S> SlideDataset::make_bag_from_refs(size_t i,
                                             const std::vector<slideio::TileRef>& refs) const {
  const auto& entry = entries_.at(i);
  if (entry.from_features) return features_to_bag<S>(entry, refs);
  const auto img = load_slide(i);
  return tiles_to_eval_bag<S>(*this, entry, img, refs);
}

colorlab::NormalizationStats sample_normalization_stats(const SlideDataset& data, uint64_t seed,
                                                        size_t max_slides,
                                                        size_t tiles_per_slide) {
  std::vector<size_t> eligible;
  for (size_t i = 0; i < data.size(); ++i)
    if (!data.entry(i).from_features) eligible.push_back(i);
  if (eligible.empty()) return {};  // feature-only dataset: stats never used

  RandomStream rng(derive_seed(seed, "normalization_stats"));
  const auto chosen =
      rng.sample_without_replacement(eligible.size(), std::min(max_slides, eligible.size()));
  std::vector<ImageU8> tiles;
  for (size_t c : chosen) {
    const size_t i = eligible[c];
    const auto& entry = data.entry(i);
    const auto img = data.load_slide(i);
    const auto& pipe = data.pipeline();
    const auto& source = pipe.registry.get(
        entry.record.scanner_profile.empty() ? "identity" : entry.record.scanner_profile);
    const auto& target = pipe.registry.get(pipe.target_profile);
    for (size_t t :
         rng.sample_without_replacement(entry.tiles.size(),
                                        std::min(tiles_per_slide, entry.tiles.size()))) {
      tiles.push_back(colorlab::apply_profile_transform(
          slideio::load_tile(img, entry.tiles[t]), source, target));
    }
  }
  return colorlab::compute_normalization_stats(tiles);
}

namespace {

struct SplitCounts {
  size_t n_pos = 0, n_neg = 0;
};

SplitCounts split_counts(const SlideDataset& data, const std::vector<size_t>& idx) {
  SplitCounts c;
  for (size_t i : idx) (is_positive(data.entry(i).record) ? c.n_pos : c.n_neg)++;
  return c;
}

}  // namespace

template <class S>
FoldOutcome<S> train_fold(const SlideDataset& data, const std::vector<size_t>& train_idx,
                          const std::vector<size_t>& val_idx, const TrainConfig& cfg,
                          const mil::ModelShape& shape, int fold_index, int workers) {
  cfg.validate();
  const auto tc = split_counts(data, train_idx);
  const auto vc = split_counts(data, val_idx);
  if (tc.n_pos == 0 || tc.n_neg == 0 || vc.n_pos == 0 || vc.n_neg == 0)
    throw DataError("fold " + std::to_string(fold_index) +
                    ": train or validation split contains a single class");
  const auto weights = mil::LossWeights::from_counts(tc.n_pos, tc.n_neg);
  const uint64_t fold_u = static_cast<uint64_t>(fold_index);

  mil::MilModel<S> model = mil::init_model<S>(shape, derive_seed(cfg.seed, "init", fold_u));
  model.classifier.dropout_rate = cfg.dropout_rate;
  AdamState<S> adam = AdamState<S>::init(model);
  adam.decoupled_weight_decay = cfg.decoupled_weight_decay;

  FoldOutcome<S> out;
  out.best_val_loss = std::numeric_limits<double>::infinity();
  EarlyStopper stopper(cfg.patience, cfg.min_delta);

  struct SlideResult {
    double loss = 0.0;
    mil::MilModel<S> grads;
  };

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const uint64_t epoch_u = static_cast<uint64_t>(epoch);
    std::vector<size_t> order = train_idx;
    {
      RandomStream shuffle_rng(derive_seed(cfg.seed, "epoch_order", fold_u, epoch_u));
      shuffle_rng.shuffle(order);
    }

    double train_loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      std::vector<size_t> batch(order.begin() + start, order.begin() + stop);
      std::vector<SlideResult> results(batch.size());
      parallel_for(batch.size(), workers, [&](size_t j) {
        const size_t entry_idx = batch[j];
        RandomStream rng(derive_seed(cfg.seed, "train_bag", fold_u, epoch_u, entry_idx));
        const auto bag = data.make_training_bag<S>(entry_idx, cfg, rng);
        mil::MilCache<S> cache;
        mil::forward<S>(bag, model, /*training=*/true, rng, &cache);
        const bool positive = is_positive(data.entry(entry_idx).record);
        results[j].loss = mil::weighted_bce(static_cast<double>(cache.s), positive, weights);
        results[j].grads = mil::backward<S>(model, cache, positive, weights);
      });

      // accumulate in manifest (entry index) order for bit-reproducibility
      std::vector<size_t> by_entry(batch.size());
      std::iota(by_entry.begin(), by_entry.end(), 0);
      std::sort(by_entry.begin(), by_entry.end(),
                [&](size_t a, size_t b) { return batch[a] < batch[b]; });
      mil::MilModel<S> grad_sum = mil::zeros_like(model);
      for (size_t j : by_entry) {
        accumulate(grad_sum, results[j].grads);
        train_loss_sum += results[j].loss;
      }
      scale_params(grad_sum, 1.0 / static_cast<double>(batch.size()));
      adam_step(model, grad_sum, adam, cfg.learning_rate, cfg.weight_decay);
    }

    std::vector<double> val_losses(val_idx.size());
    parallel_for(val_idx.size(), workers, [&](size_t j) {
      const size_t entry_idx = val_idx[j];
      RandomStream rng(derive_seed(cfg.seed, "val_bag", fold_u, epoch_u, entry_idx));
      const auto bag = data.make_eval_bag<S>(entry_idx, cfg.bag_size_infer, rng);
      const auto res = mil::forward<S>(bag, model, /*training=*/false, rng);
      val_losses[j] = mil::weighted_bce(static_cast<double>(res.score),
                                        is_positive(data.entry(entry_idx).record), weights);
    });
    double val_loss = 0.0;
    for (double v : val_losses) val_loss += v;
    val_loss /= static_cast<double>(val_losses.size());

    out.history.push_back(
        {epoch, train_loss_sum / static_cast<double>(order.size()), val_loss});

    const auto verdict = stopper.update(val_loss);
    if (verdict.new_best) {
      out.best_val_loss = val_loss;
      out.best_epoch = epoch;
      out.model = model;
    }
    if (verdict.stop) break;
  }
  return out;
}

template <class S>
EnsembleOutcome<S> train_ensemble(const SlideDataset& data, const TrainConfig& cfg,
                                  const mil::ModelShape& shape, int workers) {
  std::vector<slideio::SlideRecord> records;
  records.reserve(data.size());
  for (const auto& e : data.entries()) records.push_back(e.record);

  EnsembleOutcome<S> out;
  out.folds = stratified_folds(records, 5, cfg.seed);
  out.ensemble.config = cfg;
  out.ensemble.shape = shape;
  out.ensemble.stats = data.pipeline().stats;

  std::vector<std::vector<size_t>> fold_members(5);
  for (size_t i = 0; i < data.size(); ++i)
    fold_members[out.folds.fold_of.at(data.entry(i).record.slide_id)].push_back(i);

  for (int f = 0; f < 5; ++f) {
    std::vector<size_t> train_idx;
    for (int g = 0; g < 5; ++g)
      if (g != f) train_idx.insert(train_idx.end(), fold_members[g].begin(), fold_members[g].end());
    std::sort(train_idx.begin(), train_idx.end());
    auto outcome = train_fold<S>(data, train_idx, fold_members[f], cfg, shape, f, workers);
    out.histories.push_back(outcome.history);

    // out-of-fold scores from this fold's checkpoint
    const auto& val_idx = fold_members[f];
    std::vector<double> scores(val_idx.size());
    parallel_for(val_idx.size(), workers, [&](size_t j) {
      const size_t entry_idx = val_idx[j];
      RandomStream rng(derive_seed(cfg.seed, "oof", static_cast<uint64_t>(f), entry_idx));
      const auto bag = data.make_eval_bag<S>(entry_idx, cfg.bag_size_infer, rng);
      scores[j] = static_cast<double>(
          mil::forward<S>(bag, outcome.model, /*training=*/false, rng).score);
    });
    for (size_t j = 0; j < val_idx.size(); ++j)
      out.oof_scores.push_back(make_scored_case(data.entry(val_idx[j]), scores[j]));

    out.ensemble.models.push_back(std::move(outcome.model));
  }
  out.oof_auc = eval::auc(out.oof_scores);
  return out;
}

eval::ScoredCase make_scored_case(const SlideEntry& entry, double score) {
  eval::ScoredCase c;
  const auto& rec = entry.record;
  c.slide_id = rec.slide_id;
  c.score = score;
  c.positive = is_positive(rec);
  c.gleason_total = rec.gleason_total;
  c.procedure = rec.procedure;
  c.scanner_profile = rec.scanner_profile;
  c.stain_site = rec.stain_site;
  c.tissue_area_mm2 = entry.tissue_area_mm2;
  c.tumor_purity = rec.tumor_purity;
  c.paired_id = rec.paired_id;
  return c;
}

template <class S>
PredictionDetail<S> ensemble_predict(const EnsembleModel<S>& ensemble, const SlideDataset& data,
                                     size_t entry_index, uint64_t seed, int workers) {
  if (ensemble.models.empty()) throw DataError("ensemble has no checkpoints");
  const auto& cfg = ensemble.config;

  PredictionDetail<S> out;
  const size_t n_models = ensemble.models.size();
  out.model_bags.resize(n_models);
  out.model_attention.resize(n_models);
  out.model_scores.resize(n_models);

  if (cfg.per_model_bags) {
    for (size_t m = 0; m < n_models; ++m) {
      RandomStream rng(derive_seed(cfg.seed ^ seed, "predict", entry_index, m));
      out.model_bags[m] =
          sample_bag(data.entry(entry_index).tiles, cfg.bag_size_infer, BagMode::CAP, rng);
    }
  } else {
    RandomStream rng(derive_seed(cfg.seed ^ seed, "predict", entry_index));
    auto shared = sample_bag(data.entry(entry_index).tiles, cfg.bag_size_infer, BagMode::CAP, rng);
    for (size_t m = 0; m < n_models; ++m) out.model_bags[m] = shared;
  }

  parallel_for(n_models, workers, [&](size_t m) {
    const auto bag = data.make_bag_from_refs<S>(entry_index, out.model_bags[m]);
    RandomStream rng(0);  // evaluation consumes no draws
    const auto res = mil::forward<S>(bag, ensemble.models[m], /*training=*/false, rng);
    out.model_scores[m] = static_cast<double>(res.score);
    out.model_attention[m] = res.attention;
  });

  out.scored = make_scored_case(data.entry(entry_index), mean_of_sorted(out.model_scores));
  return out;
}

bool GridSpec::empty() const {
  return magnification.empty() && learning_rate.empty() && weight_decay.empty() &&
         dropout_rate.empty() && patience.empty() && min_delta.empty() &&
         jitter_brightness.empty() && jitter_contrast.empty() && jitter_saturation.empty() &&
         jitter_hue.empty();
}

std::vector<TrainConfig> GridSpec::expand(const TrainConfig& base) const {
  auto or_default = [](auto list, auto fallback) {
    if (list.empty()) list.push_back(fallback);
    return list;
  };
  const auto mags = or_default(magnification, base.magnification);
  const auto lrs = or_default(learning_rate, base.learning_rate);
  const auto wds = or_default(weight_decay, base.weight_decay);
  const auto drs = or_default(dropout_rate, base.dropout_rate);
  const auto pats = or_default(patience, base.patience);
  const auto mds = or_default(min_delta, base.min_delta);
  const auto jbs = or_default(jitter_brightness, base.jitter.brightness);
  const auto jcs = or_default(jitter_contrast, base.jitter.contrast);
  const auto jss = or_default(jitter_saturation, base.jitter.saturation);
  const auto jhs = or_default(jitter_hue, base.jitter.hue);

  std::vector<TrainConfig> configs;
  for (int mag : mags)
    for (double lr : lrs)
      for (double wd : wds)
        for (double dr : drs)
          for (int pat : pats)
            for (double md : mds)
              for (double jb : jbs)
                for (double jc : jcs)
                  for (double js : jss)
                    for (double jh : jhs) {
                      TrainConfig c = base;
                      c.magnification = mag;
                      c.learning_rate = lr;
                      c.weight_decay = wd;
                      c.dropout_rate = dr;
                      c.patience = pat;
                      c.min_delta = md;
                      c.jitter.brightness = jb;
                      c.jitter.contrast = jc;
                      c.jitter.saturation = js;
                      c.jitter.hue = jh;
                      configs.push_back(c);
                    }
  return configs;
}

template <class S>
GridSearchResult<S> grid_search(const GridSpec& grid, std::vector<slideio::SlideRecord> records,
                                const PipelineConfig& pipe, const TrainConfig& base,
                                const mil::ModelShape& shape, uint64_t seed, int workers) {
  if (grid.empty() && records.empty()) throw DataError("grid_search: nothing to do");
  const auto configs = grid.expand(base);

  GridSearchResult<S> out;
  // one dataset (and stats sample) per distinct magnification
  std::map<int, std::pair<std::unique_ptr<PipelineConfig>, std::unique_ptr<SlideDataset>>> cache;

  double best_auc = -1.0;
  bool any_ok = false;
  for (size_t idx = 0; idx < configs.size(); ++idx) {
    GridPointResult point;
    point.config = configs[idx];
    point.config.seed = derive_seed(seed, "grid_config", idx);
    try {
      auto& slot = cache[point.config.magnification];
      if (!slot.second) {
        slot.first = std::make_unique<PipelineConfig>(pipe);
        slot.second = std::make_unique<SlideDataset>(records, *slot.first,
                                                     point.config.magnification,
                                                     /*require_label=*/true, nullptr, workers);
        slot.first->stats = sample_normalization_stats(*slot.second, seed);
      }
      const auto outcome = train_ensemble<S>(*slot.second, point.config, shape, workers);
      point.ensemble_val_auc = outcome.oof_auc;
      if (!any_ok || point.ensemble_val_auc > best_auc) {
        best_auc = point.ensemble_val_auc;
        out.best_index = idx;
        any_ok = true;
      }
    } catch (const std::exception& e) {
      point.failed = true;
      point.error = e.what();
    }
    out.table.push_back(std::move(point));
  }
  if (!any_ok) throw DataError("grid_search: every grid point failed");
  return out;
}

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}
void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
  const std::vector<uint8_t>& bytes;
  size_t pos = 0;
  void need(size_t n, const std::string& what) {
    if (pos + n > bytes.size()) throw DataError("checkpoint truncated while reading " + what);
  }
  uint32_t u32(const std::string& what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64(const std::string& what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  std::string str(size_t n, const std::string& what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
};

std::string serialize_kv(const KeyValueMap& kv) {
  std::ostringstream out;
  for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
  return out.str();
}

KeyValueMap parse_kv(const std::string& text) {
  KeyValueMap kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("checkpoint config: malformed line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

template <class S>
constexpr uint8_t dtype_tag() {
  return std::is_same_v<S, float> ? 1 : 0;
}

}  // namespace

template <class S>
void save_checkpoint(const std::string& path, const mil::MilModel<S>& model,
                     const KeyValueMap& config) {
  KeyValueMap kv = config;
  kv["shape.in_channels"] = std::to_string(model.shape.in_channels);
  kv["shape.conv_channels"] = std::to_string(model.shape.conv_channels[0]) + " " +
                              std::to_string(model.shape.conv_channels[1]) + " " +
                              std::to_string(model.shape.conv_channels[2]);
  kv["shape.feature_dim"] = std::to_string(model.shape.feature_dim);
  kv["shape.attention_dim"] = std::to_string(model.shape.attention_dim);
  kv["shape.gated_attention"] = model.shape.gated_attention ? "1" : "0";
  kv["model.dropout_rate"] = std::to_string(model.classifier.dropout_rate);
  kv["format.dtype"] = dtype_tag<S>() == 1 ? "f32" : "f64";
  const std::string config_text = serialize_kv(kv);

  std::vector<uint8_t> out;
  const char magic[4] = {'M', 'I', 'L', 'H'};
  out.insert(out.end(), magic, magic + 4);
  put_u32(out, static_cast<uint32_t>(kCheckpointFormatVersion));
  put_u64(out, config_text.size());
  out.insert(out.end(), config_text.begin(), config_text.end());

  const auto refs = const_param_refs(model);
  put_u32(out, static_cast<uint32_t>(refs.size()));
  for (const auto& ref : refs) {
    put_u32(out, static_cast<uint32_t>(ref.name.size()));
    out.insert(out.end(), ref.name.begin(), ref.name.end());
    out.push_back(dtype_tag<S>());
    put_u32(out, static_cast<uint32_t>(ref.dims.size()));
    for (int64_t d : ref.dims) put_u64(out, static_cast<uint64_t>(d));
    const uint64_t nbytes = ref.size * sizeof(S);
    put_u64(out, nbytes);
    const auto* raw = reinterpret_cast<const uint8_t*>(ref.data);
    out.insert(out.end(), raw, raw + nbytes);
  }
  put_u32(out, crc32_bytes(out.data(), out.size()));
  atomic_write_file(path, out.data(), out.size());
}

template <class S>
Checkpoint<S> load_checkpoint(const std::string& path) {
  const auto bytes = read_binary_file(path);
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "MILH", 4) != 0)
    throw DataError("not a checkpoint file: " + path);
  {
    const uint32_t stored_crc = [&] {
      uint32_t v = 0;
      for (int i = 0; i < 4; ++i)
        v |= static_cast<uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
      return v;
    }();
    if (crc32_bytes(bytes.data(), bytes.size() - 4) != stored_crc)
      throw DataError("checkpoint checksum mismatch: " + path);
  }

  ByteReader r{bytes, 4};
  const uint32_t version = r.u32("version");
  if (version != static_cast<uint32_t>(kCheckpointFormatVersion))
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  const uint64_t config_len = r.u64("config length");
  Checkpoint<S> ck;
  ck.config = parse_kv(r.str(config_len, "config"));

  if (const auto it = ck.config.find("format.dtype"); it != ck.config.end()) {
    const std::string want = dtype_tag<S>() == 1 ? "f32" : "f64";
    if (it->second != want)
      throw DataError("checkpoint " + path + " stores " + it->second +
                      " tensors; load with dtype=" + it->second);
  }

  mil::ModelShape shape;
  try {
    shape.in_channels = std::stoi(ck.config.at("shape.in_channels"));
    std::istringstream cc(ck.config.at("shape.conv_channels"));
    cc >> shape.conv_channels[0] >> shape.conv_channels[1] >> shape.conv_channels[2];
    shape.feature_dim = std::stoi(ck.config.at("shape.feature_dim"));
    shape.attention_dim = std::stoi(ck.config.at("shape.attention_dim"));
    shape.gated_attention = ck.config.at("shape.gated_attention") == "1";
  } catch (const std::out_of_range&) {
    throw DataError("checkpoint config is missing shape keys: " + path);
  }
  ck.model = mil::zero_model<S>(shape);
  if (const auto it = ck.config.find("model.dropout_rate"); it != ck.config.end())
    ck.model.classifier.dropout_rate = std::stod(it->second);

  auto refs = mil::param_refs(ck.model);
  const uint32_t count = r.u32("tensor count");
  if (count != refs.size())
    throw DataError("checkpoint tensor count mismatch: " + path);
  for (auto& ref : refs) {
    const uint32_t name_len = r.u32("tensor name length");
    const std::string name = r.str(name_len, "tensor name");
    if (name != ref.name)
      throw DataError("checkpoint tensor order mismatch: expected " + ref.name + ", got " + name);
    r.need(1, "dtype");
    const uint8_t dtype = r.bytes[r.pos++];
    if (dtype != dtype_tag<S>()) throw DataError("tensor dtype mismatch in " + path);
    const uint32_t ndim = r.u32("rank");
    if (ndim != ref.dims.size()) throw DataError("tensor rank mismatch for " + name);
    for (size_t d = 0; d < ndim; ++d)
      if (r.u64("dim") != static_cast<uint64_t>(ref.dims[d]))
        throw DataError("tensor shape mismatch for " + name);
    const uint64_t nbytes = r.u64("data length");
    if (nbytes != ref.size * sizeof(S)) throw DataError("tensor size mismatch for " + name);
    r.need(nbytes, "tensor data");
    std::memcpy(ref.data, bytes.data() + r.pos, nbytes);
    r.pos += nbytes;
  }
  return ck;
}

#define MSIMIL_TRAIN_INSTANTIATE(S)                                                          \
  template struct AdamState<S>;                                                              \
  template void adam_step<S>(mil::MilModel<S>&, const mil::MilModel<S>&, AdamState<S>&,      \
                             double, double);                                                \
  template mil::Bag<S> SlideDataset::make_training_bag<S>(size_t, const TrainConfig&,        \
                                                          RandomStream&) const;             \
  template mil::Bag<S> SlideDataset::make_eval_bag<S>(size_t, int, RandomStream&) const;     \
  template mil::Bag<S> SlideDataset::make_bag_from_refs<S>(                                  \
      size_t, const std::vector<slideio::TileRef>&) const;                                   \
  template FoldOutcome<S> train_fold<S>(const SlideDataset&, const std::vector<size_t>&,     \
                                        const std::vector<size_t>&, const TrainConfig&,      \
                                        const mil::ModelShape&, int, int);                   \
  template EnsembleOutcome<S> train_ensemble<S>(const SlideDataset&, const TrainConfig&,     \
                                                const mil::ModelShape&, int);                \
  template PredictionDetail<S> ensemble_predict<S>(const EnsembleModel<S>&,                  \
                                                   const SlideDataset&, size_t, uint64_t,    \
                                                   int);                                     \
  template GridSearchResult<S> grid_search<S>(const GridSpec&,                               \
                                              std::vector<slideio::SlideRecord>,             \
                                              const PipelineConfig&, const TrainConfig&,     \
                                              const mil::ModelShape&, uint64_t, int);        \
  template void save_checkpoint<S>(const std::string&, const mil::MilModel<S>&,              \
                                   const KeyValueMap&);                                      \
  template Checkpoint<S> load_checkpoint<S>(const std::string&);

MSIMIL_TRAIN_INSTANTIATE(float)
MSIMIL_TRAIN_INSTANTIATE(double)
#undef MSIMIL_TRAIN_INSTANTIATE

}  // namespace msimil::train
