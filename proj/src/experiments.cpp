#include "msimil/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "msimil/common.hpp"
#include "msimil/ioutil.hpp"

namespace msimil::exp {

namespace fs = std::filesystem;

void SyntheticCohortSpec::validate() const {
  if (n_slides < 2) throw DataError("synthetic cohort needs at least 2 slides");
  if (positive_prevalence <= 0.0 || positive_prevalence >= 1.0)
    throw DataError("positive_prevalence must be in (0,1)");
  if (signal_tile_fraction <= 0.0 || signal_tile_fraction > 1.0)
    throw DataError("signal_tile_fraction must be in (0,1]");
  if (signal_strength < 0.0) throw DataError("signal_strength must be >= 0");
  if (slide_width < 256 || slide_height < 256)
    throw DataError("slides must be at least one tile large");
  if (image_format != "raw" && image_format != "png")
    throw DataError("image_format must be raw or png");
}

ImageU8 render_synthetic_slide(const SyntheticCohortSpec& spec, uint64_t slide_seed,
                               const std::set<std::pair<int, int>>& signal_tiles) {
  RandomStream rng(slide_seed);
  const int h = spec.slide_height, w = spec.slide_width;
  const size_t n = static_cast<size_t>(h) * w;
  std::vector<float> buf(n * 3);

  // base H&E-ish pink
  const double base[3] = {228.0 + rng.uniform(-8, 8), 158.0 + rng.uniform(-10, 10),
                          196.0 + rng.uniform(-8, 8)};
  for (size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) buf[i * 3 + c] = static_cast<float>(base[c]);

  // soft purple blobs (nuclei clusters / gland shadows at desk scale)
  const int n_blobs = 30 + static_cast<int>(rng.below(21));
  for (int bidx = 0; bidx < n_blobs; ++bidx) {
    const double cx = rng.uniform(0, w), cy = rng.uniform(0, h);
    const double r = rng.uniform(30, 130);
    const double dr = rng.uniform(-45, 5);
    const double dg = rng.uniform(-50, -5);
    const double db = rng.uniform(-25, 15);
    const int x0 = std::max(0, static_cast<int>(cx - 1.5 * r));
    const int x1 = std::min(w, static_cast<int>(cx + 1.5 * r) + 1);
    const int y0 = std::max(0, static_cast<int>(cy - 1.5 * r));
    const int y1 = std::min(h, static_cast<int>(cy + 1.5 * r) + 1);
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        const double dx = (x - cx) / r, dy = (y - cy) / r;
        const double d2 = dx * dx + dy * dy;
        if (d2 >= 2.25) continue;
        const double fall = (1.0 - d2 / 2.25);
        const double fw = fall * fall;
        float* px = &buf[(static_cast<size_t>(y) * w + x) * 3];
        px[0] += static_cast<float>(dr * fw);
        px[1] += static_cast<float>(dg * fw);
        px[2] += static_cast<float>(db * fw);
      }
    }
  }

  // planted signal: a 2px-cell checker plus a slight purple shift, both
  // scaled by signal_strength
  const double amp = 55.0 * spec.signal_strength;
  const double shift[3] = {-10.0 * spec.signal_strength, -18.0 * spec.signal_strength,
                           -4.0 * spec.signal_strength};
  for (const auto& [gx, gy] : signal_tiles) {
    const int x0 = gx * 256, y0 = gy * 256;
    for (int y = y0; y < y0 + 256 && y < h; ++y) {
      for (int x = x0; x < x0 + 256 && x < w; ++x) {
        const double sign = (((x >> 1) + (y >> 1)) & 1) ? 1.0 : -1.0;
        float* px = &buf[(static_cast<size_t>(y) * w + x) * 3];
        for (int c = 0; c < 3; ++c)
          px[c] += static_cast<float>(sign * amp + shift[c]);
      }
    }
  }

  // per-pixel luminance noise
  ImageU8 img(h, w);
  for (size_t i = 0; i < n; ++i) {
    const float noise = static_cast<float>(rng.uniform(-6, 6));
    for (int c = 0; c < 3; ++c) {
      const float v = buf[i * 3 + c] + noise;
      img.px[i * 3 + c] = static_cast<uint8_t>(std::lround(std::min(255.0f, std::max(0.0f, v))));
    }
  }
  return img;
}

CohortFiles generate_synthetic_cohort(const SyntheticCohortSpec& spec,
                                      const std::string& out_dir) {
  spec.validate();
  ensure_dir(out_dir + "/slides");

  const int nx = spec.slide_width / 256, ny = spec.slide_height / 256;
  const int n_tiles = nx * ny;
  const int n_pos = std::max(
      1, static_cast<int>(std::llround(spec.positive_prevalence * spec.n_slides)));

  std::vector<bool> positive(spec.n_slides, false);
  {
    RandomStream rng(derive_seed(spec.seed, "labels"));
    for (size_t i : rng.sample_without_replacement(spec.n_slides, n_pos)) positive[i] = true;
  }

  CohortFiles out;
  out.records.resize(spec.n_slides);
  std::vector<std::set<std::pair<int, int>>> signals(spec.n_slides);

  const int k_signal =
      std::max(1, static_cast<int>(std::llround(spec.signal_tile_fraction * n_tiles)));
  for (int i = 0; i < spec.n_slides; ++i) {
    if (!positive[i]) continue;
    RandomStream rng(derive_seed(spec.seed, "signal", static_cast<uint64_t>(i)));
    for (size_t idx : rng.sample_without_replacement(n_tiles, k_signal))
      signals[i].insert({static_cast<int>(idx) % nx, static_cast<int>(idx) / nx});
  }

  parallel_for(static_cast<size_t>(spec.n_slides), 2, [&](size_t i) {
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "S%04zu", i);
    const std::string id = idbuf;
    const std::string ext = spec.image_format == "png" ? ".png" : ".rgb";
    const std::string path = out_dir + "/slides/" + id + ext;

    const ImageU8 img =
        render_synthetic_slide(spec, derive_seed(spec.seed, "slide", i), signals[i]);
    save_image(img, path);

    RandomStream meta(derive_seed(spec.seed, "meta", i));
    slideio::SlideRecord rec;
    rec.slide_id = id;
    rec.image_path = path;
    rec.label = positive[i] ? slideio::Label::MSI_H : slideio::Label::MSS;
    rec.gleason_total = 7 + static_cast<int>(meta.below(4));
    rec.procedure = static_cast<slideio::Procedure>(meta.below(3));
    rec.scanner_profile = spec.profile_internal;
    rec.stain_site = slideio::StainSite::INTERNAL;
    {
      char date[16];
      std::snprintf(date, sizeof(date), "%04d-%02d-%02d", 2021 + static_cast<int>(meta.below(3)),
                    1 + static_cast<int>(meta.below(12)), 1 + static_cast<int>(meta.below(28)));
      rec.collection_date = date;
    }
    rec.tumor_purity = 0.2 + 0.7 * meta.uniform01();
    rec.microns_per_pixel = spec.microns_per_pixel;
    out.records[i] = std::move(rec);
  });

  for (int i = 0; i < spec.n_slides; ++i)
    if (positive[i]) out.signal_tiles[out.records[i].slide_id] = signals[i];

  out.manifest_path = out_dir + "/manifest.csv";
  atomic_write_file(out.manifest_path, slideio::write_manifest(out.records));

  std::ostringstream sig;
  sig << "slide_id,grid_x,grid_y\n";
  for (const auto& [id, tiles] : out.signal_tiles)
    for (const auto& [gx, gy] : tiles) sig << id << ',' << gx << ',' << gy << '\n';
  out.signal_path = out_dir + "/signal_tiles.csv";
  atomic_write_file(out.signal_path, sig.str());
  return out;
}

PairedSections synthesize_paired_sections(const std::vector<slideio::SlideRecord>& records,
                                          const colorlab::ProfileRegistry& registry,
                                          const std::string& profile_internal,
                                          const std::string& profile_external,
                                          const colorlab::JitterParams& jitter_noise,
                                          uint64_t seed, const std::string& out_dir) {
  ensure_dir(out_dir + "/slides_ext");
  const auto& src_profile = registry.get(profile_internal);
  const auto& dst_profile = registry.get(profile_external);

  PairedSections out;
  out.internal_records = records;
  out.external_records.resize(records.size());

  parallel_for(records.size(), 2, [&](size_t i) {
    const auto& rec = records[i];
    ImageU8 img = load_image(rec.image_path);
    img = colorlab::apply_profile_transform(img, src_profile, dst_profile);
    RandomStream rng(derive_seed(seed, "paired_section", i));
    const auto factors = colorlab::draw_jitter_factors(jitter_noise, rng);
    img = colorlab::apply_color_jitter(img, factors);

    const std::string ext = fs::path(rec.image_path).extension().string();
    const std::string path = out_dir + "/slides_ext/" + rec.slide_id + "_ext" + ext;
    save_image(img, path);

    slideio::SlideRecord ext_rec = rec;
    ext_rec.slide_id = rec.slide_id + "_ext";
    ext_rec.image_path = path;
    ext_rec.scanner_profile = profile_external;
    ext_rec.stain_site = slideio::StainSite::EXTERNAL;
    ext_rec.paired_id = rec.slide_id;
    out.external_records[i] = std::move(ext_rec);
  });

  for (size_t i = 0; i < records.size(); ++i) {
    out.internal_records[i].stain_site = slideio::StainSite::INTERNAL;
    out.internal_records[i].paired_id = out.external_records[i].slide_id;
  }

  out.external_manifest_path = out_dir + "/manifest_external.csv";
  atomic_write_file(out.external_manifest_path, slideio::write_manifest(out.external_records));
  std::vector<slideio::SlideRecord> both = out.internal_records;
  both.insert(both.end(), out.external_records.begin(), out.external_records.end());
  out.paired_manifest_path = out_dir + "/manifest_paired.csv";
  atomic_write_file(out.paired_manifest_path, slideio::write_manifest(both));
  return out;
}

template <class S>
BagSizeResult simulate_bag_size(const train::EnsembleModel<S>& ensemble,
                                const train::SlideDataset& data, const std::vector<int>& sizes,
                                int n_seeds, uint64_t seed, int workers) {
  if (sizes.empty() || n_seeds < 1) throw DataError("simulate_bag_size: nothing to do");
  const size_t n_slides = data.size();
  const size_t n_models = ensemble.models.size();

  // Per-tile features are deterministic in evaluation mode, so compute them
  // once per (slide, model) and re-pool for every (size, seed).
  std::vector<std::vector<mil::Mat<S>>> feats(n_slides);  // [slide][model] K x D
  for (auto& f : feats) f.resize(n_models);
  parallel_for(n_slides * n_models, workers, [&](size_t task) {
    const size_t i = task / n_models, m = task % n_models;
    const auto bag = data.make_bag_from_refs<S>(i, data.entry(i).tiles);
    if (bag.from_features) {
      feats[i][m] = bag.features;
    } else {
      feats[i][m] = mil::extract_features<S>(bag.tiles, ensemble.models[m].extractor);
    }
  });

  std::vector<std::unordered_map<std::string, size_t>> ref_index(n_slides);
  for (size_t i = 0; i < n_slides; ++i) {
    const auto& tiles = data.entry(i).tiles;
    for (size_t t = 0; t < tiles.size(); ++t)
      ref_index[i][std::to_string(tiles[t].grid_x) + "," + std::to_string(tiles[t].grid_y)] = t;
  }

  double mean_mpp = 0.0;
  for (size_t i = 0; i < n_slides; ++i) mean_mpp += data.entry(i).record.microns_per_pixel;
  mean_mpp /= static_cast<double>(n_slides);

  BagSizeResult out;
  out.sizes = sizes;
  const double mpp_at_mag =
      mean_mpp * (static_cast<double>(slideio::SlideImage::kNativeMagnification) /
                  static_cast<double>(data.magnification()));
  for (int size : sizes)
    out.implied_tissue_area_mm2[size] =
        static_cast<double>(size) * (256.0 * mpp_at_mag) * (256.0 * mpp_at_mag) / 1e6;

  for (size_t size_idx = 0; size_idx < sizes.size(); ++size_idx) {
    const int size = sizes[size_idx];
    for (int seed_idx = 0; seed_idx < n_seeds; ++seed_idx) {
      std::vector<double> scores(n_slides);
      parallel_for(n_slides, workers, [&](size_t i) {
        RandomStream rng(derive_seed(seed, "bagsim",
                                     (size_idx << 20) | static_cast<uint64_t>(seed_idx), i));
        const auto refs =
            train::sample_bag(data.entry(i).tiles, size, train::BagMode::OVERSAMPLE, rng);
        std::vector<size_t> rows(refs.size());
        for (size_t r = 0; r < refs.size(); ++r)
          rows[r] = ref_index[i].at(std::to_string(refs[r].grid_x) + "," +
                                    std::to_string(refs[r].grid_y));
        std::vector<double> model_scores(n_models);
        RandomStream unused(0);
        for (size_t m = 0; m < n_models; ++m) {
          mil::Bag<S> bag;
          bag.from_features = true;
          bag.features.resize(static_cast<Eigen::Index>(rows.size()),
                              feats[i][m].cols());
          for (size_t r = 0; r < rows.size(); ++r)
            bag.features.row(static_cast<Eigen::Index>(r)) =
                feats[i][m].row(static_cast<Eigen::Index>(rows[r]));
          model_scores[m] = static_cast<double>(
              mil::forward<S>(bag, ensemble.models[m], /*training=*/false, unused).score);
        }
        std::sort(model_scores.begin(), model_scores.end());
        double sum = 0.0;
        for (double v : model_scores) sum += v;
        scores[i] = sum / static_cast<double>(n_models);
      });
      std::vector<eval::ScoredCase> cases;
      cases.reserve(n_slides);
      for (size_t i = 0; i < n_slides; ++i)
        cases.push_back(train::make_scored_case(data.entry(i), scores[i]));
      out.auc_per_size[size].push_back(eval::auc(cases));
    }
  }
  return out;
}

std::pair<double, double> ols_fit(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DataError("ols_fit: need >= 2 paired points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx <= 0.0) throw DataError("ols_fit: zero variance in x");
  const double slope = sxy / sxx;
  return {slope, my - slope * mx};
}

template <class S>
TitrationResult titrate(const std::vector<slideio::SlideRecord>& records,
                        const std::vector<double>& fractions, const train::TrainConfig& cfg,
                        const train::PipelineConfig& pipe, const mil::ModelShape& shape,
                        uint64_t seed, int workers) {
  if (fractions.empty()) throw DataError("titrate: no fractions given");
  for (double f : fractions)
    if (f <= 0.0 || f > 1.0) throw DataError("titrate: fractions must be in (0,1]");

  std::vector<size_t> pos_idx, neg_idx;
  for (size_t i = 0; i < records.size(); ++i) {
    if (records[i].label == slideio::Label::MSI_H) pos_idx.push_back(i);
    else if (records[i].label == slideio::Label::MSS) neg_idx.push_back(i);
  }
  if (pos_idx.empty() || neg_idx.empty())
    throw DataError("titrate: cohort needs both classes");

  // one shuffle per class; every fraction takes a prefix, so subsets nest
  {
    RandomStream rng(derive_seed(seed, "titration_pos"));
    rng.shuffle(pos_idx);
  }
  {
    RandomStream rng(derive_seed(seed, "titration_neg"));
    rng.shuffle(neg_idx);
  }

  TitrationResult out;
  out.fractions = fractions;
  for (double f : fractions) {
    const size_t np = std::max<size_t>(
        1, static_cast<size_t>(std::llround(f * static_cast<double>(pos_idx.size()))));
    const size_t nn = std::max<size_t>(
        1, static_cast<size_t>(std::llround(f * static_cast<double>(neg_idx.size()))));
    std::vector<size_t> chosen(pos_idx.begin(), pos_idx.begin() + std::min(np, pos_idx.size()));
    chosen.insert(chosen.end(), neg_idx.begin(),
                  neg_idx.begin() + std::min(nn, neg_idx.size()));
    std::sort(chosen.begin(), chosen.end());  // manifest order
    std::vector<slideio::SlideRecord> subset;
    subset.reserve(chosen.size());
    for (size_t i : chosen) subset.push_back(records[i]);

    train::PipelineConfig pipe_f = pipe;
    train::SlideDataset data(subset, pipe_f, cfg.magnification, /*require_label=*/true,
                             nullptr, workers);
    pipe_f.stats = train::sample_normalization_stats(data, cfg.seed);
    const auto outcome = train::train_ensemble<S>(data, cfg, shape, workers);
    out.auc_per_fraction[f] = outcome.oof_auc;
    out.n_slides[f] = subset.size();
    for (const auto& r : subset) out.subset_ids[f].push_back(r.slide_id);
  }

  std::vector<double> xs, ys;
  for (double f : fractions) {
    xs.push_back(std::log(f));
    ys.push_back(out.auc_per_fraction.at(f));
  }
  std::tie(out.slope, out.intercept) = ols_fit(xs, ys);
  return out;
}

template <class S>
HeatmapOutput attention_heatmap(const train::EnsembleModel<S>& ensemble,
                                const train::SlideDataset& data, size_t entry_index,
                                const std::string& out_dir, int top_n, uint64_t seed,
                                int workers) {
  const auto& entry = data.entry(entry_index);
  if (entry.tiles.empty()) throw DataError("attention_heatmap: slide has no tiles");
  if (entry.from_features)
    throw DataError("attention_heatmap: feature-backed slides have no pixels to render");
  ensure_dir(out_dir + "/high");
  ensure_dir(out_dir + "/low");

  const auto detail = train::ensemble_predict<S>(ensemble, data, entry_index, seed, workers);

  // mean attention per tile identity across models
  std::map<std::pair<int, int>, std::pair<double, int>> sums;
  for (size_t m = 0; m < detail.model_bags.size(); ++m)
    for (size_t k = 0; k < detail.model_bags[m].size(); ++k) {
      const auto& ref = detail.model_bags[m][k];
      auto& slot = sums[{ref.grid_x, ref.grid_y}];
      slot.first += static_cast<double>(detail.model_attention[m](static_cast<Eigen::Index>(k)));
      slot.second += 1;
    }

  HeatmapOutput out;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& [key, slot] : sums) {
    const double mean = slot.first / slot.second;
    out.attention[key] = mean;
    lo = std::min(lo, mean);
    hi = std::max(hi, mean);
  }
  for (auto& [key, value] : out.attention)
    value = hi > lo ? (value - lo) / (hi - lo) : 1.0;  // degenerate min == max

  const std::string& id = entry.record.slide_id;
  {
    std::ostringstream csv;
    csv << "slide_id,grid_x,grid_y,attention\n";
    csv.precision(6);
    csv << std::fixed;
    for (const auto& [key, value] : out.attention)
      csv << id << ',' << key.first << ',' << key.second << ',' << value << '\n';
    out.attention_csv = out_dir + "/" + id + "_attention.csv";
    atomic_write_file(out.attention_csv, csv.str());
  }

  const auto img = data.load_slide(entry_index);
  const int factor = slideio::SlideImage::kNativeMagnification / data.magnification();
  const int foot = 256 * factor;
  const int thumb_block = 16;
  const ImageU8 thumb = slideio::downsample_block_mean(img.pixels, foot / thumb_block);
  ImageU8 overlay = thumb;
  for (const auto& [key, value] : out.attention) {
    const double alpha = 0.55 * value;
    for (int y = key.second * thumb_block; y < (key.second + 1) * thumb_block; ++y)
      for (int x = key.first * thumb_block; x < (key.first + 1) * thumb_block; ++x) {
        if (y >= overlay.height || x >= overlay.width) continue;
        overlay.at(y, x, 0) =
            static_cast<uint8_t>(std::lround((1 - alpha) * overlay.at(y, x, 0) + alpha * 255));
        overlay.at(y, x, 1) = static_cast<uint8_t>(std::lround((1 - alpha) * overlay.at(y, x, 1)));
        overlay.at(y, x, 2) = static_cast<uint8_t>(std::lround((1 - alpha) * overlay.at(y, x, 2)));
      }
  }
  out.heatmap_png = out_dir + "/" + id + "_heatmap.png";
  save_png(overlay, out.heatmap_png);

  std::vector<std::pair<std::pair<int, int>, double>> ranked(out.attention.begin(),
                                                             out.attention.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const int n_crop = std::min<int>(top_n, static_cast<int>(ranked.size()));
  auto save_crop = [&](const std::pair<int, int>& key, double att, int rank, bool high) {
    slideio::TileRef ref{id, key.first, key.second, data.magnification()};
    char name[128];
    std::snprintf(name, sizeof(name), "%s/%s_%d_%.4f.png",
                  (out_dir + (high ? "/high" : "/low")).c_str(), id.c_str(), rank, att);
    save_png(slideio::load_tile(img, ref), name);
    return std::string(name);
  };
  for (int r = 0; r < n_crop; ++r)
    out.high_tiles.push_back(save_crop(ranked[r].first, ranked[r].second, r + 1, true));
  for (int r = 0; r < n_crop; ++r) {
    const auto& item = ranked[ranked.size() - 1 - r];
    out.low_tiles.push_back(save_crop(item.first, item.second, r + 1, false));
  }
  return out;
}

#define MSIMIL_EXP_INSTANTIATE(S)                                                         \
  template BagSizeResult simulate_bag_size<S>(const train::EnsembleModel<S>&,             \
                                              const train::SlideDataset&,                 \
                                              const std::vector<int>&, int, uint64_t,     \
                                              int);                                       \
  template TitrationResult titrate<S>(const std::vector<slideio::SlideRecord>&,           \
                                      const std::vector<double>&, const train::TrainConfig&, \
                                      const train::PipelineConfig&, const mil::ModelShape&,  \
                                      uint64_t, int);                                     \
  template HeatmapOutput attention_heatmap<S>(const train::EnsembleModel<S>&,             \
                                              const train::SlideDataset&, size_t,         \
                                              const std::string&, int, uint64_t, int);

MSIMIL_EXP_INSTANTIATE(float)
MSIMIL_EXP_INSTANTIATE(double)
#undef MSIMIL_EXP_INSTANTIATE

}  // namespace msimil::exp
