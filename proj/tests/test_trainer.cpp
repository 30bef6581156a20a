#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "msimil/common.hpp"
#include "msimil/ioutil.hpp"
#include "msimil/trainer.hpp"

using namespace msimil;
using namespace msimil::train;

namespace {

namespace fs = std::filesystem;

slideio::SlideRecord record(const std::string& id, bool positive, int gleason = 0,
                            int procedure = -1) {
  slideio::SlideRecord r;
  r.slide_id = id;
  r.label = positive ? slideio::Label::MSI_H : slideio::Label::MSS;
  if (gleason >= 7) r.gleason_total = gleason;
  if (procedure >= 0) r.procedure = static_cast<slideio::Procedure>(procedure);
  return r;
}

/// Planted-signal cohort of precomputed-feature slides; separable by the
/// attention head alone, so trainer tests stay fast.
struct FeatureCohort {
  std::vector<slideio::SlideRecord> records;
  std::string dir;
};

FeatureCohort make_feature_cohort(int n_slides, int k, int d, double prevalence, double shift,
                                  uint64_t seed, const std::string& name) {
  FeatureCohort out;
  out.dir = (fs::temp_directory_path() / name).string();
  fs::create_directories(out.dir);
  const int n_pos = std::max(1, static_cast<int>(std::llround(prevalence * n_slides)));
  RandomStream label_rng(derive_seed(seed, "labels"));
  std::vector<bool> positive(n_slides, false);
  for (size_t i : label_rng.sample_without_replacement(n_slides, n_pos)) positive[i] = true;

  for (int i = 0; i < n_slides; ++i) {
    RandomStream rng(derive_seed(seed, "slide", i));
    Eigen::MatrixXf f(k, d);
    for (int r = 0; r < k; ++r)
      for (int c = 0; c < d; ++c) f(r, c) = static_cast<float>(rng.normal());
    if (positive[i]) {
      const int n_signal = std::max(1, k / 4);
      for (size_t r : rng.sample_without_replacement(k, n_signal))
        for (int c = 0; c < std::min(4, d); ++c)
          f(static_cast<int>(r), c) += static_cast<float>(shift);
    }
    const std::string path = out.dir + "/s" + std::to_string(i) + ".milf";
    mil::save_features(path, f);
    auto rec = record("s" + std::to_string(i), positive[i], 7 + static_cast<int>(rng.below(4)),
                      static_cast<int>(rng.below(3)));
    rec.image_path = path;
    out.records.push_back(rec);
  }
  return out;
}

TrainConfig fast_config(uint64_t seed) {
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.dropout_rate = 0.1;
  cfg.patience = 5;
  cfg.min_delta = 0.0;
  cfg.bag_size_train = 16;
  cfg.bag_size_infer = 64;
  cfg.batch_size = 8;
  cfg.max_epochs = 12;
  cfg.jitter = {0, 0, 0, 0, colorlab::JitterScope::SLIDE};
  cfg.seed = seed;
  return cfg;
}

mil::ModelShape feature_shape(int d) {
  mil::ModelShape s;
  s.feature_dim = d;
  s.attention_dim = 16;
  return s;
}

template <class S>
bool models_bitwise_equal(const mil::MilModel<S>& a, const mil::MilModel<S>& b) {
  auto ra = mil::param_refs(const_cast<mil::MilModel<S>&>(a));
  auto rb = mil::param_refs(const_cast<mil::MilModel<S>&>(b));
  if (ra.size() != rb.size()) return false;
  for (size_t i = 0; i < ra.size(); ++i) {
    if (ra[i].size != rb[i].size) return false;
    if (std::memcmp(ra[i].data, rb[i].data, ra[i].size * sizeof(S)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("EarlyStopper: patience 1 with strictly worsening loss stops after update 2") {
  EarlyStopper stopper(1, 0.00025);
  auto u1 = stopper.update(1.0);
  CHECK(u1.new_best);
  CHECK_FALSE(u1.stop);
  auto u2 = stopper.update(1.1);
  CHECK_FALSE(u2.new_best);
  CHECK(u2.stop);
  CHECK(stopper.best() == 1.0);
}

TEST_CASE("EarlyStopper: min_delta 0 with constant loss stops after patience updates") {
  EarlyStopper stopper(3, 0.0);
  CHECK_FALSE(stopper.update(0.7).stop);  // initial best
  CHECK_FALSE(stopper.update(0.7).stop);
  CHECK_FALSE(stopper.update(0.7).stop);
  CHECK(stopper.update(0.7).stop);  // three stalls
}

TEST_CASE("EarlyStopper: sub-min_delta improvements still update the snapshot") {
  EarlyStopper stopper(2, 0.1);
  stopper.update(1.0);
  auto u = stopper.update(0.95);  // better, but not by min_delta
  CHECK(u.new_best);              // snapshot must follow the strict best
  CHECK_FALSE(u.stop);
  CHECK(stopper.best() == 0.95);
  CHECK(stopper.update(0.94).stop);  // second stall at patience 2
}

TEST_CASE("stratified_folds: ten records in one stratum deal 2-2-2-2-2") {
  std::vector<slideio::SlideRecord> recs;
  for (int i = 0; i < 10; ++i) recs.push_back(record("s" + std::to_string(i), false));
  const auto folds = stratified_folds(recs, 5, 1);
  std::array<int, 5> counts{};
  for (const auto& r : recs) counts[folds.fold_of.at(r.slide_id)]++;
  for (int c : counts) CHECK(c == 2);
}

TEST_CASE("stratified_folds: seven records differ by at most one per fold") {
  std::vector<slideio::SlideRecord> recs;
  for (int i = 0; i < 7; ++i) recs.push_back(record("s" + std::to_string(i), false));
  const auto folds = stratified_folds(recs, 5, 3);
  std::array<int, 5> counts{};
  for (const auto& r : recs) counts[folds.fold_of.at(r.slide_id)]++;
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  CHECK(*hi - *lo <= 1);
}

TEST_CASE("stratified_folds: two strata of twenty give four per stratum per fold") {
  std::vector<slideio::SlideRecord> recs;
  for (int i = 0; i < 20; ++i) recs.push_back(record("pos" + std::to_string(i), true));
  for (int i = 0; i < 20; ++i) recs.push_back(record("neg" + std::to_string(i), false));
  const auto folds = stratified_folds(recs, 5, 9);
  std::map<std::pair<bool, int>, int> counts;
  for (const auto& r : recs)
    counts[{r.label == slideio::Label::MSI_H, folds.fold_of.at(r.slide_id)}]++;
  for (const auto& [key, c] : counts) CHECK(c == 4);
}

TEST_CASE("stratified_folds: per-stratum balance over random manifests") {
  RandomStream rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<slideio::SlideRecord> recs;
    const int n = 5 + static_cast<int>(rng.below(200));
    for (int i = 0; i < n; ++i) {
      auto r = record("s" + std::to_string(i), rng.bernoulli(0.2));
      if (rng.bernoulli(0.7)) r.gleason_total = 7 + static_cast<int>(rng.below(4));
      if (rng.bernoulli(0.7)) r.procedure = static_cast<slideio::Procedure>(rng.below(3));
      r.scanner_profile = rng.bernoulli(0.5) ? "a" : "b";
      recs.push_back(r);
    }
    const auto folds = stratified_folds(recs, 5, trial);
    std::map<std::string, std::array<int, 5>> per_stratum;
    for (const auto& r : recs) {
      std::string key = slideio::to_string(r.label) + "|" + r.scanner_profile + "|" +
                        (r.procedure ? slideio::to_string(*r.procedure) : "-") + "|" +
                        (r.gleason_total ? std::to_string(*r.gleason_total) : "-");
      per_stratum[key][folds.fold_of.at(r.slide_id)]++;
    }
    for (const auto& [key, counts] : per_stratum) {
      const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
      CHECK(*hi - *lo <= 1);
    }
  }
}

TEST_CASE("sample_bag: n == B returns the full set in input order") {
  std::vector<slideio::TileRef> refs;
  for (int i = 0; i < 5; ++i) refs.push_back({"s", i, 0, 20});
  RandomStream rng(1);
  const auto bag = sample_bag(refs, 5, BagMode::CAP, rng);
  CHECK(bag == refs);
}

TEST_CASE("sample_bag: n > B draws B distinct refs") {
  std::vector<slideio::TileRef> refs;
  for (int i = 0; i < 5; ++i) refs.push_back({"s", i, 0, 20});
  RandomStream rng(2);
  const auto bag = sample_bag(refs, 3, BagMode::CAP, rng);
  REQUIRE(bag.size() == 3);
  std::set<int> seen;
  for (const auto& t : bag) CHECK(seen.insert(t.grid_x).second);
}

TEST_CASE("sample_bag: oversample property over 1000 seeds") {
  std::vector<slideio::TileRef> refs = {{"s", 0, 0, 20}, {"s", 1, 0, 20}};
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    RandomStream rng(seed);
    const auto bag = sample_bag(refs, 6, BagMode::OVERSAMPLE, rng);
    REQUIRE(bag.size() == 6);
    int n0 = 0, n1 = 0;
    for (const auto& t : bag) (t.grid_x == 0 ? n0 : n1)++;
    CHECK(n0 >= 1);
    CHECK(n1 >= 1);
  }
}

TEST_CASE("sample_bag: CAP keeps all n when n < B; empty input is an error") {
  std::vector<slideio::TileRef> refs = {{"s", 0, 0, 20}, {"s", 1, 0, 20}};
  RandomStream rng(3);
  CHECK(sample_bag(refs, 100, BagMode::CAP, rng).size() == 2);
  CHECK_THROWS_AS(sample_bag({}, 3, BagMode::CAP, rng), DataError);
}

TEST_CASE("adam_step: zero gradient leaves parameters unchanged, t advances") {
  mil::ModelShape shape{3, {3, 4, 5}, 4, 6, false};
  auto model = mil::init_model<double>(shape, 1);
  const auto before = model;
  auto state = AdamState<double>::init(model);
  const auto grads = mil::zeros_like(model);
  adam_step(model, grads, state, 0.1, 0.0);
  CHECK(state.t == 1);
  CHECK(models_bitwise_equal(model, before));
}

TEST_CASE("adam_step: bias-correction arithmetic at t = 1") {
  mil::ModelShape shape{3, {3, 4, 5}, 4, 6, false};
  auto model = mil::zero_model<double>(shape);
  model.classifier.bias = 1.0;
  auto grads = mil::zeros_like(model);
  grads.classifier.bias = 0.5;
  auto state = AdamState<double>::init(model);
  adam_step(model, grads, state, 0.1, 0.0);
  // t=1: m_hat = g, v_hat = g^2, step = lr * g/(|g| + eps) ~ lr
  CHECK(static_cast<double>(model.classifier.bias) ==
        doctest::Approx(1.0 - 0.1 * (0.5 / (0.5 + 1e-8))).epsilon(1e-12));
}

TEST_CASE("adam_step: deterministic and rejects non-finite gradients by name") {
  mil::ModelShape shape{3, {3, 4, 5}, 4, 6, false};
  auto m1 = mil::init_model<double>(shape, 5);
  auto m2 = m1;
  auto s1 = AdamState<double>::init(m1);
  auto s2 = AdamState<double>::init(m2);
  auto grads = mil::zeros_like(m1);
  RandomStream rng(9);
  for (auto& ref : mil::param_refs(grads))
    for (size_t i = 0; i < ref.size; ++i) ref.data[i] = rng.normal();
  for (int step = 0; step < 5; ++step) {
    adam_step(m1, grads, s1, 1e-3, 1e-4);
    adam_step(m2, grads, s2, 1e-3, 1e-4);
  }
  CHECK(models_bitwise_equal(m1, m2));

  grads.attention.w(0) = std::numeric_limits<double>::quiet_NaN();
  try {
    adam_step(m1, grads, s1, 1e-3, 0.0);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("attention.w") != std::string::npos);
  }
}

TEST_CASE("adam_step: decoupled weight decay shrinks parameters without touching moments") {
  mil::ModelShape shape{3, {3, 4, 5}, 2, 3, false};
  auto model = mil::zero_model<double>(shape);
  model.classifier.bias = 2.0;
  auto state = AdamState<double>::init(model);
  state.decoupled_weight_decay = true;
  adam_step(model, mil::zeros_like(model), state, 0.1, 0.5);
  // zero gradient: only the decay term moves the parameter
  CHECK(static_cast<double>(model.classifier.bias) == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));
}

TEST_CASE("SlideDataset: feature cohort, exclusions and warnings") {
  auto cohort = make_feature_cohort(10, 12, 6, 0.3, 2.0, 42, "msimil_ds_test");
  cohort.records[3].label = slideio::Label::UNKNOWN;
  PipelineConfig pipe;
  std::vector<std::string> warnings;
  SlideDataset data(cohort.records, pipe, 20, /*require_label=*/true, &warnings);
  CHECK(data.size() == 9);
  CHECK(warnings.size() == 1);
  for (const auto& e : data.entries()) {
    CHECK(e.from_features);
    CHECK(e.tiles.size() == 12);
    CHECK_FALSE(e.tissue_area_mm2.has_value());
  }

  auto bad = cohort.records;
  bad[0].scanner_profile = "missing-profile";
  CHECK_THROWS_AS(SlideDataset(bad, pipe, 20, true, nullptr), DataError);
}

TEST_CASE("train_fold: learns a separable feature cohort and is bit-reproducible") {
  auto cohort = make_feature_cohort(40, 16, 8, 0.3, 2.5, 7, "msimil_tf_test");
  PipelineConfig pipe;
  SlideDataset data(cohort.records, pipe, 20, true, nullptr);
  const auto cfg = fast_config(11);
  const auto shape = feature_shape(8);

  std::vector<size_t> train_idx, val_idx;
  for (size_t i = 0; i < data.size(); ++i) (i % 5 == 0 ? val_idx : train_idx).push_back(i);

  const auto a = train_fold<double>(data, train_idx, val_idx, cfg, shape, 0, 2);
  const auto b = train_fold<double>(data, train_idx, val_idx, cfg, shape, 0, 1);
  CHECK(models_bitwise_equal(a.model, b.model));  // worker count must not matter
  REQUIRE(!a.history.empty());
  CHECK(a.history.size() <= static_cast<size_t>(cfg.max_epochs));
  for (const auto& e : a.history) CHECK(a.best_val_loss <= e.val_loss);
  CHECK(a.best_epoch >= 1);

  // single-class validation split is a hard error
  std::vector<size_t> neg_only;
  for (size_t i = 0; i < data.size(); ++i)
    if (data.entry(i).record.label == slideio::Label::MSS && neg_only.size() < 5)
      neg_only.push_back(i);
  CHECK_THROWS_AS(train_fold<double>(data, train_idx, neg_only, cfg, shape, 0, 1), DataError);
}

TEST_CASE("checkpoint: bitwise round trip, checksum and dtype guards") {
  const auto dir = fs::temp_directory_path() / "msimil_ckpt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "m.milh").string();

  mil::ModelShape shape{3, {4, 6, 8}, 5, 7, true};
  auto model = mil::init_model<float>(shape, 33);
  model.classifier.dropout_rate = 0.25;
  save_checkpoint<float>(path, model, {{"run.seed", "33"}, {"note", "fixture"}});

  const auto ck = load_checkpoint<float>(path);
  CHECK(models_bitwise_equal(ck.model, model));
  CHECK(ck.model.shape == shape);
  CHECK(ck.model.classifier.dropout_rate == doctest::Approx(0.25));
  CHECK(ck.config.at("note") == "fixture");
  CHECK(ck.config.at("format.dtype") == "f32");

  CHECK_THROWS_AS(load_checkpoint<double>(path), DataError);  // dtype mismatch

  auto bytes = read_binary_file(path);
  bytes[bytes.size() / 2] ^= 0xff;
  const std::string corrupt = (dir / "corrupt.milh").string();
  atomic_write_file(corrupt, bytes.data(), bytes.size());
  CHECK_THROWS_AS(load_checkpoint<float>(corrupt), DataError);
}

TEST_CASE("train_ensemble: five folds, out-of-fold coverage, separable AUC") {
  auto cohort = make_feature_cohort(50, 16, 8, 0.3, 2.5, 21, "msimil_te_test");
  PipelineConfig pipe;
  SlideDataset data(cohort.records, pipe, 20, true, nullptr);
  const auto outcome = train_ensemble<double>(data, fast_config(5), feature_shape(8), 2);
  CHECK(outcome.ensemble.models.size() == 5);
  CHECK(outcome.oof_scores.size() == data.size());
  std::set<std::string> ids;
  for (const auto& s : outcome.oof_scores) ids.insert(s.slide_id);
  CHECK(ids.size() == data.size());
  CHECK(outcome.oof_auc > 0.9);  // a cleanly separable cohort must be learned
  CHECK(outcome.histories.size() == 5);
}

TEST_CASE("ensemble_predict: mean of forced per-model scores, order invariance") {
  auto cohort = make_feature_cohort(6, 8, 4, 0.5, 1.0, 51, "msimil_ep_test");
  PipelineConfig pipe;
  SlideDataset data(cohort.records, pipe, 20, true, nullptr);

  const mil::ModelShape shape = feature_shape(4);
  EnsembleModel<double> ens;
  ens.config = fast_config(1);
  ens.shape = shape;
  const double targets[5] = {0.1, 0.2, 0.3, 0.4, 0.5};
  for (double s : targets) {
    auto m = mil::zero_model<double>(shape);
    m.classifier.bias = std::log(s / (1.0 - s));  // logit: score independent of the bag
    m.classifier.dropout_rate = 0.0;
    ens.models.push_back(m);
  }
  const auto detail = ensemble_predict<double>(ens, data, 0, 7, 1);
  CHECK(detail.scored.score == doctest::Approx(0.3).epsilon(1e-12));
  REQUIRE(detail.model_bags.size() == 5);
  CHECK(detail.model_bags[0] == detail.model_bags[4]);  // shared bag by default

  auto shuffled = ens;
  std::swap(shuffled.models[0], shuffled.models[3]);
  std::swap(shuffled.models[1], shuffled.models[4]);
  const auto detail2 = ensemble_predict<double>(shuffled, data, 0, 7, 1);
  CHECK(detail2.scored.score == detail.scored.score);  // bitwise: sorted reduction

  const auto detail3 = ensemble_predict<double>(ens, data, 0, 7, 2);
  CHECK(detail3.scored.score == detail.scored.score);

  // five identical models equal the single-model score
  EnsembleModel<double> same = ens;
  same.models.assign(5, ens.models[2]);
  const auto detail4 = ensemble_predict<double>(same, data, 0, 7, 1);
  CHECK(detail4.scored.score == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("grid_search: one-point grid, determinism, shuffled labels lose") {
  auto cohort = make_feature_cohort(40, 16, 8, 0.3, 2.5, 61, "msimil_gs_test");
  PipelineConfig pipe;
  const auto base = fast_config(13);
  const auto shape = feature_shape(8);

  GridSpec one;
  one.learning_rate = {0.05};
  const auto r1 = grid_search<double>(one, cohort.records, pipe, base, shape, 99, 2);
  REQUIRE(r1.table.size() == 1);
  CHECK_FALSE(r1.table[0].failed);
  CHECK(r1.table[0].config.learning_rate == 0.05);

  const auto r2 = grid_search<double>(one, cohort.records, pipe, base, shape, 99, 2);
  CHECK(r1.table[0].ensemble_val_auc == r2.table[0].ensemble_val_auc);

  // the same single-point grid on label-shuffled records scores worse
  auto shuffled = cohort.records;
  std::vector<slideio::Label> labels;
  for (const auto& r : shuffled) labels.push_back(r.label);
  RandomStream rng(3);
  rng.shuffle(labels);
  for (size_t i = 0; i < shuffled.size(); ++i) shuffled[i].label = labels[i];
  const auto r3 = grid_search<double>(one, shuffled, pipe, base, shape, 99, 2);
  CHECK(r1.table[0].ensemble_val_auc > r3.table[0].ensemble_val_auc);
}

TEST_CASE("grid_search expands the cartesian product in deterministic order") {
  GridSpec grid;
  grid.learning_rate = {1e-3, 1e-2};
  grid.dropout_rate = {0.0, 0.2};
  const auto configs = grid.expand(fast_config(1));
  REQUIRE(configs.size() == 4);
  CHECK(configs[0].learning_rate == 1e-3);
  CHECK(configs[0].dropout_rate == 0.0);
  CHECK(configs[1].dropout_rate == 0.2);
  CHECK(configs[2].learning_rate == 1e-2);
}
