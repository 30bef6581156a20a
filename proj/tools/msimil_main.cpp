#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "msimil/common.hpp"
#include "msimil/eval.hpp"
#include "msimil/experiments.hpp"
#include "msimil/ioutil.hpp"
#include "msimil/milcore.hpp"
#include "msimil/runconfig.hpp"
#include "msimil/slideio.hpp"
#include "msimil/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace msimil;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string manifest;
  std::string out;
  std::string predictions;
  std::string paired_predictions;
  std::string ensemble_dir;
  std::vector<std::string> slides;
  int64_t seed_flag = -1;  // -1: keep config value
  int workers_flag = 0;
};

cli::RunConfig resolve_config(const CommonArgs& args) {
  cli::RunConfig cfg =
      args.config_path.empty() ? cli::RunConfig{} : cli::RunConfig::load(args.config_path);
  for (const auto& ov : args.overrides) cfg.apply_override(ov);
  if (args.seed_flag >= 0) cfg.train.seed = static_cast<uint64_t>(args.seed_flag);
  if (args.workers_flag > 0) cfg.workers = args.workers_flag;
  return cfg;
}

void print_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

json config_json(const cli::RunConfig& cfg) {
  json j = json::object();
  std::istringstream in(cfg.serialize());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) j[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return j;
}

/// Every subcommand drops a run manifest next to its outputs: the resolved
/// config, input content hashes and format versions make reruns verifiable.
void write_run_manifest(const std::string& out_dir, const std::string& command,
                        const cli::RunConfig& cfg,
                        const std::vector<std::string>& input_paths,
                        const std::vector<std::string>& output_paths) {
  json j;
  j["schema_version"] = kResultSchemaVersion;
  j["artifact_version"] = kArtifactVersion;
  j["checkpoint_format_version"] = kCheckpointFormatVersion;
  j["feature_format_version"] = kFeatureFileFormatVersion;
  j["command"] = command;
  j["seed"] = cfg.train.seed;
  j["config"] = config_json(cfg);
  json inputs = json::object();
  for (const auto& p : input_paths)
    if (!p.empty() && fs::exists(p)) inputs[p] = "sha256:" + sha256_file_hex(p);
  j["inputs"] = inputs;
  j["outputs"] = output_paths;
  ensure_dir(out_dir);
  atomic_write_file(out_dir + "/run_manifest.json", j.dump(2) + "\n");
  atomic_write_file(out_dir + "/config.txt", cfg.serialize());
}

colorlab::ProfileRegistry load_registry(const cli::RunConfig& cfg) {
  if (cfg.profile_registry_path.empty()) return colorlab::ProfileRegistry{};
  return colorlab::ProfileRegistry::load(cfg.profile_registry_path);
}

train::PipelineConfig make_pipeline(const cli::RunConfig& cfg) {
  train::PipelineConfig pipe;
  pipe.mask = cfg.mask;
  pipe.registry = load_registry(cfg);
  pipe.target_profile = cfg.target_profile;
  pipe.min_tissue_fraction = cfg.min_tissue_fraction;
  if (cfg.norm_override) pipe.stats = *cfg.norm_override;
  return pipe;
}

json ci_json(const eval::BootstrapCI& ci) {
  return json{{"point", ci.point},     {"lower", ci.lower},   {"upper", ci.upper},
              {"n_resamples", ci.n_resamples}, {"level", ci.level}, {"seed", ci.seed},
              {"skipped", ci.skipped}};
}

// ---------------------------------------------------------------- tile ----

int cmd_tile(const CommonArgs& args) {
  const auto cfg = resolve_config(args);
  std::vector<std::string> warnings;
  auto records = slideio::load_manifest(args.manifest, &warnings);
  auto pipe = make_pipeline(cfg);
  train::SlideDataset data(records, pipe, cfg.train.magnification, /*require_label=*/false,
                           &warnings, cfg.effective_workers());
  print_warnings(warnings);

  std::ostringstream tiles_csv;
  tiles_csv << "slide_id,grid_x,grid_y,magnification\n";
  json summary = json::array();
  for (const auto& e : data.entries()) {
    for (const auto& t : e.tiles)
      tiles_csv << e.record.slide_id << ',' << t.grid_x << ',' << t.grid_y << ','
                << t.magnification << '\n';
    json s{{"slide_id", e.record.slide_id}, {"n_tiles", e.tiles.size()}};
    if (e.tissue_area_mm2) s["tissue_area_mm2"] = *e.tissue_area_mm2;
    summary.push_back(s);
  }
  ensure_dir(args.out);
  atomic_write_file(args.out + "/tiles.csv", tiles_csv.str());
  atomic_write_file(args.out + "/tile_summary.json",
                    json{{"schema_version", kResultSchemaVersion}, {"slides", summary}}.dump(2) + "\n");
  write_run_manifest(args.out, "tile", cfg, {args.manifest, cfg.profile_registry_path},
                     {args.out + "/tiles.csv", args.out + "/tile_summary.json"});
  return 0;
}

// ------------------------------------------------------------- datagen ----

int cmd_datagen(const CommonArgs& args) {
  auto cfg = resolve_config(args);
  cfg.synth.seed = cfg.train.seed;
  const auto files = exp::generate_synthetic_cohort(cfg.synth, args.out);
  write_run_manifest(args.out, "datagen", cfg, {}, {files.manifest_path, files.signal_path});
  std::cout << "wrote " << files.records.size() << " slides under " << args.out << "\n";
  return 0;
}

// ---------------------------------------------------------------- pair ----

int cmd_pair(const CommonArgs& args) {
  const auto cfg = resolve_config(args);
  std::vector<std::string> warnings;
  const auto records = slideio::load_manifest(args.manifest, &warnings);
  print_warnings(warnings);
  const auto registry = load_registry(cfg);
  const auto paired = exp::synthesize_paired_sections(records, registry, cfg.profile_internal,
                                                      cfg.profile_external, cfg.pair_noise,
                                                      cfg.train.seed, args.out);
  write_run_manifest(args.out, "pair", cfg, {args.manifest, cfg.profile_registry_path},
                     {paired.external_manifest_path, paired.paired_manifest_path});
  std::cout << "paired manifests written under " << args.out << "\n";
  return 0;
}

// --------------------------------------------------------------- train ----

train::KeyValueMap checkpoint_config(const cli::RunConfig& cfg,
                                     const colorlab::NormalizationStats& stats) {
  train::KeyValueMap kv;
  std::istringstream in(cfg.serialize());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) kv["run." + line.substr(0, eq)] = line.substr(eq + 3);
  }
  std::ostringstream mean, stdev;
  mean.precision(17);
  stdev.precision(17);
  mean << stats.mean[0] << ' ' << stats.mean[1] << ' ' << stats.mean[2];
  stdev << stats.std[0] << ' ' << stats.std[1] << ' ' << stats.std[2];
  kv["norm.mean"] = mean.str();
  kv["norm.std"] = stdev.str();
  return kv;
}

template <class S>
int run_train(const CommonArgs& args, const cli::RunConfig& cfg) {
  std::vector<std::string> warnings;
  const auto records = slideio::load_manifest(args.manifest, &warnings);
  auto pipe = make_pipeline(cfg);
  train::SlideDataset data(records, pipe, cfg.train.magnification, /*require_label=*/true,
                           &warnings, cfg.effective_workers());
  print_warnings(warnings);
  if (!cfg.norm_override)
    pipe.stats = train::sample_normalization_stats(data, cfg.train.seed);

  const auto outcome =
      train::train_ensemble<S>(data, cfg.train, cfg.shape, cfg.effective_workers());

  ensure_dir(args.out);
  const auto kv = checkpoint_config(cfg, pipe.stats);
  json members = json::array();
  for (size_t f = 0; f < outcome.ensemble.models.size(); ++f) {
    const std::string name = "fold" + std::to_string(f) + ".milh";
    train::KeyValueMap fold_kv = kv;
    fold_kv["fold"] = std::to_string(f);
    train::save_checkpoint<S>(args.out + "/" + name, outcome.ensemble.models[f], fold_kv);
    members.push_back(name);
  }

  json folds = json::object();
  for (const auto& [id, f] : outcome.folds.fold_of) folds[id] = f;
  json histories = json::array();
  for (const auto& hist : outcome.histories) {
    json h = json::array();
    for (const auto& e : hist)
      h.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
    histories.push_back(h);
  }
  json ens{{"schema_version", kResultSchemaVersion},
           {"artifact_version", kArtifactVersion},
           {"dtype", cfg.dtype},
           {"members", members},
           {"oof_auc", outcome.oof_auc},
           {"folds", folds},
           {"histories", histories},
           {"norm_mean", outcome.ensemble.stats.mean},
           {"norm_std", outcome.ensemble.stats.std},
           {"config", config_json(cfg)}};
  atomic_write_file(args.out + "/ensemble.json", ens.dump(2) + "\n");
  atomic_write_file(args.out + "/oof_predictions.csv",
                    eval::write_predictions_csv(outcome.oof_scores));
  write_run_manifest(args.out, "train", cfg, {args.manifest, cfg.profile_registry_path},
                     {args.out + "/ensemble.json", args.out + "/oof_predictions.csv"});
  std::cout << "ensemble validation AUC " << outcome.oof_auc << "; checkpoints under "
            << args.out << "\n";
  return 0;
}

// ----------------------------------------------------- ensemble loading ----

template <class S>
struct LoadedEnsemble {
  train::EnsembleModel<S> model;
  cli::RunConfig run_config;  // reconstructed from the checkpoint config block
};

cli::RunConfig config_from_checkpoint_kv(const train::KeyValueMap& kv) {
  cli::RunConfig cfg;
  for (const auto& [key, value] : kv)
    if (key.rfind("run.", 0) == 0) cfg.apply_override(key.substr(4) + "=" + value);
  auto parse3 = [&](const std::string& key, std::array<double, 3>& out) {
    const auto it = kv.find(key);
    if (it == kv.end()) return;
    std::istringstream in(it->second);
    in >> out[0] >> out[1] >> out[2];
  };
  colorlab::NormalizationStats stats;
  parse3("norm.mean", stats.mean);
  parse3("norm.std", stats.std);
  cfg.norm_override = stats;
  return cfg;
}

template <class S>
LoadedEnsemble<S> load_ensemble(const std::string& dir) {
  const json ens = json::parse(read_text_file(dir + "/ensemble.json"));
  LoadedEnsemble<S> out;
  bool first = true;
  for (const auto& member : ens.at("members")) {
    auto ck = train::load_checkpoint<S>(dir + "/" + member.get<std::string>());
    if (first) {
      out.run_config = config_from_checkpoint_kv(ck.config);
      out.model.shape = ck.model.shape;
      first = false;
    }
    out.model.models.push_back(std::move(ck.model));
  }
  if (out.model.models.empty()) throw DataError("ensemble has no members: " + dir);
  out.model.config = out.run_config.train;
  out.model.stats = *out.run_config.norm_override;
  return out;
}

template <class S>
int run_predict(const CommonArgs& args, const cli::RunConfig& local_cfg) {
  auto loaded = load_ensemble<S>(args.ensemble_dir);
  cli::RunConfig cfg = loaded.run_config;
  // the local invocation still controls machine-level and IO settings
  cfg.workers = local_cfg.workers;
  cfg.profile_registry_path = local_cfg.profile_registry_path.empty()
                                  ? cfg.profile_registry_path
                                  : local_cfg.profile_registry_path;
  if (args.seed_flag >= 0) cfg.train.seed = static_cast<uint64_t>(args.seed_flag);

  std::vector<std::string> warnings;
  const auto records = slideio::load_manifest(args.manifest, &warnings);
  auto pipe = make_pipeline(cfg);
  pipe.stats = loaded.model.stats;
  train::SlideDataset data(records, pipe, cfg.train.magnification, /*require_label=*/true,
                           &warnings, cfg.effective_workers());
  print_warnings(warnings);

  std::vector<eval::ScoredCase> cases(data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    const auto detail = train::ensemble_predict<S>(loaded.model, data, i, /*seed=*/0,
                                                   cfg.effective_workers());
    cases[i] = detail.scored;
  }
  ensure_dir(args.out);
  atomic_write_file(args.out + "/predictions.csv", eval::write_predictions_csv(cases));
  write_run_manifest(args.out, "predict", cfg,
                     {args.manifest, args.ensemble_dir + "/ensemble.json"},
                     {args.out + "/predictions.csv"});
  std::cout << "scored " << cases.size() << " slides -> " << args.out << "/predictions.csv\n";
  return 0;
}

// ------------------------------------------------------------ evaluate ----

int cmd_evaluate(const CommonArgs& args) {
  const auto cfg = resolve_config(args);
  std::vector<std::string> warnings;
  const auto cases = eval::parse_predictions_csv(read_text_file(args.predictions), &warnings);
  print_warnings(warnings);

  const uint64_t seed = cfg.train.seed;
  const int n_boot = cfg.bootstrap_resamples;
  auto auc_metric = [](const std::vector<eval::ScoredCase>& sample) -> std::optional<double> {
    size_t pos = 0, neg = 0;
    for (const auto& c : sample) (c.positive ? pos : neg)++;
    if (pos == 0 || neg == 0) return std::nullopt;
    return eval::auc(sample);
  };

  json report;
  report["schema_version"] = kResultSchemaVersion;
  report["artifact_version"] = kArtifactVersion;
  report["seed"] = seed;
  report["n_cases"] = cases.size();
  size_t n_pos = 0;
  for (const auto& c : cases) n_pos += c.positive ? 1 : 0;
  report["n_pos"] = n_pos;
  report["n_neg"] = cases.size() - n_pos;
  report["auc"] = ci_json(eval::bootstrap_ci(auc_metric, cases, n_boot, 0.95,
                                             derive_seed(seed, "eval_auc")));

  json roc = json::array();
  for (const auto& p : eval::roc_curve(cases))
    roc.push_back({{"fpr", p.fpr}, {"tpr", p.tpr}, {"threshold", p.threshold}});
  report["roc"] = roc;

  json ops = json::array();
  for (double target : cfg.eval_target_sensitivities) {
    const auto op = eval::operating_point(cases, target, n_boot,
                                          derive_seed(seed, "eval_op",
                                                      static_cast<uint64_t>(target * 1000)));
    ops.push_back({{"target_sensitivity", op.target_sensitivity},
                   {"threshold", op.threshold},
                   {"sensitivity", ci_json(op.sensitivity)},
                   {"specificity", ci_json(op.specificity)},
                   {"ppv", ci_json(op.ppv)},
                   {"npv", op.npv ? ci_json(*op.npv) : json("undefined")}});
  }
  report["operating_points"] = ops;

  if (!args.paired_predictions.empty()) {
    std::vector<std::string> pw;
    const auto other = eval::parse_predictions_csv(read_text_file(args.paired_predictions), &pw);
    print_warnings(pw);
    std::map<std::string, double> other_score;
    for (const auto& c : other) other_score[c.slide_id] = c.score;
    // match arms on paired_id (fall back to equal slide_id)
    std::vector<eval::ScoredCase> matched;
    std::vector<double> xs, ys;
    for (const auto& c : cases) {
      const std::string key = c.paired_id ? *c.paired_id : c.slide_id;
      const auto it = other_score.find(key);
      if (it == other_score.end()) continue;
      matched.push_back(c);
      xs.push_back(c.score);
      ys.push_back(it->second);
    }
    if (xs.size() >= 2) {
      auto pearson_metric =
          [&other_score](const std::vector<eval::ScoredCase>& sample) -> std::optional<double> {
        std::vector<double> a, b;
        for (const auto& c : sample) {
          const std::string key = c.paired_id ? *c.paired_id : c.slide_id;
          const auto it = other_score.find(key);
          if (it == other_score.end()) return std::nullopt;
          a.push_back(c.score);
          b.push_back(it->second);
        }
        if (a.size() < 2) return std::nullopt;
        try {
          return eval::pearson_r(a, b);
        } catch (const DataError&) {
          return std::nullopt;
        }
      };
      report["paired_pearson_r"] =
          ci_json(eval::bootstrap_ci(pearson_metric, matched, n_boot, 0.95,
                                     derive_seed(seed, "eval_pearson")));
      report["paired_n"] = xs.size();
    }
  }

  ensure_dir(args.out);
  atomic_write_file(args.out + "/metrics.json", report.dump(2) + "\n");
  write_run_manifest(args.out, "evaluate", cfg, {args.predictions, args.paired_predictions},
                     {args.out + "/metrics.json"});
  std::cout << "AUC " << report["auc"]["point"] << " [" << report["auc"]["lower"] << ", "
            << report["auc"]["upper"] << "] -> " << args.out << "/metrics.json\n";
  return 0;
}

// ----------------------------------------------------------- subgroups ----

int cmd_subgroups(const CommonArgs& args) {
  const auto cfg = resolve_config(args);
  std::vector<std::string> warnings;
  const auto cases = eval::parse_predictions_csv(read_text_file(args.predictions), &warnings);
  print_warnings(warnings);

  json groups = json::array();
  const eval::Grouping all[] = {eval::Grouping::ALL,        eval::Grouping::GLEASON_7_8,
                                eval::Grouping::GLEASON_9_10, eval::Grouping::BIOPSY,
                                eval::Grouping::RESECTION,  eval::Grouping::AREA_Q1,
                                eval::Grouping::PURITY_Q1};
  for (size_t gi = 0; gi < std::size(all); ++gi) {
    try {
      const auto res = eval::subgroup_eval(cases, all[gi], cfg.bootstrap_resamples,
                                           derive_seed(cfg.train.seed, "subgroup", gi));
      json g{{"grouping", eval::to_string(res.grouping)},
             {"n", res.n},
             {"n_pos", res.n_pos},
             {"n_neg", res.n_neg},
             {"scores_pos", res.scores_pos},
             {"scores_neg", res.scores_neg}};
      if (res.auc) g["auc"] = ci_json(*res.auc);
      else g["auc"] = "undefined";
      if (res.mann_whitney_p) g["mann_whitney_p"] = *res.mann_whitney_p;
      if (res.cut_value) g["cut_value"] = *res.cut_value;
      groups.push_back(g);
    } catch (const DataError& e) {
      groups.push_back({{"grouping", eval::to_string(all[gi])}, {"error", e.what()}});
    }
  }
  ensure_dir(args.out);
  const json out{{"schema_version", kResultSchemaVersion},
                 {"seed", cfg.train.seed},
                 {"groups", groups}};
  atomic_write_file(args.out + "/subgroups.json", out.dump(2) + "\n");
  write_run_manifest(args.out, "subgroups", cfg, {args.predictions},
                     {args.out + "/subgroups.json"});
  return 0;
}

// ------------------------------------------------- simulate-bagsize etc ----

template <class S>
int run_bagsize(const CommonArgs& args, const cli::RunConfig& local_cfg) {
  auto loaded = load_ensemble<S>(args.ensemble_dir);
  cli::RunConfig cfg = loaded.run_config;
  cfg.workers = local_cfg.workers;
  cfg.bagsim_sizes = local_cfg.bagsim_sizes;
  cfg.bagsim_seeds = local_cfg.bagsim_seeds;
  if (args.seed_flag >= 0) cfg.train.seed = static_cast<uint64_t>(args.seed_flag);

  std::vector<std::string> warnings;
  const auto records = slideio::load_manifest(args.manifest, &warnings);
  auto pipe = make_pipeline(cfg);
  pipe.stats = loaded.model.stats;
  train::SlideDataset data(records, pipe, cfg.train.magnification, true, &warnings,
                           cfg.effective_workers());
  print_warnings(warnings);

  const auto result = exp::simulate_bag_size<S>(loaded.model, data, cfg.bagsim_sizes,
                                                cfg.bagsim_seeds, cfg.train.seed,
                                                cfg.effective_workers());
  json sizes = json::array();
  for (int size : result.sizes)
    sizes.push_back({{"bag_size", size},
                     {"auc_per_seed", result.auc_per_size.at(size)},
                     {"implied_tissue_area_mm2", result.implied_tissue_area_mm2.at(size)}});
  ensure_dir(args.out);
  const json out{{"schema_version", kResultSchemaVersion},
                 {"seed", cfg.train.seed},
                 {"n_seeds", cfg.bagsim_seeds},
                 {"config", config_json(cfg)},
                 {"results", sizes}};
  atomic_write_file(args.out + "/bagsize.json", out.dump(2) + "\n");
  write_run_manifest(args.out, "simulate-bagsize", cfg,
                     {args.manifest, args.ensemble_dir + "/ensemble.json"},
                     {args.out + "/bagsize.json"});
  return 0;
}

template <class S>
int run_titrate(const CommonArgs& args, const cli::RunConfig& cfg) {
  std::vector<std::string> warnings;
  const auto records = slideio::load_manifest(args.manifest, &warnings);
  print_warnings(warnings);
  auto pipe = make_pipeline(cfg);
  const auto result = exp::titrate<S>(records, cfg.titrate_fractions, cfg.train, pipe,
                                      cfg.shape, cfg.train.seed, cfg.effective_workers());
  json points = json::array();
  for (double f : result.fractions)
    points.push_back({{"fraction", f},
                      {"auc", result.auc_per_fraction.at(f)},
                      {"n_slides", result.n_slides.at(f)}});
  ensure_dir(args.out);
  const json out{{"schema_version", kResultSchemaVersion},
                 {"seed", cfg.train.seed},
                 {"config", config_json(cfg)},
                 {"points", points},
                 {"fit", {{"slope", result.slope}, {"intercept", result.intercept},
                          {"x", "ln(fraction)"}}}};
  atomic_write_file(args.out + "/titration.json", out.dump(2) + "\n");
  write_run_manifest(args.out, "titrate", cfg, {args.manifest},
                     {args.out + "/titration.json"});
  return 0;
}

template <class S>
int run_heatmap(const CommonArgs& args, const cli::RunConfig& local_cfg) {
  auto loaded = load_ensemble<S>(args.ensemble_dir);
  cli::RunConfig cfg = loaded.run_config;
  cfg.workers = local_cfg.workers;
  cfg.heatmap_top_n = local_cfg.heatmap_top_n;
  if (args.seed_flag >= 0) cfg.train.seed = static_cast<uint64_t>(args.seed_flag);

  std::vector<std::string> warnings;
  const auto records = slideio::load_manifest(args.manifest, &warnings);
  auto pipe = make_pipeline(cfg);
  pipe.stats = loaded.model.stats;
  train::SlideDataset data(records, pipe, cfg.train.magnification, true, &warnings,
                           cfg.effective_workers());
  print_warnings(warnings);

  std::vector<size_t> wanted;
  if (args.slides.empty()) {
    for (size_t i = 0; i < data.size(); ++i) wanted.push_back(i);
  } else {
    for (const auto& id : args.slides) {
      bool found = false;
      for (size_t i = 0; i < data.size(); ++i)
        if (data.entry(i).record.slide_id == id) {
          wanted.push_back(i);
          found = true;
          break;
        }
      if (!found) throw DataError("slide not in dataset: " + id);
    }
  }

  json index = json::array();
  for (size_t i : wanted) {
    const auto hm = exp::attention_heatmap<S>(loaded.model, data, i, args.out,
                                              cfg.heatmap_top_n, cfg.train.seed,
                                              cfg.effective_workers());
    index.push_back({{"slide_id", data.entry(i).record.slide_id},
                     {"heatmap", hm.heatmap_png},
                     {"attention_csv", hm.attention_csv},
                     {"high_tiles", hm.high_tiles},
                     {"low_tiles", hm.low_tiles}});
  }
  const json out{{"schema_version", kResultSchemaVersion},
                 {"seed", cfg.train.seed},
                 {"slides", index}};
  atomic_write_file(args.out + "/heatmap_index.json", out.dump(2) + "\n");
  write_run_manifest(args.out, "heatmap", cfg,
                     {args.manifest, args.ensemble_dir + "/ensemble.json"},
                     {args.out + "/heatmap_index.json"});
  return 0;
}

template <class S>
int run_tune(const CommonArgs& args, const cli::RunConfig& cfg) {
  std::vector<std::string> warnings;
  const auto records = slideio::load_manifest(args.manifest, &warnings);
  print_warnings(warnings);
  const auto pipe = make_pipeline(cfg);
  const auto result = train::grid_search<S>(cfg.grid, records, pipe, cfg.train, cfg.shape,
                                            cfg.train.seed, cfg.effective_workers());
  json table = json::array();
  for (const auto& point : result.table) {
    json row{{"magnification", point.config.magnification},
             {"learning_rate", point.config.learning_rate},
             {"weight_decay", point.config.weight_decay},
             {"dropout_rate", point.config.dropout_rate},
             {"patience", point.config.patience},
             {"min_delta", point.config.min_delta},
             {"jitter_brightness", point.config.jitter.brightness},
             {"jitter_contrast", point.config.jitter.contrast},
             {"jitter_saturation", point.config.jitter.saturation},
             {"jitter_hue", point.config.jitter.hue}};
    if (point.failed) row["error"] = point.error;
    else row["ensemble_val_auc"] = point.ensemble_val_auc;
    table.push_back(row);
  }
  ensure_dir(args.out);
  const json out{{"schema_version", kResultSchemaVersion},
                 {"seed", cfg.train.seed},
                 {"best_index", result.best_index},
                 {"table", table}};
  atomic_write_file(args.out + "/tune.json", out.dump(2) + "\n");

  // winning configuration, ready to pass back via --config
  cli::RunConfig best_cfg = cfg;
  best_cfg.train = result.table[result.best_index].config;
  atomic_write_file(args.out + "/best_config.txt", best_cfg.serialize());
  write_run_manifest(args.out, "tune", cfg, {args.manifest},
                     {args.out + "/tune.json", args.out + "/best_config.txt"});
  std::cout << "best grid point #" << result.best_index << " AUC "
            << result.table[result.best_index].ensemble_val_auc << "\n";
  return 0;
}

template <int (*F32)(const CommonArgs&, const cli::RunConfig&),
          int (*F64)(const CommonArgs&, const cli::RunConfig&)>
int dispatch_dtype(const CommonArgs& args) {
  const auto cfg = resolve_config(args);
  return cfg.dtype == "f64" ? F64(args, cfg) : F32(args, cfg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-MIL pipeline for MSI-H prediction from slide images"};
  app.set_version_flag("--version",
                       std::string("msimil ") + kArtifactVersion + " (checkpoint format " +
                           std::to_string(kCheckpointFormatVersion) + ", feature format " +
                           std::to_string(kFeatureFileFormatVersion) + ", results schema " +
                           std::to_string(kResultSchemaVersion) + ")");
  app.require_subcommand(1);

  CommonArgs args;
  auto add_common = [&](CLI::App* sub, bool needs_out = true) {
    sub->add_option("--config", args.config_path, "Run configuration file");
    sub->add_option("--set", args.overrides, "Override a config key (key=value)");
    sub->add_option("--seed", args.seed_flag, "Random seed (overrides config)");
    sub->add_option("--workers", args.workers_flag, "Worker thread count");
    if (needs_out) sub->add_option("--out", args.out, "Output directory")->required();
  };

  auto* tile = app.add_subcommand("tile", "Tile slides and report tissue stats");
  add_common(tile);
  tile->add_option("--manifest", args.manifest, "Manifest CSV")->required();

  auto* datagen = app.add_subcommand("datagen", "Generate a synthetic planted-signal cohort");
  add_common(datagen);

  auto* pair = app.add_subcommand("pair", "Synthesize externally-rendered serial sections");
  add_common(pair);
  pair->add_option("--manifest", args.manifest, "Manifest CSV")->required();

  auto* tr = app.add_subcommand("train", "Five-fold cross-validated ensemble training");
  add_common(tr);
  tr->add_option("--manifest", args.manifest, "Manifest CSV")->required();

  auto* tune = app.add_subcommand("tune", "Hyperparameter grid search");
  add_common(tune);
  tune->add_option("--manifest", args.manifest, "Manifest CSV")->required();

  auto* pred = app.add_subcommand("predict", "Ensemble inference over a manifest");
  add_common(pred);
  pred->add_option("--manifest", args.manifest, "Manifest CSV")->required();
  pred->add_option("--ensemble", args.ensemble_dir, "Trained ensemble directory")->required();

  auto* ev = app.add_subcommand("evaluate", "Metrics report from a predictions CSV");
  add_common(ev);
  ev->add_option("--predictions", args.predictions, "Predictions CSV")->required();
  ev->add_option("--paired-predictions", args.paired_predictions,
                 "Second arm for paired correlation");

  auto* sub = app.add_subcommand("subgroups", "Subgroup analyses from a predictions CSV");
  add_common(sub);
  sub->add_option("--predictions", args.predictions, "Predictions CSV")->required();

  auto* bagsim = app.add_subcommand("simulate-bagsize", "Bag-size limit-of-detection study");
  add_common(bagsim);
  bagsim->add_option("--manifest", args.manifest, "Manifest CSV")->required();
  bagsim->add_option("--ensemble", args.ensemble_dir, "Trained ensemble directory")->required();

  auto* titr = app.add_subcommand("titrate", "Training-data titration study");
  add_common(titr);
  titr->add_option("--manifest", args.manifest, "Manifest CSV")->required();

  auto* heat = app.add_subcommand("heatmap", "Attention heatmaps and tile exports");
  add_common(heat);
  heat->add_option("--manifest", args.manifest, "Manifest CSV")->required();
  heat->add_option("--ensemble", args.ensemble_dir, "Trained ensemble directory")->required();
  heat->add_option("--slide", args.slides, "Slide id (repeatable; default: all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help/--version
    std::cerr << R"({"error":{"code":1,"kind":"usage","message":)"
              << json(std::string(e.what())).dump() << "}}\n";
    return 1;
  }

  try {
    if (tile->parsed()) return cmd_tile(args);
    if (datagen->parsed()) return cmd_datagen(args);
    if (pair->parsed()) return cmd_pair(args);
    if (tr->parsed()) return dispatch_dtype<run_train<float>, run_train<double>>(args);
    if (tune->parsed()) return dispatch_dtype<run_tune<float>, run_tune<double>>(args);
    if (pred->parsed()) return dispatch_dtype<run_predict<float>, run_predict<double>>(args);
    if (ev->parsed()) return cmd_evaluate(args);
    if (sub->parsed()) return cmd_subgroups(args);
    if (bagsim->parsed()) return dispatch_dtype<run_bagsize<float>, run_bagsize<double>>(args);
    if (titr->parsed()) return dispatch_dtype<run_titrate<float>, run_titrate<double>>(args);
    if (heat->parsed()) return dispatch_dtype<run_heatmap<float>, run_heatmap<double>>(args);
    std::cerr << R"({"error":{"code":1,"kind":"usage","message":"no subcommand"}})" << "\n";
    return 1;
  } catch (const UsageError& e) {
    std::cerr << R"({"error":{"code":1,"kind":"usage","message":)"
              << json(std::string(e.what())).dump() << "}}\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << R"({"error":{"code":2,"kind":"data","message":)"
              << json(std::string(e.what())).dump() << "}}\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << R"({"error":{"code":3,"kind":"internal","message":)"
              << json(std::string(e.what())).dump() << "}}\n";
    return 3;
  }
}
