#include "msimil/runconfig.hpp"

#include <functional>
#include <sstream>
#include <thread>

#include "msimil/common.hpp"
#include "msimil/ioutil.hpp"

namespace msimil::cli {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  const auto b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (...) {
    throw UsageError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const int x = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (...) {
    throw UsageError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const uint64_t x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (...) {
    throw UsageError("config key '" + key + "': expected an unsigned integer, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw UsageError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<double> parse_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::istringstream in(v);
  std::string tok;
  while (in >> tok) out.push_back(parse_double(key, tok));
  return out;
}

std::vector<int> parse_ints(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::istringstream in(v);
  std::string tok;
  while (in >> tok) out.push_back(parse_int(key, tok));
  return out;
}

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream out;
  out.precision(17);
  for (size_t i = 0; i < v.size(); ++i) out << (i ? " " : "") << v[i];
  return out.str();
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    auto add = [&](std::string key, auto set, auto get) {
      f.push_back({std::move(key), set, get});
    };

    add("seed", [](RunConfig& c, const std::string& v) { c.train.seed = parse_u64("seed", v); },
        [](const RunConfig& c) { return std::to_string(c.train.seed); });
    add("dtype",
        [](RunConfig& c, const std::string& v) {
          if (v != "f32" && v != "f64") throw UsageError("config key 'dtype': must be f32 or f64");
          c.dtype = v;
        },
        [](const RunConfig& c) { return c.dtype; });
    add("workers",
        [](RunConfig& c, const std::string& v) { c.workers = parse_int("workers", v); },
        [](const RunConfig& c) { return std::to_string(c.workers); });

    add("magnification",
        [](RunConfig& c, const std::string& v) { c.train.magnification = parse_int("magnification", v); },
        [](const RunConfig& c) { return std::to_string(c.train.magnification); });
    add("learning_rate",
        [](RunConfig& c, const std::string& v) { c.train.learning_rate = parse_double("learning_rate", v); },
        [](const RunConfig& c) { return fmt(c.train.learning_rate); });
    add("weight_decay",
        [](RunConfig& c, const std::string& v) { c.train.weight_decay = parse_double("weight_decay", v); },
        [](const RunConfig& c) { return fmt(c.train.weight_decay); });
    add("dropout_rate",
        [](RunConfig& c, const std::string& v) { c.train.dropout_rate = parse_double("dropout_rate", v); },
        [](const RunConfig& c) { return fmt(c.train.dropout_rate); });
    add("patience",
        [](RunConfig& c, const std::string& v) { c.train.patience = parse_int("patience", v); },
        [](const RunConfig& c) { return std::to_string(c.train.patience); });
    add("min_delta",
        [](RunConfig& c, const std::string& v) { c.train.min_delta = parse_double("min_delta", v); },
        [](const RunConfig& c) { return fmt(c.train.min_delta); });
    add("bag_size_train",
        [](RunConfig& c, const std::string& v) { c.train.bag_size_train = parse_int("bag_size_train", v); },
        [](const RunConfig& c) { return std::to_string(c.train.bag_size_train); });
    add("bag_size_infer",
        [](RunConfig& c, const std::string& v) { c.train.bag_size_infer = parse_int("bag_size_infer", v); },
        [](const RunConfig& c) { return std::to_string(c.train.bag_size_infer); });
    add("batch_size",
        [](RunConfig& c, const std::string& v) { c.train.batch_size = parse_int("batch_size", v); },
        [](const RunConfig& c) { return std::to_string(c.train.batch_size); });
    add("max_epochs",
        [](RunConfig& c, const std::string& v) { c.train.max_epochs = parse_int("max_epochs", v); },
        [](const RunConfig& c) { return std::to_string(c.train.max_epochs); });
    add("decoupled_weight_decay",
        [](RunConfig& c, const std::string& v) {
          c.train.decoupled_weight_decay = parse_bool("decoupled_weight_decay", v);
        },
        [](const RunConfig& c) { return c.train.decoupled_weight_decay ? "true" : "false"; });
    add("per_model_bags",
        [](RunConfig& c, const std::string& v) { c.train.per_model_bags = parse_bool("per_model_bags", v); },
        [](const RunConfig& c) { return c.train.per_model_bags ? "true" : "false"; });

    add("jitter_brightness",
        [](RunConfig& c, const std::string& v) { c.train.jitter.brightness = parse_double("jitter_brightness", v); },
        [](const RunConfig& c) { return fmt(c.train.jitter.brightness); });
    add("jitter_contrast",
        [](RunConfig& c, const std::string& v) { c.train.jitter.contrast = parse_double("jitter_contrast", v); },
        [](const RunConfig& c) { return fmt(c.train.jitter.contrast); });
    add("jitter_saturation",
        [](RunConfig& c, const std::string& v) { c.train.jitter.saturation = parse_double("jitter_saturation", v); },
        [](const RunConfig& c) { return fmt(c.train.jitter.saturation); });
    add("jitter_hue",
        [](RunConfig& c, const std::string& v) { c.train.jitter.hue = parse_double("jitter_hue", v); },
        [](const RunConfig& c) { return fmt(c.train.jitter.hue); });
    add("jitter_scope",
        [](RunConfig& c, const std::string& v) {
          if (v == "slide") c.train.jitter.scope = colorlab::JitterScope::SLIDE;
          else if (v == "tile") c.train.jitter.scope = colorlab::JitterScope::TILE;
          else throw UsageError("config key 'jitter_scope': must be slide or tile");
        },
        [](const RunConfig& c) {
          return c.train.jitter.scope == colorlab::JitterScope::SLIDE ? "slide" : "tile";
        });

    add("feature_dim",
        [](RunConfig& c, const std::string& v) { c.shape.feature_dim = parse_int("feature_dim", v); },
        [](const RunConfig& c) { return std::to_string(c.shape.feature_dim); });
    add("attention_dim",
        [](RunConfig& c, const std::string& v) { c.shape.attention_dim = parse_int("attention_dim", v); },
        [](const RunConfig& c) { return std::to_string(c.shape.attention_dim); });
    add("gated_attention",
        [](RunConfig& c, const std::string& v) { c.shape.gated_attention = parse_bool("gated_attention", v); },
        [](const RunConfig& c) { return c.shape.gated_attention ? "true" : "false"; });
    add("conv_channels",
        [](RunConfig& c, const std::string& v) {
          const auto ch = parse_ints("conv_channels", v);
          if (ch.size() != 3) throw UsageError("config key 'conv_channels': expected 3 integers");
          c.shape.conv_channels = {ch[0], ch[1], ch[2]};
        },
        [](const RunConfig& c) {
          return join(std::vector<int>(c.shape.conv_channels.begin(), c.shape.conv_channels.end()));
        });

    add("mask_white_threshold",
        [](RunConfig& c, const std::string& v) { c.mask.white_threshold = parse_double("mask_white_threshold", v); },
        [](const RunConfig& c) { return fmt(c.mask.white_threshold); });
    add("mask_tissue_saturation_min",
        [](RunConfig& c, const std::string& v) {
          c.mask.tissue_saturation_min = parse_double("mask_tissue_saturation_min", v);
        },
        [](const RunConfig& c) { return fmt(c.mask.tissue_saturation_min); });
    add("mask_marker_saturation_min",
        [](RunConfig& c, const std::string& v) {
          c.mask.marker_saturation_min = parse_double("mask_marker_saturation_min", v);
        },
        [](const RunConfig& c) { return fmt(c.mask.marker_saturation_min); });
    add("mask_marker_hue_bands",
        [](RunConfig& c, const std::string& v) {
          std::vector<std::pair<double, double>> bands;
          std::istringstream in(v);
          std::string tok;
          while (in >> tok) {
            const auto colon = tok.find(':');
            if (colon == std::string::npos)
              throw UsageError("config key 'mask_marker_hue_bands': expected lo:hi pairs");
            bands.emplace_back(parse_double("mask_marker_hue_bands", tok.substr(0, colon)),
                               parse_double("mask_marker_hue_bands", tok.substr(colon + 1)));
          }
          c.mask.marker_hue_bands = std::move(bands);
        },
        [](const RunConfig& c) {
          std::ostringstream out;
          out.precision(17);
          for (size_t i = 0; i < c.mask.marker_hue_bands.size(); ++i)
            out << (i ? " " : "") << c.mask.marker_hue_bands[i].first << ':'
                << c.mask.marker_hue_bands[i].second;
          return out.str();
        });
    add("min_tissue_fraction",
        [](RunConfig& c, const std::string& v) { c.min_tissue_fraction = parse_double("min_tissue_fraction", v); },
        [](const RunConfig& c) { return fmt(c.min_tissue_fraction); });

    add("profile_registry",
        [](RunConfig& c, const std::string& v) { c.profile_registry_path = v; },
        [](const RunConfig& c) { return c.profile_registry_path; });
    add("target_profile",
        [](RunConfig& c, const std::string& v) { c.target_profile = v; },
        [](const RunConfig& c) { return c.target_profile; });
    add("profile_internal",
        [](RunConfig& c, const std::string& v) {
          c.profile_internal = v;
          c.synth.profile_internal = v;
        },
        [](const RunConfig& c) { return c.profile_internal; });
    add("profile_external",
        [](RunConfig& c, const std::string& v) {
          c.profile_external = v;
          c.synth.profile_external = v;
        },
        [](const RunConfig& c) { return c.profile_external; });
    add("norm_mean",
        [](RunConfig& c, const std::string& v) {
          if (v.empty()) return;
          const auto m = parse_doubles("norm_mean", v);
          if (m.size() != 3) throw UsageError("config key 'norm_mean': expected 3 values");
          if (!c.norm_override) c.norm_override.emplace();
          c.norm_override->mean = {m[0], m[1], m[2]};
        },
        [](const RunConfig& c) {
          return c.norm_override ? join(std::vector<double>(c.norm_override->mean.begin(),
                                                            c.norm_override->mean.end()))
                                 : std::string();
        });
    add("norm_std",
        [](RunConfig& c, const std::string& v) {
          if (v.empty()) return;
          const auto s = parse_doubles("norm_std", v);
          if (s.size() != 3) throw UsageError("config key 'norm_std': expected 3 values");
          if (!c.norm_override) c.norm_override.emplace();
          c.norm_override->std = {s[0], s[1], s[2]};
        },
        [](const RunConfig& c) {
          return c.norm_override ? join(std::vector<double>(c.norm_override->std.begin(),
                                                            c.norm_override->std.end()))
                                 : std::string();
        });

    add("heatmap_top_n",
        [](RunConfig& c, const std::string& v) { c.heatmap_top_n = parse_int("heatmap_top_n", v); },
        [](const RunConfig& c) { return std::to_string(c.heatmap_top_n); });
    add("eval_target_sensitivities",
        [](RunConfig& c, const std::string& v) { c.eval_target_sensitivities = parse_doubles("eval_target_sensitivities", v); },
        [](const RunConfig& c) { return join(c.eval_target_sensitivities); });
    add("bootstrap_resamples",
        [](RunConfig& c, const std::string& v) { c.bootstrap_resamples = parse_int("bootstrap_resamples", v); },
        [](const RunConfig& c) { return std::to_string(c.bootstrap_resamples); });

    add("synth_n_slides",
        [](RunConfig& c, const std::string& v) { c.synth.n_slides = parse_int("synth_n_slides", v); },
        [](const RunConfig& c) { return std::to_string(c.synth.n_slides); });
    add("synth_prevalence",
        [](RunConfig& c, const std::string& v) { c.synth.positive_prevalence = parse_double("synth_prevalence", v); },
        [](const RunConfig& c) { return fmt(c.synth.positive_prevalence); });
    add("synth_slide_width",
        [](RunConfig& c, const std::string& v) { c.synth.slide_width = parse_int("synth_slide_width", v); },
        [](const RunConfig& c) { return std::to_string(c.synth.slide_width); });
    add("synth_slide_height",
        [](RunConfig& c, const std::string& v) { c.synth.slide_height = parse_int("synth_slide_height", v); },
        [](const RunConfig& c) { return std::to_string(c.synth.slide_height); });
    add("synth_signal_tile_fraction",
        [](RunConfig& c, const std::string& v) {
          c.synth.signal_tile_fraction = parse_double("synth_signal_tile_fraction", v);
        },
        [](const RunConfig& c) { return fmt(c.synth.signal_tile_fraction); });
    add("synth_signal_strength",
        [](RunConfig& c, const std::string& v) { c.synth.signal_strength = parse_double("synth_signal_strength", v); },
        [](const RunConfig& c) { return fmt(c.synth.signal_strength); });
    add("synth_mpp",
        [](RunConfig& c, const std::string& v) { c.synth.microns_per_pixel = parse_double("synth_mpp", v); },
        [](const RunConfig& c) { return fmt(c.synth.microns_per_pixel); });
    add("synth_format",
        [](RunConfig& c, const std::string& v) {
          if (v != "raw" && v != "png") throw UsageError("config key 'synth_format': must be raw or png");
          c.synth.image_format = v;
        },
        [](const RunConfig& c) { return c.synth.image_format; });

    add("pair_brightness",
        [](RunConfig& c, const std::string& v) { c.pair_noise.brightness = parse_double("pair_brightness", v); },
        [](const RunConfig& c) { return fmt(c.pair_noise.brightness); });
    add("pair_contrast",
        [](RunConfig& c, const std::string& v) { c.pair_noise.contrast = parse_double("pair_contrast", v); },
        [](const RunConfig& c) { return fmt(c.pair_noise.contrast); });
    add("pair_saturation",
        [](RunConfig& c, const std::string& v) { c.pair_noise.saturation = parse_double("pair_saturation", v); },
        [](const RunConfig& c) { return fmt(c.pair_noise.saturation); });
    add("pair_hue",
        [](RunConfig& c, const std::string& v) { c.pair_noise.hue = parse_double("pair_hue", v); },
        [](const RunConfig& c) { return fmt(c.pair_noise.hue); });

    add("bagsim_sizes",
        [](RunConfig& c, const std::string& v) { c.bagsim_sizes = parse_ints("bagsim_sizes", v); },
        [](const RunConfig& c) { return join(c.bagsim_sizes); });
    add("bagsim_seeds",
        [](RunConfig& c, const std::string& v) { c.bagsim_seeds = parse_int("bagsim_seeds", v); },
        [](const RunConfig& c) { return std::to_string(c.bagsim_seeds); });
    add("titrate_fractions",
        [](RunConfig& c, const std::string& v) { c.titrate_fractions = parse_doubles("titrate_fractions", v); },
        [](const RunConfig& c) { return join(c.titrate_fractions); });

    add("grid_magnification",
        [](RunConfig& c, const std::string& v) { c.grid.magnification = parse_ints("grid_magnification", v); },
        [](const RunConfig& c) { return join(c.grid.magnification); });
    add("grid_learning_rate",
        [](RunConfig& c, const std::string& v) { c.grid.learning_rate = parse_doubles("grid_learning_rate", v); },
        [](const RunConfig& c) { return join(c.grid.learning_rate); });
    add("grid_weight_decay",
        [](RunConfig& c, const std::string& v) { c.grid.weight_decay = parse_doubles("grid_weight_decay", v); },
        [](const RunConfig& c) { return join(c.grid.weight_decay); });
    add("grid_dropout_rate",
        [](RunConfig& c, const std::string& v) { c.grid.dropout_rate = parse_doubles("grid_dropout_rate", v); },
        [](const RunConfig& c) { return join(c.grid.dropout_rate); });
    add("grid_patience",
        [](RunConfig& c, const std::string& v) { c.grid.patience = parse_ints("grid_patience", v); },
        [](const RunConfig& c) { return join(c.grid.patience); });
    add("grid_min_delta",
        [](RunConfig& c, const std::string& v) { c.grid.min_delta = parse_doubles("grid_min_delta", v); },
        [](const RunConfig& c) { return join(c.grid.min_delta); });
    add("grid_jitter_brightness",
        [](RunConfig& c, const std::string& v) { c.grid.jitter_brightness = parse_doubles("grid_jitter_brightness", v); },
        [](const RunConfig& c) { return join(c.grid.jitter_brightness); });
    add("grid_jitter_contrast",
        [](RunConfig& c, const std::string& v) { c.grid.jitter_contrast = parse_doubles("grid_jitter_contrast", v); },
        [](const RunConfig& c) { return join(c.grid.jitter_contrast); });
    add("grid_jitter_saturation",
        [](RunConfig& c, const std::string& v) { c.grid.jitter_saturation = parse_doubles("grid_jitter_saturation", v); },
        [](const RunConfig& c) { return join(c.grid.jitter_saturation); });
    add("grid_jitter_hue",
        [](RunConfig& c, const std::string& v) { c.grid.jitter_hue = parse_doubles("grid_jitter_hue", v); },
        [](const RunConfig& c) { return join(c.grid.jitter_hue); });
    return f;
  }();
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const Field* field = find_field(key);
    if (!field) throw UsageError("unknown config key: '" + key + "'");
    field->set(cfg, value);
  }
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) { return parse(read_text_file(path)); }

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw UsageError("override must look like key=value, got '" + assignment + "'");
  const std::string key = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));
  const Field* field = find_field(key);
  if (!field) throw UsageError("unknown config key: '" + key + "'");
  field->set(*this, value);
}

std::string RunConfig::serialize() const {
  std::ostringstream out;
  for (const auto& f : fields()) out << f.key << " = " << f.get(*this) << '\n';
  return out.str();
}

int RunConfig::effective_workers() const {
  if (workers > 0) return workers;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace msimil::cli
