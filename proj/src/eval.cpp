#include "msimil/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "msimil/common.hpp"
#include "msimil/ioutil.hpp"
#include "msimil/rng.hpp"

namespace msimil::eval {

namespace {

struct Counts {
  size_t n_pos = 0, n_neg = 0;
};

Counts count_classes(const std::vector<ScoredCase>& cases) {
  Counts c;
  for (const auto& k : cases) (k.positive ? c.n_pos : c.n_neg)++;
  return c;
}

std::optional<double> auc_or_nullopt(const std::vector<ScoredCase>& cases) {
  const auto c = count_classes(cases);
  if (c.n_pos == 0 || c.n_neg == 0) return std::nullopt;
  return auc(cases);
}

/// Confusion counts with "positive" meaning score >= threshold.
struct Confusion {
  size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

Confusion confusion_at(const std::vector<ScoredCase>& cases, double threshold) {
  Confusion c;
  for (const auto& k : cases) {
    const bool pred = k.score >= threshold;
    if (k.positive) (pred ? c.tp : c.fn)++;
    else (pred ? c.fp : c.tn)++;
  }
  return c;
}

/// The highest empirical threshold whose sensitivity reaches the target;
/// nullopt when the sample has no positives.
std::optional<double> threshold_for_target(const std::vector<ScoredCase>& cases,
                                           double target) {
  const auto c = count_classes(cases);
  if (c.n_pos == 0) return std::nullopt;
  for (const auto& p : roc_curve(cases))
    if (p.tpr >= target && std::isfinite(p.threshold)) return p.threshold;
  return std::nullopt;  // unreachable for target <= 1
}

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace

double auc(const std::vector<ScoredCase>& cases) {
  const auto counts = count_classes(cases);
  if (counts.n_pos == 0 || counts.n_neg == 0)
    throw DataError("AUC undefined: input has a single class (" +
                    std::to_string(counts.n_pos) + " positive, " +
                    std::to_string(counts.n_neg) + " negative)");
  const size_t n = cases.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return cases[a].score < cases[b].score; });

  // midranks over tie blocks; rank sums of half-integers are exact in double
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && cases[order[j]].score == cases[order[i]].score) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (size_t k = i; k < j; ++k)
      if (cases[order[k]].positive) rank_sum_pos += midrank;
    i = j;
  }
  const double n1 = static_cast<double>(counts.n_pos);
  const double n2 = static_cast<double>(counts.n_neg);
  const double u = rank_sum_pos - n1 * (n1 + 1.0) / 2.0;
  return u / (n1 * n2);
}

std::vector<RocPoint> roc_curve(const std::vector<ScoredCase>& cases) {
  const auto counts = count_classes(cases);
  if (counts.n_pos == 0 || counts.n_neg == 0)
    throw DataError("ROC undefined: input has a single class");
  std::vector<size_t> order(cases.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return cases[a].score > cases[b].score; });

  std::vector<RocPoint> roc;
  roc.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  size_t tp = 0, fp = 0, i = 0;
  const size_t n = cases.size();
  while (i < n) {
    size_t j = i;
    const double score = cases[order[i]].score;
    while (j < n && cases[order[j]].score == score) {
      if (cases[order[j]].positive) ++tp;
      else ++fp;
      ++j;
    }
    roc.push_back({static_cast<double>(fp) / static_cast<double>(counts.n_neg),
                   static_cast<double>(tp) / static_cast<double>(counts.n_pos), score});
    i = j;
  }
  return roc;
}

double trapezoid_area(const std::vector<RocPoint>& roc) {
  double area = 0.0;
  for (size_t i = 1; i < roc.size(); ++i)
    area += (roc[i].fpr - roc[i - 1].fpr) * (roc[i].tpr + roc[i - 1].tpr) * 0.5;
  return area;
}

BootstrapCI bootstrap_ci(const Metric& metric, const std::vector<ScoredCase>& cases,
                         int n_resamples, double level, uint64_t seed) {
  if (cases.empty()) throw DataError("bootstrap_ci: empty sample");
  const auto point = metric(cases);
  if (!point) throw DataError("bootstrap_ci: metric undefined on the full sample");

  BootstrapCI ci;
  ci.point = *point;
  ci.n_resamples = n_resamples;
  ci.level = level;
  ci.seed = seed;

  const size_t n = cases.size();
  std::vector<double> values;
  values.reserve(n_resamples);
  std::vector<ScoredCase> resample(n);
  for (int r = 0; r < n_resamples; ++r) {
    RandomStream rng(derive_seed(seed, "bootstrap", static_cast<uint64_t>(r)));
    for (size_t k = 0; k < n; ++k) resample[k] = cases[rng.below(n)];
    if (const auto v = metric(resample)) values.push_back(*v);
    else ++ci.skipped;
  }
  if (ci.skipped * 2 > n_resamples)
    throw DataError("bootstrap_ci: more than half the resamples were undefined; "
                    "consider a stratified bootstrap");
  const double alpha = (1.0 - level) / 2.0;
  ci.lower = quantile(values, alpha);
  ci.upper = quantile(values, 1.0 - alpha);
  return ci;
}

BootstrapCI bootstrap_diff_ci(const Metric& metric, const std::vector<ScoredCase>& cases_a,
                              const std::vector<ScoredCase>& cases_b, int n_resamples,
                              double level, uint64_t seed) {
  if (cases_a.size() != cases_b.size())
    throw DataError("bootstrap_diff_ci: arms differ in size");
  std::unordered_map<std::string, size_t> index_b;
  for (size_t i = 0; i < cases_b.size(); ++i) index_b[cases_b[i].slide_id] = i;
  std::vector<size_t> b_of_a(cases_a.size());
  for (size_t i = 0; i < cases_a.size(); ++i) {
    const auto it = index_b.find(cases_a[i].slide_id);
    if (it == index_b.end())
      throw DataError("bootstrap_diff_ci: slide_id '" + cases_a[i].slide_id +
                      "' missing from the second arm");
    b_of_a[i] = it->second;
  }

  const auto pa = metric(cases_a), pb = metric(cases_b);
  if (!pa || !pb) throw DataError("bootstrap_diff_ci: metric undefined on a full arm");

  BootstrapCI ci;
  ci.point = *pa - *pb;
  ci.n_resamples = n_resamples;
  ci.level = level;
  ci.seed = seed;

  const size_t n = cases_a.size();
  std::vector<double> values;
  values.reserve(n_resamples);
  std::vector<ScoredCase> ra(n), rb(n);
  for (int r = 0; r < n_resamples; ++r) {
    RandomStream rng(derive_seed(seed, "paired_bootstrap", static_cast<uint64_t>(r)));
    for (size_t k = 0; k < n; ++k) {
      const size_t idx = rng.below(n);
      ra[k] = cases_a[idx];
      rb[k] = cases_b[b_of_a[idx]];
    }
    const auto va = metric(ra), vb = metric(rb);
    if (va && vb) values.push_back(*va - *vb);
    else ++ci.skipped;
  }
  if (ci.skipped * 2 > n_resamples)
    throw DataError("bootstrap_diff_ci: more than half the resamples were undefined; "
                    "consider a stratified bootstrap");
  const double alpha = (1.0 - level) / 2.0;
  ci.lower = quantile(values, alpha);
  ci.upper = quantile(values, 1.0 - alpha);
  return ci;
}

OperatingPoint operating_point(const std::vector<ScoredCase>& cases, double target_sensitivity,
                               int n_resamples, uint64_t seed) {
  if (target_sensitivity <= 0.0 || target_sensitivity > 1.0)
    throw DataError("target sensitivity must be in (0, 1]");
  const auto counts = count_classes(cases);
  if (counts.n_pos == 0 || counts.n_neg == 0)
    throw DataError("operating_point: input has a single class");

  const auto threshold = threshold_for_target(cases, target_sensitivity);
  // threshold always exists here: the lowest empirical score gives tpr = 1

  OperatingPoint op;
  op.target_sensitivity = target_sensitivity;
  op.threshold = *threshold;

  enum Field { SENS, SPEC, PPV, NPV };
  auto field_metric = [target_sensitivity](Field f) {
    return [f, target_sensitivity](const std::vector<ScoredCase>& sample) -> std::optional<double> {
      const auto c = count_classes(sample);
      if (c.n_pos == 0 || c.n_neg == 0) return std::nullopt;
      const auto t = threshold_for_target(sample, target_sensitivity);
      if (!t) return std::nullopt;
      const auto conf = confusion_at(sample, *t);
      switch (f) {
        case SENS: return static_cast<double>(conf.tp) / static_cast<double>(conf.tp + conf.fn);
        case SPEC: return static_cast<double>(conf.tn) / static_cast<double>(conf.tn + conf.fp);
        case PPV:
          if (conf.tp + conf.fp == 0) return std::nullopt;
          return static_cast<double>(conf.tp) / static_cast<double>(conf.tp + conf.fp);
        default:
          if (conf.tn + conf.fn == 0) return std::nullopt;
          return static_cast<double>(conf.tn) / static_cast<double>(conf.tn + conf.fn);
      }
    };
  };
  op.sensitivity = bootstrap_ci(field_metric(SENS), cases, n_resamples, 0.95,
                                derive_seed(seed, "op_sens"));
  op.specificity = bootstrap_ci(field_metric(SPEC), cases, n_resamples, 0.95,
                                derive_seed(seed, "op_spec"));
  op.ppv = bootstrap_ci(field_metric(PPV), cases, n_resamples, 0.95, derive_seed(seed, "op_ppv"));
  // NPV is structurally undefined when the chosen threshold predicts every
  // case positive; that also starves its bootstrap, so degrade to absent
  // instead of failing the whole operating point.
  if (field_metric(NPV)(cases)) {
    try {
      op.npv = bootstrap_ci(field_metric(NPV), cases, n_resamples, 0.95,
                            derive_seed(seed, "op_npv"));
    } catch (const DataError&) {
      op.npv.reset();
    }
  }
  return op;
}

double pearson_r(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DataError("pearson_r: length mismatch");
  const size_t n = x.size();
  if (n < 2) throw DataError("pearson_r: need at least 2 points");
  double mx = 0, my = 0;
  for (size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0, syy = 0, sxy = 0;
  for (size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0)
    throw DataError("pearson_r undefined: zero variance in an input");
  return sxy / std::sqrt(sxx * syy);
}

MannWhitneyResult mann_whitney_u(const std::vector<double>& scores_pos,
                                 const std::vector<double>& scores_neg) {
  if (scores_pos.empty() || scores_neg.empty())
    throw DataError("mann_whitney_u: both groups must be non-empty");
  const size_t n1 = scores_pos.size(), n2 = scores_neg.size();
  const size_t n = n1 + n2;

  std::vector<std::pair<double, bool>> all;  // (value, is_pos)
  all.reserve(n);
  for (double v : scores_pos) all.emplace_back(v, true);
  for (double v : scores_neg) all.emplace_back(v, false);
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  double rank_sum_pos = 0.0, tie_term = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && all[j].first == all[i].first) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (size_t k = i; k < j; ++k)
      if (all[k].second) rank_sum_pos += midrank;
    const double t = static_cast<double>(j - i);
    if (t > 1.0) tie_term += t * t * t - t;
    i = j;
  }

  MannWhitneyResult res;
  const double dn1 = static_cast<double>(n1), dn2 = static_cast<double>(n2);
  const double dn = static_cast<double>(n);
  res.u = rank_sum_pos - dn1 * (dn1 + 1.0) / 2.0;

  const double mean = dn1 * dn2 / 2.0;
  const double var = dn1 * dn2 / 12.0 * ((dn + 1.0) - tie_term / (dn * (dn - 1.0)));
  if (var <= 0.0) {
    res.p = 1.0;  // everything tied
    return res;
  }
  double num = res.u - mean;  // continuity correction toward the mean
  if (num > 0.5) num -= 0.5;
  else if (num < -0.5) num += 0.5;
  else num = 0.0;
  const double z = num / std::sqrt(var);
  res.p = std::min(1.0, 2.0 * normal_sf(std::abs(z)));
  return res;
}

std::string to_string(Grouping g) {
  switch (g) {
    case Grouping::ALL: return "ALL";
    case Grouping::GLEASON_7_8: return "GLEASON_7_8";
    case Grouping::GLEASON_9_10: return "GLEASON_9_10";
    case Grouping::BIOPSY: return "BIOPSY";
    case Grouping::RESECTION: return "RESECTION";
    case Grouping::AREA_Q1: return "AREA_Q1";
    default: return "PURITY_Q1";
  }
}

double quantile(std::vector<double> values, double p) {
  if (values.empty()) throw DataError("quantile of an empty set");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * p;
  const size_t lo = static_cast<size_t>(std::floor(h));
  const size_t hi = static_cast<size_t>(std::ceil(h));
  if (lo == hi) return values[lo];
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

SubgroupResult subgroup_eval(const std::vector<ScoredCase>& cases, Grouping grouping,
                             int n_resamples, uint64_t seed) {
  SubgroupResult res;
  res.grouping = grouping;

  std::optional<double> cut;
  if (grouping == Grouping::AREA_Q1 || grouping == Grouping::PURITY_Q1) {
    std::vector<double> values;
    for (const auto& c : cases) {
      const auto& v = grouping == Grouping::AREA_Q1 ? c.tissue_area_mm2 : c.tumor_purity;
      if (v) values.push_back(*v);
    }
    if (values.empty())
      throw DataError("subgroup " + to_string(grouping) + ": no cases carry the field");
    cut = quantile(values, 0.25);
    res.cut_value = cut;
  }

  auto member = [&](const ScoredCase& c) -> bool {
    switch (grouping) {
      case Grouping::ALL: return true;
      case Grouping::GLEASON_7_8: return c.gleason_total && *c.gleason_total <= 8;
      case Grouping::GLEASON_9_10: return c.gleason_total && *c.gleason_total >= 9;
      case Grouping::BIOPSY:
        return c.procedure && (*c.procedure == slideio::Procedure::CORE_NEEDLE_BIOPSY ||
                               *c.procedure == slideio::Procedure::AMBIGUOUS_BIOPSY);
      case Grouping::RESECTION:
        return c.procedure && *c.procedure == slideio::Procedure::RESECTION;
      case Grouping::AREA_Q1: return c.tissue_area_mm2 && *c.tissue_area_mm2 <= *cut;
      default: return c.tumor_purity && *c.tumor_purity <= *cut;
    }
  };

  std::vector<ScoredCase> group;
  for (const auto& c : cases)
    if (member(c)) group.push_back(c);
  res.n = group.size();
  for (const auto& c : group) {
    (c.positive ? res.n_pos : res.n_neg)++;
    (c.positive ? res.scores_pos : res.scores_neg).push_back(c.score);
  }
  if (res.n_pos > 0 && res.n_neg > 0) {
    res.auc = bootstrap_ci(auc_or_nullopt, group, n_resamples, 0.95, seed);
    res.mann_whitney_p = mann_whitney_u(res.scores_pos, res.scores_neg).p;
  }
  return res;
}

std::string write_predictions_csv(const std::vector<ScoredCase>& cases) {
  std::ostringstream out;
  out.precision(17);
  out << "slide_id,score,label,gleason_total,procedure,scanner_profile,stain_site,"
         "tissue_area_mm2,tumor_purity,paired_id\n";
  for (const auto& c : cases) {
    out << csv_escape(c.slide_id) << ',' << c.score << ','
        << (c.positive ? "MSI_H" : "MSS") << ',';
    if (c.gleason_total) out << *c.gleason_total;
    out << ',';
    if (c.procedure) out << slideio::to_string(*c.procedure);
    out << ',' << csv_escape(c.scanner_profile) << ',';
    if (c.stain_site) out << slideio::to_string(*c.stain_site);
    out << ',';
    if (c.tissue_area_mm2) out << *c.tissue_area_mm2;
    out << ',';
    if (c.tumor_purity) out << *c.tumor_purity;
    out << ',';
    if (c.paired_id) out << csv_escape(*c.paired_id);
    out << '\n';
  }
  return out.str();
}

std::vector<ScoredCase> parse_predictions_csv(const std::string& text,
                                              std::vector<std::string>* warnings) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("predictions CSV: empty input");
  const auto header = split_csv_line(line);
  std::unordered_map<std::string, size_t> col;
  for (size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* required : {"slide_id", "score", "label"})
    if (!col.count(required))
      throw DataError(std::string("predictions CSV: missing required column: ") + required);

  auto field = [&](const std::vector<std::string>& row, const char* name) -> std::string {
    const auto it = col.find(name);
    if (it == col.end() || it->second >= row.size()) return "";
    return row[it->second];
  };
  auto absent = [](const std::string& s) { return s.empty() || s == "NA"; };

  std::vector<ScoredCase> cases;
  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto row = split_csv_line(line);
    ScoredCase c;
    c.slide_id = field(row, "slide_id");
    const std::string label = field(row, "label");
    if (label == "MSI_H" || label == "MSI-H") {
      c.positive = true;
    } else if (label == "MSS") {
      c.positive = false;
    } else {
      if (warnings)
        warnings->push_back(c.slide_id + ": label '" + label + "' excluded from evaluation");
      continue;
    }
    try {
      c.score = std::stod(field(row, "score"));
    } catch (...) {
      throw DataError("predictions CSV line " + std::to_string(line_no) + ": bad score");
    }
    if (!std::isfinite(c.score) || c.score < 0.0 || c.score > 1.0)
      throw DataError("predictions CSV line " + std::to_string(line_no) +
                      ": score outside [0,1]");
    if (const auto s = field(row, "gleason_total"); !absent(s)) {
      try { c.gleason_total = std::stoi(s); } catch (...) {}
    }
    if (const auto s = field(row, "procedure"); !absent(s)) {
      if (s == "CORE_NEEDLE_BIOPSY") c.procedure = slideio::Procedure::CORE_NEEDLE_BIOPSY;
      else if (s == "RESECTION") c.procedure = slideio::Procedure::RESECTION;
      else if (s == "AMBIGUOUS_BIOPSY") c.procedure = slideio::Procedure::AMBIGUOUS_BIOPSY;
    }
    c.scanner_profile = field(row, "scanner_profile");
    if (const auto s = field(row, "stain_site"); !absent(s)) {
      if (s == "INTERNAL") c.stain_site = slideio::StainSite::INTERNAL;
      else if (s == "EXTERNAL") c.stain_site = slideio::StainSite::EXTERNAL;
    }
    if (const auto s = field(row, "tissue_area_mm2"); !absent(s)) {
      try { c.tissue_area_mm2 = std::stod(s); } catch (...) {}
    }
    if (const auto s = field(row, "tumor_purity"); !absent(s)) {
      try { c.tumor_purity = std::stod(s); } catch (...) {}
    }
    if (const auto s = field(row, "paired_id"); !absent(s)) c.paired_id = s;
    cases.push_back(std::move(c));
  }
  return cases;
}

}  // namespace msimil::eval
