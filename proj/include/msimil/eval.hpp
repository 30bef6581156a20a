#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "msimil/slideio.hpp"

namespace msimil::eval {

/// One scored slide; the unit of every evaluation.
struct ScoredCase {
  std::string slide_id;
  double score = 0.0;  // in [0,1]
  bool positive = false;
  std::optional<int> gleason_total;
  std::optional<slideio::Procedure> procedure;
  std::string scanner_profile;
  std::optional<slideio::StainSite> stain_site;
  std::optional<double> tissue_area_mm2;
  std::optional<double> tumor_purity;
  std::optional<std::string> paired_id;
};

/// Mann-Whitney AUC with the 0.5 tie rule, computed by sort-and-rank.
/// Throws DataError on single-class input.
double auc(const std::vector<ScoredCase>& cases);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // predict positive iff score >= threshold
};

/// ROC points at every distinct score plus the (0,0) sentinel at +infinity.
/// Both coordinates are monotone nondecreasing and the trapezoidal area
/// equals auc() up to rounding.
std::vector<RocPoint> roc_curve(const std::vector<ScoredCase>& cases);

double trapezoid_area(const std::vector<RocPoint>& roc);

struct BootstrapCI {
  double point = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  int n_resamples = 1000;
  double level = 0.95;
  uint64_t seed = 0;
  int skipped = 0;  // resamples where the metric was undefined
};

/// A metric returns nullopt where it is undefined (e.g. single-class input).
using Metric = std::function<std::optional<double>(const std::vector<ScoredCase>&)>;

/// Percentile bootstrap: resample with replacement at the original size,
/// recompute the metric, take the (2.5, 97.5) percentile interval of the
/// defined values. Deterministic given seed; errors out if more than half
/// the resamples are undefined.
BootstrapCI bootstrap_ci(const Metric& metric, const std::vector<ScoredCase>& cases,
                         int n_resamples = 1000, double level = 0.95, uint64_t seed = 0);

/// Paired bootstrap of metric(A) - metric(B): one slide_id index set per
/// resample, applied to both arms. Arms must hold the same slide_ids.
BootstrapCI bootstrap_diff_ci(const Metric& metric, const std::vector<ScoredCase>& cases_a,
                              const std::vector<ScoredCase>& cases_b, int n_resamples = 1000,
                              double level = 0.95, uint64_t seed = 0);

struct OperatingPoint {
  double target_sensitivity = 0.0;
  double threshold = 0.0;
  BootstrapCI sensitivity;
  BootstrapCI specificity;
  BootstrapCI ppv;
  std::optional<BootstrapCI> npv;  // undefined when nothing falls below threshold
};

/// Among empirical thresholds reaching sensitivity >= target, picks the one
/// with maximal specificity (ties: higher threshold), then bootstraps each
/// metric at the re-derived operating point.
OperatingPoint operating_point(const std::vector<ScoredCase>& cases, double target_sensitivity,
                               int n_resamples = 1000, uint64_t seed = 0);

double pearson_r(const std::vector<double>& x, const std::vector<double>& y);

struct MannWhitneyResult {
  double u = 0.0;  // U statistic of the positive group; U/(n1*n2) == auc
  double p = 1.0;  // two-sided, normal approximation with tie correction
};

MannWhitneyResult mann_whitney_u(const std::vector<double>& scores_pos,
                                 const std::vector<double>& scores_neg);

enum class Grouping {
  ALL,
  GLEASON_7_8,
  GLEASON_9_10,
  BIOPSY,     // core needle + ambiguous biopsy
  RESECTION,
  AREA_Q1,    // tissue area in the lowest quartile of the evaluated cohort
  PURITY_Q1,  // tumor purity in the lowest quartile
};

std::string to_string(Grouping g);

struct SubgroupResult {
  Grouping grouping = Grouping::ALL;
  size_t n = 0, n_pos = 0, n_neg = 0;
  std::optional<BootstrapCI> auc;  // nullopt when the group has a single class
  std::optional<double> mann_whitney_p;
  std::optional<double> cut_value;  // quartile threshold for AREA_Q1/PURITY_Q1
  std::vector<double> scores_pos;
  std::vector<double> scores_neg;
};

SubgroupResult subgroup_eval(const std::vector<ScoredCase>& cases, Grouping grouping,
                             int n_resamples = 1000, uint64_t seed = 0);

/// Linear-interpolation quantile of unsorted values, p in [0,1].
double quantile(std::vector<double> values, double p);

/// Predictions CSV round-trip. Header: slide_id,score,label,gleason_total,
/// procedure,scanner_profile,stain_site,tissue_area_mm2,tumor_purity,
/// paired_id. UNKNOWN-label rows are dropped with a warning.
std::string write_predictions_csv(const std::vector<ScoredCase>& cases);
std::vector<ScoredCase> parse_predictions_csv(const std::string& text,
                                              std::vector<std::string>* warnings = nullptr);

}  // namespace msimil::eval
