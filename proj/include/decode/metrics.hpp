#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace decode {

struct PatientRecord;
using Cohort = std::vector<PatientRecord>;

// |pred n gold| / |pred u gold|. Both empty -> 1.0 by convention (a model may
// correctly predict "no codes").
double jaccard(const std::set<std::string>& pred, const std::set<std::string>& gold);

struct ConfusionMetrics {
  double ppv = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double f1 = 0.0;
  bool no_predicted_positives = false;  // ppv/f1 reported as 0 when set
};

ConfusionMetrics confusion_metrics(const std::vector<double>& scores,
                                   const std::vector<int>& labels,
                                   double threshold);

// Pairwise concordance probability with ties counted 1/2 (Mann-Whitney),
// equal to the trapezoidal area under the ROC curve.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Average precision: sum over positives in descending-score order of
// precision@k * (1/P). Ties are broken by stable input order.
double auprc(const std::vector<double>& scores, const std::vector<int>& labels);

using MetricFn = std::function<double(const std::vector<double>&, const std::vector<int>&)>;

struct BootstrapInterval {
  double low = 0.0;
  double high = 0.0;
  int n_redrawn = 0;  // resamples where the metric was undefined
};

// Percentile bootstrap over patient-level resamples; deterministic given seed.
BootstrapInterval bootstrap_ci(const MetricFn& metric, const std::vector<double>& scores,
                               const std::vector<int>& labels, int n_boot = 1000,
                               double level = 0.95, std::uint64_t seed = 0);

struct OperatingPoint {
  double top_fraction = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double ppv = 0.0;
  long long n_flagged = 0;
  long long true_positives = 0;  // integer count behind sensitivity and ppv
};

// Flags the top ceil(fraction * n) scores per fraction (stable tie order).
std::vector<OperatingPoint> operating_table(
    const std::vector<double>& scores, const std::vector<int>& labels,
    const std::vector<double>& fractions = {0.01, 0.05, 0.10, 0.20});

// Standard sample Pearson correlation; throws on zero variance.
double pearson_r(const std::vector<double>& x, const std::vector<double>& y);

struct MetricValue {
  double point = 0.0;
  std::optional<double> ci_low;
  std::optional<double> ci_high;
};

struct StratumCell {
  std::string code_set;  // "common", "rare" or a single code
  std::string stratum;   // "H", "L", "Zero" or "all"
  double value = 0.0;
  long long n = 0;
};

struct EvalReport {
  std::string task;
  std::map<std::string, MetricValue> metrics;
  std::vector<StratumCell> strata;
  std::vector<OperatingPoint> operating_points;
  long long n = 0;
  double prevalence = 0.0;

  std::string to_json() const;
  std::string to_csv() const;  // task,metric,value,ci_low,ci_high,stratum,n
};

struct Prediction {
  std::string patient_id;
  int visit_idx = 0;
  std::set<std::string> predicted;
  std::set<std::string> gold;
};

struct TrackedCodeSets {
  std::vector<std::string> common;
  std::vector<std::string> rare;
};

// Per tracked code, full-set Jaccard over the pairs whose gold next visit
// contains the code, grouped by the code's recurrence stratum. Cells are
// means over qualifying (pair, code) incidences; empty strata are absent.
EvalReport daop_report(const std::vector<Prediction>& predictions, const Cohort& cohort,
                       const TrackedCodeSets& code_sets);

}  // namespace decode
