#include "decode/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "decode/corpus.hpp"
#include "decode/errors.hpp"
#include "decode/rng.hpp"
#include "json.hpp"

namespace decode {

namespace {

void check_binary(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.empty()) throw UndefinedMetricError("empty input");
  if (scores.size() != labels.size()) throw ValidationError("scores/labels length mismatch");
  for (int y : labels)
    if (y != 0 && y != 1) throw ValidationError("labels must be 0 or 1");
}

long long count_positives(const std::vector<int>& labels) {
  long long p = 0;
  for (int y : labels) p += y;
  return p;
}

// Indices sorted by descending score, ties in input order.
std::vector<std::size_t> rank_order(const std::vector<double>& scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace

double jaccard(const std::set<std::string>& pred, const std::set<std::string>& gold) {
  if (pred.empty() && gold.empty()) return 1.0;
  std::size_t inter = 0;
  for (const auto& c : pred) inter += gold.count(c);
  const std::size_t uni = pred.size() + gold.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

ConfusionMetrics confusion_metrics(const std::vector<double>& scores,
                                   const std::vector<int>& labels, double threshold) {
  check_binary(scores, labels);
  long long tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (pred && labels[i] == 1) ++tp;
    else if (pred) ++fp;
    else if (labels[i] == 1) ++fn;
    else ++tn;
  }
  if (tp + fn == 0 || fp + tn == 0) {
    throw UndefinedMetricError("confusion_metrics: single-class labels");
  }
  ConfusionMetrics m;
  m.sensitivity = static_cast<double>(tp) / static_cast<double>(tp + fn);
  m.specificity = static_cast<double>(tn) / static_cast<double>(tn + fp);
  if (tp + fp == 0) {
    m.no_predicted_positives = true;
    m.ppv = 0.0;
    m.f1 = 0.0;
  } else {
    m.ppv = static_cast<double>(tp) / static_cast<double>(tp + fp);
    m.f1 = (m.ppv + m.sensitivity) > 0.0
               ? 2.0 * m.ppv * m.sensitivity / (m.ppv + m.sensitivity)
               : 0.0;
  }
  return m;
}

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary(scores, labels);
  const long long p = count_positives(labels);
  const long long q = static_cast<long long>(labels.size()) - p;
  if (p == 0 || q == 0) throw UndefinedMetricError("auroc: single-class labels");

  // Average ranks over tie groups; U statistic from the positive rank sum.
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k)
      if (labels[idx[k]] == 1) rank_sum_pos += avg_rank;
    i = j + 1;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(p) * static_cast<double>(p + 1);
  return u / (static_cast<double>(p) * static_cast<double>(q));
}

double auprc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary(scores, labels);
  const long long p = count_positives(labels);
  if (p == 0) throw UndefinedMetricError("auprc: no positives");
  const auto order = rank_order(scores);
  double ap = 0.0;
  long long tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (labels[order[k]] == 1) {
      ++tp;
      ap += static_cast<double>(tp) / static_cast<double>(k + 1);
    }
  }
  return ap / static_cast<double>(p);
}

BootstrapInterval bootstrap_ci(const MetricFn& metric, const std::vector<double>& scores,
                               const std::vector<int>& labels, int n_boot, double level,
                               std::uint64_t seed) {
  check_binary(scores, labels);
  if (n_boot < 1) throw ValidationError("bootstrap_ci: n_boot must be >= 1");
  metric(scores, labels);  // throws if undefined on the full sample

  const std::size_t n = scores.size();
  BootstrapInterval out;
  std::vector<double> replicates;
  replicates.reserve(static_cast<std::size_t>(n_boot));
  std::vector<double> s(n);
  std::vector<int> y(n);
  for (int b = 0; b < n_boot; ++b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    for (int attempt = 0;; ++attempt) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = static_cast<std::size_t>(rng.uniform_int(n));
        s[i] = scores[j];
        y[i] = labels[j];
      }
      try {
        replicates.push_back(metric(s, y));
        break;
      } catch (const UndefinedMetricError&) {
        ++out.n_redrawn;
        if (attempt > 10000) throw UndefinedMetricError("bootstrap_ci: metric undefined on nearly all resamples");
      }
    }
  }
  std::sort(replicates.begin(), replicates.end());
  const double alpha = (1.0 - level) / 2.0;
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(replicates.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, replicates.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return replicates[lo] * (1.0 - frac) + replicates[hi] * frac;
  };
  out.low = quantile(alpha);
  out.high = quantile(1.0 - alpha);
  return out;
}

std::vector<OperatingPoint> operating_table(const std::vector<double>& scores,
                                            const std::vector<int>& labels,
                                            const std::vector<double>& fractions) {
  check_binary(scores, labels);
  const long long p = count_positives(labels);
  const long long n = static_cast<long long>(labels.size());
  if (p == 0 || p == n) throw UndefinedMetricError("operating_table: single-class labels");
  const auto order = rank_order(scores);

  std::vector<OperatingPoint> table;
  table.reserve(fractions.size());
  for (double f : fractions) {
    OperatingPoint op;
    op.top_fraction = f;
    op.n_flagged = static_cast<long long>(std::ceil(f * static_cast<double>(n)));
    op.n_flagged = std::min(op.n_flagged, n);
    long long tp = 0;
    for (long long k = 0; k < op.n_flagged; ++k) tp += labels[order[static_cast<std::size_t>(k)]];
    op.true_positives = tp;
    op.sensitivity = static_cast<double>(tp) / static_cast<double>(p);
    const long long fp = op.n_flagged - tp;
    op.specificity = static_cast<double>((n - p) - fp) / static_cast<double>(n - p);
    op.ppv = op.n_flagged > 0 ? static_cast<double>(tp) / static_cast<double>(op.n_flagged) : 0.0;
    table.push_back(op);
  }
  return table;
}

double pearson_r(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ValidationError("pearson_r: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) throw UndefinedMetricError("pearson_r: need at least 2 points");
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedMetricError("pearson_r: zero variance");
  return sxy / std::sqrt(sxx * syy);
}

EvalReport daop_report(const std::vector<Prediction>& predictions, const Cohort& cohort,
                       const TrackedCodeSets& code_sets) {
  std::unordered_map<std::string, const PatientRecord*> by_id;
  for (const auto& r : cohort) by_id[r.patient_id] = &r;

  EvalReport report;
  report.task = "daop";
  report.n = static_cast<long long>(predictions.size());

  double overall_sum = 0.0;
  for (const auto& pred : predictions) overall_sum += jaccard(pred.predicted, pred.gold);
  if (!predictions.empty()) {
    report.metrics["jaccard"] = MetricValue{overall_sum / static_cast<double>(predictions.size()), {}, {}};
  }

  struct Acc {
    double sum = 0.0;
    long long n = 0;
  };
  std::map<std::pair<std::string, std::string>, Acc> cells;  // (code_set|code, stratum)

  auto tally = [&](const std::string& set_name, const std::vector<std::string>& codes) {
    for (const auto& code : codes) {
      for (const auto& pred : predictions) {
        if (!pred.gold.count(code)) continue;
        auto it = by_id.find(pred.patient_id);
        if (it == by_id.end()) throw ValidationError("daop_report: prediction for unknown patient " + pred.patient_id);
        const auto stratum = recurrence_stratum(*it->second, pred.visit_idx, code);
        const double j = jaccard(pred.predicted, pred.gold);
        auto& set_cell = cells[{set_name, stratum_name(stratum)}];
        set_cell.sum += j;
        set_cell.n += 1;
        auto& code_cell = cells[{code, stratum_name(stratum)}];
        code_cell.sum += j;
        code_cell.n += 1;
        auto& code_all = cells[{code, "all"}];
        code_all.sum += j;
        code_all.n += 1;
        auto& both = cells[{"tracked", stratum_name(stratum)}];
        both.sum += j;
        both.n += 1;
      }
    }
  };
  tally("common", code_sets.common);
  tally("rare", code_sets.rare);

  for (const auto& [key, acc] : cells) {
    if (acc.n == 0) continue;  // empty strata are reported as absent
    StratumCell cell;
    cell.code_set = key.first;
    cell.stratum = key.second;
    cell.value = acc.sum / static_cast<double>(acc.n);
    cell.n = acc.n;
    report.strata.push_back(cell);
  }
  return report;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["task"] = task;
  j["n"] = n;
  j["prevalence"] = prevalence;
  nlohmann::json jm = nlohmann::json::object();
  for (const auto& [name, mv] : metrics) {
    nlohmann::json entry;
    entry["point"] = mv.point;
    if (mv.ci_low) entry["ci_low"] = *mv.ci_low;
    if (mv.ci_high) entry["ci_high"] = *mv.ci_high;
    jm[name] = entry;
  }
  j["metrics"] = jm;
  nlohmann::json js = nlohmann::json::array();
  for (const auto& cell : strata) {
    js.push_back({{"code_set", cell.code_set},
                  {"stratum", cell.stratum},
                  {"value", cell.value},
                  {"n", cell.n}});
  }
  j["strata"] = js;
  nlohmann::json jo = nlohmann::json::array();
  for (const auto& op : operating_points) {
    jo.push_back({{"top_fraction", op.top_fraction},
                  {"sensitivity", op.sensitivity},
                  {"specificity", op.specificity},
                  {"ppv", op.ppv},
                  {"n_flagged", op.n_flagged},
                  {"true_positives", op.true_positives}});
  }
  j["operating_points"] = jo;
  return j.dump(2);
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out << "task,metric,value,ci_low,ci_high,stratum,n\n";
  out.precision(17);
  for (const auto& [name, mv] : metrics) {
    out << task << "," << name << "," << mv.point << ",";
    if (mv.ci_low) out << *mv.ci_low;
    out << ",";
    if (mv.ci_high) out << *mv.ci_high;
    out << ",," << n << "\n";
  }
  for (const auto& cell : strata) {
    out << task << ",jaccard[" << cell.code_set << "]," << cell.value << ",,,"
        << cell.stratum << "," << cell.n << "\n";
  }
  for (const auto& op : operating_points) {
    out << task << ",sensitivity@top" << op.top_fraction << "," << op.sensitivity
        << ",,,," << op.n_flagged << "\n";
    out << task << ",specificity@top" << op.top_fraction << "," << op.specificity
        << ",,,," << op.n_flagged << "\n";
    out << task << ",ppv@top" << op.top_fraction << "," << op.ppv << ",,,,"
        << op.n_flagged << "\n";
  }
  return out.str();
}

}  // namespace decode
