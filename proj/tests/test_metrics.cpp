#include <cmath>

#include "decode/corpus.hpp"
#include "decode/errors.hpp"
#include "decode/metrics.hpp"
#include "decode/rng.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace decode;

namespace {

std::set<std::string> set_of(std::initializer_list<const char*> codes) {
  std::set<std::string> s;
  for (const char* c : codes) s.insert(c);
  return s;
}

void random_instance(Rng& rng, int max_n, std::vector<double>& scores, std::vector<int>& labels) {
  const int n = 2 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(max_n - 1)));
  scores.resize(n);
  labels.resize(n);
  bool has_pos = false, has_neg = false;
  for (int i = 0; i < n; ++i) {
    // Quantized scores inject plenty of ties.
    scores[i] = std::floor(rng.uniform() * 8.0) / 8.0;
    labels[i] = rng.bernoulli(0.3) ? 1 : 0;
    has_pos = has_pos || labels[i] == 1;
    has_neg = has_neg || labels[i] == 0;
  }
  if (!has_pos) labels[0] = 1;
  if (!has_neg) labels[n > 1 ? 1 : 0] = 0;
}

}  // namespace

TEST_SUITE_BEGIN("metrics");

TEST_CASE("jaccard definitional cases") {
  CHECK(jaccard(set_of({"A", "B", "C"}), set_of({"B", "C", "D"})) == doctest::Approx(0.5));
  CHECK(jaccard(set_of({"A"}), set_of({"A"})) == 1.0);
  CHECK(jaccard(set_of({"A"}), set_of({"B"})) == 0.0);
  CHECK(jaccard({}, {}) == 1.0);
  CHECK(jaccard({}, set_of({"A"})) == 0.0);
}

TEST_CASE("jaccard is symmetric") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::set<std::string> a, b;
    for (int i = 0; i < 6; ++i) {
      if (rng.bernoulli(0.5)) a.insert(std::to_string(rng.uniform_int(8)));
      if (rng.bernoulli(0.5)) b.insert(std::to_string(rng.uniform_int(8)));
    }
    CHECK(jaccard(a, b) == jaccard(b, a));
  }
}

TEST_CASE("auroc known value") {
  const std::vector<double> scores{0.1, 0.4, 0.35, 0.8};
  const std::vector<int> labels{0, 0, 1, 1};
  CHECK(oracle::brute_auroc(scores, labels) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(auroc(scores, labels) == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("auroc extremes and ties") {
  CHECK(auroc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
  CHECK(auroc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == 0.5);
  CHECK_THROWS_AS(auroc({0.1, 0.2}, {1, 1}), UndefinedMetricError);
  CHECK_THROWS_AS(auroc({}, {}), UndefinedMetricError);
}

TEST_CASE("auprc known value") {
  const std::vector<double> scores{0.9, 0.8, 0.7};
  const std::vector<int> labels{1, 0, 1};
  const double expected = 1.0 * 0.5 + (2.0 / 3.0) * 0.5;  // 0.8333...
  CHECK(oracle::brute_auprc(scores, labels) == doctest::Approx(expected).epsilon(1e-15));
  CHECK(auprc(scores, labels) == doctest::Approx(expected).epsilon(1e-4));
  CHECK(auprc({0.9, 0.8, 0.1}, {1, 1, 0}) == 1.0);
  CHECK_THROWS_AS(auprc({0.5, 0.6}, {0, 0}), UndefinedMetricError);
}

TEST_CASE("auroc and auprc match brute force on random instances with ties") {
  Rng rng(42);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int trial = 0; trial < 300; ++trial) {
    random_instance(rng, 120, scores, labels);
    CHECK(std::abs(auroc(scores, labels) - oracle::brute_auroc(scores, labels)) <= 1e-12);
    CHECK(std::abs(auprc(scores, labels) - oracle::brute_auprc(scores, labels)) <= 1e-12);
  }
}

TEST_CASE("auprc of random scores approaches prevalence") {
  Rng rng(11);
  const int n = 100000;
  const double prevalence = 0.1;
  std::vector<double> scores(n);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    scores[i] = rng.uniform();
    labels[i] = rng.bernoulli(prevalence) ? 1 : 0;
  }
  CHECK(auprc(scores, labels) == doctest::Approx(prevalence).epsilon(0.2));
  CHECK(std::abs(auprc(scores, labels) - prevalence) < 0.02);
}

TEST_CASE("confusion metrics") {
  // 10 predicted positive, 3 true positive.
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 10; ++i) {
    scores.push_back(0.9);
    labels.push_back(i < 3 ? 1 : 0);
  }
  for (int i = 0; i < 10; ++i) {
    scores.push_back(0.1);
    labels.push_back(0);
  }
  const auto m = confusion_metrics(scores, labels, 0.5);
  CHECK(m.ppv == doctest::Approx(0.3));
  CHECK(m.sensitivity == 1.0);

  const auto all_in = confusion_metrics({0.9, 0.8, 0.7}, {1, 1, 0}, 0.0);
  CHECK(all_in.sensitivity == 1.0);

  const auto perfect = confusion_metrics({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0}, 0.5);
  CHECK(perfect.f1 == 1.0);

  const auto none = confusion_metrics({0.1, 0.2, 0.3}, {1, 0, 0}, 0.9);
  CHECK(none.no_predicted_positives);
  CHECK(none.ppv == 0.0);
  CHECK(none.f1 == 0.0);

  CHECK_THROWS_AS(confusion_metrics({}, {}, 0.5), UndefinedMetricError);
  CHECK_THROWS_AS(confusion_metrics({0.5, 0.6}, {1, 1}, 0.5), UndefinedMetricError);
}

TEST_CASE("bootstrap determinism and degenerate width") {
  Rng rng(3);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 200; ++i) {
    labels.push_back(i % 5 == 0 ? 1 : 0);
    scores.push_back(rng.uniform() + labels.back() * 0.3);
  }
  const auto a = bootstrap_ci(auroc, scores, labels, 200, 0.95, 99);
  const auto b = bootstrap_ci(auroc, scores, labels, 200, 0.95, 99);
  CHECK(a.low == b.low);
  CHECK(a.high == b.high);
  CHECK(a.low <= a.high);
  const double point = auroc(scores, labels);
  CHECK(a.low <= point);
  CHECK(point <= a.high);

  const MetricFn constant = [](const std::vector<double>&, const std::vector<int>&) {
    return 0.5;
  };
  const auto c = bootstrap_ci(constant, scores, labels, 100, 0.95, 1);
  CHECK(c.low == 0.5);
  CHECK(c.high == 0.5);
}

TEST_CASE("operating table identities") {
  Rng rng(17);
  std::vector<double> scores;
  std::vector<int> labels;
  const int n = 500;
  long long p = 0;
  for (int i = 0; i < n; ++i) {
    scores.push_back(std::floor(rng.uniform() * 16.0) / 16.0);  // ties
    labels.push_back(rng.bernoulli(0.15) ? 1 : 0);
    p += labels.back();
  }
  const auto table = operating_table(scores, labels, {0.01, 0.05, 0.10, 0.20, 1.0});
  for (const auto& op : table) {
    CHECK(op.n_flagged == static_cast<long long>(std::ceil(op.top_fraction * n)));
    // sensitivity * P == ppv * n_flagged, exact integer counting
    CHECK(std::llround(op.sensitivity * static_cast<double>(p)) == op.true_positives);
    CHECK(std::llround(op.ppv * static_cast<double>(op.n_flagged)) == op.true_positives);
  }
  const auto& full = table.back();
  CHECK(full.sensitivity == 1.0);
  CHECK(full.ppv == static_cast<double>(p) / static_cast<double>(n));

  // Perfect ranking at fraction == prevalence gives ppv 1.
  std::vector<double> ranked;
  std::vector<int> ranked_labels;
  for (int i = 0; i < 100; ++i) {
    ranked.push_back(1.0 - i * 0.01);
    ranked_labels.push_back(i < 10 ? 1 : 0);
  }
  const auto perfect = operating_table(ranked, ranked_labels, {0.10});
  CHECK(perfect[0].ppv == 1.0);
  CHECK(perfect[0].sensitivity == 1.0);
}

TEST_CASE("pearson correlation") {
  std::vector<double> x{1, 2, 3, 4, 5};
  std::vector<double> y;
  for (double v : x) y.push_back(2.0 * v + 1.0);
  CHECK(pearson_r(x, y) == doctest::Approx(1.0));
  std::vector<double> neg;
  for (double v : x) neg.push_back(-v);
  CHECK(pearson_r(x, neg) == doctest::Approx(-1.0));
  CHECK_THROWS_AS(pearson_r(x, {1, 1, 1, 1, 1}), UndefinedMetricError);
  CHECK_THROWS_AS(pearson_r({1.0}, {2.0}), UndefinedMetricError);
}

TEST_CASE("daop report strata") {
  // Two patients: one fully chronic (identical visits), one with a fresh onset.
  PatientRecord chronic;
  chronic.patient_id = "chronic";
  chronic.visits = {{{"A", "B"}}, {{"A", "B"}}, {{"A", "B"}}};
  PatientRecord onset;
  onset.patient_id = "onset";
  onset.visits = {{{"C"}}, {{"C"}}, {{"C", "T"}}};
  Cohort cohort{chronic, onset};

  TrackedCodeSets tracked;
  tracked.common = {"A", "T"};

  // Copy baseline on the chronic patient: gold == previous visit.
  std::vector<Prediction> copy_preds;
  copy_preds.push_back({"chronic", 2, set_of({"A", "B"}), set_of({"A", "B"})});
  copy_preds.push_back({"onset", 2, set_of({"C"}), set_of({"C", "T"})});
  const auto report = daop_report(copy_preds, cohort, tracked);

  bool saw_h = false, saw_zero = false;
  for (const auto& cell : report.strata) {
    if (cell.code_set == "A" && cell.stratum == "H") {
      saw_h = true;
      CHECK(cell.value == 1.0);  // chronic copy is exact
    }
    if (cell.code_set == "T" && cell.stratum == "Zero") {
      saw_zero = true;
      CHECK(cell.value == doctest::Approx(0.5));  // {C} vs {C,T}
    }
    CHECK(cell.stratum != "L");  // empty strata are absent, not zero
  }
  CHECK(saw_h);
  CHECK(saw_zero);

  // Prediction == gold everywhere -> 1.0 in every cell.
  std::vector<Prediction> exact;
  exact.push_back({"chronic", 2, set_of({"A", "B"}), set_of({"A", "B"})});
  exact.push_back({"onset", 2, set_of({"C", "T"}), set_of({"C", "T"})});
  const auto perfect = daop_report(exact, cohort, tracked);
  for (const auto& cell : perfect.strata) CHECK(cell.value == 1.0);
  CHECK(perfect.metrics.at("jaccard").point == 1.0);
}

TEST_CASE("eval report serialization round trip shape") {
  EvalReport report;
  report.task = "demo";
  report.n = 10;
  report.prevalence = 0.2;
  report.metrics["auroc"] = {0.9, 0.85, 0.95};
  report.strata.push_back({"common", "H", 0.75, 42});
  const std::string json = report.to_json();
  CHECK(json.find("\"auroc\"") != std::string::npos);
  CHECK(json.find("0.85") != std::string::npos);
  const std::string csv = report.to_csv();
  CHECK(csv.find("task,metric,value,ci_low,ci_high,stratum,n") == 0);
  CHECK(csv.find("demo,auroc,") != std::string::npos);
}

TEST_SUITE_END();
