#include <cmath>
#include <fstream>

#include "decode/errors.hpp"
#include "decode/inference.hpp"
#include "decode/rng.hpp"
#include "decode/synthgen.hpp"
#include "doctest.h"

using namespace decode;

TEST_SUITE_BEGIN("inference");

TEST_CASE("greedy decode stop and dedup rules") {
  // model forced to emit EOS first -> empty set
  const auto eos_first = greedy_decode([](const std::vector<int>&) { return kEos; }, 25);
  CHECK(eos_first.empty());

  // duplicate emissions collapse
  int step = 0;
  const auto dupes = greedy_decode(
      [&](const std::vector<int>&) -> int {
        ++step;
        if (step <= 3) return 21;
        if (step <= 5) return 22;
        return kEos;
      },
      25);
  CHECK(dupes == std::set<int>{21, 22});

  // emission cap
  int n = 0;
  const auto capped = greedy_decode(
      [&](const std::vector<int>&) {
        ++n;
        return 20 + n;
      },
      4);
  CHECK(capped.size() == 4);

  // prefix grows with emissions
  std::vector<std::size_t> lens;
  greedy_decode(
      [&](const std::vector<int>& prefix) -> int {
        lens.push_back(prefix.size());
        return lens.size() < 3 ? 30 + static_cast<int>(lens.size()) : kEos;
      },
      25);
  CHECK(lens == std::vector<std::size_t>{1, 2, 3});
}

TEST_CASE("copy baseline semantics") {
  PatientRecord rec;
  rec.patient_id = "p";
  rec.demographics = {50, Sex::M};
  rec.visits = {{{"A", "B"}}, {{"B", "C"}}, {{"B", "C"}}, {{"X", "Y"}}};

  CHECK(copy_predict(rec, 1) == std::set<std::string>{"A", "B"});
  // identical consecutive visits -> Jaccard 1
  CHECK(jaccard(copy_predict(rec, 2), {rec.visits[2].codes.begin(), rec.visits[2].codes.end()}) ==
        1.0);
  // fully-changed visit -> Jaccard 0
  CHECK(jaccard(copy_predict(rec, 3), {rec.visits[3].codes.begin(), rec.visits[3].codes.end()}) ==
        0.0);
  CHECK_THROWS_AS(copy_predict(rec, 0), ValidationError);
}

TEST_CASE("logreg separates a linearly separable toy set") {
  Cohort cohort;
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    PatientRecord rec;
    rec.patient_id = "p" + std::to_string(i);
    rec.demographics = {40, Sex::M};
    const bool positive = i % 2 == 0;
    rec.visits = {{{positive ? "POS" : "NEG"}}, {{"Z"}}};
    cohort.push_back(rec);
    labels.push_back(positive ? 1 : 0);
  }
  const auto vocab = Vocabulary::build(cohort, 1);
  const auto model = logreg_train(cohort, labels, vocab);
  int correct = 0;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const double score = model.score(cohort[i], vocab);
    correct += (score >= 0.5) == (labels[i] == 1) ? 1 : 0;
  }
  CHECK(correct == 40);
}

TEST_CASE("heavy l2 shrinks weights toward the class prior") {
  Cohort cohort;
  std::vector<int> labels;
  for (int i = 0; i < 50; ++i) {
    PatientRecord rec;
    rec.patient_id = "p" + std::to_string(i);
    rec.demographics = {40, Sex::F};
    rec.visits = {{{i % 3 == 0 ? "A" : "B"}}, {{"C"}}};
    cohort.push_back(rec);
    labels.push_back(i < 10 ? 1 : 0);  // prior 0.2
  }
  const auto vocab = Vocabulary::build(cohort, 1);
  LogRegConfig heavy;
  heavy.l2 = 1e6;
  const auto model = logreg_train(cohort, labels, vocab, heavy);
  for (double w : model.weights) CHECK(std::abs(w) < 1e-3);
  // bias still free: scores approach the prior
  CHECK(model.score(cohort[0], vocab) == doctest::Approx(0.2).epsilon(0.15));

  std::vector<int> ones(cohort.size(), 1);
  CHECK_THROWS_AS(logreg_train(cohort, ones, vocab), ValidationError);
}

TEST_CASE("order-blind logreg stays below the order-aware oracle out of sample") {
  GenConfig cfg = GenConfig::defaults(6000, 71);
  const auto gen = generate_cohort(cfg);
  const auto all_labels = gen.labels.aligned("outcome", gen.cohort);
  const auto vocab = Vocabulary::build(gen.cohort, 1);

  const std::size_t split = 4000;
  const Cohort train(gen.cohort.begin(), gen.cohort.begin() + split);
  const Cohort test(gen.cohort.begin() + split, gen.cohort.end());
  const std::vector<int> train_labels(all_labels.begin(), all_labels.begin() + split);
  const std::vector<int> test_labels(all_labels.begin() + split, all_labels.end());

  const auto model = logreg_train(train, train_labels, vocab);
  std::vector<double> scores;
  for (const auto& rec : test) scores.push_back(model.score(rec, vocab));
  const double lr_auc = auroc(scores, test_labels);

  const PlantedRule* outcome = nullptr;
  for (const auto& rule : cfg.planted_rules)
    if (rule.kind == RuleKind::BinaryOutcome) outcome = &rule;
  REQUIRE(outcome != nullptr);
  std::vector<double> oracle_scores;
  for (const auto& rec : test) oracle_scores.push_back(oracle_posterior(cfg, rec, *outcome));
  const double ceiling = auroc(oracle_scores, test_labels);
  CHECK(lr_auc < ceiling);
  CHECK(ceiling - lr_auc > 0.02);
}

TEST_CASE("batch_score basics") {
  const auto gen = generate_cohort(GenConfig::defaults(12, 81));
  const auto vocab = Vocabulary::build(gen.cohort, 1);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_encoder_layers = 1;
  cfg.n_decoder_layers = 1;
  cfg.d_ff = 24;
  cfg.max_seq_len = 256;
  cfg.dropout_prob = 0.0;
  const auto params = init_parameters(cfg, 82);

  const auto a = batch_score(params, cfg, vocab, gen.cohort);
  const auto b = batch_score(params, cfg, vocab, gen.cohort);
  REQUIRE(a.size() == gen.cohort.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].score > 0.0);
    CHECK(a[i].score < 1.0);
    CHECK(a[i].score == b[i].score);
    CHECK(a[i].patient_id == gen.cohort[i].patient_id);
  }

  // truncated history changes the score for long-history patients
  const auto truncated = batch_score(params, cfg, vocab, gen.cohort, 5);
  bool any_differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (gen.cohort[i].visits.size() > 5 && truncated[i].score != a[i].score) any_differs = true;
  }
  CHECK(any_differs);
}

TEST_CASE("scores csv round trip") {
  std::vector<ScoredPatient> scores{{"p1", 0.25}, {"p2", 0.75}};
  std::vector<int> labels{0, 1};
  save_scores_csv(scores, labels, "/tmp/decode_test_scores.csv");
  std::vector<double> s;
  std::vector<int> y;
  load_scores_csv("/tmp/decode_test_scores.csv", s, y);
  CHECK(s == std::vector<double>{0.25, 0.75});
  CHECK(y == std::vector<int>{0, 1});
}

TEST_CASE("predictions jsonl has the expected schema") {
  std::vector<Prediction> preds;
  Prediction p;
  p.patient_id = "p1";
  p.visit_idx = 3;
  p.predicted = {"A", "B"};
  p.gold = {"B"};
  preds.push_back(p);
  save_predictions_jsonl(preds, "/tmp/decode_test_preds.jsonl");
  std::ifstream in("/tmp/decode_test_preds.jsonl");
  std::string line;
  std::getline(in, line);
  CHECK(line.find("\"patient_id\":\"p1\"") != std::string::npos);
  CHECK(line.find("\"visit_idx\":3") != std::string::npos);
  CHECK(line.find("\"predicted\":[\"A\",\"B\"]") != std::string::npos);
  CHECK(line.find("\"gold\":[\"B\"]") != std::string::npos);
}

TEST_SUITE_END();
