#pragma once

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "decode/corpus.hpp"
#include "decode/metrics.hpp"
#include "decode/model.hpp"
#include "decode/training.hpp"

namespace decode {

// Greedy next-token loop shared by the model path and the unit tests:
// step_fn maps the current prefix ([BOS]-led) to the next token id; stops at
// [EOS] or after max_codes emissions; duplicates collapse into the set.
std::set<int> greedy_decode(const std::function<int(const std::vector<int>&)>& step_fn,
                            int max_codes);

// Greedy decoding of the next visit's code set from the full prior history.
// Special tokens other than [EOS] are never emitted.
std::set<std::string> generate_next_visit(const ad::ParamStore& params,
                                          const ModelConfig& config, const Vocabulary& vocab,
                                          const TokenSequence& history, int max_codes = 25);

// The Table-2 "Copy" baseline: exactly the previous visit's code set.
std::set<std::string> copy_predict(const PatientRecord& record, int visit_idx);

struct LogRegModel {
  // weights over [code vocab][age buckets][sex one-hot], then bias
  std::vector<double> weights;
  double bias = 0.0;
  int n_codes = 0;

  double score(const PatientRecord& record, const Vocabulary& vocab) const;
};

struct LogRegConfig {
  double l2 = 1e-4;
  long long max_steps = 5000;
  double grad_tol = 1e-6;
};

// Binary bag-of-codes + demographics, full-batch gradient descent with
// backtracking line search until the gradient norm drops below grad_tol.
LogRegModel logreg_train(const Cohort& cohort, const std::vector<int>& labels,
                         const Vocabulary& vocab, const LogRegConfig& config = {});

struct ScoredPatient {
  std::string patient_id;
  double score = 0.0;
};

// One risk score per patient over the full history (or the last
// truncate_to_visits visits when > 0).
std::vector<ScoredPatient> batch_score(const ad::ParamStore& params, const ModelConfig& config,
                                       const Vocabulary& vocab, const Cohort& cohort,
                                       int truncate_to_visits = 0);
std::vector<ScoredPatient> batch_score(const LogRegModel& model, const Vocabulary& vocab,
                                       const Cohort& cohort, int truncate_to_visits = 0);

// Predictions for the last visit of every patient (gold = final visit).
std::vector<Prediction> predict_last_visits(const ad::ParamStore& params,
                                            const ModelConfig& config, const Vocabulary& vocab,
                                            const Cohort& cohort, int max_codes = 25);
std::vector<Prediction> copy_predict_last_visits(const Cohort& cohort);

void save_predictions_jsonl(const std::vector<Prediction>& predictions, const std::string& path);
void save_scores_csv(const std::vector<ScoredPatient>& scores, const std::vector<int>& labels,
                     const std::string& path);
void load_scores_csv(const std::string& path, std::vector<double>& scores,
                     std::vector<int>& labels);

}  // namespace decode
