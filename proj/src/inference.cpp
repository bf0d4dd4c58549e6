#include "decode/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "decode/errors.hpp"
#include "decode/parallel.hpp"
#include "json.hpp"

namespace decode {

std::set<int> greedy_decode(const std::function<int(const std::vector<int>&)>& step_fn,
                            int max_codes) {
  std::set<int> emitted;
  std::vector<int> prefix{kBos};
  for (int step = 0; step < max_codes; ++step) {
    const int next = step_fn(prefix);
    if (next == kEos) break;
    emitted.insert(next);
    prefix.push_back(next);
  }
  return emitted;
}

std::set<std::string> generate_next_visit(const ad::ParamStore& params,
                                          const ModelConfig& config, const Vocabulary& vocab,
                                          const TokenSequence& history, int max_codes) {
  ad::Graph graph;
  ModelContext ctx(graph, params, config, /*train=*/false, nullptr, /*with_grad=*/false);
  const Encoded enc = encode(ctx, history);

  auto step_fn = [&](const std::vector<int>& prefix) {
    const ad::Matrix logits = decode_logits(ctx, prefix, enc).value();
    const Eigen::Index last = logits.rows() - 1;
    // Only code tokens and [EOS] are valid emissions.
    int best = kEos;
    double best_score = logits(last, kEos);
    for (int id = kFirstCodeToken; id < config.vocab_size; ++id) {
      if (logits(last, id) > best_score) {
        best_score = logits(last, id);
        best = id;
      }
    }
    return best;
  };

  std::set<std::string> out;
  for (int id : greedy_decode(step_fn, max_codes)) out.insert(vocab.code_of(id));
  return out;
}

std::set<std::string> copy_predict(const PatientRecord& record, int visit_idx) {
  if (visit_idx < 1 || visit_idx >= static_cast<int>(record.visits.size()))
    throw ValidationError("copy_predict: visit_idx must be >= 1 and within the record");
  const auto& codes = record.visits[static_cast<std::size_t>(visit_idx - 1)].codes;
  return {codes.begin(), codes.end()};
}

// ---- logistic regression -----------------------------------------------------

namespace {

constexpr int kDemographicFeatures = kNumAgeTokens + 3;

void fill_features(const PatientRecord& record, const Vocabulary& vocab,
                   Eigen::RowVectorXd& x) {
  x.setZero();
  const int n_codes = vocab.num_codes();
  for (const auto& visit : record.visits)
    for (const auto& code : visit.codes) {
      const int id = vocab.id_of(code);
      if (id >= kFirstCodeToken) x(id - kFirstCodeToken) = 1.0;
    }
  const int age = std::min(record.demographics.age_years / 10, 9);
  x(n_codes + age) = 1.0;
  const int sex = record.demographics.sex == Sex::M ? 0 : (record.demographics.sex == Sex::F ? 1 : 2);
  x(n_codes + kNumAgeTokens + sex) = 1.0;
}

}  // namespace

LogRegModel logreg_train(const Cohort& cohort, const std::vector<int>& labels,
                         const Vocabulary& vocab, const LogRegConfig& config) {
  if (labels.size() != cohort.size()) throw ValidationError("logreg_train: labels/cohort mismatch");
  long long pos = 0;
  for (int y : labels) pos += y;
  if (pos == 0 || pos == static_cast<long long>(labels.size()))
    throw ValidationError("logreg_train: single-class labels");
  if (config.l2 < 0.0) throw ValidationError("logreg_train: l2 must be >= 0");

  const Eigen::Index n = static_cast<Eigen::Index>(cohort.size());
  const Eigen::Index d = vocab.num_codes() + kDemographicFeatures;
  Eigen::MatrixXd x(n, d);
  Eigen::VectorXd y(n);
  {
    Eigen::RowVectorXd row(d);
    for (Eigen::Index i = 0; i < n; ++i) {
      fill_features(cohort[static_cast<std::size_t>(i)], vocab, row);
      x.row(i) = row;
      y(i) = labels[static_cast<std::size_t>(i)];
    }
  }

  Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
  double b = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);

  auto loss_at = [&](const Eigen::VectorXd& wv, double bv) {
    const Eigen::VectorXd z = x * wv + Eigen::VectorXd::Constant(n, bv);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      loss += std::max(z(i), 0.0) - y(i) * z(i) + std::log1p(std::exp(-std::abs(z(i))));
    return loss * inv_n + 0.5 * config.l2 * wv.squaredNorm();
  };

  // Two-block gradient descent with independent backtracking scales: under
  // heavy l2 the weight block needs tiny steps while the unregularized bias
  // still converges at its own scale.
  double step_w = 1.0, step_b = 1.0;
  for (long long it = 0; it < config.max_steps; ++it) {
    const Eigen::VectorXd z = x * w + Eigen::VectorXd::Constant(n, b);
    Eigen::VectorXd p(n);
    for (Eigen::Index i = 0; i < n; ++i) p(i) = 1.0 / (1.0 + std::exp(-z(i)));
    const Eigen::VectorXd resid = p - y;
    Eigen::VectorXd gw = x.transpose() * resid * inv_n + config.l2 * w;
    const double gb = resid.sum() * inv_n;
    const double gnorm = std::sqrt(gw.squaredNorm() + gb * gb);
    if (gnorm < config.grad_tol) break;

    double f = loss_at(w, b);
    {
      double s = step_w;
      const double gw2 = gw.squaredNorm();
      for (int back = 0; back < 60 && gw2 > 0.0; ++back) {
        if (loss_at(w - s * gw, b) <= f - 0.25 * s * gw2) break;
        s *= 0.5;
      }
      w -= s * gw;
      step_w = std::min(s * 2.0, 1e4);
      f = loss_at(w, b);
    }
    {
      double s = step_b;
      const double gb2 = gb * gb;
      for (int back = 0; back < 60 && gb2 > 0.0; ++back) {
        if (loss_at(w, b - s * gb) <= f - 0.25 * s * gb2) break;
        s *= 0.5;
      }
      b -= s * gb;
      step_b = std::min(s * 2.0, 1e4);
    }
  }

  LogRegModel model;
  model.n_codes = vocab.num_codes();
  model.weights.assign(w.data(), w.data() + w.size());
  model.bias = b;
  return model;
}

double LogRegModel::score(const PatientRecord& record, const Vocabulary& vocab) const {
  if (static_cast<int>(weights.size()) != vocab.num_codes() + kDemographicFeatures)
    throw ShapeError("logreg score: feature dimension mismatch");
  Eigen::RowVectorXd x(static_cast<Eigen::Index>(weights.size()));
  fill_features(record, vocab, x);
  double z = bias;
  for (Eigen::Index i = 0; i < x.size(); ++i) z += x(i) * weights[static_cast<std::size_t>(i)];
  return 1.0 / (1.0 + std::exp(-z));
}

// ---- batch scoring and prediction ---------------------------------------------

std::vector<ScoredPatient> batch_score(const ad::ParamStore& params, const ModelConfig& config,
                                       const Vocabulary& vocab, const Cohort& cohort,
                                       int truncate_to_visits) {
  std::vector<ScoredPatient> out(cohort.size());
  parallel_for(cohort.size(), [&](std::size_t i) {
    const PatientRecord& record = cohort[i];
    const PatientRecord* r = &record;
    PatientRecord truncated;
    if (truncate_to_visits > 0) {
      truncated = truncate_history(record, truncate_to_visits);
      r = &truncated;
    }
    const TokenSequence seq = flatten_full_history(*r, vocab, config.max_seq_len);
    out[i] = {record.patient_id, risk_score(params, config, seq)};
  });
  return out;
}

std::vector<ScoredPatient> batch_score(const LogRegModel& model, const Vocabulary& vocab,
                                       const Cohort& cohort, int truncate_to_visits) {
  std::vector<ScoredPatient> out;
  out.reserve(cohort.size());
  for (const auto& record : cohort) {
    const PatientRecord* r = &record;
    PatientRecord truncated;
    if (truncate_to_visits > 0) {
      truncated = truncate_history(record, truncate_to_visits);
      r = &truncated;
    }
    out.push_back({record.patient_id, model.score(*r, vocab)});
  }
  return out;
}

std::vector<Prediction> predict_last_visits(const ad::ParamStore& params,
                                            const ModelConfig& config, const Vocabulary& vocab,
                                            const Cohort& cohort, int max_codes) {
  std::vector<Prediction> out(cohort.size());
  parallel_for(cohort.size(), [&](std::size_t i) {
    const PatientRecord& record = cohort[i];
    const int last = static_cast<int>(record.visits.size()) - 1;
    Prediction pred;
    pred.patient_id = record.patient_id;
    pred.visit_idx = last;
    const TokenSequence history = flatten_history(record, last, vocab, config.max_seq_len);
    pred.predicted = generate_next_visit(params, config, vocab, history, max_codes);
    const auto& gold = record.visits[static_cast<std::size_t>(last)].codes;
    pred.gold.insert(gold.begin(), gold.end());
    out[i] = std::move(pred);
  });
  return out;
}

std::vector<Prediction> copy_predict_last_visits(const Cohort& cohort) {
  std::vector<Prediction> out;
  out.reserve(cohort.size());
  for (const auto& record : cohort) {
    const int last = static_cast<int>(record.visits.size()) - 1;
    Prediction pred;
    pred.patient_id = record.patient_id;
    pred.visit_idx = last;
    pred.predicted = copy_predict(record, last);
    const auto& gold = record.visits[static_cast<std::size_t>(last)].codes;
    pred.gold.insert(gold.begin(), gold.end());
    out.push_back(std::move(pred));
  }
  return out;
}

void save_predictions_jsonl(const std::vector<Prediction>& predictions, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path);
  for (const auto& pred : predictions) {
    nlohmann::json j;
    j["patient_id"] = pred.patient_id;
    j["visit_idx"] = pred.visit_idx;
    j["predicted"] = std::vector<std::string>(pred.predicted.begin(), pred.predicted.end());
    j["gold"] = std::vector<std::string>(pred.gold.begin(), pred.gold.end());
    out << j.dump() << "\n";
  }
}

void save_scores_csv(const std::vector<ScoredPatient>& scores, const std::vector<int>& labels,
                     const std::string& path) {
  if (!labels.empty() && labels.size() != scores.size())
    throw ValidationError("save_scores_csv: labels/scores mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path);
  out.precision(17);
  out << "patient_id,score,label\n";
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out << scores[i].patient_id << "," << scores[i].score << ",";
    if (!labels.empty()) out << labels[i];
    out << "\n";
  }
}

void load_scores_csv(const std::string& path, std::vector<double>& scores,
                     std::vector<int>& labels) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  scores.clear();
  labels.clear();
  std::string line;
  long long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;  // header
    std::istringstream row(line);
    std::string pid, score_text, label_text;
    if (!std::getline(row, pid, ',') || !std::getline(row, score_text, ',') ||
        !std::getline(row, label_text))
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected patient_id,score,label");
    try {
      scores.push_back(std::stod(score_text));
      labels.push_back(std::stoi(label_text));
    } catch (const std::exception&) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": bad number");
    }
  }
  if (scores.empty()) throw ParseError(path + ": no score rows");
}

}  // namespace decode
