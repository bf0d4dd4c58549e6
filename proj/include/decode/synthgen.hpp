#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "decode/corpus.hpp"
#include "decode/metrics.hpp"

namespace decode {

enum class RuleKind { NextVisitCode, BinaryOutcome };

// Order-sensitive planted signal: when precursor_early occurs in a strictly
// earlier visit than precursor_late, the target fires with hit_prob instead
// of base_prob. Order sensitivity is what separates sequence models from
// bag-of-codes baselines.
struct PlantedRule {
  std::string name;
  std::string precursor_early;  // P1
  std::string precursor_late;   // P2
  std::string target;           // emitted code (next_visit) or outcome name (binary)
  double hit_prob = 0.9;
  double base_prob = 0.02;
  RuleKind kind = RuleKind::NextVisitCode;
  // When > 0, each precursor is an injected one-shot event: present with this
  // probability, in a single uniformly chosen visit. Single appearances make
  // the two orders equally likely, which maximizes the order signal a
  // bag-of-codes model cannot see.
  double inject_prob = 0.0;
};

struct GenConfig {
  long long n_patients = 1000;
  double mean_visits = 10.1;
  double sd_visits = 3.3;
  double mean_codes_per_visit = 5.18;
  double sd_codes = 3.79;
  int n_common_codes = 120;
  int n_rare_codes = 60;
  double p_chronic = 0.7;          // per-visit carry probability of a chronic code
  double chronic_fraction = 0.6;   // fraction of codes that persist at all
  double p_react = 0.0;            // relapse: a recently-dropped chronic code returns
  double cluster_affinity = 0.5;   // probability a fresh draw comes from a home cluster
  int cluster_size = 8;
  double rare_mass = 0.06;         // share of fresh draws landing in the rare pool
  double zipf_exponent = 0.9;
  std::vector<PlantedRule> planted_rules;
  double outcome_prevalence_target = 0.019;
  std::uint64_t seed = 1;
  // comorbidity_clusters: explicit code groups; when empty, the common pool
  // is partitioned into consecutive groups of cluster_size.
  std::vector<std::vector<std::string>> comorbidity_clusters;

  static GenConfig from_json_file(const std::string& path);
  static GenConfig from_json(const std::string& text);
  std::string to_json() const;

  // Default desk-scale experiment: 12 tracked next-visit rule targets
  // (6 common, 6 rare) plus one binary outcome rule at ~1.9% prevalence.
  static GenConfig defaults(long long n_patients, std::uint64_t seed, int n_common = 120,
                            int n_rare = 60);

  void validate() const;
};

// Deterministic synthetic code names, ICD-10-like.
std::string synth_code_name(int index);

struct LabelMap {
  // rule name -> patient_id -> 0/1, for rules of kind binary_outcome.
  std::map<std::string, std::map<std::string, int>> by_rule;

  void save_jsonl(const std::string& path) const;
  static LabelMap load_jsonl(const std::string& path);
  std::vector<int> aligned(const std::string& rule, const Cohort& cohort) const;
};

struct GeneratedCohort {
  Cohort cohort;
  LabelMap labels;
  TrackedCodeSets tracked;  // next-visit rule targets, split common/rare
};

// Deterministic given config.seed; per-patient derived seeds make the output
// independent of generation order.
GeneratedCohort generate_cohort(const GenConfig& config);

// True iff P1 occurs in a strictly earlier visit than P2 within visits
// [0, upto_visit) (all visits when upto_visit < 0).
bool ordered_precursor(const PatientRecord& record, const std::string& early,
                       const std::string& late, int upto_visit = -1);

// The exact generative conditional for the rule on this record's history.
double oracle_posterior(const GenConfig& config, const PatientRecord& record,
                        const PlantedRule& rule);

// AUROC of the oracle posterior against the rule's labels: the Bayes ceiling
// any model is compared to.
double oracle_auroc(const GenConfig& config, const Cohort& cohort,
                    const LabelMap& labels, const PlantedRule& rule);

}  // namespace decode
