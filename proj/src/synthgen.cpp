#include "decode/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "decode/errors.hpp"
#include "decode/metrics.hpp"
#include "decode/rng.hpp"
#include "json.hpp"

namespace decode {

namespace {

constexpr int kMinVisits = 2;
constexpr int kMaxVisits = 40;
constexpr int kMinCodesPerVisit = 1;
constexpr int kMaxCodesPerVisit = 25;

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Mean of clamp(round(N(mu, sd)), lo, hi).
double clamped_round_mean(double mu, double sd, int lo, int hi) {
  double m = lo * normal_cdf((lo + 0.5 - mu) / sd);
  for (int k = lo + 1; k < hi; ++k) {
    const double p = normal_cdf((k + 0.5 - mu) / sd) - normal_cdf((k - 0.5 - mu) / sd);
    m += k * p;
  }
  m += hi * (1.0 - normal_cdf((hi - 0.5 - mu) / sd));
  return m;
}

// Pre-clamp mean whose clamped-round mean equals the configured target. The
// clamp at the low end otherwise inflates the realized mean by ~0.25 codes.
double compensate_clamp_bias(double target, double sd, int lo, int hi) {
  double mu = target;
  for (int it = 0; it < 40; ++it) mu += target - clamped_round_mean(mu, sd, lo, hi);
  return mu;
}

int draw_count(Rng& rng, double mu, double sd, int lo, int hi) {
  const int k = static_cast<int>(std::lround(rng.normal(mu, sd)));
  return std::clamp(k, lo, hi);
}

bool code_is_chronic(int index, double chronic_fraction) {
  return static_cast<double>(mix_seed(static_cast<std::uint64_t>(index) + 1) & 0xFFFFFF) <
         chronic_fraction * 16777216.0;
}

struct CodeUniverse {
  std::vector<std::string> names;          // index -> name
  std::unordered_map<std::string, int> index_of;
  std::vector<double> weight;              // 0 for rule targets
  double total_weight = 0.0;
  std::vector<bool> chronic;
  std::vector<std::vector<int>> clusters;  // over common-pool indices
  int n_common = 0;

  bool is_rare(int idx) const { return idx >= n_common; }
};

CodeUniverse build_universe(const GenConfig& cfg) {
  CodeUniverse u;
  u.n_common = cfg.n_common_codes;
  const int total = cfg.n_common_codes + cfg.n_rare_codes;
  u.names.reserve(total);
  for (int i = 0; i < total; ++i) {
    u.names.push_back(synth_code_name(i));
    u.index_of[u.names.back()] = i;
  }

  std::unordered_set<std::string> targets;
  for (const auto& rule : cfg.planted_rules) {
    if (rule.kind == RuleKind::NextVisitCode) targets.insert(rule.target);
    if (rule.inject_prob > 0.0) {
      targets.insert(rule.precursor_early);
      targets.insert(rule.precursor_late);
    }
  }

  u.weight.resize(total, 0.0);
  double common_total = 0.0;
  for (int i = 0; i < cfg.n_common_codes; ++i) {
    if (targets.count(u.names[i])) continue;
    u.weight[i] = 1.0 / std::pow(static_cast<double>(i + 2), cfg.zipf_exponent);
    common_total += u.weight[i];
  }
  // Rare codes share rare_mass of the total fresh-draw probability.
  int n_rare_free = 0;
  for (int i = cfg.n_common_codes; i < total; ++i)
    if (!targets.count(u.names[i])) ++n_rare_free;
  const double rare_each =
      n_rare_free > 0 ? common_total * cfg.rare_mass / ((1.0 - cfg.rare_mass) * n_rare_free) : 0.0;
  for (int i = cfg.n_common_codes; i < total; ++i)
    if (!targets.count(u.names[i])) u.weight[i] = rare_each;
  u.total_weight = 0.0;
  for (double w : u.weight) u.total_weight += w;

  u.chronic.resize(total);
  for (int i = 0; i < total; ++i) u.chronic[i] = code_is_chronic(i, cfg.chronic_fraction);
  for (const auto& rule : cfg.planted_rules) {
    if (rule.kind == RuleKind::NextVisitCode) {
      auto it = u.index_of.find(rule.target);
      if (it != u.index_of.end()) u.chronic[it->second] = true;  // onsets recur
    }
    if (rule.inject_prob > 0.0) {
      // one-shot events never persist
      auto e = u.index_of.find(rule.precursor_early);
      if (e != u.index_of.end()) u.chronic[e->second] = false;
      auto l = u.index_of.find(rule.precursor_late);
      if (l != u.index_of.end()) u.chronic[l->second] = false;
    }
  }

  if (!cfg.comorbidity_clusters.empty()) {
    for (const auto& group : cfg.comorbidity_clusters) {
      std::vector<int> cluster;
      for (const auto& name : group) {
        auto it = u.index_of.find(name);
        if (it == u.index_of.end())
          throw ValidationError("generate_cohort: cluster code " + name + " not in universe");
        cluster.push_back(it->second);
      }
      if (!cluster.empty()) u.clusters.push_back(std::move(cluster));
    }
  } else {
    for (int start = 0; start < cfg.n_common_codes; start += cfg.cluster_size) {
      std::vector<int> cluster;
      for (int i = start; i < std::min(start + cfg.cluster_size, cfg.n_common_codes); ++i)
        cluster.push_back(i);
      u.clusters.push_back(std::move(cluster));
    }
  }
  return u;
}

int draw_fresh_code(Rng& rng, const CodeUniverse& u, const GenConfig& cfg,
                    const std::vector<int>& home_clusters) {
  if (!home_clusters.empty() && rng.bernoulli(cfg.cluster_affinity)) {
    const auto& cluster =
        u.clusters[home_clusters[static_cast<std::size_t>(rng.uniform_int(home_clusters.size()))]];
    double total = 0.0;
    for (int idx : cluster) total += u.weight[idx];
    if (total > 0.0) {
      double x = rng.uniform() * total;
      for (int idx : cluster) {
        x -= u.weight[idx];
        if (x < 0.0) return idx;
      }
      return cluster.back();
    }
  }
  double x = rng.uniform() * u.total_weight;
  for (std::size_t i = 0; i < u.weight.size(); ++i) {
    x -= u.weight[i];
    if (x < 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(u.weight.size()) - 1;
}

}  // namespace

std::string synth_code_name(int index) {
  const char letter = static_cast<char>('A' + index % 26);
  const int num = index / 26;
  char buf[16];
  std::snprintf(buf, sizeof buf, "%c%02d.%d", letter, num % 100, index % 10);
  return buf;
}

void GenConfig::validate() const {
  if (n_patients < 1) throw ValidationError("gen config: n_patients must be >= 1");
  auto check_prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError(std::string("gen config: ") + name + " not in [0,1]");
  };
  check_prob(p_chronic, "p_chronic");
  check_prob(p_react, "p_react");
  check_prob(chronic_fraction, "chronic_fraction");
  check_prob(cluster_affinity, "cluster_affinity");
  check_prob(rare_mass, "rare_mass");
  check_prob(outcome_prevalence_target, "outcome_prevalence_target");
  if (n_common_codes < 1 || n_rare_codes < 0) throw ValidationError("gen config: bad pool sizes");
  if (cluster_size < 1) throw ValidationError("gen config: cluster_size must be >= 1");
  if (mean_visits <= 0 || sd_visits < 0 || mean_codes_per_visit <= 0 || sd_codes < 0)
    throw ValidationError("gen config: bad visit/code moments");

  int n_targets = 0;
  for (const auto& rule : planted_rules) {
    check_prob(rule.hit_prob, "hit_prob");
    check_prob(rule.base_prob, "base_prob");
    if (rule.hit_prob < rule.base_prob)
      throw ValidationError("gen config: rule " + rule.name + ": hit_prob < base_prob");
    if (rule.precursor_early == rule.precursor_late)
      throw ValidationError("gen config: rule " + rule.name + ": precursors must differ");
    if (rule.kind == RuleKind::NextVisitCode) {
      ++n_targets;
      if (rule.target == rule.precursor_early || rule.target == rule.precursor_late)
        throw ValidationError("gen config: rule " + rule.name + ": target equals a precursor");
      if (rule.target.empty()) throw ValidationError("gen config: rule " + rule.name + ": empty target");
    }
    if (rule.name.empty()) throw ValidationError("gen config: rule without a name");
    check_prob(rule.inject_prob, "inject_prob");
  }
  // Every visit must be fillable with distinct non-target codes.
  const int fillable = n_common_codes + n_rare_codes - n_targets;
  if (fillable < kMaxCodesPerVisit)
    throw ValidationError("gen config: codes-per-visit clamp exceeds the samplable vocabulary");
}

bool ordered_precursor(const PatientRecord& record, const std::string& early,
                       const std::string& late, int upto_visit) {
  const int n = upto_visit < 0 ? static_cast<int>(record.visits.size())
                               : std::min(upto_visit, static_cast<int>(record.visits.size()));
  int first_early = -1;
  for (int v = 0; v < n; ++v) {
    const auto& codes = record.visits[static_cast<std::size_t>(v)].codes;
    const bool has_early = std::find(codes.begin(), codes.end(), early) != codes.end();
    const bool has_late = std::find(codes.begin(), codes.end(), late) != codes.end();
    if (first_early >= 0 && has_late) return true;
    if (has_early && first_early < 0) first_early = v;
  }
  return false;
}

GeneratedCohort generate_cohort(const GenConfig& cfg) {
  cfg.validate();
  const CodeUniverse universe = build_universe(cfg);
  const double mu_visits =
      compensate_clamp_bias(cfg.mean_visits, cfg.sd_visits, kMinVisits, kMaxVisits);
  const double mu_codes = compensate_clamp_bias(cfg.mean_codes_per_visit, cfg.sd_codes,
                                                kMinCodesPerVisit, kMaxCodesPerVisit);

  std::vector<const PlantedRule*> visit_rules;
  std::vector<const PlantedRule*> binary_rules;
  for (const auto& rule : cfg.planted_rules) {
    (rule.kind == RuleKind::NextVisitCode ? visit_rules : binary_rules).push_back(&rule);
  }

  GeneratedCohort out;
  out.cohort.reserve(static_cast<std::size_t>(cfg.n_patients));
  for (const auto* rule : visit_rules) {
    auto it = universe.index_of.find(rule->target);
    if (it == universe.index_of.end())
      throw ValidationError("generate_cohort: rule target " + rule->target + " not in universe");
    (universe.is_rare(it->second) ? out.tracked.rare : out.tracked.common).push_back(rule->target);
  }

  for (long long pi = 0; pi < cfg.n_patients; ++pi) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(pi)));
    PatientRecord rec;
    {
      char buf[24];
      std::snprintf(buf, sizeof buf, "P%06lld", pi);
      rec.patient_id = buf;
    }
    rec.demographics.age_years = 20 + static_cast<int>(rng.uniform_int(70));
    const double sex_draw = rng.uniform();
    rec.demographics.sex = sex_draw < 0.55 ? Sex::M : (sex_draw < 0.98 ? Sex::F : Sex::U);

    std::vector<int> home_clusters;
    if (!universe.clusters.empty()) {
      const std::size_t a = static_cast<std::size_t>(rng.uniform_int(universe.clusters.size()));
      std::size_t b = static_cast<std::size_t>(rng.uniform_int(universe.clusters.size()));
      if (b == a) b = (b + 1) % universe.clusters.size();
      home_clusters = {static_cast<int>(a), static_cast<int>(b)};
      std::sort(home_clusters.begin(), home_clusters.end());
    }

    const int n_visits = draw_count(rng, mu_visits, cfg.sd_visits, kMinVisits, kMaxVisits);
    // injected one-shot precursors: (visit -> code indices), drawn up front
    std::map<int, std::vector<int>> injections;
    for (const auto& rule : cfg.planted_rules) {
      if (rule.inject_prob <= 0.0) continue;
      for (const auto* name : {&rule.precursor_early, &rule.precursor_late}) {
        if (rng.bernoulli(rule.inject_prob)) {
          const int at = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n_visits)));
          injections[at].push_back(universe.index_of.at(*name));
        }
      }
    }
    std::vector<std::vector<int>> visit_codes;
    visit_codes.reserve(static_cast<std::size_t>(n_visits));
    for (int v = 0; v < n_visits; ++v) {
      const int n_target = draw_count(rng, mu_codes, cfg.sd_codes, kMinCodesPerVisit, kMaxCodesPerVisit);
      std::vector<int> codes;
      if (v > 0) {
        for (int idx : visit_codes[static_cast<std::size_t>(v - 1)]) {
          if (universe.chronic[static_cast<std::size_t>(idx)] && rng.bernoulli(cfg.p_chronic))
            codes.push_back(idx);
        }
        if (static_cast<int>(codes.size()) > n_target) {
          rng.shuffle(codes);
          codes.resize(static_cast<std::size_t>(n_target));
          std::sort(codes.begin(), codes.end());  // restore stable order
        }
      }
      std::unordered_set<int> present(codes.begin(), codes.end());
      if (auto it = injections.find(v); it != injections.end()) {
        for (int idx : it->second)
          if (present.insert(idx).second) codes.push_back(idx);
      }
      // Relapse: chronic codes seen in the two visits before last that
      // dropped out of the previous visit can return. Copy-forward never
      // predicts these; cross-visit attention can.
      if (cfg.p_react > 0.0 && v >= 2) {
        std::vector<int> lapsed;
        const auto& prev = visit_codes[static_cast<std::size_t>(v - 1)];
        for (int w = std::max(0, v - 3); w < v - 1; ++w) {
          for (int idx : visit_codes[static_cast<std::size_t>(w)]) {
            if (!universe.chronic[static_cast<std::size_t>(idx)]) continue;
            if (std::find(prev.begin(), prev.end(), idx) != prev.end()) continue;
            if (present.count(idx)) continue;
            if (std::find(lapsed.begin(), lapsed.end(), idx) == lapsed.end()) lapsed.push_back(idx);
          }
        }
        std::sort(lapsed.begin(), lapsed.end());
        for (int idx : lapsed) {
          if (rng.bernoulli(cfg.p_react) && present.insert(idx).second) codes.push_back(idx);
        }
      }
      // Fired rule targets displace fresh draws rather than inflating the
      // visit, so codes-per-visit keeps the configured mean.
      if (v >= 1) {
        for (const auto* rule : visit_rules) {
          // ordered-precursor condition over visits [0, v)
          bool cond = false;
          {
            int first_early = -1;
            const int early_idx = universe.index_of.at(rule->precursor_early);
            const int late_idx = universe.index_of.at(rule->precursor_late);
            for (int w = 0; w < v && !cond; ++w) {
              const auto& wc = visit_codes[static_cast<std::size_t>(w)];
              const bool has_late = std::find(wc.begin(), wc.end(), late_idx) != wc.end();
              if (first_early >= 0 && has_late) cond = true;
              if (first_early < 0 &&
                  std::find(wc.begin(), wc.end(), early_idx) != wc.end())
                first_early = w;
            }
          }
          const bool fire = rng.bernoulli(cond ? rule->hit_prob : rule->base_prob);
          const int target_idx = universe.index_of.at(rule->target);
          if (fire && present.insert(target_idx).second) codes.push_back(target_idx);
        }
      }
      int guard = 0;
      while (static_cast<int>(codes.size()) < n_target && guard < 10000) {
        const int idx = draw_fresh_code(rng, universe, cfg, home_clusters);
        ++guard;
        if (present.insert(idx).second) codes.push_back(idx);
      }
      visit_codes.push_back(std::move(codes));
    }

    rec.visits.reserve(visit_codes.size());
    for (const auto& codes : visit_codes) {
      Visit visit;
      visit.codes.reserve(codes.size());
      for (int idx : codes) visit.codes.push_back(universe.names[static_cast<std::size_t>(idx)]);
      rec.visits.push_back(std::move(visit));
    }

    for (const auto* rule : binary_rules) {
      const bool cond = ordered_precursor(rec, rule->precursor_early, rule->precursor_late);
      const int label = rng.bernoulli(cond ? rule->hit_prob : rule->base_prob) ? 1 : 0;
      out.labels.by_rule[rule->name][rec.patient_id] = label;
    }
    out.cohort.push_back(std::move(rec));
  }
  return out;
}

double oracle_posterior(const GenConfig& cfg, const PatientRecord& record,
                        const PlantedRule& rule) {
  bool known = false;
  for (const auto& r : cfg.planted_rules)
    if (r.name == rule.name && r.precursor_early == rule.precursor_early &&
        r.precursor_late == rule.precursor_late)
      known = true;
  if (!known) throw ValidationError("oracle_posterior: rule " + rule.name + " not in config");
  return ordered_precursor(record, rule.precursor_early, rule.precursor_late)
             ? rule.hit_prob
             : rule.base_prob;
}

double oracle_auroc(const GenConfig& cfg, const Cohort& cohort, const LabelMap& labels,
                    const PlantedRule& rule) {
  const auto y = labels.aligned(rule.name, cohort);
  std::vector<double> scores;
  scores.reserve(cohort.size());
  for (const auto& rec : cohort) scores.push_back(oracle_posterior(cfg, rec, rule));
  return auroc(scores, y);  // throws UndefinedMetricError on single-class labels
}

void LabelMap::save_jsonl(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path);
  for (const auto& [rule, m] : by_rule) {
    for (const auto& [pid, label] : m) {
      nlohmann::json j{{"patient_id", pid}, {"label", label}, {"rule", rule}};
      out << j.dump() << "\n";
    }
  }
}

LabelMap LabelMap::load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  LabelMap map;
  std::string line;
  long long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      map.by_rule[j.at("rule").get<std::string>()][j.at("patient_id").get<std::string>()] =
          j.at("label").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return map;
}

std::vector<int> LabelMap::aligned(const std::string& rule, const Cohort& cohort) const {
  auto it = by_rule.find(rule);
  if (it == by_rule.end()) throw ValidationError("labels: unknown rule " + rule);
  std::vector<int> y;
  y.reserve(cohort.size());
  for (const auto& rec : cohort) {
    auto jt = it->second.find(rec.patient_id);
    if (jt == it->second.end())
      throw ValidationError("labels: no label for patient " + rec.patient_id);
    y.push_back(jt->second);
  }
  return y;
}

GenConfig GenConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("gen config: ") + e.what());
  }
  GenConfig cfg;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("n_patients", cfg.n_patients);
  get("mean_visits", cfg.mean_visits);
  get("sd_visits", cfg.sd_visits);
  get("mean_codes_per_visit", cfg.mean_codes_per_visit);
  get("sd_codes", cfg.sd_codes);
  get("n_common_codes", cfg.n_common_codes);
  get("n_rare_codes", cfg.n_rare_codes);
  get("p_chronic", cfg.p_chronic);
  get("p_react", cfg.p_react);
  get("chronic_fraction", cfg.chronic_fraction);
  get("cluster_affinity", cfg.cluster_affinity);
  get("cluster_size", cfg.cluster_size);
  get("rare_mass", cfg.rare_mass);
  get("zipf_exponent", cfg.zipf_exponent);
  get("outcome_prevalence_target", cfg.outcome_prevalence_target);
  get("seed", cfg.seed);
  if (j.contains("comorbidity_clusters"))
    cfg.comorbidity_clusters = j.at("comorbidity_clusters").get<std::vector<std::vector<std::string>>>();
  if (j.contains("planted_rules")) {
    for (const auto& jr : j.at("planted_rules")) {
      PlantedRule rule;
      rule.name = jr.at("name").get<std::string>();
      rule.precursor_early = jr.at("precursor_early").get<std::string>();
      rule.precursor_late = jr.at("precursor_late").get<std::string>();
      if (jr.contains("target")) rule.target = jr.at("target").get<std::string>();
      if (jr.contains("hit_prob")) rule.hit_prob = jr.at("hit_prob").get<double>();
      if (jr.contains("base_prob")) rule.base_prob = jr.at("base_prob").get<double>();
      if (jr.contains("inject_prob")) rule.inject_prob = jr.at("inject_prob").get<double>();
      const auto kind = jr.value("kind", std::string("next_visit_code"));
      if (kind == "next_visit_code") rule.kind = RuleKind::NextVisitCode;
      else if (kind == "binary_outcome") rule.kind = RuleKind::BinaryOutcome;
      else throw ParseError("gen config: unknown rule kind " + kind);
      cfg.planted_rules.push_back(std::move(rule));
    }
  }
  cfg.validate();
  return cfg;
}

GenConfig GenConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json(text);
}

std::string GenConfig::to_json() const {
  nlohmann::json j;
  j["n_patients"] = n_patients;
  j["mean_visits"] = mean_visits;
  j["sd_visits"] = sd_visits;
  j["mean_codes_per_visit"] = mean_codes_per_visit;
  j["sd_codes"] = sd_codes;
  j["n_common_codes"] = n_common_codes;
  j["n_rare_codes"] = n_rare_codes;
  j["p_chronic"] = p_chronic;
  j["p_react"] = p_react;
  j["chronic_fraction"] = chronic_fraction;
  j["cluster_affinity"] = cluster_affinity;
  j["cluster_size"] = cluster_size;
  j["rare_mass"] = rare_mass;
  j["zipf_exponent"] = zipf_exponent;
  j["outcome_prevalence_target"] = outcome_prevalence_target;
  j["seed"] = seed;
  if (!comorbidity_clusters.empty()) j["comorbidity_clusters"] = comorbidity_clusters;
  nlohmann::json rules = nlohmann::json::array();
  for (const auto& rule : planted_rules) {
    rules.push_back({{"name", rule.name},
                     {"precursor_early", rule.precursor_early},
                     {"precursor_late", rule.precursor_late},
                     {"target", rule.target},
                     {"hit_prob", rule.hit_prob},
                     {"base_prob", rule.base_prob},
                     {"inject_prob", rule.inject_prob},
                     {"kind", rule.kind == RuleKind::NextVisitCode ? "next_visit_code"
                                                                   : "binary_outcome"}});
  }
  j["planted_rules"] = rules;
  return j.dump(2);
}

GenConfig GenConfig::defaults(long long n_patients, std::uint64_t seed, int n_common,
                              int n_rare) {
  GenConfig cfg;
  cfg.n_patients = n_patients;
  cfg.seed = seed;
  cfg.n_common_codes = n_common;
  cfg.n_rare_codes = n_rare;
  // Tracked next-visit targets: 6 at the tail of the common pool, 6 at the
  // tail of the rare pool. Precursors sit at moderate popularity ranks so the
  // ordered condition activates for a useful share of patients.
  const int nc = cfg.n_common_codes;
  const int nr = cfg.n_rare_codes;
  for (int k = 0; k < 6; ++k) {
    PlantedRule rule;
    rule.name = "common_onset_" + std::to_string(k);
    rule.precursor_early = synth_code_name(2 + 5 * k);
    rule.precursor_late = synth_code_name(4 + 5 * k);
    rule.target = synth_code_name(nc - 6 + k);
    rule.hit_prob = 0.9;
    rule.base_prob = 0.02;
    rule.kind = RuleKind::NextVisitCode;
    cfg.planted_rules.push_back(rule);
  }
  for (int k = 0; k < 6; ++k) {
    PlantedRule rule;
    rule.name = "rare_onset_" + std::to_string(k);
    rule.precursor_early = synth_code_name(40 + 7 * k);
    rule.precursor_late = synth_code_name(43 + 7 * k);
    rule.target = synth_code_name(nc + nr - 6 + k);
    rule.hit_prob = 0.8;
    rule.base_prob = 0.002;
    rule.kind = RuleKind::NextVisitCode;
    cfg.planted_rules.push_back(rule);
  }
  PlantedRule outcome;
  outcome.name = "outcome";
  outcome.precursor_early = synth_code_name(20);
  outcome.precursor_late = synth_code_name(21);
  outcome.target = "outcome";
  outcome.hit_prob = 0.12;
  outcome.base_prob = 0.002;
  outcome.inject_prob = 0.6;
  outcome.kind = RuleKind::BinaryOutcome;
  cfg.planted_rules.push_back(outcome);
  return cfg;
}

}  // namespace decode
