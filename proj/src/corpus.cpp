#include "decode/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <unordered_map>

#include "decode/errors.hpp"
#include "json.hpp"

namespace decode {

namespace {

void validate_record(const PatientRecord& r) {
  if (r.visits.size() < 2) {
    throw ValidationError("patient " + r.patient_id + ": fewer than 2 visits");
  }
  for (std::size_t v = 0; v < r.visits.size(); ++v) {
    const auto& codes = r.visits[v].codes;
    if (codes.empty()) {
      throw ValidationError("patient " + r.patient_id + ": visit " + std::to_string(v) + " has no codes");
    }
    std::set<std::string> seen;
    for (const auto& c : codes) {
      if (!seen.insert(c).second) {
        throw ValidationError("patient " + r.patient_id + ": duplicate code " + c + " in visit " + std::to_string(v));
      }
    }
  }
  if (r.demographics.age_years < 0) {
    throw ValidationError("patient " + r.patient_id + ": negative age");
  }
}

Sex parse_sex(const std::string& s) {
  if (s == "M") return Sex::M;
  if (s == "F") return Sex::F;
  if (s == "U") return Sex::U;
  throw ParseError("unknown sex value '" + s + "'");
}

const char* sex_string(Sex s) {
  switch (s) {
    case Sex::M: return "M";
    case Sex::F: return "F";
    default: return "U";
  }
}

}  // namespace

Vocabulary Vocabulary::build(const Cohort& cohort, int min_count) {
  if (cohort.empty()) throw ValidationError("build_vocab: empty cohort");
  if (min_count < 1) throw ValidationError("build_vocab: min_count must be >= 1");
  std::unordered_map<std::string, long long> freq;
  for (const auto& r : cohort)
    for (const auto& v : r.visits)
      for (const auto& c : v.codes) ++freq[c];

  std::vector<std::pair<std::string, long long>> kept;
  kept.reserve(freq.size());
  for (const auto& [code, n] : freq)
    if (n >= min_count) kept.emplace_back(code, n);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary vocab;
  vocab.codes_.reserve(kept.size());
  for (const auto& [code, n] : kept) {
    vocab.code_to_id_[code] = kFirstCodeToken + static_cast<int>(vocab.codes_.size());
    vocab.codes_.push_back(code);
  }
  return vocab;
}

Vocabulary Vocabulary::from_codes(const std::vector<std::string>& codes) {
  Vocabulary vocab;
  vocab.codes_.reserve(codes.size());
  for (const auto& code : codes) {
    if (vocab.code_to_id_.count(code))
      throw ValidationError("vocabulary: duplicate code " + code);
    vocab.code_to_id_[code] = kFirstCodeToken + static_cast<int>(vocab.codes_.size());
    vocab.codes_.push_back(code);
  }
  return vocab;
}

int Vocabulary::id_of(const std::string& code) const {
  auto it = code_to_id_.find(code);
  return it == code_to_id_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(const std::string& code) const {
  return code_to_id_.count(code) != 0;
}

const std::string& Vocabulary::code_of(int id) const {
  if (!is_code_token(id)) throw ValidationError("code_of: id " + std::to_string(id) + " is not a code token");
  return codes_[static_cast<std::size_t>(id - kFirstCodeToken)];
}

std::string Vocabulary::token_name(int id) const {
  switch (id) {
    case kPad: return "[PAD]";
    case kBos: return "[BOS]";
    case kEos: return "[EOS]";
    case kSep: return "[SEP]";
    case kMask: return "[MASK]";
    case kUnk: return "[UNK]";
    case kSexM: return "SEX_M";
    case kSexF: return "SEX_F";
    case kSexU: return "SEX_U";
    default: break;
  }
  if (id >= kFirstAgeToken && id < kFirstAgeToken + kNumAgeTokens) {
    return "AGE_" + std::to_string(id - kFirstAgeToken);
  }
  if (is_code_token(id)) return codes_[static_cast<std::size_t>(id - kFirstCodeToken)];
  return "<invalid:" + std::to_string(id) + ">";
}

Cohort load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  Cohort cohort;
  std::string line;
  long long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    PatientRecord r;
    try {
      r.patient_id = j.at("patient_id").get<std::string>();
      const auto& demo = j.at("demographics");
      r.demographics.age_years = demo.at("age").get<int>();
      r.demographics.sex = parse_sex(demo.at("sex").get<std::string>());
      for (const auto& jv : j.at("visits")) {
        Visit v;
        for (const auto& jc : jv.at("codes")) v.codes.push_back(jc.get<std::string>());
        r.visits.push_back(std::move(v));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    validate_record(r);
    cohort.push_back(std::move(r));
  }
  return cohort;
}

void save_jsonl(const Cohort& cohort, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path);
  for (const auto& r : cohort) {
    nlohmann::json j;
    j["patient_id"] = r.patient_id;
    j["demographics"] = {{"age", r.demographics.age_years}, {"sex", sex_string(r.demographics.sex)}};
    nlohmann::json visits = nlohmann::json::array();
    for (const auto& v : r.visits) visits.push_back({{"codes", v.codes}});
    j["visits"] = std::move(visits);
    out << j.dump() << "\n";
  }
}

namespace {

// Shared by flatten_history (upto_visit < n, leaves a target visit) and
// flatten_full_history (upto_visit == n).
TokenSequence flatten_upto(const PatientRecord& record, int upto_visit,
                           const Vocabulary& vocab, int max_seq_len) {
  if (max_seq_len < 4) throw ValidationError("flatten_history: max_seq_len too small");
  if (upto_visit < 1 || upto_visit > static_cast<int>(record.visits.size()))
    throw ValidationError("flatten_history: upto_visit out of range");

  // Drop oldest whole visits until the sequence fits; prefix always kept.
  int first = 0;
  auto total_len = [&](int from) {
    int len = 2;
    for (int v = from; v < upto_visit; ++v) len += static_cast<int>(record.visits[v].codes.size()) + 1;
    return len;
  };
  while (first < upto_visit - 1 && total_len(first) > max_seq_len) ++first;

  TokenSequence seq;
  seq.ids.reserve(static_cast<std::size_t>(total_len(first)));
  seq.ids.push_back(age_bucket_token(record.demographics.age_years));
  seq.ids.push_back(sex_token(record.demographics.sex));
  seq.visit_index.assign(2, 0);

  int vis = 1;
  for (int v = first; v < upto_visit; ++v, ++vis) {
    const auto& codes = record.visits[v].codes;
    std::size_t skip = 0;
    if (v == first) {
      // A single remaining visit can still overflow; keep its most recent codes.
      const int room = max_seq_len - total_len(first);
      if (room < 0) skip = static_cast<std::size_t>(-room);
    }
    for (std::size_t i = skip; i < codes.size(); ++i) {
      seq.ids.push_back(vocab.id_of(codes[i]));
      seq.visit_index.push_back(vis);
    }
    seq.ids.push_back(kSep);
    seq.visit_index.push_back(vis);
  }
  return seq;
}

}  // namespace

TokenSequence flatten_history(const PatientRecord& record, int upto_visit,
                              const Vocabulary& vocab, int max_seq_len) {
  const int n = static_cast<int>(record.visits.size());
  if (upto_visit < 1 || upto_visit >= n) {
    throw ValidationError("flatten_history: upto_visit " + std::to_string(upto_visit) +
                          " out of range for " + std::to_string(n) + " visits");
  }
  return flatten_upto(record, upto_visit, vocab, max_seq_len);
}

TokenSequence flatten_full_history(const PatientRecord& record, const Vocabulary& vocab,
                                   int max_seq_len) {
  return flatten_upto(record, static_cast<int>(record.visits.size()), vocab, max_seq_len);
}

std::vector<int> target_visit(const PatientRecord& record, int visit_idx,
                              const Vocabulary& vocab) {
  if (visit_idx < 0 || visit_idx >= static_cast<int>(record.visits.size())) {
    throw ValidationError("target_visit: visit_idx out of range");
  }
  std::vector<std::string> codes = record.visits[static_cast<std::size_t>(visit_idx)].codes;
  std::sort(codes.begin(), codes.end());
  std::vector<int> ids;
  ids.reserve(codes.size() + 1);
  for (const auto& c : codes) ids.push_back(vocab.id_of(c));
  ids.push_back(kEos);
  return ids;
}

RecurrenceStratum recurrence_stratum(const PatientRecord& record, int visit_idx,
                                     const std::string& code) {
  if (visit_idx < 1 || visit_idx > static_cast<int>(record.visits.size())) {
    throw ValidationError("recurrence_stratum: visit_idx out of range");
  }
  int present = 0;
  for (int v = 0; v < visit_idx; ++v) {
    const auto& codes = record.visits[static_cast<std::size_t>(v)].codes;
    if (std::find(codes.begin(), codes.end(), code) != codes.end()) ++present;
  }
  if (present == 0) return RecurrenceStratum::Zero;
  const double f = static_cast<double>(present) / static_cast<double>(visit_idx);
  return f > 0.5 ? RecurrenceStratum::H : RecurrenceStratum::L;
}

PatientRecord truncate_history(const PatientRecord& record, int k) {
  if (k < 2) throw ValidationError("truncate_history: k must be >= 2");
  PatientRecord out;
  out.patient_id = record.patient_id;
  out.demographics = record.demographics;
  const int n = static_cast<int>(record.visits.size());
  const int keep = std::min(k, n);
  out.visits.assign(record.visits.end() - keep, record.visits.end());
  return out;
}

}  // namespace decode
