#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace decode {

// Special token ids. Demographic tokens follow, code ids after those.
enum SpecialToken : int {
  kPad = 0,
  kBos = 1,
  kEos = 2,
  kSep = 3,
  kMask = 4,
  kUnk = 5,
};
inline constexpr int kFirstAgeToken = 6;   // AGE_0 .. AGE_9
inline constexpr int kNumAgeTokens = 10;
inline constexpr int kSexM = 16;
inline constexpr int kSexF = 17;
inline constexpr int kSexU = 18;
inline constexpr int kFirstCodeToken = 19;

enum class Sex { M, F, U };

struct Visit {
  std::vector<std::string> codes;  // unique within the visit
};

struct Demographics {
  int age_years = 0;
  Sex sex = Sex::U;
};

struct PatientRecord {
  std::string patient_id;
  Demographics demographics;
  std::vector<Visit> visits;  // chronological, size >= 2
};

using Cohort = std::vector<PatientRecord>;

// Dense, deterministic code<->id map built over a cohort.
class Vocabulary {
 public:
  Vocabulary() = default;

  // Codes with corpus frequency >= min_count get ids in descending-frequency
  // order, ties broken lexicographically. Everything else maps to [UNK].
  static Vocabulary build(const Cohort& cohort, int min_count);

  // Rebuild from an ordered code list (checkpoint header).
  static Vocabulary from_codes(const std::vector<std::string>& codes);
  const std::vector<std::string>& codes() const { return codes_; }

  int id_of(const std::string& code) const;      // [UNK] when out of vocabulary
  const std::string& code_of(int id) const;      // code tokens only
  std::string token_name(int id) const;          // any token, for labels/debug
  bool contains(const std::string& code) const;

  int size() const { return kFirstCodeToken + static_cast<int>(codes_.size()); }
  int num_codes() const { return static_cast<int>(codes_.size()); }
  bool is_code_token(int id) const { return id >= kFirstCodeToken && id < size(); }

 private:
  std::vector<std::string> codes_;          // index = id - kFirstCodeToken
  std::map<std::string, int> code_to_id_;
};

inline int age_bucket_token(int age_years) {
  int decade = age_years / 10;
  if (decade > 9) decade = 9;
  return kFirstAgeToken + decade;
}

inline int sex_token(Sex s) {
  switch (s) {
    case Sex::M: return kSexM;
    case Sex::F: return kSexF;
    default: return kSexU;
  }
}

// Flattened visit-delimited model input. visit_index runs parallel to ids;
// the demographic prefix is visit 0 and every visit segment ends with [SEP].
struct TokenSequence {
  std::vector<int> ids;
  std::vector<int> visit_index;

  std::size_t size() const { return ids.size(); }
};

enum class RecurrenceStratum { H, L, Zero };

inline const char* stratum_name(RecurrenceStratum s) {
  switch (s) {
    case RecurrenceStratum::H: return "H";
    case RecurrenceStratum::L: return "L";
    default: return "Zero";
  }
}

// JSON-lines ingestion; rejects records that violate the corpus invariants.
Cohort load_jsonl(const std::string& path);
void save_jsonl(const Cohort& cohort, const std::string& path);

// History of visits [0, upto_visit) as tokens:
// [AGE, SEX, codes(v0), SEP, codes(v1), SEP, ...]. When the result would
// exceed max_seq_len, oldest whole visits are dropped first; the demographic
// prefix is always kept.
TokenSequence flatten_history(const PatientRecord& record, int upto_visit,
                              const Vocabulary& vocab, int max_seq_len = 256);

// Every visit included; the scoring-time input.
TokenSequence flatten_full_history(const PatientRecord& record, const Vocabulary& vocab,
                                   int max_seq_len = 256);

// Codes of visit visit_idx in lexicographic order of the code strings,
// followed by [EOS].
std::vector<int> target_visit(const PatientRecord& record, int visit_idx,
                              const Vocabulary& vocab);

// Fraction f of visits [0, visit_idx) containing the code:
// Zero if f == 0, H if f > 0.5, L otherwise.
RecurrenceStratum recurrence_stratum(const PatientRecord& record, int visit_idx,
                                     const std::string& code);

// Keeps only the last min(k, n) visits. k must be >= 2.
PatientRecord truncate_history(const PatientRecord& record, int k);

}  // namespace decode
