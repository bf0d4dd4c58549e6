#pragma once

#include <string>
#include <vector>

#include "decode/corpus.hpp"

namespace decode {

class Rng;

enum class NoiseScheme { CodeMask, VisitPermute, SpanMask, VisitMask, None };

NoiseScheme scheme_from_string(const std::string& name);
const char* scheme_name(NoiseScheme scheme);

struct NoiseParams {
  double mask_rate = 0.15;
  double mean_span = 3.0;
  double visit_rate = 0.15;
};

// Corrupted encoder input paired with the untouched next-visit decoder target.
struct NoisedExample {
  TokenSequence corrupted;
  std::vector<int> target;  // next-visit code ids + [EOS]
  NoiseScheme scheme = NoiseScheme::None;
};

// Each code token independently becomes [MASK] with probability rate;
// [SEP] and the demographic prefix are never touched.
TokenSequence code_mask(const TokenSequence& seq, double rate, Rng& rng);

// Contiguous code-token spans (lengths ~ Poisson(mean_span), >= 1, never
// crossing a [SEP]) each collapse to a single [MASK] until ~rate of the code
// tokens are covered.
TokenSequence span_mask(const TokenSequence& seq, double rate, double mean_span, Rng& rng);

// Each visit is selected with probability visit_rate; all code tokens of a
// selected visit become [MASK]. If every visit is selected, the most recent
// visit is left intact.
TokenSequence visit_mask(const TokenSequence& seq, double visit_rate, Rng& rng);

// Visit segments reordered by a uniform permutation; the demographic prefix
// stays in place and intra-visit order is preserved.
TokenSequence visit_permute(const TokenSequence& seq, Rng& rng);

TokenSequence apply_scheme(const TokenSequence& seq, NoiseScheme scheme,
                           const NoiseParams& params, Rng& rng);

// corrupted = scheme(flatten_history(record, visit_idx)); target is always
// the clean target_visit(record, visit_idx).
NoisedExample make_pretrain_example(const PatientRecord& record, int visit_idx,
                                    NoiseScheme scheme, const NoiseParams& params,
                                    const Vocabulary& vocab, Rng& rng,
                                    int max_seq_len = 256);

}  // namespace decode
