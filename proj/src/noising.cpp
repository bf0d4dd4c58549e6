#include "decode/noising.hpp"

#include <algorithm>
#include <cmath>

#include "decode/errors.hpp"
#include "decode/rng.hpp"

namespace decode {

namespace {

bool is_code_position(const TokenSequence& seq, std::size_t i) {
  return seq.visit_index[i] >= 1 && seq.ids[i] != kSep;
}

// [first, last) position ranges of the visit segments (SEP included).
std::vector<std::pair<std::size_t, std::size_t>> visit_segments(const TokenSequence& seq) {
  std::vector<std::pair<std::size_t, std::size_t>> segments;
  std::size_t i = 0;
  while (i < seq.size() && seq.visit_index[i] == 0) ++i;
  while (i < seq.size()) {
    const int v = seq.visit_index[i];
    std::size_t j = i;
    while (j < seq.size() && seq.visit_index[j] == v) ++j;
    segments.emplace_back(i, j);
    i = j;
  }
  return segments;
}

void check_rate(double rate, const char* what) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ValidationError(std::string(what) + ": rate not in [0,1]");
}

}  // namespace

NoiseScheme scheme_from_string(const std::string& name) {
  if (name == "code") return NoiseScheme::CodeMask;
  if (name == "span") return NoiseScheme::SpanMask;
  if (name == "visit") return NoiseScheme::VisitMask;
  if (name == "permute") return NoiseScheme::VisitPermute;
  if (name == "none") return NoiseScheme::None;
  throw ValidationError("unknown noising scheme '" + name + "'");
}

const char* scheme_name(NoiseScheme scheme) {
  switch (scheme) {
    case NoiseScheme::CodeMask: return "code";
    case NoiseScheme::SpanMask: return "span";
    case NoiseScheme::VisitMask: return "visit";
    case NoiseScheme::VisitPermute: return "permute";
    default: return "none";
  }
}

TokenSequence code_mask(const TokenSequence& seq, double rate, Rng& rng) {
  check_rate(rate, "code_mask");
  TokenSequence out = seq;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (is_code_position(out, i) && rng.bernoulli(rate)) out.ids[i] = kMask;
  }
  return out;
}

TokenSequence span_mask(const TokenSequence& seq, double rate, double mean_span, Rng& rng) {
  check_rate(rate, "span_mask");
  if (mean_span < 1.0) throw ValidationError("span_mask: mean_span must be >= 1");

  std::vector<std::size_t> code_positions;
  for (std::size_t i = 0; i < seq.size(); ++i)
    if (is_code_position(seq, i)) code_positions.push_back(i);

  // Stochastic rounding keeps expected coverage at rate * n for any length.
  const double want = rate * static_cast<double>(code_positions.size());
  long long budget = static_cast<long long>(std::floor(want));
  if (rng.bernoulli(want - std::floor(want))) ++budget;
  std::vector<bool> covered(seq.size(), false);
  long long n_covered = 0;
  int attempts = 0;
  const int max_attempts = static_cast<int>(code_positions.size()) * 8 + 64;
  while (n_covered < budget && attempts < max_attempts) {
    ++attempts;
    const std::size_t start =
        code_positions[static_cast<std::size_t>(rng.uniform_int(code_positions.size()))];
    if (covered[start]) continue;
    long long len = std::max<long long>(1, rng.poisson(mean_span));
    len = std::min(len, budget - n_covered);
    // extend forward within the visit, stopping at [SEP] or covered tokens
    for (std::size_t p = start; p < seq.size() && len > 0; ++p) {
      if (!is_code_position(seq, p) || covered[p]) break;
      covered[p] = true;
      ++n_covered;
      --len;
    }
  }

  // Each maximal covered run collapses to a single [MASK].
  TokenSequence out;
  out.ids.reserve(seq.size());
  out.visit_index.reserve(seq.size());
  std::size_t i = 0;
  while (i < seq.size()) {
    if (covered[i]) {
      out.ids.push_back(kMask);
      out.visit_index.push_back(seq.visit_index[i]);
      while (i < seq.size() && covered[i]) ++i;
    } else {
      out.ids.push_back(seq.ids[i]);
      out.visit_index.push_back(seq.visit_index[i]);
      ++i;
    }
  }
  return out;
}

TokenSequence visit_mask(const TokenSequence& seq, double visit_rate, Rng& rng) {
  check_rate(visit_rate, "visit_mask");
  const auto segments = visit_segments(seq);
  std::vector<bool> selected(segments.size());
  bool all = !segments.empty();
  for (std::size_t s = 0; s < segments.size(); ++s) {
    selected[s] = rng.bernoulli(visit_rate);
    all = all && selected[s];
  }
  if (all) selected.back() = false;  // keep at least one intact visit

  TokenSequence out = seq;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    if (!selected[s]) continue;
    for (std::size_t i = segments[s].first; i < segments[s].second; ++i)
      if (out.ids[i] != kSep) out.ids[i] = kMask;
  }
  return out;
}

TokenSequence visit_permute(const TokenSequence& seq, Rng& rng) {
  const auto segments = visit_segments(seq);
  std::vector<std::size_t> order(segments.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  TokenSequence out;
  out.ids.reserve(seq.size());
  out.visit_index.reserve(seq.size());
  std::size_t prefix_end = 0;
  while (prefix_end < seq.size() && seq.visit_index[prefix_end] == 0) ++prefix_end;
  for (std::size_t i = 0; i < prefix_end; ++i) {
    out.ids.push_back(seq.ids[i]);
    out.visit_index.push_back(0);
  }
  int vis = 1;
  for (std::size_t s : order) {
    for (std::size_t i = segments[s].first; i < segments[s].second; ++i) {
      out.ids.push_back(seq.ids[i]);
      out.visit_index.push_back(vis);
    }
    ++vis;
  }
  return out;
}

TokenSequence apply_scheme(const TokenSequence& seq, NoiseScheme scheme,
                           const NoiseParams& params, Rng& rng) {
  switch (scheme) {
    case NoiseScheme::CodeMask: return code_mask(seq, params.mask_rate, rng);
    case NoiseScheme::SpanMask: return span_mask(seq, params.mask_rate, params.mean_span, rng);
    case NoiseScheme::VisitMask: return visit_mask(seq, params.visit_rate, rng);
    case NoiseScheme::VisitPermute: return visit_permute(seq, rng);
    case NoiseScheme::None: return seq;
  }
  throw InvariantError("apply_scheme: unreachable");
}

NoisedExample make_pretrain_example(const PatientRecord& record, int visit_idx,
                                    NoiseScheme scheme, const NoiseParams& params,
                                    const Vocabulary& vocab, Rng& rng, int max_seq_len) {
  NoisedExample ex;
  const TokenSequence clean = flatten_history(record, visit_idx, vocab, max_seq_len);
  ex.corrupted = apply_scheme(clean, scheme, params, rng);
  ex.target = target_visit(record, visit_idx, vocab);
  ex.scheme = scheme;
  return ex;
}

}  // namespace decode
