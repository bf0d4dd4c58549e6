#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "decode/autodiff.hpp"
#include "decode/corpus.hpp"
#include "decode/noising.hpp"

namespace decode {

class Rng;

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_heads = 4;
  int n_encoder_layers = 2;
  int n_decoder_layers = 2;
  int d_ff = 128;
  int max_seq_len = 256;
  double dropout_prob = 0.1;

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

// Named parameter tensors; shapes are derivable from ModelConfig alone.
ad::ParamStore init_parameters(const ModelConfig& config, std::uint64_t seed);
std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> expected_shapes(
    const ModelConfig& config);

enum class AttentionSide { EncoderSelf, DecoderSelf, Cross };
const char* attention_side_name(AttentionSide side);

struct AttentionRecord {
  AttentionSide side = AttentionSide::EncoderSelf;
  int layer = 0;
  int head = 0;
  ad::Matrix weights;  // rows = query positions, cols = key positions
  std::vector<int> query_token_ids;
  std::vector<int> key_token_ids;
  std::vector<std::string> query_labels;  // filled when a vocabulary is supplied
  std::vector<std::string> key_labels;
};

// Shared graph-side state for one forward pass. Parameters are leafed into
// the graph once; with_grad=false skips backward closures for fast scoring.
class ModelContext {
 public:
  ModelContext(ad::Graph& graph, const ad::ParamStore& params, const ModelConfig& config,
               bool train_mode, Rng* dropout_rng = nullptr, bool with_grad = true);

  ad::Var param(const std::string& name) const;
  ad::GradMap grads() const;  // after backward; zero for unreached tensors

  ad::Graph& graph;
  const ModelConfig& config;
  bool train_mode = false;
  Rng* dropout_rng = nullptr;
  std::vector<AttentionRecord>* capture = nullptr;

 private:
  std::map<std::string, ad::Var> vars_;
};

struct Encoded {
  ad::Var states;  // [real_len x d_model]; trailing [PAD] rows are stripped
  int real_len = 0;
  std::vector<int> token_ids;  // the real (non-pad) tokens
};

// Bidirectional encoder over the history. Input embedding is
// token + position + visit-index.
Encoded encode(ModelContext& ctx, const TokenSequence& tokens);

// Encoder states as a plain [len x d_model] matrix; rows for trailing [PAD]
// positions are zero, so appending padding never changes non-pad outputs.
ad::Matrix encode_states(const ad::ParamStore& params, const ModelConfig& config,
                         const TokenSequence& tokens);

// Causal decoder over the [BOS]-led prefix with cross-attention to the
// encoder states; returns logits [prefix_len x vocab_size] via the tied
// embedding.
ad::Var decode_logits(ModelContext& ctx, const std::vector<int>& prefix, const Encoded& enc);

ad::Matrix decode_logits_values(const ad::ParamStore& params, const ModelConfig& config,
                                const TokenSequence& history, const std::vector<int>& prefix);

// Teacher-forced mean cross-entropy of the target given the corrupted history.
ad::Var seq2seq_loss(ModelContext& ctx, const NoisedExample& example);
double seq2seq_loss_value(const ad::ParamStore& params, const ModelConfig& config,
                          const NoisedExample& example);

// Bidirectional-only comparator objective: cross-entropy of the original ids
// at the masked encoder positions.
ad::Var encoder_mlm_loss(ModelContext& ctx, const TokenSequence& corrupted,
                         const std::vector<int>& masked_positions,
                         const std::vector<int>& original_ids);

// Risk head: one decoder step from [BOS] feeds a linear 1-logit head.
ad::Var risk_logit(ModelContext& ctx, const TokenSequence& history);
double risk_score(const ad::ParamStore& params, const ModelConfig& config,
                  const TokenSequence& history);

// All layers x heads x sides, evaluation mode, with positional token labels.
std::vector<AttentionRecord> capture_attention(const ad::ParamStore& params,
                                               const ModelConfig& config,
                                               const TokenSequence& history,
                                               const std::vector<int>& target_prefix,
                                               const Vocabulary* vocab = nullptr);

}  // namespace decode
