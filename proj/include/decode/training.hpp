#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "decode/corpus.hpp"
#include "decode/model.hpp"
#include "decode/noising.hpp"

namespace decode {

enum class Objective { Seq2SeqDenoise, EncoderMlm, BinaryFinetune };

Objective objective_from_string(const std::string& name);
const char* objective_name(Objective objective);

struct TrainConfig {
  int batch_size = 16;
  long long max_steps = 1000;
  double lr = 3e-4;
  long long warmup_steps = 100;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  long long eval_every = 0;  // 0 disables validation rows
  NoiseScheme scheme = NoiseScheme::VisitMask;
  NoiseParams noise;
  Objective objective = Objective::Seq2SeqDenoise;

  void validate() const;
  static TrainConfig from_json_file(const std::string& path);
  static TrainConfig from_json(const std::string& text);
  std::string to_json() const;
};

struct LossTraceRow {
  long long step = 0;
  double loss = 0.0;
  std::string objective;
};

struct LossTrace {
  std::vector<LossTraceRow> rows;
  std::string to_csv() const;  // step,loss,objective
  void save_csv(const std::string& path) const;
};

struct TrainResult {
  ad::ParamStore params;
  ModelConfig model_config;
  LossTrace trace;
};

// Denoising seq2seq (or encoder-MLM) pretraining: per step, (patient, visit)
// pairs with visit_idx >= 1 are sampled deterministically from the seed,
// noised, and batched. Binary-identical across reruns with the same inputs.
TrainResult pretrain(const Cohort& cohort, const Vocabulary& vocab,
                     const ModelConfig& model_config, const TrainConfig& train_config);

// Binary fine-tuning on full histories, no class rebalancing. base empty
// means random init (the "without pretraining" comparator). labels aligned
// with the cohort. Optional validation set adds objective="val" rows.
TrainResult finetune(const Cohort& cohort, const std::vector<int>& labels,
                     const std::optional<ad::ParamStore>& base, const Vocabulary& vocab,
                     const ModelConfig& model_config, const TrainConfig& train_config,
                     const Cohort* val_cohort = nullptr,
                     const std::vector<int>* val_labels = nullptr);

struct Checkpoint {
  ad::ParamStore params;
  ModelConfig config;
  std::vector<std::string> codes;  // vocabulary code list in id order

  Vocabulary vocabulary() const;
};

// Versioned binary format; save -> load round-trips every tensor bit-exactly.
// Magic/version/truncation problems raise ParseError; shape-vs-config
// mismatches raise InvariantError.
void save_checkpoint(const std::string& path, const ad::ParamStore& params,
                     const ModelConfig& config, const std::vector<std::string>& codes);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace decode
