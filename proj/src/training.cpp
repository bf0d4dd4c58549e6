#include "decode/training.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

#include "decode/errors.hpp"
#include "decode/rng.hpp"
#include "json.hpp"

namespace decode {

namespace {

constexpr char kCheckpointMagic[4] = {'D', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

double scheduled_lr(const TrainConfig& cfg, long long step) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  return cfg.lr;
}

struct Pair {
  std::size_t patient;
  int visit;
};

std::vector<Pair> eligible_pairs(const Cohort& cohort) {
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const int n = static_cast<int>(cohort[i].visits.size());
    for (int v = 1; v < n; ++v) pairs.push_back({i, v});
  }
  return pairs;
}

int count_separators(const TokenSequence& seq) {
  int n = 0;
  for (int id : seq.ids) n += id == kSep ? 1 : 0;
  return n;
}

// The target visit must never be visible to the encoder.
void assert_no_target_leak(const NoisedExample& ex, int visit_idx) {
  if (count_separators(ex.corrupted) > visit_idx)
    throw InvariantError("pretrain: encoder input contains the target visit");
}

}  // namespace

Objective objective_from_string(const std::string& name) {
  if (name == "seq2seq_denoise") return Objective::Seq2SeqDenoise;
  if (name == "encoder_mlm") return Objective::EncoderMlm;
  if (name == "binary_finetune") return Objective::BinaryFinetune;
  throw ValidationError("unknown objective '" + name + "'");
}

const char* objective_name(Objective objective) {
  switch (objective) {
    case Objective::Seq2SeqDenoise: return "seq2seq_denoise";
    case Objective::EncoderMlm: return "encoder_mlm";
    default: return "binary_finetune";
  }
}

void TrainConfig::validate() const {
  if (max_steps < 1) throw ValidationError("train config: max_steps must be >= 1");
  if (lr <= 0.0) throw ValidationError("train config: lr must be > 0");
  if (batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
  if (clip_norm <= 0.0) throw ValidationError("train config: clip_norm must be > 0");
  if (objective == Objective::EncoderMlm && scheme != NoiseScheme::CodeMask &&
      scheme != NoiseScheme::VisitMask)
    throw ValidationError("train config: encoder_mlm requires a masking scheme (code or visit)");
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("train config: ") + e.what());
  }
  TrainConfig cfg;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("batch_size", cfg.batch_size);
  get("max_steps", cfg.max_steps);
  get("lr", cfg.lr);
  get("warmup_steps", cfg.warmup_steps);
  get("clip_norm", cfg.clip_norm);
  get("seed", cfg.seed);
  get("eval_every", cfg.eval_every);
  get("mask_rate", cfg.noise.mask_rate);
  get("mean_span", cfg.noise.mean_span);
  get("visit_rate", cfg.noise.visit_rate);
  if (j.contains("scheme")) cfg.scheme = scheme_from_string(j.at("scheme").get<std::string>());
  if (j.contains("objective"))
    cfg.objective = objective_from_string(j.at("objective").get<std::string>());
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json(text);
}

std::string TrainConfig::to_json() const {
  nlohmann::json j;
  j["batch_size"] = batch_size;
  j["max_steps"] = max_steps;
  j["lr"] = lr;
  j["warmup_steps"] = warmup_steps;
  j["clip_norm"] = clip_norm;
  j["seed"] = seed;
  j["eval_every"] = eval_every;
  j["scheme"] = scheme_name(scheme);
  j["mask_rate"] = noise.mask_rate;
  j["mean_span"] = noise.mean_span;
  j["visit_rate"] = noise.visit_rate;
  j["objective"] = objective_name(objective);
  return j.dump(2);
}

std::string LossTrace::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "step,loss,objective\n";
  for (const auto& row : rows) out << row.step << "," << row.loss << "," << row.objective << "\n";
  return out.str();
}

void LossTrace::save_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path);
  out << to_csv();
}

TrainResult pretrain(const Cohort& cohort, const Vocabulary& vocab,
                     const ModelConfig& model_config, const TrainConfig& train_config) {
  train_config.validate();
  model_config.validate();
  if (train_config.objective == Objective::BinaryFinetune)
    throw ValidationError("pretrain: objective must be seq2seq_denoise or encoder_mlm");
  const auto pairs = eligible_pairs(cohort);
  if (pairs.empty()) throw ValidationError("pretrain: no eligible (patient, visit) pairs");

  TrainResult result;
  result.model_config = model_config;
  result.params = init_parameters(model_config, train_config.seed);
  ad::AdamState adam;
  adam.config.lr = train_config.lr;

  const bool mlm = train_config.objective == Objective::EncoderMlm;
  for (long long step = 0; step < train_config.max_steps; ++step) {
    Rng batch_rng(derive_seed(train_config.seed, 0xBA7C4ULL, static_cast<std::uint64_t>(step)));
    Rng drop_rng(derive_seed(train_config.seed, 0xD50FULL, static_cast<std::uint64_t>(step)));
    ad::Graph graph;
    ModelContext ctx(graph, result.params, model_config, /*train=*/true, &drop_rng);

    std::vector<ad::Var> losses;
    losses.reserve(static_cast<std::size_t>(train_config.batch_size));
    for (int b = 0; b < train_config.batch_size; ++b) {
      const Pair pair = pairs[static_cast<std::size_t>(batch_rng.uniform_int(pairs.size()))];
      Rng ex_rng(derive_seed(train_config.seed, static_cast<std::uint64_t>(step),
                             static_cast<std::uint64_t>(b) + 0x9e37ULL));
      const PatientRecord& rec = cohort[pair.patient];
      if (!mlm) {
        NoisedExample ex = make_pretrain_example(rec, pair.visit, train_config.scheme,
                                                 train_config.noise, vocab, ex_rng,
                                                 model_config.max_seq_len);
        assert_no_target_leak(ex, pair.visit);
        losses.push_back(seq2seq_loss(ctx, ex));
      } else {
        // Masked positions are wherever the scheme wrote [MASK]; redraw when
        // a sample happens to mask nothing.
        const TokenSequence clean =
            flatten_history(rec, pair.visit, vocab, model_config.max_seq_len);
        TokenSequence corrupted;
        std::vector<int> positions, originals;
        for (int attempt = 0; attempt < 100 && positions.empty(); ++attempt) {
          corrupted = apply_scheme(clean, train_config.scheme, train_config.noise, ex_rng);
          for (std::size_t i = 0; i < corrupted.ids.size(); ++i) {
            if (corrupted.ids[i] == kMask && clean.ids[i] != kMask) {
              positions.push_back(static_cast<int>(i));
              originals.push_back(clean.ids[i]);
            }
          }
        }
        if (positions.empty()) continue;  // nothing maskable in this sequence
        losses.push_back(encoder_mlm_loss(ctx, corrupted, positions, originals));
      }
    }
    if (losses.empty()) throw InvariantError("pretrain: empty batch");
    ad::Var total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) total = ad::add(total, losses[i]);
    ad::Var loss = ad::scale(total, 1.0 / static_cast<double>(losses.size()));
    graph.backward(loss);

    ad::GradMap grads = ctx.grads();
    ad::clip_global_norm(grads, train_config.clip_norm);
    ad::adam_step(result.params, grads, adam, scheduled_lr(train_config, step));
    result.trace.rows.push_back({step, loss.value()(0, 0), objective_name(train_config.objective)});
  }
  return result;
}

TrainResult finetune(const Cohort& cohort, const std::vector<int>& labels,
                     const std::optional<ad::ParamStore>& base, const Vocabulary& vocab,
                     const ModelConfig& model_config, const TrainConfig& train_config,
                     const Cohort* val_cohort, const std::vector<int>* val_labels) {
  train_config.validate();
  model_config.validate();
  if (labels.size() != cohort.size()) throw ValidationError("finetune: labels do not cover the cohort");
  if (cohort.empty()) throw ValidationError("finetune: empty cohort");
  long long pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ValidationError("finetune: labels must be 0 or 1");
    pos += y;
  }
  if (pos == 0 || pos == static_cast<long long>(labels.size()))
    throw ValidationError("finetune: single-class label set");

  TrainResult result;
  result.model_config = model_config;
  result.params = base ? *base : init_parameters(model_config, train_config.seed);
  ad::AdamState adam;
  adam.config.lr = train_config.lr;

  for (long long step = 0; step < train_config.max_steps; ++step) {
    Rng batch_rng(derive_seed(train_config.seed, 0xF17EULL, static_cast<std::uint64_t>(step)));
    Rng drop_rng(derive_seed(train_config.seed, 0xD50FULL, static_cast<std::uint64_t>(step)));
    ad::Graph graph;
    ModelContext ctx(graph, result.params, model_config, /*train=*/true, &drop_rng);

    std::vector<ad::Var> losses;
    for (int b = 0; b < train_config.batch_size; ++b) {
      const std::size_t i = static_cast<std::size_t>(batch_rng.uniform_int(cohort.size()));
      const TokenSequence seq =
          flatten_full_history(cohort[i], vocab, model_config.max_seq_len);
      losses.push_back(ad::bce_with_logit(risk_logit(ctx, seq), labels[i]));
    }
    ad::Var total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) total = ad::add(total, losses[i]);
    ad::Var loss = ad::scale(total, 1.0 / static_cast<double>(losses.size()));
    graph.backward(loss);

    ad::GradMap grads = ctx.grads();
    ad::clip_global_norm(grads, train_config.clip_norm);
    ad::adam_step(result.params, grads, adam, scheduled_lr(train_config, step));
    result.trace.rows.push_back({step, loss.value()(0, 0), "binary_finetune"});

    if (train_config.eval_every > 0 && val_cohort != nullptr && val_labels != nullptr &&
        (step + 1) % train_config.eval_every == 0) {
      double val = 0.0;
      for (std::size_t i = 0; i < val_cohort->size(); ++i) {
        ad::Graph vg;
        ModelContext vctx(vg, result.params, model_config, false, nullptr, false);
        const TokenSequence seq =
            flatten_full_history((*val_cohort)[i], vocab, model_config.max_seq_len);
        val += ad::bce_with_logit(risk_logit(vctx, seq), (*val_labels)[i]).value()(0, 0);
      }
      val /= static_cast<double>(val_cohort->size());
      result.trace.rows.push_back({step, val, "val"});
    }
  }
  return result;
}

// ---- checkpoint io ----------------------------------------------------------

namespace {

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
void read_pod(std::ifstream& in, T& v, const std::string& path) {
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw ParseError("checkpoint " + path + ": truncated file");
}

}  // namespace

Vocabulary Checkpoint::vocabulary() const { return Vocabulary::from_codes(codes); }

void save_checkpoint(const std::string& path, const ad::ParamStore& params,
                     const ModelConfig& config, const std::vector<std::string>& codes) {
  config.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path);
  out.write(kCheckpointMagic, 4);
  write_pod(out, kCheckpointVersion);

  nlohmann::json header;
  header["model"] = nlohmann::json::parse(config.to_json());
  header["codes"] = codes;
  const std::string header_text = header.dump();
  write_pod(out, static_cast<std::uint32_t>(header_text.size()));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));

  write_pod(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, m] : params) {
    write_pod(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(out, static_cast<std::uint64_t>(m.rows()));
    write_pod(out, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)  // row-major on disk
      for (Eigen::Index c = 0; c < m.cols(); ++c) write_pod(out, m(r, c));
  }
  if (!out) throw ParseError("checkpoint " + path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw ParseError("checkpoint " + path + ": bad magic");
  std::uint32_t version = 0;
  read_pod(in, version, path);
  if (version != kCheckpointVersion)
    throw ParseError("checkpoint " + path + ": unsupported version " + std::to_string(version));

  std::uint32_t header_len = 0;
  read_pod(in, header_len, path);
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), header_len);
  if (!in) throw ParseError("checkpoint " + path + ": truncated header");

  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(header_text);
    ckpt.config = ModelConfig::from_json(header.at("model").dump());
    ckpt.codes = header.at("codes").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint " + path + ": bad header: " + e.what());
  }

  std::uint32_t n_tensors = 0;
  read_pod(in, n_tensors, path);
  for (std::uint32_t t = 0; t < n_tensors; ++t) {
    std::uint32_t name_len = 0;
    read_pod(in, name_len, path);
    if (name_len > 4096) throw ParseError("checkpoint " + path + ": implausible name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw ParseError("checkpoint " + path + ": truncated tensor name");
    std::uint64_t rows = 0, cols = 0;
    read_pod(in, rows, path);
    read_pod(in, cols, path);
    if (rows > (1ull << 32) || cols > (1ull << 32))
      throw ParseError("checkpoint " + path + ": implausible tensor shape");
    ad::Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) read_pod(in, m(r, c), path);
    ckpt.params[name] = std::move(m);
  }

  // Every tensor must match the shapes the embedded config implies.
  const auto shapes = expected_shapes(ckpt.config);
  for (const auto& [name, shape] : shapes) {
    auto it = ckpt.params.find(name);
    if (it == ckpt.params.end())
      throw InvariantError("checkpoint " + path + ": missing tensor " + name);
    if (it->second.rows() != shape.first || it->second.cols() != shape.second)
      throw InvariantError("checkpoint " + path + ": tensor " + name + " has shape [" +
                           std::to_string(it->second.rows()) + "x" +
                           std::to_string(it->second.cols()) + "] but config implies [" +
                           std::to_string(shape.first) + "x" + std::to_string(shape.second) + "]");
  }
  for (const auto& [name, m] : ckpt.params)
    if (!shapes.count(name))
      throw InvariantError("checkpoint " + path + ": unexpected tensor " + name);
  if (static_cast<int>(ckpt.codes.size()) + kFirstCodeToken != ckpt.config.vocab_size)
    throw InvariantError("checkpoint " + path + ": code list does not match vocab_size");
  return ckpt;
}

}  // namespace decode
