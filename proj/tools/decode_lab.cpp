// decode-lab: synthetic-cohort generation, denoising pretraining, risk
// fine-tuning, evaluation and attention export, one subcommand per stage.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "decode/errors.hpp"
#include "decode/inference.hpp"
#include "decode/metrics.hpp"
#include "decode/model.hpp"
#include "decode/noising.hpp"
#include "decode/rng.hpp"
#include "decode/synthgen.hpp"
#include "decode/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace decode;

namespace {

// ---- sha256 (FIPS 180-4), for manifest checksums ----------------------------

class Sha256 {
 public:
  void update(const unsigned char* data, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i) {
      buffer_[buffer_len_++] = data[i];
      if (buffer_len_ == 64) {
        process_block();
        buffer_len_ = 0;
        total_ += 64;
      }
    }
  }

  std::string hex_digest() {
    const std::uint64_t bits = (total_ + buffer_len_) * 8;
    unsigned char pad = 0x80;
    update(&pad, 1);
    unsigned char zero = 0;
    while (buffer_len_ != 56) update(&zero, 1);
    for (int i = 7; i >= 0; --i) {
      unsigned char b = static_cast<unsigned char>(bits >> (8 * i));
      update(&b, 1);
    }
    char out[65];
    for (int i = 0; i < 8; ++i) std::snprintf(out + 8 * i, 9, "%08x", h_[i]);
    return std::string(out, 64);
  }

 private:
  static std::uint32_t rotr(std::uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

  void process_block() {
    static constexpr std::uint32_t k[64] = {
        0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4,
        0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe,
        0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f,
        0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7,
        0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc,
        0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
        0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116,
        0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
        0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
        0xc67178f2};
    std::uint32_t w[64];
    for (int i = 0; i < 16; ++i) {
      w[i] = (std::uint32_t(buffer_[4 * i]) << 24) | (std::uint32_t(buffer_[4 * i + 1]) << 16) |
             (std::uint32_t(buffer_[4 * i + 2]) << 8) | std::uint32_t(buffer_[4 * i + 3]);
    }
    for (int i = 16; i < 64; ++i) {
      const std::uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
      const std::uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
      w[i] = w[i - 16] + s0 + w[i - 7] + s1;
    }
    std::uint32_t a = h_[0], b = h_[1], c = h_[2], d = h_[3];
    std::uint32_t e = h_[4], f = h_[5], g = h_[6], h = h_[7];
    for (int i = 0; i < 64; ++i) {
      const std::uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
      const std::uint32_t ch = (e & f) ^ (~e & g);
      const std::uint32_t t1 = h + s1 + ch + k[i] + w[i];
      const std::uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
      const std::uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
      const std::uint32_t t2 = s0 + maj;
      h = g;
      g = f;
      f = e;
      e = d + t1;
      d = c;
      c = b;
      b = a;
      a = t1 + t2;
    }
    h_[0] += a;
    h_[1] += b;
    h_[2] += c;
    h_[3] += d;
    h_[4] += e;
    h_[5] += f;
    h_[6] += g;
    h_[7] += h;
  }

  std::uint32_t h_[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                         0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
  unsigned char buffer_[64];
  std::size_t buffer_len_ = 0;
  std::uint64_t total_ = 0;
};

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot hash " + path);
  Sha256 hash;
  char chunk[65536];
  while (in) {
    in.read(chunk, sizeof chunk);
    hash.update(reinterpret_cast<unsigned char*>(chunk), static_cast<std::size_t>(in.gcount()));
  }
  return hash.hex_digest();
}

// ---- manifest ----------------------------------------------------------------

class RunManifest {
 public:
  RunManifest(std::string subcommand, std::string out_dir)
      : out_dir_(std::move(out_dir)), start_(std::chrono::steady_clock::now()) {
    json_["subcommand"] = std::move(subcommand);
    fs::create_directories(out_dir_);
  }

  void set_config(const nlohmann::json& config) { json_["config"] = config; }
  void set_seed(std::uint64_t seed) { json_["seed"] = seed; }
  void add_input(const std::string& key, const std::string& path) {
    json_["inputs"][key] = path;
  }
  void add_output(const std::string& path) { outputs_.push_back(path); }

  void write() {
    nlohmann::json checksums = nlohmann::json::object();
    for (const auto& path : outputs_)
      checksums[fs::path(path).filename().string()] = sha256_file(path);
    json_["outputs"] = checksums;
    json_["duration_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::ofstream out(fs::path(out_dir_) / "manifest.json", std::ios::binary);
    out << json_.dump(2) << "\n";
  }

  std::string path(const std::string& name) const { return (fs::path(out_dir_) / name).string(); }

 private:
  std::string out_dir_;
  nlohmann::json json_;
  std::vector<std::string> outputs_;
  std::chrono::steady_clock::time_point start_;
};

// Writes through a temp file and renames, so partially written artifacts
// never appear under their final name.
template <typename WriteFn>
std::string atomic_write(const std::string& final_path, WriteFn&& write_fn) {
  const std::string tmp = final_path + ".tmp";
  write_fn(tmp);
  fs::rename(tmp, final_path);
  return final_path;
}

// ---- shared option plumbing ----------------------------------------------------

struct CommonOptions {
  std::string config_path;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
};

nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  try {
    return nlohmann::json::parse(std::string((std::istreambuf_iterator<char>(in)),
                                             std::istreambuf_iterator<char>()));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

// Config file layout: {"train": {...}, "model": {...}} or a flat TrainConfig.
TrainConfig train_config_from(const nlohmann::json& j) {
  if (j.contains("train")) return TrainConfig::from_json(j.at("train").dump());
  return TrainConfig::from_json(j.dump());
}

ModelConfig model_config_from(const nlohmann::json& j, int vocab_size) {
  ModelConfig cfg;
  if (j.contains("model")) {
    nlohmann::json m = j.at("model");
    m["vocab_size"] = vocab_size;
    cfg = ModelConfig::from_json(m.dump());
  } else {
    cfg.vocab_size = vocab_size;
    cfg.validate();
  }
  return cfg;
}

std::vector<int> load_labels(const std::string& path, const std::string& rule,
                             const Cohort& cohort, std::string* resolved_rule = nullptr) {
  const auto labels = LabelMap::load_jsonl(path);
  std::string name = rule;
  if (name.empty()) {
    if (labels.by_rule.empty()) throw ValidationError(path + ": no labeled rules");
    name = labels.by_rule.begin()->first;
  }
  if (resolved_rule != nullptr) *resolved_rule = name;
  return labels.aligned(name, cohort);
}

TrackedCodeSets load_tracked(const std::string& path) {
  const auto j = load_json_file(path);
  TrackedCodeSets sets;
  if (j.contains("common")) sets.common = j.at("common").get<std::vector<std::string>>();
  if (j.contains("rare")) sets.rare = j.at("rare").get<std::vector<std::string>>();
  return sets;
}

Cohort maybe_truncate(Cohort cohort, const std::string& history, int k) {
  if (history == "full") return cohort;
  if (history != "last-k") throw ValidationError("--history must be full or last-k");
  for (auto& rec : cohort) rec = truncate_history(rec, k);
  return cohort;
}

EvalReport binary_task_report(const std::vector<double>& scores, const std::vector<int>& labels,
                              const std::string& task, int n_boot, std::uint64_t seed) {
  EvalReport report;
  report.task = task;
  report.n = static_cast<long long>(scores.size());
  long long positives = 0;
  for (int y : labels) positives += y;
  report.prevalence = static_cast<double>(positives) / static_cast<double>(labels.size());

  const double auc = auroc(scores, labels);
  const auto auc_ci = bootstrap_ci(auroc, scores, labels, n_boot, 0.95, seed);
  report.metrics["auroc"] = {auc, auc_ci.low, auc_ci.high};
  const double ap = auprc(scores, labels);
  const auto ap_ci = bootstrap_ci(auprc, scores, labels, n_boot, 0.95, seed + 1);
  report.metrics["auprc"] = {ap, ap_ci.low, ap_ci.high};
  report.operating_points = operating_table(scores, labels);
  return report;
}

void write_report(RunManifest& manifest, const EvalReport& report, const std::string& stem) {
  manifest.add_output(atomic_write(manifest.path(stem + ".json"), [&](const std::string& p) {
    std::ofstream out(p, std::ios::binary);
    out << report.to_json() << "\n";
  }));
  manifest.add_output(atomic_write(manifest.path(stem + ".csv"), [&](const std::string& p) {
    std::ofstream out(p, std::ios::binary);
    out << report.to_csv();
  }));
}

// ---- subcommands ----------------------------------------------------------------

int run_gen_data(const CommonOptions& opt) {
  GenConfig cfg = GenConfig::from_json_file(opt.config_path);
  if (opt.seed) cfg.seed = *opt.seed;
  RunManifest manifest("gen-data", opt.out_dir);
  manifest.set_config(nlohmann::json::parse(cfg.to_json()));
  manifest.set_seed(cfg.seed);
  manifest.add_input("config", opt.config_path);

  const auto gen = generate_cohort(cfg);
  manifest.add_output(atomic_write(manifest.path("cohort.jsonl"),
                                   [&](const std::string& p) { save_jsonl(gen.cohort, p); }));
  manifest.add_output(atomic_write(manifest.path("labels.jsonl"),
                                   [&](const std::string& p) { gen.labels.save_jsonl(p); }));
  manifest.add_output(atomic_write(manifest.path("tracked_codes.json"), [&](const std::string& p) {
    nlohmann::json j{{"common", gen.tracked.common}, {"rare", gen.tracked.rare}};
    std::ofstream out(p, std::ios::binary);
    out << j.dump(2) << "\n";
  }));
  manifest.write();
  return 0;
}

int run_pretrain(const CommonOptions& opt, const std::string& data_path,
                 const std::string& scheme, std::optional<double> mask_rate,
                 std::optional<double> mean_span, std::optional<long long> steps) {
  const auto file_config = opt.config_path.empty() ? nlohmann::json::object()
                                                   : load_json_file(opt.config_path);
  TrainConfig tc = train_config_from(file_config);
  if (opt.seed) tc.seed = *opt.seed;
  if (!scheme.empty()) tc.scheme = scheme_from_string(scheme);
  if (mask_rate) {
    tc.noise.mask_rate = *mask_rate;
    tc.noise.visit_rate = *mask_rate;
  }
  if (mean_span) tc.noise.mean_span = *mean_span;
  if (steps) tc.max_steps = *steps;

  const Cohort cohort = load_jsonl(data_path);
  const auto vocab = Vocabulary::build(cohort, 1);
  const ModelConfig mc = model_config_from(file_config, vocab.size());

  RunManifest manifest("pretrain", opt.out_dir);
  nlohmann::json config_snapshot{{"train", nlohmann::json::parse(tc.to_json())},
                                 {"model", nlohmann::json::parse(mc.to_json())}};
  manifest.set_config(config_snapshot);
  manifest.set_seed(tc.seed);
  manifest.add_input("data", data_path);

  const auto result = pretrain(cohort, vocab, mc, tc);
  manifest.add_output(atomic_write(manifest.path("checkpoint.bin"), [&](const std::string& p) {
    save_checkpoint(p, result.params, mc, vocab.codes());
  }));
  manifest.add_output(atomic_write(manifest.path("trace.csv"),
                                   [&](const std::string& p) { result.trace.save_csv(p); }));
  manifest.write();
  return 0;
}

int run_finetune(const CommonOptions& opt, const std::string& data_path,
                 const std::string& labels_path, const std::string& rule,
                 const std::string& init, const std::string& checkpoint_path,
                 const std::string& history, int k, std::optional<long long> steps) {
  const auto file_config = opt.config_path.empty() ? nlohmann::json::object()
                                                   : load_json_file(opt.config_path);
  TrainConfig tc = train_config_from(file_config);
  tc.objective = Objective::BinaryFinetune;
  if (opt.seed) tc.seed = *opt.seed;
  if (steps) tc.max_steps = *steps;

  Cohort cohort = maybe_truncate(load_jsonl(data_path), history, k);
  std::string rule_name;
  const auto labels = load_labels(labels_path, rule, cohort, &rule_name);

  std::optional<ad::ParamStore> base;
  ModelConfig mc;
  Vocabulary vocab;
  if (init == "checkpoint") {
    if (checkpoint_path.empty()) throw ValidationError("--init checkpoint requires --checkpoint");
    auto ckpt = load_checkpoint(checkpoint_path);
    mc = ckpt.config;
    vocab = ckpt.vocabulary();
    base = std::move(ckpt.params);
  } else if (init == "random") {
    vocab = Vocabulary::build(cohort, 1);
    mc = model_config_from(file_config, vocab.size());
  } else {
    throw ValidationError("--init must be random or checkpoint");
  }

  RunManifest manifest("finetune", opt.out_dir);
  manifest.set_config(nlohmann::json{{"train", nlohmann::json::parse(tc.to_json())},
                                     {"model", nlohmann::json::parse(mc.to_json())},
                                     {"rule", rule_name},
                                     {"history", history},
                                     {"k", k},
                                     {"init", init}});
  manifest.set_seed(tc.seed);
  manifest.add_input("data", data_path);
  manifest.add_input("labels", labels_path);
  if (!checkpoint_path.empty()) manifest.add_input("checkpoint", checkpoint_path);

  const auto result = finetune(cohort, labels, base, vocab, mc, tc);
  manifest.add_output(atomic_write(manifest.path("checkpoint.bin"), [&](const std::string& p) {
    save_checkpoint(p, result.params, mc, vocab.codes());
  }));
  manifest.add_output(atomic_write(manifest.path("trace.csv"),
                                   [&](const std::string& p) { result.trace.save_csv(p); }));
  manifest.write();
  return 0;
}

int run_evaluate_daop(const CommonOptions& opt, const std::string& data_path,
                      const std::string& checkpoint_path, const std::string& codes_path,
                      long long max_patients) {
  const auto ckpt = load_checkpoint(checkpoint_path);
  const auto vocab = ckpt.vocabulary();
  Cohort cohort = load_jsonl(data_path);
  if (max_patients > 0 && static_cast<long long>(cohort.size()) > max_patients)
    cohort.resize(static_cast<std::size_t>(max_patients));
  const auto tracked = load_tracked(codes_path);

  RunManifest manifest("evaluate-daop", opt.out_dir);
  manifest.set_config(nlohmann::json{{"max_patients", max_patients},
                                     {"model", nlohmann::json::parse(ckpt.config.to_json())}});
  manifest.set_seed(opt.seed.value_or(0));
  manifest.add_input("data", data_path);
  manifest.add_input("checkpoint", checkpoint_path);
  manifest.add_input("codes", codes_path);

  const auto model_preds = predict_last_visits(ckpt.params, ckpt.config, vocab, cohort);
  const auto copy_preds = copy_predict_last_visits(cohort);
  EvalReport model_report = daop_report(model_preds, cohort, tracked);
  model_report.task = "daop_model";
  EvalReport copy_report = daop_report(copy_preds, cohort, tracked);
  copy_report.task = "daop_copy";

  // Prevalence-vs-gain correlation over tracked codes (model minus copy).
  {
    std::map<std::string, double> model_cells, copy_cells;
    for (const auto& cell : model_report.strata)
      if (cell.stratum == "all") model_cells[cell.code_set] = cell.value;
    for (const auto& cell : copy_report.strata)
      if (cell.stratum == "all") copy_cells[cell.code_set] = cell.value;
    std::vector<double> prevalence, gain;
    std::vector<std::string> all_tracked = tracked.common;
    all_tracked.insert(all_tracked.end(), tracked.rare.begin(), tracked.rare.end());
    for (const auto& code : all_tracked) {
      if (!model_cells.count(code) || !copy_cells.count(code)) continue;
      long long with = 0;
      for (const auto& rec : cohort) {
        bool has = false;
        for (const auto& visit : rec.visits)
          for (const auto& c : visit.codes) has = has || c == code;
        with += has ? 1 : 0;
      }
      prevalence.push_back(static_cast<double>(with) / static_cast<double>(cohort.size()));
      gain.push_back(model_cells[code] - copy_cells[code]);
    }
    if (prevalence.size() >= 2) {
      try {
        model_report.metrics["pearson_prevalence_gain"] = {pearson_r(prevalence, gain), {}, {}};
      } catch (const UndefinedMetricError&) {
        // constant gain across codes: correlation undefined, omitted
      }
    }
  }

  write_report(manifest, model_report, "report_model");
  write_report(manifest, copy_report, "report_copy");
  manifest.add_output(atomic_write(manifest.path("predictions.jsonl"), [&](const std::string& p) {
    save_predictions_jsonl(model_preds, p);
  }));
  manifest.write();
  return 0;
}

int run_evaluate_task(const CommonOptions& opt, const std::string& scores_path,
                      const std::string& data_path, const std::string& labels_path,
                      const std::string& rule, const std::string& checkpoint_path,
                      const std::string& history, int k, int n_boot) {
  std::vector<double> scores;
  std::vector<int> labels;
  RunManifest manifest("evaluate-task", opt.out_dir);
  manifest.set_seed(opt.seed.value_or(0));

  if (!scores_path.empty()) {
    load_scores_csv(scores_path, scores, labels);
    manifest.add_input("scores", scores_path);
  } else {
    if (checkpoint_path.empty() || data_path.empty() || labels_path.empty())
      throw ValidationError("evaluate-task needs --scores or (--checkpoint, --data, --labels)");
    const auto ckpt = load_checkpoint(checkpoint_path);
    const auto vocab = ckpt.vocabulary();
    Cohort cohort = load_jsonl(data_path);
    labels = load_labels(labels_path, rule, cohort);
    const int truncate_to = history == "last-k" ? k : 0;
    const auto scored = batch_score(ckpt.params, ckpt.config, vocab, cohort, truncate_to);
    scores.reserve(scored.size());
    for (const auto& s : scored) scores.push_back(s.score);
    manifest.add_input("checkpoint", checkpoint_path);
    manifest.add_input("data", data_path);
    manifest.add_input("labels", labels_path);
    manifest.add_output(atomic_write(manifest.path("scores.csv"), [&](const std::string& p) {
      save_scores_csv(scored, labels, p);
    }));
  }
  manifest.set_config(nlohmann::json{{"n_boot", n_boot}, {"history", history}, {"k", k}});

  const auto report =
      binary_task_report(scores, labels, "evaluate-task", n_boot, opt.seed.value_or(0));
  write_report(manifest, report, "report");
  manifest.write();
  return 0;
}

int run_baseline(const CommonOptions& opt, const std::string& kind, const std::string& data_path,
                 const std::string& labels_path, const std::string& rule,
                 const std::string& codes_path, double l2, const std::string& history, int k,
                 int n_boot) {
  RunManifest manifest("baseline", opt.out_dir);
  manifest.set_seed(opt.seed.value_or(0));
  manifest.set_config(nlohmann::json{{"kind", kind}, {"l2", l2}, {"history", history}, {"k", k}});
  manifest.add_input("data", data_path);

  Cohort cohort = maybe_truncate(load_jsonl(data_path), history, k);
  if (kind == "copy") {
    const auto preds = copy_predict_last_visits(cohort);
    manifest.add_output(atomic_write(manifest.path("predictions.jsonl"),
                                     [&](const std::string& p) { save_predictions_jsonl(preds, p); }));
    if (!codes_path.empty()) {
      EvalReport report = daop_report(preds, cohort, load_tracked(codes_path));
      report.task = "daop_copy";
      manifest.add_input("codes", codes_path);
      write_report(manifest, report, "report");
    }
  } else if (kind == "logreg") {
    if (labels_path.empty()) throw ValidationError("baseline logreg requires --labels");
    const auto labels = load_labels(labels_path, rule, cohort);
    const auto vocab = Vocabulary::build(cohort, 1);
    LogRegConfig lr_config;
    lr_config.l2 = l2;
    const auto model = logreg_train(cohort, labels, vocab, lr_config);
    const auto scored = batch_score(model, vocab, cohort);
    std::vector<double> scores;
    scores.reserve(scored.size());
    for (const auto& s : scored) scores.push_back(s.score);
    manifest.add_input("labels", labels_path);
    manifest.add_output(atomic_write(manifest.path("scores.csv"), [&](const std::string& p) {
      save_scores_csv(scored, labels, p);
    }));
    const auto report =
        binary_task_report(scores, labels, "baseline_logreg", n_boot, opt.seed.value_or(0));
    write_report(manifest, report, "report");
  } else {
    throw ValidationError("--kind must be copy or logreg");
  }
  manifest.write();
  return 0;
}

int run_gradcheck(int layers, int heads, int d_model, int d_ff, int batch, double eps,
                  std::uint64_t seed) {
  GenConfig gc = GenConfig::defaults(std::max(8, batch * 2), 24);
  gc.mean_visits = 4.0;
  gc.sd_visits = 1.0;
  gc.mean_codes_per_visit = 3.0;
  gc.sd_codes = 1.0;
  const auto gen = generate_cohort(gc);
  const auto vocab = Vocabulary::build(gen.cohort, 1);

  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.d_model = d_model;
  cfg.n_heads = heads;
  cfg.n_encoder_layers = layers;
  cfg.n_decoder_layers = layers;
  cfg.d_ff = d_ff;
  cfg.max_seq_len = 64;
  cfg.dropout_prob = 0.0;
  ad::ParamStore params = init_parameters(cfg, seed);

  std::vector<NoisedExample> examples;
  NoiseParams noise;
  for (int i = 0; i < batch; ++i) {
    Rng rng(30 + static_cast<std::uint64_t>(i));
    examples.push_back(make_pretrain_example(gen.cohort[static_cast<std::size_t>(i)], 1,
                                             NoiseScheme::CodeMask, noise, vocab, rng,
                                             cfg.max_seq_len));
  }
  auto batch_loss = [&](ModelContext& ctx) {
    ad::Var total = seq2seq_loss(ctx, examples[0]);
    for (std::size_t i = 1; i < examples.size(); ++i)
      total = ad::add(total, seq2seq_loss(ctx, examples[i]));
    return ad::scale(total, 1.0 / static_cast<double>(examples.size()));
  };
  auto loss_fn = [&](const ad::ParamStore& p) {
    ad::Graph g;
    ModelContext ctx(g, p, cfg, false, nullptr, false);
    return batch_loss(ctx).value()(0, 0);
  };
  ad::GradMap analytic;
  {
    ad::Graph g;
    ModelContext ctx(g, params, cfg, false, nullptr, true);
    g.backward(batch_loss(ctx));
    analytic = ctx.grads();
  }
  const auto report = ad::finite_diff_check(params, loss_fn, analytic, eps, 64, seed);
  std::printf(
      "gradcheck: max relative error %.3e at %s[%lld] (eps %.1e, %d layers, %d heads, d_model %d)\n",
      report.max_rel_err, report.worst_param.c_str(),
      static_cast<long long>(report.worst_index), eps, layers, heads, d_model);
  return report.max_rel_err < 1e-6 ? 0 : 4;
}

int run_attention_export(const CommonOptions& opt, const std::string& data_path,
                         const std::string& checkpoint_path, const std::string& patient_id,
                         const std::string& out_file) {
  const auto ckpt = load_checkpoint(checkpoint_path);
  const auto vocab = ckpt.vocabulary();
  const Cohort cohort = load_jsonl(data_path);
  const PatientRecord* record = nullptr;
  for (const auto& rec : cohort)
    if (rec.patient_id == patient_id) record = &rec;
  if (record == nullptr)
    throw ValidationError("patient " + patient_id + " not found in " + data_path);

  const int last = static_cast<int>(record->visits.size()) - 1;
  const auto history = flatten_history(*record, last, vocab, ckpt.config.max_seq_len);
  auto target = target_visit(*record, last, vocab);
  std::vector<int> prefix{kBos};
  prefix.insert(prefix.end(), target.begin(), target.end() - 1);  // teacher-forced gold prefix

  const auto records = capture_attention(ckpt.params, ckpt.config, history, prefix, &vocab);
  nlohmann::json out = nlohmann::json::object();
  out["patient_id"] = patient_id;
  out["target_visit_idx"] = last;
  nlohmann::json jrecords = nlohmann::json::object();
  for (const auto& rec : records) {
    std::vector<std::vector<double>> weights(static_cast<std::size_t>(rec.weights.rows()));
    for (Eigen::Index r = 0; r < rec.weights.rows(); ++r) {
      weights[static_cast<std::size_t>(r)].assign(rec.weights.row(r).begin(),
                                                  rec.weights.row(r).end());
    }
    const std::string key = std::string(attention_side_name(rec.side)) + "/layer" +
                            std::to_string(rec.layer) + "/head" + std::to_string(rec.head);
    jrecords[key] = {{"weights", weights},
                     {"query_labels", rec.query_labels},
                     {"key_labels", rec.key_labels}};
  }
  out["records"] = jrecords;

  const fs::path parent = fs::path(out_file).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  atomic_write(out_file, [&](const std::string& p) {
    std::ofstream f(p, std::ios::binary);
    f << out.dump(2) << "\n";
  });
  std::printf("attention-export: %zu records for %s -> %s\n", records.size(), patient_id.c_str(),
              out_file.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"decode-lab: visit-sequence pretraining and risk prediction workbench"};
  app.require_subcommand(1);

  CommonOptions opt;
  std::string data_path, labels_path, rule, checkpoint_path, scores_path, codes_path;
  std::string scheme, init = "random", kind = "copy", history = "full", patient_id, out_file;
  std::optional<double> mask_rate, mean_span;
  std::optional<long long> steps;
  int k = 5, n_boot = 1000;
  long long max_patients = 0;
  double l2 = 1e-4;
  int layers = 2, heads = 4, d_model = 64, d_ff = 32, batch = 4;
  double eps = 7e-5;
  std::uint64_t gradcheck_seed = 85;

  auto add_common = [&](CLI::App* cmd, bool config_required = false) {
    auto* config_opt = cmd->add_option("--config", opt.config_path, "JSON config file");
    if (config_required) config_opt->required();
    cmd->add_option("--out", opt.out_dir, "output directory");
    cmd->add_option("--seed", opt.seed, "seed override");
  };

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic cohort with planted signal");
  add_common(gen, true);

  auto* pre = app.add_subcommand("pretrain", "denoising seq2seq or encoder-mlm pretraining");
  add_common(pre);
  pre->add_option("--data", data_path, "cohort JSONL")->required();
  pre->add_option("--scheme", scheme, "code|span|visit|permute|none");
  pre->add_option("--mask-rate", mask_rate, "mask/visit selection rate");
  pre->add_option("--mean-span", mean_span, "mean span length for span masking");
  pre->add_option("--steps", steps, "step-count override");

  auto* fine = app.add_subcommand("finetune", "binary risk fine-tuning");
  add_common(fine);
  fine->add_option("--data", data_path, "cohort JSONL")->required();
  fine->add_option("--labels", labels_path, "labels JSONL")->required();
  fine->add_option("--rule", rule, "label rule name (default: first)");
  fine->add_option("--init", init, "random|checkpoint");
  fine->add_option("--checkpoint", checkpoint_path, "base checkpoint for --init checkpoint");
  fine->add_option("--history", history, "full|last-k");
  fine->add_option("--k", k, "visit count for --history last-k");
  fine->add_option("--steps", steps, "step-count override");

  auto* daop = app.add_subcommand("evaluate-daop", "next-visit prediction vs the copy baseline");
  add_common(daop);
  daop->add_option("--data", data_path, "cohort JSONL")->required();
  daop->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  daop->add_option("--codes", codes_path, "tracked common/rare codes JSON")->required();
  daop->add_option("--max-patients", max_patients, "evaluate only the first N patients");

  auto* task = app.add_subcommand("evaluate-task", "binary-task metrics with bootstrap CIs");
  add_common(task);
  task->add_option("--scores", scores_path, "scores CSV (patient_id,score,label)");
  task->add_option("--data", data_path, "cohort JSONL (with --checkpoint)");
  task->add_option("--labels", labels_path, "labels JSONL (with --checkpoint)");
  task->add_option("--rule", rule, "label rule name");
  task->add_option("--checkpoint", checkpoint_path, "model checkpoint");
  task->add_option("--history", history, "full|last-k");
  task->add_option("--k", k, "visit count for --history last-k");
  task->add_option("--n-boot", n_boot, "bootstrap resamples");

  auto* base = app.add_subcommand("baseline", "copy or logistic-regression baseline");
  add_common(base);
  base->add_option("--kind", kind, "copy|logreg")->required();
  base->add_option("--data", data_path, "cohort JSONL")->required();
  base->add_option("--labels", labels_path, "labels JSONL (logreg)");
  base->add_option("--rule", rule, "label rule name");
  base->add_option("--codes", codes_path, "tracked codes JSON (copy report)");
  base->add_option("--l2", l2, "logreg L2 strength");
  base->add_option("--history", history, "full|last-k");
  base->add_option("--k", k, "visit count for --history last-k");
  base->add_option("--n-boot", n_boot, "bootstrap resamples");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the seq2seq loss");
  grad->add_option("--layers", layers, "encoder and decoder layers");
  grad->add_option("--heads", heads, "attention heads");
  grad->add_option("--d-model", d_model, "model width");
  grad->add_option("--d-ff", d_ff, "feed-forward width");
  grad->add_option("--batch", batch, "examples in the checked batch");
  grad->add_option("--eps", eps, "central-difference step");
  grad->add_option("--seed", gradcheck_seed, "parameter init seed");

  auto* attn = app.add_subcommand("attention-export", "dump attention weights for one patient");
  add_common(attn);
  attn->add_option("--data", data_path, "cohort JSONL")->required();
  attn->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  attn->add_option("--patient-id", patient_id, "patient to export")->required();
  attn->add_option("--out-file", out_file, "output JSON path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return run_gen_data(opt);
    if (pre->parsed()) return run_pretrain(opt, data_path, scheme, mask_rate, mean_span, steps);
    if (fine->parsed())
      return run_finetune(opt, data_path, labels_path, rule, init, checkpoint_path, history, k,
                          steps);
    if (daop->parsed())
      return run_evaluate_daop(opt, data_path, checkpoint_path, codes_path, max_patients);
    if (task->parsed())
      return run_evaluate_task(opt, scores_path, data_path, labels_path, rule, checkpoint_path,
                               history, k, n_boot);
    if (base->parsed())
      return run_baseline(opt, kind, data_path, labels_path, rule, codes_path, l2, history, k,
                          n_boot);
    if (grad->parsed())
      return run_gradcheck(layers, heads, d_model, d_ff, batch, eps, gradcheck_seed);
    if (attn->parsed())
      return run_attention_export(opt, data_path, checkpoint_path, patient_id, out_file);
  } catch (const UndefinedMetricError& e) {
    std::cerr << "error (undefined metric): " << e.what() << "\n";
    return 3;
  } catch (const ParseError& e) {
    std::cerr << "error (input): " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error (input): " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error (internal): " << e.what() << "\n";
    return 4;
  }
  return 2;
}
