#include <cmath>

#include "decode/errors.hpp"
#include "decode/model.hpp"
#include "decode/rng.hpp"
#include "decode/synthgen.hpp"
#include "doctest.h"

using namespace decode;
using ad::Matrix;

namespace {

ModelConfig tiny_config(int vocab_size) {
  ModelConfig cfg;
  cfg.vocab_size = vocab_size;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_encoder_layers = 2;
  cfg.n_decoder_layers = 2;
  cfg.d_ff = 24;
  cfg.max_seq_len = 64;
  cfg.dropout_prob = 0.0;
  return cfg;
}

TokenSequence sample_history(Rng& rng, int vocab_size, int n_visits, int codes_per_visit) {
  TokenSequence seq;
  seq.ids = {kFirstAgeToken + 3, kSexF};
  seq.visit_index = {0, 0};
  for (int v = 1; v <= n_visits; ++v) {
    for (int c = 0; c < codes_per_visit; ++c) {
      seq.ids.push_back(kFirstCodeToken +
                        static_cast<int>(rng.uniform_int(vocab_size - kFirstCodeToken)));
      seq.visit_index.push_back(v);
    }
    seq.ids.push_back(kSep);
    seq.visit_index.push_back(v);
  }
  return seq;
}

std::vector<int> sample_prefix(Rng& rng, int vocab_size, int len) {
  std::vector<int> prefix{kBos};
  for (int i = 1; i < len; ++i)
    prefix.push_back(kFirstCodeToken +
                     static_cast<int>(rng.uniform_int(vocab_size - kFirstCodeToken)));
  return prefix;
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("encode shape contract and pad invariance") {
  const auto cfg = tiny_config(40);
  const auto params = init_parameters(cfg, 1);
  Rng rng(2);
  const auto seq = sample_history(rng, cfg.vocab_size, 3, 4);

  const Matrix states = encode_states(params, cfg, seq);
  CHECK(states.rows() == static_cast<Eigen::Index>(seq.ids.size()));
  CHECK(states.cols() == cfg.d_model);

  // Appending [PAD] never changes non-pad outputs, bit-exactly.
  TokenSequence padded = seq;
  for (int i = 0; i < 5; ++i) {
    padded.ids.push_back(kPad);
    padded.visit_index.push_back(padded.visit_index.back());
  }
  const Matrix padded_states = encode_states(params, cfg, padded);
  CHECK(padded_states.rows() == static_cast<Eigen::Index>(padded.ids.size()));
  for (Eigen::Index r = 0; r < states.rows(); ++r)
    for (Eigen::Index c = 0; c < states.cols(); ++c)
      CHECK(states(r, c) == padded_states(r, c));
  // pad rows are zero
  for (Eigen::Index r = states.rows(); r < padded_states.rows(); ++r)
    CHECK(padded_states.row(r).isZero(0.0));

  // permuting two pad tail positions is a no-op by construction
  const Matrix again = encode_states(params, cfg, padded);
  CHECK(again == padded_states);
}

TEST_CASE("encode validates input") {
  const auto cfg = tiny_config(40);
  const auto params = init_parameters(cfg, 1);
  Rng rng(3);
  TokenSequence overlong = sample_history(rng, cfg.vocab_size, 20, 4);
  CHECK(static_cast<int>(overlong.ids.size()) > cfg.max_seq_len);
  CHECK_THROWS_AS(encode_states(params, cfg, overlong), ValidationError);

  TokenSequence bad = sample_history(rng, cfg.vocab_size, 2, 3);
  bad.ids[3] = cfg.vocab_size + 5;
  CHECK_THROWS_AS(encode_states(params, cfg, bad), ValidationError);
}

TEST_CASE("attention rows sum to one and capture counts match") {
  const auto cfg = tiny_config(40);
  const auto params = init_parameters(cfg, 4);
  Rng rng(5);
  const auto history = sample_history(rng, cfg.vocab_size, 3, 4);
  const auto prefix = sample_prefix(rng, cfg.vocab_size, 5);

  const auto records = capture_attention(params, cfg, history, prefix);
  CHECK(records.size() ==
        static_cast<std::size_t>(cfg.n_heads *
                                 (cfg.n_encoder_layers + 2 * cfg.n_decoder_layers)));
  for (const auto& rec : records) {
    for (Eigen::Index r = 0; r < rec.weights.rows(); ++r)
      CHECK(std::abs(rec.weights.row(r).sum() - 1.0) <= 1e-9);
    CHECK(rec.weights.rows() == static_cast<Eigen::Index>(rec.query_token_ids.size()));
    CHECK(rec.weights.cols() == static_cast<Eigen::Index>(rec.key_token_ids.size()));
  }

  // labels align positionally when a vocabulary is provided
  const auto gen = generate_cohort(GenConfig::defaults(5, 6));
  const auto vocab = Vocabulary::build(gen.cohort, 1);
  ModelConfig vocab_cfg = tiny_config(vocab.size());
  const auto vocab_params = init_parameters(vocab_cfg, 7);
  const auto history2 = flatten_history(gen.cohort[0], 1, vocab);
  const auto labeled =
      capture_attention(vocab_params, vocab_cfg, history2, {kBos}, &vocab);
  for (const auto& rec : labeled) {
    REQUIRE(rec.key_labels.size() == rec.key_token_ids.size());
    for (std::size_t i = 0; i < rec.key_labels.size(); ++i)
      CHECK(rec.key_labels[i] == vocab.token_name(rec.key_token_ids[i]));
  }
}

TEST_CASE("decoder causality is bit-exact") {
  const auto cfg = tiny_config(48);
  const auto params = init_parameters(cfg, 8);
  Rng rng(9);
  const auto history = sample_history(rng, cfg.vocab_size, 3, 4);

  for (int trial = 0; trial < 200; ++trial) {
    const int len = 3 + static_cast<int>(rng.uniform_int(6));
    auto prefix = sample_prefix(rng, cfg.vocab_size, len);
    const Matrix base = decode_logits_values(params, cfg, history, prefix);

    const int j = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(len - 1)));
    auto perturbed = prefix;
    perturbed[static_cast<std::size_t>(j)] =
        kFirstCodeToken + static_cast<int>(rng.uniform_int(cfg.vocab_size - kFirstCodeToken));
    const Matrix changed = decode_logits_values(params, cfg, history, perturbed);

    for (int i = 0; i < j; ++i)
      for (Eigen::Index c = 0; c < base.cols(); ++c)
        CHECK(base(i, c) == changed(i, c));
  }
}

TEST_CASE("changing the encoder input can move decoder logits") {
  const auto cfg = tiny_config(48);
  const auto params = init_parameters(cfg, 10);
  Rng rng(11);
  auto history = sample_history(rng, cfg.vocab_size, 3, 4);
  const auto prefix = sample_prefix(rng, cfg.vocab_size, 4);
  const Matrix base = decode_logits_values(params, cfg, history, prefix);
  history.ids[2] = history.ids[2] == kFirstCodeToken ? kFirstCodeToken + 1 : kFirstCodeToken;
  const Matrix changed = decode_logits_values(params, cfg, history, prefix);
  CHECK((base - changed).cwiseAbs().maxCoeff() > 0.0);
  CHECK(base.rows() == static_cast<Eigen::Index>(prefix.size()));
  CHECK(base.cols() == cfg.vocab_size);
}

TEST_CASE("decode_logits requires a BOS-led prefix") {
  const auto cfg = tiny_config(40);
  const auto params = init_parameters(cfg, 12);
  Rng rng(13);
  const auto history = sample_history(rng, cfg.vocab_size, 2, 3);
  CHECK_THROWS_AS(decode_logits_values(params, cfg, history, {kFirstCodeToken}),
                  ValidationError);
  CHECK_THROWS_AS(decode_logits_values(params, cfg, history, {}), ValidationError);
}

TEST_CASE("random-init seq2seq and mlm losses sit near ln V") {
  const auto gen = generate_cohort(GenConfig::defaults(30, 14));
  const auto vocab = Vocabulary::build(gen.cohort, 1);
  ModelConfig cfg = tiny_config(vocab.size());
  const auto params = init_parameters(cfg, 15);

  double total = 0.0;
  int n = 0;
  NoiseParams noise;
  for (int i = 0; i < 10; ++i) {
    Rng rng(100 + i);
    const auto& rec = gen.cohort[static_cast<std::size_t>(i)];
    const int v = static_cast<int>(rec.visits.size()) - 1;
    const auto ex =
        make_pretrain_example(rec, v, NoiseScheme::None, noise, vocab, rng, cfg.max_seq_len);
    total += seq2seq_loss_value(params, cfg, ex);
    ++n;
  }
  const double mean_loss = total / n;
  const double ln_v = std::log(static_cast<double>(cfg.vocab_size));
  CHECK(mean_loss == doctest::Approx(ln_v).epsilon(0.15));

  // encoder-only mlm at random init
  ad::Graph g;
  ModelContext ctx(g, params, cfg, false, nullptr, false);
  const auto seq = flatten_history(gen.cohort[0], 2, vocab);
  TokenSequence corrupted = seq;
  std::vector<int> positions, originals;
  for (std::size_t i = 2; i < corrupted.ids.size(); i += 3) {
    if (corrupted.ids[i] == kSep) continue;
    positions.push_back(static_cast<int>(i));
    originals.push_back(corrupted.ids[i]);
    corrupted.ids[i] = kMask;
  }
  REQUIRE(!positions.empty());
  const double mlm = encoder_mlm_loss(ctx, corrupted, positions, originals).value()(0, 0);
  CHECK(mlm == doctest::Approx(ln_v).epsilon(0.15));

  CHECK_THROWS_AS(encoder_mlm_loss(ctx, seq, {}, {}), ValidationError);
}

TEST_CASE("seq2seq loss is nonnegative and rejects empty targets") {
  const auto gen = generate_cohort(GenConfig::defaults(5, 16));
  const auto vocab = Vocabulary::build(gen.cohort, 1);
  ModelConfig cfg = tiny_config(vocab.size());
  const auto params = init_parameters(cfg, 17);
  Rng rng(18);
  NoiseParams noise;
  const auto ex = make_pretrain_example(gen.cohort[0], 1, NoiseScheme::CodeMask, noise, vocab,
                                        rng, cfg.max_seq_len);
  CHECK(seq2seq_loss_value(params, cfg, ex) >= 0.0);

  NoisedExample empty = ex;
  empty.target.clear();
  ad::Graph g;
  ModelContext ctx(g, params, cfg, false, nullptr, false);
  CHECK_THROWS_AS(seq2seq_loss(ctx, empty), ValidationError);
}

TEST_CASE("risk score is a probability and eval mode is deterministic") {
  ModelConfig cfg = tiny_config(40);
  cfg.dropout_prob = 0.1;  // must not fire in eval mode
  const auto params = init_parameters(cfg, 19);
  Rng rng(20);
  const auto history = sample_history(rng, cfg.vocab_size, 3, 4);
  const double a = risk_score(params, cfg, history);
  const double b = risk_score(params, cfg, history);
  CHECK(a > 0.0);
  CHECK(a < 1.0);
  CHECK(a == b);
}

TEST_CASE("dropout in train mode perturbs the loss") {
  const auto gen = generate_cohort(GenConfig::defaults(5, 21));
  const auto vocab = Vocabulary::build(gen.cohort, 1);
  ModelConfig cfg = tiny_config(vocab.size());
  cfg.dropout_prob = 0.3;
  const auto params = init_parameters(cfg, 22);
  Rng noise_rng(23);
  NoiseParams noise;
  const auto ex = make_pretrain_example(gen.cohort[0], 1, NoiseScheme::None, noise, vocab,
                                        noise_rng, cfg.max_seq_len);

  auto run = [&](std::uint64_t seed) {
    Rng drop(seed);
    ad::Graph g;
    ModelContext ctx(g, params, cfg, true, &drop);
    return seq2seq_loss(ctx, ex).value()(0, 0);
  };
  CHECK(run(1) == run(1));      // same dropout seed, same loss
  CHECK(run(1) != run(2));      // different masks move the loss
  CHECK(run(1) != seq2seq_loss_value(params, cfg, ex));
}

TEST_CASE("full seq2seq gradient check on a small config") {
  const auto gen = generate_cohort(GenConfig::defaults(6, 24));
  const auto vocab = Vocabulary::build(gen.cohort, 1);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.d_model = 12;
  cfg.n_heads = 2;
  cfg.n_encoder_layers = 1;
  cfg.n_decoder_layers = 1;
  cfg.d_ff = 16;
  cfg.max_seq_len = 48;
  cfg.dropout_prob = 0.0;
  ad::ParamStore params = init_parameters(cfg, 25);

  std::vector<NoisedExample> batch;
  NoiseParams noise;
  for (int i = 0; i < 2; ++i) {
    Rng rng(30 + i);
    const auto& rec = gen.cohort[static_cast<std::size_t>(i)];
    batch.push_back(
        make_pretrain_example(rec, 1, NoiseScheme::CodeMask, noise, vocab, rng, cfg.max_seq_len));
  }

  auto loss_fn = [&](const ad::ParamStore& p) {
    ad::Graph g;
    ModelContext ctx(g, p, cfg, false, nullptr, false);
    ad::Var total = seq2seq_loss(ctx, batch[0]);
    for (std::size_t i = 1; i < batch.size(); ++i)
      total = ad::add(total, seq2seq_loss(ctx, batch[i]));
    return ad::scale(total, 1.0 / static_cast<double>(batch.size())).value()(0, 0);
  };
  ad::GradMap analytic;
  {
    ad::Graph g;
    ModelContext ctx(g, params, cfg, false, nullptr, true);
    ad::Var total = seq2seq_loss(ctx, batch[0]);
    for (std::size_t i = 1; i < batch.size(); ++i)
      total = ad::add(total, seq2seq_loss(ctx, batch[i]));
    ad::Var loss = ad::scale(total, 1.0 / static_cast<double>(batch.size()));
    g.backward(loss);
    analytic = ctx.grads();
  }
  const auto report = ad::finite_diff_check(params, loss_fn, analytic, 1e-5, 8, 99);
  CHECK(report.max_rel_err < 1e-6);
}

TEST_SUITE_END();
