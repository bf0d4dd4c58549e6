#include "decode/model.hpp"

#include <cmath>

#include "decode/errors.hpp"
#include "decode/rng.hpp"
#include "json.hpp"

namespace decode {

namespace {

constexpr double kMaskedScore = -1e30;

using ad::Matrix;
using ad::Var;

Var dropout(ModelContext& ctx, Var x) {
  if (!ctx.train_mode || ctx.config.dropout_prob <= 0.0) return x;
  if (ctx.dropout_rng == nullptr)
    throw InvariantError("dropout: train mode requires an rng");
  const double keep = 1.0 - ctx.config.dropout_prob;
  Matrix mask(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < mask.rows(); ++r)
    for (Eigen::Index c = 0; c < mask.cols(); ++c)
      mask(r, c) = ctx.dropout_rng->bernoulli(keep) ? 1.0 / keep : 0.0;
  return cwise_mul_const(x, mask);
}

Var feed_forward(ModelContext& ctx, Var x, const std::string& prefix) {
  Var h = add_bias(matmul(x, ctx.param(prefix + ".ff1")), ctx.param(prefix + ".ff1_b"));
  h = gelu(h);
  return add_bias(matmul(h, ctx.param(prefix + ".ff2")), ctx.param(prefix + ".ff2_b"));
}

Var layer_norm_named(ModelContext& ctx, Var x, const std::string& prefix) {
  return ad::layer_norm(x, ctx.param(prefix + "_g"), ctx.param(prefix + "_b"));
}

// base selects the projection set: "enc0.w", "dec0.w" (self) or "dec0.c"
// (cross); weight names are base + q/k/v/o.
Var multi_head_attention(ModelContext& ctx, Var queries_in, Var keys_in,
                         const std::string& base, const Matrix* additive_mask,
                         AttentionSide side, int layer,
                         const std::vector<int>& query_ids, const std::vector<int>& key_ids) {
  const int n_heads = ctx.config.n_heads;
  const Eigen::Index head_dim = ctx.config.d_model / n_heads;
  Var q = matmul(queries_in, ctx.param(base + "q"));
  Var k = matmul(keys_in, ctx.param(base + "k"));
  Var v = matmul(keys_in, ctx.param(base + "v"));

  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (int h = 0; h < n_heads; ++h) {
    Var qh = slice_cols(q, h * head_dim, head_dim);
    Var kh = slice_cols(k, h * head_dim, head_dim);
    Var vh = slice_cols(v, h * head_dim, head_dim);
    Var scores = scale(matmul_nt(qh, kh), inv_sqrt);
    if (additive_mask != nullptr) scores = add_const(scores, *additive_mask);
    Var attn = softmax_rows(scores);
    if (ctx.capture != nullptr) {
      AttentionRecord rec;
      rec.side = side;
      rec.layer = layer;
      rec.head = h;
      rec.weights = attn.value();
      rec.query_token_ids = query_ids;
      rec.key_token_ids = key_ids;
      ctx.capture->push_back(std::move(rec));
    }
    heads.push_back(matmul(attn, vh));
  }
  Var merged = n_heads == 1 ? heads[0] : concat_cols(heads);
  return matmul(merged, ctx.param(base + "o"));
}

// Trailing-[PAD] length; interior pads are rejected.
int real_length(const std::vector<int>& ids) {
  std::size_t len = ids.size();
  while (len > 0 && ids[len - 1] == kPad) --len;
  for (std::size_t i = 0; i < len; ++i)
    if (ids[i] == kPad) throw ValidationError("encode: interior [PAD] token at position " + std::to_string(i));
  return static_cast<int>(len);
}

void check_ids(const std::vector<int>& ids, int vocab_size, const char* where) {
  for (int id : ids)
    if (id < 0 || id >= vocab_size)
      throw ValidationError(std::string(where) + ": token id " + std::to_string(id) +
                            " outside vocabulary of size " + std::to_string(vocab_size));
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < kFirstCodeToken) throw ValidationError("model config: vocab_size too small");
  if (d_model < 1 || n_heads < 1 || n_encoder_layers < 1 || n_decoder_layers < 1 || d_ff < 1 ||
      max_seq_len < 1)
    throw ValidationError("model config: all dims must be >= 1");
  if (d_model % n_heads != 0)
    throw ValidationError("model config: d_model must be divisible by n_heads");
  if (dropout_prob < 0.0 || dropout_prob >= 1.0)
    throw ValidationError("model config: dropout_prob must be in [0,1)");
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["vocab_size"] = vocab_size;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["n_encoder_layers"] = n_encoder_layers;
  j["n_decoder_layers"] = n_decoder_layers;
  j["d_ff"] = d_ff;
  j["max_seq_len"] = max_seq_len;
  j["dropout_prob"] = dropout_prob;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model config: ") + e.what());
  }
  ModelConfig cfg;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("vocab_size", cfg.vocab_size);
  get("d_model", cfg.d_model);
  get("n_heads", cfg.n_heads);
  get("n_encoder_layers", cfg.n_encoder_layers);
  get("n_decoder_layers", cfg.n_decoder_layers);
  get("d_ff", cfg.d_ff);
  get("max_seq_len", cfg.max_seq_len);
  get("dropout_prob", cfg.dropout_prob);
  cfg.validate();
  return cfg;
}

std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> expected_shapes(
    const ModelConfig& cfg) {
  std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> shapes;
  const Eigen::Index d = cfg.d_model, ff = cfg.d_ff;
  shapes["tok_emb"] = {cfg.vocab_size, d};
  shapes["pos_emb"] = {cfg.max_seq_len, d};
  shapes["visit_emb"] = {cfg.max_seq_len, d};
  auto block = [&](const std::string& prefix, bool cross) {
    for (const char* w : {".wq", ".wk", ".wv", ".wo"}) shapes[prefix + w] = {d, d};
    if (cross)
      for (const char* w : {".cq", ".ck", ".cv", ".co"}) shapes[prefix + w] = {d, d};
    shapes[prefix + ".ff1"] = {d, ff};
    shapes[prefix + ".ff1_b"] = {1, ff};
    shapes[prefix + ".ff2"] = {ff, d};
    shapes[prefix + ".ff2_b"] = {1, d};
    const int n_ln = cross ? 3 : 2;
    for (int i = 1; i <= n_ln; ++i) {
      shapes[prefix + ".ln" + std::to_string(i) + "_g"] = {1, d};
      shapes[prefix + ".ln" + std::to_string(i) + "_b"] = {1, d};
    }
  };
  for (int i = 0; i < cfg.n_encoder_layers; ++i) block("enc" + std::to_string(i), false);
  for (int i = 0; i < cfg.n_decoder_layers; ++i) block("dec" + std::to_string(i), true);
  shapes["enc_ln_g"] = {1, d};
  shapes["enc_ln_b"] = {1, d};
  shapes["dec_ln_g"] = {1, d};
  shapes["dec_ln_b"] = {1, d};
  shapes["risk_w"] = {d, 1};
  shapes["risk_b"] = {1, 1};
  return shapes;
}

ad::ParamStore init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));
  ad::ParamStore params;
  // Deterministic fill order: the sorted shape map.
  for (const auto& [name, shape] : expected_shapes(cfg)) {
    Matrix m(shape.first, shape.second);
    const bool is_ln_gain = name.size() > 2 && name.substr(name.size() - 2) == "_g";
    const bool is_bias = !is_ln_gain && name.back() == 'b' &&
                         (name.find("_b") != std::string::npos);
    const bool is_emb = name.find("emb") != std::string::npos;
    if (is_ln_gain) {
      m.setOnes();
    } else if (is_bias) {
      m.setZero();
    } else if (is_emb || name == "risk_w") {
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.normal(0.0, 0.02);
    } else {
      const double std = std::sqrt(2.0 / static_cast<double>(m.rows() + m.cols()));
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.normal(0.0, std);
    }
    params[name] = std::move(m);
  }
  return params;
}

const char* attention_side_name(AttentionSide side) {
  switch (side) {
    case AttentionSide::EncoderSelf: return "encoder-self";
    case AttentionSide::DecoderSelf: return "decoder-self";
    default: return "cross";
  }
}

ModelContext::ModelContext(ad::Graph& g, const ad::ParamStore& params, const ModelConfig& cfg,
                           bool train, Rng* rng, bool with_grad)
    : graph(g), config(cfg), train_mode(train), dropout_rng(rng) {
  cfg.validate();
  const auto shapes = expected_shapes(cfg);
  for (const auto& [name, shape] : shapes) {
    auto it = params.find(name);
    if (it == params.end()) throw ShapeError("model: missing parameter " + name);
    if (it->second.rows() != shape.first || it->second.cols() != shape.second)
      throw ShapeError("model: parameter " + name + " has shape [" +
                       std::to_string(it->second.rows()) + "x" +
                       std::to_string(it->second.cols()) + "], expected [" +
                       std::to_string(shape.first) + "x" + std::to_string(shape.second) + "]");
    vars_[name] = graph.leaf(it->second, with_grad);
  }
}

Var ModelContext::param(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ShapeError("model: unknown parameter " + name);
  return it->second;
}

ad::GradMap ModelContext::grads() const {
  ad::GradMap out;
  for (const auto& [name, var] : vars_) out[name] = var.grad();
  return out;
}

Encoded encode(ModelContext& ctx, const TokenSequence& tokens) {
  const ModelConfig& cfg = ctx.config;
  if (tokens.ids.size() != tokens.visit_index.size())
    throw ValidationError("encode: ids/visit_index length mismatch");
  if (static_cast<int>(tokens.ids.size()) > cfg.max_seq_len)
    throw ValidationError("encode: sequence length " + std::to_string(tokens.ids.size()) +
                          " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  const int len = real_length(tokens.ids);
  if (len == 0) throw ValidationError("encode: empty sequence");

  std::vector<int> ids(tokens.ids.begin(), tokens.ids.begin() + len);
  check_ids(ids, cfg.vocab_size, "encode");
  std::vector<int> positions(static_cast<std::size_t>(len));
  std::vector<int> visits(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) {
    positions[static_cast<std::size_t>(i)] = i;
    visits[static_cast<std::size_t>(i)] =
        std::min(tokens.visit_index[static_cast<std::size_t>(i)], cfg.max_seq_len - 1);
  }

  Var x = add(add(embedding_lookup(ctx.param("tok_emb"), ids),
                  embedding_lookup(ctx.param("pos_emb"), positions)),
              embedding_lookup(ctx.param("visit_emb"), visits));
  x = dropout(ctx, x);
  for (int layer = 0; layer < cfg.n_encoder_layers; ++layer) {
    const std::string prefix = "enc" + std::to_string(layer);
    Var h = layer_norm_named(ctx, x, prefix + ".ln1");
    Var attn = multi_head_attention(ctx, h, h, prefix + ".w", nullptr,
                                    AttentionSide::EncoderSelf, layer, ids, ids);
    x = add(x, dropout(ctx, attn));
    Var h2 = layer_norm_named(ctx, x, prefix + ".ln2");
    x = add(x, dropout(ctx, feed_forward(ctx, h2, prefix)));
  }
  Var states = ad::layer_norm(x, ctx.param("enc_ln_g"), ctx.param("enc_ln_b"));

  Encoded enc;
  enc.states = states;
  enc.real_len = len;
  enc.token_ids = std::move(ids);
  return enc;
}

ad::Matrix encode_states(const ad::ParamStore& params, const ModelConfig& cfg,
                         const TokenSequence& tokens) {
  ad::Graph graph;
  ModelContext ctx(graph, params, cfg, /*train=*/false, nullptr, /*with_grad=*/false);
  Encoded enc = encode(ctx, tokens);
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(tokens.ids.size()), cfg.d_model);
  out.topRows(enc.real_len) = enc.states.value();
  return out;
}

namespace {

// Decoder stack output [prefix_len x d_model], before the tied projection.
Var decoder_states(ModelContext& ctx, const std::vector<int>& prefix, const Encoded& enc) {
  const ModelConfig& cfg = ctx.config;
  if (prefix.empty() || prefix[0] != kBos)
    throw ValidationError("decode_logits: prefix must begin with [BOS]");
  if (static_cast<int>(prefix.size()) > cfg.max_seq_len)
    throw ValidationError("decode_logits: prefix exceeds max_seq_len");
  check_ids(prefix, cfg.vocab_size, "decode_logits");
  const Eigen::Index t = static_cast<Eigen::Index>(prefix.size());

  std::vector<int> positions(prefix.size());
  for (std::size_t i = 0; i < prefix.size(); ++i) positions[i] = static_cast<int>(i);
  Var x = add(embedding_lookup(ctx.param("tok_emb"), prefix),
              embedding_lookup(ctx.param("pos_emb"), positions));
  x = dropout(ctx, x);

  Matrix causal = Matrix::Zero(t, t);
  for (Eigen::Index r = 0; r < t; ++r)
    for (Eigen::Index c = r + 1; c < t; ++c) causal(r, c) = kMaskedScore;

  for (int layer = 0; layer < cfg.n_decoder_layers; ++layer) {
    const std::string name = "dec" + std::to_string(layer);
    Var h = layer_norm_named(ctx, x, name + ".ln1");
    Var self_attn = multi_head_attention(ctx, h, h, name + ".w", &causal,
                                         AttentionSide::DecoderSelf, layer, prefix, prefix);
    x = add(x, dropout(ctx, self_attn));
    Var h2 = layer_norm_named(ctx, x, name + ".ln2");
    Var cross = multi_head_attention(ctx, h2, enc.states, name + ".c", nullptr,
                                     AttentionSide::Cross, layer, prefix, enc.token_ids);
    x = add(x, dropout(ctx, cross));
    Var h3 = layer_norm_named(ctx, x, name + ".ln3");
    x = add(x, dropout(ctx, feed_forward(ctx, h3, name)));
  }
  return ad::layer_norm(x, ctx.param("dec_ln_g"), ctx.param("dec_ln_b"));
}

}  // namespace

Var decode_logits(ModelContext& ctx, const std::vector<int>& prefix, const Encoded& enc) {
  Var states = decoder_states(ctx, prefix, enc);
  return matmul_nt(states, ctx.param("tok_emb"));  // tied output projection
}

ad::Matrix decode_logits_values(const ad::ParamStore& params, const ModelConfig& cfg,
                                const TokenSequence& history, const std::vector<int>& prefix) {
  ad::Graph graph;
  ModelContext ctx(graph, params, cfg, false, nullptr, false);
  Encoded enc = encode(ctx, history);
  return decode_logits(ctx, prefix, enc).value();
}

Var seq2seq_loss(ModelContext& ctx, const NoisedExample& example) {
  if (example.target.empty()) throw ValidationError("seq2seq_loss: empty target");
  Encoded enc = encode(ctx, example.corrupted);
  std::vector<int> prefix;
  prefix.reserve(example.target.size());
  prefix.push_back(kBos);
  prefix.insert(prefix.end(), example.target.begin(), example.target.end() - 1);
  Var logits = decode_logits(ctx, prefix, enc);
  return ad::cross_entropy(logits, example.target, kPad);
}

double seq2seq_loss_value(const ad::ParamStore& params, const ModelConfig& cfg,
                          const NoisedExample& example) {
  ad::Graph graph;
  ModelContext ctx(graph, params, cfg, false, nullptr, false);
  return seq2seq_loss(ctx, example).value()(0, 0);
}

ad::Var encoder_mlm_loss(ModelContext& ctx, const TokenSequence& corrupted,
                         const std::vector<int>& masked_positions,
                         const std::vector<int>& original_ids) {
  if (masked_positions.empty()) throw ValidationError("encoder_mlm_loss: empty masked set");
  if (masked_positions.size() != original_ids.size())
    throw ValidationError("encoder_mlm_loss: positions/ids length mismatch");
  Encoded enc = encode(ctx, corrupted);
  for (int p : masked_positions)
    if (p < 0 || p >= enc.real_len)
      throw ValidationError("encoder_mlm_loss: masked position out of range");
  Var states = gather_rows(enc.states, masked_positions);
  Var logits = matmul_nt(states, ctx.param("tok_emb"));
  return ad::cross_entropy(logits, original_ids, kPad);
}

Var risk_logit(ModelContext& ctx, const TokenSequence& history) {
  Encoded enc = encode(ctx, history);
  // One decoder step from [BOS]; its hidden state feeds the linear head.
  Var state = decoder_states(ctx, {kBos}, enc);
  return add(matmul(state, ctx.param("risk_w")), ctx.param("risk_b"));
}

double risk_score(const ad::ParamStore& params, const ModelConfig& cfg,
                  const TokenSequence& history) {
  ad::Graph graph;
  ModelContext ctx(graph, params, cfg, false, nullptr, false);
  Var logit = risk_logit(ctx, history);
  return 1.0 / (1.0 + std::exp(-logit.value()(0, 0)));
}

std::vector<AttentionRecord> capture_attention(const ad::ParamStore& params,
                                               const ModelConfig& cfg,
                                               const TokenSequence& history,
                                               const std::vector<int>& target_prefix,
                                               const Vocabulary* vocab) {
  ad::Graph graph;
  ModelContext ctx(graph, params, cfg, false, nullptr, false);
  std::vector<AttentionRecord> records;
  ctx.capture = &records;
  Encoded enc = encode(ctx, history);
  decode_logits(ctx, target_prefix, enc);
  if (vocab != nullptr) {
    for (auto& rec : records) {
      for (int id : rec.query_token_ids) rec.query_labels.push_back(vocab->token_name(id));
      for (int id : rec.key_token_ids) rec.key_labels.push_back(vocab->token_name(id));
    }
  }
  return records;
}

}  // namespace decode
