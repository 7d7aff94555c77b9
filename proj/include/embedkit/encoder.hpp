#pragma once

// Toy transformer bi-encoder: token + learned absolute position embeddings,
// post-norm attention/FFN blocks, CLS-pooled dense head, vocabulary-logit
// sparse head, and the single-layer decoder used for retrieval-oriented
// pretraining.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "embedkit/checkpoint.hpp"
#include "embedkit/errors.hpp"
#include "embedkit/ops.hpp"
#include "embedkit/rng.hpp"
#include "embedkit/sparse.hpp"
#include "embedkit/tensor.hpp"
#include "embedkit/vocab.hpp"

namespace embedkit {

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t layers = 2;
  std::size_t hidden = 64;
  std::size_t intermediate = 256;
  std::size_t heads = 4;
  std::size_t max_seq = 64;
  std::string pooling = "cls";  // cls | max_sparse
  bool lm_head = true;          // required for sparse mode, MLM, and pretraining

  void validate() const {
    if (vocab_size == 0) throw ConfigError("encoder: vocab_size must be set");
    if (hidden == 0 || heads == 0 || hidden % heads != 0) {
      throw ConfigError("encoder: hidden must be a positive multiple of heads");
    }
    if (max_seq < 2) throw ConfigError("encoder: max_seq must be >= 2");
    if (layers == 0) throw ConfigError("encoder: need at least one layer");
    if (pooling != "cls" && pooling != "max_sparse") {
      throw ConfigError("encoder: unknown pooling '" + pooling + "'");
    }
  }
};

struct TokenSeq {
  std::vector<std::size_t> ids;
  std::vector<int> mask;  // 1 = real token, 0 = padding

  std::size_t length() const { return ids.size(); }
};

// [CLS] + lowercased words + [SEP], truncated to max_seq.
inline TokenSeq tokenize(const std::string& text, const Vocab& vocab, std::size_t max_seq) {
  std::vector<std::string> words = split_words(text);
  TokenSeq seq;
  seq.ids.push_back(vocab.cls_id());
  for (const auto& w : words) {
    if (seq.ids.size() + 1 >= max_seq) break;  // leave room for [SEP]
    seq.ids.push_back(vocab.id_of(w));
  }
  seq.ids.push_back(vocab.sep_id());
  seq.mask.assign(seq.ids.size(), 1);
  return seq;
}

// Pads every sequence to the longest one in the batch.
inline std::vector<TokenSeq> pad_batch(std::vector<TokenSeq> batch, std::size_t pad_id) {
  std::size_t longest = 0;
  for (const auto& s : batch) longest = std::max(longest, s.length());
  for (auto& s : batch) {
    while (s.length() < longest) {
      s.ids.push_back(pad_id);
      s.mask.push_back(0);
    }
  }
  return batch;
}

struct MaskSpec {
  double ratio_low = 0.15;
  double ratio_high = 0.30;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(0.0 <= ratio_low && ratio_low <= ratio_high && ratio_high <= 1.0)) {
      throw ConfigError("mask spec: need 0 <= low <= high <= 1");
    }
  }
};

struct MaskResult {
  std::vector<std::size_t> ids;                        // with [MASK] substitutions
  std::vector<std::pair<std::size_t, std::size_t>> labels;  // (position, original id)
  double ratio_drawn = 0.0;
};

// Draws a mask ratio uniformly in [low, high] and replaces floor(r * maskable)
// non-special positions with [MASK]; labels record the originals in position
// order.
inline MaskResult apply_mask(const std::vector<std::size_t>& ids, const MaskSpec& spec,
                             const Vocab& vocab, Rng& rng) {
  spec.validate();
  MaskResult res;
  res.ids = ids;
  res.ratio_drawn = rng.uniform(spec.ratio_low, spec.ratio_high);
  std::vector<std::size_t> maskable;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!vocab.is_special(ids[i])) maskable.push_back(i);
  }
  const auto count =
      static_cast<std::size_t>(std::floor(res.ratio_drawn * static_cast<double>(maskable.size())));
  rng.shuffle(maskable);
  maskable.resize(count);
  std::sort(maskable.begin(), maskable.end());
  for (std::size_t pos : maskable) {
    res.labels.emplace_back(pos, ids[pos]);
    res.ids[pos] = vocab.mask_id();
  }
  return res;
}

inline MaskResult apply_mask(const std::vector<std::size_t>& ids, const MaskSpec& spec,
                             const Vocab& vocab) {
  Rng rng(spec.seed);
  return apply_mask(ids, spec, vocab, rng);
}

namespace detail {

// Additive attention bias: 0 for real columns, -1e9 for padded ones. The
// shift is large enough that softmax assigns padded columns a weight of
// exactly 0.0, which keeps embeddings bit-identical under batch padding.
inline Tensor attention_bias(const std::vector<int>& mask) {
  const std::size_t L = mask.size();
  std::vector<double> b(L * L, 0.0);
  for (std::size_t j = 0; j < L; ++j) {
    if (mask[j]) continue;
    for (std::size_t i = 0; i < L; ++i) b[i * L + j] = -1e9;
  }
  return Tensor::from({L, L}, std::move(b));
}

}  // namespace detail

class EncoderModel {
 public:
  EncoderModel(EncoderConfig cfg, Rng& rng, bool with_decoder = false) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t h = cfg_.hidden, v = cfg_.vocab_size, im = cfg_.intermediate;
    add_param("enc.tok_emb", {v, h}, rng, 0.1);
    add_param("enc.pos_emb", {cfg_.max_seq, h}, rng, 0.1);
    add_ln("enc.emb_ln");
    for (std::size_t l = 0; l < cfg_.layers; ++l) add_block("enc.l" + std::to_string(l), h, im, rng);
    if (cfg_.lm_head) {
      add_param("enc.lm.w", {h, v}, rng, xavier(h, v));
      add_zeros("enc.lm.b", {v});
    }
    if (with_decoder) {
      add_block("dec.l0", h, im, rng);
      add_param("dec.lm.w", {h, v}, rng, xavier(h, v));
      add_zeros("dec.lm.b", {v});
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  bool has_decoder() const { return find("dec.lm.w") != nullptr; }
  bool has_lm_head() const { return cfg_.lm_head; }

  std::vector<std::pair<std::string, Tensor>>& params() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }

  Tensor param(const std::string& name) const {
    const Tensor* t = find(name);
    if (t == nullptr) throw ConfigError("encoder: no parameter named " + name);
    return *t;
  }

  // Full hidden-state matrix [L×hidden] for one (possibly padded) sequence.
  Tensor forward_hidden(const TokenSeq& seq) const {
    const std::size_t L = seq.length();
    if (L > cfg_.max_seq) {
      throw DimensionError("encoder: sequence length " + std::to_string(L) + " exceeds max_seq " +
                           std::to_string(cfg_.max_seq));
    }
    if (L == 0) throw DataError("encoder: empty sequence");
    std::vector<std::size_t> positions(L);
    std::iota(positions.begin(), positions.end(), 0);
    Tensor x = add(gather_rows(param("enc.tok_emb"), seq.ids),
                   gather_rows(param("enc.pos_emb"), positions));
    x = layer_norm(x, param("enc.emb_ln.g"), param("enc.emb_ln.b"));
    const Tensor bias = detail::attention_bias(seq.mask);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      x = block_forward("enc.l" + std::to_string(l), x, bias);
    }
    return x;
  }

  // CLS rows for a batch: [B×hidden].
  Tensor encode_dense(const std::vector<TokenSeq>& batch) const {
    if (batch.empty()) throw DataError("encoder: empty batch");
    std::vector<Tensor> rows;
    rows.reserve(batch.size());
    for (const auto& seq : batch) rows.push_back(slice_rows(forward_hidden(seq), 0, 1));
    return rows.size() == 1 ? rows[0] : concat_rows(rows);
  }

  Tensor lm_logits(const Tensor& hidden) const {
    if (!cfg_.lm_head) throw ConfigError("encoder: model has no language-model head");
    return add_bias(matmul(hidden, param("enc.lm.w")), param("enc.lm.b"));
  }

  // Pooled nonnegative term weights for one sequence: [1×vocab] row of
  // log1p(relu(max over unmasked positions of the vocabulary logits)).
  Tensor sparse_weight_row(const TokenSeq& seq) const {
    Tensor logits = lm_logits(forward_hidden(seq));
    Tensor pooled = max_over_positions(logits, seq.mask);
    return reshape(log1p(relu(pooled)), {1, cfg_.vocab_size});
  }

  // Pooled term-weight matrix for a batch: [B×vocab].
  Tensor sparse_weight_matrix(const std::vector<TokenSeq>& batch) const {
    if (batch.empty()) throw DataError("encoder: empty batch");
    std::vector<Tensor> rows;
    rows.reserve(batch.size());
    for (const auto& seq : batch) rows.push_back(sparse_weight_row(seq));
    return rows.size() == 1 ? rows[0] : concat_rows(rows);
  }

  // Sparse representations with zero-weight terms dropped.
  std::vector<SparseVector> encode_sparse(const std::vector<TokenSeq>& batch) const {
    Tensor w = sparse_weight_matrix(batch);
    std::vector<SparseVector> out(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      for (std::size_t t = 0; t < cfg_.vocab_size; ++t) {
        const double wt = w.at(i, t);
        if (wt > 0.0) out[i].entries.emplace_back(t, wt);
      }
    }
    return out;
  }

  // Decoder pass: embeds the given ids, replaces the position-0 embedding
  // with the provided CLS row, and runs the single decoder block + LM head.
  Tensor decoder_logits(const std::vector<std::size_t>& ids, const std::vector<int>& mask,
                        const Tensor& cls_row) const {
    if (!has_decoder()) throw ConfigError("encoder: model has no decoder");
    const std::size_t L = ids.size();
    if (L > cfg_.max_seq) throw DimensionError("decoder: sequence exceeds max_seq");
    std::vector<std::size_t> positions(L);
    std::iota(positions.begin(), positions.end(), 0);
    Tensor tok = gather_rows(param("enc.tok_emb"), ids);
    Tensor x = L > 1 ? concat_rows(cls_row, slice_rows(tok, 1, L)) : cls_row;
    x = add(x, gather_rows(param("enc.pos_emb"), positions));
    x = layer_norm(x, param("enc.emb_ln.g"), param("enc.emb_ln.b"));
    x = block_forward("dec.l0", x, detail::attention_bias(mask));
    return add_bias(matmul(x, param("dec.lm.w")), param("dec.lm.b"));
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.config.emplace_back("vocab_size", std::to_string(cfg_.vocab_size));
    ckpt.config.emplace_back("layers", std::to_string(cfg_.layers));
    ckpt.config.emplace_back("hidden", std::to_string(cfg_.hidden));
    ckpt.config.emplace_back("intermediate", std::to_string(cfg_.intermediate));
    ckpt.config.emplace_back("heads", std::to_string(cfg_.heads));
    ckpt.config.emplace_back("max_seq", std::to_string(cfg_.max_seq));
    ckpt.config.emplace_back("pooling", cfg_.pooling);
    ckpt.config.emplace_back("lm_head", cfg_.lm_head ? "1" : "0");
    ckpt.config.emplace_back("decoder", has_decoder() ? "1" : "0");
    for (const auto& [name, t] : params_) {
      ckpt.params.push_back(ParamRecord{name, t.shape(), t.values()});
    }
    return ckpt;
  }

  static EncoderModel from_checkpoint(const Checkpoint& ckpt) {
    auto req = [&](const char* key) {
      const std::string* v = ckpt.config_value(key);
      if (v == nullptr) throw DataError(std::string("checkpoint: missing config key ") + key);
      return *v;
    };
    EncoderConfig cfg;
    cfg.vocab_size = std::stoull(req("vocab_size"));
    cfg.layers = std::stoull(req("layers"));
    cfg.hidden = std::stoull(req("hidden"));
    cfg.intermediate = std::stoull(req("intermediate"));
    cfg.heads = std::stoull(req("heads"));
    cfg.max_seq = std::stoull(req("max_seq"));
    cfg.pooling = req("pooling");
    cfg.lm_head = req("lm_head") == "1";
    const bool with_decoder = req("decoder") == "1";
    Rng rng(0);
    EncoderModel model(cfg, rng, with_decoder);
    if (ckpt.params.size() != model.params_.size()) {
      throw DataError("checkpoint: expected " + std::to_string(model.params_.size()) +
                      " parameters, file has " + std::to_string(ckpt.params.size()));
    }
    for (auto& [name, t] : model.params_) {
      const ParamRecord* rec = ckpt.find(name);
      if (rec == nullptr) throw DataError("checkpoint: missing parameter " + name);
      if (rec->shape != t.shape()) throw DimensionError("checkpoint: shape mismatch for " + name);
      t.values() = rec->data;
    }
    return model;
  }

 private:
  static double xavier(std::size_t fan_in, std::size_t fan_out) {
    return std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  }

  void add_param(const std::string& name, std::vector<std::size_t> shape, Rng& rng,
                 double stddev) {
    params_.emplace_back(name, Tensor::randn(std::move(shape), rng, stddev, true));
  }

  void add_zeros(const std::string& name, std::vector<std::size_t> shape) {
    params_.emplace_back(name, Tensor::zeros(std::move(shape), true));
  }

  void add_ones(const std::string& name, std::vector<std::size_t> shape) {
    params_.emplace_back(name, Tensor::filled(std::move(shape), 1.0, true));
  }

  void add_ln(const std::string& prefix) {
    add_ones(prefix + ".g", {cfg_.hidden});
    add_zeros(prefix + ".b", {cfg_.hidden});
  }

  void add_block(const std::string& p, std::size_t h, std::size_t im, Rng& rng) {
    for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"}) {
      add_param(p + w, {h, h}, rng, xavier(h, h));
    }
    for (const char* b : {".attn.bq", ".attn.bk", ".attn.bv", ".attn.bo"}) {
      add_zeros(p + b, {h});
    }
    add_ln(p + ".ln1");
    add_param(p + ".ffn.w1", {h, im}, rng, xavier(h, im));
    add_zeros(p + ".ffn.b1", {im});
    add_param(p + ".ffn.w2", {im, h}, rng, xavier(im, h));
    add_zeros(p + ".ffn.b2", {h});
    add_ln(p + ".ln2");
  }

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return &t;
    return nullptr;
  }

  Tensor block_forward(const std::string& p, const Tensor& x, const Tensor& bias) const {
    const std::size_t h = cfg_.hidden, dh = h / cfg_.heads;
    Tensor q = add_bias(matmul(x, param(p + ".attn.wq")), param(p + ".attn.bq"));
    Tensor k = add_bias(matmul(x, param(p + ".attn.wk")), param(p + ".attn.bk"));
    Tensor v = add_bias(matmul(x, param(p + ".attn.wv")), param(p + ".attn.bv"));
    std::vector<Tensor> heads;
    heads.reserve(cfg_.heads);
    for (std::size_t hd = 0; hd < cfg_.heads; ++hd) {
      Tensor qh = slice_cols(q, hd * dh, (hd + 1) * dh);
      Tensor kh = slice_cols(k, hd * dh, (hd + 1) * dh);
      Tensor vh = slice_cols(v, hd * dh, (hd + 1) * dh);
      Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
      Tensor probs = softmax_rows(add(scores, bias));
      heads.push_back(matmul(probs, vh));
    }
    Tensor ctx = heads[0];
    for (std::size_t hd = 1; hd < heads.size(); ++hd) ctx = concat_cols(ctx, heads[hd]);
    Tensor attn_out = add_bias(matmul(ctx, param(p + ".attn.wo")), param(p + ".attn.bo"));
    Tensor y = layer_norm(add(x, attn_out), param(p + ".ln1.g"), param(p + ".ln1.b"));
    Tensor f = relu(add_bias(matmul(y, param(p + ".ffn.w1")), param(p + ".ffn.b1")));
    f = add_bias(matmul(f, param(p + ".ffn.w2")), param(p + ".ffn.b2"));
    return layer_norm(add(y, f), param(p + ".ln2.g"), param(p + ".ln2.b"));
  }

  EncoderConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

struct RetroMaeOutput {
  Tensor enc_logits;  // [L×V] over the moderately masked input
  std::vector<std::pair<std::size_t, std::size_t>> enc_labels;
  Tensor dec_logits;  // [L×V] over the aggressively masked input
  std::vector<std::pair<std::size_t, std::size_t>> dec_labels;
  Tensor cls;  // [1×hidden] sentence embedding
  double moderate_ratio = 0.0;
  double aggressive_ratio = 0.0;
};

// Masks the sequence twice (moderate for the encoder, aggressive for the
// decoder), runs the encoder on the moderate view, and feeds its CLS row into
// the decoder's position 0 over the aggressive view.
inline RetroMaeOutput retromae_forward(const EncoderModel& model, const TokenSeq& seq,
                                       const MaskSpec& moderate, const MaskSpec& aggressive,
                                       const Vocab& vocab, Rng& rng) {
  if (!model.has_decoder()) throw ConfigError("retromae: model built without decoder");
  RetroMaeOutput out;
  MaskResult mod = apply_mask(seq.ids, moderate, vocab, rng);
  MaskResult agg = apply_mask(seq.ids, aggressive, vocab, rng);
  out.moderate_ratio = mod.ratio_drawn;
  out.aggressive_ratio = agg.ratio_drawn;
  out.enc_labels = mod.labels;
  out.dec_labels = agg.labels;
  TokenSeq enc_in{mod.ids, seq.mask};
  Tensor hidden = model.forward_hidden(enc_in);
  out.cls = slice_rows(hidden, 0, 1);
  out.enc_logits = model.lm_logits(hidden);
  out.dec_logits = model.decoder_logits(agg.ids, seq.mask, out.cls);
  return out;
}

}  // namespace embedkit
