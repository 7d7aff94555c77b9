#pragma once

// Training pipeline: adaptive-moment optimizer, stage configs (file-driven),
// the six stage kinds (masked-autoencoder pretraining and its distillation
// variant, contrastive training, score distillation for dense and sparse
// heads, self-distillation, domain adaptation), resumable training state,
// metrics logging, and checkpoint merging.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "embedkit/checkpoint.hpp"
#include "embedkit/data.hpp"
#include "embedkit/encoder.hpp"
#include "embedkit/errors.hpp"
#include "embedkit/objectives.hpp"
#include "embedkit/ops.hpp"
#include "embedkit/rng.hpp"
#include "embedkit/tensor.hpp"
#include "embedkit/vocab.hpp"

namespace embedkit {

// ---------------------------------------------------------------------------
// optimizer

struct OptimConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    if (learning_rate <= 0.0) throw ConfigError("optimizer: learning_rate must be > 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
      throw ConfigError("optimizer: betas must lie in [0,1)");
    }
    if (epsilon <= 0.0) throw ConfigError("optimizer: epsilon must be > 0");
    if (weight_decay < 0.0) throw ConfigError("optimizer: weight_decay must be >= 0");
  }
};

// Adaptive-moment update with decoupled weight decay:
//   m ← β₁m + (1−β₁)g;  v ← β₂v + (1−β₂)g²
//   θ ← θ − lr·m̂/(√v̂+ε) − lr·wd·θ   with bias-corrected m̂, v̂.
class Adam {
 public:
  Adam(OptimConfig cfg, const std::vector<std::pair<std::string, Tensor>>& params)
      : cfg_(cfg) {
    cfg_.validate();
    for (const auto& [name, t] : params) {
      m_.emplace_back(t.numel(), 0.0);
      v_.emplace_back(t.numel(), 0.0);
    }
  }

  std::size_t t() const { return t_; }
  std::vector<std::vector<double>>& m() { return m_; }
  std::vector<std::vector<double>>& v() { return v_; }
  const std::vector<std::vector<double>>& m() const { return m_; }
  const std::vector<std::vector<double>>& v() const { return v_; }
  void set_t(std::size_t t) { t_ = t; }

  // Applies one update from the accumulated gradients, then clears them.
  void step(std::vector<std::pair<std::string, Tensor>>& params) {
    if (params.size() != m_.size()) {
      throw DimensionError("optimizer: parameter count changed since construction");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& [name, tensor] = params[p];
      const auto& g = tensor.grad();
      auto& theta = tensor.values();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!std::isfinite(g[i])) {
          throw NumericError("optimizer: non-finite gradient in " + name + " at element " +
                             std::to_string(i));
        }
        m_[p][i] = cfg_.beta1 * m_[p][i] + (1.0 - cfg_.beta1) * g[i];
        v_[p][i] = cfg_.beta2 * v_[p][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m_[p][i] / bc1;
        const double vhat = v_[p][i] / bc2;
        theta[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon) +
                    cfg_.learning_rate * cfg_.weight_decay * theta[i];
      }
      tensor.zero_grad();
    }
  }

 private:
  OptimConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// stage configuration

enum class StageKind {
  retromae_pretrain,  // encoder MLM + decoder MLM over twice-masked input
  retromae_distill,   // teacher MLM distribution replaces the encoder MLM target
  contrastive,        // in-batch + hard-negative contrastive loss
  score_distill,      // teacher similarity distributions, dense or sparse head
  self_distill,       // score_distill with student initialized from the teacher
  domain_adapt,       // contrastive mechanics on domain pairs
};

inline StageKind parse_stage_kind(const std::string& s) {
  if (s == "retromae_pretrain") return StageKind::retromae_pretrain;
  if (s == "retromae_distill") return StageKind::retromae_distill;
  if (s == "contrastive") return StageKind::contrastive;
  if (s == "score_distill") return StageKind::score_distill;
  if (s == "self_distill") return StageKind::self_distill;
  if (s == "domain_adapt") return StageKind::domain_adapt;
  throw ConfigError("stage: unknown kind '" + s + "'");
}

inline const char* stage_kind_name(StageKind k) {
  switch (k) {
    case StageKind::retromae_pretrain: return "retromae_pretrain";
    case StageKind::retromae_distill: return "retromae_distill";
    case StageKind::contrastive: return "contrastive";
    case StageKind::score_distill: return "score_distill";
    case StageKind::self_distill: return "self_distill";
    case StageKind::domain_adapt: return "domain_adapt";
  }
  return "?";
}

inline bool stage_needs_teacher(StageKind k) {
  return k == StageKind::retromae_distill || k == StageKind::score_distill ||
         k == StageKind::self_distill;
}

inline bool stage_uses_corpus(StageKind k) {
  return k == StageKind::retromae_pretrain || k == StageKind::retromae_distill;
}

struct StageConfig {
  StageKind kind = StageKind::contrastive;
  // file inputs (resolved by the file-driven runner; library callers pass objects)
  std::string pairs, corpus, vocab, init, teacher;
  std::size_t steps = 100;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  double alpha_sampling = 0.5;
  // encoder geometry for fresh models
  std::size_t layers = 2, hidden = 64, intermediate = 256, heads = 4, max_seq = 64;
  std::string pooling = "cls";
  // loss parameters
  double tau = 0.05, alpha = 1.0, beta = 1.0, gamma = 1.0;
  double tau_kd = 1.0;
  double lambda_q = 0.0, lambda_p = 0.0, sigma_q = 0.0, sigma_p = 0.0;
  double mask_low = 0.15, mask_high = 0.30;
  double dec_mask_low = 0.50, dec_mask_high = 0.70;
  std::string task_instruction;  // empty = queries used verbatim
  OptimConfig optim;

  void set(const std::string& key, const std::string& value) {
    auto num = [&](double& slot) {
      try {
        slot = std::stod(value);
      } catch (const std::exception&) {
        throw ConfigError("stage: key '" + key + "' needs a number, got '" + value + "'");
      }
    };
    auto count = [&](std::size_t& slot) {
      try {
        slot = std::stoull(value);
      } catch (const std::exception&) {
        throw ConfigError("stage: key '" + key + "' needs a count, got '" + value + "'");
      }
    };
    if (key == "kind") kind = parse_stage_kind(value);
    else if (key == "pairs") pairs = value;
    else if (key == "corpus") corpus = value;
    else if (key == "vocab") vocab = value;
    else if (key == "init") init = value;
    else if (key == "teacher") teacher = value;
    else if (key == "steps") count(steps);
    else if (key == "batch_size") count(batch_size);
    else if (key == "seed") {
      std::size_t s = 0;
      count(s);
      seed = s;
    }
    else if (key == "alpha_sampling") num(alpha_sampling);
    else if (key == "layers") count(layers);
    else if (key == "hidden") count(hidden);
    else if (key == "intermediate") count(intermediate);
    else if (key == "heads") count(heads);
    else if (key == "max_seq") count(max_seq);
    else if (key == "pooling") pooling = value;
    else if (key == "tau") num(tau);
    else if (key == "alpha") num(alpha);
    else if (key == "beta") num(beta);
    else if (key == "gamma") num(gamma);
    else if (key == "tau_kd") num(tau_kd);
    else if (key == "lambda_q") num(lambda_q);
    else if (key == "lambda_p") num(lambda_p);
    else if (key == "sigma_q") num(sigma_q);
    else if (key == "sigma_p") num(sigma_p);
    else if (key == "mask_low") num(mask_low);
    else if (key == "mask_high") num(mask_high);
    else if (key == "dec_mask_low") num(dec_mask_low);
    else if (key == "dec_mask_high") num(dec_mask_high);
    else if (key == "task_instruction") task_instruction = value;
    else if (key == "lr" || key == "learning_rate") num(optim.learning_rate);
    else if (key == "beta1") num(optim.beta1);
    else if (key == "beta2") num(optim.beta2);
    else if (key == "epsilon") num(optim.epsilon);
    else if (key == "weight_decay") num(optim.weight_decay);
    else throw ConfigError("stage: unknown config key '" + key + "'");
  }

  // Flat "key = value" text; '#' starts a comment; values may be quoted.
  static StageConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("stage: cannot open config " + path);
    StageConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return std::string();
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("stage: " + path + " line " + std::to_string(lineno) +
                          ": expected 'key = value'");
      }
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
        value = value.substr(1, value.size() - 2);
      }
      try {
        cfg.set(key, value);
      } catch (const ConfigError& e) {
        throw ConfigError(std::string(e.what()) + " (" + path + " line " +
                          std::to_string(lineno) + ")");
      }
    }
    return cfg;
  }

  void validate() const {
    optim.validate();
    if (batch_size < 1) throw ConfigError("stage: batch_size must be >= 1");
    if (tau <= 0.0 || tau_kd <= 0.0) throw ConfigError("stage: temperatures must be > 0");
    MaskSpec{mask_low, mask_high, 0}.validate();
    MaskSpec{dec_mask_low, dec_mask_high, 0}.validate();
    if (stage_needs_teacher(kind) && teacher.empty()) {
      throw ConfigError(std::string("stage: ") + stage_kind_name(kind) +
                        " requires a teacher checkpoint");
    }
    if (kind == StageKind::self_distill && init.empty()) {
      throw ConfigError("stage: self_distill initializes the student from the teacher; "
                        "set init to the teacher checkpoint");
    }
  }
};

// ---------------------------------------------------------------------------
// metrics log

struct MetricsLog {
  std::vector<std::string> columns;  // after the implicit leading "step"
  struct Row {
    std::size_t step;
    std::vector<double> values;
  };
  std::vector<Row> rows;

  void add(std::size_t step, std::vector<double> values) {
    if (values.size() != columns.size()) {
      throw DimensionError("metrics: row width does not match the header");
    }
    rows.push_back({step, std::move(values)});
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("metrics: cannot write " + path);
    out << "step";
    for (const auto& c : columns) out << "," << c;
    out << "\n";
    char buf[64];
    for (const auto& row : rows) {
      out << row.step;
      for (double v : row.values) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << "," << buf;
      }
      out << "\n";
    }
    if (!out) throw IoError("metrics: write failed for " + path);
  }
};

// Wraps corpus passages as records so the sampler can batch them.
inline std::vector<PairRecord> corpus_to_records(const std::vector<CorpusDoc>& docs) {
  std::vector<PairRecord> recs;
  recs.reserve(docs.size());
  for (const auto& d : docs) recs.push_back({d.text, d.text, {}, "corpus"});
  return recs;
}

// ---------------------------------------------------------------------------
// stage trainer

namespace detail {

inline bool same_architecture(const EncoderConfig& a, const EncoderConfig& b) {
  return a.vocab_size == b.vocab_size && a.layers == b.layers && a.hidden == b.hidden &&
         a.intermediate == b.intermediate && a.heads == b.heads && a.max_seq == b.max_seq &&
         a.pooling == b.pooling && a.lm_head == b.lm_head;
}

}  // namespace detail

class StageTrainer {
 public:
  StageTrainer(StageConfig cfg, EncoderModel& model, const Vocab& vocab,
               std::vector<PairRecord> data, const EncoderModel* teacher = nullptr)
      : cfg_(std::move(cfg)),
        model_(model),
        vocab_(vocab),
        teacher_(teacher),
        sampler_(std::move(data), SamplerConfig{cfg_.alpha_sampling, Rng::derive(cfg_.seed, 1)}),
        adam_(cfg_.optim, model.params()) {
    cfg_.validate();
    if (model_.config().vocab_size != vocab_.size()) {
      throw ConfigError("stage: model vocab_size " + std::to_string(model_.config().vocab_size) +
                        " does not match the vocabulary (" + std::to_string(vocab_.size()) + ")");
    }
    if (stage_needs_teacher(cfg_.kind) && teacher_ == nullptr) {
      throw ConfigError(std::string("stage: ") + stage_kind_name(cfg_.kind) +
                        " requires a teacher model");
    }
    if (stage_uses_corpus(cfg_.kind) && !model_.has_decoder()) {
      throw ConfigError("stage: masked-autoencoder stages need a model built with a decoder");
    }
    if (cfg_.kind == StageKind::retromae_distill && !teacher_->has_lm_head()) {
      throw ConfigError("stage: retromae_distill teacher needs a language-model head");
    }
    if (cfg_.kind == StageKind::self_distill &&
        !detail::same_architecture(model_.config(), teacher_->config())) {
      throw ConfigError("stage: self_distill teacher and student architectures differ");
    }
    switch (cfg_.kind) {
      case StageKind::retromae_pretrain:
        metrics_.columns = {"loss", "enc_mlm", "dec_mlm"};
        break;
      case StageKind::retromae_distill:
        metrics_.columns = {"loss", "enc_kd", "dec_mlm"};
        break;
      case StageKind::contrastive:
      case StageKind::domain_adapt:
        metrics_.columns = {"loss"};
        break;
      case StageKind::score_distill:
      case StageKind::self_distill:
        if (sparse_head()) {
          metrics_.columns = {"loss", "kd", "flops_q", "flops_p", "norm_q", "norm_p", "candidates"};
        } else {
          metrics_.columns = {"loss", "kd", "candidates"};
        }
        break;
    }
  }

  std::size_t step() const { return step_; }
  const MetricsLog& metrics() const { return metrics_; }
  const StageConfig& config() const { return cfg_; }

  bool sparse_head() const { return model_.config().pooling == "max_sparse"; }

  double train_step() {
    const auto batch = sampler_.next_batch(cfg_.batch_size);
    Rng rng(Rng::derive(cfg_.seed, 2, step_));
    std::vector<double> row;
    switch (cfg_.kind) {
      case StageKind::retromae_pretrain:
      case StageKind::retromae_distill:
        row = step_retromae(batch, rng);
        break;
      case StageKind::contrastive:
      case StageKind::domain_adapt:
        row = step_contrastive(batch);
        break;
      case StageKind::score_distill:
      case StageKind::self_distill:
        row = step_score_distill(batch, rng);
        break;
    }
    ++step_;
    metrics_.add(step_, row);
    return row[0];
  }

  // Runs the remaining steps up to the configured total.
  void run() {
    while (step_ < cfg_.steps) train_step();
  }

  // Training state beyond the model parameters: optimizer moments, step
  // counter, and sampler position, stored in the checkpoint container format.
  void save_state(const std::string& path) const {
    Checkpoint st;
    st.config.emplace_back("step", std::to_string(step_));
    st.config.emplace_back("adam_t", std::to_string(adam_.t()));
    const auto& ss = sampler_.state();
    st.config.emplace_back("sampler_batches", std::to_string(ss.batches_drawn));
    std::string items;
    for (std::size_t i = 0; i < ss.items_drawn.size(); ++i) {
      if (i) items += " ";
      items += std::to_string(ss.items_drawn[i]);
    }
    st.config.emplace_back("sampler_items", items);
    const auto& params = model_.params();
    for (std::size_t p = 0; p < params.size(); ++p) {
      st.params.push_back({"m." + params[p].first, params[p].second.shape(), adam_.m()[p]});
      st.params.push_back({"v." + params[p].first, params[p].second.shape(), adam_.v()[p]});
    }
    save_checkpoint(path, st);
  }

  void load_state(const std::string& path) {
    const Checkpoint st = load_checkpoint(path);
    auto req = [&](const char* key) {
      const std::string* v = st.config_value(key);
      if (v == nullptr) throw DataError(std::string("state: missing key ") + key);
      return *v;
    };
    step_ = std::stoull(req("step"));
    adam_.set_t(std::stoull(req("adam_t")));
    PairSampler::State ss;
    ss.batches_drawn = std::stoull(req("sampler_batches"));
    std::istringstream items(req("sampler_items"));
    std::size_t n;
    while (items >> n) ss.items_drawn.push_back(n);
    sampler_.restore(std::move(ss));
    const auto& params = model_.params();
    for (std::size_t p = 0; p < params.size(); ++p) {
      const ParamRecord* m = st.find("m." + params[p].first);
      const ParamRecord* v = st.find("v." + params[p].first);
      if (m == nullptr || v == nullptr || m->data.size() != params[p].second.numel()) {
        throw DataError("state: moments for " + params[p].first + " missing or misshapen");
      }
      adam_.m()[p] = m->data;
      adam_.v()[p] = v->data;
    }
  }

 private:
  TokenSeq tokenize_query(const std::string& q) const {
    const std::string text =
        cfg_.task_instruction.empty() ? q : format_instruction_query(cfg_.task_instruction, q);
    return tokenize(text, vocab_, model_.config().max_seq);
  }

  TokenSeq tokenize_text(const std::string& t) const {
    return tokenize(t, vocab_, model_.config().max_seq);
  }

  std::vector<double> step_contrastive(const std::vector<PairRecord>& batch) {
    std::vector<TokenSeq> qseqs, pseqs;
    for (const auto& rec : batch) {
      qseqs.push_back(tokenize_query(rec.query));
      pseqs.push_back(tokenize_text(rec.positive));
    }
    GradTape tape;
    ContrastiveBatch cb;
    cb.queries = model_.encode_dense(qseqs);
    cb.positives = model_.encode_dense(pseqs);
    for (const auto& rec : batch) {
      if (rec.negatives.empty()) {
        cb.negatives.emplace_back();
      } else {
        std::vector<TokenSeq> nseqs;
        for (const auto& n : rec.negatives) nseqs.push_back(tokenize_text(n));
        cb.negatives.push_back(model_.encode_dense(nseqs));
      }
    }
    const ContrastiveConfig cc{cfg_.tau, cfg_.alpha, cfg_.beta, cfg_.gamma};
    Tensor loss = contrastive_loss(cb, cc);
    backward(loss);
    adam_.step(model_.params());
    return {loss.item()};
  }

  std::vector<double> step_score_distill(const std::vector<PairRecord>& batch, Rng&) {
    const std::size_t n = batch.size();
    std::vector<TokenSeq> qseqs, pseqs, nseqs;
    std::vector<std::pair<std::size_t, std::size_t>> neg_range(n);  // [start,end) into nseqs
    for (std::size_t i = 0; i < n; ++i) {
      qseqs.push_back(tokenize_query(batch[i].query));
      pseqs.push_back(tokenize_text(batch[i].positive));
      neg_range[i].first = nseqs.size();
      for (const auto& neg : batch[i].negatives) nseqs.push_back(tokenize_text(neg));
      neg_range[i].second = nseqs.size();
    }

    // Candidate order per query: own positive, own hard negatives, then the
    // other in-batch positives in batch order. Teacher and student build the
    // same list, which keeps the score vectors aligned by construction.
    auto candidate_rows = [&](std::size_t i) {
      std::vector<std::pair<bool, std::size_t>> rows;  // (from negatives?, row)
      rows.push_back({false, i});
      for (std::size_t r = neg_range[i].first; r < neg_range[i].second; ++r) rows.push_back({true, r});
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i) rows.push_back({false, j});
      }
      return rows;
    };

    // teacher scores, computed outside the gradient tape
    std::vector<std::vector<double>> teacher_scores(n);
    {
      Tensor tq = teacher_->encode_dense(qseqs);
      Tensor tp = teacher_->encode_dense(pseqs);
      Tensor tn = nseqs.empty() ? Tensor() : teacher_->encode_dense(nseqs);
      for (std::size_t i = 0; i < n; ++i) {
        for (const auto& [from_neg, r] : candidate_rows(i)) {
          teacher_scores[i].push_back(detail::row_cosine(tq, i, from_neg ? tn : tp, r));
        }
      }
    }

    GradTape tape;
    std::vector<Tensor> student_scores;
    Tensor fq, fp, nq, np;
    if (sparse_head()) {
      Tensor wq = model_.sparse_weight_matrix(qseqs);
      Tensor wp = model_.sparse_weight_matrix(pseqs);
      Tensor wn = nseqs.empty() ? Tensor() : model_.sparse_weight_matrix(nseqs);
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<Tensor> cand;
        for (const auto& [from_neg, r] : candidate_rows(i)) {
          cand.push_back(slice_rows(from_neg ? wn : wp, r, r + 1));
        }
        Tensor cmat = cand.size() == 1 ? cand[0] : concat_rows(cand);
        student_scores.push_back(
            reshape(matmul(slice_rows(wq, i, i + 1), transpose(cmat)), {cand.size()}));
      }
      Tensor passages = wn.defined() ? concat_rows(wp, wn) : wp;
      fq = flops_loss(wq);
      fp = flops_loss(passages);
      nq = norm_loss_batch(wq);
      np = norm_loss_batch(passages);
    } else {
      Tensor sq = model_.encode_dense(qseqs);
      Tensor sp = model_.encode_dense(pseqs);
      Tensor sn = nseqs.empty() ? Tensor() : model_.encode_dense(nseqs);
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<Tensor> cand;
        for (const auto& [from_neg, r] : candidate_rows(i)) {
          cand.push_back(slice_rows(from_neg ? sn : sp, r, r + 1));
        }
        Tensor cmat = cand.size() == 1 ? cand[0] : concat_rows(cand);
        student_scores.push_back(
            reshape(cosine_matrix(slice_rows(sq, i, i + 1), cmat, 1.0), {cand.size()}));
      }
    }

    const DistillConfig dc{cfg_.tau_kd, true};
    Tensor kd = kd_loss(student_scores, teacher_scores, dc);
    double mean_candidates = 0.0;
    for (const auto& t : teacher_scores) mean_candidates += static_cast<double>(t.size());
    mean_candidates /= static_cast<double>(n);

    if (sparse_head()) {
      const SparseLossConfig sc{cfg_.lambda_q, cfg_.lambda_p, cfg_.sigma_q, cfg_.sigma_p};
      Tensor loss = sparse_total_loss(kd, fq, fp, nq, np, sc);
      backward(loss);
      adam_.step(model_.params());
      return {loss.item(), kd.item(), fq.item(), fp.item(), nq.item(), np.item(),
              mean_candidates};
    }
    Tensor loss = kd;
    backward(loss);
    adam_.step(model_.params());
    return {loss.item(), kd.item(), mean_candidates};
  }

  std::vector<double> step_retromae(const std::vector<PairRecord>& batch, Rng& rng) {
    const bool distill = cfg_.kind == StageKind::retromae_distill;
    struct MaskedSeq {
      TokenSeq seq;
      MaskResult moderate, aggressive;
    };
    std::vector<MaskedSeq> ms;
    for (const auto& rec : batch) {
      MaskedSeq m;
      m.seq = tokenize_text(rec.query);
      m.moderate = apply_mask(m.seq.ids, MaskSpec{cfg_.mask_low, cfg_.mask_high, 0}, vocab_, rng);
      m.aggressive =
          apply_mask(m.seq.ids, MaskSpec{cfg_.dec_mask_low, cfg_.dec_mask_high, 0}, vocab_, rng);
      ms.push_back(std::move(m));
    }

    // teacher token distributions at the masked positions, outside the tape
    std::vector<std::vector<std::vector<double>>> teacher_rows(ms.size());
    if (distill) {
      for (std::size_t s = 0; s < ms.size(); ++s) {
        if (ms[s].moderate.labels.empty()) continue;
        Tensor logits =
            teacher_->lm_logits(teacher_->forward_hidden(TokenSeq{ms[s].moderate.ids, ms[s].seq.mask}));
        for (const auto& [pos, orig] : ms[s].moderate.labels) {
          teacher_rows[s].push_back(slice_rows(logits, pos, pos + 1).values());
        }
      }
    }

    GradTape tape;
    std::vector<Tensor> losses;
    double enc_sum = 0.0, dec_sum = 0.0;
    std::size_t enc_terms = 0, dec_terms = 0;
    for (std::size_t s = 0; s < ms.size(); ++s) {
      const auto& m = ms[s];
      Tensor hidden = model_.forward_hidden(TokenSeq{m.moderate.ids, m.seq.mask});
      if (!m.moderate.labels.empty()) {
        Tensor enc_logits = model_.lm_logits(hidden);
        Tensor enc_term;
        if (distill) {
          std::vector<Tensor> student_rows;
          for (const auto& [pos, orig] : m.moderate.labels) {
            student_rows.push_back(
                reshape(slice_rows(enc_logits, pos, pos + 1), {model_.config().vocab_size}));
          }
          enc_term = kd_loss(student_rows, teacher_rows[s], DistillConfig{1.0, true});
        } else {
          enc_term = mlm_loss(enc_logits, m.moderate.labels);
        }
        losses.push_back(enc_term);
        enc_sum += enc_term.item();
        ++enc_terms;
      }
      if (!m.aggressive.labels.empty()) {
        Tensor cls = slice_rows(hidden, 0, 1);
        Tensor dec_logits = model_.decoder_logits(m.aggressive.ids, m.seq.mask, cls);
        Tensor dec_term = mlm_loss(dec_logits, m.aggressive.labels);
        losses.push_back(dec_term);
        dec_sum += dec_term.item();
        ++dec_terms;
      }
    }
    if (losses.empty()) {
      throw DataError("stage: batch produced no masked positions; texts are too short");
    }
    Tensor total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    Tensor loss = scale(total, 1.0 / static_cast<double>(ms.size()));
    backward(loss);
    adam_.step(model_.params());
    return {loss.item(), enc_terms ? enc_sum / static_cast<double>(enc_terms) : 0.0,
            dec_terms ? dec_sum / static_cast<double>(dec_terms) : 0.0};
  }

  StageConfig cfg_;
  EncoderModel& model_;
  const Vocab& vocab_;
  const EncoderModel* teacher_;
  PairSampler sampler_;
  Adam adam_;
  MetricsLog metrics_;
  std::size_t step_ = 0;
};

// ---------------------------------------------------------------------------
// model merging

// Elementwise weighted sum of aligned checkpoints. Weights must be
// nonnegative and sum to 1; the merged config comes from the first entry.
// A weight of exactly 1 copies that checkpoint's bytes untouched.
inline Checkpoint merge_models(const std::vector<std::pair<Checkpoint, double>>& spec) {
  if (spec.empty()) throw ConfigError("merge: no checkpoints given");
  double total = 0.0;
  for (const auto& [ckpt, w] : spec) {
    if (w < 0.0 || !std::isfinite(w)) throw ConfigError("merge: weights must be finite and >= 0");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("merge: weights sum to " + std::to_string(total) + ", expected 1");
  }
  const Checkpoint& ref = spec[0].first;
  std::vector<std::string> offenders;
  for (std::size_t k = 1; k < spec.size(); ++k) {
    const auto& other = spec[k].first;
    if (other.params.size() != ref.params.size()) {
      offenders.push_back("checkpoint " + std::to_string(k) + " has " +
                          std::to_string(other.params.size()) + " params, expected " +
                          std::to_string(ref.params.size()));
      continue;
    }
    for (std::size_t p = 0; p < ref.params.size(); ++p) {
      if (other.params[p].name != ref.params[p].name ||
          other.params[p].shape != ref.params[p].shape) {
        offenders.push_back(ref.params[p].name + " vs " + other.params[p].name +
                            " (checkpoint " + std::to_string(k) + ")");
      }
    }
  }
  if (!offenders.empty()) {
    std::string msg = "merge: mismatched parameters:";
    for (const auto& o : offenders) msg += "\n  " + o;
    throw DataError(msg);
  }

  Checkpoint out;
  out.config = ref.config;
  for (std::size_t p = 0; p < ref.params.size(); ++p) {
    ParamRecord rec;
    rec.name = ref.params[p].name;
    rec.shape = ref.params[p].shape;
    std::size_t first = spec.size();
    for (std::size_t k = 0; k < spec.size(); ++k) {
      if (spec[k].second == 0.0) continue;  // zero-weight terms never touch the sum
      const auto& src = spec[k].first.params[p].data;
      if (first == spec.size()) {
        first = k;
        rec.data = src;
        if (spec[k].second != 1.0) {
          for (double& x : rec.data) x *= spec[k].second;
        }
      } else {
        for (std::size_t i = 0; i < rec.data.size(); ++i) rec.data[i] += spec[k].second * src[i];
      }
    }
    out.params.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// file-driven stage runner

struct StageArtifacts {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t steps_run = 0;
};

// Loads every input named by the config, trains, and writes the checkpoint,
// its ".state" sidecar, and the metrics CSV. With resume=true the model and
// state are reloaded from a previous run's outputs and training continues to
// the configured step count.
inline StageArtifacts run_stage_files(const StageConfig& cfg, const std::string& out_checkpoint,
                                      const std::string& metrics_csv, bool resume = false) {
  cfg.validate();
  if (cfg.vocab.empty()) throw ConfigError("stage: vocab file is required");
  const Vocab vocab = Vocab::load(cfg.vocab);

  std::vector<PairRecord> data;
  if (stage_uses_corpus(cfg.kind)) {
    if (cfg.corpus.empty()) {
      throw ConfigError(std::string("stage: ") + stage_kind_name(cfg.kind) +
                        " requires a corpus file");
    }
    data = corpus_to_records(load_corpus(cfg.corpus));
  } else {
    if (cfg.pairs.empty()) {
      throw ConfigError(std::string("stage: ") + stage_kind_name(cfg.kind) +
                        " requires a pairs file");
    }
    data = load_pairs(cfg.pairs);
  }

  std::unique_ptr<EncoderModel> teacher;
  if (!cfg.teacher.empty()) {
    teacher = std::make_unique<EncoderModel>(EncoderModel::from_checkpoint(load_checkpoint(cfg.teacher)));
  }

  std::unique_ptr<EncoderModel> model;
  if (resume) {
    model = std::make_unique<EncoderModel>(
        EncoderModel::from_checkpoint(load_checkpoint(out_checkpoint)));
  } else if (!cfg.init.empty()) {
    model =
        std::make_unique<EncoderModel>(EncoderModel::from_checkpoint(load_checkpoint(cfg.init)));
  } else {
    EncoderConfig ec;
    ec.vocab_size = vocab.size();
    ec.layers = cfg.layers;
    ec.hidden = cfg.hidden;
    ec.intermediate = cfg.intermediate;
    ec.heads = cfg.heads;
    ec.max_seq = cfg.max_seq;
    ec.pooling = cfg.pooling;
    Rng init_rng(Rng::derive(cfg.seed, 0));
    model = std::make_unique<EncoderModel>(ec, init_rng, stage_uses_corpus(cfg.kind));
  }

  StageTrainer trainer(cfg, *model, vocab, std::move(data), teacher.get());
  if (resume) trainer.load_state(out_checkpoint + ".state");

  StageArtifacts art;
  bool first = true;
  while (trainer.step() < cfg.steps) {
    const double loss = trainer.train_step();
    if (first) {
      art.initial_loss = loss;
      first = false;
    }
    art.final_loss = loss;
    ++art.steps_run;
  }
  save_checkpoint(out_checkpoint, model->to_checkpoint());
  trainer.save_state(out_checkpoint + ".state");
  if (!metrics_csv.empty()) trainer.metrics().save(metrics_csv);
  return art;
}

}  // namespace embedkit
