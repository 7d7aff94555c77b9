#pragma once

// Training losses: the improved contrastive loss over query/positive/negative
// embeddings, score-distribution distillation, masked-language-model
// cross-entropy, and the FLOPS/NORM sparsity regularizers with their
// combined objective.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "embedkit/errors.hpp"
#include "embedkit/ops.hpp"
#include "embedkit/tensor.hpp"

namespace embedkit {

struct ContrastiveConfig {
  double tau = 0.05;   // similarity temperature
  double alpha = 1.0;  // negative-passage term (explicit + in-batch positives)
  double beta = 1.0;   // query-to-query term
  double gamma = 1.0;  // positive-to-its-own-negatives term

  void validate() const {
    if (tau <= 0.0) throw ConfigError("contrastive: tau must be > 0");
    for (double w : {alpha, beta, gamma}) {
      if (w < 0.0 || w > 1.0) throw ConfigError("contrastive: switch weights must be in [0,1]");
    }
  }
};

struct ContrastiveBatch {
  Tensor queries;                 // n×d
  Tensor positives;               // n×d
  std::vector<Tensor> negatives;  // per query: kᵢ×d, or empty vector for none

  std::size_t size() const { return queries.defined() ? queries.rows() : 0; }
};

// L = −(1/n) Σᵢ log( e^{sᵢ} / Zᵢ ) with sᵢ the query–positive score and
//   Zᵢ = e^{sᵢ} + α·Σ(negatives for i: explicit + other queries' positives)
//      + β·Σ_{i'≠i} e^{s(qᵢ,q_{i'})} + γ·Σ e^{s(pᵢ₀,pᵢⱼ)}.
// Computed in shifted form Zᵢ·e^{−sᵢ} = 1 + … so a singleton batch with no
// negatives and β=γ=0 yields exactly 0.
inline Tensor contrastive_loss(const ContrastiveBatch& batch, const ContrastiveConfig& cfg) {
  cfg.validate();
  const std::size_t n = batch.size();
  if (n == 0) throw DataError("contrastive: empty batch");
  if (!batch.positives.defined() || batch.positives.rows() != n) {
    throw DimensionError("contrastive: need one positive per query");
  }
  if (!batch.negatives.empty() && batch.negatives.size() != n) {
    throw DimensionError("contrastive: negatives list must have one entry per query");
  }

  std::vector<std::size_t> diag_idx(n);
  std::iota(diag_idx.begin(), diag_idx.end(), 0);

  Tensor s_qp = cosine_matrix(batch.queries, batch.positives, cfg.tau);  // n×n
  Tensor pos = gather_cols_per_row(s_qp, diag_idx);                      // sᵢ
  // e^{s(qᵢ,p_{i'0}) − sᵢ}; the diagonal contributes exactly 1.
  Tensor shifted_qp = exp(sub_per_row(s_qp, pos));
  Tensor in_batch = add_scalar(row_sums(shifted_qp), -1.0);

  Tensor zero1 = Tensor::zeros({1});
  std::vector<Tensor> explicit_neg, pos_neg;
  bool any_negatives = false;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor* negs =
        (!batch.negatives.empty() && batch.negatives[i].defined() && batch.negatives[i].numel() > 0)
            ? &batch.negatives[i]
            : nullptr;
    if (negs == nullptr) {
      explicit_neg.push_back(zero1);
      pos_neg.push_back(zero1);
      continue;
    }
    any_negatives = true;
    Tensor pos_i = slice(pos, i, i + 1);
    Tensor qrow = slice_rows(batch.queries, i, i + 1);
    Tensor prow = slice_rows(batch.positives, i, i + 1);
    explicit_neg.push_back(
        row_sums(exp(sub_per_row(cosine_matrix(qrow, *negs, cfg.tau), pos_i))));
    pos_neg.push_back(row_sums(exp(sub_per_row(cosine_matrix(prow, *negs, cfg.tau), pos_i))));
  }

  Tensor alpha_sum = in_batch;
  if (any_negatives) alpha_sum = add(alpha_sum, concat(explicit_neg));
  Tensor z = scale(alpha_sum, cfg.alpha);
  if (cfg.beta != 0.0 && n > 1) {
    Tensor shifted_qq = exp(sub_per_row(cosine_matrix(batch.queries, batch.queries, cfg.tau), pos));
    Tensor qq = sub(row_sums(shifted_qq), gather_cols_per_row(shifted_qq, diag_idx));
    z = add(z, scale(qq, cfg.beta));
  }
  if (cfg.gamma != 0.0 && any_negatives) {
    z = add(z, scale(concat(pos_neg), cfg.gamma));
  }
  z = add_scalar(z, 1.0);  // the numerator's own e^{sᵢ−sᵢ}
  return scale(sum(log(z)), 1.0 / static_cast<double>(n));
}

struct DistillConfig {
  double tau_kd = 1.0;
  bool normalize = true;  // divide the summed cross-entropy by the query count

  void validate() const {
    if (tau_kd <= 0.0) throw ConfigError("distill: tau_kd must be > 0");
  }
};

namespace detail {

inline std::vector<double> stable_softmax(const std::vector<double>& scores, double tau) {
  std::vector<double> p(scores.size());
  double mx = scores[0];
  for (double s : scores) mx = std::max(mx, s);
  double z = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    p[i] = std::exp((scores[i] - mx) / tau);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

}  // namespace detail

// Cross-entropy between the teacher's and student's temperature-scaled score
// distributions, per query, over identical candidate sets. Teacher scores are
// plain constants; student scores are rank-1 tensors on the live graph.
inline Tensor kd_loss(const std::vector<Tensor>& student_scores,
                      const std::vector<std::vector<double>>& teacher_scores,
                      const DistillConfig& cfg) {
  cfg.validate();
  const std::size_t n = student_scores.size();
  if (n == 0) throw DataError("distill: empty batch");
  if (teacher_scores.size() != n) {
    throw DataError("distill: teacher scored " + std::to_string(teacher_scores.size()) +
                    " queries, student " + std::to_string(n));
  }
  Tensor total = Tensor::zeros({1});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t m = teacher_scores[i].size();
    if (m == 0) throw DataError("distill: query " + std::to_string(i) + " has no candidates");
    if (student_scores[i].rank() != 1 || student_scores[i].numel() != m) {
      throw DataError("distill: candidate-set mismatch at query " + std::to_string(i) + ": teacher " +
                      std::to_string(m) + ", student " + std::to_string(student_scores[i].numel()));
    }
    std::vector<double> pt = detail::stable_softmax(teacher_scores[i], cfg.tau_kd);
    Tensor log_ps =
        log_softmax_rows(reshape(scale(student_scores[i], 1.0 / cfg.tau_kd), {1, m}));
    Tensor ce = scale(sum(mul(log_ps, Tensor::from({1, m}, std::move(pt)))), -1.0);
    total = add(total, ce);
  }
  return cfg.normalize ? scale(total, 1.0 / static_cast<double>(n)) : total;
}

// Entropy of the teacher's distributions under the same temperature and
// normalization convention as kd_loss; the lower bound of the distillation
// loss (Gibbs inequality).
inline double teacher_entropy(const std::vector<std::vector<double>>& teacher_scores,
                              const DistillConfig& cfg) {
  cfg.validate();
  if (teacher_scores.empty()) throw DataError("distill: empty batch");
  double total = 0.0;
  for (const auto& scores : teacher_scores) {
    std::vector<double> p = detail::stable_softmax(scores, cfg.tau_kd);
    for (double v : p) {
      if (v > 0.0) total -= v * std::log(v);
    }
  }
  return cfg.normalize ? total / static_cast<double>(teacher_scores.size()) : total;
}

// Mean cross-entropy over the labeled (masked) positions only.
inline Tensor mlm_loss(const Tensor& logits,
                       const std::vector<std::pair<std::size_t, std::size_t>>& labels) {
  if (labels.empty()) throw DataError("mlm: no labeled positions");
  std::vector<std::size_t> positions, targets;
  positions.reserve(labels.size());
  targets.reserve(labels.size());
  for (const auto& [pos, orig] : labels) {
    positions.push_back(pos);
    targets.push_back(orig);
  }
  return mean_cross_entropy(gather_rows(logits, positions), targets);
}

// L = Σⱼ ( (1/N) Σᵢ w_{ij} )² over a batch of pooled term-weight rows.
inline Tensor flops_loss(const Tensor& weights) {
  detail::require_rank(weights, 2, "flops_loss");
  const std::size_t n = weights.rows();
  if (n == 0) throw DataError("flops: empty batch");
  Tensor means = scale(col_sums(weights), 1.0 / static_cast<double>(n));
  return sum(mul(means, means));
}

// Sum over the vocabulary of the pooled log1p(relu(max)) weights of one
// sequence — the L1 norm of its sparse representation.
inline Tensor norm_loss(const Tensor& logits, const std::vector<int>& mask) {
  return sum(log1p(relu(max_over_positions(logits, mask))));
}

// Batch-mean of the L1 norms of pooled term-weight rows.
inline Tensor norm_loss_batch(const Tensor& weights) {
  detail::require_rank(weights, 2, "norm_loss_batch");
  const std::size_t n = weights.rows();
  if (n == 0) throw DataError("norm: empty batch");
  return scale(sum(weights), 1.0 / static_cast<double>(n));
}

struct SparseLossConfig {
  double lambda_q = 0.0;  // FLOPS weight, queries
  double lambda_p = 0.0;  // FLOPS weight, passages
  double sigma_q = 0.0;   // NORM weight, queries
  double sigma_p = 0.0;   // NORM weight, passages

  void validate() const {
    if (lambda_q < 0.0 || lambda_p < 0.0 || sigma_q < 0.0 || sigma_p < 0.0) {
      throw ConfigError("sparse loss: regularization weights must be >= 0");
    }
  }
};

// L = L_KD + λ_q·FLOPS_q + λ_p·FLOPS_p + σ_q·NORM_q + σ_p·NORM_p.
inline Tensor sparse_total_loss(const Tensor& kd, const Tensor& flops_q, const Tensor& flops_p,
                                const Tensor& norm_q, const Tensor& norm_p,
                                const SparseLossConfig& cfg) {
  cfg.validate();
  Tensor total = kd;
  total = add(total, scale(flops_q, cfg.lambda_q));
  total = add(total, scale(flops_p, cfg.lambda_p));
  total = add(total, scale(norm_q, cfg.sigma_q));
  total = add(total, scale(norm_p, cfg.sigma_p));
  return total;
}

}  // namespace embedkit
