#pragma once

// Pair datasets and everything that feeds training batches: JSON-lines IO,
// size-temperature dataset sampling, hard-negative mining with false-negative
// filtering, positive perturbation, and instruction-query formatting.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "embedkit/errors.hpp"
#include "embedkit/rng.hpp"
#include "embedkit/tensor.hpp"

namespace embedkit {

struct PairRecord {
  std::string query;
  std::string positive;
  std::vector<std::string> negatives;
  std::string dataset = "default";
};

struct CorpusDoc {
  std::string id;
  std::string text;
};

inline std::vector<PairRecord> load_pairs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("pairs: cannot open " + path);
  std::vector<PairRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("pairs: " + path + " line " + std::to_string(lineno) + ": " + e.what());
    }
    PairRecord rec;
    try {
      rec.query = j.at("query").get<std::string>();
      rec.positive = j.at("positive").get<std::string>();
      if (j.contains("negatives")) rec.negatives = j["negatives"].get<std::vector<std::string>>();
      if (j.contains("dataset")) rec.dataset = j["dataset"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("pairs: " + path + " line " + std::to_string(lineno) + ": " + e.what());
    }
    if (rec.query.empty() || rec.positive.empty()) {
      throw DataError("pairs: " + path + " line " + std::to_string(lineno) +
                      ": query and positive must be non-empty");
    }
    records.push_back(std::move(rec));
  }
  return records;
}

inline void save_pairs(const std::string& path, const std::vector<PairRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("pairs: cannot write " + path);
  for (const auto& rec : records) {
    nlohmann::json j;
    j["query"] = rec.query;
    j["positive"] = rec.positive;
    j["negatives"] = rec.negatives;
    j["dataset"] = rec.dataset;
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("pairs: write failed for " + path);
}

inline std::vector<CorpusDoc> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("corpus: cannot open " + path);
  std::vector<CorpusDoc> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      docs.push_back(CorpusDoc{j.at("id").get<std::string>(), j.at("text").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError("corpus: " + path + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return docs;
}

inline void save_corpus(const std::string& path, const std::vector<CorpusDoc>& docs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("corpus: cannot write " + path);
  for (const auto& d : docs) {
    nlohmann::json j;
    j["id"] = d.id;
    j["text"] = d.text;
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("corpus: write failed for " + path);
}

// q_inst = "Instruct: {task_definition} Query: {q}", verbatim.
inline std::string format_instruction_query(const std::string& task_definition,
                                            const std::string& q) {
  return "Instruct: " + task_definition + " Query: " + q;
}

// ---------------------------------------------------------------------------
// dataset sampling

struct DatasetStats {
  // (dataset id, size), ordered by first appearance
  std::vector<std::pair<std::string, std::size_t>> sizes;
};

struct SamplerConfig {
  double alpha_sampling = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(alpha_sampling >= 0.0) || !std::isfinite(alpha_sampling)) {
      throw ConfigError("sampler: alpha must be finite and >= 0");
    }
  }
};

// p_i = |D_i|^alpha / Σ_k |D_k|^alpha.
inline std::vector<double> dataset_probabilities(const DatasetStats& stats,
                                                 const SamplerConfig& cfg) {
  cfg.validate();
  if (stats.sizes.empty()) throw DataError("sampler: no datasets");
  std::vector<double> p(stats.sizes.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (stats.sizes[i].second == 0) throw DataError("sampler: empty dataset " + stats.sizes[i].first);
    p[i] = std::pow(static_cast<double>(stats.sizes[i].second), cfg.alpha_sampling);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

// Draws single-dataset batches. Each dataset is an endless stream formed by
// concatenating per-epoch permutations, so records never repeat within an
// epoch and small datasets wrap with a reshuffle. The full sampler state is
// (batch counter, per-dataset stream positions), which makes runs resumable.
class PairSampler {
 public:
  struct State {
    std::size_t batches_drawn = 0;
    std::vector<std::size_t> items_drawn;  // per dataset
  };

  PairSampler(std::vector<PairRecord> records, SamplerConfig cfg)
      : records_(std::move(records)), cfg_(cfg) {
    cfg_.validate();
    if (records_.empty()) throw DataError("sampler: no records");
    for (std::size_t r = 0; r < records_.size(); ++r) {
      const auto& name = records_[r].dataset;
      std::size_t g = 0;
      for (; g < groups_.size(); ++g) {
        if (stats_.sizes[g].first == name) break;
      }
      if (g == groups_.size()) {
        groups_.emplace_back();
        stats_.sizes.emplace_back(name, 0);
      }
      groups_[g].push_back(r);
      ++stats_.sizes[g].second;
    }
    probs_ = dataset_probabilities(stats_, cfg_);
    state_.items_drawn.assign(groups_.size(), 0);
  }

  const DatasetStats& stats() const { return stats_; }
  const std::vector<double>& probabilities() const { return probs_; }
  const State& state() const { return state_; }

  void restore(State s) {
    if (s.items_drawn.size() != groups_.size()) {
      throw ConfigError("sampler: state does not match dataset count");
    }
    state_ = std::move(s);
  }

  // Index of the dataset the next batch will come from; advances nothing.
  std::size_t peek_dataset() const {
    Rng rng(Rng::derive(cfg_.seed, 0x5a3f, state_.batches_drawn));
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs_.size(); ++i) {
      acc += probs_[i];
      if (u < acc) return i;
    }
    return probs_.size() - 1;
  }

  std::vector<PairRecord> next_batch(std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("sampler: batch_size must be >= 1");
    const std::size_t g = peek_dataset();
    std::vector<PairRecord> batch;
    batch.reserve(batch_size);
    const std::size_t n = groups_[g].size();
    for (std::size_t k = 0; k < batch_size; ++k) {
      const std::size_t pos = state_.items_drawn[g] + k;
      const std::size_t epoch = pos / n, offset = pos % n;
      if (offset == 0 || perm_cache_group_ != g || perm_cache_epoch_ != epoch) {
        rebuild_perm(g, epoch);
      }
      batch.push_back(records_[groups_[g][perm_cache_[offset]]]);
    }
    state_.items_drawn[g] += batch_size;
    ++state_.batches_drawn;
    return batch;
  }

 private:
  void rebuild_perm(std::size_t g, std::size_t epoch) const {
    perm_cache_.resize(groups_[g].size());
    for (std::size_t i = 0; i < perm_cache_.size(); ++i) perm_cache_[i] = i;
    Rng rng(Rng::derive(cfg_.seed, 0x9e1d + g, epoch));
    rng.shuffle(perm_cache_);
    perm_cache_group_ = g;
    perm_cache_epoch_ = epoch;
  }

  std::vector<PairRecord> records_;
  SamplerConfig cfg_;
  std::vector<std::vector<std::size_t>> groups_;  // record indices per dataset
  DatasetStats stats_;
  std::vector<double> probs_;
  State state_;
  mutable std::vector<std::size_t> perm_cache_;
  mutable std::size_t perm_cache_group_ = static_cast<std::size_t>(-1);
  mutable std::size_t perm_cache_epoch_ = static_cast<std::size_t>(-1);
};

// ---------------------------------------------------------------------------
// hard-negative mining

struct MinerConfig {
  std::size_t top_k = 100;
  double false_negative_threshold = 0.8;  // cosine vs the positive
  std::size_t negatives_per_query = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (negatives_per_query < 1 || top_k < negatives_per_query) {
      throw ConfigError("miner: need top_k >= negatives_per_query >= 1");
    }
    if (!(false_negative_threshold > 0.0 && false_negative_threshold <= 1.0)) {
      throw ConfigError("miner: threshold must be in (0,1]");
    }
  }
};

struct MineResult {
  std::vector<std::string> negatives;
  bool empty_pool = false;  // every candidate was filtered out
};

namespace detail {

inline double row_cosine(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const std::size_t d = a.cols();
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    dot += a.at(i, k) * b.at(j, k);
    na += a.at(i, k) * a.at(i, k);
    nb += b.at(j, k) * b.at(j, k);
  }
  if (na == 0.0 || nb == 0.0) throw NumericError("mining: zero-norm embedding");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

// Ranks the corpus by query similarity, keeps the top_k pool, drops passages
// whose cosine to the positive exceeds the false-negative threshold (and any
// exact duplicate of the positive), then samples uniformly without
// replacement from the survivors.
inline MineResult mine_hard_negatives(const Tensor& query_emb, const Tensor& positive_emb,
                                      const Tensor& corpus_embs,
                                      const std::vector<std::string>& corpus_texts,
                                      const std::string& positive_text, const MinerConfig& cfg,
                                      Rng& rng) {
  cfg.validate();
  const std::size_t n = corpus_embs.defined() ? corpus_embs.rows() : 0;
  if (corpus_texts.size() != n) {
    throw DimensionError("mining: " + std::to_string(corpus_texts.size()) + " texts vs " +
                         std::to_string(n) + " embeddings");
  }
  std::vector<std::pair<double, std::size_t>> ranked(n);
  for (std::size_t i = 0; i < n; ++i) {
    ranked[i] = {detail::row_cosine(query_emb, 0, corpus_embs, i), i};
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  const std::size_t pool = std::min<std::size_t>(cfg.top_k, n);
  std::vector<std::size_t> survivors;
  for (std::size_t r = 0; r < pool; ++r) {
    const std::size_t i = ranked[r].second;
    if (corpus_texts[i] == positive_text) continue;
    if (detail::row_cosine(corpus_embs, i, positive_emb, 0) > cfg.false_negative_threshold) {
      continue;
    }
    survivors.push_back(i);
  }
  MineResult res;
  if (survivors.empty()) {
    res.empty_pool = true;
    return res;
  }
  const std::size_t want = std::min(cfg.negatives_per_query, survivors.size());
  for (std::size_t k = 0; k < want; ++k) {
    const std::size_t j = k + rng.index(survivors.size() - k);
    std::swap(survivors[k], survivors[j]);
    res.negatives.push_back(corpus_texts[survivors[k]]);
  }
  return res;
}

// ---------------------------------------------------------------------------
// positive perturbation

struct PerturbConfig {
  enum class Mode { delete_span, swap_spans };
  Mode mode = Mode::delete_span;
  double span_frac_low = 0.1;
  double span_frac_high = 0.3;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(0.0 < span_frac_low && span_frac_low <= span_frac_high && span_frac_high < 1.0)) {
      throw ConfigError("perturb: need 0 < low <= high < 1");
    }
  }
};

inline PerturbConfig::Mode parse_perturb_mode(const std::string& s) {
  if (s == "delete_span") return PerturbConfig::Mode::delete_span;
  if (s == "swap_spans") return PerturbConfig::Mode::swap_spans;
  throw ConfigError("perturb: unknown mode '" + s + "'");
}

// Removes or swaps token spans of length ceil(frac·L); the result always
// differs from the input.
inline std::string perturb_positive(const std::string& text, const PerturbConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<std::string> tokens;
  {
    std::string cur;
    for (char ch : text) {
      if (ch == ' ' || ch == '\t' || ch == '\n') {
        if (!cur.empty()) tokens.push_back(std::exchange(cur, ""));
      } else {
        cur.push_back(ch);
      }
    }
    if (!cur.empty()) tokens.push_back(cur);
  }
  const std::size_t L = tokens.size();
  if (L < 4) throw DataError("perturb: need at least 4 tokens, got " + std::to_string(L));

  auto join = [](const std::vector<std::string>& ts) {
    std::string out;
    for (std::size_t i = 0; i < ts.size(); ++i) {
      if (i) out += ' ';
      out += ts[i];
    }
    return out;
  };

  for (int attempt = 0; attempt < 100; ++attempt) {
    const double frac = rng.uniform(cfg.span_frac_low, cfg.span_frac_high);
    std::size_t len =
        static_cast<std::size_t>(std::ceil(frac * static_cast<double>(L)));
    len = std::max<std::size_t>(1, len);
    if (cfg.mode == PerturbConfig::Mode::delete_span) {
      len = std::min(len, L - 1);  // never delete everything
      const std::size_t start = rng.index(L - len + 1);
      std::vector<std::string> out = tokens;
      out.erase(out.begin() + static_cast<std::ptrdiff_t>(start),
                out.begin() + static_cast<std::ptrdiff_t>(start + len));
      return join(out);
    }
    // swap_spans: two disjoint equal-length spans
    len = std::min(len, L / 2);
    len = std::max<std::size_t>(1, len);
    const std::size_t a = rng.index(L - 2 * len + 1);
    const std::size_t b = a + len + rng.index(L - len - (a + len) + 1);
    std::vector<std::string> out = tokens;
    for (std::size_t i = 0; i < len; ++i) std::swap(out[a + i], out[b + i]);
    if (out != tokens) return join(out);
    // identical content in both spans; redraw
  }
  throw DataError("perturb: could not produce a changed sequence (uniform text?)");
}

inline std::string perturb_positive(const std::string& text, const PerturbConfig& cfg) {
  Rng rng(cfg.seed);
  return perturb_positive(text, cfg, rng);
}

}  // namespace embedkit
