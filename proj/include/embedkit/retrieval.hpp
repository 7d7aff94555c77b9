#pragma once

// Exact-search retrieval: a dense cosine index, a sparse inverted index, both
// with byte-deterministic file formats, plus ranked-retrieval metrics
// (nDCG@k, MRR@k, Recall@k) over TSV qrels and run files.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "embedkit/checkpoint.hpp"
#include "embedkit/errors.hpp"
#include "embedkit/sparse.hpp"
#include "embedkit/tensor.hpp"

namespace embedkit {

struct SearchHit {
  std::string doc_id;
  double score = 0.0;

  bool operator==(const SearchHit& o) const { return doc_id == o.doc_id && score == o.score; }
};

namespace detail {

inline void sort_hits(std::vector<SearchHit>& hits) {
  std::sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.doc_id < b.doc_id;  // ties break toward the smaller id
  });
}

inline void check_doc_ids(const std::vector<std::string>& ids) {
  std::set<std::string> seen;
  for (const auto& id : ids) {
    if (id.empty() || id.find_first_of("\t\n") != std::string::npos) {
      throw DataError("index: doc id '" + id + "' is empty or contains tab/newline");
    }
    if (!seen.insert(id).second) throw DataError("index: duplicate doc id '" + id + "'");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// dense index

class DenseIndex {
 public:
  DenseIndex() = default;

  DenseIndex(std::vector<std::string> ids, const Tensor& embeddings)
      : ids_(std::move(ids)) {
    detail::check_doc_ids(ids_);
    if (!embeddings.defined() || embeddings.rank() != 2 || embeddings.rows() != ids_.size()) {
      throw DimensionError("dense index: need one embedding row per doc id");
    }
    dim_ = embeddings.cols();
    data_ = embeddings.values();
    cache_norms();
  }

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::vector<double>& data() const { return data_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("dense index: cannot write " + path);
    out << "embedkit-dense-index v1\n";
    out << "docs " << ids_.size() << " dim " << dim_ << "\n";
    for (const auto& id : ids_) out << id << "\n";
    detail::write_f64_le(out, data_);
    out << "\n";
    if (!out) throw IoError("dense index: write failed for " + path);
  }

  static DenseIndex load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("dense index: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "embedkit-dense-index v1") {
      throw DataError("dense index: bad magic in " + path);
    }
    std::string t1, t2;
    std::size_t n = 0, d = 0;
    in >> t1 >> n >> t2 >> d;
    if (!in || t1 != "docs" || t2 != "dim") throw DataError("dense index: bad header in " + path);
    std::getline(in, line);
    DenseIndex idx;
    idx.dim_ = d;
    idx.ids_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::getline(in, idx.ids_[i])) throw DataError("dense index: truncated ids in " + path);
    }
    detail::check_doc_ids(idx.ids_);
    detail::read_f64_le(in, idx.data_, n * d);
    idx.cache_norms();
    return idx;
  }

  friend std::vector<SearchHit> search_dense(const DenseIndex&, const Tensor&, std::size_t);

 private:
  void cache_norms() {
    norms_.resize(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < dim_; ++k) s += data_[i * dim_ + k] * data_[i * dim_ + k];
      if (s == 0.0) throw NumericError("dense index: zero-norm embedding for doc " + ids_[i]);
      norms_[i] = std::sqrt(s);
    }
  }

  std::vector<std::string> ids_;
  std::vector<double> data_;  // row-major [N x dim]
  std::vector<double> norms_;
  std::size_t dim_ = 0;
};

// Exact cosine top-k; ties break by ascending doc id; k clamps to the corpus.
inline std::vector<SearchHit> search_dense(const DenseIndex& index, const Tensor& query,
                                           std::size_t k) {
  if (k < 1) throw ConfigError("search: k must be >= 1");
  if (index.size() == 0) return {};
  if (!query.defined() || query.numel() != index.dim()) {
    throw DimensionError("search: query dimension does not match the index");
  }
  const auto& q = query.values();
  double qn = 0.0;
  for (double x : q) qn += x * x;
  if (qn == 0.0) throw NumericError("search: zero-norm query");
  qn = std::sqrt(qn);

  std::vector<SearchHit> hits(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    double dot = 0.0;
    for (std::size_t kk = 0; kk < index.dim_; ++kk) dot += q[kk] * index.data_[i * index.dim_ + kk];
    hits[i] = {index.ids_[i], dot / (qn * index.norms_[i])};
  }
  detail::sort_hits(hits);
  hits.resize(std::min(k, hits.size()));
  return hits;
}

// ---------------------------------------------------------------------------
// sparse inverted index

class InvertedIndex {
 public:
  InvertedIndex() = default;

  InvertedIndex(std::vector<std::string> ids, const std::vector<SparseVector>& docs)
      : ids_(std::move(ids)) {
    detail::check_doc_ids(ids_);
    if (docs.size() != ids_.size()) {
      throw DimensionError("inverted index: need one sparse vector per doc id");
    }
    for (std::size_t i = 0; i < docs.size(); ++i) {
      docs[i].validate();
      for (const auto& [term, w] : docs[i].entries) postings_[term].emplace_back(i, w);
    }
    // built in ascending doc order, so each posting list is already sorted
  }

  std::size_t doc_count() const { return ids_.size(); }
  std::size_t term_count() const { return postings_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }

  const std::vector<std::pair<std::size_t, double>>* postings(std::size_t term) const {
    const auto it = postings_.find(term);
    return it == postings_.end() ? nullptr : &it->second;
  }

  // Mean number of nonzero terms per document.
  double mean_nnz() const {
    if (ids_.empty()) return 0.0;
    std::size_t total = 0;
    for (const auto& [term, plist] : postings_) total += plist.size();
    return static_cast<double>(total) / static_cast<double>(ids_.size());
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("sparse index: cannot write " + path);
    out << "embedkit-sparse-index v1\n";
    out << "docs " << ids_.size() << " terms " << postings_.size() << "\n";
    for (const auto& id : ids_) out << id << "\n";
    for (const auto& [term, plist] : postings_) {
      detail::write_u64_le(out, term);
      detail::write_u64_le(out, plist.size());
      for (const auto& [doc, w] : plist) {
        detail::write_u64_le(out, doc);
        detail::write_f64_le(out, std::vector<double>{w});
      }
    }
    out << "\n";
    if (!out) throw IoError("sparse index: write failed for " + path);
  }

  static InvertedIndex load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("sparse index: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "embedkit-sparse-index v1") {
      throw DataError("sparse index: bad magic in " + path);
    }
    std::string t1, t2;
    std::size_t n = 0, terms = 0;
    in >> t1 >> n >> t2 >> terms;
    if (!in || t1 != "docs" || t2 != "terms") throw DataError("sparse index: bad header in " + path);
    std::getline(in, line);
    InvertedIndex idx;
    idx.ids_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::getline(in, idx.ids_[i])) throw DataError("sparse index: truncated ids in " + path);
    }
    detail::check_doc_ids(idx.ids_);
    for (std::size_t t = 0; t < terms; ++t) {
      const std::uint64_t term = detail::read_u64_le(in);
      const std::uint64_t count = detail::read_u64_le(in);
      auto& plist = idx.postings_[term];
      plist.reserve(count);
      for (std::uint64_t c = 0; c < count; ++c) {
        const std::uint64_t doc = detail::read_u64_le(in);
        std::vector<double> w;
        detail::read_f64_le(in, w, 1);
        if (doc >= n || w[0] <= 0.0) throw DataError("sparse index: bad posting in " + path);
        plist.emplace_back(doc, w[0]);
      }
    }
    return idx;
  }

 private:
  std::vector<std::string> ids_;
  // term -> (doc index, weight), sorted by doc index; std::map keeps the
  // serialization order deterministic
  std::map<std::size_t, std::vector<std::pair<std::size_t, double>>> postings_;
};

// score(d) = Σ_t w_q(t)·w_d(t) accumulated over posting lists. Documents
// sharing no terms with the query score 0 and are excluded.
inline std::vector<SearchHit> search_sparse(const InvertedIndex& index, const SparseVector& query,
                                            std::size_t k) {
  if (k < 1) throw ConfigError("search: k must be >= 1");
  query.validate();
  std::vector<double> scores(index.doc_count(), 0.0);
  std::vector<bool> touched(index.doc_count(), false);
  for (const auto& [term, wq] : query.entries) {
    const auto* plist = index.postings(term);
    if (plist == nullptr) continue;
    for (const auto& [doc, wd] : *plist) {
      scores[doc] += wq * wd;
      touched[doc] = true;
    }
  }
  std::vector<SearchHit> hits;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (touched[i]) hits.push_back({index.ids()[i], scores[i]});
  }
  detail::sort_hits(hits);
  hits.resize(std::min(k, hits.size()));
  return hits;
}

// ---------------------------------------------------------------------------
// qrels / run files

// (query id -> doc id -> nonnegative relevance grade)
struct Qrels {
  std::map<std::string, std::map<std::string, int>> grades;

  bool has_relevant(const std::string& qid) const {
    const auto it = grades.find(qid);
    if (it == grades.end()) return false;
    for (const auto& [doc, g] : it->second)
      if (g > 0) return true;
    return false;
  }
};

// Ranked results per query, rank order preserved.
struct RunResult {
  std::map<std::string, std::vector<SearchHit>> per_query;
};

inline Qrels load_qrels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("qrels: cannot open " + path);
  Qrels qrels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string qid, doc;
    long grade = -1;
    if (!std::getline(ss, qid, '\t') || !std::getline(ss, doc, '\t') || !(ss >> grade) ||
        grade < 0) {
      throw DataError("qrels: " + path + " line " + std::to_string(lineno) +
                      ": expected 'query<TAB>doc<TAB>grade>=0'");
    }
    if (!qrels.grades[qid].emplace(doc, static_cast<int>(grade)).second) {
      throw DataError("qrels: " + path + " line " + std::to_string(lineno) + ": duplicate pair " +
                      qid + "/" + doc);
    }
  }
  return qrels;
}

inline void save_qrels(const std::string& path, const Qrels& qrels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("qrels: cannot write " + path);
  for (const auto& [qid, docs] : qrels.grades)
    for (const auto& [doc, g] : docs) out << qid << "\t" << doc << "\t" << g << "\n";
  if (!out) throw IoError("qrels: write failed for " + path);
}

inline void save_run(const std::string& path, const RunResult& run) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("run: cannot write " + path);
  char buf[64];
  for (const auto& [qid, hits] : run.per_query) {
    for (std::size_t r = 0; r < hits.size(); ++r) {
      std::snprintf(buf, sizeof buf, "%.17g", hits[r].score);
      out << qid << "\t" << hits[r].doc_id << "\t" << (r + 1) << "\t" << buf << "\n";
    }
  }
  if (!out) throw IoError("run: write failed for " + path);
}

inline RunResult load_run(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("run: cannot open " + path);
  RunResult run;
  std::map<std::string, std::vector<std::pair<std::size_t, SearchHit>>> staged;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string qid, doc, rank_s, score_s;
    if (!std::getline(ss, qid, '\t') || !std::getline(ss, doc, '\t') ||
        !std::getline(ss, rank_s, '\t') || !std::getline(ss, score_s)) {
      throw DataError("run: " + path + " line " + std::to_string(lineno) +
                      ": expected 'query<TAB>doc<TAB>rank<TAB>score'");
    }
    std::size_t rank = 0;
    double score = 0.0;
    try {
      rank = std::stoul(rank_s);
      score = std::stod(score_s);
    } catch (const std::exception&) {
      throw DataError("run: " + path + " line " + std::to_string(lineno) + ": bad rank or score");
    }
    if (rank < 1) throw DataError("run: " + path + " line " + std::to_string(lineno) +
                                  ": ranks are 1-based");
    staged[qid].push_back({rank, {doc, score}});
  }
  for (auto& [qid, entries] : staged) {
    std::sort(entries.begin(), entries.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    auto& hits = run.per_query[qid];
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].first != i + 1) {
        throw DataError("run: " + path + ": query " + qid + " ranks are not consecutive from 1");
      }
      hits.push_back(entries[i].second);
    }
  }
  return run;
}

// ---------------------------------------------------------------------------
// metrics

namespace detail {

// grade of doc for this query, 0 when unjudged
inline int grade_of(const std::map<std::string, int>& grades, const std::string& doc) {
  const auto it = grades.find(doc);
  return it == grades.end() ? 0 : it->second;
}

}  // namespace detail

// DCG@k = Σ_{r=1..k} (2^rel_r − 1)/log₂(r+1), divided by the ideal DCG.
inline double ndcg_at_k(const std::vector<SearchHit>& ranking,
                        const std::map<std::string, int>& grades, std::size_t k = 10) {
  double dcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, ranking.size()); ++r) {
    const int rel = detail::grade_of(grades, ranking[r].doc_id);
    dcg += (std::pow(2.0, rel) - 1.0) / std::log2(static_cast<double>(r) + 2.0);
  }
  std::vector<int> ideal;
  for (const auto& [doc, g] : grades)
    if (g > 0) ideal.push_back(g);
  if (ideal.empty()) throw DataError("ndcg: query has no relevant documents");
  std::sort(ideal.begin(), ideal.end(), std::greater<int>());
  double idcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, ideal.size()); ++r) {
    idcg += (std::pow(2.0, ideal[r]) - 1.0) / std::log2(static_cast<double>(r) + 2.0);
  }
  return dcg / idcg;
}

// Reciprocal rank of the first relevant document within the top k, else 0.
inline double mrr_at_k(const std::vector<SearchHit>& ranking,
                       const std::map<std::string, int>& grades, std::size_t k = 5) {
  for (std::size_t r = 0; r < std::min(k, ranking.size()); ++r) {
    if (detail::grade_of(grades, ranking[r].doc_id) > 0) {
      return 1.0 / (static_cast<double>(r) + 1.0);
    }
  }
  return 0.0;
}

// |relevant ∩ top-k| / |relevant|.
inline double recall_at_k(const std::vector<SearchHit>& ranking,
                          const std::map<std::string, int>& grades, std::size_t k = 10) {
  std::size_t relevant = 0, found = 0;
  for (const auto& [doc, g] : grades)
    if (g > 0) ++relevant;
  if (relevant == 0) throw DataError("recall: query has no relevant documents");
  for (std::size_t r = 0; r < std::min(k, ranking.size()); ++r) {
    if (detail::grade_of(grades, ranking[r].doc_id) > 0) ++found;
  }
  return static_cast<double>(found) / static_cast<double>(relevant);
}

struct EvalSummary {
  double ndcg = 0.0;   // nDCG@ndcg_k
  double mrr = 0.0;    // MRR@mrr_k
  double recall = 0.0; // Recall@recall_k
  std::size_t evaluated = 0;            // queries contributing to the means
  std::size_t skipped_no_qrels = 0;     // run queries absent from the qrels
  std::size_t skipped_no_relevant = 0;  // judged queries with no relevant doc
};

// Means over the run's queries. Queries missing from the qrels are skipped;
// queries whose judgments contain no relevant document are excluded.
inline EvalSummary evaluate_run(const RunResult& run, const Qrels& qrels, std::size_t ndcg_k = 10,
                                std::size_t mrr_k = 5, std::size_t recall_k = 10) {
  EvalSummary s;
  for (const auto& [qid, ranking] : run.per_query) {
    const auto it = qrels.grades.find(qid);
    if (it == qrels.grades.end()) {
      ++s.skipped_no_qrels;
      continue;
    }
    if (!qrels.has_relevant(qid)) {
      ++s.skipped_no_relevant;
      continue;
    }
    s.ndcg += ndcg_at_k(ranking, it->second, ndcg_k);
    s.mrr += mrr_at_k(ranking, it->second, mrr_k);
    s.recall += recall_at_k(ranking, it->second, recall_k);
    ++s.evaluated;
  }
  if (s.evaluated == 0) throw DataError("eval: no evaluable queries");
  s.ndcg /= static_cast<double>(s.evaluated);
  s.mrr /= static_cast<double>(s.evaluated);
  s.recall /= static_cast<double>(s.evaluated);
  return s;
}

}  // namespace embedkit
