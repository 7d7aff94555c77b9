#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "embedkit/errors.hpp"

namespace embedkit {

// Weighted bag of vocabulary terms: strictly positive weights, term ids
// strictly increasing.
struct SparseVector {
  std::vector<std::pair<std::size_t, double>> entries;

  std::size_t nnz() const { return entries.size(); }

  void validate() const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].second <= 0.0) throw DataError("sparse vector: non-positive weight");
      if (i > 0 && entries[i].first <= entries[i - 1].first) {
        throw DataError("sparse vector: term ids not strictly increasing");
      }
    }
  }

  // Dense expansion over a vocabulary of the given size.
  std::vector<double> to_dense(std::size_t vocab_size) const {
    std::vector<double> d(vocab_size, 0.0);
    for (const auto& [t, w] : entries) {
      if (t >= vocab_size) throw DimensionError("sparse vector: term id out of vocabulary");
      d[t] = w;
    }
    return d;
  }
};

inline double dot(const SparseVector& a, const SparseVector& b) {
  double s = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.entries.size() && j < b.entries.size()) {
    if (a.entries[i].first < b.entries[j].first) {
      ++i;
    } else if (a.entries[i].first > b.entries[j].first) {
      ++j;
    } else {
      s += a.entries[i].second * b.entries[j].second;
      ++i;
      ++j;
    }
  }
  return s;
}

}  // namespace embedkit
