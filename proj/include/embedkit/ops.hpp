#pragma once

// Tensor operations. Every op validates shapes, computes the forward value,
// and (when a tape is active and an input requires grad) registers a closure
// that accumulates into the inputs' grad buffers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "embedkit/errors.hpp"
#include "embedkit/tensor.hpp"

namespace embedkit {

namespace detail {

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) +
                         ", got shape " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul and structural ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dims " + detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = av[i * k + kk];
      if (aik == 0.0) continue;
      const double* brow = bv.data() + kk * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  auto ad = a.data();
  auto bd = b.data();
  bool needs = a.requires_grad() || b.requires_grad();
  return detail::finish_op({m, n}, std::move(out), needs, "matmul",
                           [ad, bd, m, k, n](auto& od) {
                             const auto& g = od->grad;
                             if (ad->requires_grad) {
                               ad->ensure_grad();
                               // dA = dC · Bᵀ
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t kk = 0; kk < k; ++kk) {
                                   double s = 0.0;
                                   for (std::size_t j = 0; j < n; ++j)
                                     s += g[i * n + j] * bd->data[kk * n + j];
                                   ad->grad[i * k + kk] += s;
                                 }
                             }
                             if (bd->requires_grad) {
                               bd->ensure_grad();
                               // dB = Aᵀ · dC
                               for (std::size_t kk = 0; kk < k; ++kk)
                                 for (std::size_t j = 0; j < n; ++j) {
                                   double s = 0.0;
                                   for (std::size_t i = 0; i < m; ++i)
                                     s += ad->data[i * k + kk] * g[i * n + j];
                                   bd->grad[kk * n + j] += s;
                                 }
                             }
                           });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
  auto ad = a.data();
  return detail::finish_op({n, m}, std::move(out), a.requires_grad(), "transpose",
                           [ad, m, n](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j)
                                 ad->grad[i * n + j] += od->grad[j * m + i];
                           });
}

inline Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
  if (detail::shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + detail::shape_str(a.shape()) + " to " +
                         detail::shape_str(shape));
  }
  auto ad = a.data();
  return detail::finish_op(std::move(shape), a.values(), a.requires_grad(), "reshape",
                           [ad](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < od->grad.size(); ++i)
                               ad->grad[i] += od->grad[i];
                           });
}

// Rows of a 2-D table selected by index; indices may repeat (embedding lookup).
inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
  detail::require_rank(a, 2, "gather_rows");
  const std::size_t n = a.cols();
  std::vector<double> out(idx.size() * n);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= a.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(idx[r]) + " out of " +
                           std::to_string(a.rows()) + " rows");
    }
    std::copy_n(a.values().data() + idx[r] * n, n, out.data() + r * n);
  }
  auto ad = a.data();
  return detail::finish_op({idx.size(), n}, std::move(out), a.requires_grad(), "gather_rows",
                           [ad, idx, n](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t r = 0; r < idx.size(); ++r)
                               for (std::size_t j = 0; j < n; ++j)
                                 ad->grad[idx[r] * n + j] += od->grad[r * n + j];
                           });
}

// v[i] = a[i, idx[i]] — one element per row.
inline Tensor gather_cols_per_row(const Tensor& a, const std::vector<std::size_t>& idx) {
  detail::require_rank(a, 2, "gather_cols_per_row");
  if (idx.size() != a.rows()) {
    throw DimensionError("gather_cols_per_row: " + std::to_string(idx.size()) +
                         " indices for " + std::to_string(a.rows()) + " rows");
  }
  const std::size_t n = a.cols();
  std::vector<double> out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    if (idx[i] >= n) {
      throw DimensionError("gather_cols_per_row: column " + std::to_string(idx[i]) +
                           " out of " + std::to_string(n));
    }
    out[i] = a.values()[i * n + idx[i]];
  }
  auto ad = a.data();
  return detail::finish_op({a.rows()}, std::move(out), a.requires_grad(), "gather_cols_per_row",
                           [ad, idx, n](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < idx.size(); ++i)
                               ad->grad[i * n + idx[i]] += od->grad[i];
                           });
}

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  detail::require_rank(a, 2, "slice_rows");
  if (r0 >= r1 || r1 > a.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ") of " + std::to_string(a.rows()) + " rows");
  }
  const std::size_t n = a.cols();
  std::vector<double> out(a.values().begin() + static_cast<std::ptrdiff_t>(r0 * n),
                          a.values().begin() + static_cast<std::ptrdiff_t>(r1 * n));
  auto ad = a.data();
  return detail::finish_op({r1 - r0, n}, std::move(out), a.requires_grad(), "slice_rows",
                           [ad, r0, n](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < od->grad.size(); ++i)
                               ad->grad[r0 * n + i] += od->grad[i];
                           });
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  detail::require_rank(a, 2, "slice_cols");
  if (c0 >= c1 || c1 > a.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") of " + std::to_string(a.cols()) + " cols");
  }
  const std::size_t m = a.rows(), n = a.cols(), w = c1 - c0;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(a.values().data() + i * n + c0, w, out.data() + i * w);
  auto ad = a.data();
  return detail::finish_op({m, w}, std::move(out), a.requires_grad(), "slice_cols",
                           [ad, c0, m, n, w](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < w; ++j)
                                 ad->grad[i * n + c0 + j] += od->grad[i * w + j];
                           });
}

// Slice of a rank-1 tensor.
inline Tensor slice(const Tensor& a, std::size_t i0, std::size_t i1) {
  detail::require_rank(a, 1, "slice");
  if (i0 >= i1 || i1 > a.numel()) {
    throw DimensionError("slice: [" + std::to_string(i0) + "," + std::to_string(i1) + ") of " +
                         std::to_string(a.numel()));
  }
  std::vector<double> out(a.values().begin() + static_cast<std::ptrdiff_t>(i0),
                          a.values().begin() + static_cast<std::ptrdiff_t>(i1));
  auto ad = a.data();
  return detail::finish_op({i1 - i0}, std::move(out), a.requires_grad(), "slice",
                           [ad, i0](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < od->grad.size(); ++i)
                               ad->grad[i0 + i] += od->grad[i];
                           });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  bool needs = false;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_rows");
    if (p.cols() != n) {
      throw DimensionError("concat_rows: column mismatch " + std::to_string(p.cols()) + " vs " +
                           std::to_string(n));
    }
    m += p.rows();
    needs = needs || p.requires_grad();
  }
  std::vector<double> out;
  out.reserve(m * n);
  std::vector<std::shared_ptr<detail::TensorData>> pd;
  pd.reserve(parts.size());
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    pd.push_back(p.data());
  }
  return detail::finish_op({m, n}, std::move(out), needs, "concat_rows",
                           [pd](auto& od) {
                             std::size_t off = 0;
                             for (auto& p : pd) {
                               if (p->requires_grad) {
                                 p->ensure_grad();
                                 for (std::size_t i = 0; i < p->data.size(); ++i)
                                   p->grad[i] += od->grad[off + i];
                               }
                               off += p->data.size();
                             }
                           });
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) { return concat_rows({a, b}); }

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "concat_cols");
  detail::require_rank(b, 2, "concat_cols");
  if (a.rows() != b.rows()) {
    throw DimensionError("concat_cols: row mismatch " + std::to_string(a.rows()) + " vs " +
                         std::to_string(b.rows()));
  }
  const std::size_t m = a.rows(), na = a.cols(), nb = b.cols();
  std::vector<double> out(m * (na + nb));
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.values().data() + i * na, na, out.data() + i * (na + nb));
    std::copy_n(b.values().data() + i * nb, nb, out.data() + i * (na + nb) + na);
  }
  auto ad = a.data();
  auto bd = b.data();
  return detail::finish_op({m, na + nb}, std::move(out),
                           a.requires_grad() || b.requires_grad(), "concat_cols",
                           [ad, bd, m, na, nb](auto& od) {
                             for (std::size_t i = 0; i < m; ++i) {
                               if (ad->requires_grad) {
                                 ad->ensure_grad();
                                 for (std::size_t j = 0; j < na; ++j)
                                   ad->grad[i * na + j] += od->grad[i * (na + nb) + j];
                               }
                               if (bd->requires_grad) {
                                 bd->ensure_grad();
                                 for (std::size_t j = 0; j < nb; ++j)
                                   bd->grad[i * nb + j] += od->grad[i * (na + nb) + na + j];
                               }
                             }
                           });
}

// Concatenation of rank-1 tensors.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  std::vector<double> out;
  bool needs = false;
  std::vector<std::shared_ptr<detail::TensorData>> pd;
  for (const auto& p : parts) {
    detail::require_rank(p, 1, "concat");
    out.insert(out.end(), p.values().begin(), p.values().end());
    needs = needs || p.requires_grad();
    pd.push_back(p.data());
  }
  const std::size_t total = out.size();
  return detail::finish_op({total}, std::move(out), needs, "concat",
                           [pd](auto& od) {
                             std::size_t off = 0;
                             for (auto& p : pd) {
                               if (p->requires_grad) {
                                 p->ensure_grad();
                                 for (std::size_t i = 0; i < p->data.size(); ++i)
                                   p->grad[i] += od->grad[off + i];
                               }
                               off += p->data.size();
                             }
                           });
}

// ---------------------------------------------------------------------------
// elementwise ops (broadcasting only via the *_scalar / scale forms)

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto ad = a.data();
  auto bd = b.data();
  return detail::finish_op(a.shape(), std::move(out), a.requires_grad() || b.requires_grad(),
                           "add", [ad, bd](auto& od) {
                             if (ad->requires_grad) {
                               ad->ensure_grad();
                               for (std::size_t i = 0; i < od->grad.size(); ++i)
                                 ad->grad[i] += od->grad[i];
                             }
                             if (bd->requires_grad) {
                               bd->ensure_grad();
                               for (std::size_t i = 0; i < od->grad.size(); ++i)
                                 bd->grad[i] += od->grad[i];
                             }
                           });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  auto ad = a.data();
  auto bd = b.data();
  return detail::finish_op(a.shape(), std::move(out), a.requires_grad() || b.requires_grad(),
                           "sub", [ad, bd](auto& od) {
                             if (ad->requires_grad) {
                               ad->ensure_grad();
                               for (std::size_t i = 0; i < od->grad.size(); ++i)
                                 ad->grad[i] += od->grad[i];
                             }
                             if (bd->requires_grad) {
                               bd->ensure_grad();
                               for (std::size_t i = 0; i < od->grad.size(); ++i)
                                 bd->grad[i] -= od->grad[i];
                             }
                           });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto ad = a.data();
  auto bd = b.data();
  return detail::finish_op(a.shape(), std::move(out), a.requires_grad() || b.requires_grad(),
                           "mul", [ad, bd](auto& od) {
                             if (ad->requires_grad) {
                               ad->ensure_grad();
                               for (std::size_t i = 0; i < od->grad.size(); ++i)
                                 ad->grad[i] += od->grad[i] * bd->data[i];
                             }
                             if (bd->requires_grad) {
                               bd->ensure_grad();
                               for (std::size_t i = 0; i < od->grad.size(); ++i)
                                 bd->grad[i] += od->grad[i] * ad->data[i];
                             }
                           });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
  auto ad = a.data();
  return detail::finish_op(a.shape(), std::move(out), a.requires_grad(), "scale",
                           [ad, c](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < od->grad.size(); ++i)
                               ad->grad[i] += od->grad[i] * c;
                           });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + c;
  auto ad = a.data();
  return detail::finish_op(a.shape(), std::move(out), a.requires_grad(), "add_scalar",
                           [ad](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < od->grad.size(); ++i)
                               ad->grad[i] += od->grad[i];
                           });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
  auto ad = a.data();
  // relu'(0) = 0 by convention: only strictly positive inputs pass gradient.
  return detail::finish_op(a.shape(), std::move(out), a.requires_grad(), "relu",
                           [ad](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < od->grad.size(); ++i)
                               if (ad->data[i] > 0.0) ad->grad[i] += od->grad[i];
                           });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.values()[i]);
  auto ad = a.data();
  return detail::finish_op(a.shape(), std::move(out), a.requires_grad(), "exp",
                           [ad](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < od->grad.size(); ++i)
                               ad->grad[i] += od->grad[i] * od->data[i];
                           });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (a.values()[i] <= 0.0) {
      throw NumericError("log: non-positive input " + std::to_string(a.values()[i]));
    }
    out[i] = std::log(a.values()[i]);
  }
  auto ad = a.data();
  return detail::finish_op(a.shape(), std::move(out), a.requires_grad(), "log",
                           [ad](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < od->grad.size(); ++i)
                               ad->grad[i] += od->grad[i] / ad->data[i];
                           });
}

inline Tensor log1p(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (a.values()[i] <= -1.0) {
      throw NumericError("log1p: input " + std::to_string(a.values()[i]) + " <= -1");
    }
    out[i] = std::log1p(a.values()[i]);
  }
  auto ad = a.data();
  return detail::finish_op(a.shape(), std::move(out), a.requires_grad(), "log1p",
                           [ad](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < od->grad.size(); ++i)
                               ad->grad[i] += od->grad[i] / (1.0 + ad->data[i]);
                           });
}

// A[m×n] + row vector b[n], broadcast over rows.
inline Tensor add_bias(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "add_bias");
  detail::require_rank(b, 1, "add_bias");
  const std::size_t m = a.rows(), n = a.cols();
  if (b.numel() != n) {
    throw DimensionError("add_bias: bias length " + std::to_string(b.numel()) + " vs " +
                         std::to_string(n) + " cols");
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.values()[i * n + j] + b.values()[j];
  auto ad = a.data();
  auto bd = b.data();
  return detail::finish_op({m, n}, std::move(out), a.requires_grad() || b.requires_grad(),
                           "add_bias", [ad, bd, m, n](auto& od) {
                             if (ad->requires_grad) {
                               ad->ensure_grad();
                               for (std::size_t i = 0; i < m * n; ++i)
                                 ad->grad[i] += od->grad[i];
                             }
                             if (bd->requires_grad) {
                               bd->ensure_grad();
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j)
                                   bd->grad[j] += od->grad[i * n + j];
                             }
                           });
}

// A[m×n] − column vector v[m], broadcast over columns (per-row shift).
inline Tensor sub_per_row(const Tensor& a, const Tensor& v) {
  detail::require_rank(a, 2, "sub_per_row");
  detail::require_rank(v, 1, "sub_per_row");
  const std::size_t m = a.rows(), n = a.cols();
  if (v.numel() != m) {
    throw DimensionError("sub_per_row: vector length " + std::to_string(v.numel()) + " vs " +
                         std::to_string(m) + " rows");
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.values()[i * n + j] - v.values()[i];
  auto ad = a.data();
  auto vd = v.data();
  return detail::finish_op({m, n}, std::move(out), a.requires_grad() || v.requires_grad(),
                           "sub_per_row", [ad, vd, m, n](auto& od) {
                             if (ad->requires_grad) {
                               ad->ensure_grad();
                               for (std::size_t i = 0; i < m * n; ++i)
                                 ad->grad[i] += od->grad[i];
                             }
                             if (vd->requires_grad) {
                               vd->ensure_grad();
                               for (std::size_t i = 0; i < m; ++i) {
                                 double s = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) s += od->grad[i * n + j];
                                 vd->grad[i] -= s;
                               }
                             }
                           });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor row_sums(const Tensor& a) {
  detail::require_rank(a, 2, "row_sums");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += a.values()[i * n + j];
  auto ad = a.data();
  return detail::finish_op({m}, std::move(out), a.requires_grad(), "row_sums",
                           [ad, m, n](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j)
                                 ad->grad[i * n + j] += od->grad[i];
                           });
}

inline Tensor col_sums(const Tensor& a) {
  detail::require_rank(a, 2, "col_sums");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a.values()[i * n + j];
  auto ad = a.data();
  return detail::finish_op({n}, std::move(out), a.requires_grad(), "col_sums",
                           [ad, m, n](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j)
                                 ad->grad[i * n + j] += od->grad[j];
                           });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  auto ad = a.data();
  return detail::finish_op({1}, {s}, a.requires_grad(), "sum",
                           [ad](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < ad->grad.size(); ++i)
                               ad->grad[i] += od->grad[0];
                           });
}

// ---------------------------------------------------------------------------
// softmax family

inline Tensor softmax_rows(const Tensor& a) {
  detail::require_rank(a, 2, "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = a.values()[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.values()[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(a.values()[i * n + j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  auto ad = a.data();
  return detail::finish_op({m, n}, std::move(out), a.requires_grad(), "softmax_rows",
                           [ad, m, n](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < m; ++i) {
                               double dot = 0.0;
                               for (std::size_t j = 0; j < n; ++j)
                                 dot += od->grad[i * n + j] * od->data[i * n + j];
                               for (std::size_t j = 0; j < n; ++j)
                                 ad->grad[i * n + j] +=
                                     od->data[i * n + j] * (od->grad[i * n + j] - dot);
                             }
                           });
}

inline Tensor log_softmax_rows(const Tensor& a) {
  detail::require_rank(a, 2, "log_softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = a.values()[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.values()[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(a.values()[i * n + j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.values()[i * n + j] - lse;
  }
  auto ad = a.data();
  return detail::finish_op({m, n}, std::move(out), a.requires_grad(), "log_softmax_rows",
                           [ad, m, n](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t i = 0; i < m; ++i) {
                               double gsum = 0.0;
                               for (std::size_t j = 0; j < n; ++j) gsum += od->grad[i * n + j];
                               for (std::size_t j = 0; j < n; ++j)
                                 ad->grad[i * n + j] +=
                                     od->grad[i * n + j] - std::exp(od->data[i * n + j]) * gsum;
                             }
                           });
}

// ---------------------------------------------------------------------------
// pooling / similarity

// Per-column max over unmasked rows; gradient routes to the first-occurrence
// argmax row of each column.
inline Tensor max_over_positions(const Tensor& a, const std::vector<int>& mask) {
  detail::require_rank(a, 2, "max_over_positions");
  const std::size_t m = a.rows(), n = a.cols();
  if (mask.size() != m) {
    throw DimensionError("max_over_positions: mask length " + std::to_string(mask.size()) +
                         " vs " + std::to_string(m) + " rows");
  }
  std::vector<std::size_t> arg(n, m);
  std::vector<double> out(n);
  bool any = false;
  for (std::size_t i = 0; i < m; ++i) {
    if (!mask[i]) continue;
    any = true;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = a.values()[i * n + j];
      if (arg[j] == m || v > out[j]) {
        out[j] = v;
        arg[j] = i;
      }
    }
  }
  if (!any) throw NumericError("max_over_positions: all positions masked");
  auto ad = a.data();
  return detail::finish_op({n}, std::move(out), a.requires_grad(), "max_over_positions",
                           [ad, arg, n](auto& od) {
                             ad->ensure_grad();
                             for (std::size_t j = 0; j < n; ++j)
                               ad->grad[arg[j] * n + j] += od->grad[j];
                           });
}

// Entry (i,j) = cos(Aᵢ, Bⱼ) / tau. A and B may alias the same tensor.
inline Tensor cosine_matrix(const Tensor& a, const Tensor& b, double tau) {
  detail::require_rank(a, 2, "cosine_matrix");
  detail::require_rank(b, 2, "cosine_matrix");
  if (tau <= 0.0) throw ConfigError("cosine_matrix: tau must be > 0");
  if (a.cols() != b.cols()) {
    throw DimensionError("cosine_matrix: dim mismatch " + detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), n = b.rows(), d = a.cols();
  auto norms = [d](const Tensor& t, const char* which) {
    std::vector<double> ns(t.rows());
    for (std::size_t i = 0; i < t.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double v = t.values()[i * d + j];
        s += v * v;
      }
      if (s == 0.0) {
        throw NumericError(std::string("cosine_matrix: zero-norm ") + which + " row " +
                           std::to_string(i));
      }
      ns[i] = std::sqrt(s);
    }
    return ns;
  };
  std::vector<double> na = norms(a, "left");
  std::vector<double> nb = norms(b, "right");
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t kk = 0; kk < d; ++kk) dot += a.values()[i * d + kk] * b.values()[j * d + kk];
      out[i * n + j] = dot / (na[i] * nb[j] * tau);
    }
  auto ad = a.data();
  auto bd = b.data();
  // d cos(u,v)/du = (v̂ − cos·û)/‖u‖ with û, v̂ unit vectors; both accumulate
  // when a and b alias the same tensor.
  return detail::finish_op(
      {m, n}, std::move(out), a.requires_grad() || b.requires_grad(), "cosine_matrix",
      [ad, bd, na, nb, tau, m, n, d](auto& od) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double g = od->grad[i * n + j];
            if (g == 0.0) continue;
            const double c = od->data[i * n + j] * tau;  // plain cosine
            if (ad->requires_grad) {
              ad->ensure_grad();
              for (std::size_t kk = 0; kk < d; ++kk) {
                const double ah = ad->data[i * d + kk] / na[i];
                const double bh = bd->data[j * d + kk] / nb[j];
                ad->grad[i * d + kk] += g * (bh - c * ah) / (na[i] * tau);
              }
            }
            if (bd->requires_grad) {
              bd->ensure_grad();
              for (std::size_t kk = 0; kk < d; ++kk) {
                const double ah = ad->data[i * d + kk] / na[i];
                const double bh = bd->data[j * d + kk] / nb[j];
                bd->grad[j * d + kk] += g * (ah - c * bh) / (nb[j] * tau);
              }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// normalization / losses

// Per-row normalization with learned gain and shift: y = g·(x−μ)/√(σ²+ε) + b.
inline Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& shift,
                         double eps = 1e-5) {
  detail::require_rank(a, 2, "layer_norm");
  detail::require_rank(gain, 1, "layer_norm");
  detail::require_rank(shift, 1, "layer_norm");
  const std::size_t m = a.rows(), n = a.cols();
  if (gain.numel() != n || shift.numel() != n) {
    throw DimensionError("layer_norm: gain/shift length vs " + std::to_string(n) + " cols");
  }
  std::vector<double> out(m * n), xhat(m * n), inv_sd(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += a.values()[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double c = a.values()[i * n + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(n);
    inv_sd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (a.values()[i * n + j] - mu) * inv_sd[i];
      out[i * n + j] = gain.values()[j] * xhat[i * n + j] + shift.values()[j];
    }
  }
  auto ad = a.data();
  auto gd = gain.data();
  auto sd = shift.data();
  bool needs = a.requires_grad() || gain.requires_grad() || shift.requires_grad();
  return detail::finish_op(
      {m, n}, std::move(out), needs, "layer_norm",
      [ad, gd, sd, xhat, inv_sd, m, n](auto& od) {
        for (std::size_t i = 0; i < m; ++i) {
          if (gd->requires_grad) {
            gd->ensure_grad();
            for (std::size_t j = 0; j < n; ++j)
              gd->grad[j] += od->grad[i * n + j] * xhat[i * n + j];
          }
          if (sd->requires_grad) {
            sd->ensure_grad();
            for (std::size_t j = 0; j < n; ++j) sd->grad[j] += od->grad[i * n + j];
          }
          if (ad->requires_grad) {
            ad->ensure_grad();
            // dx̂ = dy·g; dx = (dx̂ − mean(dx̂) − x̂·mean(dx̂·x̂)) / sd
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = od->grad[i * n + j] * gd->data[j];
              mean_dxh += dxh;
              mean_dxh_xh += dxh * xhat[i * n + j];
            }
            mean_dxh /= static_cast<double>(n);
            mean_dxh_xh /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = od->grad[i * n + j] * gd->data[j];
              ad->grad[i * n + j] +=
                  (dxh - mean_dxh - xhat[i * n + j] * mean_dxh_xh) * inv_sd[i];
            }
          }
        }
      });
}

// Mean over rows of −log softmax(logits)[i, target_i].
inline Tensor mean_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
  detail::require_rank(logits, 2, "mean_cross_entropy");
  const std::size_t m = logits.rows(), n = logits.cols();
  if (targets.size() != m) {
    throw DimensionError("mean_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(m) + " rows");
  }
  if (m == 0) throw DataError("mean_cross_entropy: empty batch");
  std::vector<double> probs(m * n);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= n) {
      throw DimensionError("mean_cross_entropy: target " + std::to_string(targets[i]) +
                           " out of " + std::to_string(n));
    }
    double mx = logits.values()[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, logits.values()[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      probs[i * n + j] = std::exp(logits.values()[i * n + j] - mx);
      z += probs[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
    loss -= logits.values()[i * n + targets[i]] - mx - std::log(z);
  }
  loss /= static_cast<double>(m);
  auto ld = logits.data();
  return detail::finish_op({1}, {loss}, logits.requires_grad(), "mean_cross_entropy",
                           [ld, probs, targets, m, n](auto& od) {
                             ld->ensure_grad();
                             const double g = od->grad[0] / static_cast<double>(m);
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j)
                                 ld->grad[i * n + j] +=
                                     g * (probs[i * n + j] - (j == targets[i] ? 1.0 : 0.0));
                           });
}

}  // namespace embedkit
