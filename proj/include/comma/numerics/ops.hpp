#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "comma/numerics/tensor.hpp"

namespace comma {

namespace detail {

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

// Adds `delta` into the gradient of parent `i` when that parent wants one.
inline void accumulate(Node& self, std::size_t i, std::span<const double> delta) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return;
  auto& g = p.ensure_grad();
  for (std::size_t k = 0; k < delta.size(); ++k) g[k] += delta[k];
}

inline Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

// C[m×n] += A[m×k] · B[k×n], with optional transposes expressed by strides.
inline void gemm_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t m, std::size_t k, std::size_t n, bool trans_a, bool trans_b) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = trans_a ? a[p * m + i] : a[i * k + p];
      if (av == 0.0) continue;
      double* crow = &c[i * n];
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      } else {
        const double* brow = &b[p * n];
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_acc(a.data(), b.data(), out, m, k, n, false, false);
  return detail::record({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](detail::Node& self) {
    auto& A = detail::parent(self, 0);
    auto& B = detail::parent(self, 1);
    if (A.requires_grad) {
      std::vector<double> da(m * k, 0.0);
      detail::gemm_acc(self.grad, B.data, da, m, n, k, false, true);
      detail::accumulate(self, 0, da);
    }
    if (B.requires_grad) {
      std::vector<double> db(k * n, 0.0);
      detail::gemm_acc(A.data, self.grad, db, k, m, n, true, false);
      detail::accumulate(self, 1, db);
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::record(a.shape(), std::move(out), "add", {a, b}, [](detail::Node& self) {
    detail::accumulate(self, 0, self.grad);
    detail::accumulate(self, 1, self.grad);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::record(a.shape(), std::move(out), "sub", {a, b}, [](detail::Node& self) {
    detail::accumulate(self, 0, self.grad);
    std::vector<double> neg(self.grad.size());
    for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -self.grad[i];
    detail::accumulate(self, 1, neg);
  });
}

/// Elementwise (Hadamard) product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::record(a.shape(), std::move(out), "mul", {a, b}, [](detail::Node& self) {
    auto& A = detail::parent(self, 0);
    auto& B = detail::parent(self, 1);
    std::vector<double> d(self.grad.size());
    if (A.requires_grad) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = self.grad[i] * B.data[i];
      detail::accumulate(self, 0, d);
    }
    if (B.requires_grad) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = self.grad[i] * A.data[i];
      detail::accumulate(self, 1, d);
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::record(a.shape(), std::move(out), "scale", {a}, [s](detail::Node& self) {
    std::vector<double> d(self.grad.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = self.grad[i] * s;
    detail::accumulate(self, 0, d);
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + c;
  return detail::record(a.shape(), std::move(out), "add_scalar", {a},
                        [](detail::Node& self) { detail::accumulate(self, 0, self.grad); });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::record({1}, {s}, "sum", {a}, [](detail::Node& self) {
    std::vector<double> d(detail::parent(self, 0).data.size(), self.grad[0]);
    detail::accumulate(self, 0, d);
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::record(std::move(shape), std::move(out), "reshape", {a},
                        [](detail::Node& self) { detail::accumulate(self, 0, self.grad); });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return detail::record({n, m}, std::move(out), "transpose", {a}, [m, n](detail::Node& self) {
    std::vector<double> d(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) d[i * n + j] = self.grad[j * m + i];
    detail::accumulate(self, 0, d);
  });
}

/// Stacks matrices along the token (row) axis. Vectors are treated as 1×d.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t width = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() > 2 || p.cols() != width) {
      throw DimensionError("concat_rows: width mismatch " + shape_str(parts.front().shape()) +
                           " vs " + shape_str(p.shape()));
    }
    rows += p.rows();
  }
  std::vector<double> out;
  out.reserve(rows * width);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return detail::record({rows, width}, std::move(out), "concat_rows", parts,
                        [offsets](detail::Node& self) {
                          for (std::size_t i = 0; i < offsets.size(); ++i) {
                            auto n = detail::parent(self, i).data.size();
                            detail::accumulate(
                                self, i, std::span<const double>(self.grad).subspan(offsets[i], n));
                          }
                        });
}

/// Concatenates scalars or vectors end to end into one vector.
inline Tensor concat_flat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_flat: no inputs");
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  const std::size_t n = out.size();
  return detail::record({n}, std::move(out), "concat_flat", parts, [offsets](detail::Node& self) {
    for (std::size_t i = 0; i < offsets.size(); ++i) {
      auto n = detail::parent(self, i).data.size();
      detail::accumulate(self, i, std::span<const double>(self.grad).subspan(offsets[i], n));
    }
  });
}

inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  detail::require_rank2(a, "slice_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (count == 0 || start + count > m) {
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + shape_str(a.shape()));
  }
  std::vector<double> out(a.data().begin() + start * n, a.data().begin() + (start + count) * n);
  return detail::record({count, n}, std::move(out), "slice_rows", {a},
                        [start, m, n](detail::Node& self) {
                          std::vector<double> d(m * n, 0.0);
                          std::copy(self.grad.begin(), self.grad.end(), d.begin() + start * n);
                          detail::accumulate(self, 0, d);
                        });
}

/// Row r of a matrix as a length-n vector.
inline Tensor row(const Tensor& a, std::size_t r) {
  return reshape(slice_rows(a, r, 1), {a.shape()[1]});
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  detail::require_rank2(a, "slice_cols");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (count == 0 || start + count > n) {
    throw DimensionError("slice_cols: columns out of range for " + shape_str(a.shape()));
  }
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a[i * n + start + j];
  return detail::record({m, count}, std::move(out), "slice_cols", {a},
                        [start, count, m, n](detail::Node& self) {
                          std::vector<double> d(m * n, 0.0);
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < count; ++j)
                              d[i * n + start + j] = self.grad[i * count + j];
                          detail::accumulate(self, 0, d);
                        });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  for (const auto& p : parts) detail::require_rank2(p, "concat_cols");
  const std::size_t m = parts.front().shape()[0];
  std::size_t n = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.shape()[0] != m) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts.front().shape()) +
                           " vs " + shape_str(p.shape()));
    }
    offsets.push_back(n);
    n += p.shape()[1];
  }
  std::vector<double> out(m * n);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = parts[k].shape()[1];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * n + offsets[k] + j] = parts[k][i * w + j];
  }
  return detail::record({m, n}, std::move(out), "concat_cols", parts,
                        [offsets, m, n](detail::Node& self) {
                          for (std::size_t k = 0; k < offsets.size(); ++k) {
                            const std::size_t w = detail::parent(self, k).shape[1];
                            std::vector<double> d(m * w);
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < w; ++j)
                                d[i * w + j] = self.grad[i * n + offsets[k] + j];
                            detail::accumulate(self, k, d);
                          }
                        });
}

/// Adds a length-n bias vector to every row of an m×n matrix.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require_rank2(x, "add_bias");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (bias.numel() != n) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " with bias " +
                         shape_str(bias.shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + bias[j];
  return detail::record({m, n}, std::move(out), "add_bias", {x, bias}, [m, n](detail::Node& self) {
    detail::accumulate(self, 0, self.grad);
    std::vector<double> db(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) db[j] += self.grad[i * n + j];
    detail::accumulate(self, 1, db);
  });
}

/// Numerically stable softmax along `axis` (negative axes count from the end).
inline Tensor softmax(const Tensor& x, int axis = -1) {
  const int rank = static_cast<int>(x.rank());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
  }
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (int d = axis + 1; d < rank; ++d) inner *= s[d];
  const std::size_t len = s[axis];
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = x[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  auto y = out;
  return detail::record(s, std::move(out), "softmax", {x},
                        [y = std::move(y), outer, inner, len](detail::Node& self) {
                          std::vector<double> d(y.size());
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t in = 0; in < inner; ++in) {
                              const std::size_t base = o * len * inner + in;
                              double dot = 0.0;
                              for (std::size_t k = 0; k < len; ++k)
                                dot += self.grad[base + k * inner] * y[base + k * inner];
                              for (std::size_t k = 0; k < len; ++k) {
                                const std::size_t idx = base + k * inner;
                                d[idx] = y[idx] * (self.grad[idx] - dot);
                              }
                            }
                          }
                          detail::accumulate(self, 0, d);
                        });
}

/// Row-wise layer normalization with learned gain and bias (both length d).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  detail::require_rank2(x, "layer_norm");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " with gain " +
                         shape_str(gain.shape()));
  }
  std::vector<double> xhat(m * n), inv_std(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double c = x[i * n + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (x[i * n + j] - mu) * inv_std[i];
      out[i * n + j] = gain[j] * xhat[i * n + j] + bias[j];
    }
  }
  return detail::record(
      {m, n}, std::move(out), "layer_norm", {x, gain, bias},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), m, n](detail::Node& self) {
        auto& G = detail::parent(self, 1);
        const auto& dy = self.grad;
        if (detail::parent(self, 0).requires_grad) {
          std::vector<double> dx(m * n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = dy[i * n + j] * G.data[j];
              mean_d += dxh;
              mean_dx += dxh * xhat[i * n + j];
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = dy[i * n + j] * G.data[j];
              dx[i * n + j] = inv_std[i] * (dxh - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
          detail::accumulate(self, 0, dx);
        }
        std::vector<double> dg(n, 0.0), db(n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            dg[j] += dy[i * n + j] * xhat[i * n + j];
            db[j] += dy[i * n + j];
          }
        detail::accumulate(self, 1, dg);
        detail::accumulate(self, 2, db);
      });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] / std::numbers::sqrt2));
  }
  return detail::record(x.shape(), std::move(out), "gelu", {x}, [](detail::Node& self) {
    const auto& in = detail::parent(self, 0).data;
    std::vector<double> d(in.size());
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double v = in[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      d[i] = self.grad[i] * (cdf + v * pdf);
    }
    detail::accumulate(self, 0, d);
  });
}

/// Mean over the token (row) axis: m×n -> length-n vector.
inline Tensor mean_rows(const Tensor& x) {
  detail::require_rank2(x, "mean_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
  for (auto& v : out) v /= static_cast<double>(m);
  return detail::record({n}, std::move(out), "mean_rows", {x}, [m, n](detail::Node& self) {
    std::vector<double> d(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) d[i * n + j] = self.grad[j] / static_cast<double>(m);
    detail::accumulate(self, 0, d);
  });
}

/// Gathers rows of a V×d table.
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
  detail::require_rank2(table, "embedding");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  std::vector<double> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v) {
      throw IndexError("embedding: id " + std::to_string(ids[r]) + " outside vocabulary of " +
                       std::to_string(v));
    }
    std::copy_n(table.data().begin() + ids[r] * d, d, out.begin() + r * d);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return detail::record({ids.size(), d}, std::move(out), "embedding", {table},
                        [idx = std::move(idx), v, d](detail::Node& self) {
                          std::vector<double> g(v * d, 0.0);
                          for (std::size_t r = 0; r < idx.size(); ++r)
                            for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += self.grad[r * d + j];
                          detail::accumulate(self, 0, g);
                        });
}

inline Tensor dot(const Tensor& u, const Tensor& v) {
  if (u.numel() != v.numel()) {
    throw DimensionError("dot: " + shape_str(u.shape()) + " vs " + shape_str(v.shape()));
  }
  return sum(mul(reshape(u, {u.numel()}), reshape(v, {v.numel()})));
}

/// u·v / (|u||v|). Inputs are flattened, so any equal-size shapes work.
inline Tensor cosine_sim(const Tensor& u, const Tensor& v) {
  if (u.numel() != v.numel()) {
    throw DimensionError("cosine_sim: " + shape_str(u.shape()) + " vs " + shape_str(v.shape()));
  }
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.numel(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw DegenerateInputError("cosine_sim: zero-norm input");
  const double nu = std::sqrt(uu), nv = std::sqrt(vv);
  const double c = uv / (nu * nv);
  return detail::record({1}, {c}, "cosine_sim", {u, v}, [nu, nv, c](detail::Node& self) {
    const auto& U = detail::parent(self, 0).data;
    const auto& V = detail::parent(self, 1).data;
    const double g = self.grad[0];
    std::vector<double> d(U.size());
    if (detail::parent(self, 0).requires_grad) {
      for (std::size_t i = 0; i < d.size(); ++i)
        d[i] = g * (V[i] / (nu * nv) - c * U[i] / (nu * nu));
      detail::accumulate(self, 0, d);
    }
    if (detail::parent(self, 1).requires_grad) {
      for (std::size_t i = 0; i < d.size(); ++i)
        d[i] = g * (U[i] / (nu * nv) - c * V[i] / (nv * nv));
      detail::accumulate(self, 1, d);
    }
  });
}

/// -log softmax(logits)[label] for a single logit vector.
inline Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  const std::size_t c = logits.numel();
  if (label >= c) {
    throw IndexError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                     std::to_string(c) + " classes");
  }
  double mx = logits[0];
  for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, logits[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < c; ++i) z += std::exp(logits[i] - mx);
  const double loss = mx + std::log(z) - logits[label];
  return detail::record({1}, {std::max(loss, 0.0)}, "cross_entropy", {logits},
                        [label, mx, z, c](detail::Node& self) {
                          const auto& L = detail::parent(self, 0).data;
                          std::vector<double> d(c);
                          for (std::size_t i = 0; i < c; ++i) {
                            d[i] = std::exp(L[i] - mx) / z - (i == label ? 1.0 : 0.0);
                            d[i] *= self.grad[0];
                          }
                          detail::accumulate(self, 0, d);
                        });
}

/// Scales every row to unit L2 norm.
inline Tensor normalize_rows(const Tensor& x) {
  detail::require_rank2(x, "normalize_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  std::vector<double> norms(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x[i * n + j] * x[i * n + j];
    if (s == 0.0) throw DegenerateInputError("normalize_rows: zero-norm row " + std::to_string(i));
    norms[i] = std::sqrt(s);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] / norms[i];
  }
  auto y = out;
  return detail::record({m, n}, std::move(out), "normalize_rows", {x},
                        [y = std::move(y), norms = std::move(norms), m, n](detail::Node& self) {
                          std::vector<double> d(m * n);
                          for (std::size_t i = 0; i < m; ++i) {
                            double dot = 0.0;
                            for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * y[i * n + j];
                            for (std::size_t j = 0; j < n; ++j)
                              d[i * n + j] = (self.grad[i * n + j] - y[i * n + j] * dot) / norms[i];
                          }
                          detail::accumulate(self, 0, d);
                        });
}

/// Mean over rows of -log softmax(logits[i])[labels[i]].
inline Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> labels) {
  detail::require_rank2(logits, "cross_entropy_rows");
  const std::size_t m = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != m) {
    throw DimensionError("cross_entropy_rows: " + std::to_string(labels.size()) + " labels for " +
                         shape_str(logits.shape()));
  }
  std::vector<double> probs(m * c);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] >= c) {
      throw IndexError("cross_entropy_rows: label " + std::to_string(labels[i]) +
                       " out of range for " + std::to_string(c) + " classes");
    }
    double mx = logits[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (probs[i * c + j] = std::exp(logits[i * c + j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    total += std::max(0.0, mx + std::log(z) - logits[i * c + labels[i]]);
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return detail::record({1}, {total / static_cast<double>(m)}, "cross_entropy_rows", {logits},
                        [probs = std::move(probs), lab = std::move(lab), m, c](detail::Node& self) {
                          std::vector<double> d(m * c);
                          const double g = self.grad[0] / static_cast<double>(m);
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < c; ++j)
                              d[i * c + j] = g * (probs[i * c + j] - (j == lab[i] ? 1.0 : 0.0));
                          detail::accumulate(self, 0, d);
                        });
}

}  // namespace comma
