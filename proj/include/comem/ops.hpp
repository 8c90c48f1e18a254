#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "comem/error.hpp"
#include "comem/tape.hpp"

// Differentiable primitives. Vectors are rank-1, matrices rank-2 row-major
// with the temporal axis first ([L x C]); kernels are rank-3 [taps x in x out].

namespace comem {

namespace detail {

// Rows of the k-dimension processed per block, so that one block of the
// right operand stays in cache while every row of the left operand passes.
template <typename T>
std::size_t gemm_block(std::size_t n) {
  return std::max<std::size_t>(1, (std::size_t(1) << 16) / (std::max<std::size_t>(n, 1) * sizeof(T)));
}

// C[m x n] += A[m x k] * B[k x n]. Row strides of A and C are lda and ldc.
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, std::size_t lda = 0, std::size_t ldc = 0) {
  if (lda == 0) lda = k;
  if (ldc == 0) ldc = n;
  const std::size_t kb = gemm_block<T>(n);
  for (std::size_t p0 = 0; p0 < k; p0 += kb) {
    const std::size_t p1 = std::min(k, p0 + kb);
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * ldc;
      for (std::size_t p = p0; p < p1; ++p) {
        const T av = a[i * lda + p];
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

// Dot product with eight fixed-order partial sums (vectorizable, deterministic).
template <typename T>
T dot(const T* x, const T* y, std::size_t n) {
  T lane[8] = {};
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8)
    for (std::size_t l = 0; l < 8; ++l) lane[l] += x[j + l] * y[j + l];
  T acc = ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
  for (; j < n; ++j) acc += x[j] * y[j];
  return acc;
}

// C[m x k] += G[m x n] * B^T, B is [k x n]. Row strides of G and C are ldg and ldc.
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* g, const T* b, T* c, std::size_t ldg = 0, std::size_t ldc = 0) {
  if (ldg == 0) ldg = n;
  if (ldc == 0) ldc = k;
  const std::size_t kb = gemm_block<T>(n);
  for (std::size_t p0 = 0; p0 < k; p0 += kb) {
    const std::size_t p1 = std::min(k, p0 + kb);
    for (std::size_t i = 0; i < m; ++i) {
      const T* grow = g + i * ldg;
      for (std::size_t p = p0; p < p1; ++p) {
        c[i * ldc + p] += dot(grow, b + p * n, n);
      }
    }
  }
}

// C[k x n] += A^T * G, A is [m x k], G is [m x n]. Row strides of A and G are lda and ldg.
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* g, T* c, std::size_t lda = 0, std::size_t ldg = 0) {
  if (lda == 0) lda = k;
  if (ldg == 0) ldg = n;
  const std::size_t kb = gemm_block<T>(n);
  for (std::size_t p0 = 0; p0 < k; p0 += kb) {
    const std::size_t p1 = std::min(k, p0 + kb);
    for (std::size_t i = 0; i < m; ++i) {
      const T* grow = g + i * ldg;
      for (std::size_t p = p0; p < p1; ++p) {
        const T av = a[i * lda + p];
        T* crow = c + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
      }
    }
  }
}

template <typename T>
void require_rank(const Var<T>& v, std::size_t lo, std::size_t hi, const char* op) {
  const auto r = v.shape().rank();
  if (r < lo || r > hi) throw DimensionError(std::string(op) + ": unsupported rank for shape " + v.shape().str());
}

template <typename T>
std::vector<T> copy(std::span<const T> s) {
  return std::vector<T>(s.begin(), s.end());
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= 0) {
    const T z = std::exp(-x);
    return T(1) / (T(1) + z);
  }
  const T z = std::exp(x);
  return z / (T(1) + z);
}

}  // namespace detail

/// Matrix product. A rank-1 left operand is a single row and yields a vector.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_rank(a, 1, 2, "matmul");
  detail::require_rank(b, 2, 2, "matmul");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.cols() != sb.rows()) throw DimensionError("matmul: shape mismatch " + sa.str() + " x " + sb.str());
  const std::size_t m = sa.rows(), k = sa.cols(), n = sb.cols();
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(m, k, n, a.value().data(), b.value().data(), out.data());
  Shape so = sa.rank() == 1 ? Shape{n} : Shape{m, n};
  const auto ai = a.id(), bi = b.id();
  return a.tape().emit(std::move(so), std::move(out), {a, b}, [ai, bi, m, k, n](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.requires_grad(ai)) detail::gemm_nt(m, n, k, g.data(), t.value(bi).data(), t.grad(ai).data());
    if (t.requires_grad(bi)) detail::gemm_tn(m, k, n, t.value(ai).data(), g.data(), t.grad(bi).data());
  });
}

/// Broadcast a bias vector over the rows of x (or plain addition for a vector x).
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> b) {
  detail::require_rank(x, 1, 2, "add_bias");
  detail::require_rank(b, 1, 1, "add_bias");
  const std::size_t rows = x.shape().rows(), cols = x.shape().cols();
  if (b.shape()[0] != cols) throw DimensionError("add_bias: shape mismatch " + x.shape().str() + " + " + b.shape().str());
  auto out = detail::copy(x.value());
  auto bv = b.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  const auto xi = x.id(), bi = b.id();
  return x.tape().emit(x.shape(), std::move(out), {x, b}, [xi, bi, rows, cols](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.requires_grad(xi)) {
      auto gx = t.grad(xi);
      for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
    }
    if (t.requires_grad(bi)) {
      auto gb = t.grad(bi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
    }
  });
}

/// y = x W (+ b): x is [Din] (or rows [R x Din]), W is [Din x Dout].
template <typename T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> b = {}) {
  auto y = matmul(x, w);
  return b.valid() ? add_bias(y, b) : y;
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "add");
  auto out = detail::copy(a.value());
  auto bv = b.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += bv[k];
  const auto ai = a.id(), bi = b.id();
  return a.tape().emit(a.shape(), std::move(out), {a, b}, [ai, bi](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    for (auto id : {ai, bi}) {
      if (!t.requires_grad(id)) continue;
      auto gi = t.grad(id);
      for (std::size_t k = 0; k < g.size(); ++k) gi[k] += g[k];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  auto out = detail::copy(a.value());
  auto bv = b.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] -= bv[k];
  const auto ai = a.id(), bi = b.id();
  return a.tape().emit(a.shape(), std::move(out), {a, b}, [ai, bi](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.requires_grad(ai)) {
      auto ga = t.grad(ai);
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
    }
    if (t.requires_grad(bi)) {
      auto gb = t.grad(bi);
      for (std::size_t k = 0; k < g.size(); ++k) gb[k] -= g[k];
    }
  });
}

/// Element-wise (Hadamard) product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  auto av = a.value(), bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = av[k] * bv[k];
  const auto ai = a.id(), bi = b.id();
  return a.tape().emit(a.shape(), std::move(out), {a, b}, [ai, bi](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.requires_grad(ai)) {
      auto ga = t.grad(ai);
      auto bv = t.value(bi);
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * bv[k];
    }
    if (t.requires_grad(bi)) {
      auto gb = t.grad(bi);
      auto av = t.value(ai);
      for (std::size_t k = 0; k < g.size(); ++k) gb[k] += g[k] * av[k];
    }
  });
}

/// y = c * x + d for constants c, d.
template <typename T>
Var<T> scale_shift(Var<T> x, T c, T d = T(0)) {
  auto xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = c * xv[k] + d;
  const auto xi = x.id();
  return x.tape().emit(x.shape(), std::move(out), {x}, [xi, c](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(xi);
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += c * g[k];
  });
}

namespace detail {

// Unary map whose derivative is expressed through the output value y.
template <typename T, typename Fwd, typename DyDx>
Var<T> unary(Var<T> x, Fwd fwd, DyDx dydx) {
  auto xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = fwd(xv[k]);
  const auto xi = x.id();
  return x.tape().emit(x.shape(), std::move(out), {x}, [xi, dydx](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto y = t.value(self);
    auto gx = t.grad(xi);
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * dydx(y[k]);
  });
}

}  // namespace detail

template <typename T>
Var<T> tanh(Var<T> x) {
  return detail::unary(x, [](T v) { return std::tanh(v); }, [](T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return detail::unary(x, [](T v) { return detail::stable_sigmoid(v); }, [](T y) { return y * (T(1) - y); });
}

/// ReLU; the subgradient at 0 is 0. NaN passes through.
template <typename T>
Var<T> relu(Var<T> x) {
  return detail::unary(x, [](T v) { return v < T(0) ? T(0) : v; }, [](T y) { return y > T(0) ? T(1) : T(0); });
}

/// Concatenate along `axis`. Vectors join end to end (axis 0); matrices
/// stack rows (axis 0) or join columns (axis 1).
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis = 0) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const auto rank = parts[0].shape().rank();
  for (const auto& p : parts) {
    if (p.shape().rank() != rank) throw DimensionError("concat: rank mismatch " + parts[0].shape().str() + " vs " + p.shape().str());
  }
  if (rank == 1 || (rank == 2 && axis == 0)) {
    if (rank == 1 && axis != 0) throw DimensionError("concat: vectors only concatenate along axis 0");
    std::size_t lead = 0;
    const std::size_t cols = parts[0].shape().cols();
    std::vector<T> out;
    std::vector<std::size_t> offsets, ids;
    for (const auto& p : parts) {
      if (rank == 2 && p.shape().cols() != cols)
        throw DimensionError("concat: column mismatch " + parts[0].shape().str() + " vs " + p.shape().str());
      offsets.push_back(out.size());
      ids.push_back(p.id());
      auto v = p.value();
      out.insert(out.end(), v.begin(), v.end());
      lead += rank == 1 ? p.shape()[0] : p.shape()[0];
    }
    Shape so = rank == 1 ? Shape{lead} : Shape{lead, cols};
    return parts[0].tape().emit(std::move(so), std::move(out), parts, [ids, offsets](Tape<T>& t, std::size_t self) {
      auto g = t.grad(self);
      for (std::size_t p = 0; p < ids.size(); ++p) {
        if (!t.requires_grad(ids[p])) continue;
        auto gp = t.grad(ids[p]);
        for (std::size_t k = 0; k < gp.size(); ++k) gp[k] += g[offsets[p] + k];
      }
    });
  }
  if (rank != 2 || axis != 1) throw DimensionError("concat: unsupported axis");
  const std::size_t rows = parts[0].shape()[0];
  std::size_t total = 0;
  std::vector<std::size_t> widths, ids;
  for (const auto& p : parts) {
    if (p.shape()[0] != rows) throw DimensionError("concat: row mismatch " + parts[0].shape().str() + " vs " + p.shape().str());
    widths.push_back(p.shape()[1]);
    ids.push_back(p.id());
    total += p.shape()[1];
  }
  std::vector<T> out(rows * total);
  for (std::size_t r = 0, off = 0; r < rows; ++r) {
    off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      auto v = parts[p].value();
      std::copy_n(v.begin() + r * widths[p], widths[p], out.begin() + r * total + off);
      off += widths[p];
    }
  }
  return parts[0].tape().emit(Shape{rows, total}, std::move(out), parts,
                              [ids, widths, rows, total](Tape<T>& t, std::size_t self) {
                                auto g = t.grad(self);
                                std::size_t off = 0;
                                for (std::size_t p = 0; p < ids.size(); ++p) {
                                  if (t.requires_grad(ids[p])) {
                                    auto gp = t.grad(ids[p]);
                                    for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t c = 0; c < widths[p]; ++c)
                                        gp[r * widths[p] + c] += g[r * total + off + c];
                                  }
                                  off += widths[p];
                                }
                              });
}

/// Stack equal-length vectors as the rows of a matrix.
template <typename T>
Var<T> stack(const std::vector<Var<T>>& rows) {
  if (rows.empty()) throw DimensionError("stack: no inputs");
  const auto n = rows[0].shape().numel();
  for (const auto& r : rows) {
    if (r.shape().rank() != 1 || r.shape()[0] != n) throw DimensionError("stack: expected vectors of length " + std::to_string(n) + ", got " + r.shape().str());
  }
  auto flat = concat(rows, 0);
  return reshape(flat, Shape{rows.size(), n});
}

template <typename T>
Var<T> reshape(Var<T> x, Shape s) {
  if (s.numel() != x.shape().numel()) throw DimensionError("reshape: " + x.shape().str() + " -> " + s.str());
  const auto xi = x.id();
  return x.tape().emit(std::move(s), detail::copy(x.value()), {x}, [xi](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(xi);
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
  });
}

/// Rows [begin, begin + count) of a matrix.
template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t count) {
  detail::require_rank(x, 2, 2, "slice_rows");
  const std::size_t cols = x.shape()[1];
  if (count == 0 || begin + count > x.shape()[0]) throw DimensionError("slice_rows: range out of bounds for " + x.shape().str());
  auto v = x.value();
  std::vector<T> out(v.begin() + begin * cols, v.begin() + (begin + count) * cols);
  const auto xi = x.id();
  const std::size_t off = begin * cols;
  return x.tape().emit(Shape{count, cols}, std::move(out), {x}, [xi, off](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(xi);
    for (std::size_t k = 0; k < g.size(); ++k) gx[off + k] += g[k];
  });
}

/// Row j of a matrix as a vector.
template <typename T>
Var<T> row(Var<T> x, std::size_t j) {
  detail::require_rank(x, 2, 2, "row");
  return reshape(slice_rows(x, j, 1), Shape{x.shape()[1]});
}

/// Element j of a vector as a length-1 tensor.
template <typename T>
Var<T> element(Var<T> x, std::size_t j) {
  if (j >= x.shape().numel()) throw DimensionError("element: index " + std::to_string(j) + " outside " + x.shape().str());
  const auto xi = x.id();
  return x.tape().emit(Shape{1}, std::vector<T>{x.value()[j]}, {x}, [xi, j](Tape<T>& t, std::size_t self) {
    t.grad(xi)[j] += t.grad(self)[0];
  });
}

/// x * s where s is a length-1 tensor.
template <typename T>
Var<T> mul_scalar(Var<T> x, Var<T> s) {
  if (s.shape().numel() != 1) throw DimensionError("mul_scalar: expected scalar, got " + s.shape().str());
  const T sv = s.value()[0];
  auto xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = xv[k] * sv;
  const auto xi = x.id(), si = s.id();
  return x.tape().emit(x.shape(), std::move(out), {x, s}, [xi, si](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    const T sv = t.value(si)[0];
    if (t.requires_grad(xi)) {
      auto gx = t.grad(xi);
      for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * sv;
    }
    if (t.requires_grad(si)) {
      auto xv = t.value(xi);
      T acc = 0;
      for (std::size_t k = 0; k < g.size(); ++k) acc += g[k] * xv[k];
      t.grad(si)[0] += acc;
    }
  });
}

/// diag(w) * x: scale row r of x[L x C] by w[r].
template <typename T>
Var<T> scale_rows(Var<T> x, Var<T> w) {
  detail::require_rank(x, 2, 2, "scale_rows");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (w.shape().rank() != 1 || w.shape()[0] != rows)
    throw DimensionError("scale_rows: shape mismatch " + x.shape().str() + " vs " + w.shape().str());
  auto xv = x.value();
  auto wv = w.value();
  std::vector<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] * wv[r];
  const auto xi = x.id(), wi = w.id();
  return x.tape().emit(x.shape(), std::move(out), {x, w}, [xi, wi, rows, cols](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.requires_grad(xi)) {
      auto gx = t.grad(xi);
      auto wv = t.value(wi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] * wv[r];
    }
    if (t.requires_grad(wi)) {
      auto gw = t.grad(wi);
      auto xv = t.value(xi);
      for (std::size_t r = 0; r < rows; ++r) {
        T acc = 0;
        for (std::size_t c = 0; c < cols; ++c) acc += g[r * cols + c] * xv[r * cols + c];
        gw[r] += acc;
      }
    }
  });
}

/// Sum of all elements as a length-1 tensor.
template <typename T>
Var<T> sum(Var<T> x) {
  T acc = 0;
  for (auto v : x.value()) acc += v;
  const auto xi = x.id();
  return x.tape().emit(Shape{1}, std::vector<T>{acc}, {x}, [xi](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    for (auto& v : t.grad(xi)) v += g;
  });
}

/// Mean of a matrix along `axis` (0: over rows, giving a vector of column
/// means; 1: over columns, giving a vector of row means).
template <typename T>
Var<T> mean(Var<T> x, std::size_t axis) {
  detail::require_rank(x, 2, 2, "mean");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (axis > 1) throw DimensionError("mean: axis must be 0 or 1");
  auto xv = x.value();
  const std::size_t n = axis == 0 ? cols : rows;
  const T inv = T(1) / T(axis == 0 ? rows : cols);
  std::vector<T> out(n, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[axis == 0 ? c : r] += xv[r * cols + c];
  for (auto& v : out) v *= inv;
  const auto xi = x.id();
  return x.tape().emit(Shape{n}, std::move(out), {x}, [xi, rows, cols, axis, inv](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[axis == 0 ? c : r] * inv;
  });
}

/// Softmax with max subtraction. For a vector the whole vector is normalized;
/// for a matrix, axis 0 normalizes each column over its rows and axis 1 each
/// row over its columns.
template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis = 0) {
  detail::require_rank(x, 1, 2, "softmax");
  std::size_t groups, len, gstride, estride;
  if (x.shape().rank() == 1) {
    if (axis != 0) throw GeometryError("softmax: vectors only have axis 0");
    groups = 1, len = x.shape()[0], gstride = 0, estride = 1;
  } else {
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    if (axis == 0) groups = cols, len = rows, gstride = 1, estride = cols;
    else if (axis == 1) groups = rows, len = cols, gstride = cols, estride = 1;
    else throw GeometryError("softmax: axis must be 0 or 1");
  }
  auto xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t base = gi * gstride;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t e = 0; e < len; ++e) mx = std::max(mx, xv[base + e * estride]);
    T z = 0;
    for (std::size_t e = 0; e < len; ++e) {
      const T v = std::exp(xv[base + e * estride] - mx);
      out[base + e * estride] = v;
      z += v;
    }
    for (std::size_t e = 0; e < len; ++e) out[base + e * estride] /= z;
  }
  const auto xi = x.id();
  return x.tape().emit(x.shape(), std::move(out), {x}, [=](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto y = t.value(self);
    auto gx = t.grad(xi);
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = gi * gstride;
      T dot = 0;
      for (std::size_t e = 0; e < len; ++e) dot += g[base + e * estride] * y[base + e * estride];
      for (std::size_t e = 0; e < len; ++e) {
        const std::size_t k = base + e * estride;
        gx[k] += y[k] * (g[k] - dot);
      }
    }
  });
}

/// -log softmax(logits)[label] as a length-1 tensor.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::size_t label) {
  detail::require_rank(logits, 1, 1, "cross_entropy");
  const std::size_t n = logits.shape()[0];
  if (label >= n) throw DomainError("cross_entropy: label " + std::to_string(label) + " outside " + std::to_string(n) + " classes");
  auto lv = logits.value();
  const T mx = *std::max_element(lv.begin(), lv.end());
  T z = 0;
  for (auto v : lv) z += std::exp(v - mx);
  const T loss = std::log(z) + mx - lv[label];
  const auto li = logits.id();
  return logits.tape().emit(Shape{1}, std::vector<T>{loss}, {logits}, [li, label, mx, z](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    auto lv = t.value(li);
    auto gl = t.grad(li);
    for (std::size_t k = 0; k < lv.size(); ++k) gl[k] += g * std::exp(lv[k] - mx) / z;
    gl[label] -= g;
  });
}

/// Rows of `table` selected by `ids`, as an [n x E] matrix. Backward
/// scatter-adds into the selected rows.
template <typename T>
Var<T> gather_rows(Var<T> table, const std::vector<std::size_t>& ids) {
  detail::require_rank(table, 2, 2, "gather_rows");
  if (ids.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t rows = table.shape()[0], cols = table.shape()[1];
  auto tv = table.value();
  std::vector<T> out(ids.size() * cols);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) throw DimensionError("gather_rows: row " + std::to_string(ids[i]) + " outside " + table.shape().str());
    std::copy_n(tv.begin() + ids[i] * cols, cols, out.begin() + i * cols);
  }
  const auto ti = table.id();
  return table.tape().emit(Shape{ids.size(), cols}, std::move(out), {table}, [ti, ids, cols](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto gt = t.grad(ti);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t c = 0; c < cols; ++c) gt[ids[i] * cols + c] += g[i * cols + c];
  });
}

/// Output length of a strided temporal convolution.
inline std::size_t conv1d_output_length(std::size_t length, std::size_t taps, std::size_t stride, std::size_t pad) {
  if (taps < 1 || stride < 1) throw GeometryError("conv1d: taps and stride must be >= 1");
  if (length + 2 * pad < taps)
    throw GeometryError("conv1d: output length < 1 (L=" + std::to_string(length) + ", k=" + std::to_string(taps) +
                        ", pad=" + std::to_string(pad) + ")");
  return (length + 2 * pad - taps) / stride + 1;
}

namespace detail {

// Output steps [lo, hi) whose tap r reads an input row inside [0, len).
inline std::pair<std::size_t, std::size_t> conv_tap_range(std::size_t len, std::size_t out_len, std::size_t stride, std::size_t pad,
                                                          std::size_t r) {
  const std::size_t lo = pad > r ? (pad - r + stride - 1) / stride : 0;
  if (len + pad <= r) return {0, 0};
  const std::size_t hi = std::min(out_len, (len - 1 + pad - r) / stride + 1);
  return {lo, std::max(lo, hi)};
}

}  // namespace detail

/// Temporal convolution (cross-correlation) of x[L x Cin] with kernel
/// [k x Cin x Cout], zero padding `pad` on both edges.
template <typename T>
Var<T> conv1d_temporal(Var<T> x, Var<T> kernel, std::size_t stride, std::size_t pad) {
  detail::require_rank(x, 2, 2, "conv1d_temporal");
  if (kernel.shape().rank() != 3) throw DimensionError("conv1d_temporal: kernel must be [k x Cin x Cout], got " + kernel.shape().str());
  const std::size_t len = x.shape()[0], cin = x.shape()[1];
  const std::size_t taps = kernel.shape()[0], cout = kernel.shape()[2];
  if (kernel.shape()[1] != cin) throw DimensionError("conv1d_temporal: shape mismatch " + x.shape().str() + " vs kernel " + kernel.shape().str());
  const std::size_t out_len = conv1d_output_length(len, taps, stride, pad);
  std::vector<T> out(out_len * cout, T(0));
  auto xv = x.value();
  auto kv = kernel.value();
  // One product per tap over every output step it reaches.
  for (std::size_t r = 0; r < taps; ++r) {
    const auto [lo, hi] = detail::conv_tap_range(len, out_len, stride, pad, r);
    if (lo == hi) continue;
    const std::size_t src = lo * stride + r - pad;
    detail::gemm_nn(hi - lo, cin, cout, xv.data() + src * cin, kv.data() + r * cin * cout, out.data() + lo * cout, stride * cin, cout);
  }
  const auto xi = x.id(), ki = kernel.id();
  return x.tape().emit(Shape{out_len, cout}, std::move(out), {x, kernel},
                       [=](Tape<T>& tp, std::size_t self) {
                         auto g = tp.grad(self);
                         auto xv = tp.value(xi);
                         auto kv = tp.value(ki);
                         for (std::size_t r = 0; r < taps; ++r) {
                           const auto [lo, hi] = detail::conv_tap_range(len, out_len, stride, pad, r);
                           if (lo == hi) continue;
                           const std::size_t src = lo * stride + r - pad;
                           if (tp.requires_grad(xi))
                             detail::gemm_nt(hi - lo, cout, cin, g.data() + lo * cout, kv.data() + r * cin * cout,
                                             tp.grad(xi).data() + src * cin, cout, stride * cin);
                           if (tp.requires_grad(ki))
                             detail::gemm_tn(hi - lo, cin, cout, xv.data() + src * cin, g.data() + lo * cout,
                                             tp.grad(ki).data() + r * cin * cout, stride * cin, cout);
                         }
                       });
}

/// Transposed temporal convolution: the adjoint of a stride-s, unpadded
/// conv1d, producing (L-1)*s + k rows, then trimmed on the right to
/// `target_len`, which must lie in [s*(L-1)+1, s*L].
template <typename T>
Var<T> deconv1d_temporal(Var<T> x, Var<T> kernel, std::size_t stride, std::size_t target_len) {
  detail::require_rank(x, 2, 2, "deconv1d_temporal");
  if (kernel.shape().rank() != 3) throw DimensionError("deconv1d_temporal: kernel must be [k x Cin x Cout], got " + kernel.shape().str());
  const std::size_t len = x.shape()[0], cin = x.shape()[1];
  const std::size_t taps = kernel.shape()[0], cout = kernel.shape()[2];
  if (kernel.shape()[1] != cin) throw DimensionError("deconv1d_temporal: shape mismatch " + x.shape().str() + " vs kernel " + kernel.shape().str());
  if (stride < 1) throw GeometryError("deconv1d_temporal: stride must be >= 1");
  const std::size_t full = (len - 1) * stride + taps;
  if (target_len < stride * (len - 1) + 1 || target_len > stride * len || target_len > full)
    throw GeometryError("deconv1d_temporal: target length " + std::to_string(target_len) + " not admissible for L=" +
                        std::to_string(len) + ", stride " + std::to_string(stride) + ", k=" + std::to_string(taps));
  // Input rows i whose tap r lands inside the trimmed output: i * stride + r < target_len.
  auto reach = [=](std::size_t r) { return r >= target_len ? std::size_t(0) : std::min(len, (target_len - r + stride - 1) / stride); };
  std::vector<T> out(target_len * cout, T(0));
  auto xv = x.value();
  auto kv = kernel.value();
  for (std::size_t r = 0; r < taps; ++r)
    detail::gemm_nn(reach(r), cin, cout, xv.data(), kv.data() + r * cin * cout, out.data() + r * cout, cin, stride * cout);
  const auto xi = x.id(), ki = kernel.id();
  return x.tape().emit(Shape{target_len, cout}, std::move(out), {x, kernel},
                       [=](Tape<T>& tp, std::size_t self) {
                         auto g = tp.grad(self);
                         auto xv = tp.value(xi);
                         auto kv = tp.value(ki);
                         for (std::size_t r = 0; r < taps; ++r) {
                           const std::size_t m = reach(r);
                           if (tp.requires_grad(xi))
                             detail::gemm_nt(m, cout, cin, g.data() + r * cout, kv.data() + r * cin * cout, tp.grad(xi).data(),
                                             stride * cout, cin);
                           if (tp.requires_grad(ki))
                             detail::gemm_tn(m, cin, cout, xv.data(), g.data() + r * cout, tp.grad(ki).data() + r * cin * cout, cin,
                                             stride * cout);
                         }
                       });
}

/// Output length of max pooling; a trailing partial window is kept.
inline std::size_t maxpool1d_output_length(std::size_t length, std::size_t window, std::size_t stride) {
  if (length < 1 || window < 1 || stride < 1) throw GeometryError("maxpool1d: length, window and stride must be >= 1");
  if (length <= window) return 1;
  return (length - window + stride - 1) / stride + 1;
}

/// Temporal max pooling over x[L x C]. Gradient goes to the earliest argmax.
template <typename T>
Var<T> maxpool1d(Var<T> x, std::size_t window = 2, std::size_t stride = 2) {
  detail::require_rank(x, 2, 2, "maxpool1d");
  const std::size_t len = x.shape()[0], ch = x.shape()[1];
  const std::size_t out_len = maxpool1d_output_length(len, window, stride);
  auto xv = x.value();
  std::vector<T> out(out_len * ch);
  std::vector<std::size_t> arg(out_len * ch);
  for (std::size_t t = 0; t < out_len; ++t) {
    const std::size_t lo = t * stride, hi = std::min(len, lo + window);
    for (std::size_t c = 0; c < ch; ++c) {
      std::size_t best = lo;
      for (std::size_t s = lo + 1; s < hi; ++s)
        if (xv[s * ch + c] > xv[best * ch + c] || std::isnan(xv[s * ch + c])) best = s;
      out[t * ch + c] = xv[best * ch + c];
      arg[t * ch + c] = best * ch + c;
    }
  }
  const auto xi = x.id();
  return x.tape().emit(Shape{out_len, ch}, std::move(out), {x}, [xi, arg = std::move(arg)](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(xi);
    for (std::size_t k = 0; k < g.size(); ++k) gx[arg[k]] += g[k];
  });
}

}  // namespace comem
