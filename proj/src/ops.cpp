#include "changetitans/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

namespace ctitans {

namespace {

std::vector<Scalar>* grad_of(Node& self, std::size_t i) {
  auto& n = self.inputs[i];
  return n->requires_grad ? &n->ensure_grad() : nullptr;
}

const std::vector<Scalar>& data_of(const Node& self, std::size_t i) {
  return self.inputs[i]->data;
}

// Dot product with four independent accumulators (fixed order, so results
// are reproducible but may differ from a naive left-to-right sum).
inline Scalar dot(const Scalar* a, const Scalar* b, std::size_t n) {
  Scalar s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    s0 += a[j] * b[j];
    s1 += a[j + 1] * b[j + 1];
    s2 += a[j + 2] * b[j + 2];
    s3 += a[j + 3] * b[j + 3];
  }
  for (; j < n; ++j) s0 += a[j] * b[j];
  return (s0 + s1) + (s2 + s3);
}

inline void axpy(Scalar a, const Scalar* __restrict x, Scalar* __restrict y, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) y[j] += a * x[j];
}

// y += a0 x0 + a1 x1 + a2 x2 + a3 x3
inline void axpy4(const Scalar* a, const Scalar* __restrict x0, const Scalar* __restrict x1,
                  const Scalar* __restrict x2, const Scalar* __restrict x3, Scalar* __restrict y,
                  std::size_t n) {
  const Scalar a0 = a[0], a1 = a[1], a2 = a[2], a3 = a[3];
  for (std::size_t j = 0; j < n; ++j) y[j] += (a0 * x0[j] + a1 * x1[j]) + (a2 * x2[j] + a3 * x3[j]);
}

// C[m,n] += A[m,k] B[k,n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const Scalar* A, const Scalar* B, Scalar* C) {
  for (std::size_t i = 0; i < m; ++i) {
    const Scalar* a = A + i * k;
    Scalar* c = C + i * n;
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4)
      axpy4(a + p, B + p * n, B + (p + 1) * n, B + (p + 2) * n, B + (p + 3) * n, c, n);
    for (; p < k; ++p) axpy(a[p], B + p * n, c, n);
  }
}

// C[m,k] += A[m,n] B[k,n]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const Scalar* A, const Scalar* B, Scalar* C) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) C[i * k + p] += dot(A + i * n, B + p * n, n);
}

// C[k,n] += A[m,k]^T B[m,n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const Scalar* A, const Scalar* B, Scalar* C) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const Scalar* b0 = B + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar a[4] = {A[i * k + p], A[(i + 1) * k + p], A[(i + 2) * k + p], A[(i + 3) * k + p]};
      axpy4(a, b0, b0 + n, b0 + 2 * n, b0 + 3 * n, C + p * n, n);
    }
  }
  for (; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) axpy(A[i * k + p], B + i * n, C + p * n, n);
}

struct Broadcast {
  Shape out;
  bool same = false;
  std::vector<std::size_t> ia, ib;
};

std::shared_ptr<Broadcast> make_broadcast(const Shape& a, const Shape& b) {
  auto bc = std::make_shared<Broadcast>();
  if (a == b) {
    bc->same = true;
    bc->out = a;
    return bc;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r), pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  for (std::size_t d = 0; d < r; ++d) {
    if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1)
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    out[d] = std::max(pa[d], pb[d]);
  }
  std::vector<std::size_t> sa(r, 0), sb(r, 0);
  std::size_t accA = 1, accB = 1;
  for (std::size_t d = r; d-- > 0;) {
    sa[d] = pa[d] == 1 ? 0 : accA;
    sb[d] = pb[d] == 1 ? 0 : accB;
    accA *= pa[d];
    accB *= pb[d];
  }
  const std::size_t n = numel(out);
  bc->ia.resize(n);
  bc->ib.resize(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bc->ia[i] = oa;
    bc->ib[i] = ob;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * idx[d];
      ob -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  bc->out = std::move(out);
  return bc;
}

// f(a, b) -> out; da/db give the local partials given (a, b, out).
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  auto bc = make_broadcast(a.shape(), b.shape());
  const auto& A = a.data();
  const auto& B = b.data();
  const std::size_t n = numel(bc->out);
  std::vector<Scalar> out(n);
  if (bc->same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(A[i], B[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(A[bc->ia[i]], B[bc->ib[i]]);
  }
  return make_result(bc->out, std::move(out), {a, b}, [bc, da, db](Node& self) {
    const auto& A = data_of(self, 0);
    const auto& B = data_of(self, 1);
    const auto& G = self.grad;
    const auto& Y = self.data;
    auto* ga = grad_of(self, 0);
    auto* gb = grad_of(self, 1);
    const std::size_t n = G.size();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t ja = bc->same ? i : bc->ia[i];
      const std::size_t jb = bc->same ? i : bc->ib[i];
      if (ga) (*ga)[ja] += G[i] * da(A[ja], B[jb], Y[i]);
      if (gb) (*gb)[jb] += G[i] * db(A[ja], B[jb], Y[i]);
    }
  });
}

// f(x) -> y; d(x, y) gives dy/dx.
template <class F, class D>
Tensor unary(const Tensor& x, F f, D d) {
  const auto& X = x.data();
  std::vector<Scalar> out(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = f(X[i]);
  return make_result(x.shape(), std::move(out), {x}, [d](Node& self) {
    const auto& X = data_of(self, 0);
    auto* gx = grad_of(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < X.size(); ++i) (*gx)[i] += self.grad[i] * d(X[i], self.data[i]);
  });
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t d = 0; d < axis; ++d) r.outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) r.inner *= s[d];
  return r;
}

Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape out = s;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

void require_rank(const Tensor& x, std::size_t r, const char* op) {
  if (x.rank() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     to_string(x.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](Scalar x, Scalar y) { return x + y; }, [](Scalar, Scalar, Scalar) { return 1.0; },
      [](Scalar, Scalar, Scalar) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](Scalar x, Scalar y) { return x - y; }, [](Scalar, Scalar, Scalar) { return 1.0; },
      [](Scalar, Scalar, Scalar) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](Scalar x, Scalar y) { return x * y; }, [](Scalar, Scalar y, Scalar) { return y; },
      [](Scalar x, Scalar, Scalar) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](Scalar x, Scalar y) { return x / y; },
      [](Scalar, Scalar y, Scalar) { return 1.0 / y; },
      [](Scalar x, Scalar y, Scalar) { return -x / (y * y); });
}

Tensor scale(const Tensor& x, Scalar c) {
  return unary(x, [c](Scalar v) { return v * c; }, [c](Scalar, Scalar) { return c; });
}

Tensor add_scalar(const Tensor& x, Scalar c) {
  return unary(x, [c](Scalar v) { return v + c; }, [](Scalar, Scalar) { return 1.0; });
}

Tensor neg(const Tensor& x) {
  return unary(x, [](Scalar v) { return -v; }, [](Scalar, Scalar) { return -1.0; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](Scalar v) { return std::log(v); }, [](Scalar v, Scalar) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return std::sqrt(v); }, [](Scalar, Scalar y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
  return unary(x, [](Scalar v) { return v * v; }, [](Scalar v, Scalar) { return 2.0 * v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return std::abs(v); },
      [](Scalar v, Scalar) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](Scalar v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const Scalar e = std::exp(v);
        return e / (1.0 + e);
      },
      [](Scalar, Scalar y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return std::tanh(v); }, [](Scalar, Scalar y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return v > 0 ? v : 0.0; },
      [](Scalar v, Scalar) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr Scalar kInvSqrt2 = 0.70710678118654752440;
  constexpr Scalar kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      x, [](Scalar v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](Scalar v, Scalar) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return v > 30 ? v : std::log1p(std::exp(v)); },
      [](Scalar v, Scalar) { return 1.0 / (1.0 + std::exp(-v)); });
}

Tensor clamp(const Tensor& x, Scalar lo, Scalar hi) {
  return unary(
      x, [lo, hi](Scalar v) { return std::clamp(v, lo, hi); },
      [lo, hi](Scalar v, Scalar) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  Scalar s = 0;
  for (auto v : x.data()) s += v;
  return make_result(Shape{}, {s}, {x}, [](Node& self) {
    auto* gx = grad_of(self, 0);
    if (!gx) return;
    for (auto& g : *gx) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<Scalar>(x.numel())); }

Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  const auto sp = split_axis(x.shape(), axis);
  const auto& X = x.data();
  std::vector<Scalar> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += X[(o * sp.n + k) * sp.inner + i];
  return make_result(reduced_shape(x.shape(), axis, keepdim), std::move(out), {x},
                     [sp](Node& self) {
                       auto* gx = grad_of(self, 0);
                       if (!gx) return;
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t k = 0; k < sp.n; ++k)
                           for (std::size_t i = 0; i < sp.inner; ++i)
                             (*gx)[(o * sp.n + k) * sp.inner + i] += self.grad[o * sp.inner + i];
                     });
}

Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  const auto n = split_axis(x.shape(), axis).n;
  return scale(sum_axis(x, axis, keepdim), 1.0 / static_cast<Scalar>(n));
}

Tensor max_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  const auto sp = split_axis(x.shape(), axis);
  const auto& X = x.data();
  std::vector<Scalar> out(sp.outer * sp.inner);
  auto arg = std::make_shared<std::vector<std::size_t>>(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = (o * sp.n) * sp.inner + i;
      for (std::size_t k = 1; k < sp.n; ++k) {
        const std::size_t j = (o * sp.n + k) * sp.inner + i;
        if (X[j] > X[best]) best = j;
      }
      out[o * sp.inner + i] = X[best];
      (*arg)[o * sp.inner + i] = best;
    }
  return make_result(reduced_shape(x.shape(), axis, keepdim), std::move(out), {x},
                     [arg](Node& self) {
                       auto* gx = grad_of(self, 0);
                       if (!gx) return;
                       for (std::size_t i = 0; i < arg->size(); ++i)
                         (*gx)[(*arg)[i]] += self.grad[i];
                     });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  const bool shared_b = b.rank() == 2;
  bool ok = k == k2;
  if (!shared_b) {
    ok = ok && a.rank() == b.rank() &&
         std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin());
  }
  if (!ok)
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  std::size_t batch = 1;
  for (std::size_t d = 0; d + 2 < a.rank(); ++d) batch *= a.dim(d);
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);

  // Shared b: fold the batch into rows.
  const std::size_t rows = shared_b ? batch * m : m;
  const std::size_t nb = shared_b ? 1 : batch;
  const auto& A = a.data();
  const auto& B = b.data();
  std::vector<Scalar> C(batch * m * n, 0.0);
  for (std::size_t q = 0; q < nb; ++q)
    gemm_nn(rows, k, n, A.data() + q * rows * k, B.data() + q * k * n, C.data() + q * rows * n);
  return make_result(std::move(out_shape), std::move(C), {a, b},
                     [rows, nb, k, n](Node& self) {
                       const auto& A = data_of(self, 0);
                       const auto& B = data_of(self, 1);
                       const auto& G = self.grad;
                       auto* ga = grad_of(self, 0);
                       auto* gb = grad_of(self, 1);
                       for (std::size_t q = 0; q < nb; ++q) {
                         const Scalar* Gp = G.data() + q * rows * n;
                         if (ga) gemm_nt(rows, k, n, Gp, B.data() + q * k * n, ga->data() + q * rows * k);
                         if (gb) gemm_tn(rows, k, n, A.data() + q * rows * k, Gp, gb->data() + q * k * n);
                       }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  return make_result(std::move(shape), x.to_vector(), {x}, [](Node& self) {
    auto* gx = grad_of(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += self.grad[i];
  });
}

Tensor gather(const Tensor& x, std::vector<std::size_t> index, Shape shape) {
  if (numel(shape) != index.size())
    throw ShapeError("gather: index count does not match " + to_string(shape));
  const auto& X = x.data();
  std::vector<Scalar> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] == kGatherZero) {
      out[i] = 0.0;
    } else {
      if (index[i] >= X.size()) throw ShapeError("gather: index out of range");
      out[i] = X[index[i]];
    }
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(index));
  return make_result(std::move(shape), std::move(out), {x}, [idx](Node& self) {
    auto* gx = grad_of(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < idx->size(); ++i)
      if ((*idx)[i] != kGatherZero) (*gx)[(*idx)[i]] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const auto& s = x.shape();
  const std::size_t r = s.size();
  if (perm.size() != r) throw ShapeError("permute: rank mismatch for " + to_string(s));
  std::vector<bool> used(r, false);
  for (auto p : perm) {
    if (p >= r || used[p]) throw ShapeError("permute: invalid axis order");
    used[p] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t d = r; d-- > 1;) in_stride[d - 1] = in_stride[d] * s[d];
  Shape out(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t d = 0; d < r; ++d) {
    out[d] = s[perm[d]];
    stride[d] = in_stride[perm[d]];
  }
  const std::size_t n = x.numel();
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> ctr(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    index[i] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++ctr[d];
      off += stride[d];
      if (ctr[d] < out[d]) break;
      off -= stride[d] * ctr[d];
      ctr[d] = 0;
    }
  }
  return gather(x, std::move(index), std::move(out));
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose: rank < 2 for " + to_string(x.shape()));
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + to_string(s0));
  Shape out = s0;
  out[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d)
      if (d != axis && s[d] != s0[d]) ok = false;
    if (!ok) throw ShapeError("concat: " + to_string(s) + " incompatible with " + to_string(s0));
    out[axis] += s[axis];
  }
  const auto sp = split_axis(out, axis);
  for (const auto& p : parts) widths.push_back(p.dim(axis) * sp.inner);
  const std::size_t row = sp.n * sp.inner;
  std::vector<Scalar> data(numel(out));
  std::size_t col = 0;
  for (std::size_t q = 0; q < parts.size(); ++q) {
    const auto& P = parts[q].data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(P.begin() + static_cast<std::ptrdiff_t>(o * widths[q]), widths[q],
                  data.begin() + static_cast<std::ptrdiff_t>(o * row + col));
    col += widths[q];
  }
  return make_result(std::move(out), std::move(data), parts,
                     [widths, row, outer = sp.outer](Node& self) {
                       std::size_t col = 0;
                       for (std::size_t q = 0; q < widths.size(); ++q) {
                         if (auto* g = grad_of(self, q)) {
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < widths[q]; ++i)
                               (*g)[o * widths[q] + i] += self.grad[o * row + col + i];
                         }
                         col += widths[q];
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto sp = split_axis(x.shape(), axis);
  if (length == 0 || start + length > sp.n)
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + length) + ") out of bounds for " +
                     to_string(x.shape()));
  Shape out = x.shape();
  out[axis] = length;
  std::vector<std::size_t> index;
  index.reserve(sp.outer * length * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < length; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i)
        index.push_back((o * sp.n + start + k) * sp.inner + i);
  return gather(x, std::move(index), std::move(out));
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto sp = split_axis(x.shape(), axis);
  const auto& X = x.data();
  std::vector<Scalar> Y(X.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, X[base + k * sp.inner]);
      Scalar z = 0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const Scalar e = std::exp(X[base + k * sp.inner] - mx);
        Y[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) Y[base + k * sp.inner] /= z;
    }
  return make_result(x.shape(), std::move(Y), {x}, [sp](Node& self) {
    auto* gx = grad_of(self, 0);
    if (!gx) return;
    const auto& Y = self.data;
    const auto& G = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        Scalar dot = 0;
        for (std::size_t k = 0; k < sp.n; ++k) dot += G[base + k * sp.inner] * Y[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t j = base + k * sp.inner;
          (*gx)[j] += Y[j] * (G[j] - dot);
        }
      }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.dim(x.rank() - 1);
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layer_norm: affine params do not match " + to_string(x.shape()));
  const std::size_t rows = x.numel() / d;
  const auto& X = x.data();
  const auto& Gm = gamma.data();
  const auto& Bt = beta.data();
  std::vector<Scalar> Y(X.size());
  auto xhat = std::make_shared<std::vector<Scalar>>(X.size());
  auto inv = std::make_shared<std::vector<Scalar>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* xr = X.data() + r * d;
    Scalar mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<Scalar>(d);
    Scalar var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<Scalar>(d);
    const Scalar is = 1.0 / std::sqrt(var + eps);
    (*inv)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const Scalar h = (xr[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      Y[r * d + j] = h * Gm[j] + Bt[j];
    }
  }
  return make_result(x.shape(), std::move(Y), {x, gamma, beta}, [d, rows, xhat, inv](Node& self) {
    const auto& Gm = data_of(self, 1);
    const auto& G = self.grad;
    auto* gx = grad_of(self, 0);
    auto* gg = grad_of(self, 1);
    auto* gbt = grad_of(self, 2);
    for (std::size_t r = 0; r < rows; ++r) {
      const Scalar* g = G.data() + r * d;
      const Scalar* h = xhat->data() + r * d;
      if (gg)
        for (std::size_t j = 0; j < d; ++j) (*gg)[j] += g[j] * h[j];
      if (gbt)
        for (std::size_t j = 0; j < d; ++j) (*gbt)[j] += g[j];
      if (gx) {
        Scalar s1 = 0, s2 = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const Scalar gy = g[j] * Gm[j];
          s1 += gy;
          s2 += gy * h[j];
        }
        const Scalar is = (*inv)[r];
        const Scalar invd = 1.0 / static_cast<Scalar>(d);
        for (std::size_t j = 0; j < d; ++j) {
          const Scalar gy = g[j] * Gm[j];
          (*gx)[r * d + j] += is * (gy - invd * s1 - h[j] * invd * s2);
        }
      }
    }
  });
}

Tensor reflect_pad(const Tensor& x, std::size_t pad) {
  require_rank(x, 3, "reflect_pad");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (pad == 0) return x;
  if (pad >= H || pad >= W)
    throw ShapeError("reflect_pad: pad " + std::to_string(pad) + " too large for " +
                     to_string(x.shape()));
  const std::size_t Hp = H + 2 * pad, Wp = W + 2 * pad;
  auto reflect = [pad](std::size_t i, std::size_t n) {
    const auto v = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(pad);
    const auto m = static_cast<std::ptrdiff_t>(n);
    if (v < 0) return static_cast<std::size_t>(-v);
    if (v >= m) return static_cast<std::size_t>(2 * (m - 1) - v);
    return static_cast<std::size_t>(v);
  };
  std::vector<std::size_t> index(C * Hp * Wp);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < Hp; ++i)
      for (std::size_t j = 0; j < Wp; ++j)
        index[(c * Hp + i) * Wp + j] = (c * H + reflect(i, H)) * W + reflect(j, W);
  return gather(x, std::move(index), Shape{C, Hp, Wp});
}

namespace {

std::size_t conv_extent(std::size_t n, std::size_t k, std::size_t stride, std::size_t pad,
                        const Shape& xs) {
  if (stride == 0) throw ShapeError("conv: stride must be positive");
  if (n + 2 * pad < k || (n + 2 * pad - k) % stride != 0)
    throw ShapeError("conv: non-integral output size for input " + to_string(xs) +
                     " with kernel " + std::to_string(k) + ", stride " + std::to_string(stride) +
                     ", padding " + std::to_string(pad));
  return (n + 2 * pad - k) / stride + 1;
}

struct ConvGeom {
  std::size_t C, H, W, O, k, stride, pad, Ho, Wo;

  // Output columns j in [lo, hi) read an in-bounds input column for tap kx.
  std::pair<std::size_t, std::size_t> cols(std::size_t kx) const {
    std::size_t lo = 0, hi = 0;
    while (lo < Wo && lo * stride + kx < pad) ++lo;
    hi = lo;
    while (hi < Wo && hi * stride + kx - pad < W) ++hi;
    return {lo, hi};
  }
  bool row_ok(std::size_t i, std::size_t ky) const {
    return i * stride + ky >= pad && i * stride + ky - pad < H;
  }
};

// Patch matrix [C*k*k, Ho*Wo] of input x (zero outside the image).
void im2col(const ConvGeom& g, const Scalar* X, Scalar* cols) {
  const std::size_t N = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        Scalar* row = cols + ((c * g.k + ky) * g.k + kx) * N;
        const auto [lo, hi] = g.cols(kx);
        for (std::size_t i = 0; i < g.Ho; ++i) {
          if (!g.row_ok(i, ky)) continue;
          const Scalar* xr = X + (c * g.H + i * g.stride + ky - g.pad) * g.W;
          for (std::size_t j = lo; j < hi; ++j) row[i * g.Wo + j] = xr[j * g.stride + kx - g.pad];
        }
      }
}

void col2im(const ConvGeom& g, const Scalar* cols, Scalar* GX) {
  const std::size_t N = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const Scalar* row = cols + ((c * g.k + ky) * g.k + kx) * N;
        const auto [lo, hi] = g.cols(kx);
        for (std::size_t i = 0; i < g.Ho; ++i) {
          if (!g.row_ok(i, ky)) continue;
          Scalar* xr = GX + (c * g.H + i * g.stride + ky - g.pad) * g.W;
          for (std::size_t j = lo; j < hi; ++j) xr[j * g.stride + kx - g.pad] += row[i * g.Wo + j];
        }
      }
}

// Depthwise: each output channel sees only its own input channel. `fn` is
// called per contiguous run with (output offset, input offset, weight
// index, run length, input step).
template <class Fn>
void depthwise_sweep(const ConvGeom& g, Fn&& fn) {
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const std::size_t wi = (c * g.k + ky) * g.k + kx;
        const auto [lo, hi] = g.cols(kx);
        if (hi <= lo) continue;
        for (std::size_t i = 0; i < g.Ho; ++i) {
          if (!g.row_ok(i, ky)) continue;
          const std::size_t xo = (c * g.H + i * g.stride + ky - g.pad) * g.W + lo * g.stride + kx - g.pad;
          fn((c * g.Ho + i) * g.Wo + lo, xo, wi, hi - lo);
        }
      }
}

// Shared kernel for dense and depthwise convolution with zero padding.
Tensor conv_impl(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                 std::size_t pad, bool depthwise) {
  require_rank(x, 3, "conv2d");
  require_rank(w, 4, "conv2d");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t O = w.dim(0), wc = w.dim(1), k = w.dim(2);
  if (w.dim(3) != k || k % 2 == 0)
    throw ShapeError("conv2d: kernel must be square and odd, got " + to_string(w.shape()));
  if (depthwise ? (O != C || wc != 1) : (wc != C))
    throw ShapeError("conv2d: weight " + to_string(w.shape()) + " incompatible with input " +
                     to_string(x.shape()));
  if (bias.defined() && bias.numel() != O)
    throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " does not match " +
                     std::to_string(O) + " output channels");
  const std::size_t Ho = conv_extent(H, k, stride, pad, x.shape());
  const std::size_t Wo = conv_extent(W, k, stride, pad, x.shape());
  const ConvGeom g{C, H, W, O, k, stride, pad, Ho, Wo};
  const auto& X = x.data();
  const auto& Wt = w.data();
  const std::size_t N = Ho * Wo, K = C * k * k;
  std::vector<Scalar> Y(O * N, 0.0);
  if (depthwise) {
    depthwise_sweep(g, [&](std::size_t yo, std::size_t xo, std::size_t wi, std::size_t len) {
      const Scalar wv = Wt[wi];
      for (std::size_t j = 0; j < len; ++j) Y[yo + j] += wv * X[xo + j * stride];
    });
  } else if (k == 1 && stride == 1) {
    gemm_nn(O, K, N, Wt.data(), X.data(), Y.data());
  } else {
    std::vector<Scalar> cols(K * N, 0.0);
    im2col(g, X.data(), cols.data());
    gemm_nn(O, K, N, Wt.data(), cols.data(), Y.data());
  }
  if (bias.defined()) {
    const auto& Bv = bias.data();
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t q = 0; q < N; ++q) Y[o * N + q] += Bv[o];
  }
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_result(Shape{O, Ho, Wo}, std::move(Y), std::move(inputs),
                     [g, depthwise, has_bias, N, K](Node& self) {
                       const auto& X = data_of(self, 0);
                       const auto& Wt = data_of(self, 1);
                       const auto& G = self.grad;
                       auto* gx = grad_of(self, 0);
                       auto* gw = grad_of(self, 1);
                       if (depthwise) {
                         const std::size_t s = g.stride;
                         depthwise_sweep(g, [&](std::size_t yo, std::size_t xo, std::size_t wi,
                                                std::size_t len) {
                           if (gx) {
                             const Scalar wv = Wt[wi];
                             for (std::size_t j = 0; j < len; ++j) (*gx)[xo + j * s] += wv * G[yo + j];
                           }
                           if (gw) {
                             Scalar acc = 0;
                             for (std::size_t j = 0; j < len; ++j) acc += X[xo + j * s] * G[yo + j];
                             (*gw)[wi] += acc;
                           }
                         });
                       } else if (g.k == 1 && g.stride == 1) {
                         if (gw) gemm_nt(g.O, K, N, G.data(), X.data(), gw->data());
                         if (gx) gemm_tn(g.O, K, N, Wt.data(), G.data(), gx->data());
                       } else {
                         if (gw) {
                           std::vector<Scalar> cols(K * N, 0.0);
                           im2col(g, X.data(), cols.data());
                           gemm_nt(g.O, K, N, G.data(), cols.data(), gw->data());
                         }
                         if (gx) {
                           std::vector<Scalar> gcols(K * N, 0.0);
                           gemm_tn(g.O, K, N, Wt.data(), G.data(), gcols.data());
                           col2im(g, gcols.data(), gx->data());
                         }
                       }
                       if (has_bias) {
                         if (auto* gb = grad_of(self, 2))
                           for (std::size_t o = 0; o < g.O; ++o)
                             for (std::size_t q = 0; q < N; ++q) (*gb)[o] += G[o * N + q];
                       }
                     });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t padding, PadMode mode) {
  if (mode == PadMode::Reflect && padding > 0)
    return conv_impl(reflect_pad(x, padding), w, bias, stride, 0, false);
  return conv_impl(x, w, bias, stride, padding, false);
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                        std::size_t padding, PadMode mode) {
  if (mode == PadMode::Reflect && padding > 0)
    return conv_impl(reflect_pad(x, padding), w, bias, stride, 0, true);
  return conv_impl(x, w, bias, stride, padding, true);
}

Tensor pool_spatial(const Tensor& x, PoolMode mode) {
  require_rank(x, 3, "pool_spatial");
  auto flat = reshape(x, Shape{x.dim(0), x.dim(1) * x.dim(2)});
  return mode == PoolMode::Avg ? mean_axis(flat, 1) : max_axis(flat, 1);
}

Tensor pool_channel(const Tensor& x, PoolMode mode) {
  require_rank(x, 3, "pool_channel");
  return mode == PoolMode::Avg ? mean_axis(x, 0, true) : max_axis(x, 0, true);
}

namespace {

struct Tap1D {
  std::size_t i0, i1;
  Scalar f;
};

std::vector<Tap1D> resize_taps(std::size_t in, std::size_t out) {
  std::vector<Tap1D> taps(out);
  const Scalar ratio = static_cast<Scalar>(in) / static_cast<Scalar>(out);
  for (std::size_t o = 0; o < out; ++o) {
    Scalar src = (static_cast<Scalar>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<Scalar>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<Scalar>(i0)};
  }
  return taps;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x, 3, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: zero output extent");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (out_h == H && out_w == W) return reshape(x, x.shape());
  auto ty = std::make_shared<std::vector<Tap1D>>(resize_taps(H, out_h));
  auto tx = std::make_shared<std::vector<Tap1D>>(resize_taps(W, out_w));
  const auto& X = x.data();
  std::vector<Scalar> Y(C * out_h * out_w);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto& a = (*ty)[i];
      const Scalar* r0 = X.data() + (c * H + a.i0) * W;
      const Scalar* r1 = X.data() + (c * H + a.i1) * W;
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto& b = (*tx)[j];
        const Scalar top = r0[b.i0] * (1 - b.f) + r0[b.i1] * b.f;
        const Scalar bot = r1[b.i0] * (1 - b.f) + r1[b.i1] * b.f;
        Y[(c * out_h + i) * out_w + j] = top * (1 - a.f) + bot * a.f;
      }
    }
  return make_result(Shape{C, out_h, out_w}, std::move(Y), {x},
                     [ty, tx, C, H, W, out_h, out_w](Node& self) {
                       auto* gx = grad_of(self, 0);
                       if (!gx) return;
                       for (std::size_t c = 0; c < C; ++c)
                         for (std::size_t i = 0; i < out_h; ++i) {
                           const auto& a = (*ty)[i];
                           Scalar* r0 = gx->data() + (c * H + a.i0) * W;
                           Scalar* r1 = gx->data() + (c * H + a.i1) * W;
                           for (std::size_t j = 0; j < out_w; ++j) {
                             const auto& b = (*tx)[j];
                             const Scalar g = self.grad[(c * out_h + i) * out_w + j];
                             r0[b.i0] += g * (1 - a.f) * (1 - b.f);
                             r0[b.i1] += g * (1 - a.f) * b.f;
                             r1[b.i0] += g * a.f * (1 - b.f);
                             r1[b.i1] += g * a.f * b.f;
                           }
                         }
                     });
}

Tensor convex_weights(const Tensor& logits, std::size_t k, std::size_t factor) {
  require_rank(logits, 3, "convex_weights");
  if (k % 2 == 0) throw ShapeError("convex_weights: neighbourhood size must be odd");
  const std::size_t kk = k * k, ff = factor * factor;
  if (logits.dim(0) != kk * ff)
    throw ShapeError("convex_weights: expected " + std::to_string(kk * ff) +
                     " logit channels, got " + to_string(logits.shape()));
  const std::size_t h = logits.dim(1), w = logits.dim(2);
  const std::size_t H = h * factor, W = w * factor;
  std::vector<std::size_t> index(kk * H * W);
  for (std::size_t n = 0; n < kk; ++n)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t s = 0; s < W; ++s) {
        const std::size_t ch = n * ff + (r % factor) * factor + (s % factor);
        index[(n * H + r) * W + s] = (ch * h + r / factor) * w + s / factor;
      }
  return softmax(gather(logits, std::move(index), Shape{kk, H, W}), 0);
}

namespace {

struct Sample4 {
  std::size_t idx[4];
  Scalar wt[4];
};

Sample4 bilinear_sample(Scalar y, Scalar x, std::size_t h, std::size_t w) {
  y = std::clamp(y, 0.0, static_cast<Scalar>(h - 1));
  x = std::clamp(x, 0.0, static_cast<Scalar>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const Scalar fy = y - static_cast<Scalar>(y0), fx = x - static_cast<Scalar>(x0);
  return {{y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1},
          {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx}};
}

}  // namespace

Tensor convex_upsample(const Tensor& lr, const Tensor& weights, std::size_t k,
                       std::size_t factor) {
  if (k % 2 == 0) throw ShapeError("convex_upsample: neighbourhood size must be odd");
  if (factor == 0) throw ShapeError("convex_upsample: factor must be positive");
  std::size_t h = 0, w = 0;
  if (lr.rank() == 2) {
    h = lr.dim(0);
    w = lr.dim(1);
  } else if (lr.rank() == 3 && lr.dim(0) == 1) {
    h = lr.dim(1);
    w = lr.dim(2);
  } else {
    throw ShapeError("convex_upsample: low-res map must be [h,w] or [1,h,w], got " +
                     to_string(lr.shape()));
  }
  const std::size_t kk = k * k, H = h * factor, W = w * factor;
  if (weights.shape() != Shape{kk, H, W})
    throw ShapeError("convex_upsample: weights " + to_string(weights.shape()) +
                     " do not match factor " + std::to_string(factor) + " on " +
                     to_string(lr.shape()));
  const auto half = static_cast<Scalar>(k / 2);
  const Scalar inv_f = 1.0 / static_cast<Scalar>(factor);
  auto patch = [=](std::size_t r, std::size_t s, std::size_t n) {
    const Scalar u = (static_cast<Scalar>(r) + 0.5) * inv_f - 0.5;
    const Scalar v = (static_cast<Scalar>(s) + 0.5) * inv_f - 0.5;
    const Scalar dy = static_cast<Scalar>(n / k) - half;
    const Scalar dx = static_cast<Scalar>(n % k) - half;
    return bilinear_sample(u + dy, v + dx, h, w);
  };
  const auto& L = lr.data();
  const auto& Wt = weights.data();
  std::vector<Scalar> Y(H * W, 0.0);
  for (std::size_t n = 0; n < kk; ++n)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t s = 0; s < W; ++s) {
        const auto smp = patch(r, s, n);
        Scalar p = 0;
        for (int q = 0; q < 4; ++q) p += smp.wt[q] * L[smp.idx[q]];
        Y[r * W + s] += Wt[(n * H + r) * W + s] * p;
      }
  return make_result(Shape{H, W}, std::move(Y), {lr, weights},
                     [patch, kk, H, W](Node& self) {
                       const auto& L = data_of(self, 0);
                       const auto& Wt = data_of(self, 1);
                       auto* gl = grad_of(self, 0);
                       auto* gw = grad_of(self, 1);
                       for (std::size_t n = 0; n < kk; ++n)
                         for (std::size_t r = 0; r < H; ++r)
                           for (std::size_t s = 0; s < W; ++s) {
                             const Scalar g = self.grad[r * W + s];
                             const auto smp = patch(r, s, n);
                             const std::size_t wi = (n * H + r) * W + s;
                             if (gw) {
                               Scalar p = 0;
                               for (int q = 0; q < 4; ++q) p += smp.wt[q] * L[smp.idx[q]];
                               (*gw)[wi] += g * p;
                             }
                             if (gl)
                               for (int q = 0; q < 4; ++q)
                                 (*gl)[smp.idx[q]] += g * Wt[wi] * smp.wt[q];
                           }
                     });
}

Tensor tokens_to_map(const Tensor& tokens, std::size_t h, std::size_t w) {
  require_rank(tokens, 2, "tokens_to_map");
  if (tokens.dim(0) != h * w)
    throw ShapeError("tokens_to_map: " + to_string(tokens.shape()) + " is not " +
                     std::to_string(h) + "x" + std::to_string(w) + " tokens");
  return reshape(transpose(tokens), Shape{tokens.dim(1), h, w});
}

Tensor map_to_tokens(const Tensor& map) {
  require_rank(map, 3, "map_to_tokens");
  return transpose(reshape(map, Shape{map.dim(0), map.dim(1) * map.dim(2)}));
}

}  // namespace ctitans
