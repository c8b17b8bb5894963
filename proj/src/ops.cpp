#include "cpt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace cpt::ops {

namespace {

using detail::Node;

constexpr double kInvSqrt2 = std::numbers::sqrt2 / 2.0;

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

// Gradient buffer of parent i, or nullptr when it does not take gradients.
double* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw TensorError(std::string(op) + ": undefined input");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw TensorError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
  }
}

void require_matrix(const Tensor& t, const char* op) {
  require_defined(t, op);
  if (t.rank() != 2) throw TensorError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

void require_finite(std::span<const double> v, const char* op) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw TensorError(std::string(op) + ": non-finite input at flat index " + std::to_string(i));
    }
  }
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    std::size_t j = 0;
    // Four independent dot products at a time; each keeps its own summation order.
    for (; j + 4 <= n; j += 4) {
      const double* b0 = b + j * k;
      const double* b1 = b0 + k;
      const double* b2 = b1 + k;
      const double* b3 = b2 + k;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = arow[p];
        s0 += av * b0[p];
        s1 += av * b1[p];
        s2 += av * b2[p];
        s3 += av * b3[p];
      }
      crow[j] += s0;
      crow[j + 1] += s1;
      crow[j + 2] += s2;
      crow[j + 3] += s3;
    }
    for (; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* g = parent_grad(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& x = self.parents[0]->values;
    const auto& y = self.parents[1]->values;
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  require_defined(a, "scale");
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return make_result(a.shape(), std::move(out), {a}, [factor](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
  }
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    const auto& in = self.parents[0]->values;
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double v = in[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Tensor tanh(const Tensor& x) {
  require_defined(x, "tanh");
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += self.grad[i] * (1.0 - self.values[i] * self.values[i]);
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double total = 0.0;
  for (double v : x.values()) total += v;
  return make_result({}, {total}, {x}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->values.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  if (x.numel() == 0) throw TensorError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw TensorError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                      shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* av = self.parents[0]->values.data();
    const double* bv = self.parents[1]->values.data();
    if (double* g = parent_grad(self, 0)) gemm_nt(self.grad.data(), bv, g, m, n, k);
    if (double* g = parent_grad(self, 1)) gemm_tn(av, self.grad.data(), g, k, m, n);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw TensorError("matmul_nt: inner dimensions differ " + shape_string(a.shape()) + " x " +
                      shape_string(b.shape()) + "^T");
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nt(a.values().data(), b.values().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* av = self.parents[0]->values.data();
    const double* bv = self.parents[1]->values.data();
    // dA[m,k] = dC[m,n] B[n,k];  dB[n,k] = dC^T[n,m] A[m,k]
    if (double* g = parent_grad(self, 0)) gemm_nn(self.grad.data(), bv, g, m, n, k);
    if (double* g = parent_grad(self, 1)) gemm_tn(self.grad.data(), av, g, n, m, k);
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  auto av = a.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return make_result({n, m}, std::move(out), {a}, [m, n](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
  require_matrix(a, "add_row");
  require_defined(bias, "add_row");
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.numel() != n) {
    throw TensorError("add_row: bias of shape " + shape_string(bias.shape()) + " does not match " +
                      shape_string(a.shape()));
  }
  auto av = a.values();
  auto bv = bias.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + bv[j];
  return make_result({m, n}, std::move(out), {a, bias}, [m, n](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m * n; ++i) g[i] += self.grad[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  require_matrix(a, "slice_rows");
  const std::size_t n = a.cols();
  if (begin + count > a.rows()) {
    throw TensorError("slice_rows: rows [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                      ") exceed " + shape_string(a.shape()));
  }
  auto av = a.values();
  std::vector<double> out(av.begin() + static_cast<std::ptrdiff_t>(begin * n),
                          av.begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  return make_result({count, n}, std::move(out), {a}, [begin, n](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
    }
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  require_matrix(a, "slice_cols");
  const std::size_t m = a.rows(), n = a.cols();
  if (begin + count > n) {
    throw TensorError("slice_cols: cols [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                      ") exceed " + shape_string(a.shape()));
  }
  auto av = a.values();
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(av.data() + i * n + begin, count, out.data() + i * count);
  return make_result({m, count}, std::move(out), {a}, [m, n, begin, count](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) g[i * n + begin + j] += self.grad[i * count + j];
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw TensorError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != m) throw TensorError("concat_cols: row counts differ");
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(m * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].values();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(pv.data() + i * widths[k], widths[k], out.data() + i * total + offset);
    offset += widths[k];
  }
  return make_result({m, total}, std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                     [m, total, widths](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         if (double* g = parent_grad(self, k)) {
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < widths[k]; ++j)
                               g[i * widths[k] + j] += self.grad[i * total + off + j];
                         }
                         off += widths[k];
                       }
                     });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw TensorError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::vector<std::size_t> sizes;
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != n) throw TensorError("concat_rows: column counts differ");
    sizes.push_back(p.numel());
    rows += p.rows();
    auto pv = p.values();
    out.insert(out.end(), pv.begin(), pv.end());
  }
  return make_result({rows, n}, std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                     [sizes](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < sizes.size(); ++k) {
                         if (double* g = parent_grad(self, k)) {
                           for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += self.grad[off + i];
                         }
                         off += sizes[k];
                       }
                     });
}

Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> ids) {
  require_matrix(table, "gather_rows");
  const std::size_t vocab = table.rows(), n = table.cols();
  auto tv = table.values();
  std::vector<double> out(ids.size() * n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw TensorError("gather_rows: index " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                        " outside table of " + std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * n, n, out.data() + i * n);
  }
  std::vector<std::int64_t> index(ids.begin(), ids.end());
  return make_result({ids.size(), n}, std::move(out), {table}, [index = std::move(index), n](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < index.size(); ++i) {
        double* row = g + static_cast<std::size_t>(index[i]) * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += self.grad[i * n + j];
      }
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw TensorError("reshape: " + shape_string(a.shape()) + " cannot become " + shape_string(shape));
  }
  auto av = a.values();
  return make_result(std::move(shape), std::vector<double>(av.begin(), av.end()), {a}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  const auto& shape = x.shape();
  if (axis >= shape.size()) {
    throw TensorError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_string(shape));
  }
  auto xv = x.values();
  require_finite(xv, "softmax");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];

  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -INFINITY;
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  return make_result(shape, std::move(out), {x}, [outer, inner, len](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    const auto& y = self.values;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += self.grad[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t idx = base + k * inner;
          g[idx] += y[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  require_matrix(x, "log_softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  auto xv = x.values();
  require_finite(xv, "log_softmax_rows");
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - lz;
  }
  return make_result({m, n}, std::move(out), {x}, [m, n](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += self.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        g[i * n + j] += self.grad[i * n + j] - std::exp(self.values[i * n + j]) * total;
      }
    }
  });
}

Tensor masked_softmax_rows(const Tensor& x, const std::vector<char>& allowed) {
  require_matrix(x, "masked_softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (allowed.size() != m * n) throw TensorError("masked_softmax_rows: mask size does not match scores");
  auto xv = x.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      if (allowed[i * n + j]) mx = std::max(mx, xv[i * n + j]);
    }
    if (mx == -INFINITY) continue;
    if (!std::isfinite(mx)) throw TensorError("masked_softmax_rows: non-finite score in row " + std::to_string(i));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!allowed[i * n + j]) continue;
      const double e = std::exp(xv[i * n + j] - mx);
      out[i * n + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return make_result({m, n}, std::move(out), {x}, [m, n](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    const auto& y = self.values;
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[i * n + j] * (self.grad[i * n + j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "layer_norm");
  if (eps <= 0.0) throw TensorError("layer_norm: eps must be positive");
  if (x.rank() == 0) throw TensorError("layer_norm: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t m = x.numel() / n;
  if (gain.numel() != n || bias.numel() != n) {
    throw TensorError("layer_norm: gain/bias must have " + std::to_string(n) + " entries");
  }
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  std::vector<double> out(m * n);
  std::vector<double> normed(m * n);
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      normed[i * n + j] = (row[j] - mu) * inv_std[i];
      out[i * n + j] = normed[i * n + j] * gv[j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [m, n, normed = std::move(normed), inv_std = std::move(inv_std)](Node& self) {
                       const auto& gv2 = self.parents[1]->values;
                       if (double* g = parent_grad(self, 0)) {
                         std::vector<double> dxhat(n);
                         for (std::size_t i = 0; i < m; ++i) {
                           double mean_d = 0.0, mean_dx = 0.0;
                           for (std::size_t j = 0; j < n; ++j) {
                             dxhat[j] = self.grad[i * n + j] * gv2[j];
                             mean_d += dxhat[j];
                             mean_dx += dxhat[j] * normed[i * n + j];
                           }
                           mean_d /= static_cast<double>(n);
                           mean_dx /= static_cast<double>(n);
                           for (std::size_t j = 0; j < n; ++j) {
                             g[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - normed[i * n + j] * mean_dx);
                           }
                         }
                       }
                       if (double* g = parent_grad(self, 1)) {
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j] * normed[i * n + j];
                       }
                       if (double* g = parent_grad(self, 2)) {
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                       }
                     });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  require_defined(x, "dropout");
  if (p < 0.0 || p >= 1.0) throw TensorError("dropout: rate must lie in [0, 1)");
  if (p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (auto& v : mask) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    v = u < p ? 0.0 : keep_scale;
  }
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

LossResult cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets, Reduction reduction) {
  require_matrix(logits, "cross_entropy");
  const std::size_t m = logits.rows(), n = logits.cols();
  if (targets.size() != m) {
    throw TensorError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(m) +
                      " rows");
  }
  const auto ignore = static_cast<std::int64_t>(n);
  std::size_t counted = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] < 0 || targets[i] > ignore) {
      throw TensorError("cross_entropy: target " + std::to_string(targets[i]) + " at row " + std::to_string(i) +
                        " outside [0, " + std::to_string(n) + "]");
    }
    if (targets[i] != ignore) ++counted;
  }
  if (counted == 0) return {Tensor::scalar(0.0), 0};

  auto xv = logits.values();
  require_finite(xv, "cross_entropy");
  std::vector<double> probs(m * n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] == ignore) continue;
    const double* row = xv.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      probs[i * n + j] = std::exp(row[j] - mx);
      z += probs[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
    total += -(row[targets[i]] - mx - std::log(z));
  }
  const double norm = reduction == Reduction::mean ? 1.0 / static_cast<double>(counted) : 1.0;
  std::vector<std::int64_t> tgt(targets.begin(), targets.end());
  Tensor value = make_result({}, {total * norm}, {logits},
                             [m, n, norm, ignore, probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
                               double* g = parent_grad(self, 0);
                               if (!g) return;
                               const double scale_g = self.grad[0] * norm;
                               for (std::size_t i = 0; i < m; ++i) {
                                 if (tgt[i] == ignore) continue;
                                 for (std::size_t j = 0; j < n; ++j) g[i * n + j] += scale_g * probs[i * n + j];
                                 g[i * n + static_cast<std::size_t>(tgt[i])] -= scale_g;
                               }
                             });
  return {value, counted};
}

}  // namespace cpt::ops
