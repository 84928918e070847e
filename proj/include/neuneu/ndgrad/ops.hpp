#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "neuneu/ndgrad/tensor.hpp"

// Differentiable kernels. Each op computes its forward result eagerly and, if
// any input requires a gradient and a tape is active, records a closure that
// accumulates input gradients from the output gradient.

namespace neuneu::nd {

namespace detail {

using NodePtr = std::shared_ptr<Node>;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

// Rows x cols view of a rank-1 or rank-2 tensor.
struct Matrix2 {
  std::size_t rows;
  std::size_t cols;
};

inline Matrix2 as_matrix(const Tensor& t, const char* op) {
  if (t.rank() == 1) return {1, t.dim(0)};
  require(t.rank() == 2, std::string(op) + ": expected rank 1 or 2, got " + shape_str(t.shape()));
  return {t.dim(0), t.dim(1)};
}

inline void accumulate(const NodePtr& n, std::span<const double> g) {
  if (!n->requires_grad) return;
  auto& dst = n->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require(a.size() == b.size(), "add: size mismatch " + shape_str(a.shape()) + " vs " +
                                            shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::finish(a.shape(), std::move(out), detail::tracking({&a, &b}),
                        [an = a.shared_node(), bn = b.shared_node()](detail::NodePtr o) {
                          return [an, bn, o] {
                            if (o->grad.empty()) return;
                            detail::accumulate(an, o->grad);
                            detail::accumulate(bn, o->grad);
                          };
                        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require(a.size() == b.size(), "sub: size mismatch");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::finish(a.shape(), std::move(out), detail::tracking({&a, &b}),
                        [an = a.shared_node(), bn = b.shared_node()](detail::NodePtr o) {
                          return [an, bn, o] {
                            if (o->grad.empty()) return;
                            detail::accumulate(an, o->grad);
                            if (bn->requires_grad) {
                              auto& g = bn->ensure_grad();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o->grad[i];
                            }
                          };
                        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require(a.size() == b.size(), "mul: size mismatch");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::finish(a.shape(), std::move(out), detail::tracking({&a, &b}),
                        [an = a.shared_node(), bn = b.shared_node()](detail::NodePtr o) {
                          return [an, bn, o] {
                            if (o->grad.empty()) return;
                            if (an->requires_grad) {
                              auto& g = an->ensure_grad();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * bn->data[i];
                            }
                            if (bn->requires_grad) {
                              auto& g = bn->ensure_grad();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * an->data[i];
                            }
                          };
                        });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::finish(a.shape(), std::move(out), detail::tracking({&a}),
                        [an = a.shared_node(), s](detail::NodePtr o) {
                          return [an, o, s] {
                            if (o->grad.empty()) return;
                            auto& g = an->ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * o->grad[i];
                          };
                        });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  return detail::finish(a.shape(), std::move(out), detail::tracking({&a}),
                        [an = a.shared_node()](detail::NodePtr o) {
                          return [an, o] {
                            if (o->grad.empty()) return;
                            detail::accumulate(an, o->grad);
                          };
                        });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::finish({1}, {s}, detail::tracking({&a}), [an = a.shared_node()](detail::NodePtr o) {
    return [an, o] {
      if (o->grad.empty()) return;
      auto& g = an->ensure_grad();
      for (auto& v : g) v += o->grad[0];
    };
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Tensor reshape(const Tensor& a, Shape shape) {
  detail::require(shape_size(shape) == a.size(),
                  "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return detail::finish(std::move(shape), a.values(), detail::tracking({&a}),
                        [an = a.shared_node()](detail::NodePtr o) {
                          return [an, o] {
                            if (o->grad.empty()) return;
                            detail::accumulate(an, o->grad);
                          };
                        });
}

// Exact-erf GELU: x * Phi(x).
inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(a[i]);
  return detail::finish(a.shape(), std::move(out), detail::tracking({&a}),
                        [an = a.shared_node()](detail::NodePtr o) {
                          return [an, o] {
                            if (o->grad.empty()) return;
                            auto& g = an->ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              g[i] += o->grad[i] * gelu_derivative(an->data[i]);
                            }
                          };
                        });
}

inline Tensor log1p(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    detail::require(a[i] > -1.0, "log1p: argument must exceed -1");
    out[i] = std::log1p(a[i]);
  }
  return detail::finish(a.shape(), std::move(out), detail::tracking({&a}),
                        [an = a.shared_node()](detail::NodePtr o) {
                          return [an, o] {
                            if (o->grad.empty()) return;
                            auto& g = an->ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] / (1.0 + an->data[i]);
                          };
                        });
}

// Gradient passes through where lo <= x <= hi.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(a[i], lo, hi);
  return detail::finish(a.shape(), std::move(out), detail::tracking({&a}),
                        [an = a.shared_node(), lo, hi](detail::NodePtr o) {
                          return [an, o, lo, hi] {
                            if (o->grad.empty()) return;
                            auto& g = an->ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              const double x = an->data[i];
                              if (x >= lo && x <= hi) g[i] += o->grad[i];
                            }
                          };
                        });
}

// y = x W^T + b. x is [n x in] (or [in]), W is [out x in], b is [out] or
// undefined. A rank-1 input yields a rank-1 output.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {}) {
  const auto xm = detail::as_matrix(x, "linear");
  detail::require(w.rank() == 2 && w.dim(1) == xm.cols,
                  "linear: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  const std::size_t n = xm.rows, in = xm.cols, out_dim = w.dim(0);
  if (b.defined()) detail::require(b.size() == out_dim, "linear: bias length mismatch");
  std::vector<double> out(n * out_dim);
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* xr = xd + i * in;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wr = wd + o * in;
      double acc = b.defined() ? b[o] : 0.0;
      for (std::size_t c = 0; c < in; ++c) acc += xr[c] * wr[c];
      out[i * out_dim + o] = acc;
    }
  }
  Shape shape = x.rank() == 1 ? Shape{out_dim} : Shape{n, out_dim};
  return detail::finish(
      std::move(shape), std::move(out), detail::tracking({&x, &w, &b}),
      [xn = x.shared_node(), wn = w.shared_node(), bn = b.defined() ? b.shared_node() : nullptr, n, in,
       out_dim](detail::NodePtr o) {
        return [xn, wn, bn, o, n, in, out_dim] {
          if (o->grad.empty()) return;
          const double* dy = o->grad.data();
          if (xn->requires_grad) {
            auto& gx = xn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
              for (std::size_t oo = 0; oo < out_dim; ++oo) {
                const double d = dy[i * out_dim + oo];
                if (d == 0.0) continue;
                const double* wr = wn->data.data() + oo * in;
                double* gr = gx.data() + i * in;
                for (std::size_t c = 0; c < in; ++c) gr[c] += d * wr[c];
              }
            }
          }
          if (wn->requires_grad) {
            auto& gw = wn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
              const double* xr = xn->data.data() + i * in;
              for (std::size_t oo = 0; oo < out_dim; ++oo) {
                const double d = dy[i * out_dim + oo];
                if (d == 0.0) continue;
                double* gr = gw.data() + oo * in;
                for (std::size_t c = 0; c < in; ++c) gr[c] += d * xr[c];
              }
            }
          }
          if (bn && bn->requires_grad) {
            auto& gb = bn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t oo = 0; oo < out_dim; ++oo) gb[oo] += dy[i * out_dim + oo];
          }
        };
      });
}

// [n x k] * [k x m] -> [n x m]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* br = b.data().data() + p * m;
      double* orow = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * br[j];
    }
  return detail::finish({n, m}, std::move(out), detail::tracking({&a, &b}),
                        [an = a.shared_node(), bn = b.shared_node(), n, k, m](detail::NodePtr o) {
                          return [an, bn, o, n, k, m] {
                            if (o->grad.empty()) return;
                            const double* dy = o->grad.data();
                            if (an->requires_grad) {
                              auto& ga = an->ensure_grad();
                              for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t p = 0; p < k; ++p) {
                                  double acc = 0.0;
                                  for (std::size_t j = 0; j < m; ++j) acc += dy[i * m + j] * bn->data[p * m + j];
                                  ga[i * k + p] += acc;
                                }
                            }
                            if (bn->requires_grad) {
                              auto& gb = bn->ensure_grad();
                              for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t p = 0; p < k; ++p) {
                                  const double av = an->data[i * k + p];
                                  for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += av * dy[i * m + j];
                                }
                            }
                          };
                        });
}

// [n x k] * [m x k]^T -> [n x m]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
                  "matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      out[i * m + j] = acc;
    }
  return detail::finish({n, m}, std::move(out), detail::tracking({&a, &b}),
                        [an = a.shared_node(), bn = b.shared_node(), n, k, m](detail::NodePtr o) {
                          return [an, bn, o, n, k, m] {
                            if (o->grad.empty()) return;
                            const double* dy = o->grad.data();
                            if (an->requires_grad) {
                              auto& ga = an->ensure_grad();
                              for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t j = 0; j < m; ++j) {
                                  const double d = dy[i * m + j];
                                  for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += d * bn->data[j * k + p];
                                }
                            }
                            if (bn->requires_grad) {
                              auto& gb = bn->ensure_grad();
                              for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t j = 0; j < m; ++j) {
                                  const double d = dy[i * m + j];
                                  for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += d * an->data[i * k + p];
                                }
                            }
                          };
                        });
}

inline Tensor softmax_rows(const Tensor& a) {
  const auto am = detail::as_matrix(a, "softmax_rows");
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < am.rows; ++r) {
    const double* x = a.data().data() + r * am.cols;
    double* y = out.data() + r * am.cols;
    const double mx = *std::max_element(x, x + am.cols);
    double z = 0.0;
    for (std::size_t c = 0; c < am.cols; ++c) z += (y[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < am.cols; ++c) y[c] /= z;
  }
  return detail::finish(a.shape(), std::move(out), detail::tracking({&a}),
                        [an = a.shared_node(), am](detail::NodePtr o) {
                          return [an, o, am] {
                            if (o->grad.empty()) return;
                            auto& g = an->ensure_grad();
                            for (std::size_t r = 0; r < am.rows; ++r) {
                              const double* y = o->data.data() + r * am.cols;
                              const double* dy = o->grad.data() + r * am.cols;
                              double dot = 0.0;
                              for (std::size_t c = 0; c < am.cols; ++c) dot += dy[c] * y[c];
                              for (std::size_t c = 0; c < am.cols; ++c) g[r * am.cols + c] += y[c] * (dy[c] - dot);
                            }
                          };
                        });
}

// Stacks rows; each part is [cols] or [r x cols].
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t cols = detail::as_matrix(parts[0], "concat_rows").cols;
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    const auto pm = detail::as_matrix(p, "concat_rows");
    detail::require(pm.cols == cols, "concat_rows: column mismatch");
    rows += pm.rows;
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  std::vector<detail::NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.shared_node());
  return detail::finish({rows, cols}, std::move(out), detail::tracking(parts),
                        [nodes = std::move(nodes)](detail::NodePtr o) {
                          return [nodes, o] {
                            if (o->grad.empty()) return;
                            std::size_t off = 0;
                            for (const auto& n : nodes) {
                              detail::accumulate(n, std::span<const double>(o->grad).subspan(off, n->data.size()));
                              off += n->data.size();
                            }
                          };
                        });
}

// Joins along the feature axis; every part has the same row count.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t rows = detail::as_matrix(parts[0], "concat_cols").rows;
  std::vector<std::size_t> widths;
  std::size_t cols = 0;
  for (const auto& p : parts) {
    const auto pm = detail::as_matrix(p, "concat_cols");
    detail::require(pm.rows == rows, "concat_cols: row mismatch");
    widths.push_back(pm.cols);
    cols += pm.cols;
  }
  std::vector<double> out(rows * cols);
  std::size_t c0 = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(parts[k].data().data() + r * widths[k], widths[k], out.data() + r * cols + c0);
    c0 += widths[k];
  }
  std::vector<detail::NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.shared_node());
  const bool rank1 = parts[0].rank() == 1;
  return detail::finish(rank1 ? Shape{cols} : Shape{rows, cols}, std::move(out), detail::tracking(parts),
                        [nodes = std::move(nodes), widths, rows, cols](detail::NodePtr o) {
                          return [nodes, widths, rows, cols, o] {
                            if (o->grad.empty()) return;
                            std::size_t c0 = 0;
                            for (std::size_t k = 0; k < nodes.size(); ++k) {
                              if (nodes[k]->requires_grad) {
                                auto& g = nodes[k]->ensure_grad();
                                for (std::size_t r = 0; r < rows; ++r)
                                  for (std::size_t c = 0; c < widths[k]; ++c)
                                    g[r * widths[k] + c] += o->grad[r * cols + c0 + c];
                              }
                              c0 += widths[k];
                            }
                          };
                        });
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len) {
  const auto am = detail::as_matrix(a, "slice_cols");
  detail::require(len > 0 && start + len <= am.cols, "slice_cols: range out of bounds");
  std::vector<double> out(am.rows * len);
  for (std::size_t r = 0; r < am.rows; ++r)
    std::copy_n(a.data().data() + r * am.cols + start, len, out.data() + r * len);
  return detail::finish(a.rank() == 1 ? Shape{len} : Shape{am.rows, len}, std::move(out), detail::tracking({&a}),
                        [an = a.shared_node(), am, start, len](detail::NodePtr o) {
                          return [an, o, am, start, len] {
                            if (o->grad.empty()) return;
                            auto& g = an->ensure_grad();
                            for (std::size_t r = 0; r < am.rows; ++r)
                              for (std::size_t c = 0; c < len; ++c) g[r * am.cols + start + c] += o->grad[r * len + c];
                          };
                        });
}

inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t len) {
  const auto am = detail::as_matrix(a, "slice_rows");
  detail::require(len > 0 && start + len <= am.rows, "slice_rows: range out of bounds");
  std::vector<double> out(a.data().begin() + start * am.cols, a.data().begin() + (start + len) * am.cols);
  return detail::finish({len, am.cols}, std::move(out), detail::tracking({&a}),
                        [an = a.shared_node(), am, start](detail::NodePtr o) {
                          return [an, o, am, start] {
                            if (o->grad.empty()) return;
                            auto& g = an->ensure_grad();
                            for (std::size_t i = 0; i < o->grad.size(); ++i) g[start * am.cols + i] += o->grad[i];
                          };
                        });
}

// Column means of an [n x d] matrix, returned as [d].
inline Tensor mean_rows(const Tensor& a) {
  const auto am = detail::as_matrix(a, "mean_rows");
  std::vector<double> out(am.cols, 0.0);
  for (std::size_t r = 0; r < am.rows; ++r)
    for (std::size_t c = 0; c < am.cols; ++c) out[c] += a[r * am.cols + c];
  const double inv = 1.0 / static_cast<double>(am.rows);
  for (auto& v : out) v *= inv;
  return detail::finish({am.cols}, std::move(out), detail::tracking({&a}),
                        [an = a.shared_node(), am, inv](detail::NodePtr o) {
                          return [an, o, am, inv] {
                            if (o->grad.empty()) return;
                            auto& g = an->ensure_grad();
                            for (std::size_t r = 0; r < am.rows; ++r)
                              for (std::size_t c = 0; c < am.cols; ++c) g[r * am.cols + c] += o->grad[c] * inv;
                          };
                        });
}

inline std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, std::size_t stride,
                                        std::size_t padding) {
  detail::require(kernel >= 1 && stride >= 1, "conv1d: kernel and stride must be >= 1");
  detail::require(length + 2 * padding >= kernel, "conv1d: padded input shorter than kernel");
  return (length + 2 * padding - kernel) / stride + 1;
}

// input [C_in x L_in], kernels [C_out x C_in x k], bias [C_out] -> [C_out x L_out]
// with zero padding on both ends.
inline Tensor conv1d(const Tensor& input, const Tensor& kernels, const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
  detail::require(input.rank() == 2, "conv1d: input must be [C_in x L], got " + shape_str(input.shape()));
  detail::require(kernels.rank() == 3, "conv1d: kernels must be [C_out x C_in x k]");
  const std::size_t cin = input.dim(0), len = input.dim(1);
  const std::size_t cout = kernels.dim(0), k = kernels.dim(2);
  detail::require(kernels.dim(1) == cin, "conv1d: kernel expects " + std::to_string(kernels.dim(1)) +
                                             " input channels, input has " + std::to_string(cin));
  detail::require(bias.size() == cout, "conv1d: bias length mismatch");
  const std::size_t lout = conv1d_output_length(len, k, stride, padding);

  // For tap j, output positions t with 0 <= t*stride + j - padding < len.
  auto t_range = [=](std::size_t j) {
    const long off = static_cast<long>(j) - static_cast<long>(padding);
    const long s = static_cast<long>(stride);
    long lo = off >= 0 ? 0 : (-off + s - 1) / s;
    long hi = (static_cast<long>(len) - 1 - off);
    hi = hi < 0 ? -1 : hi / s;
    hi = std::min(hi, static_cast<long>(lout) - 1);
    return std::pair<long, long>{lo, hi};
  };

  std::vector<double> out(cout * lout);
  const double* x = input.data().data();
  const double* w = kernels.data().data();
  for (std::size_t o = 0; o < cout; ++o) {
    double* orow = out.data() + o * lout;
    std::fill(orow, orow + lout, bias[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const double* xrow = x + c * len;
      const double* wrow = w + (o * cin + c) * k;
      for (std::size_t j = 0; j < k; ++j) {
        const double wv = wrow[j];
        const auto [lo, hi] = t_range(j);
        const long off = static_cast<long>(j) - static_cast<long>(padding);
        for (long t = lo; t <= hi; ++t) orow[t] += wv * xrow[t * static_cast<long>(stride) + off];
      }
    }
  }
  return detail::finish(
      {cout, lout}, std::move(out), detail::tracking({&input, &kernels, &bias}),
      [xn = input.shared_node(), wn = kernels.shared_node(), bn = bias.shared_node(), cin, cout, len, lout, k, stride,
       padding, t_range](detail::NodePtr o) {
        return [=] {
          if (o->grad.empty()) return;
          const double* dy = o->grad.data();
          double* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
          double* gw = wn->requires_grad ? wn->ensure_grad().data() : nullptr;
          for (std::size_t oc = 0; oc < cout; ++oc) {
            const double* drow = dy + oc * lout;
            if (bn->requires_grad) {
              double acc = 0.0;
              for (std::size_t t = 0; t < lout; ++t) acc += drow[t];
              bn->ensure_grad()[oc] += acc;
            }
            for (std::size_t c = 0; c < cin; ++c) {
              const double* xrow = xn->data.data() + c * len;
              const double* wrow = wn->data.data() + (oc * cin + c) * k;
              for (std::size_t j = 0; j < k; ++j) {
                const auto [lo, hi] = t_range(j);
                const long off = static_cast<long>(j) - static_cast<long>(padding);
                const long s = static_cast<long>(stride);
                if (gw) {
                  double acc = 0.0;
                  for (long t = lo; t <= hi; ++t) acc += drow[t] * xrow[t * s + off];
                  gw[(oc * cin + c) * k + j] += acc;
                }
                if (gx) {
                  const double wv = wrow[j];
                  double* gxrow = gx + c * len;
                  for (long t = lo; t <= hi; ++t) gxrow[t * s + off] += wv * drow[t];
                }
              }
            }
          }
        };
      });
}

namespace detail {

// Normalizes `count` contiguous blocks of `block` entries each; entry i of
// block g gets affine channel channel_of(g, i).
template <typename ChannelOf>
Tensor normalize_blocks(const Tensor& x, std::size_t count, std::size_t block, double eps, const Tensor& gain,
                        const Tensor& shift, ChannelOf channel_of) {
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(count);
  for (std::size_t g = 0; g < count; ++g) {
    const double* xs = x.data().data() + g * block;
    double mu = 0.0;
    for (std::size_t i = 0; i < block; ++i) mu += xs[i];
    mu /= static_cast<double>(block);
    double var = 0.0;
    for (std::size_t i = 0; i < block; ++i) var += (xs[i] - mu) * (xs[i] - mu);
    var /= static_cast<double>(block);
    inv_std[g] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < block; ++i) {
      const std::size_t idx = g * block + i;
      xhat[idx] = (xs[i] - mu) * inv_std[g];
      const std::size_t ch = channel_of(g, i);
      out[idx] = gain[ch] * xhat[idx] + shift[ch];
    }
  }
  return finish(x.shape(), std::move(out), tracking({&x, &gain, &shift}),
                [xn = x.shared_node(), gn = gain.shared_node(), sn = shift.shared_node(), xhat = std::move(xhat),
                 inv_std = std::move(inv_std), count, block, channel_of](NodePtr o) {
                  return [=] {
                    if (o->grad.empty()) return;
                    const double* dy = o->grad.data();
                    std::vector<double> dxhat(block);
                    for (std::size_t g = 0; g < count; ++g) {
                      double mean_d = 0.0, mean_dx = 0.0;
                      for (std::size_t i = 0; i < block; ++i) {
                        const std::size_t idx = g * block + i;
                        const std::size_t ch = channel_of(g, i);
                        if (gn->requires_grad) gn->ensure_grad()[ch] += dy[idx] * xhat[idx];
                        if (sn->requires_grad) sn->ensure_grad()[ch] += dy[idx];
                        dxhat[i] = dy[idx] * gn->data[ch];
                        mean_d += dxhat[i];
                        mean_dx += dxhat[i] * xhat[idx];
                      }
                      if (!xn->requires_grad) continue;
                      mean_d /= static_cast<double>(block);
                      mean_dx /= static_cast<double>(block);
                      auto& gx = xn->ensure_grad();
                      for (std::size_t i = 0; i < block; ++i) {
                        const std::size_t idx = g * block + i;
                        gx[idx] += inv_std[g] * (dxhat[i] - mean_d - xhat[idx] * mean_dx);
                      }
                    }
                  };
                });
}

}  // namespace detail

// x [C x L]; statistics over each group of C/groups channels and all
// positions; per-channel affine.
inline Tensor group_norm(const Tensor& x, std::size_t groups, double eps, const Tensor& gain, const Tensor& shift) {
  detail::require(x.rank() == 2, "group_norm: input must be [C x L]");
  const std::size_t c = x.dim(0), len = x.dim(1);
  detail::require(groups >= 1 && c % groups == 0,
                  "group_norm: " + std::to_string(c) + " channels not divisible into " + std::to_string(groups) +
                      " groups");
  detail::require(gain.size() == c && shift.size() == c, "group_norm: affine length mismatch");
  const std::size_t per_group = c / groups;
  return detail::normalize_blocks(x, groups, per_group * len, eps, gain, shift,
                                  [per_group, len](std::size_t g, std::size_t i) { return g * per_group + i / len; });
}

// Row-wise normalization over the feature axis of [d] or [n x d].
inline Tensor layer_norm(const Tensor& x, double eps, const Tensor& gain, const Tensor& shift) {
  const auto xm = detail::as_matrix(x, "layer_norm");
  detail::require(gain.size() == xm.cols && shift.size() == xm.cols, "layer_norm: affine length mismatch");
  return detail::normalize_blocks(x, xm.rows, xm.cols, eps, gain, shift,
                                  [](std::size_t, std::size_t i) { return i; });
}

// Rotary position embedding on [seq x head_dim] or [heads x seq x head_dim].
// Feature pairs (2j, 2j+1) rotate by position * 10000^(-2j/head_dim).
inline Tensor rope_apply(const Tensor& x, std::span<const std::size_t> positions) {
  detail::require(x.rank() == 2 || x.rank() == 3, "rope_apply: expected rank 2 or 3");
  const std::size_t heads = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t seq = x.dim(x.rank() - 2);
  const std::size_t hd = x.dim(x.rank() - 1);
  detail::require(hd % 2 == 0, "rope_apply: head_dim must be even, got " + std::to_string(hd));
  detail::require(positions.size() == seq, "rope_apply: need one position per sequence element");
  const std::size_t half = hd / 2;
  std::vector<double> cosv(seq * half), sinv(seq * half);
  for (std::size_t s = 0; s < seq; ++s)
    for (std::size_t j = 0; j < half; ++j) {
      const double theta = std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(hd));
      const double angle = static_cast<double>(positions[s]) * theta;
      cosv[s * half + j] = std::cos(angle);
      sinv[s * half + j] = std::sin(angle);
    }
  std::vector<double> out(x.size());
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t s = 0; s < seq; ++s)
      for (std::size_t j = 0; j < half; ++j) {
        const std::size_t base = (h * seq + s) * hd + 2 * j;
        const double c = cosv[s * half + j], sn = sinv[s * half + j];
        out[base] = x[base] * c - x[base + 1] * sn;
        out[base + 1] = x[base] * sn + x[base + 1] * c;
      }
  return detail::finish(x.shape(), std::move(out), detail::tracking({&x}),
                        [xn = x.shared_node(), cosv = std::move(cosv), sinv = std::move(sinv), heads, seq, hd,
                         half](detail::NodePtr o) {
                          return [=] {
                            if (o->grad.empty()) return;
                            auto& g = xn->ensure_grad();
                            for (std::size_t h = 0; h < heads; ++h)
                              for (std::size_t s = 0; s < seq; ++s)
                                for (std::size_t j = 0; j < half; ++j) {
                                  const std::size_t base = (h * seq + s) * hd + 2 * j;
                                  const double c = cosv[s * half + j], sn = sinv[s * half + j];
                                  const double d0 = o->grad[base], d1 = o->grad[base + 1];
                                  g[base] += d0 * c + d1 * sn;
                                  g[base + 1] += -d0 * sn + d1 * c;
                                }
                          };
                        });
}

// Sum over quantile levels of the asymmetric absolute loss against target a,
// evaluated on the raw (possibly crossing) predictions.
inline Tensor pinball_loss(const Tensor& raw, double target, std::span<const double> quantiles) {
  detail::require(raw.size() == quantiles.size(), "pinball_loss: prediction/quantile count mismatch");
  double loss = 0.0;
  std::vector<double> dq(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double tau = quantiles[i];
    const double q = raw[i];
    if (target >= q) {
      loss += tau * (target - q);
      dq[i] = -tau;
    } else {
      loss += (1.0 - tau) * (q - target);
      dq[i] = 1.0 - tau;
    }
  }
  return detail::finish({1}, {loss}, detail::tracking({&raw}),
                        [rn = raw.shared_node(), dq = std::move(dq)](detail::NodePtr o) {
                          return [rn, o, dq] {
                            if (o->grad.empty()) return;
                            auto& g = rn->ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[0] * dq[i];
                          };
                        });
}

}  // namespace neuneu::nd
