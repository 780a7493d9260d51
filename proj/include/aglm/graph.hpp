// Reverse-mode autodiff on an append-only tape. Every op records its output
// value and a closure that scatters the output gradient back to the inputs;
// backward() replays closures in reverse creation order, which is a valid
// reverse topological order because inputs always precede outputs on the tape.
//
// Gradients are allocated eagerly when a node requires them. A parameter node
// adopts the caller's gradient buffer, so accumulation lands directly in the
// parameter store. Parameters whose store has no gradient buffers produce
// requires_grad=false nodes, which turns the whole downstream graph into a
// plain forward evaluation (eval and generation pay no gradient memory).
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "aglm/errors.hpp"
#include "aglm/rng.hpp"
#include "aglm/tensor.hpp"

namespace aglm {

struct Var {
    std::uint32_t idx = 0;
};

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

template <typename T>
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    std::size_t size() const { return nodes_.size(); }

    const Tensor<T>& value(Var v) const { return nodes_[v.idx].value; }
    const Tensor<T>& grad(Var v) const {
        const Node& n = nodes_[v.idx];
        if (!n.requires_grad) {
            fail(Error::Kind::contract, "gradient requested for a node that does not require one");
        }
        return n.grad;
    }
    bool requires_grad(Var v) const { return nodes_[v.idx].requires_grad; }

    Var leaf(Tensor<T> value, bool requires_grad = false) {
        Tensor<T> grad;
        if (requires_grad) grad = Tensor<T>::zeros(value.shape());
        return push(std::move(value), std::move(grad), requires_grad, nullptr);
    }

    // The grad tensor is shared with the caller; backward() accumulates into
    // it. An empty grad marks the parameter as frozen for this graph.
    Var param(Tensor<T> value, Tensor<T> grad) {
        bool want = grad.numel() != 0;
        if (want && !grad.same_shape(value)) {
            fail(Error::Kind::contract, "parameter gradient shape ", shape_str(grad.shape()),
                 " does not match value shape ", shape_str(value.shape()));
        }
        return push(std::move(value), std::move(grad), want, nullptr);
    }

    Var add(Var a, Var b) {
        const Tensor<T>& av = value(a);
        const Tensor<T>& bv = value(b);
        if (!av.same_shape(bv)) {
            fail(Error::Kind::contract, "add shape mismatch: ", shape_str(av.shape()), " vs ",
                 shape_str(bv.shape()));
        }
        Tensor<T> out = Tensor<T>::zeros(av.shape());
        const T* ap = av.ptr();
        const T* bp = bv.ptr();
        T* op = out.ptr();
        for (std::size_t i = 0; i < out.numel(); ++i) op[i] = ap[i] + bp[i];
        return finish("add", std::move(out), {a, b}, [](const Closure& c) {
            const T* gop = c.out_grad.ptr();
            for (std::size_t k = 0; k < 2; ++k) {
                if (!c.in_wants[k]) continue;
                T* gp = c.in_grads[k].ptr();
                for (std::size_t i = 0; i < c.out_grad.numel(); ++i) gp[i] += gop[i];
            }
        });
    }

    // out[..., j] = a[..., j] + b[j]
    Var add_bias(Var a, Var b) {
        const Tensor<T>& av = value(a);
        const Tensor<T>& bv = value(b);
        std::size_t d = av.shape().back();
        if (bv.rank() != 1 || bv.dim(0) != d) {
            fail(Error::Kind::contract, "add_bias: bias ", shape_str(bv.shape()),
                 " does not match last dim of ", shape_str(av.shape()));
        }
        std::size_t rows = av.numel() / d;
        Tensor<T> out = Tensor<T>::zeros(av.shape());
        const T* ap = av.ptr();
        const T* bp = bv.ptr();
        T* op = out.ptr();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) op[r * d + j] = ap[r * d + j] + bp[j];
        }
        return finish("add_bias", std::move(out), {a, b}, [rows, d](const Closure& c) {
            const T* gop = c.out_grad.ptr();
            if (c.in_wants[0]) {
                T* gp = c.in_grads[0].ptr();
                for (std::size_t i = 0; i < c.out_grad.numel(); ++i) gp[i] += gop[i];
            }
            if (c.in_wants[1]) {
                T* gp = c.in_grads[1].ptr();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) gp[j] += gop[r * d + j];
                }
            }
        });
    }

    Var scale(Var a, T factor) {
        const Tensor<T>& av = value(a);
        Tensor<T> out = Tensor<T>::zeros(av.shape());
        const T* ap = av.ptr();
        T* op = out.ptr();
        for (std::size_t i = 0; i < out.numel(); ++i) op[i] = ap[i] * factor;
        return finish("scale", std::move(out), {a}, [factor](const Closure& c) {
            if (!c.in_wants[0]) return;
            T* gp = c.in_grads[0].ptr();
            const T* gop = c.out_grad.ptr();
            for (std::size_t i = 0; i < c.out_grad.numel(); ++i) gp[i] += gop[i] * factor;
        });
    }

    // Elementwise product.
    Var mul(Var a, Var b) {
        const Tensor<T>& av = value(a);
        const Tensor<T>& bv = value(b);
        if (!av.same_shape(bv)) {
            fail(Error::Kind::contract, "mul shape mismatch: ", shape_str(av.shape()), " vs ",
                 shape_str(bv.shape()));
        }
        Tensor<T> out = Tensor<T>::zeros(av.shape());
        const T* ap = av.ptr();
        const T* bp = bv.ptr();
        T* op = out.ptr();
        for (std::size_t i = 0; i < out.numel(); ++i) op[i] = ap[i] * bp[i];
        return finish("mul", std::move(out), {a, b}, [av, bv](const Closure& c) {
            const T* gop = c.out_grad.ptr();
            if (c.in_wants[0]) {
                T* gp = c.in_grads[0].ptr();
                const T* other = bv.ptr();
                for (std::size_t i = 0; i < c.out_grad.numel(); ++i) gp[i] += gop[i] * other[i];
            }
            if (c.in_wants[1]) {
                T* gp = c.in_grads[1].ptr();
                const T* other = av.ptr();
                for (std::size_t i = 0; i < c.out_grad.numel(); ++i) gp[i] += gop[i] * other[i];
            }
        });
    }

    // Rank-2 product: out = a @ b, or a @ b^T when transpose_b.
    Var matmul(Var a, Var b, bool transpose_b = false) {
        const Tensor<T>& av = value(a);
        const Tensor<T>& bv = value(b);
        if (av.rank() != 2 || bv.rank() != 2) {
            fail(Error::Kind::contract, "matmul expects rank-2 inputs, got ",
                 shape_str(av.shape()), " and ", shape_str(bv.shape()));
        }
        std::size_t m = av.dim(0);
        std::size_t k = av.dim(1);
        std::size_t n = transpose_b ? bv.dim(0) : bv.dim(1);
        std::size_t bk = transpose_b ? bv.dim(1) : bv.dim(0);
        if (bk != k) {
            fail(Error::Kind::contract, "matmul inner dim mismatch: ", shape_str(av.shape()),
                 transpose_b ? " @ transposed " : " @ ", shape_str(bv.shape()));
        }
        Tensor<T> out = Tensor<T>::zeros({m, n});
        if (transpose_b) {
            kern::mm_nt(av.ptr(), bv.ptr(), out.ptr(), m, k, n);
        } else {
            kern::mm_nn(av.ptr(), bv.ptr(), out.ptr(), m, k, n);
        }
        return finish("matmul", std::move(out), {a, b},
                      [av, bv, m, k, n, transpose_b](const Closure& c) {
                          const T* gop = c.out_grad.ptr();
                          if (transpose_b) {
                              if (c.in_wants[0]) {
                                  kern::mm_nn(gop, bv.ptr(), c.in_grads[0].ptr(), m, n, k);
                              }
                              if (c.in_wants[1]) {
                                  kern::mm_tn(gop, av.ptr(), c.in_grads[1].ptr(), n, m, k);
                              }
                          } else {
                              if (c.in_wants[0]) {
                                  kern::mm_nt(gop, bv.ptr(), c.in_grads[0].ptr(), m, n, k);
                              }
                              if (c.in_wants[1]) {
                                  kern::mm_tn(av.ptr(), gop, c.in_grads[1].ptr(), k, m, n);
                              }
                          }
                      });
    }

    // Batched rank-3 product over the leading dim.
    Var bmm(Var a, Var b, bool transpose_b = false) {
        const Tensor<T>& av = value(a);
        const Tensor<T>& bv = value(b);
        if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0)) {
            fail(Error::Kind::contract, "bmm expects rank-3 inputs with equal batch, got ",
                 shape_str(av.shape()), " and ", shape_str(bv.shape()));
        }
        std::size_t bsz = av.dim(0);
        std::size_t m = av.dim(1);
        std::size_t k = av.dim(2);
        std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
        std::size_t bk = transpose_b ? bv.dim(2) : bv.dim(1);
        if (bk != k) {
            fail(Error::Kind::contract, "bmm inner dim mismatch: ", shape_str(av.shape()),
                 transpose_b ? " @ transposed " : " @ ", shape_str(bv.shape()));
        }
        Tensor<T> out = Tensor<T>::zeros({bsz, m, n});
        for (std::size_t i = 0; i < bsz; ++i) {
            const T* ap = av.ptr() + i * m * k;
            const T* bp = bv.ptr() + i * k * n;
            T* op = out.ptr() + i * m * n;
            if (transpose_b) {
                kern::mm_nt(ap, bp, op, m, k, n);
            } else {
                kern::mm_nn(ap, bp, op, m, k, n);
            }
        }
        return finish("bmm", std::move(out), {a, b},
                      [av, bv, bsz, m, k, n, transpose_b](const Closure& c) {
                          for (std::size_t i = 0; i < bsz; ++i) {
                              const T* ap = av.ptr() + i * m * k;
                              const T* bp = bv.ptr() + i * k * n;
                              const T* gop = c.out_grad.ptr() + i * m * n;
                              T* gap = c.in_wants[0] ? c.in_grads[0].ptr() + i * m * k : nullptr;
                              T* gbp = c.in_wants[1] ? c.in_grads[1].ptr() + i * k * n : nullptr;
                              if (transpose_b) {
                                  if (gap) kern::mm_nn(gop, bp, gap, m, n, k);
                                  if (gbp) kern::mm_tn(gop, ap, gbp, n, m, k);
                              } else {
                                  if (gap) kern::mm_nt(gop, bp, gap, m, n, k);
                                  if (gbp) kern::mm_tn(ap, gop, gbp, k, m, n);
                              }
                          }
                      });
    }

    Var reshape(Var a, std::vector<std::size_t> shape) {
        Tensor<T> out = value(a).reshaped(std::move(shape));
        return finish("reshape", std::move(out), {a}, [](const Closure& c) {
            if (!c.in_wants[0]) return;
            T* gp = c.in_grads[0].ptr();
            const T* gop = c.out_grad.ptr();
            for (std::size_t i = 0; i < c.out_grad.numel(); ++i) gp[i] += gop[i];
        });
    }

    // Contiguous slice along the last dim.
    Var slice_last(Var a, std::size_t offset, std::size_t len) {
        const Tensor<T>& av = value(a);
        std::size_t d = av.shape().back();
        if (offset + len > d) {
            fail(Error::Kind::contract, "slice_last [", offset, ", ", offset + len,
                 ") exceeds last dim of ", shape_str(av.shape()));
        }
        std::vector<std::size_t> oshape = av.shape();
        oshape.back() = len;
        std::size_t rows = av.numel() / d;
        Tensor<T> out = Tensor<T>::zeros(oshape);
        const T* ap = av.ptr();
        T* op = out.ptr();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < len; ++j) op[r * len + j] = ap[r * d + offset + j];
        }
        return finish("slice_last", std::move(out), {a}, [rows, d, offset, len](const Closure& c) {
            if (!c.in_wants[0]) return;
            T* gp = c.in_grads[0].ptr();
            const T* gop = c.out_grad.ptr();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < len; ++j) gp[r * d + offset + j] += gop[r * len + j];
            }
        });
    }

    // [a, b, c, d] -> [a, c, b, d]; its own inverse, so backward applies the
    // same permutation to the output gradient.
    Var swap_axes12(Var x) {
        const Tensor<T>& xv = value(x);
        if (xv.rank() != 4) {
            fail(Error::Kind::contract, "swap_axes12 expects rank-4, got ", shape_str(xv.shape()));
        }
        std::size_t d0 = xv.dim(0), d1 = xv.dim(1), d2 = xv.dim(2), d3 = xv.dim(3);
        Tensor<T> out = Tensor<T>::zeros({d0, d2, d1, d3});
        const T* xp = xv.ptr();
        T* op = out.ptr();
        for (std::size_t a = 0; a < d0; ++a) {
            for (std::size_t b = 0; b < d1; ++b) {
                for (std::size_t c = 0; c < d2; ++c) {
                    const T* src = xp + ((a * d1 + b) * d2 + c) * d3;
                    T* dst = op + ((a * d2 + c) * d1 + b) * d3;
                    for (std::size_t e = 0; e < d3; ++e) dst[e] = src[e];
                }
            }
        }
        return finish("swap_axes12", std::move(out), {x}, [d0, d1, d2, d3](const Closure& c) {
            if (!c.in_wants[0]) return;
            T* gp = c.in_grads[0].ptr();
            const T* gop = c.out_grad.ptr();
            for (std::size_t a = 0; a < d0; ++a) {
                for (std::size_t b = 0; b < d1; ++b) {
                    for (std::size_t cc = 0; cc < d2; ++cc) {
                        const T* src = gop + ((a * d2 + cc) * d1 + b) * d3;
                        T* dst = gp + ((a * d1 + b) * d2 + cc) * d3;
                        for (std::size_t e = 0; e < d3; ++e) dst[e] += src[e];
                    }
                }
            }
        });
    }

    // Row lookup: out[i, :] = table[ids[i], :]. Backward scatter-adds.
    Var embedding(Var table, std::vector<std::int32_t> ids) {
        const Tensor<T>& tv = value(table);
        if (tv.rank() != 2) {
            fail(Error::Kind::contract, "embedding table must be rank-2, got ",
                 shape_str(tv.shape()));
        }
        std::size_t v = tv.dim(0);
        std::size_t d = tv.dim(1);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
                fail(Error::Kind::input, "token id ", ids[i], " at position ", i,
                     " is out of range [0, ", v, ")");
            }
        }
        Tensor<T> out = Tensor<T>::zeros({ids.size(), d});
        const T* tp = tv.ptr();
        T* op = out.ptr();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const T* src = tp + static_cast<std::size_t>(ids[i]) * d;
            for (std::size_t j = 0; j < d; ++j) op[i * d + j] = src[j];
        }
        return finish("embedding", std::move(out), {table},
                      [ids = std::move(ids), d](const Closure& c) {
                          if (!c.in_wants[0]) return;
                          T* gp = c.in_grads[0].ptr();
                          const T* gop = c.out_grad.ptr();
                          for (std::size_t i = 0; i < ids.size(); ++i) {
                              T* dst = gp + static_cast<std::size_t>(ids[i]) * d;
                              for (std::size_t j = 0; j < d; ++j) dst[j] += gop[i * d + j];
                          }
                      });
    }

    // Sets scores above the diagonal to -inf on a [batch, t, t] tensor. The
    // only op whose output may be non-finite by construction.
    Var causal_mask(Var a) {
        const Tensor<T>& av = value(a);
        if (av.rank() != 3 || av.dim(1) != av.dim(2)) {
            fail(Error::Kind::contract, "causal_mask expects [batch, t, t], got ",
                 shape_str(av.shape()));
        }
        std::size_t bsz = av.dim(0);
        std::size_t t = av.dim(1);
        Tensor<T> out = av.clone();
        T neg_inf = -std::numeric_limits<T>::infinity();
        T* op = out.ptr();
        for (std::size_t b = 0; b < bsz; ++b) {
            for (std::size_t i = 0; i < t; ++i) {
                T* row = op + (b * t + i) * t;
                for (std::size_t j = i + 1; j < t; ++j) row[j] = neg_inf;
            }
        }
        return finish_unchecked(std::move(out), {a}, [bsz, t](const Closure& c) {
            if (!c.in_wants[0]) return;
            T* gp = c.in_grads[0].ptr();
            const T* gop = c.out_grad.ptr();
            for (std::size_t b = 0; b < bsz; ++b) {
                for (std::size_t i = 0; i < t; ++i) {
                    std::size_t base = (b * t + i) * t;
                    for (std::size_t j = 0; j <= i; ++j) gp[base + j] += gop[base + j];
                }
            }
        });
    }

    // Softmax along the last dim. Row reductions run in double regardless of T.
    Var softmax_last(Var a) {
        const Tensor<T>& av = value(a);
        std::size_t d = av.shape().back();
        std::size_t rows = av.numel() / d;
        Tensor<T> out = Tensor<T>::zeros(av.shape());
        const T* ap = av.ptr();
        T* op = out.ptr();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* x = ap + r * d;
            T* y = op + r * d;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < d; ++j) mx = std::max(mx, static_cast<double>(x[j]));
            double sum = 0.0;
            std::vector<double> e(d);
            for (std::size_t j = 0; j < d; ++j) {
                e[j] = std::exp(static_cast<double>(x[j]) - mx);
                sum += e[j];
            }
            for (std::size_t j = 0; j < d; ++j) y[j] = static_cast<T>(e[j] / sum);
        }
        Tensor<T> yv = out;  // shared handle for the backward closure
        return finish("softmax_last", std::move(out), {a}, [yv, rows, d](const Closure& c) {
            if (!c.in_wants[0]) return;
            T* gp = c.in_grads[0].ptr();
            const T* gop = c.out_grad.ptr();
            const T* yp = yv.ptr();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = yp + r * d;
                const T* go = gop + r * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    dot += static_cast<double>(go[j]) * static_cast<double>(y[j]);
                }
                T* g = gp + r * d;
                for (std::size_t j = 0; j < d; ++j) {
                    g[j] += static_cast<T>(static_cast<double>(y[j]) *
                                           (static_cast<double>(go[j]) - dot));
                }
            }
        });
    }

    // Normalizes each row of x to zero mean and unit variance (population
    // variance, epsilon inside the square root), then applies gain and bias.
    Var layer_norm(Var x, Var gain, Var bias, T eps = static_cast<T>(1e-5)) {
        const Tensor<T>& xv = value(x);
        const Tensor<T>& gv = value(gain);
        const Tensor<T>& bv = value(bias);
        std::size_t d = xv.shape().back();
        if (gv.rank() != 1 || gv.dim(0) != d || bv.rank() != 1 || bv.dim(0) != d) {
            fail(Error::Kind::contract, "layer_norm: gain ", shape_str(gv.shape()), " and bias ",
                 shape_str(bv.shape()), " must be [", d, "]");
        }
        std::size_t rows = xv.numel() / d;
        Tensor<T> out = Tensor<T>::zeros(xv.shape());
        Tensor<T> xhat = Tensor<T>::zeros(xv.shape());
        Tensor<T> inv = Tensor<T>::zeros({rows});
        const T* xp = xv.ptr();
        const T* gp = gv.ptr();
        const T* bp = bv.ptr();
        T* op = out.ptr();
        T* hp = xhat.ptr();
        T* ip = inv.ptr();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* row = xp + r * d;
            double mean = 0.0;
            for (std::size_t j = 0; j < d; ++j) mean += static_cast<double>(row[j]);
            mean /= static_cast<double>(d);
            double var = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                double c = static_cast<double>(row[j]) - mean;
                var += c * c;
            }
            var /= static_cast<double>(d);
            double rinv = 1.0 / std::sqrt(var + static_cast<double>(eps));
            ip[r] = static_cast<T>(rinv);
            for (std::size_t j = 0; j < d; ++j) {
                double h = (static_cast<double>(row[j]) - mean) * rinv;
                hp[r * d + j] = static_cast<T>(h);
                op[r * d + j] =
                    static_cast<T>(h * static_cast<double>(gp[j]) + static_cast<double>(bp[j]));
            }
        }
        return finish("layer_norm", std::move(out), {x, gain, bias},
                      [xhat, inv, gv, rows, d](const Closure& c) {
                          const T* gop = c.out_grad.ptr();
                          const T* hp = xhat.ptr();
                          const T* ip = inv.ptr();
                          const T* gainp = gv.ptr();
                          if (c.in_wants[1]) {
                              T* gg = c.in_grads[1].ptr();
                              for (std::size_t r = 0; r < rows; ++r) {
                                  for (std::size_t j = 0; j < d; ++j) {
                                      gg[j] += gop[r * d + j] * hp[r * d + j];
                                  }
                              }
                          }
                          if (c.in_wants[2]) {
                              T* gb = c.in_grads[2].ptr();
                              for (std::size_t r = 0; r < rows; ++r) {
                                  for (std::size_t j = 0; j < d; ++j) gb[j] += gop[r * d + j];
                              }
                          }
                          if (c.in_wants[0]) {
                              T* gx = c.in_grads[0].ptr();
                              std::vector<double> h(d);
                              for (std::size_t r = 0; r < rows; ++r) {
                                  double mean_h = 0.0;
                                  double mean_hx = 0.0;
                                  for (std::size_t j = 0; j < d; ++j) {
                                      h[j] = static_cast<double>(gop[r * d + j]) *
                                             static_cast<double>(gainp[j]);
                                      mean_h += h[j];
                                      mean_hx += h[j] * static_cast<double>(hp[r * d + j]);
                                  }
                                  mean_h /= static_cast<double>(d);
                                  mean_hx /= static_cast<double>(d);
                                  double rinv = static_cast<double>(ip[r]);
                                  for (std::size_t j = 0; j < d; ++j) {
                                      double xh = static_cast<double>(hp[r * d + j]);
                                      gx[r * d + j] +=
                                          static_cast<T>(rinv * (h[j] - mean_h - xh * mean_hx));
                                  }
                              }
                          }
                      });
    }

    // GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    Var gelu(Var a) {
        const Tensor<T>& av = value(a);
        Tensor<T> out = Tensor<T>::zeros(av.shape());
        const T* ap = av.ptr();
        T* op = out.ptr();
        for (std::size_t i = 0; i < out.numel(); ++i) {
            double x = static_cast<double>(ap[i]);
            double u = detail::kGeluC * (x + detail::kGeluA * x * x * x);
            op[i] = static_cast<T>(0.5 * x * (1.0 + std::tanh(u)));
        }
        return finish("gelu", std::move(out), {a}, [av](const Closure& c) {
            if (!c.in_wants[0]) return;
            T* gp = c.in_grads[0].ptr();
            const T* gop = c.out_grad.ptr();
            const T* ap = av.ptr();
            for (std::size_t i = 0; i < c.out_grad.numel(); ++i) {
                double x = static_cast<double>(ap[i]);
                double u = detail::kGeluC * (x + detail::kGeluA * x * x * x);
                double t = std::tanh(u);
                double der = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * detail::kGeluC *
                                                   (1.0 + 3.0 * detail::kGeluA * x * x);
                gp[i] += static_cast<T>(static_cast<double>(gop[i]) * der);
            }
        });
    }

    // Inverted dropout: kept activations are scaled by 1/(1-p) so the
    // expectation is unchanged. Identity (no tape node) when not training or
    // p is zero, so eval graphs never consume randomness.
    Var dropout(Var a, double p, Rng& rng, bool training) {
        if (p < 0.0 || p >= 1.0) {
            fail(Error::Kind::input, "dropout rate ", p, " must be in [0, 1)");
        }
        if (!training || p == 0.0) return a;
        const Tensor<T>& av = value(a);
        Tensor<T> mask = Tensor<T>::zeros(av.shape());
        Tensor<T> out = Tensor<T>::zeros(av.shape());
        T keep_scale = static_cast<T>(1.0 / (1.0 - p));
        const T* ap = av.ptr();
        T* mp = mask.ptr();
        T* op = out.ptr();
        for (std::size_t i = 0; i < out.numel(); ++i) {
            mp[i] = rng.next_double() < p ? T{} : keep_scale;
            op[i] = ap[i] * mp[i];
        }
        return finish("dropout", std::move(out), {a}, [mask](const Closure& c) {
            if (!c.in_wants[0]) return;
            T* gp = c.in_grads[0].ptr();
            const T* gop = c.out_grad.ptr();
            const T* mp = mask.ptr();
            for (std::size_t i = 0; i < c.out_grad.numel(); ++i) gp[i] += gop[i] * mp[i];
        });
    }

    // Mean token-level cross entropy between logits [n, v] and targets [n].
    // The log-sum-exp runs in double; backward is (softmax - onehot) / n.
    Var cross_entropy(Var logits, std::vector<std::int32_t> targets) {
        const Tensor<T>& lv = value(logits);
        if (lv.rank() != 2) {
            fail(Error::Kind::contract, "cross_entropy expects rank-2 logits, got ",
                 shape_str(lv.shape()));
        }
        std::size_t n = lv.dim(0);
        std::size_t v = lv.dim(1);
        if (targets.size() != n) {
            fail(Error::Kind::contract, "cross_entropy: ", targets.size(), " targets for ", n,
                 " logit rows");
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
                fail(Error::Kind::input, "target id ", targets[i], " at position ", i,
                     " is out of range [0, ", v, ")");
            }
        }
        Tensor<T> probs = Tensor<T>::zeros({n, v});
        const T* lp = lv.ptr();
        T* pp = probs.ptr();
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const T* row = lp + i * v;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
            double sum = 0.0;
            for (std::size_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
            double lse = mx + std::log(sum);
            for (std::size_t j = 0; j < v; ++j) {
                pp[i * v + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
            }
            total += lse - static_cast<double>(row[targets[i]]);
        }
        Tensor<T> out =
            Tensor<T>::from_values({1}, {static_cast<T>(total / static_cast<double>(n))});
        return finish("cross_entropy", std::move(out), {logits},
                      [probs, targets = std::move(targets), n, v](const Closure& c) {
                          if (!c.in_wants[0]) return;
                          T go = c.out_grad.at(0);
                          T invn = static_cast<T>(1.0 / static_cast<double>(n));
                          T* gp = c.in_grads[0].ptr();
                          const T* pp = probs.ptr();
                          for (std::size_t i = 0; i < n; ++i) {
                              for (std::size_t j = 0; j < v; ++j) {
                                  T delta = pp[i * v + j];
                                  if (static_cast<std::size_t>(targets[i]) == j) delta -= T{1};
                                  gp[i * v + j] += go * invn * delta;
                              }
                          }
                      });
    }

    // Sum of all elements, as a [1] scalar.
    Var sum(Var a) {
        const Tensor<T>& av = value(a);
        double total = 0.0;
        const T* ap = av.ptr();
        for (std::size_t i = 0; i < av.numel(); ++i) total += static_cast<double>(ap[i]);
        Tensor<T> out = Tensor<T>::from_values({1}, {static_cast<T>(total)});
        return finish("sum", std::move(out), {a}, [](const Closure& c) {
            if (!c.in_wants[0]) return;
            T go = c.out_grad.at(0);
            T* gp = c.in_grads[0].ptr();
            for (std::size_t i = 0; i < c.in_grads[0].numel(); ++i) gp[i] += go;
        });
    }

    // Seeds the loss gradient with 1 and replays the tape up to the loss in
    // reverse. Consumes the graph: a second call is a contract error.
    void backward(Var loss) {
        if (consumed_) {
            fail(Error::Kind::contract, "backward called twice on the same graph");
        }
        Node& ln = nodes_[loss.idx];
        if (ln.value.numel() != 1) {
            fail(Error::Kind::contract, "backward target must be scalar, got ",
                 shape_str(ln.value.shape()));
        }
        if (!ln.requires_grad) {
            fail(Error::Kind::contract, "backward target does not require gradients");
        }
        consumed_ = true;
        ln.grad.fill(T{1});
        for (std::size_t i = loss.idx + 1; i-- > 0;) {
            if (nodes_[i].backprop) nodes_[i].backprop();
        }
    }

private:
    struct Closure {
        Tensor<T> out_grad;
        std::vector<Tensor<T>> in_grads;
        std::vector<bool> in_wants;
    };

    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        std::function<void()> backprop;
    };

    Var push(Tensor<T> value, Tensor<T> grad, bool requires_grad, std::function<void()> backprop) {
        if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) {
            fail(Error::Kind::contract, "graph node limit exceeded");
        }
        nodes_.push_back(
            Node{std::move(value), std::move(grad), requires_grad, std::move(backprop)});
        return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    template <typename F>
    Var finish(const char* op, Tensor<T> out, std::initializer_list<Var> inputs, F&& body) {
        if (!out.all_finite()) {
            fail(Error::Kind::numeric, "non-finite values in ", op, " output");
        }
        return finish_unchecked(std::move(out), inputs, std::forward<F>(body));
    }

    template <typename F>
    Var finish_unchecked(Tensor<T> out, std::initializer_list<Var> inputs, F&& body) {
        Closure c;
        bool any = false;
        for (Var in : inputs) {
            const Node& n = nodes_[in.idx];
            c.in_wants.push_back(n.requires_grad);
            c.in_grads.push_back(n.grad);
            any = any || n.requires_grad;
        }
        if (!any) {
            return push(std::move(out), Tensor<T>{}, false, nullptr);
        }
        Tensor<T> grad = Tensor<T>::zeros(out.shape());
        c.out_grad = grad;
        std::function<void()> fn = [c = std::move(c), body = std::forward<F>(body)]() { body(c); };
        return push(std::move(out), std::move(grad), true, std::move(fn));
    }

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

}  // namespace aglm
