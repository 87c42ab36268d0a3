#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "ssdn/tape.hpp"

namespace ssdn {
namespace detail {

// C[m,n] (+)= A[m,k] * B[k,n]. Fixed i/p/j loop order: accumulation order is
// part of the determinism contract.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<size_t>(i) * n;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    const T* arow = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * k;
    T* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<size_t>(j) * k;
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      if (accumulate) {
        crow[j] += acc;
      } else {
        crow[j] = acc;
      }
    }
  }
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<size_t>(m) * n, T(0));
  for (int p = 0; p < k; ++p) {
    const T* arow = a + static_cast<size_t>(p) * m;
    const T* brow = b + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// patches[(c*kh+ki)*kw+kj, oh*ow_out+ow] = x[c, oh*stride-pad+ki, ow*stride-pad+kj]
template <typename T>
void im2col(const T* x, int c_in, int h, int w, int kh, int kw, int stride, int pad, int oh,
            int ow, T* patches) {
  for (int c = 0; c < c_in; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* prow = patches + (static_cast<size_t>(c) * kh * kw + ki * kw + kj) *
                                (static_cast<size_t>(oh) * ow);
        for (int i = 0; i < oh; ++i) {
          const int si = i * stride - pad + ki;
          for (int j = 0; j < ow; ++j) {
            const int sj = j * stride - pad + kj;
            T v = 0;
            if (si >= 0 && si < h && sj >= 0 && sj < w) {
              v = x[(static_cast<size_t>(c) * h + si) * w + sj];
            }
            prow[static_cast<size_t>(i) * ow + j] = v;
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* patches, int c_in, int h, int w, int kh, int kw, int stride, int pad,
                int oh, int ow, T* dx) {
  for (int c = 0; c < c_in; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* prow = patches + (static_cast<size_t>(c) * kh * kw + ki * kw + kj) *
                                      (static_cast<size_t>(oh) * ow);
        for (int i = 0; i < oh; ++i) {
          const int si = i * stride - pad + ki;
          if (si < 0 || si >= h) continue;
          for (int j = 0; j < ow; ++j) {
            const int sj = j * stride - pad + kj;
            if (sj < 0 || sj >= w) continue;
            dx[(static_cast<size_t>(c) * h + si) * w + sj] += prow[static_cast<size_t>(i) * ow + j];
          }
        }
      }
    }
  }
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ContractViolation(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                            " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& va = tape.value(a);
  const Tensor<T>& vb = tape.value(b);
  detail::check_same_shape(va, vb, "add");
  Tensor<T> out = va;
  for (int64_t i = 0; i < out.size(); ++i) out[i] += vb[i];
  const int ia = a.id, ib = b.id;
  return tape.make_node(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

template <typename T>
Var sub(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& va = tape.value(a);
  const Tensor<T>& vb = tape.value(b);
  detail::check_same_shape(va, vb, "sub");
  Tensor<T> out = va;
  for (int64_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
  const int ia = a.id, ib = b.id;
  return tape.make_node(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ia, g);
    Tensor<T> ng = g;
    for (int64_t i = 0; i < ng.size(); ++i) ng[i] = -ng[i];
    t.accumulate(ib, ng);
  });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& va = tape.value(a);
  const Tensor<T>& vb = tape.value(b);
  detail::check_same_shape(va, vb, "mul");
  Tensor<T> out = va;
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
  const int ia = a.id, ib = b.id;
  return tape.make_node(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xa = t.value(Var{ia});
    const Tensor<T>& xb = t.value(Var{ib});
    Tensor<T> ga = g;
    for (int64_t i = 0; i < ga.size(); ++i) ga[i] *= xb[i];
    t.accumulate(ia, ga);
    Tensor<T> gb = g;
    for (int64_t i = 0; i < gb.size(); ++i) gb[i] *= xa[i];
    t.accumulate(ib, gb);
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T c) {
  Tensor<T> out = tape.value(a);
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= c;
  const int ia = a.id;
  return tape.make_node(std::move(out), {ia}, [ia, c](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> ga = g;
    for (int64_t i = 0; i < ga.size(); ++i) ga[i] *= c;
    t.accumulate(ia, ga);
  });
}

// Subgradient at exactly 0 is 0.
template <typename T>
Var relu(Tape<T>& tape, Var a) {
  Tensor<T> out = tape.value(a);
  for (int64_t i = 0; i < out.size(); ++i) out[i] = out[i] > T(0) ? out[i] : T(0);
  const int ia = a.id;
  return tape.make_node(std::move(out), {ia}, [ia](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& x = t.value(Var{ia});
    Tensor<T> ga = g;
    for (int64_t i = 0; i < ga.size(); ++i) ga[i] = x[i] > T(0) ? ga[i] : T(0);
    t.accumulate(ia, ga);
  });
}

template <typename T>
Var reshape(Tape<T>& tape, Var a, Shape new_shape) {
  const Tensor<T>& va = tape.value(a);
  if (numel(new_shape) != va.size()) {
    throw ContractViolation("reshape: cannot view " + shape_str(va.shape()) + " as " +
                            shape_str(new_shape));
  }
  Tensor<T> out(new_shape, va.vec());
  const int ia = a.id;
  Shape old_shape = va.shape();
  return tape.make_node(std::move(out), {ia},
                        [ia, old_shape](Tape<T>& t, const Tensor<T>& g) {
                          t.accumulate(ia, Tensor<T>(old_shape, g.vec()));
                        });
}

template <typename T>
Var sum_all(Tape<T>& tape, Var a) {
  const Tensor<T>& va = tape.value(a);
  T s = 0;
  for (int64_t i = 0; i < va.size(); ++i) s += va[i];
  const int ia = a.id;
  Shape in_shape = va.shape();
  return tape.make_node(Tensor<T>::scalar(s), {ia},
                        [ia, in_shape](Tape<T>& t, const Tensor<T>& g) {
                          t.accumulate(ia, Tensor<T>::full(in_shape, g[0]));
                        });
}

template <typename T>
Var mean_all(Tape<T>& tape, Var a) {
  const Tensor<T>& va = tape.value(a);
  T s = 0;
  for (int64_t i = 0; i < va.size(); ++i) s += va[i];
  const T inv = T(1) / static_cast<T>(va.size());
  const int ia = a.id;
  Shape in_shape = va.shape();
  return tape.make_node(Tensor<T>::scalar(s * inv), {ia},
                        [ia, in_shape, inv](Tape<T>& t, const Tensor<T>& g) {
                          t.accumulate(ia, Tensor<T>::full(in_shape, g[0] * inv));
                        });
}

// Contiguous range [start, stop) along one axis.
template <typename T>
Var slice(Tape<T>& tape, Var a, int axis, int start, int stop) {
  const Tensor<T>& va = tape.value(a);
  if (axis < 0 || axis >= va.rank()) {
    throw ContractViolation("slice: axis " + std::to_string(axis) + " out of range for " +
                            shape_str(va.shape()));
  }
  if (start < 0 || stop <= start || stop > va.dim(axis)) {
    throw ContractViolation("slice: range [" + std::to_string(start) + "," +
                            std::to_string(stop) + ") invalid for axis extent " +
                            std::to_string(va.dim(axis)));
  }
  Shape out_shape = va.shape();
  out_shape[static_cast<size_t>(axis)] = stop - start;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= va.dim(i);
  for (int i = axis + 1; i < va.rank(); ++i) inner *= va.dim(i);
  const int64_t in_axis = va.dim(axis);
  const int64_t span = stop - start;
  Tensor<T> out(out_shape);
  for (int64_t o = 0; o < outer; ++o) {
    const T* src = va.data() + (o * in_axis + start) * inner;
    T* dst = out.data() + o * span * inner;
    std::copy(src, src + span * inner, dst);
  }
  const int ia = a.id;
  Shape in_shape = va.shape();
  return tape.make_node(
      std::move(out), {ia},
      [ia, in_shape, axis, start, span, outer, inner, in_axis](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T> gx(in_shape);
        for (int64_t o = 0; o < outer; ++o) {
          const T* src = g.data() + o * span * inner;
          T* dst = gx.data() + (o * in_axis + start) * inner;
          std::copy(src, src + span * inner, dst);
        }
        t.accumulate(ia, gx);
      });
}

// Concatenation along axis 0.
template <typename T>
Var concat0(Tape<T>& tape, const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractViolation("concat0: no inputs");
  const Tensor<T>& first = tape.value(parts[0]);
  Shape out_shape = first.shape();
  int total = first.dim(0);
  for (size_t i = 1; i < parts.size(); ++i) {
    const Tensor<T>& v = tape.value(parts[i]);
    if (v.rank() != first.rank()) {
      throw ContractViolation("concat0: rank mismatch");
    }
    for (int d = 1; d < first.rank(); ++d) {
      if (v.dim(d) != first.dim(d)) {
        throw ContractViolation("concat0: trailing shape mismatch " + shape_str(v.shape()) +
                                " vs " + shape_str(first.shape()));
      }
    }
    total += v.dim(0);
  }
  out_shape[0] = total;
  Tensor<T> out(out_shape);
  std::vector<int> ids;
  std::vector<int64_t> sizes;
  int64_t off = 0;
  for (Var p : parts) {
    const Tensor<T>& v = tape.value(p);
    std::copy(v.data(), v.data() + v.size(), out.data() + off);
    off += v.size();
    ids.push_back(p.id);
    sizes.push_back(v.size());
  }
  std::vector<Shape> shapes;
  for (Var p : parts) shapes.push_back(tape.value(p).shape());
  return tape.make_node(std::move(out), ids,
                        [ids, sizes, shapes](Tape<T>& t, const Tensor<T>& g) {
                          int64_t o = 0;
                          for (size_t i = 0; i < ids.size(); ++i) {
                            Tensor<T> gi(shapes[i]);
                            std::copy(g.data() + o, g.data() + o + sizes[i], gi.data());
                            o += sizes[i];
                            t.accumulate(ids[i], gi);
                          }
                        });
}

// [N,C,H,W] -> [N,C], mean over the spatial extent.
template <typename T>
Var global_avg_pool(Tape<T>& tape, Var a) {
  const Tensor<T>& x = tape.value(a);
  if (x.rank() != 4) {
    throw ContractViolation("global_avg_pool: expected rank-4 input, got " +
                            shape_str(x.shape()));
  }
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const T inv = T(1) / static_cast<T>(h * w);
  Tensor<T> out({n, c});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      const T* p = x.data() + (static_cast<size_t>(i) * c + j) * h * w;
      T s = 0;
      for (int k = 0; k < h * w; ++k) s += p[k];
      out(i, j) = s * inv;
    }
  }
  const int ia = a.id;
  Shape in_shape = x.shape();
  return tape.make_node(std::move(out), {ia},
                        [ia, in_shape, n, c, h, w, inv](Tape<T>& t, const Tensor<T>& g) {
                          Tensor<T> gx(in_shape);
                          for (int i = 0; i < n; ++i) {
                            for (int j = 0; j < c; ++j) {
                              const T gv = g(i, j) * inv;
                              T* p = gx.data() + (static_cast<size_t>(i) * c + j) * h * w;
                              for (int k = 0; k < h * w; ++k) p[k] = gv;
                            }
                          }
                          t.accumulate(ia, gx);
                        });
}

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& va = tape.value(a);
  const Tensor<T>& vb = tape.value(b);
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0)) {
    throw ContractViolation("matmul: incompatible shapes " + shape_str(va.shape()) + " x " +
                            shape_str(vb.shape()));
  }
  const int m = va.dim(0), k = va.dim(1), n = vb.dim(1);
  Tensor<T> out({m, n});
  detail::gemm_nn(va.data(), vb.data(), out.data(), m, k, n, false);
  const int ia = a.id, ib = b.id;
  return tape.make_node(std::move(out), {ia, ib},
                        [ia, ib, m, k, n](Tape<T>& t, const Tensor<T>& g) {
                          const Tensor<T>& xa = t.value(Var{ia});
                          const Tensor<T>& xb = t.value(Var{ib});
                          if (t.requires_grad(Var{ia})) {
                            Tensor<T> ga({m, k});
                            detail::gemm_nt(g.data(), xb.data(), ga.data(), m, n, k, false);
                            t.accumulate(ia, ga);
                          }
                          if (t.requires_grad(Var{ib})) {
                            Tensor<T> gb({k, n});
                            detail::gemm_tn(xa.data(), g.data(), gb.data(), k, m, n, false);
                            t.accumulate(ib, gb);
                          }
                        });
}

// y = x * w^T + b with x:[N,F], w:[O,F], b:[O]
template <typename T>
Var affine(Tape<T>& tape, Var x, Var w, Var b) {
  const Tensor<T>& vx = tape.value(x);
  const Tensor<T>& vw = tape.value(w);
  const Tensor<T>& vb = tape.value(b);
  if (vx.rank() != 2 || vw.rank() != 2 || vx.dim(1) != vw.dim(1)) {
    throw ContractViolation("affine: incompatible shapes " + shape_str(vx.shape()) + " x " +
                            shape_str(vw.shape()));
  }
  if (vb.rank() != 1 || vb.dim(0) != vw.dim(0)) {
    throw ContractViolation("affine: bias shape " + shape_str(vb.shape()) +
                            " does not match output width " + std::to_string(vw.dim(0)));
  }
  const int n = vx.dim(0), f = vx.dim(1), o = vw.dim(0);
  Tensor<T> out({n, o});
  detail::gemm_nt(vx.data(), vw.data(), out.data(), n, f, o, false);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < o; ++j) out(i, j) += vb(j);
  }
  const int ix = x.id, iw = w.id, ib = b.id;
  return tape.make_node(std::move(out), {ix, iw, ib},
                        [ix, iw, ib, n, f, o](Tape<T>& t, const Tensor<T>& g) {
                          const Tensor<T>& xv = t.value(Var{ix});
                          const Tensor<T>& wv = t.value(Var{iw});
                          if (t.requires_grad(Var{ix})) {
                            Tensor<T> gx({n, f});
                            detail::gemm_nn(g.data(), wv.data(), gx.data(), n, o, f, false);
                            t.accumulate(ix, gx);
                          }
                          if (t.requires_grad(Var{iw})) {
                            Tensor<T> gw({o, f});
                            detail::gemm_tn(g.data(), xv.data(), gw.data(), o, n, f, false);
                            t.accumulate(iw, gw);
                          }
                          if (t.requires_grad(Var{ib})) {
                            Tensor<T> gb({o});
                            for (int i = 0; i < n; ++i) {
                              for (int j = 0; j < o; ++j) gb(j) += g(i, j);
                            }
                            t.accumulate(ib, gb);
                          }
                        });
}

// Cross-correlation. The weight is an ordinary graph node: it may be the
// output of an upstream computation, and its gradient is produced like any
// other input's.
template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var weight, Var bias, int stride, int pad) {
  const Tensor<T>& x = tape.value(input);
  const Tensor<T>& w = tape.value(weight);
  if (x.rank() != 4 || w.rank() != 4) {
    throw ContractViolation("conv2d: input and weight must be rank 4, got " +
                            shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  if (stride < 1) throw ContractViolation("conv2d: stride must be >= 1");
  if (pad < 0) throw ContractViolation("conv2d: pad must be >= 0");
  const int n = x.dim(0), c_in = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int c_out = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != c_in) {
    throw ContractViolation("conv2d: weight expects " + std::to_string(w.dim(1)) +
                            " input channels, input has " + std::to_string(c_in));
  }
  if (kh > h + 2 * pad || kw > wd + 2 * pad) {
    throw ContractViolation("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                            " exceeds padded input " + std::to_string(h + 2 * pad) + "x" +
                            std::to_string(wd + 2 * pad));
  }
  const bool has_bias = bias.valid();
  if (has_bias) {
    const Tensor<T>& bv = tape.value(bias);
    if (bv.rank() != 1 || bv.dim(0) != c_out) {
      throw ContractViolation("conv2d: bias shape " + shape_str(bv.shape()) +
                              " does not match " + std::to_string(c_out) + " output channels");
    }
  }
  const int oh = detail::conv_out_dim(h, kh, stride, pad);
  const int ow = detail::conv_out_dim(wd, kw, stride, pad);
  const int kdim = c_in * kh * kw;
  const int64_t osz = static_cast<int64_t>(oh) * ow;

  Tensor<T> out({n, c_out, oh, ow});
  {
    std::vector<T> patches(static_cast<size_t>(kdim) * osz);
    for (int s = 0; s < n; ++s) {
      const T* xs = x.data() + static_cast<size_t>(s) * c_in * h * wd;
      detail::im2col(xs, c_in, h, wd, kh, kw, stride, pad, oh, ow, patches.data());
      T* ys = out.data() + static_cast<size_t>(s) * c_out * osz;
      detail::gemm_nn(w.data(), patches.data(), ys, c_out, kdim, static_cast<int>(osz), false);
      if (has_bias) {
        const Tensor<T>& bv = tape.value(bias);
        for (int co = 0; co < c_out; ++co) {
          T* row = ys + static_cast<size_t>(co) * osz;
          for (int64_t i = 0; i < osz; ++i) row[i] += bv(co);
        }
      }
    }
  }

  const int ii = input.id, iw = weight.id, ib = has_bias ? bias.id : -1;
  return tape.make_node(
      std::move(out), has_bias ? std::vector<int>{ii, iw, ib} : std::vector<int>{ii, iw},
      [ii, iw, ib, n, c_in, h, wd, c_out, kh, kw, stride, pad, oh, ow, kdim,
       osz](Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& x = t.value(Var{ii});
        const Tensor<T>& w = t.value(Var{iw});
        const bool need_x = t.requires_grad(Var{ii});
        const bool need_w = t.requires_grad(Var{iw});
        const bool need_b = ib >= 0 && t.requires_grad(Var{ib});
        std::vector<T> patches(static_cast<size_t>(kdim) * osz);
        std::vector<T> dpatches(need_x ? patches.size() : 0);
        Tensor<T> gx;
        if (need_x) gx = Tensor<T>(x.shape());
        Tensor<T> gw;
        if (need_w) gw = Tensor<T>(w.shape());
        Tensor<T> gb;
        if (need_b) gb = Tensor<T>({c_out});
        for (int s = 0; s < n; ++s) {
          const T* gs = g.data() + static_cast<size_t>(s) * c_out * osz;
          if (need_w || need_x) {
            const T* xs = x.data() + static_cast<size_t>(s) * c_in * h * wd;
            if (need_w) {
              detail::im2col(xs, c_in, h, wd, kh, kw, stride, pad, oh, ow, patches.data());
              detail::gemm_nt(gs, patches.data(), gw.data(), c_out, static_cast<int>(osz), kdim,
                              true);
            }
            if (need_x) {
              detail::gemm_tn(w.data(), gs, dpatches.data(), kdim, c_out, static_cast<int>(osz),
                              false);
              T* gxs = gx.data() + static_cast<size_t>(s) * c_in * h * wd;
              detail::col2im_add(dpatches.data(), c_in, h, wd, kh, kw, stride, pad, oh, ow, gxs);
            }
          }
          if (need_b) {
            for (int co = 0; co < c_out; ++co) {
              const T* row = gs + static_cast<size_t>(co) * osz;
              T acc = 0;
              for (int64_t i = 0; i < osz; ++i) acc += row[i];
              gb(co) += acc;
            }
          }
        }
        if (need_x) t.accumulate(ii, gx);
        if (need_w) t.accumulate(iw, gw);
        if (need_b) t.accumulate(ib, gb);
      });
}

template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var weight, int stride, int pad) {
  return conv2d(tape, input, weight, Var{}, stride, pad);
}

// Mean over the batch of -log softmax(logits)[label], max-subtracted.
template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, const std::vector<int>& labels) {
  const Tensor<T>& z = tape.value(logits);
  if (z.rank() != 2) {
    throw ContractViolation("softmax_cross_entropy: logits must be [N,C], got " +
                            shape_str(z.shape()));
  }
  const int n = z.dim(0), c = z.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw ContractViolation("softmax_cross_entropy: " + std::to_string(labels.size()) +
                            " labels for batch of " + std::to_string(n));
  }
  for (int lab : labels) {
    if (lab < 0 || lab >= c) {
      throw ContractViolation("softmax_cross_entropy: label " + std::to_string(lab) +
                              " out of range [0," + std::to_string(c) + ")");
    }
  }
  Tensor<T> probs({n, c});
  T loss = 0;
  for (int i = 0; i < n; ++i) {
    T m = z(i, 0);
    for (int j = 1; j < c; ++j) m = std::max(m, z(i, j));
    T denom = 0;
    for (int j = 0; j < c; ++j) {
      const T e = std::exp(z(i, j) - m);
      probs(i, j) = e;
      denom += e;
    }
    const T inv = T(1) / denom;
    for (int j = 0; j < c; ++j) probs(i, j) *= inv;
    loss += std::log(denom) - (z(i, labels[static_cast<size_t>(i)]) - m);
  }
  loss /= static_cast<T>(n);
  const int iz = logits.id;
  return tape.make_node(Tensor<T>::scalar(loss), {iz},
                        [iz, n, c, probs, labels](Tape<T>& t, const Tensor<T>& g) {
                          const T s = g[0] / static_cast<T>(n);
                          Tensor<T> gz({n, c});
                          for (int i = 0; i < n; ++i) {
                            for (int j = 0; j < c; ++j) {
                              T v = probs(i, j);
                              if (j == labels[static_cast<size_t>(i)]) v -= T(1);
                              gz(i, j) = v * s;
                            }
                          }
                          t.accumulate(iz, gz);
                        });
}

}  // namespace ssdn
