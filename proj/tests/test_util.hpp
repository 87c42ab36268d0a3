#pragma once

#include <vector>

#include "ssdn/rng.hpp"
#include "ssdn/tensor.hpp"

namespace ssdn::testutil {

template <typename T>
Tensor<T> random_normal(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal() * stddev);
  return t;
}

// Independent reference convolution: direct nested loops, no im2col.
template <typename T>
Tensor<T> naive_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, int stride,
                       int pad) {
  const int n = x.dim(0), c_in = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int c_out = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  Tensor<T> out({n, c_out, oh, ow});
  for (int s = 0; s < n; ++s) {
    for (int co = 0; co < c_out; ++co) {
      for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
          T acc = bias ? (*bias)(co) : T(0);
          for (int ci = 0; ci < c_in; ++ci) {
            for (int ki = 0; ki < kh; ++ki) {
              for (int kj = 0; kj < kw; ++kj) {
                const int si = i * stride - pad + ki;
                const int sj = j * stride - pad + kj;
                if (si >= 0 && si < h && sj >= 0 && sj < wd) {
                  acc += x(s, ci, si, sj) * w(co, ci, ki, kj);
                }
              }
            }
          }
          out(s, co, i, j) = acc;
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> naive_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += a(i, p) * b(p, j);
      out(i, j) = acc;
    }
  }
  return out;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    m = std::max(m, static_cast<double>(std::abs(a[i] - b[i])));
  }
  return m;
}

}  // namespace ssdn::testutil
