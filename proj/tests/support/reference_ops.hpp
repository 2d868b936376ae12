#pragma once

// Naive loop references the fast implementations are checked against.

#include <cstddef>
#include <vector>

namespace testsupport {

inline std::vector<double> naive_matmul(const std::vector<double>& a,
                                        const std::vector<double>& b, int m, int k,
                                        int n) {
  std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t) {
        acc += a[static_cast<size_t>(i) * k + t] * b[static_cast<size_t>(t) * n + j];
      }
      c[static_cast<size_t>(i) * n + j] = acc;
    }
  }
  return c;
}

// x [b,ic,h,w], kernel [oc,ic,kh,kw], optional bias [oc]; zero padding.
inline std::vector<double> naive_conv2d(const std::vector<double>& x, int b, int ic,
                                        int h, int w, const std::vector<double>& kern,
                                        int oc, int kh, int kw,
                                        const std::vector<double>* bias, int stride,
                                        int pad) {
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<size_t>(b) * oc * oh * ow, 0.0);
  for (int bi = 0; bi < b; ++bi) {
    for (int o = 0; o < oc; ++o) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bias ? (*bias)[static_cast<size_t>(o)] : 0.0;
          for (int c = 0; c < ic; ++c) {
            for (int ky = 0; ky < kh; ++ky) {
              for (int kx = 0; kx < kw; ++kx) {
                const int y = oy * stride - pad + ky;
                const int xx = ox * stride - pad + kx;
                if (y < 0 || y >= h || xx < 0 || xx >= w) continue;
                acc += x[((static_cast<size_t>(bi) * ic + c) * h + y) * w + xx] *
                       kern[((static_cast<size_t>(o) * ic + c) * kh + ky) * kw + kx];
              }
            }
          }
          out[((static_cast<size_t>(bi) * oc + o) * oh + oy) * ow + ox] = acc;
        }
      }
    }
  }
  return out;
}

}  // namespace testsupport
