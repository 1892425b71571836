#pragma once

// Independent reference implementations used as test oracles. They share no
// code with the library kernels.

#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

// out[b][o] = sum_i x[b][i] * w[i][o] + bias[o]
inline std::vector<double> dense(const std::vector<double>& x, const std::vector<double>& w,
                                 const std::vector<double>& bias, std::size_t batch, std::size_t in,
                                 std::size_t out) {
  std::vector<double> y(batch * out);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out; ++o) {
      double s = bias[o];
      for (std::size_t i = 0; i < in; ++i) s += x[b * in + i] * w[i * out + o];
      y[b * out + o] = s;
    }
  return y;
}

// Seven-loop cross-correlation with zero padding.
inline std::vector<double> conv2d(const std::vector<double>& x, const std::vector<double>& k,
                                  const std::vector<double>& bias, std::size_t n, std::size_t cin, std::size_t h,
                                  std::size_t w, std::size_t cout, std::size_t kh, std::size_t kw,
                                  std::size_t stride, std::size_t pad) {
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> y(n * cout * oh * ow);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t c = 0; c < ow; ++c) {
          double s = bias[co];
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long rr = static_cast<long>(r * stride + i) - static_cast<long>(pad);
                const long cc = static_cast<long>(c * stride + j) - static_cast<long>(pad);
                if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
                s += x[((b * cin + ci) * h + rr) * w + cc] * k[((co * cin + ci) * kh + i) * kw + j];
              }
          y[((b * cout + co) * oh + r) * ow + c] = s;
        }
  return y;
}

// Central difference of a scalar function of one variable.
inline double central_diff(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double rel_err(double analytic, double reference) {
  return std::abs(analytic - reference) / std::max(1.0, std::abs(reference));
}

}  // namespace oracle
