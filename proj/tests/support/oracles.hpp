// Independent reference computations used to freeze expected test values.
// These stay deliberately naive and separate from the library kernels.
#pragma once

#include <cmath>
#include <vector>

#include "instabnn/tensor.hpp"

namespace oracle {

using instabnn::Shape;
using instabnn::Shape2dConv;
using instabnn::TensorT;

// Direct six-loop cross-correlation with zero padding, double accumulation.
template <typename S>
TensorT<S> conv2d_direct(const TensorT<S>& in, const TensorT<S>& w,
                         const Shape2dConv& cfg) {
  const Shape is = in.shape();
  const int oh = cfg.out_h(is.h), ow = cfg.out_w(is.w);
  TensorT<S> out(Shape{is.n, cfg.out_channels, oh, ow});
  for (int n = 0; n < is.n; ++n)
    for (int co = 0; co < cfg.out_channels; ++co)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          double acc = 0.0;
          for (int ci = 0; ci < cfg.in_channels; ++ci)
            for (int kh = 0; kh < cfg.kernel_h; ++kh)
              for (int kw = 0; kw < cfg.kernel_w; ++kw) {
                const int iy = y * cfg.stride - cfg.padding + kh;
                const int ix = x * cfg.stride - cfg.padding + kw;
                const double a = (iy >= 0 && iy < is.h && ix >= 0 && ix < is.w)
                                     ? in.at(n, ci, iy, ix)
                                     : 0.0;
                acc += a * static_cast<double>(w.at(co, ci, kh, kw));
              }
          out.at(n, co, y, x) = static_cast<S>(acc);
        }
  return out;
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / v.size();
}

// Population moments of a sample vector.
struct Moments {
  double mu, var, m3_raw, skew;
};

inline Moments moments(const std::vector<double>& v) {
  Moments m{};
  m.mu = mean(v);
  double c2 = 0.0, c3 = 0.0, raw3 = 0.0;
  for (double x : v) {
    const double d = x - m.mu;
    c2 += d * d;
    c3 += d * d * d;
    raw3 += x * x * x;
  }
  c2 /= v.size();
  c3 /= v.size();
  m.var = c2;
  m.m3_raw = raw3 / v.size();
  m.skew = c2 > 0.0 ? c3 / std::pow(c2, 1.5) : 0.0;
  return m;
}

template <typename S>
std::vector<double> map_samples(const TensorT<S>& t, int n, int c) {
  std::vector<double> out;
  const Shape sh = t.shape();
  out.reserve(static_cast<std::size_t>(sh.h) * sh.w);
  for (int h = 0; h < sh.h; ++h)
    for (int w = 0; w < sh.w; ++w) out.push_back(t.at(n, c, h, w));
  return out;
}

}  // namespace oracle
