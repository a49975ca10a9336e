// Dense NCHW tensor storage and the reference numeric kernels the rest of
// the library is checked against. The reference paths accumulate in double
// regardless of the element type.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace instabnn {

struct Shape {
  int n = 0, c = 0, h = 0, w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  bool operator==(const Shape&) const = default;
  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

namespace detail {
inline void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}
}  // namespace detail

// Row-major N-C-H-W dense tensor. Immutable by convention on the inference
// path; training code owns its mutable copies.
template <typename S>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(Shape sh) : shape_(sh), data_(sh.numel(), S(0)) {
    detail::check(sh.n >= 1 && sh.c >= 1 && sh.h >= 1 && sh.w >= 1,
                  "tensor: all dims must be >= 1, got " + sh.str());
  }
  TensorT(Shape sh, S fill) : TensorT(sh) {
    std::fill(data_.begin(), data_.end(), fill);
  }

  // External-input constructor: rejects non-finite values.
  static TensorT from_data(Shape sh, std::vector<S> values) {
    TensorT t(sh);
    detail::check(values.size() == sh.numel(),
                  "tensor: data length " + std::to_string(values.size()) +
                      " does not match shape " + sh.str());
    for (S v : values)
      detail::check(std::isfinite(static_cast<double>(v)),
                    "tensor: non-finite value rejected");
    t.data_ = std::move(values);
    return t;
  }

  static TensorT from_list(Shape sh, std::initializer_list<S> values) {
    return from_data(sh, std::vector<S>(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& at(int n, int c, int h, int w) {
    return data_[index(n, c, h, w)];
  }
  S at(int n, int c, int h, int w) const {
    return data_[index(n, c, h, w)];
  }
  S& operator[](std::size_t i) { return data_[i]; }
  S operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) *
               shape_.w + w;
  }

  bool all_finite() const {
    for (S v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename T2>
  TensorT<T2> cast() const {
    TensorT<T2> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i)
      out[i] = static_cast<T2>(data_[i]);
    return out;
  }

 private:
  Shape shape_{};
  std::vector<S> data_;
};

using Tensor = TensorT<float>;

// 2D convolution geometry. Zero padding only.
struct Shape2dConv {
  int in_channels = 0;
  int out_channels = 0;
  int kernel_h = 0;
  int kernel_w = 0;
  int stride = 1;
  int padding = 0;

  void validate() const {
    detail::check(in_channels >= 1 && out_channels >= 1,
                  "conv: channel counts must be >= 1");
    detail::check(kernel_h >= 1 && kernel_w >= 1, "conv: kernel dims must be >= 1");
    detail::check(stride >= 1, "conv: stride must be >= 1");
    detail::check(padding >= 0, "conv: padding must be >= 0");
  }
  int out_h(int in_h) const { return (in_h + 2 * padding - kernel_h) / stride + 1; }
  int out_w(int in_w) const { return (in_w + 2 * padding - kernel_w) / stride + 1; }
  Shape weight_shape() const {
    return Shape{out_channels, in_channels, kernel_h, kernel_w};
  }
};

template <typename S>
void check_conv_shapes(const TensorT<S>& input, const Shape& wshape,
                       const Shape2dConv& cfg) {
  cfg.validate();
  detail::check(input.shape().c == cfg.in_channels,
                "conv: input has " + std::to_string(input.shape().c) +
                    " channels, config expects " + std::to_string(cfg.in_channels));
  detail::check(wshape == cfg.weight_shape(),
                "conv: weight shape " + wshape.str() + " does not match config " +
                    cfg.weight_shape().str());
  detail::check(cfg.out_h(input.shape().h) >= 1 && cfg.out_w(input.shape().w) >= 1,
                "conv: output would be empty for input " + input.shape().str());
}

// Reference cross-correlation with zero padding, double accumulation.
template <typename S>
TensorT<S> dense_conv2d(const TensorT<S>& input, const TensorT<S>& weights,
                        const Shape2dConv& cfg) {
  check_conv_shapes(input, weights.shape(), cfg);
  const Shape in = input.shape();
  const int oh = cfg.out_h(in.h), ow = cfg.out_w(in.w);
  TensorT<S> out(Shape{in.n, cfg.out_channels, oh, ow});
  for (int n = 0; n < in.n; ++n)
    for (int co = 0; co < cfg.out_channels; ++co)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          double acc = 0.0;
          for (int ci = 0; ci < cfg.in_channels; ++ci)
            for (int kh = 0; kh < cfg.kernel_h; ++kh) {
              const int iy = y * cfg.stride - cfg.padding + kh;
              if (iy < 0 || iy >= in.h) continue;
              for (int kw = 0; kw < cfg.kernel_w; ++kw) {
                const int ix = x * cfg.stride - cfg.padding + kw;
                if (ix < 0 || ix >= in.w) continue;
                acc += static_cast<double>(input.at(n, ci, iy, ix)) *
                       static_cast<double>(weights.at(co, ci, kh, kw));
              }
            }
          out.at(n, co, y, x) = static_cast<S>(acc);
        }
  return out;
}

// Per-(instance, channel) spatial mean; output is N x C x 1 x 1.
template <typename S>
TensorT<S> global_avg_pool(const TensorT<S>& input) {
  const Shape in = input.shape();
  TensorT<S> out(Shape{in.n, in.c, 1, 1});
  const double inv = 1.0 / (static_cast<double>(in.h) * in.w);
  for (int n = 0; n < in.n; ++n)
    for (int c = 0; c < in.c; ++c) {
      double acc = 0.0;
      for (int h = 0; h < in.h; ++h)
        for (int w = 0; w < in.w; ++w) acc += input.at(n, c, h, w);
      out.at(n, c, 0, 0) = static_cast<S>(acc * inv);
    }
  return out;
}

// Row-vector x weight-matrix product. Input N x C_in (spatial dims 1),
// weights C_out x C_in, optional bias length C_out.
template <typename S>
TensorT<S> linear_dense(const TensorT<S>& input, const TensorT<S>& weights,
                        const TensorT<S>* bias = nullptr) {
  const Shape in = input.shape(), ws = weights.shape();
  detail::check(in.h == 1 && in.w == 1, "linear: input must be N x C x 1 x 1");
  detail::check(ws.h == 1 && ws.w == 1, "linear: weights must be C_out x C_in x 1 x 1");
  detail::check(ws.c == in.c, "linear: input features " + std::to_string(in.c) +
                                  " do not match weights " + std::to_string(ws.c));
  if (bias)
    detail::check(bias->numel() == static_cast<std::size_t>(ws.n),
                  "linear: bias length must equal out features");
  TensorT<S> out(Shape{in.n, ws.n, 1, 1});
  for (int n = 0; n < in.n; ++n)
    for (int o = 0; o < ws.n; ++o) {
      double acc = bias ? static_cast<double>((*bias)[o]) : 0.0;
      for (int c = 0; c < in.c; ++c)
        acc += static_cast<double>(input.at(n, c, 0, 0)) *
               static_cast<double>(weights.at(o, c, 0, 0));
      out.at(n, o, 0, 0) = static_cast<S>(acc);
    }
  return out;
}

template <typename S>
TensorT<S> random_tensor(Shape sh, std::mt19937& rng, S lo = S(-1), S hi = S(1)) {
  std::uniform_real_distribution<double> dist(static_cast<double>(lo),
                                              static_cast<double>(hi));
  TensorT<S> t(sh);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(dist(rng));
  return t;
}

}  // namespace instabnn
