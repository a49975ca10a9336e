// Reverse-mode differentiation over batch tensors. Forward ops compute
// eagerly; when a tape is supplied and an input requires gradients, each op
// records a closure that pulls the output gradient back into its inputs.
// Passing a null tape runs the same numeric kernels in pure inference mode.
//
// Reductions accumulate in double. All loops are sequential and in fixed
// order, so results are deterministic.
#pragma once

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <vector>

#include "instabnn/tensor.hpp"

namespace instabnn::ad {

template <typename S>
struct VarData {
  TensorT<S> value;
  TensorT<S> grad;
  bool requires_grad = false;
  bool grad_alloc = false;

  void ensure_grad() {
    if (!grad_alloc) {
      grad = TensorT<S>(value.shape());
      grad_alloc = true;
    }
  }
  void zero_grad() {
    if (grad_alloc) std::fill(grad.vec().begin(), grad.vec().end(), S(0));
  }
};

template <typename S>
using Var = std::shared_ptr<VarData<S>>;

template <typename S>
Var<S> make_var(TensorT<S> value, bool requires_grad = false) {
  auto v = std::make_shared<VarData<S>>();
  v->value = std::move(value);
  v->requires_grad = requires_grad;
  return v;
}

template <typename S>
Var<S> constant(TensorT<S> value) {
  return make_var(std::move(value), false);
}

// Recorded forward ops; one backward pass per recorded forward.
template <typename S>
class Tape {
 public:
  void record(std::function<void()> fn) {
    if (consumed_)
      throw std::logic_error("tape: recording after backward; reset first");
    nodes_.push_back(std::move(fn));
  }

  void backward(const Var<S>& loss) {
    if (consumed_) throw std::logic_error("tape: backward already run");
    if (nodes_.empty())
      throw std::logic_error("tape: backward without a recorded forward");
    detail::check(loss->value.numel() == 1, "tape: loss must be scalar");
    loss->ensure_grad();
    loss->grad[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    consumed_ = true;
  }

  std::size_t size() const { return nodes_.size(); }
  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

namespace opdetail {

// Index mapper for a tensor broadcast against a larger shape: every dim of
// `small` is either 1 or equal to the corresponding dim of `big`.
struct Bcast {
  Shape big, small;
  Bcast(const Shape& b, const Shape& s) : big(b), small(s) {
    detail::check((s.n == b.n || s.n == 1) && (s.c == b.c || s.c == 1) &&
                      (s.h == b.h || s.h == 1) && (s.w == b.w || s.w == 1),
                  "broadcast: shape " + s.str() + " incompatible with " + b.str());
  }
  std::size_t operator()(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(small.n == 1 ? 0 : n) * small.c +
             (small.c == 1 ? 0 : c)) * small.h + (small.h == 1 ? 0 : h)) *
               small.w + (small.w == 1 ? 0 : w);
  }
};

template <typename S, typename F>
void for_each_nchw(const Shape& sh, F&& f) {
  std::size_t i = 0;
  for (int n = 0; n < sh.n; ++n)
    for (int c = 0; c < sh.c; ++c)
      for (int h = 0; h < sh.h; ++h)
        for (int w = 0; w < sh.w; ++w) f(i++, n, c, h, w);
}

}  // namespace opdetail

enum class BinOp { kAdd, kSub, kMul };

// x op small, where small broadcasts over x. Covers same-shape elementwise
// arithmetic as the degenerate case.
template <typename S>
Var<S> broadcast_binary(Tape<S>* tape, BinOp op, const Var<S>& x, const Var<S>& s) {
  const Shape xs = x->value.shape();
  opdetail::Bcast bc(xs, s->value.shape());
  TensorT<S> out(xs);
  opdetail::for_each_nchw<S>(xs, [&](std::size_t i, int n, int c, int h, int w) {
    const S a = x->value[i], b = s->value[bc(n, c, h, w)];
    out[i] = op == BinOp::kAdd ? a + b : op == BinOp::kSub ? a - b : a * b;
  });
  Var<S> o = make_var(std::move(out));
  if (tape && (x->requires_grad || s->requires_grad)) {
    o->requires_grad = true;
    tape->record([op, x, s, o, bc]() {
      if (!o->grad_alloc) return;
      if (x->requires_grad) x->ensure_grad();
      if (s->requires_grad) s->ensure_grad();
      opdetail::for_each_nchw<S>(o->value.shape(),
                                 [&](std::size_t i, int n, int c, int h, int w) {
        const S up = o->grad[i];
        const std::size_t j = bc(n, c, h, w);
        switch (op) {
          case BinOp::kAdd:
            if (x->requires_grad) x->grad[i] += up;
            if (s->requires_grad) s->grad[j] += up;
            break;
          case BinOp::kSub:
            if (x->requires_grad) x->grad[i] += up;
            if (s->requires_grad) s->grad[j] -= up;
            break;
          case BinOp::kMul:
            if (x->requires_grad) x->grad[i] += up * s->value[j];
            if (s->requires_grad) s->grad[j] += up * x->value[i];
            break;
        }
      });
    });
  }
  return o;
}

template <typename S>
Var<S> add(Tape<S>* t, const Var<S>& a, const Var<S>& b) {
  return broadcast_binary(t, BinOp::kAdd, a, b);
}
template <typename S>
Var<S> sub(Tape<S>* t, const Var<S>& a, const Var<S>& b) {
  return broadcast_binary(t, BinOp::kSub, a, b);
}
template <typename S>
Var<S> mul(Tape<S>* t, const Var<S>& a, const Var<S>& b) {
  return broadcast_binary(t, BinOp::kMul, a, b);
}

// Mean over every dim collapsed to 1 in `target`.
template <typename S>
Var<S> reduce_mean(Tape<S>* tape, const Var<S>& x, Shape target) {
  const Shape xs = x->value.shape();
  opdetail::Bcast bc(xs, target);
  const double count =
      static_cast<double>(xs.numel()) / static_cast<double>(target.numel());
  std::vector<double> acc(target.numel(), 0.0);
  opdetail::for_each_nchw<S>(xs, [&](std::size_t i, int n, int c, int h, int w) {
    acc[bc(n, c, h, w)] += static_cast<double>(x->value[i]);
  });
  TensorT<S> out(target);
  for (std::size_t j = 0; j < out.numel(); ++j)
    out[j] = static_cast<S>(acc[j] / count);
  Var<S> o = make_var(std::move(out));
  if (tape && x->requires_grad) {
    o->requires_grad = true;
    const S inv = static_cast<S>(1.0 / count);
    tape->record([x, o, bc, inv]() {
      if (!o->grad_alloc) return;
      x->ensure_grad();
      opdetail::for_each_nchw<S>(x->value.shape(),
                                 [&](std::size_t i, int n, int c, int h, int w) {
        x->grad[i] += o->grad[bc(n, c, h, w)] * inv;
      });
    });
  }
  return o;
}

namespace opdetail {

// Shared scaffold for elementwise unary ops: fwd(x) -> y, dfdx(x, y).
template <typename S, typename FwdF, typename GradF>
Var<S> unary(Tape<S>* tape, const Var<S>& x, FwdF fwd, GradF dfdx) {
  TensorT<S> out(x->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(x->value[i]);
  Var<S> o = make_var(std::move(out));
  if (tape && x->requires_grad) {
    o->requires_grad = true;
    tape->record([x, o, dfdx]() {
      if (!o->grad_alloc) return;
      x->ensure_grad();
      for (std::size_t i = 0; i < x->value.numel(); ++i)
        x->grad[i] += o->grad[i] * dfdx(x->value[i], o->value[i]);
    });
  }
  return o;
}

}  // namespace opdetail

template <typename S>
Var<S> neg(Tape<S>* t, const Var<S>& x) {
  return opdetail::unary(t, x, [](S v) { return -v; },
                         [](S, S) { return S(-1); });
}
template <typename S>
Var<S> add_scalar(Tape<S>* t, const Var<S>& x, S c) {
  return opdetail::unary(t, x, [c](S v) { return v + c; },
                         [](S, S) { return S(1); });
}
template <typename S>
Var<S> mul_scalar(Tape<S>* t, const Var<S>& x, S c) {
  return opdetail::unary(t, x, [c](S v) { return v * c; },
                         [c](S, S) { return c; });
}
template <typename S>
Var<S> relu(Tape<S>* t, const Var<S>& x) {
  return opdetail::unary(t, x, [](S v) { return v > S(0) ? v : S(0); },
                         [](S v, S) { return v > S(0) ? S(1) : S(0); });
}
template <typename S>
Var<S> abs_(Tape<S>* t, const Var<S>& x) {
  return opdetail::unary(t, x, [](S v) { return v < S(0) ? -v : v; },
                         [](S v, S) { return v > S(0) ? S(1) : v < S(0) ? S(-1) : S(0); });
}
template <typename S>
Var<S> cube(Tape<S>* t, const Var<S>& x) {
  return opdetail::unary(t, x, [](S v) { return v * v * v; },
                         [](S v, S) { return S(3) * v * v; });
}
template <typename S>
Var<S> tanh_(Tape<S>* t, const Var<S>& x) {
  return opdetail::unary(t, x, [](S v) { return std::tanh(v); },
                         [](S, S y) { return S(1) - y * y; });
}
template <typename S>
Var<S> sigmoid_(Tape<S>* t, const Var<S>& x) {
  return opdetail::unary(t, x, [](S v) { return S(1) / (S(1) + std::exp(-v)); },
                         [](S, S y) { return y * (S(1) - y); });
}
template <typename S>
Var<S> sqrt_(Tape<S>* t, const Var<S>& x) {
  return opdetail::unary(t, x, [](S v) { return std::sqrt(v); },
                         [](S, S y) { return S(0.5) / y; });
}
template <typename S>
Var<S> recip(Tape<S>* t, const Var<S>& x) {
  return opdetail::unary(t, x, [](S v) { return S(1) / v; },
                         [](S, S y) { return -y * y; });
}

// 3*tanh(x/3); bounds the instance term to (-3, 3).
template <typename S>
Var<S> tanh3(Tape<S>* t, const Var<S>& x) {
  return mul_scalar(t, tanh_(t, mul_scalar(t, x, S(1) / S(3))), S(3));
}

// x^(-3/2) with zero at (near) zero; used by the skewness variants where a
// constant map would otherwise divide by zero.
template <typename S>
Var<S> inv_sqrt_cube(Tape<S>* t, const Var<S>& x) {
  constexpr S tiny = S(1e-20);
  return opdetail::unary(
      t, x, [](S v) { return v > tiny ? S(1) / (std::sqrt(v) * v) : S(0); },
      [](S v, S y) { return v > tiny ? S(-1.5) * y / v : S(0); });
}

template <typename S>
Var<S> hardtanh(Tape<S>* t, const Var<S>& x) {
  return opdetail::unary(
      t, x, [](S v) { return v > S(1) ? S(1) : v < S(-1) ? S(-1) : v; },
      [](S v, S) { return (v <= S(1) && v >= S(-1)) ? S(1) : S(0); });
}

enum class SteMode { kClip1, kBirealPoly };

inline SteMode ste_mode_from_string(const std::string& s) {
  if (s == "clip1") return SteMode::kClip1;
  if (s == "bireal") return SteMode::kBirealPoly;
  throw std::invalid_argument("unknown ste mode: " + s);
}

// Surrogate gradient of the sign function at pre-activation u.
template <typename S>
S ste_sign_grad(S upstream, S u, SteMode mode) {
  if (mode == SteMode::kClip1)
    return (u <= S(1) && u >= S(-1)) ? upstream : S(0);
  const S a = u < S(0) ? -u : u;
  return a <= S(1) ? upstream * (S(2) - S(2) * a) : S(0);
}

// Binarization with a straight-through surrogate; ties map to +1.
template <typename S>
Var<S> sign_ste(Tape<S>* t, const Var<S>& x, SteMode mode = SteMode::kClip1) {
  TensorT<S> out(x->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = x->value[i] >= S(0) ? S(1) : S(-1);
  Var<S> o = make_var(std::move(out));
  if (t && x->requires_grad) {
    o->requires_grad = true;
    t->record([x, o, mode]() {
      if (!o->grad_alloc) return;
      x->ensure_grad();
      for (std::size_t i = 0; i < x->value.numel(); ++i)
        x->grad[i] += ste_sign_grad(o->grad[i], x->value[i], mode);
    });
  }
  return o;
}

// y = u for u >= 0 else slope[c]*u, slope per channel (1,C,1,1).
template <typename S>
Var<S> prelu_shifted(Tape<S>* tape, const Var<S>& u, const Var<S>& slope) {
  const Shape us = u->value.shape();
  detail::check(slope->value.shape() == Shape{1, us.c, 1, 1},
                "prelu: slope must be (1,C,1,1)");
  TensorT<S> out(us);
  opdetail::for_each_nchw<S>(us, [&](std::size_t i, int, int c, int, int) {
    const S v = u->value[i];
    out[i] = v >= S(0) ? v : slope->value[c] * v;
  });
  Var<S> o = make_var(std::move(out));
  if (tape && (u->requires_grad || slope->requires_grad)) {
    o->requires_grad = true;
    tape->record([u, slope, o]() {
      if (!o->grad_alloc) return;
      if (u->requires_grad) u->ensure_grad();
      if (slope->requires_grad) slope->ensure_grad();
      opdetail::for_each_nchw<S>(o->value.shape(),
                                 [&](std::size_t i, int, int c, int, int) {
        const S up = o->grad[i], v = u->value[i];
        if (u->requires_grad)
          u->grad[i] += v >= S(0) ? up : up * slope->value[c];
        if (slope->requires_grad && v < S(0)) slope->grad[c] += up * v;
      });
    });
  }
  return o;
}

// ---------------------------------------------------------------------------
// Convolution via im2col and a GEMM (Eigen), cached for the backward pass.

namespace opdetail {

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using MatRowMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename S>
std::shared_ptr<MatX<S>> im2col(const TensorT<S>& x, const Shape2dConv& cfg) {
  const Shape in = x.shape();
  const int oh = cfg.out_h(in.h), ow = cfg.out_w(in.w);
  const Eigen::Index k =
      static_cast<Eigen::Index>(cfg.in_channels) * cfg.kernel_h * cfg.kernel_w;
  const Eigen::Index m = static_cast<Eigen::Index>(in.n) * oh * ow;
  auto col = std::make_shared<MatX<S>>(k, m);
  col->setZero();
  Eigen::Index mi = 0;
  for (int n = 0; n < in.n; ++n)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx, ++mi) {
        S* dst = col->data() + mi * k;  // column, contiguous
        Eigen::Index ki = 0;
        for (int ci = 0; ci < cfg.in_channels; ++ci)
          for (int kh = 0; kh < cfg.kernel_h; ++kh) {
            const int iy = y * cfg.stride - cfg.padding + kh;
            for (int kw = 0; kw < cfg.kernel_w; ++kw, ++ki) {
              const int ix = xx * cfg.stride - cfg.padding + kw;
              if (iy >= 0 && iy < in.h && ix >= 0 && ix < in.w)
                dst[ki] = x.at(n, ci, iy, ix);
            }
          }
      }
  return col;
}

template <typename S>
void col2im_accumulate(const MatX<S>& dcol, const Shape2dConv& cfg, TensorT<S>& dx) {
  const Shape in = dx.shape();
  const int oh = cfg.out_h(in.h), ow = cfg.out_w(in.w);
  const Eigen::Index k = dcol.rows();
  Eigen::Index mi = 0;
  for (int n = 0; n < in.n; ++n)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx, ++mi) {
        const S* src = dcol.data() + mi * k;
        Eigen::Index ki = 0;
        for (int ci = 0; ci < cfg.in_channels; ++ci)
          for (int kh = 0; kh < cfg.kernel_h; ++kh) {
            const int iy = y * cfg.stride - cfg.padding + kh;
            for (int kw = 0; kw < cfg.kernel_w; ++kw, ++ki) {
              const int ix = xx * cfg.stride - cfg.padding + kw;
              if (iy >= 0 && iy < in.h && ix >= 0 && ix < in.w)
                dx.at(n, ci, iy, ix) += src[ki];
            }
          }
      }
}

}  // namespace opdetail

template <typename S>
Var<S> conv2d(Tape<S>* tape, const Var<S>& x, const Var<S>& w,
              const Shape2dConv& cfg) {
  check_conv_shapes(x->value, w->value.shape(), cfg);
  const Shape in = x->value.shape();
  const int oh = cfg.out_h(in.h), ow = cfg.out_w(in.w);
  const Eigen::Index kk =
      static_cast<Eigen::Index>(cfg.in_channels) * cfg.kernel_h * cfg.kernel_w;
  const Eigen::Index mm = static_cast<Eigen::Index>(in.n) * oh * ow;

  auto col = opdetail::im2col(x->value, cfg);
  opdetail::MatRowMap<S> wm(w->value.data(), cfg.out_channels, kk);
  opdetail::MatX<S> y = wm * (*col);  // out_channels x m

  TensorT<S> out(Shape{in.n, cfg.out_channels, oh, ow});
  for (Eigen::Index m = 0; m < mm; ++m) {
    const int n = static_cast<int>(m / (static_cast<Eigen::Index>(oh) * ow));
    const int rem = static_cast<int>(m % (static_cast<Eigen::Index>(oh) * ow));
    const S* src = y.data() + m * cfg.out_channels;
    for (int co = 0; co < cfg.out_channels; ++co)
      out.at(n, co, rem / ow, rem % ow) = src[co];
  }
  Var<S> o = make_var(std::move(out));
  if (tape && (x->requires_grad || w->requires_grad)) {
    o->requires_grad = true;
    tape->record([x, w, o, col, cfg, kk, mm, oh, ow]() {
      if (!o->grad_alloc) return;
      opdetail::MatX<S> dy(cfg.out_channels, mm);
      for (Eigen::Index m = 0; m < mm; ++m) {
        const int n = static_cast<int>(m / (static_cast<Eigen::Index>(oh) * ow));
        const int rem = static_cast<int>(m % (static_cast<Eigen::Index>(oh) * ow));
        S* dst = dy.data() + m * cfg.out_channels;
        for (int co = 0; co < cfg.out_channels; ++co)
          dst[co] = o->grad.at(n, co, rem / ow, rem % ow);
      }
      if (w->requires_grad) {
        w->ensure_grad();
        opdetail::MatX<S> dw = dy * col->transpose();  // out_channels x k
        S* wg = w->grad.data();
        for (int co = 0; co < cfg.out_channels; ++co)
          for (Eigen::Index k = 0; k < kk; ++k) wg[co * kk + k] += dw(co, k);
      }
      if (x->requires_grad) {
        x->ensure_grad();
        opdetail::MatRowMap<S> wm2(w->value.data(), cfg.out_channels, kk);
        opdetail::MatX<S> dcol = wm2.transpose() * dy;
        opdetail::col2im_accumulate(dcol, cfg, x->grad);
      }
    });
  }
  return o;
}

// Fully connected layer over (N, C, 1, 1) inputs.
template <typename S>
Var<S> linear(Tape<S>* tape, const Var<S>& x, const Var<S>& w,
              const Var<S>& bias = nullptr) {
  const Shape in = x->value.shape(), ws = w->value.shape();
  detail::check(in.h == 1 && in.w == 1 && ws.h == 1 && ws.w == 1 && ws.c == in.c,
                "linear: expected (N,C,1,1) x (M,C,1,1)");
  if (bias)
    detail::check(bias->value.shape() == Shape{1, ws.n, 1, 1},
                  "linear: bias must be (1,M,1,1)");
  TensorT<S> out(Shape{in.n, ws.n, 1, 1});
  for (int n = 0; n < in.n; ++n)
    for (int o = 0; o < ws.n; ++o) {
      double acc = bias ? static_cast<double>(bias->value[o]) : 0.0;
      for (int c = 0; c < in.c; ++c)
        acc += static_cast<double>(x->value.at(n, c, 0, 0)) *
               static_cast<double>(w->value.at(o, c, 0, 0));
      out.at(n, o, 0, 0) = static_cast<S>(acc);
    }
  Var<S> og = make_var(std::move(out));
  const bool need = x->requires_grad || w->requires_grad ||
                    (bias && bias->requires_grad);
  if (tape && need) {
    og->requires_grad = true;
    tape->record([x, w, bias, og, in, ws]() {
      if (!og->grad_alloc) return;
      if (x->requires_grad) x->ensure_grad();
      if (w->requires_grad) w->ensure_grad();
      if (bias && bias->requires_grad) bias->ensure_grad();
      for (int n = 0; n < in.n; ++n)
        for (int o = 0; o < ws.n; ++o) {
          const S up = og->grad.at(n, o, 0, 0);
          if (up == S(0)) continue;
          if (bias && bias->requires_grad) bias->grad[o] += up;
          for (int c = 0; c < in.c; ++c) {
            if (x->requires_grad)
              x->grad.at(n, c, 0, 0) += up * w->value.at(o, c, 0, 0);
            if (w->requires_grad)
              w->grad.at(o, c, 0, 0) += up * x->value.at(n, c, 0, 0);
          }
        }
    });
  }
  return og;
}

// Average pooling over full windows (output dims floor((D-k)/s)+1).
template <typename S>
Var<S> avg_pool(Tape<S>* tape, const Var<S>& x, int k, int stride) {
  const Shape in = x->value.shape();
  detail::check(k >= 1 && stride >= 1, "avg_pool: bad window");
  const int out_h = (in.h - k) / stride + 1;
  const int out_w = (in.w - k) / stride + 1;
  detail::check(out_h >= 1 && out_w >= 1, "avg_pool: output would be empty");
  TensorT<S> out(Shape{in.n, in.c, out_h, out_w});
  for (int n = 0; n < in.n; ++n)
    for (int c = 0; c < in.c; ++c)
      for (int y = 0; y < out_h; ++y)
        for (int xx = 0; xx < out_w; ++xx) {
          double acc = 0.0;
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx)
              acc += x->value.at(n, c, y * stride + dy, xx * stride + dx);
          out.at(n, c, y, xx) = static_cast<S>(acc / (k * k));
        }
  Var<S> o = make_var(std::move(out));
  if (tape && x->requires_grad) {
    o->requires_grad = true;
    tape->record([x, o, k, stride, out_h, out_w]() {
      if (!o->grad_alloc) return;
      x->ensure_grad();
      const Shape in2 = x->value.shape();
      const S inv = S(1) / static_cast<S>(k * k);
      for (int n = 0; n < in2.n; ++n)
        for (int c = 0; c < in2.c; ++c)
          for (int y = 0; y < out_h; ++y)
            for (int xx = 0; xx < out_w; ++xx) {
              const S up = o->grad.at(n, c, y, xx) * inv;
              for (int dy = 0; dy < k; ++dy)
                for (int dx = 0; dx < k; ++dx)
                  x->grad.at(n, c, y * stride + dy, xx * stride + dx) += up;
            }
    });
  }
  return o;
}

// Max pooling with implicit -inf padding; backward routes to the first
// maximal position of each window.
template <typename S>
Var<S> max_pool(Tape<S>* tape, const Var<S>& x, int k, int stride, int pad = 0) {
  const Shape in = x->value.shape();
  const int out_h = (in.h + 2 * pad - k) / stride + 1;
  const int out_w = (in.w + 2 * pad - k) / stride + 1;
  detail::check(out_h >= 1 && out_w >= 1, "max_pool: output would be empty");
  TensorT<S> out(Shape{in.n, in.c, out_h, out_w});
  auto arg = std::make_shared<std::vector<std::size_t>>(out.numel());
  std::size_t oi = 0;
  for (int n = 0; n < in.n; ++n)
    for (int c = 0; c < in.c; ++c)
      for (int y = 0; y < out_h; ++y)
        for (int xx = 0; xx < out_w; ++xx, ++oi) {
          S best = std::numeric_limits<S>::lowest();
          std::size_t best_i = 0;
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) {
              const int iy = y * stride - pad + dy, ix = xx * stride - pad + dx;
              if (iy < 0 || iy >= in.h || ix < 0 || ix >= in.w) continue;
              const std::size_t ii = x->value.index(n, c, iy, ix);
              if (x->value[ii] > best) {
                best = x->value[ii];
                best_i = ii;
              }
            }
          out[oi] = best;
          (*arg)[oi] = best_i;
        }
  Var<S> o = make_var(std::move(out));
  if (tape && x->requires_grad) {
    o->requires_grad = true;
    tape->record([x, o, arg]() {
      if (!o->grad_alloc) return;
      x->ensure_grad();
      for (std::size_t i = 0; i < o->value.numel(); ++i)
        x->grad[(*arg)[i]] += o->grad[i];
    });
  }
  return o;
}

// Mean cross-entropy of softmax(logits) against integer labels.
template <typename S>
Var<S> softmax_cross_entropy(Tape<S>* tape, const Var<S>& logits,
                             const std::vector<int>& labels) {
  const Shape in = logits->value.shape();
  detail::check(in.h == 1 && in.w == 1, "cross entropy: logits must be (N,K,1,1)");
  detail::check(static_cast<int>(labels.size()) == in.n,
                "cross entropy: label count mismatch");
  auto probs = std::make_shared<TensorT<S>>(in);
  double loss = 0.0;
  for (int n = 0; n < in.n; ++n) {
    detail::check(labels[n] >= 0 && labels[n] < in.c, "cross entropy: bad label");
    double mx = logits->value.at(n, 0, 0, 0);
    for (int c = 1; c < in.c; ++c)
      mx = std::max(mx, static_cast<double>(logits->value.at(n, c, 0, 0)));
    double z = 0.0;
    for (int c = 0; c < in.c; ++c)
      z += std::exp(static_cast<double>(logits->value.at(n, c, 0, 0)) - mx);
    for (int c = 0; c < in.c; ++c)
      probs->at(n, c, 0, 0) = static_cast<S>(
          std::exp(static_cast<double>(logits->value.at(n, c, 0, 0)) - mx) / z);
    loss -= std::log(std::max(
        1e-30, static_cast<double>(probs->at(n, labels[n], 0, 0))));
  }
  TensorT<S> out(Shape{1, 1, 1, 1});
  out[0] = static_cast<S>(loss / in.n);
  Var<S> o = make_var(std::move(out));
  if (tape && logits->requires_grad) {
    o->requires_grad = true;
    tape->record([logits, o, probs, labels]() {
      if (!o->grad_alloc) return;
      logits->ensure_grad();
      const Shape sh = logits->value.shape();
      const S up = o->grad[0] / static_cast<S>(sh.n);
      for (int n = 0; n < sh.n; ++n)
        for (int c = 0; c < sh.c; ++c) {
          S p = probs->at(n, c, 0, 0);
          if (c == labels[n]) p -= S(1);
          logits->grad.at(n, c, 0, 0) += up * p;
        }
    });
  }
  return o;
}

}  // namespace instabnn::ad
