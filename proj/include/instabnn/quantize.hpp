// Learned-step-size quantization: symmetric b-bit fake-quantization with a
// learnable step, layer-wise for activations and channel-wise (leading dim)
// for weights. Codes are clamp(round(x/s), -Q_N, Q_P) with Q_N = 2^(b-1),
// Q_P = 2^(b-1) - 1; the dequantized value is code*s.
#pragma once

#include <cstdint>

#include "instabnn/autodiff.hpp"
#include "instabnn/tensor.hpp"

namespace instabnn {

template <typename S>
struct LsqParamsT {
  std::vector<S> step;  // size 1 (layer-wise) or dim0 of x (channel-wise)
  int bits = 4;

  int q_n() const { return 1 << (bits - 1); }
  int q_p() const { return (1 << (bits - 1)) - 1; }
  void validate() const {
    detail::check(bits == 4 || bits == 8, "lsq: bits must be 4 or 8");
    detail::check(!step.empty(), "lsq: missing step");
    for (S s : step) detail::check(s > S(0), "lsq: step must be positive");
  }
};

using LsqParams = LsqParamsT<float>;

namespace lsqdetail {

// Step cell of flat element i: dim0 slice for channel-wise steps.
inline std::size_t cell(std::size_t i, std::size_t per_cell) { return i / per_cell; }

template <typename S>
std::size_t per_cell_count(const TensorT<S>& x, std::size_t cells) {
  detail::check(cells == 1 || cells == static_cast<std::size_t>(x.shape().n),
                "lsq: step count must be 1 or the leading dim");
  return x.numel() / cells;
}

}  // namespace lsqdetail

template <typename S>
std::pair<TensorT<S>, TensorT<std::int32_t>> lsq_quantize(const TensorT<S>& x,
                                                          const LsqParamsT<S>& p) {
  p.validate();
  const std::size_t per_cell = lsqdetail::per_cell_count(x, p.step.size());
  TensorT<S> deq(x.shape());
  TensorT<std::int32_t> codes(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const S s = p.step[lsqdetail::cell(i, per_cell)];
    double code = std::round(static_cast<double>(x[i]) / static_cast<double>(s));
    code = std::min(static_cast<double>(p.q_p()),
                    std::max(-static_cast<double>(p.q_n()), code));
    codes[i] = static_cast<std::int32_t>(code);
    deq[i] = static_cast<S>(code) * s;
  }
  return {std::move(deq), std::move(codes)};
}

// Straight-through gradients: grad_x passes inside the clamp range; the step
// gradient follows the LSQ case analysis scaled by 1/sqrt(count * Q_P).
template <typename S>
std::pair<TensorT<S>, std::vector<S>> lsq_grads(const TensorT<S>& x,
                                                const LsqParamsT<S>& p,
                                                const TensorT<S>& upstream) {
  p.validate();
  detail::check(upstream.shape() == x.shape(), "lsq: upstream shape mismatch");
  const std::size_t per_cell = lsqdetail::per_cell_count(x, p.step.size());
  TensorT<S> gx(x.shape());
  std::vector<double> gs(p.step.size(), 0.0);
  const double gscale =
      1.0 / std::sqrt(static_cast<double>(per_cell) * p.q_p());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t c = lsqdetail::cell(i, per_cell);
    const double u = static_cast<double>(x[i]) / static_cast<double>(p.step[c]);
    double ds;
    if (u <= -static_cast<double>(p.q_n())) {
      ds = -static_cast<double>(p.q_n());
      gx[i] = u == -static_cast<double>(p.q_n()) ? upstream[i] : S(0);
    } else if (u >= static_cast<double>(p.q_p())) {
      ds = static_cast<double>(p.q_p());
      gx[i] = u == static_cast<double>(p.q_p()) ? upstream[i] : S(0);
    } else {
      ds = std::round(u) - u;
      gx[i] = upstream[i];
    }
    gs[c] += static_cast<double>(upstream[i]) * ds * gscale;
  }
  std::vector<S> gs_out(gs.size());
  for (std::size_t c = 0; c < gs.size(); ++c) gs_out[c] = static_cast<S>(gs[c]);
  return {std::move(gx), std::move(gs_out)};
}

// Tape op over a learnable step var of shape (1,1,1,1) or (dim0,1,1,1).
template <typename S>
ad::Var<S> lsq_apply(ad::Tape<S>* tape, const ad::Var<S>& x, const ad::Var<S>& step,
                     int bits) {
  const Shape ss = step->value.shape();
  detail::check(ss.c == 1 && ss.h == 1 && ss.w == 1,
                "lsq: step must be (cells,1,1,1)");
  LsqParamsT<S> p;
  p.bits = bits;
  p.step.assign(step->value.vec().begin(), step->value.vec().end());
  auto [deq, codes] = lsq_quantize(x->value, p);
  (void)codes;
  ad::Var<S> o = ad::make_var(std::move(deq));
  if (tape && (x->requires_grad || step->requires_grad)) {
    o->requires_grad = true;
    tape->record([x, step, o, p]() {
      if (!o->grad_alloc) return;
      auto [gx, gs] = lsq_grads(x->value, p, o->grad);
      if (x->requires_grad) {
        x->ensure_grad();
        for (std::size_t i = 0; i < gx.numel(); ++i) x->grad[i] += gx[i];
      }
      if (step->requires_grad) {
        step->ensure_grad();
        for (std::size_t c = 0; c < gs.size(); ++c) step->grad[c] += gs[c];
      }
    });
  }
  return o;
}

// Step initialisation from a calibration tensor: 2*mean(|x|)/sqrt(Q_P).
template <typename S>
std::vector<S> lsq_init_step(const TensorT<S>& x, int bits, std::size_t cells) {
  const std::size_t per_cell = lsqdetail::per_cell_count(x, cells);
  const int q_p = (1 << (bits - 1)) - 1;
  std::vector<double> acc(cells, 0.0);
  for (std::size_t i = 0; i < x.numel(); ++i)
    acc[lsqdetail::cell(i, per_cell)] += std::abs(static_cast<double>(x[i]));
  std::vector<S> out(cells);
  for (std::size_t c = 0; c < cells; ++c) {
    const double mean_abs = acc[c] / per_cell;
    out[c] = static_cast<S>(
        std::max(1e-8, 2.0 * mean_abs / std::sqrt(static_cast<double>(q_p))));
  }
  return out;
}

}  // namespace instabnn
