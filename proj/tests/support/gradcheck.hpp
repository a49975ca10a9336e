// Central finite-difference verification of tape gradients.
#pragma once

#include <functional>
#include <vector>

#include "instabnn/autodiff.hpp"

namespace gradcheck {

template <typename S>
struct Config {
  S h;           // FD step
  double tol;    // max relative error
  double denom;  // floor of the relative-error denominator
};

template <typename S>
Config<S> default_config() {
  if constexpr (sizeof(S) == 4)
    return {S(1e-2), 1e-3, 1e-2};
  else
    return {S(1e-6), 1e-5, 1e-6};
}

// Rebuilds the forward from scratch on every evaluation, so the closure must
// read parameter values live. Returns the max relative error over all
// elements of all checked parameters.
template <typename S>
double check(const std::function<instabnn::ad::Var<S>(instabnn::ad::Tape<S>*)>& forward,
             const std::vector<instabnn::ad::Var<S>>& params,
             Config<S> cfg = default_config<S>()) {
  using instabnn::ad::Tape;
  for (auto& p : params) {
    p->zero_grad();
    p->requires_grad = true;
  }
  Tape<S> tape;
  auto loss = forward(&tape);
  tape.backward(loss);

  std::vector<std::vector<S>> analytic;
  for (auto& p : params) {
    p->ensure_grad();
    analytic.push_back(p->grad.vec());
  }

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const S orig = p->value[i];
      p->value[i] = orig + cfg.h;
      const double lp = static_cast<double>(forward(nullptr)->value[0]);
      p->value[i] = orig - cfg.h;
      const double lm = static_cast<double>(forward(nullptr)->value[0]);
      p->value[i] = orig;
      const double fd = (lp - lm) / (2.0 * static_cast<double>(cfg.h));
      const double an = static_cast<double>(analytic[pi][i]);
      const double err = std::abs(an - fd) /
                         std::max({cfg.denom, std::abs(an), std::abs(fd)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace gradcheck
