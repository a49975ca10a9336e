// Adam/AdamW parameter updates, training recipes, and learning-rate
// schedules (linear warmup, then step, cosine, or linear decay).
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "instabnn/tensor.hpp"

namespace instabnn {

enum class OptKind { kAdam, kAdamW };

inline OptKind opt_kind_from_string(const std::string& s) {
  if (s == "adam") return OptKind::kAdam;
  if (s == "adamw") return OptKind::kAdamW;
  throw std::invalid_argument("unknown optimizer: " + s);
}
inline std::string to_string(OptKind k) {
  return k == OptKind::kAdam ? "adam" : "adamw";
}

enum class LrSchedule { kStep, kCosine, kLinear };

inline LrSchedule schedule_from_string(const std::string& s) {
  if (s == "step") return LrSchedule::kStep;
  if (s == "cosine") return LrSchedule::kCosine;
  if (s == "linear") return LrSchedule::kLinear;
  throw std::invalid_argument("unknown schedule: " + s);
}
inline std::string to_string(LrSchedule s) {
  switch (s) {
    case LrSchedule::kStep: return "step";
    case LrSchedule::kCosine: return "cosine";
    case LrSchedule::kLinear: return "linear";
  }
  return "?";
}

// First/second moment accumulators for one parameter.
template <typename S>
struct OptimStateT {
  TensorT<S> m, v;
  long step = 0;

  explicit OptimStateT(Shape sh = Shape{1, 1, 1, 1})
      : m(sh, S(0)), v(sh, S(0)) {}
};

using OptimState = OptimStateT<float>;

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// One update. Adam couples weight decay into the gradient; AdamW applies it
// as a separate decoupled shrink.
template <typename S>
void optimizer_step(OptKind kind, OptimStateT<S>& st, TensorT<S>& param,
                    const TensorT<S>& grad, double lr, double wd = 0.0) {
  detail::check(lr > 0.0, "optimizer: lr must be positive");
  detail::check(param.shape() == grad.shape(), "optimizer: grad shape mismatch");
  detail::check(st.m.shape() == param.shape(), "optimizer: state shape mismatch");
  st.step += 1;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < param.numel(); ++i) {
    double g = grad[i];
    if (kind == OptKind::kAdam && wd != 0.0) g += wd * param[i];
    const double m = kAdamBeta1 * st.m[i] + (1.0 - kAdamBeta1) * g;
    const double v = kAdamBeta2 * st.v[i] + (1.0 - kAdamBeta2) * g * g;
    st.m[i] = static_cast<S>(m);
    st.v[i] = static_cast<S>(v);
    double update = lr * (m / bc1) / (std::sqrt(v / bc2) + kAdamEps);
    if (kind == OptKind::kAdamW) update += lr * wd * param[i];
    param[i] = static_cast<S>(param[i] - update);
  }
}

struct Recipe {
  std::string name = "custom";
  OptKind optimizer = OptKind::kAdam;
  double lr = 1e-3;
  LrSchedule schedule = LrSchedule::kStep;
  std::vector<int> milestones{40, 60, 80};
  double decay_factor = 0.1;
  int epochs = 90;
  int warmup_epochs = 5;
  double weight_decay = 0.0;
  int batch_size = 256;
  int stage = 1;
};

// Named presets. ablation90: Adam, lr 1e-3, x0.1 at 40/60/80, 5 warmup
// epochs, no decay. cifar400: AdamW, lr 3e-3, cosine over 400 epochs, wd
// 1e-4, batch 256. lsq_finetune: Adam, lr 1e-4, linear decay over 90 epochs.
inline Recipe recipe_preset(const std::string& name) {
  Recipe r;
  r.name = name;
  if (name == "ablation90") {
    r.optimizer = OptKind::kAdam;
    r.lr = 1e-3;
    r.schedule = LrSchedule::kStep;
    r.milestones = {40, 60, 80};
    r.epochs = 90;
    r.warmup_epochs = 5;
    r.weight_decay = 0.0;
    r.batch_size = 256;
  } else if (name == "cifar400") {
    r.optimizer = OptKind::kAdamW;
    r.lr = 3e-3;
    r.schedule = LrSchedule::kCosine;
    r.epochs = 400;
    r.warmup_epochs = 5;
    r.weight_decay = 1e-4;
    r.batch_size = 256;
  } else if (name == "lsq_finetune") {
    r.optimizer = OptKind::kAdam;
    r.lr = 1e-4;
    r.schedule = LrSchedule::kLinear;
    r.epochs = 90;
    r.warmup_epochs = 0;
    r.weight_decay = 0.0;
    r.batch_size = 256;
  } else {
    throw std::invalid_argument("unknown recipe preset: " + name);
  }
  return r;
}

// Shrink a recipe for desk-scale runs: epochs, warmup and milestones divide
// by `scale` (keeping at least one epoch).
inline Recipe scale_recipe(Recipe r, double scale) {
  detail::check(scale >= 1.0, "recipe scale must be >= 1");
  if (scale == 1.0) return r;
  auto shrink = [scale](int e) {
    return std::max(1, static_cast<int>(std::lround(e / scale)));
  };
  r.epochs = shrink(r.epochs);
  r.warmup_epochs = std::min(r.epochs - 1,
                             static_cast<int>(std::lround(r.warmup_epochs / scale)));
  if (r.warmup_epochs < 0) r.warmup_epochs = 0;
  for (int& m : r.milestones) m = shrink(m);
  return r;
}

// Learning rate for one epoch: linear ramp epoch/warmup during warmup, then
// the configured decay over the remaining epochs.
inline double lr_at(const Recipe& r, int epoch) {
  detail::check(epoch >= 0 && epoch < r.epochs, "lr_at: epoch out of range");
  if (r.warmup_epochs > 0 && epoch < r.warmup_epochs)
    return r.lr * static_cast<double>(epoch) / r.warmup_epochs;
  switch (r.schedule) {
    case LrSchedule::kStep: {
      double lr = r.lr;
      for (int m : r.milestones)
        if (epoch >= m) lr *= r.decay_factor;
      return lr;
    }
    case LrSchedule::kCosine: {
      const double t = static_cast<double>(epoch - r.warmup_epochs) /
                       std::max(1, r.epochs - r.warmup_epochs);
      return r.lr * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
    }
    case LrSchedule::kLinear: {
      const double t = static_cast<double>(epoch - r.warmup_epochs) /
                       std::max(1, r.epochs - r.warmup_epochs);
      return r.lr * (1.0 - t);
    }
  }
  return r.lr;
}

}  // namespace instabnn
