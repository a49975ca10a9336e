// Per-instance, per-channel statistics of normalized pre-activations and the
// threshold formulas built from them. All moments are population moments
// (divide by the spatial sample count), accumulated in double.
#pragma once

#include <cmath>
#include <string>

#include "instabnn/tensor.hpp"

namespace instabnn {

inline constexpr double kNormEps = 1e-5;
inline constexpr double kRunningMomentum = 0.1;

enum class NormMode { kTrain, kEval };

// Per-channel running mean and running std used by the affine-free
// normalization layer. Running values start at (0, 1) and are blended with
// batch statistics at momentum 0.1; eval-mode use before any update (or
// checkpoint load) is an error.
template <typename S>
struct NormStatsT {
  std::vector<S> running_mean;
  std::vector<S> running_std;
  bool initialized = false;

  explicit NormStatsT(int channels = 0)
      : running_mean(channels, S(0)), running_std(channels, S(1)) {}

  int channels() const { return static_cast<int>(running_mean.size()); }

  void load(std::vector<S> mean, std::vector<S> std) {
    detail::check(mean.size() == std.size(), "norm stats: mean/std length mismatch");
    for (S s : std) detail::check(s > S(0), "norm stats: std must be positive");
    running_mean = std::move(mean);
    running_std = std::move(std);
    initialized = true;
  }

  void update(const std::vector<S>& batch_mean, const std::vector<S>& batch_std) {
    detail::check(batch_mean.size() == running_mean.size(),
                  "norm stats: channel mismatch in update");
    const S m = static_cast<S>(kRunningMomentum);
    for (std::size_t c = 0; c < running_mean.size(); ++c) {
      running_mean[c] = (S(1) - m) * running_mean[c] + m * batch_mean[c];
      running_std[c] = (S(1) - m) * running_std[c] + m * batch_std[c];
    }
    initialized = true;
  }
};

using NormStats = NormStatsT<float>;

// Batch mean/std per channel over N*H*W, std floored via the epsilon inside
// the square root. Two passes: mean first, then the centered second moment
// with the residual computed in working precision (matches the training
// graph's arithmetic bit for bit).
template <typename S>
void batch_channel_stats(const TensorT<S>& x, std::vector<S>& mean_out,
                         std::vector<S>& std_out) {
  const Shape sh = x.shape();
  const double count = static_cast<double>(sh.n) * sh.h * sh.w;
  mean_out.assign(sh.c, S(0));
  std_out.assign(sh.c, S(0));
  for (int c = 0; c < sh.c; ++c) {
    double sum = 0.0;
    for (int n = 0; n < sh.n; ++n)
      for (int h = 0; h < sh.h; ++h)
        for (int w = 0; w < sh.w; ++w) sum += x.at(n, c, h, w);
    mean_out[c] = static_cast<S>(sum / count);
  }
  for (int c = 0; c < sh.c; ++c) {
    double acc = 0.0;
    for (int n = 0; n < sh.n; ++n)
      for (int h = 0; h < sh.h; ++h)
        for (int w = 0; w < sh.w; ++w) {
          const S d = x.at(n, c, h, w) - mean_out[c];
          acc += static_cast<double>(d * d);
        }
    const S var = static_cast<S>(acc / count);
    std_out[c] = std::sqrt(var + static_cast<S>(kNormEps));
  }
}

// Normalization without the affine transform. Train mode normalizes with
// current-batch statistics and folds them into the running values; eval mode
// uses the running values.
template <typename S>
TensorT<S> normalize_no_affine(const TensorT<S>& x, NormStatsT<S>& stats,
                               NormMode mode) {
  const Shape sh = x.shape();
  detail::check(sh.c == stats.channels(),
                "normalize: input has " + std::to_string(sh.c) +
                    " channels, stats hold " + std::to_string(stats.channels()));
  std::vector<S> mean, std;
  if (mode == NormMode::kTrain) {
    batch_channel_stats(x, mean, std);
    stats.update(mean, std);
  } else {
    detail::check(stats.initialized,
                  "normalize: eval mode requires trained or loaded running stats");
    mean = stats.running_mean;
    std = stats.running_std;
  }
  TensorT<S> out(sh);
  for (int n = 0; n < sh.n; ++n)
    for (int c = 0; c < sh.c; ++c) {
      const S mu = mean[c], inv = S(1) / std[c];
      for (int h = 0; h < sh.h; ++h)
        for (int w = 0; w < sh.w; ++w)
          out.at(n, c, h, w) = (x.at(n, c, h, w) - mu) * inv;
    }
  return out;
}

// Spatial average per (instance, channel).
template <typename S>
TensorT<S> instance_channel_mean(const TensorT<S>& x) {
  return global_avg_pool(x);
}

// Spatial average of cubes per (instance, channel).
template <typename S>
TensorT<S> instance_channel_moment3(const TensorT<S>& x) {
  const Shape sh = x.shape();
  TensorT<S> out(Shape{sh.n, sh.c, 1, 1});
  const double count = static_cast<double>(sh.h) * sh.w;
  for (int n = 0; n < sh.n; ++n)
    for (int c = 0; c < sh.c; ++c) {
      double acc = 0.0;
      for (int h = 0; h < sh.h; ++h)
        for (int w = 0; w < sh.w; ++w) {
          // cube in working precision, accumulate in double (matches the
          // training-graph arithmetic bit for bit)
          const S v = x.at(n, c, h, w);
          acc += static_cast<double>(v * v * v);
        }
      out.at(n, c, 0, 0) = static_cast<S>(acc / count);
    }
  return out;
}

// Per-(instance, channel) moment bundle: spatial mean, mean of cubes,
// population variance, and skewness (zero when the variance is zero, so
// constant maps stay NaN-free).
template <typename S>
struct InstanceMomentsT {
  TensorT<S> m1;    // E[x]
  TensorT<S> m3;    // E[x^3]
  TensorT<S> var;   // E[(x - m1)^2]
  TensorT<S> skew;  // E[(x - m1)^3] / var^(3/2)
};

using InstanceMoments = InstanceMomentsT<float>;

template <typename S>
InstanceMomentsT<S> compute_instance_moments(const TensorT<S>& x) {
  const Shape sh = x.shape();
  const Shape os{sh.n, sh.c, 1, 1};
  InstanceMomentsT<S> out{TensorT<S>(os), TensorT<S>(os), TensorT<S>(os),
                          TensorT<S>(os)};
  const double inv = 1.0 / (static_cast<double>(sh.h) * sh.w);
  for (int n = 0; n < sh.n; ++n)
    for (int c = 0; c < sh.c; ++c) {
      double s1 = 0.0, s2 = 0.0, s3 = 0.0;
      for (int h = 0; h < sh.h; ++h)
        for (int w = 0; w < sh.w; ++w) {
          const S v = x.at(n, c, h, w);
          const double vd = static_cast<double>(v);
          s1 += vd;
          s2 += vd * vd;
          s3 += static_cast<double>(v * v * v);
        }
      const double m1 = s1 * inv, m2 = s2 * inv, m3 = s3 * inv;
      const double var = std::max(0.0, m2 - m1 * m1);
      // Central third moment via the raw-moment expansion.
      const double c3 = m3 - 3.0 * m1 * m2 + 2.0 * m1 * m1 * m1;
      out.m1.at(n, c, 0, 0) = static_cast<S>(m1);
      out.m3.at(n, c, 0, 0) = static_cast<S>(m3);
      out.var.at(n, c, 0, 0) = static_cast<S>(var);
      out.skew.at(n, c, 0, 0) =
          var > 0.0 ? static_cast<S>(c3 / std::pow(var, 1.5)) : S(0);
    }
  return out;
}

template <typename S>
TensorT<S> fisher_skewness(const TensorT<S>& x) {
  return compute_instance_moments(x).skew;
}

// Self-test residual |E[X^3] - (skew*sigma^3 + 3*mu*sigma^2 + mu^3)| per
// (instance, channel); algebraically zero for population moments.
template <typename S>
TensorT<S> moment3_identity_check(const TensorT<S>& x) {
  InstanceMomentsT<S> m = compute_instance_moments(x);
  const Shape os = m.m1.shape();
  TensorT<S> out(os);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double mu = m.m1[i], var = m.var[i], skew = m.skew[i], m3 = m.m3[i];
    const double sigma = std::sqrt(var);
    const double rhs = skew * sigma * sigma * sigma + 3.0 * mu * var + mu * mu * mu;
    out[i] = static_cast<S>(std::abs(m3 - rhs));
  }
  return out;
}

enum class ThVariant { kMean, kMeanVar, kMeanSkew, kMeanSkewVar, kCube };

inline ThVariant th_variant_from_string(const std::string& s) {
  if (s == "mean") return ThVariant::kMean;
  if (s == "mean_var") return ThVariant::kMeanVar;
  if (s == "mean_skew") return ThVariant::kMeanSkew;
  if (s == "mean_skew_var") return ThVariant::kMeanSkewVar;
  if (s == "cube") return ThVariant::kCube;
  throw std::invalid_argument("unknown threshold variant: " + s);
}

inline std::string to_string(ThVariant v) {
  switch (v) {
    case ThVariant::kMean: return "mean";
    case ThVariant::kMeanVar: return "mean_var";
    case ThVariant::kMeanSkew: return "mean_skew";
    case ThVariant::kMeanSkewVar: return "mean_skew_var";
    case ThVariant::kCube: return "cube";
  }
  return "?";
}

// Per-channel learned threshold coefficients.
template <typename S>
struct ThresholdParamsT {
  std::vector<S> alpha;
  std::vector<S> beta;
  std::vector<S> gamma_combo;  // only the *_skew variants read this

  explicit ThresholdParamsT(int channels = 0)
      : alpha(channels, S(0)), beta(channels, S(0)), gamma_combo(channels, S(0)) {}
};

using ThresholdParams = ThresholdParamsT<float>;

// Instance-aware threshold per (instance, channel).
//   mean:          alpha + beta*m1
//   mean_var:      alpha + beta*m1*var
//   mean_skew:     alpha + beta*m1 + gamma*skew
//   mean_skew_var: alpha + (beta*m1 + gamma*skew)*var
//   cube:          alpha + beta*m3
template <typename S>
TensorT<S> compute_threshold(ThVariant variant, const InstanceMomentsT<S>& m,
                             const ThresholdParamsT<S>& params) {
  const Shape os = m.m1.shape();
  detail::check(static_cast<int>(params.alpha.size()) == os.c &&
                    static_cast<int>(params.beta.size()) == os.c,
                "threshold: params channel count mismatch");
  TensorT<S> out(os);
  for (int n = 0; n < os.n; ++n)
    for (int c = 0; c < os.c; ++c) {
      const S a = params.alpha[c], b = params.beta[c];
      const S g = params.gamma_combo.empty() ? S(0) : params.gamma_combo[c];
      const S m1 = m.m1.at(n, c, 0, 0), m3 = m.m3.at(n, c, 0, 0);
      const S var = m.var.at(n, c, 0, 0), skew = m.skew.at(n, c, 0, 0);
      S th;
      switch (variant) {
        case ThVariant::kMean: th = a + b * m1; break;
        case ThVariant::kMeanVar: th = a + b * m1 * var; break;
        case ThVariant::kMeanSkew: th = a + b * m1 + g * skew; break;
        case ThVariant::kMeanSkewVar: th = a + (b * m1 + g * skew) * var; break;
        case ThVariant::kCube: th = a + b * m3; break;
        default: throw std::invalid_argument("unknown threshold variant");
      }
      out.at(n, c, 0, 0) = th;
    }
  return out;
}

}  // namespace instabnn
