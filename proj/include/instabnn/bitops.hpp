// Bit-packed +-1 tensors and the XNOR/popcount convolution kernel.
//
// Packing layout: one run per (n, c) map, H*W bits LSB-first with w fastest,
// padded with 0 bits up to a 64-bit word boundary so every channel map starts
// word-aligned. Bit 1 means +1, bit 0 means -1.
//
// Zero padding of the dense network maps to -1 bits here; the kernel XNORs
// the full kernel row against the (possibly padded) activation segment and
// then adds back the summed weight values at padding taps, so the packed
// output equals the zero-padded dense convolution exactly in integer
// arithmetic.
#pragma once

#include <bit>
#include <cstdint>
#include <iostream>
#include <vector>

#include "instabnn/tensor.hpp"

namespace instabnn {

class BitTensor {
 public:
  BitTensor() = default;
  explicit BitTensor(Shape sh)
      : shape_(sh),
        words_per_map_((static_cast<std::size_t>(sh.h) * sh.w + 63) / 64),
        words_(static_cast<std::size_t>(sh.n) * sh.c * words_per_map_, 0) {
    detail::check(sh.numel() > 0, "bit tensor: empty shape");
  }

  const Shape& shape() const { return shape_; }
  std::size_t words_per_map() const { return words_per_map_; }
  const std::vector<std::uint64_t>& words() const { return words_; }
  std::vector<std::uint64_t>& words() { return words_; }

  std::size_t map_word_offset(int n, int c) const {
    return (static_cast<std::size_t>(n) * shape_.c + c) * words_per_map_;
  }

  bool get(int n, int c, int h, int w) const {
    const std::size_t bit = static_cast<std::size_t>(h) * shape_.w + w;
    return (words_[map_word_offset(n, c) + bit / 64] >> (bit % 64)) & 1u;
  }
  void set(int n, int c, int h, int w, bool plus) {
    const std::size_t bit = static_cast<std::size_t>(h) * shape_.w + w;
    std::uint64_t& word = words_[map_word_offset(n, c) + bit / 64];
    const std::uint64_t mask = std::uint64_t(1) << (bit % 64);
    if (plus)
      word |= mask;
    else
      word &= ~mask;
  }

  // Number of +1 bits in one (n, c) map. Padding bits are zero by invariant.
  int plus_count(int n, int c) const {
    const std::size_t off = map_word_offset(n, c);
    int total = 0;
    for (std::size_t i = 0; i < words_per_map_; ++i)
      total += std::popcount(words_[off + i]);
    return total;
  }

  bool operator==(const BitTensor& other) const {
    return shape_ == other.shape_ && words_ == other.words_;
  }

 private:
  Shape shape_{};
  std::size_t words_per_map_ = 0;
  std::vector<std::uint64_t> words_;
};

// Per-output-channel scale for binarized weights (mean absolute value of the
// real-valued filter, XNOR-Net style).
struct WeightScale {
  std::vector<float> scale;
};

namespace bitdetail {

inline std::uint64_t low_mask(int bits) {
  return bits >= 64 ? ~std::uint64_t(0) : ((std::uint64_t(1) << bits) - 1);
}

// Extract `len` (<= 64) bits starting at bit `pos` of a word run.
inline std::uint64_t extract_bits(const std::uint64_t* run, std::size_t nwords,
                                  std::size_t pos, int len) {
  const std::size_t q = pos / 64;
  const int r = static_cast<int>(pos % 64);
  std::uint64_t v = run[q] >> r;
  if (r != 0 && q + 1 < nwords) v |= run[q + 1] << (64 - r);
  return v & low_mask(len);
}

}  // namespace bitdetail

// Binarize against a threshold; bit set iff x >= threshold (ties go to +1).
// Threshold broadcasts from shapes (1,1,1,1), (1,C,1,1), (N,C,1,1) or the
// full input shape.
template <typename S>
BitTensor sign_binarize(const TensorT<S>& x, const TensorT<S>& threshold) {
  const Shape xs = x.shape(), ts = threshold.shape();
  const bool n_ok = ts.n == xs.n || ts.n == 1;
  const bool c_ok = ts.c == xs.c || ts.c == 1;
  const bool hw_ok = (ts.h == xs.h && ts.w == xs.w) || (ts.h == 1 && ts.w == 1);
  detail::check(n_ok && c_ok && hw_ok,
                "sign_binarize: threshold shape " + ts.str() +
                    " not broadcastable to " + xs.str());
  detail::check(threshold.all_finite(), "sign_binarize: non-finite threshold");
  BitTensor out(xs);
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const int tn = ts.n == 1 ? 0 : n, tc = ts.c == 1 ? 0 : c;
      for (int h = 0; h < xs.h; ++h)
        for (int w = 0; w < xs.w; ++w) {
          const S th = ts.h == 1 && ts.w == 1 ? threshold.at(tn, tc, 0, 0)
                                              : threshold.at(tn, tc, h, w);
          out.set(n, c, h, w, x.at(n, c, h, w) >= th);
        }
    }
  return out;
}

template <typename S>
BitTensor sign_binarize(const TensorT<S>& x, S threshold = S(0)) {
  TensorT<S> t(Shape{1, 1, 1, 1}, threshold);
  return sign_binarize(x, t);
}

// Pack a tensor whose values are exactly +1 or -1.
template <typename S>
BitTensor pack(const TensorT<S>& values) {
  const Shape sh = values.shape();
  BitTensor out(sh);
  for (int n = 0; n < sh.n; ++n)
    for (int c = 0; c < sh.c; ++c)
      for (int h = 0; h < sh.h; ++h)
        for (int w = 0; w < sh.w; ++w) {
          const S v = values.at(n, c, h, w);
          detail::check(v == S(1) || v == S(-1),
                        "pack: values must be exactly +1 or -1");
          out.set(n, c, h, w, v == S(1));
        }
  return out;
}

template <typename S = float>
TensorT<S> unpack(const BitTensor& b) {
  const Shape sh = b.shape();
  TensorT<S> out(sh);
  for (int n = 0; n < sh.n; ++n)
    for (int c = 0; c < sh.c; ++c)
      for (int h = 0; h < sh.h; ++h)
        for (int w = 0; w < sh.w; ++w)
          out.at(n, c, h, w) = b.get(n, c, h, w) ? S(1) : S(-1);
  return out;
}

// scale[o] = mean(|W[o,:,:,:]|). An all-zero filter yields scale 0 (the
// binarized filter then contributes nothing); warned once on stderr.
template <typename S>
WeightScale weight_scale_factors(const TensorT<S>& real_weights) {
  const Shape ws = real_weights.shape();
  detail::check(real_weights.all_finite(), "weight scales: weights must be finite");
  WeightScale out;
  out.scale.resize(ws.n);
  const std::size_t per_filter = static_cast<std::size_t>(ws.c) * ws.h * ws.w;
  for (int o = 0; o < ws.n; ++o) {
    double acc = 0.0;
    const S* base = real_weights.data() + o * per_filter;
    for (std::size_t i = 0; i < per_filter; ++i)
      acc += std::abs(static_cast<double>(base[i]));
    out.scale[o] = static_cast<float>(acc / per_filter);
    if (out.scale[o] == 0.0f)
      std::cerr << "instabnn: warning: all-zero filter " << o
                << " has binary weight scale 0\n";
  }
  return out;
}

// XNOR/popcount convolution over packed +-1 operands. Output values are
// exact integers (optionally multiplied by the per-channel weight scale) and
// equal dense_conv2d of the unpacked operands bit for bit.
inline Tensor xnor_popcount_conv2d(const BitTensor& acts, const BitTensor& weights,
                                   const Shape2dConv& cfg,
                                   const WeightScale* scale = nullptr) {
  const Shape as = acts.shape(), ws = weights.shape();
  cfg.validate();
  detail::check(as.c == cfg.in_channels, "xnor conv: activation channel mismatch");
  detail::check(ws == cfg.weight_shape(), "xnor conv: weight shape " + ws.str() +
                                              " does not match config");
  detail::check(cfg.kernel_w <= 64, "xnor conv: kernel width > 64 unsupported");
  if (scale)
    detail::check(scale->scale.size() == static_cast<std::size_t>(cfg.out_channels),
                  "xnor conv: scale length must equal out channels");
  const int oh = cfg.out_h(as.h), ow = cfg.out_w(as.w);
  detail::check(oh >= 1 && ow >= 1, "xnor conv: output would be empty");

  const int kw = cfg.kernel_w, kh = cfg.kernel_h, ci_n = cfg.in_channels;
  const std::uint64_t kmask = bitdetail::low_mask(kw);

  // Kernel rows as bit masks plus prefix sums of their +-1 values, used for
  // the padding correction.
  const std::size_t rows = static_cast<std::size_t>(cfg.out_channels) * ci_n * kh;
  std::vector<std::uint64_t> wrow(rows);
  std::vector<int> prefix(rows * (kw + 1), 0);
  for (int co = 0; co < cfg.out_channels; ++co)
    for (int ci = 0; ci < ci_n; ++ci) {
      const std::uint64_t* wrun = weights.words().data() + weights.map_word_offset(co, ci);
      for (int r = 0; r < kh; ++r) {
        const std::size_t idx = (static_cast<std::size_t>(co) * ci_n + ci) * kh + r;
        wrow[idx] = bitdetail::extract_bits(wrun, weights.words_per_map(),
                                            static_cast<std::size_t>(r) * kw, kw);
        int* p = prefix.data() + idx * (kw + 1);
        for (int j = 0; j < kw; ++j)
          p[j + 1] = p[j] + (((wrow[idx] >> j) & 1u) ? 1 : -1);
      }
    }

  Tensor out(Shape{as.n, cfg.out_channels, oh, ow});
  const int taps = ci_n * kh * kw;
  for (int n = 0; n < as.n; ++n)
    for (int co = 0; co < cfg.out_channels; ++co)
      for (int y = 0; y < oh; ++y) {
        const int iy0 = y * cfg.stride - cfg.padding;
        for (int x = 0; x < ow; ++x) {
          const int iw0 = x * cfg.stride - cfg.padding;
          std::int64_t matches = 0;
          std::int64_t pad_weight_sum = 0;
          for (int ci = 0; ci < ci_n; ++ci) {
            const std::uint64_t* arun =
                acts.words().data() + acts.map_word_offset(n, ci);
            for (int r = 0; r < kh; ++r) {
              const std::size_t idx =
                  (static_cast<std::size_t>(co) * ci_n + ci) * kh + r;
              const std::uint64_t wbits = wrow[idx];
              const int* p = prefix.data() + idx * (kw + 1);
              const int iy = iy0 + r;
              std::uint64_t abits = 0;
              int lo = 0, hi = 0;  // valid tap range [lo, hi)
              if (iy >= 0 && iy < as.h) {
                lo = iw0 < 0 ? -iw0 : 0;
                hi = std::min(kw, as.w - iw0);
                if (hi > lo)
                  abits = bitdetail::extract_bits(
                              arun, acts.words_per_map(),
                              static_cast<std::size_t>(iy) * as.w + (iw0 + lo),
                              hi - lo)
                          << lo;
                else
                  hi = lo;  // whole row out of range horizontally
              }
              matches += std::popcount(~(abits ^ wbits) & kmask);
              pad_weight_sum += p[kw] - (p[hi] - p[lo]);
            }
          }
          // 2*matches - taps scores padding taps as -1 * weight; add the
          // padded weight sum back to recover zero-padding semantics.
          const std::int64_t v = 2 * matches - taps + pad_weight_sum;
          out.at(n, co, y, x) =
              scale ? static_cast<float>(v) * scale->scale[co]
                    : static_cast<float>(v);
        }
      }
  return out;
}

}  // namespace instabnn
