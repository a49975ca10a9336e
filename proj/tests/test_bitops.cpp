#include "instabnn/bitops.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace instabnn;

namespace {

Tensor random_pm1(Shape sh, std::mt19937& rng) {
  std::bernoulli_distribution coin(0.5);
  Tensor t(sh);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = coin(rng) ? 1.0f : -1.0f;
  return t;
}

}  // namespace

TEST(SignBinarize, TieGoesToPlusOne) {
  Tensor x = Tensor::from_list(Shape{1, 1, 1, 3}, {-0.5f, 0.0f, 2.0f});
  BitTensor b = sign_binarize(x, 0.0f);
  EXPECT_FALSE(b.get(0, 0, 0, 0));
  EXPECT_TRUE(b.get(0, 0, 0, 1));
  EXPECT_TRUE(b.get(0, 0, 0, 2));
}

TEST(SignBinarize, ScalarThreshold) {
  Tensor x = Tensor::from_list(Shape{1, 1, 1, 2}, {0.2f, 0.5f});
  BitTensor b = sign_binarize(x, 0.3f);
  EXPECT_FALSE(b.get(0, 0, 0, 0));
  EXPECT_TRUE(b.get(0, 0, 0, 1));
}

TEST(SignBinarize, MatchesElementwiseSignOracle) {
  std::mt19937 rng(21);
  Tensor x = random_tensor<float>(Shape{2, 3, 5, 7}, rng);
  x.at(0, 0, 0, 0) = 0.0f;  // exercise the tie rule
  Tensor u = unpack(sign_binarize(x, 0.0f));
  for (std::size_t i = 0; i < x.numel(); ++i)
    EXPECT_EQ(u[i], x[i] >= 0.0f ? 1.0f : -1.0f);
}

TEST(SignBinarize, PerChannelAndPerInstanceThresholds) {
  std::mt19937 rng(22);
  Tensor x = random_tensor<float>(Shape{2, 3, 4, 4}, rng);
  Tensor th_c = Tensor::from_list(Shape{1, 3, 1, 1}, {-0.2f, 0.0f, 0.4f});
  BitTensor b = sign_binarize(x, th_c);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 4; ++w)
          EXPECT_EQ(b.get(n, c, h, w), x.at(n, c, h, w) >= th_c.at(0, c, 0, 0));

  Tensor nan_th(Shape{1, 1, 1, 1});
  nan_th[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(sign_binarize(x, nan_th), std::invalid_argument);
}

TEST(SignBinarize, MonotoneInThreshold) {
  std::mt19937 rng(23);
  Tensor x = random_tensor<float>(Shape{1, 2, 6, 6}, rng);
  for (float lo = -0.8f; lo < 0.8f; lo += 0.4f) {
    BitTensor a = sign_binarize(x, lo);
    BitTensor b = sign_binarize(x, lo + 0.3f);
    // Raising the threshold never flips -1 to +1.
    for (int c = 0; c < 2; ++c)
      for (int h = 0; h < 6; ++h)
        for (int w = 0; w < 6; ++w)
          EXPECT_LE(b.get(0, c, h, w), a.get(0, c, h, w));
  }
}

TEST(PackUnpack, AllOnesWord) {
  Tensor x(Shape{1, 1, 1, 64}, 1.0f);
  BitTensor b = pack(x);
  ASSERT_EQ(b.words().size(), 1u);
  EXPECT_EQ(b.words()[0], ~std::uint64_t(0));
}

TEST(PackUnpack, AlternatingNibbleLsbFirst) {
  Tensor x = Tensor::from_list(Shape{1, 1, 1, 4}, {1.0f, -1.0f, 1.0f, -1.0f});
  BitTensor b = pack(x);
  EXPECT_EQ(b.words()[0], 0b0101u);
}

TEST(PackUnpack, RoundtripWithPaddingBits) {
  std::mt19937 rng(31);
  Tensor x = random_pm1(Shape{1, 1, 1, 130}, rng);
  BitTensor b = pack(x);
  ASSERT_EQ(b.words().size(), 3u);
  // 130 bits -> third word holds 2 bits, 62 zero padding bits.
  EXPECT_EQ(b.words()[2] >> 2, 0u);
  Tensor back = unpack(b);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(back[i], x[i]);
}

TEST(PackUnpack, ChannelMapsAreWordAligned) {
  std::mt19937 rng(32);
  Tensor x = random_pm1(Shape{2, 3, 2, 3}, rng);  // 6 bits per map
  BitTensor b = pack(x);
  EXPECT_EQ(b.words_per_map(), 1u);
  EXPECT_EQ(b.words().size(), 6u);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      EXPECT_EQ(b.words()[b.map_word_offset(n, c)] >> 6, 0u);
  Tensor back = unpack(b);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(back[i], x[i]);
}

TEST(PackUnpack, RejectsNonBinaryValues) {
  Tensor x(Shape{1, 1, 1, 2}, 1.0f);
  x[1] = 0.5f;
  EXPECT_THROW(pack(x), std::invalid_argument);
}

TEST(XnorConv, FourChannelDotProduct) {
  Tensor a = Tensor::from_list(Shape{1, 4, 1, 1}, {1.0f, -1.0f, 1.0f, 1.0f});
  Tensor w = Tensor::from_list(Shape{1, 4, 1, 1}, {1.0f, 1.0f, 1.0f, -1.0f});
  Shape2dConv cfg{.in_channels = 4, .out_channels = 1, .kernel_h = 1,
                  .kernel_w = 1, .stride = 1, .padding = 0};
  Tensor out = xnor_popcount_conv2d(pack(a), pack(w), cfg);
  EXPECT_EQ(out[0], 0.0f);  // 2*2 matches - 4 taps
}

TEST(XnorConv, SelfCorrelationIsTapCount) {
  std::mt19937 rng(41);
  Tensor a = random_pm1(Shape{1, 3, 4, 4}, rng);
  Tensor w = a;
  // Full-map kernel, no padding: one output equal to the tap count.
  Shape2dConv cfg{.in_channels = 3, .out_channels = 1, .kernel_h = 4,
                  .kernel_w = 4, .stride = 1, .padding = 0};
  Tensor wt(Shape{1, 3, 4, 4});
  for (std::size_t i = 0; i < wt.numel(); ++i) wt[i] = w[i];
  Tensor out = xnor_popcount_conv2d(pack(a), pack(wt), cfg);
  EXPECT_EQ(out[0], 48.0f);
}

TEST(XnorConv, RandomConfigsExactlyMatchDenseConv) {
  std::mt19937 rng(2024);
  std::uniform_int_distribution<int> chan(1, 5), sz(1, 9), ker(1, 4),
      stride(1, 3), pad(0, 2), batch(1, 2), oc(1, 4);
  for (int iter = 0; iter < 100; ++iter) {
    Shape2dConv cfg;
    cfg.in_channels = chan(rng);
    cfg.out_channels = oc(rng);
    cfg.kernel_h = ker(rng);
    cfg.kernel_w = ker(rng);
    cfg.stride = stride(rng);
    cfg.padding = pad(rng);
    int h = sz(rng), w = sz(rng);
    h = std::max(h, cfg.kernel_h - 2 * cfg.padding);
    w = std::max(w, cfg.kernel_w - 2 * cfg.padding);
    if (cfg.out_h(h) < 1 || cfg.out_w(w) < 1) {
      h = cfg.kernel_h;
      w = cfg.kernel_w;
    }
    Tensor a = random_pm1(Shape{batch(rng), cfg.in_channels, h, w}, rng);
    Tensor wt = random_pm1(cfg.weight_shape(), rng);
    Tensor fast = xnor_popcount_conv2d(pack(a), pack(wt), cfg);
    Tensor ref = dense_conv2d(a, wt, cfg);
    ASSERT_EQ(fast.shape(), ref.shape()) << "iter " << iter;
    const Shape os = fast.shape(), is = a.shape();
    for (int n = 0; n < os.n; ++n)
      for (int co = 0; co < os.c; ++co)
        for (int y = 0; y < os.h; ++y)
          for (int x = 0; x < os.w; ++x) {
            ASSERT_EQ(fast.at(n, co, y, x), ref.at(n, co, y, x))
                << "iter " << iter;
            // Matches and mismatches partition the in-bounds taps.
            int valid = 0;
            for (int kh = 0; kh < cfg.kernel_h; ++kh)
              for (int kw = 0; kw < cfg.kernel_w; ++kw) {
                const int iy = y * cfg.stride - cfg.padding + kh;
                const int ix = x * cfg.stride - cfg.padding + kw;
                if (iy >= 0 && iy < is.h && ix >= 0 && ix < is.w)
                  valid += cfg.in_channels;
              }
            const long sum = static_cast<long>(fast.at(n, co, y, x)) + valid;
            ASSERT_EQ(sum % 2, 0);
            ASSERT_GE(sum / 2, 0);
            ASSERT_LE(sum / 2, valid);
          }
  }
}

TEST(XnorConv, AppliesPerChannelScale) {
  std::mt19937 rng(55);
  Shape2dConv cfg{.in_channels = 2, .out_channels = 3, .kernel_h = 3,
                  .kernel_w = 3, .stride = 1, .padding = 1};
  Tensor a = random_pm1(Shape{1, 2, 5, 5}, rng);
  Tensor wt = random_pm1(cfg.weight_shape(), rng);
  WeightScale ws{{0.5f, 2.0f, 0.25f}};
  Tensor scaled = xnor_popcount_conv2d(pack(a), pack(wt), cfg, &ws);
  Tensor plain = xnor_popcount_conv2d(pack(a), pack(wt), cfg);
  for (int co = 0; co < 3; ++co)
    for (int h = 0; h < 5; ++h)
      for (int w = 0; w < 5; ++w)
        EXPECT_FLOAT_EQ(scaled.at(0, co, h, w),
                        plain.at(0, co, h, w) * ws.scale[co]);
}

TEST(WeightScales, ExamplesAndHomogeneity) {
  Tensor w(Shape{1, 2, 1, 1});
  w[0] = 0.5f;
  w[1] = -0.5f;
  EXPECT_FLOAT_EQ(weight_scale_factors(w).scale[0], 0.5f);

  Tensor w2 = Tensor::from_list(Shape{1, 2, 1, 1}, {1.0f, -3.0f});
  EXPECT_FLOAT_EQ(weight_scale_factors(w2).scale[0], 2.0f);

  std::mt19937 rng(66);
  Tensor w3 = random_tensor<float>(Shape{3, 2, 3, 3}, rng);
  WeightScale base = weight_scale_factors(w3);
  Tensor w4 = w3;
  for (std::size_t i = 0; i < w4.numel(); ++i) w4[i] *= 2.5f;
  WeightScale scaled = weight_scale_factors(w4);
  for (int o = 0; o < 3; ++o)
    EXPECT_NEAR(scaled.scale[o], 2.5f * base.scale[o], 1e-6f);
}

TEST(WeightScales, ZeroFilterYieldsZeroScale) {
  Tensor w(Shape{2, 1, 2, 2}, 0.0f);
  for (int i = 0; i < 4; ++i) w.at(1, 0, i / 2, i % 2) = 1.0f;
  WeightScale ws = weight_scale_factors(w);
  EXPECT_EQ(ws.scale[0], 0.0f);
  EXPECT_FLOAT_EQ(ws.scale[1], 1.0f);
}
