// Layer and block semantics: ReActNet-style sign/PReLU modules, their
// instance-aware variants, the SE-like gate, batch normalization, residual
// units in both block orderings, and the model builder.
//
// Every module is written once over the tape ops; a null tape gives the
// inference path. The free functions at the bottom expose the module
// semantics over plain tensors (bit-packed outputs for the sign family).
#pragma once

#include <memory>
#include <optional>

#include "instabnn/arch.hpp"
#include "instabnn/autodiff.hpp"
#include "instabnn/bitops.hpp"
#include "instabnn/quantize.hpp"
#include "instabnn/stats.hpp"

namespace instabnn {

enum class Variant { kBaseline, kInsta, kInstaPlus };
enum class SeBound { kSigmoid, kTanh, kTanh3 };
enum class BlockOrder { kSignConvBn, kBnSignConvMerged };

inline Variant variant_from_string(const std::string& s) {
  if (s == "baseline") return Variant::kBaseline;
  if (s == "insta") return Variant::kInsta;
  if (s == "insta_plus") return Variant::kInstaPlus;
  throw std::invalid_argument("unknown variant: " + s);
}
inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::kBaseline: return "baseline";
    case Variant::kInsta: return "insta";
    case Variant::kInstaPlus: return "insta_plus";
  }
  return "?";
}

inline SeBound se_bound_from_string(const std::string& s) {
  if (s == "sigmoid") return SeBound::kSigmoid;
  if (s == "tanh") return SeBound::kTanh;
  if (s == "tanh3") return SeBound::kTanh3;
  throw std::invalid_argument("unknown se bound: " + s);
}
inline std::string to_string(SeBound b) {
  switch (b) {
    case SeBound::kSigmoid: return "sigmoid";
    case SeBound::kTanh: return "tanh";
    case SeBound::kTanh3: return "tanh3";
  }
  return "?";
}

inline BlockOrder block_order_from_string(const std::string& s) {
  if (s == "sign_conv_bn") return BlockOrder::kSignConvBn;
  if (s == "bn_sign_conv_merged") return BlockOrder::kBnSignConvMerged;
  throw std::invalid_argument("unknown block order: " + s);
}
inline std::string to_string(BlockOrder o) {
  return o == BlockOrder::kSignConvBn ? "sign_conv_bn" : "bn_sign_conv_merged";
}

struct ModelOptions {
  Variant variant = Variant::kBaseline;
  ThVariant th_variant = ThVariant::kCube;
  SeBound se_bound = SeBound::kTanh3;
  int se_ratio = 16;
  BlockOrder order = BlockOrder::kSignConvBn;
  bool th_norm = true;  // normalization inside the instance-aware modules
  int stage = 1;        // 1: real weights, 2: binarized weights
  ad::SteMode ste = ad::SteMode::kClip1;
  unsigned seed = 1;
};

// ---------------------------------------------------------------------------
// Parameter store

template <typename S>
struct Param {
  std::string name;
  ad::Var<S> var;
  bool trainable = true;
  bool binary_latent = false;  // clipped to [-1,1] and binarized in stage 2
};

template <typename S>
class ParamStore {
 public:
  int add(std::string name, TensorT<S> init, bool trainable = true,
          bool binary_latent = false) {
    detail::check(find(name) < 0, "param store: duplicate name " + name);
    Param<S> p;
    p.name = std::move(name);
    p.var = ad::make_var(std::move(init), trainable);
    p.trainable = trainable;
    p.binary_latent = binary_latent;
    params_.push_back(std::move(p));
    return static_cast<int>(params_.size()) - 1;
  }

  Param<S>& at(int i) { return params_.at(i); }
  const Param<S>& at(int i) const { return params_.at(i); }
  std::size_t size() const { return params_.size(); }

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return static_cast<int>(i);
    return -1;
  }

  void zero_grads() {
    for (auto& p : params_) p.var->zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Param<S>> params_;
};

// Quantizer slot wired to a module input; disabled until quantizers are
// attached and calibrated.
template <typename S>
struct LsqSlot {
  int step_idx = -1;  // param index
  int bits = 4;
  bool enabled = false;
  bool calibrated = false;
};

template <typename S>
using CaptureFn =
    std::function<void(const std::string&, const std::string&, const TensorT<S>&)>;

// Per-forward context. A null tape means inference.
template <typename S>
struct Ctx {
  ad::Tape<S>* tape = nullptr;
  NormMode mode = NormMode::kEval;
  int stage = 1;
  ad::SteMode ste = ad::SteMode::kClip1;
  bool use_bit_kernel = false;  // stage-2 inference through the packed path
  CaptureFn<S>* capture = nullptr;

  void cap(const std::string& layer, const std::string& tag,
           const TensorT<S>& t) const {
    if (capture) (*capture)(layer, tag, t);
  }
};

// References threaded through layer forwards.
template <typename S>
struct ModelState {
  ParamStore<S>& store;
  std::vector<LsqSlot<S>>& quants;
};

// ---------------------------------------------------------------------------
// Normalization core (shared by the instance-aware modules and batch norm)

template <typename S>
struct NormCore {
  NormStatsT<S> stats;

  explicit NormCore(int channels) : stats(channels) {}

  ad::Var<S> forward(Ctx<S>& ctx, const ad::Var<S>& x) {
    const Shape sh = x->value.shape();
    detail::check(sh.c == stats.channels(), "normalize: channel mismatch");
    const Shape cs{1, sh.c, 1, 1};
    if (ctx.mode == NormMode::kTrain) {
      auto mu = ad::reduce_mean(ctx.tape, x, cs);
      auto d = ad::sub(ctx.tape, x, mu);
      auto var = ad::reduce_mean(ctx.tape, ad::mul(ctx.tape, d, d), cs);
      auto sigma = ad::sqrt_(ctx.tape, ad::add_scalar(ctx.tape, var, S(kNormEps)));
      auto out = ad::mul(ctx.tape, d, ad::recip(ctx.tape, sigma));
      stats.update(mu->value.vec(), sigma->value.vec());
      return out;
    }
    detail::check(stats.initialized,
                  "normalize: eval mode requires trained or loaded running stats");
    TensorT<S> mean(cs), inv(cs);
    for (int c = 0; c < sh.c; ++c) {
      mean[c] = stats.running_mean[c];
      inv[c] = S(1) / stats.running_std[c];
    }
    return ad::mul(ctx.tape, ad::sub(ctx.tape, x, ad::constant(std::move(mean))),
                   ad::constant(std::move(inv)));
  }
};

// ---------------------------------------------------------------------------
// Modules

template <typename S>
ad::Var<S> apply_bound(ad::Tape<S>* t, SeBound bound, const ad::Var<S>& x) {
  switch (bound) {
    case SeBound::kSigmoid: return ad::sigmoid_(t, x);
    case SeBound::kTanh: return ad::tanh_(t, x);
    case SeBound::kTanh3: return ad::tanh3(t, x);
  }
  throw std::invalid_argument("bad bound");
}

// Squeeze-excite style gate producing one threshold offset per (instance,
// channel): bound(W2 * relu(W1 * GAP(x))). The FC weights may carry 8-bit
// channel-wise quantizers.
template <typename S>
struct SeGate {
  std::string name;
  int channels = 0, reduced = 0;
  int w1_idx = -1, w2_idx = -1;
  int w1_quant = -1, w2_quant = -1;  // slot indices
  SeBound bound = SeBound::kTanh3;

  ad::Var<S> quantized(Ctx<S>& ctx, ModelState<S>& ms, int w_idx, int slot) const {
    auto w = ms.store.at(w_idx).var;
    if (slot >= 0 && ms.quants[slot].enabled) {
      auto& q = ms.quants[slot];
      return lsq_apply(ctx.tape, w, ms.store.at(q.step_idx).var, q.bits);
    }
    return w;
  }

  ad::Var<S> forward(Ctx<S>& ctx, ModelState<S>& ms, const ad::Var<S>& x) const {
    const Shape sh = x->value.shape();
    auto g = ad::reduce_mean(ctx.tape, x, Shape{sh.n, sh.c, 1, 1});
    auto h = ad::relu(ctx.tape, ad::linear(ctx.tape, g, quantized(ctx, ms, w1_idx, w1_quant)));
    auto a = ad::linear(ctx.tape, h, quantized(ctx, ms, w2_idx, w2_quant));
    return apply_bound(ctx.tape, bound, a);
  }
};

// Sign activation with a learned per-channel threshold.
template <typename S>
struct RSignModule {
  std::string name;
  int alpha_idx = -1;

  ad::Var<S> forward(Ctx<S>& ctx, ModelState<S>& ms, const ad::Var<S>& x) const {
    auto u = ad::sub(ctx.tape, x, ms.store.at(alpha_idx).var);
    ctx.cap(name, "pre_act", x->value);
    ctx.cap(name, "pre_sign", u->value);
    return ad::sign_ste(ctx.tape, u, ctx.ste);
  }
};

// Instance-aware threshold: binarizes normalized pre-activations against
// alpha + f(instance statistics), in the shifted form sign(x~ - TH).
template <typename S>
struct InstaThModule {
  std::string name;
  int channels = 0;
  ThVariant variant = ThVariant::kCube;
  bool use_norm = true;
  std::unique_ptr<NormCore<S>> norm;
  int alpha_idx = -1;  // unused when the SE gate provides alpha
  int beta_idx = -1;
  int gamma_idx = -1;  // *_skew variants
  std::optional<SeGate<S>> se;
  int act_quant = -1;  // 4-bit slot on the cube input

  ad::Var<S> threshold(Ctx<S>& ctx, ModelState<S>& ms, const ad::Var<S>& xt,
                       const ad::Var<S>& block_in) const {
    ad::Tape<S>* t = ctx.tape;
    const Shape sh = xt->value.shape();
    const Shape nc{sh.n, sh.c, 1, 1};
    auto beta = ms.store.at(beta_idx).var;
    ad::Var<S> term;
    if (variant == ThVariant::kCube) {
      ad::Var<S> xq = xt;
      if (act_quant >= 0 && ms.quants[act_quant].enabled) {
        auto& q = ms.quants[act_quant];
        xq = lsq_apply(t, xt, ms.store.at(q.step_idx).var, q.bits);
      }
      auto m3 = ad::reduce_mean(t, ad::cube(t, xq), nc);
      term = ad::mul(t, m3, beta);
    } else {
      auto m1 = ad::reduce_mean(t, xt, nc);
      if (variant == ThVariant::kMean) {
        term = ad::mul(t, m1, beta);
      } else {
        auto d = ad::sub(t, xt, m1);
        auto var = ad::reduce_mean(t, ad::mul(t, d, d), nc);
        if (variant == ThVariant::kMeanVar) {
          term = ad::mul(t, ad::mul(t, m1, var), beta);
        } else {
          auto c3 = ad::reduce_mean(t, ad::cube(t, d), nc);
          auto skew = ad::mul(t, c3, ad::inv_sqrt_cube(t, var));
          auto gamma = ms.store.at(gamma_idx).var;
          auto combo = ad::add(t, ad::mul(t, m1, beta), ad::mul(t, skew, gamma));
          term = variant == ThVariant::kMeanSkew ? combo : ad::mul(t, combo, var);
        }
      }
    }
    if (se) return ad::add(t, term, se->forward(ctx, ms, block_in));
    return ad::add(t, term, ms.store.at(alpha_idx).var);
  }

  ad::Var<S> forward(Ctx<S>& ctx, ModelState<S>& ms, const ad::Var<S>& x) const {
    auto xt = use_norm ? norm->forward(ctx, x) : x;
    ctx.cap(name, "pre_act", xt->value);
    auto th = threshold(ctx, ms, xt, x);
    auto u = ad::sub(ctx.tape, xt, th);
    ctx.cap(name, "pre_sign", u->value);
    return ad::sign_ste(ctx.tape, u, ctx.ste);
  }
};

// ReActNet's PReLU with learned per-channel shifts.
template <typename S>
struct RPReLUModule {
  std::string name;
  int xshift_idx = -1, slope_idx = -1, yshift_idx = -1;

  ad::Var<S> forward(Ctx<S>& ctx, ModelState<S>& ms, const ad::Var<S>& x) const {
    ad::Tape<S>* t = ctx.tape;
    auto u = ad::sub(t, x, ms.store.at(xshift_idx).var);
    auto y = ad::prelu_shifted(t, u, ms.store.at(slope_idx).var);
    return ad::add(t, y, ms.store.at(yshift_idx).var);
  }
};

// PReLU whose x-shift is alpha + bound(beta * E[x~^3]) per instance and
// channel; the y-shift stays a plain learned parameter.
template <typename S>
struct InstaPReluModule {
  std::string name;
  int channels = 0;
  bool use_norm = true;
  std::unique_ptr<NormCore<S>> norm;
  int alpha_idx = -1;
  int beta_idx = -1, slope_idx = -1, yshift_idx = -1;
  SeBound bound = SeBound::kTanh3;
  std::optional<SeGate<S>> se;
  int act_quant = -1;

  ad::Var<S> forward(Ctx<S>& ctx, ModelState<S>& ms, const ad::Var<S>& x) const {
    ad::Tape<S>* t = ctx.tape;
    auto xt = use_norm ? norm->forward(ctx, x) : x;
    const Shape sh = xt->value.shape();
    ad::Var<S> xq = xt;
    if (act_quant >= 0 && ms.quants[act_quant].enabled) {
      auto& q = ms.quants[act_quant];
      xq = lsq_apply(t, xt, ms.store.at(q.step_idx).var, q.bits);
    }
    auto m3 = ad::reduce_mean(t, ad::cube(t, xq), Shape{sh.n, sh.c, 1, 1});
    auto bounded = apply_bound(t, bound, ad::mul(t, m3, ms.store.at(beta_idx).var));
    auto th = se ? ad::add(t, bounded, se->forward(ctx, ms, x))
                 : ad::add(t, bounded, ms.store.at(alpha_idx).var);
    auto u = ad::sub(t, xt, th);
    auto y = ad::prelu_shifted(t, u, ms.store.at(slope_idx).var);
    return ad::add(t, y, ms.store.at(yshift_idx).var);
  }
};

template <typename S>
struct BatchNormModule {
  std::string name;
  std::unique_ptr<NormCore<S>> core;
  int gamma_idx = -1, beta_idx = -1;

  ad::Var<S> forward(Ctx<S>& ctx, ModelState<S>& ms, const ad::Var<S>& x) const {
    auto xt = core->forward(ctx, x);
    auto y = ad::mul(ctx.tape, xt, ms.store.at(gamma_idx).var);
    return ad::add(ctx.tape, y, ms.store.at(beta_idx).var);
  }
};

// ---------------------------------------------------------------------------
// Layers

template <typename S>
struct LayerBase {
  std::string name;
  virtual ~LayerBase() = default;
  virtual ad::Var<S> forward(Ctx<S>& ctx, ModelState<S>& ms, ad::Var<S> x) = 0;
  virtual void collect_norms(
      std::vector<std::pair<std::string, NormStatsT<S>*>>& out) {
    (void)out;
  }
};

template <typename S>
struct RealConvLayer : LayerBase<S> {
  Shape2dConv cfg;
  int w_idx = -1;
  std::unique_ptr<BatchNormModule<S>> bn;

  ad::Var<S> forward(Ctx<S>& ctx, ModelState<S>& ms, ad::Var<S> x) override {
    auto y = ad::conv2d(ctx.tape, x, ms.store.at(w_idx).var, cfg);
    if (bn) y = bn->forward(ctx, ms, y);
    return y;
  }
  void collect_norms(std::vector<std::pair<std::string, NormStatsT<S>*>>& out) override {
    if (bn) out.emplace_back(bn->name, &bn->core->stats);
  }
};

template <typename S>
struct MaxPoolLayer : LayerBase<S> {
  int k = 3, stride = 2, pad = 1;
  ad::Var<S> forward(Ctx<S>& ctx, ModelState<S>&, ad::Var<S> x) override {
    return ad::max_pool(ctx.tape, x, k, stride, pad);
  }
};

template <typename S>
struct GapLayer : LayerBase<S> {
  ad::Var<S> forward(Ctx<S>& ctx, ModelState<S>&, ad::Var<S> x) override {
    const Shape sh = x->value.shape();
    return ad::reduce_mean(ctx.tape, x, Shape{sh.n, sh.c, 1, 1});
  }
};

template <typename S>
struct FcLayer : LayerBase<S> {
  int w_idx = -1, b_idx = -1;
  ad::Var<S> forward(Ctx<S>& ctx, ModelState<S>& ms, ad::Var<S> x) override {
    return ad::linear(ctx.tape, x, ms.store.at(w_idx).var, ms.store.at(b_idx).var);
  }
};

// One residual unit. Fig-2-style ordering is activation, binary conv, BN,
// shortcut add, PReLU-family; the merged ordering runs the sign module's
// normalization in place of the BN and adds the shortcut after the PReLU.
template <typename S>
struct BinUnitLayer : LayerBase<S> {
  Shape2dConv cfg;
  BlockOrder order = BlockOrder::kSignConvBn;
  int w_idx = -1;

  // exactly one of rsign/insta_th is set, likewise rprelu/insta_prelu
  std::unique_ptr<RSignModule<S>> rsign;
  std::unique_ptr<InstaThModule<S>> insta_th;
  std::unique_ptr<RPReLUModule<S>> rprelu;
  std::unique_ptr<InstaPReluModule<S>> insta_prelu;
  std::unique_ptr<BatchNormModule<S>> bn;      // fig-2 ordering
  std::unique_ptr<BatchNormModule<S>> pre_bn;  // merged ordering, baseline only

  ShortcutKind shortcut = ShortcutKind::kIdentity;
  int sc_w_idx = -1;
  std::unique_ptr<BatchNormModule<S>> sc_bn;
  Shape2dConv sc_cfg;

  ad::Var<S> shortcut_path(Ctx<S>& ctx, ModelState<S>& ms, const ad::Var<S>& x) {
    switch (shortcut) {
      case ShortcutKind::kIdentity: return x;
      case ShortcutKind::kNone: return nullptr;
      case ShortcutKind::kOptionB: {
        ad::Var<S> s = x;
        if (cfg.stride > 1) s = ad::avg_pool(ctx.tape, s, cfg.stride, cfg.stride);
        s = ad::conv2d(ctx.tape, s, ms.store.at(sc_w_idx).var, sc_cfg);
        return sc_bn->forward(ctx, ms, s);
      }
      default:
        throw std::invalid_argument("shortcut kind not supported in built models");
    }
  }

  ad::Var<S> act_sign(Ctx<S>& ctx, ModelState<S>& ms, const ad::Var<S>& x) {
    return rsign ? rsign->forward(ctx, ms, x) : insta_th->forward(ctx, ms, x);
  }
  ad::Var<S> act_prelu(Ctx<S>& ctx, ModelState<S>& ms, const ad::Var<S>& x) {
    return rprelu ? rprelu->forward(ctx, ms, x) : insta_prelu->forward(ctx, ms, x);
  }

  ad::Var<S> conv_forward(Ctx<S>& ctx, ModelState<S>& ms, const ad::Var<S>& a) {
    auto w = ms.store.at(w_idx).var;
    if (ctx.stage == 2) {
      if constexpr (std::is_same_v<S, float>) {
        if (!ctx.tape && ctx.use_bit_kernel) {
          WeightScale ws = weight_scale_factors(w->value);
          Tensor wpm(w->value.shape());
          for (std::size_t i = 0; i < wpm.numel(); ++i)
            wpm[i] = w->value[i] >= 0.0f ? 1.0f : -1.0f;
          Tensor y = xnor_popcount_conv2d(pack(a->value), pack(wpm), cfg, &ws);
          return ad::constant(std::move(y));
        }
      }
      auto scale = ad::reduce_mean(ctx.tape, ad::abs_(ctx.tape, w),
                                   Shape{cfg.out_channels, 1, 1, 1});
      auto wq = ad::mul(ctx.tape, ad::sign_ste(ctx.tape, w, ctx.ste), scale);
      return ad::conv2d(ctx.tape, a, wq, cfg);
    }
    return ad::conv2d(ctx.tape, a, w, cfg);
  }

  ad::Var<S> forward(Ctx<S>& ctx, ModelState<S>& ms, ad::Var<S> x) override {
    auto sc = shortcut_path(ctx, ms, x);
    ad::Var<S> y;
    if (order == BlockOrder::kSignConvBn) {
      auto a = act_sign(ctx, ms, x);
      y = conv_forward(ctx, ms, a);
      y = bn->forward(ctx, ms, y);
      if (sc) y = ad::add(ctx.tape, y, sc);
      y = act_prelu(ctx, ms, y);
    } else {
      auto in = pre_bn ? pre_bn->forward(ctx, ms, x) : x;
      auto a = act_sign(ctx, ms, in);
      y = conv_forward(ctx, ms, a);
      y = act_prelu(ctx, ms, y);
      if (sc) y = ad::add(ctx.tape, y, sc);
    }
    return y;
  }

  void collect_norms(std::vector<std::pair<std::string, NormStatsT<S>*>>& out) override {
    if (insta_th && insta_th->norm)
      out.emplace_back(insta_th->name + ".norm", &insta_th->norm->stats);
    if (insta_prelu && insta_prelu->norm)
      out.emplace_back(insta_prelu->name + ".norm", &insta_prelu->norm->stats);
    if (bn) out.emplace_back(bn->name, &bn->core->stats);
    if (pre_bn) out.emplace_back(pre_bn->name, &pre_bn->core->stats);
    if (sc_bn) out.emplace_back(sc_bn->name, &sc_bn->core->stats);
  }
};

// ---------------------------------------------------------------------------
// Model

template <typename S>
class ModelT {
 public:
  ArchSpec arch;
  ModelOptions opts;
  ParamStore<S> store;
  std::vector<LsqSlot<S>> quants;
  std::vector<std::unique_ptr<LayerBase<S>>> layers;

  ad::Var<S> forward(Ctx<S>& ctx, ad::Var<S> x) {
    ModelState<S> ms{store, quants};
    for (auto& l : layers) x = l->forward(ctx, ms, x);
    return x;
  }

  // Deterministic inference logits. Stage-2 float models route binary convs
  // through the packed XNOR kernel.
  TensorT<S> predict(const TensorT<S>& images) {
    Ctx<S> ctx;
    ctx.mode = NormMode::kEval;
    ctx.stage = opts.stage;
    ctx.ste = opts.ste;
    ctx.use_bit_kernel = opts.stage == 2;
    auto out = forward(ctx, ad::constant(images));
    return out->value;
  }

  std::vector<std::pair<std::string, NormStatsT<S>*>> norm_states() {
    std::vector<std::pair<std::string, NormStatsT<S>*>> out;
    for (auto& l : layers) l->collect_norms(out);
    return out;
  }

  Ctx<S> train_ctx(ad::Tape<S>* tape) {
    Ctx<S> ctx;
    ctx.tape = tape;
    ctx.mode = NormMode::kTrain;
    ctx.stage = opts.stage;
    ctx.ste = opts.ste;
    return ctx;
  }
};

using Model = ModelT<float>;

// ---------------------------------------------------------------------------
// Builder

namespace buildimpl {

template <typename S>
TensorT<S> conv_init(Shape sh, std::mt19937& rng) {
  const double fan_in = static_cast<double>(sh.c) * sh.h * sh.w;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  TensorT<S> t(sh);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(dist(rng));
  return t;
}

template <typename S>
TensorT<S> fc_init(Shape sh, std::mt19937& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(sh.c));
  std::uniform_real_distribution<double> dist(-bound, bound);
  TensorT<S> t(sh);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(dist(rng));
  return t;
}

template <typename S>
std::unique_ptr<BatchNormModule<S>> make_bn(const std::string& name, int channels,
                                            ParamStore<S>& store) {
  auto bn = std::make_unique<BatchNormModule<S>>();
  bn->name = name;
  bn->core = std::make_unique<NormCore<S>>(channels);
  bn->gamma_idx = store.add(name + ".gamma", TensorT<S>(Shape{1, channels, 1, 1}, S(1)));
  bn->beta_idx = store.add(name + ".beta", TensorT<S>(Shape{1, channels, 1, 1}, S(0)));
  return bn;
}

template <typename S>
SeGate<S> make_se(const std::string& name, int channels, const ModelOptions& o,
                  ParamStore<S>& store, std::vector<LsqSlot<S>>& quants,
                  std::mt19937& rng) {
  SeGate<S> se;
  se.name = name;
  se.channels = channels;
  se.reduced = std::max(1, (channels + o.se_ratio - 1) / o.se_ratio);
  se.bound = o.se_bound;
  se.w1_idx = store.add(name + ".w1",
                        fc_init<S>(Shape{se.reduced, channels, 1, 1}, rng));
  se.w2_idx = store.add(name + ".w2",
                        fc_init<S>(Shape{channels, se.reduced, 1, 1}, rng));
  se.w1_quant = static_cast<int>(quants.size());
  quants.push_back(LsqSlot<S>{-1, 8, false, false});
  se.w2_quant = static_cast<int>(quants.size());
  quants.push_back(LsqSlot<S>{-1, 8, false, false});
  return se;
}

}  // namespace buildimpl

template <typename S>
ModelT<S> build_model(const ArchSpec& arch, const ModelOptions& opts) {
  arch.validate();
  detail::check(arch.trainable,
                "build_model: " + arch.name + " is a cost-model-only descriptor");
  ModelT<S> model;
  model.arch = arch;
  model.opts = opts;
  std::mt19937 rng(opts.seed);

  int c = arch.in_channels, h = arch.in_h, w = arch.in_w;
  int unit = 0;
  bool pooled = false;

  auto add_sign = [&](const std::string& name, int channels,
                      BinUnitLayer<S>& out) {
    if (opts.variant == Variant::kBaseline) {
      out.rsign = std::make_unique<RSignModule<S>>();
      out.rsign->name = name;
      out.rsign->alpha_idx = model.store.add(
          name + ".alpha", TensorT<S>(Shape{1, channels, 1, 1}, S(0)));
      return;
    }
    out.insta_th = std::make_unique<InstaThModule<S>>();
    auto& m = *out.insta_th;
    m.name = name;
    m.channels = channels;
    m.variant = opts.th_variant;
    m.use_norm = opts.th_norm;
    if (m.use_norm) m.norm = std::make_unique<NormCore<S>>(channels);
    m.beta_idx = model.store.add(name + ".beta",
                                 TensorT<S>(Shape{1, channels, 1, 1}, S(0)));
    if (opts.th_variant == ThVariant::kMeanSkew ||
        opts.th_variant == ThVariant::kMeanSkewVar)
      m.gamma_idx = model.store.add(name + ".gamma",
                                    TensorT<S>(Shape{1, channels, 1, 1}, S(0)));
    if (opts.variant == Variant::kInstaPlus) {
      m.se = buildimpl::make_se(name + ".se", channels, opts, model.store,
                                model.quants, rng);
    } else {
      m.alpha_idx = model.store.add(name + ".alpha",
                                    TensorT<S>(Shape{1, channels, 1, 1}, S(0)));
    }
    if (opts.th_variant == ThVariant::kCube) {
      m.act_quant = static_cast<int>(model.quants.size());
      model.quants.push_back(LsqSlot<S>{-1, 4, false, false});
    }
  };

  auto add_prelu = [&](const std::string& name, int channels,
                       BinUnitLayer<S>& out) {
    if (opts.variant == Variant::kBaseline) {
      out.rprelu = std::make_unique<RPReLUModule<S>>();
      auto& m = *out.rprelu;
      m.name = name;
      m.xshift_idx = model.store.add(name + ".xshift",
                                     TensorT<S>(Shape{1, channels, 1, 1}, S(0)));
      m.slope_idx = model.store.add(name + ".slope",
                                    TensorT<S>(Shape{1, channels, 1, 1}, S(0.25)));
      m.yshift_idx = model.store.add(name + ".yshift",
                                     TensorT<S>(Shape{1, channels, 1, 1}, S(0)));
      return;
    }
    out.insta_prelu = std::make_unique<InstaPReluModule<S>>();
    auto& m = *out.insta_prelu;
    m.name = name;
    m.channels = channels;
    m.use_norm = opts.th_norm;
    m.bound = opts.se_bound;
    if (m.use_norm) m.norm = std::make_unique<NormCore<S>>(channels);
    m.beta_idx = model.store.add(name + ".beta",
                                 TensorT<S>(Shape{1, channels, 1, 1}, S(0)));
    m.slope_idx = model.store.add(name + ".slope",
                                  TensorT<S>(Shape{1, channels, 1, 1}, S(0.25)));
    m.yshift_idx = model.store.add(name + ".yshift",
                                   TensorT<S>(Shape{1, channels, 1, 1}, S(0)));
    if (opts.variant == Variant::kInstaPlus) {
      m.se = buildimpl::make_se(name + ".se", channels, opts, model.store,
                                model.quants, rng);
    } else {
      m.alpha_idx = model.store.add(name + ".alpha",
                                    TensorT<S>(Shape{1, channels, 1, 1}, S(0)));
    }
    m.act_quant = static_cast<int>(model.quants.size());
    model.quants.push_back(LsqSlot<S>{-1, 4, false, false});
  };

  for (const ArchLayer& al : arch.layers) {
    if (al.kind == "conv_real") {
      auto l = std::make_unique<RealConvLayer<S>>();
      l->name = unit == 0 ? "stem" : ("conv" + std::to_string(unit));
      l->cfg = Shape2dConv{c, al.out, al.k, al.k, al.stride, al.padding()};
      l->w_idx = model.store.add(l->name + ".w",
                                 buildimpl::conv_init<S>(l->cfg.weight_shape(), rng));
      if (al.bn) l->bn = buildimpl::make_bn<S>(l->name + ".bn", al.out, model.store);
      c = al.out;
      h = l->cfg.out_h(h);
      w = l->cfg.out_w(w);
      model.layers.push_back(std::move(l));
    } else if (al.kind == "maxpool") {
      auto l = std::make_unique<MaxPoolLayer<S>>();
      l->name = "maxpool";
      l->k = al.k;
      l->stride = al.stride;
      l->pad = al.padding();
      h = (h + 2 * l->pad - l->k) / l->stride + 1;
      w = (w + 2 * l->pad - l->k) / l->stride + 1;
      model.layers.push_back(std::move(l));
    } else if (al.kind == "binunit") {
      ++unit;
      auto l = std::make_unique<BinUnitLayer<S>>();
      l->name = "unit" + std::to_string(unit);
      l->order = opts.order;
      l->cfg = Shape2dConv{c, al.out, al.k, al.k, al.stride, al.padding()};
      l->w_idx = model.store.add(l->name + ".conv.w",
                                 buildimpl::conv_init<S>(l->cfg.weight_shape(), rng),
                                 true, /*binary_latent=*/true);
      add_sign(l->name + ".th", c, *l);
      add_prelu(l->name + ".act", al.out, *l);
      if (opts.order == BlockOrder::kSignConvBn) {
        l->bn = buildimpl::make_bn<S>(l->name + ".bn", al.out, model.store);
      } else if (opts.variant == Variant::kBaseline) {
        l->pre_bn = buildimpl::make_bn<S>(l->name + ".prebn", c, model.store);
      }
      ShortcutKind sc = al.shortcut;
      if (sc == ShortcutKind::kAuto)
        sc = (al.stride == 1 && al.out == c) ? ShortcutKind::kIdentity
                                             : ShortcutKind::kOptionB;
      l->shortcut = sc;
      if (sc == ShortcutKind::kOptionB) {
        l->sc_cfg = Shape2dConv{c, al.out, 1, 1, 1, 0};
        l->sc_w_idx = model.store.add(
            l->name + ".sc.w", buildimpl::conv_init<S>(l->sc_cfg.weight_shape(), rng));
        l->sc_bn = buildimpl::make_bn<S>(l->name + ".sc.bn", al.out, model.store);
      }
      c = al.out;
      h = l->cfg.out_h(h);
      w = l->cfg.out_w(w);
      model.layers.push_back(std::move(l));
    } else if (al.kind == "gap") {
      auto l = std::make_unique<GapLayer<S>>();
      l->name = "gap";
      h = w = 1;
      pooled = true;
      model.layers.push_back(std::move(l));
    } else if (al.kind == "fc") {
      detail::check(pooled || (h == 1 && w == 1),
                    "build_model: fc requires pooled (N,C,1,1) input");
      auto l = std::make_unique<FcLayer<S>>();
      l->name = "fc";
      const int out = al.out > 0 ? al.out : arch.num_classes;
      l->w_idx = model.store.add("fc.w",
                                 buildimpl::fc_init<S>(Shape{out, c, 1, 1}, rng));
      l->b_idx = model.store.add("fc.b", TensorT<S>(Shape{1, out, 1, 1}, S(0)));
      c = out;
      model.layers.push_back(std::move(l));
    }
  }
  return model;
}

inline Model build_model(const ArchSpec& arch, const ModelOptions& opts) {
  return build_model<float>(arch, opts);
}

// ---------------------------------------------------------------------------
// Functional module semantics over plain tensors (spec-facing surface).

template <typename S>
struct RSignParamsT {
  std::vector<S> alpha;
};
using RSignParams = RSignParamsT<float>;

template <typename S>
struct RPReLUParamsT {
  std::vector<S> x_shift, slope, y_shift;
};
using RPReLUParams = RPReLUParamsT<float>;

template <typename S>
struct SEGateParamsT {
  TensorT<S> w1;  // (C/r, C, 1, 1)
  TensorT<S> w2;  // (C, C/r, 1, 1)
  int reduction = 16;
};
using SEGateParams = SEGateParamsT<float>;

template <typename S>
TensorT<S> per_channel_tensor(const std::vector<S>& v) {
  TensorT<S> t(Shape{1, static_cast<int>(v.size()), 1, 1});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i];
  return t;
}

template <typename S>
BitTensor rsign_forward(const TensorT<S>& x, const RSignParamsT<S>& p) {
  return sign_binarize(x, per_channel_tensor(p.alpha));
}

// Shifted-threshold form: sign(x~ + (-TH)) against zero; identical bits to
// comparing x~ >= TH directly.
template <typename S>
BitTensor insta_th_forward(const TensorT<S>& x, NormStatsT<S>& stats,
                           const ThresholdParamsT<S>& params,
                           NormMode mode = NormMode::kEval,
                           ThVariant variant = ThVariant::kCube) {
  TensorT<S> xt = normalize_no_affine(x, stats, mode);
  TensorT<S> th = compute_threshold(variant, compute_instance_moments(xt), params);
  const Shape sh = xt.shape();
  TensorT<S> u(sh);
  for (int n = 0; n < sh.n; ++n)
    for (int c = 0; c < sh.c; ++c) {
      const S shift = -th.at(n, c, 0, 0);
      for (int hh = 0; hh < sh.h; ++hh)
        for (int ww = 0; ww < sh.w; ++ww)
          u.at(n, c, hh, ww) = xt.at(n, c, hh, ww) + shift;
    }
  return sign_binarize(u, S(0));
}

template <typename S>
TensorT<S> se_gate_forward(const TensorT<S>& x, const SEGateParamsT<S>& p,
                           SeBound bound = SeBound::kTanh3) {
  TensorT<S> g = global_avg_pool(x);
  TensorT<S> h = linear_dense(g, p.w1);
  for (std::size_t i = 0; i < h.numel(); ++i) h[i] = std::max(S(0), h[i]);
  TensorT<S> a = linear_dense(h, p.w2);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    switch (bound) {
      case SeBound::kSigmoid: a[i] = S(1) / (S(1) + std::exp(-a[i])); break;
      case SeBound::kTanh: a[i] = std::tanh(a[i]); break;
      case SeBound::kTanh3: a[i] = S(3) * std::tanh(a[i] / S(3)); break;
    }
  }
  return a;
}

template <typename S>
BitTensor insta_th_plus_forward(const TensorT<S>& x, NormStatsT<S>& stats,
                                const std::vector<S>& beta,
                                const SEGateParamsT<S>& se,
                                SeBound bound = SeBound::kTanh3,
                                NormMode mode = NormMode::kEval) {
  TensorT<S> alpha_nc = se_gate_forward(x, se, bound);
  TensorT<S> xt = normalize_no_affine(x, stats, mode);
  TensorT<S> m3 = instance_channel_moment3(xt);
  const Shape sh = xt.shape();
  TensorT<S> u(sh);
  for (int n = 0; n < sh.n; ++n)
    for (int c = 0; c < sh.c; ++c) {
      const S th = alpha_nc.at(n, c, 0, 0) + beta[c] * m3.at(n, c, 0, 0);
      const S shift = -th;
      for (int hh = 0; hh < sh.h; ++hh)
        for (int ww = 0; ww < sh.w; ++ww)
          u.at(n, c, hh, ww) = xt.at(n, c, hh, ww) + shift;
    }
  return sign_binarize(u, S(0));
}

template <typename S>
TensorT<S> rprelu_forward(const TensorT<S>& x, const RPReLUParamsT<S>& p) {
  const Shape sh = x.shape();
  TensorT<S> out(sh);
  for (int n = 0; n < sh.n; ++n)
    for (int c = 0; c < sh.c; ++c)
      for (int h = 0; h < sh.h; ++h)
        for (int w = 0; w < sh.w; ++w) {
          const S u = x.at(n, c, h, w) - p.x_shift[c];
          out.at(n, c, h, w) =
              (u >= S(0) ? u : p.slope[c] * u) + p.y_shift[c];
        }
  return out;
}

template <typename S>
TensorT<S> insta_prelu_forward(const TensorT<S>& x, NormStatsT<S>& stats,
                               const std::vector<S>& alpha,
                               const std::vector<S>& beta,
                               const std::vector<S>& slope,
                               const std::vector<S>& y_shift,
                               SeBound bound = SeBound::kTanh3,
                               NormMode mode = NormMode::kEval) {
  TensorT<S> xt = normalize_no_affine(x, stats, mode);
  TensorT<S> m3 = instance_channel_moment3(xt);
  const Shape sh = xt.shape();
  TensorT<S> out(sh);
  for (int n = 0; n < sh.n; ++n)
    for (int c = 0; c < sh.c; ++c) {
      S b = beta[c] * m3.at(n, c, 0, 0);
      switch (bound) {
        case SeBound::kSigmoid: b = S(1) / (S(1) + std::exp(-b)); break;
        case SeBound::kTanh: b = std::tanh(b); break;
        case SeBound::kTanh3: b = S(3) * std::tanh(b / S(3)); break;
      }
      const S th = alpha[c] + b;
      for (int h = 0; h < sh.h; ++h)
        for (int w = 0; w < sh.w; ++w) {
          const S u = xt.at(n, c, h, w) - th;
          out.at(n, c, h, w) = (u >= S(0) ? u : slope[c] * u) + y_shift[c];
        }
    }
  return out;
}

template <typename S>
TensorT<S> batchnorm_forward(const TensorT<S>& x, const std::vector<S>& gamma,
                             const std::vector<S>& beta, NormStatsT<S>& stats,
                             NormMode mode) {
  TensorT<S> xt = normalize_no_affine(x, stats, mode);
  const Shape sh = xt.shape();
  for (int n = 0; n < sh.n; ++n)
    for (int c = 0; c < sh.c; ++c)
      for (int h = 0; h < sh.h; ++h)
        for (int w = 0; w < sh.w; ++w)
          xt.at(n, c, h, w) = xt.at(n, c, h, w) * gamma[c] + beta[c];
  return xt;
}

}  // namespace instabnn
