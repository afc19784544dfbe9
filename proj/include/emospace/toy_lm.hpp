#pragma once
//
// Small decoder-only transformer with residual-stream taps.
//
// Block l:  x_attn = x + Attn(LN1(x))      -> tap (l, "attn")
//           x_mlp  = x_attn + MLP(LN2(x_attn)) -> tap (l, "mlp")
// Interventions add a delta to the tap state at every position before the
// next computation reads it.  Forward and backward are written by hand and
// templated on the scalar so gradients can be checked in double.
//
// Checkpoint layout (toylm.bin, little-endian):
//   char[4] "ESLM", u32 version (=1), u32 tensor count, then for each tensor
//   in visit order: u32 rows, u32 cols, rows*cols f32 row-major.
// Visit order: tok_emb, pos_emb, anchor, per layer {ln1_g, ln1_b, w_qkv, b_qkv, w_o,
// b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2}, lnf_g, lnf_b, w_out, b_out.
// The anchor is a fixed offset; it never receives gradient.
//

#include "emospace/activation_store.hpp"
#include "emospace/core.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace emospace {

struct ToyLMConfig {
  int vocab_size = 0;
  int hidden_dim = 64;
  int n_layers = 4;
  int n_heads = 4;
  int mlp_mult = 4;
  int max_seq_len = 16;
  /// Norm of a fixed (untrained) offset added to every embedding row, spread
  /// over two coordinates.  Real LM residual streams carry a large shared
  /// component; a nonzero anchor reproduces that anisotropy.
  double anchor_norm = 0.0;
  /// Standard deviation of the token and position embedding init.
  double embed_scale = 0.02;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size <= 0 || hidden_dim <= 0 || n_layers <= 0 || n_heads <= 0 || mlp_mult <= 0 || max_seq_len <= 0)
      throw ConfigError("toy LM config: all sizes must be positive");
    if (hidden_dim % n_heads != 0) throw ConfigError("toy LM config: hidden_dim must be divisible by n_heads");
    if (!(anchor_norm >= 0)) throw ConfigError("toy LM config: anchor_norm must be >= 0");
    if (!(embed_scale > 0)) throw ConfigError("toy LM config: embed_scale must be > 0");
  }
  int head_dim() const { return hidden_dim / n_heads; }
};

inline nlohmann::json to_json(const ToyLMConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"hidden_dim", c.hidden_dim},   {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"mlp_mult", c.mlp_mult},       {"max_seq_len", c.max_seq_len},
          {"anchor_norm", c.anchor_norm}, {"embed_scale", c.embed_scale}, {"seed", c.seed}};
}

inline ToyLMConfig toylm_config_from_json(const nlohmann::json& j) {
  ToyLMConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.mlp_mult = j.at("mlp_mult").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.anchor_norm = j.value("anchor_norm", 0.0);
    c.embed_scale = j.value("embed_scale", 0.02);
    c.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("toylm.json: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename T>
struct BlockParams {
  Mat<T> ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o;
  Mat<T> ln2_g, ln2_b, w_1, b_1, w_2, b_2;

  template <typename F>
  void visit(F&& f) {
    f(ln1_g), f(ln1_b), f(w_qkv), f(b_qkv), f(w_o), f(b_o);
    f(ln2_g), f(ln2_b), f(w_1), f(b_1), f(w_2), f(b_2);
  }
};

template <typename T>
struct ToyLMParams {
  Mat<T> tok_emb, pos_emb, anchor;
  std::vector<BlockParams<T>> blocks;
  Mat<T> lnf_g, lnf_b, w_out, b_out;

  template <typename F>
  void visit(F&& f) {
    f(tok_emb);
    f(pos_emb);
    f(anchor);
    for (auto& b : blocks) b.visit(f);
    f(lnf_g);
    f(lnf_b);
    f(w_out);
    f(b_out);
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<ToyLMParams*>(this)->visit([&](Mat<T>& m) { f(static_cast<const Mat<T>&>(m)); });
  }

  /// Same shapes, all zeros.
  ToyLMParams zeros_like() const {
    ToyLMParams z = *this;
    z.visit([](Mat<T>& m) { m.setZero(); });
    return z;
  }

  template <typename U>
  ToyLMParams<U> cast() const {
    ToyLMParams<U> out;
    std::vector<const Mat<T>*> src;
    visit([&](const Mat<T>& m) { src.push_back(&m); });
    out.blocks.resize(blocks.size());
    std::size_t i = 0;
    out.visit([&](Mat<U>& m) { m = src[i++]->template cast<U>(); });
    return out;
  }

  Index parameter_count() const {
    Index n = 0;
    visit([&](const Mat<T>& m) { n += m.size(); });
    return n;
  }
};

template <typename T>
ToyLMParams<T> init_params(const ToyLMConfig& c) {
  c.validate();
  CounterRng rng(derive_seed(c.seed, 0x70794c4d));
  const Index d = c.hidden_dim, h = static_cast<Index>(c.hidden_dim) * c.mlp_mult;
  const double s = 0.02;
  const double s_res = 0.02 / std::sqrt(2.0 * c.n_layers);
  ToyLMParams<T> p;
  p.tok_emb = random_normal<T>(c.vocab_size, d, rng, c.embed_scale);
  p.pos_emb = random_normal<T>(c.max_seq_len, d, rng, c.embed_scale);
  {
    // Sparse, like the few massive coordinates of real residual streams.
    CounterRng arng(derive_seed(c.seed, 0x616e63));
    p.anchor = Mat<T>::Zero(1, d);
    const auto i = static_cast<Index>(arng.below(static_cast<std::uint64_t>(d)));
    auto j = static_cast<Index>(arng.below(static_cast<std::uint64_t>(d - 1)));
    if (j >= i) ++j;
    const T v = static_cast<T>(c.anchor_norm / std::sqrt(d > 1 ? 2.0 : 1.0));
    p.anchor(0, i) = v;
    if (d > 1) p.anchor(0, j) = -v;
  }
  p.blocks.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& b : p.blocks) {
    b.ln1_g = Mat<T>::Ones(1, d);
    b.ln1_b = Mat<T>::Zero(1, d);
    b.w_qkv = random_normal<T>(d, 3 * d, rng, s);
    b.b_qkv = Mat<T>::Zero(1, 3 * d);
    b.w_o = random_normal<T>(d, d, rng, s_res);
    b.b_o = Mat<T>::Zero(1, d);
    b.ln2_g = Mat<T>::Ones(1, d);
    b.ln2_b = Mat<T>::Zero(1, d);
    b.w_1 = random_normal<T>(d, h, rng, s);
    b.b_1 = Mat<T>::Zero(1, h);
    b.w_2 = random_normal<T>(h, d, rng, s_res);
    b.b_2 = Mat<T>::Zero(1, d);
  }
  p.lnf_g = Mat<T>::Ones(1, d);
  p.lnf_b = Mat<T>::Zero(1, d);
  p.w_out = random_normal<T>(d, c.vocab_size, rng, s);
  p.b_out = Mat<T>::Zero(1, c.vocab_size);
  if (c.anchor_norm > 0) {
    // Norm gains start at zero on the anchor coordinates so the constant
    // offset does not swamp the inputs of attention and the MLP.
    for (Index k = 0; k < d; ++k)
      if (p.anchor(0, k) != T(0)) {
        for (auto& b : p.blocks) b.ln1_g(0, k) = b.ln2_g(0, k) = T(0);
        p.lnf_g(0, k) = T(0);
      }
  }
  return p;
}

/// Float parameters plus config; the frozen flag blocks pretraining updates.
struct ToyLM {
  ToyLMConfig config;
  ToyLMParams<float> params;
  bool frozen = false;

  static ToyLM init(const ToyLMConfig& c) { return {c, init_params<float>(c), false}; }

  static std::vector<TapKey> taps_of(const ToyLMConfig& c) {
    std::vector<TapKey> out;
    for (int l = 0; l < c.n_layers; ++l) {
      out.push_back({l, "attn"});
      out.push_back({l, "mlp"});
    }
    return out;
  }
  std::vector<TapKey> taps() const { return taps_of(config); }
  TapKey final_tap() const { return {config.n_layers - 1, "mlp"}; }
};

/// Position of a tap in execution order.
inline int tap_order(const TapKey& k, int n_layers) {
  if (k.layer < 0 || k.layer >= n_layers || (k.sublayer != "attn" && k.sublayer != "mlp"))
    throw TapError("unknown tap " + k.str());
  return 2 * k.layer + (k.sublayer == "mlp" ? 1 : 0);
}

// ---------------------------------------------------------------------------
// interventions
// ---------------------------------------------------------------------------

/// Adds delta(h) to the residual state at a tap.  backward() receives the
/// gradient of the loss with respect to the tap output, accumulates the
/// gradients of its own parameters, and returns the extra gradient that
/// flows into h through delta.
template <typename T>
class Intervention {
 public:
  virtual ~Intervention() = default;
  virtual TapKey tap() const = 0;
  virtual Mat<T> delta(const Mat<T>& h) const = 0;
  virtual Mat<T> backward(const Mat<T>& h, const Mat<T>& grad_out) = 0;
};

/// Constant shift by a fixed D-vector at every position.
template <typename T>
class ConstantShift final : public Intervention<T> {
 public:
  ConstantShift(TapKey tap, Mat<T> v) : tap_(std::move(tap)), v_(std::move(v)) {}
  TapKey tap() const override { return tap_; }
  Mat<T> delta(const Mat<T>& h) const override { return v_.replicate(h.rows(), 1); }
  Mat<T> backward(const Mat<T>& h, const Mat<T>& grad_out) override {
    grad_ += grad_out.colwise().sum();
    return Mat<T>::Zero(h.rows(), h.cols());
  }
  const Mat<T>& grad() const { return grad_; }
  void zero_grad() { grad_ = Mat<T>::Zero(1, v_.cols()); }

 private:
  TapKey tap_;
  Mat<T> v_;
  Mat<T> grad_ = Mat<T>::Zero(1, v_.cols());
};

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
struct LnCache {
  Mat<T> xhat;
  Vec<T> rstd;
};

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, LnCache<T>* cache) {
  constexpr T eps = T(1e-5);
  const auto d = static_cast<T>(x.cols());
  const Vec<T> mean = x.rowwise().sum() / d;
  Mat<T> xc = x.colwise() - mean;
  const Vec<T> var = xc.array().square().rowwise().sum() / d;
  const Vec<T> rstd = (var.array() + eps).rsqrt();
  xc = xc.array().colwise() * rstd.array();
  Mat<T> y = (xc.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
  if (cache) {
    cache->xhat = std::move(xc);
    cache->rstd = rstd;
  }
  return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& g, const LnCache<T>& c, Mat<T>* dg, Mat<T>* db) {
  if (dg) *dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  if (db) *db += dy.colwise().sum();
  const Mat<T> dxhat = dy.array().rowwise() * g.row(0).array();
  const auto d = static_cast<T>(dy.cols());
  const Vec<T> m1 = dxhat.rowwise().sum() / d;
  const Vec<T> m2 = (dxhat.array() * c.xhat.array()).rowwise().sum() / d;
  Mat<T> dx = dxhat.colwise() - m1;
  dx -= (c.xhat.array().colwise() * m2.array()).matrix();
  return dx.array().colwise() * c.rstd.array();
}

template <typename T>
struct LayerCache {
  Mat<T> x_in;
  LnCache<T> ln1;
  Mat<T> a, qkv, ctx;
  std::vector<Mat<T>> probs;  // batch*heads matrices, each seq x seq
  Mat<T> x_attn;               // post-intervention
  LnCache<T> ln2;
  Mat<T> m, u, g;
  Mat<T> x_mlp;
};

}  // namespace detail

template <typename T>
struct ForwardTrace {
  Index batch = 0;
  Index seq_len = 0;
  std::map<TapKey, Mat<T>> states;  // post-intervention residual state, (batch*seq) x D
  Mat<T> final_normed;              // after the final layer norm
  Mat<T> logits;                    // (batch*seq) x V
  bool recorded = false;

  // Backward caches.
  std::vector<detail::LayerCache<T>> layers;
  detail::LnCache<T> lnf;
  std::vector<Mat<T>> intervention_inputs;  // input h seen by each intervention
  std::vector<Index> intervention_order;    // indices sorted by execution
  std::vector<std::vector<int>> tokens;

  Index answer_row(Index b) const { return b * seq_len + seq_len - 1; }

  Mat<T> answer_logits() const {
    Mat<T> out(batch, logits.cols());
    for (Index b = 0; b < batch; ++b) out.row(b) = logits.row(answer_row(b));
    return out;
  }

  Mat<T> answer_states(const TapKey& k) const {
    auto it = states.find(k);
    if (it == states.end()) throw TapError("trace has no tap " + k.str());
    Mat<T> out(batch, it->second.cols());
    for (Index b = 0; b < batch; ++b) out.row(b) = it->second.row(answer_row(b));
    return out;
  }
};

/// Runs a batch of equal-length sequences.  Interventions apply in tap
/// execution order; several at one tap compose in list order.
template <typename T>
ForwardTrace<T> forward_with_taps(const ToyLMConfig& cfg, const ToyLMParams<T>& p,
                                  const std::vector<std::vector<int>>& tokens,
                                  const std::vector<Intervention<T>*>& interventions = {}, bool record = true) {
  if (tokens.empty()) throw EmptyInputError("forward: empty batch");
  const auto seq = static_cast<Index>(tokens.front().size());
  if (seq == 0) throw EmptyInputError("forward: empty sequence");
  if (seq > cfg.max_seq_len)
    throw ShapeError("forward: sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  for (const auto& s : tokens) {
    if (static_cast<Index>(s.size()) != seq) throw ShapeError("forward: batch sequences must share one length");
    for (int t : s)
      if (t < 0 || t >= cfg.vocab_size) throw ShapeError("forward: token id " + std::to_string(t) + " out of range");
  }

  ForwardTrace<T> tr;
  tr.batch = static_cast<Index>(tokens.size());
  tr.seq_len = seq;
  tr.recorded = record;
  if (record) tr.tokens = tokens;

  std::vector<std::vector<Index>> at_tap(static_cast<std::size_t>(2 * cfg.n_layers));
  for (std::size_t i = 0; i < interventions.size(); ++i)
    at_tap[static_cast<std::size_t>(tap_order(interventions[i]->tap(), cfg.n_layers))].push_back(static_cast<Index>(i));
  tr.intervention_inputs.resize(interventions.size());
  for (const auto& v : at_tap) tr.intervention_order.insert(tr.intervention_order.end(), v.begin(), v.end());

  auto apply = [&](int order, Mat<T>& x) {
    for (Index i : at_tap[static_cast<std::size_t>(order)]) {
      if (record) tr.intervention_inputs[static_cast<std::size_t>(i)] = x;
      Mat<T> d = interventions[static_cast<std::size_t>(i)]->delta(x);
      if (d.rows() != x.rows() || d.cols() != x.cols()) throw ShapeError("intervention delta has wrong shape");
      x += d;
    }
  };

  const Index n = tr.batch * seq, d = cfg.hidden_dim, dh = cfg.head_dim();
  Mat<T> x(n, d);
  for (Index b = 0; b < tr.batch; ++b)
    for (Index t = 0; t < seq; ++t)
      x.row(b * seq + t) =
          p.tok_emb.row(tokens[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)]) + p.pos_emb.row(t) + p.anchor;

  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  if (record) tr.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& bp = p.blocks[static_cast<std::size_t>(l)];
    detail::LayerCache<T> local;
    auto& c = record ? tr.layers[static_cast<std::size_t>(l)] : local;
    if (record) c.x_in = x;

    c.a = detail::layer_norm(x, bp.ln1_g, bp.ln1_b, &c.ln1);
    c.qkv = (c.a * bp.w_qkv).rowwise() + bp.b_qkv.row(0);
    c.ctx.resize(n, d);
    c.probs.resize(static_cast<std::size_t>(tr.batch * cfg.n_heads));
    for (Index b = 0; b < tr.batch; ++b)
      for (Index h = 0; h < cfg.n_heads; ++h) {
        const auto q = c.qkv.block(b * seq, h * dh, seq, dh);
        const auto k = c.qkv.block(b * seq, d + h * dh, seq, dh);
        const auto v = c.qkv.block(b * seq, 2 * d + h * dh, seq, dh);
        Mat<T> s = (q * k.transpose()) * scale;
        for (Index i = 0; i < seq; ++i) {
          const T mx = s.row(i).head(i + 1).maxCoeff();
          T sum = 0;
          for (Index j = 0; j <= i; ++j) sum += (s(i, j) = std::exp(s(i, j) - mx));
          for (Index j = 0; j <= i; ++j) s(i, j) /= sum;
          for (Index j = i + 1; j < seq; ++j) s(i, j) = 0;
        }
        c.ctx.block(b * seq, h * dh, seq, dh) = s * v;
        c.probs[static_cast<std::size_t>(b * cfg.n_heads + h)] = std::move(s);
      }
    x += (c.ctx * bp.w_o).rowwise() + bp.b_o.row(0);
    apply(2 * l, x);
    tr.states[{l, "attn"}] = x;
    if (record) c.x_attn = x;

    c.m = detail::layer_norm(x, bp.ln2_g, bp.ln2_b, &c.ln2);
    c.u = (c.m * bp.w_1).rowwise() + bp.b_1.row(0);
    c.g = c.u.unaryExpr([](T v) { return gelu(v); });
    x += (c.g * bp.w_2).rowwise() + bp.b_2.row(0);
    apply(2 * l + 1, x);
    tr.states[{l, "mlp"}] = x;
    if (record) c.x_mlp = x;
  }
  tr.final_normed = detail::layer_norm(x, p.lnf_g, p.lnf_b, record ? &tr.lnf : nullptr);
  tr.logits = (tr.final_normed * p.w_out).rowwise() + p.b_out.row(0);
  return tr;
}

template <typename T>
ForwardTrace<T> forward_with_taps(const ToyLM& model, const std::vector<std::vector<int>>& tokens,
                                  const std::vector<Intervention<T>*>& interventions = {}, bool record = true) {
  if constexpr (std::is_same_v<T, float>) {
    return forward_with_taps<T>(model.config, model.params, tokens, interventions, record);
  } else {
    const auto p = model.params.cast<T>();
    return forward_with_taps<T>(model.config, p, tokens, interventions, record);
  }
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Gradient inputs for backward_through: d loss / d logits at every row
/// (rows not involved may be zero) and d loss / d tap state for any taps.
template <typename T>
struct BackwardSeeds {
  Mat<T> logits;                        // (batch*seq) x V, or empty
  std::map<TapKey, Mat<T>> states;      // (batch*seq) x D each
};

/// Propagates seeds back through the network.  Intervention parameter
/// gradients accumulate inside the interventions; model parameter gradients
/// accumulate into `model_grads` when given (otherwise the model is treated
/// as frozen and propagation stops below the lowest tap that matters).
template <typename T>
void backward_through(const ToyLMConfig& cfg, const ToyLMParams<T>& p, const ForwardTrace<T>& tr,
                      const BackwardSeeds<T>& seeds, const std::vector<Intervention<T>*>& interventions,
                      ToyLMParams<T>* model_grads = nullptr) {
  if (!tr.recorded) throw StateError("backward: trace was not recorded");
  if (tr.intervention_inputs.size() != interventions.size())
    throw StateError("backward: intervention list differs from the forward pass");
  const Index n = tr.batch * tr.seq_len, d = cfg.hidden_dim, dh = cfg.head_dim(), seq = tr.seq_len;

  int lowest = 2 * cfg.n_layers;  // lowest tap order that needs a gradient
  for (auto* iv : interventions) lowest = std::min(lowest, tap_order(iv->tap(), cfg.n_layers));
  for (const auto& [k, g] : seeds.states) {
    lowest = std::min(lowest, tap_order(k, cfg.n_layers));
    if (g.rows() != n || g.cols() != d) throw ShapeError("backward: state seed " + k.str() + " has wrong shape");
  }
  if (model_grads) lowest = -1;

  std::vector<std::vector<Index>> at_tap(static_cast<std::size_t>(2 * cfg.n_layers));
  for (std::size_t i = 0; i < interventions.size(); ++i)
    at_tap[static_cast<std::size_t>(tap_order(interventions[i]->tap(), cfg.n_layers))].push_back(static_cast<Index>(i));

  Mat<T> gx = Mat<T>::Zero(n, d);
  if (seeds.logits.size()) {
    if (seeds.logits.rows() != n || seeds.logits.cols() != cfg.vocab_size)
      throw ShapeError("backward: logit seed has wrong shape");
    if (model_grads) {
      model_grads->w_out.noalias() += tr.final_normed.transpose() * seeds.logits;
      model_grads->b_out += seeds.logits.colwise().sum();
    }
    const Mat<T> gfn = seeds.logits * p.w_out.transpose();
    gx = detail::layer_norm_backward(gfn, p.lnf_g, tr.lnf, model_grads ? &model_grads->lnf_g : nullptr,
                                     model_grads ? &model_grads->lnf_b : nullptr);
  }

  auto through_tap = [&](int order, const TapKey& key) {
    if (auto it = seeds.states.find(key); it != seeds.states.end()) gx += it->second;
    const auto& ids = at_tap[static_cast<std::size_t>(order)];
    for (auto r = ids.rbegin(); r != ids.rend(); ++r) {
      const auto i = static_cast<std::size_t>(*r);
      gx += interventions[i]->backward(tr.intervention_inputs[i], gx);
    }
  };

  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& bp = p.blocks[static_cast<std::size_t>(l)];
    const auto& c = tr.layers[static_cast<std::size_t>(l)];
    BlockParams<T>* gb = model_grads ? &model_grads->blocks[static_cast<std::size_t>(l)] : nullptr;

    through_tap(2 * l + 1, {l, "mlp"});
    if (2 * l + 1 <= lowest) return;
    {
      // x_mlp = x_attn + gelu(LN2(x_attn) W1 + b1) W2 + b2
      if (gb) {
        gb->w_2.noalias() += c.g.transpose() * gx;
        gb->b_2 += gx.colwise().sum();
      }
      Mat<T> gu = (gx * bp.w_2.transpose()).array() * c.u.unaryExpr([](T v) { return gelu_grad(v); }).array();
      if (gb) {
        gb->w_1.noalias() += c.m.transpose() * gu;
        gb->b_1 += gu.colwise().sum();
      }
      const Mat<T> gm = gu * bp.w_1.transpose();
      gx += detail::layer_norm_backward(gm, bp.ln2_g, c.ln2, gb ? &gb->ln2_g : nullptr, gb ? &gb->ln2_b : nullptr);
    }

    through_tap(2 * l, {l, "attn"});
    if (2 * l <= lowest) return;
    {
      // x_attn = x_in + Attn(LN1(x_in))
      if (gb) {
        gb->w_o.noalias() += c.ctx.transpose() * gx;
        gb->b_o += gx.colwise().sum();
      }
      const Mat<T> gctx = gx * bp.w_o.transpose();
      Mat<T> gqkv = Mat<T>::Zero(n, 3 * d);
      for (Index b = 0; b < tr.batch; ++b)
        for (Index h = 0; h < cfg.n_heads; ++h) {
          const auto& pr = c.probs[static_cast<std::size_t>(b * cfg.n_heads + h)];
          const auto q = c.qkv.block(b * seq, h * dh, seq, dh);
          const auto k = c.qkv.block(b * seq, d + h * dh, seq, dh);
          const auto v = c.qkv.block(b * seq, 2 * d + h * dh, seq, dh);
          const auto go = gctx.block(b * seq, h * dh, seq, dh);
          gqkv.block(b * seq, 2 * d + h * dh, seq, dh) = pr.transpose() * go;
          const Mat<T> gp = go * v.transpose();
          const Vec<T> dot = (gp.array() * pr.array()).rowwise().sum();
          const Mat<T> gs = (pr.array() * (gp.colwise() - dot).array()) * scale;
          gqkv.block(b * seq, h * dh, seq, dh) = gs * k;
          gqkv.block(b * seq, d + h * dh, seq, dh) = gs.transpose() * q;
        }
      if (gb) {
        gb->w_qkv.noalias() += c.a.transpose() * gqkv;
        gb->b_qkv += gqkv.colwise().sum();
      }
      const Mat<T> ga = gqkv * bp.w_qkv.transpose();
      gx += detail::layer_norm_backward(ga, bp.ln1_g, c.ln1, gb ? &gb->ln1_g : nullptr, gb ? &gb->ln1_b : nullptr);
    }
  }
  if (model_grads) {
    for (Index b = 0; b < tr.batch; ++b)
      for (Index t = 0; t < seq; ++t) {
        const auto r = b * seq + t;
        model_grads->tok_emb.row(tr.tokens[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)]) += gx.row(r);
        model_grads->pos_emb.row(t) += gx.row(r);
      }
  }
}

// ---------------------------------------------------------------------------
// answer-position helpers
// ---------------------------------------------------------------------------

template <typename T>
Vec<T> log_softmax_row(const Eigen::Ref<const RowVec<T>>& z) {
  const T mx = z.maxCoeff();
  const T lse = mx + std::log((z.array() - mx).exp().sum());
  return (z.array() - lse).transpose();
}

/// Sequences grouped by length, preserving order within a group.
template <typename Seq>
std::map<std::size_t, std::vector<std::size_t>> group_by_length(const std::vector<Seq>& seqs) {
  std::map<std::size_t, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < seqs.size(); ++i) out[seqs[i].size()].push_back(i);
  return out;
}

/// Full-vocabulary argmax at the answer position (lowest index wins ties).
inline std::vector<int> predict_answers(const ToyLM& model, const std::vector<std::vector<int>>& seqs,
                                        std::size_t batch = 256) {
  std::vector<int> out(seqs.size(), -1);
  for (const auto& [len, idx] : group_by_length(seqs)) {
    for (std::size_t s = 0; s < idx.size(); s += batch) {
      std::vector<std::vector<int>> b;
      for (std::size_t i = s; i < std::min(idx.size(), s + batch); ++i) b.push_back(seqs[idx[i]]);
      const auto tr = forward_with_taps<float>(model, b, {}, false);
      const auto lg = tr.answer_logits();
      for (Index r = 0; r < lg.rows(); ++r) {
        Index arg;
        lg.row(r).maxCoeff(&arg);
        out[idx[s + static_cast<std::size_t>(r)]] = static_cast<int>(arg);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

struct PretrainConfig {
  int steps = 600;
  double lr = 3e-3;
  int batch_size = 32;
  int warmup_steps = 20;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  ToyLM model;
  std::vector<double> loss_history;  // mean answer-position CE per step
  double initial_loss = 0;
};

/// Minimal Adam state over a parameter tree.
template <typename T>
struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  ToyLMParams<T> m, v;
  long step = 0;

  explicit Adam(const ToyLMParams<T>& like) : m(like.zeros_like()), v(like.zeros_like()) {}

  void update(ToyLMParams<T>& p, const ToyLMParams<T>& g, double lr) {
    ++step;
    const double c1 = 1 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1 - std::pow(beta2, static_cast<double>(step));
    std::vector<Mat<T>*> ps, ms, vs;
    std::vector<const Mat<T>*> gs;
    p.visit([&](Mat<T>& x) { ps.push_back(&x); });
    m.visit([&](Mat<T>& x) { ms.push_back(&x); });
    v.visit([&](Mat<T>& x) { vs.push_back(&x); });
    g.visit([&](const Mat<T>& x) { gs.push_back(&x); });
    for (std::size_t i = 0; i < ps.size(); ++i) {
      *ms[i] = T(beta1) * *ms[i] + T(1 - beta1) * *gs[i];
      *vs[i] = T(beta2) * *vs[i] + T(1 - beta2) * gs[i]->cwiseAbs2();
      ps[i]->array() -= T(lr) * (ms[i]->array() / T(c1)) / ((vs[i]->array() / T(c2)).sqrt() + T(eps));
    }
  }
};

/// Answer target as a distribution over tokens (weights sum to 1).
using SoftTarget = std::vector<std::pair<int, double>>;

/// Mean answer-position cross-entropy −Σ q log p of a batch and its logit gradient.
template <typename T>
double answer_ce(const ForwardTrace<T>& tr, const std::vector<SoftTarget>& targets, Mat<T>* grad) {
  double loss = 0;
  if (grad) *grad = Mat<T>::Zero(tr.logits.rows(), tr.logits.cols());
  const auto inv = T(1) / static_cast<T>(tr.batch);
  for (Index b = 0; b < tr.batch; ++b) {
    const auto row = tr.answer_row(b);
    const Vec<T> lp = log_softmax_row<T>(tr.logits.row(row));
    if (grad) grad->row(row) = lp.array().exp().transpose() * inv;
    for (const auto& [y, q] : targets[static_cast<std::size_t>(b)]) {
      loss -= q * static_cast<double>(lp(y));
      if (grad) (*grad)(row, y) -= T(q) * inv;
    }
  }
  return loss / static_cast<double>(tr.batch);
}

template <typename T>
double answer_ce(const ForwardTrace<T>& tr, const std::vector<int>& targets, Mat<T>* grad) {
  std::vector<SoftTarget> soft;
  for (int y : targets) soft.push_back({{y, 1.0}});
  return answer_ce(tr, soft, grad);
}

/// Trains all parameters on answer-position next-token prediction with Adam
/// (linear warmup, cosine decay).  `steps` = 0 returns the initialization.
inline PretrainResult init_and_pretrain(const ToyLMConfig& cfg, const std::vector<std::vector<int>>& seqs,
                                        const std::vector<SoftTarget>& targets, const PretrainConfig& pc) {
  cfg.validate();
  if (seqs.size() != targets.size()) throw ShapeError("pretrain: sequence and target counts differ");
  if (seqs.empty()) throw EmptyInputError("pretrain: no training sequences");
  if (pc.steps < 0 || pc.batch_size <= 0 || !(pc.lr > 0)) throw ConfigError("pretrain: invalid steps, batch or lr");
  for (const auto& t : targets)
    for (const auto& [y, q] : t)
      if (y < 0 || y >= cfg.vocab_size) throw ConfigError("pretrain: target token outside the vocabulary");

  PretrainResult res{ToyLM::init(cfg), {}, 0};
  auto& p = res.model.params;
  Adam<float> opt(p);
  CounterRng rng(derive_seed(pc.seed, 0x7072));
  const auto groups = group_by_length(seqs);
  std::vector<std::size_t> lens;
  for (const auto& [len, idx] : groups) lens.push_back(len);

  for (int step = 0; step < pc.steps; ++step) {
    const auto& idx = groups.at(lens[rng.below(lens.size())]);
    std::vector<std::vector<int>> b;
    std::vector<SoftTarget> y;
    for (int i = 0; i < pc.batch_size; ++i) {
      const auto k = idx[rng.below(idx.size())];
      b.push_back(seqs[k]);
      y.push_back(targets[k]);
    }
    const auto tr = forward_with_taps<float>(cfg, p, b, {}, true);
    BackwardSeeds<float> seeds;
    const double loss = answer_ce(tr, y, &seeds.logits);
    if (!std::isfinite(loss)) throw TrainingError("pretrain: loss is not finite at step " + std::to_string(step));
    if (step == 0) res.initial_loss = loss;
    res.loss_history.push_back(loss);
    auto grads = p.zeros_like();
    backward_through<float>(cfg, p, tr, seeds, {}, &grads);
    double lr = pc.lr;
    if (step < pc.warmup_steps) {
      lr *= static_cast<double>(step + 1) / pc.warmup_steps;
    } else {
      const double prog = static_cast<double>(step - pc.warmup_steps) / std::max(1, pc.steps - pc.warmup_steps);
      lr *= 0.5 * (1 + std::cos(3.14159265358979323846 * prog));
    }
    grads.anchor.setZero();
    opt.update(p, grads, lr);
  }
  return res;
}

inline PretrainResult init_and_pretrain(const ToyLMConfig& cfg, const std::vector<std::vector<int>>& seqs,
                                        const std::vector<int>& targets, const PretrainConfig& pc) {
  std::vector<SoftTarget> soft;
  for (int y : targets) soft.push_back({{y, 1.0}});
  return init_and_pretrain(cfg, seqs, soft, pc);
}

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------

inline void save_toylm(const ToyLM& m, const std::filesystem::path& bin, const std::filesystem::path& json_path) {
  std::ofstream out(bin, std::ios::binary);
  if (!out) throw NotFoundError("cannot write " + bin.string());
  auto u32 = [&](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  std::uint32_t count = 0;
  m.params.visit([&](const Mat<float>&) { ++count; });
  out.write("ESLM", 4);
  u32(1);
  u32(count);
  m.params.visit([&](const Mat<float>& t) {
    u32(static_cast<std::uint32_t>(t.rows()));
    u32(static_cast<std::uint32_t>(t.cols()));
    for (Index i = 0; i < t.size(); ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, t.data() + i, 4);
      u32(bits);
    }
  });
  std::ofstream js(json_path);
  js << to_json(m.config).dump(2) << "\n";
}

inline ToyLM load_toylm(const std::filesystem::path& bin, const std::filesystem::path& json_path) {
  std::ifstream js(json_path);
  if (!js) throw NotFoundError("missing " + json_path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(json_path.string() + ": " + e.what());
  }
  ToyLM m = ToyLM::init(toylm_config_from_json(j));
  std::ifstream in(bin, std::ios::binary);
  if (!in) throw NotFoundError("missing " + bin.string());
  auto u32 = [&] {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw CorruptionError(bin.string() + ": truncated");
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
  };
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "ESLM", 4) != 0) throw FormatError(bin.string() + ": bad magic");
  if (u32() != 1) throw FormatError(bin.string() + ": unsupported version");
  std::uint32_t expected = 0;
  m.params.visit([&](const Mat<float>&) { ++expected; });
  if (u32() != expected) throw IntegrityError(bin.string() + ": tensor count does not match config");
  m.params.visit([&](Mat<float>& t) {
    const auto r = u32(), c = u32();
    if (r != t.rows() || c != t.cols()) throw IntegrityError(bin.string() + ": tensor shape does not match config");
    for (Index i = 0; i < t.size(); ++i) {
      const auto bits = u32();
      std::memcpy(t.data() + i, &bits, 4);
    }
  });
  if (in.peek() != std::char_traits<char>::eof()) throw CorruptionError(bin.string() + ": trailing bytes");
  if (!m.params.tok_emb.allFinite()) throw DataError(bin.string() + ": non-finite parameters");
  m.frozen = true;
  return m;
}

}  // namespace emospace
