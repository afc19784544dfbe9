#pragma once
//
// Learned latent-space steering.  For one target emotion, a small MLP in
// the coordinates of each selected tap's emotional subspace computes a shift
// that is mapped back to hidden space and added to the residual stream.
//
//   z  = (h − μ) V_Rᵀ
//   s  = GELU(z W1 + b1) W2 + b2
//   Δh = s V_R
//
// Only the shift parameters are trained; the toy LM stays frozen.
//

#include "emospace/activation_store.hpp"
#include "emospace/aura.hpp"
#include "emospace/core.hpp"
#include "emospace/csv.hpp"
#include "emospace/subspace.hpp"
#include "emospace/synthetic.hpp"
#include "emospace/toy_lm.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace emospace {

struct AblationFlags {
  bool no_gelu = false;
  bool no_bias = false;
  bool no_synonyms = false;
  bool no_semantic_loss = false;
  bool no_cosine_term = false;
  bool no_delta_norm_term = false;
  bool no_margin_loss = false;
  bool target_all_layers = false;

  /// Accepts the flag names used on the command line, e.g. "no_gelu" or "target_layers=all".
  void set(const std::string& name) {
    if (name == "no_gelu") no_gelu = true;
    else if (name == "no_bias") no_bias = true;
    else if (name == "no_synonyms") no_synonyms = true;
    else if (name == "no_semantic_loss") no_semantic_loss = true;
    else if (name == "no_cosine_term") no_cosine_term = true;
    else if (name == "no_delta_norm_term") no_delta_norm_term = true;
    else if (name == "no_margin_loss") no_margin_loss = true;
    else if (name == "target_layers=all" || name == "target_all_layers") target_all_layers = true;
    else if (name == "target_layers=selected") target_all_layers = false;
    else throw ConfigError("unknown ablation flag '" + name + "'");
  }
};

struct SteeringConfig {
  Index rank = 40;
  Index hidden_width = 0;  // 0 means "same as rank"
  double margin_m1 = 0.5;
  double margin_m2 = 10.0;
  double gamma = 1.0;
  double lambda_margin = 1.0;
  double ce_emotion_weight = 20.0;
  double lr = 1e-3;
  double weight_decay = 1e-2;
  int warmup_steps = 50;
  int steps = 300;
  int batch_size = 32;
  double selection_tau = 0.02;
  double selection_alpha = 1.0;
  std::uint64_t seed = 0;
  AblationFlags ablation;

  Index width() const { return hidden_width > 0 ? hidden_width : rank; }

  void validate() const {
    if (rank < 1) throw ConfigError("steering: rank must be >= 1");
    if (!(margin_m1 > 0) || !(margin_m2 > 0)) throw ConfigError("steering: margins must be > 0");
    if (!(lr > 0)) throw ConfigError("steering: lr must be > 0");
    if (weight_decay < 0 || gamma < 0 || lambda_margin < 0 || ce_emotion_weight < 0)
      throw ConfigError("steering: weights must be >= 0");
    if (steps < 0 || warmup_steps < 0 || batch_size < 1) throw ConfigError("steering: invalid step counts");
  }

  /// "default" is the standard recipe; "ablation-best" the best values from the ablation grid.
  static SteeringConfig preset(const std::string& name) {
    SteeringConfig c;
    if (name == "default") return c;
    if (name == "ablation-best") {
      c.rank = 20;
      c.margin_m1 = 0.75;
      c.margin_m2 = 20;
      c.ce_emotion_weight = 25;
      return c;
    }
    throw ConfigError("unknown steering preset '" + name + "'");
  }
};

inline nlohmann::json to_json(const SteeringConfig& c) {
  const auto& a = c.ablation;
  return {{"rank", c.rank},
          {"hidden_width", c.width()},
          {"margin_m1", c.margin_m1},
          {"margin_m2", c.margin_m2},
          {"gamma", c.gamma},
          {"lambda_margin", c.lambda_margin},
          {"ce_emotion_weight", c.ce_emotion_weight},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"warmup_steps", c.warmup_steps},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"selection_tau", c.selection_tau},
          {"selection_alpha", c.selection_alpha},
          {"seed", c.seed},
          {"ablation",
           {{"no_gelu", a.no_gelu},
            {"no_bias", a.no_bias},
            {"no_synonyms", a.no_synonyms},
            {"no_semantic_loss", a.no_semantic_loss},
            {"no_cosine_term", a.no_cosine_term},
            {"no_delta_norm_term", a.no_delta_norm_term},
            {"no_margin_loss", a.no_margin_loss},
            {"target_all_layers", a.target_all_layers}}}};
}

inline SteeringConfig steering_config_from_json(const nlohmann::json& j) {
  SteeringConfig c;
  try {
    c.rank = j.at("rank").get<Index>();
    c.hidden_width = j.value("hidden_width", Index{0});
    c.margin_m1 = j.at("margin_m1").get<double>();
    c.margin_m2 = j.at("margin_m2").get<double>();
    c.gamma = j.value("gamma", 1.0);
    c.lambda_margin = j.value("lambda_margin", 1.0);
    c.ce_emotion_weight = j.at("ce_emotion_weight").get<double>();
    c.lr = j.value("lr", 1e-3);
    c.weight_decay = j.value("weight_decay", 1e-2);
    c.warmup_steps = j.value("warmup_steps", 50);
    c.steps = j.value("steps", 300);
    c.batch_size = j.value("batch_size", 32);
    c.selection_tau = j.value("selection_tau", 0.02);
    c.selection_alpha = j.value("selection_alpha", 1.0);
    c.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      for (const auto& name : {"no_gelu", "no_bias", "no_synonyms", "no_semantic_loss", "no_cosine_term",
                               "no_delta_norm_term", "no_margin_loss", "target_all_layers"})
        if (a.value(name, false)) c.ablation.set(name);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("steering config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// module
// ---------------------------------------------------------------------------

/// Shift parameters for one tap.  `basis` holds V_R as R x D orthonormal rows.
struct TapShift {
  TapKey tap;
  RowVectorD mean;  // μ, 1 x D
  MatrixD basis;    // R x D
  MatrixD w1;       // R x H
  MatrixD b1;       // 1 x H
  MatrixD w2;       // H x R
  MatrixD b2;       // 1 x R
};

struct SteeringModule {
  std::string target_emotion;
  std::vector<TapShift> taps;
  bool use_gelu = true;
  bool use_bias = true;

  const TapShift& at(const TapKey& k) const {
    for (const auto& t : taps)
      if (t.tap == k) return t;
    throw TapError("steering module has no tap " + k.str());
  }

  /// Visits every trainable tensor in a fixed order.
  template <typename F>
  void visit_trainable(F&& f) {
    for (auto& t : taps) {
      f(t.w1);
      f(t.b1);
      f(t.w2);
      f(t.b2);
    }
  }
};

/// W1 gets a small random init and W2 starts at zero, so a fresh module is
/// an exact no-op.
inline SteeringModule init_module(const std::string& emotion, const std::map<TapKey, EmotionSubspace>& subspaces,
                                  const std::vector<TapKey>& taps, const SteeringConfig& cfg) {
  cfg.validate();
  if (taps.empty()) throw ConfigError("steering module needs at least one tap");
  SteeringModule m;
  m.target_emotion = emotion;
  m.use_gelu = !cfg.ablation.no_gelu;
  m.use_bias = !cfg.ablation.no_bias;
  CounterRng rng(derive_seed(cfg.seed, 0x5354));
  const Index r = cfg.rank, h = cfg.width();
  for (const auto& k : taps) {
    auto it = subspaces.find(k);
    if (it == subspaces.end()) throw TapError("no subspace for tap " + k.str());
    if (r > it->second.rank())
      throw RankError("steering rank " + std::to_string(r) + " exceeds subspace rank " +
                      std::to_string(it->second.rank()) + " at " + k.str());
    TapShift t;
    t.tap = k;
    t.mean = it->second.mean.transpose();
    t.basis = it->second.components.topRows(r);
    t.w1 = random_normal<double>(r, h, rng, 1.0 / std::sqrt(static_cast<double>(r))).cast<double>();
    t.b1 = MatrixD::Zero(1, h);
    t.w2 = MatrixD::Zero(h, r);
    t.b2 = MatrixD::Zero(1, r);
    m.taps.push_back(std::move(t));
  }
  return m;
}

/// Intervention view of one tap's shift, in scalar type T, with gradient
/// accumulators for the four trainable tensors.
template <typename T>
class ShiftIntervention final : public Intervention<T> {
 public:
  ShiftIntervention(const TapShift& s, bool gelu, bool bias)
      : tap_(s.tap),
        mean_(s.mean.cast<T>()),
        basis_(s.basis.cast<T>()),
        w1_(s.w1.cast<T>()),
        b1_(s.b1.cast<T>()),
        w2_(s.w2.cast<T>()),
        b2_(s.b2.cast<T>()),
        gelu_(gelu),
        bias_(bias) {
    zero_grad();
  }

  TapKey tap() const override { return tap_; }

  Mat<T> delta(const Mat<T>& h) const override {
    if (h.cols() != basis_.cols()) throw ShapeError("shift: hidden width does not match subspace dim");
    const Mat<T> z = (h.rowwise() - mean_.row(0)) * basis_.transpose();
    Mat<T> a = z * w1_;
    if (bias_) a.rowwise() += b1_.row(0);
    const Mat<T> g = gelu_ ? Mat<T>(a.unaryExpr([](T v) { return gelu(v); })) : a;
    Mat<T> s = g * w2_;
    if (bias_) s.rowwise() += b2_.row(0);
    return s * basis_;
  }

  Mat<T> backward(const Mat<T>& h, const Mat<T>& grad_out) override {
    const Mat<T> z = (h.rowwise() - mean_.row(0)) * basis_.transpose();
    Mat<T> a = z * w1_;
    if (bias_) a.rowwise() += b1_.row(0);
    const Mat<T> g = gelu_ ? Mat<T>(a.unaryExpr([](T v) { return gelu(v); })) : a;
    const Mat<T> gs = grad_out * basis_.transpose();
    gw2_.noalias() += g.transpose() * gs;
    if (bias_) gb2_ += gs.colwise().sum();
    Mat<T> ga = gs * w2_.transpose();
    if (gelu_) ga = ga.array() * a.unaryExpr([](T v) { return gelu_grad(v); }).array();
    gw1_.noalias() += z.transpose() * ga;
    if (bias_) gb1_ += ga.colwise().sum();
    return (ga * w1_.transpose()) * basis_;
  }

  void zero_grad() {
    gw1_ = Mat<T>::Zero(w1_.rows(), w1_.cols());
    gb1_ = Mat<T>::Zero(1, b1_.cols());
    gw2_ = Mat<T>::Zero(w2_.rows(), w2_.cols());
    gb2_ = Mat<T>::Zero(1, b2_.cols());
  }

  /// Gradients in visit_trainable order.
  std::vector<MatrixD> grads() const {
    return {gw1_.template cast<double>(), gb1_.template cast<double>(), gw2_.template cast<double>(),
            gb2_.template cast<double>()};
  }

 private:
  TapKey tap_;
  Mat<T> mean_, basis_, w1_, b1_, w2_, b2_;
  Mat<T> gw1_, gb1_, gw2_, gb2_;
  bool gelu_, bias_;
};

/// Δh for a batch of hidden states (rows) at one tap.
inline MatrixD shift(const SteeringModule& m, const TapKey& tap, const MatrixD& h) {
  ShiftIntervention<double> iv(m.at(tap), m.use_gelu, m.use_bias);
  const Mat<double> out = iv.delta(Mat<double>(h));
  return MatrixD(out);
}

template <typename T>
struct ShiftSet {
  std::vector<std::unique_ptr<ShiftIntervention<T>>> owned;
  std::vector<Intervention<T>*> list;

  explicit ShiftSet(const SteeringModule& m) {
    for (const auto& t : m.taps) {
      owned.push_back(std::make_unique<ShiftIntervention<T>>(t, m.use_gelu, m.use_bias));
      list.push_back(owned.back().get());
    }
  }
};

// ---------------------------------------------------------------------------
// tap selection
// ---------------------------------------------------------------------------

struct TapSelection {
  TapKey tap;
  double auroc_before = 0;
  double auroc_after = 0;
  bool selected = false;
};

/// Scores records by projection onto the unit direction from the mean of all
/// emotion centroids to the target centroid.  A tap is selected when shifting
/// the target's records by alpha along that direction raises one-vs-all
/// AUROC by at least tau.
inline std::vector<TapSelection> select_taps(const std::map<TapKey, MatrixD>& states,
                                             const std::vector<std::string>& labels, const std::string& emotion,
                                             double alpha, double tau) {
  if (std::find(labels.begin(), labels.end(), emotion) == labels.end())
    throw LabelError("select_taps: emotion '" + emotion + "' not present");
  Mask pos(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) pos[i] = labels[i] == emotion;
  std::vector<TapSelection> out;
  for (const auto& [key, x] : states) {
    if (x.rows() != static_cast<Index>(labels.size())) throw ShapeError("select_taps: label count mismatch at " + key.str());
    const auto c = centroids(x, labels);
    const RowVectorD dir = c.full.row(c.index_of(emotion)) - c.full.colwise().mean();
    const double norm = dir.norm();
    if (!(norm > 0)) throw GeometryError("select_taps: target centroid equals the centroid mean at " + key.str());
    const VectorD u = dir.transpose() / norm;
    VectorD score = x * u;
    TapSelection s;
    s.tap = key;
    s.auroc_before = auroc(std::span<const double>(score.data(), static_cast<std::size_t>(score.size())), pos);
    for (Index i = 0; i < score.size(); ++i)
      if (pos[static_cast<std::size_t>(i)]) score(i) += alpha;
    s.auroc_after = auroc(std::span<const double>(score.data(), static_cast<std::size_t>(score.size())), pos);
    s.selected = s.auroc_after - s.auroc_before >= tau;
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

struct SteeringTokens {
  int target = -1;
  std::vector<int> synonyms;
  std::vector<int> competitors;  // other labels, plus their synonyms unless disabled
  std::vector<int> labels;       // every emotion's label token, in emotion order
};

inline SteeringTokens steering_tokens(const ToyCorpus& c, const std::string& emotion, bool use_synonyms) {
  c.emotion_index(emotion);
  SteeringTokens t;
  t.target = c.label_token.at(emotion);
  if (use_synonyms) {
    t.synonyms = c.synonyms.at(emotion);
    if (t.synonyms.empty()) throw ConfigError("steering: emotion '" + emotion + "' has no synonyms");
  }
  for (const auto& e : c.emotions) {
    t.labels.push_back(c.label_token.at(e));
    if (e == emotion) continue;
    t.competitors.push_back(c.label_token.at(e));
    if (use_synonyms)
      for (int s : c.synonyms.at(e)) t.competitors.push_back(s);
  }
  return t;
}

struct LossParts {
  double ce = 0;
  double margin = 0;
  double sem = 0;
  double total = 0;
};

/// max(0, m1 − (lp_e − lp_s)) + max(0, m2 − (lp_s − lp_c)).
/// Without synonyms only the second hinge remains, with lp_e in place of lp_s.
inline double margin_loss(double lp_e, std::optional<double> lp_s, double lp_c, double m1, double m2) {
  if (!lp_s) return std::max(0.0, m2 - (lp_e - lp_c));
  return std::max(0.0, m1 - (lp_e - *lp_s)) + std::max(0.0, m2 - (*lp_s - lp_c));
}

/// (1 − cos(a, b)) + γ‖a − b‖ / (‖a‖ + ‖b‖); either term may be switched off.
template <typename T>
double semantic_loss(const Eigen::Ref<const RowVec<T>>& a, const Eigen::Ref<const RowVec<T>>& b, double gamma,
                     bool cosine = true, bool delta_norm = true, RowVec<T>* grad_b = nullptr) {
  const double na = static_cast<double>(a.norm()), nb = static_cast<double>(b.norm());
  if (na == 0 || nb == 0) throw UndefinedError("semantic loss: zero-norm state");
  double loss = 0;
  if (grad_b) grad_b->setZero(b.size());
  if (cosine) {
    const double cs = static_cast<double>(a.dot(b)) / (na * nb);
    loss += 1 - cs;
    if (grad_b) *grad_b -= (a / T(na * nb) - b * T(cs / (nb * nb)));
  }
  if (delta_norm) {
    const RowVec<T> diff = b - a;
    const double nd = static_cast<double>(diff.norm()), s = na + nb;
    loss += gamma * nd / s;
    if (grad_b) {
      if (nd > 0) *grad_b += diff * T(gamma / (nd * s));
      *grad_b -= b * T(gamma * nd / (s * s * nb));
    }
  }
  return loss;
}

/// Per-example steering loss on answer logits `z` and final-layer states.
/// Fills gradients with respect to z and to the shifted state when asked.
template <typename T>
LossParts steering_loss(const Eigen::Ref<const RowVec<T>>& z, const Eigen::Ref<const RowVec<T>>& h_base,
                        const Eigen::Ref<const RowVec<T>>& h_shift, const SteeringTokens& tok,
                        const SteeringConfig& cfg, RowVec<T>* g_logits = nullptr, RowVec<T>* g_state = nullptr) {
  const auto& ab = cfg.ablation;
  const Vec<T> lp = log_softmax_row<T>(z);
  const Vec<T> p = lp.array().exp();
  if (g_logits) g_logits->setZero(z.size());
  auto add_dlp = [&](int k, double coef) {  // coef · ∂ lp_k / ∂ z
    if (!g_logits) return;
    *g_logits -= T(coef) * p.transpose();
    (*g_logits)(k) += T(coef);
  };

  LossParts parts;
  parts.ce = -cfg.ce_emotion_weight * static_cast<double>(lp(tok.target));
  add_dlp(tok.target, -cfg.ce_emotion_weight);

  if (!ab.no_margin_loss) {
    const double lp_e = static_cast<double>(lp(tok.target));
    int c_arg = tok.competitors.front();
    for (int k : tok.competitors)
      if (lp(k) > lp(c_arg)) c_arg = k;
    const double lp_c = static_cast<double>(lp(c_arg));
    const double lam = cfg.lambda_margin;
    if (tok.synonyms.empty()) {
      const double h2 = cfg.margin_m2 - (lp_e - lp_c);
      if (h2 > 0) {
        parts.margin = h2;
        add_dlp(tok.target, -lam);
        add_dlp(c_arg, lam);
      }
    } else {
      int s_arg = tok.synonyms.front();
      for (int k : tok.synonyms)
        if (lp(k) < lp(s_arg)) s_arg = k;
      const double lp_s = static_cast<double>(lp(s_arg));
      const double h1 = cfg.margin_m1 - (lp_e - lp_s);
      const double h2 = cfg.margin_m2 - (lp_s - lp_c);
      if (h1 > 0) {
        parts.margin += h1;
        add_dlp(tok.target, -lam);
        add_dlp(s_arg, lam);
      }
      if (h2 > 0) {
        parts.margin += h2;
        add_dlp(s_arg, -lam);
        add_dlp(c_arg, lam);
      }
    }
  }

  if (!ab.no_semantic_loss && (!ab.no_cosine_term || !ab.no_delta_norm_term)) {
    parts.sem = semantic_loss<T>(h_base, h_shift, cfg.gamma, !ab.no_cosine_term, !ab.no_delta_norm_term, g_state);
  } else if (g_state) {
    g_state->setZero(h_shift.size());
  }
  parts.total = parts.ce + cfg.lambda_margin * parts.margin + parts.sem;
  return parts;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

/// Linear warmup to lr_max over `warmup` updates, then cosine decay reaching
/// zero at update `total`.  Updates are numbered from 1.
inline double schedule_lr(int step, int warmup, int total, double lr_max) {
  if (warmup > 0 && step <= warmup) return lr_max * static_cast<double>(step) / warmup;
  if (total <= warmup) return lr_max;
  const double prog = std::clamp(static_cast<double>(step - warmup) / (total - warmup), 0.0, 1.0);
  return lr_max * 0.5 * (1 + std::cos(3.14159265358979323846 * prog));
}

struct StepLog {
  int step = 0;
  double lr = 0;
  LossParts loss;
};

/// Sequences the steering loss is computed on, with cached base states.
struct SteeringData {
  std::vector<std::vector<int>> sequences;
  MatrixD base_final;  // answer-position final-layer state without intervention, one row per sequence
};

inline SteeringData prepare_steering_data(const ToyLM& model, std::vector<std::vector<int>> seqs) {
  SteeringData d;
  d.base_final.resize(static_cast<Index>(seqs.size()), model.config.hidden_dim);
  for (const auto& [len, idx] : group_by_length(seqs))
    for (std::size_t s = 0; s < idx.size(); s += 256) {
      std::vector<std::vector<int>> b;
      for (std::size_t i = s; i < std::min(idx.size(), s + 256); ++i) b.push_back(seqs[idx[i]]);
      const auto tr = forward_with_taps<float>(model, b, {}, false);
      const auto st = tr.answer_states(model.final_tap());
      for (Index r = 0; r < st.rows(); ++r)
        d.base_final.row(static_cast<Index>(idx[s + static_cast<std::size_t>(r)])) = st.row(r).cast<double>();
    }
  d.sequences = std::move(seqs);
  return d;
}

/// Mean loss over a batch and (optionally) gradients of the module's
/// trainable tensors, in visit_trainable order.
template <typename T>
LossParts batch_loss(const ToyLMConfig& cfg, const ToyLMParams<T>& params, const SteeringModule& m,
                     const SteeringData& data, const std::vector<std::size_t>& batch, const SteeringTokens& tok,
                     const SteeringConfig& sc, std::vector<MatrixD>* grads) {
  if (batch.empty()) throw EmptyInputError("steering batch is empty");
  ShiftSet<T> shifts(m);
  std::vector<std::vector<int>> seqs;
  for (auto i : batch) seqs.push_back(data.sequences[i]);
  const auto tr = forward_with_taps<T>(cfg, params, seqs, shifts.list, grads != nullptr);
  const TapKey fin{cfg.n_layers - 1, "mlp"};
  const auto& fin_states = tr.states.at(fin);

  BackwardSeeds<T> seeds;
  if (grads) {
    seeds.logits = Mat<T>::Zero(tr.logits.rows(), tr.logits.cols());
    seeds.states[fin] = Mat<T>::Zero(fin_states.rows(), fin_states.cols());
  }
  LossParts mean;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Index row = tr.answer_row(static_cast<Index>(b));
    const RowVec<T> base = data.base_final.row(static_cast<Index>(batch[b])).template cast<T>();
    RowVec<T> gz, gh;
    const auto parts = steering_loss<T>(tr.logits.row(row), base, fin_states.row(row), tok, sc,
                                        grads ? &gz : nullptr, grads ? &gh : nullptr);
    mean.ce += parts.ce * inv;
    mean.margin += parts.margin * inv;
    mean.sem += parts.sem * inv;
    mean.total += parts.total * inv;
    if (grads) {
      seeds.logits.row(row) = gz * T(inv);
      seeds.states[fin].row(row) = gh * T(inv);
    }
  }
  if (grads) {
    backward_through<T>(cfg, params, tr, seeds, shifts.list, nullptr);
    grads->clear();
    for (const auto& s : shifts.owned)
      for (auto& g : s->grads()) grads->push_back(std::move(g));
    if (!m.use_bias)
      for (std::size_t i = 0; i < grads->size(); i += 4) {
        (*grads)[i + 1].setZero();
        (*grads)[i + 3].setZero();
      }
  }
  return mean;
}

struct TrainResult {
  SteeringModule module;
  std::vector<StepLog> log;
};

/// AdamW over the shift parameters only.  Deterministic for a fixed seed.
inline TrainResult train_steering(SteeringModule module, const ToyLM& model, const SteeringData& data,
                                  const SteeringTokens& tok, const SteeringConfig& cfg) {
  cfg.validate();
  if (module.taps.empty()) throw ConfigError("steering: module has no taps");
  if (data.sequences.empty()) throw EmptyInputError("steering: no training sequences");
  TrainResult res{std::move(module), {}};
  std::vector<MatrixD> m1, m2;
  res.module.visit_trainable([&](MatrixD& p) {
    m1.push_back(MatrixD::Zero(p.rows(), p.cols()));
    m2.push_back(MatrixD::Zero(p.rows(), p.cols()));
  });
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  CounterRng rng(derive_seed(cfg.seed, 0x5452));
  const auto groups = group_by_length(data.sequences);
  std::vector<std::size_t> lens;
  for (const auto& [len, idx] : groups) lens.push_back(len);

  for (int step = 1; step <= cfg.steps; ++step) {
    const auto& idx = groups.at(lens[rng.below(lens.size())]);
    std::vector<std::size_t> batch;
    for (int i = 0; i < cfg.batch_size; ++i) batch.push_back(idx[rng.below(idx.size())]);
    std::vector<MatrixD> grads;
    const auto parts = batch_loss<float>(model.config, model.params, res.module, data, batch, tok, cfg, &grads);
    if (!std::isfinite(parts.total)) throw TrainingError("steering: loss is not finite at step " + std::to_string(step));
    const double lr = schedule_lr(step, cfg.warmup_steps, cfg.steps, cfg.lr);
    res.log.push_back({step, lr, parts});
    const double c1 = 1 - std::pow(beta1, step), c2 = 1 - std::pow(beta2, step);
    std::size_t i = 0;
    res.module.visit_trainable([&](MatrixD& p) {
      const MatrixD& g = grads[i];
      m1[i] = beta1 * m1[i] + (1 - beta1) * g;
      m2[i] = beta2 * m2[i] + (1 - beta2) * g.cwiseAbs2();
      p -= lr * ((m1[i].array() / c1) / ((m2[i].array() / c2).sqrt() + eps)).matrix() + lr * cfg.weight_decay * p;
      ++i;
    });
    if (!res.module.use_bias)
      for (auto& t : res.module.taps) {
        t.b1.setZero();
        t.b2.setZero();
      }
  }
  return res;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct SteeringCell {
  std::string dataset;
  std::string emotion;
  double baseline_top1 = 0;
  double post_top1 = 0;
  double mean_sem_loss = 0;
  bool failed = false;  // post_top1 < 0.10
};

inline constexpr double kSteeringFailure = 0.10;

/// Argmax over emotion label tokens at the answer position, with and without
/// the module.  The semantic loss is always the full cosine + delta-norm form.
inline SteeringCell evaluate_steering(const SteeringModule& m, const ToyLM& model, const SteeringData& eval,
                                      const SteeringTokens& tok, double gamma = 1.0, std::string dataset = "synthetic") {
  if (eval.sequences.empty()) throw EmptyInputError("evaluate: empty evaluation set");
  SteeringCell cell;
  cell.dataset = std::move(dataset);
  cell.emotion = m.target_emotion;
  ShiftSet<float> shifts(m);
  auto top_is_target = [&](const Eigen::Ref<const RowVec<float>>& z) {
    int best = tok.labels.front();
    for (int k : tok.labels)
      if (z(k) > z(best)) best = k;
    return best == tok.target;
  };
  double base_hits = 0, post_hits = 0, sem = 0;
  for (const auto& [len, idx] : group_by_length(eval.sequences))
    for (std::size_t s = 0; s < idx.size(); s += 256) {
      std::vector<std::vector<int>> b;
      for (std::size_t i = s; i < std::min(idx.size(), s + 256); ++i) b.push_back(eval.sequences[idx[i]]);
      const auto base = forward_with_taps<float>(model, b, {}, false);
      const auto post = forward_with_taps<float>(model, b, shifts.list, false);
      const auto zb = base.answer_logits(), zp = post.answer_logits();
      const auto hp = post.answer_states(model.final_tap());
      for (Index r = 0; r < zb.rows(); ++r) {
        base_hits += top_is_target(zb.row(r));
        post_hits += top_is_target(zp.row(r));
        const RowVec<double> hb = eval.base_final.row(static_cast<Index>(idx[s + static_cast<std::size_t>(r)]));
        const RowVec<double> hs = hp.row(r).cast<double>();
        sem += semantic_loss<double>(hb, hs, gamma);
      }
    }
  const auto n = static_cast<double>(eval.sequences.size());
  cell.baseline_top1 = base_hits / n;
  cell.post_top1 = post_hits / n;
  cell.mean_sem_loss = sem / n;
  cell.failed = cell.post_top1 < kSteeringFailure;
  return cell;
}

/// "15 → 99 (0.15)", with "*" appended to the post value on failure.
inline std::string format_cell(double baseline, double post, double sem) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%ld \xE2\x86\x92 %ld%s (%.2f)", std::lround(100 * baseline), std::lround(100 * post),
                post < kSteeringFailure ? "*" : "", sem);
  return buf;
}

inline void write_steering_report(const std::vector<SteeringCell>& cells, const std::filesystem::path& path) {
  csv::Writer w(path);
  w.row({"dataset", "emotion", "baseline_top1", "post_top1", "mean_sem_loss", "failed"});
  for (const auto& c : cells)
    w.row({c.dataset, c.emotion, csv::num(c.baseline_top1), csv::num(c.post_top1), csv::num(c.mean_sem_loss),
           c.failed ? "1" : "0"});
}

// ---------------------------------------------------------------------------
// toy LM testbed plumbing
// ---------------------------------------------------------------------------

/// Answer targets for pretraining on a corpus: the label token carries
/// `label_mass` and the rest is split evenly over the emotion's synonyms, so
/// synonyms are plausible (but never top) answers, as in natural text.
inline std::vector<SoftTarget> corpus_targets(const ToyCorpus& c, const std::vector<const ToySequence*>& seqs,
                                              double label_mass = 1.0) {
  if (!(label_mass > 0 && label_mass <= 1)) throw ConfigError("corpus_targets: label_mass must lie in (0, 1]");
  std::vector<SoftTarget> out;
  for (const auto* s : seqs) {
    SoftTarget t{{c.label_token.at(s->emotion), label_mass}};
    const auto& syn = c.synonyms.at(s->emotion);
    if (label_mass < 1)
      for (int k : syn) t.push_back({k, (1 - label_mass) / static_cast<double>(syn.size())});
    out.push_back(std::move(t));
  }
  return out;
}

/// Mean-pooled residual states per tap for every sequence.
inline std::map<TapKey, MatrixD> pooled_tap_states(const ToyLM& model, const std::vector<std::vector<int>>& seqs) {
  std::map<TapKey, MatrixD> out;
  for (const auto& k : model.taps()) out[k] = MatrixD(static_cast<Index>(seqs.size()), model.config.hidden_dim);
  for (const auto& [len, idx] : group_by_length(seqs))
    for (std::size_t s = 0; s < idx.size(); s += 256) {
      std::vector<std::vector<int>> b;
      for (std::size_t i = s; i < std::min(idx.size(), s + 256); ++i) b.push_back(seqs[idx[i]]);
      const auto tr = forward_with_taps<float>(model, b, {}, false);
      for (const auto& [k, st] : tr.states)
        for (Index r = 0; r < tr.batch; ++r)
          out[k].row(static_cast<Index>(idx[s + static_cast<std::size_t>(r)])) =
              st.middleRows(r * tr.seq_len, tr.seq_len).colwise().mean().cast<double>();
    }
  return out;
}

/// Runs the model over a corpus and packages per-tap states as an activation
/// bundle (pooled plus token-level).
inline BundleData toy_lm_bundle(const ToyLM& model, const ToyCorpus& corpus, const std::string& dataset = "toy-lm") {
  BundleData d;
  auto& mf = d.manifest;
  mf.model_id = "toy-lm/d" + std::to_string(model.config.hidden_dim) + "-l" + std::to_string(model.config.n_layers) +
                "-seed" + std::to_string(model.config.seed);
  mf.hidden_dim = model.config.hidden_dim;
  mf.layer_count = model.config.n_layers;
  mf.record_count = static_cast<Index>(corpus.sequences.size());
  mf.emotion_labels = corpus.emotions;
  mf.has_token_level = true;
  std::vector<std::vector<int>> seqs;
  for (std::size_t i = 0; i < corpus.sequences.size(); ++i) {
    const auto& s = corpus.sequences[i];
    seqs.push_back(s.tokens);
    RecordLabel r;
    r.record_id = static_cast<Index>(i);
    r.dataset = dataset;
    r.emotion = s.emotion;
    r.split = s.split;
    r.token_count = static_cast<Index>(s.tokens.size());
    d.labels.push_back(r);
  }
  std::map<TapKey, MatrixF> pooled, tokens;
  std::vector<Index> offsets = {0};
  for (const auto& s : seqs) offsets.push_back(offsets.back() + static_cast<Index>(s.size()));
  for (const auto& k : model.taps()) {
    pooled[k] = MatrixF(static_cast<Index>(seqs.size()), model.config.hidden_dim);
    tokens[k] = MatrixF(offsets.back(), model.config.hidden_dim);
  }
  for (const auto& [len, idx] : group_by_length(seqs))
    for (std::size_t s = 0; s < idx.size(); s += 256) {
      std::vector<std::vector<int>> b;
      for (std::size_t i = s; i < std::min(idx.size(), s + 256); ++i) b.push_back(seqs[idx[i]]);
      const auto tr = forward_with_taps<float>(model, b, {}, false);
      for (const auto& [k, st] : tr.states)
        for (Index r = 0; r < tr.batch; ++r) {
          const auto rec = static_cast<Index>(idx[s + static_cast<std::size_t>(r)]);
          const auto block = st.middleRows(r * tr.seq_len, tr.seq_len);
          pooled[k].row(rec) = block.colwise().mean();
          tokens[k].middleRows(offsets[static_cast<std::size_t>(rec)], tr.seq_len) = block;
        }
    }
  for (const auto& k : model.taps()) {
    d.matrices.push_back({k.layer, k.sublayer, Payload::pooled, std::move(pooled[k])});
    d.matrices.push_back({k.layer, k.sublayer, Payload::tokens, std::move(tokens[k])});
  }
  return d;
}

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------

namespace detail {

inline void write_f64(std::ofstream& out, const MatrixD& m) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      unsigned char b[8];
      for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(bits >> (8 * k));
      out.write(reinterpret_cast<const char*>(b), 8);
    }
}

inline void read_f64(std::ifstream& in, MatrixD& m, const std::string& what) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) {
      unsigned char b[8];
      if (!in.read(reinterpret_cast<char*>(b), 8)) throw CorruptionError(what + ": truncated");
      std::uint64_t bits = 0;
      for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(b[k]) << (8 * k);
      double v;
      std::memcpy(&v, &bits, 8);
      m(i, j) = v;
    }
}

}  // namespace detail

/// steer_{emotion}.bin holds, per tap in sidecar order, little-endian f64
/// tensors mean, basis, w1, b1, w2, b2 (row-major).  The JSON sidecar names
/// the taps and shapes.
inline void save_module(const SteeringModule& m, const SteeringConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto stem = "steer_" + m.target_emotion;
  std::ofstream out(dir / (stem + ".bin"), std::ios::binary);
  nlohmann::json taps = nlohmann::json::array();
  for (const auto& t : m.taps) {
    taps.push_back({{"layer", t.tap.layer}, {"sublayer", t.tap.sublayer}, {"hidden_dim", t.basis.cols()},
                    {"rank", t.basis.rows()}, {"width", t.w1.cols()}});
    detail::write_f64(out, MatrixD(t.mean));
    detail::write_f64(out, t.basis);
    detail::write_f64(out, t.w1);
    detail::write_f64(out, MatrixD(t.b1));
    detail::write_f64(out, t.w2);
    detail::write_f64(out, MatrixD(t.b2));
  }
  nlohmann::json j{{"target_emotion", m.target_emotion}, {"use_gelu", m.use_gelu}, {"use_bias", m.use_bias},
                   {"taps", taps}, {"config", to_json(cfg)}};
  std::ofstream js(dir / (stem + ".json"));
  js << j.dump(2) << "\n";
}

/// Loads a module from its JSON sidecar path (the .bin sits next to it).
inline std::pair<SteeringModule, SteeringConfig> load_module(const std::filesystem::path& sidecar) {
  std::ifstream js(sidecar);
  if (!js) throw NotFoundError("missing " + sidecar.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(sidecar.string() + ": " + e.what());
  }
  SteeringModule m;
  SteeringConfig cfg;
  auto bin = sidecar;
  bin.replace_extension(".bin");
  std::ifstream in(bin, std::ios::binary);
  if (!in) throw NotFoundError("missing " + bin.string());
  try {
    m.target_emotion = j.at("target_emotion").get<std::string>();
    m.use_gelu = j.at("use_gelu").get<bool>();
    m.use_bias = j.at("use_bias").get<bool>();
    cfg = steering_config_from_json(j.at("config"));
    for (const auto& t : j.at("taps")) {
      TapShift s;
      s.tap = {t.at("layer").get<int>(), t.at("sublayer").get<std::string>()};
      const auto d = t.at("hidden_dim").get<Index>(), r = t.at("rank").get<Index>(), h = t.at("width").get<Index>();
      MatrixD mean(1, d), b1(1, h), b2(1, r);
      s.basis.resize(r, d);
      s.w1.resize(r, h);
      s.w2.resize(h, r);
      detail::read_f64(in, mean, bin.string());
      detail::read_f64(in, s.basis, bin.string());
      detail::read_f64(in, s.w1, bin.string());
      detail::read_f64(in, b1, bin.string());
      detail::read_f64(in, s.w2, bin.string());
      detail::read_f64(in, b2, bin.string());
      s.mean = mean.row(0);
      s.b1 = b1;
      s.b2 = b2;
      m.taps.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(sidecar.string() + ": " + e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CorruptionError(bin.string() + ": trailing bytes");
  return {m, cfg};
}

}  // namespace emospace
