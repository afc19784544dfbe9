#pragma once
//
// Multinomial logistic-regression probes over projected activations.
//

#include "emospace/core.hpp"
#include "emospace/csv.hpp"
#include "emospace/subspace.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace emospace {

struct ProbeConfig {
  double l2_penalty = 1e-3;
  double learning_rate = 1.0;  // first trial step of the line search
  int max_iters = 5000;
  double tolerance = 1e-6;     // on the full gradient norm
  std::uint64_t seed = 0;
};

struct LinearProbe {
  MatrixD weights;  // E x R
  VectorD bias;     // E
  std::vector<std::string> class_names;
  ProbeConfig train_config;

  Index classes() const { return weights.rows(); }
  Index width() const { return weights.cols(); }

  MatrixD logits(const MatrixD& x) const {
    if (x.cols() != width())
      throw ShapeError("probe: feature width " + std::to_string(x.cols()) + " != " + std::to_string(width()));
    return (x * weights.transpose()).rowwise() + bias.transpose();
  }

  /// argmax with ties resolved toward the lowest class index.
  std::vector<Index> predict(const MatrixD& x) const {
    const MatrixD z = logits(x);
    std::vector<Index> out(static_cast<std::size_t>(z.rows()));
    for (Index i = 0; i < z.rows(); ++i) {
      Index best = 0;
      for (Index k = 1; k < z.cols(); ++k)
        if (z(i, k) > z(i, best)) best = k;
      out[static_cast<std::size_t>(i)] = best;
    }
    return out;
  }
};

struct ProbeTrainInfo {
  int iterations = 0;
  double final_grad_norm = 0;
  bool converged = false;
  std::vector<double> loss_history;  // objective after each accepted step (index 0 = initial)
};

struct ProbeFit {
  LinearProbe probe;
  ProbeTrainInfo info;
};

namespace detail {

struct ProbeObjective {
  const MatrixD& x;
  const std::vector<Index>& y;
  double l2;

  /// Returns the objective; fills gradients when requested.
  double operator()(const MatrixD& w, const VectorD& b, MatrixD* gw = nullptr, VectorD* gb = nullptr) const {
    const Index n = x.rows();
    MatrixD z = (x * w.transpose()).rowwise() + b.transpose();
    double loss = 0;
    for (Index i = 0; i < n; ++i) {
      const double m = z.row(i).maxCoeff();
      z.row(i).array() -= m;
      const double lse = std::log(z.row(i).array().exp().sum());
      loss += lse - z(i, y[static_cast<std::size_t>(i)]);
      if (gw) {
        z.row(i) = (z.row(i).array() - lse).exp().matrix();
        z(i, y[static_cast<std::size_t>(i)]) -= 1.0;
      }
    }
    loss = loss / static_cast<double>(n) + 0.5 * l2 * w.squaredNorm();
    if (gw) {
      *gw = z.transpose() * x / static_cast<double>(n) + l2 * w;
      *gb = z.colwise().sum().transpose() / static_cast<double>(n);
    }
    return loss;
  }
};

inline std::vector<Index> encode_labels(const std::vector<std::string>& labels,
                                        const std::vector<std::string>& classes) {
  std::map<std::string, Index> idx;
  for (std::size_t i = 0; i < classes.size(); ++i) idx[classes[i]] = static_cast<Index>(i);
  std::vector<Index> y;
  y.reserve(labels.size());
  for (const auto& l : labels) {
    auto it = idx.find(l);
    if (it == idx.end()) throw LabelError("probe: label '" + l + "' is not a probe class");
    y.push_back(it->second);
  }
  return y;
}

}  // namespace detail

/// Full-batch gradient descent with Armijo backtracking; the trial step is the
/// Barzilai–Borwein step from the previous iterate.  Non-convergence is
/// reported through `info.converged` rather than thrown.
inline ProbeFit train_probe(const MatrixD& features, const std::vector<std::string>& labels, const ProbeConfig& cfg = {},
                            std::vector<std::string> classes = {}) {
  if (static_cast<Index>(labels.size()) != features.rows()) throw ShapeError("train_probe: label count mismatch");
  if (classes.empty()) {
    std::set<std::string> s(labels.begin(), labels.end());
    classes.assign(s.begin(), s.end());
  }
  if (classes.size() < 2) throw SampleError("train_probe: need at least 2 classes");
  const auto y = detail::encode_labels(labels, classes);
  std::vector<Index> per_class(classes.size(), 0);
  for (auto v : y) ++per_class[static_cast<std::size_t>(v)];
  for (std::size_t k = 0; k < classes.size(); ++k)
    if (per_class[k] == 0) throw SampleError("train_probe: class '" + classes[k] + "' has no samples");

  const auto e = static_cast<Index>(classes.size());
  const Index r = features.cols();
  CounterRng rng(derive_seed(cfg.seed, 11));
  MatrixD w = random_normal<double>(e, r, rng, 1e-3);
  VectorD b = VectorD::Zero(e);

  detail::ProbeObjective f{features, y, cfg.l2_penalty};
  MatrixD gw;
  VectorD gb;
  double loss = f(w, b, &gw, &gb);
  auto gnorm = [&] { return std::sqrt(gw.squaredNorm() + gb.squaredNorm()); };

  ProbeTrainInfo info;
  info.loss_history.push_back(loss);
  double step = cfg.learning_rate;
  int it = 0;
  for (; it < cfg.max_iters && gnorm() > cfg.tolerance; ++it) {
    const double g2 = gw.squaredNorm() + gb.squaredNorm();
    double alpha = step;
    MatrixD w_new;
    VectorD b_new;
    double loss_new = loss;
    int halvings = 0;
    for (;; ++halvings) {
      w_new = w - alpha * gw;
      b_new = b - alpha * gb;
      loss_new = f(w_new, b_new);
      if (loss_new <= loss - 1e-4 * alpha * g2) break;
      alpha *= 0.5;
      if (halvings > 60) break;
    }
    if (!(loss_new <= loss)) break;  // line search exhausted: at numerical optimum
    MatrixD gw_new;
    VectorD gb_new;
    f(w_new, b_new, &gw_new, &gb_new);
    const double ss = (w_new - w).squaredNorm() + (b_new - b).squaredNorm();
    const double sy = ((w_new - w).cwiseProduct(gw_new - gw)).sum() + (b_new - b).dot(gb_new - gb);
    step = sy > 0 ? ss / sy : 2 * alpha;
    w = std::move(w_new);
    b = std::move(b_new);
    gw = std::move(gw_new);
    gb = std::move(gb_new);
    loss = loss_new;
    info.loss_history.push_back(loss);
  }
  info.iterations = it;
  info.final_grad_norm = gnorm();
  info.converged = info.final_grad_norm <= cfg.tolerance;
  return {{std::move(w), std::move(b), std::move(classes), cfg}, std::move(info)};
}

/// Objective value of a probe on data (used by gradient checks).
inline double probe_objective(const LinearProbe& p, const MatrixD& features, const std::vector<std::string>& labels,
                              double l2, MatrixD* gw = nullptr, VectorD* gb = nullptr) {
  const auto y = detail::encode_labels(labels, p.class_names);
  return detail::ProbeObjective{features, y, l2}(p.weights, p.bias, gw, gb);
}

struct ProbeEvaluation {
  double accuracy = 0;
  Eigen::MatrixXi confusion;  // rows: true class, cols: predicted class
};

inline ProbeEvaluation evaluate_probe(const LinearProbe& p, const MatrixD& features,
                                      const std::vector<std::string>& labels) {
  if (static_cast<Index>(labels.size()) != features.rows()) throw ShapeError("evaluate_probe: label count mismatch");
  if (features.rows() == 0) throw SampleError("evaluate_probe: no rows");
  const auto y = detail::encode_labels(labels, p.class_names);
  const auto pred = p.predict(features);
  ProbeEvaluation ev;
  ev.confusion = Eigen::MatrixXi::Zero(p.classes(), p.classes());
  Index correct = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ++ev.confusion(y[i], pred[i]);
    correct += y[i] == pred[i];
  }
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(y.size());
  return ev;
}

/// Fits the subspace and probe on the source, projects the target with the
/// source subspace, and evaluates on the rows whose labels both share.
struct TransferResult {
  double accuracy = 0;
  std::vector<std::string> shared_classes;
  Index evaluated_rows = 0;
  ProbeTrainInfo train_info;
};

inline TransferResult probe_transfer(const MatrixD& source, const std::vector<std::string>& source_labels,
                                     const MatrixD& target, const std::vector<std::string>& target_labels,
                                     Index rank, const ProbeConfig& cfg = {}) {
  std::set<std::string> src(source_labels.begin(), source_labels.end());
  std::set<std::string> dst(target_labels.begin(), target_labels.end());
  std::vector<std::string> shared;
  std::set_intersection(src.begin(), src.end(), dst.begin(), dst.end(), std::back_inserter(shared));
  if (shared.size() < 2) throw AlignmentError("probe_transfer: fewer than 2 shared labels");
  const std::set<std::string> keep(shared.begin(), shared.end());

  auto filter = [&](const MatrixD& m, const std::vector<std::string>& labels, std::vector<std::string>& out_labels) {
    std::vector<Index> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (keep.count(labels[i])) {
        rows.push_back(static_cast<Index>(i));
        out_labels.push_back(labels[i]);
      }
    MatrixD out(static_cast<Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
    return out;
  };
  std::vector<std::string> sl, tl;
  const MatrixD s = filter(source, source_labels, sl);
  const MatrixD t = filter(target, target_labels, tl);

  const auto sub = fit_subspace(s, std::min<Index>(rank, std::min(s.rows(), s.cols())));
  auto fit = train_probe(project(sub, s), sl, cfg, shared);
  const auto ev = evaluate_probe(fit.probe, project(sub, t), tl);
  return {ev.accuracy, shared, t.rows(), fit.info};
}

inline nlohmann::json to_json(const LinearProbe& p) {
  std::vector<std::vector<double>> w(static_cast<std::size_t>(p.classes()));
  for (Index k = 0; k < p.classes(); ++k)
    for (Index j = 0; j < p.width(); ++j) w[static_cast<std::size_t>(k)].push_back(p.weights(k, j));
  return {{"class_names", p.class_names},
          {"weights", w},
          {"bias", std::vector<double>(p.bias.data(), p.bias.data() + p.bias.size())},
          {"train_config",
           {{"l2_penalty", p.train_config.l2_penalty},
            {"learning_rate", p.train_config.learning_rate},
            {"max_iters", p.train_config.max_iters},
            {"tolerance", p.train_config.tolerance},
            {"seed", p.train_config.seed}}}};
}

inline LinearProbe probe_from_json(const nlohmann::json& j) {
  LinearProbe p;
  p.class_names = j.at("class_names").get<std::vector<std::string>>();
  const auto w = j.at("weights").get<std::vector<std::vector<double>>>();
  const auto b = j.at("bias").get<std::vector<double>>();
  const Index r = w.empty() ? 0 : static_cast<Index>(w.front().size());
  p.weights.resize(static_cast<Index>(w.size()), r);
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (static_cast<Index>(w[k].size()) != r) throw FormatError("probe.json: ragged weights");
    for (Index c = 0; c < r; ++c) p.weights(static_cast<Index>(k), c) = w[k][static_cast<std::size_t>(c)];
  }
  p.bias = Eigen::Map<const VectorD>(b.data(), static_cast<Index>(b.size()));
  if (const auto it = j.find("train_config"); it != j.end()) {
    p.train_config.l2_penalty = it->value("l2_penalty", 1e-3);
    p.train_config.learning_rate = it->value("learning_rate", 1.0);
    p.train_config.max_iters = it->value("max_iters", 5000);
    p.train_config.tolerance = it->value("tolerance", 1e-6);
    p.train_config.seed = it->value("seed", std::uint64_t{0});
  }
  return p;
}

}  // namespace emospace
