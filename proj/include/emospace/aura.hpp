#pragma once
//
// Neuron selectivity scoring.  Each hidden coordinate is treated as a
// one-vs-all detector for every emotion; responses are the per-record
// maximum over token positions.
//

#include "emospace/activation_store.hpp"
#include "emospace/core.hpp"

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace emospace {

using Mask = std::vector<std::uint8_t>;

/// response[n, d] = max over record n's tokens of coordinate d.
inline MatrixD neuron_responses(const TokenMatrix& tokens) {
  MatrixD out(tokens.records(), tokens.values.cols());
  for (Index n = 0; n < tokens.records(); ++n)
    out.row(n) = pool_tokens(tokens.record(n), PoolMode::max).cast<double>();
  return out;
}

namespace detail {

/// 1-based midranks (ties share the mean of their positions).
inline std::vector<double> midranks(std::span<const double> x, const std::vector<Index>& order) {
  const auto n = x.size();
  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[static_cast<std::size_t>(order[j + 1])] == x[static_cast<std::size_t>(order[i])]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) rank[static_cast<std::size_t>(order[t])] = r;
    i = j + 1;
  }
  return rank;
}

inline std::vector<Index> ascending_order(std::span<const double> x) {
  std::vector<Index> order(x.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return x[static_cast<std::size_t>(a)] < x[static_cast<std::size_t>(b)]; });
  return order;
}

inline double auroc_from_ranks(const std::vector<double>& ranks, std::span<const std::uint8_t> positives) {
  double pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i)
    if (positives[i]) {
      pos += 1;
      rank_sum += ranks[i];
    }
  const double neg = static_cast<double>(ranks.size()) - pos;
  if (pos == 0 || neg == 0) throw UndefinedError("auroc: need at least one positive and one negative");
  return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

/// Step-wise average precision given indices sorted by descending score.
inline double auprc_sorted(std::span<const double> x, std::span<const std::uint8_t> positives,
                           const std::vector<Index>& ascending) {
  double total_pos = 0;
  for (auto p : positives) total_pos += p ? 1 : 0;
  if (total_pos == 0) throw UndefinedError("auprc: no positives");
  double tp = 0, fp = 0, prev_recall = 0, area = 0;
  std::size_t i = ascending.size();
  while (i > 0) {
    const double v = x[static_cast<std::size_t>(ascending[i - 1])];
    while (i > 0 && x[static_cast<std::size_t>(ascending[i - 1])] == v) {
      if (positives[static_cast<std::size_t>(ascending[i - 1])]) tp += 1; else fp += 1;
      --i;
    }
    const double recall = tp / total_pos;
    area += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
  }
  return area;
}

}  // namespace detail

/// P(score_pos > score_neg) + ½·P(tie), via the Mann–Whitney statistic with midranks.
inline double auroc(std::span<const double> scores, std::span<const std::uint8_t> positives) {
  if (scores.size() != positives.size()) throw ShapeError("auroc: scores and mask differ in length");
  const auto order = detail::ascending_order(scores);
  return detail::auroc_from_ranks(detail::midranks(scores, order), positives);
}

/// Area under the precision–recall step curve swept over descending distinct
/// thresholds, tied scores entering together.
inline double auprc(std::span<const double> scores, std::span<const std::uint8_t> positives) {
  if (scores.size() != positives.size()) throw ShapeError("auprc: scores and mask differ in length");
  return detail::auprc_sorted(scores, positives, detail::ascending_order(scores));
}

struct NeuronScoreTable {
  int layer = 0;
  std::string sublayer;
  std::vector<std::string> emotions;
  MatrixD auroc;  // D x E
  MatrixD auprc;  // D x E
  std::vector<Index> positives_per_emotion;
  Index record_count = 0;
};

/// Scores every neuron against every emotion.  Emotions with no positive or
/// no negative record are rejected.
inline NeuronScoreTable score_neurons(const MatrixD& responses, const std::vector<std::string>& labels,
                                      const std::vector<std::string>& emotions, int layer = 0,
                                      const std::string& sublayer = {}) {
  const Index n = responses.rows();
  if (static_cast<Index>(labels.size()) != n) throw ShapeError("score_neurons: label count does not match rows");
  const auto e = static_cast<Index>(emotions.size());
  NeuronScoreTable t;
  t.layer = layer;
  t.sublayer = sublayer;
  t.emotions = emotions;
  t.record_count = n;
  t.auroc.resize(responses.cols(), e);
  t.auprc.resize(responses.cols(), e);

  std::vector<Mask> masks(static_cast<std::size_t>(e), Mask(static_cast<std::size_t>(n), 0));
  for (Index k = 0; k < e; ++k) {
    Index count = 0;
    for (Index i = 0; i < n; ++i)
      if (labels[static_cast<std::size_t>(i)] == emotions[static_cast<std::size_t>(k)]) {
        masks[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)] = 1;
        ++count;
      }
    if (count == 0 || count == n)
      throw UndefinedError("score_neurons: emotion '" + emotions[static_cast<std::size_t>(k)] +
                           "' has no positive or no negative records");
    t.positives_per_emotion.push_back(count);
  }

  std::vector<double> col(static_cast<std::size_t>(n));
  for (Index d = 0; d < responses.cols(); ++d) {
    for (Index i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = responses(i, d);
    const auto order = detail::ascending_order(col);
    const auto ranks = detail::midranks(col, order);
    for (Index k = 0; k < e; ++k) {
      t.auroc(d, k) = detail::auroc_from_ranks(ranks, masks[static_cast<std::size_t>(k)]);
      t.auprc(d, k) = detail::auprc_sorted(col, masks[static_cast<std::size_t>(k)], order);
    }
  }
  return t;
}

struct ExpertCell {
  int layer = 0;
  std::string sublayer;
  std::string emotion;
  double fraction = 0;
};

struct ExpertSummary {
  double threshold = 0.9;
  std::vector<ExpertCell> cells;
  double mean_fraction = 0;  // across all cells
};

/// Fraction of neurons whose AUROC strictly exceeds `threshold`, per
/// (layer, sublayer, emotion).
inline ExpertSummary expert_summary(const std::vector<NeuronScoreTable>& tables, double threshold = 0.9) {
  if (!(threshold > 0.5 && threshold <= 1.0)) throw ConfigError("expert_summary: threshold must lie in (0.5, 1]");
  ExpertSummary s;
  s.threshold = threshold;
  double total = 0;
  for (const auto& t : tables)
    for (Index k = 0; k < t.auroc.cols(); ++k) {
      const double frac = (t.auroc.col(k).array() > threshold).cast<double>().mean();
      s.cells.push_back({t.layer, t.sublayer, t.emotions[static_cast<std::size_t>(k)], frac});
      total += frac;
    }
  s.mean_fraction = s.cells.empty() ? 0.0 : total / static_cast<double>(s.cells.size());
  return s;
}

}  // namespace emospace
