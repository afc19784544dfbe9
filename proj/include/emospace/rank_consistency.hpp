#pragma once
//
// Rank-order stability of emotion centroids along principal components,
// across taps of one model or matching taps of two models.
//

#include "emospace/activation_store.hpp"
#include "emospace/aura.hpp"
#include "emospace/core.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace emospace {

inline std::vector<double> midrank(std::span<const double> x) {
  return detail::midranks(x, detail::ascending_order(x));
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  const auto n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) throw UndefinedError("correlation undefined: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Pearson correlation of midrank vectors.
inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("spearman: length mismatch");
  if (x.size() < 3) throw SampleError("spearman: need at least 3 items");
  const auto rx = midrank(x);
  const auto ry = midrank(y);
  return pearson(rx, ry);
}

/// Kendall tau-b by exhaustive pair counting.
inline double kendall_tau(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("kendall_tau: length mismatch");
  if (x.size() < 3) throw SampleError("kendall_tau: need at least 3 items");
  long long concordant = 0, discordant = 0, ties_x = 0, ties_y = 0, pairs = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      ++pairs;
      const double dx = x[i] - x[j];
      const double dy = y[i] - y[j];
      if (dx == 0) ++ties_x;
      if (dy == 0) ++ties_y;
      if (dx == 0 || dy == 0) continue;
      if ((dx > 0) == (dy > 0)) ++concordant; else ++discordant;
    }
  const double denom = std::sqrt(static_cast<double>(pairs - ties_x) * static_cast<double>(pairs - ties_y));
  if (denom == 0) throw UndefinedError("kendall_tau: undefined for an all-tied input");
  return static_cast<double>(concordant - discordant) / denom;
}

enum class RankMethod { spearman, kendall };

inline std::string to_string(RankMethod m) { return m == RankMethod::spearman ? "spearman" : "kendall"; }

inline RankMethod parse_rank_method(const std::string& s) {
  if (s == "spearman") return RankMethod::spearman;
  if (s == "kendall") return RankMethod::kendall;
  throw ConfigError("unknown rank method '" + s + "'");
}

inline double rank_correlation(RankMethod m, std::span<const double> x, std::span<const double> y) {
  return m == RankMethod::spearman ? spearman(x, y) : kendall_tau(x, y);
}

/// Emotion coordinates along each PC for every tap.
struct RankSeries {
  std::vector<std::string> emotions;
  std::map<TapKey, MatrixD> coords;  // each E x P
  TapKey reference_key;

  void add(const TapKey& key, MatrixD c) {
    if (c.rows() != static_cast<Index>(emotions.size()))
      throw AlignmentError("rank series: tap " + key.str() + " covers " + std::to_string(c.rows()) +
                           " emotions, series has " + std::to_string(emotions.size()));
    if (coords.empty()) reference_key = key;
    coords[key] = std::move(c);
  }

  Index pcs() const {
    Index p = std::numeric_limits<Index>::max();
    for (const auto& [k, c] : coords) p = std::min(p, c.cols());
    return coords.empty() ? 0 : p;
  }
};

struct ConsistencyRow {
  Index pc = 1;  // 1-based
  RankMethod method = RankMethod::spearman;
  double mean = 0;             // with polarity control
  double std = 0;
  double mean_unflipped = 0;   // raw orientation
  Index n_pairs = 0;
};

namespace detail {

/// max(corr(x, y), corr(x, −y)); also returns the raw value.
inline std::pair<double, double> polarity_controlled(RankMethod m, std::span<const double> x,
                                                     std::span<const double> y) {
  std::vector<double> neg(y.begin(), y.end());
  for (auto& v : neg) v = -v;
  const double raw = rank_correlation(m, x, y);
  return {std::max(raw, rank_correlation(m, x, neg)), raw};
}

inline std::vector<double> column(const MatrixD& m, Index c) {
  std::vector<double> out(static_cast<std::size_t>(m.rows()));
  for (Index i = 0; i < m.rows(); ++i) out[static_cast<std::size_t>(i)] = m(i, c);
  return out;
}

inline ConsistencyRow summarize(Index pc, RankMethod m, const std::vector<std::pair<double, double>>& vals) {
  ConsistencyRow row;
  row.pc = pc + 1;
  row.method = m;
  row.n_pairs = static_cast<Index>(vals.size());
  if (vals.empty()) return row;
  for (const auto& [c, raw] : vals) {
    row.mean += c;
    row.mean_unflipped += raw;
  }
  row.mean /= static_cast<double>(vals.size());
  row.mean_unflipped /= static_cast<double>(vals.size());
  for (const auto& [c, raw] : vals) row.std += (c - row.mean) * (c - row.mean);
  row.std = std::sqrt(row.std / static_cast<double>(vals.size()));
  return row;
}

}  // namespace detail

/// Average pairwise rank correlation per PC over all unordered tap pairs
/// (or consecutive taps only), with polarity control.
inline std::vector<ConsistencyRow> consistency_matrix(const RankSeries& s, RankMethod method, Index n_pcs = 3,
                                                      bool consecutive_only = false) {
  if (s.coords.size() < 2) throw SampleError("consistency_matrix: need at least 2 taps");
  if (n_pcs < 1 || n_pcs > s.pcs()) throw RankError("consistency_matrix: requested PCs exceed available");
  std::vector<const MatrixD*> mats;
  for (const auto& [k, c] : s.coords) mats.push_back(&c);

  std::vector<ConsistencyRow> rows;
  for (Index pc = 0; pc < n_pcs; ++pc) {
    std::vector<std::pair<double, double>> vals;
    for (std::size_t i = 0; i < mats.size(); ++i)
      for (std::size_t j = i + 1; j < mats.size(); ++j) {
        if (consecutive_only && j != i + 1) continue;
        vals.push_back(detail::polarity_controlled(method, detail::column(*mats[i], pc), detail::column(*mats[j], pc)));
      }
    rows.push_back(detail::summarize(pc, method, vals));
  }
  return rows;
}

/// Cross-model mode: correlates taps present in both series.
inline std::vector<ConsistencyRow> consistency_cross(const RankSeries& a, const RankSeries& b, RankMethod method,
                                                     Index n_pcs = 3) {
  std::set<std::string> ea(a.emotions.begin(), a.emotions.end());
  std::set<std::string> eb(b.emotions.begin(), b.emotions.end());
  if (ea != eb) {
    std::string diff;
    for (const auto& e : ea)
      if (!eb.count(e)) diff += " -" + e;
    for (const auto& e : eb)
      if (!ea.count(e)) diff += " +" + e;
    throw AlignmentError("consistency_cross: emotion sets differ:" + diff);
  }
  std::vector<Index> perm;
  for (const auto& e : a.emotions)
    perm.push_back(std::find(b.emotions.begin(), b.emotions.end(), e) - b.emotions.begin());
  if (n_pcs < 1 || n_pcs > std::min(a.pcs(), b.pcs())) throw RankError("consistency_cross: requested PCs exceed available");

  std::vector<ConsistencyRow> rows;
  for (Index pc = 0; pc < n_pcs; ++pc) {
    std::vector<std::pair<double, double>> vals;
    for (const auto& [key, ca] : a.coords) {
      auto it = b.coords.find(key);
      if (it == b.coords.end()) continue;
      std::vector<double> yb;
      for (auto p : perm) yb.push_back(it->second(p, pc));
      vals.push_back(detail::polarity_controlled(method, detail::column(ca, pc), yb));
    }
    if (vals.empty()) throw AlignmentError("consistency_cross: no matching taps");
    rows.push_back(detail::summarize(pc, method, vals));
  }
  return rows;
}

}  // namespace emospace
