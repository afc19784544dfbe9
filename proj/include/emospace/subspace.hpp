#pragma once
//
// Centered-SVD emotional subspace: fitting, projection, centroids, and the
// per-axis centroid exports.
//

#include "emospace/core.hpp"
#include "emospace/csv.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace emospace {

struct EmotionSubspace {
  VectorD mean;            // D
  MatrixD components;      // R x D, orthonormal rows
  VectorD singular_values; // R, descending
  std::string source_tag;

  Index rank() const { return components.rows(); }
  Index dim() const { return components.cols(); }

  /// The leading `r` components as a new subspace.
  EmotionSubspace truncated(Index r) const {
    if (r < 1 || r > rank()) throw RankError("truncate: rank " + std::to_string(r) + " outside [1, " +
                                             std::to_string(rank()) + "]");
    return {mean, components.topRows(r), singular_values.head(r), source_tag};
  }
};

/// Result of a full thin SVD of the centered data, kept for diagnostics.
struct SubspaceFit {
  EmotionSubspace subspace;
  VectorD all_singular_values;  // min(N, D) values

  /// Frobenius error of the rank-R reconstruction predicted by the tail.
  double tail_error() const {
    const Index r = subspace.rank();
    return std::sqrt(all_singular_values.tail(all_singular_values.size() - r).squaredNorm());
  }
};

/// Flips each row so its largest-magnitude coordinate is positive.
inline void canonicalize_signs(MatrixD& rows) {
  for (Index i = 0; i < rows.rows(); ++i) {
    Index arg = 0;
    rows.row(i).cwiseAbs().maxCoeff(&arg);
    if (rows(i, arg) < 0) rows.row(i) *= -1.0;
  }
}

inline SubspaceFit fit_subspace_full(const MatrixD& pooled, Index rank, std::string source_tag = {}) {
  const Index n = pooled.rows();
  const Index d = pooled.cols();
  if (n < 2) throw SampleError("fit_subspace: need at least 2 rows, got " + std::to_string(n));
  if (rank < 1 || rank > std::min(n, d))
    throw RankError("fit_subspace: rank " + std::to_string(rank) + " exceeds min(N, D) = " +
                    std::to_string(std::min(n, d)));
  if (!pooled.allFinite()) throw DataError("fit_subspace: non-finite input");

  SubspaceFit fit;
  fit.subspace.mean = pooled.colwise().mean().transpose();
  const MatrixD centered = pooled.rowwise() - fit.subspace.mean.transpose();
  Eigen::BDCSVD<MatrixD> svd(centered, Eigen::ComputeThinV);
  fit.all_singular_values = svd.singularValues();
  fit.subspace.singular_values = fit.all_singular_values.head(rank);
  fit.subspace.components = svd.matrixV().leftCols(rank).transpose();
  canonicalize_signs(fit.subspace.components);
  fit.subspace.source_tag = std::move(source_tag);
  return fit;
}

inline EmotionSubspace fit_subspace(const MatrixD& pooled, Index rank, std::string source_tag = {}) {
  return fit_subspace_full(pooled, rank, std::move(source_tag)).subspace;
}

/// (vectors − μ) · Vᵀ
inline MatrixD project(const EmotionSubspace& s, const MatrixD& vectors) {
  if (vectors.cols() != s.dim())
    throw ShapeError("project: width " + std::to_string(vectors.cols()) + " does not match subspace dim " +
                     std::to_string(s.dim()));
  return (vectors.rowwise() - s.mean.transpose()) * s.components.transpose();
}

/// μ + coords · V
inline MatrixD reconstruct(const EmotionSubspace& s, const MatrixD& coords) {
  if (coords.cols() != s.rank()) throw ShapeError("reconstruct: coordinate width does not match rank");
  return (coords * s.components).rowwise() + s.mean.transpose();
}

struct EmotionCentroids {
  std::vector<std::string> emotions;
  MatrixD full;                     // E x D
  std::optional<MatrixD> projected; // E x R
  std::vector<Index> counts;

  Index index_of(const std::string& e) const {
    auto it = std::find(emotions.begin(), emotions.end(), e);
    if (it == emotions.end()) throw LabelError("no centroid for emotion '" + e + "'");
    return it - emotions.begin();
  }
};

/// Per-emotion means.  `order` fixes the row order; every listed emotion must
/// occur, and every record's label must be listed.  Without `order` the
/// emotions appear in first-seen order.
inline EmotionCentroids centroids(const MatrixD& pooled, const std::vector<std::string>& labels,
                                  const EmotionSubspace* subspace = nullptr,
                                  std::optional<std::vector<std::string>> order = std::nullopt) {
  if (static_cast<Index>(labels.size()) != pooled.rows())
    throw ShapeError("centroids: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(pooled.rows()) + " rows");
  EmotionCentroids c;
  if (order) {
    c.emotions = *order;
  } else {
    for (const auto& l : labels)
      if (std::find(c.emotions.begin(), c.emotions.end(), l) == c.emotions.end()) c.emotions.push_back(l);
  }
  std::map<std::string, Index> index;
  for (std::size_t i = 0; i < c.emotions.size(); ++i) index[c.emotions[i]] = static_cast<Index>(i);

  const auto e = static_cast<Index>(c.emotions.size());
  c.full = MatrixD::Zero(e, pooled.cols());
  c.counts.assign(static_cast<std::size_t>(e), 0);
  for (Index i = 0; i < pooled.rows(); ++i) {
    auto it = index.find(labels[static_cast<std::size_t>(i)]);
    if (it == index.end()) throw LabelError("centroids: unknown label '" + labels[static_cast<std::size_t>(i)] + "'");
    c.full.row(it->second) += pooled.row(i);
    ++c.counts[static_cast<std::size_t>(it->second)];
  }
  for (Index k = 0; k < e; ++k) {
    if (c.counts[static_cast<std::size_t>(k)] == 0)
      throw LabelError("centroids: emotion '" + c.emotions[static_cast<std::size_t>(k)] + "' has no records");
    c.full.row(k) /= static_cast<double>(c.counts[static_cast<std::size_t>(k)]);
  }
  if (subspace) c.projected = project(*subspace, c.full);
  return c;
}

struct AxisRow {
  std::string emotion;
  std::vector<double> coords;  // PC1..PCk
};

/// Centroid coordinates on the leading k axes, sorted ascending by PC1.
inline std::vector<AxisRow> export_axes(const EmotionCentroids& c, Index k) {
  if (!c.projected) throw StateError("export_axes: centroids were computed without a subspace");
  if (k < 1 || k > c.projected->cols())
    throw RankError("export_axes: k=" + std::to_string(k) + " exceeds subspace rank " +
                    std::to_string(c.projected->cols()));
  std::vector<AxisRow> rows;
  for (std::size_t i = 0; i < c.emotions.size(); ++i) {
    AxisRow r{c.emotions[i], {}};
    for (Index j = 0; j < k; ++j) r.coords.push_back((*c.projected)(static_cast<Index>(i), j));
    rows.push_back(std::move(r));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const AxisRow& a, const AxisRow& b) { return a.coords[0] < b.coords[0]; });
  return rows;
}

inline void write_axes_csv(const std::vector<AxisRow>& rows, const std::filesystem::path& path) {
  csv::Writer w(path);
  std::vector<std::string> header{"emotion"};
  if (!rows.empty())
    for (std::size_t j = 0; j < rows.front().coords.size(); ++j) header.push_back("PC" + std::to_string(j + 1));
  w.row(header);
  for (const auto& r : rows) {
    std::vector<std::string> f{r.emotion};
    for (double v : r.coords) f.push_back(csv::num(v));
    w.row(f);
  }
}

// ---------------------------------------------------------------------------
// serialization: subspace_L{l}_{s}.json
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const EmotionSubspace& s) {
  std::vector<std::vector<double>> comps(static_cast<std::size_t>(s.rank()),
                                         std::vector<double>(static_cast<std::size_t>(s.dim())));
  for (Index i = 0; i < s.rank(); ++i)
    for (Index j = 0; j < s.dim(); ++j) comps[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = s.components(i, j);
  return {{"source_tag", s.source_tag},
          {"rank", s.rank()},
          {"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
          {"singular_values",
           std::vector<double>(s.singular_values.data(), s.singular_values.data() + s.singular_values.size())},
          {"components", comps}};
}

inline EmotionSubspace subspace_from_json(const nlohmann::json& j) {
  EmotionSubspace s;
  try {
    s.source_tag = j.value("source_tag", std::string{});
    const auto mean = j.at("mean").get<std::vector<double>>();
    const auto sv = j.at("singular_values").get<std::vector<double>>();
    const auto comps = j.at("components").get<std::vector<std::vector<double>>>();
    s.mean = Eigen::Map<const VectorD>(mean.data(), static_cast<Index>(mean.size()));
    s.singular_values = Eigen::Map<const VectorD>(sv.data(), static_cast<Index>(sv.size()));
    s.components.resize(static_cast<Index>(comps.size()), static_cast<Index>(mean.size()));
    for (std::size_t i = 0; i < comps.size(); ++i) {
      if (comps[i].size() != mean.size()) throw FormatError("subspace json: component width mismatch");
      for (std::size_t k = 0; k < mean.size(); ++k) s.components(static_cast<Index>(i), static_cast<Index>(k)) = comps[i][k];
    }
    if (sv.size() != comps.size()) throw FormatError("subspace json: singular value count mismatch");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("subspace json: ") + e.what());
  }
  return s;
}

inline std::string subspace_filename(int layer, const std::string& sublayer) {
  return "subspace_L" + std::to_string(layer) + "_" + sublayer + ".json";
}

inline void save_subspace(const EmotionSubspace& s, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << to_json(s).dump(1) << '\n';
}

inline EmotionSubspace load_subspace(const std::filesystem::path& path) {
  return subspace_from_json(nlohmann::json::parse(csv::read_file(path)));
}

}  // namespace emospace
