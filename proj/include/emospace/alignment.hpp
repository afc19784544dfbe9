#pragma once
//
// Linear alignment between two emotional spaces, and the relational
// fidelity scores (Kruskal stress, Sammon stress, distance distortion).
//

#include "emospace/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace emospace {

struct SpectralStats {
  VectorD singular_values;   // all singular values of W, descending
  Index effective_rank = 0;  // count above the numerical-zero cutoff
  double flatness = 0;       // geometric mean / arithmetic mean over the nonzero values
  double entropy = 0;        // −Σ p log p, p = σ² / Σσ²
};

/// Flatness is computed over the numerically nonzero singular values: a map
/// fitted on k points has rank ≤ k−1, and zero values would pin the geometric
/// mean to 0 regardless of how the informative directions are spread.
inline SpectralStats spectral_stats(const MatrixD& w) {
  SpectralStats s;
  Eigen::JacobiSVD<MatrixD> svd(w);
  s.singular_values = svd.singularValues();
  if (s.singular_values.size() == 0 || s.singular_values(0) <= 0)
    throw GeometryError("spectral_stats: map is identically zero");
  const double cutoff = 1e-12 * s.singular_values(0);
  double log_sum = 0, sum = 0, sq = 0;
  for (Index i = 0; i < s.singular_values.size(); ++i) {
    const double v = s.singular_values(i);
    if (v <= cutoff) continue;
    ++s.effective_rank;
    log_sum += std::log(v);
    sum += v;
    sq += v * v;
  }
  const double m = static_cast<double>(s.effective_rank);
  s.flatness = std::exp(log_sum / m) / (sum / m);
  for (Index i = 0; i < s.effective_rank; ++i) {
    const double p = s.singular_values(i) * s.singular_values(i) / sq;
    if (p > 0) s.entropy -= p * std::log(p);
  }
  return s;
}

struct AlignmentResult {
  MatrixD map_matrix;  // D_src x D_dst
  VectorD offset;      // D_dst
  double ridge_lambda = 0;
  std::vector<std::string> emotions;
  std::vector<double> per_emotion_cosine;
  double mse = 0;  // mean over all k·D_dst residual entries
  double frobenius_norm = 0;
  double spectral_flatness = 0;
  double spectral_entropy = 0;

  double mean_cosine() const {
    double s = 0;
    for (double c : per_emotion_cosine) s += c;
    return s / static_cast<double>(per_emotion_cosine.size());
  }

  MatrixD apply(const MatrixD& src) const { return (src * map_matrix).rowwise() + offset.transpose(); }
};

/// Minimizes Σ‖x_i W + b − y_i‖² + λ‖W‖_F² with an unpenalized intercept.
/// Solved through the SVD of the centered sources, so λ = 0 yields the
/// minimum-norm least-squares map.
inline AlignmentResult fit_alignment(const MatrixD& src, const MatrixD& dst, double ridge_lambda,
                                     std::vector<std::string> emotions = {}) {
  const Index k = src.rows();
  if (k < 2) throw SampleError("fit_alignment: need at least 2 corresponding points, got " + std::to_string(k));
  if (dst.rows() != k) throw ShapeError("fit_alignment: source and target row counts differ");
  if (ridge_lambda < 0) throw ConfigError("fit_alignment: ridge_lambda must be >= 0");
  if (emotions.empty())
    for (Index i = 0; i < k; ++i) emotions.push_back(std::to_string(i));
  if (static_cast<Index>(emotions.size()) != k) throw ShapeError("fit_alignment: emotion names do not match rows");

  const RowVectorD x_mean = src.colwise().mean();
  const RowVectorD y_mean = dst.colwise().mean();
  const MatrixD xc = src.rowwise() - x_mean;
  const MatrixD yc = dst.rowwise() - y_mean;

  Eigen::BDCSVD<MatrixD> svd(xc, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const VectorD& s = svd.singularValues();
  const double cutoff = s.size() ? 1e-12 * std::max(1.0, s(0)) : 0.0;
  VectorD filt(s.size());
  for (Index i = 0; i < s.size(); ++i) filt(i) = s(i) > cutoff ? s(i) / (s(i) * s(i) + ridge_lambda) : 0.0;

  AlignmentResult r;
  r.ridge_lambda = ridge_lambda;
  r.emotions = std::move(emotions);
  r.map_matrix = svd.matrixV() * filt.asDiagonal() * (svd.matrixU().transpose() * yc);
  r.offset = (y_mean - x_mean * r.map_matrix).transpose();

  const MatrixD pred = r.apply(src);
  const MatrixD resid = pred - dst;
  r.mse = resid.squaredNorm() / static_cast<double>(resid.size());
  for (Index i = 0; i < k; ++i) {
    const double ny = dst.row(i).norm();
    const double np = pred.row(i).norm();
    if (ny == 0 || np == 0)
      throw UndefinedError("fit_alignment: cosine undefined for emotion '" + r.emotions[static_cast<std::size_t>(i)] +
                           "' (zero-norm vector)");
    r.per_emotion_cosine.push_back(std::clamp(pred.row(i).dot(dst.row(i)) / (np * ny), -1.0, 1.0));
  }
  r.frobenius_norm = r.map_matrix.norm();
  const auto spec = spectral_stats(r.map_matrix);
  r.spectral_flatness = spec.flatness;
  r.spectral_entropy = spec.entropy;
  return r;
}

struct FidelityReport {
  double stress1 = 0;
  double stress2 = 0;
  double sammon = 0;
  double avg_distortion = 1;
  double l2_distortion = 1;
  double sigma_distortion = 0;
  Index pair_count = 0;
  double scale_factor = 1;  // s*
};

inline std::vector<double> pairwise_distances(const MatrixD& pts) {
  std::vector<double> d;
  for (Index i = 0; i < pts.rows(); ++i)
    for (Index j = i + 1; j < pts.rows(); ++j) d.push_back((pts.row(i) - pts.row(j)).norm());
  return d;
}

/// Compares the pairwise-distance geometry of two corresponding point sets.
/// Stresses use optimally rescaled target distances; distortion ratios use
/// raw distances d'/δ.
inline FidelityReport fidelity(const MatrixD& src, const MatrixD& dst, const std::vector<std::string>& names = {}) {
  const Index k = src.rows();
  if (k < 3) throw SampleError("fidelity: need at least 3 points, got " + std::to_string(k));
  if (dst.rows() != k) throw ShapeError("fidelity: point counts differ");
  auto name = [&](Index i) { return names.empty() ? std::to_string(i) : names[static_cast<std::size_t>(i)]; };

  const auto delta = pairwise_distances(src);
  const auto dprime = pairwise_distances(dst);
  {
    std::size_t p = 0;
    for (Index i = 0; i < k; ++i)
      for (Index j = i + 1; j < k; ++j, ++p)
        if (delta[p] == 0)
          throw GeometryError("fidelity: source points '" + name(i) + "' and '" + name(j) + "' coincide");
  }

  double sdd = 0, sd2 = 0;
  for (std::size_t p = 0; p < delta.size(); ++p) {
    sdd += delta[p] * dprime[p];
    sd2 += dprime[p] * dprime[p];
  }
  if (sd2 == 0) throw GeometryError("fidelity: all target points coincide");

  FidelityReport r;
  r.pair_count = static_cast<Index>(delta.size());
  r.scale_factor = sdd / sd2;
  const double m = static_cast<double>(delta.size());
  double delta_mean = 0, delta_sum = 0, delta_sq = 0;
  for (double v : delta) delta_sum += v, delta_sq += v * v;
  delta_mean = delta_sum / m;

  double resid_sq = 0, spread = 0, sammon = 0, rsum = 0, rsq = 0;
  std::vector<double> ratio(delta.size());
  for (std::size_t p = 0; p < delta.size(); ++p) {
    const double d = r.scale_factor * dprime[p];
    const double e = d - delta[p];
    resid_sq += e * e;
    spread += (delta[p] - delta_mean) * (delta[p] - delta_mean);
    sammon += e * e / delta[p];
    ratio[p] = dprime[p] / delta[p];
    rsum += ratio[p];
    rsq += ratio[p] * ratio[p];
  }
  r.stress1 = std::sqrt(resid_sq / delta_sq);
  if (spread > 0) {
    r.stress2 = std::sqrt(resid_sq / spread);
  } else {
    // Equidistant source configuration: stress-2's denominator vanishes.
    r.stress2 = resid_sq == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  }
  r.sammon = sammon / delta_sum;
  r.avg_distortion = rsum / m;
  r.l2_distortion = std::sqrt(rsq / m);
  double sig = 0;
  for (double v : ratio) {
    const double q = v / r.avg_distortion - 1.0;
    sig += q * q;
  }
  r.sigma_distortion = sig / m;
  return r;
}

struct DistortionThresholds {
  double ratio = 5.0;  // avg or ℓ2 distortion above this flags a layer
  double sigma = 2.0;
};

inline bool is_highly_distorted(const FidelityReport& r, const DistortionThresholds& t = {}) {
  return r.avg_distortion > t.ratio || r.l2_distortion > t.ratio || r.sigma_distortion > t.sigma;
}

struct DistortionFlags {
  double flagged_fraction = 0;
  std::vector<bool> flags;
};

inline DistortionFlags flag_high_distortion(const std::vector<FidelityReport>& reports,
                                            const DistortionThresholds& t = {}) {
  if (reports.empty()) throw SampleError("flag_high_distortion: no reports");
  DistortionFlags out;
  Index flagged = 0;
  for (const auto& r : reports) {
    out.flags.push_back(is_highly_distorted(r, t));
    flagged += out.flags.back();
  }
  out.flagged_fraction = static_cast<double>(flagged) / static_cast<double>(reports.size());
  return out;
}

/// Renders a fraction in the "43%*" convention used for heavily distorted cells.
inline std::string flagged_cell(double fraction) {
  return std::to_string(static_cast<int>(std::lround(100.0 * fraction))) + "%*";
}

}  // namespace emospace
