#include "emospace/alignment.hpp"
#include "emospace/aura.hpp"
#include "emospace/probes.hpp"
#include "emospace/rank_consistency.hpp"
#include "emospace/synthetic.hpp"

#include "oracles.hpp"
#include "test_util.hpp"

using namespace emospace;

namespace {

MatrixD random_matrix(Index r, Index c, std::uint64_t seed) {
  CounterRng rng(seed);
  MatrixD m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

MatrixD column_points(std::initializer_list<double> v) {
  MatrixD m(static_cast<Index>(v.size()), 1);
  Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

}  // namespace

// ---------------------------------------------------------------- fidelity

TEST(Fidelity, OneDimensionalFixture) {
  // delta = (1, 3, 2), d' = (1, 4, 3): s* = 19/26, residuals (-7, -2, 5)/26.
  const auto r = fidelity(column_points({0, 1, 3}), column_points({0, 1, 4}));
  EXPECT_NEAR(r.scale_factor, 19.0 / 26.0, 1e-15);
  EXPECT_NEAR(r.stress1, std::sqrt(78.0 / 676.0 / 14.0), 1e-12);
  EXPECT_NEAR(r.stress2, std::sqrt(78.0 / 676.0 / 2.0), 1e-12);
  EXPECT_NEAR(r.sammon, (49.0 / 676 / 1 + 4.0 / 676 / 3 + 25.0 / 676 / 2) / 6.0, 1e-12);
  const double avg = (1.0 + 4.0 / 3.0 + 1.5) / 3.0;
  EXPECT_NEAR(r.avg_distortion, avg, 1e-12);
  EXPECT_NEAR(r.l2_distortion, std::sqrt((1.0 + 16.0 / 9.0 + 2.25) / 3.0), 1e-12);
  const double sig = (std::pow(1 / avg - 1, 2) + std::pow(4.0 / 3 / avg - 1, 2) + std::pow(1.5 / avg - 1, 2)) / 3;
  EXPECT_NEAR(r.sigma_distortion, sig, 1e-12);
  EXPECT_NEAR(r.stress1, 0.0908, 1e-3);
  EXPECT_NEAR(r.avg_distortion, 1.2778, 1e-3);
  EXPECT_NEAR(r.l2_distortion, 1.2946, 1e-3);
  EXPECT_NEAR(r.sigma_distortion, 0.0265, 1e-3);
}

TEST(Fidelity, RotationAndScaleInvariants) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const MatrixD x = random_matrix(9, 5, seed);
    CounterRng rng(seed + 100);
    const MatrixD q = PlantedGeometry::haar_orthogonal(5, rng);
    const MatrixD shift = RowVectorD::Constant(5, 3.0).replicate(9, 1);
    const auto rot = fidelity(x, x * q + shift);
    EXPECT_LE(rot.stress1, 1e-9);
    EXPECT_LE(rot.stress2, 1e-9);
    EXPECT_LE(rot.sammon, 1e-9);
    EXPECT_LE(rot.sigma_distortion, 1e-12);
    EXPECT_NEAR(rot.avg_distortion, 1.0, 1e-9);
    const auto sc = fidelity(x, 2.0 * x);
    EXPECT_NEAR(sc.avg_distortion, 2.0, 1e-9);
    EXPECT_LE(sc.sigma_distortion, 1e-12);
    EXPECT_LE(sc.stress1, 1e-9);
    // Stress is invariant to a uniform rescale of the target.
    const MatrixD y = random_matrix(9, 5, seed + 7);
    EXPECT_NEAR(fidelity(x, y).stress1, fidelity(x, 3.5 * y).stress1, 1e-12);
  }
}

TEST(Fidelity, DegenerateInputs) {
  EXPECT_THROW(fidelity(column_points({0, 1}), column_points({0, 1})), SampleError);
  EXPECT_THROW(fidelity(column_points({0, 0, 1}), column_points({0, 1, 2})), GeometryError);
  EXPECT_THROW(fidelity(column_points({0, 1, 2}), column_points({5, 5, 5})), GeometryError);
}

TEST(Fidelity, DistortionFlags) {
  FidelityReport a, b;
  b.avg_distortion = 6;
  const auto f = flag_high_distortion({a, b, a, a});
  EXPECT_DOUBLE_EQ(f.flagged_fraction, 0.25);
  EXPECT_EQ(flagged_cell(3.0 / 7.0), "43%*");
  FidelityReport c;
  c.sigma_distortion = 2.5;
  EXPECT_TRUE(is_highly_distorted(c));
}

// ---------------------------------------------------------------- alignment

TEST(Alignment, FlatnessFixture) {
  MatrixD w = MatrixD::Zero(3, 3);
  w.diagonal() << 4, 1, 1;
  const auto s = spectral_stats(w);
  EXPECT_NEAR(s.flatness, std::cbrt(4.0) / 2.0, 1e-12);
  EXPECT_NEAR(s.flatness, 0.7937, 1e-4);
  EXPECT_EQ(s.effective_rank, 3);
  EXPECT_THROW(spectral_stats(MatrixD::Zero(2, 2)), GeometryError);
}

TEST(Alignment, SelfAlignmentIsIdentityAtRidgeZero) {
  const MatrixD x = random_matrix(9, 6, 4);
  const auto r = fit_alignment(x, x, 0.0);
  EXPECT_LE(r.mse, 1e-20);
  for (double c : r.per_emotion_cosine) EXPECT_NEAR(c, 1.0, 1e-12);
  EXPECT_NEAR((r.apply(x) - x).norm(), 0, 1e-10);
}

TEST(Alignment, RecoversPlantedAffineMap) {
  const MatrixD x = random_matrix(20, 4, 5);
  const MatrixD w = random_matrix(4, 3, 6);
  VectorD b(3);
  b << 1, -2, 0.5;
  const MatrixD y = (x * w).rowwise() + b.transpose();
  const auto r = fit_alignment(x, y, 0.0);
  EXPECT_NEAR((r.map_matrix - w).norm(), 0, 1e-9);
  EXPECT_NEAR((r.offset - b).norm(), 0, 1e-9);
}

TEST(Alignment, RidgeMatchesNormalEquations) {
  const MatrixD x = random_matrix(15, 4, 7);
  const MatrixD y = random_matrix(15, 3, 8);
  const double lambda = 0.7;
  const auto r = fit_alignment(x, y, lambda);
  const MatrixD xc = x.rowwise() - x.colwise().mean();
  const MatrixD yc = y.rowwise() - y.colwise().mean();
  const MatrixD w = (xc.transpose() * xc + lambda * MatrixD::Identity(4, 4)).ldlt().solve(xc.transpose() * yc);
  EXPECT_NEAR((r.map_matrix - w).norm(), 0, 1e-10);
  EXPECT_THROW(fit_alignment(x, y, -1), ConfigError);
  EXPECT_THROW(fit_alignment(x, y.topRows(3), 0), ShapeError);
}

TEST(Alignment, MoreDimsThanPointsStillExact) {
  const MatrixD x = random_matrix(5, 12, 9);
  const MatrixD y = random_matrix(5, 8, 10);
  const auto r = fit_alignment(x, y, 0.0);
  EXPECT_LE(r.mse, 1e-20);
  EXPECT_LE(spectral_stats(r.map_matrix).effective_rank, 4);
}

// ---------------------------------------------------------------- aura

TEST(Aura, MatchesPairCountingOracle) {
  CounterRng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(120);
    std::vector<double> s(n);
    std::vector<std::uint8_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(8));  // coarse grid forces ties
      pos[i] = rng.below(3) == 0;
    }
    pos[0] = 1;
    pos[1] = 0;
    EXPECT_EQ(auroc(s, pos), oracle::auroc(s, pos));
    EXPECT_NEAR(auprc(s, pos), oracle::auprc(s, pos), 1e-12);
  }
}

TEST(Aura, KnownValues) {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<std::uint8_t> pos{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(auroc(s, pos), 0.75);
  EXPECT_NEAR(auprc(s, pos), 0.5 * 1.0 + 0.5 * (2.0 / 3.0), 1e-15);
  const std::vector<double> flat{1, 1, 1};
  EXPECT_DOUBLE_EQ(auroc(flat, std::vector<std::uint8_t>{1, 0, 0}), 0.5);
  EXPECT_THROW(auroc(flat, std::vector<std::uint8_t>{1, 1, 1}), UndefinedError);
}

TEST(Aura, ScoreTableAndExperts) {
  TokenMatrix t;
  t.values.resize(6, 2);
  t.values << 1, 0, 5, 0, 0, 1, 0, 2, 9, 9, 0, 3;
  t.offsets = {0, 2, 3, 5};
  t.counts = {2, 1, 2, 1};
  const MatrixD r = neuron_responses(t);
  EXPECT_EQ(r(0, 0), 5);
  EXPECT_EQ(r(2, 1), 9);
  const auto table = score_neurons(r, {"a", "b", "a", "b"}, {"a", "b"}, 1, "mlp");
  EXPECT_DOUBLE_EQ(table.auroc(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(table.auroc(0, 1), 0.0);
  const auto sum = expert_summary({table}, 0.9);
  ASSERT_EQ(sum.cells.size(), 2u);
  EXPECT_DOUBLE_EQ(sum.cells[0].fraction, 0.5);
  EXPECT_THROW(expert_summary({table}, 0.4), ConfigError);
  EXPECT_THROW(score_neurons(r, {"a", "a", "a", "a"}, {"a", "b"}), UndefinedError);
}

// ---------------------------------------------------------------- rank

TEST(Rank, MatchesEnumerationOracle) {
  CounterRng rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = 3 + rng.below(10);
    std::vector<double> x(k), y(k);
    for (std::size_t i = 0; i < k; ++i) {
      x[i] = static_cast<double>(rng.below(6));
      y[i] = static_cast<double>(rng.below(6));
    }
    x[0] = 0;
    x[1] = 1;
    y[0] = 5;
    y[1] = 2;
    EXPECT_NEAR(spearman(x, y), oracle::spearman(x, y), 1e-12);
    EXPECT_NEAR(kendall_tau(x, y), oracle::kendall(x, y), 1e-12);
  }
}

TEST(Rank, KnownValues) {
  const std::vector<double> a{1, 2, 3, 4}, b{4, 3, 2, 1};
  EXPECT_DOUBLE_EQ(spearman(a, a), 1.0);
  EXPECT_DOUBLE_EQ(kendall_tau(a, b), -1.0);
  const std::vector<double> c{1, 2, 3}, d{1, 3, 2};
  EXPECT_NEAR(kendall_tau(c, d), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(spearman(c, d), 0.5, 1e-15);
  EXPECT_THROW(spearman(std::vector<double>{1, 1, 1}, c), UndefinedError);
  EXPECT_THROW(kendall_tau(std::vector<double>{1, 2}, std::vector<double>{1, 2}), SampleError);
}

TEST(Rank, PolarityControlHandlesFlippedLayers) {
  RankSeries s;
  s.emotions = {"a", "b", "c", "d", "e"};
  const MatrixD base = random_matrix(5, 2, 13);
  for (int l = 0; l < 6; ++l) s.add({l, "mlp"}, (l % 2 ? -1.0 : 1.0) * base);
  for (auto m : {RankMethod::spearman, RankMethod::kendall}) {
    const auto rows = consistency_matrix(s, m, 2);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_NEAR(rows[0].mean, 1.0, 1e-12);
    EXPECT_EQ(rows[0].n_pairs, 15);
    EXPECT_LT(rows[0].mean_unflipped, 0.0);
    EXPECT_EQ(consistency_matrix(s, m, 1, true)[0].n_pairs, 5);
  }
  EXPECT_THROW(consistency_matrix(s, RankMethod::kendall, 3), RankError);
}

TEST(Rank, CrossModelReordersEmotions) {
  RankSeries a, b;
  a.emotions = {"x", "y", "z"};
  b.emotions = {"z", "x", "y"};
  MatrixD ca(3, 1), cb(3, 1);
  ca << 1, 2, 3;
  cb << 3, 1, 2;
  a.add({0, "attn"}, ca);
  b.add({0, "attn"}, cb);
  EXPECT_NEAR(consistency_cross(a, b, RankMethod::spearman, 1)[0].mean, 1.0, 1e-12);
  b.emotions = {"z", "x", "w"};
  EXPECT_THROW(consistency_cross(a, b, RankMethod::spearman, 1), AlignmentError);
}

// ---------------------------------------------------------------- probes

TEST(Probe, GradientMatchesFiniteDifferences) {
  const MatrixD x = random_matrix(30, 4, 14);
  std::vector<Index> y;
  for (Index i = 0; i < 30; ++i) y.push_back(i % 3);
  detail::ProbeObjective f{x, y, 0.1};
  MatrixD w = random_matrix(3, 4, 15);
  VectorD b = random_matrix(3, 1, 16);
  MatrixD gw;
  VectorD gb;
  f(w, b, &gw, &gb);
  const double h = 1e-6;
  for (Index i = 0; i < w.size(); ++i) {
    MatrixD wp = w, wm = w;
    wp.data()[i] += h;
    wm.data()[i] -= h;
    EXPECT_NEAR((f(wp, b) - f(wm, b)) / (2 * h), gw.data()[i], 1e-7);
  }
  for (Index i = 0; i < 3; ++i) {
    VectorD bp = b, bm = b;
    bp(i) += h;
    bm(i) -= h;
    EXPECT_NEAR((f(w, bp) - f(w, bm)) / (2 * h), gb(i), 1e-7);
  }
}

TEST(Probe, ConvergesWithMonotoneLoss) {
  GeometrySpec spec;
  spec.seed = 2;
  const auto d = generate_activation_bundle(spec, 30);
  std::vector<std::string> labels;
  for (const auto& l : d.labels) labels.push_back(l.emotion);
  const MatrixD x = to_double(d.matrices[0].values);
  const auto fit = train_probe(x, labels);
  EXPECT_TRUE(fit.info.converged);
  for (std::size_t i = 1; i < fit.info.loss_history.size(); ++i)
    EXPECT_LE(fit.info.loss_history[i], fit.info.loss_history[i - 1] + 1e-12);
  EXPECT_GE(evaluate_probe(fit.probe, x, labels).accuracy, 0.95);
  const auto back = probe_from_json(to_json(fit.probe));
  EXPECT_EQ(back.predict(x), fit.probe.predict(x));
}

TEST(Probe, TransferAcrossResampledBundle) {
  GeometrySpec spec;
  spec.seed = 3;
  BundleOptions opt;
  const auto a = generate_activation_bundle(spec, 30, opt);
  opt.noise_seed = 77;
  const auto b = generate_activation_bundle(spec, 30, opt);
  std::vector<std::string> la, lb;
  for (const auto& l : a.labels) la.push_back(l.emotion);
  for (const auto& l : b.labels) lb.push_back(l.emotion);
  const auto r = probe_transfer(to_double(a.matrices[2].values), la, to_double(b.matrices[2].values), lb, 50);
  EXPECT_GE(r.accuracy, 0.95);
  EXPECT_EQ(r.shared_classes.size(), 9u);
  EXPECT_THROW(probe_transfer(to_double(a.matrices[2].values), la, to_double(b.matrices[2].values),
                              std::vector<std::string>(lb.size(), "zzz"), 50),
               AlignmentError);
}
