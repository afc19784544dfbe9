// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.
//
//   acceptance <work-dir> [criterion numbers...]

#include "emospace/pipeline.hpp"
#include "emospace/text_stats.hpp"

#include "oracles.hpp"
#include "text_fixtures.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

using namespace emospace;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Check = std::function<Outcome(const fs::path&)>;

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::string> labels_of(const BundleData& b) {
  std::vector<std::string> out;
  for (const auto& l : b.labels) out.push_back(l.emotion);
  return out;
}

// ------------------------------------------------------------------ 1

Outcome auroc_oracle(const fs::path&) {
  const auto t0 = std::chrono::steady_clock::now();
  CounterRng rng(1001);
  int mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(499);
    std::vector<double> s(n);
    std::vector<std::uint8_t> pos(n);
    const auto grid = 2 + rng.below(40);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(grid));
      pos[i] = rng.uniform() < 0.3;
    }
    pos[0] = 1;
    pos[1] = 0;
    mismatches += auroc(s, pos) != oracle::auroc(s, pos);
  }
  const double t = seconds_since(t0);
  return {mismatches == 0 && t < 10, std::to_string(mismatches) + " mismatches / 200, " + fmt(t) + " s"};
}

// ------------------------------------------------------------------ 2

Outcome rank_oracle(const fs::path&) {
  CounterRng rng(1002);
  double worst_s = 0, worst_k = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = 3 + rng.below(10);
    std::vector<double> x(k), y(k);
    const bool ties = trial % 2 == 0;
    for (std::size_t i = 0; i < k; ++i) {
      x[i] = ties ? static_cast<double>(rng.below(4)) : rng.normal();
      y[i] = ties ? static_cast<double>(rng.below(4)) : rng.normal();
    }
    x[0] = 0, x[1] = 1, y[0] = 1, y[1] = 0;
    worst_s = std::max(worst_s, std::abs(spearman(x, y) - oracle::spearman(x, y)));
    worst_k = std::max(worst_k, std::abs(kendall_tau(x, y) - oracle::kendall(x, y)));
  }
  return {worst_s <= 1e-12 && worst_k <= 1e-12,
          "max |diff| spearman " + fmt(worst_s) + ", kendall " + fmt(worst_k)};
}

// ------------------------------------------------------------------ 3

MatrixD points_1d(std::initializer_list<double> v) {
  MatrixD m(static_cast<Index>(v.size()), 1);
  Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

// Independent recomputation of the 1D fixture straight from the definitions.
FidelityReport fixture_by_hand() {
  const double delta[3] = {1, 3, 2}, dp[3] = {1, 4, 3};
  double sdd = 0, sd2 = 0, d2 = 0, dsum = 0;
  for (int p = 0; p < 3; ++p) sdd += delta[p] * dp[p], sd2 += dp[p] * dp[p], d2 += delta[p] * delta[p], dsum += delta[p];
  const double s = sdd / sd2;
  double res = 0, sam = 0, avg = 0, l2 = 0, spread = 0;
  for (int p = 0; p < 3; ++p) {
    const double e = s * dp[p] - delta[p];
    res += e * e;
    sam += e * e / delta[p];
    avg += dp[p] / delta[p] / 3;
    l2 += dp[p] * dp[p] / (delta[p] * delta[p]) / 3;
    spread += (delta[p] - dsum / 3) * (delta[p] - dsum / 3);
  }
  double sig = 0;
  for (int p = 0; p < 3; ++p) sig += std::pow(dp[p] / delta[p] / avg - 1, 2) / 3;
  FidelityReport r;
  r.stress1 = std::sqrt(res / d2);
  r.stress2 = std::sqrt(res / spread);
  r.sammon = sam / dsum;
  r.avg_distortion = avg;
  r.l2_distortion = std::sqrt(l2);
  r.sigma_distortion = sig;
  return r;
}

Outcome fidelity_identities(const fs::path&) {
  bool ok = true;
  double worst_stress = 0, worst_sigma = 0, worst_avg = 0;
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    CounterRng rng(2000 + seed);
    const MatrixD x = random_normal<double>(9, 6, rng, 1.0);
    const MatrixD q = PlantedGeometry::haar_orthogonal(6, rng);
    const auto rot = fidelity(x, x * q);
    const auto sc = fidelity(x, 2.0 * x);
    for (const auto& r : {rot, sc})
      worst_stress = std::max({worst_stress, r.stress1, r.stress2, r.sammon});
    worst_sigma = std::max({worst_sigma, rot.sigma_distortion, sc.sigma_distortion});
    worst_avg = std::max(worst_avg, std::abs(sc.avg_distortion - 2.0));
  }
  ok = worst_stress <= 1e-9 && worst_sigma <= 1e-12 && worst_avg <= 1e-9;

  const auto f = fidelity(points_1d({0, 1, 3}), points_1d({0, 1, 4}));
  const auto h = fixture_by_hand();
  const double dev = std::max({std::abs(f.stress1 - 0.0908), std::abs(f.avg_distortion - 1.2778),
                               std::abs(f.l2_distortion - 1.2946), std::abs(f.sigma_distortion - 0.0265)});
  const double vs_hand = std::max({std::abs(f.stress1 - h.stress1), std::abs(f.stress2 - h.stress2),
                                   std::abs(f.sammon - h.sammon), std::abs(f.avg_distortion - h.avg_distortion),
                                   std::abs(f.l2_distortion - h.l2_distortion),
                                   std::abs(f.sigma_distortion - h.sigma_distortion)});
  ok = ok && dev <= 1e-3 && vs_hand <= 1e-3;
  return {ok, "stress " + fmt(worst_stress) + ", sigma " + fmt(worst_sigma) + ", |avg-2| " + fmt(worst_avg) +
                  "; fixture stress1 " + fmt(f.stress1) + " avg " + fmt(f.avg_distortion) + " l2 " +
                  fmt(f.l2_distortion) + " sigma " + fmt(f.sigma_distortion)};
}

// ------------------------------------------------------------------ 4

Outcome subspace_recovery(const fs::path&) {
  GeometrySpec g;
  g.intrinsic_rank = 3;
  g.noise_scale = 0;
  g.seed = 4;
  BundleOptions opt;
  opt.layers = 2;
  const auto b = generate_activation_bundle(g, 20, opt);
  double worst_ratio = 0, worst_orth = 0, worst_tail = 0;
  for (const auto& m : b.matrices) {
    if (m.payload != Payload::pooled) continue;
    const MatrixD x = to_double(m.values);
    const auto fit = fit_subspace_full(x, 6);
    const auto& sv = fit.all_singular_values;
    worst_ratio = std::max(worst_ratio, sv(3) / sv(0));
    const MatrixD gram = fit.subspace.components * fit.subspace.components.transpose();
    worst_orth = std::max(worst_orth, (gram - MatrixD::Identity(6, 6)).cwiseAbs().maxCoeff());
    // Tail formula on a truncation that leaves real signal out.
    const auto fit2 = fit_subspace_full(x, 2);
    const MatrixD rec = reconstruct(fit2.subspace, project(fit2.subspace, x));
    worst_tail = std::max(worst_tail, std::abs((x - rec).norm() - fit2.tail_error()) / fit2.tail_error());
  }
  return {worst_ratio <= 1e-6 && worst_orth <= 1e-6 && worst_tail <= 1e-5,
          "sigma4/sigma1 " + fmt(worst_ratio) + ", orthonormality " + fmt(worst_orth) + ", tail rel " +
              fmt(worst_tail)};
}

// ------------------------------------------------------------------ 5

double off_one(double v) { return std::abs(v - 1.0); }

Outcome self_alignment(const fs::path& work) {
  PipelineConfig c = load_config({}, {"run.output_dir=" + (work / "c5").string(), "run.seed=5", "analysis.ridge=0"});
  const auto in = resolve_inputs(c);
  const auto src = ActivationBundle::open(in.source);
  const auto shuffled = ActivationBundle::open(in.targets.at(1));
  UniversalityParts parts;
  parts.probe = false;
  double worst_mse = 0, worst_cos = 1;
  bool ordering = true;
  std::string why;
  for (const auto& tap : src.taps()) {
    const auto self = universality_cell(src, src, tap, c, parts);
    worst_mse = std::max(worst_mse, self.alignment.mse);
    for (double v : self.alignment.per_emotion_cosine) worst_cos = std::min(worst_cos, v);
    const auto ctl = universality_cell(src, shuffled, tap, c, parts);
    const auto& a = self.fidelity;
    const auto& b = ctl.fidelity;
    const bool worse = b.stress1 > a.stress1 && b.stress2 > a.stress2 && b.sammon > a.sammon &&
                       b.sigma_distortion > a.sigma_distortion &&
                       off_one(b.avg_distortion) > off_one(a.avg_distortion) &&
                       off_one(b.l2_distortion) > off_one(a.l2_distortion);
    if (!worse && ordering) why = " (control not worse at " + tap.str() + ")";
    ordering = ordering && worse;
  }
  return {worst_mse <= 1e-10 && worst_cos >= 1 - 1e-9 && ordering,
          "max mse " + fmt(worst_mse) + ", min cosine 1-" + fmt(1 - worst_cos) + ", shuffled worse on all metrics: " +
              (ordering ? "yes" : "no") + why};
}

// ------------------------------------------------------------------ 6

MatrixD pooled_of(const BundleData& b, int layer, const std::string& sub) {
  for (const auto& m : b.matrices)
    if (m.payload == Payload::pooled && m.layer == layer && m.sublayer == sub) return to_double(m.values);
  throw NotFoundError("tap missing");
}

Outcome probe_transfer_check(const fs::path&) {
  const auto t0 = std::chrono::steady_clock::now();
  GeometrySpec g;
  g.seed = 6;
  BundleOptions opt;
  opt.layers = 2;
  const auto src = generate_activation_bundle(g, 40, opt);
  opt.noise_seed = 606;
  const auto same = generate_activation_bundle(g, 40, opt);
  const auto ls = labels_of(src);
  const MatrixD xs = pooled_of(src, 1, "mlp");

  const auto sub = fit_subspace(xs, 50);
  const auto fit = train_probe(project(sub, xs), ls, {}, default_emotions());
  const double acc = evaluate_probe(fit.probe, project(sub, pooled_of(same, 1, "mlp")), labels_of(same)).accuracy;

  // Fresh centroid directions and tap rotations: same labels, unrelated geometry.
  double rand_sum = 0;
  const int trials = 40;
  for (int t = 0; t < trials; ++t) {
    GeometrySpec r = g;
    r.seed = 7000 + static_cast<std::uint64_t>(t);
    const auto b = generate_activation_bundle(r, 40, opt);
    rand_sum += evaluate_probe(fit.probe, project(sub, pooled_of(b, 1, "mlp")), labels_of(b)).accuracy;
  }
  const double rand_acc = rand_sum / trials;
  const double t = seconds_since(t0);
  return {acc >= 0.95 && std::abs(rand_acc - 1.0 / 9.0) <= 0.05 && t < 60,
          "transfer " + fmt(acc) + " (9 classes), direction-randomized mean " + fmt(rand_acc) + " over " +
              std::to_string(trials) + " targets, " + fmt(t) + " s"};
}

// ------------------------------------------------------------------ 7

Outcome rank_consistency_check(const fs::path& work) {
  GeometrySpec g;
  g.seed = 7;
  BundleOptions opt;
  opt.layers = 6;
  write_bundle(generate_activation_bundle(g, 30, opt), work / "c7");
  const auto b = ActivationBundle::open(work / "c7");
  const auto series = rank_series(b, 50, 3);
  RankSeries flipped = series;
  for (auto& [k, m] : flipped.coords)
    if (k.layer % 2 == 1) m = -m;
  double worst = 1;
  for (const RankSeries* s : {&series, static_cast<const RankSeries*>(&flipped)})
    for (auto method : {RankMethod::spearman, RankMethod::kendall})
      for (const auto& row : consistency_matrix(*s, method, 3)) worst = std::min(worst, row.mean);
  return {worst >= 0.999, "min per-PC mean over Spearman/Kendall, plain and half-flipped: " + fmt(worst)};
}

// ------------------------------------------------------------------ 8 / 9 / 10

PipelineConfig steering_config(const fs::path& out) {
  return load_config({}, {"run.output_dir=" + out.string(), "run.seed=9"});
}

std::optional<Testbed> g_testbed;
double g_testbed_seconds = 0;

const Testbed& testbed(const fs::path& work) {
  if (!g_testbed) {
    const auto t0 = std::chrono::steady_clock::now();
    g_testbed = build_testbed(steering_config(work / "c9"));
    g_testbed_seconds = seconds_since(t0);
  }
  return *g_testbed;
}

double plain_rel(double a, double b) {
  const double den = std::max(std::abs(a), std::abs(b));
  return den == 0 ? 0.0 : std::abs(a - b) / den;
}

Outcome gradient_check(const fs::path& work) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& tb = testbed(work);
  const auto& cfg = tb.model.config;
  const auto pd = tb.model.params.cast<double>();
  SteeringConfig sc;
  sc.rank = 12;
  sc.hidden_width = 10;
  const std::vector<TapKey> taps{{0, "mlp"}, {1, "attn"}, {2, "mlp"}, {3, "attn"}};
  auto m = init_module("happy", tb.subspaces, taps, sc);
  CounterRng rng(808);
  m.visit_trainable([&](MatrixD& w) { w += random_normal<double>(w.rows(), w.cols(), rng, 0.05); });
  const auto tok = steering_tokens(tb.corpus, "happy", true);
  std::vector<std::size_t> batch;
  for (std::size_t i = 0; i < 8; ++i) batch.push_back(i * 7 % tb.train.sequences.size());

  std::vector<MatrixD> grads;
  batch_loss<double>(cfg, pd, m, tb.train, batch, tok, sc, &grads);
  // Four tensors per tap; six random coordinates per tap.
  std::vector<MatrixD*> tensors;
  m.visit_trainable([&](MatrixD& w) { tensors.push_back(&w); });
  double worst = 0;
  int checked = 0;
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const int per_tensor = t % 4 == 1 || t % 4 == 3 ? 1 : 2;  // biases are small; weights get more draws
    for (int draw = 0; draw < per_tensor; ++draw) {
      auto& w = *tensors[t];
      const Index k = static_cast<Index>(rng.below(static_cast<std::uint64_t>(w.size())));
      const double o = w.data()[k];
      w.data()[k] = o + 1e-5;
      const double up = batch_loss<double>(cfg, pd, m, tb.train, batch, tok, sc, nullptr).total;
      w.data()[k] = o - 1e-5;
      const double dn = batch_loss<double>(cfg, pd, m, tb.train, batch, tok, sc, nullptr).total;
      w.data()[k] = o;
      worst = std::max(worst, plain_rel((up - dn) / 2e-5, grads[t].data()[k]));
      ++checked;
    }
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-4 && checked >= 20 && t < 300,
          std::to_string(checked) + " coordinates over " + std::to_string(taps.size()) +
              " taps, max relative error " + fmt(worst) + ", " + fmt(t) + " s (incl. testbed)"};
}

Outcome steering_fixture(const fs::path& work) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto c = steering_config(work / "c9");
  const auto& tb = testbed(work);
  const auto rep = run_steering(c, tb);
  const auto& s = rep.metrics.value("steering", nlohmann::json::object());
  const double post = s.value("mean_post_top1", 0.0), base = s.value("mean_baseline_top1", 0.0);
  const double sem = s.value("mean_sem_loss", 1e9);
  const int failures = s.value("failures", -1);

  auto zero = init_module("sad", tb.subspaces, tb.model.taps(), c.steering);
  const auto cell = evaluate_steering(zero, tb.model, tb.test, steering_tokens(tb.corpus, "sad", true));
  const bool identity = cell.baseline_top1 == cell.post_top1;
  const double t = seconds_since(t0) + g_testbed_seconds;

  std::vector<std::string> fails;
  if (tb.clean_accuracy < 0.95) fails.push_back("clean accuracy");
  if (!rep.ok()) fails.push_back("cell errors");
  if (post < 0.85) fails.push_back("post_top1");
  if (sem > 0.3) fails.push_back("semantic loss");
  if (failures != 0) fails.push_back("failure flags");
  if (!identity) fails.push_back("zero-module identity");
  if (t >= 900) fails.push_back("runtime");
  std::string detail = "clean acc " + fmt(tb.clean_accuracy) + ", baseline " + fmt(base) + " -> post " + fmt(post) +
                       " (sem " + fmt(sem) + "), failures " + std::to_string(failures) + ", zero module " +
                       (identity ? "exact" : "differs") + ", " + fmt(t) + " s";
  if (!fails.empty()) {
    detail += "; unmet:";
    for (const auto& f : fails) detail += " " + f;
  }
  return {fails.empty(), detail};
}

Outcome ablation_check(const fs::path& work) {
  auto c = steering_config(work / "c10");
  c.ablation_emotions = {"sad", "fear"};
  c.ablation_steps = 150;
  std::vector<AblationRow> rows;
  run_ablation(c, testbed(work), &rows);
  const auto table = csv::Table::load(c.output_dir / "ablation.csv");
  const auto grid = ablation_grid();
  bool names = rows.size() == grid.size() && table.size() == grid.size();
  int skipped = 0;
  double base = -1, no_margin = -1;
  for (std::size_t i = 0; names && i < rows.size(); ++i) {
    names = table.at(i, "config") == grid[i].name;
    skipped += rows[i].status != "ok";
    if (rows[i].name == "Baseline" && rows[i].status == "ok") base = rows[i].post_top1;
    if (rows[i].name == "No Emotion Margin Loss" && rows[i].status == "ok") no_margin = rows[i].post_top1;
  }
  const bool direction = base >= 0 && no_margin >= 0 && no_margin < base;
  return {names && direction, std::to_string(table.size()) + " rows for " + std::to_string(grid.size()) +
                                  " configs (" + std::to_string(skipped) + " skipped), post_top1 baseline " +
                                  fmt(base) + " vs no-margin " + fmt(no_margin)};
}

// ------------------------------------------------------------------ 11

Outcome readability(const fs::path&) {
  using namespace text;
  const text::FamiliarWords fam(fixtures::kFamiliar);
  StatsOptions opt;
  opt.familiar = &fam;
  const auto d = document_stats(fixtures::kTwentyWords, opt);
  const double fk_expected = 0.39 * 20.0 / 3.0 + 11.8 * 24.0 / 20.0 - 15.59;
  const double dc_expected = 0.1579 * 15.0 + 0.0496 * 20.0 / 3.0 + 3.6365;
  const double err = std::max({std::abs(fk_grade(10, 1, 15) - 6.01), std::abs(dale_chall(10, 1, 0.0) - 0.496),
                               std::abs(*d->fk_grade - fk_expected), std::abs(*d->dale_chall - dc_expected)});
  StatsOptions plain;
  plain.compute_dale_chall = false;
  const double rep = document_stats(fixtures::kRepetitive, plain)->ttr;
  const double var = document_stats(fixtures::kVaried, plain)->ttr;
  return {err <= 1e-6 && rep < var,
          "max fixture error " + fmt(err) + ", TTR repetitive " + fmt(rep) + " < varied " + fmt(var)};
}

// ------------------------------------------------------------------ 12

std::vector<std::string> small_run(const fs::path& out) {
  return {"run.output_dir=" + out.string(), "run.seed=12", "data.hidden_dim=24", "data.n_per_emotion=16",
          "data.layers=2", "analysis.rank=12", "toylm.hidden_dim=16", "toylm.n_layers=2", "toylm.n_heads=2",
          "toylm.corpus_n_per_emotion=20", "toylm.pretrain_steps=60", "steering.rank=8", "steering.steps=10",
          "steering.warmup_steps=2", "steering.emotions=sad,happy", "steering.ablation_emotions=sad",
          "steering.ablation_steps=4"};
}

Outcome determinism(const fs::path& work) {
  RunSelection sel;
  sel.ablation = true;
  for (const auto* run : {"c12a", "c12b"}) run_all(load_config({}, small_run(work / run)), sel);
  int files = 0, differ = 0;
  std::string first;
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(work / "c12a"))
    if (e.path().extension() == ".csv") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    const auto rel = fs::relative(p, work / "c12a");
    ++files;
    if (!fs::exists(work / "c12b" / rel) || slurp(p) != slurp(work / "c12b" / rel)) {
      ++differ;
      if (first.empty()) first = rel.string();
    }
  }
  return {files > 0 && differ == 0, std::to_string(files) + " CSVs compared, " + std::to_string(differ) + " differ" +
                                        (first.empty() ? "" : " (first: " + first + ")")};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "emospace_acceptance";
  std::set<int> only;
  for (int i = 2; i < argc; ++i) only.insert(std::atoi(argv[i]));
  fs::remove_all(work);
  fs::create_directories(work);

  const std::vector<std::pair<std::string, Check>> criteria{
      {"AUROC equals pair counting", auroc_oracle},
      {"Spearman and Kendall equal enumeration", rank_oracle},
      {"fidelity identities and 1D fixture", fidelity_identities},
      {"subspace recovery", subspace_recovery},
      {"self-alignment and shuffled control", self_alignment},
      {"probe transfer", probe_transfer_check},
      {"rank consistency under polarity control", rank_consistency_check},
      {"steering gradients vs finite differences", gradient_check},
      {"end-to-end steering fixture", steering_fixture},
      {"ablation grid", ablation_check},
      {"readability fixtures and TTR ordering", readability},
      {"byte-identical reruns", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second(work);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %2d  %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
