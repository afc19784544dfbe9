#include "emospace/pipeline.hpp"

#include "test_util.hpp"

#include <cstdlib>

using namespace emospace;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> small_overrides(const fs::path& out) {
  return {"run.output_dir=" + out.string(),
          "run.seed=21",
          "data.hidden_dim=16",
          "data.intrinsic_rank=4",
          "data.n_per_emotion=12",
          "data.layers=2",
          "analysis.rank=10",
          "toylm.hidden_dim=16",
          "toylm.n_layers=2",
          "toylm.n_heads=2",
          "toylm.corpus_n_per_emotion=16",
          "toylm.clean_n_per_emotion=4",
          "toylm.pretrain_steps=40",
          "steering.rank=8",
          "steering.steps=6",
          "steering.warmup_steps=2",
          "steering.batch_size=8",
          "steering.emotions=sad,fear"};
}

std::string run_cli(const std::string& args) {
  return std::string(EMOSPACE_CLI) + " " + args + " > /dev/null 2>&1";
}

int exit_code(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Config, DefaultsAndIniParsing) {
  const auto dir = testutil::scratch();
  std::ofstream(dir / "c.ini") << "[run]\nseed = 5\n\n[data]\nemotions = joy, sad ,fear\ntoken_level = no\n"
                                  "[analysis]\nridge = 0\n[steering]\npreset = ablation-best\nablate = no_gelu,no_bias\n";
  const auto c = load_config(dir / "c.ini");
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.geometry.seed, 5u);
  EXPECT_EQ(c.steering.seed, 5u);
  EXPECT_EQ(c.geometry.emotion_names, (std::vector<std::string>{"joy", "sad", "fear"}));
  EXPECT_FALSE(c.bundle.token_level);
  EXPECT_EQ(c.ridge, 0.0);
  EXPECT_EQ(c.steering.rank, 20);
  EXPECT_TRUE(c.steering.ablation.no_gelu && c.steering.ablation.no_bias);
  const auto d = load_config({});
  EXPECT_TRUE(d.bundle.token_level);
  EXPECT_EQ(d.steer_emotions, basic_emotions());
}

TEST(Config, OverridesAndErrors) {
  const auto dir = testutil::scratch();
  std::ofstream(dir / "c.ini") << "[analysis]\nrank = 12\n";
  EXPECT_EQ(load_config(dir / "c.ini", {"analysis.rank=7"}).rank, 7);
  std::ofstream(dir / "bad.ini") << "[analysis]\nrnak = 12\n";
  EXPECT_THROW(load_config(dir / "bad.ini"), ConfigError);
  EXPECT_THROW(load_config({}, {"nosection=1"}), ConfigError);
  EXPECT_THROW(load_config({}, {"analysis.rank=abc"}), ConfigError);
  EXPECT_THROW(load_config({}, {"data.rotation=maybe"}), ConfigError);
  EXPECT_THROW(load_config({}, {"steering.ablate=no_fun"}), ConfigError);
  EXPECT_THROW(load_config({}, {"widgets.size=3"}), ConfigError);
  EXPECT_THROW(load_config(dir / "missing.ini"), NotFoundError);
}

TEST(Config, HashTracksEffectiveConfig) {
  const auto a = load_config({});
  const auto b = load_config({});
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  EXPECT_NE(config_hash(a), config_hash(load_config({}, {"analysis.ridge=0.5"})));
  EXPECT_NE(config_hash(a), config_hash(load_config({}, {"run.seed=9"})));
}

TEST(Ablation, GridCoversDiscreteRowsAndSweeps) {
  const auto g = ablation_grid();
  ASSERT_EQ(g.size(), 42u);
  std::map<std::string, int> groups;
  for (const auto& s : g) ++groups[s.group];
  EXPECT_EQ(groups["discrete"], 9);
  EXPECT_EQ(groups["R"], 14);
  EXPECT_EQ(groups["m1"], 5);
  EXPECT_EQ(groups["m2"], 6);
  EXPECT_EQ(groups["ce"], 8);
  EXPECT_EQ(g.front().name, "Baseline");
  EXPECT_EQ(g[7].name, "No Emotion Margin Loss");
  SteeringConfig sc;
  g[7].apply(sc);
  EXPECT_TRUE(sc.ablation.no_margin_loss);
  g[8].apply(sc);
  EXPECT_TRUE(sc.ablation.target_all_layers);
  EXPECT_EQ(g.back().name, "CE Loss Weight=30");
}

TEST(Pipeline, UniversalityAndPsychologyOutputs) {
  const auto dir = testutil::scratch();
  const auto c = load_config({}, small_overrides(dir / "out"));
  const auto in = resolve_inputs(c);
  ASSERT_EQ(in.targets.size(), 2u);
  const auto u = run_universality(c, in);
  EXPECT_TRUE(u.ok());
  for (const auto* f : {"fidelity.csv", "fidelity_summary.csv", "probe_eval.csv", "alignment_resample.csv",
                        "alignment_shuffled.csv"})
    EXPECT_TRUE(fs::exists(dir / "out" / f)) << f;
  const auto fid = csv::Table::load(dir / "out/fidelity.csv");
  EXPECT_EQ(fid.size(), 2u * 4u);
  const auto& m = u.metrics["universality"];
  EXPECT_LT(m["resample"]["max_stress1"].get<double>(), m["shuffled"]["max_stress1"].get<double>());
  EXPECT_GT(m["resample"]["mean_probe_accuracy"].get<double>(), m["shuffled"]["mean_probe_accuracy"].get<double>());

  const auto p = run_psychology(c, in);
  EXPECT_TRUE(p.ok());
  EXPECT_TRUE(fs::exists(dir / "out/aura_summary.csv"));
  EXPECT_TRUE(fs::exists(dir / "out/axes/axes_L1_mlp.csv"));
  const auto rank = csv::Table::load(dir / "out/rank_consistency.csv");
  EXPECT_EQ(rank.size(), 6u);
  for (std::size_t r = 0; r < rank.size(); ++r) EXPECT_GT(std::stod(rank.at(r, "mean")), 0.9);
}

TEST(Pipeline, CellErrorsAreRecordedNotThrown) {
  const auto dir = testutil::scratch();
  auto c = load_config({}, small_overrides(dir / "out"));
  auto in = resolve_inputs(c);
  // A bundle sharing fewer than three emotions with the source.
  GeometrySpec g = c.geometry;
  g.emotion_names = {"sad", "calm"};
  BundleOptions opt = c.bundle;
  opt.dataset = "tiny";
  write_bundle(generate_activation_bundle(g, 6, opt), dir / "tiny");
  in.targets = {dir / "tiny", dir / "nowhere"};
  const auto rep = run_universality(c, in);
  EXPECT_FALSE(rep.ok());
  bool alignment_error = false, missing = false;
  for (const auto& e : rep.errors) {
    alignment_error |= e.message.find("shared emotions") != std::string::npos;
    missing |= e.cell.find("nowhere") != std::string::npos;
  }
  EXPECT_TRUE(alignment_error);
  EXPECT_TRUE(missing);
}

TEST(Pipeline, RerunsAreByteIdentical) {
  const auto dir = testutil::scratch();
  RunSelection sel;
  sel.steering = true;
  for (const auto* run : {"a", "b"}) {
    const auto c = load_config({}, small_overrides(dir / run));
    const auto rep = run_all(c, sel);
    EXPECT_TRUE(rep.ok()) << to_json(rep).dump();
  }
  int compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (e.path().extension() != ".csv") continue;
    const auto rel = fs::relative(e.path(), dir / "a");
    EXPECT_EQ(testutil::slurp(e.path()), testutil::slurp(dir / "b" / rel)) << rel;
    ++compared;
  }
  EXPECT_GE(compared, 10);
  const auto steer = csv::Table::load(dir / "a/steering_report.csv");
  EXPECT_EQ(steer.size(), 2u);
}

TEST(Cli, SubcommandsAndExitCodes) {
  const auto dir = testutil::scratch();
  const auto b = (dir / "b").string();
  EXPECT_EQ(exit_code(run_cli("gen --out " + b + " --n 8 --set data.hidden_dim=12 --set data.intrinsic_rank=3")), 0);
  EXPECT_EQ(exit_code(run_cli("gen --out " + (dir / "b2").string() +
                              " --n 8 --noise-seed 4 --set data.hidden_dim=12 --set data.intrinsic_rank=3")),
            0);
  EXPECT_EQ(exit_code(run_cli("svd --bundle " + b + " --rank 5 --out " + (dir / "svd").string())), 0);
  EXPECT_TRUE(fs::exists(dir / "svd/subspace_L3_mlp.json"));
  EXPECT_EQ(exit_code(run_cli("fidelity --source " + b + " --target " + (dir / "b2").string() + " --out " +
                              (dir / "fid").string())),
            0);
  EXPECT_TRUE(fs::exists(dir / "fid/fidelity.csv"));
  EXPECT_FALSE(fs::exists(dir / "fid/probe_eval.csv"));
  EXPECT_EQ(exit_code(run_cli("rank --bundle " + b + " --against " + (dir / "b2").string() + " --out " +
                              (dir / "rank").string())),
            0);
  // A missing target is a recorded cell failure: exit 2.
  EXPECT_EQ(exit_code(run_cli("align --source " + b + " --target " + (dir / "missing").string() + " --out " +
                              (dir / "al").string())),
            2);
  // An invalid config is a hard error: exit 1.
  EXPECT_EQ(exit_code(run_cli("svd --bundle " + b + " --set analysis.bogus=1")), 1);
  EXPECT_NE(exit_code(run_cli("nonsense")), 0);

  {
    csv::Writer w(dir / "corpus.csv");
    w.row({"text", "dataset", "emotion"});
    w.row({"One short line. Another one here!", "tiny", "joy"});
  }
  EXPECT_EQ(exit_code(run_cli("textstats --corpus " + (dir / "corpus.csv").string() + " --no-dale-chall --out " +
                              (dir / "ts.csv").string())),
            0);
  EXPECT_EQ(csv::Table::load(dir / "ts.csv").at(0, "dale_chall_mean"), "--");
  EXPECT_EQ(exit_code(run_cli("textstats --corpus " + (dir / "corpus.csv").string())), 1);
}
