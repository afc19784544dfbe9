// emospace command-line entry point.
//
// Every subcommand accepts --config <file.ini> and repeated
// --set section.key=value overrides; dedicated flags are shorthands for
// the same keys.  Exit status: 0 clean, 2 when a cell failed, 1 on error.

#include "emospace/pipeline.hpp"
#include "emospace/text_stats.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace fs = std::filesystem;
using namespace emospace;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app, bool with_out = true) {
    app->add_option("--config", config, "INI configuration file")->check(CLI::ExistingFile);
    app->add_option("--set", overrides, "override, section.key=value (repeatable)");
    if (with_out) app->add_option("--out", out, "output directory");
    app->add_option("--seed", seed, "master seed");
  }

  PipelineConfig load(std::vector<std::string> extra = {}) const {
    auto o = overrides;
    if (!out.empty()) o.push_back("run.output_dir=" + out);
    if (seed) o.push_back("run.seed=" + std::to_string(*seed));
    o.insert(o.end(), extra.begin(), extra.end());
    return load_config(config, o);
  }
};

int finish(const RunReport& rep, const fs::path& dir, bool write = true) {
  if (write) {
    fs::create_directories(dir);
    write_run_report(rep, dir / "run_report.json");
  }
  for (const auto& e : rep.errors)
    std::cerr << (e.fatal ? "error" : "note") << " [" << e.analysis << " " << e.cell << "] " << e.message << "\n";
  return rep.ok() ? 0 : 2;
}

ResolvedInputs inputs(const std::string& source, const std::vector<std::string>& targets) {
  ResolvedInputs in;
  in.source = source;
  for (const auto& t : targets) in.targets.emplace_back(t);
  return in;
}

void print_metrics(const RunReport& rep) {
  if (!rep.metrics.empty()) std::cout << rep.metrics.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"emospace: emotional subspaces of hidden states"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  // gen ---------------------------------------------------------------------
  Common gen_c;
  std::string gen_dataset = "synthetic", gen_corpus;
  std::optional<std::uint64_t> gen_noise_seed;
  std::optional<std::uint64_t> gen_shuffle;
  std::optional<double> gen_noise;
  std::optional<Index> gen_n;
  bool gen_no_tokens = false;
  auto* gen = app.add_subcommand("gen", "generate a synthetic activation bundle (or a toy corpus with --corpus)");
  gen_c.attach(gen);
  gen->add_option("--dataset", gen_dataset, "dataset name written into labels.csv");
  gen->add_option("--noise-seed", gen_noise_seed, "fresh noise sample of the same geometry");
  gen->add_option("--shuffle-labels", gen_shuffle, "permute labels with this seed (negative control)");
  gen->add_option("--noise", gen_noise, "noise scale");
  gen->add_option("--n", gen_n, "records per emotion");
  gen->add_flag("--no-tokens", gen_no_tokens, "omit token-level payloads");
  gen->add_option("--corpus", gen_corpus, "write a toy corpus JSON to this path instead of a bundle");

  // svd ---------------------------------------------------------------------
  Common svd_c;
  std::string svd_bundle;
  std::optional<Index> svd_rank;
  auto* svd = app.add_subcommand("svd", "fit per-tap emotional subspaces");
  svd_c.attach(svd);
  svd->add_option("--bundle", svd_bundle, "bundle directory")->required();
  svd->add_option("--rank", svd_rank, "subspace rank");

  // align / fidelity / probe --------------------------------------------------
  Common pair_c[3];
  std::string pair_src[3];
  std::vector<std::string> pair_dst[3];
  const char* pair_names[3] = {"align", "fidelity", "probe"};
  const char* pair_help[3] = {"linear alignment statistics between two bundles",
                              "stress and distortion of centroid geometry", "probe transfer from source to targets"};
  CLI::App* pair_cmd[3];
  for (int i = 0; i < 3; ++i) {
    pair_cmd[i] = app.add_subcommand(pair_names[i], pair_help[i]);
    pair_c[i].attach(pair_cmd[i]);
    pair_cmd[i]->add_option("--source", pair_src[i], "source bundle")->required();
    pair_cmd[i]->add_option("--target", pair_dst[i], "target bundle (repeatable)")->required();
  }

  // aura / rank / axes --------------------------------------------------------
  Common aura_c, rank_c, axes_c;
  std::string aura_bundle, rank_bundle, rank_against, axes_bundle;
  std::optional<double> aura_thr;
  std::optional<Index> rank_pcs, axes_k;
  bool rank_consecutive = false;
  auto* aura = app.add_subcommand("aura", "per-neuron AUROC/AUPRC and expert fractions");
  aura_c.attach(aura);
  aura->add_option("--bundle", aura_bundle, "bundle with token-level payloads")->required();
  aura->add_option("--threshold", aura_thr, "AUROC threshold");
  auto* rank = app.add_subcommand("rank", "rank consistency of centroids along PCs");
  rank_c.attach(rank);
  rank->add_option("--bundle", rank_bundle, "bundle directory")->required();
  rank->add_option("--against", rank_against, "second bundle: correlate matching taps across models");
  rank->add_option("--pcs", rank_pcs, "number of PCs");
  rank->add_flag("--consecutive", rank_consecutive, "consecutive tap pairs only");
  auto* axes = app.add_subcommand("axes", "export centroid coordinates on the leading PCs");
  axes_c.attach(axes);
  axes->add_option("--bundle", axes_bundle, "bundle directory")->required();
  axes->add_option("--k", axes_k, "number of PCs");

  // toylm ---------------------------------------------------------------------
  Common tl_c;
  auto* toylm = app.add_subcommand("toylm", "toy language model");
  toylm->require_subcommand(1);
  auto* pretrain = toylm->add_subcommand("pretrain", "generate the corpus, pretrain and save the model");
  tl_c.attach(pretrain);

  // steer ---------------------------------------------------------------------
  auto* steer = app.add_subcommand("steer", "latent-space steering");
  steer->require_subcommand(1);
  Common st_c, se_c, sa_c;
  std::string st_emotion, st_preset, se_module, se_testbed;
  std::vector<std::string> st_ablate;
  auto* strain = steer->add_subcommand("train", "train a steering module for one emotion");
  st_c.attach(strain);
  strain->add_option("--emotion", st_emotion, "target emotion")->required();
  strain->add_option("--preset", st_preset, "named preset (default, ablation-best)");
  strain->add_option("--ablate", st_ablate, "ablation flag (repeatable)");
  auto* seval = steer->add_subcommand("eval", "evaluate a saved module");
  se_c.attach(seval);
  seval->add_option("--module", se_module, "module JSON sidecar")->required()->check(CLI::ExistingFile);
  seval->add_option("--testbed", se_testbed, "directory with toylm.bin/.json and corpus.json");
  auto* sablate = steer->add_subcommand("ablate", "run the ablation grid");
  sa_c.attach(sablate);

  // textstats -----------------------------------------------------------------
  std::string ts_corpus, ts_out = "text_stats.csv", ts_familiar, ts_non_english;
  bool ts_no_dc = false;
  auto* ts = app.add_subcommand("textstats", "lexical and readability features of a text corpus");
  ts->add_option("--corpus", ts_corpus, "CSV with text,dataset,emotion columns")->required()->check(CLI::ExistingFile);
  ts->add_option("--out", ts_out, "output CSV");
  ts->add_option("--familiar", ts_familiar, "familiar-word list for Dale-Chall")->check(CLI::ExistingFile);
  ts->add_option("--non-english", ts_non_english, "comma-separated datasets excluded from readability metrics");
  ts->add_flag("--no-dale-chall", ts_no_dc, "skip the Dale-Chall score");

  // report --------------------------------------------------------------------
  Common rp_c;
  bool rp_no_univ = false, rp_no_psych = false, rp_no_steer = false, rp_ablation = false;
  auto* report = app.add_subcommand("report", "run every pipeline and write run_report.json");
  rp_c.attach(report);
  report->add_flag("--no-universality", rp_no_univ);
  report->add_flag("--no-psychology", rp_no_psych);
  report->add_flag("--no-steering", rp_no_steer);
  report->add_flag("--ablation", rp_ablation, "also run the ablation grid");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      std::vector<std::string> extra;
      if (gen_noise) extra.push_back("data.noise=" + csv::num(*gen_noise));
      if (gen_n) extra.push_back("data.n_per_emotion=" + std::to_string(*gen_n));
      if (gen_no_tokens) extra.push_back("data.token_level=false");
      const auto c = gen_c.load(extra);
      if (!gen_corpus.empty()) {
        const auto corpus = testbed_corpus(c);
        std::ofstream out(gen_corpus);
        out << to_json(corpus).dump() << "\n";
        std::cout << "wrote " << gen_corpus << " (" << corpus.sequences.size() << " sequences)\n";
        return 0;
      }
      if (gen_c.out.empty()) throw ConfigError("gen: --out is required for bundles");
      BundleOptions opt = c.bundle;
      opt.dataset = gen_dataset;
      opt.noise_seed = gen_noise_seed;
      auto data = generate_activation_bundle(c.geometry, c.n_per_emotion, opt);
      if (gen_shuffle) data = shuffle_labels(std::move(data), *gen_shuffle, gen_dataset);
      write_bundle(data, gen_c.out);
      std::cout << "wrote " << gen_c.out << " (" << data.manifest.record_count << " records)\n";
      return 0;
    }

    if (svd->parsed()) {
      std::vector<std::string> extra;
      if (svd_rank) extra.push_back("analysis.rank=" + std::to_string(*svd_rank));
      const auto c = svd_c.load(extra);
      const auto b = ActivationBundle::open(svd_bundle);
      fs::create_directories(c.output_dir);
      RunReport rep;
      rep.config_hash = config_hash(c);
      for (const auto& tap : b.taps())
        detail::guarded(rep, "svd", tap.str(), [&] {
          const auto s = tap_subspace(to_double(b.pooled(tap.layer, tap.sublayer)), c.rank, svd_bundle);
          const auto path = c.output_dir / subspace_filename(tap.layer, tap.sublayer);
          save_subspace(s, path);
          rep.outputs["subspace_" + tap.str()] = path.string();
        });
      return finish(rep, c.output_dir);
    }

    for (int i = 0; i < 3; ++i)
      if (pair_cmd[i]->parsed()) {
        const auto c = pair_c[i].load();
        UniversalityParts parts{i == 1, i == 0, i == 2};
        const auto rep = run_universality(c, inputs(pair_src[i], pair_dst[i]), parts);
        print_metrics(rep);
        return finish(rep, c.output_dir);
      }

    if (aura->parsed() || rank->parsed() || axes->parsed()) {
      const bool is_aura = aura->parsed(), is_rank = rank->parsed();
      std::vector<std::string> extra;
      if (aura_thr) extra.push_back("analysis.aura_threshold=" + csv::num(*aura_thr));
      if (rank_pcs) extra.push_back("analysis.pcs=" + std::to_string(*rank_pcs));
      if (rank_consecutive) extra.push_back("analysis.consecutive_only=true");
      if (axes_k) extra.push_back("analysis.axes_k=" + std::to_string(*axes_k));
      const auto& common = is_aura ? aura_c : is_rank ? rank_c : axes_c;
      const auto c = common.load(extra);
      const std::string bundle = is_aura ? aura_bundle : is_rank ? rank_bundle : axes_bundle;
      if (is_rank && !rank_against.empty()) {
        const auto a = rank_series(ActivationBundle::open(bundle), c.rank, c.pcs);
        const auto b = rank_series(ActivationBundle::open(rank_against), c.rank, c.pcs);
        fs::create_directories(c.output_dir);
        csv::Writer w(c.output_dir / "rank_consistency.csv");
        w.row({"pc", "method", "mean", "std", "n_pairs", "mean_unflipped"});
        for (auto m : {RankMethod::spearman, RankMethod::kendall}) write_rank_rows(w, consistency_cross(a, b, m, c.pcs));
        RunReport rep;
        rep.config_hash = config_hash(c);
        rep.outputs["rank_consistency"] = (c.output_dir / "rank_consistency.csv").string();
        return finish(rep, c.output_dir);
      }
      PsychologyParts parts{is_aura, is_rank, !is_aura && !is_rank};
      const auto rep = run_psychology(c, inputs(bundle, {}), parts);
      print_metrics(rep);
      return finish(rep, c.output_dir);
    }

    if (pretrain->parsed()) {
      const auto c = tl_c.load();
      RunReport rep;
      rep.config_hash = config_hash(c);
      const auto tb = build_testbed(c, &rep);
      save_testbed(tb, c.output_dir / "testbed");
      rep.outputs["testbed"] = (c.output_dir / "testbed").string();
      print_metrics(rep);
      return finish(rep, c.output_dir);
    }

    if (strain->parsed()) {
      std::vector<std::string> extra;
      if (!st_preset.empty()) extra.push_back("steering.preset=" + st_preset);
      if (!st_ablate.empty()) extra.push_back("steering.ablate=" + detail::join(st_ablate));
      extra.push_back("steering.emotions=" + st_emotion);
      const auto c = st_c.load(extra);
      RunReport rep;
      rep.config_hash = config_hash(c);
      const auto tb = build_testbed(c, &rep);
      save_testbed(tb, c.output_dir / "testbed");
      rep.merge(run_steering(c, tb));
      print_metrics(rep);
      return finish(rep, c.output_dir);
    }

    if (seval->parsed()) {
      const fs::path sidecar = se_module;
      const fs::path tdir = se_testbed.empty() ? sidecar.parent_path().parent_path() / "testbed" : fs::path(se_testbed);
      auto c = se_c.load({"toylm.checkpoint=" + tdir.string(), "toylm.corpus=" + (tdir / "corpus.json").string()});
      const auto [module, sc] = load_module(sidecar);
      RunReport rep;
      rep.config_hash = config_hash(c);
      const auto tb = build_testbed(c, &rep);
      const auto tok = steering_tokens(tb.corpus, module.target_emotion, !sc.ablation.no_synonyms);
      const auto cell = evaluate_steering(module, tb.model, tb.test, tok, sc.gamma, "synthetic");
      fs::create_directories(c.output_dir);
      write_steering_report({cell}, c.output_dir / "steering_report.csv");
      rep.outputs["steering_report"] = (c.output_dir / "steering_report.csv").string();
      std::cout << cell.emotion << ": " << format_cell(cell.baseline_top1, cell.post_top1, cell.mean_sem_loss) << "\n";
      return finish(rep, c.output_dir);
    }

    if (sablate->parsed()) {
      const auto c = sa_c.load();
      RunReport rep;
      rep.config_hash = config_hash(c);
      const auto tb = build_testbed(c, &rep);
      rep.merge(run_ablation(c, tb));
      return finish(rep, c.output_dir);
    }

    if (ts->parsed()) {
      const auto table = csv::Table::load(ts_corpus);
      std::optional<text::FamiliarWords> fam;
      if (!ts_familiar.empty()) fam = text::FamiliarWords::load(ts_familiar);
      text::StatsOptions opt;
      opt.compute_dale_chall = !ts_no_dc;
      opt.familiar = fam ? &*fam : nullptr;
      if (opt.compute_dale_chall && !fam)
        throw ConfigError("textstats: Dale-Chall needs --familiar <word list> (or pass --no-dale-chall)");
      const auto non = detail::split_list(ts_non_english);
      const auto stats = text::corpus_stats(table, opt, {non.begin(), non.end()});
      text::write_corpus_stats(stats, ts_out);
      std::cout << "wrote " << ts_out << " (" << stats.size() << " datasets)\n";
      return 0;
    }

    if (report->parsed()) {
      const auto c = rp_c.load();
      RunSelection sel{!rp_no_univ, !rp_no_psych, !rp_no_steer, rp_ablation};
      const auto rep = run_all(c, sel);
      print_metrics(rep);
      return finish(rep, c.output_dir, false);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
