#pragma once
//
// Pipelines wiring the modules together: universality (fidelity, alignment,
// probe transfer), psychology (AURA, rank consistency, axes) and the
// steering suite with its ablation grid.  Configuration is an INI file;
// every key can be overridden as "section.key=value".
//

#include "emospace/activation_store.hpp"
#include "emospace/alignment.hpp"
#include "emospace/aura.hpp"
#include "emospace/core.hpp"
#include "emospace/csv.hpp"
#include "emospace/probes.hpp"
#include "emospace/rank_consistency.hpp"
#include "emospace/steering.hpp"
#include "emospace/subspace.hpp"
#include "emospace/synthetic.hpp"
#include "emospace/toy_lm.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace emospace {

inline constexpr const char* kToolVersion = "0.3.0";

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s + ",") {
    if (c == ',') {
      std::size_t a = 0, b = cur.size();
      while (a < b && std::isspace(static_cast<unsigned char>(cur[a]))) ++a;
      while (b > a && std::isspace(static_cast<unsigned char>(cur[b - 1]))) --b;
      if (b > a) out.push_back(cur.substr(a, b - a));
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

inline std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Toy LM testbed: corpus generation, model shape and pretraining recipe.
struct TestbedConfig {
  std::filesystem::path checkpoint;  // directory holding toylm.bin/.json; empty = pretrain
  std::filesystem::path corpus;      // corpus.json; empty = generate
  double corpus_noise = 0.7;
  Index corpus_n_per_emotion = 120;
  Index seq_len = 8;
  Index clean_n_per_emotion = 40;
  double label_mass = 0.8;
  ToyLMConfig model;
  PretrainConfig pretrain;
};

struct PipelineConfig {
  std::filesystem::path output_dir = "emospace_out";
  std::uint64_t seed = 0;

  std::filesystem::path source;              // empty = generated synthetic bundle
  std::vector<std::filesystem::path> targets;  // empty = generated resample + label-shuffled control
  GeometrySpec geometry;
  BundleOptions bundle;
  Index n_per_emotion = 60;

  Index rank = 50;
  Index pcs = 3;
  Index axes_k = 3;
  double ridge = 1e-3;
  DistortionThresholds thresholds;
  double aura_threshold = 0.9;
  bool consecutive_only = false;
  ProbeConfig probe;

  TestbedConfig testbed;
  SteeringConfig steering;
  std::string steering_preset = "default";
  std::vector<std::string> steer_emotions = basic_emotions();
  std::vector<std::string> ablation_emotions;  // empty = steer_emotions
  int ablation_steps = 0;                      // 0 = steering.steps

  std::vector<std::string> ablation_list() const { return ablation_emotions.empty() ? steer_emotions : ablation_emotions; }
};

inline nlohmann::json to_json(const PipelineConfig& c) {
  const auto& g = c.geometry;
  const auto& t = c.testbed;
  std::vector<std::string> targets;
  for (const auto& p : c.targets) targets.push_back(p.string());
  return {
      {"run", {{"output_dir", c.output_dir.string()}, {"seed", c.seed}}},
      {"data",
       {{"source", c.source.string()},
        {"targets", targets},
        {"emotions", g.emotion_names},
        {"hidden_dim", g.hidden_dim},
        {"intrinsic_rank", g.intrinsic_rank},
        {"separation", g.centroid_separation},
        {"noise", g.noise_scale},
        {"rotation", g.per_layer_rotation},
        {"n_per_emotion", c.n_per_emotion},
        {"layers", c.bundle.layers},
        {"sublayers", c.bundle.sublayers},
        {"token_level", c.bundle.token_level},
        {"test_fraction", c.bundle.test_fraction}}},
      {"analysis",
       {{"rank", c.rank},
        {"pcs", c.pcs},
        {"axes_k", c.axes_k},
        {"ridge", c.ridge},
        {"distortion_ratio", c.thresholds.ratio},
        {"distortion_sigma", c.thresholds.sigma},
        {"aura_threshold", c.aura_threshold},
        {"consecutive_only", c.consecutive_only}}},
      {"probe",
       {{"l2", c.probe.l2_penalty},
        {"learning_rate", c.probe.learning_rate},
        {"max_iters", c.probe.max_iters},
        {"tolerance", c.probe.tolerance}}},
      {"toylm",
       {{"checkpoint", t.checkpoint.string()},
        {"corpus", t.corpus.string()},
        {"corpus_noise", t.corpus_noise},
        {"corpus_n_per_emotion", t.corpus_n_per_emotion},
        {"seq_len", t.seq_len},
        {"clean_n_per_emotion", t.clean_n_per_emotion},
        {"label_mass", t.label_mass},
        {"model", to_json(t.model)},
        {"pretrain_steps", t.pretrain.steps},
        {"pretrain_lr", t.pretrain.lr},
        {"pretrain_batch", t.pretrain.batch_size},
        {"pretrain_warmup", t.pretrain.warmup_steps}}},
      {"steering",
       {{"preset", c.steering_preset},
        {"config", to_json(c.steering)},
        {"emotions", c.steer_emotions},
        {"ablation_emotions", c.ablation_list()},
        {"ablation_steps", c.ablation_steps}}}};
}

/// Stable across runs: hashes the canonical (sorted-key) JSON of the
/// effective configuration.
inline std::string config_hash(const PipelineConfig& c) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(c).dump())));
  return buf;
}

namespace detail {

using Tree = boost::property_tree::ptree;

inline const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> k{
      {"run", {"output_dir", "seed"}},
      {"data",
       {"source", "targets", "emotions", "hidden_dim", "intrinsic_rank", "separation", "noise", "rotation",
        "n_per_emotion", "layers", "sublayers", "token_level", "test_fraction"}},
      {"analysis",
       {"rank", "pcs", "axes_k", "ridge", "distortion_ratio", "distortion_sigma", "aura_threshold",
        "consecutive_only"}},
      {"probe", {"l2", "learning_rate", "max_iters", "tolerance"}},
      {"toylm",
       {"checkpoint", "corpus", "corpus_noise", "corpus_n_per_emotion", "seq_len", "clean_n_per_emotion", "label_mass",
        "hidden_dim", "n_layers", "n_heads", "mlp_mult", "max_seq_len", "embed_scale", "anchor_norm",
        "pretrain_steps", "pretrain_lr", "pretrain_batch", "pretrain_warmup"}},
      {"steering",
       {"preset", "rank", "hidden_width", "margin_m1", "margin_m2", "gamma", "lambda_margin", "ce_emotion_weight",
        "lr", "weight_decay", "warmup_steps", "steps", "batch_size", "selection_tau", "selection_alpha", "ablate",
        "emotions", "ablation_emotions", "ablation_steps"}}};
  return k;
}

inline void check_keys(const Tree& t) {
  for (const auto& [section, body] : t) {
    auto it = known_keys().find(section);
    if (it == known_keys().end()) throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, v] : body)
      if (!it->second.count(key)) throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
  }
}

template <typename T>
void read(const Tree& t, const std::string& path, T& dst) {
  if (auto v = t.get_optional<std::string>(path)) {
    try {
      dst = t.get<T>(path);
    } catch (const boost::property_tree::ptree_bad_data&) {
      throw ConfigError("config: bad value '" + *v + "' for " + path);
    }
  }
}

inline void read_bool(const Tree& t, const std::string& path, bool& dst) {
  if (auto v = t.get_optional<std::string>(path)) {
    std::string s = *v;
    for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (s == "1" || s == "true" || s == "yes" || s == "on") dst = true;
    else if (s == "0" || s == "false" || s == "no" || s == "off") dst = false;
    else throw ConfigError("config: bad boolean '" + s + "' for " + path);
  }
}

}  // namespace detail

/// Applies "section.key=value" overrides on top of a parsed tree.
inline void apply_overrides(detail::Tree& t, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw ConfigError("override '" + o + "' is not of the form section.key=value");
    t.put(o.substr(0, eq), o.substr(eq + 1));
  }
}

inline PipelineConfig config_from_tree(const detail::Tree& t) {
  detail::check_keys(t);
  using detail::read;
  using detail::read_bool;
  PipelineConfig c;
  std::string s;

  read(t, "run.seed", c.seed);
  if (auto v = t.get_optional<std::string>("run.output_dir")) c.output_dir = *v;

  if (auto v = t.get_optional<std::string>("data.source")) c.source = *v;
  if (auto v = t.get_optional<std::string>("data.targets"))
    for (const auto& p : detail::split_list(*v)) c.targets.emplace_back(p);
  if (auto v = t.get_optional<std::string>("data.emotions")) c.geometry.emotion_names = detail::split_list(*v);
  read(t, "data.hidden_dim", c.geometry.hidden_dim);
  read(t, "data.intrinsic_rank", c.geometry.intrinsic_rank);
  read(t, "data.separation", c.geometry.centroid_separation);
  read(t, "data.noise", c.geometry.noise_scale);
  read_bool(t, "data.rotation", c.geometry.per_layer_rotation);
  read(t, "data.n_per_emotion", c.n_per_emotion);
  read(t, "data.layers", c.bundle.layers);
  if (auto v = t.get_optional<std::string>("data.sublayers")) c.bundle.sublayers = detail::split_list(*v);
  c.bundle.token_level = true;
  read_bool(t, "data.token_level", c.bundle.token_level);
  read(t, "data.test_fraction", c.bundle.test_fraction);
  c.geometry.seed = c.seed;

  read(t, "analysis.rank", c.rank);
  read(t, "analysis.pcs", c.pcs);
  read(t, "analysis.axes_k", c.axes_k);
  read(t, "analysis.ridge", c.ridge);
  read(t, "analysis.distortion_ratio", c.thresholds.ratio);
  read(t, "analysis.distortion_sigma", c.thresholds.sigma);
  read(t, "analysis.aura_threshold", c.aura_threshold);
  read_bool(t, "analysis.consecutive_only", c.consecutive_only);

  read(t, "probe.l2", c.probe.l2_penalty);
  read(t, "probe.learning_rate", c.probe.learning_rate);
  read(t, "probe.max_iters", c.probe.max_iters);
  read(t, "probe.tolerance", c.probe.tolerance);
  c.probe.seed = c.seed;

  auto& tb = c.testbed;
  if (auto v = t.get_optional<std::string>("toylm.checkpoint")) tb.checkpoint = *v;
  if (auto v = t.get_optional<std::string>("toylm.corpus")) tb.corpus = *v;
  read(t, "toylm.corpus_noise", tb.corpus_noise);
  read(t, "toylm.corpus_n_per_emotion", tb.corpus_n_per_emotion);
  read(t, "toylm.seq_len", tb.seq_len);
  read(t, "toylm.clean_n_per_emotion", tb.clean_n_per_emotion);
  read(t, "toylm.label_mass", tb.label_mass);
  read(t, "toylm.hidden_dim", tb.model.hidden_dim);
  read(t, "toylm.n_layers", tb.model.n_layers);
  read(t, "toylm.n_heads", tb.model.n_heads);
  read(t, "toylm.mlp_mult", tb.model.mlp_mult);
  read(t, "toylm.max_seq_len", tb.model.max_seq_len);
  read(t, "toylm.embed_scale", tb.model.embed_scale);
  read(t, "toylm.anchor_norm", tb.model.anchor_norm);
  read(t, "toylm.pretrain_steps", tb.pretrain.steps);
  read(t, "toylm.pretrain_lr", tb.pretrain.lr);
  read(t, "toylm.pretrain_batch", tb.pretrain.batch_size);
  read(t, "toylm.pretrain_warmup", tb.pretrain.warmup_steps);
  tb.model.seed = c.seed;
  tb.pretrain.seed = c.seed;

  read(t, "steering.preset", c.steering_preset);
  c.steering = SteeringConfig::preset(c.steering_preset);
  auto& sc = c.steering;
  read(t, "steering.rank", sc.rank);
  read(t, "steering.hidden_width", sc.hidden_width);
  read(t, "steering.margin_m1", sc.margin_m1);
  read(t, "steering.margin_m2", sc.margin_m2);
  read(t, "steering.gamma", sc.gamma);
  read(t, "steering.lambda_margin", sc.lambda_margin);
  read(t, "steering.ce_emotion_weight", sc.ce_emotion_weight);
  read(t, "steering.lr", sc.lr);
  read(t, "steering.weight_decay", sc.weight_decay);
  read(t, "steering.warmup_steps", sc.warmup_steps);
  read(t, "steering.steps", sc.steps);
  read(t, "steering.batch_size", sc.batch_size);
  read(t, "steering.selection_tau", sc.selection_tau);
  read(t, "steering.selection_alpha", sc.selection_alpha);
  if (auto v = t.get_optional<std::string>("steering.ablate"))
    for (const auto& f : detail::split_list(*v)) sc.ablation.set(f);
  if (auto v = t.get_optional<std::string>("steering.emotions")) c.steer_emotions = detail::split_list(*v);
  if (auto v = t.get_optional<std::string>("steering.ablation_emotions"))
    c.ablation_emotions = detail::split_list(*v);
  read(t, "steering.ablation_steps", c.ablation_steps);
  sc.seed = c.seed;

  c.geometry.validate();
  sc.validate();
  if (c.rank < 1 || c.pcs < 1 || c.axes_k < 1) throw ConfigError("config: ranks must be >= 1");
  if (c.steer_emotions.empty()) throw ConfigError("config: steering.emotions is empty");
  return c;
}

/// Reads an INI file (optional) and applies overrides.
inline PipelineConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  detail::Tree t;
  if (!path.empty()) {
    if (!std::filesystem::exists(path)) throw NotFoundError("config file not found: " + path.string());
    try {
      boost::property_tree::ini_parser::read_ini(path.string(), t);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  apply_overrides(t, overrides);
  return config_from_tree(t);
}

// ---------------------------------------------------------------------------
// run report
// ---------------------------------------------------------------------------

struct CellError {
  std::string analysis;
  std::string cell;
  std::string message;
  bool fatal = true;
};

struct RunReport {
  std::map<std::string, std::string> outputs;  // name -> path
  std::map<std::string, double> timings;       // seconds
  std::string config_hash;
  std::string tool_version = kToolVersion;
  std::vector<CellError> errors;
  nlohmann::json metrics = nlohmann::json::object();

  bool ok() const {
    for (const auto& e : errors)
      if (e.fatal) return false;
    return true;
  }

  void merge(const RunReport& o) {
    outputs.insert(o.outputs.begin(), o.outputs.end());
    timings.insert(o.timings.begin(), o.timings.end());
    errors.insert(errors.end(), o.errors.begin(), o.errors.end());
    metrics.update(o.metrics);
  }
};

inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json errs = nlohmann::json::array();
  for (const auto& e : r.errors)
    errs.push_back({{"analysis", e.analysis}, {"cell", e.cell}, {"message", e.message}, {"fatal", e.fatal}});
  return {{"outputs", r.outputs}, {"timings", r.timings}, {"config_hash", r.config_hash},
          {"tool_version", r.tool_version}, {"errors", errs}, {"metrics", r.metrics}, {"ok", r.ok()}};
}

inline void write_run_report(const RunReport& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << to_json(r).dump(2) << "\n";
}

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

/// Runs one cell; on error records it and returns false.
template <typename F>
bool guarded(RunReport& rep, const std::string& analysis, const std::string& cell, F&& f) {
  try {
    f();
    return true;
  } catch (const Error& e) {
    rep.errors.push_back({analysis, cell, e.what(), true});
  }
  return false;
}

inline std::string dataset_name(const ActivationBundle& b) {
  if (!b.labels().empty() && !b.labels().front().dataset.empty()) return b.labels().front().dataset;
  return b.path().filename().string();
}

inline std::string safe_name(std::string s) {
  for (auto& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// synthetic inputs
// ---------------------------------------------------------------------------

/// Bundle directories the analyses read: the configured ones, or generated
/// defaults (source, an independent resample of the same geometry, and a
/// label-shuffled control) written under output_dir/bundles.
struct ResolvedInputs {
  std::filesystem::path source;
  std::vector<std::filesystem::path> targets;
};

inline ResolvedInputs resolve_inputs(const PipelineConfig& c) {
  ResolvedInputs r{c.source, c.targets};
  const auto root = c.output_dir / "bundles";
  if (r.source.empty()) {
    BundleOptions opt = c.bundle;
    opt.dataset = "synthetic";
    r.source = root / "synthetic";
    write_bundle(generate_activation_bundle(c.geometry, c.n_per_emotion, opt), r.source);
  }
  if (r.targets.empty() && c.source.empty()) {
    BundleOptions opt = c.bundle;
    opt.dataset = "resample";
    opt.noise_seed = derive_seed(c.seed, 101);
    auto resample = generate_activation_bundle(c.geometry, c.n_per_emotion, opt);
    write_bundle(resample, root / "resample");
    write_bundle(shuffle_labels(std::move(resample), derive_seed(c.seed, 102), "shuffled"), root / "shuffled");
    r.targets = {root / "resample", root / "shuffled"};
  }
  return r;
}

// ---------------------------------------------------------------------------
// universality
// ---------------------------------------------------------------------------

/// Per-tap subspace of a bundle, at min(rank, N, D).
inline EmotionSubspace tap_subspace(const MatrixD& pooled, Index rank, const std::string& tag) {
  return fit_subspace(pooled, std::min({rank, pooled.rows(), pooled.cols()}), tag);
}

/// Which outputs a universality or psychology run produces.
struct UniversalityParts {
  bool fidelity = true;
  bool alignment = true;
  bool probe = true;
};

struct PsychologyParts {
  bool aura = true;
  bool rank = true;
  bool axes = true;
};

struct UniversalityCell {
  std::string dataset;
  TapKey tap;
  FidelityReport fidelity;
  AlignmentResult alignment;
  double probe_accuracy = 0;
};

/// Source vs. one target at one tap.  Centroids are taken in each bundle's
/// own subspace; fidelity compares the two centroid geometries and the
/// alignment maps source coordinates onto target coordinates.
inline UniversalityCell universality_cell(const ActivationBundle& src, const ActivationBundle& dst, const TapKey& tap,
                                          const PipelineConfig& c, const UniversalityParts& parts = {}) {
  UniversalityCell cell;
  cell.dataset = detail::dataset_name(dst);
  cell.tap = tap;
  const MatrixD xs = to_double(src.pooled(tap.layer, tap.sublayer));
  const MatrixD xt = to_double(dst.pooled(tap.layer, tap.sublayer));
  const auto ls = src.emotions_per_record();
  const auto lt = dst.emotions_per_record();

  std::set<std::string> es(ls.begin(), ls.end()), et(lt.begin(), lt.end());
  std::vector<std::string> shared;
  for (const auto& e : src.manifest().emotion_labels)
    if (es.count(e) && et.count(e)) shared.push_back(e);
  if (shared.size() < 3) {
    std::string a, b;
    for (const auto& e : es) a += " " + e;
    for (const auto& e : et) b += " " + e;
    throw AlignmentError("need >= 3 shared emotions; source has{" + a + " }, target has{" + b + " }");
  }

  const auto ss = tap_subspace(xs, c.rank, src.path().string());
  const auto st = tap_subspace(xt, c.rank, dst.path().string());
  // Restrict to shared emotions, keeping source order.
  auto shared_rows = [&](const MatrixD& x, const std::vector<std::string>& labels, std::vector<std::string>& kept) {
    const std::set<std::string> keep(shared.begin(), shared.end());
    std::vector<Index> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (keep.count(labels[i])) {
        rows.push_back(static_cast<Index>(i));
        kept.push_back(labels[i]);
      }
    MatrixD out(static_cast<Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = x.row(rows[i]);
    return out;
  };
  std::vector<std::string> ks, kt;
  const MatrixD xs2 = shared_rows(xs, ls, ks);
  const MatrixD xt2 = shared_rows(xt, lt, kt);
  const auto cs = centroids(xs2, ks, &ss, shared);
  const auto ct = centroids(xt2, kt, &st, shared);

  if (parts.fidelity) cell.fidelity = fidelity(*cs.projected, *ct.projected, shared);
  if (parts.alignment) cell.alignment = fit_alignment(*cs.projected, *ct.projected, c.ridge, shared);
  if (parts.probe) cell.probe_accuracy = probe_transfer(xs, ls, xt, lt, c.rank, c.probe).accuracy;
  return cell;
}

inline RunReport run_universality(const PipelineConfig& c, const ResolvedInputs& in,
                                  const UniversalityParts& parts = {}) {
  RunReport rep;
  rep.config_hash = config_hash(c);
  detail::Stopwatch sw;
  std::filesystem::create_directories(c.output_dir);
  const auto src = ActivationBundle::open(in.source);

  std::optional<csv::Writer> fid, probe, summary;
  if (parts.fidelity) {
    fid.emplace(c.output_dir / "fidelity.csv");
    fid->row({"dataset", "layer", "sublayer", "stress1", "stress2", "sammon", "avg_dist", "l2_dist", "sigma", "flagged"});
    summary.emplace(c.output_dir / "fidelity_summary.csv");
    summary->row({"dataset", "layers", "flagged_fraction", "cell"});
    rep.outputs["fidelity"] = (c.output_dir / "fidelity.csv").string();
    rep.outputs["fidelity_summary"] = (c.output_dir / "fidelity_summary.csv").string();
  }
  if (parts.probe) {
    probe.emplace(c.output_dir / "probe_eval.csv");
    probe->row({"dataset", "layer", "sublayer", "accuracy"});
    rep.outputs["probe_eval"] = (c.output_dir / "probe_eval.csv").string();
  }

  nlohmann::json metrics = nlohmann::json::object();
  for (const auto& tpath : in.targets) {
    std::optional<ActivationBundle> dst;
    if (!detail::guarded(rep, "universality", tpath.string(), [&] { dst.emplace(ActivationBundle::open(tpath)); }))
      continue;
    const auto name = detail::dataset_name(*dst);
    std::optional<csv::Writer> al;
    if (parts.alignment) {
      const auto align_path = c.output_dir / ("alignment_" + detail::safe_name(name) + ".csv");
      al.emplace(align_path);
      al->row({"layer", "sublayer", "avg_cosine", "mse", "spectral_flatness", "frob_norm", "spectral_entropy"});
      rep.outputs["alignment_" + name] = align_path.string();
    }

    std::vector<FidelityReport> reports;
    nlohmann::json m = nlohmann::json::object();
    double worst_stress = 0, min_cos = 1, max_mse = 0, mean_probe = 0;
    Index cells = 0;
    for (const auto& tap : src.taps()) {
      UniversalityCell cell;
      const bool ok = detail::guarded(rep, "universality", name + ":" + tap.str(),
                                      [&] { cell = universality_cell(src, *dst, tap, c, parts); });
      if (!ok) continue;
      ++cells;
      const std::string layer = std::to_string(tap.layer);
      if (parts.fidelity) {
        const auto& f = cell.fidelity;
        reports.push_back(f);
        fid->row({name, layer, tap.sublayer, csv::num(f.stress1), csv::num(f.stress2), csv::num(f.sammon),
                  csv::num(f.avg_distortion), csv::num(f.l2_distortion), csv::num(f.sigma_distortion),
                  is_highly_distorted(f, c.thresholds) ? "1" : "0"});
        worst_stress = std::max(worst_stress, f.stress1);
      }
      if (parts.alignment) {
        const auto& a = cell.alignment;
        al->row({layer, tap.sublayer, csv::num(a.mean_cosine()), csv::num(a.mse), csv::num(a.spectral_flatness),
                 csv::num(a.frobenius_norm), csv::num(a.spectral_entropy)});
        for (double v : a.per_emotion_cosine) min_cos = std::min(min_cos, v);
        max_mse = std::max(max_mse, a.mse);
      }
      if (parts.probe) {
        probe->row({name, layer, tap.sublayer, csv::num(cell.probe_accuracy)});
        mean_probe += cell.probe_accuracy;
      }
    }
    if (!reports.empty()) {
      const auto flags = flag_high_distortion(reports, c.thresholds);
      summary->row({name, std::to_string(reports.size()), csv::num(flags.flagged_fraction),
                    flags.flagged_fraction > 0 ? flagged_cell(flags.flagged_fraction) : "0%"});
      m["max_stress1"] = worst_stress;
      m["flagged_fraction"] = flags.flagged_fraction;
    }
    if (cells > 0 && parts.alignment) {
      m["min_cosine"] = min_cos;
      m["max_mse"] = max_mse;
    }
    if (cells > 0 && parts.probe) m["mean_probe_accuracy"] = mean_probe / static_cast<double>(cells);
    metrics[name] = m;
  }
  rep.metrics["universality"] = metrics;
  rep.timings["universality"] = sw.seconds();
  return rep;
}

// ---------------------------------------------------------------------------
// psychology
// ---------------------------------------------------------------------------

/// Projected emotion centroids on the leading `pcs` components of each tap.
inline RankSeries rank_series(const ActivationBundle& b, Index rank, Index pcs) {
  RankSeries s;
  s.emotions = b.manifest().emotion_labels;
  const auto labels = b.emotions_per_record();
  std::set<std::string> present(labels.begin(), labels.end());
  std::vector<std::string> order;
  for (const auto& e : s.emotions)
    if (present.count(e)) order.push_back(e);
  s.emotions = order;
  for (const auto& tap : b.taps()) {
    const MatrixD x = to_double(b.pooled(tap.layer, tap.sublayer));
    const auto sub = tap_subspace(x, std::max(rank, pcs), b.path().string());
    const auto c = centroids(x, labels, &sub, order);
    if (c.projected->cols() < pcs) throw RankError("rank series: subspace at " + tap.str() + " has too few components");
    s.add(tap, c.projected->leftCols(pcs));
  }
  return s;
}

inline void write_rank_rows(csv::Writer& w, const std::vector<ConsistencyRow>& rows) {
  for (const auto& r : rows)
    w.row({std::to_string(r.pc), to_string(r.method), csv::num(r.mean), csv::num(r.std), std::to_string(r.n_pairs),
           csv::num(r.mean_unflipped)});
}

inline RunReport run_psychology(const PipelineConfig& c, const ResolvedInputs& in, const PsychologyParts& parts = {}) {
  RunReport rep;
  rep.config_hash = config_hash(c);
  detail::Stopwatch sw;
  std::filesystem::create_directories(c.output_dir);
  if (parts.axes) std::filesystem::create_directories(c.output_dir / "axes");
  const auto b = ActivationBundle::open(in.source);
  const auto labels = b.emotions_per_record();
  std::vector<std::string> emotions;
  {
    std::set<std::string> present(labels.begin(), labels.end());
    for (const auto& e : b.manifest().emotion_labels)
      if (present.count(e)) emotions.push_back(e);
  }

  // AURA over token-max responses.
  if (parts.aura) {
    csv::Writer scores(c.output_dir / "aura_scores.csv");
    scores.row({"layer", "sublayer", "neuron", "emotion", "auroc", "auprc"});
    std::vector<NeuronScoreTable> tables;
    for (const auto& tap : b.taps()) {
      detail::guarded(rep, "aura", tap.str(), [&] {
        const auto t = score_neurons(neuron_responses(b.tokens(tap.layer, tap.sublayer)), labels, emotions, tap.layer,
                                     tap.sublayer);
        for (Index d = 0; d < t.auroc.rows(); ++d)
          for (Index k = 0; k < t.auroc.cols(); ++k)
            scores.row({std::to_string(tap.layer), tap.sublayer, std::to_string(d),
                        emotions[static_cast<std::size_t>(k)], csv::num(t.auroc(d, k)), csv::num(t.auprc(d, k))});
        tables.push_back(t);
      });
    }
    if (!tables.empty()) {
      const auto s = expert_summary(tables, c.aura_threshold);
      csv::Writer w(c.output_dir / "aura_summary.csv");
      w.row({"layer", "sublayer", "emotion", "frac_above_threshold"});
      for (const auto& cell : s.cells)
        w.row({std::to_string(cell.layer), cell.sublayer, cell.emotion, csv::num(cell.fraction)});
      rep.outputs["aura_summary"] = (c.output_dir / "aura_summary.csv").string();
      rep.metrics["aura"] = {{"mean_fraction", s.mean_fraction}, {"threshold", s.threshold}};
    }
    rep.outputs["aura_scores"] = (c.output_dir / "aura_scores.csv").string();
  }

  // Rank consistency across taps, both statistics.
  if (parts.rank) detail::guarded(rep, "rank", "all", [&] {
    const auto series = rank_series(b, c.rank, c.pcs);
    csv::Writer w(c.output_dir / "rank_consistency.csv");
    w.row({"pc", "method", "mean", "std", "n_pairs", "mean_unflipped"});
    nlohmann::json m = nlohmann::json::object();
    for (auto method : {RankMethod::spearman, RankMethod::kendall}) {
      const auto rows = consistency_matrix(series, method, c.pcs, c.consecutive_only);
      write_rank_rows(w, rows);
      std::vector<double> means;
      for (const auto& r : rows) means.push_back(r.mean);
      m[to_string(method)] = means;
    }
    rep.outputs["rank_consistency"] = (c.output_dir / "rank_consistency.csv").string();
    rep.metrics["rank"] = m;
  });

  // Centroid axes per tap.
  if (parts.axes) for (const auto& tap : b.taps()) {
    detail::guarded(rep, "axes", tap.str(), [&] {
      const MatrixD x = to_double(b.pooled(tap.layer, tap.sublayer));
      const auto sub = tap_subspace(x, std::max(c.rank, c.axes_k), b.path().string());
      const auto cents = centroids(x, labels, &sub, emotions);
      write_axes_csv(export_axes(cents, c.axes_k), c.output_dir / "axes" / ("axes_" + tap.str() + ".csv"));
    });
  }
  if (parts.axes) rep.outputs["axes"] = (c.output_dir / "axes").string();
  rep.timings["psychology"] = sw.seconds();
  return rep;
}

// ---------------------------------------------------------------------------
// steering suite
// ---------------------------------------------------------------------------

/// Everything the steering runs share: corpus, frozen model, tap states of
/// the training split, per-tap subspaces, and cached base states.
struct Testbed {
  ToyCorpus corpus;
  ToyLM model;
  double clean_accuracy = 0;
  double pretrain_loss = 0;
  std::map<TapKey, MatrixD> states;
  std::vector<std::string> train_labels;
  std::map<TapKey, EmotionSubspace> subspaces;
  SteeringData train;
  SteeringData test;
};

inline ToyCorpus testbed_corpus(const PipelineConfig& c) {
  if (!c.testbed.corpus.empty()) {
    std::ifstream in(c.testbed.corpus);
    if (!in) throw NotFoundError("missing corpus " + c.testbed.corpus.string());
    try {
      return corpus_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(c.testbed.corpus.string() + ": " + e.what());
    }
  }
  GeometrySpec g = c.geometry;
  g.noise_scale = c.testbed.corpus_noise;
  g.seed = derive_seed(c.seed, 11);
  return generate_toy_corpus(g, c.testbed.corpus_n_per_emotion, c.testbed.seq_len);
}

/// Held-out noiseless sequences over the same vocabulary.
inline std::pair<std::vector<std::vector<int>>, std::vector<int>> clean_probe_set(const ToyCorpus& corpus,
                                                                                  const PipelineConfig& c) {
  GeometrySpec g;
  g.emotion_names = corpus.emotions;
  g.noise_scale = 0;
  g.seed = derive_seed(c.seed, 12);
  const auto clean = generate_toy_corpus(g, c.testbed.clean_n_per_emotion, c.testbed.seq_len);
  // Same generator and emotion order, so token ids coincide with the corpus.
  if (clean.vocabulary != corpus.vocabulary) throw StateError("clean probe set: vocabulary differs from the corpus");
  std::vector<std::vector<int>> x;
  std::vector<int> y;
  for (const auto& s : clean.sequences) {
    x.push_back(s.tokens);
    y.push_back(corpus.label_token.at(s.emotion));
  }
  return {x, y};
}

inline Testbed build_testbed(const PipelineConfig& c, RunReport* rep = nullptr) {
  detail::Stopwatch sw;
  Testbed tb;
  tb.corpus = testbed_corpus(c);
  std::vector<std::vector<int>> train_x, test_x;
  for (const auto* s : tb.corpus.split(Split::train)) {
    train_x.push_back(s->tokens);
    tb.train_labels.push_back(s->emotion);
  }
  for (const auto* s : tb.corpus.split(Split::test)) test_x.push_back(s->tokens);
  if (train_x.empty() || test_x.empty()) throw EmptyInputError("testbed: corpus needs train and test sequences");

  if (!c.testbed.checkpoint.empty()) {
    tb.model = load_toylm(c.testbed.checkpoint / "toylm.bin", c.testbed.checkpoint / "toylm.json");
    if (tb.model.config.vocab_size != tb.corpus.vocab_size())
      throw ConfigError("testbed: checkpoint vocabulary does not match the corpus");
  } else {
    ToyLMConfig mc = c.testbed.model;
    mc.vocab_size = tb.corpus.vocab_size();
    const auto pr = init_and_pretrain(mc, train_x, corpus_targets(tb.corpus, tb.corpus.split(Split::train),
                                                                  c.testbed.label_mass),
                                      c.testbed.pretrain);
    tb.model = pr.model;
    tb.model.frozen = true;
    tb.pretrain_loss = pr.loss_history.empty() ? pr.initial_loss : pr.loss_history.back();
  }
  const auto [cx, cy] = clean_probe_set(tb.corpus, c);
  const auto pred = predict_answers(tb.model, cx);
  double hits = 0;
  for (std::size_t i = 0; i < cy.size(); ++i) hits += pred[i] == cy[i];
  tb.clean_accuracy = hits / static_cast<double>(cy.size());

  tb.states = pooled_tap_states(tb.model, train_x);
  for (const auto& [k, x] : tb.states) tb.subspaces[k] = tap_subspace(x, x.cols(), "toy-lm:" + k.str());
  tb.train = prepare_steering_data(tb.model, train_x);
  tb.test = prepare_steering_data(tb.model, test_x);
  if (rep) {
    rep->timings["testbed"] = sw.seconds();
    rep->metrics["testbed"] = {{"clean_accuracy", tb.clean_accuracy}, {"pretrain_final_loss", tb.pretrain_loss}};
  }
  return tb;
}

struct EmotionRun {
  SteeringCell cell;
  SteeringModule module;
  std::vector<StepLog> log;
  std::vector<TapSelection> selection;
};

inline EmotionRun run_emotion(const Testbed& tb, const std::string& emotion, const SteeringConfig& sc) {
  EmotionRun r;
  r.selection = select_taps(tb.states, tb.train_labels, emotion, sc.selection_alpha, sc.selection_tau);
  std::vector<TapKey> taps;
  for (const auto& s : r.selection)
    if (s.selected || sc.ablation.target_all_layers) taps.push_back(s.tap);
  if (taps.empty()) throw StateError("no tap passed selection for '" + emotion + "'");
  const auto tok = steering_tokens(tb.corpus, emotion, !sc.ablation.no_synonyms);
  auto trained = train_steering(init_module(emotion, tb.subspaces, taps, sc), tb.model, tb.train, tok, sc);
  r.module = std::move(trained.module);
  r.log = std::move(trained.log);
  r.cell = evaluate_steering(r.module, tb.model, tb.test, tok, sc.gamma, "synthetic");
  return r;
}

inline void save_testbed(const Testbed& tb, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_toylm(tb.model, dir / "toylm.bin", dir / "toylm.json");
  std::ofstream out(dir / "corpus.json");
  out << to_json(tb.corpus).dump() << "\n";
}

inline RunReport run_steering(const PipelineConfig& c, const Testbed& tb) {
  RunReport rep;
  rep.config_hash = config_hash(c);
  detail::Stopwatch sw;
  const auto dir = c.output_dir;
  std::filesystem::create_directories(dir / "modules");
  std::vector<SteeringCell> cells;
  csv::Writer log(dir / "steering_log.csv");
  log.row({"emotion", "step", "lr", "ce", "margin", "sem", "total"});
  csv::Writer sel(dir / "tap_selection.csv");
  sel.row({"emotion", "layer", "sublayer", "auroc_before", "auroc_after", "selected"});
  for (const auto& e : c.steer_emotions) {
    detail::guarded(rep, "steering", e, [&] {
      const auto r = run_emotion(tb, e, c.steering);
      cells.push_back(r.cell);
      save_module(r.module, c.steering, dir / "modules");
      for (const auto& s : r.log)
        log.row({e, std::to_string(s.step), csv::num(s.lr), csv::num(s.loss.ce), csv::num(s.loss.margin),
                 csv::num(s.loss.sem), csv::num(s.loss.total)});
      for (const auto& s : r.selection)
        sel.row({e, std::to_string(s.tap.layer), s.tap.sublayer, csv::num(s.auroc_before), csv::num(s.auroc_after),
                 s.selected ? "1" : "0"});
    });
  }
  write_steering_report(cells, dir / "steering_report.csv");
  double post = 0, sem = 0, base = 0;
  int failures = 0;
  nlohmann::json formatted = nlohmann::json::object();
  for (const auto& cell : cells) {
    post += cell.post_top1;
    base += cell.baseline_top1;
    sem += cell.mean_sem_loss;
    failures += cell.failed;
    formatted[cell.emotion] = format_cell(cell.baseline_top1, cell.post_top1, cell.mean_sem_loss);
  }
  if (!cells.empty()) {
    const auto n = static_cast<double>(cells.size());
    rep.metrics["steering"] = {{"mean_baseline_top1", base / n}, {"mean_post_top1", post / n},
                               {"mean_sem_loss", sem / n},       {"failures", failures},
                               {"cells", formatted}};
  }
  rep.outputs["steering_report"] = (dir / "steering_report.csv").string();
  rep.outputs["steering_log"] = (dir / "steering_log.csv").string();
  rep.outputs["tap_selection"] = (dir / "tap_selection.csv").string();
  rep.outputs["modules"] = (dir / "modules").string();
  rep.timings["steering"] = sw.seconds();
  return rep;
}

// ---------------------------------------------------------------------------
// ablation grid
// ---------------------------------------------------------------------------

struct AblationSpec {
  std::string name;
  std::string group;  // discrete, R, m1, m2, ce
  std::string value;
  std::function<void(SteeringConfig&)> apply;
};

/// Nine discrete rows followed by the rank, margin and CE-weight sweeps.
inline std::vector<AblationSpec> ablation_grid() {
  std::vector<AblationSpec> g;
  auto flag = [&](const std::string& name, const std::string& f) {
    g.push_back({name, "discrete", f, [f](SteeringConfig& c) { c.ablation.set(f); }});
  };
  g.push_back({"Baseline", "discrete", "", [](SteeringConfig&) {}});
  flag("No GELU", "no_gelu");
  flag("No Bias", "no_bias");
  flag("No Synonyms", "no_synonyms");
  flag("No Semantic Loss", "no_semantic_loss");
  flag("No Cosine Loss", "no_cosine_term");
  flag("No Delta-Norm Loss", "no_delta_norm_term");
  flag("No Emotion Margin Loss", "no_margin_loss");
  flag("Target Layers=All", "target_layers=all");
  auto num = [](double v) { return csv::num(v); };
  for (int r : {1, 2, 3, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50, 100})
    g.push_back({"R=" + std::to_string(r), "R", std::to_string(r), [r](SteeringConfig& c) { c.rank = r; }});
  for (double m : {0.1, 0.25, 0.5, 0.75, 1.0})
    g.push_back({"m1=" + num(m), "m1", num(m), [m](SteeringConfig& c) { c.margin_m1 = m; }});
  for (double m : {1.0, 2.0, 5.0, 10.0, 15.0, 20.0})
    g.push_back({"m2=" + num(m), "m2", num(m), [m](SteeringConfig& c) { c.margin_m2 = m; }});
  for (double w : {1.0, 2.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0})
    g.push_back({"CE Loss Weight=" + num(w), "ce", num(w), [w](SteeringConfig& c) { c.ce_emotion_weight = w; }});
  return g;
}

struct AblationRow {
  std::string name;
  std::string group;
  std::string value;
  double baseline_top1 = 0;
  double post_top1 = 0;
  double mean_sem_loss = 0;
  int failures = 0;
  std::string status = "ok";
};

/// Rows whose configuration cannot apply (e.g. R above the subspace rank)
/// are kept with status "skipped: ..." and are not fatal.
inline RunReport run_ablation(const PipelineConfig& c, const Testbed& tb, std::vector<AblationRow>* rows_out = nullptr) {
  RunReport rep;
  rep.config_hash = config_hash(c);
  detail::Stopwatch sw;
  std::filesystem::create_directories(c.output_dir);
  csv::Writer w(c.output_dir / "ablation.csv");
  w.row({"config", "group", "value", "baseline_top1", "post_top1", "mean_sem_loss", "failures", "status"});
  std::vector<AblationRow> rows;
  for (const auto& spec : ablation_grid()) {
    AblationRow row{spec.name, spec.group, spec.value};
    SteeringConfig sc = c.steering;
    if (c.ablation_steps > 0) sc.steps = c.ablation_steps;
    try {
      spec.apply(sc);
      sc.validate();
      const auto emotions = c.ablation_list();
      for (const auto& e : emotions) {
        const auto r = run_emotion(tb, e, sc);
        row.baseline_top1 += r.cell.baseline_top1;
        row.post_top1 += r.cell.post_top1;
        row.mean_sem_loss += r.cell.mean_sem_loss;
        row.failures += r.cell.failed;
      }
      const auto n = static_cast<double>(emotions.size());
      row.baseline_top1 /= n;
      row.post_top1 /= n;
      row.mean_sem_loss /= n;
    } catch (const RankError& e) {
      row = AblationRow{spec.name, spec.group, spec.value};
      row.status = std::string("skipped: ") + e.what();
      rep.errors.push_back({"ablation", spec.name, e.what(), false});
    } catch (const Error& e) {
      row = AblationRow{spec.name, spec.group, spec.value};
      row.status = std::string("error: ") + e.what();
      rep.errors.push_back({"ablation", spec.name, e.what(), true});
    }
    const bool ran = row.status == "ok";
    w.row({row.name, row.group, row.value, ran ? csv::num(row.baseline_top1) : "", ran ? csv::num(row.post_top1) : "",
           ran ? csv::num(row.mean_sem_loss) : "", ran ? std::to_string(row.failures) : "", row.status});
    rows.push_back(row);
  }
  rep.outputs["ablation"] = (c.output_dir / "ablation.csv").string();
  rep.timings["ablation"] = sw.seconds();
  if (rows_out) *rows_out = std::move(rows);
  return rep;
}

// ---------------------------------------------------------------------------
// full run
// ---------------------------------------------------------------------------

struct RunSelection {
  bool universality = true;
  bool psychology = true;
  bool steering = true;
  bool ablation = false;
};

inline RunReport run_all(const PipelineConfig& c, const RunSelection& sel = {}) {
  RunReport rep;
  rep.config_hash = config_hash(c);
  detail::Stopwatch sw;
  std::filesystem::create_directories(c.output_dir);
  if (sel.universality || sel.psychology) {
    std::optional<ResolvedInputs> in;
    detail::guarded(rep, "inputs", "bundles", [&] { in = resolve_inputs(c); });
    if (in) {
      if (sel.universality) rep.merge(run_universality(c, *in));
      if (sel.psychology) rep.merge(run_psychology(c, *in));
    }
  }
  if (sel.steering || sel.ablation) {
    std::optional<Testbed> tb;
    detail::guarded(rep, "steering", "testbed", [&] { tb = build_testbed(c, &rep); });
    if (tb) {
      save_testbed(*tb, c.output_dir / "testbed");
      rep.outputs["testbed"] = (c.output_dir / "testbed").string();
      if (sel.steering) rep.merge(run_steering(c, *tb));
      if (sel.ablation) rep.merge(run_ablation(c, *tb));
    }
  }
  rep.timings["total"] = sw.seconds();
  {
    std::ofstream cfg(c.output_dir / "effective_config.json");
    cfg << to_json(c).dump(2) << "\n";
  }
  write_run_report(rep, c.output_dir / "run_report.json");
  return rep;
}

}  // namespace emospace
