#pragma once
//
// Desk-scale synthetic testbeds: activation bundles with a planted
// low-rank emotional geometry, and a labeled token corpus for the toy LM.
//

#include "emospace/activation_store.hpp"
#include "emospace/core.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace emospace {

inline std::vector<std::string> default_emotions() {
  return {"sad", "happy", "fear", "anger", "neutral", "disgust", "envy", "excitement", "surprise"};
}

/// The six basic emotions among the defaults.
inline std::vector<std::string> basic_emotions() { return {"sad", "happy", "fear", "anger", "disgust", "surprise"}; }

struct GeometrySpec {
  std::vector<std::string> emotion_names = default_emotions();
  Index hidden_dim = 64;
  Index intrinsic_rank = 8;
  double centroid_separation = 4.0;
  double noise_scale = 0.5;
  bool per_layer_rotation = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (emotion_names.size() < 2) throw ConfigError("geometry: need at least 2 emotions");
    if (hidden_dim < 1) throw ConfigError("geometry: hidden_dim must be >= 1");
    if (intrinsic_rank < 1 || intrinsic_rank > hidden_dim)
      throw ConfigError("geometry: intrinsic_rank must be in [1, hidden_dim]");
    if (centroid_separation < 0) throw ConfigError("geometry: centroid_separation must be >= 0");
    if (noise_scale < 0) throw ConfigError("geometry: noise_scale must be >= 0");
    std::vector<std::string> names = emotion_names;
    std::sort(names.begin(), names.end());
    if (std::adjacent_find(names.begin(), names.end()) != names.end())
      throw ConfigError("geometry: duplicate emotion name");
  }
};

struct BundleOptions {
  int layers = 4;
  std::vector<std::string> sublayers{"attn", "mlp"};
  bool token_level = false;
  Index tokens_min = 2;
  Index tokens_max = 6;
  double token_jitter = 0.25;
  double test_fraction = 0.25;
  std::string dataset = "synthetic";
  /// Seed for per-record noise; defaults to the geometry seed.  Sharing the
  /// geometry seed but changing this draws a fresh sample of the same geometry.
  std::optional<std::uint64_t> noise_seed;
};

/// Planted geometry: centroid_e = offset + basis · coeffs_e.
struct PlantedGeometry {
  MatrixD basis;      // D x r, orthonormal columns
  MatrixD coeffs;     // E x r
  VectorD offset;     // D
  MatrixD centroids;  // E x D

  /// Orthogonal map for one tap (identity when rotations are disabled).
  static MatrixD tap_rotation(const GeometrySpec& spec, std::size_t tap_index) {
    const Index d = spec.hidden_dim;
    if (!spec.per_layer_rotation) return MatrixD::Identity(d, d);
    CounterRng rng(derive_seed(spec.seed, 1000 + tap_index));
    return haar_orthogonal(d, rng);
  }

  /// QR of a Gaussian matrix with R's diagonal made positive.
  static MatrixD haar_orthogonal(Index d, CounterRng& rng, Index cols = -1) {
    if (cols < 0) cols = d;
    MatrixD g(d, cols);
    for (Index i = 0; i < d; ++i)
      for (Index j = 0; j < cols; ++j) g(i, j) = rng.normal();
    Eigen::HouseholderQR<MatrixD> qr(g);
    MatrixD q = qr.householderQ() * MatrixD::Identity(d, cols);
    const MatrixD r = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
    for (Index j = 0; j < cols; ++j)
      if (r(j, j) < 0) q.col(j) *= -1.0;
    return q;
  }
};

inline PlantedGeometry plant_geometry(const GeometrySpec& spec) {
  spec.validate();
  const Index d = spec.hidden_dim;
  const Index r = spec.intrinsic_rank;
  const auto e = static_cast<Index>(spec.emotion_names.size());
  CounterRng rng(derive_seed(spec.seed, 1));

  PlantedGeometry g;
  g.basis = PlantedGeometry::haar_orthogonal(d, rng, r);
  g.coeffs.resize(e, r);
  for (Index i = 0; i < e; ++i)
    for (Index j = 0; j < r; ++j) g.coeffs(i, j) = rng.normal();
  double min_dist = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < e; ++i)
    for (Index j = i + 1; j < e; ++j) min_dist = std::min(min_dist, (g.coeffs.row(i) - g.coeffs.row(j)).norm());
  g.coeffs *= spec.centroid_separation > 0 ? spec.centroid_separation / min_dist : 0.0;

  g.offset.resize(d);
  for (Index j = 0; j < d; ++j) g.offset(j) = 0.5 * rng.normal();
  g.centroids = g.coeffs * g.basis.transpose();
  g.centroids.rowwise() += g.offset.transpose();
  return g;
}

namespace detail {

/// Evenly spread test membership: exactly floor(n·f) of n items are test.
inline bool is_test_index(Index j, double fraction) {
  return static_cast<Index>(std::floor((j + 1) * fraction)) > static_cast<Index>(std::floor(j * fraction));
}

}  // namespace detail

/// Generates a bundle in memory.  Record i has emotion i mod E; every tap of a
/// record is the same latent point under that tap's rotation, so relational
/// geometry is identical across taps.
inline BundleData generate_activation_bundle(const GeometrySpec& spec, Index n_per_emotion,
                                             const BundleOptions& opt = {}) {
  spec.validate();
  if (n_per_emotion < 1) throw ConfigError("generate: n_per_emotion must be >= 1");
  if (opt.layers < 1 || opt.sublayers.empty()) throw ConfigError("generate: need >= 1 layer and sublayer");
  if (opt.token_level && (opt.tokens_min < 1 || opt.tokens_max < opt.tokens_min))
    throw ConfigError("generate: invalid token range");

  const PlantedGeometry geo = plant_geometry(spec);
  const Index d = spec.hidden_dim;
  const auto e = static_cast<Index>(spec.emotion_names.size());
  const Index n = n_per_emotion * e;
  CounterRng rng(derive_seed(opt.noise_seed.value_or(spec.seed), 2));

  const MatrixD complement = MatrixD::Identity(d, d) - geo.basis * geo.basis.transpose();

  BundleData out;
  auto& m = out.manifest;
  m.model_id = std::string("synthetic:") + kRngAlgorithm + ":seed=" + std::to_string(spec.seed) +
               ":noise_seed=" + std::to_string(opt.noise_seed.value_or(spec.seed));
  m.hidden_dim = d;
  m.layer_count = opt.layers;
  m.sublayer_names = opt.sublayers;
  m.record_count = n;
  m.emotion_labels = spec.emotion_names;
  m.has_token_level = opt.token_level;

  MatrixD latent(n, d);
  out.labels.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const Index emo = i % e;
    VectorD x = geo.centroids.row(emo).transpose();
    if (spec.noise_scale > 0) {
      VectorD gr(spec.intrinsic_rank), gd(d);
      for (Index j = 0; j < gr.size(); ++j) gr(j) = rng.normal();
      for (Index j = 0; j < d; ++j) gd(j) = rng.normal();
      x += spec.noise_scale * (geo.basis * gr) + 0.01 * spec.noise_scale * (complement * gd);
    }
    latent.row(i) = x.transpose();
    auto& lab = out.labels[static_cast<std::size_t>(i)];
    lab.record_id = i;
    lab.dataset = opt.dataset;
    lab.emotion = spec.emotion_names[static_cast<std::size_t>(emo)];
    lab.split = detail::is_test_index(i / e, opt.test_fraction) ? Split::test : Split::train;
    lab.token_count = opt.token_level ? opt.tokens_min + static_cast<Index>(rng.below(
                                                             static_cast<std::uint64_t>(opt.tokens_max - opt.tokens_min + 1)))
                                      : 1;
  }

  MatrixD token_latent;
  if (opt.token_level) {
    Index total = 0;
    for (const auto& lab : out.labels) total += lab.token_count;
    token_latent.resize(total, d);
    Index row = 0;
    for (Index i = 0; i < n; ++i) {
      const Index t = out.labels[static_cast<std::size_t>(i)].token_count;
      MatrixD jitter(t, d);
      for (Index a = 0; a < t; ++a)
        for (Index b = 0; b < d; ++b) jitter(a, b) = opt.token_jitter * rng.normal();
      jitter.rowwise() -= jitter.colwise().mean();
      token_latent.middleRows(row, t) = jitter.rowwise() + latent.row(i);
      row += t;
    }
  }

  std::size_t tap_index = 0;
  for (int l = 0; l < opt.layers; ++l)
    for (const auto& s : opt.sublayers) {
      const MatrixD rot = PlantedGeometry::tap_rotation(spec, tap_index++);
      out.matrices.push_back({l, s, Payload::pooled, (latent * rot.transpose()).cast<float>()});
      if (opt.token_level)
        out.matrices.push_back({l, s, Payload::tokens, (token_latent * rot.transpose()).cast<float>()});
    }
  return out;
}

/// Negative control: the same activations with emotion labels randomly permuted.
inline BundleData shuffle_labels(BundleData data, std::uint64_t seed, const std::string& dataset = "shuffled") {
  std::vector<std::string> emotions;
  for (const auto& l : data.labels) emotions.push_back(l.emotion);
  CounterRng rng(derive_seed(seed, 7));
  shuffle(emotions.begin(), emotions.end(), rng);
  for (std::size_t i = 0; i < emotions.size(); ++i) {
    data.labels[i].emotion = emotions[i];
    data.labels[i].dataset = dataset;
  }
  data.manifest.model_id += ":shuffled=" + std::to_string(seed);
  return data;
}

// ---------------------------------------------------------------------------
// toy corpus
// ---------------------------------------------------------------------------

struct ToySequence {
  std::vector<int> tokens;
  std::string emotion;
  Split split = Split::train;
};

struct CorpusOptions {
  int synonyms_per_emotion = 2;
  int content_per_emotion = 3;
  int filler_count = 6;
  double test_fraction = 0.25;
  /// Upper bound on vocabulary size; 0 means unbounded.
  Index max_vocab = 0;
};

/// A labeled token corpus.  Every sequence is content tokens followed by the
/// answer marker; the correct next token is the emotion's label token.
/// Synonyms double as emotion-indicative content words.
struct ToyCorpus {
  std::vector<std::string> vocabulary;
  std::vector<std::string> emotions;
  std::vector<ToySequence> sequences;
  std::map<std::string, int> label_token;
  std::map<std::string, std::vector<int>> synonyms;
  std::map<std::string, std::vector<int>> content;
  std::vector<int> filler;
  std::vector<int> template_suffix;

  int vocab_size() const { return static_cast<int>(vocabulary.size()); }

  int emotion_index(const std::string& e) const {
    auto it = std::find(emotions.begin(), emotions.end(), e);
    if (it == emotions.end()) throw LabelError("unknown emotion '" + e + "'");
    return static_cast<int>(it - emotions.begin());
  }

  std::vector<int> label_tokens() const {
    std::vector<int> out;
    for (const auto& e : emotions) out.push_back(label_token.at(e));
    return out;
  }

  std::vector<const ToySequence*> split(Split s) const {
    std::vector<const ToySequence*> out;
    for (const auto& q : sequences)
      if (q.split == s) out.push_back(&q);
    return out;
  }
};

/// noise_scale is read as the probability that a content position carries a
/// distractor (a filler word or another emotion's word) instead of a word of
/// the sequence's own emotion; values above 1 are clamped.
inline ToyCorpus generate_toy_corpus(const GeometrySpec& spec, Index n_per_emotion, Index seq_len,
                                     const CorpusOptions& opt = {}) {
  spec.validate();
  if (seq_len < 2) throw ConfigError("corpus: seq_len must be >= 2");
  if (n_per_emotion < 1) throw ConfigError("corpus: n_per_emotion must be >= 1");
  if (opt.synonyms_per_emotion < 2) throw ConfigError("corpus: need >= 2 synonyms per emotion");
  const auto e = static_cast<Index>(spec.emotion_names.size());
  const Index needed = e * (1 + opt.synonyms_per_emotion + opt.content_per_emotion) + opt.filler_count + 1;
  if (opt.max_vocab > 0 && needed > opt.max_vocab)
    throw ConfigError("corpus: vocabulary of " + std::to_string(opt.max_vocab) + " cannot hold " +
                      std::to_string(needed) + " disjoint label/synonym/content tokens");

  ToyCorpus c;
  c.emotions = spec.emotion_names;
  auto add = [&](const std::string& tok) {
    c.vocabulary.push_back(tok);
    return static_cast<int>(c.vocabulary.size() - 1);
  };
  c.template_suffix = {add("<feel>")};
  for (int i = 0; i < opt.filler_count; ++i) c.filler.push_back(add("w" + std::to_string(i)));
  for (const auto& name : c.emotions) {
    c.label_token[name] = add(name);
    for (int i = 0; i < opt.synonyms_per_emotion; ++i) c.synonyms[name].push_back(add(name + "~" + std::to_string(i)));
    for (int i = 0; i < opt.content_per_emotion; ++i) c.content[name].push_back(add(name + "#" + std::to_string(i)));
  }

  std::map<std::string, std::vector<int>> indicative;
  for (const auto& name : c.emotions) {
    auto& v = indicative[name];
    v = c.synonyms[name];
    v.insert(v.end(), c.content[name].begin(), c.content[name].end());
  }

  const double distractor = std::clamp(spec.noise_scale, 0.0, 1.0);
  CounterRng rng(derive_seed(spec.seed, 3));
  const Index content_len = seq_len - static_cast<Index>(c.template_suffix.size());
  for (Index i = 0; i < n_per_emotion * e; ++i) {
    const auto& name = c.emotions[static_cast<std::size_t>(i % e)];
    ToySequence s;
    s.emotion = name;
    s.split = detail::is_test_index(i / e, opt.test_fraction) ? Split::test : Split::train;
    for (Index t = 0; t < content_len; ++t) {
      const bool noisy = distractor > 0 && rng.uniform() < distractor;
      if (!noisy) {
        const auto& pool = indicative[name];
        s.tokens.push_back(pool[rng.below(pool.size())]);
      } else if (rng.uniform() < 0.5 && !c.filler.empty()) {
        s.tokens.push_back(c.filler[rng.below(c.filler.size())]);
      } else {
        auto other = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(e - 1)));
        if (c.emotions[other] == name) other = static_cast<std::size_t>(e - 1);
        const auto& pool = indicative[c.emotions[other]];
        s.tokens.push_back(pool[rng.below(pool.size())]);
      }
    }
    s.tokens.insert(s.tokens.end(), c.template_suffix.begin(), c.template_suffix.end());
    c.sequences.push_back(std::move(s));
  }
  return c;
}

inline nlohmann::json to_json(const ToyCorpus& c) {
  nlohmann::json seqs = nlohmann::json::array();
  for (const auto& s : c.sequences)
    seqs.push_back({{"tokens", s.tokens}, {"emotion", s.emotion}, {"split", to_string(s.split)}});
  return {{"vocabulary", c.vocabulary}, {"emotions", c.emotions},     {"sequences", seqs},
          {"labels", c.label_token},    {"synonyms", c.synonyms},     {"content", c.content},
          {"filler", c.filler},         {"template", c.template_suffix}};
}

inline ToyCorpus corpus_from_json(const nlohmann::json& j) {
  ToyCorpus c;
  try {
    c.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    c.emotions = j.at("emotions").get<std::vector<std::string>>();
    c.label_token = j.at("labels").get<std::map<std::string, int>>();
    c.synonyms = j.at("synonyms").get<std::map<std::string, std::vector<int>>>();
    c.content = j.value("content", std::map<std::string, std::vector<int>>{});
    c.filler = j.value("filler", std::vector<int>{});
    c.template_suffix = j.at("template").get<std::vector<int>>();
    for (const auto& s : j.at("sequences"))
      c.sequences.push_back({s.at("tokens").get<std::vector<int>>(), s.at("emotion").get<std::string>(),
                             parse_split(s.value("split", std::string("train")))});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corpus.json: ") + e.what());
  }
  for (const auto& s : c.sequences)
    for (int t : s.tokens)
      if (t < 0 || t >= c.vocab_size()) throw FormatError("corpus.json: token id out of range");
  return c;
}

}  // namespace emospace
