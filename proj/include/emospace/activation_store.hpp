#pragma once
//
// Activation bundles: the on-disk corpus of per-(layer, sublayer) activation
// matrices that every analysis consumes.
//
// Layout of a bundle directory:
//
//   manifest.json                 BundleManifest fields + "checksums" {relpath: crc32}
//   labels.csv                    record_id,dataset,emotion,split,token_count
//   pooled/L{layer}_{sub}.f32     N x D, row-major little-endian binary32
//   tokens/L{layer}_{sub}.f32     T_total x D (optional)
//   tokens/index.csv              record_id,row_offset,token_count (optional)
//
// Checksums are standard CRC-32 (zlib polynomial) over the raw file bytes,
// stored as unsigned decimal integers.
//

#include "emospace/core.hpp"
#include "emospace/csv.hpp"

#include <boost/crc.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace emospace {

namespace fs = std::filesystem;

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw FormatError("unknown split '" + s + "' (expected train|test)");
}

struct BundleManifest {
  int format_version = 1;
  std::string model_id;
  Index hidden_dim = 0;
  Index layer_count = 0;
  std::vector<std::string> sublayer_names{"attn", "mlp"};
  Index record_count = 0;
  std::vector<std::string> emotion_labels;
  bool has_token_level = false;
  std::map<std::string, std::uint32_t> checksums;

  void validate() const {
    if (hidden_dim < 1) throw FormatError("manifest: hidden_dim must be >= 1");
    if (layer_count < 1) throw FormatError("manifest: layer_count must be >= 1");
    if (record_count < 0) throw FormatError("manifest: record_count must be >= 0");
    if (sublayer_names.empty()) throw FormatError("manifest: sublayer_names must be non-empty");
    std::set<std::string> seen(sublayer_names.begin(), sublayer_names.end());
    if (seen.size() != sublayer_names.size()) throw FormatError("manifest: duplicate sublayer name");
  }

  bool has_sublayer(const std::string& s) const {
    return std::find(sublayer_names.begin(), sublayer_names.end(), s) != sublayer_names.end();
  }
};

struct RecordLabel {
  Index record_id = 0;
  std::string dataset;
  std::string emotion;
  Split split = Split::train;
  Index token_count = 1;
};

enum class Payload { pooled, tokens };

struct ActivationMatrix {
  int layer = 0;
  std::string sublayer;
  Payload payload = Payload::pooled;
  MatrixF values;
};

/// Token-level activations plus the per-record row index.
struct TokenMatrix {
  MatrixF values;
  std::vector<Index> offsets;
  std::vector<Index> counts;

  Index records() const { return static_cast<Index>(offsets.size()); }
  auto record(Index n) const { return values.middleRows(offsets[n], counts[n]); }
};

/// Everything needed to write a bundle, held in memory.
struct BundleData {
  BundleManifest manifest;
  std::vector<RecordLabel> labels;
  std::vector<ActivationMatrix> matrices;
};

/// Tap identity used throughout: (layer, sublayer name).
struct TapKey {
  int layer = 0;
  std::string sublayer;
  auto operator<=>(const TapKey&) const = default;
  std::string str() const { return "L" + std::to_string(layer) + "_" + sublayer; }
};

inline std::string payload_relpath(Payload p, int layer, const std::string& sublayer) {
  return std::string(p == Payload::pooled ? "pooled" : "tokens") + "/L" + std::to_string(layer) + "_" + sublayer +
         ".f32";
}

/// Prefix sums of token counts: the first row of each record.
inline std::vector<Index> token_offsets(std::span<const Index> token_counts) {
  std::vector<Index> offsets(token_counts.size());
  Index acc = 0;
  for (std::size_t i = 0; i < token_counts.size(); ++i) {
    offsets[i] = acc;
    acc += token_counts[i];
  }
  return offsets;
}

inline std::uint32_t crc32_bytes(const void* data, std::size_t n) {
  boost::crc_32_type crc;
  crc.process_bytes(data, n);
  return crc.checksum();
}

inline std::uint32_t crc32_file(const fs::path& path) {
  const std::string bytes = csv::read_file(path);
  return crc32_bytes(bytes.data(), bytes.size());
}

namespace detail {

inline std::string encode_f32(const MatrixF& m) {
  std::string bytes(static_cast<std::size_t>(m.size()) * 4, '\0');
  std::memcpy(bytes.data(), m.data(), bytes.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < bytes.size(); i += 4) std::reverse(bytes.begin() + i, bytes.begin() + i + 4);
  }
  return bytes;
}

inline MatrixF decode_f32(std::string bytes, Index rows, Index cols) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < bytes.size(); i += 4) std::reverse(bytes.begin() + i, bytes.begin() + i + 4);
  }
  MatrixF m(rows, cols);
  std::memcpy(m.data(), bytes.data(), bytes.size());
  return m;
}

inline void write_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace detail

inline nlohmann::json to_json(const BundleManifest& m) {
  nlohmann::json checks = nlohmann::json::object();
  for (const auto& [k, v] : m.checksums) checks[k] = v;
  return {{"format_version", m.format_version}, {"model_id", m.model_id},
          {"hidden_dim", m.hidden_dim},         {"layer_count", m.layer_count},
          {"sublayer_names", m.sublayer_names}, {"record_count", m.record_count},
          {"emotion_labels", m.emotion_labels}, {"has_token_level", m.has_token_level},
          {"checksums", checks}};
}

inline BundleManifest manifest_from_json(const nlohmann::json& j) {
  BundleManifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    m.model_id = j.at("model_id").get<std::string>();
    m.hidden_dim = j.at("hidden_dim").get<Index>();
    m.layer_count = j.at("layer_count").get<Index>();
    m.sublayer_names = j.at("sublayer_names").get<std::vector<std::string>>();
    m.record_count = j.at("record_count").get<Index>();
    m.emotion_labels = j.at("emotion_labels").get<std::vector<std::string>>();
    m.has_token_level = j.at("has_token_level").get<bool>();
    if (j.contains("checksums"))
      for (const auto& [k, v] : j.at("checksums").items()) m.checksums[k] = v.get<std::uint32_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  m.validate();
  return m;
}

/// Writes a bundle.  `data.manifest.checksums` is ignored and recomputed.
/// Pooled matrices are required for every declared (layer, sublayer); token
/// matrices are required for all of them when has_token_level is set.
inline void write_bundle(const BundleData& data, const fs::path& dir) {
  BundleManifest manifest = data.manifest;
  manifest.validate();
  const Index n = manifest.record_count;
  const Index d = manifest.hidden_dim;

  if (static_cast<Index>(data.labels.size()) != n)
    throw FormatError("labels: " + std::to_string(data.labels.size()) + " rows for record_count " + std::to_string(n));
  std::set<std::string> emotions(manifest.emotion_labels.begin(), manifest.emotion_labels.end());
  std::vector<Index> counts(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const auto& lab = data.labels[static_cast<std::size_t>(i)];
    if (lab.record_id != i) throw FormatError("labels: record_id must be dense and ordered, got " +
                                              std::to_string(lab.record_id) + " at row " + std::to_string(i));
    if (!emotions.count(lab.emotion)) throw FormatError("labels: emotion '" + lab.emotion + "' not in emotion_labels");
    if (lab.token_count < 1) throw FormatError("labels: token_count must be >= 1");
    counts[static_cast<std::size_t>(i)] = lab.token_count;
  }
  const auto offsets = token_offsets(counts);
  Index total_tokens = 0;
  for (auto c : counts) total_tokens += c;

  std::map<std::pair<Payload, TapKey>, const ActivationMatrix*> by_key;
  for (const auto& m : data.matrices) {
    if (m.layer < 0 || m.layer >= manifest.layer_count)
      throw FormatError("matrix layer " + std::to_string(m.layer) + " outside [0, layer_count)");
    if (!manifest.has_sublayer(m.sublayer)) throw FormatError("matrix sublayer '" + m.sublayer + "' not declared");
    if (m.payload == Payload::tokens && !manifest.has_token_level)
      throw FormatError("token-level matrix supplied but has_token_level is false");
    const Index rows = m.payload == Payload::pooled ? n : total_tokens;
    if (m.values.rows() != rows || m.values.cols() != d)
      throw FormatError(payload_relpath(m.payload, m.layer, m.sublayer) + ": shape " +
                        std::to_string(m.values.rows()) + "x" + std::to_string(m.values.cols()) + ", expected " +
                        std::to_string(rows) + "x" + std::to_string(d));
    if (!m.values.allFinite())
      throw DataError(payload_relpath(m.payload, m.layer, m.sublayer) + ": non-finite value");
    if (!by_key.emplace(std::pair{m.payload, TapKey{m.layer, m.sublayer}}, &m).second)
      throw FormatError("duplicate matrix " + payload_relpath(m.payload, m.layer, m.sublayer));
  }
  for (int l = 0; l < manifest.layer_count; ++l)
    for (const auto& s : manifest.sublayer_names) {
      if (!by_key.count({Payload::pooled, TapKey{l, s}}))
        throw FormatError("missing pooled matrix " + payload_relpath(Payload::pooled, l, s));
      if (manifest.has_token_level && !by_key.count({Payload::tokens, TapKey{l, s}}))
        throw FormatError("missing token matrix " + payload_relpath(Payload::tokens, l, s));
    }

  fs::create_directories(dir / "pooled");
  if (manifest.has_token_level) fs::create_directories(dir / "tokens");
  manifest.checksums.clear();

  auto put = [&](const std::string& rel, const std::string& bytes) {
    detail::write_bytes(dir / rel, bytes);
    manifest.checksums[rel] = crc32_bytes(bytes.data(), bytes.size());
  };

  {
    std::string text = "record_id,dataset,emotion,split,token_count\n";
    for (const auto& lab : data.labels)
      text += std::to_string(lab.record_id) + "," + csv::quote(lab.dataset) + "," + csv::quote(lab.emotion) + "," +
              to_string(lab.split) + "," + std::to_string(lab.token_count) + "\n";
    put("labels.csv", text);
  }
  if (manifest.has_token_level) {
    std::string text = "record_id,row_offset,token_count\n";
    for (Index i = 0; i < n; ++i)
      text += std::to_string(i) + "," + std::to_string(offsets[static_cast<std::size_t>(i)]) + "," +
              std::to_string(counts[static_cast<std::size_t>(i)]) + "\n";
    put("tokens/index.csv", text);
  }
  for (const auto& [key, m] : by_key) put(payload_relpath(key.first, key.second.layer, key.second.sublayer),
                                          detail::encode_f32(m->values));

  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw Error("cannot write manifest in " + dir.string());
  out << to_json(manifest).dump(2) << '\n';
}

/// Read-only view of a bundle directory.  Matrices are loaded on demand;
/// instances are safe to share between concurrent readers.
class ActivationBundle {
 public:
  static ActivationBundle open(const fs::path& dir) { return ActivationBundle(dir); }

  const BundleManifest& manifest() const { return manifest_; }
  const std::vector<RecordLabel>& labels() const { return labels_; }
  const fs::path& path() const { return dir_; }
  Index records() const { return manifest_.record_count; }

  std::vector<TapKey> taps() const {
    std::vector<TapKey> out;
    for (int l = 0; l < manifest_.layer_count; ++l)
      for (const auto& s : manifest_.sublayer_names) out.push_back({l, s});
    return out;
  }

  std::vector<std::string> emotions_per_record() const {
    std::vector<std::string> out;
    out.reserve(labels_.size());
    for (const auto& l : labels_) out.push_back(l.emotion);
    return out;
  }

  MatrixF pooled(int layer, const std::string& sublayer) const {
    check_tap(layer, sublayer);
    return load(payload_relpath(Payload::pooled, layer, sublayer), manifest_.record_count);
  }

  TokenMatrix tokens(int layer, const std::string& sublayer) const {
    if (!manifest_.has_token_level) throw CapabilityError(dir_.string() + ": bundle has no token-level payload");
    check_tap(layer, sublayer);
    TokenMatrix t;
    t.offsets = offsets_;
    t.counts = counts_;
    t.values = load(payload_relpath(Payload::tokens, layer, sublayer), total_tokens_);
    return t;
  }

  /// Re-validates every checksum and shape; throws on the first failure.
  void verify() const {
    for (const auto& [rel, crc] : manifest_.checksums) {
      if (!fs::exists(dir_ / rel)) throw IntegrityError("missing file declared in manifest: " + rel);
      if (crc32_file(dir_ / rel) != crc) throw CorruptionError("checksum mismatch: " + rel);
    }
    for (const auto& t : taps()) {
      (void)pooled(t.layer, t.sublayer);
      if (manifest_.has_token_level) (void)tokens(t.layer, t.sublayer);
    }
  }

 private:
  explicit ActivationBundle(const fs::path& dir) : dir_(dir) {
    const fs::path mpath = dir / "manifest.json";
    if (!fs::exists(mpath)) throw NotFoundError("no manifest.json in " + dir.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(csv::read_file(mpath));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(std::string("manifest.json: ") + e.what());
    }
    manifest_ = manifest_from_json(j);
    load_labels();
    if (manifest_.has_token_level) load_index();
  }

  void check_tap(int layer, const std::string& sublayer) const {
    if (layer < 0 || layer >= manifest_.layer_count)
      throw NotFoundError("layer " + std::to_string(layer) + " not in bundle " + dir_.string());
    if (!manifest_.has_sublayer(sublayer))
      throw NotFoundError("sublayer '" + sublayer + "' not declared in bundle " + dir_.string());
  }

  std::string checked_bytes(const std::string& rel) const {
    const fs::path p = dir_ / rel;
    if (!fs::exists(p)) throw IntegrityError("missing file for declared payload: " + rel);
    std::string bytes = csv::read_file(p);
    auto it = manifest_.checksums.find(rel);
    if (it == manifest_.checksums.end()) throw IntegrityError("no checksum recorded for " + rel);
    if (crc32_bytes(bytes.data(), bytes.size()) != it->second) throw CorruptionError("checksum mismatch: " + rel);
    return bytes;
  }

  MatrixF load(const std::string& rel, Index rows) const {
    const fs::path p = dir_ / rel;
    if (!fs::exists(p)) throw IntegrityError("missing file for declared payload: " + rel);
    const auto expected = static_cast<std::uintmax_t>(rows) * static_cast<std::uintmax_t>(manifest_.hidden_dim) * 4;
    if (fs::file_size(p) != expected)
      throw CorruptionError(rel + ": size " + std::to_string(fs::file_size(p)) + " bytes, expected " +
                            std::to_string(expected));
    return detail::decode_f32(checked_bytes(rel), rows, manifest_.hidden_dim);
  }

  void load_labels() {
    csv::Table t(csv::parse(checked_bytes("labels.csv")), (dir_ / "labels.csv").string());
    if (static_cast<Index>(t.size()) != manifest_.record_count)
      throw IntegrityError("labels.csv has " + std::to_string(t.size()) + " rows, manifest declares " +
                           std::to_string(manifest_.record_count));
    std::set<std::string> emotions(manifest_.emotion_labels.begin(), manifest_.emotion_labels.end());
    labels_.resize(t.size());
    for (std::size_t r = 0; r < t.size(); ++r) {
      RecordLabel& lab = labels_[r];
      lab.record_id = t.integer(r, "record_id");
      lab.dataset = t.at(r, "dataset");
      lab.emotion = t.at(r, "emotion");
      lab.split = parse_split(t.at(r, "split"));
      lab.token_count = t.integer(r, "token_count");
      if (lab.record_id != static_cast<Index>(r))
        throw IntegrityError("labels.csv: record_id " + std::to_string(lab.record_id) + " at row " +
                             std::to_string(r) + " (ids must be dense and ordered)");
      if (!emotions.count(lab.emotion)) throw IntegrityError("labels.csv: unknown emotion '" + lab.emotion + "'");
      if (lab.token_count < 1) throw IntegrityError("labels.csv: token_count < 1");
    }
  }

  void load_index() {
    csv::Table t(csv::parse(checked_bytes("tokens/index.csv")), (dir_ / "tokens/index.csv").string());
    if (static_cast<Index>(t.size()) != manifest_.record_count)
      throw IntegrityError("tokens/index.csv row count does not match record_count");
    offsets_.resize(t.size());
    counts_.resize(t.size());
    Index expect = 0;
    for (std::size_t r = 0; r < t.size(); ++r) {
      offsets_[r] = t.integer(r, "row_offset");
      counts_[r] = t.integer(r, "token_count");
      if (t.integer(r, "record_id") != static_cast<Index>(r) || offsets_[r] != expect ||
          counts_[r] != labels_[r].token_count)
        throw IntegrityError("tokens/index.csv: inconsistent entry for record " + std::to_string(r));
      expect += counts_[r];
    }
    total_tokens_ = expect;
  }

  fs::path dir_;
  BundleManifest manifest_;
  std::vector<RecordLabel> labels_;
  std::vector<Index> offsets_;
  std::vector<Index> counts_;
  Index total_tokens_ = 0;
};

enum class PoolMode { mean, max };

/// Collapses a T x D block of token states into one row.
template <typename Derived>
RowVec<typename Derived::Scalar> pool_tokens(const Eigen::MatrixBase<Derived>& tokens, PoolMode mode) {
  if (tokens.rows() == 0) throw EmptyInputError("pool_tokens: no tokens");
  if (mode == PoolMode::mean) return tokens.colwise().mean();
  return tokens.colwise().maxCoeff();
}

inline MatrixD to_double(const MatrixF& m) { return m.cast<double>(); }

}  // namespace emospace
