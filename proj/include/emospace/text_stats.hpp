#pragma once
//
// Lexical and readability features of text corpora: sentence length,
// syllables per word, word length, Dale–Chall, Flesch–Kincaid grade,
// sentence count, sentence-length spread, and type-token ratio.
//

#include "emospace/core.hpp"
#include "emospace/csv.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace emospace::text {

using Sentence = std::vector<std::string>;

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
inline bool is_alpha(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }
inline bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }

inline std::string fold(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

/// Removes leading and trailing ASCII punctuation; interior characters stay.
inline std::string strip_punct(std::string_view w) {
  std::size_t a = 0, b = w.size();
  while (a < b && is_punct(w[a])) ++a;
  while (b > a && is_punct(w[b - 1])) --b;
  return std::string(w.substr(a, b - a));
}

/// Sentences end at '.', '!' or '?' followed by whitespace or end of text;
/// words are whitespace-separated with edge punctuation stripped.
inline std::vector<Sentence> tokenize_and_split(std::string_view text) {
  std::vector<Sentence> out;
  Sentence current;
  std::string word;
  auto flush_word = [&] {
    if (!word.empty()) {
      auto w = strip_punct(word);
      if (!w.empty()) current.push_back(std::move(w));
      word.clear();
    }
  };
  auto flush_sentence = [&] {
    flush_word();
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (is_space(c)) {
      flush_word();
      continue;
    }
    word += c;
    if ((c == '.' || c == '!' || c == '?') && (i + 1 == text.size() || is_space(text[i + 1]))) flush_sentence();
  }
  flush_sentence();
  return out;
}

/// Vowel-group heuristic: maximal runs of a/e/i/o/u/y, minus a silent
/// trailing 'e' when that leaves at least one.  Any word with a letter
/// counts at least one syllable.
inline int count_syllables(std::string_view word) {
  const std::string w = fold(word);
  auto vowel = [](char c) { return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u' || c == 'y'; };
  int groups = 0;
  bool prev = false;
  bool any_letter = false;
  for (char c : w) {
    any_letter |= is_alpha(c);
    const bool v = vowel(c);
    if (v && !prev) ++groups;
    prev = v;
  }
  std::size_t end = w.size();
  while (end > 0 && !is_alpha(w[end - 1])) --end;
  if (end > 0 && w[end - 1] == 'e' && groups > 1) --groups;
  if (any_letter && groups < 1) groups = 1;
  return groups;
}

inline double fk_grade(double words, double sentences, double syllables) {
  if (words <= 0 || sentences <= 0) throw UndefinedError("fk_grade: need at least one word and one sentence");
  return 0.39 * (words / sentences) + 11.8 * (syllables / words) - 15.59;
}

inline double dale_chall(double words, double sentences, double difficult_fraction) {
  if (words <= 0 || sentences <= 0) throw UndefinedError("dale_chall: need at least one word and one sentence");
  if (difficult_fraction < 0 || difficult_fraction > 1) throw DataError("dale_chall: fraction outside [0, 1]");
  double score = 0.1579 * (100.0 * difficult_fraction) + 0.0496 * (words / sentences);
  if (difficult_fraction > 0.05) score += 3.6365;
  return score;
}

inline double ttr(const std::vector<std::string>& tokens) {
  if (tokens.empty()) throw EmptyInputError("ttr: no tokens");
  std::unordered_set<std::string> types;
  for (const auto& t : tokens) types.insert(fold(t));
  return static_cast<double>(types.size()) / static_cast<double>(tokens.size());
}

/// Case-folded familiar-word list (one word per line).
class FamiliarWords {
 public:
  FamiliarWords() = default;
  explicit FamiliarWords(const std::vector<std::string>& words) {
    for (const auto& w : words) add(w);
  }

  static FamiliarWords load(const std::filesystem::path& path) {
    FamiliarWords f;
    std::string line;
    const std::string text = csv::read_file(path);
    std::size_t start = 0;
    while (start <= text.size()) {
      const auto nl = text.find('\n', start);
      const auto len = (nl == std::string::npos ? text.size() : nl) - start;
      f.add(text.substr(start, len));
      if (nl == std::string::npos) break;
      start = nl + 1;
    }
    return f;
  }

  bool familiar(std::string_view w) const { return words_.count(fold(strip_punct(w))) != 0; }
  std::size_t size() const { return words_.size(); }

 private:
  void add(std::string w) {
    while (!w.empty() && (w.back() == '\r' || is_space(w.back()))) w.pop_back();
    std::size_t a = 0;
    while (a < w.size() && is_space(w[a])) ++a;
    w = fold(w.substr(a));
    if (!w.empty()) words_.insert(std::move(w));
  }
  std::unordered_set<std::string> words_;
};

struct DocumentStats {
  double sent_len = 0;
  std::optional<double> syll_per_word;
  double word_len = 0;
  std::optional<double> dale_chall;
  std::optional<double> fk_grade;
  double sent_count = 0;
  double sent_len_std = 0;
  double ttr = 0;
};

struct StatsOptions {
  /// Syllable and readability features only apply to Latin-script English-like text.
  bool english_like = true;
  bool compute_dale_chall = true;
  const FamiliarWords* familiar = nullptr;
};

/// Returns nullopt for documents with no words.
inline std::optional<DocumentStats> document_stats(std::string_view text, const StatsOptions& opt = {}) {
  const auto sentences = tokenize_and_split(text);
  std::vector<std::string> words;
  std::vector<double> lengths;
  for (const auto& s : sentences) {
    lengths.push_back(static_cast<double>(s.size()));
    words.insert(words.end(), s.begin(), s.end());
  }
  if (words.empty()) return std::nullopt;

  DocumentStats d;
  const auto nw = static_cast<double>(words.size());
  const auto ns = static_cast<double>(sentences.size());
  d.sent_count = ns;
  d.sent_len = nw / ns;
  double var = 0;
  for (double l : lengths) var += (l - d.sent_len) * (l - d.sent_len);
  d.sent_len_std = std::sqrt(var / ns);
  double chars = 0;
  for (const auto& w : words) chars += static_cast<double>(w.size());
  d.word_len = chars / nw;
  d.ttr = ttr(words);

  if (opt.english_like) {
    double syll = 0;
    for (const auto& w : words) syll += count_syllables(w);
    d.syll_per_word = syll / nw;
    d.fk_grade = fk_grade(nw, ns, syll);
    if (opt.compute_dale_chall) {
      if (!opt.familiar) throw ConfigError("dale_chall requested but no familiar-word list supplied");
      double difficult = 0;
      for (const auto& w : words) difficult += opt.familiar->familiar(w) ? 0 : 1;
      d.dale_chall = dale_chall(nw, ns, difficult / nw);
    }
  }
  return d;
}

struct MeanStd {
  double mean = 0;
  double std = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  for (double x : v) m.std += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(m.std / static_cast<double>(v.size()));
  return m;
}

inline const std::vector<std::string>& feature_names() {
  static const std::vector<std::string> names{"sent_len", "syll_per_word", "word_len", "dale_chall",
                                              "fk_grade", "sent_count",    "sent_len_std", "ttr"};
  return names;
}

/// Per-dataset mean ± std of every feature; absent features stay nullopt.
struct CorpusStats {
  std::string dataset;
  Index documents = 0;
  std::map<std::string, std::optional<MeanStd>> features;
};

inline std::vector<CorpusStats> corpus_stats(const csv::Table& corpus, const StatsOptions& english,
                                             const std::set<std::string>& non_english = {}) {
  std::map<std::string, std::vector<DocumentStats>> per;
  std::vector<std::string> order;
  const auto text_col = corpus.column("text");
  const auto dataset_col = corpus.column("dataset");
  (void)text_col;
  (void)dataset_col;
  for (std::size_t r = 0; r < corpus.size(); ++r) {
    const auto& ds = corpus.at(r, "dataset");
    StatsOptions opt = english;
    if (non_english.count(ds)) opt.english_like = false;
    auto d = document_stats(corpus.at(r, "text"), opt);
    if (!per.count(ds)) order.push_back(ds);
    auto& bucket = per[ds];
    if (d) bucket.push_back(*d);
  }
  std::vector<CorpusStats> out;
  for (const auto& ds : order) {
    const auto& docs = per[ds];
    CorpusStats c;
    c.dataset = ds;
    c.documents = static_cast<Index>(docs.size());
    auto collect = [&](const std::string& name, auto getter) {
      std::vector<double> v;
      for (const auto& d : docs)
        if (auto x = getter(d)) v.push_back(*x);
      c.features[name] = v.empty() ? std::nullopt : std::optional<MeanStd>(mean_std(v));
    };
    using O = std::optional<double>;
    collect("sent_len", [](const DocumentStats& d) { return O(d.sent_len); });
    collect("syll_per_word", [](const DocumentStats& d) { return d.syll_per_word; });
    collect("word_len", [](const DocumentStats& d) { return O(d.word_len); });
    collect("dale_chall", [](const DocumentStats& d) { return d.dale_chall; });
    collect("fk_grade", [](const DocumentStats& d) { return d.fk_grade; });
    collect("sent_count", [](const DocumentStats& d) { return O(d.sent_count); });
    collect("sent_len_std", [](const DocumentStats& d) { return O(d.sent_len_std); });
    collect("ttr", [](const DocumentStats& d) { return O(d.ttr); });
    out.push_back(std::move(c));
  }
  return out;
}

/// text_stats.csv: dataset, documents, then <feature>_mean/<feature>_sd for
/// each feature; features not computed for a dataset are written as "--".
inline void write_corpus_stats(const std::vector<CorpusStats>& stats, const std::filesystem::path& path) {
  csv::Writer w(path);
  std::vector<std::string> header{"dataset", "documents"};
  for (const auto& f : feature_names()) {
    header.push_back(f + "_mean");
    header.push_back(f + "_sd");
  }
  w.row(header);
  for (const auto& s : stats) {
    std::vector<std::string> row{s.dataset, std::to_string(s.documents)};
    for (const auto& f : feature_names()) {
      const auto& v = s.features.at(f);
      row.push_back(v ? csv::num(v->mean) : "--");
      row.push_back(v ? csv::num(v->std) : "--");
    }
    w.row(row);
  }
}

}  // namespace emospace::text
