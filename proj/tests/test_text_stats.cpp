#include "emospace/text_stats.hpp"

#include "test_util.hpp"
#include "text_fixtures.hpp"

#include <algorithm>

using namespace emospace;
using namespace emospace::text;

TEST(Tokenize, SplitsOnTerminalPunctuation) {
  EXPECT_EQ(tokenize_and_split("Hi there. Bye!"), (std::vector<Sentence>{{"Hi", "there"}, {"Bye"}}));
  EXPECT_EQ(tokenize_and_split("a.b").size(), 1u);
  EXPECT_TRUE(tokenize_and_split("").empty());
  EXPECT_TRUE(tokenize_and_split("  ... ").empty());
}

TEST(Tokenize, MixedPunctuationHandCount) {
  const auto s = tokenize_and_split("Wait... what?! She said \"no,\" twice. Really? Yes!  Done.");
  const std::vector<Sentence> expected{{"Wait"}, {"what"}, {"She", "said", "no", "twice"}, {"Really"}, {"Yes"}, {"Done"}};
  EXPECT_EQ(s, expected);
}

TEST(Syllables, VowelGroupHeuristic) {
  EXPECT_EQ(count_syllables("cat"), 1);
  EXPECT_EQ(count_syllables("graze"), 1);
  EXPECT_EQ(count_syllables("the"), 1);
  EXPECT_EQ(count_syllables("quietly"), 2);
  EXPECT_EQ(count_syllables("baobabs"), 2);
  EXPECT_EQ(count_syllables("rhythm"), 1);
  EXPECT_EQ(count_syllables("syzygy"), 3);
  EXPECT_EQ(count_syllables("Zebras"), 2);
  EXPECT_EQ(count_syllables("brr"), 1);
  EXPECT_EQ(count_syllables("42"), 0);
  for (std::string w : {"b", "xyz", "e", "Schtschedrin", "queue"}) EXPECT_GE(count_syllables(w), 1) << w;
}

TEST(Readability, FleschKincaidFixtures) {
  EXPECT_NEAR(fk_grade(10, 1, 15), 6.01, 1e-6);
  EXPECT_NEAR(fk_grade(1, 1, 1), -3.4, 1e-6);
  EXPECT_NEAR(fk_grade(20, 2, 30), fk_grade(10, 1, 15), 1e-12);
  EXPECT_LT(fk_grade(10, 1, 14), fk_grade(10, 1, 15));
  EXPECT_THROW(fk_grade(0, 1, 0), UndefinedError);
  EXPECT_THROW(fk_grade(3, 0, 3), UndefinedError);
}

TEST(Readability, DaleChallFixtures) {
  EXPECT_NEAR(dale_chall(10, 1, 0.0), 0.496, 1e-6);
  EXPECT_NEAR(dale_chall(10, 1, 0.05), 0.1579 * 5 + 0.496, 1e-6);
  EXPECT_NEAR(dale_chall(10, 1, 0.0500001), 0.1579 * 5.00001 + 0.496 + 3.6365, 1e-6);
  EXPECT_THROW(dale_chall(10, 1, 1.5), DataError);
}

TEST(Readability, TwentyWordDocument) {
  const FamiliarWords fam(fixtures::kFamiliar);
  StatsOptions opt;
  opt.familiar = &fam;
  const auto d = document_stats(fixtures::kTwentyWords, opt);
  ASSERT_TRUE(d);
  EXPECT_EQ(d->sent_count, 3);
  EXPECT_NEAR(d->sent_len, 20.0 / 3.0, 1e-12);
  EXPECT_NEAR(*d->syll_per_word, 24.0 / 20.0, 1e-12);
  EXPECT_NEAR(*d->dale_chall, 0.1579 * 15.0 + 0.0496 * 20.0 / 3.0 + 3.6365, 1e-6);
  EXPECT_NEAR(*d->dale_chall, 6.3356667, 1e-6);
  EXPECT_NEAR(*d->fk_grade, 1.17, 1e-6);
  const double mean = 20.0 / 3.0;
  EXPECT_NEAR(d->sent_len_std, std::sqrt((std::pow(6 - mean, 2) + std::pow(8 - mean, 2) + std::pow(6 - mean, 2)) / 3),
              1e-12);
  StatsOptions missing;
  EXPECT_THROW(document_stats(fixtures::kTwentyWords, missing), ConfigError);
}

TEST(Ttr, ValuesAndProperties) {
  EXPECT_DOUBLE_EQ(ttr({"a", "b", "c"}), 1.0);
  EXPECT_DOUBLE_EQ(ttr({"go", "Go", "GO", "go"}), 0.25);
  EXPECT_THROW(ttr({}), EmptyInputError);
  std::vector<std::string> t{"x", "y", "x", "z", "w", "y"};
  const double base = ttr(t);
  std::vector<std::string> perm = t;
  std::reverse(perm.begin(), perm.end());
  EXPECT_DOUBLE_EQ(ttr(perm), base);
  for (std::size_t i = 0; i < t.size(); ++i) {
    auto dup = t;
    dup.push_back(t[i]);
    EXPECT_LE(ttr(dup), base);
  }
}

TEST(Ttr, RepetitiveTextScoresLower) {
  StatsOptions opt;
  opt.compute_dale_chall = false;
  EXPECT_LT(document_stats(fixtures::kRepetitive, opt)->ttr, document_stats(fixtures::kVaried, opt)->ttr);
}

TEST(Corpus, PerDatasetStatsAndDashes) {
  const auto dir = testutil::scratch();
  {
    csv::Writer w(dir / "corpus.csv");
    w.row({"text", "dataset", "emotion"});
    w.row({fixtures::kRepetitive, "math", "none"});
    w.row({fixtures::kVaried, "stories", "sad"});
    w.row({"Short one. Then two words.", "stories", "joy"});
    w.row({"यह एक वाक्य है।", "hindi", "joy"});
  }
  {
    std::ofstream f(dir / "familiar.txt");
    f << "The\ncat\r\n  tom \n";
  }
  const auto fam = FamiliarWords::load(dir / "familiar.txt");
  EXPECT_EQ(fam.size(), 3u);
  EXPECT_TRUE(fam.familiar("TOM,"));
  StatsOptions opt;
  opt.familiar = &fam;
  const auto stats = corpus_stats(csv::Table::load(dir / "corpus.csv"), opt, {"hindi"});
  ASSERT_EQ(stats.size(), 3u);
  EXPECT_EQ(stats[1].dataset, "stories");
  EXPECT_EQ(stats[1].documents, 2);
  EXPECT_GT(stats[1].features.at("sent_len")->std, 0.0);
  EXPECT_FALSE(stats[2].features.at("fk_grade"));
  EXPECT_TRUE(stats[2].features.at("ttr"));
  write_corpus_stats(stats, dir / "text_stats.csv");
  const auto t = csv::Table::load(dir / "text_stats.csv");
  EXPECT_EQ(t.at(2, "fk_grade_mean"), "--");
  EXPECT_EQ(t.at(2, "documents"), "1");
  EXPECT_NE(t.at(0, "dale_chall_mean"), "--");
  for (std::size_t r = 0; r < t.size(); ++r) {
    const double v = std::stod(t.at(r, "ttr_mean"));
    EXPECT_GT(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}
