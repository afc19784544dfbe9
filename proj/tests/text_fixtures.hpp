#pragma once

#include <string>
#include <vector>

namespace fixtures {

// 20 words, 3 sentences, 24 syllables by the vowel-group rule.
// Difficult against kFamiliar: zebras, ancient, baobabs.
inline const std::string kTwentyWords =
    "The cat sat on the mat. The dog ran to the big red barn. Zebras graze quietly near ancient baobabs.";

inline const std::vector<std::string> kFamiliar{"the", "cat", "sat", "on",  "mat",   "dog",     "ran",
                                                "to",  "big", "red", "barn", "graze", "quietly", "near"};

// Word-problem style text reuses a small vocabulary; the narrative does not.
inline const std::string kRepetitive =
    "Tom has 3 apples. Tom gets 2 more apples. How many apples does Tom have? "
    "Tom has 5 apples. Tom gives 1 apple to Ann. How many apples does Tom have?";

inline const std::string kVaried =
    "The harbor woke slowly under a bruised violet sky. Gulls argued over scraps while fishermen "
    "mended nets in silence. Somewhere a radio crackled with news nobody wanted.";

}  // namespace fixtures
