#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "salcls/text.hpp"

using namespace salcls;

TEST_CASE("normalize_whitespace collapses runs and trims") {
  CHECK(normalize_whitespace("  go \t team\n\ngo ") == "go team go");
  CHECK(normalize_whitespace("abc") == "abc");
  CHECK(normalize_whitespace(" \t\n ") == "");
}

TEST_CASE("tokenize yields spans into the text") {
  const std::string text = "go team go";
  auto toks = tokenize(text);
  REQUIRE(toks.size() == 3);
  CHECK(toks[0].text == "go");
  CHECK(toks[1].text == "team");
  CHECK(toks[1].span == CharSpan{3, 7});
  for (const auto& t : toks)
    CHECK(text.substr(t.span.begin, t.span.end - t.span.begin) == t.text);
}

TEST_CASE("tokenize keeps interior apostrophes, peels edge punctuation") {
  auto toks = tokenize("I really don't like it.");
  std::vector<std::string> words;
  for (const auto& t : toks) words.push_back(t.text);
  CHECK(words == std::vector<std::string>{"I", "really", "don't", "like", "it", "."});
}

TEST_CASE("tokenize peels leading punctuation and multi-char tails") {
  auto toks = tokenize("(hello!)");
  std::vector<std::string> words;
  for (const auto& t : toks) words.push_back(t.text);
  CHECK(words == std::vector<std::string>{"(", "hello", "!", ")"});
}

TEST_CASE("every non-space character is covered by exactly one token span") {
  const std::string text = "a-b c.d \"e\" don't (f)";
  auto toks = tokenize(text);
  std::vector<int> cover(text.size(), 0);
  for (const auto& t : toks)
    for (std::size_t i = t.span.begin; i < t.span.end; ++i) ++cover[i];
  for (std::size_t i = 0; i < text.size(); ++i)
    CHECK(cover[i] == (text[i] == ' ' ? 0 : 1));
}

TEST_CASE("fnv1a is stable") {
  CHECK(fnv1a("") == 1469598103934665603ull);
  CHECK(fnv1a("a") == fnv1a("a"));
  CHECK(fnv1a("a") != fnv1a("b"));
}

TEST_CASE("split_whitespace splits an extractive span into words") {
  CHECK(split_whitespace("really don't like") ==
        std::vector<std::string>{"really", "don't", "like"});
  CHECK(split_whitespace("  one  ") == std::vector<std::string>{"one"});
  CHECK(split_whitespace("") == std::vector<std::string>{});
}
