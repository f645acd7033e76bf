#pragma once

#include <cctype>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace salcls {

// Character span [begin, end) into a normalized document text.
struct CharSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  bool operator==(const CharSpan&) const = default;
  bool overlaps(const CharSpan& other) const {
    return begin < other.end && other.begin < end;
  }
};

// Collapses runs of whitespace to single spaces and trims the ends.
// All span arithmetic downstream is defined against this form.
inline std::string normalize_whitespace(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool in_ws = true;  // leading whitespace dropped
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!in_ws) out.push_back(' ');
      in_ws = true;
    } else {
      out.push_back(c);
      in_ws = false;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_whitespace(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

// A token and where it sits in the normalized text.
struct Token {
  std::string text;
  CharSpan span;
};

namespace detail {
inline bool is_edge_punct(char c) {
  switch (c) {
    case '.': case ',': case '!': case '?': case ';': case ':':
    case '"': case '(': case ')': case '[': case ']': case '{': case '}':
      return true;
    default:
      return false;
  }
}
}  // namespace detail

// Word-level tokenizer: whitespace split, then leading/trailing punctuation
// peeled off as separate tokens. Interior apostrophes and hyphens stay inside
// the word ("don't" is one token).
inline std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j == i) break;
    std::size_t b = i, e = j;
    while (b < e && detail::is_edge_punct(text[b])) {
      tokens.push_back({std::string(text.substr(b, 1)), {b, b + 1}});
      ++b;
    }
    std::size_t tail = e;
    while (tail > b && detail::is_edge_punct(text[tail - 1])) --tail;
    if (tail > b)
      tokens.push_back({std::string(text.substr(b, tail - b)), {b, tail}});
    for (std::size_t k = tail; k < e; ++k)
      tokens.push_back({std::string(text.substr(k, 1)), {k, k + 1}});
    i = j;
  }
  return tokens;
}

// FNV-1a, used for the hashing-trick vocabulary. Stable across platforms.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace salcls
