#include "condense/corpus.hpp"

#include <array>
#include <cmath>
#include <string_view>
#include <vector>

#include "condense/rng.hpp"

namespace condense {

namespace {

constexpr std::array<std::string_view, 96> kLexicon{
    "the",     "of",       "and",      "to",       "in",      "a",        "is",       "that",
    "for",     "it",       "as",       "was",      "with",    "be",       "by",       "on",
    "not",     "he",       "this",     "are",      "or",      "his",      "from",     "at",
    "which",   "but",      "have",     "an",       "had",     "they",     "you",      "were",
    "their",   "one",      "all",      "we",       "can",     "her",      "has",      "there",
    "been",    "if",       "more",     "when",     "will",    "would",    "who",      "so",
    "river",   "city",     "church",   "station",  "album",   "season",   "army",     "road",
    "history", "village",  "species",  "music",    "film",    "school",   "century",  "king",
    "war",     "island",   "team",     "county",   "league",  "record",   "battle",   "bridge",
    "built",   "released", "played",   "located",  "named",   "became",   "known",    "later",
    "north",   "south",    "early",    "first",    "second",  "large",    "small",    "new",
    "during",  "after",    "between",  "under",    "about",   "several",  "many",     "most"};

// Inverse-CDF table for P(rank k) proportional to 1 / (k + 1).
std::vector<double> zipf_cdf(std::size_t n) {
  std::vector<double> cdf(n);
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) cdf[k] = (total += 1.0 / static_cast<double>(k + 1));
  for (auto& c : cdf) c /= total;
  return cdf;
}

}  // namespace

std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  const auto cdf = zipf_cdf(kLexicon.size());
  Rng rng(seed);
  auto word = [&]() -> std::string_view {
    const double u = rng.uniform();
    std::size_t k = 0;
    while (k + 1 < cdf.size() && cdf[k] < u) ++k;
    return kLexicon[k];
  };

  std::string out;
  out.reserve(bytes + 256);
  std::size_t sentences_in_paragraph = 0;
  while (out.size() < bytes) {
    const std::size_t len = 5 + rng.below(14);
    for (std::size_t i = 0; i < len; ++i) {
      std::string_view w = word();
      if (i == 0) {
        out.push_back(static_cast<char>(w[0] - 'a' + 'A'));
        out.append(w.substr(1));
      } else {
        out.push_back(' ');
        out.append(w);
      }
      if (i + 1 < len && rng.below(9) == 0) out.push_back(',');
    }
    if (rng.below(12) == 0) {
      out.append(" in ");
      out.append(std::to_string(1800 + rng.below(220)));
    }
    out.push_back('.');
    if (++sentences_in_paragraph >= 3 + rng.below(5)) {
      out.append("\n\n");
      sentences_in_paragraph = 0;
    } else {
      out.push_back(' ');
    }
  }
  out.resize(bytes);
  return out;
}

}  // namespace condense
