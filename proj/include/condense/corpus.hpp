#pragma once

#include <cstdint>
#include <string>

namespace condense {

/// Deterministic English-like text of exactly `bytes` bytes: sentences of
/// Zipf-distributed words from a fixed lexicon, grouped into paragraphs.
std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed);

}  // namespace condense
