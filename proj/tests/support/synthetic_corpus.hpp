#pragma once

// Small Romanian-like fable corpus for tests. Stories are stitched from a
// fixed phrase grammar, so a model can learn them quickly and every run with
// the same seed produces the same text.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace fablelm::testing {

/// `n` stories drawn with the given seed.
std::vector<std::string> synthetic_fables(std::size_t n, std::uint64_t seed);

/// Stories until the total whitespace word count reaches `min_words`.
std::vector<std::string> synthetic_fables_words(std::size_t min_words, std::uint64_t seed);

/// Entity surfaces (lowercase) and their lemmas used by the generator.
std::vector<std::pair<std::string, std::string>> synthetic_entities();

}  // namespace fablelm::testing
