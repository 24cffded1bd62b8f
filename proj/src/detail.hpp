#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "dadpo/types.hpp"

namespace dadpo::detail {

/// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

/// Standard normal via Box-Muller on uniform01.
double normal(std::mt19937_64& rng);

/// Index drawn from an (unnormalized, nonnegative) weight vector by inverse CDF.
std::size_t draw_index(std::span<const double> weights, std::mt19937_64& rng);

/// Lowest index among the maxima.
std::size_t argmax(std::span<const double> xs);

/// Per-prompt RNG stream: independent of prompt order.
std::mt19937_64 prompt_rng(std::uint64_t seed, const Prompt& prompt);

std::vector<double> softmax(std::span<const double> logits);

/// Temperature-scaled distribution from log-probabilities.
std::vector<double> tempered(std::span<const double> logprobs, double temperature);

}  // namespace dadpo::detail
