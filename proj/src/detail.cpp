#include "detail.hpp"

#include <cmath>
#include <numbers>

namespace dadpo::detail {

double normal(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t draw_index(std::span<const double> weights, std::mt19937_64& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  const double u = uniform01(rng) * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  // u landed on the rounding slack at the top; take the last positive weight.
  for (std::size_t i = weights.size(); i-- > 0;) {
    if (weights[i] > 0) return i;
  }
  return 0;
}

std::size_t argmax(std::span<const double> xs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i] > xs[best]) best = i;
  }
  return best;
}

std::mt19937_64 prompt_rng(std::uint64_t seed, const Prompt& prompt) {
  Fnv1a h;
  h.update(prompt.id);
  return std::mt19937_64(mix_seed(seed, h.digest()));
}

std::vector<double> softmax(std::span<const double> logits) {
  const double lse = log_sum_exp(logits);
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) p[i] = std::exp(logits[i] - lse);
  return p;
}

std::vector<double> tempered(std::span<const double> logprobs, double temperature) {
  std::vector<double> scaled(logprobs.size());
  for (std::size_t i = 0; i < logprobs.size(); ++i) scaled[i] = logprobs[i] / temperature;
  return softmax(scaled);
}

}  // namespace dadpo::detail
