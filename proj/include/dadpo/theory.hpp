#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dadpo/losses.hpp"
#include "dadpo/policy.hpp"

namespace dadpo {

// Exact sentence-level quantities over one prompt's enumerated response space.
// Distributions and rewards are index-aligned with that space.

struct ExactDistribution {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  double operator[](std::size_t i) const { return probs[i]; }
  /// Nonnegative, finite, sums to 1 within tol.
  void validate(double tol = 1e-10) const;
};

using RewardFn = std::function<double(const Prompt&, const Response&)>;

std::vector<double> tabulate_reward(const RewardFn& reward, const Prompt& x, const ResponseSpace& space);

/// Sentence distribution of a tabular policy's row for `x`.
ExactDistribution exact_distribution(const TabularPolicy& policy, const Prompt& x);

/// E_pi[r] - beta1 KL(pi || ref) - beta2 KL(pi || teacher), by exact summation.
/// Throws kDomain when pi puts mass where a KL term with positive weight has none.
double rl_objective(const ExactDistribution& policy, const ExactDistribution& ref, const ExactDistribution& teacher,
                    std::span<const double> reward, const BetaPair& betas);

/// log Z = log sum_y ref^(b1/(b1+b2)) te^(b2/(b1+b2)) exp(r / (b1+b2)), computed
/// with max-subtraction; ref/teacher floored at kProbFloor.
double log_partition_z(const ExactDistribution& ref, const ExactDistribution& teacher,
                       std::span<const double> reward, const BetaPair& betas);
/// exp(log_partition_z); throws kNumeric if it overflows.
double partition_z(const ExactDistribution& ref, const ExactDistribution& teacher, std::span<const double> reward,
                   const BetaPair& betas);

/// Closed-form maximizer of rl_objective.
ExactDistribution optimal_policy(const ExactDistribution& ref, const ExactDistribution& teacher,
                                 std::span<const double> reward, const BetaPair& betas);

/// (b1+b2) log pi*(y) - b1 log ref(y) - b2 log te(y): the reward of y up to the
/// prompt-level constant reward_offset().
double implicit_reward(const ExactDistribution& pi_star, const ExactDistribution& ref,
                       const ExactDistribution& teacher, const BetaPair& betas, std::size_t y);

/// (b1+b2) log Z, the constant separating implicit_reward from the reward.
double reward_offset(const ExactDistribution& ref, const ExactDistribution& teacher, std::span<const double> reward,
                     const BetaPair& betas);

/// Bradley-Terry p(y1 > y2) = sigma(implicit_reward(y1) - implicit_reward(y2)).
double bt_preference(const ExactDistribution& pi_star, const ExactDistribution& ref,
                     const ExactDistribution& teacher, const BetaPair& betas, std::size_t y1, std::size_t y2);

/// Euclidean projection onto the probability simplex.
std::vector<double> project_to_simplex(std::span<const double> v);

struct BruteForceResult {
  ExactDistribution distribution;
  double objective = 0.0;
  double projected_grad_norm = 0.0;  // ||pi - P(pi + grad)||_inf at the returned point
  std::size_t iterations = 0;
  bool converged = false;
};

/// Mirror (entropic projected-gradient) ascent with backtracking from `starts`
/// random simplex points plus the uniform point; returns the best final iterate.
BruteForceResult brute_force_maximize(const ExactDistribution& ref, const ExactDistribution& teacher,
                                      std::span<const double> reward, const BetaPair& betas, std::size_t iters,
                                      std::uint64_t seed, std::size_t starts = 3);

}  // namespace dadpo
