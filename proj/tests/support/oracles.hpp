#pragma once

// Independent reference computations used by the tests. Everything here is
// written directly from the defining formulas in long double, without the
// library's log-space or flooring machinery.

#include <cstdint>
#include <span>
#include <vector>

#include "dadpo/types.hpp"

namespace oracle {

long double softmax_at(std::span<const double> logits, std::size_t i);

/// -log sigma(m) as log(1 + exp(-m)).
long double neg_log_sigmoid(long double m);

/// sum_i p_i log(p_i / q_i).
long double kl(std::span<const double> p, std::span<const double> q);

/// Win rate in tenths of a percent, rounded half away from zero.
long long win_rate_tenths(long long win, long long tie, long long lose);

/// Gibbs form: ref^(b1/s) te^(b2/s) exp(r/s) / Z, s = b1 + b2.
std::vector<double> optimal_policy(std::span<const double> ref, std::span<const double> te,
                                   std::span<const double> r, double b1, double b2);
long double partition(std::span<const double> ref, std::span<const double> te, std::span<const double> r, double b1,
                      double b2);
long double objective(std::span<const double> pi, std::span<const double> ref, std::span<const double> te,
                      std::span<const double> r, double b1, double b2);

/// Best objective on a regular grid over the 3-simplex with `steps` divisions.
long double grid_max_objective3(std::span<const double> ref, std::span<const double> te,
                                std::span<const double> r, double b1, double b2, int steps);

/// Next-token distribution of a sentence-level table: mass of responses that
/// extend `prefix` with token t, divided by the mass extending `prefix`.
std::vector<double> marginal_next_token(const std::vector<dadpo::Response>& space, std::span<const double> probs,
                                        std::span<const dadpo::TokenId> prefix, std::size_t vocab_size);

}  // namespace oracle
