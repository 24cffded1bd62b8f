#include "support/oracles.hpp"

#include <algorithm>
#include <cmath>

namespace oracle {

long double softmax_at(std::span<const double> logits, std::size_t i) {
  long double total = 0;
  for (double l : logits) total += std::exp(static_cast<long double>(l));
  return std::exp(static_cast<long double>(logits[i])) / total;
}

long double neg_log_sigmoid(long double m) { return std::log1p(std::exp(-m)); }

long double kl(std::span<const double> p, std::span<const double> q) {
  long double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0) s += static_cast<long double>(p[i]) * std::log(static_cast<long double>(p[i]) / q[i]);
  }
  return s;
}

long long win_rate_tenths(long long win, long long tie, long long lose) {
  const long double v = 1000.0L * static_cast<long double>(win - lose) / static_cast<long double>(win + tie + lose);
  return std::llround(v);
}

namespace {

std::vector<long double> gibbs_weights(std::span<const double> ref, std::span<const double> te,
                                       std::span<const double> r, double b1, double b2) {
  const long double s = static_cast<long double>(b1) + b2;
  std::vector<long double> w(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    w[i] = std::pow(static_cast<long double>(ref[i]), b1 / s) * std::pow(static_cast<long double>(te[i]), b2 / s) *
           std::exp(static_cast<long double>(r[i]) / s);
  }
  return w;
}

}  // namespace

long double partition(std::span<const double> ref, std::span<const double> te, std::span<const double> r, double b1,
                      double b2) {
  long double z = 0;
  for (long double w : gibbs_weights(ref, te, r, b1, b2)) z += w;
  return z;
}

std::vector<double> optimal_policy(std::span<const double> ref, std::span<const double> te,
                                   std::span<const double> r, double b1, double b2) {
  const auto w = gibbs_weights(ref, te, r, b1, b2);
  long double z = 0;
  for (long double v : w) z += v;
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = static_cast<double>(w[i] / z);
  return out;
}

long double objective(std::span<const double> pi, std::span<const double> ref, std::span<const double> te,
                      std::span<const double> r, double b1, double b2) {
  long double e = 0;
  for (std::size_t i = 0; i < pi.size(); ++i) e += static_cast<long double>(pi[i]) * r[i];
  return e - b1 * kl(pi, ref) - b2 * kl(pi, te);
}

long double grid_max_objective3(std::span<const double> ref, std::span<const double> te,
                                std::span<const double> r, double b1, double b2, int steps) {
  long double best = -1e300L;
  for (int a = 0; a <= steps; ++a) {
    for (int b = 0; a + b <= steps; ++b) {
      const double p[3] = {static_cast<double>(a) / steps, static_cast<double>(b) / steps,
                           static_cast<double>(steps - a - b) / steps};
      best = std::max(best, objective(p, ref, te, r, b1, b2));
    }
  }
  return best;
}

std::vector<double> marginal_next_token(const std::vector<dadpo::Response>& space, std::span<const double> probs,
                                        std::span<const dadpo::TokenId> prefix, std::size_t vocab_size) {
  std::vector<long double> mass(vocab_size, 0);
  long double total = 0;
  for (std::size_t i = 0; i < space.size(); ++i) {
    const auto& y = space[i].tokens;
    if (y.size() <= prefix.size()) continue;
    if (!std::equal(prefix.begin(), prefix.end(), y.begin())) continue;
    mass[static_cast<std::size_t>(y[prefix.size()])] += probs[i];
    total += probs[i];
  }
  std::vector<double> out(vocab_size);
  for (std::size_t t = 0; t < vocab_size; ++t) out[t] = static_cast<double>(mass[t] / total);
  return out;
}

}  // namespace oracle
