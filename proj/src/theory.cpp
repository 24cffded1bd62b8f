#include "dadpo/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "detail.hpp"

namespace dadpo {

namespace {

void require_same_size(const ExactDistribution& a, const ExactDistribution& b, std::span<const double> r) {
  require(a.size() == b.size() && a.size() == r.size(), ErrorKind::kInvalidArgument,
          "distributions and reward must cover the same response space");
  require(a.size() >= 1, ErrorKind::kInvalidArgument, "empty response space");
  for (double v : r) require(std::isfinite(v), ErrorKind::kDomain, "reward must be finite on the response space");
}

double kl_term(const ExactDistribution& p, const ExactDistribution& q, double weight, const char* name) {
  if (weight == 0.0) return 0.0;
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    require(q[i] > 0.0, ErrorKind::kDomain, std::string("policy has mass where ") + name + " has none");
    kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return weight * kl;
}

/// log of the unnormalized optimal policy per response.
std::vector<double> optimal_log_weights(const ExactDistribution& ref, const ExactDistribution& teacher,
                                        std::span<const double> reward, const BetaPair& betas) {
  betas.validate();
  require_same_size(ref, teacher, reward);
  const double s = betas.sum();
  const double w1 = betas.beta1 / s;
  const double w2 = betas.beta2 / s;
  std::vector<double> lw(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    lw[i] = w1 * floored_log(ref[i]) + w2 * floored_log(teacher[i]) + reward[i] / s;
  }
  return lw;
}

}  // namespace

void ExactDistribution::validate(double tol) const {
  require(!probs.empty(), ErrorKind::kInvalidArgument, "empty distribution");
  double total = 0.0;
  for (double p : probs) {
    require(std::isfinite(p) && p >= 0.0, ErrorKind::kDomain, "distribution has a negative or non-finite entry");
    total += p;
  }
  require(std::abs(total - 1.0) <= tol, ErrorKind::kDomain, "distribution does not sum to 1");
}

std::vector<double> tabulate_reward(const RewardFn& reward, const Prompt& x, const ResponseSpace& space) {
  std::vector<double> out;
  out.reserve(space.size());
  for (const auto& y : space.responses()) {
    const double r = reward(x, y);
    require(std::isfinite(r), ErrorKind::kDomain, "reward must be finite on the response space");
    out.push_back(r);
  }
  return out;
}

ExactDistribution exact_distribution(const TabularPolicy& policy, const Prompt& x) {
  return ExactDistribution{policy.row_probs(x)};
}

double rl_objective(const ExactDistribution& policy, const ExactDistribution& ref, const ExactDistribution& teacher,
                    std::span<const double> reward, const BetaPair& betas) {
  betas.validate();
  require_same_size(policy, ref, reward);
  require(teacher.size() == policy.size(), ErrorKind::kInvalidArgument, "teacher covers a different space");
  policy.validate();
  ref.validate();
  teacher.validate();
  double expected = 0.0;
  for (std::size_t i = 0; i < policy.size(); ++i) expected += policy[i] * reward[i];
  return expected - kl_term(policy, ref, betas.beta1, "the reference") -
         kl_term(policy, teacher, betas.beta2, "the teacher");
}

double log_partition_z(const ExactDistribution& ref, const ExactDistribution& teacher,
                       std::span<const double> reward, const BetaPair& betas) {
  return log_sum_exp(optimal_log_weights(ref, teacher, reward, betas));
}

double partition_z(const ExactDistribution& ref, const ExactDistribution& teacher, std::span<const double> reward,
                   const BetaPair& betas) {
  const double z = std::exp(log_partition_z(ref, teacher, reward, betas));
  require(std::isfinite(z) && z > 0.0, ErrorKind::kNumeric, "partition function overflows; use log_partition_z");
  return z;
}

ExactDistribution optimal_policy(const ExactDistribution& ref, const ExactDistribution& teacher,
                                 std::span<const double> reward, const BetaPair& betas) {
  const auto lw = optimal_log_weights(ref, teacher, reward, betas);
  const double lz = log_sum_exp(lw);
  ExactDistribution out;
  out.probs.resize(lw.size());
  for (std::size_t i = 0; i < lw.size(); ++i) out.probs[i] = std::exp(lw[i] - lz);
  return out;
}

double implicit_reward(const ExactDistribution& pi_star, const ExactDistribution& ref,
                       const ExactDistribution& teacher, const BetaPair& betas, std::size_t y) {
  betas.validate();
  require(y < pi_star.size() && y < ref.size() && y < teacher.size(), ErrorKind::kInvalidArgument,
          "response index outside the space");
  require(pi_star[y] > 0.0, ErrorKind::kDomain, "implicit reward undefined for a zero-probability response");
  return betas.sum() * std::log(pi_star[y]) - betas.beta1 * floored_log(ref[y]) -
         betas.beta2 * floored_log(teacher[y]);
}

double reward_offset(const ExactDistribution& ref, const ExactDistribution& teacher, std::span<const double> reward,
                     const BetaPair& betas) {
  return betas.sum() * log_partition_z(ref, teacher, reward, betas);
}

double bt_preference(const ExactDistribution& pi_star, const ExactDistribution& ref,
                     const ExactDistribution& teacher, const BetaPair& betas, std::size_t y1, std::size_t y2) {
  if (y1 == y2) {
    implicit_reward(pi_star, ref, teacher, betas, y1);
    return 0.5;
  }
  return sigmoid(implicit_reward(pi_star, ref, teacher, betas, y1) -
                 implicit_reward(pi_star, ref, teacher, betas, y2));
}

std::vector<double> project_to_simplex(std::span<const double> v) {
  std::vector<double> u(v.begin(), v.end());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0.0, theta = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    cumulative += u[i];
    const double t = (cumulative - 1.0) / static_cast<double>(i + 1);
    if (u[i] - t > 0.0) theta = t;
  }
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::max(v[i] - theta, 0.0);
  return out;
}

namespace {

struct AscentProblem {
  const ExactDistribution& ref;
  const ExactDistribution& teacher;
  std::span<const double> reward;
  BetaPair betas;

  double value(const std::vector<double>& p) const {
    return rl_objective(ExactDistribution{p}, ref, teacher, reward, betas);
  }

  std::vector<double> gradient(const std::vector<double>& p) const {
    std::vector<double> g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      // log 0 is floored; the gradient there points into the interior.
      const double lp = floored_log(p[i]);
      g[i] = reward[i];
      if (betas.beta1 > 0) g[i] -= betas.beta1 * (lp - std::log(ref[i]) + 1.0);
      if (betas.beta2 > 0) g[i] -= betas.beta2 * (lp - std::log(teacher[i]) + 1.0);
    }
    return g;
  }

  double projected_grad_norm(const std::vector<double>& p) const {
    const auto g = gradient(p);
    std::vector<double> moved(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) moved[i] = p[i] + g[i];
    const auto proj = project_to_simplex(moved);
    double norm = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) norm = std::max(norm, std::abs(proj[i] - p[i]));
    return norm;
  }
};

}  // namespace

BruteForceResult brute_force_maximize(const ExactDistribution& ref, const ExactDistribution& teacher,
                                      std::span<const double> reward, const BetaPair& betas, std::size_t iters,
                                      std::uint64_t seed, std::size_t starts) {
  betas.validate();
  require_same_size(ref, teacher, reward);
  require(ref.size() <= kDefaultSpaceCap, ErrorKind::kSize, "response space exceeds cap");
  for (std::size_t i = 0; i < ref.size(); ++i) {
    require(betas.beta1 == 0 || ref[i] > 0, ErrorKind::kDomain, "reference must have full support");
    require(betas.beta2 == 0 || teacher[i] > 0, ErrorKind::kDomain, "teacher must have full support");
  }
  const AscentProblem problem{ref, teacher, reward, betas};
  const std::size_t n = ref.size();
  std::mt19937_64 rng(mix_seed(seed, 0x6272757465ULL));

  BruteForceResult best;
  best.objective = -std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s <= starts; ++s) {
    std::vector<double> p(n, 1.0 / static_cast<double>(n));
    if (s > 0) {
      double total = 0.0;
      for (double& v : p) {
        v = -std::log(1.0 - detail::uniform01(rng));  // Dirichlet(1) via exponentials
        total += v;
      }
      for (double& v : p) v /= total;
    }
    double f = problem.value(p);
    double step = 1.0;
    std::size_t it = 0;
    for (; it < iters; ++it) {
      const auto g = problem.gradient(p);
      bool accepted = false;
      std::vector<double> next(n);
      double f_next = f;
      while (step > 1e-300) {
        // Entropic projection: p_i exp(step g_i), renormalized.
        const double gmax = *std::max_element(g.begin(), g.end());
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) total += next[i] = p[i] * std::exp(step * (g[i] - gmax));
        for (double& v : next) v /= total;
        double dir = 0.0;
        for (std::size_t i = 0; i < n; ++i) dir += g[i] * (next[i] - p[i]);
        f_next = problem.value(next);
        if (f_next >= f + 1e-4 * dir) {
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted) break;
      double change = 0.0;
      for (std::size_t i = 0; i < n; ++i) change = std::max(change, std::abs(next[i] - p[i]));
      p = next;
      f = f_next;
      step = std::min(step * 2.0, 1e6);
      if (change < 1e-15) break;
    }
    if (f > best.objective) {
      best.distribution = ExactDistribution{p};
      best.objective = f;
      best.iterations = it;
    }
  }
  best.projected_grad_norm = problem.projected_grad_norm(best.distribution.probs);
  best.converged = best.projected_grad_norm < 1e-6;
  return best;
}

}  // namespace dadpo
