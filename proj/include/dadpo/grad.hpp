#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dadpo/losses.hpp"
#include "dadpo/policy.hpp"

namespace dadpo {

/// Gradient with respect to the trainable policy's parameter vector.
using GradVector = std::vector<double>;

/// The two routes to the daDPO gradient coefficient for one triplet:
///   delta_theta = log pi(yw)/ref(yw) - log pi(yl)/ref(yl)
///   delta_te    = log te(yw)/ref(yw) - log te(yl)/ref(yl)
///   from_deltas = sigma((b1+b2) * (-delta_theta) + b2 * delta_te)
///   from_margin = sigma(-dadpo_margin)
struct DadpoCoefficient {
  double delta_theta = 0.0;
  double delta_te = 0.0;
  double from_deltas = 0.0;
  double from_margin = 0.0;
};

DadpoCoefficient dadpo_coefficient(const TripletLogps& lp, const BetaPair& betas);

/// Batch mean of sigma(-m) * (b1+b2) * (grad log pi(yl) - grad log pi(yw)),
/// the gradient of dadpo_loss; a step along -grad widens the winner margin.
GradVector dadpo_grad(const Policy& policy, const Policy& ref, const Policy& teacher,
                      std::span<const PreferenceTriplet> batch, const BetaPair& betas);

/// Analytic gradient of any LossId with ref and teacher frozen.
GradVector loss_grad(const LossSpec& spec, const LossInputs& in);

/// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h.
GradVector finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                            std::span<const double> params, double h);

/// Central differences of evaluate_loss over the trainable policy's parameters.
GradVector finite_diff_loss_grad(const LossSpec& spec, const LossInputs& in, double h);

/// max_i |a_i - b_i| / max(||a||_inf, ||b||_inf); 0 when both are zero.
double max_relative_error(std::span<const double> a, std::span<const double> b);

enum class Optimizer { kGradientDescent, kAdam };

struct OptimConfig {
  Optimizer algorithm = Optimizer::kGradientDescent;
  double lr = 1e-2;
  double clip = 0.0;  // L2 gradient-norm clip; 0 disables
  std::uint64_t seed = 0;  // batch-order stream used by the training loop
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

struct OptimState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;
};

/// One in-place update. Plain mode: p <- p - lr * g.
void step(std::span<double> params, std::span<const double> grad, OptimState& state, const OptimConfig& cfg);
void step(Policy& policy, std::span<const double> grad, OptimState& state, const OptimConfig& cfg);

}  // namespace dadpo
