#include "dadpo/grad.hpp"

#include <algorithm>
#include <cmath>

namespace dadpo {

namespace {

const Policy& need(const Policy* p, const char* what) {
  require(p != nullptr, ErrorKind::kInvalidArgument, std::string("loss needs a ") + what + " policy");
  return *p;
}

TripletLogps logps(const PreferenceTriplet& t, const Policy& policy, const Policy* ref, const Policy* teacher) {
  TripletLogps lp{};
  lp.policy_w = policy.sentence_logprob(t.prompt, t.winner);
  lp.policy_l = policy.sentence_logprob(t.prompt, t.loser);
  if (ref) {
    lp.ref_w = ref->sentence_logprob(t.prompt, t.winner);
    lp.ref_l = ref->sentence_logprob(t.prompt, t.loser);
  }
  if (teacher) {
    lp.teacher_w = teacher->sentence_logprob(t.prompt, t.winner);
    lp.teacher_l = teacher->sentence_logprob(t.prompt, t.loser);
  }
  return lp;
}

// grad += scale * (grad log pi(yl) - grad log pi(yw)).
void accumulate_pair(const Policy& policy, const PreferenceTriplet& t, double scale, GradVector& grad) {
  policy.accumulate_sentence_logprob_grad(t.prompt, t.loser, scale, grad);
  policy.accumulate_sentence_logprob_grad(t.prompt, t.winner, -scale, grad);
}

void require_batch(std::size_t n) { require(n > 0, ErrorKind::kInvalidArgument, "empty batch"); }

void require_beta(double beta) {
  require(std::isfinite(beta) && beta > 0.0, ErrorKind::kInvalidArgument, "beta must be finite and > 0");
}

void add_sft_grad(const Policy& policy, std::span<const SftPair> batch, double weight, GradVector& grad) {
  require_batch(batch.size());
  const double scale = -weight / static_cast<double>(batch.size());
  for (const auto& ex : batch) policy.accumulate_sentence_logprob_grad(ex.prompt, ex.target, scale, grad);
}

void add_token_kl_grad(const Policy& student, const Policy& teacher, std::span<const SftPair> batch, double weight,
                       GradVector& grad) {
  require_batch(batch.size());
  require(student.vocab() == teacher.vocab(), ErrorKind::kVocab, "policies do not share a vocabulary");
  std::vector<double> upstream(student.vocab().size());
  for (const auto& ex : batch) {
    const auto& ys = ex.target.tokens;
    const double scale = weight / (static_cast<double>(batch.size()) * static_cast<double>(ys.size()));
    for (std::size_t n = 0; n < ys.size(); ++n) {
      const std::span<const TokenId> prefix(ys.data(), n);
      const auto p = student.token_distribution(ex.prompt, prefix);
      const auto q = teacher.token_distribution(ex.prompt, prefix);
      for (std::size_t t = 0; t < p.size(); ++t) upstream[t] = std::log(p[t]) - std::log(q[t]) + 1.0;
      student.accumulate_token_distribution_vjp(ex.prompt, prefix, upstream, scale, grad);
    }
  }
}

void add_ddpo_grad(const Policy& policy, const Policy& ref, std::span<const PreferenceTriplet> batch, double beta,
                   double weight, GradVector& grad) {
  require_beta(beta);
  require_batch(batch.size());
  const double n = static_cast<double>(batch.size());
  for (const auto& t : batch) {
    const double m = ddpo_margin(logps(t, policy, &ref, nullptr), beta);
    accumulate_pair(policy, t, weight * (sigmoid(-m) * beta / n), grad);
  }
}

void add_rdpo_grad(const Policy& policy, const Policy& teacher, std::span<const PreferenceTriplet> batch,
                   double beta, GradVector& grad) {
  require_beta(beta);
  require_batch(batch.size());
  const double n = static_cast<double>(batch.size());
  for (const auto& t : batch) {
    const double m = rdpo_margin(logps(t, policy, nullptr, &teacher), beta);
    accumulate_pair(policy, t, sigmoid(-m) * beta / n, grad);
  }
}

}  // namespace

DadpoCoefficient dadpo_coefficient(const TripletLogps& lp, const BetaPair& betas) {
  betas.validate();
  DadpoCoefficient c;
  c.delta_theta = (lp.policy_w - lp.ref_w) - (lp.policy_l - lp.ref_l);
  c.delta_te = (lp.teacher_w - lp.ref_w) - (lp.teacher_l - lp.ref_l);
  c.from_deltas = sigmoid(betas.sum() * (-c.delta_theta) + betas.beta2 * c.delta_te);
  c.from_margin = sigmoid(-dadpo_margin(lp, betas));
  return c;
}

GradVector dadpo_grad(const Policy& policy, const Policy& ref, const Policy& teacher,
                      std::span<const PreferenceTriplet> batch, const BetaPair& betas) {
  betas.validate();
  require_batch(batch.size());
  GradVector grad(policy.num_params(), 0.0);
  const double n = static_cast<double>(batch.size());
  for (const auto& t : batch) {
    const auto c = dadpo_coefficient(logps(t, policy, &ref, &teacher), betas);
    accumulate_pair(policy, t, c.from_margin * betas.sum() / n, grad);
  }
  return grad;
}

GradVector loss_grad(const LossSpec& spec, const LossInputs& in) {
  const Policy& policy = need(in.policy, "trainable");
  GradVector grad(policy.num_params(), 0.0);
  switch (spec.id) {
    case LossId::kSft:
      add_sft_grad(policy, in.sft, 1.0, grad);
      break;
    case LossId::kTokenKl:
      add_token_kl_grad(policy, need(in.teacher, "teacher"), in.sft, 1.0, grad);
      break;
    case LossId::kDdpo:
      add_ddpo_grad(policy, need(in.ref, "reference"), in.triplets, spec.beta, 1.0, grad);
      break;
    case LossId::kRdpo:
      add_rdpo_grad(policy, need(in.teacher, "teacher"), in.triplets, spec.beta, grad);
      break;
    case LossId::kDadpo:
      return dadpo_grad(policy, need(in.ref, "reference"), need(in.teacher, "teacher"), in.triplets, spec.betas);
    case LossId::kSftKl:
      require(std::isfinite(spec.kl_weight) && spec.kl_weight >= 0, ErrorKind::kInvalidArgument,
              "kl_weight must be finite and >= 0");
      add_sft_grad(policy, in.sft, 1.0, grad);
      add_token_kl_grad(policy, need(in.teacher, "teacher"), in.sft, spec.kl_weight, grad);
      break;
    case LossId::kDdpoKl: {
      require(std::isfinite(spec.kl_weight) && spec.kl_weight >= 0, ErrorKind::kInvalidArgument,
              "kl_weight must be finite and >= 0");
      add_ddpo_grad(policy, need(in.ref, "reference"), in.triplets, spec.beta, 1.0, grad);
      const auto winners = winners_as_sft(in.triplets);
      add_token_kl_grad(policy, need(in.teacher, "teacher"), winners, spec.kl_weight, grad);
      break;
    }
  }
  return grad;
}

GradVector finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                            std::span<const double> params, double h) {
  require(std::isfinite(h) && h > 0.0, ErrorKind::kInvalidArgument, "finite-difference step must be > 0");
  std::vector<double> p(params.begin(), params.end());
  GradVector g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + h;
    const double up = f(p);
    p[i] = orig - h;
    const double down = f(p);
    p[i] = orig;
    require(std::isfinite(up) && std::isfinite(down), ErrorKind::kNumeric,
            "non-finite function value at coordinate " + std::to_string(i));
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

GradVector finite_diff_loss_grad(const LossSpec& spec, const LossInputs& in, double h) {
  Policy probe = need(in.policy, "trainable");
  LossInputs shifted = in;
  shifted.policy = &probe;
  return finite_diff_grad(
      [&](std::span<const double> p) {
        std::copy(p.begin(), p.end(), probe.params().begin());
        return evaluate_loss(spec, shifted).total;
      },
      in.policy->params(), h);
}

double max_relative_error(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::kInvalidArgument, "vector size mismatch");
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return scale == 0.0 ? 0.0 : diff / scale;
}

void OptimConfig::validate() const {
  require(std::isfinite(lr) && lr > 0.0, ErrorKind::kInvalidArgument, "learning rate must be > 0");
  require(std::isfinite(clip) && clip >= 0.0, ErrorKind::kInvalidArgument, "clip must be >= 0");
}

void step(std::span<double> params, std::span<const double> grad, OptimState& state, const OptimConfig& cfg) {
  cfg.validate();
  require(params.size() == grad.size(), ErrorKind::kInvalidArgument, "gradient shape does not match parameters");
  double norm2 = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    require(std::isfinite(grad[i]), ErrorKind::kNumeric,
            "non-finite gradient entry at index " + std::to_string(i));
    norm2 += grad[i] * grad[i];
  }
  double gscale = 1.0;
  if (cfg.clip > 0.0 && norm2 > cfg.clip * cfg.clip) gscale = cfg.clip / std::sqrt(norm2);

  if (cfg.algorithm == Optimizer::kGradientDescent) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= cfg.lr * (gscale * grad[i]);
    ++state.t;
    return;
  }
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
    state.t = 0;
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, t);
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = gscale * grad[i];
    state.m[i] = cfg.adam_beta1 * state.m[i] + (1.0 - cfg.adam_beta1) * g;
    state.v[i] = cfg.adam_beta2 * state.v[i] + (1.0 - cfg.adam_beta2) * g * g;
    params[i] -= cfg.lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + cfg.adam_eps);
  }
}

void step(Policy& policy, std::span<const double> grad, OptimState& state, const OptimConfig& cfg) {
  step(policy.params(), grad, state, cfg);
}

}  // namespace dadpo
