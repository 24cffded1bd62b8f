#include "dadpo/losses.hpp"

#include <cmath>

namespace dadpo {

namespace {

void require_batch(std::size_t n) { require(n > 0, ErrorKind::kInvalidArgument, "empty batch"); }

void require_beta(double beta) {
  require(std::isfinite(beta) && beta > 0.0, ErrorKind::kInvalidArgument, "beta must be finite and > 0");
}

void require_shared_vocab(const Policy& a, const Policy& b) {
  require(a.vocab() == b.vocab(), ErrorKind::kVocab, "policies do not share a vocabulary");
}

LossBreakdown finish(std::vector<double> per_example) {
  LossBreakdown out;
  double sum = 0.0;
  for (double v : per_example) {
    require(std::isfinite(v), ErrorKind::kNumeric, "non-finite per-example loss");
    sum += v;
  }
  out.total = sum / static_cast<double>(per_example.size());
  out.per_example = std::move(per_example);
  return out;
}

TripletLogps triplet_logps(const PreferenceTriplet& t, const Policy& policy, const Policy* ref,
                           const Policy* teacher) {
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

double kl_along(const Policy& student, const Policy& teacher, const SftPair& ex) {
  const auto& ys = ex.target.tokens;
  double total = 0.0;
  for (std::size_t n = 0; n < ys.size(); ++n) {
    const std::span<const TokenId> prefix(ys.data(), n);
    const auto p = student.token_distribution(ex.prompt, prefix);
    const auto q = teacher.token_distribution(ex.prompt, prefix);
    double kl = 0.0;
    for (std::size_t t = 0; t < p.size(); ++t) kl += p[t] * (std::log(p[t]) - std::log(q[t]));
    total += kl;
  }
  return total / static_cast<double>(ys.size());
}

}  // namespace

void BetaPair::validate() const {
  require(std::isfinite(beta1) && std::isfinite(beta2), ErrorKind::kInvalidArgument, "betas must be finite");
  require(beta1 >= 0.0 && beta2 >= 0.0, ErrorKind::kInvalidArgument, "betas must be >= 0");
  require(beta1 + beta2 > 0.0, ErrorKind::kInvalidArgument, "beta1 + beta2 must be > 0");
}

double dadpo_margin(const TripletLogps& lp, const BetaPair& betas) {
  const double r_w = lp.policy_w - lp.ref_w;
  const double r_l = lp.policy_l - lp.ref_l;
  const double rt_w = lp.policy_w - lp.teacher_w;
  const double rt_l = lp.policy_l - lp.teacher_l;
  return betas.beta1 * (r_w - r_l) + betas.beta2 * (rt_w - rt_l);
}

double ddpo_margin(const TripletLogps& lp, double beta) {
  return beta * ((lp.policy_w - lp.ref_w) - (lp.policy_l - lp.ref_l));
}

double rdpo_margin(const TripletLogps& lp, double beta) {
  return beta * ((lp.policy_w - lp.teacher_w) - (lp.policy_l - lp.teacher_l));
}

LossBreakdown sft_loss(const Policy& policy, std::span<const SftPair> batch) {
  require_batch(batch.size());
  std::vector<double> per;
  per.reserve(batch.size());
  for (const auto& ex : batch) per.push_back(-policy.sentence_logprob(ex.prompt, ex.target));
  return finish(std::move(per));
}

LossBreakdown token_kl_loss(const Policy& student, const Policy& teacher, std::span<const SftPair> batch) {
  require_batch(batch.size());
  require_shared_vocab(student, teacher);
  std::vector<double> per;
  per.reserve(batch.size());
  for (const auto& ex : batch) per.push_back(kl_along(student, teacher, ex));
  return finish(std::move(per));
}

LossBreakdown ddpo_loss(const Policy& policy, const Policy& ref, std::span<const PreferenceTriplet> batch,
                        double beta) {
  require_beta(beta);
  require_batch(batch.size());
  std::vector<double> per;
  per.reserve(batch.size());
  for (const auto& t : batch) per.push_back(-log_sigmoid(ddpo_margin(triplet_logps(t, policy, &ref, nullptr), beta)));
  return finish(std::move(per));
}

LossBreakdown rdpo_loss(const Policy& policy, const Policy& teacher, std::span<const PreferenceTriplet> batch,
                        double beta) {
  require_beta(beta);
  require_batch(batch.size());
  std::vector<double> per;
  per.reserve(batch.size());
  for (const auto& t : batch) {
    per.push_back(-log_sigmoid(rdpo_margin(triplet_logps(t, policy, nullptr, &teacher), beta)));
  }
  return finish(std::move(per));
}

LossBreakdown dadpo_loss(const Policy& policy, const Policy& ref, const Policy& teacher,
                         std::span<const PreferenceTriplet> batch, const BetaPair& betas) {
  betas.validate();
  require_batch(batch.size());
  std::vector<double> per;
  per.reserve(batch.size());
  for (const auto& t : batch) {
    per.push_back(-log_sigmoid(dadpo_margin(triplet_logps(t, policy, &ref, &teacher), betas)));
  }
  auto out = finish(std::move(per));
  out.aux["beta1"] = betas.beta1;
  out.aux["beta2"] = betas.beta2;
  return out;
}

namespace {

LossBreakdown combine(LossBreakdown base, const LossBreakdown& kl, double kl_weight) {
  LossBreakdown out;
  out.per_example.resize(base.per_example.size());
  for (std::size_t i = 0; i < out.per_example.size(); ++i) {
    out.per_example[i] = base.per_example[i] + kl_weight * kl.per_example[i];
  }
  out.total = base.total + kl_weight * kl.total;
  out.aux = std::move(base.aux);
  out.aux["base"] = base.total;
  out.aux["kl"] = kl.total;
  out.aux["kl_weight"] = kl_weight;
  return out;
}

void require_kl_weight(double w) {
  require(std::isfinite(w) && w >= 0.0, ErrorKind::kInvalidArgument, "kl_weight must be finite and >= 0");
}

}  // namespace

LossBreakdown composite_loss(CompositeBase base, double kl_weight, const Policy& policy, const Policy& teacher,
                             std::span<const SftPair> sft_batch) {
  require(base == CompositeBase::kSft, ErrorKind::kInvalidArgument, "dDPO+KL needs a triplet batch and reference");
  require_kl_weight(kl_weight);
  return combine(sft_loss(policy, sft_batch), token_kl_loss(policy, teacher, sft_batch), kl_weight);
}

LossBreakdown composite_loss(CompositeBase base, double kl_weight, const Policy& policy, const Policy& ref,
                             const Policy& teacher, std::span<const PreferenceTriplet> batch, double beta) {
  require(base == CompositeBase::kDdpo, ErrorKind::kInvalidArgument, "dSFT+KL takes an SFT batch");
  require_kl_weight(kl_weight);
  const auto winners = winners_as_sft(batch);
  return combine(ddpo_loss(policy, ref, batch, beta), token_kl_loss(policy, teacher, winners), kl_weight);
}

std::vector<SftPair> winners_as_sft(std::span<const PreferenceTriplet> batch) {
  std::vector<SftPair> out;
  out.reserve(batch.size());
  for (const auto& t : batch) out.push_back(SftPair{t.prompt, t.winner});
  return out;
}

const char* to_string(LossId id) {
  switch (id) {
    case LossId::kSft: return "dsft";
    case LossId::kTokenKl: return "token_kl";
    case LossId::kDdpo: return "ddpo";
    case LossId::kRdpo: return "rdpo";
    case LossId::kDadpo: return "dadpo";
    case LossId::kSftKl: return "dsft_kl";
    case LossId::kDdpoKl: return "ddpo_kl";
  }
  return "?";
}

LossId loss_id_from_string(const std::string& name) {
  for (LossId id : {LossId::kSft, LossId::kTokenKl, LossId::kDdpo, LossId::kRdpo, LossId::kDadpo, LossId::kSftKl,
                    LossId::kDdpoKl}) {
    if (name == to_string(id)) return id;
  }
  if (name == "sft") return LossId::kSft;
  if (name == "sft_kl" || name == "dsft+kl") return LossId::kSftKl;
  if (name == "ddpo+kl") return LossId::kDdpoKl;
  fail(ErrorKind::kInvalidArgument, "unknown loss id '" + name + "'");
}

namespace {

const Policy& need(const Policy* p, const char* what) {
  require(p != nullptr, ErrorKind::kInvalidArgument, std::string("loss needs a ") + what + " policy");
  return *p;
}

}  // namespace

LossBreakdown evaluate_loss(const LossSpec& spec, const LossInputs& in) {
  const Policy& policy = need(in.policy, "trainable");
  switch (spec.id) {
    case LossId::kSft: return sft_loss(policy, in.sft);
    case LossId::kTokenKl: return token_kl_loss(policy, need(in.teacher, "teacher"), in.sft);
    case LossId::kDdpo: return ddpo_loss(policy, need(in.ref, "reference"), in.triplets, spec.beta);
    case LossId::kRdpo: return rdpo_loss(policy, need(in.teacher, "teacher"), in.triplets, spec.beta);
    case LossId::kDadpo:
      return dadpo_loss(policy, need(in.ref, "reference"), need(in.teacher, "teacher"), in.triplets, spec.betas);
    case LossId::kSftKl:
      return composite_loss(CompositeBase::kSft, spec.kl_weight, policy, need(in.teacher, "teacher"), in.sft);
    case LossId::kDdpoKl:
      return composite_loss(CompositeBase::kDdpo, spec.kl_weight, policy, need(in.ref, "reference"),
                            need(in.teacher, "teacher"), in.triplets, spec.beta);
  }
  fail(ErrorKind::kInvalidArgument, "unknown loss id");
}

}  // namespace dadpo
