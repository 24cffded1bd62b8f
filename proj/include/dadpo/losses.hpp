#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "dadpo/policy.hpp"
#include "dadpo/types.hpp"

namespace dadpo {

/// Weights of the reference-KL (beta1) and teacher-KL (beta2) regularizers.
struct BetaPair {
  double beta1 = 0.1;
  double beta2 = 0.1;

  double sum() const { return beta1 + beta2; }
  /// beta1, beta2 >= 0 and beta1 + beta2 > 0.
  void validate() const;
};

struct LossBreakdown {
  double total = 0.0;
  std::vector<double> per_example;
  std::map<std::string, double> aux;
};

/// -mean log pi(y|x).
LossBreakdown sft_loss(const Policy& policy, std::span<const SftPair> batch);

/// Mean over examples of (1/L_y) sum_n KL[student(.|y_<n, x) || teacher(.|y_<n, x)]
/// along the target response.
LossBreakdown token_kl_loss(const Policy& student, const Policy& teacher, std::span<const SftPair> batch);

/// -mean log sigma(beta * [(log pi(yw) - log ref(yw)) - (log pi(yl) - log ref(yl))]).
LossBreakdown ddpo_loss(const Policy& policy, const Policy& ref, std::span<const PreferenceTriplet> batch,
                        double beta);

/// ddpo_loss with the teacher in place of the reference policy.
LossBreakdown rdpo_loss(const Policy& policy, const Policy& teacher, std::span<const PreferenceTriplet> batch,
                        double beta);

/// -mean log sigma(beta1 * (r_w - r_l) + beta2 * (rt_w - rt_l)) with
/// r = log pi - log ref and rt = log pi - log teacher per response. Expanded,
/// the margin is (b1+b2) log pi(yw) - b1 log ref(yw) - b2 log te(yw) minus the
/// same for yl.
LossBreakdown dadpo_loss(const Policy& policy, const Policy& ref, const Policy& teacher,
                         std::span<const PreferenceTriplet> batch, const BetaPair& betas);

enum class CompositeBase { kSft, kDdpo };

/// Base loss plus kl_weight * token_kl_loss on the SFT targets (kSft) or on the
/// triplet winners (kDdpo). aux holds "base", "kl" and "kl_weight".
LossBreakdown composite_loss(CompositeBase base, double kl_weight, const Policy& policy, const Policy& teacher,
                             std::span<const SftPair> sft_batch);
LossBreakdown composite_loss(CompositeBase base, double kl_weight, const Policy& policy, const Policy& ref,
                             const Policy& teacher, std::span<const PreferenceTriplet> batch, double beta);

// Uniform dispatch used by the gradient module and the training loop.

enum class LossId { kSft, kTokenKl, kDdpo, kRdpo, kDadpo, kSftKl, kDdpoKl };

const char* to_string(LossId id);
LossId loss_id_from_string(const std::string& name);

struct LossSpec {
  LossId id = LossId::kDadpo;
  double beta = 0.1;  // dDPO / rDPO / dDPO+KL
  BetaPair betas;     // daDPO
  double kl_weight = 0.0;
};

/// Trainable policy plus frozen ref/teacher. Unused members may be null/empty.
struct LossInputs {
  const Policy* policy = nullptr;
  const Policy* ref = nullptr;
  const Policy* teacher = nullptr;
  std::span<const SftPair> sft;
  std::span<const PreferenceTriplet> triplets;
};

LossBreakdown evaluate_loss(const LossSpec& spec, const LossInputs& in);

/// Winner responses of a triplet batch as SFT pairs.
std::vector<SftPair> winners_as_sft(std::span<const PreferenceTriplet> batch);

/// Per-triplet log-probabilities under policy, ref and teacher.
struct TripletLogps {
  double policy_w, policy_l;
  double ref_w, ref_l;
  double teacher_w, teacher_l;
};

/// beta1 * (r_w - r_l) + beta2 * (rt_w - rt_l).
double dadpo_margin(const TripletLogps& lp, const BetaPair& betas);
/// beta * (r_w - r_l).
double ddpo_margin(const TripletLogps& lp, double beta);
/// beta * (rt_w - rt_l).
double rdpo_margin(const TripletLogps& lp, double beta);

}  // namespace dadpo
