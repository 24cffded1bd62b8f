#include "dadpo/verify.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dadpo/eval.hpp"
#include "dadpo/grad.hpp"
#include "dadpo/pipeline.hpp"
#include "dadpo/theory.hpp"
#include "detail.hpp"

namespace dadpo {

namespace {

constexpr double kBeta1Grid[] = {0.01, 0.1, 1.0};
constexpr double kBeta2Grid[] = {0.001, 0.01, 0.1, 1.0};

template <std::size_t N>
double pick(const double (&grid)[N], std::mt19937_64& rng) {
  return grid[std::min(N - 1, static_cast<std::size_t>(detail::uniform01(rng) * N))];
}

std::vector<double> random_simplex(std::size_t n, std::mt19937_64& rng) {
  std::vector<double> p(n);
  double total = 0.0;
  for (double& v : p) {
    v = -std::log(1.0 - detail::uniform01(rng));
    total += v;
  }
  for (double& v : p) v /= total;
  return p;
}

Policy random_tabular(std::shared_ptr<const Vocab> vocab, const std::vector<Prompt>& prompts,
                      std::shared_ptr<const ResponseSpace> space, std::mt19937_64& rng) {
  TabularPolicy t(vocab);
  ContextKeying keying;
  std::vector<double> logits(space->size());
  for (const auto& p : prompts) {
    for (double& l : logits) l = detail::uniform(rng, -2.0, 2.0);
    t.add_context(keying.key(p), space, logits);
  }
  return Policy(std::move(t));
}

SuiteReport theorem1_suite(std::uint64_t seed, std::size_t instances) {
  std::mt19937_64 rng(mix_seed(seed, 0x7468316dULL));
  double max_bf_gap = 0.0, max_random_gap = 0.0, max_norm_err = 0.0, min_margin = 1e300;
  std::size_t bf_converged = 0;
  for (std::size_t k = 0; k < instances; ++k) {
    const std::size_t n = 3 + static_cast<std::size_t>(detail::uniform01(rng) * 38);
    const BetaPair betas{pick(kBeta1Grid, rng), pick(kBeta2Grid, rng)};
    std::vector<double> lr(n), lt(n), reward(n);
    for (std::size_t i = 0; i < n; ++i) {
      lr[i] = 2.0 * detail::normal(rng);
      lt[i] = 2.0 * detail::normal(rng);
      reward[i] = detail::normal(rng);
    }
    const ExactDistribution ref{detail::softmax(lr)}, te{detail::softmax(lt)};
    const auto star = optimal_policy(ref, te, reward, betas);
    double total = 0.0;
    for (double p : star.probs) total += p;
    max_norm_err = std::max(max_norm_err, std::abs(total - 1.0));
    const double f_star = rl_objective(star, ref, te, reward, betas);

    const auto bf = brute_force_maximize(ref, te, reward, betas, 2000, rng(), 3);
    bf_converged += bf.converged ? 1 : 0;
    max_bf_gap = std::max(max_bf_gap, bf.objective - f_star);
    min_margin = std::min(min_margin, f_star - bf.objective);
    for (int r = 0; r < 1000; ++r) {
      const ExactDistribution q{random_simplex(n, rng)};
      max_random_gap = std::max(max_random_gap, rl_objective(q, ref, te, reward, betas) - f_star);
    }
  }
  SuiteReport rep{"theorem1", false, {}};
  rep.passed = max_bf_gap < 1e-8 && max_random_gap < 1e-8 && max_norm_err < 1e-10;
  rep.details = {{"instances", instances},
                 {"max_objective_gap", std::max(max_bf_gap, max_random_gap)},
                 {"max_bruteforce_gap", max_bf_gap},
                 {"max_random_point_gap", max_random_gap},
                 {"min_closed_form_advantage", min_margin},
                 {"bruteforce_converged", bf_converged},
                 {"max_normalization_error", max_norm_err}};
  return rep;
}

SuiteReport gradients_suite(std::uint64_t seed, std::size_t instances) {
  const LossId ids[] = {LossId::kSft,  LossId::kTokenKl, LossId::kDdpo, LossId::kRdpo,
                        LossId::kDadpo, LossId::kSftKl,  LossId::kDdpoKl};
  std::mt19937_64 rng(mix_seed(seed, 0x67726164ULL));
  nlohmann::json per_loss = nlohmann::json::object();
  double worst = 0.0, worst_coef = 0.0, worst_direct = 0.0;
  for (LossId id : ids) {
    double worst_id = 0.0;
    for (Backend backend : {Backend::kTabular, Backend::kTokenModel}) {
      for (std::size_t k = 0; k < instances; ++k) {
        const auto inst = random_instance(rng(), backend);
        LossSpec spec;
        spec.id = id;
        spec.beta = pick(kBeta1Grid, rng);
        spec.betas = BetaPair{pick(kBeta1Grid, rng), pick(kBeta2Grid, rng)};
        spec.kl_weight = detail::uniform(rng, 0.1, 0.4);
        const auto in = inst.inputs();
        const auto analytic = loss_grad(spec, in);
        const auto numeric = finite_diff_loss_grad(spec, in, 1e-5);
        worst_id = std::max(worst_id, max_relative_error(analytic, numeric));

        if (id == LossId::kDadpo) {
          // Gradient rebuilt from the delta form of the coefficient.
          GradVector direct(inst.policy.num_params(), 0.0);
          const double n = static_cast<double>(inst.triplets.size());
          for (const auto& t : inst.triplets) {
            TripletLogps lp{inst.policy.sentence_logprob(t.prompt, t.winner),
                            inst.policy.sentence_logprob(t.prompt, t.loser),
                            inst.ref.sentence_logprob(t.prompt, t.winner),
                            inst.ref.sentence_logprob(t.prompt, t.loser),
                            inst.teacher.sentence_logprob(t.prompt, t.winner),
                            inst.teacher.sentence_logprob(t.prompt, t.loser)};
            const auto c = dadpo_coefficient(lp, spec.betas);
            worst_coef = std::max(worst_coef, std::abs(c.from_deltas - c.from_margin));
            const double s = c.from_deltas * spec.betas.sum() / n;
            inst.policy.accumulate_sentence_logprob_grad(t.prompt, t.winner, -s, direct);
            inst.policy.accumulate_sentence_logprob_grad(t.prompt, t.loser, s, direct);
          }
          for (std::size_t i = 0; i < direct.size(); ++i) {
            worst_direct = std::max(worst_direct, std::abs(direct[i] - analytic[i]));
          }
        }
      }
    }
    per_loss[to_string(id)] = worst_id;
    worst = std::max(worst, worst_id);
  }
  SuiteReport rep{"gradients", false, {}};
  rep.passed = worst < 1e-5 && worst_coef < 1e-10 && worst_direct < 1e-10;
  rep.details = {{"instances_per_backend", instances},
                 {"max_relative_error", worst},
                 {"per_loss", per_loss},
                 {"max_coefficient_gap", worst_coef},
                 {"max_direct_gradient_gap", worst_direct}};
  return rep;
}

SuiteReport reductions_suite(std::uint64_t seed, std::size_t instances) {
  std::mt19937_64 rng(mix_seed(seed, 0x72656475ULL));
  double ddpo_gap = 0.0, rdpo_gap = 0.0, ddpo_grad_gap = 0.0, rdpo_grad_gap = 0.0;
  for (std::size_t k = 0; k < instances; ++k) {
    const auto inst = random_instance(rng(), k % 2 ? Backend::kTokenModel : Backend::kTabular,
                                      1 + static_cast<std::size_t>(detail::uniform01(rng) * 8));
    const auto in = inst.inputs();
    const double b = std::exp(detail::uniform(rng, std::log(1e-3), std::log(10.0)));
    LossSpec d{LossId::kDdpo, b, {}, 0.0}, r{LossId::kRdpo, b, {}, 0.0};
    LossSpec a1{LossId::kDadpo, 0.1, BetaPair{b, 0.0}, 0.0}, a2{LossId::kDadpo, 0.1, BetaPair{0.0, b}, 0.0};
    ddpo_gap = std::max(ddpo_gap, std::abs(evaluate_loss(a1, in).total - evaluate_loss(d, in).total));
    rdpo_gap = std::max(rdpo_gap, std::abs(evaluate_loss(a2, in).total - evaluate_loss(r, in).total));
    const auto ga1 = loss_grad(a1, in), gd = loss_grad(d, in), ga2 = loss_grad(a2, in), gr = loss_grad(r, in);
    for (std::size_t i = 0; i < gd.size(); ++i) {
      ddpo_grad_gap = std::max(ddpo_grad_gap, std::abs(ga1[i] - gd[i]));
      rdpo_grad_gap = std::max(rdpo_grad_gap, std::abs(ga2[i] - gr[i]));
    }
  }

  WorldConfig wc;
  wc.seed = seed;
  wc.n_train = 60;
  wc.n_eval = 10;
  const auto world = make_synthetic_world(wc);
  RunConfig base;
  base.seed = seed;
  base.sft_epochs = 3;
  base.epochs = 5;
  auto run = [&](Method m, double beta, double b1, double b2) {
    RunConfig c = base;
    c.method = m;
    c.beta = beta;
    c.beta1 = b1;
    c.beta2 = b2;
    return distill(world.train_prompts, world.teacher, world.student, c, DecodeConfig{}).final_policy.param_hash();
  };
  const bool ddpo_traj = run(Method::kDdpo, 0.1, 0.1, 0.1) == run(Method::kDadpo, 0.1, 0.1, 0.0);
  const bool rdpo_traj = run(Method::kRdpo, 0.1, 0.1, 0.1) == run(Method::kDadpo, 0.1, 0.0, 0.1);

  SuiteReport rep{"reductions", false, {}};
  rep.passed = ddpo_gap < 1e-12 && rdpo_gap < 1e-12 && ddpo_grad_gap < 1e-12 && rdpo_grad_gap < 1e-12 &&
               ddpo_traj && rdpo_traj;
  rep.details = {{"batches", instances},
                 {"max_ddpo_loss_gap", ddpo_gap},
                 {"max_rdpo_loss_gap", rdpo_gap},
                 {"max_ddpo_grad_gap", ddpo_grad_gap},
                 {"max_rdpo_grad_gap", rdpo_grad_gap},
                 {"ddpo_trajectory_identical", ddpo_traj},
                 {"rdpo_trajectory_identical", rdpo_traj}};
  return rep;
}

struct CountRow {
  const char* label;
  int win, tie, lose;
  int tenths;
};

// Published (win, tie, lose) counts with the win rate printed beside them.
constexpr CountRow kCountRows[] = {
    {"qwen1.5b", 41, 33, 226, -617},  {"qwen1.5b", 124, 30, 146, -73},
    {"qwen1.5b", 138, 26, 136, 7},        {"qwen1.5b", 130, 25, 145, -50},
    {"qwen1.5b", 161, 20, 119, 140},     {"qwen0.5b", 29, 17, 254, -750},
    {"qwen0.5b", 43, 15, 242, -663},      {"qwen0.5b", 47, 16, 237, -633},
    {"qwen0.5b", 68, 18, 214, -487},   {"vicuna0.8", 71, 38, 191, -400},
    {"vicuna0.8", 82, 43, 175, -310},     {"vicuna0.8", 117, 39, 144, -90},
    {"vicuna0.8", 120, 38, 142, -73},    {"vicuna0.5", 23, 23, 254, -770},
    {"vicuna0.5", 37, 22, 241, -680},    {"llama", 38, 7, 255, -723},
    {"llama", 79, 28, 193, -380},         {"llama", 81, 29, 190, -363},
    {"llama", 76, 30, 194, -393},      {"llama", 82, 28, 190, -360},
};

SuiteReport winrate_suite() {
  SuiteReport rep{"winrate", true, {}};
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : kCountRows) {
    const auto w = win_rate_from_counts(r.win, r.lose, r.tie);
    const bool ok = w.omega_tenths == r.tenths;
    rep.passed = rep.passed && ok;
    rows.push_back({{"row", r.label}, {"omega", w.display()}, {"expected_tenths", r.tenths}, {"ok", ok}});
  }
  rep.details = {{"rows", rows}};
  return rep;
}

}  // namespace

RandomInstance random_instance(std::uint64_t seed, Backend backend, std::size_t batch) {
  require(batch > 0, ErrorKind::kInvalidArgument, "batch must be > 0");
  std::mt19937_64 rng(mix_seed(seed, 0x696e7374ULL));
  auto vocab = std::make_shared<const Vocab>(Vocab::synthetic(4));
  const std::size_t max_len = 3;
  auto space = std::make_shared<const ResponseSpace>(enumerate_responses(*vocab, max_len));

  std::vector<Prompt> prompts;
  for (int i = 0; i < 3; ++i) {
    Prompt p{"q" + std::to_string(i), {}};
    const int len = 1 + static_cast<int>(detail::uniform01(rng) * 3);
    for (int t = 0; t < len; ++t) p.tokens.push_back(1 + static_cast<TokenId>(detail::uniform01(rng) * 3));
    prompts.push_back(std::move(p));
  }

  auto make = [&]() -> Policy {
    if (backend == Backend::kTabular) return random_tabular(vocab, prompts, space, rng);
    return Policy(TokenModel::random(vocab, 3, max_len, rng(), 2.0));
  };
  Policy policy = make();
  Policy ref = make();
  Policy teacher = make();

  auto draw = [&] { return (*space)[std::min(space->size() - 1, static_cast<std::size_t>(detail::uniform01(rng) * space->size()))]; };
  std::vector<SftPair> sft;
  std::vector<PreferenceTriplet> triplets;
  for (std::size_t i = 0; i < batch; ++i) {
    const Prompt& x = prompts[i % prompts.size()];
    sft.push_back({x, draw()});
    Response w = draw(), l = draw();
    while (l == w) l = draw();
    triplets.push_back({x, w, l});
  }
  return RandomInstance{vocab, std::move(policy), std::move(ref), std::move(teacher), std::move(sft),
                        std::move(triplets)};
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"theorem1", "gradients", "reductions", "winrate"};
  return names;
}

SuiteReport run_suite(const std::string& suite, std::uint64_t seed, std::size_t instances) {
  if (suite == "theorem1") return theorem1_suite(seed, instances ? instances : 200);
  if (suite == "gradients") return gradients_suite(seed, instances ? instances : 50);
  if (suite == "reductions") return reductions_suite(seed, instances ? instances : 1000);
  if (suite == "winrate") return winrate_suite();
  fail(ErrorKind::kInvalidArgument, "unknown suite '" + suite + "'");
}

}  // namespace dadpo
