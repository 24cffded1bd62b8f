#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "dadpo/losses.hpp"
#include "dadpo/verify.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace dadpo;
using fixture::resp;

namespace {

const Prompt kX{"x", {1}};

/// Three-response row whose first two sentence log-probs are exactly lw and ll.
Policy with_logprobs(std::shared_ptr<const Vocab> v, double lw, double ll) {
  const double rest = std::log1p(-std::exp(lw) - std::exp(ll));
  return fixture::tabular(v, {kX}, fixture::space({{1, 0}, {2, 0}, {0}}), {{lw, ll, rest}});
}

std::vector<PreferenceTriplet> one_triplet() { return {{kX, resp({1, 0}), resp({2, 0})}}; }

std::vector<PreferenceTriplet> swapped(std::vector<PreferenceTriplet> b) {
  for (auto& t : b) std::swap(t.winner, t.loser);
  return b;
}

}  // namespace

TEST_CASE("sft_loss") {
  const auto v = fixture::vocab(4);
  SUBCASE("hand-set probabilities 0.5 and 0.25") {
    const Prompt a{"a", {1}}, b{"b", {2}};
    const auto sp = fixture::space({{1, 0}, {2, 0}, {3, 0}, {0}});
    const auto p = fixture::tabular(v, {a, b}, sp,
                                    {{std::log(0.5), std::log(0.25), std::log(0.125), std::log(0.125)},
                                     {std::log(0.25), std::log(0.25), std::log(0.25), std::log(0.25)}});
    const std::vector<SftPair> batch{{a, resp({1, 0})}, {b, resp({3, 0})}};
    const auto l = sft_loss(p, batch);
    CHECK(l.total == doctest::Approx(1.039721).epsilon(1e-6));
    CHECK(l.total == doctest::Approx(-(std::log(0.5) + std::log(0.25)) / 2).epsilon(1e-12));
    REQUIRE(l.per_example.size() == 2);
    CHECK(l.per_example[0] == doctest::Approx(std::log(2.0)));
  }
  SUBCASE("deterministic policy") {
    const auto p = fixture::tabular(v, {kX}, fixture::space({{1, 0}, {0}}), {{0.0, -40.0}});
    CHECK(sft_loss(p, std::vector<SftPair>{{kX, resp({1, 0})}}).total < 1e-12);
  }
  SUBCASE("uniform token model, targets of length 2") {
    TokenModel tm(v, 3, 4);
    const Policy p(tm);
    const std::vector<SftPair> batch{{kX, resp({1, 0})}, {Prompt{"y", {2, 3}}, resp({3, 0})}};
    CHECK(sft_loss(p, batch).total == doctest::Approx(2 * std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("empty batch") { CHECK_THROWS_AS(sft_loss(with_logprobs(v, -1, -2), std::vector<SftPair>{}), Error); }
}

TEST_CASE("token_kl_loss") {
  const auto v = fixture::vocab(2);
  const auto sp = fixture::space({{0}, {1, 0}});
  const std::vector<SftPair> batch{{kX, resp({0})}};
  SUBCASE("student uniform, teacher (0.9, 0.1)") {
    const auto s = fixture::tabular(v, {kX}, sp, {{0.0, 0.0}});
    const auto t = fixture::tabular(v, {kX}, sp, {{std::log(0.9), std::log(0.1)}});
    const std::vector<double> p{0.5, 0.5}, q{0.9, 0.1};
    CHECK(token_kl_loss(s, t, batch).total == doctest::Approx(0.510826).epsilon(1e-6));
    CHECK(token_kl_loss(s, t, batch).total == doctest::Approx(static_cast<double>(oracle::kl(p, q))).epsilon(1e-12));
  }
  SUBCASE("near-deterministic student against a uniform teacher") {
    const double eps = 1e-6;
    const auto s = fixture::tabular(v, {kX}, sp, {{std::log(1 - eps), std::log(eps)}});
    const auto t = fixture::tabular(v, {kX}, sp, {{0.0, 0.0}});
    CHECK(std::abs(token_kl_loss(s, t, batch).total - std::log(2.0)) < 1e-4);
  }
  SUBCASE("student = teacher") {
    const Policy tm(TokenModel::random(fixture::vocab(5), 3, 4, 3, 2.0));
    const std::vector<SftPair> b{{Prompt{"a", {1, 2}}, resp({3, 4, 0})}, {Prompt{"b", {4}}, resp({0})}};
    CHECK(token_kl_loss(tm, tm, b).total == doctest::Approx(0.0).epsilon(1e-14));
  }
  SUBCASE("length normalization") {
    const auto vv = fixture::vocab(5);
    const Policy s(TokenModel::random(vv, 3, 4, 1, 2.0));
    const Policy t(TokenModel::random(vv, 3, 4, 2, 2.0));
    const Prompt x{"a", {1, 2}};
    const std::vector<TokenId> y{3, 4, 0};
    long double sum = 0;
    for (std::size_t n = 0; n < y.size(); ++n) {
      std::span<const TokenId> prefix(y.data(), n);
      const auto p = s.token_distribution(x, prefix);
      const auto q = t.token_distribution(x, prefix);
      sum += oracle::kl(p, q);
    }
    const std::vector<SftPair> b{{x, resp(y)}};
    CHECK(token_kl_loss(s, t, b).total == doctest::Approx(static_cast<double>(sum / 3)).epsilon(1e-12));
    CHECK(token_kl_loss(s, t, b).total > 0.0);
  }
  SUBCASE("vocabulary mismatch") {
    const Policy a(TokenModel::random(fixture::vocab(5), 3, 4, 1));
    const Policy b(TokenModel::random(fixture::vocab(6), 3, 4, 1));
    CHECK_THROWS_AS(token_kl_loss(a, b, std::vector<SftPair>{{Prompt{"a", {1}}, resp({0})}}), Error);
  }
}

TEST_CASE("ddpo_loss and rdpo_loss") {
  const auto v = fixture::vocab(4);
  const auto batch = one_triplet();
  const auto ref = with_logprobs(v, -2.0, -2.0);
  SUBCASE("policy = ref") { CHECK(ddpo_loss(ref, ref, batch, 0.1).total == doctest::Approx(std::log(2.0))); }
  SUBCASE("margin 3 and -3") {
    // beta * ((-1 + 2) - (-3 + 2)) = 1.5 * 2 = 3
    const auto pol = with_logprobs(v, -1.0, -3.0);
    CHECK(ddpo_loss(pol, ref, batch, 1.5).total == doctest::Approx(0.048587).epsilon(1e-6));
    CHECK(ddpo_loss(pol, ref, swapped(batch), 1.5).total == doctest::Approx(3.048587).epsilon(1e-6));
    CHECK(ddpo_loss(pol, ref, batch, 1.5).total ==
          doctest::Approx(static_cast<double>(oracle::neg_log_sigmoid(3.0L))).epsilon(1e-12));
  }
  SUBCASE("rdpo at policy = teacher") { CHECK(rdpo_loss(ref, ref, batch, 1.0).total == doctest::Approx(std::log(2.0))); }
  SUBCASE("rdpo equals ddpo with the teacher as ref") {
    const auto pol = with_logprobs(v, -1.0, -3.0);
    const auto te = with_logprobs(v, -1.5, -2.5);
    CHECK(rdpo_loss(pol, te, batch, 0.7).total == ddpo_loss(pol, te, batch, 0.7).total);
  }
  SUBCASE("invalid beta") {
    CHECK_THROWS_AS(ddpo_loss(ref, ref, batch, 0.0), Error);
    CHECK_THROWS_AS(rdpo_loss(ref, ref, batch, -1.0), Error);
    CHECK_THROWS_AS(ddpo_loss(ref, ref, std::vector<PreferenceTriplet>{}, 1.0), Error);
  }
}

TEST_CASE("dadpo_loss hand example") {
  const auto v = fixture::vocab(4);
  const auto pol = with_logprobs(v, -1.0, -3.0);
  const auto ref = with_logprobs(v, -2.0, -2.0);
  const auto te = with_logprobs(v, -1.5, -2.5);
  const auto batch = one_triplet();
  const auto l = dadpo_loss(pol, ref, te, batch, {1.0, 1.0});
  CHECK(l.total == doctest::Approx(0.048587).epsilon(1e-6));
  // (2*(-1) + 2 + 1.5) - (2*(-3) + 2 + 2.5) = 1.5 - (-1.5) = 3
  const TripletLogps lp{-1.0, -3.0, -2.0, -2.0, -1.5, -2.5};
  CHECK(dadpo_margin(lp, {1.0, 1.0}) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(l.total == doctest::Approx(static_cast<double>(oracle::neg_log_sigmoid(3.0L))).epsilon(1e-12));
  CHECK(dadpo_loss(ref, ref, ref, batch, {0.3, 0.8}).total == doctest::Approx(std::log(2.0)));

  CHECK_THROWS_AS(dadpo_loss(pol, ref, te, batch, {0.0, 0.0}), Error);
  CHECK_THROWS_AS(dadpo_loss(pol, ref, te, batch, {-0.1, 1.0}), Error);
  CHECK_THROWS_AS(BetaPair({0.0, 0.0}).validate(), Error);
}

TEST_CASE("reduction identities on random batches") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto backend = seed % 2 ? Backend::kTokenModel : Backend::kTabular;
    const auto in = random_instance(seed, backend, 5);
    for (double b : {0.01, 0.1, 1.0, 3.7}) {
      const auto dpo = ddpo_loss(in.policy, in.ref, in.triplets, b);
      const auto da0 = dadpo_loss(in.policy, in.ref, in.teacher, in.triplets, {b, 0.0});
      CHECK(std::abs(dpo.total - da0.total) <= 1e-12);
      for (std::size_t i = 0; i < dpo.per_example.size(); ++i)
        CHECK(std::abs(dpo.per_example[i] - da0.per_example[i]) <= 1e-12);

      const auto r = rdpo_loss(in.policy, in.teacher, in.triplets, b);
      const auto dr = dadpo_loss(in.policy, in.ref, in.teacher, in.triplets, {0.0, b});
      CHECK(std::abs(r.total - dr.total) <= 1e-12);
      // The reference policy plays no part once beta1 = 0.
      const auto dr2 = dadpo_loss(in.policy, in.policy, in.teacher, in.triplets, {0.0, b});
      CHECK(std::abs(dr2.total - dr.total) <= 1e-12);
    }
  }
}

TEST_CASE("winner/loser symmetry") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto in = random_instance(seed, Backend::kTabular, 6);
    const BetaPair bp{0.4, 0.9};
    const auto fwd = dadpo_loss(in.policy, in.ref, in.teacher, in.triplets, bp);
    const auto rev = dadpo_loss(in.policy, in.ref, in.teacher, swapped(in.triplets), bp);
    for (std::size_t i = 0; i < in.triplets.size(); ++i) {
      const auto& t = in.triplets[i];
      const TripletLogps lp{in.policy.sentence_logprob(t.prompt, t.winner), in.policy.sentence_logprob(t.prompt, t.loser),
                            in.ref.sentence_logprob(t.prompt, t.winner),    in.ref.sentence_logprob(t.prompt, t.loser),
                            in.teacher.sentence_logprob(t.prompt, t.winner), in.teacher.sentence_logprob(t.prompt, t.loser)};
      const long double z = std::abs(dadpo_margin(lp, bp));
      const double expect = static_cast<double>(z + 2 * oracle::neg_log_sigmoid(z));
      CHECK(fwd.per_example[i] + rev.per_example[i] == doctest::Approx(expect).epsilon(1e-12));
      CHECK(fwd.per_example[i] > 0.0);
    }
  }
}

TEST_CASE("raising the winner log-prob lowers the loss") {
  const auto v = fixture::vocab(4);
  const auto ref = with_logprobs(v, -2.0, -2.0);
  const auto te = with_logprobs(v, -1.5, -2.5);
  const auto batch = one_triplet();
  double prev = INFINITY;
  for (double lw = -6.0; lw <= -0.2; lw += 0.4) {
    const double l = dadpo_loss(with_logprobs(v, lw, -3.0), ref, te, batch, {0.5, 0.5}).total;
    CHECK(l < prev);
    prev = l;
  }
}

TEST_CASE("floored probabilities stay finite") {
  const auto v = fixture::vocab(4);
  const auto pol = fixture::tabular(v, {kX}, fixture::space({{1, 0}, {2, 0}}), {{-1000.0, 0.0}});
  const auto ref = fixture::tabular(v, {kX}, fixture::space({{1, 0}, {2, 0}}), {{0.0, -1000.0}});
  const auto l = dadpo_loss(pol, ref, ref, one_triplet(), {1.0, 1.0});
  CHECK(std::isfinite(l.total));
  CHECK(l.total > 0.0);
}

TEST_CASE("composite losses") {
  const auto in = random_instance(11, Backend::kTokenModel, 6);
  SUBCASE("weight 0 is the base loss") {
    CHECK(composite_loss(CompositeBase::kSft, 0.0, in.policy, in.teacher, in.sft).total ==
          sft_loss(in.policy, in.sft).total);
    CHECK(composite_loss(CompositeBase::kDdpo, 0.0, in.policy, in.ref, in.teacher, in.triplets, 0.1).total ==
          ddpo_loss(in.policy, in.ref, in.triplets, 0.1).total);
  }
  SUBCASE("student = teacher is the base loss") {
    CHECK(composite_loss(CompositeBase::kSft, 0.4, in.teacher, in.teacher, in.sft).total ==
          doctest::Approx(sft_loss(in.teacher, in.sft).total).epsilon(1e-14));
  }
  SUBCASE("weight 0.2 decomposes additively") {
    const auto c = composite_loss(CompositeBase::kSft, 0.2, in.policy, in.teacher, in.sft);
    const double base = sft_loss(in.policy, in.sft).total;
    const double kl = token_kl_loss(in.policy, in.teacher, in.sft).total;
    CHECK(c.total == doctest::Approx(base + 0.2 * kl).epsilon(1e-14));
    CHECK(c.aux.at("base") == base);
    CHECK(c.aux.at("kl") == kl);
    CHECK(c.aux.at("kl_weight") == 0.2);

    const auto d = composite_loss(CompositeBase::kDdpo, 0.2, in.policy, in.ref, in.teacher, in.triplets, 0.1);
    const double dbase = ddpo_loss(in.policy, in.ref, in.triplets, 0.1).total;
    const double dkl = token_kl_loss(in.policy, in.teacher, winners_as_sft(in.triplets)).total;
    CHECK(d.total == doctest::Approx(dbase + 0.2 * dkl).epsilon(1e-14));
  }
  SUBCASE("non-finite weight") {
    CHECK_THROWS_AS(composite_loss(CompositeBase::kSft, NAN, in.policy, in.teacher, in.sft), Error);
  }
}

TEST_CASE("evaluate_loss dispatch") {
  const auto in = random_instance(5, Backend::kTabular, 4);
  LossSpec s;
  s.id = LossId::kDadpo;
  s.betas = {0.2, 0.3};
  CHECK(evaluate_loss(s, in.inputs()).total ==
        dadpo_loss(in.policy, in.ref, in.teacher, in.triplets, s.betas).total);
  s.id = LossId::kSft;
  CHECK(evaluate_loss(s, in.inputs()).total == sft_loss(in.policy, in.sft).total);
  for (auto id : {LossId::kSft, LossId::kTokenKl, LossId::kDdpo, LossId::kRdpo, LossId::kDadpo, LossId::kSftKl,
                  LossId::kDdpoKl})
    CHECK(loss_id_from_string(to_string(id)) == id);
  CHECK_THROWS_AS(loss_id_from_string("kto"), Error);
}

TEST_CASE("losses are pure") {
  const auto in = random_instance(21, Backend::kTokenModel, 4);
  const BetaPair bp{0.1, 1.0};
  const double a = dadpo_loss(in.policy, in.ref, in.teacher, in.triplets, bp).total;
  const double b = dadpo_loss(in.policy, in.ref, in.teacher, in.triplets, bp).total;
  CHECK(a == b);
  CHECK(in.policy.param_hash() == random_instance(21, Backend::kTokenModel, 4).policy.param_hash());
}
