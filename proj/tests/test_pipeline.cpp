#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <filesystem>

#include "dadpo/eval.hpp"
#include "dadpo/pipeline.hpp"
#include "support/fixtures.hpp"

using namespace dadpo;
using fixture::resp;

namespace {

WorldConfig small_world(std::uint64_t seed = 0) {
  WorldConfig w;
  w.seed = seed;
  w.n_train = 60;
  w.n_eval = 30;
  return w;
}

RunConfig quick(Method m) {
  RunConfig c;
  c.method = m;
  c.sft_epochs = 3;
  c.epochs = 5;
  return c;
}

std::string scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "dadpo_test_pipeline" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace

TEST_CASE("RunConfig text form") {
  RunConfig c;
  c.method = Method::kDdpoKl;
  c.beta = 0.25;
  c.kl_weight = 0.4;
  c.seed = 42;
  c.beta2_grid = {0.0, 0.001, 1.0};
  const auto back = RunConfig::parse(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK(back.hash() == c.hash());
  CHECK(back.method == Method::kDdpoKl);
  CHECK(back.beta2_grid == std::vector<double>{0.0, 0.001, 1.0});

  const auto p = RunConfig::parse("# comment\nmethod = rdpo\n\nbeta = 0.5  \nepochs=3\nbeta1_grid = 0.1, 1\n");
  CHECK(p.method == Method::kRdpo);
  CHECK(p.beta == 0.5);
  CHECK(p.epochs == 3);
  CHECK(p.beta1_grid == std::vector<double>{0.1, 1.0});
  CHECK(p.hash() != RunConfig{}.hash());

  CHECK_THROWS_AS(RunConfig::parse("nonsense = 1\n"), Error);
  CHECK_THROWS_AS(RunConfig::parse("method = kto\n"), Error);
  CHECK_THROWS_AS(RunConfig::parse("beta = abc\n"), Error);
  CHECK_THROWS_AS(RunConfig::parse("beta 0.1\n"), Error);
  CHECK_THROWS_AS(RunConfig::parse("method = dadpo\nbeta1 = 0\nbeta2 = 0\n").validate(), Error);
  CHECK_THROWS_AS(RunConfig::parse("lr = -1\n").validate(), Error);
  CHECK(method_from_string(to_string(Method::kDsftKl)) == Method::kDsftKl);
  CHECK(!is_preference_method(Method::kDsftKl));
  CHECK(is_preference_method(Method::kRdpo));
}

TEST_CASE("run_dsft") {
  const auto v = fixture::vocab(4);
  const std::vector<Prompt> ps{{"a", {1}}, {"b", {2}}, {"c", {3, 1}}};
  const auto sp = fixture::space({{1, 0}, {2, 0}, {3, 0}, {0}});
  const auto student = fixture::tabular(v, ps, sp, {{0, 0, 0, 0}, {0.5, 0, -0.5, 0}, {1, 1, 0, 0}});
  const std::vector<SftPair> sft{{ps[0], resp({2, 0})}, {ps[1], resp({3, 0})}, {ps[2], resp({0})}};

  SUBCASE("zero epochs") {
    RunConfig c = quick(Method::kDsft);
    c.sft_epochs = 0;
    const auto r = run_dsft(student, sft, c);
    CHECK(r.policy.param_hash() == student.param_hash());
    CHECK(r.log.loss_curve.size() == 1);
    CHECK(r.log.epochs_run == 0);
  }
  SUBCASE("converges on a realizable corpus") {
    RunConfig c = quick(Method::kDsft);
    c.sft_epochs = 500;
    const auto r = run_dsft(student, sft, c);
    CHECK(sft_loss(r.policy, sft).total < 0.01);
    for (std::size_t i = 1; i < r.log.loss_curve.size(); ++i)
      CHECK(r.log.loss_curve[i] <= r.log.loss_curve[i - 1] + 1e-6);
  }
  SUBCASE("determinism") {
    RunConfig c = quick(Method::kDsft);
    c.sft_epochs = 7;
    c.batch_size = 2;
    CHECK(run_dsft(student, sft, c).policy.param_hash() == run_dsft(student, sft, c).policy.param_hash());
  }
  SUBCASE("empty data") { CHECK_THROWS_AS(run_dsft(student, std::vector<SftPair>{}, quick(Method::kDsft)), Error); }
}

TEST_CASE("preference stage on a two-response task") {
  // The teacher prefers A on every prompt; the student prefers B.
  const auto v = fixture::vocab(3);
  const std::vector<Prompt> ps{{"p0", {1}}, {"p1", {2}}, {"p2", {1, 2}}, {"p3", {2, 2}}};
  const auto sp = fixture::space({{1, 0}, {2, 0}});
  const auto teacher = fixture::tabular(v, ps, sp, {{2, 0}, {3, 0}, {1, 0}, {2.5, 0}});
  const auto pi_dsft = fixture::tabular(v, ps, sp, {{0, 1}, {0, 0.5}, {0, 2}, {-1, 1}});
  std::vector<PreferenceTriplet> triplets;
  for (const auto& p : ps) triplets.push_back({p, resp({1, 0}), resp({2, 0})});

  for (Method m : {Method::kDdpo, Method::kRdpo, Method::kDadpo, Method::kDdpoKl}) {
    RunConfig c = quick(m);
    c.epochs = 20;
    const std::string before = pi_dsft.param_hash();
    const auto r = run_preference_stage(pi_dsft, teacher, triplets, c);
    CHECK(pi_dsft.param_hash() == before);
    for (const auto& p : ps) {
      INFO(to_string(m) << " " << p.id);
      CHECK(r.policy.sentence_logprob(p, resp({1, 0})) > pi_dsft.sentence_logprob(p, resp({1, 0})));
    }
    CHECK(r.log.loss_curve.back() < r.log.loss_curve.front());
  }
  CHECK_THROWS_AS(run_preference_stage(pi_dsft, teacher, triplets, quick(Method::kDsft)), Error);
}

TEST_CASE("reductions hold through training") {
  const auto world = make_synthetic_world(small_world(3));
  auto ddpo = quick(Method::kDdpo);
  ddpo.beta = 0.1;
  auto dadpo0 = quick(Method::kDadpo);
  dadpo0.beta1 = 0.1;
  dadpo0.beta2 = 0.0;
  const auto a = distill(world.train_prompts, world.teacher, world.student, ddpo, DecodeConfig{});
  const auto b = distill(world.train_prompts, world.teacher, world.student, dadpo0, DecodeConfig{});
  CHECK(a.manifest.final_hash == b.manifest.final_hash);
  CHECK(a.manifest.stages.back().loss_curve == b.manifest.stages.back().loss_curve);

  auto rdpo = quick(Method::kRdpo);
  rdpo.beta = 1.0;
  auto dadpo1 = quick(Method::kDadpo);
  dadpo1.beta1 = 0.0;
  dadpo1.beta2 = 1.0;
  const auto c = distill(world.train_prompts, world.teacher, world.student, rdpo, DecodeConfig{});
  const auto d = distill(world.train_prompts, world.teacher, world.student, dadpo1, DecodeConfig{});
  CHECK(c.manifest.final_hash == d.manifest.final_hash);
  CHECK(c.manifest.final_hash != a.manifest.final_hash);
}

TEST_CASE("teacher = student skips the preference stage") {
  const auto world = make_synthetic_world(small_world());
  const auto r = distill(world.train_prompts, world.teacher, world.teacher, quick(Method::kDadpo), DecodeConfig{});
  CHECK(r.data.triplets.empty());
  REQUIRE(r.manifest.stages.size() == 2);
  CHECK(r.manifest.stages[1].skipped);
  CHECK(r.manifest.warnings.size() == 1);
  CHECK(r.final_policy.param_hash() == r.dsft_policy.param_hash());
}

TEST_CASE("full synthetic world run") {
  const auto world = make_synthetic_world(WorldConfig{});
  CHECK(world.train_prompts.size() == 200);
  const auto dir = scratch("full");
  RunConfig cfg;
  cfg.beta1 = 1.0;
  cfg.beta2 = 1.0;
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = distill(world.train_prompts, world.teacher, world.student, cfg, DecodeConfig{}, dir);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(secs < 60.0);

  r.manifest.save(dir + "/manifest.json");
  const auto m = RunManifest::load(dir + "/manifest.json");
  CHECK(m.to_json() == r.manifest.to_json());
  REQUIRE(m.checkpoints.size() == 2);
  for (const auto& ck : m.checkpoints) {
    const auto p = load_checkpoint(dir + "/" + ck.path, world.vocab);
    CHECK(p.param_hash() == ck.hash);
  }
  CHECK(m.checkpoints.back().hash == m.final_hash);
  CHECK(m.dataset_hashes.at("prompts") == hash_prompts(world.train_prompts));
  for (const auto& s : m.stages) CHECK(!s.loss_curve.empty());

  SUBCASE("rerun from the recorded config") {
    const auto again = distill(world.train_prompts, world.teacher, world.student, m.config, DecodeConfig{});
    CHECK(again.manifest.final_hash == m.final_hash);
    CHECK(again.manifest.dataset_hashes == m.dataset_hashes);
  }
  SUBCASE("trained student beats the untrained one") {
    EvalConfig ec;
    for (const auto& p : world.train_prompts) ec.training_ids.insert(p.id);
    const auto judge = make_oracle_judge(world.reward());
    const auto before = evaluate_model(world.student, world.teacher, world.eval_prompts, judge, ec);
    const auto after = evaluate_model(r.final_policy, world.teacher, world.eval_prompts, judge, ec);
    CHECK(after.report.omega > before.report.omega);
  }
}

TEST_CASE("synthetic world") {
  const auto a = make_synthetic_world(small_world(9));
  const auto b = make_synthetic_world(small_world(9));
  CHECK(a.teacher.param_hash() == b.teacher.param_hash());
  CHECK(a.student.param_hash() == b.student.param_hash());
  CHECK(a.gold == b.gold);
  CHECK(make_synthetic_world(small_world(10)).teacher.param_hash() != a.teacher.param_hash());

  std::set<std::string> train;
  for (const auto& p : a.train_prompts) train.insert(p.id);
  for (const auto& p : a.eval_prompts) CHECK(train.count(p.id) == 0);

  const auto* tab = a.teacher.as_tabular();
  REQUIRE(tab != nullptr);
  for (const auto& [key, row] : tab->rows()) CHECK(row.space->size() == 40);

  const auto reward = a.reward();
  const auto& x = a.eval_prompts.front();
  const auto y = a.teacher.sample(x, DecodeConfig{});
  CHECK(std::isfinite(reward(x, y)));
  CHECK_THROWS_AS(reward(x, resp({1, 1, 1, 1, 1, 0})), Error);

  const auto dir = scratch("world");
  a.save(dir + "/world.json");
  const auto c = SyntheticWorld::load(dir + "/world.json");
  CHECK(c.teacher.param_hash() == a.teacher.param_hash());
  CHECK(c.eval_prompts == a.eval_prompts);
}

TEST_CASE("stage errors carry their stage") {
  const auto world = make_synthetic_world(small_world());
  const auto stage_of = [&](const Policy& student, const RunConfig& c) {
    try {
      distill(world.train_prompts, world.teacher, student, c, DecodeConfig{});
    } catch (const StageError& e) {
      CHECK(std::string(e.what()).rfind(e.stage() + ": ", 0) == 0);
      return e.stage();
    }
    return std::string("none");
  };
  RunConfig bad = quick(Method::kDadpo);
  bad.lr = -1.0;
  CHECK(stage_of(world.student, bad) == "config");
  const Policy other(TokenModel::random(fixture::vocab(5), 3, 4, 1));
  CHECK(stage_of(other, quick(Method::kDadpo)) == "build_datasets");
  Policy broken = world.student;
  broken.params()[0] = NAN;
  CHECK(stage_of(broken, quick(Method::kDadpo)) != "none");
}

TEST_CASE("sweep cells") {
  const auto world = make_synthetic_world(small_world(1));
  RunConfig base = quick(Method::kDadpo);
  int scored = 0;
  const auto cells = run_sweep(world.train_prompts, world.teacher, world.student, base, DecodeConfig{},
                               {Method::kDsft, Method::kDdpo, Method::kDadpo},
                               [&](const Policy&, RunManifest&) { return static_cast<double>(++scored); });
  CHECK(cells.size() == 1 + 3 + 3 * 4);
  CHECK(scored == static_cast<int>(cells.size()));
  std::set<std::string> dsft_hashes;
  for (const auto& cell : cells) dsft_hashes.insert(cell.manifest.checkpoints.front().hash);
  CHECK(dsft_hashes.size() == 1);

  // A sweep cell matches the equivalent standalone run.
  RunConfig one = base;
  one.method = Method::kDadpo;
  one.beta1 = cells.back().beta1;
  one.beta2 = cells.back().beta2;
  const auto r = distill(world.train_prompts, world.teacher, world.student, one, DecodeConfig{});
  CHECK(r.manifest.final_hash == cells.back().manifest.final_hash);
}
