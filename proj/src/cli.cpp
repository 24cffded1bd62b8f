#include "dadpo/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <tuple>

#include <CLI11.hpp>

#include "dadpo/eval.hpp"
#include "dadpo/verify.hpp"

namespace dadpo {

namespace {

namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void error_line(std::ostream& err, const std::string& kind, const std::string& message) {
  err << nlohmann::json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << '\n';
}

std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  Fnv1a h;
  h.update(ss.str());
  return h.hex();
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::kIo, "cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

struct WorldOpts {
  std::uint64_t seed = 0;
  std::size_t vocab_size = 8;
  std::size_t max_len = 4;
  std::size_t n_train = 200;
  std::size_t n_eval = 100;
  std::size_t space_size = 40;
  std::size_t context_width = 2;
  std::string world_file;

  void add(CLI::App* app) {
    app->add_option("--seed", seed, "Seed for every random stream")->capture_default_str();
    app->add_option("--vocab-size", vocab_size, "Vocabulary size including EOS")->capture_default_str()
        ->check(CLI::Range(2, 1000));
    app->add_option("--max-len", max_len, "Maximum response length including EOS")->capture_default_str()
        ->check(CLI::Range(1, 64));
    app->add_option("--n-train", n_train, "Training prompts")->capture_default_str();
    app->add_option("--n-eval", n_eval, "Held-out evaluation prompts")->capture_default_str();
    app->add_option("--space-size", space_size, "Responses per context (0 = all)")->capture_default_str();
    app->add_option("--context-width", context_width, "Prompt prefix tokens that select a table row")
        ->capture_default_str();
    app->add_option("--world", world_file, "world.json from gen-data (overrides the world flags)");
  }

  SyntheticWorld build() const {
    if (!world_file.empty()) return SyntheticWorld::load(world_file);
    WorldConfig c;
    c.seed = seed;
    c.vocab_size = vocab_size;
    c.max_len = max_len;
    c.n_train = n_train;
    c.n_eval = n_eval;
    c.space_size = space_size;
    c.context_width = context_width;
    return make_synthetic_world(c);
  }
};

struct JudgeOpts {
  std::string kind = "oracle";
  std::string endpoint;
  std::string model = "gpt-4o-2024-08-06";
  std::string fixture;
  std::string template_file;
  double tie_margin = 0.0;
  std::size_t max_in_flight = 4;

  void add(CLI::App* app) {
    app->add_option("--judge", kind, "oracle | http")->capture_default_str()
        ->check(CLI::IsMember({"oracle", "http"}));
    app->add_option("--judge-endpoint", endpoint, "Chat-completions URL for --judge http");
    app->add_option("--judge-model", model, "Model name sent to the endpoint")->capture_default_str();
    app->add_option("--judge-fixture", fixture, "Replay recorded exchanges (JSONL) instead of calling the endpoint");
    app->add_option("--judge-template", template_file, "Judge prompt template");
    app->add_option("--tie-margin", tie_margin, "Oracle tie margin")->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    app->add_option("--judge-concurrency", max_in_flight, "In-flight judge requests")->capture_default_str()
        ->check(CLI::PositiveNumber);
  }

  struct Built {
    Judge judge;
    std::shared_ptr<RecordingTransport> log;
    std::size_t max_in_flight = 1;
  };

  Built build(const SyntheticWorld& world) const {
    if (kind == "oracle") return {make_oracle_judge(world.reward(), tie_margin), nullptr, 1};
    std::shared_ptr<JudgeTransport> inner;
    if (!fixture.empty()) {
      inner = std::make_shared<ReplayTransport>(ReplayTransport::load(fixture));
    } else {
      if (endpoint.empty()) throw UsageError("--judge http requires --judge-endpoint or --judge-fixture");
      inner = std::make_shared<HttpTransport>(endpoint, model);
    }
    auto rec = std::make_shared<RecordingTransport>(inner);
    const auto tmpl = template_file.empty() ? JudgeTemplate::builtin() : JudgeTemplate::load(template_file);
    return {make_llm_judge(rec, tmpl, world.vocab), rec, max_in_flight};
  }

  nlohmann::json to_json() const {
    return {{"kind", kind}, {"endpoint", endpoint}, {"model", model}, {"fixture", fixture}, {"tie_margin", tie_margin}};
  }
};

nlohmann::json eval_summary(const EvalResult& r, const JudgeOpts& j) {
  auto s = r.summary_json();
  s["judge"] = j.to_json();
  return s;
}

EvalResult run_eval(const Policy& policy, const SyntheticWorld& world, const JudgeOpts::Built& judge) {
  EvalConfig ec;
  for (const auto& p : world.train_prompts) ec.training_ids.insert(p.id);
  ec.max_in_flight = judge.max_in_flight;
  return evaluate_model(policy, world.teacher, world.eval_prompts, judge.judge, ec);
}

nlohmann::json provenance(const std::vector<std::string>& args, const SyntheticWorld& world) {
  return {{"version", kVersion}, {"argv", args}, {"world", world.to_json()}};
}

std::string cell_name(const SweepCell& c) {
  std::string s = to_string(c.method);
  switch (c.method) {
    case Method::kDsft: break;
    case Method::kDsftKl: s += "_kl" + num(c.kl_weight); break;
    case Method::kDdpo:
    case Method::kRdpo: s += "_b" + num(c.beta); break;
    case Method::kDdpoKl: s += "_b" + num(c.beta) + "_kl" + num(c.kl_weight); break;
    case Method::kDadpo: s += "_b1" + num(c.beta1) + "_b2" + num(c.beta2); break;
  }
  return s;
}

std::vector<Method> parse_methods(const std::string& list) {
  std::vector<Method> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(method_from_string(item));
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
  if (out.empty()) throw UsageError("--method must name at least one method");
  return out;
}

// Columns that do not apply to a method are left blank.
struct ReportRow {
  std::string method;
  std::optional<double> beta, beta1, beta2, kl;
  std::uint64_t seed = 0;
  std::string line;
};

std::string opt(const std::optional<double>& v) { return v ? num(*v) : ""; }

}  // namespace

std::string report_csv(const std::vector<RunManifest>& manifests) {
  std::vector<ReportRow> rows;
  for (const auto& m : manifests) {
    const auto& c = m.config;
    ReportRow r;
    r.method = to_string(c.method);
    r.seed = c.seed;
    if (c.method == Method::kDdpo || c.method == Method::kRdpo || c.method == Method::kDdpoKl) r.beta = c.beta;
    if (c.method == Method::kDadpo) {
      r.beta1 = c.beta1;
      r.beta2 = c.beta2;
    }
    if (c.method == Method::kDsftKl || c.method == Method::kDdpoKl) r.kl = c.kl_weight;
    std::string final_loss;
    if (!m.stages.empty() && !m.stages.back().loss_curve.empty()) final_loss = num(m.stages.back().loss_curve.back());
    std::string omega, nw, nl, nt, ne;
    if (m.eval.is_object() && m.eval.contains("omega")) {
      omega = num(m.eval.at("omega").get<double>());
      nw = std::to_string(m.eval.at("n_win").get<std::int64_t>());
      nl = std::to_string(m.eval.at("n_lose").get<std::int64_t>());
      nt = std::to_string(m.eval.at("n_tie").get<std::int64_t>());
      ne = std::to_string(m.eval.value("n_errors", std::int64_t{0}));
    }
    char wall[32];
    std::snprintf(wall, sizeof wall, "%.3f", m.wall_time_s);
    r.line = r.method + "," + opt(r.beta) + "," + opt(r.beta1) + "," + opt(r.beta2) + "," + opt(r.kl) + "," +
             std::to_string(r.seed) + "," + final_loss + "," + omega + "," + nw + "," + nl + "," + nt + "," + ne +
             "," + wall + "," + m.final_hash;
    rows.push_back(std::move(r));
  }
  auto key = [](const ReportRow& r) {
    return std::make_tuple(r.method, r.beta.value_or(-1), r.beta1.value_or(-1), r.beta2.value_or(-1),
                           r.kl.value_or(-1), r.seed, r.line);
  };
  std::sort(rows.begin(), rows.end(), [&](const ReportRow& a, const ReportRow& b) { return key(a) < key(b); });
  std::string csv =
      "method,beta,beta1,beta2,kl_weight,seed,final_loss,omega,n_win,n_lose,n_tie,n_errors,wall_time_s,final_hash\n";
  for (const auto& r : rows) csv += r.line + "\n";
  return csv;
}

void emit_report(const std::vector<std::string>& manifest_paths, const std::string& out_path) {
  require(!manifest_paths.empty(), ErrorKind::kInvalidArgument, "report needs at least one manifest");
  std::vector<RunManifest> ms;
  for (const auto& p : manifest_paths) {
    require(fs::exists(p), ErrorKind::kIo, "missing manifest '" + p + "'");
    ms.push_back(RunManifest::load(p));
  }
  std::ofstream out(out_path, std::ios::binary);
  require(out.good(), ErrorKind::kIo, "cannot write '" + out_path + "'");
  out << report_csv(ms);
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"daDPO distillation: data generation, training, evaluation and verification", "dadpo"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic world and its SFT / preference sets");
  WorldOpts gen_world;
  std::string gen_out;
  gen_world.add(gen);
  gen->add_option("--out", gen_out, "Output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "Run dSFT and the preference stage (or a sweep)");
  WorldOpts train_world;
  JudgeOpts train_judge;
  std::string train_out, methods, config_file, sweep_file;
  RunConfig flags;
  train_world.add(train);
  train_judge.add(train);
  train->add_option("--out", train_out, "Output directory")->required();
  train->add_option("--method", methods, "dsft|dsft_kl|ddpo|ddpo_kl|rdpo|dadpo (comma list with --sweep)")
      ->required();
  auto* o_beta = train->add_option("--beta", flags.beta, "dDPO / rDPO temperature")->check(CLI::PositiveNumber);
  auto* o_beta1 = train->add_option("--beta1", flags.beta1, "daDPO reference weight")->check(CLI::NonNegativeNumber);
  auto* o_beta2 = train->add_option("--beta2", flags.beta2, "daDPO teacher weight")->check(CLI::NonNegativeNumber);
  auto* o_kl = train->add_option("--kl-weight", flags.kl_weight, "Token-KL weight")->check(CLI::NonNegativeNumber);
  auto* o_epochs = train->add_option("--epochs", flags.epochs, "Preference-stage epochs");
  auto* o_sft_epochs = train->add_option("--sft-epochs", flags.sft_epochs, "dSFT epochs");
  auto* o_lr = train->add_option("--lr", flags.lr, "Preference-stage learning rate")->check(CLI::PositiveNumber);
  auto* o_sft_lr = train->add_option("--sft-lr", flags.sft_lr, "dSFT learning rate")->check(CLI::PositiveNumber);
  auto* o_batch = train->add_option("--batch-size", flags.batch_size, "Minibatch size")->check(CLI::PositiveNumber);
  train->add_option("--config", config_file, "Run config file (flat key = value)");
  train->add_option("--sweep", sweep_file, "Sweep file; grids over beta/beta1/beta2/kl_weight");

  // eval
  auto* ev = app.add_subcommand("eval", "Judge a checkpoint against the teacher on held-out prompts");
  WorldOpts eval_world;
  JudgeOpts eval_judge;
  std::string eval_out, checkpoint;
  eval_world.add(ev);
  eval_judge.add(ev);
  ev->add_option("--checkpoint", checkpoint, "Policy checkpoint (or 'student' / 'teacher')")->required();
  ev->add_option("--out", eval_out, "Output directory")->required();

  // verify
  auto* ver = app.add_subcommand("verify", "Run a verification suite");
  std::string suite, verify_out;
  std::uint64_t verify_seed = 0;
  std::size_t instances = 0;
  ver->add_option("--suite", suite, "theorem1 | gradients | reductions | winrate")->required()
      ->check(CLI::IsMember(suite_names()));
  ver->add_option("--seed", verify_seed, "Seed")->capture_default_str();
  ver->add_option("--instances", instances, "Instances (0 = suite default)")->capture_default_str();
  ver->add_option("--out", verify_out, "Directory for the report and manifest");

  // report
  auto* rep = app.add_subcommand("report", "Summarize run manifests as CSV");
  std::vector<std::string> manifests;
  std::string report_out;
  rep->add_option("manifests", manifests, "manifest.json files")->required();
  rep->add_option("--out", report_out, "CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.back()->help());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.back()->help());
    error_line(err, "usage_error", e.what());
    return 2;
  }

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  try {
    if (*gen) {
      const auto world = gen_world.build();
      fs::create_directories(gen_out);
      world.save(gen_out + "/world.json");
      write_prompts(gen_out + "/train_prompts.jsonl", world.train_prompts);
      write_prompts(gen_out + "/eval_prompts.jsonl", world.eval_prompts);
      const auto data = build_datasets(world.train_prompts, world.teacher, world.student, DecodeConfig{});
      write_sft_pairs(gen_out + "/sft.jsonl", data.sft);
      write_triplets(gen_out + "/triplets.jsonl", data.triplets);
      save_checkpoint(world.teacher, gen_out + "/teacher.json");
      save_checkpoint(world.student, gen_out + "/student.json");
      nlohmann::json files = nlohmann::json::object();
      for (const char* f : {"world.json", "train_prompts.jsonl", "eval_prompts.jsonl", "sft.jsonl", "triplets.jsonl",
                            "teacher.json", "student.json"}) {
        files[f] = file_hash(gen_out + "/" + f);
      }
      write_json(gen_out + "/manifest.json",
                 {{"command", "gen-data"},
                  {"provenance", provenance(args, world)},
                  {"dataset_hashes",
                   {{"sft", hash_sft(data.sft)}, {"triplets", hash_triplets(data.triplets)}}},
                  {"dataset_metadata", data.metadata()},
                  {"files", files},
                  {"wall_time_s", elapsed()}});
      out << nlohmann::json{{"out", gen_out}, {"sft", data.sft.size()}, {"triplets", data.triplets.size()},
                            {"dropped_equal", data.dropped_equal}}
                 .dump()
          << '\n';
      return 0;
    }

    if (*train) {
      RunConfig cfg = config_file.empty() ? RunConfig{} : RunConfig::load(config_file);
      if (!sweep_file.empty()) {
        const RunConfig grids = RunConfig::load(sweep_file);
        cfg.beta_grid = grids.beta_grid;
        cfg.beta1_grid = grids.beta1_grid;
        cfg.beta2_grid = grids.beta2_grid;
        cfg.kl_weight_grid = grids.kl_weight_grid;
      }
      if (o_beta->count()) cfg.beta = flags.beta;
      if (o_beta1->count()) cfg.beta1 = flags.beta1;
      if (o_beta2->count()) cfg.beta2 = flags.beta2;
      if (o_kl->count()) cfg.kl_weight = flags.kl_weight;
      if (o_epochs->count()) cfg.epochs = flags.epochs;
      if (o_sft_epochs->count()) cfg.sft_epochs = flags.sft_epochs;
      if (o_lr->count()) cfg.lr = flags.lr;
      if (o_sft_lr->count()) cfg.sft_lr = flags.sft_lr;
      if (o_batch->count()) cfg.batch_size = flags.batch_size;
      if (train->get_option("--seed")->count() || config_file.empty()) cfg.seed = train_world.seed;
      const auto method_list = parse_methods(methods);
      if (sweep_file.empty() && method_list.size() != 1) throw UsageError("--method takes one method without --sweep");
      cfg.method = method_list.front();
      try {
        cfg.validate();
      } catch (const Error& e) {
        throw UsageError(e.what());
      }

      const auto world = train_world.build();
      const auto judge = train_judge.build(world);
      fs::create_directories(train_out);

      if (!sweep_file.empty()) {
        std::vector<std::pair<std::string, EvalResult>> evals;
        auto cells = run_sweep(world.train_prompts, world.teacher, world.student, cfg, DecodeConfig{}, method_list,
                               [&](const Policy& p, RunManifest& m) {
                                 auto r = run_eval(p, world, judge);
                                 m.eval = eval_summary(r, train_judge);
                                 return r.report.omega;
                               });
        std::vector<std::string> paths;
        nlohmann::json summary = nlohmann::json::array();
        for (auto& c : cells) {
          const std::string dir = train_out + "/cells/" + cell_name(c);
          fs::create_directories(dir);
          c.manifest.provenance = provenance(args, world);
          c.manifest.save(dir + "/manifest.json");
          paths.push_back(dir + "/manifest.json");
          summary.push_back({{"cell", cell_name(c)}, {"omega", c.score}, {"final_hash", c.manifest.final_hash}});
        }
        emit_report(paths, train_out + "/report.csv");
        if (judge.log) judge.log->save(train_out + "/judge_log.jsonl");
        write_json(train_out + "/sweep.json", {{"command", "train"},
                                                {"provenance", provenance(args, world)},
                                                {"config", cfg.to_json()},
                                                {"cells", summary},
                                                {"wall_time_s", elapsed()}});
        out << nlohmann::json{{"out", train_out}, {"cells", cells.size()}}.dump() << '\n';
        return 0;
      }

      auto result = distill(world.train_prompts, world.teacher, world.student, cfg, DecodeConfig{}, train_out);
      for (const auto& w : result.manifest.warnings) err << "warning: " << w << '\n';
      const auto r = run_eval(result.final_policy, world, judge);
      r.write_csv(train_out + "/eval.csv", *world.vocab);
      if (judge.log) judge.log->save(train_out + "/judge_log.jsonl");
      result.manifest.eval = eval_summary(r, train_judge);
      result.manifest.provenance = provenance(args, world);
      result.manifest.wall_time_s = elapsed();
      result.manifest.save(train_out + "/manifest.json");
      out << nlohmann::json{{"out", train_out},
                            {"final_hash", result.manifest.final_hash},
                            {"omega", r.report.omega},
                            {"omega_display", r.report.display()}}
                 .dump()
          << '\n';
      return 0;
    }

    if (*ev) {
      const auto world = eval_world.build();
      const auto judge = eval_judge.build(world);
      Policy policy = checkpoint == "student"   ? world.student
                      : checkpoint == "teacher" ? world.teacher
                                                : load_checkpoint(checkpoint, world.vocab);
      fs::create_directories(eval_out);
      const auto r = run_eval(policy, world, judge);
      r.write_csv(eval_out + "/eval.csv", *world.vocab);
      if (judge.log) judge.log->save(eval_out + "/judge_log.jsonl");
      const auto summary = eval_summary(r, eval_judge);
      write_json(eval_out + "/eval.json", summary);
      write_json(eval_out + "/manifest.json", {{"command", "eval"},
                                               {"provenance", provenance(args, world)},
                                               {"checkpoint", checkpoint},
                                               {"checkpoint_hash", policy.param_hash()},
                                               {"eval", summary},
                                               {"wall_time_s", elapsed()}});
      out << summary.dump() << '\n';
      return 0;
    }

    if (*ver) {
      const auto rep_v = run_suite(suite, verify_seed, instances);
      nlohmann::json j = {{"suite", rep_v.suite}, {"passed", rep_v.passed}, {"details", rep_v.details},
                          {"seed", verify_seed}, {"wall_time_s", elapsed()}};
      if (!verify_out.empty()) {
        fs::create_directories(verify_out);
        write_json(verify_out + "/verify_" + suite + ".json", j);
        write_json(verify_out + "/manifest.json",
                   {{"command", "verify"}, {"version", kVersion}, {"argv", args}, {"report", j}});
      }
      out << j.dump() << '\n';
      if (!rep_v.passed) {
        error_line(err, "verification_failed", "suite '" + suite + "' failed");
        return 1;
      }
      return 0;
    }

    if (*rep) {
      emit_report(manifests, report_out);
      out << nlohmann::json{{"out", report_out}, {"rows", manifests.size()}}.dump() << '\n';
      return 0;
    }
  } catch (const UsageError& e) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.back()->help());
    error_line(err, "usage_error", e.what());
    return 2;
  } catch (const StageError& e) {
    err << nlohmann::json{{"error", {{"kind", to_string(e.kind())}, {"stage", e.stage()}, {"message", e.what()}}}}
               .dump()
        << '\n';
    return 1;
  } catch (const Error& e) {
    error_line(err, to_string(e.kind()), e.what());
    return 1;
  } catch (const std::exception& e) {
    error_line(err, "internal_error", e.what());
    return 1;
  }
  return 2;
}

}  // namespace dadpo
