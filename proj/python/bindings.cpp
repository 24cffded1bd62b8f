#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include <nlohmann/json.hpp>

#include "dadpo/cli.hpp"
#include "dadpo/eval.hpp"
#include "dadpo/pipeline.hpp"
#include "dadpo/theory.hpp"
#include "dadpo/verify.hpp"

namespace py = pybind11;
using namespace dadpo;

namespace {

// JSON crosses the boundary as text; the Python package decodes it.
std::string dump(const nlohmann::json& j) { return j.dump(); }

ExactDistribution dist(const std::vector<double>& p) {
  ExactDistribution d{p};
  d.validate();
  return d;
}

}  // namespace

PYBIND11_MODULE(_dadpo, m) {
  m.doc() = "daDPO distillation core";
  m.attr("__version__") = kVersion;

  static py::exception<Error> error(m, "DadpoError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, (std::string(to_string(e.kind())) + ": " + e.what()).c_str());
    }
  });

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> full{"dadpo"};
        full.insert(full.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const auto& a : full) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run the command-line tool in process; returns (exit_code, stdout, stderr).");

  m.def(
      "win_rate_json",
      [](std::int64_t win, std::int64_t lose, std::int64_t tie) { return dump(win_rate_from_counts(win, lose, tie).to_json()); },
      py::arg("n_win"), py::arg("n_lose"), py::arg("n_tie"));

  m.def(
      "run_suite_json",
      [](const std::string& suite, std::uint64_t seed, std::size_t instances) {
        SuiteReport r;
        {
          py::gil_scoped_release release;
          r = run_suite(suite, seed, instances);
        }
        return dump({{"suite", r.suite}, {"passed", r.passed}, {"details", r.details}});
      },
      py::arg("suite"), py::arg("seed") = 0, py::arg("instances") = 0);

  m.def(
      "optimal_policy",
      [](const std::vector<double>& ref, const std::vector<double>& teacher, const std::vector<double>& reward,
         double beta1, double beta2) { return optimal_policy(dist(ref), dist(teacher), reward, {beta1, beta2}).probs; },
      py::arg("ref"), py::arg("teacher"), py::arg("reward"), py::arg("beta1"), py::arg("beta2"));

  m.def(
      "rl_objective",
      [](const std::vector<double>& policy, const std::vector<double>& ref, const std::vector<double>& teacher,
         const std::vector<double>& reward, double beta1, double beta2) {
        return rl_objective(dist(policy), dist(ref), dist(teacher), reward, {beta1, beta2});
      },
      py::arg("policy"), py::arg("ref"), py::arg("teacher"), py::arg("reward"), py::arg("beta1"), py::arg("beta2"));

  m.def(
      "implicit_rewards",
      [](const std::vector<double>& pi_star, const std::vector<double>& ref, const std::vector<double>& teacher,
         double beta1, double beta2) {
        const auto p = dist(pi_star), r = dist(ref), t = dist(teacher);
        std::vector<double> out(p.size());
        for (std::size_t y = 0; y < p.size(); ++y) out[y] = implicit_reward(p, r, t, {beta1, beta2}, y);
        return out;
      },
      py::arg("pi_star"), py::arg("ref"), py::arg("teacher"), py::arg("beta1"), py::arg("beta2"));

  m.def("default_world_config_json", [] { return dump(WorldConfig{}.to_json()); });

  m.def(
      "distill_world_json",
      [](const std::string& world_json, const std::string& run_config_text) {
        nlohmann::json result;
        {
          py::gil_scoped_release release;
          const auto world = make_synthetic_world(WorldConfig::from_json(nlohmann::json::parse(world_json)));
          const auto cfg = RunConfig::parse(run_config_text);
          const auto run = distill(world.train_prompts, world.teacher, world.student, cfg, DecodeConfig{});
          EvalConfig ec;
          for (const auto& p : world.train_prompts) ec.training_ids.insert(p.id);
          const auto judge = make_oracle_judge(world.reward());
          const auto report = evaluate_model(run.final_policy, world.teacher, world.eval_prompts, judge, ec).report;
          result = {{"manifest", run.manifest.to_json()}, {"win_rate", report.to_json()}};
        }
        return dump(result);
      },
      py::arg("world_config_json"), py::arg("run_config_text"),
      "Build a synthetic world, distill the student and judge it against the teacher with the gold reward.");
}
