#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dadpo/cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dadpo");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = dadpo::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "dadpo_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

const std::vector<std::string> kSmall{"--n-train", "40", "--n-eval", "20", "--sft-epochs", "3", "--epochs", "5"};

std::vector<std::string> train_args(const std::string& out, std::vector<std::string> extra) {
  std::vector<std::string> a{"train", "--out", out};
  a.insert(a.end(), kSmall.begin(), kSmall.end());
  a.insert(a.end(), extra.begin(), extra.end());
  return a;
}

}  // namespace

TEST_CASE("verify theorem1") {
  const auto r = cli({"verify", "--suite", "theorem1", "--instances", "20"});
  CHECK(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j.at("passed") == true);
  CHECK(j.at("details").at("max_objective_gap").get<double>() < 1e-8);
}

TEST_CASE("verify writes its report with --out") {
  const auto dir = scratch("verify");
  const auto r = cli({"verify", "--suite", "winrate", "--out", dir});
  CHECK(r.code == 0);
  CHECK(fs::exists(dir + "/verify_winrate.json"));
  CHECK(fs::exists(dir + "/manifest.json"));
}

TEST_CASE("usage errors") {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {"train", "--method", "dadpo"},
           {"verify"},
           {"verify", "--suite", "nope"},
           {"train", "--out", "x", "--method", "kto"},
           {"train", "--out", "x", "--method", "dadpo", "--beta1", "0", "--beta2", "0"},
           {"train", "--out", "x", "--method", "dadpo", "--bogus"},
           {}}) {
    const auto r = cli(args);
    CHECK(r.code == 2);
    CHECK(r.out.find("Usage") != std::string::npos);
    const auto e = json::parse(lines(r.err).back());
    CHECK(e.at("error").at("kind") == "usage_error");
  }
}

TEST_CASE("dadpo with beta2 = 0 matches ddpo") {
  const auto a = scratch("red_dadpo"), b = scratch("red_ddpo");
  const auto ra = cli(train_args(a, {"--method", "dadpo", "--beta1", "0.1", "--beta2", "0", "--seed", "4"}));
  const auto rb = cli(train_args(b, {"--method", "ddpo", "--beta", "0.1", "--seed", "4"}));
  REQUIRE(ra.code == 0);
  REQUIRE(rb.code == 0);
  CHECK(json::parse(ra.out).at("final_hash") == json::parse(rb.out).at("final_hash"));
  CHECK(slurp(a + "/ckpt_final.json") == slurp(b + "/ckpt_final.json"));
  for (const auto* f : {"manifest.json", "eval.csv", "ckpt_dsft.json"}) CHECK(fs::exists(a + "/" + f));
  const auto m = json::parse(slurp(a + "/manifest.json"));
  CHECK(m.at("config").at("seed") == 4);
  CHECK(m.contains("provenance"));
  CHECK(m.contains("dataset_hashes"));
}

TEST_CASE("report") {
  const auto dir = scratch("report");
  REQUIRE(cli(train_args(dir + "/run", {"--method", "dadpo"})).code == 0);

  SUBCASE("single manifest") {
    const auto r = cli({"report", dir + "/run/manifest.json", "--out", dir + "/one.csv"});
    CHECK(r.code == 0);
    const auto ls = lines(slurp(dir + "/one.csv"));
    REQUIRE(ls.size() == 2);
    CHECK(ls[0] ==
          "method,beta,beta1,beta2,kl_weight,seed,final_loss,omega,n_win,n_lose,n_tie,n_errors,wall_time_s,final_hash");
    CHECK(split(ls[1]).size() == 14);
    CHECK(split(ls[1])[0] == "dadpo");
  }
  SUBCASE("missing manifest") {
    const auto r = cli({"report", dir + "/nope/manifest.json", "--out", dir + "/x.csv"});
    CHECK(r.code == 1);
    CHECK(json::parse(lines(r.err).back()).at("error").at("kind") == "io_error");
  }
}

TEST_CASE("beta2 sweep report") {
  const auto dir = scratch("sweep");
  std::ofstream(dir + "/grid.txt") << "beta1_grid = 0.1\nbeta2_grid = 1, 0.1, 0, 0.01, 0.001\n";
  const auto r = cli(train_args(dir + "/out", {"--method", "dadpo", "--sweep", dir + "/grid.txt"}));
  REQUIRE(r.code == 0);
  const auto csv = slurp(dir + "/out/report.csv");
  const auto ls = lines(csv);
  REQUIRE(ls.size() == 6);
  std::vector<double> b2;
  for (std::size_t i = 1; i < ls.size(); ++i) b2.push_back(std::stod(split(ls[i])[3]));
  CHECK(b2 == std::vector<double>{0.0, 0.001, 0.01, 0.1, 1.0});

  std::vector<std::string> manifests;
  for (const auto& e : fs::directory_iterator(dir + "/out/cells")) manifests.push_back(e.path().string() + "/manifest.json");
  std::vector<std::string> args{"report"};
  args.insert(args.end(), manifests.begin(), manifests.end());
  args.insert(args.end(), {"--out", dir + "/again.csv"});
  REQUIRE(cli(args).code == 0);
  CHECK(slurp(dir + "/again.csv") == csv);
  std::reverse(manifests.begin() + 1, manifests.end());
  args = {"report"};
  args.insert(args.end(), manifests.begin(), manifests.end());
  args.insert(args.end(), {"--out", dir + "/third.csv"});
  REQUIRE(cli(args).code == 0);
  CHECK(slurp(dir + "/third.csv") == csv);
}

TEST_CASE("gen-data and eval") {
  const auto dir = scratch("gen");
  const auto g = cli({"gen-data", "--out", dir, "--n-train", "30", "--n-eval", "10", "--seed", "2"});
  REQUIRE(g.code == 0);
  for (const auto* f : {"world.json", "train_prompts.jsonl", "eval_prompts.jsonl", "sft.jsonl", "triplets.jsonl",
                        "teacher.json", "student.json", "manifest.json"})
    CHECK(fs::exists(dir + "/" + f));
  CHECK(lines(slurp(dir + "/sft.jsonl")).size() == 30);

  const auto self = cli({"eval", "--world", dir + "/world.json", "--checkpoint", "teacher", "--out", dir + "/ev_t"});
  REQUIRE(self.code == 0);
  CHECK(json::parse(self.out).at("omega") == 0.0);
  const auto st = cli({"eval", "--world", dir + "/world.json", "--checkpoint", dir + "/student.json", "--out",
                       dir + "/ev_s"});
  REQUIRE(st.code == 0);
  CHECK(lines(slurp(dir + "/ev_s/eval.csv")).size() == 11);

  const auto bad = cli({"eval", "--world", dir + "/world.json", "--checkpoint", dir + "/missing.json", "--out",
                        dir + "/ev_x"});
  CHECK(bad.code == 1);
  CHECK(json::parse(lines(bad.err).back()).contains("error"));
}

TEST_CASE("replayed judge fixture") {
  const auto dir = scratch("judge");
  std::ofstream(dir + "/empty.jsonl") << "";
  const auto r = cli({"eval", "--n-train", "20", "--n-eval", "4", "--checkpoint", "student", "--out", dir + "/o",
                      "--judge", "http", "--judge-fixture", dir + "/empty.jsonl"});
  // Every request is unrecorded, so every judgement fails.
  CHECK(r.code == 1);
  CHECK(json::parse(lines(r.err).back()).at("error").at("kind") == "domain_error");
  const auto u = cli({"eval", "--checkpoint", "student", "--out", dir + "/p", "--judge", "http"});
  CHECK(u.code == 2);
}
