#include "dadpo/eval.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>
#include <thread>

#include <httplib.h>

namespace dadpo {

const char* to_string(JudgeVerdict v) {
  switch (v) {
    case JudgeVerdict::kWin: return "win";
    case JudgeVerdict::kLose: return "lose";
    case JudgeVerdict::kTie: return "tie";
  }
  return "?";
}

WinRateReport win_rate_from_counts(std::int64_t n_win, std::int64_t n_lose, std::int64_t n_tie) {
  require(n_win >= 0 && n_lose >= 0 && n_tie >= 0, ErrorKind::kInvalidArgument, "counts must be nonnegative");
  WinRateReport r{n_win, n_lose, n_tie, 0.0, 0};
  const std::int64_t n = r.total();
  require(n > 0, ErrorKind::kInvalidArgument, "win rate of an empty verdict list");
  const std::int64_t diff = n_win - n_lose;
  r.omega = static_cast<double>(diff) * 100.0 / static_cast<double>(n);
  const std::int64_t num = 1000 * (diff < 0 ? -diff : diff);
  const std::int64_t tenths = (2 * num + n) / (2 * n);
  r.omega_tenths = diff < 0 ? -tenths : tenths;
  return r;
}

WinRateReport win_rate(std::span<const JudgeVerdict> verdicts) {
  std::int64_t w = 0, l = 0, t = 0;
  for (auto v : verdicts) {
    if (v == JudgeVerdict::kWin) ++w;
    else if (v == JudgeVerdict::kLose) ++l;
    else ++t;
  }
  return win_rate_from_counts(w, l, t);
}

std::string WinRateReport::display() const {
  const std::int64_t a = omega_tenths < 0 ? -omega_tenths : omega_tenths;
  return std::string(omega_tenths < 0 ? "-" : "") + std::to_string(a / 10) + "." + std::to_string(a % 10) + "%";
}

nlohmann::json WinRateReport::to_json() const {
  return {{"n_win", n_win}, {"n_lose", n_lose}, {"n_tie", n_tie}, {"omega", omega},
          {"omega_display", display()}};
}

JudgeVerdict oracle_judge(const RewardFn& reward, const Prompt& x, const Response& y_student,
                          const Response& y_teacher, double tie_margin) {
  require(std::isfinite(tie_margin) && tie_margin >= 0, ErrorKind::kInvalidArgument, "tie_margin must be >= 0");
  const double rs = reward(x, y_student);
  const double rt = reward(x, y_teacher);
  require(std::isfinite(rs) && std::isfinite(rt), ErrorKind::kDomain, "judge reward is not finite");
  if (rs > rt + tie_margin) return JudgeVerdict::kWin;
  if (rt > rs + tie_margin) return JudgeVerdict::kLose;
  return JudgeVerdict::kTie;
}

HttpTransport::HttpTransport(std::string endpoint, std::string model, std::string api_key_env, int timeout_s)
    : model_(std::move(model)), timeout_s_(timeout_s) {
  static const std::regex url(R"(^(http://[^/]+)(/.*)?$)");
  std::smatch m;
  require(std::regex_match(endpoint, m, url), ErrorKind::kInvalidArgument,
          "judge endpoint must look like http://host[:port]/path, got '" + endpoint + "'");
  scheme_host_ = m[1];
  path_ = m[2].matched ? std::string(m[2]) : "/v1/chat/completions";
  if (const char* key = std::getenv(api_key_env.c_str())) api_key_ = key;
}

std::string HttpTransport::complete(const std::string& prompt) {
  httplib::Client cli(scheme_host_);
  cli.set_connection_timeout(timeout_s_);
  cli.set_read_timeout(timeout_s_);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  const nlohmann::json body = {{"model", model_},
                               {"temperature", 0},
                               {"messages", {{{"role", "user"}, {"content", prompt}}}}};
  auto res = cli.Post(path_, headers, body.dump(), "application/json");
  if (!res) fail(ErrorKind::kTransport, "judge request failed: " + httplib::to_string(res.error()));
  if (res->status != 200) fail(ErrorKind::kTransport, "judge endpoint returned HTTP " + std::to_string(res->status));
  try {
    const auto j = nlohmann::json::parse(res->body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kTransport, std::string("unexpected judge response body: ") + e.what());
  }
}

ReplayTransport::ReplayTransport(std::vector<JudgeExchange> fixture) : fixture_(std::move(fixture)) {}

ReplayTransport ReplayTransport::load(const std::string& jsonl_path) {
  std::ifstream in(jsonl_path);
  require(in.good(), ErrorKind::kIo, "cannot open judge fixture '" + jsonl_path + "'");
  std::vector<JudgeExchange> ex;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ex.push_back({j.at("request").get<std::string>(), j.value("response", ""), j.value("error", "")});
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kParse, jsonl_path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return ReplayTransport(std::move(ex));
}

std::string ReplayTransport::complete(const std::string& prompt) {
  for (const auto& e : fixture_) {
    if (e.request != prompt) continue;
    if (!e.error.empty()) fail(ErrorKind::kTransport, e.error);
    return e.response;
  }
  fail(ErrorKind::kTransport, "request not present in the judge fixture");
}

std::string RecordingTransport::complete(const std::string& prompt) {
  JudgeExchange ex{prompt, "", ""};
  try {
    ex.response = inner_->complete(prompt);
  } catch (const Error& e) {
    ex.error = e.what();
    std::lock_guard lock(mu_);
    log_.push_back(ex);
    throw;
  }
  std::lock_guard lock(mu_);
  log_.push_back(ex);
  return ex.response;
}

std::vector<JudgeExchange> RecordingTransport::exchanges() const {
  std::lock_guard lock(mu_);
  return log_;
}

void RecordingTransport::save(const std::string& jsonl_path) const {
  std::ofstream out(jsonl_path);
  require(out.good(), ErrorKind::kIo, "cannot write '" + jsonl_path + "'");
  for (const auto& e : exchanges()) {
    out << nlohmann::json{{"request", e.request}, {"response", e.response}, {"error", e.error}}.dump() << '\n';
  }
}

JudgeTemplate JudgeTemplate::load(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::kIo, "cannot open judge template '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  JudgeTemplate t{ss.str()};
  for (const char* slot : {"{question}", "{answer_a}", "{answer_b}"}) {
    require(t.text.find(slot) != std::string::npos, ErrorKind::kParse,
            "judge template '" + path + "' lacks the " + slot + " slot");
  }
  return t;
}

JudgeTemplate JudgeTemplate::builtin() { return load(std::string(DADPO_DATA_DIR) + "/judge_prompt.txt"); }

std::string JudgeTemplate::render(const std::string& question, const std::string& answer_a,
                                  const std::string& answer_b) const {
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '{') {
      bool hit = false;
      for (const auto& [slot, value] : {std::pair<std::string, const std::string*>{"{question}", &question},
                                         {"{answer_a}", &answer_a},
                                         {"{answer_b}", &answer_b}}) {
        if (text.compare(i, slot.size(), slot) == 0) {
          out += *value;
          i += slot.size();
          hit = true;
          break;
        }
      }
      if (hit) continue;
    }
    out += text[i++];
  }
  return out;
}

std::optional<char> parse_judge_choice(const std::string& reply) {
  static const std::regex tag(R"(\[\[([ABC])\]\])");
  std::optional<char> last;
  for (auto it = std::sregex_iterator(reply.begin(), reply.end(), tag); it != std::sregex_iterator(); ++it) {
    last = (*it)[1].str()[0];
  }
  return last;
}

LlmJudgement llm_judge(JudgeTransport& transport, const JudgeTemplate& tmpl, const std::string& question,
                       const std::string& student_answer, const std::string& teacher_answer) {
  LlmJudgement out;
  // Student-side verdict for each ordering.
  std::optional<JudgeVerdict> votes[2];
  for (int order = 0; order < 2; ++order) {
    const bool student_first = order == 0;
    const std::string prompt = student_first ? tmpl.render(question, student_answer, teacher_answer)
                                             : tmpl.render(question, teacher_answer, student_answer);
    JudgeExchange ex{prompt, "", ""};
    try {
      ex.response = transport.complete(prompt);
    } catch (const Error& e) {
      ex.error = e.what();
      out.exchanges.push_back(ex);
      out.error = std::string("transport: ") + e.what();
      return out;
    }
    out.exchanges.push_back(ex);
    const auto choice = parse_judge_choice(ex.response);
    if (!choice) {
      out.error = "unparseable verdict";
      return out;
    }
    if (*choice == 'C') {
      votes[order] = JudgeVerdict::kTie;
    } else {
      const bool student_won = (*choice == 'A') == student_first;
      votes[order] = student_won ? JudgeVerdict::kWin : JudgeVerdict::kLose;
    }
  }
  out.verdict = votes[0] == votes[1] ? *votes[0] : JudgeVerdict::kTie;
  return out;
}

Judge make_oracle_judge(RewardFn reward, double tie_margin) {
  return [reward = std::move(reward), tie_margin](const Prompt& x, const Response& ys, const Response& yt) {
    return Judgement{oracle_judge(reward, x, ys, yt, tie_margin), ""};
  };
}

Judge make_llm_judge(std::shared_ptr<JudgeTransport> transport, JudgeTemplate tmpl,
                     std::shared_ptr<const Vocab> vocab) {
  return [transport, tmpl = std::move(tmpl), vocab](const Prompt& x, const Response& ys, const Response& yt) {
    const auto r = llm_judge(*transport, tmpl, vocab->render(x.tokens), vocab->render(ys.tokens),
                             vocab->render(yt.tokens));
    return Judgement{r.verdict, r.error};
  };
}

EvalResult evaluate_model(const Policy& policy, const Policy& teacher, const std::vector<Prompt>& prompts,
                          const Judge& judge, const EvalConfig& cfg) {
  require(!prompts.empty(), ErrorKind::kInvalidArgument, "no evaluation prompts");
  require(cfg.max_in_flight > 0, ErrorKind::kInvalidArgument, "max_in_flight must be > 0");
  cfg.decode.validate();
  for (const auto& p : prompts) {
    require(!cfg.training_ids.contains(p.id), ErrorKind::kInvalidArgument,
            "evaluation prompt '" + p.id + "' is also a training prompt");
  }

  EvalResult out;
  out.records.resize(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    auto& r = out.records[i];
    r.prompt_id = prompts[i].id;
    r.student = policy.sample(prompts[i], cfg.decode);
    r.teacher = teacher.sample(prompts[i], cfg.decode);
  }

  auto judge_one = [&](std::size_t i) {
    auto& r = out.records[i];
    try {
      const auto j = judge(prompts[i], r.student, r.teacher);
      r.verdict = j.verdict;
      r.error = j.error;
    } catch (const Error& e) {
      r.verdict.reset();
      r.error = e.what();
    }
  };
  if (cfg.max_in_flight == 1) {
    for (std::size_t i = 0; i < prompts.size(); ++i) judge_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    const std::size_t n_workers = std::min(cfg.max_in_flight, prompts.size());
    for (std::size_t w = 0; w < n_workers; ++w) {
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < prompts.size(); i = next++) judge_one(i);
      });
    }
    for (auto& t : workers) t.join();
  }

  std::vector<JudgeVerdict> verdicts;
  for (const auto& r : out.records) {
    if (r.verdict) {
      verdicts.push_back(*r.verdict);
    } else {
      ++out.n_errors;
    }
  }
  require(!verdicts.empty(), ErrorKind::kDomain,
          "every judgement failed (" + std::to_string(out.n_errors) + " errors)");
  out.report = win_rate(verdicts);
  return out;
}

nlohmann::json EvalResult::summary_json() const {
  auto j = report.to_json();
  j["n_prompts"] = records.size();
  j["n_errors"] = n_errors;
  return j;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

}  // namespace

void EvalResult::write_csv(const std::string& path, const Vocab& vocab) const {
  std::ofstream out(path);
  require(out.good(), ErrorKind::kIo, "cannot write '" + path + "'");
  out << "prompt_id,student,teacher,verdict,error\n";
  for (const auto& r : records) {
    out << csv_field(r.prompt_id) << ',' << csv_field(vocab.render(r.student.tokens)) << ','
        << csv_field(vocab.render(r.teacher.tokens)) << ',' << (r.verdict ? to_string(*r.verdict) : "error") << ','
        << csv_field(r.error) << '\n';
  }
}

}  // namespace dadpo
