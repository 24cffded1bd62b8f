#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dadpo/policy.hpp"
#include "dadpo/theory.hpp"

namespace dadpo {

/// Outcome for the student against the teacher reference response.
enum class JudgeVerdict { kWin, kLose, kTie };

const char* to_string(JudgeVerdict v);

struct WinRateReport {
  std::int64_t n_win = 0;
  std::int64_t n_lose = 0;
  std::int64_t n_tie = 0;
  double omega = 0.0;              // (n_win - n_lose) / total * 100, unrounded
  std::int64_t omega_tenths = 0;   // omega in tenths of a percent, rounded half away from zero

  std::int64_t total() const { return n_win + n_lose + n_tie; }
  /// "-31.0%" style display value.
  std::string display() const;
  nlohmann::json to_json() const;
};

WinRateReport win_rate(std::span<const JudgeVerdict> verdicts);
WinRateReport win_rate_from_counts(std::int64_t n_win, std::int64_t n_lose, std::int64_t n_tie);

/// Win if r(student) > r(teacher) + margin, Lose if r(teacher) > r(student) + margin, else Tie.
JudgeVerdict oracle_judge(const RewardFn& reward, const Prompt& x, const Response& y_student,
                          const Response& y_teacher, double tie_margin = 0.0);

// External LLM judge.

struct JudgeExchange {
  std::string request;
  std::string response;
  std::string error;
};

/// Single-turn completion: prompt text in, model text out. Throws kTransport.
class JudgeTransport {
 public:
  virtual ~JudgeTransport() = default;
  virtual std::string complete(const std::string& prompt) = 0;
};

/// OpenAI-style chat-completions endpoint over plain HTTP, e.g.
/// http://localhost:8000/v1/chat/completions. The bearer token is read from
/// the environment variable named by `api_key_env` when it is set.
class HttpTransport : public JudgeTransport {
 public:
  HttpTransport(std::string endpoint, std::string model, std::string api_key_env = "JUDGE_API_KEY",
                int timeout_s = 60);
  std::string complete(const std::string& prompt) override;

 private:
  std::string scheme_host_;
  std::string path_;
  std::string model_;
  std::string api_key_;
  int timeout_s_;
};

class MockTransport : public JudgeTransport {
 public:
  explicit MockTransport(std::function<std::string(const std::string&)> reply) : reply_(std::move(reply)) {}
  std::string complete(const std::string& prompt) override { return reply_(prompt); }

 private:
  std::function<std::string(const std::string&)> reply_;
};

/// Serves recorded exchanges; a request that was not recorded is a transport error.
class ReplayTransport : public JudgeTransport {
 public:
  explicit ReplayTransport(std::vector<JudgeExchange> fixture);
  static ReplayTransport load(const std::string& jsonl_path);
  std::string complete(const std::string& prompt) override;

 private:
  std::vector<JudgeExchange> fixture_;
};

/// Thread-safe log of every exchange passing through an inner transport.
class RecordingTransport : public JudgeTransport {
 public:
  explicit RecordingTransport(std::shared_ptr<JudgeTransport> inner) : inner_(std::move(inner)) {}
  std::string complete(const std::string& prompt) override;
  std::vector<JudgeExchange> exchanges() const;
  void save(const std::string& jsonl_path) const;

 private:
  std::shared_ptr<JudgeTransport> inner_;
  mutable std::mutex mu_;
  std::vector<JudgeExchange> log_;
};

/// Judge prompt with {question}, {answer_a} and {answer_b} slots.
struct JudgeTemplate {
  std::string text;

  static JudgeTemplate load(const std::string& path);
  /// data/judge_prompt.txt from the source tree.
  static JudgeTemplate builtin();
  std::string render(const std::string& question, const std::string& answer_a, const std::string& answer_b) const;
};

/// 'A', 'B' or 'C' (tie) from the last [[X]] tag in a judge reply.
std::optional<char> parse_judge_choice(const std::string& reply);

struct LlmJudgement {
  std::optional<JudgeVerdict> verdict;  // empty on error
  std::string error;
  std::vector<JudgeExchange> exchanges;
};

/// Queries both orderings (student as A, then as B); disagreement is a Tie.
LlmJudgement llm_judge(JudgeTransport& transport, const JudgeTemplate& tmpl, const std::string& question,
                       const std::string& student_answer, const std::string& teacher_answer);

// Held-out scoring.

struct Judgement {
  std::optional<JudgeVerdict> verdict;
  std::string error;
};

using Judge = std::function<Judgement(const Prompt&, const Response& student, const Response& teacher)>;

Judge make_oracle_judge(RewardFn reward, double tie_margin = 0.0);
Judge make_llm_judge(std::shared_ptr<JudgeTransport> transport, JudgeTemplate tmpl,
                     std::shared_ptr<const Vocab> vocab);

struct EvalConfig {
  DecodeConfig decode;                   // greedy by default
  std::set<std::string> training_ids;    // must not intersect the evaluation prompts
  std::size_t max_in_flight = 1;         // concurrent judge calls
};

struct EvalRecord {
  std::string prompt_id;
  Response student;
  Response teacher;
  std::optional<JudgeVerdict> verdict;
  std::string error;
};

struct EvalResult {
  WinRateReport report;
  std::vector<EvalRecord> records;
  std::size_t n_errors = 0;

  nlohmann::json summary_json() const;
  void write_csv(const std::string& path, const Vocab& vocab) const;
};

/// Decodes both policies on `prompts`, judges every pair and aggregates the
/// verdicts. Judge errors are excluded from the counts and reported.
EvalResult evaluate_model(const Policy& policy, const Policy& teacher, const std::vector<Prompt>& prompts,
                          const Judge& judge, const EvalConfig& cfg);

}  // namespace dadpo
