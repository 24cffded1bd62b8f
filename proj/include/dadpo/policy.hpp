#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "dadpo/types.hpp"

namespace dadpo {

/// Finite, duplicate-free set of candidate responses for one context.
class ResponseSpace {
 public:
  explicit ResponseSpace(std::vector<Response> responses);

  std::size_t size() const { return responses_.size(); }
  const Response& operator[](std::size_t i) const { return responses_[i]; }
  const std::vector<Response>& responses() const { return responses_; }
  std::optional<std::size_t> index_of(std::span<const TokenId> tokens) const;
  std::size_t max_length() const { return max_length_; }

 private:
  std::vector<Response> responses_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t max_length_ = 0;
};

inline constexpr std::size_t kDefaultSpaceCap = 100000;

/// Every EOS-terminated sequence of length <= max_len, in lexicographic id order.
ResponseSpace enumerate_responses(const Vocab& vocab, std::size_t max_len,
                                  std::size_t cap = kDefaultSpaceCap);

enum class DecodeMode { kGreedy, kTemperature };

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kGreedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::size_t max_len = 4;

  void validate() const;
};

/// How a tabular policy maps a prompt onto a table row.
struct ContextKeying {
  enum class Mode { kPromptId, kPromptPrefix };
  Mode mode = Mode::kPromptId;
  std::size_t width = 1;  // prefix width for kPromptPrefix

  std::string key(const Prompt& prompt) const;
};

/// Sentence-level logit table: one softmax row per context over that
/// context's response space.
class TabularPolicy {
 public:
  struct Row {
    std::shared_ptr<const ResponseSpace> space;
    std::size_t offset = 0;
  };

  TabularPolicy(std::shared_ptr<const Vocab> vocab, ContextKeying keying = {});

  void add_context(const std::string& key, std::shared_ptr<const ResponseSpace> space,
                   std::span<const double> logits);

  const Vocab& vocab() const { return *vocab_; }
  std::shared_ptr<const Vocab> vocab_ptr() const { return vocab_; }
  const ContextKeying& keying() const { return keying_; }
  const std::map<std::string, Row>& rows() const { return rows_; }
  const Row& row(const Prompt& prompt) const;
  bool has_row(const Prompt& prompt) const;

  std::span<const double> params() const { return params_; }
  std::span<double> params() { return params_; }

  /// Normalized sentence probabilities of the prompt's row.
  std::vector<double> row_probs(const Prompt& prompt) const;
  std::vector<double> row_logprobs(const Prompt& prompt) const;
  std::size_t response_index(const Prompt& prompt, const Response& y) const;

  double sentence_logprob(const Prompt& x, const Response& y) const;
  void accumulate_sentence_grad(const Prompt& x, const Response& y, double scale, std::span<double> grad) const;
  std::vector<double> raw_token_probs(const Prompt& x, std::span<const TokenId> prefix) const;
  void accumulate_raw_prob_vjp(const Prompt& x, std::span<const TokenId> prefix,
                               std::span<const double> upstream, double scale, std::span<double> grad) const;
  Response sample(const Prompt& x, const DecodeConfig& cfg) const;

 private:
  std::shared_ptr<const Vocab> vocab_;
  ContextKeying keying_;
  std::map<std::string, Row> rows_;
  std::vector<double> params_;
};

/// Tiny autoregressive model. The context summary is
/// h = tanh(A * mean(E[x]) + B * sum_k decay^(n-1-k) E[y_k] + b) and the
/// next-token logits are W h + c. The final position (prefix length
/// max_len - 1) always emits EOS.
class TokenModel {
 public:
  TokenModel(std::shared_ptr<const Vocab> vocab, std::size_t dim, std::size_t max_len, double decay = 0.5);

  static TokenModel random(std::shared_ptr<const Vocab> vocab, std::size_t dim, std::size_t max_len,
                           std::uint64_t seed, double scale = 0.5);

  const Vocab& vocab() const { return *vocab_; }
  std::shared_ptr<const Vocab> vocab_ptr() const { return vocab_; }
  std::size_t dim() const { return dim_; }
  std::size_t max_len() const { return max_len_; }
  double decay() const { return decay_; }

  std::span<const double> params() const { return params_; }
  std::span<double> params() { return params_; }

  double sentence_logprob(const Prompt& x, const Response& y) const;
  void accumulate_sentence_grad(const Prompt& x, const Response& y, double scale, std::span<double> grad) const;
  std::vector<double> raw_token_probs(const Prompt& x, std::span<const TokenId> prefix) const;
  void accumulate_raw_prob_vjp(const Prompt& x, std::span<const TokenId> prefix,
                               std::span<const double> upstream, double scale, std::span<double> grad) const;
  Response sample(const Prompt& x, const DecodeConfig& cfg) const;

 private:
  struct Forward {
    std::vector<double> summary;  // mean prompt embedding
    std::vector<double> history;  // decayed prefix embedding sum
    std::vector<double> hidden;
    std::vector<double> logits;
  };

  bool forced_eos(std::size_t prefix_len) const { return prefix_len + 1 >= max_len_; }
  Forward forward(const Prompt& x, std::span<const TokenId> prefix) const;
  void backward(const Prompt& x, std::span<const TokenId> prefix, const Forward& f,
                std::span<const double> dlogits, double scale, std::span<double> grad) const;

  std::size_t off_embed() const { return 0; }
  std::size_t off_a() const { return vocab_size_ * dim_; }
  std::size_t off_b() const { return off_a() + dim_ * dim_; }
  std::size_t off_bias() const { return off_b() + dim_ * dim_; }
  std::size_t off_out() const { return off_bias() + dim_; }
  std::size_t off_out_bias() const { return off_out() + vocab_size_ * dim_; }

  std::shared_ptr<const Vocab> vocab_;
  std::size_t vocab_size_;
  std::size_t dim_;
  std::size_t max_len_;
  double decay_;
  std::vector<double> params_;
};

enum class Backend { kTabular, kTokenModel };

/// Value-semantic conditional sequence distribution over one of the two backends.
/// Copying a Policy copies its parameters.
class Policy {
 public:
  Policy(TabularPolicy p) : impl_(std::move(p)) {}
  Policy(TokenModel p) : impl_(std::move(p)) {}

  Backend backend() const;
  const Vocab& vocab() const;
  std::shared_ptr<const Vocab> vocab_ptr() const;

  std::span<const double> params() const;
  std::span<double> params();
  std::size_t num_params() const { return params().size(); }
  /// Hash of backend tag, vocab hash and raw parameter bits.
  std::string param_hash() const;

  const TabularPolicy* as_tabular() const { return std::get_if<TabularPolicy>(&impl_); }
  const TokenModel* as_token_model() const { return std::get_if<TokenModel>(&impl_); }

  /// sum_n log pi(y_n | y_<n, x), each token probability floored at kProbFloor.
  double sentence_logprob(const Prompt& x, const Response& y) const;
  /// grad += scale * d/dtheta sentence_logprob(x, y).
  void accumulate_sentence_logprob_grad(const Prompt& x, const Response& y, double scale,
                                        std::span<double> grad) const;

  /// Next-token distribution, floored at kProbFloor and renormalized.
  std::vector<double> token_distribution(const Prompt& x, std::span<const TokenId> prefix) const;
  /// grad += scale * J^T upstream, J the Jacobian of token_distribution w.r.t. parameters.
  void accumulate_token_distribution_vjp(const Prompt& x, std::span<const TokenId> prefix,
                                         std::span<const double> upstream, double scale,
                                         std::span<double> grad) const;

  Response sample(const Prompt& x, const DecodeConfig& cfg) const;

  nlohmann::json to_json() const;
  static Policy from_json(const nlohmann::json& j, std::shared_ptr<const Vocab> vocab);

 private:
  std::variant<TabularPolicy, TokenModel> impl_;
};

void save_checkpoint(const Policy& policy, const std::string& path);
/// Rejects checkpoints whose vocab hash differs from `vocab`.
Policy load_checkpoint(const std::string& path, std::shared_ptr<const Vocab> vocab);

nlohmann::json vocab_to_json(const Vocab& vocab);
Vocab vocab_from_json(const nlohmann::json& j);

}  // namespace dadpo
