#include <algorithm>
#include <cmath>

#include "dadpo/policy.hpp"
#include "detail.hpp"

namespace dadpo {

namespace {

bool extends(const Response& y, std::span<const TokenId> prefix) {
  return y.tokens.size() > prefix.size() && std::equal(prefix.begin(), prefix.end(), y.tokens.begin());
}

}  // namespace

TabularPolicy::TabularPolicy(std::shared_ptr<const Vocab> vocab, ContextKeying keying)
    : vocab_(std::move(vocab)), keying_(keying) {
  require(vocab_ != nullptr, ErrorKind::kInvalidArgument, "tabular policy needs a vocabulary");
}

void TabularPolicy::add_context(const std::string& key, std::shared_ptr<const ResponseSpace> space,
                                std::span<const double> logits) {
  require(space != nullptr, ErrorKind::kInvalidArgument, "null response space");
  require(logits.size() == space->size(), ErrorKind::kInvalidArgument,
          "logit row size does not match response space for context '" + key + "'");
  require(!rows_.contains(key), ErrorKind::kInvalidArgument, "duplicate context '" + key + "'");
  for (const auto& y : space->responses()) validate_response(y, *vocab_);
  for (double l : logits) require(std::isfinite(l), ErrorKind::kNumeric, "non-finite logit");
  rows_.emplace(key, Row{std::move(space), params_.size()});
  params_.insert(params_.end(), logits.begin(), logits.end());
}

bool TabularPolicy::has_row(const Prompt& prompt) const { return rows_.contains(keying_.key(prompt)); }

const TabularPolicy::Row& TabularPolicy::row(const Prompt& prompt) const {
  const auto it = rows_.find(keying_.key(prompt));
  require(it != rows_.end(), ErrorKind::kDomain, "no table row for prompt '" + prompt.id + "'");
  return it->second;
}

std::vector<double> TabularPolicy::row_logprobs(const Prompt& prompt) const {
  const Row& r = row(prompt);
  const std::span<const double> logits(params_.data() + r.offset, r.space->size());
  const double lse = log_sum_exp(logits);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

std::vector<double> TabularPolicy::row_probs(const Prompt& prompt) const {
  const Row& r = row(prompt);
  return detail::softmax(std::span<const double>(params_.data() + r.offset, r.space->size()));
}

std::size_t TabularPolicy::response_index(const Prompt& prompt, const Response& y) const {
  const auto idx = row(prompt).space->index_of(y.tokens);
  require(idx.has_value(), ErrorKind::kDomain,
          "response '" + vocab_->render(y.tokens) + "' is outside the response space of prompt '" + prompt.id + "'");
  return *idx;
}

double TabularPolicy::sentence_logprob(const Prompt& x, const Response& y) const {
  const double lp = row_logprobs(x)[response_index(x, y)];
  return std::max(lp, kLogProbFloor);
}

void TabularPolicy::accumulate_sentence_grad(const Prompt& x, const Response& y, double scale,
                                             std::span<double> grad) const {
  const std::size_t k = response_index(x, y);
  const auto lps = row_logprobs(x);
  if (lps[k] < kLogProbFloor) return;
  const std::size_t off = row(x).offset;
  for (std::size_t i = 0; i < lps.size(); ++i) {
    grad[off + i] += scale * ((i == k ? 1.0 : 0.0) - std::exp(lps[i]));
  }
}

std::vector<double> TabularPolicy::raw_token_probs(const Prompt& x, std::span<const TokenId> prefix) const {
  const Row& r = row(x);
  const auto probs = row_probs(x);
  std::vector<double> next(vocab_->size(), 0.0);
  double mass = 0.0;
  for (std::size_t i = 0; i < r.space->size(); ++i) {
    const Response& y = (*r.space)[i];
    if (!extends(y, prefix)) continue;
    next[static_cast<std::size_t>(y.tokens[prefix.size()])] += probs[i];
    mass += probs[i];
  }
  require(mass > 0.0, ErrorKind::kDomain, "prefix has no support in the response space of prompt '" + x.id + "'");
  for (double& p : next) p /= mass;
  return next;
}

void TabularPolicy::accumulate_raw_prob_vjp(const Prompt& x, std::span<const TokenId> prefix,
                                            std::span<const double> upstream, double scale,
                                            std::span<double> grad) const {
  // p_t = M(prefix+t) / M(prefix) with M the row mass of extending responses:
  // d(sum_t g_t p_t)/dlogit_k = 1[k extends prefix] * pi_k / M * (g_{t_k} - <g, p>).
  const Row& r = row(x);
  const auto probs = row_probs(x);
  const auto p = raw_token_probs(x, prefix);
  double gp = 0.0;
  for (std::size_t t = 0; t < p.size(); ++t) gp += upstream[t] * p[t];
  double mass = 0.0;
  for (std::size_t i = 0; i < r.space->size(); ++i) {
    if (extends((*r.space)[i], prefix)) mass += probs[i];
  }
  for (std::size_t i = 0; i < r.space->size(); ++i) {
    const Response& y = (*r.space)[i];
    if (!extends(y, prefix)) continue;
    const double g_t = upstream[static_cast<std::size_t>(y.tokens[prefix.size()])];
    grad[r.offset + i] += scale * probs[i] / mass * (g_t - gp);
  }
}

Response TabularPolicy::sample(const Prompt& x, const DecodeConfig& cfg) const {
  cfg.validate();
  const Row& r = row(x);
  std::size_t pick = 0;
  if (cfg.mode == DecodeMode::kGreedy) {
    pick = detail::argmax(std::span<const double>(params_.data() + r.offset, r.space->size()));
  } else {
    auto rng = detail::prompt_rng(cfg.seed, x);
    const auto weights = detail::tempered(row_logprobs(x), cfg.temperature);
    pick = detail::draw_index(weights, rng);
  }
  Response out = (*r.space)[pick];
  if (out.tokens.size() > cfg.max_len) {
    out.tokens.resize(cfg.max_len);
    out.tokens.back() = vocab_->eos();
    out.truncated = true;
  }
  return out;
}

}  // namespace dadpo
