#include <cmath>

#include "dadpo/policy.hpp"
#include "detail.hpp"

namespace dadpo {

TokenModel::TokenModel(std::shared_ptr<const Vocab> vocab, std::size_t dim, std::size_t max_len, double decay)
    : vocab_(std::move(vocab)), dim_(dim), max_len_(max_len), decay_(decay) {
  require(vocab_ != nullptr, ErrorKind::kInvalidArgument, "token model needs a vocabulary");
  require(dim_ >= 1, ErrorKind::kInvalidArgument, "token model dim must be >= 1");
  require(max_len_ >= 1, ErrorKind::kInvalidArgument, "token model max_len must be >= 1");
  require(std::isfinite(decay_) && decay_ >= 0.0, ErrorKind::kInvalidArgument, "decay must be finite and >= 0");
  vocab_size_ = vocab_->size();
  params_.assign(off_out_bias() + vocab_size_, 0.0);
}

TokenModel TokenModel::random(std::shared_ptr<const Vocab> vocab, std::size_t dim, std::size_t max_len,
                              std::uint64_t seed, double scale) {
  TokenModel m(std::move(vocab), dim, max_len);
  std::mt19937_64 rng(mix_seed(seed, 0x746f6b656eULL));
  for (double& p : m.params_) p = detail::uniform(rng, -scale, scale);
  return m;
}

TokenModel::Forward TokenModel::forward(const Prompt& x, std::span<const TokenId> prefix) const {
  const double* E = params_.data() + off_embed();
  const double* A = params_.data() + off_a();
  const double* B = params_.data() + off_b();
  const double* b = params_.data() + off_bias();
  const double* W = params_.data() + off_out();
  const double* c = params_.data() + off_out_bias();

  Forward f;
  f.summary.assign(dim_, 0.0);
  for (TokenId t : x.tokens) {
    for (std::size_t j = 0; j < dim_; ++j) f.summary[j] += E[static_cast<std::size_t>(t) * dim_ + j];
  }
  for (double& s : f.summary) s /= static_cast<double>(x.tokens.size());

  f.history.assign(dim_, 0.0);
  for (TokenId t : prefix) {
    for (std::size_t j = 0; j < dim_; ++j) {
      f.history[j] = decay_ * f.history[j] + E[static_cast<std::size_t>(t) * dim_ + j];
    }
  }

  f.hidden.assign(dim_, 0.0);
  for (std::size_t i = 0; i < dim_; ++i) {
    double pre = b[i];
    for (std::size_t j = 0; j < dim_; ++j) pre += A[i * dim_ + j] * f.summary[j] + B[i * dim_ + j] * f.history[j];
    f.hidden[i] = std::tanh(pre);
  }

  f.logits.assign(vocab_size_, 0.0);
  for (std::size_t v = 0; v < vocab_size_; ++v) {
    double z = c[v];
    for (std::size_t j = 0; j < dim_; ++j) z += W[v * dim_ + j] * f.hidden[j];
    f.logits[v] = z;
  }
  return f;
}

void TokenModel::backward(const Prompt& x, std::span<const TokenId> prefix, const Forward& f,
                          std::span<const double> dlogits, double scale, std::span<double> grad) const {
  const double* A = params_.data() + off_a();
  const double* B = params_.data() + off_b();
  const double* W = params_.data() + off_out();

  std::vector<double> dhidden(dim_, 0.0);
  for (std::size_t v = 0; v < vocab_size_; ++v) {
    const double dz = scale * dlogits[v];
    if (dz == 0.0) continue;
    grad[off_out_bias() + v] += dz;
    for (std::size_t j = 0; j < dim_; ++j) {
      grad[off_out() + v * dim_ + j] += dz * f.hidden[j];
      dhidden[j] += dz * W[v * dim_ + j];
    }
  }

  std::vector<double> dpre(dim_);
  for (std::size_t i = 0; i < dim_; ++i) dpre[i] = dhidden[i] * (1.0 - f.hidden[i] * f.hidden[i]);

  std::vector<double> dsummary(dim_, 0.0), dhistory(dim_, 0.0);
  for (std::size_t i = 0; i < dim_; ++i) {
    grad[off_bias() + i] += dpre[i];
    for (std::size_t j = 0; j < dim_; ++j) {
      grad[off_a() + i * dim_ + j] += dpre[i] * f.summary[j];
      grad[off_b() + i * dim_ + j] += dpre[i] * f.history[j];
      dsummary[j] += A[i * dim_ + j] * dpre[i];
      dhistory[j] += B[i * dim_ + j] * dpre[i];
    }
  }

  const double inv_len = 1.0 / static_cast<double>(x.tokens.size());
  for (TokenId t : x.tokens) {
    for (std::size_t j = 0; j < dim_; ++j) grad[off_embed() + static_cast<std::size_t>(t) * dim_ + j] += dsummary[j] * inv_len;
  }
  double weight = 1.0;
  for (std::size_t k = prefix.size(); k-- > 0;) {
    const auto t = static_cast<std::size_t>(prefix[k]);
    for (std::size_t j = 0; j < dim_; ++j) grad[off_embed() + t * dim_ + j] += weight * dhistory[j];
    weight *= decay_;
  }
}

std::vector<double> TokenModel::raw_token_probs(const Prompt& x, std::span<const TokenId> prefix) const {
  require(prefix.size() < max_len_, ErrorKind::kInvalidArgument, "prefix longer than max_len - 1");
  if (forced_eos(prefix.size())) {
    std::vector<double> p(vocab_size_, 0.0);
    p[static_cast<std::size_t>(vocab_->eos())] = 1.0;
    return p;
  }
  return detail::softmax(forward(x, prefix).logits);
}

void TokenModel::accumulate_raw_prob_vjp(const Prompt& x, std::span<const TokenId> prefix,
                                         std::span<const double> upstream, double scale,
                                         std::span<double> grad) const {
  require(prefix.size() < max_len_, ErrorKind::kInvalidArgument, "prefix longer than max_len - 1");
  if (forced_eos(prefix.size())) return;
  const Forward f = forward(x, prefix);
  const auto p = detail::softmax(f.logits);
  double gp = 0.0;
  for (std::size_t t = 0; t < p.size(); ++t) gp += upstream[t] * p[t];
  std::vector<double> dz(p.size());
  for (std::size_t t = 0; t < p.size(); ++t) dz[t] = p[t] * (upstream[t] - gp);
  backward(x, prefix, f, dz, scale, grad);
}

double TokenModel::sentence_logprob(const Prompt& x, const Response& y) const {
  require(y.tokens.size() <= max_len_, ErrorKind::kInvalidArgument, "response longer than token model max_len");
  double total = 0.0;
  const std::span<const TokenId> ys(y.tokens);
  for (std::size_t n = 0; n < ys.size(); ++n) {
    if (forced_eos(n)) {
      total += ys[n] == vocab_->eos() ? 0.0 : kLogProbFloor;
      continue;
    }
    const auto logits = forward(x, ys.first(n)).logits;
    const double lp = logits[static_cast<std::size_t>(ys[n])] - log_sum_exp(logits);
    total += std::max(lp, kLogProbFloor);
  }
  return total;
}

void TokenModel::accumulate_sentence_grad(const Prompt& x, const Response& y, double scale,
                                          std::span<double> grad) const {
  require(y.tokens.size() <= max_len_, ErrorKind::kInvalidArgument, "response longer than token model max_len");
  const std::span<const TokenId> ys(y.tokens);
  for (std::size_t n = 0; n < ys.size(); ++n) {
    if (forced_eos(n)) continue;
    const auto prefix = ys.first(n);
    const Forward f = forward(x, prefix);
    auto dz = detail::softmax(f.logits);
    const auto target = static_cast<std::size_t>(ys[n]);
    if (std::log(dz[target]) < kLogProbFloor) continue;
    for (double& v : dz) v = -v;
    dz[target] += 1.0;
    backward(x, prefix, f, dz, scale, grad);
  }
}

Response TokenModel::sample(const Prompt& x, const DecodeConfig& cfg) const {
  cfg.validate();
  auto rng = detail::prompt_rng(cfg.seed, x);
  Response out;
  const TokenId eos = vocab_->eos();
  while (true) {
    const auto p = raw_token_probs(x, out.tokens);
    std::size_t pick = 0;
    if (cfg.mode == DecodeMode::kGreedy) {
      pick = detail::argmax(p);
    } else {
      std::vector<double> logp(p.size());
      for (std::size_t t = 0; t < p.size(); ++t) logp[t] = std::log(p[t]);
      pick = detail::draw_index(detail::tempered(logp, cfg.temperature), rng);
    }
    const auto tok = static_cast<TokenId>(pick);
    if (out.tokens.size() + 1 >= cfg.max_len && tok != eos) {
      out.tokens.push_back(eos);
      out.truncated = true;
      return out;
    }
    out.tokens.push_back(tok);
    if (tok == eos) return out;
  }
}

}  // namespace dadpo
