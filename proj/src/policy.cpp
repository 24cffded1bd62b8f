#include "dadpo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>

namespace dadpo {

namespace {

std::string token_key(std::span<const TokenId> tokens) {
  return std::string(reinterpret_cast<const char*>(tokens.data()), tokens.size() * sizeof(TokenId));
}

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

}  // namespace

ResponseSpace::ResponseSpace(std::vector<Response> responses) : responses_(std::move(responses)) {
  require(responses_.size() >= 2, ErrorKind::kSize, "response space needs at least 2 responses");
  for (std::size_t i = 0; i < responses_.size(); ++i) {
    const auto& y = responses_[i];
    require(!y.tokens.empty(), ErrorKind::kInvalidArgument, "empty response in response space");
    require(index_.emplace(token_key(y.tokens), i).second, ErrorKind::kInvalidArgument,
            "duplicate response in response space");
    max_length_ = std::max(max_length_, y.tokens.size());
  }
}

std::optional<std::size_t> ResponseSpace::index_of(std::span<const TokenId> tokens) const {
  const auto it = index_.find(token_key(tokens));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

ResponseSpace enumerate_responses(const Vocab& vocab, std::size_t max_len, std::size_t cap) {
  require(max_len >= 1, ErrorKind::kInvalidArgument, "max_len must be >= 1");
  const std::size_t content = vocab.size() - 1;
  // Count sum_{l<max_len} content^l with overflow-safe early exit.
  std::size_t total = 0, layer = 1;
  for (std::size_t l = 0; l < max_len; ++l) {
    total += layer;
    require(total <= cap, ErrorKind::kSize,
            "response space exceeds cap " + std::to_string(cap) + " (V=" + std::to_string(vocab.size()) +
                ", max_len=" + std::to_string(max_len) + ")");
    if (l + 1 < max_len) {
      require(content == 0 || layer <= cap / content, ErrorKind::kSize,
              "response space exceeds cap " + std::to_string(cap));
      layer *= content;
    }
  }

  std::vector<TokenId> ordered_ids(vocab.size());
  for (std::size_t i = 0; i < vocab.size(); ++i) ordered_ids[i] = static_cast<TokenId>(i);

  std::vector<Response> out;
  out.reserve(total);
  std::vector<TokenId> prefix;
  // Depth-first in ascending id order yields lexicographic order.
  std::function<void()> visit = [&]() {
    for (TokenId t : ordered_ids) {
      if (t == vocab.eos()) {
        Response y;
        y.tokens = prefix;
        y.tokens.push_back(t);
        out.push_back(std::move(y));
      } else if (prefix.size() + 1 < max_len) {
        prefix.push_back(t);
        visit();
        prefix.pop_back();
      }
    }
  };
  visit();
  return ResponseSpace(std::move(out));
}

void DecodeConfig::validate() const {
  require(max_len >= 1, ErrorKind::kInvalidArgument, "decode max_len must be >= 1");
  if (mode == DecodeMode::kTemperature) {
    require(std::isfinite(temperature) && temperature > 0.0, ErrorKind::kInvalidArgument,
            "temperature must be finite and > 0");
  }
}

std::string ContextKeying::key(const Prompt& prompt) const {
  if (mode == Mode::kPromptId) return "id:" + prompt.id;
  std::string k = "prefix:";
  const std::size_t n = std::min(width, prompt.tokens.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (i) k += ',';
    k += std::to_string(prompt.tokens[i]);
  }
  return k;
}

Backend Policy::backend() const {
  return std::holds_alternative<TabularPolicy>(impl_) ? Backend::kTabular : Backend::kTokenModel;
}

const Vocab& Policy::vocab() const {
  return std::visit([](const auto& p) -> const Vocab& { return p.vocab(); }, impl_);
}

std::shared_ptr<const Vocab> Policy::vocab_ptr() const {
  return std::visit([](const auto& p) { return p.vocab_ptr(); }, impl_);
}

std::span<const double> Policy::params() const {
  return std::visit([](const auto& p) { return p.params(); }, impl_);
}

std::span<double> Policy::params() {
  return std::visit([](auto& p) { return p.params(); }, impl_);
}

std::string Policy::param_hash() const {
  Fnv1a h;
  h.update(backend() == Backend::kTabular ? "tabular" : "token_model");
  h.update(vocab().hash());
  const auto ps = params();
  h.update_bytes(ps.data(), ps.size() * sizeof(double));
  return h.hex();
}

double Policy::sentence_logprob(const Prompt& x, const Response& y) const {
  validate_prompt(x, vocab());
  validate_response(y, vocab());
  return std::visit([&](const auto& p) { return p.sentence_logprob(x, y); }, impl_);
}

void Policy::accumulate_sentence_logprob_grad(const Prompt& x, const Response& y, double scale,
                                              std::span<double> grad) const {
  require(grad.size() == num_params(), ErrorKind::kInvalidArgument, "gradient shape mismatch");
  validate_prompt(x, vocab());
  validate_response(y, vocab());
  std::visit([&](const auto& p) { p.accumulate_sentence_grad(x, y, scale, grad); }, impl_);
}

namespace {

void validate_prefix(std::span<const TokenId> prefix, const Vocab& vocab) {
  for (TokenId t : prefix) {
    require(vocab.contains(t), ErrorKind::kVocab, "prefix: unknown token id " + std::to_string(t));
    require(t != vocab.eos(), ErrorKind::kInvalidArgument, "prefix contains EOS");
  }
}

}  // namespace

std::vector<double> Policy::token_distribution(const Prompt& x, std::span<const TokenId> prefix) const {
  validate_prompt(x, vocab());
  validate_prefix(prefix, vocab());
  auto p = std::visit([&](const auto& b) { return b.raw_token_probs(x, prefix); }, impl_);
  double total = 0.0;
  for (double& v : p) {
    v = std::max(v, kProbFloor);
    total += v;
  }
  for (double& v : p) v /= total;
  return p;
}

void Policy::accumulate_token_distribution_vjp(const Prompt& x, std::span<const TokenId> prefix,
                                               std::span<const double> upstream, double scale,
                                               std::span<double> grad) const {
  validate_prompt(x, vocab());
  validate_prefix(prefix, vocab());
  require(upstream.size() == vocab().size(), ErrorKind::kInvalidArgument, "upstream size mismatch");
  require(grad.size() == num_params(), ErrorKind::kInvalidArgument, "gradient shape mismatch");
  const auto raw = std::visit([&](const auto& b) { return b.raw_token_probs(x, prefix); }, impl_);
  // Chain through floor-and-renormalize: d_t = f_t / S, f_t = max(p_t, floor).
  double total = 0.0;
  for (double v : raw) total += std::max(v, kProbFloor);
  double gd = 0.0;
  for (std::size_t t = 0; t < raw.size(); ++t) gd += upstream[t] * std::max(raw[t], kProbFloor) / total;
  std::vector<double> graw(raw.size());
  for (std::size_t t = 0; t < raw.size(); ++t) {
    graw[t] = raw[t] > kProbFloor ? (upstream[t] - gd) / total : 0.0;
  }
  std::visit([&](const auto& b) { b.accumulate_raw_prob_vjp(x, prefix, graw, scale, grad); }, impl_);
}

Response Policy::sample(const Prompt& x, const DecodeConfig& cfg) const {
  validate_prompt(x, vocab());
  return std::visit([&](const auto& p) { return p.sample(x, cfg); }, impl_);
}

nlohmann::json vocab_to_json(const Vocab& vocab) {
  return {{"tokens", vocab.tokens()}, {"eos", vocab.eos()}};
}

Vocab vocab_from_json(const nlohmann::json& j) {
  return Vocab(j.at("tokens").get<std::vector<std::string>>(), j.at("eos").get<TokenId>());
}

nlohmann::json Policy::to_json() const {
  nlohmann::json j;
  j["vocab_hash"] = vocab().hash();
  std::visit(Overloaded{
                 [&](const TabularPolicy& p) {
                   j["backend"] = "tabular";
                   j["keying"] = {{"mode", p.keying().mode == ContextKeying::Mode::kPromptId ? "prompt_id"
                                                                                              : "prompt_prefix"},
                                  {"width", p.keying().width}};
                   std::vector<const ResponseSpace*> spaces;
                   nlohmann::json jspaces = nlohmann::json::array();
                   nlohmann::json rows = nlohmann::json::array();
                   for (const auto& [key, row] : p.rows()) {
                     auto it = std::find(spaces.begin(), spaces.end(), row.space.get());
                     std::size_t idx = static_cast<std::size_t>(it - spaces.begin());
                     if (it == spaces.end()) {
                       spaces.push_back(row.space.get());
                       nlohmann::json rs = nlohmann::json::array();
                       for (const auto& y : row.space->responses()) rs.push_back(y.tokens);
                       jspaces.push_back(std::move(rs));
                     }
                     const auto ps = p.params().subspan(row.offset, row.space->size());
                     rows.push_back({{"key", key}, {"space", idx}, {"logits", std::vector<double>(ps.begin(), ps.end())}});
                   }
                   j["spaces"] = std::move(jspaces);
                   j["rows"] = std::move(rows);
                 },
                 [&](const TokenModel& p) {
                   j["backend"] = "token_model";
                   j["dim"] = p.dim();
                   j["max_len"] = p.max_len();
                   j["decay"] = p.decay();
                   j["params"] = std::vector<double>(p.params().begin(), p.params().end());
                 }},
             impl_);
  return j;
}

Policy Policy::from_json(const nlohmann::json& j, std::shared_ptr<const Vocab> vocab) {
  try {
    require(j.at("vocab_hash").get<std::string>() == vocab->hash(), ErrorKind::kVocab,
            "checkpoint vocab hash does not match the corpus vocabulary");
    const auto backend = j.at("backend").get<std::string>();
    if (backend == "tabular") {
      ContextKeying keying;
      const auto& jk = j.at("keying");
      keying.mode = jk.at("mode").get<std::string>() == "prompt_id" ? ContextKeying::Mode::kPromptId
                                                                      : ContextKeying::Mode::kPromptPrefix;
      keying.width = jk.at("width").get<std::size_t>();
      std::vector<std::shared_ptr<const ResponseSpace>> spaces;
      for (const auto& js : j.at("spaces")) {
        std::vector<Response> rs;
        for (const auto& t : js) rs.push_back(Response{t.get<std::vector<TokenId>>()});
        spaces.push_back(std::make_shared<const ResponseSpace>(std::move(rs)));
      }
      TabularPolicy p(vocab, keying);
      for (const auto& row : j.at("rows")) {
        const auto logits = row.at("logits").get<std::vector<double>>();
        p.add_context(row.at("key").get<std::string>(), spaces.at(row.at("space").get<std::size_t>()), logits);
      }
      return Policy(std::move(p));
    }
    require(backend == "token_model", ErrorKind::kParse, "unknown backend '" + backend + "'");
    TokenModel m(vocab, j.at("dim").get<std::size_t>(), j.at("max_len").get<std::size_t>(),
                 j.at("decay").get<double>());
    const auto ps = j.at("params").get<std::vector<double>>();
    require(ps.size() == m.params().size(), ErrorKind::kParse, "token model parameter count mismatch");
    std::copy(ps.begin(), ps.end(), m.params().begin());
    return Policy(std::move(m));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Policy& policy, const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write checkpoint " + path);
  out << policy.to_json().dump() << '\n';
}

Policy load_checkpoint(const std::string& path, std::shared_ptr<const Vocab> vocab) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot read checkpoint " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, "checkpoint " + path + ": " + e.what());
  }
  return Policy::from_json(j, std::move(vocab));
}

}  // namespace dadpo
