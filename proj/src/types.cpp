#include "dadpo/types.hpp"

#include <algorithm>
#include <unordered_set>

namespace dadpo {

Vocab::Vocab(std::vector<std::string> tokens, TokenId eos) : tokens_(std::move(tokens)), eos_(eos) {
  require(tokens_.size() >= 2, ErrorKind::kVocab, "vocabulary needs at least 2 tokens");
  require(contains(eos_), ErrorKind::kVocab, "EOS id out of range");
  std::unordered_set<std::string> seen;
  for (const auto& t : tokens_) {
    require(seen.insert(t).second, ErrorKind::kVocab, "duplicate token '" + t + "'");
  }
}

Vocab Vocab::synthetic(std::size_t size) {
  require(size >= 2, ErrorKind::kInvalidArgument, "vocab_size must be >= 2");
  std::vector<std::string> tokens;
  tokens.reserve(size);
  tokens.emplace_back("<eos>");
  for (std::size_t i = 1; i < size; ++i) tokens.push_back("t" + std::to_string(i));
  return Vocab(std::move(tokens), 0);
}

const std::string& Vocab::token(TokenId id) const {
  require(contains(id), ErrorKind::kVocab, "token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocab::hash() const {
  Fnv1a h;
  h.update_pod(eos_);
  for (const auto& t : tokens_) {
    h.update(t);
    h.update(std::string_view("\0", 1));
  }
  return h.hex();
}

std::string Vocab::render(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

void validate_prompt(const Prompt& prompt, const Vocab& vocab) {
  require(!prompt.id.empty(), ErrorKind::kInvalidArgument, "prompt id is empty");
  require(!prompt.tokens.empty(), ErrorKind::kInvalidArgument, "prompt '" + prompt.id + "' is empty");
  for (TokenId t : prompt.tokens) {
    require(vocab.contains(t), ErrorKind::kVocab,
            "prompt '" + prompt.id + "': unknown token id " + std::to_string(t));
  }
}

void validate_response(const Response& response, const Vocab& vocab, std::size_t max_len) {
  const auto& ts = response.tokens;
  require(!ts.empty(), ErrorKind::kInvalidArgument, "response is empty");
  for (TokenId t : ts) {
    require(vocab.contains(t), ErrorKind::kVocab, "response: unknown token id " + std::to_string(t));
  }
  require(ts.back() == vocab.eos(), ErrorKind::kInvalidArgument, "response does not end in EOS");
  require(std::count(ts.begin(), ts.end(), vocab.eos()) == 1, ErrorKind::kInvalidArgument,
          "response has EOS before its final position");
  if (max_len > 0) {
    require(ts.size() <= max_len, ErrorKind::kInvalidArgument,
            "response length " + std::to_string(ts.size()) + " exceeds max_len " + std::to_string(max_len));
  }
}

}  // namespace dadpo
