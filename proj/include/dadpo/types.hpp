#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dadpo/common.hpp"

namespace dadpo {

/// Dense token vocabulary with exactly one end-of-sequence token.
class Vocab {
 public:
  Vocab(std::vector<std::string> tokens, TokenId eos);

  /// "<eos>" at id 0 followed by content tokens "t1".."t{size-1}".
  static Vocab synthetic(std::size_t size);

  std::size_t size() const { return tokens_.size(); }
  TokenId eos() const { return eos_; }
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool contains(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < tokens_.size(); }

  /// Stable content hash, stored in checkpoints.
  std::string hash() const;

  std::string render(std::span<const TokenId> ids) const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_ && eos_ == other.eos_; }

 private:
  std::vector<std::string> tokens_;
  TokenId eos_;
};

struct Prompt {
  std::string id;
  std::vector<TokenId> tokens;

  bool operator==(const Prompt&) const = default;
};

/// EOS-terminated token sequence. `truncated` marks a forced EOS at max_len
/// and is not part of equality.
struct Response {
  std::vector<TokenId> tokens;
  bool truncated = false;

  std::size_t length() const { return tokens.size(); }
  bool operator==(const Response& o) const { return tokens == o.tokens; }
};

struct SftPair {
  Prompt prompt;
  Response target;

  bool operator==(const SftPair&) const = default;
};

struct PreferenceTriplet {
  Prompt prompt;
  Response winner;
  Response loser;

  bool operator==(const PreferenceTriplet&) const = default;
};

void validate_prompt(const Prompt& prompt, const Vocab& vocab);
/// Exactly one EOS at the final position and length within max_len (0 = unbounded).
void validate_response(const Response& response, const Vocab& vocab, std::size_t max_len = 0);

}  // namespace dadpo
