#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dadpo/policy.hpp"
#include "dadpo/types.hpp"

namespace dadpo {

// JSONL I/O. One object per line:
//   prompts  {"id": str, "tokens": [int]}
//   sft      {"prompt_id": str, "target": [int]}
//   triplets {"prompt_id": str, "winner": [int], "loser": [int]}
// Errors name the 1-based line number.

std::vector<Prompt> load_prompts(const std::string& path, const Vocab& vocab);
void write_prompts(const std::string& path, const std::vector<Prompt>& prompts);

void write_sft_pairs(const std::string& path, const std::vector<SftPair>& pairs);
/// Prompts are resolved by id against `prompts`.
std::vector<SftPair> load_sft_pairs(const std::string& path, const std::vector<Prompt>& prompts,
                                    const Vocab& vocab);

void write_triplets(const std::string& path, const std::vector<PreferenceTriplet>& triplets);
std::vector<PreferenceTriplet> load_triplets(const std::string& path, const std::vector<Prompt>& prompts,
                                             const Vocab& vocab);

struct SyntheticCorpus {
  Vocab vocab;
  std::vector<Prompt> prompts;
};

/// Distinct prompts over content tokens, lengths uniform in [1, max_len].
SyntheticCorpus generate_synthetic_corpus(std::uint64_t seed, std::size_t vocab_size, std::size_t n_prompts,
                                          std::size_t max_len);

struct DatasetBundle {
  std::vector<SftPair> sft;
  std::vector<PreferenceTriplet> triplets;
  std::size_t dropped_equal = 0;  // winner == loser
  std::size_t truncated = 0;      // responses with a forced EOS
  DecodeConfig teacher_decode;
  DecodeConfig student_decode;

  nlohmann::json metadata() const;
};

/// Teacher responses become SFT targets and triplet winners; student responses
/// become losers. Triplets with winner == loser are dropped and counted.
/// Output order follows `prompts`.
DatasetBundle build_datasets(const std::vector<Prompt>& prompts, const Policy& teacher, const Policy& student,
                             const DecodeConfig& teacher_decode, const DecodeConfig& student_decode);

/// Both policies decoded with the same config (greedy by default).
DatasetBundle build_datasets(const std::vector<Prompt>& prompts, const Policy& teacher, const Policy& student,
                             const DecodeConfig& decode_cfg);

std::string hash_prompts(const std::vector<Prompt>& prompts);
std::string hash_sft(const std::vector<SftPair>& pairs);
std::string hash_triplets(const std::vector<PreferenceTriplet>& triplets);

}  // namespace dadpo
