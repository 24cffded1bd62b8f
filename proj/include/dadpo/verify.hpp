#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dadpo/losses.hpp"
#include "dadpo/policy.hpp"

namespace dadpo {

/// Small randomized loss instance: trainable policy, frozen ref and teacher,
/// an SFT batch and a triplet batch over the same prompts.
struct RandomInstance {
  std::shared_ptr<const Vocab> vocab;
  Policy policy;
  Policy ref;
  Policy teacher;
  std::vector<SftPair> sft;
  std::vector<PreferenceTriplet> triplets;

  LossInputs inputs() const { return {&policy, &ref, &teacher, sft, triplets}; }
};

/// V=4, max_len=3, three prompts, parameters uniform in [-2, 2]. Tabular rows
/// cover all 13 responses.
RandomInstance random_instance(std::uint64_t seed, Backend backend, std::size_t batch = 4);

struct SuiteReport {
  std::string suite;
  bool passed = false;
  nlohmann::json details;
};

/// theorem1 | gradients | reductions | winrate. `instances` = 0 uses the
/// suite default (200, 50, 1000, -).
SuiteReport run_suite(const std::string& suite, std::uint64_t seed, std::size_t instances = 0);

const std::vector<std::string>& suite_names();

}  // namespace dadpo
