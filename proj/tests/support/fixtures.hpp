#pragma once

#include <memory>
#include <vector>

#include "dadpo/policy.hpp"

namespace fixture {

inline dadpo::Response resp(std::vector<dadpo::TokenId> t) { return dadpo::Response{std::move(t), false}; }

inline std::shared_ptr<const dadpo::Vocab> vocab(std::size_t v) {
  return std::make_shared<const dadpo::Vocab>(dadpo::Vocab::synthetic(v));
}

/// One prompt-id keyed row per prompt, all over `space`.
inline dadpo::Policy tabular(std::shared_ptr<const dadpo::Vocab> v, const std::vector<dadpo::Prompt>& prompts,
                             std::shared_ptr<const dadpo::ResponseSpace> space,
                             const std::vector<std::vector<double>>& logits) {
  dadpo::TabularPolicy t(std::move(v));
  dadpo::ContextKeying keying;
  for (std::size_t i = 0; i < prompts.size(); ++i) t.add_context(keying.key(prompts[i]), space, logits[i]);
  return dadpo::Policy(std::move(t));
}

inline std::shared_ptr<const dadpo::ResponseSpace> space(std::vector<std::vector<dadpo::TokenId>> rs) {
  std::vector<dadpo::Response> out;
  for (auto& r : rs) out.push_back(resp(std::move(r)));
  return std::make_shared<const dadpo::ResponseSpace>(std::move(out));
}

}  // namespace fixture
