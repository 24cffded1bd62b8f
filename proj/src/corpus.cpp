#include "dadpo/corpus.hpp"

#include <fstream>
#include <map>
#include <random>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "detail.hpp"

namespace dadpo {

namespace {

using nlohmann::json;

template <class F>
void for_each_line(const std::string& path, F&& fn) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail(ErrorKind::kParse, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    try {
      fn(j, lineno);
    } catch (const json::exception& e) {
      fail(ErrorKind::kParse, path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::kIo) throw;
      throw Error(e.kind(), path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path);
  return out;
}

std::unordered_map<std::string, const Prompt*> index_prompts(const std::vector<Prompt>& prompts) {
  std::unordered_map<std::string, const Prompt*> idx;
  for (const auto& p : prompts) idx.emplace(p.id, &p);
  return idx;
}

const Prompt& lookup(const std::unordered_map<std::string, const Prompt*>& idx, const std::string& id) {
  const auto it = idx.find(id);
  require(it != idx.end(), ErrorKind::kInvalidArgument, "unknown prompt id '" + id + "'");
  return *it->second;
}

Response response_from(const json& j, const Vocab& vocab) {
  Response y{j.get<std::vector<TokenId>>()};
  validate_response(y, vocab);
  return y;
}

void hash_tokens(Fnv1a& h, const std::vector<TokenId>& ts) {
  const auto n = static_cast<std::uint64_t>(ts.size());
  h.update_pod(n);
  h.update_bytes(ts.data(), ts.size() * sizeof(TokenId));
}

}  // namespace

std::vector<Prompt> load_prompts(const std::string& path, const Vocab& vocab) {
  std::vector<Prompt> out;
  std::unordered_set<std::string> ids;
  for_each_line(path, [&](const json& j, std::size_t) {
    Prompt p{j.at("id").get<std::string>(), j.at("tokens").get<std::vector<TokenId>>()};
    require(ids.insert(p.id).second, ErrorKind::kInvalidArgument, "duplicate prompt id '" + p.id + "'");
    validate_prompt(p, vocab);
    out.push_back(std::move(p));
  });
  return out;
}

void write_prompts(const std::string& path, const std::vector<Prompt>& prompts) {
  auto out = open_out(path);
  for (const auto& p : prompts) out << json{{"id", p.id}, {"tokens", p.tokens}}.dump() << '\n';
}

void write_sft_pairs(const std::string& path, const std::vector<SftPair>& pairs) {
  auto out = open_out(path);
  for (const auto& s : pairs) out << json{{"prompt_id", s.prompt.id}, {"target", s.target.tokens}}.dump() << '\n';
}

std::vector<SftPair> load_sft_pairs(const std::string& path, const std::vector<Prompt>& prompts,
                                    const Vocab& vocab) {
  const auto idx = index_prompts(prompts);
  std::vector<SftPair> out;
  for_each_line(path, [&](const json& j, std::size_t) {
    out.push_back(SftPair{lookup(idx, j.at("prompt_id").get<std::string>()), response_from(j.at("target"), vocab)});
  });
  return out;
}

void write_triplets(const std::string& path, const std::vector<PreferenceTriplet>& triplets) {
  auto out = open_out(path);
  for (const auto& t : triplets) {
    out << json{{"prompt_id", t.prompt.id}, {"winner", t.winner.tokens}, {"loser", t.loser.tokens}}.dump() << '\n';
  }
}

std::vector<PreferenceTriplet> load_triplets(const std::string& path, const std::vector<Prompt>& prompts,
                                             const Vocab& vocab) {
  const auto idx = index_prompts(prompts);
  std::vector<PreferenceTriplet> out;
  for_each_line(path, [&](const json& j, std::size_t) {
    PreferenceTriplet t{lookup(idx, j.at("prompt_id").get<std::string>()), response_from(j.at("winner"), vocab),
                        response_from(j.at("loser"), vocab)};
    require(!(t.winner == t.loser), ErrorKind::kInvalidArgument, "triplet winner equals loser");
    out.push_back(std::move(t));
  });
  return out;
}

SyntheticCorpus generate_synthetic_corpus(std::uint64_t seed, std::size_t vocab_size, std::size_t n_prompts,
                                          std::size_t max_len) {
  require(vocab_size >= 2, ErrorKind::kInvalidArgument, "vocab_size must be >= 2");
  require(n_prompts >= 1, ErrorKind::kInvalidArgument, "n_prompts must be >= 1");
  require(max_len >= 1, ErrorKind::kInvalidArgument, "max_len must be >= 1");
  const std::size_t content = vocab_size - 1;
  // Number of distinct non-empty content sequences of length <= max_len.
  double capacity = 0.0, layer = 1.0;
  for (std::size_t l = 1; l <= max_len; ++l) {
    layer *= static_cast<double>(content);
    capacity += layer;
  }
  require(static_cast<double>(n_prompts) <= capacity, ErrorKind::kInvalidArgument,
          "n_prompts exceeds the number of distinct prompts for this vocab_size/max_len");

  Vocab vocab = Vocab::synthetic(vocab_size);
  std::mt19937_64 rng(mix_seed(seed, 0x636f72707573ULL));
  std::set<std::vector<TokenId>> seen;
  std::vector<Prompt> prompts;
  prompts.reserve(n_prompts);
  const int width = static_cast<int>(std::to_string(n_prompts).size());
  while (prompts.size() < n_prompts) {
    const std::size_t len = 1 + static_cast<std::size_t>(detail::uniform01(rng) * static_cast<double>(max_len));
    std::vector<TokenId> toks(len);
    for (auto& t : toks) t = 1 + static_cast<TokenId>(detail::uniform01(rng) * static_cast<double>(content));
    if (!seen.insert(toks).second) continue;
    std::string id = std::to_string(prompts.size());
    id = "p" + std::string(static_cast<std::size_t>(width) - id.size(), '0') + id;
    prompts.push_back(Prompt{std::move(id), std::move(toks)});
  }
  return {std::move(vocab), std::move(prompts)};
}

nlohmann::json DatasetBundle::metadata() const {
  auto decode = [](const DecodeConfig& d) {
    return json{{"mode", d.mode == DecodeMode::kGreedy ? "greedy" : "temperature"},
                {"temperature", d.temperature},
                {"seed", d.seed},
                {"max_len", d.max_len}};
  };
  return json{{"sft_pairs", sft.size()},
              {"triplets", triplets.size()},
              {"dropped_equal", dropped_equal},
              {"truncated", truncated},
              {"teacher_decode", decode(teacher_decode)},
              {"student_decode", decode(student_decode)}};
}

DatasetBundle build_datasets(const std::vector<Prompt>& prompts, const Policy& teacher, const Policy& student,
                             const DecodeConfig& teacher_decode, const DecodeConfig& student_decode) {
  require(teacher.vocab() == student.vocab(), ErrorKind::kVocab, "teacher and student vocabularies differ");
  teacher_decode.validate();
  student_decode.validate();
  DatasetBundle out;
  out.teacher_decode = teacher_decode;
  out.student_decode = student_decode;
  out.sft.reserve(prompts.size());
  for (const auto& x : prompts) {
    validate_prompt(x, teacher.vocab());
    Response yt = teacher.sample(x, teacher_decode);
    Response ys = student.sample(x, student_decode);
    out.truncated += static_cast<std::size_t>(yt.truncated) + static_cast<std::size_t>(ys.truncated);
    out.sft.push_back(SftPair{x, yt});
    if (yt == ys) {
      ++out.dropped_equal;
      continue;
    }
    out.triplets.push_back(PreferenceTriplet{x, std::move(yt), std::move(ys)});
  }
  return out;
}

DatasetBundle build_datasets(const std::vector<Prompt>& prompts, const Policy& teacher, const Policy& student,
                             const DecodeConfig& decode_cfg) {
  return build_datasets(prompts, teacher, student, decode_cfg, decode_cfg);
}

std::string hash_prompts(const std::vector<Prompt>& prompts) {
  Fnv1a h;
  for (const auto& p : prompts) {
    h.update(p.id);
    hash_tokens(h, p.tokens);
  }
  return h.hex();
}

std::string hash_sft(const std::vector<SftPair>& pairs) {
  Fnv1a h;
  for (const auto& s : pairs) {
    h.update(s.prompt.id);
    hash_tokens(h, s.target.tokens);
  }
  return h.hex();
}

std::string hash_triplets(const std::vector<PreferenceTriplet>& triplets) {
  Fnv1a h;
  for (const auto& t : triplets) {
    h.update(t.prompt.id);
    hash_tokens(h, t.winner.tokens);
    hash_tokens(h, t.loser.tokens);
  }
  return h.hex();
}

}  // namespace dadpo
