#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "dadpo/pipeline.hpp"
#include "detail.hpp"

namespace dadpo {

nlohmann::json WorldConfig::to_json() const {
  return {{"seed", seed},
          {"vocab_size", vocab_size},
          {"max_len", max_len},
          {"n_train", n_train},
          {"n_eval", n_eval},
          {"space_size", space_size},
          {"context_width", context_width},
          {"teacher_temperature", teacher_temperature},
          {"teacher_noise", teacher_noise},
          {"student_signal", student_signal},
          {"student_noise", student_noise}};
}

WorldConfig WorldConfig::from_json(const nlohmann::json& j) {
  try {
    WorldConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.n_train = j.at("n_train").get<std::size_t>();
    c.n_eval = j.at("n_eval").get<std::size_t>();
    c.space_size = j.at("space_size").get<std::size_t>();
    c.context_width = j.at("context_width").get<std::size_t>();
    c.teacher_temperature = j.at("teacher_temperature").get<double>();
    c.teacher_noise = j.at("teacher_noise").get<double>();
    c.student_signal = j.at("student_signal").get<double>();
    c.student_noise = j.at("student_noise").get<double>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("malformed world config: ") + e.what());
  }
}

SyntheticWorld make_synthetic_world(const WorldConfig& cfg) {
  require(cfg.n_train > 0 && cfg.n_eval > 0, ErrorKind::kInvalidArgument, "world needs train and eval prompts");
  require(cfg.context_width > 0, ErrorKind::kInvalidArgument, "context_width must be > 0");
  require(std::isfinite(cfg.teacher_temperature) && cfg.teacher_temperature > 0, ErrorKind::kInvalidArgument,
          "teacher_temperature must be > 0");
  require(std::isfinite(cfg.teacher_noise) && cfg.teacher_noise >= 0 && std::isfinite(cfg.student_noise) &&
              cfg.student_noise >= 0 && std::isfinite(cfg.student_signal),
          ErrorKind::kInvalidArgument, "world noise/signal parameters must be finite, noise >= 0");

  const auto corpus = generate_synthetic_corpus(cfg.seed, cfg.vocab_size, cfg.n_train + cfg.n_eval, cfg.max_len);
  auto vocab = std::make_shared<const Vocab>(corpus.vocab);
  const ResponseSpace full = enumerate_responses(*vocab, cfg.max_len);
  const std::size_t k = cfg.space_size == 0 ? full.size() : std::min(cfg.space_size, full.size());
  require(k >= 2, ErrorKind::kInvalidArgument, "space_size must be 0 or >= 2");

  const ContextKeying keying{ContextKeying::Mode::kPromptPrefix, cfg.context_width};
  TabularPolicy teacher(vocab, keying);
  TabularPolicy student(vocab, keying);
  std::set<std::string> keys;
  for (const auto& p : corpus.prompts) keys.insert(keying.key(p));

  std::map<std::string, std::vector<double>> gold;
  std::vector<std::size_t> pick(full.size());
  for (const auto& key : keys) {
    Fnv1a h;
    h.update(key);
    std::mt19937_64 rng(mix_seed(cfg.seed, h.digest()));
    std::iota(pick.begin(), pick.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t span = full.size() - i;
      const auto j = i + std::min(span - 1, static_cast<std::size_t>(detail::uniform01(rng) * static_cast<double>(span)));
      std::swap(pick[i], pick[j]);
    }
    std::vector<std::size_t> chosen(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(chosen.begin(), chosen.end());
    std::vector<Response> responses;
    for (std::size_t idx : chosen) responses.push_back(full[idx]);
    auto space = std::make_shared<const ResponseSpace>(std::move(responses));

    std::vector<double> r(k), t(k), s(k);
    for (std::size_t i = 0; i < k; ++i) r[i] = detail::normal(rng);
    for (std::size_t i = 0; i < k; ++i) t[i] = (r[i] + cfg.teacher_noise * detail::normal(rng)) / cfg.teacher_temperature;
    for (std::size_t i = 0; i < k; ++i) s[i] = cfg.student_signal * r[i] + cfg.student_noise * detail::normal(rng);
    teacher.add_context(key, space, t);
    student.add_context(key, space, s);
    gold.emplace(key, std::move(r));
  }

  SyntheticWorld w{cfg, vocab, {}, {}, Policy(std::move(teacher)), Policy(std::move(student)), std::move(gold)};
  w.train_prompts.assign(corpus.prompts.begin(), corpus.prompts.begin() + static_cast<std::ptrdiff_t>(cfg.n_train));
  w.eval_prompts.assign(corpus.prompts.begin() + static_cast<std::ptrdiff_t>(cfg.n_train), corpus.prompts.end());
  return w;
}

RewardFn SyntheticWorld::reward() const {
  struct Table {
    Policy teacher;
    std::map<std::string, std::vector<double>> gold;
  };
  auto table = std::make_shared<const Table>(Table{teacher, gold});
  return [table](const Prompt& x, const Response& y) {
    const auto* tab = table->teacher.as_tabular();
    const std::size_t i = tab->response_index(x, y);
    return table->gold.at(tab->keying().key(x))[i];
  };
}

nlohmann::json SyntheticWorld::to_json() const {
  return {{"config", config.to_json()},
          {"vocab_hash", vocab->hash()},
          {"teacher_hash", teacher.param_hash()},
          {"student_hash", student.param_hash()},
          {"train_prompts", hash_prompts(train_prompts)},
          {"eval_prompts", hash_prompts(eval_prompts)}};
}

SyntheticWorld SyntheticWorld::from_json(const nlohmann::json& j) {
  SyntheticWorld w = make_synthetic_world(WorldConfig::from_json(j.at("config")));
  try {
    require(j.at("teacher_hash").get<std::string>() == w.teacher.param_hash() &&
                j.at("student_hash").get<std::string>() == w.student.param_hash() &&
                j.at("train_prompts").get<std::string>() == hash_prompts(w.train_prompts) &&
                j.at("eval_prompts").get<std::string>() == hash_prompts(w.eval_prompts),
            ErrorKind::kParse, "world file does not match its regenerated content");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("malformed world file: ") + e.what());
  }
  return w;
}

void SyntheticWorld::save(const std::string& path) const {
  std::ofstream out(path);
  require(out.good(), ErrorKind::kIo, "cannot write world '" + path + "'");
  out << to_json().dump(2) << '\n';
}

SyntheticWorld SyntheticWorld::load(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::kIo, "cannot open world '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, path + ": " + e.what());
  }
  return from_json(j);
}

}  // namespace dadpo
