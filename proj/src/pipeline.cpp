#include "dadpo/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "detail.hpp"

namespace dadpo {

namespace {

constexpr std::uint64_t kSftStream = 1;
constexpr std::uint64_t kPrefStream = 2;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == v.size() && !v.empty(), ErrorKind::kParse, "config key '" + key + "': not a number: '" + v + "'");
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  std::uint64_t out = 0;
  try {
    require(!v.empty() && v[0] != '-', ErrorKind::kParse, "");
    out = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == v.size() && !v.empty(), ErrorKind::kParse,
          "config key '" + key + "': not a nonnegative integer: '" + v + "'");
  return out;
}

std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(key, trim(item)));
  return out;
}

std::string join(const std::vector<double>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + fmt_double(xs[i]);
  return s;
}

bool uses_triplets(LossId id) {
  return id == LossId::kDdpo || id == LossId::kRdpo || id == LossId::kDadpo || id == LossId::kDdpoKl;
}

void require_grid(const std::vector<double>& g, const char* name, bool allow_zero) {
  require(!g.empty(), ErrorKind::kInvalidArgument, std::string(name) + " must not be empty");
  for (double v : g) {
    require(std::isfinite(v) && (allow_zero ? v >= 0 : v > 0), ErrorKind::kInvalidArgument,
            std::string(name) + " has an out-of-range entry");
  }
}

}  // namespace

const char* to_string(Method m) {
  switch (m) {
    case Method::kDsft: return "dsft";
    case Method::kDsftKl: return "dsft_kl";
    case Method::kDdpo: return "ddpo";
    case Method::kDdpoKl: return "ddpo_kl";
    case Method::kRdpo: return "rdpo";
    case Method::kDadpo: return "dadpo";
  }
  return "?";
}

Method method_from_string(const std::string& name) {
  for (Method m : {Method::kDsft, Method::kDsftKl, Method::kDdpo, Method::kDdpoKl, Method::kRdpo, Method::kDadpo}) {
    if (name == to_string(m)) return m;
  }
  fail(ErrorKind::kInvalidArgument, "unknown method '" + name + "'");
}

bool is_preference_method(Method m) { return m != Method::kDsft && m != Method::kDsftKl; }

void RunConfig::validate() const {
  loss_spec();  // method-specific parameter checks
  require(batch_size > 0, ErrorKind::kInvalidArgument, "batch_size must be > 0");
  require(plateau_window > 0, ErrorKind::kInvalidArgument, "plateau_window must be > 0");
  require(std::isfinite(plateau_tol) && plateau_tol >= 0, ErrorKind::kInvalidArgument, "plateau_tol must be >= 0");
  sft_optim().validate();
  pref_optim().validate();
  require_grid(beta_grid, "beta_grid", false);
  require_grid(beta1_grid, "beta1_grid", true);
  require_grid(beta2_grid, "beta2_grid", true);
  require_grid(kl_weight_grid, "kl_weight_grid", true);
}

LossSpec RunConfig::loss_spec() const {
  LossSpec spec;
  spec.beta = beta;
  spec.betas = BetaPair{beta1, beta2};
  spec.kl_weight = kl_weight;
  switch (method) {
    case Method::kDsft: spec.id = LossId::kSft; break;
    case Method::kDsftKl: spec.id = LossId::kSftKl; break;
    case Method::kDdpo: spec.id = LossId::kDdpo; break;
    case Method::kDdpoKl: spec.id = LossId::kDdpoKl; break;
    case Method::kRdpo: spec.id = LossId::kRdpo; break;
    case Method::kDadpo: spec.id = LossId::kDadpo; break;
  }
  const bool needs_beta = spec.id == LossId::kDdpo || spec.id == LossId::kDdpoKl || spec.id == LossId::kRdpo;
  if (needs_beta) {
    require(std::isfinite(beta) && beta > 0, ErrorKind::kInvalidArgument, "beta must be finite and > 0");
  }
  if (spec.id == LossId::kDadpo) spec.betas.validate();
  if (spec.id == LossId::kSftKl || spec.id == LossId::kDdpoKl) {
    require(std::isfinite(kl_weight) && kl_weight >= 0, ErrorKind::kInvalidArgument, "kl_weight must be >= 0");
  }
  return spec;
}

OptimConfig RunConfig::sft_optim() const {
  OptimConfig o;
  o.algorithm = optimizer;
  o.lr = sft_lr;
  o.clip = clip;
  o.seed = mix_seed(seed, kSftStream);
  return o;
}

OptimConfig RunConfig::pref_optim() const {
  OptimConfig o = sft_optim();
  o.lr = lr;
  o.seed = mix_seed(seed, kPrefStream);
  return o;
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "method = " << to_string(method) << '\n'
     << "beta = " << fmt_double(beta) << '\n'
     << "beta1 = " << fmt_double(beta1) << '\n'
     << "beta2 = " << fmt_double(beta2) << '\n'
     << "kl_weight = " << fmt_double(kl_weight) << '\n'
     << "epochs = " << epochs << '\n'
     << "sft_epochs = " << sft_epochs << '\n'
     << "batch_size = " << batch_size << '\n'
     << "optimizer = " << (optimizer == Optimizer::kAdam ? "adam" : "sgd") << '\n'
     << "lr = " << fmt_double(lr) << '\n'
     << "sft_lr = " << fmt_double(sft_lr) << '\n'
     << "clip = " << fmt_double(clip) << '\n'
     << "seed = " << seed << '\n'
     << "plateau_tol = " << fmt_double(plateau_tol) << '\n'
     << "plateau_window = " << plateau_window << '\n'
     << "beta_grid = " << join(beta_grid) << '\n'
     << "beta1_grid = " << join(beta1_grid) << '\n'
     << "beta2_grid = " << join(beta2_grid) << '\n'
     << "kl_weight_grid = " << join(kl_weight_grid) << '\n';
  return os.str();
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::kParse, "config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "method") {
      cfg.method = method_from_string(val);
    } else if (key == "beta") {
      cfg.beta = parse_double(key, val);
    } else if (key == "beta1") {
      cfg.beta1 = parse_double(key, val);
    } else if (key == "beta2") {
      cfg.beta2 = parse_double(key, val);
    } else if (key == "kl_weight") {
      cfg.kl_weight = parse_double(key, val);
    } else if (key == "epochs") {
      cfg.epochs = parse_uint(key, val);
    } else if (key == "sft_epochs") {
      cfg.sft_epochs = parse_uint(key, val);
    } else if (key == "batch_size") {
      cfg.batch_size = parse_uint(key, val);
    } else if (key == "optimizer") {
      require(val == "sgd" || val == "adam", ErrorKind::kParse, "optimizer must be sgd or adam");
      cfg.optimizer = val == "adam" ? Optimizer::kAdam : Optimizer::kGradientDescent;
    } else if (key == "lr") {
      cfg.lr = parse_double(key, val);
    } else if (key == "sft_lr") {
      cfg.sft_lr = parse_double(key, val);
    } else if (key == "clip") {
      cfg.clip = parse_double(key, val);
    } else if (key == "seed") {
      cfg.seed = parse_uint(key, val);
    } else if (key == "plateau_tol") {
      cfg.plateau_tol = parse_double(key, val);
    } else if (key == "plateau_window") {
      cfg.plateau_window = parse_uint(key, val);
    } else if (key == "beta_grid") {
      cfg.beta_grid = parse_list(key, val);
    } else if (key == "beta1_grid") {
      cfg.beta1_grid = parse_list(key, val);
    } else if (key == "beta2_grid") {
      cfg.beta2_grid = parse_list(key, val);
    } else if (key == "kl_weight_grid") {
      cfg.kl_weight_grid = parse_list(key, val);
    } else {
      fail(ErrorKind::kParse, "config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::kIo, "cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::hash() const {
  Fnv1a h;
  h.update(to_text());
  return h.hex();
}

nlohmann::json RunConfig::to_json() const {
  return {{"method", to_string(method)},
          {"beta", beta},
          {"beta1", beta1},
          {"beta2", beta2},
          {"kl_weight", kl_weight},
          {"epochs", epochs},
          {"sft_epochs", sft_epochs},
          {"batch_size", batch_size},
          {"optimizer", optimizer == Optimizer::kAdam ? "adam" : "sgd"},
          {"lr", lr},
          {"sft_lr", sft_lr},
          {"clip", clip},
          {"seed", seed},
          {"plateau_tol", plateau_tol},
          {"plateau_window", plateau_window},
          {"text", to_text()},
          {"hash", hash()}};
}

nlohmann::json StageLog::to_json() const {
  return {{"name", name},          {"loss_curve", loss_curve}, {"epochs_run", epochs_run},
          {"stopped_early", stopped_early}, {"skipped", skipped}, {"checkpoint", checkpoint}};
}

StageResult train_stage(const std::string& name, const Policy& init, const LossSpec& spec, const Policy* ref,
                        const Policy* teacher, std::span<const SftPair> sft, std::span<const PreferenceTriplet> triplets,
                        std::size_t epochs, std::size_t batch_size, const OptimConfig& optim, double plateau_tol,
                        std::size_t plateau_window) {
  require(batch_size > 0, ErrorKind::kInvalidArgument, "batch_size must be > 0");
  optim.validate();
  StageResult out{init, StageLog{}};
  out.log.name = name;
  Policy& policy = out.policy;
  const bool pairwise = uses_triplets(spec.id);
  const std::size_t n = pairwise ? triplets.size() : sft.size();
  require(n > 0, ErrorKind::kInvalidArgument, "stage '" + name + "' has no training data");

  const LossInputs full{&policy, ref, teacher, sft, triplets};
  auto full_loss = [&] {
    const double l = evaluate_loss(spec, full).total;
    require(std::isfinite(l), ErrorKind::kNumeric,
            "loss diverged at epoch " + std::to_string(out.log.epochs_run));
    return l;
  };
  out.log.loss_curve.push_back(full_loss());

  OptimState state;
  std::vector<std::size_t> order(n);
  std::vector<SftPair> batch_sft;
  std::vector<PreferenceTriplet> batch_trip;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(optim.seed, epoch + 1));
    for (std::size_t i = n - 1; i > 0; --i) {
      const auto j = std::min(i, static_cast<std::size_t>(detail::uniform01(rng) * static_cast<double>(i + 1)));
      std::swap(order[i], order[j]);
    }
    for (std::size_t b = 0; b < n; b += batch_size) {
      const std::size_t e = std::min(n, b + batch_size);
      batch_sft.clear();
      batch_trip.clear();
      for (std::size_t k = b; k < e; ++k) {
        if (pairwise) {
          batch_trip.push_back(triplets[order[k]]);
        } else {
          batch_sft.push_back(sft[order[k]]);
        }
      }
      const LossInputs in{&policy, ref, teacher, batch_sft, batch_trip};
      const auto g = loss_grad(spec, in);
      step(policy, g, state, optim);
    }
    ++out.log.epochs_run;
    out.log.loss_curve.push_back(full_loss());

    const auto& c = out.log.loss_curve;
    if (c.size() > plateau_window) {
      const double prev = c[c.size() - 1 - plateau_window];
      const double gain = (prev - c.back()) / std::max(std::abs(prev), 1e-300);
      if (gain < plateau_tol) {
        out.log.stopped_early = epoch + 1 < epochs;
        break;
      }
    }
  }
  return out;
}

StageResult run_dsft(const Policy& student, std::span<const SftPair> sft_data, const RunConfig& cfg,
                     const Policy* teacher) {
  require(!sft_data.empty(), ErrorKind::kInvalidArgument, "dSFT needs a non-empty SFT set");
  LossSpec spec;
  spec.id = LossId::kSft;
  if (cfg.method == Method::kDsftKl) {
    require(teacher != nullptr, ErrorKind::kInvalidArgument, "dsft_kl needs the teacher policy");
    spec.id = LossId::kSftKl;
    spec.kl_weight = cfg.kl_weight;
  }
  return train_stage("dsft", student, spec, nullptr, teacher, sft_data, {}, cfg.sft_epochs, cfg.batch_size,
                     cfg.sft_optim(), cfg.plateau_tol, cfg.plateau_window);
}

StageResult run_preference_stage(const Policy& pi_dsft, const Policy& teacher,
                                 std::span<const PreferenceTriplet> triplets, const RunConfig& cfg) {
  require(is_preference_method(cfg.method), ErrorKind::kInvalidArgument,
          std::string("method '") + to_string(cfg.method) + "' has no preference stage");
  if (triplets.empty()) {
    StageResult skipped{pi_dsft, StageLog{}};
    skipped.log.name = "preference";
    skipped.log.skipped = true;
    return skipped;
  }
  const Policy ref = pi_dsft;
  return train_stage("preference", pi_dsft, cfg.loss_spec(), &ref, &teacher, {}, triplets, cfg.epochs,
                     cfg.batch_size, cfg.pref_optim(), cfg.plateau_tol, cfg.plateau_window);
}

nlohmann::json RunManifest::to_json() const {
  nlohmann::json stages_j = nlohmann::json::array();
  for (const auto& s : stages) stages_j.push_back(s.to_json());
  nlohmann::json ckpts = nlohmann::json::array();
  for (const auto& c : checkpoints) ckpts.push_back({{"id", c.id}, {"path", c.path}, {"hash", c.hash}});
  return {{"version", version},
          {"config", config.to_json()},
          {"dataset_hashes", dataset_hashes},
          {"dataset_metadata", dataset_metadata},
          {"stages", stages_j},
          {"checkpoints", ckpts},
          {"warnings", warnings},
          {"final_hash", final_hash},
          {"wall_time_s", wall_time_s},
          {"eval", eval},
          {"provenance", provenance}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  try {
    RunManifest m;
    m.version = j.at("version").get<std::string>();
    m.config = RunConfig::parse(j.at("config").at("text").get<std::string>());
    m.dataset_hashes = j.at("dataset_hashes").get<std::map<std::string, std::string>>();
    m.dataset_metadata = j.value("dataset_metadata", nlohmann::json::object());
    for (const auto& s : j.at("stages")) {
      StageLog log;
      log.name = s.at("name").get<std::string>();
      log.loss_curve = s.at("loss_curve").get<std::vector<double>>();
      log.epochs_run = s.at("epochs_run").get<std::size_t>();
      log.stopped_early = s.at("stopped_early").get<bool>();
      log.skipped = s.at("skipped").get<bool>();
      log.checkpoint = s.at("checkpoint").get<std::string>();
      m.stages.push_back(std::move(log));
    }
    for (const auto& c : j.at("checkpoints")) {
      m.checkpoints.push_back({c.at("id").get<std::string>(), c.at("path").get<std::string>(),
                               c.at("hash").get<std::string>()});
    }
    m.warnings = j.at("warnings").get<std::vector<std::string>>();
    m.final_hash = j.at("final_hash").get<std::string>();
    m.wall_time_s = j.at("wall_time_s").get<double>();
    m.eval = j.value("eval", nlohmann::json());
    m.provenance = j.value("provenance", nlohmann::json());
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("malformed manifest: ") + e.what());
  }
}

void RunManifest::save(const std::string& path) const {
  std::ofstream out(path);
  require(out.good(), ErrorKind::kIo, "cannot write manifest '" + path + "'");
  out << to_json().dump(2) << '\n';
}

RunManifest RunManifest::load(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::kIo, "cannot open manifest '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, path + ": " + e.what());
  }
  return from_json(j);
}

namespace {

template <class F>
auto labelled(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e);
  }
}

void record_checkpoint(RunManifest& m, StageLog& log, const Policy& p, const std::string& id,
                       const std::string& out_dir) {
  log.checkpoint = id;
  CheckpointRecord rec{id, "", p.param_hash()};
  if (!out_dir.empty()) {
    rec.path = "ckpt_" + id + ".json";
    save_checkpoint(p, out_dir + "/" + rec.path);
  }
  m.checkpoints.push_back(rec);
}

}  // namespace

DistillResult distill(const std::vector<Prompt>& prompts, const Policy& teacher, const Policy& student,
                      const RunConfig& cfg, const DecodeConfig& decode, const std::string& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  labelled("config", [&] {
    cfg.validate();
    return 0;
  });

  RunManifest m;
  m.version = kVersion;
  m.config = cfg;
  DatasetBundle data = labelled("build_datasets", [&] { return build_datasets(prompts, teacher, student, decode); });
  m.dataset_hashes = {{"prompts", hash_prompts(prompts)}, {"sft", hash_sft(data.sft)},
                      {"triplets", hash_triplets(data.triplets)}};
  m.dataset_metadata = data.metadata();

  StageResult sft = labelled("dsft", [&] { return run_dsft(student, data.sft, cfg, &teacher); });
  labelled("dsft", [&] {
    record_checkpoint(m, sft.log, sft.policy, "dsft", out_dir);
    return 0;
  });
  m.stages.push_back(sft.log);

  Policy final_policy = sft.policy;
  if (is_preference_method(cfg.method)) {
    StageResult pref =
        labelled("preference", [&] { return run_preference_stage(sft.policy, teacher, data.triplets, cfg); });
    if (pref.log.skipped) {
      m.warnings.push_back("preference stage skipped: empty triplet set (" + std::to_string(data.dropped_equal) +
                           " dropped as winner == loser)");
    }
    labelled("preference", [&] {
      record_checkpoint(m, pref.log, pref.policy, "final", out_dir);
      return 0;
    });
    m.stages.push_back(pref.log);
    final_policy = std::move(pref.policy);
  }
  m.final_hash = final_policy.param_hash();
  m.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return DistillResult{std::move(m), std::move(sft.policy), std::move(final_policy), std::move(data)};
}

std::vector<SweepCell> run_sweep(const std::vector<Prompt>& prompts, const Policy& teacher, const Policy& student,
                                 const RunConfig& base, const DecodeConfig& decode, const std::vector<Method>& methods,
                                 const std::function<double(const Policy&, RunManifest&)>& score) {
  base.validate();
  const DatasetBundle data =
      labelled("build_datasets", [&] { return build_datasets(prompts, teacher, student, decode); });
  const std::map<std::string, std::string> hashes{{"prompts", hash_prompts(prompts)},
                                                  {"sft", hash_sft(data.sft)},
                                                  {"triplets", hash_triplets(data.triplets)}};

  // The plain dSFT stage does not depend on preference hyperparameters.
  RunConfig sft_cfg = base;
  sft_cfg.method = Method::kDsft;
  const auto s0 = std::chrono::steady_clock::now();
  StageResult shared = labelled("dsft", [&] { return run_dsft(student, data.sft, sft_cfg, &teacher); });
  shared.log.checkpoint = "dsft";
  const double shared_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - s0).count();

  std::vector<RunConfig> cells;
  for (Method method : methods) {
    RunConfig c = base;
    c.method = method;
    switch (method) {
      case Method::kDsft:
        cells.push_back(c);
        break;
      case Method::kDsftKl:
        for (double w : base.kl_weight_grid) {
          c.kl_weight = w;
          cells.push_back(c);
        }
        break;
      case Method::kDdpo:
      case Method::kRdpo:
        for (double b : base.beta_grid) {
          c.beta = b;
          cells.push_back(c);
        }
        break;
      case Method::kDdpoKl:
        for (double b : base.beta_grid) {
          for (double w : base.kl_weight_grid) {
            c.beta = b;
            c.kl_weight = w;
            cells.push_back(c);
          }
        }
        break;
      case Method::kDadpo:
        for (double b1 : base.beta1_grid) {
          for (double b2 : base.beta2_grid) {
            if (b1 + b2 <= 0) continue;
            c.beta1 = b1;
            c.beta2 = b2;
            cells.push_back(c);
          }
        }
        break;
    }
  }

  std::vector<SweepCell> out;
  for (const auto& c : cells) {
    const auto t0 = std::chrono::steady_clock::now();
    RunManifest m;
    m.version = kVersion;
    m.config = c;
    m.dataset_hashes = hashes;
    m.dataset_metadata = data.metadata();
    Policy final_policy = shared.policy;
    CheckpointRecord dsft_rec{"dsft", "", shared.policy.param_hash()};
    double extra = shared_time;
    if (c.method == Method::kDsftKl) {
      StageResult s = labelled("dsft", [&] { return run_dsft(student, data.sft, c, &teacher); });
      s.log.checkpoint = "dsft";
      dsft_rec.hash = s.policy.param_hash();
      m.stages.push_back(s.log);
      final_policy = std::move(s.policy);
      extra = 0.0;
    } else {
      m.stages.push_back(shared.log);
    }
    m.checkpoints.push_back(dsft_rec);
    if (is_preference_method(c.method)) {
      StageResult pref =
          labelled("preference", [&] { return run_preference_stage(shared.policy, teacher, data.triplets, c); });
      if (pref.log.skipped) m.warnings.push_back("preference stage skipped: empty triplet set");
      pref.log.checkpoint = "final";
      m.checkpoints.push_back({"final", "", pref.policy.param_hash()});
      m.stages.push_back(pref.log);
      final_policy = std::move(pref.policy);
    }
    m.final_hash = final_policy.param_hash();
    SweepCell cell{c.method, c.beta, c.beta1, c.beta2, c.kl_weight, RunManifest{}, 0.0};
    cell.score = score ? score(final_policy, m) : 0.0;
    m.wall_time_s = extra + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    cell.manifest = std::move(m);
    out.push_back(std::move(cell));
  }
  return out;
}

}  // namespace dadpo
